use std::time::Instant;

use videoar_core::streaming::{attention_mults, bench_throughput, stream_generate, stream_units, Clock, NoClock, StreamConfig, DRIFT_LIMIT};
use videoar_core::{Dims, GenConfig, Generator, GeneratorParams, Rng, Scale, UnitScheme};

fn random_case(rng: &mut Rng) -> (UnitScheme, Dims) {
    let pick = |rng: &mut Rng, opts: &[usize]| opts[(rng.next_u64() % opts.len() as u64) as usize];
    let c = pick(rng, &[1, 2]);
    match rng.next_u64() % 4 {
        0 => (UnitScheme::Frame, Dims::new(pick(rng, &[1, 2, 3, 4]), pick(rng, &[1, 2]), pick(rng, &[1, 2, 3]), c)),
        1 => {
            let k = pick(rng, &[2, 3]);
            (UnitScheme::KeyDetail { k }, Dims::new(k * pick(rng, &[1, 2]), pick(rng, &[1, 2]), 2, c))
        }
        2 => {
            let (kt, kh, kw) = (pick(rng, &[1, 2]), pick(rng, &[1, 2]), pick(rng, &[1, 2]));
            (UnitScheme::Cube { kt, kh, kw }, Dims::new(2 * kt, kh * pick(rng, &[1, 2]), 2 * kw, c))
        }
        _ => {
            let dims = Dims::new(2, 2, pick(rng, &[2, 4]), c);
            let scales = vec![Scale::new(1, 1, 1), Scale::new(1, 2, 2), Scale::new(2, 2, dims.w)];
            (UnitScheme::Multiscale(scales), dims)
        }
    }
}

/// Init parameters plus a random perturbation so outputs are far from trivial.
fn perturbed(gen: &Generator, rng: &mut Rng) -> GeneratorParams {
    let mut p = gen.init_params();
    let delta: Vec<f64> = (0..p.len()).map(|_| 0.1 * rng.normal()).collect();
    p.apply(&delta);
    p
}

#[test]
fn wide_window_matches_full_generation_bitwise() {
    let mut rng = Rng::new(2024);
    for case in 0..50 {
        let (scheme, dims) = random_case(&mut rng);
        let gen = Generator::new(GenConfig::small(scheme.clone(), dims, case)).unwrap();
        let params = perturbed(&gen, &mut rng);
        let seed = rng.next_u64();
        let extra = (rng.next_u64() % 3) as usize;
        let want = gen.generate_sequence(&params, &mut Rng::new(seed)).unwrap();
        let cfg = StreamConfig { window: gen.n_units() + extra, pin_first: false };
        let (units, metrics) = stream_generate(&gen, &params, 1, cfg, &mut Rng::new(seed), &mut NoClock).unwrap();
        assert_eq!(units.len(), want.units.len());
        for (a, b) in units.iter().zip(&want.units) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.ownership, b.ownership);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.payload), bits(&b.payload), "case {case} {scheme:?} {dims:?} unit {}", a.index);
        }
        for (i, m) in metrics.per_unit.iter().enumerate() {
            assert_eq!(m.context_units, i);
        }
    }
}

fn small_frame() -> (Generator, GeneratorParams) {
    let gen = Generator::new(GenConfig::small(UnitScheme::Frame, Dims::new(4, 2, 2, 2), 3)).unwrap();
    let p = gen.init_params();
    (gen, p)
}

#[test]
fn single_unit_window_runs_one_hundred_segments() {
    let (gen, p) = small_frame();
    let cfg = StreamConfig { window: 1, pin_first: false };
    let metrics = stream_units(&gen, &p, 100 * gen.n_units(), cfg, &mut Rng::new(1), &mut NoClock, |u, m| {
        assert!(u.payload.iter().all(|v| v.is_finite()));
        assert_eq!(m.context_units, usize::from(u.index > 0));
    })
    .unwrap();
    assert_eq!(metrics.units_generated, 400);
}

#[test]
fn resident_units_never_exceed_window() {
    let (gen, p) = small_frame();
    for (window, pin) in [(1, false), (2, true), (3, false), (5, true)] {
        let cfg = StreamConfig { window, pin_first: pin };
        stream_units(&gen, &p, 40, cfg, &mut Rng::new(2), &mut NoClock, |_, m| {
            assert!(m.context_units <= window);
            assert!(m.resident_bytes <= window * 2 * 2 * 4 * 16 * 8);
        })
        .unwrap();
    }
}

#[test]
fn peak_memory_is_independent_of_length() {
    let (gen, p) = small_frame();
    let cfg = StreamConfig { window: 6, pin_first: false };
    let run = |segments| stream_generate(&gen, &p, segments, cfg, &mut Rng::new(9), &mut NoClock).unwrap().1.peak_resident_bytes;
    let (short, long) = (run(10), run(100));
    assert!((long as f64 - short as f64).abs() <= 0.01 * short as f64, "{short} vs {long}");
}

#[test]
fn attention_cost_is_constant_and_analytic() {
    let (gen, p) = small_frame();
    let window = 3;
    let cfg = StreamConfig { window, pin_first: false };
    let run = |n| stream_units(&gen, &p, n, cfg, &mut Rng::new(4), &mut NoClock, |_, _| {}).unwrap();
    let short = run(20);
    let long = run(200);
    let tokens = 4;
    // Independent count: per layer, per query token, 2·d multiplies per key.
    let steady = 2 * 2 * tokens * 2 * 16 * (window * tokens + tokens);
    for m in &long.per_unit[window..] {
        assert_eq!(m.attention_mults, steady as u64);
    }
    assert_eq!(short.per_unit[window..].iter().map(|m| m.attention_mults).max(), long.per_unit[window..].iter().map(|m| m.attention_mults).max());
    assert_eq!(attention_mults(&gen, tokens, window * tokens), steady as u64);
}

#[test]
fn doubling_window_increases_attention_cost() {
    let (gen, p) = small_frame();
    let mut prev = 0;
    for window in [1, 2, 4, 8] {
        let r = bench_throughput(&gen, &p, StreamConfig { window, pin_first: false }, 40, 10, 5, &mut NoClock).unwrap();
        assert!(r.mults_match_analytic);
        assert!(r.max_attention_mults > prev);
        prev = r.max_attention_mults;
    }
}

#[test]
fn pinned_stream_keeps_first_unit() {
    let (gen, p) = small_frame();
    let cfg = StreamConfig { window: 3, pin_first: true };
    let m = stream_units(&gen, &p, 30, cfg, &mut Rng::new(6), &mut NoClock, |_, _| {}).unwrap();
    assert!(m.per_unit.iter().skip(3).all(|u| u.context_units == 3));
}

#[test]
fn streaming_is_deterministic() {
    let (gen, p) = small_frame();
    let cfg = StreamConfig { window: 2, pin_first: false };
    let a = stream_generate(&gen, &p, 5, cfg, &mut Rng::new(8), &mut NoClock).unwrap();
    let b = stream_generate(&gen, &p, 5, cfg, &mut Rng::new(8), &mut NoClock).unwrap();
    assert_eq!(a, b);
}

struct Wall(Instant);

impl Clock for Wall {
    fn now_ns(&mut self) -> u64 {
        self.0.elapsed().as_nanos() as u64
    }
}

#[test]
fn bench_metrics_match_a_plain_stream() {
    let gen = Generator::new(GenConfig::small(UnitScheme::KeyDetail { k: 2 }, Dims::new(4, 2, 2, 2), 3)).unwrap();
    let p = perturbed(&gen, &mut Rng::new(3));
    let cfg = StreamConfig { window: 3, pin_first: true };
    for (n, warmup) in [(40, 10), (41, 10), (12, 0), (3, 1)] {
        let r = bench_throughput(&gen, &p, cfg, n, warmup, 7, &mut NoClock).unwrap();
        let plain = stream_units(&gen, &p, n, cfg, &mut Rng::new(7), &mut NoClock, |_, _| {}).unwrap();
        assert_eq!(r.metrics, plain, "n={n} warmup={warmup}");
    }
}

#[test]
fn unbounded_context_trips_the_drift_flag() {
    let gen = Generator::new(GenConfig::small(UnitScheme::Frame, Dims::new(4, 2, 2, 2), 1)).unwrap();
    let p = gen.init_params();
    let grow = bench_throughput(&gen, &p, StreamConfig { window: 120, pin_first: false }, 120, 10, 1, &mut Wall(Instant::now())).unwrap();
    assert!(grow.drift_flag, "drift {}", grow.drift);
    let fixed = bench_throughput(&gen, &p, StreamConfig { window: 4, pin_first: false }, 120, 10, 1, &mut Wall(Instant::now())).unwrap();
    assert!(!fixed.drift_flag, "drift {}", fixed.drift);
    assert!(grow.drift > 1.0 && fixed.drift.abs() < DRIFT_LIMIT, "{} vs {}", grow.drift, fixed.drift);
}
