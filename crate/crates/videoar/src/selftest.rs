//! Invariant suite behind `videoar selftest` and the acceptance tests.

use std::time::Instant;

use videoar_core::dmd::{
    dmd_gradient, sample_mean, train_generator, AffineGenerator, GeneratedScorers, MaskSet, NoiseKernel, Scorer, ScorerRole, SymmetricMode,
    TrainConfig,
};
use videoar_core::streaming::{bench_throughput, stream_generate, NoClock, StreamConfig};
use videoar_core::{
    build_mask, gaussian_volume, partition, reconstruct, reverse_mask, step_count, verify_causality, CausalityReport, Dims, GenConfig,
    Generator, GeneratorParams, MaskDirection, NoiseDraw, Rng, Scale, UnitLayout, UnitScheme,
};

use crate::clock::MonotonicClock;

/// Problem sizes for each criterion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub roundtrip_cases: usize,
    pub step_cases: usize,
    /// Largest per-axis extent in the exhaustive mask sweep.
    pub mask_extent: usize,
    pub future_perturbations: usize,
    pub past_perturbations: usize,
    pub gradient_coords: usize,
    pub dmd_steps: usize,
    pub sweep_steps: usize,
    pub stream_cases: usize,
    pub long_segments: usize,
    pub drift_units: usize,
}

impl Profile {
    pub fn full() -> Self {
        Self {
            roundtrip_cases: 200,
            step_cases: 50,
            mask_extent: 8,
            future_perturbations: 100,
            past_perturbations: 20,
            gradient_coords: 50,
            dmd_steps: 5000,
            sweep_steps: 500,
            stream_cases: 50,
            long_segments: 100,
            drift_units: 200,
        }
    }

    pub fn reduced() -> Self {
        Self {
            roundtrip_cases: 50,
            step_cases: 20,
            mask_extent: 4,
            future_perturbations: 20,
            past_perturbations: 5,
            gradient_coords: 20,
            dmd_steps: 5000,
            sweep_steps: 100,
            stream_cases: 10,
            long_segments: 30,
            drift_units: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: u128,
}

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

fn pick(rng: &mut Rng, opts: &[usize]) -> usize {
    opts[(rng.next_u64() % opts.len() as u64) as usize]
}

fn random_exact(rng: &mut Rng) -> (UnitScheme, Dims) {
    let c = pick(rng, &[1, 2, 3]);
    match rng.next_u64() % 3 {
        0 => (UnitScheme::Frame, Dims::new(pick(rng, &[1, 2, 3, 5]), pick(rng, &[1, 2, 4]), pick(rng, &[1, 3, 4]), c)),
        1 => {
            let k = pick(rng, &[2, 3, 4]);
            (UnitScheme::KeyDetail { k }, Dims::new(k * pick(rng, &[1, 2, 3]), pick(rng, &[1, 2, 3]), pick(rng, &[2, 4]), c))
        }
        _ => {
            let (kt, kh, kw) = (pick(rng, &[1, 2, 3]), pick(rng, &[1, 2, 4]), pick(rng, &[1, 2]));
            (UnitScheme::Cube { kt, kh, kw }, Dims::new(kt * pick(rng, &[1, 2]), kh * pick(rng, &[1, 2, 3]), kw * pick(rng, &[1, 2, 4]), c))
        }
    }
}

fn roundtrip(p: &Profile) -> Check {
    let mut rng = Rng::new(0x5eed_0001);
    let mut units = 0;
    for case in 0..p.roundtrip_cases {
        let (scheme, dims) = random_exact(&mut rng);
        let z = gaussian_volume(dims, &mut rng).map_err(|e| e.to_string())?;
        let seq = partition(&z, &scheme).map_err(|e| e.to_string())?;
        units += seq.units.len();
        let back = reconstruct(&seq).map_err(|e| e.to_string())?;
        let same = back.dims() == dims && back.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "case {case}: {scheme:?} on {dims:?} not bit-identical");
    }
    Ok(format!("{} cases, {units} units, bit-identical", p.roundtrip_cases))
}

fn step_counts(p: &Profile) -> Check {
    let mut rng = Rng::new(0x5eed_0002);
    for case in 0..p.step_cases {
        let c = pick(&mut rng, &[1, 2]);
        let t = pick(&mut rng, &[2, 4, 6, 8]);
        let (h, w) = (2 * pick(&mut rng, &[1, 2, 4]), 2 * pick(&mut rng, &[1, 2, 3]));
        let dims = Dims::new(t, h, w, c);
        let k = pick(&mut rng, &[2, 3, 4, 6, 8]);
        let levels = pick(&mut rng, &[1, 2, 3, 4]);
        let mut cases = vec![(UnitScheme::Frame, t), (UnitScheme::Cube { kt: t / 2, kh: h / 2, kw: w / 2 }, 8)];
        if t.is_multiple_of(k) {
            cases.push((UnitScheme::KeyDetail { k }, k));
        }
        let scales = (1..=levels).map(|l| Scale::new((t * l).div_ceil(levels), (h * l).div_ceil(levels), (w * l).div_ceil(levels))).collect();
        cases.push((UnitScheme::Multiscale(scales), levels));
        let z = gaussian_volume(dims, &mut rng).map_err(|e| e.to_string())?;
        for (scheme, want) in cases {
            let n = step_count(&scheme, dims).map_err(|e| e.to_string())?;
            let got = partition(&z, &scheme).map_err(|e| e.to_string())?.units.len();
            ensure!(n == want && got == want, "case {case}: {scheme:?} on {dims:?}: formula {n}, partition {got}, expected {want}");
        }
    }
    Ok(format!("{} sweeps over frame/keydetail/cube/multiscale exact", p.step_cases))
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

fn mask_symmetry(p: &Profile) -> Check {
    let extents: Vec<usize> = [1, 2, 3, 4, 8].into_iter().filter(|&e| e <= p.mask_extent).collect();
    let (mut layouts, mut pairs, mut max_tokens) = (0usize, 0u64, 0usize);
    for &t in &extents {
        for &h in &extents {
            for &w in &extents {
                for tpv in [1, 8] {
                    let dims = Dims::new(t, h, w, 1);
                    if dims.voxels() * tpv > 4096 {
                        continue;
                    }
                    let mut schemes = vec![UnitScheme::Frame];
                    schemes.extend(divisors(t).into_iter().filter(|&k| k >= 2).map(|k| UnitScheme::KeyDetail { k }));
                    for kt in divisors(t) {
                        for kh in divisors(h) {
                            for kw in divisors(w) {
                                schemes.push(UnitScheme::Cube { kt, kh, kw });
                            }
                        }
                    }
                    schemes.push(UnitScheme::Multiscale(vec![Scale::new(t.div_ceil(2), h.div_ceil(2), w.div_ceil(2)), Scale::new(t, h, w)]));
                    if tpv > 1 {
                        schemes.truncate(4);
                    }
                    for scheme in schemes {
                        let layout = UnitLayout::for_scheme(&scheme, dims, tpv).map_err(|e| e.to_string())?;
                        let n = layout.total_tokens();
                        let fwd = build_mask(&layout, MaskDirection::Forward).map_err(|e| e.to_string())?;
                        let bwd = build_mask(&layout, MaskDirection::Backward).map_err(|e| e.to_string())?;
                        for (m, dir) in [(&fwd, MaskDirection::Forward), (&bwd, MaskDirection::Backward)] {
                            let report = verify_causality(m, dir);
                            ensure!(report == CausalityReport::Clean, "{scheme:?} {dims:?} x{tpv}: {report:?}");
                        }
                        let rev = reverse_mask(&fwd);
                        let want = build_mask(&layout.reversed(), MaskDirection::Backward).map_err(|e| e.to_string())?;
                        ensure!(rev == want, "{scheme:?} {dims:?} x{tpv}: reversed forward mask is not the backward mask");
                        ensure!(reverse_mask(&bwd) == build_mask(&layout.reversed(), MaskDirection::Forward).map_err(|e| e.to_string())?,
                            "{scheme:?} {dims:?} x{tpv}: reversed backward mask is not the forward mask");
                        layouts += 1;
                        pairs += 2 * (n * n) as u64;
                        max_tokens = max_tokens.max(n);
                    }
                }
            }
        }
    }
    Ok(format!("{layouts} layouts up to {max_tokens} tokens, {pairs} query/key pairs checked, reversal exact"))
}

fn perturbed_generator(scheme: UnitScheme, dims: Dims, d_model: usize, scale: f64, seed: u64) -> Result<(Generator, GeneratorParams), String> {
    let mut cfg = GenConfig::small(scheme, dims, seed);
    cfg.d_model = d_model;
    let gen = Generator::new(cfg).map_err(|e| e.to_string())?;
    let mut params = gen.init_params();
    if scale > 0.0 {
        let mut rng = Rng::new(seed ^ 0xabcd);
        let delta: Vec<f64> = (0..params.len()).map(|_| scale * rng.normal()).collect();
        params.apply(&delta);
    }
    Ok((gen, params))
}

fn generator_causality(p: &Profile) -> Check {
    let (gen, params) = perturbed_generator(UnitScheme::Cube { kt: 2, kh: 2, kw: 2 }, Dims::new(4, 4, 4, 2), 16, 0.1, 3)?;
    let n = gen.n_units();
    let target = n / 2;
    let c = gen.channels();
    let mut rng = Rng::new(0x5eed_0004);
    let mut context = vec![0.0; gen.buffer_len()];
    rng.fill_normal(&mut context);
    let noise = NoiseDraw::sample(11, target, gen.unit_len(target));
    let run = |ctx: &[f64]| gen.forward(&params, ctx, target, &noise, gen.mask()).map_err(|e| e.to_string());
    let base = run(&context)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for trial in 0..p.future_perturbations {
        let j = target + 1 + (trial % (n - target - 1));
        let mut ctx = context.clone();
        let r = gen.layout().unit_range(j);
        for v in &mut ctx[r.start * c..r.end * c] {
            *v += 10.0 * rng.normal();
        }
        ensure!(bits(&run(&ctx)?) == bits(&base), "perturbing future unit {j} changed unit {target}");
    }
    for trial in 0..p.past_perturbations {
        let j = trial % target;
        let mut ctx = context.clone();
        let r = gen.layout().unit_range(j);
        for v in &mut ctx[r.start * c..r.end * c] {
            *v += 0.5 + rng.normal();
        }
        ensure!(bits(&run(&ctx)?) != bits(&base), "perturbing past unit {j} left unit {target} unchanged");
    }
    Ok(format!(
        "unit {target}/{n}: {} future perturbations bit-identical, {} past perturbations all changed it",
        p.future_perturbations, p.past_perturbations
    ))
}

/// Worst relative error between backward and central differences of step
/// `step` over sampled coordinates of every block.
fn gradient_check(gen: &Generator, params: &GeneratorParams, seed: u64, step: f64, coords: usize, tol: f64) -> Result<(f64, usize), String> {
    let theta = params.to_f64();
    let mut rng = Rng::new(seed ^ 0x5eed_0005);
    let target = gen.n_units() - 1;
    let mut context = vec![0.0; gen.buffer_len()];
    rng.fill_normal(&mut context);
    let noise = NoiseDraw::sample(seed, target, gen.unit_len(target));
    let mut up = vec![0.0; gen.unit_len(target)];
    rng.fill_normal(&mut up);
    let loss = |th: &[f64]| -> Result<f64, String> {
        let out = gen.forward_theta(th, &context, target, &noise, gen.mask()).map_err(|e| e.to_string())?;
        Ok(out.iter().zip(&up).map(|(a, b)| a * b).sum())
    };
    let grad = gen.backward_theta(&theta, &context, target, &noise, gen.mask(), &up).map_err(|e| e.to_string())?;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for b in &params.blocks {
        let picks: Vec<usize> = if b.len <= coords {
            (0..b.len).collect()
        } else {
            (0..coords).map(|_| (rng.next_u64() % b.len as u64) as usize).collect()
        };
        for i in picks {
            let idx = b.offset + i;
            let mut th = theta.clone();
            th[idx] = theta[idx] + step;
            let lp = loss(&th)?;
            th[idx] = theta[idx] - step;
            let lm = loss(&th)?;
            let fd = (lp - lm) / (2.0 * step);
            let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
            ensure!(err < tol, "{} [{i}] at step {step:e}: backward {} vs fd {fd} (rel {err:.2e})", b.name, grad[idx]);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn finite_difference(p: &Profile) -> Check {
    const STEP: f64 = 1e-3;
    const TOL: f64 = 1e-4;
    let schemes = [
        (UnitScheme::Cube { kt: 1, kh: 2, kw: 2 }, Dims::new(2, 2, 4, 2)),
        (UnitScheme::KeyDetail { k: 2 }, Dims::new(4, 2, 2, 1)),
        (UnitScheme::Frame, Dims::new(3, 2, 2, 2)),
        (UnitScheme::Multiscale(vec![Scale::new(1, 1, 2), Scale::new(2, 2, 4)]), Dims::new(2, 2, 4, 1)),
    ];
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (i, (scheme, dims)) in schemes.iter().enumerate() {
        let (gen, params) = perturbed_generator(scheme.clone(), *dims, 8, 0.0, i as u64 + 1)?;
        let (w, n) = gradient_check(&gen, &params, i as u64 + 1, STEP, p.gradient_coords, TOL)?;
        worst = worst.max(w);
        checked += n;
    }
    let (gen, params) = perturbed_generator(UnitScheme::KeyDetail { k: 2 }, Dims::new(4, 2, 2, 1), 8, 0.2, 2)?;
    let (off_init, n) = gradient_check(&gen, &params, 2, STEP / 10.0, p.gradient_coords, TOL)?;
    Ok(format!(
        "initialised generators: {checked} coordinates over every block at step {STEP:e}, worst relative error {worst:.2e}; \
         perturbed parameters: {n} coordinates at step {:e}, worst {off_init:.2e}",
        STEP / 10.0
    ))
}

fn symmetric_dmd(p: &Profile) -> Check {
    let layout = UnitLayout::from_tokens(vec![1]).map_err(|e| e.to_string())?;
    let masks = MaskSet::new(&layout).map_err(|e| e.to_string())?;
    let kernel = NoiseKernel::default();
    let real = Scorer::analytic(vec![0.7], 1.3, ScorerRole::Real);
    let fwd = Scorer::analytic(vec![0.7], 1.3, ScorerRole::GeneratedForward);
    let bwd = Scorer::analytic(vec![0.7], 1.3, ScorerRole::GeneratedBackward);
    let full = Scorer::analytic(vec![0.7], 1.3, ScorerRole::GeneratedFull);
    let gen = GeneratedScorers { full: Some(&full), forward: Some(&fwd), backward: Some(&bwd) };
    let mut rng = Rng::new(0x5eed_0006);
    for mode in SymmetricMode::ALL {
        for _ in 0..1000 {
            let x = [3.0 * rng.normal()];
            let d = dmd_gradient(&x, &real, gen, &masks, &kernel, mode, &mut rng).map_err(|e| e.to_string())?;
            ensure!(d.bracket == [0.0], "{mode:?}: matched scorers gave bracket {:?}", d.bracket);
        }
    }

    let target = Scorer::analytic(vec![3.0], 1.0, ScorerRole::Real);
    let mut g = AffineGenerator::new(1, 1.0, 0.0);
    let cfg = TrainConfig { steps: p.dmd_steps, seed: 0, ..TrainConfig::default() };
    train_generator(&cfg, &target, &mut g, &layout, 1, |_| {}).map_err(|e| e.to_string())?;
    let mean = sample_mean(&g, 20_000, 0xfeed).map_err(|e| e.to_string())?;
    ensure!((mean - 3.0).abs() <= 0.05, "N(3,1) run ended at sample mean {mean:.4}");

    let mut finals = Vec::new();
    for mode in SymmetricMode::ALL {
        let mut g = AffineGenerator::new(1, 1.0, 0.0);
        let cfg = TrainConfig { steps: p.sweep_steps, seed: 1, mode, ..TrainConfig::default() };
        let out = train_generator(&cfg, &target, &mut g, &layout, 1, |_| {}).map_err(|e| e.to_string())?;
        ensure!(out.trace.len() == p.sweep_steps, "{mode:?}: trace has {} records", out.trace.len());
        ensure!(
            out.trace.iter().all(|r| r.gen_mean.is_finite() && r.bracket_rms.is_finite() && r.scorer_loss.is_finite()),
            "{mode:?}: non-finite trace"
        );
        finals.push(format!("{}={:.3}", mode.name(), out.trace.last().map_or(f64::NAN, |r| r.gen_mean)));
    }
    Ok(format!(
        "matched bracket 0 over 4000 draws; {} steps -> mean {mean:.4}; sweep ({} steps) {}",
        p.dmd_steps,
        p.sweep_steps,
        finals.join(" ")
    ))
}

fn random_stream_case(rng: &mut Rng) -> (UnitScheme, Dims) {
    let c = pick(rng, &[1, 2]);
    match rng.next_u64() % 4 {
        0 => (UnitScheme::Frame, Dims::new(pick(rng, &[1, 2, 4]), pick(rng, &[1, 2]), pick(rng, &[1, 2, 3]), c)),
        1 => {
            let k = pick(rng, &[2, 3]);
            (UnitScheme::KeyDetail { k }, Dims::new(k * pick(rng, &[1, 2]), pick(rng, &[1, 2]), 2, c))
        }
        2 => (UnitScheme::Cube { kt: pick(rng, &[1, 2]), kh: 1, kw: 2 }, Dims::new(2, pick(rng, &[1, 2]), 4, c)),
        _ => (
            UnitScheme::Multiscale(vec![Scale::new(1, 1, 1), Scale::new(1, 2, 2), Scale::new(2, 2, 4)]),
            Dims::new(2, 2, 4, c),
        ),
    }
}

fn streaming(p: &Profile) -> Check {
    let mut rng = Rng::new(0x5eed_0007);
    for case in 0..p.stream_cases {
        let (scheme, dims) = random_stream_case(&mut rng);
        let (gen, params) = perturbed_generator(scheme.clone(), dims, 16, 0.1, case as u64)?;
        let seed = rng.next_u64();
        let want = gen.generate_sequence(&params, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        let cfg = StreamConfig { window: gen.n_units() + case % 3, pin_first: false };
        let (units, _) = stream_generate(&gen, &params, 1, cfg, &mut Rng::new(seed), &mut NoClock).map_err(|e| e.to_string())?;
        let same = units.len() == want.units.len()
            && units.iter().zip(&want.units).all(|(a, b)| {
                a.index == b.index && a.payload.iter().map(|v| v.to_bits()).eq(b.payload.iter().map(|v| v.to_bits()))
            });
        ensure!(same, "case {case}: {scheme:?} on {dims:?} streaming differs from full generation");
    }

    let (gen, params) = perturbed_generator(UnitScheme::Frame, Dims::new(4, 2, 2, 2), 16, 0.0, 9)?;
    let cfg = StreamConfig { window: 6, pin_first: false };
    let peak = |segments| -> Result<usize, String> {
        let (_, m) = stream_generate(&gen, &params, segments, cfg, &mut Rng::new(5), &mut NoClock).map_err(|e| e.to_string())?;
        Ok(m.peak_resident_bytes)
    };
    let (short, long) = (peak(10)?, peak(p.long_segments)?);
    let rel = (long as f64 - short as f64).abs() / short as f64;
    ensure!(rel <= 0.01, "peak KV bytes {short} (10 segments) vs {long} ({} segments)", p.long_segments);

    let (gen, params) = perturbed_generator(UnitScheme::Frame, Dims::new(8, 4, 4, 2), 16, 0.0, 10)?;
    let cfg = StreamConfig { window: 8, pin_first: false };
    let warmup = 20;
    let r = bench_throughput(&gen, &params, cfg, p.drift_units, warmup, 6, &mut MonotonicClock::default()).map_err(|e| e.to_string())?;
    ensure!(r.mults_match_analytic, "instrumented attention cost differs from the analytic count");
    ensure!(
        !r.drift_flag,
        "latency drift {:.1}% (medians {} ns -> {} ns)",
        100.0 * r.drift,
        r.median_leading_ns,
        r.median_trailing_ns
    );
    Ok(format!(
        "{} equivalence cases bit-identical; peak KV {short} B (10 seg) vs {long} B ({} seg); drift {:+.1}% over {} units",
        p.stream_cases,
        p.long_segments,
        100.0 * r.drift,
        p.drift_units
    ))
}

pub const CRITERIA: [(u8, &str); 7] = [
    (1, "round-trip exactness"),
    (2, "step-count formulas"),
    (3, "mask causality and symmetry"),
    (4, "generator causality fuzz"),
    (5, "gradient exactness"),
    (6, "symmetric DMD correctness"),
    (7, "streaming equivalence and boundedness"),
];

pub fn run_criterion(id: u8, p: &Profile) -> Outcome {
    let start = Instant::now();
    let result = match id {
        1 => roundtrip(p),
        2 => step_counts(p),
        3 => mask_symmetry(p),
        4 => generator_causality(p),
        5 => finite_difference(p),
        6 => symmetric_dmd(p),
        7 => streaming(p),
        _ => Err(format!("no criterion {id}")),
    };
    let name = CRITERIA.iter().find(|(i, _)| *i == id).map_or("unknown", |(_, n)| n);
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Outcome {
        id,
        name,
        passed,
        detail,
        elapsed_ms: start.elapsed().as_millis(),
    }
}

pub fn run_all(p: &Profile, mut on_outcome: impl FnMut(&Outcome)) -> Vec<Outcome> {
    CRITERIA
        .iter()
        .map(|&(id, _)| {
            let o = run_criterion(id, p);
            on_outcome(&o);
            o
        })
        .collect()
}
