use videoar_core::dmd::{
    dmd_gradient, dmd_gradient_at, fit_generated_scorer, sample_mean, score, train_generator, AffineGenerator, CausalGenerator,
    DistilledGenerator, FitConfig, GeneratedScorers, MaskSet, NoiseKernel, Scorer, ScorerRole, SymmetricMode, TrainConfig,
};
use videoar_core::{Dims, GenConfig, Generator, Rng, UnitLayout, UnitScheme};

fn scalar_masks() -> (UnitLayout, MaskSet) {
    let l = UnitLayout::from_tokens(vec![1]).unwrap();
    let m = MaskSet::new(&l).unwrap();
    (l, m)
}

/// Independent closed form: score of N(a μ, a² σ² + b²) at x.
fn oracle_score(x: f64, mu: f64, var: f64, tau: f64) -> f64 {
    let a = (std::f64::consts::PI * tau / 2.0).cos();
    let b = (std::f64::consts::PI * tau / 2.0).sin();
    -(x - a * mu) / (a * a * var + b * b)
}

#[test]
fn analytic_score_matches_closed_form() {
    let (_, m) = scalar_masks();
    let k = NoiseKernel::default();
    let mut rng = Rng::new(11);
    for _ in 0..500 {
        let mu = rng.uniform(-4.0, 4.0);
        let var = rng.uniform(0.1, 5.0);
        let tau = rng.uniform(0.02, 0.98);
        let x = 3.0 * rng.normal();
        let s = Scorer::analytic(vec![mu], var, ScorerRole::Real);
        let got = score(&s, &[x], tau, &k, &m.full).unwrap()[0];
        let want = oracle_score(x, mu, var, tau);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn expected_bracket_is_alpha_times_mean_gap() {
    // Real N(μ_d, 1), generated N(μ_g, 1.69) with matching scorers: at fixed τ
    // E[s_real - s_gen] over x~ from the generated law is a (μ_d - μ_g).
    let (_, m) = scalar_masks();
    let k = NoiseKernel::default();
    let (mu_d, mu_g) = (1.0, -0.5);
    let real = Scorer::analytic(vec![mu_d], 1.0, ScorerRole::Real);
    let fwd = Scorer::analytic(vec![mu_g], 1.69, ScorerRole::GeneratedForward);
    let gen = GeneratedScorers { forward: Some(&fwd), ..Default::default() };
    let mut rng = Rng::new(5);
    for tau in [0.1, 0.5, 0.9] {
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = mu_g + 1.3 * rng.normal();
            sum += dmd_gradient_at(&[x], &real, gen, &m, &k, SymmetricMode::ForwardOnly, tau, &mut rng).unwrap().bracket[0];
        }
        let want = k.alpha(tau) * (mu_d - mu_g);
        assert!((sum / n as f64 - want).abs() < 0.03, "tau {tau}: {} vs {want}", sum / n as f64);
    }
}

#[test]
fn update_direction_points_at_data_mean() {
    let (_, m) = scalar_masks();
    let k = NoiseKernel::default();
    let mut rng = Rng::new(77);
    let mut correct = 0;
    for rep in 0..100 {
        let mu_g = rng.uniform(-3.0, 3.0);
        let gap = rng.uniform(0.5, 2.0) * if rep % 2 == 0 { 1.0 } else { -1.0 };
        let mu_d = mu_g + gap;
        let real = Scorer::analytic(vec![mu_d], 1.0, ScorerRole::Real);
        let fwd = Scorer::analytic(vec![mu_g], 1.69, ScorerRole::GeneratedForward);
        let gen = GeneratedScorers { forward: Some(&fwd), ..Default::default() };
        let generator = AffineGenerator::new(1, 1.3, mu_g);
        let mut shift_update = 0.0;
        for _ in 0..10_000 {
            let s = generator.sample(&mut rng).unwrap();
            let d = dmd_gradient(&s.x, &real, gen, &m, &k, SymmetricMode::ForwardOnly, &mut rng).unwrap();
            shift_update -= generator.pullback(&s, &d.grad).unwrap()[1];
        }
        if shift_update.signum() == gap.signum() {
            correct += 1;
        }
    }
    assert!(correct >= 99, "{correct}/100");
}

#[test]
fn unused_scorers_do_not_affect_the_gradient() {
    let layout = UnitLayout::from_tokens(vec![2, 2, 2]).unwrap();
    let masks = MaskSet::new(&layout).unwrap();
    let k = NoiseKernel::default();
    let real = Scorer::analytic(vec![0.5; 12], 1.0, ScorerRole::Real);
    let mut rng = Rng::new(3);
    let mut scorer = |role| {
        let mut s = Scorer::learned(layout.clone(), 2, role);
        for p in s.as_learned_mut().unwrap().params_mut() {
            *p = 0.2 * rng.normal();
        }
        s
    };
    let full = scorer(ScorerRole::GeneratedFull);
    let fwd = scorer(ScorerRole::GeneratedForward);
    let bwd = scorer(ScorerRole::GeneratedBackward);
    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    let cases = [
        (SymmetricMode::ForwardOnly, ScorerRole::GeneratedBackward),
        (SymmetricMode::BackwardOnly, ScorerRole::GeneratedForward),
        (SymmetricMode::Full, ScorerRole::GeneratedForward),
        (SymmetricMode::ForwardOnly, ScorerRole::GeneratedFull),
    ];
    let mut fuzz = Rng::new(99);
    for (mode, unused) in cases {
        let base = GeneratedScorers { full: Some(&full), forward: Some(&fwd), backward: Some(&bwd) };
        let want = dmd_gradient(&x, &real, base, &masks, &k, mode, &mut Rng::new(8)).unwrap();
        for _ in 0..20 {
            let mut other = match unused {
                ScorerRole::GeneratedFull => full.clone(),
                ScorerRole::GeneratedForward => fwd.clone(),
                _ => bwd.clone(),
            };
            for p in other.as_learned_mut().unwrap().params_mut() {
                *p = 5.0 * fuzz.normal();
            }
            let mut g = base;
            match unused {
                ScorerRole::GeneratedFull => g.full = Some(&other),
                ScorerRole::GeneratedForward => g.forward = Some(&other),
                _ => g.backward = Some(&other),
            }
            let got = dmd_gradient(&x, &real, g, &masks, &k, mode, &mut Rng::new(8)).unwrap();
            assert_eq!(got, want, "{mode:?} read the {unused:?} scorer");
        }
    }
}

#[test]
fn forward_plus_backward_averages_the_two_scores() {
    let layout = UnitLayout::from_tokens(vec![1, 1]).unwrap();
    let masks = MaskSet::new(&layout).unwrap();
    let k = NoiseKernel::default();
    let real = Scorer::analytic(vec![0.0; 2], 1.0, ScorerRole::Real);
    let fwd = Scorer::analytic(vec![1.0, 2.0], 1.0, ScorerRole::GeneratedForward);
    let bwd = Scorer::analytic(vec![3.0, -2.0], 1.0, ScorerRole::GeneratedBackward);
    let g = GeneratedScorers { forward: Some(&fwd), backward: Some(&bwd), full: None };
    let x = [0.3, -0.4];
    let both = dmd_gradient_at(&x, &real, g, &masks, &k, SymmetricMode::ForwardPlusBackward, 0.5, &mut Rng::new(1)).unwrap();
    let f = dmd_gradient_at(&x, &real, g, &masks, &k, SymmetricMode::ForwardOnly, 0.5, &mut Rng::new(1)).unwrap();
    let b = dmd_gradient_at(&x, &real, g, &masks, &k, SymmetricMode::BackwardOnly, 0.5, &mut Rng::new(1)).unwrap();
    for i in 0..2 {
        assert!((both.bracket[i] - 0.5 * (f.bracket[i] + b.bracket[i])).abs() < 1e-12);
    }
}

#[test]
fn score_matching_recovers_gaussian_slope() {
    let (layout, masks) = scalar_masks();
    let k = NoiseKernel::default();
    let var = 4.0;
    let mut rng = Rng::new(21);
    let samples: Vec<Vec<f64>> = (0..256).map(|_| vec![1.5 + 2.0 * rng.normal()]).collect();
    let mut s = Scorer::learned(layout, 1, ScorerRole::GeneratedForward);
    let losses = fit_generated_scorer(&mut s, &samples, &k, &masks, FitConfig { steps: 1500, lr: 0.02 }, &mut rng).unwrap();
    let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "{first} -> {last}");
    for tau in [0.2, 0.5] {
        let lo = score(&s, &[0.0], tau, &k, &masks.forward).unwrap()[0];
        let hi = score(&s, &[1.0], tau, &k, &masks.forward).unwrap()[0];
        let a = k.alpha(tau);
        let want = -1.0 / (a * a * var + k.beta(tau).powi(2));
        assert!(((hi - lo) - want).abs() < 0.1 * want.abs(), "tau {tau}: slope {} vs {want}", hi - lo);
    }
}

fn run_scalar(target_mean: f64, init_mean: f64, mode: SymmetricMode, steps: usize, seed: u64) -> (f64, AffineGenerator) {
    let (layout, _) = scalar_masks();
    let real = Scorer::analytic(vec![target_mean], 1.0, ScorerRole::Real);
    let mut g = AffineGenerator::new(1, 1.0, init_mean);
    let cfg = TrainConfig { steps, seed, mode, ..TrainConfig::default() };
    let out = train_generator(&cfg, &real, &mut g, &layout, 1, |_| {}).unwrap();
    assert_eq!(out.trace.len(), steps);
    (sample_mean(&g, 20_000, seed ^ 0xfeed).unwrap(), g)
}

#[test]
fn scalar_generator_converges_to_target_mean() {
    let (mean, g) = run_scalar(3.0, 0.0, SymmetricMode::ForwardPlusBackward, 5000, 0);
    assert!((mean - 3.0).abs() <= 0.05, "final mean {mean}, generator {g:?}");
}

#[test]
fn matched_start_does_not_drift() {
    let (mean, g) = run_scalar(0.0, 0.0, SymmetricMode::ForwardPlusBackward, 2000, 1);
    assert!(mean.abs() <= 0.05, "final mean {mean}, generator {g:?}");
}

#[test]
fn every_mode_trains_and_reports_the_same_schema() {
    for mode in SymmetricMode::ALL {
        let (mean, _) = run_scalar(2.0, 0.0, mode, 1500, 4);
        assert!((mean - 2.0).abs() < 0.2, "{mode:?}: {mean}");
    }
}

#[test]
fn causal_generator_trains_in_every_mode() {
    let dims = Dims::new(2, 2, 2, 1);
    let scheme = UnitScheme::Frame;
    let mut cfg = GenConfig::small(scheme.clone(), dims, 7);
    cfg.d_model = 8;
    let gen = Generator::new(cfg).unwrap();
    let layout = gen.layout().clone();
    let params = gen.init_params();
    let real = Scorer::analytic(vec![1.0; gen.buffer_len()], 1.0, ScorerRole::Real);
    for mode in SymmetricMode::ALL {
        let mut cg = CausalGenerator { generator: gen.clone(), params: params.clone() };
        let before = sample_mean(&cg, 64, 1).unwrap();
        let cfg = TrainConfig { steps: 40, batch_size: 4, scorer_updates: 2, seed: 3, mode, ..TrainConfig::default() };
        let out = train_generator(&cfg, &real, &mut cg, &layout, 1, |_| {}).unwrap();
        assert_eq!(out.trace.len(), 40);
        assert!(out.trace.iter().all(|r| r.gen_mean.is_finite() && r.bracket_rms.is_finite()));
        let after = sample_mean(&cg, 64, 1).unwrap();
        assert!((after - 1.0).abs() < (before - 1.0).abs(), "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn learned_scorers_respect_their_masks() {
    let layout = UnitLayout::from_tokens(vec![2, 1, 3, 2]).unwrap();
    let masks = MaskSet::new(&layout).unwrap();
    let k = NoiseKernel::default();
    let c = 2;
    let mut rng = Rng::new(12);
    for role in [ScorerRole::GeneratedForward, ScorerRole::GeneratedBackward] {
        let mut s = Scorer::learned(layout.clone(), c, role);
        for p in s.as_learned_mut().unwrap().params_mut() {
            *p = 0.5 * rng.normal();
        }
        let mask = masks.get(role.direction());
        let x: Vec<f64> = (0..layout.total_tokens() * c).map(|_| rng.normal()).collect();
        let base = score(&s, &x, 0.4, &k, mask).unwrap();
        for i in 0..layout.n_units() {
            for j in 0..layout.n_units() {
                let hidden = match role {
                    ScorerRole::GeneratedForward => j > i,
                    _ => j < i,
                };
                let mut y = x.clone();
                for t in layout.unit_range(j) {
                    for ch in 0..c {
                        y[t * c + ch] += 1.0 + rng.normal();
                    }
                }
                let out = score(&s, &y, 0.4, &k, mask).unwrap();
                let r = layout.unit_range(i);
                let same = base[r.start * c..r.end * c] == out[r.start * c..r.end * c];
                assert_eq!(same, hidden, "{role:?}: unit {i} vs perturbed unit {j}");
            }
        }
    }
}
