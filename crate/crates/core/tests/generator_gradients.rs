//! Reverse-mode gradients checked against central finite differences.

use videoar_core::generator::{GenConfig, Generator, NoiseDraw};
use videoar_core::{Dims, Rng, UnitScheme};

const STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error; gradients below it are
/// compared absolutely at `REL_TOL * FLOOR`.
const FLOOR: f64 = 1e-6;

fn objective(g: &Generator, theta: &[f64], ctx: &[f64], target: usize, noise: &NoiseDraw, up: &[f64]) -> f64 {
    let out = g.forward_theta(theta, ctx, target, noise, g.mask()).unwrap();
    out.iter().zip(up).map(|(a, b)| a * b).sum()
}

/// Returns the worst relative error over up to `per_block` sampled
/// coordinates of every parameter block.
fn worst_error(g: &Generator, theta: &[f64], seed: u64, per_block: usize) -> (f64, String) {
    let mut rng = Rng::new(seed);
    let target = g.n_units() - 1;
    let ctx: Vec<f64> = (0..g.buffer_len()).map(|_| rng.normal()).collect();
    let noise = NoiseDraw::sample(seed, target, g.unit_len(target));
    let up: Vec<f64> = (0..g.unit_len(target)).map(|_| rng.normal()).collect();
    let grad = g.backward_theta(theta, &ctx, target, &noise, g.mask(), &up).unwrap();
    let mut worst = (0.0, String::new());
    for block in g.architecture().blocks() {
        let picks: Vec<usize> = if block.len <= per_block {
            (0..block.len).collect()
        } else {
            (0..per_block).map(|_| (rng.next_u64() % block.len as u64) as usize).collect()
        };
        for i in picks {
            let idx = block.offset + i;
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[idx] += STEP;
            tm[idx] -= STEP;
            let fd = (objective(g, &tp, &ctx, target, &noise, &up) - objective(g, &tm, &ctx, target, &noise, &up)) / (2.0 * STEP);
            let err = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(FLOOR);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: fd={fd:e} bp={:e}", block.name, grad[idx]));
            }
        }
    }
    worst
}

fn generator(scheme: UnitScheme, dims: Dims) -> Generator {
    Generator::new(GenConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        scheme,
        dims,
        param_seed: 11,
    })
    .unwrap()
}

#[test]
fn backward_matches_finite_differences_at_init() {
    let g = generator(UnitScheme::Cube { kt: 1, kh: 2, kw: 2 }, Dims::new(2, 2, 4, 2));
    let theta = g.init_params().to_f64();
    let (err, at) = worst_error(&g, &theta, 1, 50);
    println!("worst relative error at init: {err:e} ({at})");
    assert!(err < REL_TOL, "{err:e} at {at}");
}

#[test]
fn backward_matches_finite_differences_random_params() {
    let g = generator(UnitScheme::KeyDetail { k: 2 }, Dims::new(4, 2, 2, 1));
    let mut rng = Rng::new(99);
    let theta: Vec<f64> = g.init_params().to_f64().iter().map(|v| v + 0.2 * rng.normal()).collect();
    let (err, at) = worst_error(&g, &theta, 2, 50);
    println!("worst relative error at random θ: {err:e} ({at})");
    assert!(err < REL_TOL, "{err:e} at {at}");
}
