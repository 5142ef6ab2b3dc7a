//! Symmetric distribution matching.
//!
//! The generator is trained along the reverse-KL direction estimated by the
//! difference between a real-data score (full attention) and a
//! generated-data score. The generated-data score is realised by causal
//! scorers: a forward one, a backward one, or their average.
//!
//! Noise kernel: variance preserving, `x~ = a(τ) x + b(τ) ε` with
//! `a = cos(πτ/2)`, `b = sin(πτ/2)` and `τ ~ U(0.02, 0.98)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::{invalid, Error, Result};
use crate::generator::{Generator, GeneratorParams, NoiseDraw};
use crate::mask::{build_mask, AttentionMask, MaskDirection};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::scheme::UnitLayout;

/// Variance-preserving noising rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseKernel {
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for NoiseKernel {
    fn default() -> Self {
        Self {
            tau_min: 0.02,
            tau_max: 0.98,
        }
    }
}

impl NoiseKernel {
    pub fn alpha(&self, tau: f64) -> f64 {
        libm::cos(FRAC_PI_2 * tau)
    }

    pub fn beta(&self, tau: f64) -> f64 {
        libm::sin(FRAC_PI_2 * tau)
    }

    pub fn sample_tau(&self, rng: &mut Rng) -> f64 {
        rng.uniform(self.tau_min, self.tau_max)
    }

    /// Returns `(x~, ε)`.
    pub fn noise(&self, x: &[f64], tau: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let (a, b) = (self.alpha(tau), self.beta(tau));
        let mut eps = vec![0.0; x.len()];
        rng.fill_normal(&mut eps);
        let noised = x.iter().zip(&eps).map(|(&x, &e)| a * x + b * e).collect();
        (noised, eps)
    }
}

/// Closed-form score of an isotropic Gaussian pushed through the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl GaussianScore {
    pub fn isotropic(dim: usize, mean: f64, var: f64) -> Self {
        Self { mean: vec![mean; dim], var }
    }

    /// `-(x~ - a μ) / (a² σ² + b²)`.
    pub fn score(&self, noised: &[f64], tau: f64, kernel: &NoiseKernel) -> Vec<f64> {
        let (a, b) = (kernel.alpha(tau), kernel.beta(tau));
        let denom = a * a * self.var + b * b;
        noised.iter().zip(&self.mean).map(|(&x, &m)| -(x - a * m) / denom).collect()
    }
}

/// Small learned scorer with a Gaussian-form head and block-causal
/// coupling between units.
///
/// For value `e` (token `t`, channel `ch`, unit `u`):
/// `m_e = μ_e + Σ_{j ≠ u, mask allows u→j} κ[u, j] · mean_{t' ∈ j} x~[t', ch]`,
/// `s_e = -(x~_e - a m_e) / (a² exp(ℓ_e) + b²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedScorer {
    direction: MaskDirection,
    layout: UnitLayout,
    channels: usize,
    /// `[μ (n), ℓ (n), κ (N²)]` with `n` payload values and `N` units.
    params: Vec<f64>,
}

impl LearnedScorer {
    /// Zero mean, unit variance, no coupling.
    pub fn new(layout: UnitLayout, channels: usize, direction: MaskDirection) -> Self {
        let n = layout.total_tokens() * channels;
        let units = layout.n_units();
        Self {
            direction,
            layout,
            channels,
            params: vec![0.0; 2 * n + units * units],
        }
    }

    pub fn direction(&self) -> MaskDirection {
        self.direction
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn dim(&self) -> usize {
        self.layout.total_tokens() * self.channels
    }

    /// Per-unit channel means of `x`, `N x channels`.
    fn unit_means(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; self.layout.n_units() * c];
        for u in 0..self.layout.n_units() {
            let r = self.layout.unit_range(u);
            for t in r.clone() {
                for ch in 0..c {
                    out[u * c + ch] += x[t * c + ch];
                }
            }
            for ch in 0..c {
                out[u * c + ch] /= r.len() as f64;
            }
        }
        out
    }

    fn check_mask(&self, mask: &AttentionMask) -> Result<()> {
        if mask.direction() != Some(self.direction) {
            return Err(Error::Config(format!(
                "scorer trained with a {} mask evaluated with {:?}",
                self.direction.name(),
                mask.direction().map(MaskDirection::name)
            )));
        }
        if mask.n_tokens() != self.layout.total_tokens() {
            return Err(Error::Config(format!(
                "mask covers {} tokens, scorer layout has {}",
                mask.n_tokens(),
                self.layout.total_tokens()
            )));
        }
        Ok(())
    }

    /// Conditional means `m_e` and the pooled unit means used to form them.
    fn means(&self, noised: &[f64], mask: &AttentionMask) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let n = self.dim();
        let units = self.layout.n_units();
        let pooled = self.unit_means(noised);
        let offsets = self.layout.offsets();
        let kappa = &self.params[2 * n..];
        let mut m = self.params[..n].to_vec();
        for u in 0..units {
            for j in 0..units {
                if j == u || !mask.allowed(offsets[u], offsets[j]) {
                    continue;
                }
                let k = kappa[u * units + j];
                for t in self.layout.unit_range(u) {
                    for ch in 0..c {
                        m[t * c + ch] += k * pooled[j * c + ch];
                    }
                }
            }
        }
        (m, pooled)
    }

    pub fn score(&self, noised: &[f64], tau: f64, kernel: &NoiseKernel, mask: &AttentionMask) -> Result<Vec<f64>> {
        self.check_mask(mask)?;
        if noised.len() != self.dim() {
            return Err(invalid!("scorer expects {} values, got {}", self.dim(), noised.len()));
        }
        let (a, b) = (kernel.alpha(tau), kernel.beta(tau));
        let n = self.dim();
        let (m, _) = self.means(noised, mask);
        Ok((0..n)
            .map(|e| -(noised[e] - a * m[e]) / (a * a * libm::exp(self.params[n + e]) + b * b))
            .collect())
    }

    /// Denoising score-matching loss `mean_e (b s_e + ε_e)²` of one clean
    /// sample at one noise draw, and its gradient w.r.t. the parameters.
    fn dsm_loss_grad(&self, x: &[f64], tau: f64, kernel: &NoiseKernel, mask: &AttentionMask, rng: &mut Rng, grad: &mut [f64]) -> f64 {
        let (noised, eps) = kernel.noise(x, tau, rng);
        let (a, b) = (kernel.alpha(tau), kernel.beta(tau));
        let n = self.dim();
        let c = self.channels;
        let units = self.layout.n_units();
        let (m, pooled) = self.means(&noised, mask);
        let offsets = self.layout.offsets();
        let mut loss = 0.0;
        let mut dm = vec![0.0; n];
        for e in 0..n {
            let ev = libm::exp(self.params[n + e]);
            let denom = a * a * ev + b * b;
            let diff = noised[e] - a * m[e];
            let s = -diff / denom;
            let r = b * s + eps[e];
            loss += r * r;
            let ds = 2.0 * b * r / n as f64;
            dm[e] = ds * a / denom;
            grad[e] += dm[e];
            grad[n + e] += ds * diff * a * a * ev / (denom * denom);
        }
        for u in 0..units {
            for j in 0..units {
                if j == u || !mask.allowed(offsets[u], offsets[j]) {
                    continue;
                }
                let mut g = 0.0;
                for t in self.layout.unit_range(u) {
                    for ch in 0..c {
                        g += dm[t * c + ch] * pooled[j * c + ch];
                    }
                }
                grad[2 * n + u * units + j] += g;
            }
        }
        loss / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerKind {
    AnalyticGaussian(GaussianScore),
    LearnedTiny(LearnedScorer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerRole {
    /// Frozen real-data scorer, full attention.
    Real,
    GeneratedForward,
    GeneratedBackward,
    /// Full-attention generated scorer, the non-causal ablation row.
    GeneratedFull,
}

impl ScorerRole {
    pub fn direction(self) -> MaskDirection {
        match self {
            ScorerRole::Real | ScorerRole::GeneratedFull => MaskDirection::Full,
            ScorerRole::GeneratedForward => MaskDirection::Forward,
            ScorerRole::GeneratedBackward => MaskDirection::Backward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub kind: ScorerKind,
    pub role: ScorerRole,
}

impl Scorer {
    pub fn new(kind: ScorerKind, role: ScorerRole) -> Result<Self> {
        if let ScorerKind::LearnedTiny(s) = &kind {
            if s.direction != role.direction() {
                return Err(Error::Config(format!(
                    "{role:?} scorer needs a {} mask, learned scorer uses {}",
                    role.direction().name(),
                    s.direction.name()
                )));
            }
        }
        Ok(Self { kind, role })
    }

    pub fn analytic(mean: Vec<f64>, var: f64, role: ScorerRole) -> Self {
        Self {
            kind: ScorerKind::AnalyticGaussian(GaussianScore { mean, var }),
            role,
        }
    }

    /// A fresh learned scorer for `role` over `layout`.
    pub fn learned(layout: UnitLayout, channels: usize, role: ScorerRole) -> Self {
        Self {
            kind: ScorerKind::LearnedTiny(LearnedScorer::new(layout, channels, role.direction())),
            role,
        }
    }

    pub fn as_learned(&self) -> Option<&LearnedScorer> {
        match &self.kind {
            ScorerKind::LearnedTiny(s) => Some(s),
            ScorerKind::AnalyticGaussian(_) => None,
        }
    }

    pub fn as_learned_mut(&mut self) -> Option<&mut LearnedScorer> {
        match &mut self.kind {
            ScorerKind::LearnedTiny(s) => Some(s),
            ScorerKind::AnalyticGaussian(_) => None,
        }
    }
}

/// Score of `noised` at noise level `tau`. The mask must carry the
/// direction the scorer's role prescribes.
pub fn score(scorer: &Scorer, noised: &[f64], tau: f64, kernel: &NoiseKernel, mask: &AttentionMask) -> Result<Vec<f64>> {
    let want = scorer.role.direction();
    if mask.direction() != Some(want) {
        return Err(Error::Config(format!(
            "{:?} scorer requires a {} mask, got {:?}",
            scorer.role,
            want.name(),
            mask.direction().map(MaskDirection::name)
        )));
    }
    match &scorer.kind {
        ScorerKind::AnalyticGaussian(g) => {
            if g.mean.len() != noised.len() {
                return Err(invalid!("gaussian scorer has dimension {}, sample has {}", g.mean.len(), noised.len()));
            }
            Ok(g.score(noised, tau, kernel))
        }
        ScorerKind::LearnedTiny(s) => s.score(noised, tau, kernel, mask),
    }
}

/// The three masks a scorer may be evaluated with.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub full: AttentionMask,
    pub forward: AttentionMask,
    pub backward: AttentionMask,
}

impl MaskSet {
    pub fn new(layout: &UnitLayout) -> Result<Self> {
        Ok(Self {
            full: build_mask(layout, MaskDirection::Full)?,
            forward: build_mask(layout, MaskDirection::Forward)?,
            backward: build_mask(layout, MaskDirection::Backward)?,
        })
    }

    pub fn get(&self, dir: MaskDirection) -> &AttentionMask {
        match dir {
            MaskDirection::Full => &self.full,
            MaskDirection::Forward => &self.forward,
            MaskDirection::Backward => &self.backward,
        }
    }
}

/// Which generated-data scorer(s) form `s_gen`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymmetricMode {
    Full,
    ForwardOnly,
    BackwardOnly,
    ForwardPlusBackward,
}

impl SymmetricMode {
    pub const ALL: [SymmetricMode; 4] = [
        SymmetricMode::Full,
        SymmetricMode::ForwardOnly,
        SymmetricMode::BackwardOnly,
        SymmetricMode::ForwardPlusBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SymmetricMode::Full => "full",
            SymmetricMode::ForwardOnly => "forward",
            SymmetricMode::BackwardOnly => "backward",
            SymmetricMode::ForwardPlusBackward => "forward+backward",
        }
    }

    /// Generated-scorer roles this mode reads.
    pub fn roles(self) -> &'static [ScorerRole] {
        match self {
            SymmetricMode::Full => &[ScorerRole::GeneratedFull],
            SymmetricMode::ForwardOnly => &[ScorerRole::GeneratedForward],
            SymmetricMode::BackwardOnly => &[ScorerRole::GeneratedBackward],
            SymmetricMode::ForwardPlusBackward => &[ScorerRole::GeneratedForward, ScorerRole::GeneratedBackward],
        }
    }
}

/// Generated-data scorers available to [`dmd_gradient`]. Only the ones the
/// mode reads need to be present.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeneratedScorers<'a> {
    pub full: Option<&'a Scorer>,
    pub forward: Option<&'a Scorer>,
    pub backward: Option<&'a Scorer>,
}

impl<'a> GeneratedScorers<'a> {
    fn get(&self, role: ScorerRole) -> Option<&'a Scorer> {
        match role {
            ScorerRole::GeneratedFull => self.full,
            ScorerRole::GeneratedForward => self.forward,
            ScorerRole::GeneratedBackward => self.backward,
            ScorerRole::Real => None,
        }
    }
}

/// One Monte Carlo draw of the matching gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdDraw {
    pub tau: f64,
    /// `s_real(x~) - s_gen(x~)`.
    pub bracket: Vec<f64>,
    /// Loss gradient on the generator output, `-a(τ) · bracket`.
    pub grad: Vec<f64>,
}

/// Draws `τ` and `ε`, then evaluates the score difference on `x~`.
pub fn dmd_gradient(
    x: &[f64],
    real: &Scorer,
    generated: GeneratedScorers<'_>,
    masks: &MaskSet,
    kernel: &NoiseKernel,
    mode: SymmetricMode,
    rng: &mut Rng,
) -> Result<DmdDraw> {
    let tau = kernel.sample_tau(rng);
    dmd_gradient_at(x, real, generated, masks, kernel, mode, tau, rng)
}

/// [`dmd_gradient`] at a fixed noise level.
#[allow(clippy::too_many_arguments)]
pub fn dmd_gradient_at(
    x: &[f64],
    real: &Scorer,
    generated: GeneratedScorers<'_>,
    masks: &MaskSet,
    kernel: &NoiseKernel,
    mode: SymmetricMode,
    tau: f64,
    rng: &mut Rng,
) -> Result<DmdDraw> {
    if real.role != ScorerRole::Real {
        return Err(Error::Config(format!("real scorer has role {:?}", real.role)));
    }
    let (noised, _) = kernel.noise(x, tau, rng);
    let s_real = score(real, &noised, tau, kernel, &masks.full)?;
    let roles = mode.roles();
    let mut s_gen = vec![0.0; x.len()];
    for &role in roles {
        let scorer = generated
            .get(role)
            .ok_or_else(|| Error::Config(format!("mode {} needs a {role:?} scorer", mode.name())))?;
        if scorer.role != role {
            return Err(Error::Config(format!("scorer supplied as {role:?} has role {:?}", scorer.role)));
        }
        let s = score(scorer, &noised, tau, kernel, masks.get(role.direction()))?;
        for (acc, v) in s_gen.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let k = roles.len() as f64;
    let bracket: Vec<f64> = s_real.iter().zip(&s_gen).map(|(r, g)| r - g / k).collect();
    if bracket.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            tau,
            msg: "non-finite score difference".into(),
        });
    }
    let a = kernel.alpha(tau);
    let grad = bracket.iter().map(|b| -a * b).collect();
    Ok(DmdDraw { tau, bracket, grad })
}

/// Settings for [`fit_generated_scorer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
}

/// Minimises the denoising score-matching loss of a learned scorer on
/// `samples` with Adam. Every step uses all samples with fresh `(τ, ε)`.
/// Returns the per-step mean loss.
pub fn fit_generated_scorer(
    scorer: &mut Scorer,
    samples: &[Vec<f64>],
    kernel: &NoiseKernel,
    masks: &MaskSet,
    cfg: FitConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut opt = None;
    fit_with(scorer, samples, kernel, masks, cfg.steps, &mut opt, cfg.lr, rng)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const LOSS_WINDOW: usize = 50;

#[allow(clippy::too_many_arguments)]
fn fit_with(
    scorer: &mut Scorer,
    samples: &[Vec<f64>],
    kernel: &NoiseKernel,
    masks: &MaskSet,
    steps: usize,
    opt: &mut Option<Adam>,
    lr: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if scorer.role == ScorerRole::Real {
        return Err(Error::Config("the real scorer is frozen".into()));
    }
    let mask = masks.get(scorer.role.direction());
    let ScorerKind::LearnedTiny(learned) = &mut scorer.kind else {
        return Err(Error::Config("only learned scorers can be fitted".into()));
    };
    learned.check_mask(mask)?;
    if samples.is_empty() && steps > 0 {
        return Err(invalid!("no samples to fit on"));
    }
    let opt = opt.get_or_insert_with(|| Adam::new(learned.params.len(), lr));
    let mut losses = Vec::with_capacity(steps);
    let mut initial = None;
    let mut grad = vec![0.0; learned.params.len()];
    for step in 0..steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for x in samples {
            let tau = kernel.sample_tau(rng);
            loss += learned.dsm_loss_grad(x, tau, kernel, mask, rng, &mut grad);
        }
        let inv = 1.0 / samples.len() as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() {
            return Err(Error::Training { step, msg: "non-finite score-matching loss".into() });
        }
        losses.push(loss);
        if losses.len() == LOSS_WINDOW.min(steps) {
            initial = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        if let Some(init) = initial {
            let w = &losses[losses.len().saturating_sub(LOSS_WINDOW)..];
            let recent = w.iter().sum::<f64>() / w.len() as f64;
            if recent > DIVERGENCE_FACTOR * init {
                return Err(Error::Training {
                    step,
                    msg: format!("score-matching loss diverged ({recent:.4e} > {DIVERGENCE_FACTOR} x {init:.4e})"),
                });
            }
        }
        opt.step(&mut learned.params, &grad);
    }
    Ok(losses)
}

/// A generator that DMD can train: samples from noise and pulls an output
/// gradient back to its parameters.
pub trait DistilledGenerator {
    fn output_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn sample(&self, rng: &mut Rng) -> Result<GeneratorSample>;
    /// Gradient w.r.t. the parameters of `<upstream, G(noise)>`.
    fn pullback(&self, sample: &GeneratorSample, upstream: &[f64]) -> Result<Vec<f64>>;
    /// Adds `delta` to the parameters.
    fn apply_update(&mut self, delta: &[f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSample {
    pub seed: u64,
    pub x: Vec<f64>,
}

/// `x = scale ⊙ z + shift` with `z ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGenerator {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl AffineGenerator {
    pub fn new(dim: usize, scale: f64, shift: f64) -> Self {
        Self {
            scale: vec![scale; dim],
            shift: vec![shift; dim],
        }
    }

    fn noise(&self, seed: u64) -> Vec<f64> {
        let mut z = vec![0.0; self.scale.len()];
        Rng::new(seed).fill_normal(&mut z);
        z
    }
}

impl DistilledGenerator for AffineGenerator {
    fn output_dim(&self) -> usize {
        self.scale.len()
    }

    fn n_params(&self) -> usize {
        2 * self.scale.len()
    }

    fn sample(&self, rng: &mut Rng) -> Result<GeneratorSample> {
        let seed = rng.next_u64();
        let z = self.noise(seed);
        let x = z.iter().zip(&self.scale).zip(&self.shift).map(|((z, a), b)| a * z + b).collect();
        Ok(GeneratorSample { seed, x })
    }

    fn pullback(&self, sample: &GeneratorSample, upstream: &[f64]) -> Result<Vec<f64>> {
        let z = self.noise(sample.seed);
        let mut g: Vec<f64> = upstream.iter().zip(&z).map(|(u, z)| u * z).collect();
        g.extend_from_slice(upstream);
        Ok(g)
    }

    fn apply_update(&mut self, delta: &[f64]) {
        let d = self.scale.len();
        for i in 0..d {
            self.scale[i] += delta[i];
            self.shift[i] += delta[d + i];
        }
    }
}

/// The causal transformer as a one-step sampler of whole sequences.
/// Context fed back between units is treated as a constant by
/// [`DistilledGenerator::pullback`]: each unit's gradient flows through its
/// own forward pass only.
#[derive(Debug, Clone)]
pub struct CausalGenerator {
    pub generator: Generator,
    pub params: GeneratorParams,
}

impl DistilledGenerator for CausalGenerator {
    fn output_dim(&self) -> usize {
        self.generator.buffer_len()
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn sample(&self, rng: &mut Rng) -> Result<GeneratorSample> {
        let seed = rng.next_u64();
        let seq = self.generator.generate_sequence(&self.params, &mut Rng::new(seed))?;
        let x = seq.units.iter().flat_map(|u| u.payload.iter().map(|&v| v as f64)).collect();
        Ok(GeneratorSample { seed, x })
    }

    fn pullback(&self, sample: &GeneratorSample, upstream: &[f64]) -> Result<Vec<f64>> {
        let g = &self.generator;
        // Same derivation as generate_sequence: one seed drawn from Rng(seed).
        let noise_seed = Rng::new(sample.seed).next_u64();
        let theta = self.params.to_f64();
        let c = g.channels();
        let mut total = vec![0.0; theta.len()];
        for i in 0..g.n_units() {
            let noise = NoiseDraw::sample(noise_seed, i, g.unit_len(i));
            let r = g.layout().unit_range(i);
            let up = &upstream[r.start * c..r.end * c];
            let grad = g.backward_theta(&theta, &sample.x, i, &noise, g.mask(), up)?;
            for (t, v) in total.iter_mut().zip(grad) {
                *t += v;
            }
        }
        Ok(total)
    }

    fn apply_update(&mut self, delta: &[f64]) {
        self.params.apply(delta);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Generated-scorer updates per generator update.
    pub scorer_updates: usize,
    pub scorer_lr: f64,
    pub seed: u64,
    pub mode: SymmetricMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 5000,
            batch_size: 16,
            scorer_updates: 5,
            scorer_lr: 1e-2,
            seed: 0,
            mode: SymmetricMode::ForwardPlusBackward,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.scorer_lr > 0.0) {
            return Err(invalid!("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.scorer_updates == 0 {
            return Err(invalid!("batch size and scorer update ratio must be positive"));
        }
        Ok(())
    }
}

/// One line of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean over the batch's generator samples (all coordinates).
    pub gen_mean: f64,
    pub gen_std: f64,
    /// Root mean square of the score difference.
    pub bracket_rms: f64,
    /// Last score-matching loss of the active generated scorers (averaged).
    pub scorer_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRecord>,
    /// Generated scorers in role order full, forward, backward.
    pub scorers: [Scorer; 3],
}

/// Alternates score-matching updates of the generated scorers with
/// distribution-matching updates of the generator (plain gradient descent
/// at `cfg.lr`).
pub fn train_generator<G: DistilledGenerator>(
    cfg: &TrainConfig,
    real: &Scorer,
    generator: &mut G,
    layout: &UnitLayout,
    channels: usize,
    mut on_record: impl FnMut(&TraceRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if layout.total_tokens() * channels != generator.output_dim() {
        return Err(invalid!(
            "layout covers {} values, generator emits {}",
            layout.total_tokens() * channels,
            generator.output_dim()
        ));
    }
    let masks = MaskSet::new(layout)?;
    let kernel = NoiseKernel::default();
    let mut rng = Rng::new(cfg.seed);
    let mut scorers = [
        Scorer::learned(layout.clone(), channels, ScorerRole::GeneratedFull),
        Scorer::learned(layout.clone(), channels, ScorerRole::GeneratedForward),
        Scorer::learned(layout.clone(), channels, ScorerRole::GeneratedBackward),
    ];
    let active: Vec<usize> = cfg
        .mode
        .roles()
        .iter()
        .map(|r| match r {
            ScorerRole::GeneratedFull => 0,
            ScorerRole::GeneratedForward => 1,
            _ => 2,
        })
        .collect();
    let mut opts: [Option<Adam>; 3] = [None, None, None];
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let at_step = |e: Error| match e {
            Error::Training { .. } => e,
            other => Error::Training { step, msg: format!("{other}") },
        };
        let mut scorer_loss = 0.0;
        for _ in 0..cfg.scorer_updates {
            let batch = (0..cfg.batch_size)
                .map(|_| generator.sample(&mut rng).map(|s| s.x))
                .collect::<Result<Vec<_>>>()
                .map_err(at_step)?;
            scorer_loss = 0.0;
            for &i in &active {
                let losses = fit_with(&mut scorers[i], &batch, &kernel, &masks, 1, &mut opts[i], cfg.scorer_lr, &mut rng).map_err(at_step)?;
                scorer_loss += losses[0];
            }
            scorer_loss /= active.len() as f64;
        }

        let mut delta = vec![0.0; generator.n_params()];
        let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0usize);
        let mut bracket_sq = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = generator.sample(&mut rng).map_err(at_step)?;
            let gen = GeneratedScorers {
                full: Some(&scorers[0]),
                forward: Some(&scorers[1]),
                backward: Some(&scorers[2]),
            };
            let draw = dmd_gradient(&sample.x, real, gen, &masks, &kernel, cfg.mode, &mut rng).map_err(at_step)?;
            let g = generator.pullback(&sample, &draw.grad).map_err(at_step)?;
            for (d, v) in delta.iter_mut().zip(g) {
                *d -= cfg.lr * v / cfg.batch_size as f64;
            }
            for &v in &sample.x {
                sum += v;
                sum_sq += v * v;
            }
            count += sample.x.len();
            bracket_sq += draw.bracket.iter().map(|b| b * b).sum::<f64>();
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, msg: "non-finite generator update".into() });
        }
        generator.apply_update(&delta);
        let mean = sum / count as f64;
        let record = TraceRecord {
            step,
            gen_mean: mean,
            gen_std: libm::sqrt((sum_sq / count as f64 - mean * mean).max(0.0)),
            bracket_rms: libm::sqrt(bracket_sq / count as f64),
            scorer_loss,
        };
        on_record(&record);
        trace.push(record);
    }
    Ok(TrainOutcome { trace, scorers })
}

/// Mean of `n` fresh generator samples drawn from `Rng(seed)`.
pub fn sample_mean<G: DistilledGenerator>(generator: &G, n: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..n {
        let s = generator.sample(&mut rng)?;
        sum += s.x.iter().sum::<f64>();
        count += s.x.len();
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d() -> (UnitLayout, MaskSet) {
        let l = UnitLayout::from_tokens(vec![1]).unwrap();
        let m = MaskSet::new(&l).unwrap();
        (l, m)
    }

    #[test]
    fn kernel_is_variance_preserving() {
        let k = NoiseKernel::default();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            assert!((k.alpha(t).powi(2) + k.beta(t).powi(2) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let (_, m) = one_d();
        let k = NoiseKernel::default();
        let s = Scorer::analytic(vec![0.0; 3], 1.0, ScorerRole::Real);
        let x = [0.5, -2.0, 1.25];
        for tau in [0.1, 0.5, 0.9] {
            let l3 = UnitLayout::from_tokens(vec![3]).unwrap();
            let m3 = MaskSet::new(&l3).unwrap();
            let out = score(&s, &x, tau, &k, &m3.full).unwrap();
            for (o, xi) in out.iter().zip(x) {
                assert!((o + xi).abs() < 1e-12);
            }
        }
        let _ = m;
    }

    #[test]
    fn score_vanishes_at_mode() {
        let (_, m) = one_d();
        let k = NoiseKernel::default();
        let s = Scorer::analytic(vec![1.7], 2.5, ScorerRole::Real);
        for tau in [0.05, 0.4, 0.8] {
            let out = score(&s, &[k.alpha(tau) * 1.7], tau, &k, &m.full).unwrap();
            assert!(out[0].abs() < 1e-12);
        }
    }

    #[test]
    fn small_tau_limit() {
        // d/dx log N(x; 2, 1) = -(x - 2)
        let (_, m) = one_d();
        let k = NoiseKernel { tau_min: 0.0, tau_max: 1.0 };
        let s = Scorer::analytic(vec![2.0], 1.0, ScorerRole::Real);
        for x in [-1.0, 0.0, 2.0, 3.5] {
            let out = score(&s, &[x], 0.0, &k, &m.full).unwrap();
            assert!((out[0] + (x - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn role_mask_mismatch_is_config_error() {
        let (l, m) = one_d();
        let s = Scorer::learned(l, 1, ScorerRole::GeneratedForward);
        assert!(matches!(score(&s, &[0.0], 0.5, &NoiseKernel::default(), &m.backward), Err(Error::Config(_))));
        let bad = Scorer::new(
            ScorerKind::LearnedTiny(LearnedScorer::new(UnitLayout::from_tokens(vec![1]).unwrap(), 1, MaskDirection::Forward)),
            ScorerRole::Real,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn matched_scorers_give_zero_bracket() {
        let (_, m) = one_d();
        let k = NoiseKernel::default();
        let real = Scorer::analytic(vec![0.7], 1.3, ScorerRole::Real);
        let fwd = Scorer::analytic(vec![0.7], 1.3, ScorerRole::GeneratedForward);
        let bwd = Scorer::analytic(vec![0.7], 1.3, ScorerRole::GeneratedBackward);
        let mut rng = Rng::new(0);
        for mode in [SymmetricMode::ForwardOnly, SymmetricMode::BackwardOnly, SymmetricMode::ForwardPlusBackward] {
            for _ in 0..100 {
                let x = [rng.normal()];
                let gen = GeneratedScorers { full: None, forward: Some(&fwd), backward: Some(&bwd) };
                let d = dmd_gradient(&x, &real, gen, &m, &k, mode, &mut rng).unwrap();
                assert_eq!(d.bracket, vec![0.0]);
                assert_eq!(d.grad, vec![-0.0]);
            }
        }
    }

    #[test]
    fn missing_scorer_is_config_error() {
        let (_, m) = one_d();
        let real = Scorer::analytic(vec![0.0], 1.0, ScorerRole::Real);
        let r = dmd_gradient(&[0.0], &real, GeneratedScorers::default(), &m, &NoiseKernel::default(), SymmetricMode::ForwardOnly, &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_fit_steps_leave_scorer_unchanged() {
        let (l, m) = one_d();
        let mut s = Scorer::learned(l, 1, ScorerRole::GeneratedForward);
        s.as_learned_mut().unwrap().params_mut()[0] = 0.123;
        let before = s.clone();
        let losses = fit_generated_scorer(&mut s, &[vec![1.0]], &NoiseKernel::default(), &m, FitConfig { steps: 0, lr: 0.1 }, &mut Rng::new(1)).unwrap();
        assert!(losses.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn dsm_gradient_matches_difference() {
        let l = UnitLayout::from_tokens(vec![2, 1, 2]).unwrap();
        let masks = MaskSet::new(&l).unwrap();
        let k = NoiseKernel::default();
        let mut s = LearnedScorer::new(l, 2, MaskDirection::Forward);
        let mut rng = Rng::new(4);
        for p in s.params_mut() {
            *p = 0.3 * rng.normal();
        }
        let x: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let mut grad = vec![0.0; s.params().len()];
        s.dsm_loss_grad(&x, 0.4, &k, &masks.forward, &mut Rng::new(9), &mut grad);
        for i in 0..s.params().len() {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp.params[i] += 1e-6;
            sm.params[i] -= 1e-6;
            let mut scratch = vec![0.0; s.params().len()];
            let lp = sp.dsm_loss_grad(&x, 0.4, &k, &masks.forward, &mut Rng::new(9), &mut scratch);
            let lm = sm.dsm_loss_grad(&x, 0.4, &k, &masks.forward, &mut Rng::new(9), &mut scratch);
            let fd = (lp - lm) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn affine_pullback() {
        let g = AffineGenerator::new(2, 1.5, -0.5);
        let s = g.sample(&mut Rng::new(3)).unwrap();
        let z = g.noise(s.seed);
        let p = g.pullback(&s, &[1.0, 2.0]).unwrap();
        assert_eq!(p, vec![z[0], 2.0 * z[1], 1.0, 2.0]);
    }
}
