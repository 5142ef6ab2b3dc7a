//! One-step causal generator: maps per-unit noise plus the generated prefix
//! to the next unit's payload in a single forward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::mask::{build_mask, AttentionMask, MaskDirection};
use crate::model::{self, Architecture, Init, KvBlock, ParamBlock, Role, TokenMeta};
use crate::rng::Rng;
use crate::scheme::{unit_plan, Unit, UnitLayout, UnitScheme, UnitSequence};
use crate::tensor::Dims;

/// Upper bound on θ at desk scale.
pub const MAX_PARAMS: usize = 50_000;
/// Standard deviation of the projection initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub scheme: UnitScheme,
    pub dims: Dims,
    pub param_seed: u64,
}

impl GenConfig {
    /// Small defaults used by the CLI and tests.
    pub fn small(scheme: UnitScheme, dims: Dims, param_seed: u64) -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            scheme,
            dims,
            param_seed,
        }
    }
}

/// Flat θ stored in f32, with the named block table.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub theta: Vec<f32>,
    pub blocks: Vec<ParamBlock>,
}

impl GeneratorParams {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f32]> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.theta[b.offset..b.offset + b.len])
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.theta.iter().map(|&v| v as f64).collect()
    }

    /// Adds `delta` to θ (rounded to f32).
    pub fn apply(&mut self, delta: &[f64]) {
        for (t, d) in self.theta.iter_mut().zip(delta) {
            *t = (*t as f64 + d) as f32;
        }
    }
}

/// Standard-normal noise for one unit, reproducible from `(seed, unit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub seed: u64,
    pub unit_index: usize,
    pub values: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample(seed: u64, unit_index: usize, len: usize) -> Self {
        let mut rng = Rng::for_stream(seed, unit_index as u64);
        let mut values = vec![0.0; len];
        rng.fill_normal(&mut values);
        Self { seed, unit_index, values }
    }
}

/// A configured generator: architecture, unit layout and its forward mask.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GenConfig,
    arch: Architecture,
    layout: UnitLayout,
    mask: AttentionMask,
}

impl Generator {
    pub fn new(config: GenConfig) -> Result<Self> {
        if config.d_model == 0 || config.n_heads == 0 || config.n_layers == 0 {
            return Err(invalid!("d_model, n_heads and n_layers must be positive"));
        }
        if !config.d_model.is_multiple_of(config.n_heads) {
            return Err(invalid!("d_model {} is not divisible by n_heads {}", config.d_model, config.n_heads));
        }
        let layout = UnitLayout::for_scheme(&config.scheme, config.dims, 1)?;
        let arch = Architecture::new(
            config.d_model,
            config.n_heads,
            config.n_layers,
            config.dims.c,
            layout.n_units(),
            layout.max_unit_tokens(),
        );
        if arch.param_count() > MAX_PARAMS {
            return Err(invalid!(
                "generator has {} parameters, desk-scale cap is {MAX_PARAMS}",
                arch.param_count()
            ));
        }
        let mask = build_mask(&layout, MaskDirection::Forward)?;
        Ok(Self { config, arch, layout, mask })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &UnitLayout {
        &self.layout
    }

    /// The forward block-causal mask over the generator's layout.
    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn channels(&self) -> usize {
        self.config.dims.c
    }

    pub fn n_units(&self) -> usize {
        self.layout.n_units()
    }

    /// Payload length (values, not tokens) of unit `i`.
    pub fn unit_len(&self, unit: usize) -> usize {
        self.layout.tokens_per_unit()[unit] * self.channels()
    }

    /// Length of the full token buffer in values.
    pub fn buffer_len(&self) -> usize {
        self.layout.total_tokens() * self.channels()
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn init_params(&self) -> GeneratorParams {
        let mut rng = Rng::new(self.config.param_seed);
        let mut theta = vec![0.0f32; self.arch.param_count()];
        for b in self.arch.blocks() {
            let slot = &mut theta[b.offset..b.offset + b.len];
            match b.init {
                Init::Normal => slot.iter_mut().for_each(|v| *v = (INIT_STD * rng.normal()) as f32),
                Init::Embedding => slot.iter_mut().for_each(|v| *v = rng.normal() as f32),
                Init::Ones => slot.fill(1.0),
                Init::Zeros => slot.fill(0.0),
            }
        }
        GeneratorParams {
            theta,
            blocks: self.arch.blocks().to_vec(),
        }
    }

    /// Checks a parameter set (e.g. from a checkpoint) against this
    /// architecture.
    pub fn check_params(&self, params: &GeneratorParams) -> Result<()> {
        if params.blocks != self.arch.blocks() {
            return Err(invalid!("parameter blocks do not match the generator architecture"));
        }
        if params.theta.len() != self.arch.param_count() {
            return Err(invalid!("θ has {} values, expected {}", params.theta.len(), self.arch.param_count()));
        }
        if params.theta.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("θ contains non-finite values"));
        }
        Ok(())
    }

    fn check_inputs(&self, context: &[f64], target: usize, noise: &NoiseDraw, mask: &AttentionMask) -> Result<()> {
        if mask.direction() != Some(MaskDirection::Forward) {
            return Err(invalid!("generator requires a forward mask, got {:?}", mask.direction()));
        }
        if mask.n_tokens() != self.layout.total_tokens() || mask.unit_of_token() != self.mask.unit_of_token() {
            return Err(invalid!(
                "mask covers {} tokens, generator layout has {}",
                mask.n_tokens(),
                self.layout.total_tokens()
            ));
        }
        if context.len() != self.buffer_len() {
            return Err(invalid!("context buffer has {} values, expected {}", context.len(), self.buffer_len()));
        }
        if target >= self.n_units() {
            return Err(invalid!("target unit {target} out of range (N = {})", self.n_units()));
        }
        if noise.values.len() != self.unit_len(target) {
            return Err(invalid!(
                "noise has {} values, unit {target} needs {}",
                noise.values.len(),
                self.unit_len(target)
            ));
        }
        Ok(())
    }

    fn full_inputs(&self, context: &[f64], target: usize, noise: &NoiseDraw) -> (Vec<f64>, Vec<TokenMeta>) {
        let c = self.channels();
        let mut inputs = context.to_vec();
        let r = self.layout.unit_range(target);
        inputs[r.start * c..r.end * c].copy_from_slice(&noise.values);
        let mut meta = Vec::with_capacity(self.layout.total_tokens());
        for u in 0..self.n_units() {
            let role = if u == target { Role::Noise } else { Role::Context };
            for offset in 0..self.layout.tokens_per_unit()[u] {
                meta.push(TokenMeta { slot: u, offset, role });
            }
        }
        (inputs, meta)
    }

    fn target_rows(&self, trace_output: &[f64], target: usize) -> Vec<f64> {
        let c = self.channels();
        let r = self.layout.unit_range(target);
        trace_output[r.start * c..r.end * c].to_vec()
    }

    /// Predicted payload of unit `target` given the token buffer `context`
    /// (payloads of all units concatenated; only units before `target` are
    /// read through the forward mask) and the unit's noise.
    pub fn forward(&self, params: &GeneratorParams, context: &[f64], target: usize, noise: &NoiseDraw, mask: &AttentionMask) -> Result<Vec<f64>> {
        self.forward_theta(&params.to_f64(), context, target, noise, mask)
    }

    /// [`Self::forward`] with θ given directly in f64.
    pub fn forward_theta(&self, theta: &[f64], context: &[f64], target: usize, noise: &NoiseDraw, mask: &AttentionMask) -> Result<Vec<f64>> {
        self.check_inputs(context, target, noise, mask)?;
        let (inputs, meta) = self.full_inputs(context, target, noise);
        let mut mults = 0;
        let trace = model::forward_full(&self.arch, theta, &inputs, &meta, mask, &mut mults);
        Ok(self.target_rows(&trace.output, target))
    }

    /// Gradient of `<upstream, forward(...)>` with respect to θ.
    pub fn backward(
        &self,
        params: &GeneratorParams,
        context: &[f64],
        target: usize,
        noise: &NoiseDraw,
        mask: &AttentionMask,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.backward_theta(&params.to_f64(), context, target, noise, mask, upstream)
    }

    pub fn backward_theta(
        &self,
        theta: &[f64],
        context: &[f64],
        target: usize,
        noise: &NoiseDraw,
        mask: &AttentionMask,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(context, target, noise, mask)?;
        if upstream.len() != self.unit_len(target) {
            return Err(invalid!(
                "upstream gradient has {} values, unit {target} has {}",
                upstream.len(),
                self.unit_len(target)
            ));
        }
        let (inputs, meta) = self.full_inputs(context, target, noise);
        let mut mults = 0;
        let trace = model::forward_full(&self.arch, theta, &inputs, &meta, mask, &mut mults);
        let c = self.channels();
        let r = self.layout.unit_range(target);
        let mut full_up = vec![0.0; self.buffer_len()];
        full_up[r.start * c..r.end * c].copy_from_slice(upstream);
        Ok(model::backward_full(&self.arch, theta, &trace, &full_up))
    }

    /// Generates all units in order, feeding each generated payload back as
    /// context. Noise for unit `i` is drawn from `(seed, i)` where the seed
    /// is taken from `rng`.
    pub fn generate_sequence(&self, params: &GeneratorParams, rng: &mut Rng) -> Result<UnitSequence> {
        self.generate_sequence_observed(params, rng, |_| {})
    }

    /// [`Self::generate_sequence`] calling `on_forward(unit)` once per
    /// generator forward pass.
    pub fn generate_sequence_observed(&self, params: &GeneratorParams, rng: &mut Rng, mut on_forward: impl FnMut(usize)) -> Result<UnitSequence> {
        let seed = rng.next_u64();
        let theta = params.to_f64();
        let c = self.channels();
        let mut buffer = vec![0.0f64; self.buffer_len()];
        let plan = unit_plan(&self.config.scheme, self.config.dims)?;
        let mut units = Vec::with_capacity(plan.len());
        for (i, ownership) in plan.into_iter().enumerate() {
            let noise = NoiseDraw::sample(seed, i, self.unit_len(i));
            on_forward(i);
            let out = self.forward_theta(&theta, &buffer, i, &noise, &self.mask)?;
            let payload: Vec<f32> = out.iter().map(|&v| v as f32).collect();
            if payload.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("generator produced a non-finite value in unit {i}"));
            }
            let r = self.layout.unit_range(i);
            for (dst, &v) in buffer[r.start * c..r.end * c].iter_mut().zip(&payload) {
                *dst = v as f64;
            }
            units.push(Unit { index: i, payload, ownership });
        }
        Ok(UnitSequence {
            scheme: self.config.scheme.clone(),
            dims: self.config.dims,
            units,
        })
    }

    /// Runs one unit against cached blocks. `slot` is the positional slot
    /// (unit index within a segment). Returns the head output when
    /// `want_output` and the unit's key/value blocks per layer.
    pub fn forward_cached(
        &self,
        theta: &[f64],
        inputs: &[f64],
        slot: usize,
        role: Role,
        past: &[Vec<&KvBlock>],
        want_output: bool,
        mults: &mut u64,
    ) -> (Option<Vec<f64>>, Vec<KvBlock>) {
        let n = inputs.len() / self.channels();
        let meta: Vec<TokenMeta> = (0..n).map(|offset| TokenMeta { slot, offset, role }).collect();
        model::forward_block(&self.arch, theta, inputs, &meta, past, want_output, mults)
    }
}

/// Initial parameters for `config`.
pub fn init_params(config: &GenConfig) -> Result<GeneratorParams> {
    Ok(Generator::new(config.clone())?.init_params())
}
