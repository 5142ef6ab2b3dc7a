//! Constant-memory generation with a unit-granular KV cache.
//!
//! Every unit is produced in two passes over the resident cache: a noise
//! pass that yields the payload, then a clean pass over the rounded payload
//! whose keys/values are appended. The oldest units are evicted once more
//! than `W` are resident.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::generator::{Generator, GeneratorParams, NoiseDraw};
use crate::model::{KvBlock, Role};
use crate::rng::Rng;
use crate::scheme::{unit_plan, Ownership, Unit};

/// Source of monotonic nanosecond timestamps.
pub trait Clock {
    fn now_ns(&mut self) -> u64;
}

impl<C: Clock + ?Sized> Clock for alloc::boxed::Box<C> {
    fn now_ns(&mut self) -> u64 {
        (**self).now_ns()
    }
}

/// Always reads zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&mut self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    unit_index: usize,
    layers: Vec<KvBlock>,
    pinned: bool,
    bytes: usize,
}

/// Per-layer key/value blocks of the most recent units.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    capacity: usize,
    pin_first: bool,
    entries: VecDeque<CacheEntry>,
    last_index: Option<usize>,
    resident_bytes: usize,
    peak_bytes: usize,
}

impl KVCache {
    /// FIFO cache holding at most `capacity` units. With `pin_first` the
    /// first appended unit is never evicted and counts towards the capacity.
    pub fn new(capacity: usize, pin_first: bool) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid!("cache window must be at least 1 unit"));
        }
        if pin_first && capacity < 2 {
            return Err(invalid!("a pinned cache needs a window of at least 2 units"));
        }
        Ok(Self {
            capacity,
            pin_first,
            entries: VecDeque::new(),
            last_index: None,
            resident_bytes: 0,
            peak_bytes: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> &'static str {
        if self.pin_first {
            "fifo+pin"
        } else {
            "fifo"
        }
    }

    pub fn resident_units(&self) -> usize {
        self.entries.len()
    }

    pub fn resident_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.unit_index).collect()
    }

    pub fn resident_bytes(&self) -> usize {
        self.resident_bytes
    }

    /// Largest resident byte count seen after any completed append.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn resident_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.layers.first().map_or(0, |b| b.n_tokens)).sum()
    }

    /// Inserts a unit's blocks and returns the evicted unit indices in
    /// eviction order.
    pub fn append_unit(&mut self, unit_index: usize, layers: Vec<KvBlock>) -> Result<Vec<usize>> {
        if let Some(last) = self.last_index {
            if unit_index <= last {
                return Err(Error::Protocol(format!(
                    "unit {unit_index} appended after unit {last}; indices must strictly increase"
                )));
            }
        }
        let pinned = self.pin_first && self.last_index.is_none();
        self.last_index = Some(unit_index);
        let bytes = layers.iter().map(KvBlock::bytes).sum();
        self.resident_bytes += bytes;
        self.entries.push_back(CacheEntry {
            unit_index,
            layers,
            pinned,
            bytes,
        });
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            let pos = self.entries.iter().position(|e| !e.pinned).expect("capacity admits a non-pinned unit");
            let e = self.entries.remove(pos).expect("position is in range");
            self.resident_bytes -= e.bytes;
            evicted.push(e.unit_index);
        }
        self.peak_bytes = self.peak_bytes.max(self.resident_bytes);
        Ok(evicted)
    }

    /// Resident blocks per layer in ascending unit order.
    pub fn layer_views(&self, n_layers: usize) -> Vec<Vec<&KvBlock>> {
        (0..n_layers).map(|l| self.entries.iter().map(|e| &e.layers[l]).collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    /// Cache window in units.
    pub window: usize,
    pub pin_first: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitMetric {
    pub unit_index: usize,
    pub latency_ns: u64,
    /// Resident cache bytes after this unit's append.
    pub resident_bytes: usize,
    /// Cached units this unit attended to.
    pub context_units: usize,
    pub context_tokens: usize,
    /// Attention multiplies for both passes of this unit.
    pub attention_mults: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMetrics {
    pub per_unit: Vec<UnitMetric>,
    pub peak_resident_bytes: usize,
    pub units_generated: usize,
    pub window: usize,
}

/// Attention multiplies for one unit of `tokens` tokens attending to
/// `context_tokens` cached tokens, both passes.
pub fn attention_mults(gen: &Generator, tokens: usize, context_tokens: usize) -> u64 {
    let cfg = gen.config();
    (2 * cfg.n_layers * tokens * 2 * cfg.d_model * (context_tokens + tokens)) as u64
}

/// One streaming generation in progress, advanced a unit at a time.
struct Streamer<'a> {
    gen: &'a Generator,
    theta: Vec<f64>,
    plan: Vec<Ownership>,
    cache: KVCache,
    seed: u64,
    next: usize,
}

impl<'a> Streamer<'a> {
    fn new(gen: &'a Generator, params: &GeneratorParams, cfg: StreamConfig, rng: &mut Rng) -> Result<Self> {
        gen.check_params(params)?;
        Ok(Self {
            gen,
            theta: params.to_f64(),
            plan: unit_plan(&gen.config().scheme, gen.config().dims)?,
            cache: KVCache::new(cfg.window, cfg.pin_first)?,
            seed: rng.next_u64(),
            next: 0,
        })
    }

    fn step(&mut self, clock: &mut impl Clock) -> Result<(Unit, UnitMetric)> {
        let g = self.next;
        let gen = self.gen;
        let slot = g % self.plan.len();
        let len = gen.unit_len(slot);
        let n_layers = gen.config().n_layers;
        let start = clock.now_ns();
        let noise = NoiseDraw::sample(self.seed, g, len);
        let mut mults = 0;
        let context_units = self.cache.resident_units();
        let context_tokens = self.cache.resident_tokens();
        let (payload, blocks) = {
            let past = self.cache.layer_views(n_layers);
            let (out, _) = gen.forward_cached(&self.theta, &noise.values, slot, Role::Noise, &past, true, &mut mults);
            let payload: Vec<f32> = out.expect("output requested").iter().map(|&v| v as f32).collect();
            if payload.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("generator produced a non-finite value in unit {g}"));
            }
            let clean: Vec<f64> = payload.iter().map(|&v| v as f64).collect();
            let (_, blocks) = gen.forward_cached(&self.theta, &clean, slot, Role::Context, &past, false, &mut mults);
            (payload, blocks)
        };
        self.cache.append_unit(g, blocks)?;
        let metric = UnitMetric {
            unit_index: g,
            latency_ns: clock.now_ns().saturating_sub(start),
            resident_bytes: self.cache.resident_bytes(),
            context_units,
            context_tokens,
            attention_mults: mults,
        };
        self.next += 1;
        let unit = Unit {
            index: g,
            payload,
            ownership: self.plan[slot].clone(),
        };
        Ok((unit, metric))
    }
}

/// Generates `n_units` units (segments of the generator's scheme repeated
/// with continuing indices), calling `on_unit` with each one. The unit's
/// positional slot is its index within its segment.
pub fn stream_units(
    gen: &Generator,
    params: &GeneratorParams,
    n_units: usize,
    cfg: StreamConfig,
    rng: &mut Rng,
    clock: &mut impl Clock,
    mut on_unit: impl FnMut(Unit, &UnitMetric),
) -> Result<StreamMetrics> {
    let mut s = Streamer::new(gen, params, cfg, rng)?;
    let mut per_unit = Vec::with_capacity(n_units);
    for _ in 0..n_units {
        let (unit, metric) = s.step(clock)?;
        per_unit.push(metric);
        on_unit(unit, &metric);
    }
    Ok(StreamMetrics {
        per_unit,
        peak_resident_bytes: s.cache.peak_bytes(),
        units_generated: n_units,
        window: cfg.window,
    })
}

/// [`stream_units`] over `n_segments` whole segments, collecting the units.
pub fn stream_generate(
    gen: &Generator,
    params: &GeneratorParams,
    n_segments: usize,
    cfg: StreamConfig,
    rng: &mut Rng,
    clock: &mut impl Clock,
) -> Result<(Vec<Unit>, StreamMetrics)> {
    let mut units = Vec::new();
    let metrics = stream_units(gen, params, n_segments * gen.n_units(), cfg, rng, clock, |u, _| units.push(u))?;
    Ok((units, metrics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n_units: usize,
    pub warmup: usize,
    pub window: usize,
    pub max_tokens_per_unit: usize,
    pub median_leading_ns: u64,
    pub median_trailing_ns: u64,
    /// Trailing-half median over leading-half median, minus one.
    pub drift: f64,
    pub drift_flag: bool,
    pub peak_resident_bytes: usize,
    /// Largest instrumented per-unit attention cost.
    pub max_attention_mults: u64,
    /// Whether every unit's instrumented cost matched the analytic count.
    pub mults_match_analytic: bool,
    pub metrics: StreamMetrics,
}

pub const DRIFT_LIMIT: f64 = 0.2;

fn median(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Streams `n_units` units and summarises per-unit latency after `warmup`.
///
/// The leading and trailing halves are timed on two copies of the same
/// stream stepped alternately, so both halves see the same machine load.
#[allow(clippy::too_many_arguments)]
pub fn bench_throughput(
    gen: &Generator,
    params: &GeneratorParams,
    cfg: StreamConfig,
    n_units: usize,
    warmup: usize,
    seed: u64,
    clock: &mut impl Clock,
) -> Result<BenchReport> {
    if warmup + 2 > n_units {
        return Err(invalid!("need at least two units after a warmup of {warmup}, got {n_units} units"));
    }
    let half = (n_units - warmup) / 2;
    let mut lead_stream = Streamer::new(gen, params, cfg, &mut Rng::new(seed))?;
    let mut trail_stream = Streamer::new(gen, params, cfg, &mut Rng::new(seed))?;
    let mut per_unit = Vec::with_capacity(n_units);
    for _ in 0..warmup {
        per_unit.push(lead_stream.step(clock)?.1);
    }
    let mut middle = Vec::new();
    for g in 0..n_units - half {
        let m = trail_stream.step(clock)?.1;
        if g >= warmup + half {
            middle.push(m);
        }
    }
    let mut trailing = Vec::with_capacity(half);
    for _ in 0..half {
        per_unit.push(lead_stream.step(clock)?.1);
        trailing.push(trail_stream.step(clock)?.1);
    }
    per_unit.extend(middle);
    per_unit.extend(trailing);
    let metrics = StreamMetrics {
        per_unit,
        peak_resident_bytes: lead_stream.cache.peak_bytes().max(trail_stream.cache.peak_bytes()),
        units_generated: n_units,
        window: cfg.window,
    };
    let per_segment = gen.n_units();
    let mults_match_analytic = metrics
        .per_unit
        .iter()
        .all(|m| m.attention_mults == attention_mults(gen, gen.unit_len(m.unit_index % per_segment) / gen.channels(), m.context_tokens));
    let lat: Vec<u64> = metrics.per_unit[warmup..].iter().map(|m| m.latency_ns).collect();
    let lead = median(&mut lat[..half].to_vec());
    let trail = median(&mut lat[lat.len() - half..].to_vec());
    let drift = if lead == 0 { 0.0 } else { trail as f64 / lead as f64 - 1.0 };
    Ok(BenchReport {
        n_units,
        warmup,
        window: cfg.window,
        max_tokens_per_unit: gen.layout().max_unit_tokens(),
        median_leading_ns: lead,
        median_trailing_ns: trail,
        drift,
        drift_flag: drift > DRIFT_LIMIT,
        peak_resident_bytes: metrics.peak_resident_bytes,
        max_attention_mults: metrics.per_unit.iter().map(|m| m.attention_mults).max().unwrap_or(0),
        mults_match_analytic,
        metrics,
    })
}
