use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use videoar_core::dmd::{sample_mean, train_generator, AffineGenerator, CausalGenerator, Scorer, ScorerRole, SymmetricMode, TrainConfig, TraceRecord};
use videoar_core::streaming::{bench_throughput, stream_units, Clock, NoClock, StreamConfig};
use videoar_core::{build_mask, gaussian_volume, partition, reconstruct, reverse_mask, verify_causality, GenConfig, Generator, GeneratorParams, MaskDirection, Rng, UnitLayout, UnitSequence};

use crate::clock::MonotonicClock;
use crate::error::{Error, Result};
use crate::format;
use crate::parse::{format_dims, format_scheme, parse_dims, parse_scheme};
use crate::render::{mask_pgm, mask_text};
use crate::report::{Emitter, Record};
use crate::selftest::{self, Profile};

#[derive(Debug, Parser)]
#[command(name = "videoar", version, about = "Autoregressive factorization of latent volumes: partitioning, masks, toy distillation and streaming")]
pub struct Cli {
    /// Emit reports as JSON lines with the same fields.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a latent volume (from --seed or --input) into prediction units.
    Partition(PartitionArgs),
    /// Reassemble a unit-sequence file into a latent volume.
    Reconstruct(ReconstructArgs),
    /// Render a block-causal attention mask.
    Masks(MasksArgs),
    /// Distil a toy generator towards a Gaussian target.
    TrainToy(TrainArgs),
    /// Generate a unit sequence with a toy generator.
    Generate(GenerateArgs),
    /// Stream units through a bounded KV cache and record per-unit metrics.
    #[command(long_about = STREAM_HELP)]
    StreamBench(StreamArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

const STREAM_HELP: &str = "Stream units through a bounded KV cache and record per-unit metrics.

Per-unit records are CSV with header `unit_index,latency_ns,resident_bytes,context_units`:
  unit_index      global index of the generated unit
  latency_ns      wall time for the unit (0 with --timing off)
  resident_bytes  KV cache bytes after the unit was appended
  context_units   cached units the unit attended to
With --json each row is a JSON line with the same fields instead. A `stream-summary` record follows on stdout.";

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// t,h,w,c
    #[arg(long, value_parser = dims_arg)]
    pub dims: Option<videoar_core::Dims>,
    #[arg(long, value_parser = scheme_arg)]
    pub scheme: videoar_core::UnitScheme,
    /// Seed of the standard-normal latent to partition.
    #[arg(long, required_unless_present = "input", conflicts_with = "input")]
    pub seed: Option<u64>,
    /// Latent file to partition instead of a seeded one.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the source latent.
    #[arg(long)]
    pub latent_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Direction {
    Forward,
    Backward,
    Full,
}

impl From<Direction> for MaskDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Forward => MaskDirection::Forward,
            Direction::Backward => MaskDirection::Backward,
            Direction::Full => MaskDirection::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskFormat {
    Text,
    Pgm,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    #[arg(long, value_parser = scheme_arg)]
    pub scheme: videoar_core::UnitScheme,
    #[arg(long, value_parser = dims_arg)]
    pub dims: videoar_core::Dims,
    #[arg(long, value_enum, default_value = "forward")]
    pub direction: Direction,
    #[arg(long, default_value_t = 1)]
    pub tokens_per_voxel: usize,
    /// Render the unit-order reversal of the mask.
    #[arg(long)]
    pub reverse: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: MaskFormat,
    /// Mask image destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Forward,
    Backward,
    #[value(name = "forward+backward")]
    ForwardBackward,
    /// All four modes in turn.
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<SymmetricMode> {
        match self {
            ModeArg::Full => vec![SymmetricMode::Full],
            ModeArg::Forward => vec![SymmetricMode::ForwardOnly],
            ModeArg::Backward => vec![SymmetricMode::BackwardOnly],
            ModeArg::ForwardBackward => vec![SymmetricMode::ForwardPlusBackward],
            ModeArg::All => SymmetricMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyModel {
    /// One-dimensional x = a z + b.
    Affine,
    /// The causal transformer over --scheme/--dims.
    Causal,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Load the generator from a checkpoint.
    #[arg(long, conflicts_with_all = ["scheme", "dims", "param_seed"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = scheme_arg)]
    pub scheme: Option<videoar_core::UnitScheme>,
    #[arg(long, value_parser = dims_arg)]
    pub dims: Option<videoar_core::Dims>,
    /// Seed of the parameter initialisation.
    #[arg(long)]
    pub param_seed: Option<u64>,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
}

impl ModelArgs {
    fn config(&self) -> Result<GenConfig> {
        let (Some(scheme), Some(dims), Some(param_seed)) = (&self.scheme, self.dims, self.param_seed) else {
            return Err(Error::Usage("give --checkpoint, or all of --scheme, --dims and --param-seed".into()));
        };
        Ok(GenConfig {
            d_model: self.d_model,
            n_layers: self.layers,
            n_heads: self.heads,
            scheme: scheme.clone(),
            dims,
            param_seed,
        })
    }

    fn load(&self) -> Result<(Generator, GeneratorParams)> {
        if let Some(path) = &self.checkpoint {
            return format::read_checkpoint(path);
        }
        let gen = Generator::new(self.config()?)?;
        let params = gen.init_params();
        Ok((gen, params))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub target_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub target_var: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub init_mean: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "forward+backward")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Generated-scorer updates per generator update.
    #[arg(long, default_value_t = 5)]
    pub scorer_updates: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub scorer_lr: f64,
    /// Trace destination (line-delimited records); stdout when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Emit every n-th trace record.
    #[arg(long, default_value_t = 100)]
    pub trace_every: usize,
    /// Samples behind the final mean.
    #[arg(long, default_value_t = 20_000)]
    pub eval_samples: usize,
    #[arg(long, value_enum, default_value = "affine")]
    pub model: ToyModel,
    #[command(flatten)]
    pub generator: ModelArgs,
    /// Write the trained causal generator.
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: u64,
    /// Unit-sequence destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the reassembled latent.
    #[arg(long)]
    pub latent_out: Option<PathBuf>,
    /// Write the generator as a checkpoint.
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Timing {
    /// Monotonic wall clock.
    Wall,
    /// Zero latencies; the whole output is reproducible.
    Off,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Cache window in units.
    #[arg(long)]
    pub window: usize,
    #[arg(long, default_value_t = 10)]
    pub segments: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long)]
    pub seed: u64,
    /// Never evict the first unit.
    #[arg(long)]
    pub pin_first: bool,
    #[arg(long, value_enum, default_value = "wall")]
    pub timing: Timing,
    /// Per-unit CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run at acceptance sizes instead of the reduced ones.
    #[arg(long)]
    pub full: bool,
    /// Run a single criterion.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=7))]
    pub criterion: Option<u8>,
}

fn scheme_arg(s: &str) -> std::result::Result<videoar_core::UnitScheme, String> {
    parse_scheme(s).map_err(|e| e.to_string())
}

fn dims_arg(s: &str) -> std::result::Result<videoar_core::Dims, String> {
    parse_dims(s).map_err(|e| e.to_string())
}

fn io_err(e: io::Error) -> Error {
    Error::io("<stdout>", e)
}

type Out<'a> = Emitter<&'a mut dyn Write>;

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let json = cli.json;
    let mut out = Emitter::new(stdout, json);
    match cli.command {
        Command::Partition(a) => run_partition(a, &mut out),
        Command::Reconstruct(a) => run_reconstruct(a, &mut out),
        Command::Masks(a) => run_masks(a, &mut out),
        Command::TrainToy(a) => run_train(a, &mut out),
        Command::Generate(a) => run_generate(a, &mut out),
        Command::StreamBench(a) => run_stream(a, &mut out),
        Command::Selftest(a) => run_selftest(a, &mut out),
    }
}

fn sequence_record(kind: &'static str, seq: &UnitSequence) -> Record {
    let payload: usize = seq.units.iter().map(|u| u.payload.len()).sum();
    Record::new(kind)
        .with("scheme", format_scheme(&seq.scheme))
        .with("dims", format_dims(seq.dims))
        .with("units", seq.units.len())
        .with("payload_values", payload)
}

fn run_partition(a: PartitionArgs, out: &mut Out) -> Result<()> {
    let z = match (&a.input, a.seed) {
        (Some(path), _) => format::read_latent(path)?,
        (None, Some(seed)) => {
            let dims = a.dims.ok_or_else(|| Error::Usage("--dims is required with --seed".into()))?;
            gaussian_volume(dims, &mut Rng::new(seed))?
        }
        (None, None) => return Err(Error::Usage("give --seed or --input".into())),
    };
    if let Some(d) = a.dims {
        if d != z.dims() {
            return Err(Error::Usage(format!("--dims {} disagrees with the input latent {}", format_dims(d), format_dims(z.dims()))));
        }
    }
    let seq = partition(&z, &a.scheme)?;
    format::write_units(&seq, &a.out)?;
    if let Some(p) = &a.latent_out {
        format::write_latent(&z, p)?;
    }
    out.emit(&sequence_record("partition", &seq).with("out", a.out.display().to_string())).map_err(io_err)
}

fn run_reconstruct(a: ReconstructArgs, out: &mut Out) -> Result<()> {
    let seq = format::read_units(&a.input)?;
    let z = reconstruct(&seq)?;
    format::write_latent(&z, &a.out)?;
    out.emit(
        &sequence_record("reconstruct", &seq)
            .with("mean", z.mean())
            .with("variance", z.variance())
            .with("out", a.out.display().to_string()),
    )
    .map_err(io_err)
}

fn run_masks(a: MasksArgs, out: &mut Out) -> Result<()> {
    let layout = UnitLayout::for_scheme(&a.scheme, a.dims, a.tokens_per_voxel)?;
    let dir: MaskDirection = a.direction.into();
    let mut mask = build_mask(&layout, dir)?;
    let report = verify_causality(&mask, dir);
    if !report.is_clean() {
        return Err(Error::Invariant(format!("{} mask fails verification: {report:?}", dir.name())));
    }
    if a.reverse {
        mask = reverse_mask(&mask);
    }
    let image = match a.format {
        MaskFormat::Text => mask_text(&mask).into_bytes(),
        MaskFormat::Pgm => mask_pgm(&mask),
    };
    match &a.out {
        Some(p) => format::write_bytes(p, &image)?,
        None => out.raw(&image).map_err(io_err)?,
    }
    let visible = mask.matrix().iter().filter(|&&v| v).count();
    out.emit(
        &Record::new("mask")
            .with("scheme", format_scheme(&a.scheme))
            .with("dims", format_dims(a.dims))
            .with("direction", mask.direction().map_or("custom", MaskDirection::name))
            .with("units", mask.n_units())
            .with("tokens", mask.n_tokens())
            .with("visible_pairs", visible)
            .with("causality", "clean"),
    )
    .map_err(io_err)
}

fn trace_record(mode: SymmetricMode, r: &TraceRecord) -> Record {
    Record::new("trace")
        .with("mode", mode.name())
        .with("step", r.step)
        .with("gen_mean", r.gen_mean)
        .with("gen_std", r.gen_std)
        .with("bracket_rms", r.bracket_rms)
        .with("scorer_loss", r.scorer_loss)
}

fn run_train(a: TrainArgs, out: &mut Out) -> Result<()> {
    if a.trace_every == 0 {
        return Err(Error::Usage("--trace-every must be positive".into()));
    }
    if a.target_var <= 0.0 {
        return Err(Error::Usage("--target-var must be positive".into()));
    }
    let mut trace_file = Vec::new();
    let mut trace_out = a.trace.as_ref().map(|_| Emitter::new(&mut trace_file, out.json));
    for mode in a.mode.modes() {
        let cfg = TrainConfig {
            lr: a.lr,
            steps: a.steps,
            batch_size: a.batch,
            scorer_updates: a.scorer_updates,
            scorer_lr: a.scorer_lr,
            seed: a.seed,
            mode,
        };
        let mut io_result = Ok(());
        let mut on_record = |r: &TraceRecord| {
            if r.step.is_multiple_of(a.trace_every) || r.step + 1 == a.steps {
                let rec = trace_record(mode, r);
                let res = match trace_out.as_mut() {
                    Some(t) => t.emit(&rec),
                    None => out.emit(&rec),
                };
                if io_result.is_ok() {
                    io_result = res;
                }
            }
        };
        let (final_mean, params) = match a.model {
            ToyModel::Affine => {
                let layout = UnitLayout::from_tokens(vec![1])?;
                let real = Scorer::analytic(vec![a.target_mean], a.target_var, ScorerRole::Real);
                let mut g = AffineGenerator::new(1, 1.0, a.init_mean);
                train_generator(&cfg, &real, &mut g, &layout, 1, &mut on_record)?;
                (sample_mean(&g, a.eval_samples, a.seed ^ 0xfeed)?, None)
            }
            ToyModel::Causal => {
                let (generator, params) = a.generator.load()?;
                let layout = generator.layout().clone();
                let channels = generator.channels();
                let real = Scorer::analytic(vec![a.target_mean; generator.buffer_len()], a.target_var, ScorerRole::Real);
                let mut g = CausalGenerator { generator, params };
                train_generator(&cfg, &real, &mut g, &layout, channels, &mut on_record)?;
                let n = (a.eval_samples / g.generator.buffer_len()).max(1);
                (sample_mean(&g, n, a.seed ^ 0xfeed)?, Some(g))
            }
        };
        io_result.map_err(io_err)?;
        if let (Some(path), Some(g)) = (&a.checkpoint_out, &params) {
            format::write_checkpoint(g.generator.config(), &g.params, path)?;
        }
        out.emit(
            &Record::new("train")
                .with("mode", mode.name())
                .with("steps", a.steps)
                .with("lr", a.lr)
                .with("target_mean", a.target_mean)
                .with("final_mean", final_mean)
                .with("error", final_mean - a.target_mean),
        )
        .map_err(io_err)?;
    }
    if let Some(path) = &a.trace {
        format::write_bytes(path, &trace_file)?;
    }
    Ok(())
}

fn run_generate(a: GenerateArgs, out: &mut Out) -> Result<()> {
    let (gen, params) = a.model.load()?;
    let seq = gen.generate_sequence(&params, &mut Rng::new(a.seed))?;
    format::write_units(&seq, &a.out)?;
    if let Some(p) = &a.latent_out {
        format::write_latent(&reconstruct(&seq)?, p)?;
    }
    if let Some(p) = &a.checkpoint_out {
        format::write_checkpoint(gen.config(), &params, p)?;
    }
    out.emit(
        &sequence_record("generate", &seq)
            .with("params", gen.param_count())
            .with("seed", a.seed)
            .with("out", a.out.display().to_string()),
    )
    .map_err(io_err)
}

fn run_stream(a: StreamArgs, out: &mut Out) -> Result<()> {
    let (gen, params) = a.model.load()?;
    let cfg = StreamConfig { window: a.window, pin_first: a.pin_first };
    let n_units = a.segments * gen.n_units();
    let mut clock: Box<dyn Clock> = match a.timing {
        Timing::Wall => Box::new(MonotonicClock::default()),
        Timing::Off => Box::new(NoClock),
    };
    let report = if a.warmup + 2 <= n_units {
        Some(bench_throughput(&gen, &params, cfg, n_units, a.warmup, a.seed, &mut clock)?)
    } else {
        None
    };
    let metrics = match &report {
        Some(r) => r.metrics.clone(),
        None => stream_units(&gen, &params, n_units, cfg, &mut Rng::new(a.seed), &mut clock, |_, _| {})?,
    };
    let mut rows = Vec::new();
    {
        let mut csv = Emitter::new(&mut rows, out.json);
        if !out.json {
            writeln!(csv.raw_writer(), "unit_index,latency_ns,resident_bytes,context_units").map_err(io_err)?;
        }
        for m in &metrics.per_unit {
            if out.json {
                csv.emit(
                    &Record::new("stream-unit")
                        .with("unit_index", m.unit_index)
                        .with("latency_ns", m.latency_ns)
                        .with("resident_bytes", m.resident_bytes)
                        .with("context_units", m.context_units),
                )
                .map_err(io_err)?;
            } else {
                writeln!(csv.raw_writer(), "{},{},{},{}", m.unit_index, m.latency_ns, m.resident_bytes, m.context_units).map_err(io_err)?;
            }
        }
    }
    match &a.out {
        Some(p) => format::write_bytes(p, &rows)?,
        None => out.raw(&rows).map_err(io_err)?,
    }
    let mut summary = Record::new("stream-summary")
        .with("scheme", format_scheme(&gen.config().scheme))
        .with("dims", format_dims(gen.config().dims))
        .with("window", a.window)
        .with("pin_first", a.pin_first)
        .with("units", metrics.units_generated)
        .with("tokens_per_unit_max", gen.layout().max_unit_tokens())
        .with("peak_resident_bytes", metrics.peak_resident_bytes);
    if let Some(r) = &report {
        summary = summary
            .with("warmup", r.warmup)
            .with("median_leading_ns", r.median_leading_ns)
            .with("median_trailing_ns", r.median_trailing_ns)
            .with("drift", r.drift)
            .with("drift_flag", r.drift_flag)
            .with("attention_mults_max", r.max_attention_mults)
            .with("mults_match_analytic", r.mults_match_analytic);
    }
    out.emit(&summary).map_err(io_err)
}

fn run_selftest(a: SelftestArgs, out: &mut Out) -> Result<()> {
    let profile = if a.full { Profile::full() } else { Profile::reduced() };
    let ids: Vec<u8> = match a.criterion {
        Some(id) => vec![id],
        None => selftest::CRITERIA.iter().map(|(id, _)| *id).collect(),
    };
    let mut failed = Vec::new();
    for id in ids {
        let o = selftest::run_criterion(id, &profile);
        out.emit(
            &Record::new("selftest")
                .with("criterion", o.id)
                .with("name", o.name)
                .with("status", if o.passed { "pass" } else { "fail" })
                .with("detail", o.detail.clone()),
        )
        .map_err(io_err)?;
        if !o.passed {
            failed.push(o.id);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("selftest criteria {failed:?} failed")))
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = String>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
