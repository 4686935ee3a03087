mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmodal::evalkit::Metric;
use xmodal::extract::Pooling;
use xmodal::filterscope::BandThresholds;
use xmodal::ingest::{ChannelStrategy, EvalScheme};
use xmodal::lora::Projection;
use xmodal::probe::ProbeKind;

use crate::config::{LoraLayerMode, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Probe frozen speech encoders on sensor windows")]
struct Cli {
    /// Config file (TOML, JSON, or a previous JSON artifact); flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode every window and cache pooled per-layer embeddings.
    Extract(ExtractArgs),
    /// Cross-validated probes on one or more layers.
    Evaluate(ProbeArgs),
    /// Cross-validated probes on every cached layer.
    Sweep(ProbeArgs),
    /// Engineered features with a random forest.
    Baseline(BaselineArgs),
    /// Train low-rank adapters jointly with a probe.
    TrainLora(LoraArgs),
    /// Frequency responses of the first conv layer's filters.
    Viz(VizArgs),
    /// Load a checkpoint and optionally check it against a parity fixture.
    VerifyCheckpoint(VerifyArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Embedding cache file; defaults under $XMODAL_CACHE_DIR or the output directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Encoding {
    /// Comma-separated layer indices (0 = conv features).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_pooling)]
    pooling: Option<Pooling>,
    #[arg(long, value_parser = parse_channels)]
    channel_strategy: Option<ChannelStrategy>,
}

#[derive(Args, Debug)]
struct Scheme {
    /// `loso` or `kfold`.
    #[arg(long)]
    scheme: Option<String>,
    /// Folds for `kfold` (default 5).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Training {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    class_weighting: bool,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    encoding: Encoding,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    encoding: Encoding,
    #[command(flatten)]
    scheme: Scheme,
    #[command(flatten)]
    training: Training,
    /// `linear` or `mlp`.
    #[arg(long, value_parser = parse_probe)]
    probe: Option<ProbeKind>,
    /// Skip fold-local feature standardization.
    #[arg(long)]
    no_standardize: bool,
    /// Metric written to the sweep CSV: f1, accuracy or auc.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    scheme: Scheme,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    forest_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct LoraArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    encoding: Encoding,
    #[command(flatten)]
    scheme: Scheme,
    #[command(flatten)]
    training: Training,
    #[arg(long, value_parser = parse_probe)]
    probe: Option<ProbeKind>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Target projections, e.g. `q,v`.
    #[arg(long, value_delimiter = ',', value_parser = parse_projection)]
    projections: Option<Vec<Projection>>,
    /// `one-at-a-time` or `all`.
    #[arg(long, value_parser = parse_lora_mode)]
    lora_layers: Option<LoraLayerMode>,
    /// Layer feeding the probe in `all` mode (default: last).
    #[arg(long)]
    probe_layer: Option<usize>,
    /// Finite-difference check of adapter gradients before training.
    #[arg(long)]
    grad_check: bool,
    /// Also report cross-validated metrics.
    #[arg(long)]
    cv: bool,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    n_fft: Option<usize>,
    /// Explicit filter indices, e.g. `0,5,9`.
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    /// `key=value` pairs: low, high, tail, edge, edge_fraction.
    #[arg(long, value_parser = parse_thresholds)]
    thresholds: Option<BandThresholds>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fixture: Option<PathBuf>,
}

fn parse_pooling(s: &str) -> Result<Pooling, String> {
    Pooling::parse(s).ok_or_else(|| format!("unknown pooling `{s}` (mean, max)"))
}

fn parse_channels(s: &str) -> Result<ChannelStrategy, String> {
    ChannelStrategy::parse(s).ok_or_else(|| format!("unknown channel strategy `{s}` (per-axis, magnitude)"))
}

fn parse_probe(s: &str) -> Result<ProbeKind, String> {
    ProbeKind::parse(s).ok_or_else(|| format!("unknown probe `{s}` (linear, mlp)"))
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::parse(s).ok_or_else(|| format!("unknown metric `{s}` (f1, accuracy, auc)"))
}

fn parse_projection(s: &str) -> Result<Projection, String> {
    Projection::parse(s).ok_or_else(|| format!("unknown projection `{s}` (q, v)"))
}

fn parse_lora_mode(s: &str) -> Result<LoraLayerMode, String> {
    LoraLayerMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (one-at-a-time, all)"))
}

fn parse_thresholds(s: &str) -> Result<BandThresholds, String> {
    let mut t = BandThresholds::default();
    for pair in s.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').ok_or_else(|| format!("expected key=value, got `{pair}`"))?;
        let v: f64 = v.parse().map_err(|_| format!("bad number in `{pair}`"))?;
        match k {
            "low" => t.low_position = v,
            "high" => t.high_position = v,
            "tail" => t.tail_ratio = v,
            "edge" => t.edge_ratio = v,
            "edge_fraction" => t.edge_fraction = v,
            _ => return Err(format!("unknown threshold `{k}`")),
        }
    }
    Ok(t)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

impl Inputs {
    fn apply(self, c: &mut RunConfig) {
        set_opt(&mut c.manifest, self.manifest);
        set_opt(&mut c.checkpoint, self.checkpoint);
        set_opt(&mut c.cache, self.cache);
    }
}

impl Encoding {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.layers, self.layers);
        set(&mut c.pooling, self.pooling);
        set_opt(&mut c.channel_strategy, self.channel_strategy);
    }
}

impl Scheme {
    fn apply(self, c: &mut RunConfig) -> Result<(), CliError> {
        match self.scheme.as_deref() {
            None => {
                if let (Some(k), Some(EvalScheme::Kfold { .. }) | None) = (self.k, c.scheme) {
                    c.scheme = Some(EvalScheme::Kfold { k });
                }
            }
            Some("loso") => c.scheme = Some(EvalScheme::Loso),
            Some("kfold") => {
                let k = match (self.k, c.scheme) {
                    (Some(k), _) => k,
                    (None, Some(EvalScheme::Kfold { k })) => k,
                    _ => 5,
                };
                c.scheme = Some(EvalScheme::Kfold { k });
            }
            Some(other) => return Err(CliError::validation(format!("unknown scheme `{other}` (loso, kfold)"))),
        }
        set(&mut c.split_seed, self.split_seed);
        Ok(())
    }
}

impl Training {
    fn apply(self, t: &mut xmodal::probe::TrainConfig) {
        set(&mut t.epochs, self.epochs);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.hidden_dim, self.hidden_dim);
        set_opt(&mut t.patience, self.patience);
        set(&mut t.seed, self.seed);
        t.class_weighting |= self.class_weighting;
    }
}

impl ProbeArgs {
    fn apply(self, c: &mut RunConfig) -> Result<(), CliError> {
        self.inputs.apply(c);
        self.encoding.apply(c);
        self.scheme.apply(c)?;
        self.training.apply(&mut c.train);
        set(&mut c.probe, self.probe);
        set(&mut c.metric, self.metric);
        c.standardize &= !self.no_standardize;
        Ok(())
    }
}

fn build_config(cli: Cli) -> Result<RunConfig, CliError> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set_opt(&mut c.out, cli.out);
    set_opt(&mut c.jobs, cli.jobs);
    let name = match cli.command {
        Command::Extract(a) => {
            a.inputs.apply(&mut c);
            a.encoding.apply(&mut c);
            "extract"
        }
        Command::Evaluate(a) => {
            a.apply(&mut c)?;
            "evaluate"
        }
        Command::Sweep(a) => {
            a.apply(&mut c)?;
            "sweep"
        }
        Command::Baseline(a) => {
            set_opt(&mut c.manifest, a.manifest);
            a.scheme.apply(&mut c)?;
            set(&mut c.forest.n_trees, a.n_trees);
            set_opt(&mut c.forest.max_depth, a.max_depth);
            set(&mut c.forest.seed, a.forest_seed);
            "baseline"
        }
        Command::TrainLora(a) => {
            a.inputs.apply(&mut c);
            a.encoding.apply(&mut c);
            // For adapters, --layers picks the adapted layers.
            if !c.layers.is_empty() {
                c.lora.layers = std::mem::take(&mut c.layers);
            }
            c.lora.pooling = c.pooling;
            a.scheme.apply(&mut c)?;
            a.training.apply(&mut c.lora.train);
            set(&mut c.probe, a.probe);
            set(&mut c.lora.rank, a.rank);
            set(&mut c.lora.alpha, a.alpha);
            set(&mut c.lora.projections, a.projections);
            set(&mut c.lora_layers, a.lora_layers);
            set_opt(&mut c.lora.probe_layer, a.probe_layer);
            c.lora.grad_check |= a.grad_check;
            c.lora_cv |= a.cv;
            "train-lora"
        }
        Command::Viz(a) => {
            set_opt(&mut c.checkpoint, a.checkpoint);
            set(&mut c.viz.top_k, a.top_k);
            set(&mut c.viz.n_fft, a.n_fft);
            set_opt(&mut c.viz.filters, a.filters);
            set(&mut c.viz.thresholds, a.thresholds);
            "viz"
        }
        Command::VerifyCheckpoint(a) => {
            set_opt(&mut c.checkpoint, a.checkpoint);
            set_opt(&mut c.fixture, a.fixture);
            "verify-checkpoint"
        }
    };
    c.command = name.to_string();
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = build_config(cli)?;
    if let Some(n) = config.jobs {
        if n == 0 {
            return Err(CliError::validation("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    match config.command.as_str() {
        "extract" => commands::extract(&config),
        "evaluate" | "sweep" => commands::evaluate(&config),
        "baseline" => commands::baseline(&config),
        "train-lora" => commands::train_lora(&config),
        "viz" => commands::viz(&config),
        _ => commands::verify_checkpoint(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
