//! Batch pipeline driver: supervised warm start, RL with a structural
//! intervention, metric evaluation, checkpoint comparison, and plot-data
//! emission. Exit code 2 flags an invalid configuration, 3 a non-finite
//! training abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use cotlab::interventions::InterventionKind;
use cotlab::task::CorpusStyle;
use cotlab::trainer::{ClipBounds, TrainError};

use commands::{CompareArgs, EvalArgs, PlotsArgs, RlArgs, SftArgs};
use config::RunConfig;

/// Wrapper marking configuration failures (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Wrap trainer errors so the non-finite abort keeps its exit code.
pub fn train_error(e: TrainError) -> anyhow::Error {
    anyhow::Error::new(e)
}

#[derive(Parser)]
#[command(name = "cotlab", about = "Chain-of-thought information-flow laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// JSON run-config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training steps override.
    #[arg(long)]
    steps: Option<usize>,
    /// Prompt batch size override.
    #[arg(long)]
    batch: Option<usize>,
    /// Completions per prompt override.
    #[arg(long)]
    k: Option<usize>,
    /// Learning-rate override.
    #[arg(long)]
    lr: Option<f64>,
    /// Probe cadence override (0 disables probes).
    #[arg(long)]
    probe_every: Option<usize>,
    /// Training-probe set size override.
    #[arg(long)]
    probe_size: Option<usize>,
}

impl CommonFlags {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(b) = self.batch {
            cfg.train.batch = b;
        }
        if let Some(k) = self.k {
            cfg.train.k = k;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(p) = self.probe_every {
            cfg.train.probe_every = p;
        }
        if let Some(p) = self.probe_size {
            cfg.train.probe_size = p;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Supervised warm start on a synthetic corpus.
    Sft {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Corpus style: genuine computation or silent hint copying.
        #[arg(long, value_enum)]
        corpus: Option<CorpusArg>,
        /// SFT steps override.
        #[arg(long)]
        sft_steps: Option<usize>,
    },
    /// On-policy RL with a structural intervention at update time.
    Rl {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        seed: u64,
        /// Warm-start checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Frozen reference checkpoint (defaults to the warm start).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        intervention: Option<InterventionArg>,
        /// FGSM epsilon override.
        #[arg(long)]
        fact_epsilon: Option<f64>,
        /// Asymmetric PPO clip bounds, e.g. 0.2,0.28.
        #[arg(long, value_parser = parse_clip)]
        clip: Option<ClipBounds>,
        /// Dump rollouts for the first N steps.
        #[arg(long, default_value_t = 0)]
        dump_rollouts: usize,
        /// Skip the warm-start well-formedness gate.
        #[arg(long, default_value_t = false)]
        skip_gate: bool,
    },
    /// Faithfulness reports, behavioral probe, and the entropy-binned KL
    /// table for one checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        ckpt: PathBuf,
        /// Frozen reference checkpoint (defaults to the evaluated one).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        probe_seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Probe-set size for this evaluation.
        #[arg(long)]
        eval_probe_size: Option<usize>,
    },
    /// Mann–Whitney metric comparison of two checkpoints (candidate
    /// hypothesized more faithful than baseline).
    Compare {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        probe_seed: Option<u64>,
        #[arg(long)]
        eval_probe_size: Option<usize>,
    },
    /// CSV series per figure panel from TrainTrace files.
    Plots {
        /// TrainTrace JSONL files, one per run.
        #[arg(long, required = true, num_args = 1..)]
        traces: Vec<PathBuf>,
        /// Comma-separated series labels (default: file stems).
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CorpusArg {
    Genuine,
    HintCopy,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum InterventionArg {
    None,
    UpdateMask,
    GradientMask,
    CotGradient,
    Fact,
}

impl From<InterventionArg> for InterventionKind {
    fn from(a: InterventionArg) -> Self {
        match a {
            InterventionArg::None => InterventionKind::None,
            InterventionArg::UpdateMask => InterventionKind::UpdateMask,
            InterventionArg::GradientMask => InterventionKind::GradientMask,
            InterventionArg::CotGradient => InterventionKind::CotGradient,
            InterventionArg::Fact => InterventionKind::Fact,
        }
    }
}

fn parse_clip(s: &str) -> Result<ClipBounds, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected low,high".into());
    }
    let low = parts[0].parse().map_err(|e| format!("{e}"))?;
    let high = parts[1].parse().map_err(|e| format!("{e}"))?;
    Ok(ClipBounds { low, high })
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Sft { common, seed, out, corpus, sft_steps } => {
            let mut cfg = common.load()?;
            if let Some(s) = sft_steps {
                cfg.sft.steps = s;
            }
            let corpus_override = corpus.map(|c| match c {
                CorpusArg::Genuine => CorpusStyle::Genuine,
                CorpusArg::HintCopy => CorpusStyle::HintCopy,
            });
            commands::run_sft(cfg, SftArgs { seed, out, corpus_override })
        }
        Cmd::Rl {
            common,
            seed,
            ckpt,
            reference,
            out,
            intervention,
            fact_epsilon,
            clip,
            dump_rollouts,
            skip_gate,
        } => {
            let mut cfg = common.load()?;
            if let Some(i) = intervention {
                cfg.train.intervention.kind = i.into();
            }
            if let Some(e) = fact_epsilon {
                cfg.train.intervention.fact_epsilon = e;
            }
            if let Some(c) = clip {
                cfg.train.clip = Some(c);
            }
            commands::run_rl(
                cfg,
                RlArgs { seed, ckpt, reference, out, dump_rollout_steps: dump_rollouts, skip_gate },
            )
        }
        Cmd::Eval { common, ckpt, reference, out, probe_seed, bins, eval_probe_size } => {
            let mut cfg = common.load()?;
            if let Some(s) = probe_seed {
                cfg.probe_seed = s;
            }
            if let Some(n) = eval_probe_size {
                cfg.probe_size = n;
            }
            commands::run_eval(cfg, EvalArgs { ckpt, reference, out, bins })
        }
        Cmd::Compare { common, baseline, candidate, reference, out, probe_seed, eval_probe_size } => {
            let mut cfg = common.load()?;
            if let Some(s) = probe_seed {
                cfg.probe_seed = s;
            }
            if let Some(n) = eval_probe_size {
                cfg.probe_size = n;
            }
            commands::run_compare(cfg, CompareArgs { baseline, candidate, reference, out })
        }
        Cmd::Plots { traces, labels, out } => commands::run_plots(PlotsArgs { traces, labels, out }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else if matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite(_))) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
