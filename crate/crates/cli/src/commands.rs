//! The five batch entry points: `sft`, `rl`, `eval`, `compare`, `plots`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cotlab::checkpoint;
use cotlab::metrics::{
    entropy_binned_kl, evaluate_example, FaithfulnessReport, ReferencePair,
};
use cotlab::model::Model;
use cotlab::roles::segment;
use cotlab::stats::mann_whitney_u;
use cotlab::task::{behavioral_probe, build_trace, gen_example, DatasetRow, Example};
use cotlab::trainer::{
    derive_seed, fixed_probe_set, greedy_wellformed_rate, probe_traces, rollout_dump, sft_step,
    SftTrace, TraceRow, Trainer,
};
use cotlab::vocab::Vocab;
use cotlab::optim::{AdamW, AdamWConfig};

use crate::config::{write_manifest, RunConfig};

use rand::SeedableRng;

const SFT_STREAM_TAG: u64 = 11;
const SFT_EVAL_TAG: u64 = 12;
const DATASET_TAG: u64 = 13;

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

// ── sft ─────────────────────────────────────────────────────────────────

pub struct SftArgs {
    pub seed: u64,
    pub out: PathBuf,
    pub corpus_override: Option<cotlab::task::CorpusStyle>,
}

#[derive(Serialize)]
struct SftCurveRow {
    step: usize,
    loss: f64,
}

/// Supervised warm start on a synthetic corpus stream. Writes the final
/// checkpoint, the vocab table, a loss curve, a corpus sample dump, and the
/// greedy well-formedness rate.
pub fn run_sft(mut cfg: RunConfig, args: SftArgs) -> Result<()> {
    if let Some(c) = args.corpus_override {
        cfg.sft.corpus = c;
    }
    cfg.validate().map_err(crate::ConfigError)?;
    let vocab = Vocab::new();
    cfg.model.vocab_size = vocab.len();
    cfg.model.seed = args.seed;
    write_manifest(&args.out, "sft", args.seed, &cfg)?;
    vocab.save(&args.out.join("vocab.json"))?;

    let mut model = Model::init(cfg.model.clone());
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.sft.lr, warmup_steps: 10, ..Default::default() },
        &model,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[args.seed, SFT_STREAM_TAG]));
    let mut curve = jsonl_writer(&args.out.join("sft_curve.jsonl"))?;

    // dump a dataset sample for inspection
    {
        let mut w = jsonl_writer(&args.out.join("corpus_sample.jsonl"))?;
        let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(&[args.seed, DATASET_TAG]));
        for _ in 0..64 {
            let ex = gen_example(&mut drng, &cfg.task, &vocab);
            writeln!(w, "{}", serde_json::to_string(&DatasetRow::from(&ex))?)?;
        }
    }

    for step in 0..cfg.sft.steps {
        let batch: Vec<SftTrace> = (0..cfg.sft.batch)
            .map(|_| {
                let ex = gen_example(&mut rng, &cfg.task, &vocab);
                let tokens = build_trace(&ex, cfg.sft.corpus, &vocab, &mut rng);
                SftTrace { gen_start: ex.prompt_tokens.len(), tokens }
            })
            .collect();
        let loss = sft_step(&mut model, &mut opt, &batch, cfg.train.grad_clip)
            .map_err(crate::train_error)?;
        writeln!(curve, "{}", serde_json::to_string(&SftCurveRow { step, loss })?)?;
        if step % 100 == 0 {
            eprintln!("sft step {step}: loss {loss:.4}");
        }
    }
    curve.flush()?;

    let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(&[args.seed, SFT_EVAL_TAG]));
    let held_out: Vec<Example> =
        (0..cfg.sft.eval_size).map(|_| gen_example(&mut erng, &cfg.task, &vocab)).collect();
    let rate = greedy_wellformed_rate(&model, &held_out, cfg.train.max_new);
    std::fs::write(
        args.out.join("wellformed.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "greedy_wellformed_rate": rate }))?,
    )?;
    eprintln!("sft done: greedy well-formed rate {rate:.4}");

    checkpoint::save(&model, &args.out.join("checkpoint_final.ckpt"))?;
    Ok(())
}

// ── rl ──────────────────────────────────────────────────────────────────

pub struct RlArgs {
    pub seed: u64,
    pub ckpt: PathBuf,
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
    pub dump_rollout_steps: usize,
    pub skip_gate: bool,
}

/// RL training with the configured intervention. Writes the TrainTrace
/// JSONL, step-indexed checkpoints, and optional rollout dumps for the
/// first steps.
pub fn run_rl(mut cfg: RunConfig, args: RlArgs) -> Result<()> {
    cfg.train.seed = args.seed;
    cfg.validate().map_err(crate::ConfigError)?;
    let vocab = Vocab::new();
    cfg.model.vocab_size = vocab.len();
    write_manifest(&args.out, "rl", args.seed, &cfg)?;
    vocab.save(&args.out.join("vocab.json"))?;

    let model = checkpoint::load(&args.ckpt)
        .with_context(|| format!("loading warm start {}", args.ckpt.display()))?;
    let reference = match &args.reference {
        Some(p) => {
            Some(checkpoint::load(p).with_context(|| format!("loading reference {}", p.display()))?)
        }
        None => None,
    };

    if !args.skip_gate {
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(&[args.seed, SFT_EVAL_TAG]));
        let held_out: Vec<Example> =
            (0..cfg.sft.eval_size).map(|_| gen_example(&mut erng, &cfg.task, &vocab)).collect();
        let rate = greedy_wellformed_rate(&model, &held_out, cfg.train.max_new);
        anyhow::ensure!(
            rate >= 0.99,
            "warm start fails the well-formedness gate: {rate:.4} < 0.99 (use --skip-gate to override)"
        );
    }

    let steps = cfg.train.steps;
    let ckpt_every = cfg.train.checkpoint_every;
    let mut trainer =
        Trainer::new(model, reference, cfg.train.clone(), cfg.task.clone(), vocab);
    let mut trace = jsonl_writer(&args.out.join("train_trace.jsonl"))?;

    for step in 0..steps {
        let (row, groups) = trainer.train_step().map_err(crate::train_error)?;
        if step < args.dump_rollout_steps {
            std::fs::write(
                args.out.join(format!("rollouts_step{step:05}.jsonl")),
                rollout_dump(&groups),
            )?;
        }
        writeln!(trace, "{}", serde_json::to_string(&row)?)?;
        if row.probe.is_some() {
            trace.flush()?;
            eprintln!(
                "rl step {step}: reward {:.3} loss {:.5} |g| {:.3}",
                row.mean_reward, row.loss, row.grad_norm
            );
        }
        if ckpt_every > 0 && (step + 1) % ckpt_every == 0 {
            checkpoint::save(&trainer.model, &args.out.join(format!("checkpoint_{:05}.ckpt", step + 1)))?;
        }
    }
    trace.flush()?;
    checkpoint::save(&trainer.model, &args.out.join("checkpoint_final.ckpt"))?;
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
    pub bins: usize,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    id: usize,
    step: u64,
    #[serde(flatten)]
    report: FaithfulnessReport,
}

/// Per-example traces and reports for one checkpoint on a fixed probe set.
fn checkpoint_reports(
    model: &Model,
    reference: &Model,
    probe_set: &[Example],
    cfg: &RunConfig,
) -> Result<(Vec<Vec<usize>>, Vec<Option<FaithfulnessReport>>)> {
    let mut probe_cfg = cfg.train.clone();
    probe_cfg.seed = cfg.probe_seed;
    let traces = probe_traces(model, probe_set, &probe_cfg, 0).map_err(crate::train_error)?;
    let pair = ReferencePair::new(model, reference);
    let idx: Vec<usize> = (0..traces.len()).collect();
    let reports = cotlab::parallel::par_map(&idx, |&i| {
        let spans = segment(&traces[i]).ok()?;
        if spans.answer.is_empty() {
            return None;
        }
        evaluate_example(&pair, &traces[i], &spans).ok()
    });
    Ok((traces, reports))
}

/// Sample the probe set, emit FaithfulnessReport JSONL, the behavioral
/// probe JSON, and the entropy-binned KL table.
pub fn run_eval(cfg: RunConfig, args: EvalArgs) -> Result<()> {
    cfg.validate().map_err(crate::ConfigError)?;
    let vocab = Vocab::new();
    write_manifest(&args.out, "eval", cfg.probe_seed, &cfg)?;

    let model = checkpoint::load(&args.ckpt)?;
    let reference = match &args.reference {
        Some(p) => checkpoint::load(p)?,
        None => model.snapshot(),
    };
    let probe_set = fixed_probe_set(&cfg.task, &vocab, cfg.probe_seed, cfg.probe_size);
    let (traces, reports) = checkpoint_reports(&model, &reference, &probe_set, &cfg)?;

    let mut w = jsonl_writer(&args.out.join("reports.jsonl"))?;
    let mut kept = Vec::new();
    for (id, rep) in reports.into_iter().enumerate() {
        if let Some(report) = rep {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&ReportRow { id, step: model.version, report: report.clone() })?
            )?;
            kept.push(report);
        }
    }
    w.flush()?;

    let behavior = behavioral_probe(&traces, &probe_set, &vocab)?;
    std::fs::write(args.out.join("behavior.json"), serde_json::to_string_pretty(&behavior)?)?;

    if !kept.is_empty() {
        let bins = entropy_binned_kl(&kept, args.bins);
        std::fs::write(args.out.join("entropy_bins.json"), serde_json::to_string_pretty(&bins)?)?;
    }
    eprintln!(
        "eval done: {} reports, overall accuracy {:.3}",
        kept.len(),
        behavior.overall_accuracy
    );
    Ok(())
}

// ── compare ─────────────────────────────────────────────────────────────

pub struct CompareArgs {
    pub baseline: PathBuf,
    pub candidate: PathBuf,
    pub reference: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Arrow {
    /// Candidate more faithful when lower.
    Down,
    /// Candidate more faithful when higher.
    Up,
}

#[derive(Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub u: f64,
    pub p: f64,
    /// Whether the candidate/baseline ordering matches the metric's arrow;
    /// omitted for the necessity KL, whose direction is not asserted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction_ok: Option<bool>,
}

#[derive(Serialize, Deserialize)]
pub struct CompareReport {
    pub probe_size: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub metrics: Vec<MetricComparison>,
}

/// Mann–Whitney comparison of two checkpoints' per-example metrics on the
/// same probe set. `a` is the baseline, `b` the candidate hypothesized to
/// be more faithful.
pub fn run_compare(cfg: RunConfig, args: CompareArgs) -> Result<()> {
    cfg.validate().map_err(crate::ConfigError)?;
    let vocab = Vocab::new();
    write_manifest(&args.out, "compare", cfg.probe_seed, &cfg)?;

    let base = checkpoint::load(&args.baseline)?;
    let cand = checkpoint::load(&args.candidate)?;
    let reference = checkpoint::load(&args.reference)?;
    let probe_set = fixed_probe_set(&cfg.task, &vocab, cfg.probe_seed, cfg.probe_size);

    let (_, reports_a) = checkpoint_reports(&base, &reference, &probe_set, &cfg)?;
    let (_, reports_b) = checkpoint_reports(&cand, &reference, &probe_set, &cfg)?;
    let a: Vec<FaithfulnessReport> = reports_a.into_iter().flatten().collect();
    let b: Vec<FaithfulnessReport> = reports_b.into_iter().flatten().collect();
    anyhow::ensure!(!a.is_empty() && !b.is_empty(), "a checkpoint produced no valid reports");

    let fields: [(&str, Option<Arrow>, fn(&FaithfulnessReport) -> Option<f64>); 7] = [
        ("suff", Some(Arrow::Down), |r| Some(r.suff)),
        ("kl_de", Some(Arrow::Down), |r| Some(r.kl_de)),
        ("kl_de_ref", Some(Arrow::Down), |r| Some(r.kl_de_ref)),
        ("grad_de", Some(Arrow::Down), |r| r.grad_de),
        ("grad_nec", Some(Arrow::Up), |r| r.grad_nec),
        ("kl_nec", None, |r| Some(r.kl_nec)),
        ("kl_nec_ref", None, |r| Some(r.kl_nec_ref)),
    ];
    let mut metrics = Vec::new();
    for (name, arrow, get) in fields {
        let va: Vec<f64> = a.iter().filter_map(get).collect();
        let vb: Vec<f64> = b.iter().filter_map(get).collect();
        if va.is_empty() || vb.is_empty() {
            continue;
        }
        let mean_a = va.iter().sum::<f64>() / va.len() as f64;
        let mean_b = vb.iter().sum::<f64>() / vb.len() as f64;
        let (u, p) = mann_whitney_u(&va, &vb);
        let direction_ok = arrow.map(|ar| match ar {
            Arrow::Down => mean_b < mean_a,
            Arrow::Up => mean_b > mean_a,
        });
        metrics.push(MetricComparison { metric: name.to_string(), mean_a, mean_b, u, p, direction_ok });
    }
    let report =
        CompareReport { probe_size: cfg.probe_size, n_a: a.len(), n_b: b.len(), metrics };
    std::fs::write(args.out.join("compare.json"), serde_json::to_string_pretty(&report)?)?;
    for m in &report.metrics {
        eprintln!(
            "{:<11} a {:.4}  b {:.4}  p {:.4} {}",
            m.metric,
            m.mean_a,
            m.mean_b,
            m.p,
            match m.direction_ok {
                Some(true) => "direction ok",
                Some(false) => "direction WRONG",
                None => "(no direction asserted)",
            }
        );
    }
    Ok(())
}

// ── plots ───────────────────────────────────────────────────────────────

pub struct PlotsArgs {
    pub traces: Vec<PathBuf>,
    pub labels: Option<Vec<String>>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PanelSchema {
    file: String,
    panel: String,
    cadence: &'static str,
    columns: Vec<String>,
}

/// One CSV per figure panel: a `step` column plus one series per input
/// trace. Probe-less steps are absent rows, never fabricated.
pub fn run_plots(args: PlotsArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let labels: Vec<String> = match &args.labels {
        Some(l) => l.clone(),
        None => args
            .traces
            .iter()
            .map(|p| {
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into())
            })
            .collect(),
    };
    anyhow::ensure!(labels.len() == args.traces.len(), "one label per trace file");

    let mut runs: Vec<Vec<TraceRow>> = Vec::new();
    for p in &args.traces {
        let text = std::fs::read_to_string(p)?;
        let rows: Vec<TraceRow> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        anyhow::ensure!(!rows.is_empty(), "empty trace file {}", p.display());
        runs.push(rows);
    }

    type Extract = fn(&TraceRow) -> Option<f64>;
    let step_panels: [(&str, Extract); 2] = [
        ("reward_mean", |r| Some(r.mean_reward)),
        ("loss", |r| Some(r.loss)),
    ];
    let probe_panels: [(&str, Extract); 13] = [
        ("behavior_hint_mention", |r| r.probe.as_ref().and_then(|p| p.behavioral.hint_mention_rate)),
        ("behavior_wrong_hint_follow", |r| {
            r.probe.as_ref().and_then(|p| p.behavioral.wrong_hint_follow_rate)
        }),
        ("behavior_wrong_hint_accuracy", |r| {
            r.probe.as_ref().and_then(|p| p.behavioral.wrong_hint_accuracy)
        }),
        ("behavior_overall_accuracy", |r| {
            r.probe.as_ref().map(|p| p.behavioral.overall_accuracy)
        }),
        ("metric_suff", |r| r.probe.as_ref().and_then(|p| p.suff)),
        ("metric_grad_de", |r| r.probe.as_ref().and_then(|p| p.grad_de)),
        ("metric_grad_nec", |r| r.probe.as_ref().and_then(|p| p.grad_nec)),
        ("metric_kl_de", |r| r.probe.as_ref().and_then(|p| p.kl_de)),
        ("metric_kl_nec", |r| r.probe.as_ref().and_then(|p| p.kl_nec)),
        ("metric_h_full", |r| r.probe.as_ref().and_then(|p| p.h_full)),
        ("causal_sign_flip", |r| r.probe.as_ref().and_then(|p| p.causal_sign_flip)),
        ("causal_scale_2x", |r| r.probe.as_ref().and_then(|p| p.causal_scale_2x)),
        ("causal_random", |r| r.probe.as_ref().and_then(|p| p.causal_random)),
    ];

    let mut schema = Vec::new();
    let emit = |name: &str,
                cadence: &'static str,
                extract: Extract,
                schema: &mut Vec<PanelSchema>|
     -> Result<()> {
        let mut steps = BTreeSet::new();
        for rows in &runs {
            for r in rows {
                if extract(r).is_some() {
                    steps.insert(r.step);
                }
            }
        }
        if steps.is_empty() {
            return Ok(());
        }
        let file = format!("{name}.csv");
        let mut w = BufWriter::new(File::create(args.out.join(&file))?);
        write!(w, "step")?;
        for l in &labels {
            write!(w, ",{l}")?;
        }
        writeln!(w)?;
        for &s in &steps {
            write!(w, "{s}")?;
            for rows in &runs {
                match rows.iter().find(|r| r.step == s).and_then(extract) {
                    Some(v) => write!(w, ",{v}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        w.flush()?;
        let mut columns = vec!["step".to_string()];
        columns.extend(labels.iter().cloned());
        schema.push(PanelSchema { file, panel: name.to_string(), cadence, columns });
        Ok(())
    };

    for (name, ex) in step_panels {
        emit(name, "every-step", ex, &mut schema)?;
    }
    for (name, ex) in probe_panels {
        emit(name, "probe-steps", ex, &mut schema)?;
    }
    std::fs::write(args.out.join("plots_schema.json"), serde_json::to_string_pretty(&schema)?)?;
    eprintln!("plots done: {} panels", schema.len());
    Ok(())
}
