use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusebench::config::KeyValues;
use fusebench::evalreport::metrics_csv;
use fusebench::stackio::load_manifest;
use fusebench::synth::{generate_corpus, SyntheticTaskSpec};
use fusebench::trainer::{
    evaluate, grad_check, parse_task, trace_csv, Checkpoint, Dataset, GradCheckOptions, Optimizer, Split,
    TrainConfig, Trainer,
};
use fusebench::{Error, FusionMode, Result, TaskKind};

/// Layer-wise fusion of frozen speech representation models.
///
/// Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
/// 3 I/O or file-format error. FUSEBENCH_THREADS sets the number of worker
/// threads (default 1); results do not depend on it.
#[derive(Parser, Debug)]
#[command(name = "fusebench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-task corpus and print its manifest paths.
    Synth {
        /// Key-value spec file (`key = value` lines, `#` comments). Keys:
        /// model_count, layer_count, dim, class_count, vocab_size,
        /// utterance_count, min_frames, max_frames, class_specialization,
        /// token_specialization, noise_std, session_noise_std, model_scale,
        /// seed. Omitted keys, or the whole file, fall back to the
        /// acceptance defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory; receives sid.jsonl, asr.jsonl, spec.cfg and stacks/.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train fusion weights and a downstream head; writes a checkpoint and a
    /// trace CSV of held-out evaluations.
    Train {
        /// Manifest (JSON lines) of the corpus to train on.
        #[arg(long)]
        manifest: PathBuf,
        /// Key-value file with TrainConfig keys (mode, task, steps, batch_size,
        /// lr_head, lr_fusion, p_learnable, optimizer, seed, eval_every,
        /// models). Flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fusion mode: naive, structured, prob-shared, prob-individual or last-layer.
        #[arg(long)]
        mode: Option<FusionMode>,
        /// Task: sid (utterance classification) or asr (CTC transcription).
        #[arg(long, value_parser = parse_task_arg)]
        task: Option<TaskKind>,
        /// Number of optimizer steps (default 2000).
        #[arg(long)]
        steps: Option<u64>,
        /// Seed for initialization and data order (default 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Learning rate of the head(s) (default 0.1 for sid, 1e-4 for asr).
        #[arg(long)]
        lr_head: Option<f64>,
        /// Learning rate of the fusion weights (same defaults as --lr-head).
        #[arg(long)]
        lr_fusion: Option<f64>,
        /// Learn the model-level weights p instead of fixing them uniform.
        #[arg(long)]
        p_learnable: bool,
        /// Records per batch (default 8).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Optimizer: adam (default) or sgd.
        #[arg(long)]
        optimizer: Option<Optimizer>,
        /// Evaluate the held-out split every N steps (default 200) and at the end.
        #[arg(long)]
        eval_every: Option<u64>,
        /// Comma-separated 1-based subset of the manifest's models, e.g. `2`.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<usize>>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Trace CSV path (default: the checkpoint path with extension trace.csv).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-record metrics as CSV.
    Eval {
        /// Manifest the checkpoint was trained on.
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Split to evaluate: train, heldout or all.
        #[arg(long, default_value = "heldout")]
        split: Split,
        /// Output CSV (default: metrics.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the realized fusion weights of a checkpoint as CSV.
    Analyze {
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output CSV (default: weights.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences on one record.
    Gradcheck {
        /// Manifest providing the record and model shapes.
        #[arg(long)]
        manifest: PathBuf,
        /// Fusion mode: naive, structured, prob-shared, prob-individual or last-layer.
        #[arg(long)]
        mode: FusionMode,
        /// Task: sid or asr; must match the manifest.
        #[arg(long, value_parser = parse_task_arg)]
        task: TaskKind,
        /// Maximum accepted relative error per scalar.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Index of the record to check (manifest order).
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// Seed for the random parameter point.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the model-level weights p among the checked parameters.
        #[arg(long)]
        p_learnable: bool,
    },
}

fn parse_task_arg(s: &str) -> std::result::Result<TaskKind, String> {
    parse_task(s).map_err(|e| e.to_string())
}

fn threads() -> Result<usize> {
    match std::env::var("FUSEBENCH_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("FUSEBENCH_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

fn beside(file: &Path, name: &str) -> PathBuf {
    file.parent().unwrap_or(Path::new("")).join(name)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_dataset(manifest: &Path, models: Option<&[usize]>) -> Result<Dataset> {
    Dataset::load(&load_manifest(manifest)?, models)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let mut spec = match spec {
                Some(path) => SyntheticTaskSpec::from_key_values(&KeyValues::load(path)?)?,
                None => SyntheticTaskSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let corpus = generate_corpus(&spec, &out)?;
            println!("{}", corpus.classification_path.display());
            println!("{}", corpus.transcription_path.display());
        }
        Command::Train {
            manifest,
            config,
            mode,
            task,
            steps,
            seed,
            lr_head,
            lr_fusion,
            p_learnable,
            batch_size,
            optimizer,
            eval_every,
            models,
            out,
            trace,
        } => {
            let kv = match &config {
                Some(path) => KeyValues::load(path)?,
                None => KeyValues::default(),
            };
            kv.reject_unknown(TrainConfig::KEYS)?;
            let mode = match mode {
                Some(m) => m,
                None => kv
                    .get::<String>("mode")?
                    .ok_or_else(|| Error::Config("--mode is required".into()))?
                    .parse()?,
            };
            let task = match task {
                Some(t) => t,
                None => parse_task(
                    &kv.get::<String>("task")?
                        .ok_or_else(|| Error::Config("--task is required".into()))?,
                )?,
            };
            let mut c = if config.is_some() {
                let mut kv = kv;
                kv.set("mode", mode.name());
                kv.set("task", fusebench::trainer::task_name(task));
                TrainConfig::from_key_values(&kv)?
            } else {
                TrainConfig::new(mode, task)
            };
            c.steps = steps.unwrap_or(c.steps);
            c.seed = seed.unwrap_or(c.seed);
            c.lr_head = lr_head.unwrap_or(c.lr_head);
            c.lr_fusion = lr_fusion.unwrap_or(c.lr_fusion);
            c.p_learnable |= p_learnable;
            c.batch_size = batch_size.unwrap_or(c.batch_size);
            c.optimizer = optimizer.unwrap_or(c.optimizer);
            c.eval_every = eval_every.unwrap_or(c.eval_every);
            c.models = models.or(c.models);
            c.validate()?;

            let data = load_dataset(&manifest, c.models.as_deref())?;
            let mut trainer = Trainer::new(c, &data)?.with_threads(threads()?);
            let rows = trainer.run()?;
            trainer.checkpoint().save(&out)?;
            let trace = trace.unwrap_or_else(|| out.with_extension("trace.csv"));
            write(&trace, &trace_csv(&rows))?;
            if let Some(last) = rows.last() {
                println!("step {} {} {:.6} loss {:.6}", last.step, last.metric_name, last.metric_value, last.loss);
            }
        }
        Command::Eval {
            manifest,
            ckpt,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let data = load_dataset(&manifest, ck.config.models.as_deref())?;
            if data.model_dims != ck.model_dims || data.task != ck.task {
                return Err(Error::Config(format!(
                    "checkpoint {} does not match manifest {}",
                    ckpt.display(),
                    manifest.display()
                )));
            }
            let e = evaluate(&ck.model, data.split(split), threads()?)?;
            let out = out.unwrap_or_else(|| beside(&ckpt, "metrics.csv"));
            write(&out, &metrics_csv(&e.records))?;
            println!("{} {:.6} loss {:.6}", e.metric_name, e.metric_value, e.loss);
        }
        Command::Analyze { ckpt, out } => {
            let report = Checkpoint::load(&ckpt)?.weight_report()?;
            let out = out.unwrap_or_else(|| beside(&ckpt, "weights.csv"));
            report.write_csv(&out)?;
            let totals = report.model_totals();
            println!("{}", out.display());
            for (i, t) in totals.iter().enumerate() {
                println!("model {} total {t:.6}", i + 1);
            }
        }
        Command::Gradcheck {
            manifest,
            mode,
            task,
            tolerance,
            step,
            record,
            seed,
            p_learnable,
        } => {
            let data = load_dataset(&manifest, None)?;
            if data.task != task {
                return Err(Error::Config("--task does not match the manifest".into()));
            }
            let example = data
                .examples
                .get(record)
                .ok_or_else(|| Error::Config(format!("record {record} out of range 0..{}", data.examples.len())))?;
            let mut c = TrainConfig::new(mode, task);
            c.p_learnable = p_learnable;
            c.seed = seed;
            let opts = GradCheckOptions {
                tolerance,
                step,
                seed,
                ..Default::default()
            };
            let report = grad_check(&c, example, &data.model_dims, data.label_count, &opts)?;
            for g in &report.groups {
                let verdict = if g.max_rel_error < tolerance { "PASS" } else { "FAIL" };
                println!("{verdict} {} checked={} max_rel_error={:.3e}", g.name, g.checked, g.max_rel_error);
            }
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
