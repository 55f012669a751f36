//! Subcommands of the `smallbench` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use smallbench_core::checkpoint::{config_from_pairs, model_to_checkpoint, Checkpoint};
use smallbench_core::encoder::{
    count_parameters, AttentionKind, ModelConfig, ObjectiveKind, Variant,
};
use smallbench_core::glue::{
    evaluate, finetune, load_task, FinetuneHyper, Split, Task, TaskHead, TaskSpec,
};
use smallbench_core::objectives::Model;
use smallbench_core::optim::{pretrain, LogEntry, PretrainOpts, Schedule};
use smallbench_core::tokenizer::Vocab;
use smallbench_core::{Error, Result, Rng};

use crate::bench::{mode_name, run_benchmark, BenchSetup, CheckpointRunner, MetricReport};
use crate::config::{parse_config, RunConfig, DATA_DIR_ENV};
use crate::leaderboard::{render_leaderboard, Format};

#[derive(Parser)]
#[command(
    name = "smallbench",
    version,
    about = "Pretrain, fine-tune, and benchmark compact text encoders",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a vocabulary from a plain-text corpus.
    BuildVocab(ConfigArgs),
    /// Pretrain a model variant; writes checkpoint.bin, vocab.txt, and a log.
    Pretrain(ConfigArgs),
    /// Fine-tune a pretrained checkpoint on one task.
    Finetune(TaskArgs),
    /// Score a fine-tuned checkpoint on a task's dev set.
    Eval(TaskArgs),
    /// Fine-tune a checkpoint on all 8 tasks and save a benchmark report.
    Bench(ConfigArgs),
    /// Render saved benchmark reports as a leaderboard.
    Report(ReportArgs),
}

/// Flags shared by every config-driven subcommand. Each maps to the config
/// file key of the same name and overrides it.
#[derive(Args, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; `#` starts a comment line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: bert | deberta | electra | electra-deberta.
    #[arg(long)]
    model: Option<String>,
    /// Plain-text pretraining corpus (documents split by blank lines).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary file (default: vocab.txt beside the output or checkpoint).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory with one subdirectory of TSVs per task
    /// (fallback: $SMALLBENCH_DATA_DIR).
    #[arg(long)]
    glue_dir: Option<PathBuf>,
    /// Model checkpoint to fine-tune or evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for checkpoints, logs, and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Root random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Total pretraining optimization steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Linear warmup steps (default: a tenth of steps).
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Peak learning rate for pretraining.
    #[arg(long)]
    peak_lr: Option<f64>,
    /// Batch size (pretraining and fine-tuning).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Corpus ingestion: pair | contiguous.
    #[arg(long)]
    mode: Option<String>,
    /// Target vocabulary size for build-vocab.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Fine-tuning runs per task during bench.
    #[arg(long)]
    runs_per_task: Option<usize>,
    /// Fine-tuning parallelism cap (runs execute sequentially here).
    #[arg(long)]
    jobs: Option<usize>,
    /// Apply the minutes-scale toy preset.
    #[arg(long)]
    toy: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("config {}: {e}", p.display()))
                })?;
                Some((p.display().to_string(), text))
            }
            None => None,
        };
        let mut ov: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                ov.push((key.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("model", self.model.clone());
        push("corpus", path(&self.corpus));
        push("vocab", path(&self.vocab));
        push("glue-dir", path(&self.glue_dir));
        push("checkpoint", path(&self.checkpoint));
        push("out-dir", path(&self.out_dir));
        push("seed", self.seed.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("warmup-steps", self.warmup_steps.map(|v| v.to_string()));
        push("peak-lr", self.peak_lr.map(|v| v.to_string()));
        push("batch-size", self.batch_size.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("vocab-size", self.vocab_size.map(|v| v.to_string()));
        push("runs-per-task", self.runs_per_task.map(|v| v.to_string()));
        push("jobs", self.jobs.map(|v| v.to_string()));
        if self.toy {
            push("toy", Some("true".to_string()));
        }
        parse_config(file.as_ref().map(|(s, t)| (s.as_str(), t.as_str())), &ov)
    }
}

#[derive(Args)]
pub struct TaskArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Task name (CoLA, SST-2, MRPC, STS-B, QQP, MNLI, QNLI, RTE).
    #[arg(long)]
    task: String,
    /// Fine-tuning learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-layer learning-rate decay, top to bottom, in (0, 1].
    #[arg(long)]
    layer_decay: Option<f64>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Saved benchmark report JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Output format: markdown | json.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Write the leaderboard here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab(args) => cmd_build_vocab(&args),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Finetune(args) => cmd_finetune(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

fn require(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("{what} required: pass {flag} or set it in the config file")))
}

/// vocab path: explicit setting, else `vocab.txt` next to `anchor`.
fn vocab_path(cfg: &RunConfig, anchor: &Path) -> PathBuf {
    cfg.vocab.clone().unwrap_or_else(|| {
        anchor
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt")
    })
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    if !path.exists() {
        return Err(Error::Vocab(format!(
            "vocabulary {} not found; run build-vocab first or pass --vocab",
            path.display()
        )));
    }
    Vocab::load(path)
}

fn variant_of(cfg: &ModelConfig) -> Variant {
    match (cfg.objective, cfg.attention) {
        (ObjectiveKind::Mlm, AttentionKind::Absolute) => Variant::Bert,
        (ObjectiveKind::Mlm, AttentionKind::Disentangled) => Variant::Deberta,
        (ObjectiveKind::Electra, AttentionKind::Absolute) => Variant::Electra,
        (ObjectiveKind::Electra, AttentionKind::Disentangled) => Variant::ElectraDeberta,
    }
}

fn cmd_build_vocab(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let corpus = require(&cfg.corpus, "a corpus", "--corpus")?;
    let target = cfg.vocab_size.unwrap_or(if cfg.toy { 2000 } else { 10_000 });
    let out = match (&cfg.vocab, &cfg.out_dir) {
        (Some(v), _) => v.clone(),
        (None, Some(d)) => d.join("vocab.txt"),
        (None, None) => {
            return Err(Error::Config(
                "build-vocab needs --vocab or --out-dir to place vocab.txt".into(),
            ))
        }
    };
    let vocab = Vocab::build(&corpus, target, 1)?;
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    vocab.save(&out)?;
    println!("vocabulary: {} tokens -> {}", vocab.size(), out.display());
    Ok(())
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step\tlr\ttotal\tmlm\trtd\trtd_accuracy\tgrad_norm")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.step,
            e.lr,
            e.total,
            e.mlm,
            opt(e.rtd),
            opt(e.rtd_accuracy),
            e.grad_norm
        )?;
    }
    f.flush()?;
    Ok(())
}

fn cmd_pretrain(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let corpus = require(&cfg.corpus, "a corpus", "--corpus")?;
    let out_dir = require(&cfg.out_dir, "an output directory", "--out-dir")?;
    fs::create_dir_all(&out_dir)?;
    let vpath = vocab_path(&cfg, &out_dir.join("checkpoint.bin"));
    let vocab = load_vocab(&vpath)?;

    let model_cfg = if cfg.toy {
        ModelConfig::toy(cfg.model, vocab.size())
    } else {
        ModelConfig::small(cfg.model, vocab.size())
    };
    let steps = match (cfg.steps, cfg.toy) {
        (Some(s), _) => s,
        (None, true) => 2000,
        (None, false) => {
            return Err(Error::Config(
                "steps required: pass --steps (or --toy for the 2000-step preset)".into(),
            ))
        }
    };
    let schedule = Schedule {
        peak_lr: cfg.peak_lr.unwrap_or(if cfg.toy { 1e-3 } else { 5e-4 }),
        warmup_steps: cfg.warmup_steps.unwrap_or(steps / 10),
        total_steps: steps,
    };
    let opts = PretrainOpts {
        batch_size: cfg.batch_size.unwrap_or(16),
        mode: cfg.mode,
        log_every: 50,
        out_dir: Some(out_dir.clone()),
        ..PretrainOpts::default()
    };

    let result = pretrain::<f32>(&model_cfg, &vocab, &corpus, &schedule, cfg.seed, &opts, None)?;

    // The run directory is self-contained: checkpoint, the vocabulary it
    // was trained with, and the loss log. The ingestion mode is stamped so
    // bench can label the bert + contiguous combination as roberta.
    let mut ck = result.checkpoint;
    ck.set("train.ingest_mode", mode_name(cfg.mode));
    ck.save(&out_dir.join("checkpoint.bin"))?;
    if vpath != out_dir.join("vocab.txt") {
        vocab.save(&out_dir.join("vocab.txt"))?;
    }
    write_log(&out_dir.join("pretrain_log.tsv"), &result.log)?;

    let last = result.log.last().expect("at least the final step is logged");
    match (last.rtd, last.rtd_accuracy) {
        (Some(rtd), Some(acc)) => println!(
            "pretrained {} for {} steps: total {:.4} (mlm {:.4}, rtd {:.4}, detection acc {:.3})",
            cfg.model.name(),
            last.step,
            last.total,
            last.mlm,
            rtd,
            acc
        ),
        _ => println!(
            "pretrained {} for {} steps: mlm loss {:.4}",
            cfg.model.name(),
            last.step,
            last.mlm
        ),
    }
    println!("checkpoint -> {}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn finetune_inputs(args: &TaskArgs) -> Result<(RunConfig, Checkpoint, Vocab, TaskSpec, PathBuf)> {
    let cfg = args.cfg.load()?;
    let ck_path = require(&cfg.checkpoint, "a checkpoint", "--checkpoint")?;
    let ck = Checkpoint::load(&ck_path)?;
    let vocab = load_vocab(&vocab_path(&cfg, &ck_path))?;
    let task = Task::parse(&args.task)?;
    let spec = TaskSpec::default_for(task);
    let glue_dir = cfg.glue_dir_or(std::env::var(DATA_DIR_ENV).ok().as_deref())?;
    Ok((cfg, ck, vocab, spec, glue_dir))
}

fn cmd_finetune(args: &TaskArgs) -> Result<()> {
    let (cfg, ck, vocab, spec, glue_dir) = finetune_inputs(args)?;
    let train = load_task(&spec, &glue_dir, Split::Train)?;
    let dev = load_task(&spec, &glue_dir, Split::Dev)?;
    let hyper = FinetuneHyper {
        lr: args.lr.unwrap_or(2e-4),
        batch_size: cfg.batch_size.unwrap_or(16),
        epochs: args.epochs.unwrap_or(3),
        layer_decay: args.layer_decay.unwrap_or(0.8),
        seed: cfg.seed,
        dropout: if cfg.toy { 0.0 } else { 0.1 },
    };
    let tuned = finetune::<f32>(&ck, &vocab, &spec, &train, &dev, &hyper)?;
    for e in &tuned.log {
        println!(
            "epoch {}: train loss {:.4}, dev {} {:.2}",
            e.epoch,
            e.mean_train_loss,
            spec.metric.name(),
            e.dev_score * 100.0
        );
    }
    println!(
        "{}: best dev {} {:.2}",
        spec.task.name(),
        spec.metric.name(),
        tuned.score * 100.0
    );
    if let Some(out_dir) = &cfg.out_dir {
        fs::create_dir_all(out_dir)?;
        let mut out = model_to_checkpoint(&tuned.model);
        out.set("task.name", spec.task.name());
        out.set("task.score", tuned.score.to_string());
        let path = out_dir.join(format!("finetuned-{}.bin", spec.task.dir_name()));
        out.save(&path)?;
        println!("fine-tuned checkpoint -> {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: &TaskArgs) -> Result<()> {
    let (cfg, ck, vocab, spec, glue_dir) = finetune_inputs(args)?;
    if let Some(trained_for) = ck.get("task.name") {
        if trained_for != spec.task.name() {
            return Err(Error::task(
                spec.task.name(),
                format!("checkpoint was fine-tuned for {trained_for}"),
            ));
        }
    }
    let mut model: Model<f32> = smallbench_core::checkpoint::model_from_checkpoint(&ck)?;
    let hidden = model.encoder.dims.hidden;
    let head = TaskHead::init(&mut model.store, hidden, spec.target.outputs(), &mut Rng::new(0))?;
    for (name, id) in [("task_head.w", head.w), ("task_head.b", head.b)] {
        let stored = ck.tensor(name).ok_or_else(|| {
            Error::task(
                spec.task.name(),
                "checkpoint has no fine-tuned task head; run finetune first",
            )
        })?;
        if stored.shape() != model.store.get(id).shape() {
            return Err(Error::task(
                spec.task.name(),
                format!(
                    "stored head shape {:?} does not fit this task (expected {:?})",
                    stored.shape(),
                    model.store.get(id).shape()
                ),
            ));
        }
        *model.store.get_mut(id) = stored.cast::<f32>();
    }
    let dev = load_task(&spec, &glue_dir, Split::Dev)?;
    let score = evaluate(&model, &head, &spec, &vocab, &dev, cfg.batch_size.unwrap_or(32))?;
    println!(
        "{} dev {}: {:.2}",
        spec.task.name(),
        spec.metric.name(),
        score * 100.0
    );
    Ok(())
}

fn cmd_bench(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let ck_path = require(&cfg.checkpoint, "a checkpoint", "--checkpoint")?;
    let ck = Checkpoint::load(&ck_path)?;
    let model_cfg = config_from_pairs(&ck)?;
    let variant = variant_of(&model_cfg);
    let mode = match ck.get("train.ingest_mode") {
        Some(tag) => smallbench_core::data::IngestMode::parse(tag)?,
        None => cfg.mode,
    };
    let label = if variant == Variant::Bert && mode == smallbench_core::data::IngestMode::Contiguous
    {
        "roberta".to_string()
    } else {
        variant.name().to_string()
    };
    let vocab = load_vocab(&vocab_path(&cfg, &ck_path))?;
    let glue_dir = cfg.glue_dir_or(std::env::var(DATA_DIR_ENV).ok().as_deref())?;
    let out_dir = cfg
        .out_dir
        .clone()
        .or_else(|| ck_path.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    if cfg.jobs > 1 {
        println!("jobs {}: runs execute sequentially in deterministic order", cfg.jobs);
    }

    let setup = BenchSetup {
        label: label.clone(),
        variant,
        ingest_mode: mode,
        params: count_parameters(&model_cfg),
        root_seed: cfg.seed,
        runs_per_task: cfg.runs_per_task,
        toy: cfg.toy,
    };
    let mut runner = CheckpointRunner::new(ck, vocab, glue_dir);
    let report = run_benchmark(&setup, &mut runner);
    let path = out_dir.join(format!("report-{label}.json"));
    fs::write(&path, report.to_json())?;

    if !report.complete {
        return Err(Error::Train(format!(
            "benchmark incomplete: {}; partial report saved to {}",
            report.failure.as_deref().unwrap_or("unknown failure"),
            path.display()
        )));
    }
    for t in &report.tasks {
        println!("{}: best dev {} {:.2}", t.task, t.metric, t.best);
    }
    println!(
        "average {:.2} over 8 tasks; report -> {}",
        report.average.expect("complete report"),
        path.display()
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let format = Format::parse(&args.format)?;
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("report {}: {e}", path.display())))?;
        reports.push(MetricReport::from_json(&text).map_err(|e| {
            Error::Config(format!("report {}: {e}", path.display()))
        })?);
    }
    let text = render_leaderboard(&reports, format)?;
    match &args.out {
        Some(out) => {
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(out, &text)?;
            println!("leaderboard -> {}", out.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
