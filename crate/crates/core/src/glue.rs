//! GLUE-style task handling: dataset specs and TSV ingestion for the eight
//! dev-set tasks, classification/regression heads, and the fine-tuning
//! driver with layer-wise learning-rate decay.

use std::path::Path;

use crate::checkpoint::{model_from_checkpoint, Checkpoint};
use crate::data::TokenBatch;
use crate::encoder::{encoder_forward, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{accuracy, mcc, spearman};
use crate::objectives::Model;
use crate::optim::{
    adamw_step, clip_global_norm, layerwise_lrs, lr_at_step, AdamW, OptimState, Schedule,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{encode_pair, encode_single, EncodedSequence, Vocab};

/// Rows with a bad column count or label are skipped, up to this fraction
/// of the data rows; beyond it the file is considered broken.
pub const MALFORMED_LIMIT: f64 = 0.01;

const FINETUNE_CLIP_NORM: f64 = 1.0;

/// The eight evaluated tasks. WNLI is deliberately absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Cola,
    Sst,
    Mrpc,
    Sts,
    Qqp,
    Mnli,
    Qnli,
    Rte,
}

impl Task {
    pub fn all() -> [Task; 8] {
        [
            Task::Cola,
            Task::Sst,
            Task::Mrpc,
            Task::Sts,
            Task::Qqp,
            Task::Mnli,
            Task::Qnli,
            Task::Rte,
        ]
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "cola" => Ok(Task::Cola),
            "sst" | "sst2" | "sst-2" => Ok(Task::Sst),
            "mrpc" => Ok(Task::Mrpc),
            "sts" | "stsb" | "sts-b" => Ok(Task::Sts),
            "qqp" => Ok(Task::Qqp),
            "mnli" => Ok(Task::Mnli),
            "qnli" => Ok(Task::Qnli),
            "rte" => Ok(Task::Rte),
            other => Err(Error::task(other, "unknown task")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cola => "CoLA",
            Task::Sst => "SST-2",
            Task::Mrpc => "MRPC",
            Task::Sts => "STS-B",
            Task::Qqp => "QQP",
            Task::Mnli => "MNLI",
            Task::Qnli => "QNLI",
            Task::Rte => "RTE",
        }
    }

    /// Directory under the data root, matching the public distribution.
    pub fn dir_name(self) -> &'static str {
        self.name()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Binary,
    ThreeClass,
    Regression,
}

impl TargetKind {
    /// Width of the task head output.
    pub fn outputs(self) -> usize {
        match self {
            TargetKind::Binary => 2,
            TargetKind::ThreeClass => 3,
            TargetKind::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Mcc,
    Accuracy,
    Spearman,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mcc => "mcc",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Spearman => "spearman",
        }
    }
}

/// Which TSV column holds the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    /// Last column of each row (MNLI, where train and dev widths differ).
    Last,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub has_header: bool,
    pub text_a: usize,
    pub text_b: Option<usize>,
    pub label: LabelColumn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task: Task,
    pub target: TargetKind,
    pub metric: MetricKind,
    pub columns: ColumnMap,
    pub train_file: String,
    pub dev_file: String,
    /// Class-name strings for string-labeled tasks, index = class id.
    /// None means numeric labels.
    pub label_names: Option<&'static [&'static str]>,
}

const ENTAILMENT_2: &[&str] = &["entailment", "not_entailment"];
const MNLI_3: &[&str] = &["entailment", "neutral", "contradiction"];

impl TaskSpec {
    /// Column mappings follow the public GLUE TSV layouts; they are data,
    /// not code, so callers may adjust them for local variants.
    pub fn default_for(task: Task) -> TaskSpec {
        let (target, metric) = match task {
            Task::Cola => (TargetKind::Binary, MetricKind::Mcc),
            Task::Sts => (TargetKind::Regression, MetricKind::Spearman),
            Task::Mnli => (TargetKind::ThreeClass, MetricKind::Accuracy),
            _ => (TargetKind::Binary, MetricKind::Accuracy),
        };
        let columns = match task {
            Task::Cola => ColumnMap {
                has_header: false,
                text_a: 3,
                text_b: None,
                label: LabelColumn::Index(1),
            },
            Task::Sst => ColumnMap {
                has_header: true,
                text_a: 0,
                text_b: None,
                label: LabelColumn::Index(1),
            },
            Task::Mrpc => ColumnMap {
                has_header: true,
                text_a: 3,
                text_b: Some(4),
                label: LabelColumn::Index(0),
            },
            Task::Sts => ColumnMap {
                has_header: true,
                text_a: 7,
                text_b: Some(8),
                label: LabelColumn::Index(9),
            },
            Task::Qqp => ColumnMap {
                has_header: true,
                text_a: 3,
                text_b: Some(4),
                label: LabelColumn::Index(5),
            },
            Task::Mnli => ColumnMap {
                has_header: true,
                text_a: 8,
                text_b: Some(9),
                label: LabelColumn::Last,
            },
            Task::Qnli | Task::Rte => ColumnMap {
                has_header: true,
                text_a: 1,
                text_b: Some(2),
                label: LabelColumn::Index(3),
            },
        };
        let label_names = match task {
            Task::Mnli => Some(MNLI_3),
            Task::Qnli | Task::Rte => Some(ENTAILMENT_2),
            _ => None,
        };
        let dev_file = match task {
            Task::Mnli => "dev_matched.tsv",
            _ => "dev.tsv",
        };
        TaskSpec {
            task,
            target,
            metric,
            columns,
            train_file: "train.tsv".to_string(),
            dev_file: dev_file.to_string(),
            label_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.metric {
            MetricKind::Mcc => self.target == TargetKind::Binary,
            MetricKind::Spearman => self.target == TargetKind::Regression,
            MetricKind::Accuracy => self.target != TargetKind::Regression,
        };
        if !ok {
            return Err(Error::task(
                self.task.name(),
                format!(
                    "metric {} incompatible with target {:?}",
                    self.metric.name(),
                    self.target
                ),
            ));
        }
        if let Some(names) = self.label_names {
            if names.len() != self.target.outputs() {
                return Err(Error::task(
                    self.task.name(),
                    format!(
                        "{} label names for {} classes",
                        names.len(),
                        self.target.outputs()
                    ),
                ));
            }
        }
        if self.target == TargetKind::Regression && self.label_names.is_some() {
            return Err(Error::task(self.task.name(), "regression task with class names"));
        }
        Ok(())
    }

    fn parse_label(&self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        match self.target {
            TargetKind::Regression => {
                let v: f64 = raw.parse().ok()?;
                (v.is_finite() && (0.0..=5.0).contains(&v)).then_some(Label::Score(v))
            }
            _ => {
                let class = match self.label_names {
                    Some(names) => names.iter().position(|n| *n == raw)?,
                    None => {
                        let v: usize = raw.parse().ok()?;
                        (v < self.target.outputs()).then_some(v)?
                    }
                };
                Some(Label::Class(class))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

/// Parse one split of a task from `<data_dir>/<TASK>/<file>`. Malformed
/// rows are skipped; more than [`MALFORMED_LIMIT`] of them, or zero valid
/// rows, is an error.
pub fn load_task(spec: &TaskSpec, data_dir: &Path, split: Split) -> Result<Vec<Example>> {
    spec.validate()?;
    let file = match split {
        Split::Train => &spec.train_file,
        Split::Dev => &spec.dev_file,
    };
    let path = data_dir.join(spec.task.dir_name()).join(file);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::task(spec.task.name(), format!("{}: {e}", path.display())))?;
    parse_task_tsv(spec, &text)
        .map_err(|e| Error::task(spec.task.name(), format!("{}: {e}", path.display())))
}

/// TSV body parser behind [`load_task`], separated for testing.
pub fn parse_task_tsv(spec: &TaskSpec, text: &str) -> std::result::Result<Vec<Example>, String> {
    let cols = &spec.columns;
    let mut examples = Vec::new();
    let mut rows = 0usize;
    let mut malformed = 0usize;
    for (i, line) in text.lines().enumerate() {
        if i == 0 && cols.has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        rows += 1;
        let fields: Vec<&str> = line.split('\t').collect();
        match parse_row(spec, &fields) {
            Some(ex) => examples.push(ex),
            None => malformed += 1,
        }
    }
    if rows == 0 || examples.is_empty() {
        return Err("no valid rows".to_string());
    }
    if malformed as f64 > MALFORMED_LIMIT * rows as f64 {
        return Err(format!(
            "{malformed} of {rows} rows malformed, above the {:.0}% limit",
            MALFORMED_LIMIT * 100.0
        ));
    }
    Ok(examples)
}

fn parse_row(spec: &TaskSpec, fields: &[&str]) -> Option<Example> {
    let cols = &spec.columns;
    let needed = 1 + cols.text_a.max(cols.text_b.unwrap_or(0)).max(match cols.label {
        LabelColumn::Index(i) => i,
        LabelColumn::Last => 0,
    });
    if fields.len() < needed {
        return None;
    }
    let label_raw = match cols.label {
        LabelColumn::Index(i) => fields[i],
        LabelColumn::Last => *fields.last()?,
    };
    let label = spec.parse_label(label_raw)?;
    let text_a = fields[cols.text_a];
    if text_a.trim().is_empty() {
        return None;
    }
    let text_b = match cols.text_b {
        Some(i) => {
            if fields[i].trim().is_empty() {
                return None;
            }
            Some(fields[i].to_string())
        }
        None => None,
    };
    Some(Example {
        text_a: text_a.to_string(),
        text_b,
        label,
    })
}

/// Linear classifier/regressor over the [CLS] hidden state.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub w: ParamId,
    pub b: ParamId,
    pub outputs: usize,
}

impl TaskHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        hidden: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<TaskHead> {
        let w = store.insert(
            "task_head.w".to_string(),
            Tensor::truncated_normal(&[hidden, outputs], INIT_STD, rng),
            true,
        )?;
        let b = store.insert(
            "task_head.b".to_string(),
            Tensor::zeros(&[outputs]),
            false,
        )?;
        Ok(TaskHead { w, b, outputs })
    }
}

/// Dropout then a linear map: `[B, hidden]` -> `[B, outputs]`.
pub fn task_head_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    head: &TaskHead,
    cls: Var,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let x = match rng {
        Some(r) if dropout > 0.0 => g.dropout(cls, dropout, r),
        _ => cls,
    };
    let xw = g.matmul(x, vars[head.w.0])?;
    g.add(xw, vars[head.b.0])
}

/// Encoder forward for a fine-tuning batch, reduced to task logits.
fn task_logits<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    model: &Model<S>,
    head: &TaskHead,
    batch: &TokenBatch,
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let enc = encoder_forward(
        g,
        vars,
        &model.encoder,
        batch,
        dropout,
        rng.as_deref_mut(),
    )?;
    let h = model.encoder.dims.hidden;
    let flat = g.reshape(enc, vec![batch.batch * batch.seq_len, h])?;
    let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq_len).collect();
    let cls = g.gather_rows(flat, &cls_rows)?;
    task_head_forward(g, vars, head, cls, dropout, rng)
}

fn encode_examples(
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
) -> Vec<EncodedSequence> {
    examples
        .iter()
        .map(|e| match &e.text_b {
            Some(b) => encode_pair(&e.text_a, b, vocab, max_len),
            None => encode_single(&e.text_a, vocab, max_len),
        })
        .collect()
}

fn class_labels(spec: &TaskSpec, examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| match e.label {
            Label::Class(c) => Ok(c),
            Label::Score(_) => Err(Error::task(spec.task.name(), "expects class labels")),
        })
        .collect()
}

fn score_labels(spec: &TaskSpec, examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| match e.label {
            Label::Score(s) => Ok(s),
            Label::Class(_) => Err(Error::task(spec.task.name(), "expects real-valued labels")),
        })
        .collect()
}

/// Map every parameter to its layer-wise learning-rate group: 0 = task
/// head, 1..=L = encoder layers top to bottom, L+1 = embedding block.
/// Parameters outside the fine-tuned network (generator, pretraining
/// heads) get the embedding group; they receive no gradients.
pub fn lr_group(name: &str, num_layers: usize) -> usize {
    if name.starts_with("task_head.") {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("enc.layer") {
        if let Some(end) = rest.find('.') {
            if let Ok(i) = rest[..end].parse::<usize>() {
                if i < num_layers {
                    return 1 + (num_layers - 1 - i);
                }
            }
        }
    }
    num_layers + 1
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub layer_decay: f64,
    pub seed: u64,
    pub dropout: f64,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper {
            lr: 2e-4,
            batch_size: 16,
            epochs: 3,
            layer_decay: 0.8,
            seed: 0,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub dev_score: f64,
}

pub struct Finetuned<S: Scalar> {
    pub model: Model<S>,
    pub head: TaskHead,
    /// Best dev score over epoch-end evaluations (the head's untrained
    /// score when `epochs` is 0).
    pub score: f64,
    pub log: Vec<EpochLog>,
}

/// Fine-tune the main encoder (the discriminator for RTD models) plus a
/// fresh head on a task. The source checkpoint value is never modified.
/// With `epochs = 0` this only evaluates the randomly initialized head.
pub fn finetune<S: Scalar>(
    checkpoint: &Checkpoint,
    vocab: &Vocab,
    spec: &TaskSpec,
    train: &[Example],
    dev: &[Example],
    hyper: &FinetuneHyper,
) -> Result<Finetuned<S>> {
    spec.validate()?;
    let model: Model<S> = model_from_checkpoint(checkpoint)?;
    finetune_model(model, vocab, spec, train, dev, hyper)
}

/// [`finetune`] on an already materialized model (the model is consumed;
/// callers reload from the checkpoint for independent runs).
pub fn finetune_model<S: Scalar>(
    mut model: Model<S>,
    vocab: &Vocab,
    spec: &TaskSpec,
    train: &[Example],
    dev: &[Example],
    hyper: &FinetuneHyper,
) -> Result<Finetuned<S>> {
    spec.validate()?;
    if model.cfg.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "checkpoint vocab {} != tokenizer vocab {}",
            model.cfg.vocab_size,
            vocab.size()
        )));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(Error::task(spec.task.name(), "empty task data"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch size 0".into()));
    }
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Error::Config(format!("lr {} invalid", hyper.lr)));
    }
    if !(0.0..=1.0).contains(&hyper.layer_decay) || hyper.layer_decay == 0.0 {
        return Err(Error::Config(format!(
            "layer decay {} outside (0, 1]",
            hyper.layer_decay
        )));
    }

    let mut rng = Rng::new(hyper.seed);
    let hidden = model.encoder.dims.hidden;
    let head = TaskHead::init(&mut model.store, hidden, spec.target.outputs(), &mut rng)?;

    let max_len = model.cfg.max_len;
    let train_seqs = encode_examples(train, vocab, max_len);
    let dev_seqs = encode_examples(dev, vocab, max_len);
    let regression = spec.target == TargetKind::Regression;
    let (train_classes, train_scores) = if regression {
        (Vec::new(), score_labels(spec, train)?)
    } else {
        (class_labels(spec, train)?, Vec::new())
    };

    let mut log = Vec::new();
    if hyper.epochs == 0 {
        let score = evaluate_encoded(&model, &head, spec, &dev_seqs, dev, hyper.batch_size)?;
        return Ok(Finetuned {
            model,
            head,
            score,
            log,
        });
    }

    let batches_per_epoch = train.len().div_ceil(hyper.batch_size);
    let total_steps = (hyper.epochs * batches_per_epoch) as u64;
    let sched = Schedule {
        peak_lr: 1.0,
        warmup_steps: ((total_steps as f64) * 0.1).round() as u64,
        total_steps,
    };
    sched.validate()?;

    let num_layers = model.encoder.dims.layers;
    let group_lrs = layerwise_lrs(hyper.lr, hyper.layer_decay, num_layers);
    let groups: Vec<usize> = model
        .store
        .iter()
        .map(|(_, name, _)| lr_group(name, num_layers))
        .collect();

    let hp = AdamW::default();
    let mut opt = OptimState::new(&model.store);
    let mut best = f64::NEG_INFINITY;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..hyper.epochs {
        // Fisher-Yates shuffle of the example order.
        for i in (1..order.len()).rev() {
            let j = rng.next_below((i + 1) as u64) as usize;
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let seqs: Vec<EncodedSequence> =
                chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let batch = TokenBatch::from_sequences(&seqs);
            let mut g = Graph::new();
            let vars = model.store.load_vars(&mut g, true);
            let logits = task_logits(
                &mut g,
                &vars,
                &model,
                &head,
                &batch,
                hyper.dropout,
                Some(&mut rng),
            )?;
            let loss = if regression {
                let preds = g.reshape(logits, vec![chunk.len()])?;
                let targets: Vec<f64> = chunk.iter().map(|&i| train_scores[i]).collect();
                g.mse(preds, &targets)?
            } else {
                let targets: Vec<usize> = chunk.iter().map(|&i| train_classes[i]).collect();
                g.cross_entropy(logits, &targets, usize::MAX)?
            };
            let loss_value = Scalar::to_f64(g.value(loss).item());
            if !loss_value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at fine-tune step {step}"
                )));
            }
            loss_sum += loss_value;
            g.backward(loss)?;
            let mut grads = model.store.collect_grads(&mut g, &vars);
            drop(g);
            clip_global_norm(&mut grads, FINETUNE_CLIP_NORM);
            let frac = lr_at_step(&sched, step + 1)?;
            let lrs: Vec<f64> = groups.iter().map(|&gi| group_lrs[gi] * frac).collect();
            adamw_step(&mut model.store, &grads, &lrs, &hp, &mut opt)?;
            step += 1;
        }
        let dev_score = evaluate_encoded(&model, &head, spec, &dev_seqs, dev, hyper.batch_size)?;
        if dev_score > best {
            best = dev_score;
        }
        log.push(EpochLog {
            epoch,
            mean_train_loss: loss_sum / batches_per_epoch as f64,
            dev_score,
        });
    }
    Ok(Finetuned {
        model,
        head,
        score: best,
        log,
    })
}

/// Dev-set metric for a trained model + head.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    head: &TaskHead,
    spec: &TaskSpec,
    vocab: &Vocab,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64> {
    let seqs = encode_examples(examples, vocab, model.cfg.max_len);
    evaluate_encoded(model, head, spec, &seqs, examples, batch_size)
}

fn evaluate_encoded<S: Scalar>(
    model: &Model<S>,
    head: &TaskHead,
    spec: &TaskSpec,
    seqs: &[EncodedSequence],
    examples: &[Example],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::task(spec.task.name(), "empty task data"));
    }
    let regression = spec.target == TargetKind::Regression;
    let mut pred_classes = Vec::with_capacity(examples.len());
    let mut pred_scores = Vec::with_capacity(examples.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_sequences(chunk);
        let mut g = Graph::new();
        let vars = model.store.load_vars(&mut g, false);
        let logits = task_logits(&mut g, &vars, model, head, &batch, 0.0, None)?;
        let out = g.value(logits);
        for row in out.data().chunks(head.outputs) {
            if regression {
                pred_scores.push(Scalar::to_f64(row[0]));
            } else {
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                pred_classes.push(arg);
            }
        }
    }
    match spec.metric {
        MetricKind::Accuracy => accuracy(&pred_classes, &class_labels(spec, examples)?),
        MetricKind::Mcc => mcc(&pred_classes, &class_labels(spec, examples)?),
        MetricKind::Spearman => spearman(&pred_scores, &score_labels(spec, examples)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AttentionKind, ModelConfig, ObjectiveKind, Variant};
    use crate::tokenizer::SPECIAL_TOKENS;

    fn tiny_vocab() -> Vocab {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in [
            "the", "a", "cat", "dog", "bird", "sat", "ran", "flew", "good", "bad", "very",
            "mat", "sky", "on",
        ] {
            tokens.push(w.to_string());
        }
        Vocab::from_tokens(tokens).unwrap()
    }

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::toy(Variant::Deberta, vocab);
        cfg.num_layers = 1;
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.ffn_inner = 32;
        cfg.embedding_dim = 8;
        cfg.max_len = 16;
        cfg.max_relative_distance = 4;
        cfg.attention = AttentionKind::Disentangled;
        cfg.objective = ObjectiveKind::Mlm;
        cfg
    }

    #[test]
    fn default_specs_match_published_metric_table() {
        for t in Task::all() {
            let spec = TaskSpec::default_for(t);
            spec.validate().unwrap();
            let expect = match t {
                Task::Cola => MetricKind::Mcc,
                Task::Sts => MetricKind::Spearman,
                _ => MetricKind::Accuracy,
            };
            assert_eq!(spec.metric, expect, "{}", t.name());
            assert_eq!(spec.target == TargetKind::ThreeClass, t == Task::Mnli);
            let pair = spec.columns.text_b.is_some();
            assert_eq!(pair, !matches!(t, Task::Cola | Task::Sst), "{}", t.name());
        }
        assert_eq!(
            TaskSpec::default_for(Task::Mnli).dev_file,
            "dev_matched.tsv"
        );
    }

    #[test]
    fn cola_rows_parse_without_header() {
        let spec = TaskSpec::default_for(Task::Cola);
        let text = "gj04\t1\t\tThe cat sat.\ngj04\t0\t*\tCat the sat.\n";
        let got = parse_task_tsv(&spec, text).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].label, Label::Class(1));
        assert_eq!(got[0].text_a, "The cat sat.");
        assert_eq!(got[1].label, Label::Class(0));
    }

    #[test]
    fn string_labels_and_last_column_resolve() {
        let spec = TaskSpec::default_for(Task::Qnli);
        let text = "index\tquestion\tsentence\tlabel\n0\tWho?\tHim.\tentailment\n1\tWhat?\tThat.\tnot_entailment\n";
        let got = parse_task_tsv(&spec, text).unwrap();
        assert_eq!(got[0].label, Label::Class(0));
        assert_eq!(got[1].label, Label::Class(1));

        let spec = TaskSpec::default_for(Task::Mnli);
        let mut row = vec![""; 8];
        row.push("premise here");
        row.push("hypothesis here");
        row.push("x");
        row.push("contradiction");
        let text = format!("header\n{}\n", row.join("\t"));
        let got = parse_task_tsv(&spec, &text).unwrap();
        assert_eq!(got[0].label, Label::Class(2));
        assert_eq!(got[0].text_b.as_deref(), Some("hypothesis here"));
    }

    #[test]
    fn sts_labels_must_be_reals_in_range() {
        let spec = TaskSpec::default_for(Task::Sts);
        let mk = |label: &str| {
            let mut row = vec![""; 7];
            row.push("a sentence");
            row.push("another one");
            row.push(label);
            format!("header\n{}\n", row.join("\t"))
        };
        let ok = parse_task_tsv(&spec, &mk("3.8")).unwrap();
        assert_eq!(ok[0].label, Label::Score(3.8));
        // A single malformed row out of one data row is over the limit.
        assert!(parse_task_tsv(&spec, &mk("7.2")).is_err());
        assert!(parse_task_tsv(&spec, &mk("-0.5")).is_err());
        assert!(parse_task_tsv(&spec, &mk("abc")).is_err());
    }

    #[test]
    fn malformed_fraction_gate() {
        let spec = TaskSpec::default_for(Task::Sst);
        let mut good = String::from("sentence\tlabel\n");
        for i in 0..199 {
            good.push_str(&format!("sentence number {i}\t{}\n", i % 2));
        }
        let mut over = good.clone();
        over.push_str("broken row no label\n");
        over.push_str("another broken\n");
        over.push_str("third broken\n");
        // 3 of 202 rows is above 1%.
        assert!(parse_task_tsv(&spec, &over).is_err());
        let mut under = good.clone();
        under.push_str("only one broken\n");
        // 1 of 200 rows is within the limit.
        assert_eq!(parse_task_tsv(&spec, &under).unwrap().len(), 199);
        assert!(parse_task_tsv(&spec, "sentence\tlabel\n").is_err());
    }

    #[test]
    fn head_output_shapes_follow_target() {
        let mut rng = Rng::new(3);
        for (target, want) in [
            (TargetKind::Binary, 2),
            (TargetKind::ThreeClass, 3),
            (TargetKind::Regression, 1),
        ] {
            let mut store: ParamStore<f64> = ParamStore::new();
            let head = TaskHead::init(&mut store, 16, target.outputs(), &mut rng).unwrap();
            let mut g = Graph::new();
            let vars = store.load_vars(&mut g, false);
            let cls = g.constant(Tensor::zeros(&[5, 16]));
            let out = task_head_forward(&mut g, &vars, &head, cls, 0.0, None).unwrap();
            assert_eq!(g.value(out).shape(), &[5, want]);
        }
    }

    #[test]
    fn lr_groups_follow_closed_form_decay_powers() {
        let lrs = layerwise_lrs(1e-4, 0.8, 3);
        assert_eq!(lrs.len(), 5);
        assert_eq!(lr_group("task_head.w", 3), 0);
        assert_eq!(lr_group("enc.layer2.attn.q.w", 3), 1);
        assert_eq!(lr_group("enc.layer1.ffn1.w", 3), 2);
        assert_eq!(lr_group("enc.layer0.ln2.g", 3), 3);
        assert_eq!(lr_group("emb.token", 3), 4);
        assert_eq!(lr_group("enc.emb_proj.w", 3), 4);
        assert_eq!(lr_group("gen.layer0.attn.q.w", 3), 4);
        for (i, lr) in lrs.iter().enumerate() {
            let power = i.saturating_sub(1) as i32;
            assert!((lr - 1e-4 * 0.8f64.powi(power)).abs() < 1e-18);
        }
    }

    fn toy_examples() -> Vec<Example> {
        let mut out = Vec::new();
        for (text, label) in [
            ("the good cat sat on the mat", 1),
            ("a very good dog ran", 1),
            ("the good bird flew", 1),
            ("a good cat sat", 1),
            ("the bad dog sat on the mat", 0),
            ("a very bad cat ran", 0),
            ("the bad bird flew", 0),
            ("a bad dog sat", 0),
        ] {
            out.push(Example {
                text_a: text.to_string(),
                text_b: None,
                label: Label::Class(label),
            });
        }
        out
    }

    #[test]
    fn zero_epochs_evaluates_untrained_head_deterministically() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(vocab.size());
        let examples = toy_examples();
        let hyper = FinetuneHyper {
            epochs: 0,
            seed: 11,
            ..FinetuneHyper::default()
        };
        let spec = TaskSpec::default_for(Task::Sst);
        let run = || {
            let model: Model<f64> = Model::init(&cfg, &mut Rng::new(7)).unwrap();
            finetune_model(model, &vocab, &spec, &examples, &examples, &hyper)
                .unwrap()
                .score
        };
        let a = run();
        assert_eq!(a, run());
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn two_epoch_runs_with_one_seed_agree() {
        let vocab = tiny_vocab();
        let cfg = tiny_cfg(vocab.size());
        let examples = toy_examples();
        let spec = TaskSpec::default_for(Task::Sst);
        let hyper = FinetuneHyper {
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            seed: 5,
            ..FinetuneHyper::default()
        };
        let run = || {
            let model: Model<f32> = Model::init(&cfg, &mut Rng::new(7)).unwrap();
            let out =
                finetune_model(model, &vocab, &spec, &examples, &examples, &hyper).unwrap();
            (out.score, out.log.iter().map(|l| l.mean_train_loss).collect::<Vec<_>>())
        };
        let (s1, l1) = run();
        let (s2, l2) = run();
        assert_eq!(s1, s2);
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 2);
    }

    #[test]
    fn sts_head_overfits_a_handful_of_rows() {
        let vocab = tiny_vocab();
        let mut cfg = tiny_cfg(vocab.size());
        cfg.dropout = 0.0;
        let texts = [
            ("the cat sat", "a cat sat", 5.0),
            ("the dog ran", "a dog ran", 4.0),
            ("the bird flew", "the sky", 1.0),
            ("good cat", "bad dog", 0.0),
            ("very good bird", "good bird", 4.5),
            ("the mat", "on the mat", 3.0),
            ("bad cat sat", "good cat sat", 2.0),
            ("a very bad sky", "the good sky", 1.5),
        ];
        let examples: Vec<Example> = texts
            .iter()
            .flat_map(|(a, b, s)| {
                // Two copies each to reach 16 rows.
                std::iter::repeat_n(
                    Example {
                        text_a: a.to_string(),
                        text_b: Some(b.to_string()),
                        label: Label::Score(*s),
                    },
                    2,
                )
            })
            .collect();
        let spec = TaskSpec::default_for(Task::Sts);
        let hyper = FinetuneHyper {
            epochs: 300,
            batch_size: 16,
            lr: 1e-2,
            layer_decay: 1.0,
            seed: 9,
            dropout: 0.0,
        };
        let model: Model<f32> = Model::init(&cfg, &mut Rng::new(7)).unwrap();
        let out = finetune_model(model, &vocab, &spec, &examples, &examples, &hyper).unwrap();
        let golds: Vec<f64> = examples
            .iter()
            .map(|e| match e.label {
                Label::Score(s) => s,
                _ => unreachable!(),
            })
            .collect();
        let seqs = encode_examples(&examples, &vocab, out.model.cfg.max_len);
        let mut g = Graph::new();
        let vars = out.model.store.load_vars(&mut g, false);
        let batch = TokenBatch::from_sequences(&seqs);
        let logits =
            task_logits(&mut g, &vars, &out.model, &out.head, &batch, 0.0, None).unwrap();
        let preds: Vec<f64> = g
            .value(logits)
            .data()
            .iter()
            .map(|&x| Scalar::to_f64(x))
            .collect();
        let mse: f64 = preds
            .iter()
            .zip(&golds)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / golds.len() as f64;
        assert!(mse < 0.01, "mse {mse}");
    }
}
