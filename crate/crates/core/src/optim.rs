//! AdamW optimization, learning-rate schedules, gradient clipping, and the
//! pretraining loop with checkpoint/resume support.

use std::path::{Path, PathBuf};

use crate::checkpoint::{
    model_from_checkpoint, model_to_checkpoint, rng_from_pairs, rng_to_pairs, Checkpoint,
};
use crate::data::{ingest_corpus, make_batches, IngestMode, MaskingPolicy, TokenBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objectives::{pretrain_loss, Model};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update over every parameter that received a gradient.
///
/// Any non-finite gradient entry aborts before touching parameters or
/// moments. Weight decay is decoupled (`lr * wd * p`) and applies only to
/// parameters flagged for decay (weights, not biases or layer norms).
/// `lrs[i]` is the learning rate for parameter `i`.
pub fn adamw_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[Option<Tensor<S>>],
    lrs: &[f64],
    hp: &AdamW,
    state: &mut OptimState<S>,
) -> Result<()> {
    let n = store.len();
    if grads.len() != n || lrs.len() != n || state.m.len() != n {
        return Err(Error::Config(format!(
            "optimizer inputs disagree: {} params, {} grads, {} lrs, {} moments",
            n,
            grads.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: store.name(crate::params::ParamId(i)).to_string(),
                    step: state.step,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let b1 = S::from_f64(hp.beta1);
    let b2 = S::from_f64(hp.beta2);
    let ob1 = S::from_f64(1.0 - hp.beta1);
    let ob2 = S::from_f64(1.0 - hp.beta2);
    let eps = S::from_f64(hp.eps);
    for i in 0..n {
        let Some(g) = &grads[i] else { continue };
        let id = crate::params::ParamId(i);
        let lr = S::from_f64(lrs[i]);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let wd = if store.decays(id) {
            S::from_f64(lrs[i] * hp.weight_decay)
        } else {
            S::zero()
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        let gd = g.data();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + ob1 * gd[j];
            v[j] = b2 * v[j] + ob2 * gd[j] * gd[j];
            let mhat = m[j] * inv_bc1;
            let vhat = v[j] * inv_bc2;
            p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps) - wd * p[j];
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm. The sum of squares accumulates in f64 in
/// parameter order, so the result is deterministic.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: f64) -> f64 {
    let mut ss = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g.data() {
            let x = Scalar::to_f64(x);
            ss += x * x;
        }
    }
    let norm = ss.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then linear decay to zero
/// at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak lr {} invalid", self.peak_lr)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at a step in `[0, total]`; steps past the schedule error.
pub fn lr_at_step(sched: &Schedule, step: u64) -> Result<f64> {
    if step > sched.total_steps {
        return Err(Error::StepPastSchedule {
            step,
            total: sched.total_steps,
        });
    }
    if step <= sched.warmup_steps {
        if sched.warmup_steps == 0 {
            return Ok(sched.peak_lr);
        }
        return Ok(sched.peak_lr * step as f64 / sched.warmup_steps as f64);
    }
    let rest = (sched.total_steps - sched.warmup_steps) as f64;
    Ok(sched.peak_lr * (sched.total_steps - step) as f64 / rest)
}

/// Per-group learning rates for discriminative fine-tuning, top-down:
/// index 0 is the task head, 1..=N are encoder layers from top to bottom,
/// N+1 is the embedding block. Head and top layer run at `base`; each step
/// down multiplies by `decay`.
pub fn layerwise_lrs(base: f64, decay: f64, num_layers: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_layers + 2);
    out.push(base);
    for l in 0..num_layers {
        out.push(base * decay.powi(l as i32));
    }
    out.push(base * decay.powi(num_layers as i32));
    out
}

/// Settings for a pretraining run beyond the model config and schedule.
#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub batch_size: usize,
    pub mode: IngestMode,
    pub policy: MaskingPolicy,
    pub clip_norm: f64,
    /// Emit a log entry every this many steps (0: only the final step).
    pub log_every: u64,
    /// Write `checkpoint.bin` to `out_dir` every this many steps
    /// (0: only at the end); ignored without an `out_dir`.
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    /// Halt this invocation after completing this many additional steps,
    /// as an interruption would; the returned checkpoint resumes the run.
    /// `None` runs to the end of the schedule.
    pub stop_after: Option<u64>,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        PretrainOpts {
            batch_size: 16,
            mode: IngestMode::Pair,
            policy: MaskingPolicy::default(),
            clip_norm: 1.0,
            log_every: 50,
            checkpoint_every: 0,
            out_dir: None,
            stop_after: None,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct LogEntry {
    /// Completed optimization steps, 1-based.
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub mlm: f64,
    pub rtd: Option<f64>,
    /// Detection accuracy over valid positions for this batch.
    pub rtd_accuracy: Option<f64>,
    pub grad_norm: f64,
}

pub struct PretrainResult<S: Scalar> {
    pub model: Model<S>,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

const TRAIN_RNG_SALT: u64 = 0x7f4a_7c15_9e37_79b9;

fn epoch_rng(seed: u64, epoch: u64) -> Rng {
    Rng::new(seed.wrapping_add((epoch + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn training_checkpoint<S: Scalar>(
    model: &Model<S>,
    state: &OptimState<S>,
    train_rng: &Rng,
    seed: u64,
    step: u64,
    epoch: u64,
    batch_in_epoch: u64,
) -> Checkpoint {
    let mut ck = model_to_checkpoint(model);
    ck.set("train.seed", seed.to_string());
    ck.set("train.step", step.to_string());
    ck.set("train.epoch", epoch.to_string());
    ck.set("train.batch_in_epoch", batch_in_epoch.to_string());
    for (k, v) in rng_to_pairs("train.rng", train_rng) {
        ck.set(k, v);
    }
    ck.set("opt.step", state.step.to_string());
    for (i, (_, name, _)) in model.store.iter().enumerate() {
        ck.tensors.push((format!("opt.m.{name}"), state.m[i].cast::<f32>()));
        ck.tensors.push((format!("opt.v.{name}"), state.v[i].cast::<f32>()));
    }
    ck
}

fn optim_state_from_checkpoint<S: Scalar>(
    ck: &Checkpoint,
    model: &Model<S>,
) -> Result<OptimState<S>> {
    let mut state = OptimState::new(&model.store);
    state.step = ck.get_parsed("opt.step")?;
    for (i, (_, name, t)) in model.store.iter().enumerate() {
        for (tag, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let key = format!("opt.{tag}.{name}");
            let stored = ck
                .tensor(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {key:?}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Config(format!("moment {key:?} has wrong shape")));
            }
            *slot = stored.cast::<S>();
        }
    }
    Ok(state)
}

/// Runs (or resumes) masked-language / replaced-token-detection pretraining.
///
/// Determinism contract: a (config, vocab, corpus, schedule, seed, opts)
/// tuple fully determines every parameter bit at every step. Resuming from a
/// checkpoint written at step s reproduces the uninterrupted run exactly:
/// the data stream is reconstructed by replaying epoch `train.epoch` and
/// skipping `train.batch_in_epoch` batches, and the masking/dropout/sampling
/// rng state is restored verbatim.
pub fn pretrain<S: Scalar>(
    cfg: &crate::encoder::ModelConfig,
    vocab: &Vocab,
    corpus: &Path,
    schedule: &Schedule,
    seed: u64,
    opts: &PretrainOpts,
    resume: Option<&Checkpoint>,
) -> Result<PretrainResult<S>> {
    cfg.validate()?;
    schedule.validate()?;
    opts.policy.validate()?;
    if vocab.size() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} entries but the model expects {}",
            vocab.size(),
            cfg.vocab_size
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let (mut model, mut opt_state, mut train_rng, start_step, mut epoch, mut batch_in_epoch) =
        match resume {
            None => {
                let mut init_rng = Rng::new(seed);
                let model: Model<S> = Model::init(cfg, &mut init_rng)?;
                let opt_state = OptimState::new(&model.store);
                let train_rng = Rng::new(seed ^ TRAIN_RNG_SALT);
                (model, opt_state, train_rng, 0u64, 0u64, 0u64)
            }
            Some(ck) => {
                let model: Model<S> = model_from_checkpoint(ck)?;
                if model.cfg != *cfg {
                    return Err(Error::Config(
                        "resume checkpoint was built with a different model config".into(),
                    ));
                }
                let opt_state = optim_state_from_checkpoint(ck, &model)?;
                let train_rng = rng_from_pairs(ck, "train.rng")?;
                let step: u64 = ck.get_parsed("train.step")?;
                let epoch: u64 = ck.get_parsed("train.epoch")?;
                let batch_in_epoch: u64 = ck.get_parsed("train.batch_in_epoch")?;
                (model, opt_state, train_rng, step, epoch, batch_in_epoch)
            }
        };
    if start_step >= schedule.total_steps {
        return Err(Error::StepPastSchedule {
            step: start_step,
            total: schedule.total_steps,
        });
    }

    let hp = AdamW::default();
    let mut log = Vec::new();
    let n_params = model.store.len();
    let mut done = start_step;

    let open_epoch = |epoch: u64| -> Result<_> {
        let stream = ingest_corpus(corpus, vocab, opts.mode, cfg.max_len)?;
        make_batches(stream, opts.batch_size, epoch_rng(seed, epoch), true)
    };
    let mut batches = open_epoch(epoch)?;
    for _ in 0..batch_in_epoch {
        if batches.next().transpose()?.is_none() {
            return Err(Error::corpus(corpus, "resume position past the epoch end"));
        }
    }

    for step in start_step..schedule.total_steps {
        let batch: TokenBatch = loop {
            match batches.next().transpose()? {
                Some(b) => break b,
                None => {
                    if batch_in_epoch == 0 {
                        return Err(Error::corpus(
                            corpus,
                            format!("no full batch of {} sequences", opts.batch_size),
                        ));
                    }
                    epoch += 1;
                    batch_in_epoch = 0;
                    batches = open_epoch(epoch)?;
                }
            }
        };
        batch_in_epoch += 1;

        let mut g: Graph<S> = Graph::new();
        let vars = model.store.load_vars(&mut g, true);
        let outcome = pretrain_loss(&mut g, &vars, &model, &batch, &opts.policy, &mut train_rng)?;
        let total_value = Scalar::to_f64(g.value(outcome.total).item());
        if !total_value.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {total_value} at step {step}; last saved checkpoint left intact"
            )));
        }
        g.backward(outcome.total)?;
        let mut grads = model.store.collect_grads(&mut g, &vars);
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, opts.clip_norm);
        let lr = lr_at_step(schedule, step + 1)?;
        adamw_step(
            &mut model.store,
            &grads,
            &vec![lr; n_params],
            &hp,
            &mut opt_state,
        )?;
        let completed = step + 1;
        done = completed;

        let halt = opts.stop_after == Some(completed - start_step);
        let last = completed == schedule.total_steps || halt;
        if last || (opts.log_every > 0 && completed % opts.log_every == 0) {
            log.push(LogEntry {
                step: completed,
                lr,
                total: total_value,
                mlm: outcome.mlm_value,
                rtd: outcome.rtd_value,
                rtd_accuracy: outcome
                    .rtd_accuracy
                    .map(|(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 }),
                grad_norm,
            });
        }
        if let Some(dir) = &opts.out_dir {
            if last || (opts.checkpoint_every > 0 && completed % opts.checkpoint_every == 0) {
                let ck = training_checkpoint(
                    &model,
                    &opt_state,
                    &train_rng,
                    seed,
                    completed,
                    epoch,
                    batch_in_epoch,
                );
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::checkpoint(dir, format!("cannot create dir: {e}")))?;
                ck.save(&dir.join("checkpoint.bin"))?;
            }
        }
        if halt {
            break;
        }
    }

    let checkpoint = training_checkpoint(
        &model,
        &opt_state,
        &train_rng,
        seed,
        done,
        epoch,
        batch_in_epoch,
    );
    Ok(PretrainResult {
        model,
        checkpoint,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_hand_cases() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]), true).unwrap();
        store.insert("b", Tensor::from_vec(vec![1.0]), false).unwrap();
        let mut state = OptimState::new(&store);
        let hp = AdamW::default();
        // Zero gradient: only decayed params move, by lr * wd * p.
        let grads = vec![
            Some(Tensor::from_vec(vec![0.0])),
            Some(Tensor::from_vec(vec![0.0])),
        ];
        adamw_step(&mut store, &grads, &[0.1, 0.1], &hp, &mut state).unwrap();
        let w = store.get(crate::params::ParamId(0)).data()[0];
        let b = store.get(crate::params::ParamId(1)).data()[0];
        assert!((w - 0.999).abs() < 1e-15, "decay moved w to {w}");
        assert_eq!(b, 1.0, "no decay on bias");

        // Single step with gradient 0.5: bias-corrected update is close to
        // lr * g / (|g| + eps) = lr.
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![2.0]), false).unwrap();
        let mut state = OptimState::new(&store);
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let grads = vec![Some(Tensor::from_vec(vec![0.5]))];
        adamw_step(&mut store, &grads, &[1e-3], &hp, &mut state).unwrap();
        let w = store.get(crate::params::ParamId(0)).data()[0];
        let expect = 2.0 - 1e-3 * 0.5 / (0.5 + 1e-6);
        assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_rejects_nan_gradients_without_mutation() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        let mut state = OptimState::new(&store);
        let grads = vec![Some(Tensor::from_vec(vec![0.1, f64::NAN]))];
        let err = adamw_step(&mut store, &grads, &[0.1], &AdamW::default(), &mut state)
            .unwrap_err()
            .to_string();
        assert!(err.contains('w'), "{err}");
        assert_eq!(store.get(crate::params::ParamId(0)).data(), &[1.0, 2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn unused_params_are_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]), true).unwrap();
        let mut state = OptimState::new(&store);
        adamw_step(&mut store, &[None], &[0.1], &AdamW::default(), &mut state).unwrap();
        assert_eq!(store.get(crate::params::ParamId(0)).data(), &[1.0]);
    }

    #[test]
    fn clipping_caps_norm_and_preserves_direction() {
        let mut grads = vec![
            Some(Tensor::<f64>::from_vec(vec![3.0, 0.0])),
            Some(Tensor::<f64>::from_vec(vec![0.0, 4.0])),
        ];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let a = grads[0].as_ref().unwrap().data()[0];
        let b = grads[1].as_ref().unwrap().data()[1];
        assert!((a - 0.6).abs() < 1e-12 && (b - 0.8).abs() < 1e-12);
        // Under the cap: untouched, same norm reported.
        let mut small = vec![Some(Tensor::<f64>::from_vec(vec![0.3]))];
        let norm = clip_global_norm(&mut small, 1.0);
        assert!((norm - 0.3).abs() < 1e-15);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3]);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
        };
        s.validate().unwrap();
        assert_eq!(lr_at_step(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at_step(&s, 50).unwrap(), 5e-4);
        assert_eq!(lr_at_step(&s, 100).unwrap(), 1e-3);
        let mid = lr_at_step(&s, 550).unwrap();
        assert!((mid - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at_step(&s, 1000).unwrap(), 0.0);
        assert!(lr_at_step(&s, 1001).is_err());
        assert!(Schedule {
            peak_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 10
        }
        .validate()
        .is_err());
        // No warmup: starts at peak.
        let s0 = Schedule {
            peak_lr: 2e-4,
            warmup_steps: 0,
            total_steps: 10,
        };
        assert_eq!(lr_at_step(&s0, 0).unwrap(), 2e-4);
    }

    #[test]
    fn layerwise_rates_decay_downward() {
        let lrs = layerwise_lrs(1e-4, 0.8, 12);
        assert_eq!(lrs.len(), 14);
        assert_eq!(lrs[0], 1e-4, "head");
        assert_eq!(lrs[1], 1e-4, "top layer");
        assert!((lrs[2] - 8e-5).abs() < 1e-18, "next layer down");
        let emb = 1e-4 * 0.8f64.powi(12);
        assert!((lrs[13] - emb).abs() < 1e-18, "embeddings at the bottom");
    }
}
