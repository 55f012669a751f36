//! Pretraining objectives and model assembly.
//!
//! An [`Model`] bundles the parameter store, the main encoder, and the
//! objective head. With the electra objective it additionally owns a narrow
//! generator that physically shares every embedding table with the main
//! encoder (same [`ParamId`]s), so both losses accumulate into one tensor.

use crate::data::{dynamic_mask, MaskingPolicy, TokenBatch, IGNORE_ID};
use crate::encoder::{
    encoder_forward, linear, EncoderWeights, ModelConfig, ObjectiveKind, SharedEmbeddings, LN_EPS,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Masked-language-model head: hidden -> emb_dim projection, gelu, layer
/// norm, then logits against the transposed token table plus a free bias.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub out_bias: ParamId,
}

impl MlmHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        hidden: usize,
        emb_dim: usize,
        vocab: usize,
        rng: &mut Rng,
    ) -> Result<MlmHead> {
        Ok(MlmHead {
            proj_w: store.insert(
                "mlm_head.proj.w",
                Tensor::truncated_normal(&[hidden, emb_dim], crate::encoder::INIT_STD, rng),
                true,
            )?,
            proj_b: store.insert("mlm_head.proj.b", Tensor::zeros(&[emb_dim]), false)?,
            ln_g: store.insert("mlm_head.ln.g", Tensor::ones(&[emb_dim]), false)?,
            ln_b: store.insert("mlm_head.ln.b", Tensor::zeros(&[emb_dim]), false)?,
            out_bias: store.insert("mlm_head.out.b", Tensor::zeros(&[vocab]), false)?,
        })
    }
}

/// Replaced-token-detection head: hidden -> hidden dense with gelu, then a
/// scalar logit per position.
#[derive(Debug, Clone)]
pub struct RtdHead {
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl RtdHead {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<RtdHead> {
        Ok(RtdHead {
            dense_w: store.insert(
                "rtd_head.dense.w",
                Tensor::truncated_normal(&[hidden, hidden], crate::encoder::INIT_STD, rng),
                true,
            )?,
            dense_b: store.insert("rtd_head.dense.b", Tensor::zeros(&[hidden]), false)?,
            out_w: store.insert(
                "rtd_head.out.w",
                Tensor::truncated_normal(&[hidden, 1], crate::encoder::INIT_STD, rng),
                true,
            )?,
            out_b: store.insert("rtd_head.out.b", Tensor::zeros(&[1]), false)?,
        })
    }
}

/// A complete pretraining model.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub shared: SharedEmbeddings,
    /// Main encoder; the discriminator when the objective is electra.
    pub encoder: EncoderWeights,
    pub generator: Option<EncoderWeights>,
    /// On the main encoder for mlm, on the generator for electra.
    pub mlm_head: MlmHead,
    pub rtd_head: Option<RtdHead>,
}

impl<S: Scalar> Model<S> {
    /// Builds and initializes all parameters. Creation order is fixed so a
    /// given seed always produces the same named tensors.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model<S>> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let shared = SharedEmbeddings::init(&mut store, cfg, rng)?;
        let encoder = EncoderWeights::init(&mut store, "enc", cfg.main_dims(), &shared, rng)?;
        let (generator, mlm_head, rtd_head) = match cfg.objective {
            ObjectiveKind::Mlm => {
                let head =
                    MlmHead::init(&mut store, cfg.hidden, cfg.embedding_dim, cfg.vocab_size, rng)?;
                (None, head, None)
            }
            ObjectiveKind::Electra => {
                let rtd = RtdHead::init(&mut store, cfg.hidden, rng)?;
                let gdims = cfg.generator_dims()?;
                let gen = EncoderWeights::init(&mut store, "gen", gdims, &shared, rng)?;
                let head =
                    MlmHead::init(&mut store, gdims.hidden, cfg.embedding_dim, cfg.vocab_size, rng)?;
                (Some(gen), head, Some(rtd))
            }
        };
        Ok(Model {
            cfg: cfg.clone(),
            store,
            shared,
            encoder,
            generator,
            mlm_head,
            rtd_head,
        })
    }

    /// Scalar count of the main network: shared embeddings, main encoder,
    /// and its objective head (the generator side is excluded). Agrees
    /// exactly with [`crate::encoder::count_parameters`].
    pub fn main_parameter_count(&self) -> u64 {
        let objective = self.cfg.objective;
        self.store.scalars_where(|name| {
            name.starts_with("emb.")
                || name.starts_with("enc.")
                || match objective {
                    ObjectiveKind::Mlm => name.starts_with("mlm_head."),
                    ObjectiveKind::Electra => name.starts_with("rtd_head."),
                }
        })
    }
}

/// Vocabulary logits for a set of hidden rows, tied to the token table.
pub fn mlm_logits<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    head: &MlmHead,
    token_emb: ParamId,
    rows: Var,
) -> Result<Var> {
    let x = linear(g, rows, vars[head.proj_w.0], vars[head.proj_b.0])?;
    let x = g.gelu(x);
    let x = g.layer_norm(x, vars[head.ln_g.0], vars[head.ln_b.0], LN_EPS)?;
    let logits = g.matmul_nt(x, vars[token_emb.0])?;
    g.add(logits, vars[head.out_bias.0])
}

/// Scalar replaced/original logit for every hidden row.
pub fn rtd_logits<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    head: &RtdHead,
    rows: Var,
) -> Result<Var> {
    let n = g.value(rows).shape()[0];
    let x = linear(g, rows, vars[head.dense_w.0], vars[head.dense_b.0])?;
    let x = g.gelu(x);
    let z = linear(g, x, vars[head.out_w.0], vars[head.out_b.0])?;
    g.reshape(z, vec![n])
}

/// Cross-entropy over the labeled positions of an already-masked batch, run
/// through the given encoder and head.
pub struct MlmOutcome {
    pub loss: Var,
    pub logits: Var,
    /// Flat `b * seq_len` indices of the labeled positions, in scan order.
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn mlm_loss<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    enc: &EncoderWeights,
    head: &MlmHead,
    token_emb: ParamId,
    batch: &TokenBatch,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Result<MlmOutcome> {
    let positions: Vec<usize> = batch
        .mlm_labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_ID)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Err(Error::AllIgnored);
    }
    let targets: Vec<usize> = positions.iter().map(|&i| batch.mlm_labels[i]).collect();
    let hidden = encoder_forward(g, vars, enc, batch, dropout, rng)?;
    let flat = g.reshape(hidden, vec![batch.batch * batch.seq_len, enc.dims.hidden])?;
    let sel = g.gather_rows(flat, &positions)?;
    let logits = mlm_logits(g, vars, head, token_emb, sel)?;
    let loss = g.cross_entropy(logits, &targets, IGNORE_ID)?;
    Ok(MlmOutcome {
        loss,
        logits,
        positions,
        targets,
    })
}

/// Samples one token id per logit row by inverse CDF over the softmax at
/// temperature 1, consuming exactly one uniform draw per row, rows in order.
/// Operates on detached values, so no gradient flows through the samples.
pub fn generator_sample<S: Scalar>(logits: &Tensor<S>, rng: &mut Rng) -> Result<Vec<usize>> {
    if logits.rank() != 2 || logits.shape()[1] == 0 {
        return Err(Error::InvalidShape {
            op: "generator_sample",
            shape: logits.shape().to_vec(),
            reason: "expected [rows, vocab] logits".into(),
        });
    }
    let v = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.shape()[0]);
    let mut weights = vec![0.0f64; v];
    for row in logits.data().chunks(v) {
        let m = row
            .iter()
            .map(|&x| Scalar::to_f64(x))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (w, &x) in weights.iter_mut().zip(row) {
            *w = (Scalar::to_f64(x) - m).exp();
            total += *w;
        }
        let u = rng.next_f64() * total;
        let mut cum = 0.0;
        let mut pick = v - 1; // u == total can only happen by rounding
        for (j, &w) in weights.iter().enumerate() {
            cum += w;
            if u < cum {
                pick = j;
                break;
            }
        }
        out.push(pick);
    }
    Ok(out)
}

/// Per-position detection targets: 1.0 where the corrupted id differs from
/// the original, else 0.0.
pub fn rtd_labels(original: &[usize], corrupted: &[usize]) -> Vec<f64> {
    assert_eq!(original.len(), corrupted.len());
    original
        .iter()
        .zip(corrupted)
        .map(|(o, c)| if o != c { 1.0 } else { 0.0 })
        .collect()
}

/// Everything the training loop wants from one objective evaluation.
pub struct StepOutcome {
    /// Scalar loss to backpropagate (mlm, or mlm + lambda * rtd).
    pub total: Var,
    pub mlm_value: f64,
    pub rtd_value: Option<f64>,
    /// (correct, total) detection decisions at threshold 0 over valid
    /// positions; None for the mlm objective.
    pub rtd_accuracy: Option<(usize, usize)>,
    pub masked_positions: usize,
    /// Positions where the generator sample actually differs from the
    /// original token (electra only).
    pub replaced_positions: Option<usize>,
}

/// Masks the batch and evaluates the model's pretraining objective.
///
/// Rng draw order is fixed: masking draws, then generator-forward dropout,
/// then one sampling draw per masked position, then discriminator-forward
/// dropout (dropout stages draw nothing when `cfg.dropout == 0`).
pub fn pretrain_loss<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    model: &Model<S>,
    batch: &TokenBatch,
    policy: &MaskingPolicy,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let cfg = &model.cfg;
    let masked = dynamic_mask(batch, policy, cfg.vocab_size, rng)?;
    match cfg.objective {
        ObjectiveKind::Mlm => {
            let out = mlm_loss(
                g,
                vars,
                &model.encoder,
                &model.mlm_head,
                model.shared.token,
                &masked,
                cfg.dropout,
                Some(rng),
            )?;
            Ok(StepOutcome {
                total: out.loss,
                mlm_value: g.value(out.loss).item().to_f64(),
                rtd_value: None,
                rtd_accuracy: None,
                masked_positions: out.positions.len(),
                replaced_positions: None,
            })
        }
        ObjectiveKind::Electra => {
            let gen = model
                .generator
                .as_ref()
                .ok_or_else(|| Error::Config("electra model lacks a generator".into()))?;
            let rtd_head = model
                .rtd_head
                .as_ref()
                .ok_or_else(|| Error::Config("electra model lacks an rtd head".into()))?;
            let gen_out = mlm_loss(
                g,
                vars,
                gen,
                &model.mlm_head,
                model.shared.token,
                &masked,
                cfg.dropout,
                Some(rng),
            )?;
            // Sampling reads detached logit values: the discriminator input
            // is plain ids, so no gradient can flow generator <- rtd loss.
            let samples = generator_sample(g.value(gen_out.logits), rng)?;
            let mut corrupted = masked.ids.clone();
            let mut replaced = 0;
            for (&pos, (&sample, &orig)) in gen_out
                .positions
                .iter()
                .zip(samples.iter().zip(&gen_out.targets))
            {
                corrupted[pos] = sample;
                if sample != orig {
                    replaced += 1;
                }
            }
            let labels = rtd_labels(&batch.ids, &corrupted);
            let valid: Vec<bool> = masked
                .pad_mask
                .iter()
                .zip(&masked.special_mask)
                .map(|(&p, &s)| p && !s)
                .collect();
            let disc_batch = TokenBatch {
                ids: corrupted,
                mlm_labels: vec![IGNORE_ID; masked.mlm_labels.len()],
                ..masked.clone()
            };
            let hidden = encoder_forward(g, vars, &model.encoder, &disc_batch, cfg.dropout, Some(rng))?;
            let flat = g.reshape(
                hidden,
                vec![disc_batch.batch * disc_batch.seq_len, cfg.hidden],
            )?;
            let logits = rtd_logits(g, vars, rtd_head, flat)?;
            let rtd = g.bce_with_logits(logits, &labels, &valid)?;
            let scaled = g.scale(rtd, cfg.lambda_rtd);
            let total = g.add(gen_out.loss, scaled)?;
            let lv = g.value(logits).data();
            let mut correct = 0;
            let mut count = 0;
            for i in 0..labels.len() {
                if valid[i] {
                    count += 1;
                    let pred_replaced = lv[i].to_f64() > 0.0;
                    if pred_replaced == (labels[i] == 1.0) {
                        correct += 1;
                    }
                }
            }
            Ok(StepOutcome {
                total,
                mlm_value: g.value(gen_out.loss).item().to_f64(),
                rtd_value: Some(g.value(rtd).item().to_f64()),
                rtd_accuracy: Some((correct, count)),
                masked_positions: gen_out.positions.len(),
                replaced_positions: Some(replaced),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{count_parameters, Variant};
    use crate::tokenizer::{encode_single, Vocab, SPECIAL_TOKENS};

    fn vocab() -> Vocab {
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k2", "l2"] {
            toks.push(w.into());
        }
        Vocab::from_tokens(toks).unwrap()
    }

    fn tiny_cfg(variant: Variant, vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_inner: 16,
            embedding_dim: 6,
            max_len: 16,
            max_relative_distance: 3,
            generator_fraction: 0.5,
            lambda_rtd: 50.0,
            ..ModelConfig::toy(variant, vocab)
        }
    }

    fn batch(v: &Vocab) -> TokenBatch {
        let seqs = vec![
            encode_single("a b c d e f g h", v, 16),
            encode_single("i j a b k2 l2 c d", v, 16),
            encode_single("c d e f", v, 16),
        ];
        TokenBatch::from_sequences(&seqs)
    }

    #[test]
    fn analytic_count_matches_enumeration_for_all_variants() {
        for variant in Variant::all() {
            for cfg in [
                tiny_cfg(variant, 60),
                ModelConfig::toy(variant, 2000),
                ModelConfig::small(variant, 30522),
            ] {
                let mut rng = Rng::new(1);
                let model: Model<f32> = Model::init(&cfg, &mut rng).unwrap();
                assert_eq!(
                    model.main_parameter_count(),
                    count_parameters(&cfg),
                    "{} {:?}",
                    variant.name(),
                    (cfg.hidden, cfg.num_layers)
                );
            }
        }
    }

    #[test]
    fn electra_model_physically_shares_embeddings() {
        let cfg = tiny_cfg(Variant::ElectraDeberta, 60);
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(2)).unwrap();
        let gen = model.generator.as_ref().unwrap();
        assert_eq!(model.encoder.token_emb, gen.token_emb);
        assert_eq!(model.encoder.segment_emb, gen.segment_emb);
        assert_eq!(model.encoder.rel_table, gen.rel_table);
        assert!(model.encoder.rel_table.is_some());
        // One table of the discriminator's width serves both stacks.
        assert_eq!(
            model.store.get(model.encoder.rel_table.unwrap()).shape(),
            &[2 * cfg.max_relative_distance, cfg.hidden]
        );
    }

    #[test]
    fn generator_sample_is_deterministic_and_respects_peaks() {
        let mut t = Tensor::<f64>::zeros(&[3, 5]);
        t.set(&[0, 2], 50.0);
        t.set(&[1, 4], 50.0);
        t.set(&[2, 0], 50.0);
        let s = generator_sample(&t, &mut Rng::new(9)).unwrap();
        assert_eq!(s, vec![2, 4, 0]);
        let flat = Tensor::<f64>::zeros(&[4, 6]);
        let a = generator_sample(&flat, &mut Rng::new(7)).unwrap();
        let b = generator_sample(&flat, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&id| id < 6));
        assert!(generator_sample(&Tensor::<f64>::zeros(&[4]), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn generator_sample_tracks_distribution() {
        // Two outcomes weighted 1:3 should appear in roughly that ratio.
        let mut t = Tensor::<f64>::zeros(&[2000, 2]);
        for r in 0..2000 {
            t.set(&[r, 1], (3.0f64).ln());
        }
        let s = generator_sample(&t, &mut Rng::new(123)).unwrap();
        let ones = s.iter().filter(|&&x| x == 1).count();
        let frac = ones as f64 / 2000.0;
        assert!((frac - 0.75).abs() < 0.04, "got {frac}");
    }

    #[test]
    fn rtd_labels_hand_case() {
        let orig = [2, 7, 9, 3, 0];
        let corr = [2, 8, 9, 3, 1];
        assert_eq!(rtd_labels(&orig, &corr), vec![0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mlm_objective_loss_runs_and_counts_masks() {
        let v = vocab();
        let cfg = tiny_cfg(Variant::Deberta, v.size());
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(5)).unwrap();
        let b = batch(&v);
        let mut g = Graph::new();
        let vars = model.store.load_vars(&mut g, true);
        let mut rng = Rng::new(11);
        let out = pretrain_loss(&mut g, &vars, &model, &b, &MaskingPolicy::default(), &mut rng).unwrap();
        assert!(out.mlm_value.is_finite());
        assert!(out.masked_positions > 0);
        assert!(out.rtd_value.is_none());
        // A fresh model should score near chance: ln(vocab) ballpark.
        assert!(out.mlm_value < 2.0 * (v.size() as f64).ln());
        g.backward(out.total).unwrap();
        let grads = model.store.collect_grads(&mut g, &vars);
        let tok = grads[model.shared.token.0].as_ref().unwrap();
        assert!(tok.all_finite());
    }

    #[test]
    fn mlm_loss_with_nothing_masked_is_an_error() {
        let v = vocab();
        let cfg = tiny_cfg(Variant::Bert, v.size());
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(5)).unwrap();
        let b = batch(&v);
        let mut g = Graph::new();
        let vars = model.store.load_vars(&mut g, true);
        let policy = MaskingPolicy {
            mask_prob: 0.0,
            ..MaskingPolicy::default()
        };
        let err = pretrain_loss(&mut g, &vars, &model, &b, &policy, &mut Rng::new(1));
        assert!(err.is_err());
    }

    #[test]
    fn electra_loss_combines_components_exactly() {
        let v = vocab();
        let cfg = tiny_cfg(Variant::ElectraDeberta, v.size());
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(5)).unwrap();
        let b = batch(&v);
        let mut g = Graph::new();
        let vars = model.store.load_vars(&mut g, true);
        let mut rng = Rng::new(11);
        let out = pretrain_loss(&mut g, &vars, &model, &b, &MaskingPolicy::default(), &mut rng).unwrap();
        let rtd = out.rtd_value.unwrap();
        assert!(rtd.is_finite() && rtd > 0.0);
        let total = g.value(out.total).item();
        assert_eq!(total, out.mlm_value + rtd * cfg.lambda_rtd);
        let (correct, counted) = out.rtd_accuracy.unwrap();
        assert!(correct <= counted);
        let content: usize = b
            .pad_mask
            .iter()
            .zip(&b.special_mask)
            .filter(|(&p, &s)| p && !s)
            .count();
        assert_eq!(counted, content, "every valid position is scored");
        assert!(out.replaced_positions.unwrap() <= out.masked_positions);
    }

    #[test]
    fn electra_is_deterministic_for_a_seed() {
        let v = vocab();
        let cfg = tiny_cfg(Variant::Electra, v.size());
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(5)).unwrap();
        let b = batch(&v);
        let run = || {
            let mut g = Graph::new();
            let vars = model.store.load_vars(&mut g, true);
            let mut rng = Rng::new(42);
            let out =
                pretrain_loss(&mut g, &vars, &model, &b, &MaskingPolicy::default(), &mut rng)
                    .unwrap();
            (g.value(out.total).item(), out.mlm_value, out.rtd_value)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rtd_gradient_never_reaches_generator_weights() {
        let v = vocab();
        let cfg = tiny_cfg(Variant::ElectraDeberta, v.size());
        let model: Model<f64> = Model::init(&cfg, &mut Rng::new(5)).unwrap();
        let b = batch(&v);
        let masked = dynamic_mask(&b, &MaskingPolicy::default(), v.size(), &mut Rng::new(3)).unwrap();
        let gen = model.generator.as_ref().unwrap();
        let mut g = Graph::new();
        let vars = model.store.load_vars(&mut g, true);
        let gen_out = mlm_loss(
            &mut g,
            &vars,
            gen,
            &model.mlm_head,
            model.shared.token,
            &masked,
            0.0,
            None,
        )
        .unwrap();
        let samples = generator_sample(g.value(gen_out.logits), &mut Rng::new(4)).unwrap();
        let mut corrupted = masked.ids.clone();
        for (&pos, &s) in gen_out.positions.iter().zip(&samples) {
            corrupted[pos] = s;
        }
        let labels = rtd_labels(&b.ids, &corrupted);
        let valid: Vec<bool> = masked
            .pad_mask
            .iter()
            .zip(&masked.special_mask)
            .map(|(&p, &s)| p && !s)
            .collect();
        let disc_batch = TokenBatch {
            ids: corrupted,
            mlm_labels: vec![IGNORE_ID; masked.mlm_labels.len()],
            ..masked.clone()
        };
        let hidden =
            encoder_forward(&mut g, &vars, &model.encoder, &disc_batch, 0.0, None).unwrap();
        let flat = g
            .reshape(hidden, vec![disc_batch.batch * disc_batch.seq_len, cfg.hidden])
            .unwrap();
        let logits = rtd_logits(&mut g, &vars, model.rtd_head.as_ref().unwrap(), flat).unwrap();
        let rtd = g.bce_with_logits(logits, &labels, &valid).unwrap();
        // Backpropagate the detection loss alone.
        g.backward(rtd).unwrap();
        let grads = model.store.collect_grads(&mut g, &vars);
        assert!(
            grads[gen.layers[0].q_w.0].is_none(),
            "generator weights must sit outside the rtd gradient path"
        );
        assert!(grads[model.mlm_head.proj_w.0].is_none());
        assert!(grads[model.encoder.layers[0].q_w.0].is_some());
        assert!(
            grads[model.shared.token.0].is_some(),
            "shared embeddings still learn from the discriminator pass"
        );
    }
}
