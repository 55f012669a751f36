//! Transformer encoder with either absolute-position or disentangled
//! (content/relative-position) attention, factorized embeddings, and the
//! standard post-layer-norm residual layout.
//!
//! Parameter tensors live in a [`ParamStore`]; the weight structs here hold
//! ids into it, so two encoders can physically share embedding tables by
//! holding the same id.

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm stabilizer used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Truncated-normal standard deviation for weight and embedding init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Absolute,
    Disentangled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Masked-language-model pretraining on a single encoder.
    Mlm,
    /// Replaced-token detection: a small generator proposes tokens, the main
    /// encoder (discriminator) classifies each position as original/replaced.
    Electra,
}

/// Named model variants accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bert,
    Deberta,
    Electra,
    ElectraDeberta,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "bert" => Ok(Variant::Bert),
            "deberta" => Ok(Variant::Deberta),
            "electra" => Ok(Variant::Electra),
            "electra-deberta" => Ok(Variant::ElectraDeberta),
            _ => Err(Error::Config(format!(
                "unknown model {s:?}; expected bert, deberta, electra, or electra-deberta"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bert => "bert",
            Variant::Deberta => "deberta",
            Variant::Electra => "electra",
            Variant::ElectraDeberta => "electra-deberta",
        }
    }

    pub fn attention(self) -> AttentionKind {
        match self {
            Variant::Bert | Variant::Electra => AttentionKind::Absolute,
            Variant::Deberta | Variant::ElectraDeberta => AttentionKind::Disentangled,
        }
    }

    pub fn objective(self) -> ObjectiveKind {
        match self {
            Variant::Bert | Variant::Deberta => ObjectiveKind::Mlm,
            Variant::Electra | Variant::ElectraDeberta => ObjectiveKind::Electra,
        }
    }

    pub fn all() -> [Variant; 4] {
        [Variant::Bert, Variant::Deberta, Variant::Electra, Variant::ElectraDeberta]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    /// Relative-distance clamp k; buckets span [-k, k) as 2k table rows.
    pub max_relative_distance: usize,
    pub attention: AttentionKind,
    pub objective: ObjectiveKind,
    pub dropout: f64,
    /// Generator width multiplier for the electra objective.
    pub generator_fraction: f64,
    /// Weight on the replaced-token-detection loss.
    pub lambda_rtd: f64,
}

impl ModelConfig {
    /// The 14M-class configuration used for the benchmark models.
    pub fn small(variant: Variant, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: 128,
            embedding_dim: 128,
            hidden: 256,
            num_layers: 12,
            heads: 4,
            ffn_inner: 1024,
            max_relative_distance: 64,
            attention: variant.attention(),
            objective: variant.objective(),
            dropout: 0.1,
            generator_fraction: 0.25,
            lambda_rtd: 50.0,
        }
    }

    /// Minutes-scale configuration for smoke runs and calibration tests.
    pub fn toy(variant: Variant, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: 64,
            embedding_dim: 64,
            hidden: 64,
            num_layers: 2,
            heads: 2,
            ffn_inner: 256,
            max_relative_distance: 32,
            attention: variant.attention(),
            objective: variant.objective(),
            dropout: 0.0,
            generator_fraction: 0.25,
            lambda_rtd: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 6 {
            return bad(format!("vocab size {} leaves no content ids", self.vocab_size));
        }
        if self.max_len < 5 {
            return bad(format!("max_len {} cannot hold a sentence pair", self.max_len));
        }
        if self.embedding_dim == 0 || self.hidden == 0 || self.ffn_inner == 0 || self.num_layers == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} must divide into heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_relative_distance == 0 {
            return bad("max relative distance must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lambda_rtd < 0.0 || !self.lambda_rtd.is_finite() {
            return bad(format!("lambda_rtd {} must be non-negative", self.lambda_rtd));
        }
        if self.objective == ObjectiveKind::Electra {
            if !(self.generator_fraction > 0.0 && self.generator_fraction <= 1.0) {
                return bad(format!(
                    "generator fraction {} outside (0, 1]",
                    self.generator_fraction
                ));
            }
            let g = self.generator_dims()?;
            if g.hidden == 0 || g.hidden % g.heads != 0 {
                return bad(format!(
                    "generator hidden {} must divide into {} heads",
                    g.hidden, g.heads
                ));
            }
        }
        Ok(())
    }

    /// Dimensions of the main encoder. The relative table width equals the
    /// main hidden size; a generator reuses the same table.
    pub fn main_dims(&self) -> EncoderDims {
        EncoderDims {
            vocab: self.vocab_size,
            emb_dim: self.embedding_dim,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn_inner,
            layers: self.num_layers,
            k: self.max_relative_distance,
            max_len: self.max_len,
            attention: self.attention,
            rel_dim: self.hidden,
        }
    }

    /// Generator dimensions: width scaled by `generator_fraction` (round to
    /// nearest, at least one head), same depth and embedding size.
    pub fn generator_dims(&self) -> Result<EncoderDims> {
        let scale = |x: usize| ((x as f64) * self.generator_fraction).round() as usize;
        let hidden = scale(self.hidden).max(1);
        let heads = scale(self.heads).max(1);
        let ffn = scale(self.ffn_inner).max(1);
        if hidden % heads != 0 {
            return Err(Error::Config(format!(
                "generator hidden {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(EncoderDims {
            vocab: self.vocab_size,
            emb_dim: self.embedding_dim,
            hidden,
            heads,
            ffn,
            layers: self.num_layers,
            k: self.max_relative_distance,
            max_len: self.max_len,
            attention: self.attention,
            rel_dim: self.hidden,
        })
    }
}

/// Concrete sizes for one encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub k: usize,
    pub max_len: usize,
    pub attention: AttentionKind,
    /// Width of the shared relative-embedding table (main hidden size).
    pub rel_dim: usize,
}

impl EncoderDims {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Clamped relative-position bucket: 0 for i-j <= -k, 2k-1 for i-j >= k,
/// otherwise i-j+k. Output always lies in [0, 2k).
pub fn relative_distance(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(k > 0);
    let d = i as i64 - j as i64;
    let k = k as i64;
    if d <= -k {
        0
    } else if d >= k {
        (2 * k - 1) as usize
    } else {
        (d + k) as usize
    }
}

/// Embedding tables that may be shared between two encoders.
#[derive(Debug, Clone)]
pub struct SharedEmbeddings {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: Option<ParamId>,
    pub rel_table: Option<ParamId>,
}

impl SharedEmbeddings {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<SharedEmbeddings> {
        let e = cfg.embedding_dim;
        let token = store.insert(
            "emb.token",
            Tensor::truncated_normal(&[cfg.vocab_size, e], INIT_STD, rng),
            true,
        )?;
        let segment = store.insert(
            "emb.segment",
            Tensor::truncated_normal(&[2, e], INIT_STD, rng),
            true,
        )?;
        let (position, rel_table) = match cfg.attention {
            AttentionKind::Absolute => (
                Some(store.insert(
                    "emb.position",
                    Tensor::truncated_normal(&[cfg.max_len, e], INIT_STD, rng),
                    true,
                )?),
                None,
            ),
            AttentionKind::Disentangled => (
                None,
                Some(store.insert(
                    "emb.rel_table",
                    Tensor::truncated_normal(
                        &[2 * cfg.max_relative_distance, cfg.hidden],
                        INIT_STD,
                        rng,
                    ),
                    true,
                )?),
            ),
        };
        Ok(SharedEmbeddings {
            token,
            segment,
            position,
            rel_table,
        })
    }
}

/// Relative-position projections, present only for disentangled attention.
#[derive(Debug, Clone)]
pub struct PosProj {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub pos: Option<PosProj>,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub dims: EncoderDims,
    pub token_emb: ParamId,
    pub segment_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    pub rel_table: Option<ParamId>,
    pub emb_proj_w: ParamId,
    pub emb_proj_b: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerWeights>,
}

fn weight<S: Scalar>(
    store: &mut ParamStore<S>,
    name: String,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<ParamId> {
    store.insert(name, Tensor::truncated_normal(shape, INIT_STD, rng), true)
}

fn bias<S: Scalar>(store: &mut ParamStore<S>, name: String, n: usize) -> Result<ParamId> {
    store.insert(name, Tensor::zeros(&[n]), false)
}

impl EncoderWeights {
    /// Creates all stack parameters under `prefix` (e.g. "enc" or "gen"),
    /// referencing the given shared embedding tables.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        dims: EncoderDims,
        shared: &SharedEmbeddings,
        rng: &mut Rng,
    ) -> Result<EncoderWeights> {
        let h = dims.hidden;
        let emb_proj_w = weight(store, format!("{prefix}.emb_proj.w"), &[dims.emb_dim, h], rng)?;
        let emb_proj_b = bias(store, format!("{prefix}.emb_proj.b"), h)?;
        let emb_ln_g = store.insert(format!("{prefix}.emb_ln.g"), Tensor::ones(&[h]), false)?;
        let emb_ln_b = bias(store, format!("{prefix}.emb_ln.b"), h)?;
        let mut layers = Vec::with_capacity(dims.layers);
        for li in 0..dims.layers {
            let p = format!("{prefix}.layer{li}");
            let pos = match dims.attention {
                AttentionKind::Absolute => None,
                AttentionKind::Disentangled => Some(PosProj {
                    q_w: weight(store, format!("{p}.attn.pos_q.w"), &[dims.rel_dim, h], rng)?,
                    q_b: bias(store, format!("{p}.attn.pos_q.b"), h)?,
                    k_w: weight(store, format!("{p}.attn.pos_k.w"), &[dims.rel_dim, h], rng)?,
                    k_b: bias(store, format!("{p}.attn.pos_k.b"), h)?,
                }),
            };
            layers.push(LayerWeights {
                q_w: weight(store, format!("{p}.attn.q.w"), &[h, h], rng)?,
                q_b: bias(store, format!("{p}.attn.q.b"), h)?,
                k_w: weight(store, format!("{p}.attn.k.w"), &[h, h], rng)?,
                k_b: bias(store, format!("{p}.attn.k.b"), h)?,
                v_w: weight(store, format!("{p}.attn.v.w"), &[h, h], rng)?,
                v_b: bias(store, format!("{p}.attn.v.b"), h)?,
                o_w: weight(store, format!("{p}.attn.o.w"), &[h, h], rng)?,
                o_b: bias(store, format!("{p}.attn.o.b"), h)?,
                pos,
                ln1_g: store.insert(format!("{p}.ln1.g"), Tensor::ones(&[h]), false)?,
                ln1_b: bias(store, format!("{p}.ln1.b"), h)?,
                ffn1_w: weight(store, format!("{p}.ffn1.w"), &[h, dims.ffn], rng)?,
                ffn1_b: bias(store, format!("{p}.ffn1.b"), dims.ffn)?,
                ffn2_w: weight(store, format!("{p}.ffn2.w"), &[dims.ffn, h], rng)?,
                ffn2_b: bias(store, format!("{p}.ffn2.b"), h)?,
                ln2_g: store.insert(format!("{p}.ln2.g"), Tensor::ones(&[h]), false)?,
                ln2_b: bias(store, format!("{p}.ln2.b"), h)?,
            });
        }
        Ok(EncoderWeights {
            dims,
            token_emb: shared.token,
            segment_emb: shared.segment,
            pos_emb: shared.position,
            rel_table: shared.rel_table,
            emb_proj_w,
            emb_proj_b,
            emb_ln_g,
            emb_ln_b,
            layers,
        })
    }
}

/// `x @ w + b` with the bias broadcast over rows.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn maybe_dropout<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    p: f64,
    rng: &mut Option<&mut Rng>,
) -> Result<Var> {
    if p == 0.0 {
        return Ok(x);
    }
    match rng {
        Some(r) => Ok(g.dropout(x, p, r)),
        None => Err(Error::Config("dropout requires an rng".into())),
    }
}

/// Full encoder stack: factorized embeddings, `layers` attention blocks,
/// output `[batch, seq_len, hidden]`. With `dropout > 0` an rng must be
/// supplied; evaluation passes 0.
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &[Var],
    w: &EncoderWeights,
    batch: &TokenBatch,
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    batch.validate()?;
    let (b, l) = (batch.batch, batch.seq_len);
    if l > w.dims.max_len {
        return Err(Error::Config(format!(
            "sequence length {l} exceeds model max {}",
            w.dims.max_len
        )));
    }
    let heads = w.dims.heads;
    let dh = w.dims.head_dim();
    let h = w.dims.hidden;

    // Embedding block: token + segment (+ absolute position) at emb_dim,
    // projected to hidden, then layer norm.
    let tok = g.embedding(vars[w.token_emb.0], &batch.ids)?;
    let seg_ids: Vec<usize> = batch.segment_ids.iter().map(|&s| s as usize).collect();
    let seg = g.embedding(vars[w.segment_emb.0], &seg_ids)?;
    let mut x = g.add(tok, seg)?;
    if let Some(pid) = w.pos_emb {
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos = g.embedding(vars[pid.0], &pos_ids)?;
        x = g.add(x, pos)?;
    }
    let x = linear(g, x, vars[w.emb_proj_w.0], vars[w.emb_proj_b.0])?;
    let x = g.layer_norm(x, vars[w.emb_ln_g.0], vars[w.emb_ln_b.0], LN_EPS)?;
    let mut x = maybe_dropout(g, x, dropout, &mut rng)?;

    // Relative-position machinery shared by all layers of this forward pass.
    let disentangled = w.dims.attention == AttentionKind::Disentangled;
    let (idx_c2p, idx_p2c) = if disentangled {
        let k = w.dims.k;
        let c2p: Vec<Vec<usize>> = (0..l)
            .map(|i| (0..l).map(|j| relative_distance(i, j, k)).collect())
            .collect();
        let p2c: Vec<Vec<usize>> = (0..l)
            .map(|j| (0..l).map(|i| relative_distance(j, i, k)).collect())
            .collect();
        (c2p, p2c)
    } else {
        (Vec::new(), Vec::new())
    };
    let scale = if disentangled {
        1.0 / ((3 * dh) as f64).sqrt()
    } else {
        1.0 / (dh as f64).sqrt()
    };
    let valid = batch.attention_valid(heads);

    for layer in &w.layers {
        // Per-head projections [b, heads, l, dh].
        let split = |g: &mut Graph<S>, y: Var| -> Result<Var> {
            let y = g.reshape(y, vec![b, l, heads, dh])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let qc = linear(g, x, vars[layer.q_w.0], vars[layer.q_b.0])?;
        let qc = split(g, qc)?;
        let kc = linear(g, x, vars[layer.k_w.0], vars[layer.k_b.0])?;
        let kc = split(g, kc)?;
        let vc = linear(g, x, vars[layer.v_w.0], vars[layer.v_b.0])?;
        let vc = split(g, vc)?;

        let mut scores = g.matmul_nt(qc, kc)?; // content-to-content [b, heads, l, l]
        if let (Some(pos), Some(rel)) = (&layer.pos, w.rel_table) {
            // Project the shared table into this stack's per-head key/query
            // spaces: [2k, rel_dim] -> [heads, 2k, dh].
            let split_rel = |g: &mut Graph<S>, y: Var| -> Result<Var> {
                let y = g.reshape(y, vec![2 * w.dims.k, heads, dh])?;
                g.permute(y, &[1, 0, 2])
            };
            let kr = linear(g, vars[rel.0], vars[pos.k_w.0], vars[pos.k_b.0])?;
            let kr = split_rel(g, kr)?;
            let qr = linear(g, vars[rel.0], vars[pos.q_w.0], vars[pos.q_b.0])?;
            let qr = split_rel(g, qr)?;
            // Content-to-position: query i against relative key delta(i, j).
            let c2p_all = g.matmul_nt(qc, kr)?; // [b, heads, l, 2k]
            let c2p = g.gather_last(c2p_all, &idx_c2p)?;
            scores = g.add(scores, c2p)?;
            // Position-to-content: key j against relative query delta(j, i),
            // gathered per key row then transposed back to [.., i, j].
            let p2c_all = g.matmul_nt(kc, qr)?; // [b, heads, l, 2k]
            let p2c = g.gather_last(p2c_all, &idx_p2c)?;
            let p2c = g.permute(p2c, &[0, 1, 3, 2])?;
            scores = g.add(scores, p2c)?;
        }
        let scores = g.scale(scores, scale);
        let probs = g.masked_softmax(scores, valid.clone())?;
        let probs = maybe_dropout(g, probs, dropout, &mut rng)?;
        let ctx = g.matmul(probs, vc)?; // [b, heads, l, dh]
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b * l, h])?;
        let attn_out = linear(g, ctx, vars[layer.o_w.0], vars[layer.o_b.0])?;
        let res = g.add(x, attn_out)?;
        let x1 = g.layer_norm(res, vars[layer.ln1_g.0], vars[layer.ln1_b.0], LN_EPS)?;

        let f = linear(g, x1, vars[layer.ffn1_w.0], vars[layer.ffn1_b.0])?;
        let f = g.gelu(f);
        let f = maybe_dropout(g, f, dropout, &mut rng)?;
        let f = linear(g, f, vars[layer.ffn2_w.0], vars[layer.ffn2_b.0])?;
        let res2 = g.add(x1, f)?;
        x = g.layer_norm(res2, vars[layer.ln2_g.0], vars[layer.ln2_b.0], LN_EPS)?;
    }
    g.reshape(x, vec![b, l, h])
}

/// Analytic parameter count of the main network (embedding block, main
/// encoder stack, and its objective head). For the electra objective this is
/// the discriminator side; the generator is excluded. Must agree exactly
/// with enumerating the corresponding tensors of a constructed model.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    let v = cfg.vocab_size as u64;
    let e = cfg.embedding_dim as u64;
    let h = cfg.hidden as u64;
    let f = cfg.ffn_inner as u64;
    let n = cfg.num_layers as u64;
    let mut total = v * e + 2 * e; // token + segment tables
    total += match cfg.attention {
        AttentionKind::Absolute => cfg.max_len as u64 * e,
        AttentionKind::Disentangled => 2 * cfg.max_relative_distance as u64 * h,
    };
    total += e * h + h; // embedding projection
    total += 2 * h; // embedding layer norm
    let mut per_layer = 4 * (h * h + h); // Q, K, V, O
    if cfg.attention == AttentionKind::Disentangled {
        per_layer += 2 * (h * h + h); // pos_q, pos_k over the shared table
    }
    per_layer += h * f + f + f * h + h; // FFN
    per_layer += 4 * h; // two layer norms
    total += n * per_layer;
    total += match cfg.objective {
        // MLM head: hidden->emb projection, layer norm, tied output bias.
        ObjectiveKind::Mlm => h * e + e + 2 * e + v,
        // RTD head: hidden->hidden dense + scalar logit.
        ObjectiveKind::Electra => h * h + h + h + 1,
    };
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenBatch;
    use crate::tokenizer::{encode_single, Vocab, SPECIAL_TOKENS};

    fn vocab() -> Vocab {
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in ["a", "b", "c", "d", "e", "f", "g"] {
            toks.push(w.into());
        }
        Vocab::from_tokens(toks).unwrap()
    }

    #[test]
    fn relative_distance_buckets() {
        // k = 2: buckets cover distances [-2, 2) shifted by k.
        assert_eq!(relative_distance(0, 0, 2), 2);
        assert_eq!(relative_distance(1, 0, 2), 3);
        assert_eq!(relative_distance(0, 1, 2), 1);
        assert_eq!(relative_distance(0, 2, 2), 0);
        assert_eq!(relative_distance(0, 9, 2), 0, "far-left clamps to 0");
        assert_eq!(relative_distance(2, 0, 2), 3, "far-right clamps to 2k-1");
        assert_eq!(relative_distance(9, 0, 2), 3);
        for i in 0..20 {
            for j in 0..20 {
                let d = relative_distance(i, j, 4);
                assert!(d < 8);
            }
        }
        // k = 1 collapses everything into two buckets.
        assert_eq!(relative_distance(5, 5, 1), 1);
        assert_eq!(relative_distance(5, 6, 1), 0);
        assert_eq!(relative_distance(6, 5, 1), 1);
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig::toy(Variant::Bert, 100);
        cfg.validate().unwrap();
        cfg.heads = 3;
        assert!(cfg.validate().is_err(), "64 not divisible by 3");
        let mut cfg = ModelConfig::toy(Variant::Electra, 100);
        cfg.generator_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy(Variant::Bert, 100);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy(Variant::Bert, 100);
        cfg.vocab_size = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generator_dims_scale_by_fraction() {
        let cfg = ModelConfig::small(Variant::ElectraDeberta, 30522);
        let g = cfg.generator_dims().unwrap();
        assert_eq!((g.hidden, g.heads, g.ffn), (64, 1, 256));
        assert_eq!(g.layers, 12);
        assert_eq!(g.emb_dim, 128);
        assert_eq!(g.rel_dim, 256, "generator reads the main-width table");
        let toy = ModelConfig::toy(Variant::Electra, 2000);
        let g = toy.generator_dims().unwrap();
        assert_eq!((g.hidden, g.heads, g.ffn), (16, 1, 64));
    }

    #[test]
    fn parameter_counts_of_benchmark_models() {
        // Frozen analytic totals; windows follow the published model sizes.
        let bert = count_parameters(&ModelConfig::small(Variant::Bert, 30522));
        assert_eq!(bert, 13_497_786);
        assert!((12_500_000..=15_500_000).contains(&bert));
        let deberta = count_parameters(&ModelConfig::small(Variant::Deberta, 30522));
        assert_eq!(deberta, 15_093_178);
        let electra = count_parameters(&ModelConfig::small(Variant::Electra, 30522));
        assert_eq!(electra, 13_500_161);
        let ed = count_parameters(&ModelConfig::small(Variant::ElectraDeberta, 30522));
        assert_eq!(ed, 15_095_553);
        assert!((13_500_000..=16_500_000).contains(&ed));
    }

    fn forward_once(variant: Variant, seed: u64) -> Vec<f64> {
        let v = vocab();
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_inner: 16,
            embedding_dim: 6,
            max_len: 16,
            max_relative_distance: 3,
            ..ModelConfig::toy(variant, v.size())
        };
        cfg.validate().unwrap();
        let mut rng = Rng::new(seed);
        let mut store: ParamStore<f64> = ParamStore::new();
        let shared = SharedEmbeddings::init(&mut store, &cfg, &mut rng).unwrap();
        let w = EncoderWeights::init(&mut store, "enc", cfg.main_dims(), &shared, &mut rng).unwrap();
        let seqs = vec![
            encode_single("a b c", &v, 16),
            encode_single("d e f g a b", &v, 16),
        ];
        let batch = TokenBatch::from_sequences(&seqs);
        let mut g = Graph::new();
        let vars = store.load_vars(&mut g, false);
        let out = encoder_forward(&mut g, &vars, &w, &batch, 0.0, None).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 8, 8]);
        g.value(out).data().to_vec()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        for variant in [Variant::Bert, Variant::Deberta] {
            let a = forward_once(variant, 9);
            let b = forward_once(variant, 9);
            assert_eq!(a, b, "same seed must reproduce bit-exactly");
            assert!(a.iter().all(|x| x.is_finite()));
            let c = forward_once(variant, 10);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn pad_positions_do_not_leak_into_real_outputs() {
        let v = vocab();
        let cfg = ModelConfig {
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn_inner: 16,
            embedding_dim: 6,
            max_len: 16,
            max_relative_distance: 3,
            ..ModelConfig::toy(Variant::Deberta, v.size())
        };
        let mut rng = Rng::new(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let shared = SharedEmbeddings::init(&mut store, &cfg, &mut rng).unwrap();
        let w = EncoderWeights::init(&mut store, "enc", cfg.main_dims(), &shared, &mut rng).unwrap();
        let seqs = vec![encode_single("a b", &v, 16), encode_single("c d e f g", &v, 16)];
        let batch = TokenBatch::from_sequences(&seqs);
        let run = |batch: &TokenBatch| {
            let mut g = Graph::new();
            let vars = store.load_vars(&mut g, false);
            let out = encoder_forward(&mut g, &vars, &w, batch, 0.0, None).unwrap();
            g.value(out).clone()
        };
        let base = run(&batch);
        let mut altered = batch.clone();
        // Overwrite a pad slot in row 0 with an arbitrary in-vocab id.
        let pad_slot = batch.lens[0] + 1;
        assert!(!altered.pad_mask[pad_slot]);
        altered.ids[pad_slot] = 7;
        let changed = run(&altered);
        let h = 8;
        for b in 0..2 {
            for t in 0..batch.lens[b] {
                for d in 0..h {
                    let i = (b * batch.seq_len + t) * h + d;
                    assert_eq!(
                        base.data()[i],
                        changed.data()[i],
                        "real position ({b},{t}) must not depend on pad content"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_rejects_overlong_batch() {
        let v = vocab();
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn_inner: 16,
            embedding_dim: 6,
            max_len: 4,
            max_relative_distance: 2,
            ..ModelConfig::toy(Variant::Bert, v.size())
        };
        let mut rng = Rng::new(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let shared = SharedEmbeddings::init(&mut store, &cfg, &mut rng).unwrap();
        let w = EncoderWeights::init(&mut store, "enc", cfg.main_dims(), &shared, &mut rng).unwrap();
        let seqs = vec![encode_single("a b c d e f g", &v, 8)];
        let batch = TokenBatch::from_sequences(&seqs);
        let mut g = Graph::new();
        let vars = store.load_vars(&mut g, false);
        assert!(encoder_forward(&mut g, &vars, &w, &batch, 0.0, None).is_err());
    }

    #[test]
    fn dropout_requires_rng_and_perturbs_training_forward() {
        let v = vocab();
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn_inner: 16,
            embedding_dim: 6,
            max_len: 8,
            max_relative_distance: 2,
            ..ModelConfig::toy(Variant::Bert, v.size())
        };
        let mut rng = Rng::new(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        let shared = SharedEmbeddings::init(&mut store, &cfg, &mut rng).unwrap();
        let w = EncoderWeights::init(&mut store, "enc", cfg.main_dims(), &shared, &mut rng).unwrap();
        let batch = TokenBatch::from_sequences(&[encode_single("a b c", &v, 8)]);
        let mut g = Graph::new();
        let vars = store.load_vars(&mut g, false);
        assert!(encoder_forward(&mut g, &vars, &w, &batch, 0.5, None).is_err());
        let mut d1 = Rng::new(1);
        let mut g1 = Graph::new();
        let vars1 = store.load_vars(&mut g1, false);
        let o1 = encoder_forward(&mut g1, &vars1, &w, &batch, 0.5, Some(&mut d1)).unwrap();
        let mut d2 = Rng::new(2);
        let mut g2 = Graph::new();
        let vars2 = store.load_vars(&mut g2, false);
        let o2 = encoder_forward(&mut g2, &vars2, &w, &batch, 0.5, Some(&mut d2)).unwrap();
        assert_ne!(g1.value(o1).data(), g2.value(o2).data());
    }
}
