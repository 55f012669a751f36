//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "SBN1" | version u32 | config count u32
//!   then per entry: key len u32, key utf-8, value len u32, value utf-8
//! tensor count u32
//!   then per tensor: name len u32, name utf-8, dtype u8 (0 = f32),
//!                    rank u32, extents u64 x rank, payload f32 x numel
//! checksum u64 (FNV-1a over every preceding byte)
//! ```
//! Saving a loaded checkpoint reproduces the original file byte for byte:
//! entry order is preserved and payloads round-trip at full precision.

use std::path::Path;

use crate::encoder::{AttentionKind, ModelConfig, ObjectiveKind};
use crate::error::{Error, Result};
use crate::objectives::Model;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SBN1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// FNV-1a 64-bit running hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// An ordered key/value config record plus named f32 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            config: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks config key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("checkpoint key {key:?} has bad value {raw:?}")))
    }

    /// Sets or replaces a config entry, keeping first-insertion order.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.config.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.config.push((key, value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (k, v) in &self.config {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Writes atomically: a temp file in the same directory, then a rename,
    /// so an interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        ));
        std::fs::write(&tmp, &bytes)
            .map_err(|e| Error::checkpoint(path, format!("write failed: {e}")))?;
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::checkpoint(path, format!("rename failed: {e}")))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fail = |reason: String| Err(Error::checkpoint(path, reason));
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return fail(format!("file too short ({} bytes)", bytes.len()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return fail(format!(
                "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            ));
        }
        let mut cur = Cursor {
            bytes: body,
            pos: 0,
            path,
        };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return fail(format!("bad magic {magic:?}"));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return fail(format!("unsupported version {version} (expected {VERSION})"));
        }
        let n_cfg = cur.u32("config count")? as usize;
        let mut config = Vec::with_capacity(n_cfg);
        for i in 0..n_cfg {
            let k = cur.string(&format!("config key {i}"))?;
            let v = cur.string(&format!("config value {i}"))?;
            config.push((k, v));
        }
        let n_tensors = cur.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for i in 0..n_tensors {
            let name = cur.string(&format!("tensor name {i}"))?;
            let dtype = cur.take(1, &format!("tensor {name:?} dtype"))?[0];
            if dtype != DTYPE_F32 {
                return fail(format!("tensor {name:?} has unknown dtype {dtype}"));
            }
            let rank = cur.u32(&format!("tensor {name:?} rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for d in 0..rank {
                let e = cur.u64(&format!("tensor {name:?} extent {d}"))?;
                shape.push(usize::try_from(e).map_err(|_| {
                    Error::checkpoint(path, format!("tensor {name:?} extent {e} overflows"))
                })?);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4, &format!("tensor {name:?} payload"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != body.len() {
            return fail(format!("{} trailing bytes after tensors", body.len() - cur.pos));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::checkpoint(path, format!("cannot read: {e}")))?;
        Self::from_bytes(&bytes, path)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(
                self.path,
                format!("truncated reading {what} at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::checkpoint(self.path, format!("{what} is not utf-8")))
    }
}

fn attention_tag(a: AttentionKind) -> &'static str {
    match a {
        AttentionKind::Absolute => "absolute",
        AttentionKind::Disentangled => "disentangled",
    }
}

fn objective_tag(o: ObjectiveKind) -> &'static str {
    match o {
        ObjectiveKind::Mlm => "mlm",
        ObjectiveKind::Electra => "electra",
    }
}

/// Serializes a model config into checkpoint entries under `model.*` keys.
pub fn config_to_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    let s = |v: String| v;
    vec![
        ("model.vocab_size".into(), s(cfg.vocab_size.to_string())),
        ("model.max_len".into(), s(cfg.max_len.to_string())),
        ("model.embedding_dim".into(), s(cfg.embedding_dim.to_string())),
        ("model.hidden".into(), s(cfg.hidden.to_string())),
        ("model.num_layers".into(), s(cfg.num_layers.to_string())),
        ("model.heads".into(), s(cfg.heads.to_string())),
        ("model.ffn_inner".into(), s(cfg.ffn_inner.to_string())),
        (
            "model.max_relative_distance".into(),
            s(cfg.max_relative_distance.to_string()),
        ),
        ("model.attention".into(), attention_tag(cfg.attention).into()),
        ("model.objective".into(), objective_tag(cfg.objective).into()),
        ("model.dropout".into(), s(cfg.dropout.to_string())),
        (
            "model.generator_fraction".into(),
            s(cfg.generator_fraction.to_string()),
        ),
        ("model.lambda_rtd".into(), s(cfg.lambda_rtd.to_string())),
    ]
}

/// Reconstructs a model config from checkpoint entries.
pub fn config_from_pairs(ck: &Checkpoint) -> Result<ModelConfig> {
    let attention = match ck.get("model.attention") {
        Some("absolute") => AttentionKind::Absolute,
        Some("disentangled") => AttentionKind::Disentangled,
        other => {
            return Err(Error::Config(format!(
                "checkpoint attention kind {other:?} unknown"
            )))
        }
    };
    let objective = match ck.get("model.objective") {
        Some("mlm") => ObjectiveKind::Mlm,
        Some("electra") => ObjectiveKind::Electra,
        other => {
            return Err(Error::Config(format!(
                "checkpoint objective {other:?} unknown"
            )))
        }
    };
    let cfg = ModelConfig {
        vocab_size: ck.get_parsed("model.vocab_size")?,
        max_len: ck.get_parsed("model.max_len")?,
        embedding_dim: ck.get_parsed("model.embedding_dim")?,
        hidden: ck.get_parsed("model.hidden")?,
        num_layers: ck.get_parsed("model.num_layers")?,
        heads: ck.get_parsed("model.heads")?,
        ffn_inner: ck.get_parsed("model.ffn_inner")?,
        max_relative_distance: ck.get_parsed("model.max_relative_distance")?,
        attention,
        objective,
        dropout: ck.get_parsed("model.dropout")?,
        generator_fraction: ck.get_parsed("model.generator_fraction")?,
        lambda_rtd: ck.get_parsed("model.lambda_rtd")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Snapshot of all model parameters plus its config. Training state is
/// appended by the caller via [`Checkpoint::set`] and extra tensors.
pub fn model_to_checkpoint<S: Scalar>(model: &Model<S>) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.config = config_to_pairs(&model.cfg);
    for (_, name, tensor) in model.store.iter() {
        ck.tensors.push((name.to_string(), tensor.cast::<f32>()));
    }
    ck
}

/// Rebuilds a model from a checkpoint: the structure comes from the stored
/// config, every parameter tensor is then overwritten from the file. Extra
/// tensors (e.g. optimizer state under `opt.*`) are ignored here.
pub fn model_from_checkpoint<S: Scalar>(ck: &Checkpoint) -> Result<Model<S>> {
    let cfg = config_from_pairs(ck)?;
    // The init RNG is immediately overwritten, any seed works.
    let mut rng = Rng::new(0);
    let mut model: Model<S> = Model::init(&cfg, &mut rng)?;
    let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let stored = ck.tensor(&name).ok_or_else(|| {
            Error::Config(format!("checkpoint lacks parameter tensor {name:?}"))
        })?;
        if stored.shape() != model.store.get(id).shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                stored.shape(),
                model.store.get(id).shape()
            )));
        }
        *model.store.get_mut(id) = stored.cast::<S>();
    }
    Ok(model)
}

/// Saves a training rng state as four hex words.
pub fn rng_to_pairs(prefix: &str, rng: &Rng) -> Vec<(String, String)> {
    rng.state()
        .iter()
        .enumerate()
        .map(|(i, w)| (format!("{prefix}.{i}"), format!("{w:#018x}")))
        .collect()
}

/// Restores an rng saved with [`rng_to_pairs`].
pub fn rng_from_pairs(ck: &Checkpoint, prefix: &str) -> Result<Rng> {
    let mut state = [0u64; 4];
    for (i, slot) in state.iter_mut().enumerate() {
        let key = format!("{prefix}.{i}");
        let raw = ck
            .get(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks rng key {key:?}")))?;
        let digits = raw.strip_prefix("0x").unwrap_or(raw);
        *slot = u64::from_str_radix(digits, 16)
            .map_err(|_| Error::Config(format!("bad rng word {raw:?} at {key:?}")))?;
    }
    Ok(Rng::from_state(state))
}
