//! Run configuration assembled from documented `key = value` files and
//! command-line flags, with the command line taking precedence.

use std::path::PathBuf;

use smallbench_core::data::IngestMode;
use smallbench_core::encoder::Variant;
use smallbench_core::{Error, Result};

/// Environment variable consulted for the GLUE data directory when neither
/// the config file nor the command line names one.
pub const DATA_DIR_ENV: &str = "SMALLBENCH_DATA_DIR";

/// Every key a config file may set, with its meaning. The same names work
/// as `--key value` flags where the relevant subcommand accepts them.
pub const DOCUMENTED_KEYS: &[(&str, &str)] = &[
    ("model", "model variant: bert | deberta | electra | electra-deberta"),
    ("corpus", "path to a plain-text pretraining corpus"),
    ("vocab", "path to a vocabulary file"),
    ("glue-dir", "directory holding one subdirectory of TSVs per task"),
    ("checkpoint", "path to a model checkpoint"),
    ("out-dir", "directory for checkpoints, logs, and reports"),
    ("seed", "root random seed (unsigned integer)"),
    ("steps", "total pretraining optimization steps"),
    ("warmup-steps", "linear warmup steps (default: a tenth of steps)"),
    ("peak-lr", "peak learning rate for pretraining"),
    ("batch-size", "pretraining batch size"),
    ("mode", "corpus ingestion: pair | contiguous"),
    ("vocab-size", "target vocabulary size for build-vocab"),
    ("runs-per-task", "fine-tuning runs per task during bench"),
    ("jobs", "fine-tuning parallelism cap (runs are sequential here)"),
    ("toy", "true | false: apply the minutes-scale preset"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Variant,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub glue_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub steps: Option<u64>,
    pub warmup_steps: Option<u64>,
    pub peak_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub mode: IngestMode,
    pub vocab_size: Option<usize>,
    pub runs_per_task: usize,
    pub jobs: usize,
    pub toy: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: Variant::ElectraDeberta,
            corpus: None,
            vocab: None,
            glue_dir: None,
            checkpoint: None,
            out_dir: None,
            seed: 42,
            steps: None,
            warmup_steps: None,
            peak_lr: None,
            batch_size: None,
            mode: IngestMode::Pair,
            vocab_size: None,
            runs_per_task: 5,
            jobs: 1,
            toy: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(loc: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{loc}: cannot parse {value:?} as a number for {key}")))
}

impl RunConfig {
    /// Applies one setting. `loc` names the origin for error messages
    /// (`file:line` or a flag name).
    pub fn apply(&mut self, key: &str, value: &str, loc: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = Variant::parse(v)?,
            "corpus" => self.corpus = Some(PathBuf::from(v)),
            "vocab" => self.vocab = Some(PathBuf::from(v)),
            "glue-dir" => self.glue_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "out-dir" => self.out_dir = Some(PathBuf::from(v)),
            "seed" => self.seed = parse_num(loc, key, v)?,
            "steps" => self.steps = Some(parse_num(loc, key, v)?),
            "warmup-steps" => self.warmup_steps = Some(parse_num(loc, key, v)?),
            "peak-lr" => {
                let lr: f64 = v.parse().map_err(|_| {
                    Error::Config(format!("{loc}: cannot parse {v:?} as a number for peak-lr"))
                })?;
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::Config(format!("{loc}: peak-lr must be positive")));
                }
                self.peak_lr = Some(lr);
            }
            "batch-size" => self.batch_size = Some(parse_num(loc, key, v)?),
            "mode" => self.mode = IngestMode::parse(v)?,
            "vocab-size" => self.vocab_size = Some(parse_num(loc, key, v)?),
            "runs-per-task" => self.runs_per_task = parse_num(loc, key, v)?,
            "jobs" => self.jobs = parse_num(loc, key, v)?,
            "toy" => {
                self.toy = match v {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "{loc}: toy must be true or false, got {v:?}"
                        )))
                    }
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "{loc}: unknown key {key:?}; known keys: {}",
                    DOCUMENTED_KEYS
                        .iter()
                        .map(|(k, _)| *k)
                        .collect::<Vec<_>>()
                        .join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs_per_task == 0 {
            return Err(Error::Config("runs-per-task must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch-size must be at least 1".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    /// The GLUE directory: explicit setting, else the environment fallback.
    pub fn glue_dir_or(&self, env: Option<&str>) -> Result<PathBuf> {
        if let Some(d) = &self.glue_dir {
            return Ok(d.clone());
        }
        if let Some(d) = env {
            if !d.is_empty() {
                return Ok(PathBuf::from(d));
            }
        }
        Err(Error::Config(format!(
            "no GLUE directory: pass --glue-dir, set glue-dir in the config file, or export {DATA_DIR_ENV}"
        )))
    }
}

/// Builds a [`RunConfig`] from an optional config file plus command-line
/// overrides, applied in that order so the command line wins.
///
/// File grammar: UTF-8 lines of `key = value`; blank lines and lines whose
/// first non-space character is `#` are ignored. Unknown keys and malformed
/// lines are rejected with the file name and line number.
pub fn parse_config(
    file: Option<(&str, &str)>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some((source, text)) = file {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = format!("{source}:{}", idx + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{loc}: expected key = value")))?;
            cfg.apply(key.trim(), value, &loc)?;
        }
    }
    for (key, value) in overrides {
        cfg.apply(key, value, &format!("--{key}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
