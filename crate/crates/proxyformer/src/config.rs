//! Run configuration: one JSON document drives data generation, training,
//! evaluation, and inference. Unknown fields are rejected so typos surface
//! as usage errors naming the field. The canonical-JSON SHA-256 of the
//! whole document is embedded in datasets, checkpoints, and reports;
//! artifacts produced under different configurations refuse to mix.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmie::PoolKind;
use crate::error::{Error, Result};
use crate::heads::JointCombine;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared channel width of text, video, and proxy streams.
    pub c: usize,
    /// Interaction stages.
    pub k: usize,
    /// Proxy queries per frame.
    pub n: usize,
    pub heads: usize,
    /// Mask-feature channels.
    pub c_seg: usize,
    pub pool: PoolChoice,
    /// Step 4 reads the stage-updated video stream instead of the input.
    pub v2p_reads_updated: bool,
    /// Step 2 enabled; the ablation harness turns it off.
    pub use_p2v: bool,
    pub joint_combine: CombineChoice,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 64,
            k: 4,
            n: 5,
            heads: 8,
            c_seg: 8,
            pool: PoolChoice::Mean,
            v2p_reads_updated: false,
            use_p2v: true,
            joint_combine: CombineChoice::Concat,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PoolChoice {
    Mean,
    Max,
}

impl From<PoolChoice> for PoolKind {
    fn from(p: PoolChoice) -> PoolKind {
        match p {
            PoolChoice::Mean => PoolKind::Mean,
            PoolChoice::Max => PoolKind::Max,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum CombineChoice {
    Concat,
    Sum,
}

impl From<CombineChoice> for JointCombine {
    fn from(c: CombineChoice) -> JointCombine {
        match c {
            CombineChoice::Concat => JointCombine::Concat,
            CombineChoice::Sum => JointCombine::Sum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Videos per optimization step.
    pub batch: usize,
    pub seed: u64,
    /// Clip window length; every training sample uses exactly this many
    /// frames.
    pub omega: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            steps: 5000,
            batch: 2,
            seed: 42,
            omega: 8,
        }
    }
}

/// Loss term coefficients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub jsc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            dice: 5.0,
            focal: 2.0,
            jsc: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.cls", self.cls),
            ("loss.l1", self.l1),
            ("loss.giou", self.giou),
            ("loss.dice", self.dice),
            ("loss.focal", self.focal),
            ("loss.jsc", self.jsc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: String,
    /// Square frame size in pixels.
    pub canvas: usize,
    /// Frames per video.
    pub t: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Fraction of samples drawn with motion-disambiguated (hard) scenes.
    pub hard_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: "data".to_string(),
            canvas: 64,
            t: 8,
            train_count: 200,
            val_count: 50,
            hard_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
    /// Precision@K thresholds.
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "val".to_string(),
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a JSON document; defaults fill any missing section. Syntax
    /// errors are reported with their byte offset, field errors with the
    /// field path.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Usage(format!(
                "config parse error at line {}, column {} (byte offset ~{}): {}",
                e.line(),
                e.column(),
                byte_offset(text, e.line(), e.column()),
                e
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.c == 0 || m.c % 4 != 0 {
            return Err(Error::Config(format!(
                "model.c must be a positive multiple of 4, got {}",
                m.c
            )));
        }
        if m.heads == 0 || m.c % m.heads != 0 {
            return Err(Error::Config(format!(
                "model.heads must divide model.c ({} / {})",
                m.c, m.heads
            )));
        }
        if m.k == 0 {
            return Err(Error::Config("model.k must be at least 1".to_string()));
        }
        if m.n == 0 {
            return Err(Error::Config("model.n must be at least 1".to_string()));
        }
        if m.c_seg == 0 {
            return Err(Error::Config("model.c_seg must be at least 1".to_string()));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".to_string()));
        }
        if self.train.omega == 0 {
            return Err(Error::Config("train.omega must be at least 1".to_string()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config(format!(
                "train.lr must be positive and finite, got {}",
                self.train.lr
            )));
        }
        let d = &self.data;
        if d.canvas < 32 {
            return Err(Error::Config(format!(
                "data.canvas must be at least 32, got {}",
                d.canvas
            )));
        }
        if d.t == 0 {
            return Err(Error::Config("data.t must be at least 1".to_string()));
        }
        if d.t != self.train.omega {
            return Err(Error::Config(format!(
                "train.omega ({}) must equal data.t ({}); mixed window lengths are unsupported",
                self.train.omega, d.t
            )));
        }
        if !(0.0..=1.0).contains(&d.hard_fraction) {
            return Err(Error::Config(format!(
                "data.hard_fraction must lie in [0, 1], got {}",
                d.hard_fraction
            )));
        }
        for k in &self.eval.thresholds {
            if !(0.0..=1.0).contains(k) {
                return Err(Error::Config(format!(
                    "eval.thresholds entries must lie in [0, 1], got {k}"
                )));
            }
        }
        self.loss.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the model, train, and data
    /// sections, hex-encoded. Field order is the struct declaration
    /// order, so the hash is stable. The eval section is excluded: it
    /// cannot change parameter shapes or dataset content, and including
    /// it would block evaluating one checkpoint on another split.
    pub fn hash(&self) -> String {
        let text = format!(
            "{}\n{}\n{}",
            serde_json::to_string(&self.model).expect("config serializes"),
            serde_json::to_string(&self.train).expect("config serializes"),
            serde_json::to_string(&self.data).expect("config serializes"),
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.k, 4);
        assert_eq!(cfg.model.n, 5);
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.model.c, 64);
        assert_eq!(cfg.model.c_seg, 8);
        assert_eq!(cfg.loss.cls, 2.0);
        assert_eq!(cfg.loss.l1, 5.0);
        assert_eq!(cfg.loss.giou, 2.0);
        assert_eq!(cfg.loss.dice, 5.0);
        assert_eq!(cfg.loss.focal, 2.0);
        assert_eq!(cfg.loss.jsc, 5.0);
        assert_eq!(cfg.train.omega, 8);
        assert_eq!(cfg.data.train_count + cfg.data.val_count, 250);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn empty_document_gets_full_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.model.k = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn malformed_json_names_the_offset() {
        let err = RunConfig::from_json("{\"model\": {").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("byte offset"), "{msg}");
        matches!(err, Error::Usage(_));
    }

    #[test]
    fn unknown_fields_are_usage_errors_naming_the_field() {
        let err = RunConfig::from_json("{\"model\": {\"depth\": 3}}").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("depth"), "{msg}");
    }

    #[test]
    fn invalid_values_are_rejected_with_field_paths() {
        let mut cfg = RunConfig::default();
        cfg.model.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.canvas = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.loss.dice = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.omega = 4;
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err}").contains("omega"));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }
}
