//! JSON run configuration for the command line.
//!
//! Every section and key is optional; missing keys take the defaults below,
//! unknown keys are rejected with their path.
//!
//! ```json
//! {
//!   "tensor":    { "precision": "f32", "threads": 1 },
//!   "attention": { "channels": 16, "heads": 2, "k": 3, "norm_eps": 1e-5 },
//!   "backbone":  { "channels": [8, 16, 16, 16, 16], "kernels": [4, 4, 3, 3, 3],
//!                  "strides": [2, 2, 1, 1, 1], "pads": [1, 1, 0, 1, 1] },
//!   "head":      { "lambda1": 1, "lambda2": 1, "lambda3": 1, "center_radius": 1.5 },
//!   "input":     { "template_size": 32, "search_size": 64 },
//!   "harness":   { "seed": 0, "train": { "steps": 300, "lr": 0.005, "momentum": 0.9 },
//!                  "track": { "seq_seed": 1000, "frames": 10 } },
//!   "flags":     { "paper_literal_residual": false }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::{SequenceConfig, TrainConfig};
use crate::head::HeadConfig;
use crate::model::{AttentionSection, Flags, InputSection, ModelConfig};
use crate::tensor::DType;

/// Overrides `tensor.threads`.
pub const THREADS_ENV: &str = "LPAT_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorSection {
    /// Storage and arithmetic type for training and tracking.
    pub precision: DType,
    /// Worker threads; results do not depend on it.
    pub threads: usize,
}

impl Default for TensorSection {
    fn default() -> Self {
        TensorSection {
            precision: DType::F32,
            threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSection {
    pub seq_seed: u64,
    pub frames: usize,
    /// Sequence generator; defaults to a static noiseless object.
    pub sequence: SequenceConfig,
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection {
            seq_seed: 1000,
            frames: 10,
            sequence: SequenceConfig::static_clean(10),
        }
    }
}

impl TrackSection {
    pub fn sequence(&self) -> SequenceConfig {
        SequenceConfig {
            frames: self.frames,
            ..self.sequence
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessSection {
    pub seed: u64,
    pub train: TrainConfig,
    pub track: TrackSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tensor: TensorSection,
    pub attention: AttentionSection,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub input: InputSection,
    pub harness: HarnessSection,
    pub flags: Flags,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            attention: self.attention,
            backbone: self.backbone.clone(),
            head: self.head,
            input: self.input,
            flags: self.flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.harness.train.validate()?;
        self.harness.track.sequence().validate()?;
        if self.harness.track.frames < 2 {
            return Err(Error::config("harness.track.frames must be at least 2"));
        }
        Ok(())
    }

    /// `LPAT_THREADS` if set, else `tensor.threads`.
    pub fn threads(&self) -> Result<usize> {
        threads_override(
            std::env::var(THREADS_ENV).ok().as_deref(),
            self.tensor.threads,
        )
    }
}

fn threads_override(env: Option<&str>, configured: usize) -> Result<usize> {
    let n = match env {
        Some(s) => s.trim().parse().map_err(|_| {
            Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))
        })?,
        None => configured,
    };
    if n == 0 {
        return Err(Error::config("thread count must be positive"));
    }
    Ok(n)
}

/// Sizes the global rayon pool once per process; later calls are no-ops.
pub fn init_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
}
