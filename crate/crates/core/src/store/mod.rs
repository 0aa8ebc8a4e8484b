//! On-disk latent archive, split bookkeeping and the synthetic stand-in for
//! the labeled latent corpus.

mod archive;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use archive::{decode_tensor, encode_tensor, Archive, ClipRecord, LatentClip, Manifest, TENSOR_MAGIC, TENSOR_VERSION};
pub use split::build_manifest;
pub use synthetic::{generate_synthetic_dataset, synthesize_clip, SignalKind, SyntheticSpec};

/// Temporal compression of the video autoencoder.
pub const TEMPORAL_COMPRESSION: f64 = 4.0;
pub const CLIP_SECONDS: f64 = 10.0;

/// Latent frame count for a clip: `⌊seconds · fps / 4⌋`.
pub fn latent_temporal_len(fps: f64, seconds: f64) -> Result<usize> {
    if !fps.is_finite() || fps < 1.0 {
        return Err(Error::Config(format!("fps must be at least 1, got {fps}")));
    }
    if !seconds.is_finite() || seconds <= 0.0 {
        return Err(Error::Config(format!("clip length must be positive, got {seconds}")));
    }
    Ok((seconds * fps / TEMPORAL_COMPRESSION).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonViolating,
    Violating,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonViolating, Label::Violating];

    /// Output index of this class in the probe logits.
    pub fn index(self) -> usize {
        match self {
            Label::NonViolating => crate::probes::NON_VIOLATING,
            Label::Violating => crate::probes::VIOLATING,
        }
    }

    pub fn one_hot(self) -> [f32; 2] {
        let mut y = [0.0; 2];
        y[self.index()] = 1.0;
        y
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NonViolating => "non_violating",
            Label::Violating => "violating",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
