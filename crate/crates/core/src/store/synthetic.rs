use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Archive, Label, LatentClip, Manifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Constant offset on the signal channels.
    ChannelMeanShift,
    /// `amplitude · sin(2π t / T + φ)` on the signal channels, φ per clip.
    TemporalSinusoid,
    /// A Gaussian bump of peak `amplitude` at a per-clip position, on the
    /// signal channels in every frame.
    SpatialBlob,
}

impl std::str::FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_mean_shift" | "channel-mean-shift" => Ok(SignalKind::ChannelMeanShift),
            "temporal_sinusoid" | "temporal-sinusoid" => Ok(SignalKind::TemporalSinusoid),
            "spatial_blob" | "spatial-blob" => Ok(SignalKind::SpatialBlob),
            _ => Err(Error::Usage(format!("unknown signal kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Clip counts indexed by split (train, validation, test), then label
    /// (non-violating, violating).
    pub counts: [[usize; 2]; 3],
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub signal: SignalKind,
    /// How many of the first channels carry the signal.
    pub signal_channels: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub clips_per_source: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            counts: [[100, 100], [25, 25], [25, 25]],
            channels: 16,
            frames: 13,
            height: 60,
            width: 90,
            fps: 5.2,
            signal: SignalKind::ChannelMeanShift,
            signal_channels: 4,
            amplitude: 3.0,
            noise_std: 1.0,
            clips_per_source: 1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Splits `total` clips 4:1:1 across train/validation/test, each split
    /// balanced between the labels.
    pub fn with_total(total: usize) -> Self {
        let val = total / 6;
        let train = total - 2 * val;
        let half = |n: usize| [n / 2, n - n / 2];
        Self {
            counts: [half(train), half(val), half(val)],
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Usage(format!("amplitude must be non-negative, got {}", self.amplitude)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Usage(format!("noise std must be non-negative, got {}", self.noise_std)));
        }
        if self.channels == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Usage("latent extents must be positive".into()));
        }
        if self.signal_channels > self.channels {
            return Err(Error::Usage(format!(
                "{} signal channels exceed {} channels",
                self.signal_channels, self.channels
            )));
        }
        if self.clips_per_source == 0 {
            return Err(Error::Usage("clips_per_source must be positive".into()));
        }
        if self.total() == 0 {
            return Err(Error::Usage("spec generates no clips".into()));
        }
        Ok(())
    }

    /// Every clip in generation order: `(clip_id, split, label, source_id)`.
    pub fn plan(&self) -> Vec<(String, Split, Label, String)> {
        let mut out = Vec::with_capacity(self.total());
        for split in Split::ALL {
            for label in Label::ALL {
                for k in 0..self.counts[split.index()][label.index()] {
                    let id = format!("syn-{}-{}-{k:05}", split.as_str(), label.index());
                    let src = format!("src-{}-{}-{:05}", split.as_str(), label.index(), k / self.clips_per_source);
                    out.push((id, split, label, src));
                }
            }
        }
        out
    }
}

/// The `index`-th clip of the spec, `C×T×H×W`. Each clip draws from its own
/// random stream, so clips can be generated in any order.
pub fn synthesize_clip(spec: &SyntheticSpec, index: u64, label: Label) -> Result<Tensor<f32>> {
    let (c, t, h, w) = (spec.channels, spec.frames, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data: Vec<f32> = (0..c * t * h * w).map(|_| noise.sample(&mut rng) as f32).collect();
    if label == Label::Violating && spec.amplitude > 0.0 {
        let a = spec.amplitude;
        let plane = h * w;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let radius = (h.min(w) as f64 / 6.0).max(1.0);
        for ch in 0..spec.signal_channels {
            for f in 0..t {
                let frame = &mut data[(ch * t + f) * plane..(ch * t + f + 1) * plane];
                match spec.signal {
                    SignalKind::ChannelMeanShift => frame.iter_mut().for_each(|v| *v += a as f32),
                    SignalKind::TemporalSinusoid => {
                        let s = (a * (std::f64::consts::TAU * f as f64 / t as f64 + phase).sin()) as f32;
                        frame.iter_mut().for_each(|v| *v += s);
                    }
                    SignalKind::SpatialBlob => {
                        for (i, v) in frame.iter_mut().enumerate() {
                            let (y, x) = ((i / w) as f64, (i % w) as f64);
                            let d2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (radius * radius);
                            *v += (a * (-0.5 * d2).exp()) as f32;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([c, t, h, w], data)
}

/// Writes the whole synthetic corpus into `archive` and returns its manifest.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, archive: &mut Archive) -> Result<Manifest> {
    spec.validate()?;
    for (i, (clip_id, split, label, source_id)) in spec.plan().into_iter().enumerate() {
        let tensor = synthesize_clip(spec, i as u64, label)?;
        archive.write_latent(&LatentClip {
            clip_id,
            split,
            label,
            source_id,
            fps: spec.fps,
            tensor,
        })?;
    }
    Ok(archive.manifest().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            counts: [[3, 3], [1, 1], [1, 1]],
            frames: 4,
            height: 6,
            width: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn balance_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::create(dir.path().join("a")).unwrap();
        let mut b = Archive::create(dir.path().join("b")).unwrap();
        let ma = generate_synthetic_dataset(&small(), &mut a).unwrap();
        let mb = generate_synthetic_dataset(&small(), &mut b).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.counts()[&(Split::Train, Label::Violating)], 3);
        assert_eq!(ma.counts()[&(Split::Test, Label::NonViolating)], 1);
    }

    #[test]
    fn negative_amplitude_rejected() {
        let spec = SyntheticSpec {
            amplitude: -1.0,
            ..small()
        };
        assert!(matches!(spec.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn with_total_splits_four_one_one() {
        let s = SyntheticSpec::with_total(300);
        assert_eq!(s.counts, [[100, 100], [25, 25], [25, 25]]);
    }

    #[test]
    fn mean_shift_lands_on_signal_channels() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..small()
        };
        let x = synthesize_clip(&spec, 0, Label::Violating).unwrap();
        let per = 4 * 6 * 8;
        assert!(x.data()[..4 * per].iter().all(|&v| v == 3.0));
        assert!(x.data()[4 * per..].iter().all(|&v| v == 0.0));
    }
}
