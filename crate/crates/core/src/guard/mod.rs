//! The three-stage generation pipeline with the probe attached between the
//! diffusion and decode stages.
//!
//! Stage 1 (conditioning encode) and stage 2 (diffusion) are stubs that
//! produce latents deterministically; stage 3 (decode) is a stub with a
//! configurable simulated cost. The probe reads the denoised latent, scores
//! it in a side channel and the guard decides whether decoding runs.

mod stubs;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ProbeModel;
use crate::tensor::Tensor;

pub use stubs::{
    Conditioning, DecodeStub, DecodedVideo, DiffusionStub, EncodeStub, FixedDiffusion, ReplayDiffusion, SeededDiffusion,
    SeededEncoder, SimulatedDecoder, StageStubs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t2v")]
    T2V,
    #[serde(rename = "i2v")]
    I2V,
    #[serde(rename = "v2v")]
    V2V,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::T2V, Modality::I2V, Modality::V2V];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T2V => "t2v",
            Modality::I2V => "i2v",
            Modality::V2V => "v2v",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2v" => Ok(Modality::T2V),
            "i2v" => Ok(Modality::I2V),
            "v2v" => Ok(Modality::V2V),
            _ => Err(Error::Usage(format!("unknown modality {s:?} (expected t2v, i2v or v2v)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub id: String,
    pub modality: Modality,
    pub prompt: String,
    /// Image or video reference for I2V and V2V; opaque to the pipeline.
    #[serde(default)]
    pub media: Option<String>,
    pub fps: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pass,
    Violating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationAction {
    /// Skip decoding and deliver nothing.
    Suppress,
    /// Decode and deliver, and append the request to the review queue.
    FlagForReview,
}

/// What happens when the probe cannot produce a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Suppress delivery.
    FailClosed,
    /// Decode and deliver unscored.
    FailOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    pub threshold: f64,
    pub action: ViolationAction,
    pub on_error: FailurePolicy,
    #[serde(default)]
    pub review_queue: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            action: ViolationAction::Suppress,
            on_error: FailurePolicy::FailClosed,
            review_queue: None,
            checkpoint: None,
        }
    }
}

impl GuardConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }
}

/// `Violating` iff `s > τ`; a score equal to the threshold passes.
pub fn guard_decision(score: f64, config: &GuardConfig) -> Result<Decision> {
    config.validate()?;
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Internal(format!("probe score {score} outside [0, 1]")));
    }
    Ok(if score > config.threshold {
        Decision::Violating
    } else {
        Decision::Pass
    })
}

/// Scores one latent (`C×T×H×W`, or `1×C×T×H×W`) with an eval-mode probe.
/// The latent is only read.
pub fn probe_hook(latent: &Tensor<f32>, probe: &ProbeModel<f32>) -> Result<f64> {
    if !latent.all_finite() {
        return Err(Error::NonFinite("latent contains NaN or infinite values".into()));
    }
    let x = match latent.dims().len() {
        4 => {
            let mut d = vec![1];
            d.extend_from_slice(latent.dims());
            latent.reshape(d)?
        }
        5 if latent.dims()[0] == 1 => latent.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "probe hook expects a single C×T×H×W latent, got {}",
                latent.shape()
            )))
        }
    };
    let s = probe.scores(&x)?[0];
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("probe score is {s}")));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode_ms: f64,
    pub diffusion_ms: f64,
    pub probe_ms: f64,
    /// Measured decode time plus the stub's simulated cost; zero when
    /// decoding was skipped.
    pub decode_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.encode_ms + self.diffusion_ms + self.probe_ms + self.decode_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub request_id: String,
    pub modality: Modality,
    /// `None` when the probe failed.
    pub score: Option<f64>,
    pub decision: Option<Decision>,
    pub decode_performed: bool,
    pub flagged_for_review: bool,
    /// Simulated decode cost the stub charges when it runs.
    pub decode_cost_ms: f64,
    pub timings: StageTimings,
    pub output: Option<DecodedVideo>,
    pub error: Option<String>,
}

impl PipelineResult {
    /// Plain-text stage timing report.
    pub fn timing_report(&self) -> String {
        let t = &self.timings;
        format!(
            "request={} modality={} score={} decision={} decode={} encode_ms={:.3} diffusion_ms={:.3} probe_ms={:.3} decode_ms={:.3} total_ms={:.3}",
            self.request_id,
            self.modality.as_str(),
            self.score.map_or("none".into(), |s| format!("{s:.6}")),
            self.decision.map_or("error", |d| match d {
                Decision::Pass => "pass",
                Decision::Violating => "violating",
            }),
            if self.decode_performed { "performed" } else { "skipped" },
            t.encode_ms,
            t.diffusion_ms,
            t.probe_ms,
            t.decode_ms,
            t.total_ms()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub request_id: String,
    pub score: f64,
    pub timestamp: f64,
}

pub fn append_review(path: &Path, record: &ReviewRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs encode, diffusion, the probe hook and, when the guard permits,
/// decode. The denoised latent reaches the decoder unmodified.
pub fn run_pipeline(
    request: &GenerationRequest,
    stubs: &StageStubs,
    probe: &ProbeModel<f32>,
    guard: &GuardConfig,
) -> Result<PipelineResult> {
    guard.validate()?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let cond = stubs.encoder(request.modality).encode(request, stubs.latent_dims())?;
    timings.encode_ms = ms_since(t);

    let t = Instant::now();
    let latent = stubs.diffusion().denoise(request, &cond)?;
    timings.diffusion_ms = ms_since(t);
    if latent.dims() != stubs.latent_dims() {
        return Err(Error::Pipeline(format!(
            "diffusion stub produced {}, expected {:?}",
            latent.shape(),
            stubs.latent_dims()
        )));
    }
    let probe_dims: Vec<usize> = std::iter::once(1).chain(latent.dims().iter().copied()).collect();
    probe
        .check_input(&probe_dims)
        .map_err(|e| Error::Pipeline(format!("latent does not fit the probe: {e}")))?;

    let t = Instant::now();
    let scored = probe_hook(&latent, probe);
    timings.probe_ms = ms_since(t);

    let (score, decision, error) = match scored {
        Ok(s) => (Some(s), Some(guard_decision(s, guard)?), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let decode = match (decision, guard.action) {
        (Some(Decision::Pass), _) => true,
        (Some(Decision::Violating), ViolationAction::Suppress) => false,
        (Some(Decision::Violating), ViolationAction::FlagForReview) => true,
        (None, _) => guard.on_error == FailurePolicy::FailOpen,
    };
    let flagged = decision == Some(Decision::Violating) && guard.action == ViolationAction::FlagForReview;
    if flagged {
        if let Some(path) = &guard.review_queue {
            let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
            append_review(
                path,
                &ReviewRecord {
                    request_id: request.id.clone(),
                    score: score.unwrap_or(f64::NAN),
                    timestamp,
                },
            )?;
        }
    }

    let output = if decode {
        let t = Instant::now();
        let v = stubs.decoder().decode(&latent)?;
        let d = stubs.decoder();
        timings.decode_ms = ms_since(t) + if d.sleeps() { 0.0 } else { d.cost_ms() };
        Some(v)
    } else {
        None
    };
    Ok(PipelineResult {
        request_id: request.id.clone(),
        modality: request.modality,
        score,
        decision,
        decode_performed: decode,
        flagged_for_review: flagged,
        decode_cost_ms: stubs.decoder().cost_ms(),
        timings,
        output,
        error,
    })
}
