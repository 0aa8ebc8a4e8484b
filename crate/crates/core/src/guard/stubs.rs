use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, Modality};
use crate::error::{Error, Result};
use crate::store::{synthesize_clip, Archive, Label, SyntheticSpec};
use crate::tensor::{Fill, Tensor};

/// Output of the conditioning stage: the initial latent and a stand-in for
/// the text/image embedding.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub z0: Tensor<f32>,
    pub embedding: Vec<f32>,
}

pub trait EncodeStub: Send + Sync {
    fn encode(&self, request: &GenerationRequest, latent_dims: &[usize]) -> Result<Conditioning>;
}

pub trait DiffusionStub: Send + Sync {
    fn denoise(&self, request: &GenerationRequest, cond: &Conditioning) -> Result<Tensor<f32>>;
}

pub trait DecodeStub: Send + Sync {
    fn decode(&self, latent: &Tensor<f32>) -> Result<DecodedVideo>;

    /// Decode cost in milliseconds that a real decoder would incur.
    fn cost_ms(&self) -> f64;

    /// True if `decode` actually spends `cost_ms` of wall time.
    fn sleeps(&self) -> bool {
        false
    }
}

/// Placeholder for decoded pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedVideo {
    pub reference: String,
    pub frames: usize,
}

/// Seeded conditioning encoder for one modality. Image and video
/// conditioning require a media reference.
#[derive(Debug, Clone, Copy)]
pub struct SeededEncoder {
    pub modality: Modality,
}

impl EncodeStub for SeededEncoder {
    fn encode(&self, request: &GenerationRequest, latent_dims: &[usize]) -> Result<Conditioning> {
        if request.modality != self.modality {
            return Err(Error::Pipeline(format!(
                "{} encoder received a {} request",
                self.modality.as_str(),
                request.modality.as_str()
            )));
        }
        if self.modality != Modality::T2V && request.media.is_none() {
            return Err(Error::Input(format!("{} request {} has no media reference", self.modality.as_str(), request.id)));
        }
        let seed = request.seed ^ ((self.modality as u64 + 1) << 56);
        let z0 = Tensor::create(latent_dims.to_vec(), Fill::Normal { mean: 0.0, std: 1.0, seed })?;
        let h = crc32fast::hash(request.prompt.as_bytes());
        let embedding = (0..8).map(|i| ((h >> (4 * i)) & 0xf) as f32 / 15.0).collect();
        Ok(Conditioning { z0, embedding })
    }
}

/// Draws the denoised latent from the synthetic generator, keyed by the
/// request seed. The conditioning is ignored, so the latent does not depend
/// on the modality.
#[derive(Debug, Clone)]
pub struct SeededDiffusion {
    pub spec: SyntheticSpec,
    pub label: Label,
}

impl DiffusionStub for SeededDiffusion {
    fn denoise(&self, request: &GenerationRequest, _: &Conditioning) -> Result<Tensor<f32>> {
        synthesize_clip(&self.spec, request.seed, self.label)
    }
}

/// Replays archived latents: request seed `k` gets clip `k mod n`.
#[derive(Debug, Clone)]
pub struct ReplayDiffusion {
    archive: Arc<Archive>,
    clip_ids: Vec<String>,
}

impl ReplayDiffusion {
    pub fn new(archive: Arc<Archive>, clip_ids: Vec<String>) -> Result<Self> {
        if clip_ids.is_empty() {
            return Err(Error::Config("replay stub needs at least one clip".into()));
        }
        Ok(Self { archive, clip_ids })
    }

    pub fn clip_for(&self, request: &GenerationRequest) -> &str {
        &self.clip_ids[(request.seed % self.clip_ids.len() as u64) as usize]
    }
}

impl DiffusionStub for ReplayDiffusion {
    fn denoise(&self, request: &GenerationRequest, _: &Conditioning) -> Result<Tensor<f32>> {
        self.archive.read_tensor(self.clip_for(request))
    }
}

/// Always returns the same latent.
#[derive(Debug, Clone)]
pub struct FixedDiffusion(pub Tensor<f32>);

impl DiffusionStub for FixedDiffusion {
    fn denoise(&self, _: &GenerationRequest, _: &Conditioning) -> Result<Tensor<f32>> {
        Ok(self.0.clone())
    }
}

/// Decoder stand-in. Charges `cost_ms` of simulated time per call, and
/// actually sleeps for it when `sleep` is set.
#[derive(Debug, Default)]
pub struct SimulatedDecoder {
    pub cost_ms: f64,
    pub sleep: bool,
    calls: AtomicUsize,
}

impl SimulatedDecoder {
    pub fn new(cost_ms: f64, sleep: bool) -> Self {
        Self {
            cost_ms,
            sleep,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl DecodeStub for SimulatedDecoder {
    fn decode(&self, latent: &Tensor<f32>) -> Result<DecodedVideo> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.sleep && self.cost_ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(self.cost_ms / 1e3));
        }
        let frames = latent.dims().get(1).copied().unwrap_or(1) * 4;
        Ok(DecodedVideo {
            reference: format!("video-{:08x}", crc32fast::hash(&latent.to_le_bytes())),
            frames,
        })
    }

    fn cost_ms(&self) -> f64 {
        self.cost_ms
    }

    fn sleeps(&self) -> bool {
        self.sleep
    }
}

/// The stubs of one pipeline. Shared read-only across concurrent runs.
#[derive(Clone)]
pub struct StageStubs {
    encoders: [Arc<dyn EncodeStub>; 3],
    diffusion: Arc<dyn DiffusionStub>,
    decoder: Arc<dyn DecodeStub>,
    latent_dims: Vec<usize>,
}

impl StageStubs {
    /// Seeded encoders for every modality around the given diffusion and
    /// decode stubs. `latent_dims` is the `C×T×H×W` latent shape.
    pub fn new(latent_dims: Vec<usize>, diffusion: Arc<dyn DiffusionStub>, decoder: Arc<dyn DecodeStub>) -> Self {
        let enc = |m| Arc::new(SeededEncoder { modality: m }) as Arc<dyn EncodeStub>;
        Self {
            encoders: [enc(Modality::T2V), enc(Modality::I2V), enc(Modality::V2V)],
            diffusion,
            decoder,
            latent_dims,
        }
    }

    pub fn with_encoder(mut self, modality: Modality, stub: Arc<dyn EncodeStub>) -> Self {
        self.encoders[modality as usize] = stub;
        self
    }

    pub fn encoder(&self, modality: Modality) -> &dyn EncodeStub {
        self.encoders[modality as usize].as_ref()
    }

    pub fn diffusion(&self) -> &dyn DiffusionStub {
        self.diffusion.as_ref()
    }

    pub fn decoder(&self) -> &dyn DecodeStub {
        self.decoder.as_ref()
    }

    pub fn latent_dims(&self) -> &[usize] {
        &self.latent_dims
    }
}
