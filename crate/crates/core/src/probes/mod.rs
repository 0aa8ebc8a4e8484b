//! The two probe architectures: a 3-D CNN stem and residual stages feeding a
//! temporal transformer, and the plain 3-D CNN baseline.

mod checkpoint;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::element::Float;
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    BatchNorm3d, Context, Conv3d, Dropout, EncoderLayer, Init, Layer, LayerNorm, Linear, ParamStore, ResBlock3d,
};
use crate::ops::conv::Conv3dSpec;
use crate::ops::pool::{adaptive_avg_pool_dims, maxpool3d_output_dims};
use crate::ops::{softmax, Activation, PoolTarget};
use crate::tensor::{Shape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Output index of the violating class; its softmax probability is the
/// safety score.
pub const VIOLATING: usize = 1;
pub const NON_VIOLATING: usize = 0;

/// Shortest clip either probe accepts.
pub const MIN_FRAMES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    CnnTransformer,
    #[serde(rename = "vanilla_3dcnn")]
    Vanilla3dcnn,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::CnnTransformer => "cnn_transformer",
            ProbeKind::Vanilla3dcnn => "vanilla_3dcnn",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn_transformer" | "cnn-transformer" | "transformer" => Ok(ProbeKind::CnnTransformer),
            "vanilla_3dcnn" | "vanilla-3dcnn" | "vanilla" => Ok(ProbeKind::Vanilla3dcnn),
            other => Err(Error::Config(format!(
                "unknown probe kind {other:?} (expected cnn_transformer or vanilla_3dcnn)"
            ))),
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_width: usize,
    pub stage_widths: [usize; 2],
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub head_hidden: usize,
    pub dropout_head: f64,
    pub dropout_encoder: f64,
    pub se_ratio: usize,
    pub vanilla_widths: [usize; 3],
    pub vanilla_head_hidden: usize,
    pub vanilla_dropout: f64,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            in_channels: 16,
            height: 60,
            width: 90,
            stem_width: 64,
            stage_widths: [128, 256],
            encoder_layers: 6,
            heads: 8,
            ffn_width: 2048,
            head_hidden: 128,
            dropout_head: 0.4,
            dropout_encoder: 0.1,
            se_ratio: 16,
            vanilla_widths: [32, 64, 128],
            vanilla_head_hidden: 64,
            vanilla_dropout: 0.3,
        }
    }

    pub fn cnn_transformer() -> Self {
        Self::new(ProbeKind::CnnTransformer)
    }

    pub fn vanilla() -> Self {
        Self::new(ProbeKind::Vanilla3dcnn)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("stem_width", self.stem_width),
            ("stage_widths[0]", self.stage_widths[0]),
            ("stage_widths[1]", self.stage_widths[1]),
            ("encoder_layers", self.encoder_layers),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("head_hidden", self.head_hidden),
            ("se_ratio", self.se_ratio),
            ("vanilla_widths[0]", self.vanilla_widths[0]),
            ("vanilla_widths[1]", self.vanilla_widths[1]),
            ("vanilla_widths[2]", self.vanilla_widths[2]),
            ("vanilla_head_hidden", self.vanilla_head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, p) in [
            ("dropout_head", self.dropout_head),
            ("dropout_encoder", self.dropout_encoder),
            ("vanilla_dropout", self.vanilla_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        if self.stage_widths[1] % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.stage_widths[1], self.heads
            )));
        }
        Ok(())
    }
}

/// One row of a shape trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub dims: Vec<usize>,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match Shape::new(self.dims.clone()) {
            Ok(s) => write!(f, "{:<14} {s}", self.stage),
            Err(_) => write!(f, "{:<14} {:?}", self.stage, self.dims),
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv(Conv3d),
    Bn(BatchNorm3d),
    Relu,
    Gelu,
    MaxPool([usize; 3]),
    Pool(PoolTarget),
    Flatten,
    SwapTime,
    Res(ResBlock3d),
    Encoder(EncoderLayer),
    TemporalMean,
    Norm(LayerNorm),
    Dense(Linear),
    Drop(Dropout),
}

impl Block {
    fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            Block::Conv(l) => <Conv3d as Layer<T>>::init(l, store, rng),
            Block::Bn(l) => <BatchNorm3d as Layer<T>>::init(l, store, rng),
            Block::Res(l) => <ResBlock3d as Layer<T>>::init(l, store, rng),
            Block::Encoder(l) => <EncoderLayer as Layer<T>>::init(l, store, rng),
            Block::Norm(l) => <LayerNorm as Layer<T>>::init(l, store, rng),
            Block::Dense(l) => <Linear as Layer<T>>::init(l, store, rng),
            _ => Ok(()),
        }
    }

    fn forward<T: Float>(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Block::Conv(l) => l.forward(ctx, x),
            Block::Bn(l) => l.forward(ctx, x),
            Block::Relu => Ok(ctx.tape.relu(x)),
            Block::Gelu => Ok(ctx.tape.activation(x, Activation::Gelu)),
            Block::MaxPool(k) => ctx.tape.maxpool3d(x, *k, *k),
            Block::Pool(t) => ctx.tape.adaptive_avg_pool(x, *t),
            Block::Flatten => {
                let d = flatten_dims(x.dims())?;
                ctx.tape.reshape(x, &d)
            }
            Block::SwapTime => ctx.tape.permute(x, &[0, 2, 1]),
            Block::Res(l) => l.forward(ctx, x),
            Block::Encoder(l) => l.forward(ctx, x),
            Block::TemporalMean => ctx.tape.mean_axis(x, 1),
            Block::Norm(l) => l.forward(ctx, x),
            Block::Dense(l) => l.forward(ctx, x),
            Block::Drop(l) => l.forward(ctx, x),
        }
    }

    fn output_dims(&self, d: &[usize]) -> Result<Vec<usize>> {
        match self {
            Block::Conv(l) => <Conv3d as Layer<f32>>::output_dims(l, d),
            Block::Bn(l) => <BatchNorm3d as Layer<f32>>::output_dims(l, d),
            Block::Relu | Block::Gelu | Block::Drop(_) => Ok(d.to_vec()),
            Block::MaxPool(k) => maxpool3d_output_dims(d, *k, *k),
            Block::Pool(t) => adaptive_avg_pool_dims(d, *t),
            Block::Flatten => flatten_dims(d),
            Block::SwapTime => match d {
                [b, c, t] => Ok(vec![*b, *t, *c]),
                _ => Err(shape_err!("permute expects B×C×T, got {d:?}")),
            },
            Block::Res(l) => <ResBlock3d as Layer<f32>>::output_dims(l, d),
            Block::Encoder(l) => <EncoderLayer as Layer<f32>>::output_dims(l, d),
            Block::TemporalMean => match d {
                [b, _, c] => Ok(vec![*b, *c]),
                _ => Err(shape_err!("temporal mean expects B×T×D, got {d:?}")),
            },
            Block::Norm(l) => <LayerNorm as Layer<f32>>::output_dims(l, d),
            Block::Dense(l) => <Linear as Layer<f32>>::output_dims(l, d),
        }
    }
}

fn flatten_dims(d: &[usize]) -> Result<Vec<usize>> {
    match d.split_first() {
        Some((&b, rest)) if !rest.is_empty() => Ok(vec![b, rest.iter().product()]),
        _ => Err(shape_err!("flatten expects a batched tensor, got {d:?}")),
    }
}

#[derive(Debug, Clone)]
struct Stage {
    name: &'static str,
    blocks: Vec<Block>,
}

fn stage(name: &'static str, blocks: Vec<Block>) -> Stage {
    Stage { name, blocks }
}

fn transformer_stages(c: &ProbeConfig) -> Result<Vec<Stage>> {
    let [w1, w2] = c.stage_widths;
    let mut encoders = Vec::with_capacity(c.encoder_layers);
    for i in 0..c.encoder_layers {
        encoders.push(Block::Encoder(EncoderLayer::new(
            format!("encoder.{i}"),
            w2,
            c.heads,
            c.ffn_width,
            c.dropout_encoder,
        )?));
    }
    Ok(vec![
        stage(
            "Stem",
            vec![
                Block::Conv(Conv3d::new("stem.conv", c.in_channels, c.stem_width, [3, 3, 3], Conv3dSpec::same3(), false)),
                Block::Bn(BatchNorm3d::new("stem.bn", c.stem_width)),
                Block::Relu,
            ],
        ),
        stage("Stage 1", vec![Block::Res(ResBlock3d::new("stage1", c.stem_width, w1, 2, c.se_ratio))]),
        stage("Stage 2", vec![Block::Res(ResBlock3d::new("stage2", w1, w2, 2, c.se_ratio))]),
        stage("Spatial Pool", vec![Block::Pool(PoolTarget::Spatial)]),
        stage("Reshape", vec![Block::SwapTime]),
        stage("Transformer", encoders),
        stage("Temporal Pool", vec![Block::TemporalMean]),
        stage(
            "MLP Head",
            vec![
                Block::Norm(LayerNorm::new("head.ln", w2)),
                Block::Dense(Linear::new("head.fc1", w2, c.head_hidden, Init::KaimingUniform)),
                Block::Gelu,
                Block::Drop(Dropout::new(c.dropout_head)?),
                Block::Dense(Linear::new("head.fc2", c.head_hidden, 2, Init::XavierUniform)),
            ],
        ),
    ])
}

fn vanilla_stages(c: &ProbeConfig) -> Result<Vec<Stage>> {
    let [w1, w2, w3] = c.vanilla_widths;
    let block = |i: usize, cin: usize, cout: usize, kernel: [usize; 3], spec: Conv3dSpec| {
        vec![
            Block::Conv(Conv3d::new(format!("block{i}.conv"), cin, cout, kernel, spec, true)),
            Block::Bn(BatchNorm3d::new(format!("block{i}.bn"), cout)),
            Block::Relu,
        ]
    };
    Ok(vec![
        stage("Block 1", block(1, c.in_channels, w1, [3, 5, 5], Conv3dSpec::new([1, 2, 2], [1, 2, 2]))),
        stage("Block 1 Pool", vec![Block::MaxPool([2, 2, 2])]),
        stage("Block 2", block(2, w1, w2, [3, 3, 3], Conv3dSpec::same3())),
        stage("Block 2 Pool", vec![Block::MaxPool([2, 2, 2])]),
        stage("Block 3", block(3, w2, w3, [3, 3, 3], Conv3dSpec::same3())),
        stage("Global Pool", vec![Block::Pool(PoolTarget::Full)]),
        stage("Flatten", vec![Block::Flatten]),
        stage(
            "Head",
            vec![
                Block::Dense(Linear::new("head.fc1", w3, c.vanilla_head_hidden, Init::KaimingUniform)),
                Block::Relu,
                Block::Drop(Dropout::new(c.vanilla_dropout)?),
                Block::Dense(Linear::new("head.fc2", c.vanilla_head_hidden, 2, Init::XavierUniform)),
            ],
        ),
    ])
}

/// A built probe: its configuration, the layer sequence and the parameter
/// store. An eval-mode model is read-only and can be shared across threads.
#[derive(Clone)]
pub struct ProbeModel<T: Float = f32> {
    config: ProbeConfig,
    seed: u64,
    stages: Vec<Stage>,
    store: ParamStore<T>,
}

impl<T: Float> ProbeModel<T> {
    pub fn build(config: ProbeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stages = match config.kind {
            ProbeKind::CnnTransformer => transformer_stages(&config)?,
            ProbeKind::Vanilla3dcnn => vanilla_stages(&config)?,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in stages.iter().flat_map(|s| &s.blocks) {
            block.init(&mut store, &mut rng)?;
        }
        Ok(Self {
            config,
            seed,
            stages,
            store,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn kind(&self) -> ProbeKind {
        self.config.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable parameters only; batch-norm running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.name).collect()
    }

    /// Validates a `B×C×T×H×W` input against the configuration.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let c = &self.config;
        match dims {
            [b, ch, t, h, w] => {
                if *b == 0 {
                    return Err(shape_err!("empty batch"));
                }
                if *ch != c.in_channels {
                    return Err(shape_err!("expected {} latent channels, got {ch}", c.in_channels));
                }
                if (*h, *w) != (c.height, c.width) {
                    return Err(shape_err!("expected spatial extents {}×{}, got {h}×{w}", c.height, c.width));
                }
                if *t < MIN_FRAMES {
                    return Err(shape_err!("expected at least {MIN_FRAMES} latent frames, got {t}"));
                }
                Ok(())
            }
            _ => Err(shape_err!("expected a B×{}×T×{}×{} input, got {dims:?}", c.in_channels, c.height, c.width)),
        }
    }

    /// Forward pass to pre-softmax logits, `B×2`.
    pub fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.check_input(x.dims())?;
        let mut h = x.clone();
        for s in &self.stages {
            for b in &s.blocks {
                h = b.forward(ctx, &h).map_err(|e| at_stage(s.name, e))?;
            }
        }
        Ok(h)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Context::eval(&self.store);
        Ok(self.forward(&mut ctx, &Var::constant(x.clone()))?.into_value())
    }

    /// Eval-mode class probabilities, `B×2`.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(&self.logits(x)?)
    }

    /// Eval-mode safety scores: the violating-class probability per row.
    pub fn scores(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let p = self.probabilities(x)?;
        Ok(p.data().chunks(2).map(|r| r[VIOLATING].f64()).collect())
    }

    /// Symbolic output shape after every named stage, starting with the input.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<TraceRow>> {
        self.check_input(input).map_err(|e| at_stage("Input", e))?;
        let mut rows = vec![TraceRow {
            stage: "Input".into(),
            dims: input.to_vec(),
        }];
        let mut d = input.to_vec();
        for s in &self.stages {
            for b in &s.blocks {
                d = b.output_dims(&d).map_err(|e| at_stage(s.name, e))?;
            }
            rows.push(TraceRow {
                stage: s.name.into(),
                dims: d.clone(),
            });
        }
        Ok(rows)
    }

    /// Eval-mode forward that records the concrete shape after every stage.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Vec<TraceRow>> {
        self.check_input(x.dims())?;
        let mut ctx = Context::eval(&self.store);
        let mut rows = vec![TraceRow {
            stage: "Input".into(),
            dims: x.dims().to_vec(),
        }];
        let mut h = Var::constant(x.clone());
        for s in &self.stages {
            for b in &s.blocks {
                h = b.forward(&mut ctx, &h).map_err(|e| at_stage(s.name, e))?;
            }
            rows.push(TraceRow {
                stage: s.name.into(),
                dims: h.dims().to_vec(),
            });
        }
        Ok(rows)
    }

    /// Zeroes the final linear layer so every input scores exactly 0.5.
    pub fn zero_head(&mut self) -> Result<()> {
        for n in ["head.fc2.weight", "head.fc2.bias"] {
            let dims = self.store.get(n)?.dims().to_vec();
            self.store.set(n, Tensor::zeros(dims)?)?;
        }
        Ok(())
    }

    /// Applies buffer updates collected by a train-mode forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, t) in updates {
            self.store.set(&name, t)?;
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ProbeModel<U> {
        ProbeModel {
            config: self.config.clone(),
            seed: self.seed,
            stages: self.stages.clone(),
            store: self.store.cast(),
        }
    }
}

impl<T: Float> fmt::Debug for ProbeModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProbeModel")
            .field("kind", &self.config.kind)
            .field("seed", &self.seed)
            .field("params", &self.param_count())
            .finish()
    }
}

fn at_stage(stage: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{stage}: {m}")),
        other => other,
    }
}
