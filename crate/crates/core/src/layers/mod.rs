//! Parameterized layers with explicit train/eval behaviour.
//!
//! Layers are descriptors: they own no tensors. Parameters and buffers live
//! in a [`ParamStore`] keyed by dotted names (`stage1.conv1.weight`), and a
//! forward pass reads them through a [`Context`]. This keeps an eval-mode
//! model immutable and shareable, while train-mode side effects (batch-norm
//! running statistics, dropout RNG) are collected in the context and applied
//! by whoever owns the store.

mod attention;
mod basic;
mod resblock;
mod se;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::element::Float;
use crate::error::{Error, Result};
use crate::ops::ConvAlgo;
use crate::tensor::Tensor;

pub use attention::{EncoderLayer, MultiHeadAttention};
pub use basic::{BatchNorm3d, Conv3d, Dropout, LayerNorm, Linear};
pub use resblock::ResBlock3d;
pub use se::SeBlock;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Trainable, updated by the optimizer.
    Parameter,
    /// State such as running statistics; never touched by the optimizer.
    Buffer,
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`, for weights feeding a ReLU.
    KaimingUniform,
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor<T: Float>(self, dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let n: usize = dims.iter().product();
        let bound = match self {
            Init::Zeros => return Tensor::from_vec(dims.to_vec(), vec![T::zero(); n]),
            Init::Ones => return Tensor::from_vec(dims.to_vec(), vec![T::one(); n]),
            Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(dims.to_vec(), data)
    }
}

#[derive(Clone)]
pub struct Entry<T: Float> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters and buffers of a model, in registration order.
#[derive(Clone, Default)]
pub struct ParamStore<T: Float> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Duplicate(format!("parameter name {name:?} registered twice")));
        }
        self.entries.insert(name, Entry { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::NotFound(format!("parameter {name:?}")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name:?}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "cannot replace {name:?} of shape {} with {}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor.with_requires_grad(false);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Parameter)
            .map(|(k, e)| (k, &e.tensor))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Buffer)
            .map(|(k, e)| (k, &e.tensor))
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.parameters().map(|(_, t)| t.numel()).sum()
    }

    /// Trainable scalars under a name prefix.
    pub fn param_count_prefix(&self, prefix: &str) -> usize {
        self.parameters()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Counter-based random stream: `(seed, counter)` fully determines the draws
/// of the next [`RngStream::next_rng`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }
}

/// Per-forward-pass state: the tape, the mode, the parameter leaves
/// registered so far and pending buffer updates.
pub struct Context<'s, T: Float> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    rng: RngStream,
    algo: ConvAlgo,
    vars: HashMap<String, Var<T>>,
    updates: Vec<(String, Tensor<T>)>,
}

/// What a finished forward pass leaves behind.
pub struct ContextOutput<T: Float> {
    pub tape: Tape<T>,
    pub params: HashMap<String, Var<T>>,
    pub buffer_updates: Vec<(String, Tensor<T>)>,
    pub rng: RngStream,
}

impl<'s, T: Float> Context<'s, T> {
    /// Forward context. With `track_grads` every parameter becomes a
    /// differentiable leaf.
    pub fn new(store: &'s ParamStore<T>, mode: Mode, track_grads: bool, rng: RngStream) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            track_grads,
            rng,
            algo: ConvAlgo::default(),
            vars: HashMap::new(),
            updates: Vec::new(),
        }
    }

    /// Eval mode, no gradients.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false, RngStream::new(0))
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.algo = algo;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.algo
    }

    pub fn rng(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn param(&mut self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.clone());
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t, self.track_grads);
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.get(name)
    }

    pub fn update_buffer(&mut self, name: String, value: Tensor<T>) {
        self.updates.push((name, value));
    }

    pub fn finish(self) -> ContextOutput<T> {
        ContextOutput {
            tape: self.tape,
            params: self.vars,
            buffer_updates: self.updates,
            rng: self.rng,
        }
    }
}

pub trait Layer<T: Float> {
    /// Registers this layer's parameters and buffers.
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()>;

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>>;

    /// Output dims for the given input dims, without computing anything.
    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>>;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
