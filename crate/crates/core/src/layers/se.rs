use rand_chacha::ChaCha8Rng;

use super::{join, Context, Init, Layer, Linear, ParamStore};
use crate::autograd::{expect_rank, Var};
use crate::element::Float;
use crate::error::{shape_err, Result};
use crate::ops::{Activation, PoolTarget};

/// Squeeze-and-excitation: global average pool to a per-channel descriptor,
/// a `C → C/r → C` bottleneck with ReLU then sigmoid, and a channelwise
/// rescale of the input by the resulting gate in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    fc1: Linear,
    fc2: Linear,
}

impl SeBlock {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize) -> Self {
        let name = name.into();
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            fc1: Linear::new(join(&name, "fc1"), channels, hidden, Init::KaimingUniform),
            fc2: Linear::new(join(&name, "fc2"), hidden, channels, Init::XavierUniform),
            name,
            channels,
            hidden,
        }
    }

    /// The gate `α`, shape `B×C`.
    pub fn gate<T: Float>(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        expect_rank(x, 5, &self.name)?;
        if x.dims()[1] != self.channels {
            return Err(shape_err!("{}: expected {} channels, input {:?}", self.name, self.channels, x.dims()));
        }
        let b = x.dims()[0];
        let pooled = ctx.tape.adaptive_avg_pool(x, PoolTarget::Full)?;
        let u = ctx.tape.reshape(&pooled, &[b, self.channels])?;
        let h = self.fc1.forward(ctx, &u)?;
        let h = ctx.tape.relu(&h);
        let a = self.fc2.forward(ctx, &h)?;
        Ok(ctx.tape.activation(&a, Activation::Sigmoid))
    }
}

impl<T: Float> Layer<T> for SeBlock {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let a = self.gate(ctx, x)?;
        ctx.tape.scale_channels(x, &a)
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 || input[1] != self.channels {
            return Err(shape_err!("{}: expected B×{}×T×H×W, input {input:?}", self.name, self.channels));
        }
        Ok(input.to_vec())
    }
}
