use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{join, Context, Init, Layer, Mode, ParamKind, ParamStore, BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::autograd::Var;
use crate::element::Float;
use crate::error::{shape_err, Error, Result};
use crate::ops::conv::{conv3d_output_dims, Conv3dSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub spec: Conv3dSpec,
    pub bias: bool,
    pub init: Init,
}

impl Conv3d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: [usize; 3], spec: Conv3dSpec, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            spec,
            bias,
            init: Init::KaimingUniform,
        }
    }

    fn weight_dims(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel[0], self.kernel[1], self.kernel[2]]
    }
}

impl<T: Float> Layer<T> for Conv3d {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let kvol: usize = self.kernel.iter().product();
        let w = self.init.tensor(&self.weight_dims(), self.in_channels * kvol, self.out_channels * kvol, rng)?;
        store.insert(join(&self.name, "weight"), w, ParamKind::Parameter)?;
        if self.bias {
            store.insert(join(&self.name, "bias"), Tensor::zeros([self.out_channels])?, ParamKind::Parameter)?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&join(&self.name, "weight"))?;
        let b = if self.bias { Some(ctx.param(&join(&self.name, "bias"))?) } else { None };
        let algo = ctx.conv_algo();
        ctx.tape.conv3d(x, &w, b.as_ref(), self.spec, algo)
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        conv3d_output_dims(input, &self.weight_dims(), &self.spec)
    }
}

/// Batch norm over axis 1 of a `B×C×...` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm3d {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm3d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

impl<T: Float> Layer<T> for BatchNorm3d {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = [self.channels];
        store.insert(join(&self.name, "weight"), Init::Ones.tensor(&c, 0, 0, rng)?, ParamKind::Parameter)?;
        store.insert(join(&self.name, "bias"), Init::Zeros.tensor(&c, 0, 0, rng)?, ParamKind::Parameter)?;
        store.insert(join(&self.name, "running_mean"), Init::Zeros.tensor(&c, 0, 0, rng)?, ParamKind::Buffer)?;
        store.insert(join(&self.name, "running_var"), Init::Ones.tensor(&c, 0, 0, rng)?, ParamKind::Buffer)?;
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.dims().len() < 2 || x.dims()[1] != self.channels {
            return Err(shape_err!("{}: expected {} channels, input {:?}", self.name, self.channels, x.dims()));
        }
        let gamma = ctx.param(&join(&self.name, "weight"))?;
        let beta = ctx.param(&join(&self.name, "bias"))?;
        let rm_name = join(&self.name, "running_mean");
        let rv_name = join(&self.name, "running_var");
        match ctx.mode() {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, &gamma, &beta, self.eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                let rm = ctx.buffer(&rm_name)?.data().iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect();
                let rv = ctx.buffer(&rv_name)?.data().iter().zip(&var).map(|(&r, &b)| keep * r + m * b).collect();
                ctx.update_buffer(rm_name, Tensor::from_vec([self.channels], rm)?);
                ctx.update_buffer(rv_name, Tensor::from_vec([self.channels], rv)?);
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.buffer(&rm_name)?.clone();
                let rv = ctx.buffer(&rv_name)?.clone();
                ctx.tape.batch_norm_eval(x, &gamma, &beta, &rm, &rv, self.eps)
            }
        }
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 2 || input[1] != self.channels {
            return Err(shape_err!("{}: expected {} channels, input {input:?}", self.name, self.channels));
        }
        Ok(input.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            eps: LN_EPS,
        }
    }
}

impl<T: Float> Layer<T> for LayerNorm {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        store.insert(join(&self.name, "weight"), Init::Ones.tensor(&[self.dim], 0, 0, rng)?, ParamKind::Parameter)?;
        store.insert(join(&self.name, "bias"), Init::Zeros.tensor(&[self.dim], 0, 0, rng)?, ParamKind::Parameter)?;
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let g = ctx.param(&join(&self.name, "weight"))?;
        let b = ctx.param(&join(&self.name, "bias"))?;
        ctx.tape.layer_norm(x, &g, &b, self.eps)
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.dim) {
            return Err(shape_err!("{}: expected trailing extent {}, input {input:?}", self.name, self.dim));
        }
        Ok(input.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub init: Init,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
            bias: true,
            init,
        }
    }
}

impl<T: Float> Layer<T> for Linear {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = self.init.tensor(&[self.out_features, self.in_features], self.in_features, self.out_features, rng)?;
        store.insert(join(&self.name, "weight"), w, ParamKind::Parameter)?;
        if self.bias {
            store.insert(join(&self.name, "bias"), Tensor::zeros([self.out_features])?, ParamKind::Parameter)?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&join(&self.name, "weight"))?;
        let b = if self.bias { Some(ctx.param(&join(&self.name, "bias"))?) } else { None };
        ctx.tape.linear(x, &w, b.as_ref())
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.last() != Some(&self.in_features) {
            return Err(shape_err!("{}: expected trailing extent {}, input {input:?}", self.name, self.in_features));
        }
        let mut d = input.to_vec();
        *d.last_mut().unwrap() = self.out_features;
        Ok(d)
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1 / (1 - p)`. Identity in eval mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl<T: Float> Layer<T> for Dropout {
    fn init(&self, _: &mut ParamStore<T>, _: &mut ChaCha8Rng) -> Result<()> {
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if ctx.mode() == Mode::Eval || self.p == 0.0 {
            return Ok(x.clone());
        }
        let mut rng = ctx.rng().next_rng();
        let keep = T::of(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.value().numel())
            .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep })
            .collect();
        let mask = Var::constant(Tensor::from_vec(x.dims().to_vec(), mask)?);
        ctx.tape.mul(x, &mask)
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}
