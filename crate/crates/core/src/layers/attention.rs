use rand_chacha::ChaCha8Rng;

use super::{join, Context, Dropout, Init, Layer, LayerNorm, Linear, ParamStore};
use crate::autograd::{expect_rank, Var};
use crate::element::Float;
use crate::error::{shape_err, Error, Result};

/// Multi-head scaled dot-product self-attention over `B×T×D`. No positional
/// information is injected; the layer is permutation-equivariant in `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_dropout: Dropout,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize, attn_dropout: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
        }
        let name = name.into();
        let proj = |p: &str| Linear::new(join(&name, p), dim, dim, Init::XavierUniform);
        Ok(Self {
            q: proj("q_proj"),
            k: proj("k_proj"),
            v: proj("v_proj"),
            out: proj("out_proj"),
            attn_dropout: Dropout::new(attn_dropout)?,
            name,
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Forward pass that also returns the post-softmax attention weights,
    /// `B×h×T×T`, before attention dropout.
    pub fn forward_with_weights<T: Float>(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        expect_rank(x, 3, &self.name)?;
        let (b, t, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        if d != self.dim {
            return Err(shape_err!("{}: expected width {}, input {:?}", self.name, self.dim, x.dims()));
        }
        let (h, dh) = (self.heads, self.head_dim());
        let split = |lin: &Linear, ctx: &mut Context<'_, T>| -> Result<Var<T>> {
            let y = lin.forward(ctx, x)?;
            let y = ctx.tape.reshape(&y, &[b, t, h, dh])?;
            ctx.tape.permute(&y, &[0, 2, 1, 3])
        };
        let q = split(&self.q, ctx)?;
        let k = split(&self.k, ctx)?;
        let v = split(&self.v, ctx)?;
        let scores = ctx.tape.matmul(&q, &k, true)?;
        let scores = ctx.tape.scale(&scores, T::of(1.0 / (dh as f64).sqrt()));
        let weights = ctx.tape.softmax(&scores)?;
        let dropped = self.attn_dropout.forward(ctx, &weights)?;
        let ctxv = ctx.tape.matmul(&dropped, &v, false)?;
        let ctxv = ctx.tape.permute(&ctxv, &[0, 2, 1, 3])?;
        let ctxv = ctx.tape.reshape(&ctxv, &[b, t, d])?;
        let y = self.out.forward(ctx, &ctxv)?;
        Ok((y, weights))
    }
}

impl<T: Float> Layer<T> for MultiHeadAttention {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for lin in [&self.q, &self.k, &self.v, &self.out] {
            <Linear as Layer<T>>::init(lin, store, rng)?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[2] != self.dim {
            return Err(shape_err!("{}: expected B×T×{}, input {input:?}", self.name, self.dim));
        }
        Ok(input.to_vec())
    }
}

/// Pre-LN transformer encoder layer:
/// `x + Drop(MHSA(LN(x)))` then `x + Drop(FFN(LN(x)))`, FFN = Linear, ReLU, Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub name: String,
    pub dim: usize,
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    dropout: Dropout,
}

impl EncoderLayer {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize, ffn_width: usize, dropout: f64) -> Result<Self> {
        let name = name.into();
        Ok(Self {
            ln1: LayerNorm::new(join(&name, "ln1"), dim),
            attn: MultiHeadAttention::new(join(&name, "attn"), dim, heads, dropout)?,
            ln2: LayerNorm::new(join(&name, "ln2"), dim),
            ff1: Linear::new(join(&name, "ff1"), dim, ffn_width, Init::KaimingUniform),
            ff2: Linear::new(join(&name, "ff2"), ffn_width, dim, Init::XavierUniform),
            dropout: Dropout::new(dropout)?,
            name,
            dim,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }
}

impl<T: Float> Layer<T> for EncoderLayer {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        <LayerNorm as Layer<T>>::init(&self.ln1, store, rng)?;
        <MultiHeadAttention as Layer<T>>::init(&self.attn, store, rng)?;
        <LayerNorm as Layer<T>>::init(&self.ln2, store, rng)?;
        <Linear as Layer<T>>::init(&self.ff1, store, rng)?;
        <Linear as Layer<T>>::init(&self.ff2, store, rng)
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.ln1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, &h)?;
        let h = self.dropout.forward(ctx, &h)?;
        let x = ctx.tape.add(x, &h)?;
        let h = self.ln2.forward(ctx, &x)?;
        let h = self.ff1.forward(ctx, &h)?;
        let h = ctx.tape.relu(&h);
        let h = self.ff2.forward(ctx, &h)?;
        let h = self.dropout.forward(ctx, &h)?;
        ctx.tape.add(&x, &h)
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        <MultiHeadAttention as Layer<T>>::output_dims(&self.attn, input)
    }
}
