//! Batch and layer normalization kernels.

use crate::element::Float;
use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Per-channel statistics saved by a train-mode batch-norm forward.
pub struct BatchNormTrain<T: Float> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

fn channel_layout(dims: &[usize], channels: usize) -> Result<(usize, usize)> {
    if dims.len() < 2 || dims[1] != channels {
        return Err(shape_err!("batch norm over {channels} channels got input {dims:?}"));
    }
    Ok((dims[0], dims[2..].iter().product()))
}

/// Sums `f(value, channel_offset)` over every element of channel `c`, in f64.
fn channel_sum(batch: usize, channels: usize, spatial: usize, c: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for b in 0..batch {
        let base = (b * channels + c) * spatial;
        for i in base..base + spatial {
            acc += f(i);
        }
    }
    acc
}

pub fn batch_norm_train<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<BatchNormTrain<T>> {
    let channels = gamma.numel();
    let (batch, spatial) = channel_layout(x.dims(), channels)?;
    let n = batch * spatial;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "train-mode batch norm needs at least 2 values per channel, input {} has {n}",
            x.shape()
        )));
    }
    let xd = x.data();
    let stats = par::map_range(channels, |c| {
        let mean = channel_sum(batch, channels, spatial, c, |i| xd[i].f64()) / n as f64;
        let ss = channel_sum(batch, channels, spatial, c, |i| {
            let d = xd[i].f64() - mean;
            d * d
        });
        let var = ss / n as f64;
        (mean, var, ss / (n - 1) as f64)
    });
    let inv_std: Vec<f64> = stats.iter().map(|s| 1.0 / (s.1 + eps).sqrt()).collect();
    let (g, bt) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.numel()];
    let mut norm = vec![T::zero(); x.numel()];
    par::for_each_chunk_pair_mut(&mut out, spatial, &mut norm, spatial, |idx, o, h| {
        let c = idx % channels;
        let (mean, is) = (stats[c].0, inv_std[c]);
        let src = &xd[idx * spatial..(idx + 1) * spatial];
        for ((o, h), &v) in o.iter_mut().zip(h.iter_mut()).zip(src) {
            let xh = T::of((v.f64() - mean) * is);
            *h = xh;
            *o = g[c] * xh + bt[c];
        }
    });
    Ok(BatchNormTrain {
        output: Tensor::from_parts(x.shape().clone(), out),
        normalized: Tensor::from_parts(x.shape().clone(), norm),
        inv_std: inv_std.iter().map(|&v| T::of(v)).collect(),
        mean: stats.iter().map(|s| T::of(s.0)).collect(),
        var_unbiased: stats.iter().map(|s| T::of(s.2)).collect(),
    })
}

/// Returns (grad_input, grad_gamma, grad_beta) for the train-mode forward.
pub fn batch_norm_train_backward<T: Float>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let channels = gamma.numel();
    let dims = grad_out.dims();
    let (batch, spatial) = (dims[0], dims[2..].iter().product::<usize>());
    let n = (batch * spatial) as f64;
    let gy = grad_out.data();
    let xh = normalized.data();
    let sums = par::map_range(channels, |c| {
        let sg = channel_sum(batch, channels, spatial, c, |i| gy[i].f64());
        let sgx = channel_sum(batch, channels, spatial, c, |i| gy[i].f64() * xh[i].f64());
        (sg, sgx)
    });
    let g = gamma.data();
    let mut gx = vec![T::zero(); grad_out.numel()];
    par::for_each_chunk_mut(&mut gx, spatial, |idx, dst| {
        let c = idx % channels;
        let (sg, sgx) = sums[c];
        let k = g[c].f64() * inv_std[c].f64() / n;
        let base = idx * spatial;
        for (i, d) in dst.iter_mut().enumerate() {
            let j = base + i;
            *d = T::of(k * (n * gy[j].f64() - sg - xh[j].f64() * sgx));
        }
    });
    let shape_c = Shape::new([channels]).unwrap();
    (
        Tensor::from_parts(grad_out.shape().clone(), gx),
        Tensor::from_parts(shape_c.clone(), sums.iter().map(|s| T::of(s.1)).collect()),
        Tensor::from_parts(shape_c, sums.iter().map(|s| T::of(s.0)).collect()),
    )
}

/// Eval-mode batch norm with running statistics. Returns output and the
/// normalized input (needed for the gamma gradient).
pub fn batch_norm_eval<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let channels = gamma.numel();
    let (_, spatial) = channel_layout(x.dims(), channels)?;
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::of(1.0 / (v.f64() + eps).sqrt())).collect();
    let (g, bt, rm) = (gamma.data(), beta.data(), running_mean.data());
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    let mut norm = vec![T::zero(); x.numel()];
    par::for_each_chunk_pair_mut(&mut out, spatial, &mut norm, spatial, |idx, o, h| {
        let c = idx % channels;
        let src = &xd[idx * spatial..(idx + 1) * spatial];
        for ((o, h), &v) in o.iter_mut().zip(h.iter_mut()).zip(src) {
            let xh = (v - rm[c]) * inv_std[c];
            *h = xh;
            *o = g[c] * xh + bt[c];
        }
    });
    Ok((
        Tensor::from_parts(x.shape().clone(), out),
        Tensor::from_parts(x.shape().clone(), norm),
        inv_std,
    ))
}

pub fn batch_norm_eval_backward<T: Float>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let channels = gamma.numel();
    let dims = grad_out.dims();
    let spatial: usize = dims[2..].iter().product();
    let gy = grad_out.data();
    let xh = normalized.data();
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); channels];
    let mut gb = vec![T::zero(); channels];
    for (idx, chunk) in gy.chunks(spatial).enumerate() {
        let c = idx % channels;
        let k = gamma.data()[c] * inv_std[c];
        for (i, &g) in chunk.iter().enumerate() {
            let j = idx * spatial + i;
            gx[j] = g * k;
            gg[c] += g * xh[j];
            gb[c] += g;
        }
    }
    let shape_c = Shape::new([channels]).unwrap();
    (
        Tensor::from_parts(grad_out.shape().clone(), gx),
        Tensor::from_parts(shape_c.clone(), gg),
        Tensor::from_parts(shape_c, gb),
    )
}

pub struct LayerNormOutput<T: Float> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes over the last axis with population variance.
pub fn layer_norm<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<LayerNormOutput<T>> {
    let d = gamma.numel();
    if x.dims().is_empty() || x.shape().last() != d {
        return Err(shape_err!("layer norm over {d} features got input {}", x.shape()));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    let mut norm = Vec::with_capacity(x.numel());
    let mut inv = Vec::with_capacity(x.numel() / d);
    for row in x.data().chunks(d) {
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv.push(T::of(is));
        for (j, &v) in row.iter().enumerate() {
            let xh = T::of((v.f64() - mean) * is);
            norm.push(xh);
            out.push(g[j] * xh + b[j]);
        }
    }
    Ok(LayerNormOutput {
        output: Tensor::from_parts(x.shape().clone(), out),
        normalized: Tensor::from_parts(x.shape().clone(), norm),
        inv_std: inv,
    })
}

pub fn layer_norm_backward<T: Float>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let gm = gamma.data();
    let mut gx = Vec::with_capacity(grad_out.numel());
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    for ((gy, xh), &is) in grad_out.data().chunks(d).zip(normalized.data().chunks(d)).zip(inv_std) {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            let g = (gy[j] * gm[j]).f64();
            mean_g += g;
            mean_gx += g * xh[j].f64();
            gg[j] += gy[j] * xh[j];
            gb[j] += gy[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            let g = (gy[j] * gm[j]).f64();
            gx.push(T::of(is.f64() * (g - mean_g - xh[j].f64() * mean_gx)));
        }
    }
    let shape_d = Shape::new([d]).unwrap();
    (
        Tensor::from_parts(grad_out.shape().clone(), gx),
        Tensor::from_parts(shape_d.clone(), gg),
        Tensor::from_parts(shape_d, gb),
    )
}
