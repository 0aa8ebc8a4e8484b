use crate::element::Float;
use crate::error::{shape_err, Result};
use crate::ops::conv::output_extent;
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Max-pool output plus, for every output element, the flat offset of the
/// winning input inside its `(b, c)` volume.
pub struct MaxPoolOutput<T: Float> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

pub fn maxpool3d_output_dims(input: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Result<Vec<usize>> {
    if input.len() != 5 {
        return Err(shape_err!("maxpool3d input must be B×C×T×H×W, got {input:?}"));
    }
    let mut dims = input[..2].to_vec();
    for a in 0..3 {
        if input[2 + a] < kernel[a] {
            return Err(shape_err!(
                "maxpool3d extent {} on axis {} is smaller than kernel {}",
                input[2 + a],
                a + 2,
                kernel[a]
            ));
        }
        dims.push(output_extent(input[2 + a], kernel[a], stride[a], 0).unwrap());
    }
    Ok(dims)
}

/// Windowed maximum. Ties go to the first maximal element in scan order.
pub fn maxpool3d<T: Float>(input: &Tensor<T>, kernel: [usize; 3], stride: [usize; 3]) -> Result<MaxPoolOutput<T>> {
    let out_dims = maxpool3d_output_dims(input.dims(), kernel, stride)?;
    let [t_n, h_n, w_n] = [input.dims()[2], input.dims()[3], input.dims()[4]];
    let [to_n, ho_n, wo_n] = [out_dims[2], out_dims[3], out_dims[4]];
    let in_vol = t_n * h_n * w_n;
    let out_vol = to_n * ho_n * wo_n;
    let planes = out_dims[0] * out_dims[1];
    let x = input.data();
    let mut out = vec![T::zero(); planes * out_vol];
    let mut arg = vec![0u32; planes * out_vol];
    par::for_each_chunk_pair_mut(&mut out, out_vol, &mut arg, out_vol, |p, dst, idx| {
        let src = &x[p * in_vol..(p + 1) * in_vol];
        let mut o = 0;
        for to in 0..to_n {
            for ho in 0..ho_n {
                for wo in 0..wo_n {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    let mut first = true;
                    for kt in 0..kernel[0] {
                        let ti = to * stride[0] + kt;
                        for kh in 0..kernel[1] {
                            let hi = ho * stride[1] + kh;
                            for kw in 0..kernel[2] {
                                let i = (ti * h_n + hi) * w_n + wo * stride[2] + kw;
                                let v = src[i];
                                if first || v > best {
                                    best = v;
                                    best_i = i;
                                    first = false;
                                }
                            }
                        }
                    }
                    dst[o] = best;
                    idx[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    });
    Ok(MaxPoolOutput {
        output: Tensor::from_parts(Shape::new(out_dims)?, out),
        argmax: arg,
    })
}

pub fn maxpool3d_backward<T: Float>(input_shape: &Shape, grad_out: &Tensor<T>, argmax: &[u32]) -> Tensor<T> {
    let d = input_shape.dims();
    let in_vol = d[2] * d[3] * d[4];
    let gd = grad_out.dims();
    let out_vol = gd[2] * gd[3] * gd[4];
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); input_shape.numel()];
    par::for_each_chunk_mut(&mut gx, in_vol, |p, dst| {
        for o in 0..out_vol {
            dst[argmax[p * out_vol + o] as usize] += gy[p * out_vol + o];
        }
    });
    Tensor::from_parts(input_shape.clone(), gx)
}

/// Target of an adaptive average pool over a `B×C×T×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolTarget {
    /// `H×W → 1×1`, keeping T: output `B×C×T`.
    Spatial,
    /// `T×H×W → 1×1×1`: output `B×C×1×1×1`.
    Full,
}

pub fn adaptive_avg_pool_dims(input: &[usize], target: PoolTarget) -> Result<Vec<usize>> {
    if input.len() != 5 {
        return Err(shape_err!("adaptive pool input must be B×C×T×H×W, got {input:?}"));
    }
    Ok(match target {
        PoolTarget::Spatial => vec![input[0], input[1], input[2]],
        PoolTarget::Full => vec![input[0], input[1], 1, 1, 1],
    })
}

pub fn adaptive_avg_pool<T: Float>(input: &Tensor<T>, target: PoolTarget) -> Result<Tensor<T>> {
    let out_dims = adaptive_avg_pool_dims(input.dims(), target)?;
    let outer: usize = out_dims.iter().product();
    mean_inner(input, outer, out_dims)
}

/// Mean over the last `numel / outer` contiguous values of each of the
/// `outer` rows.
fn mean_inner<T: Float>(input: &Tensor<T>, outer: usize, out_dims: Vec<usize>) -> Result<Tensor<T>> {
    let inner = input.numel() / outer;
    let scale = T::one() / T::of(inner as f64);
    let out = input
        .data()
        .chunks(inner)
        .map(|c| c.iter().copied().sum::<T>() * scale)
        .collect();
    Ok(Tensor::from_parts(Shape::new(out_dims)?, out))
}

/// Backward of any "mean over trailing contiguous values" reduction.
pub fn mean_inner_backward<T: Float>(input_shape: &Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let inner = input_shape.numel() / grad_out.numel();
    let scale = T::one() / T::of(inner as f64);
    let mut gx = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g * scale, inner));
    }
    Tensor::from_parts(input_shape.clone(), gx)
}

/// Mean along `axis`, dropping it.
pub fn mean_axis<T: Float>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let d = input.dims();
    if axis >= d.len() {
        return Err(shape_err!("mean over axis {axis} of rank-{} tensor", d.len()));
    }
    let outer: usize = d[..axis].iter().product();
    let n = d[axis];
    let inner: usize = d[axis + 1..].iter().product();
    let x = input.data();
    let scale = T::one() / T::of(n as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (a, &v) in dst.iter_mut().zip(src) {
                *a += v;
            }
        }
        dst.iter_mut().for_each(|a| *a *= scale);
    }
    let mut od = d[..axis].to_vec();
    od.extend_from_slice(&d[axis + 1..]);
    Ok(Tensor::from_parts(Shape::new(od)?, out))
}

pub fn mean_axis_backward<T: Float>(input_shape: &Shape, axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let d = input_shape.dims();
    let outer: usize = d[..axis].iter().product();
    let n = d[axis];
    let inner: usize = d[axis + 1..].iter().product();
    let scale = T::one() / T::of(n as f64);
    let gy = grad_out.data();
    let mut gx = Vec::with_capacity(input_shape.numel());
    for o in 0..outer {
        for _ in 0..n {
            gx.extend(gy[o * inner..(o + 1) * inner].iter().map(|&g| g * scale));
        }
    }
    Tensor::from_parts(input_shape.clone(), gx)
}
