//! 3-D cross-correlation over `B×C×T×H×W` tensors.
//!
//! Two forward kernels: a direct loop kernel and an im2col + GEMM kernel
//! tiled per (batch item, output frame). The backward pass always goes
//! through im2col/col2im.

use crate::element::{gemm, Float, MatMut, MatRef};
use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Stride 1, padding 1: the "same" 3×3×3 convolution.
    pub fn same3() -> Self {
        Self::new([1, 1, 1], [1, 1, 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.input[1] * self.input[2]
    }
    fn in_volume(&self) -> usize {
        self.input[0] * self.in_plane()
    }
    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }
    fn out_volume(&self) -> usize {
        self.output[0] * self.out_plane()
    }
    fn patch(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }
}

pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output dims for an input of shape `input` and weight of shape `weight`.
pub fn conv3d_output_dims(input: &[usize], weight: &[usize], spec: &Conv3dSpec) -> Result<Vec<usize>> {
    Ok(geometry(input, weight, spec)?.output_dims())
}

impl Geometry {
    fn output_dims(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }
}

pub(crate) fn geometry(input: &[usize], weight: &[usize], spec: &Conv3dSpec) -> Result<Geometry> {
    if input.len() != 5 {
        return Err(shape_err!("conv3d input must be B×C×T×H×W, got {input:?}"));
    }
    if weight.len() != 5 {
        return Err(shape_err!("conv3d weight must be Cout×Cin×kT×kH×kW, got {weight:?}"));
    }
    if input[1] != weight[1] {
        return Err(shape_err!(
            "conv3d channel mismatch: input has {} channels, weight expects {}",
            input[1],
            weight[1]
        ));
    }
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = output_extent(input[2 + a], weight[2 + a], spec.stride[a], spec.padding[a])
            .filter(|&o| o >= 1)
            .ok_or_else(|| {
                shape_err!(
                    "conv3d output extent non-positive on axis {} (input {}, kernel {}, stride {}, padding {})",
                    a + 2,
                    input[2 + a],
                    weight[2 + a],
                    spec.stride[a],
                    spec.padding[a]
                )
            })?;
    }
    Ok(Geometry {
        batch: input[0],
        cin: input[1],
        cout: weight[0],
        input: [input[2], input[3], input[4]],
        kernel: [weight[2], weight[3], weight[4]],
        output,
        stride: spec.stride,
        padding: spec.padding,
    })
}

/// Range of output positions `o` for which `o * stride + k - pad` lands in
/// `[0, extent)`.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    // o * stride + k >= pad  and  o * stride + k - pad < extent
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Fills `cols` (patch × out_plane, row-major) with the receptive fields of
/// output frame `to` of batch item `x` (a `Cin×T×H×W` slice).
fn im2col_frame<T: Float>(g: &Geometry, x: &[T], to: usize, cols: &mut [T]) {
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [_, ho_n, wo_n] = g.output;
    let [t_n, h_n, w_n] = g.input;
    let [_, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.cin {
        for kt in 0..kt_n {
            let ti = (to * g.stride[0] + kt) as isize - pt as isize;
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    row += 1;
                    if ti < 0 || ti >= t_n as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * g.in_volume() + ti as usize * g.in_plane()..];
                    let (wlo, whi) = valid_range(wo_n, sw, kw, pw, w_n);
                    for ho in 0..ho_n {
                        let d = &mut dst[ho * wo_n..(ho + 1) * wo_n];
                        let hi = (ho * sh + kh) as isize - ph as isize;
                        if hi < 0 || hi >= h_n as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let srow = &src[hi as usize * w_n..(hi as usize + 1) * w_n];
                        d[..wlo].fill(T::zero());
                        d[whi..].fill(T::zero());
                        if whi <= wlo {
                            continue;
                        }
                        if sw == 1 {
                            let start = wlo + kw - pw;
                            d[wlo..whi].copy_from_slice(&srow[start..start + (whi - wlo)]);
                        } else {
                            for wo in wlo..whi {
                                d[wo] = srow[wo * sw + kw - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into a `Cin×T×H×W` gradient slice.
fn col2im_frame<T: Float>(g: &Geometry, cols: &[T], to: usize, gx: &mut [T]) {
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [_, ho_n, wo_n] = g.output;
    let [t_n, h_n, w_n] = g.input;
    let [_, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let plane = g.out_plane();
    let in_plane = g.in_plane();
    let in_volume = g.in_volume();
    let mut row = 0;
    for ci in 0..g.cin {
        for kt in 0..kt_n {
            let ti = (to * g.stride[0] + kt) as isize - pt as isize;
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let src = &cols[row * plane..(row + 1) * plane];
                    row += 1;
                    if ti < 0 || ti >= t_n as isize {
                        continue;
                    }
                    let base = ci * in_volume + ti as usize * in_plane;
                    let (wlo, whi) = valid_range(wo_n, sw, kw, pw, w_n);
                    for ho in 0..ho_n {
                        let hi = (ho * sh + kh) as isize - ph as isize;
                        if hi < 0 || hi >= h_n as isize {
                            continue;
                        }
                        let drow = &mut gx[base + hi as usize * w_n..base + (hi as usize + 1) * w_n];
                        let s = &src[ho * wo_n..(ho + 1) * wo_n];
                        for wo in wlo..whi {
                            drow[wo * sw + kw - pw] += s[wo];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Float>(g: &Geometry, bias: Option<&Tensor<T>>) -> Result<()> {
    if let Some(b) = bias {
        if b.dims() != [g.cout] {
            return Err(shape_err!("conv3d bias must have shape [{}], got {}", g.cout, b.shape()));
        }
    }
    Ok(())
}

pub fn conv3d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv3dSpec,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = geometry(input.dims(), weight.dims(), spec)?;
    check_bias(&g, bias)?;
    let out = match algo {
        ConvAlgo::Direct => forward_direct(&g, input.data(), weight.data(), bias.map(|b| b.data())),
        ConvAlgo::Im2col => forward_im2col(&g, input.data(), weight.data(), bias.map(|b| b.data())),
    };
    Ok(Tensor::from_parts(Shape::new(g.output_dims())?, out))
}

fn forward_direct<T: Float>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [to_n, ho_n, wo_n] = g.output;
    let [t_n, h_n, w_n] = g.input;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let ovol = g.out_volume();
    let mut out = vec![T::zero(); g.batch * g.cout * ovol];
    // one chunk per (batch item, output channel)
    par::for_each_chunk_mut(&mut out, ovol, |idx, dst| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        let xb = &x[b * g.cin * g.in_volume()..(b + 1) * g.cin * g.in_volume()];
        for ci in 0..g.cin {
            let xc = &xb[ci * g.in_volume()..(ci + 1) * g.in_volume()];
            for kt in 0..kt_n {
                let (tlo, thi) = valid_range(to_n, st, kt, pt, t_n);
                for kh in 0..kh_n {
                    let (hlo, hhi) = valid_range(ho_n, sh, kh, ph, h_n);
                    for kw in 0..kw_n {
                        let (wlo, whi) = valid_range(wo_n, sw, kw, pw, w_n);
                        let wv = w[(((co * g.cin + ci) * kt_n + kt) * kh_n + kh) * kw_n + kw];
                        for to in tlo..thi {
                            let ti = to * st + kt - pt;
                            for ho in hlo..hhi {
                                let hi = ho * sh + kh - ph;
                                let srow = &xc[(ti * h_n + hi) * w_n..(ti * h_n + hi + 1) * w_n];
                                let drow = &mut dst[(to * ho_n + ho) * wo_n..(to * ho_n + ho + 1) * wo_n];
                                if sw == 1 {
                                    let off = kw as isize - pw as isize;
                                    for wo in wlo..whi {
                                        drow[wo] += wv * srow[(wo as isize + off) as usize];
                                    }
                                } else {
                                    for wo in wlo..whi {
                                        drow[wo] += wv * srow[wo * sw + kw - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn forward_im2col<T: Float>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let to_n = g.output[0];
    let tile = g.cout * plane;
    let in_item = g.cin * g.in_volume();
    // tiles laid out as [B, To, Cout, plane]; transposed to [B, Cout, To, plane] below
    let mut tiles = vec![T::zero(); g.batch * to_n * tile];
    par::for_each_chunk_mut(&mut tiles, tile, |idx, dst| {
        let (b, to) = (idx / to_n, idx % to_n);
        let mut cols = vec![T::zero(); patch * plane];
        im2col_frame(g, &x[b * in_item..(b + 1) * in_item], to, &mut cols);
        gemm(
            T::one(),
            MatRef::row_major(w, 0, g.cout, patch),
            MatRef::row_major(&cols, 0, patch, plane),
            T::zero(),
            MatMut::row_major(dst, 0, g.cout, plane),
        );
    });
    let mut out = vec![T::zero(); tiles.len()];
    let item = g.cout * to_n * plane;
    par::for_each_chunk_mut(&mut out, item, |b, dst| {
        for to in 0..to_n {
            for co in 0..g.cout {
                let s = ((b * to_n + to) * g.cout + co) * plane;
                let d = (co * to_n + to) * plane;
                let src = &tiles[s..s + plane];
                let row = &mut dst[d..d + plane];
                match bias {
                    Some(bias) => {
                        for (o, &v) in row.iter_mut().zip(src) {
                            *o = v + bias[co];
                        }
                    }
                    None => row.copy_from_slice(src),
                }
            }
        }
    });
    out
}

/// Gradients of a conv3d call. Only the requested ones are computed.
pub struct Conv3dGrads<T: Float> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv3dSpec,
    need: [bool; 3],
) -> Result<Conv3dGrads<T>> {
    let g = geometry(input.dims(), weight.dims(), spec)?;
    if grad_out.dims() != g.output_dims().as_slice() {
        return Err(shape_err!(
            "conv3d grad_out {} does not match output {:?}",
            grad_out.shape(),
            g.output_dims()
        ));
    }
    let [need_x, need_w, need_b] = need;
    let x = input.data();
    let w = weight.data();
    let gy = grad_out.data();
    let plane = g.out_plane();
    let patch = g.patch();
    let to_n = g.output[0];
    let out_item = g.cout * g.out_volume();
    let in_item = g.cin * g.in_volume();

    let grad_b = need_b.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let s = b * out_item + co * g.out_volume();
                *acc += gy[s..s + g.out_volume()].iter().copied().sum::<T>();
            }
        }
        Tensor::from_parts(Shape::new([g.cout]).unwrap(), gb)
    });

    let grad_w = if need_w {
        // per-batch partials, summed in batch order so the result does not
        // depend on scheduling
        let partials = par::map_range(g.batch, |b| {
            let mut acc = vec![T::zero(); g.cout * patch];
            let mut cols = vec![T::zero(); patch * plane];
            for to in 0..to_n {
                im2col_frame(&g, &x[b * in_item..(b + 1) * in_item], to, &mut cols);
                let gy_tile = MatRef {
                    data: gy,
                    offset: b * out_item + to * plane,
                    rows: g.cout,
                    cols: plane,
                    row_stride: g.out_volume(),
                    col_stride: 1,
                };
                gemm(
                    T::one(),
                    gy_tile,
                    MatRef::row_major(&cols, 0, patch, plane).t(),
                    T::one(),
                    MatMut::row_major(&mut acc, 0, g.cout, patch),
                );
            }
            acc
        });
        let mut gw = vec![T::zero(); g.cout * patch];
        for p in partials {
            for (a, v) in gw.iter_mut().zip(p) {
                *a += v;
            }
        }
        Some(Tensor::from_parts(weight.shape().clone(), gw))
    } else {
        None
    };

    let grad_x = if need_x {
        let mut gx = vec![T::zero(); g.batch * in_item];
        par::for_each_chunk_mut(&mut gx, in_item, |b, dst| {
            let mut cols = vec![T::zero(); patch * plane];
            for to in 0..to_n {
                let gy_tile = MatRef {
                    data: gy,
                    offset: b * out_item + to * plane,
                    rows: g.cout,
                    cols: plane,
                    row_stride: g.out_volume(),
                    col_stride: 1,
                };
                gemm(
                    T::one(),
                    MatRef::row_major(w, 0, g.cout, patch).t(),
                    gy_tile,
                    T::zero(),
                    MatMut::row_major(&mut cols, 0, patch, plane),
                );
                col2im_frame(&g, &cols, to, dst);
            }
        });
        Some(Tensor::from_parts(input.shape().clone(), gx))
    } else {
        None
    };

    Ok(Conv3dGrads {
        input: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn ones_cube_sums_to_27() {
        let x = Tensor::<f32>::create([1, 1, 3, 3, 3], Fill::Ones).unwrap();
        let w = Tensor::<f32>::create([1, 1, 3, 3, 3], Fill::Ones).unwrap();
        let spec = Conv3dSpec::new([1, 1, 1], [0, 0, 0]);
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let y = conv3d(&x, &w, None, &spec, algo).unwrap();
            assert_eq!(y.dims(), &[1, 1, 1, 1, 1]);
            assert_eq!(y.data(), &[27.0]);
        }
    }

    #[test]
    fn stem_shape_preserved() {
        let dims = conv3d_output_dims(&[2, 16, 5, 60, 90], &[64, 16, 3, 3, 3], &Conv3dSpec::same3()).unwrap();
        assert_eq!(dims, vec![2, 64, 5, 60, 90]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let err = conv3d_output_dims(&[1, 8, 4, 4, 4], &[4, 16, 3, 3, 3], &Conv3dSpec::same3());
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn non_positive_output_is_shape_error() {
        let spec = Conv3dSpec::new([1, 1, 1], [0, 0, 0]);
        assert!(conv3d_output_dims(&[1, 1, 2, 5, 5], &[1, 1, 3, 3, 3], &spec).is_err());
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for out in 1..6 {
            for stride in 1..3 {
                for k in 0..5 {
                    for pad in 0..3 {
                        for extent in 1..8 {
                            let (lo, hi) = valid_range(out, stride, k, pad, extent);
                            let brute: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + k) as isize - pad as isize;
                                    i >= 0 && i < extent as isize
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "out={out} s={stride} k={k} p={pad} e={extent}");
                        }
                    }
                }
            }
        }
    }
}
