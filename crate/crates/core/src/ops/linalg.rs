use crate::element::{gemm, Float, MatMut, MatRef};
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// `y = x · Wᵀ + b` over the last axis of `x`; `weight` is `Dout×Din`.
pub fn linear<T: Float>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, din, dout) = linear_dims(input, weight)?;
    if let Some(b) = bias {
        if b.dims() != [dout] {
            return Err(shape_err!("linear bias must be [{dout}], got {}", b.shape()));
        }
    }
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = bias {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    // One GEMM per row keeps every row's arithmetic identical no matter
    // how many rows share the call.
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    for r in 0..rows {
        gemm(
            T::one(),
            MatRef::row_major(input.data(), r * din, 1, din),
            MatRef::row_major(weight.data(), 0, dout, din).t(),
            beta,
            MatMut::row_major(&mut out, r * dout, 1, dout),
        );
    }
    let mut dims = input.dims().to_vec();
    *dims.last_mut().unwrap() = dout;
    Ok(Tensor::from_parts(Shape::new(dims)?, out))
}

fn linear_dims<T: Float>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if weight.dims().len() != 2 {
        return Err(shape_err!("linear weight must be Dout×Din, got {}", weight.shape()));
    }
    let (dout, din) = (weight.dims()[0], weight.dims()[1]);
    if input.dims().is_empty() || input.shape().last() != din {
        return Err(shape_err!(
            "linear expects trailing extent {din}, got input {}",
            input.shape()
        ));
    }
    Ok((input.numel() / din, din, dout))
}

pub struct LinearGrads<T: Float> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn linear_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<LinearGrads<T>> {
    let (rows, din, dout) = linear_dims(input, weight)?;
    let gy = grad_out.data();
    let gx = need[0].then(|| {
        let mut gx = vec![T::zero(); rows * din];
        gemm(
            T::one(),
            MatRef::row_major(gy, 0, rows, dout),
            MatRef::row_major(weight.data(), 0, dout, din),
            T::zero(),
            MatMut::row_major(&mut gx, 0, rows, din),
        );
        Tensor::from_parts(input.shape().clone(), gx)
    });
    let gw = need[1].then(|| {
        let mut gw = vec![T::zero(); dout * din];
        gemm(
            T::one(),
            MatRef::row_major(gy, 0, rows, dout).t(),
            MatRef::row_major(input.data(), 0, rows, din),
            T::zero(),
            MatMut::row_major(&mut gw, 0, dout, din),
        );
        Tensor::from_parts(weight.shape().clone(), gw)
    });
    let gb = need[2].then(|| {
        let mut gb = vec![T::zero(); dout];
        for row in gy.chunks(dout) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_parts(Shape::new([dout]).unwrap(), gb)
    });
    Ok(LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Batched matrix product over matching leading axes:
/// `[..., M, K] · [..., K, N]`, or `[..., M, K] · [..., N, K]ᵀ` when
/// `transpose_rhs` is set.
pub fn matmul<T: Float>(lhs: &Tensor<T>, rhs: &Tensor<T>, transpose_rhs: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(lhs.dims(), rhs.dims(), transpose_rhs)?;
    let mut out = vec![T::zero(); batch * m * n];
    for b in 0..batch {
        let r = MatRef::row_major(rhs.data(), b * k * n, if transpose_rhs { n } else { k }, if transpose_rhs { k } else { n });
        gemm(
            T::one(),
            MatRef::row_major(lhs.data(), b * m * k, m, k),
            if transpose_rhs { r.t() } else { r },
            T::zero(),
            MatMut::row_major(&mut out, b * m * n, m, n),
        );
    }
    let mut dims = lhs.dims()[..lhs.dims().len() - 2].to_vec();
    dims.extend([m, n]);
    Ok(Tensor::from_parts(Shape::new(dims)?, out))
}

fn matmul_dims(l: &[usize], r: &[usize], transpose_rhs: bool) -> Result<(usize, usize, usize, usize)> {
    if l.len() < 2 || l.len() != r.len() || l[..l.len() - 2] != r[..r.len() - 2] {
        return Err(shape_err!("matmul of {l:?} and {r:?}"));
    }
    let (m, k) = (l[l.len() - 2], l[l.len() - 1]);
    let (rk, n) = if transpose_rhs {
        (r[r.len() - 1], r[r.len() - 2])
    } else {
        (r[r.len() - 2], r[r.len() - 1])
    };
    if rk != k {
        return Err(shape_err!("matmul inner extents differ: {l:?} and {r:?} (transpose_rhs={transpose_rhs})"));
    }
    Ok((l[..l.len() - 2].iter().product(), m, k, n))
}

/// Returns (grad_lhs, grad_rhs).
pub fn matmul_backward<T: Float>(
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    transpose_rhs: bool,
    grad_out: &Tensor<T>,
    need: [bool; 2],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (batch, m, k, n) = matmul_dims(lhs.dims(), rhs.dims(), transpose_rhs)?;
    let gy = grad_out.data();
    let gl = need[0].then(|| {
        let mut gl = vec![T::zero(); batch * m * k];
        for b in 0..batch {
            // dL = dY · Bᵀ  (B is K×N) or dY · B' (B' is N×K)
            let r = if transpose_rhs {
                MatRef::row_major(rhs.data(), b * k * n, n, k)
            } else {
                MatRef::row_major(rhs.data(), b * k * n, k, n).t()
            };
            gemm(
                T::one(),
                MatRef::row_major(gy, b * m * n, m, n),
                r,
                T::zero(),
                MatMut::row_major(&mut gl, b * m * k, m, k),
            );
        }
        Tensor::from_parts(lhs.shape().clone(), gl)
    });
    let gr = need[1].then(|| {
        let mut gr = vec![T::zero(); batch * k * n];
        for b in 0..batch {
            let a = MatRef::row_major(lhs.data(), b * m * k, m, k);
            let dy = MatRef::row_major(gy, b * m * n, m, n);
            if transpose_rhs {
                // d(B') = dYᵀ · A  : N×K
                gemm(T::one(), dy.t(), a, T::zero(), MatMut::row_major(&mut gr, b * k * n, n, k));
            } else {
                // dB = Aᵀ · dY : K×N
                gemm(T::one(), a.t(), dy, T::zero(), MatMut::row_major(&mut gr, b * k * n, k, n));
            }
        }
        Tensor::from_parts(rhs.shape().clone(), gr)
    });
    Ok((gl, gr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn identity_weight_is_identity() {
        let x = Tensor::<f32>::create([4, 3], Fill::Normal { mean: 0.0, std: 1.0, seed: 3 }).unwrap();
        let w = Tensor::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::<f32>::zeros([3]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn trailing_mismatch() {
        let x = Tensor::<f32>::zeros([2, 5]).unwrap();
        let w = Tensor::<f32>::zeros([3, 4]).unwrap();
        assert!(matches!(linear(&x, &w, None), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_vec([1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec([1, 2, 2], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&a, &b, false).unwrap().data(), &[19., 22., 43., 50.]);
        assert_eq!(matmul(&a, &b, true).unwrap().data(), &[17., 23., 39., 53.]);
    }
}
