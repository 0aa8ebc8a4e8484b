use crate::element::Float;
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let d = x.dims();
    let mut seen = vec![false; d.len()];
    if perm.len() != d.len() || perm.iter().any(|&p| p >= d.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {perm:?} for shape {}", x.shape()));
    }
    let in_strides = x.shape().strides();
    let out_dims: Vec<usize> = perm.iter().map(|&p| d[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let rank = out_dims.len();
    if rank == 0 {
        return Ok(x.clone());
    }
    let mut idx = vec![0usize; rank];
    let inner = out_dims[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|k| src[base + k * inner_stride]));
        // odometer over all but the last axis
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return Ok(Tensor::from_parts(Shape::new(out_dims)?, out));
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Scales channel `c` of batch item `b` of a `B×C×...` tensor by `scale[b, c]`.
pub fn scale_channels<T: Float>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() < 2 || scale.dims() != &d[..2] {
        return Err(shape_err!("channel scale {} does not fit input {}", scale.shape(), x.shape()));
    }
    let inner: usize = d[2..].iter().product();
    let mut out = Vec::with_capacity(x.numel());
    for (chunk, &s) in x.data().chunks(inner).zip(scale.data()) {
        out.extend(chunk.iter().map(|&v| v * s));
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

pub fn scale_channels_backward<T: Float>(x: &Tensor<T>, scale: &Tensor<T>, grad_out: &Tensor<T>, need: [bool; 2]) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let inner: usize = x.dims()[2..].iter().product();
    let gx = need[0].then(|| scale_channels(grad_out, scale).expect("shapes checked in forward"));
    let gs = need[1].then(|| {
        let v = x
            .data()
            .chunks(inner)
            .zip(grad_out.data().chunks(inner))
            .map(|(xc, gc)| xc.iter().zip(gc).map(|(&a, &b)| a * b).sum())
            .collect();
        Tensor::from_parts(scale.shape().clone(), v)
    });
    (gx, gs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let x = Tensor::<f64>::from_vec([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.dims(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_roundtrip() {
        let n = 2 * 3 * 4 * 5;
        let x = Tensor::<f64>::from_vec([2, 3, 4, 5], (0..n).map(|v| v as f64).collect()).unwrap();
        let perm = [2, 0, 3, 1];
        let y = permute(&x, &perm).unwrap();
        let z = permute(&y, &inverse_permutation(&perm)).unwrap();
        assert!(z.bit_eq(&x));
    }

    #[test]
    fn bad_permutation() {
        let x = Tensor::<f64>::zeros([2, 3]).unwrap();
        assert!(permute(&x, &[0, 0]).is_err());
    }
}
