use crate::element::Float;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Softmax over the last axis, stabilized by subtracting the row maximum.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = x.shape().last();
    if x.dims().is_empty() {
        return Err(shape_err!("softmax of a scalar"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

pub fn softmax_backward<T: Float>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let k = y.shape().last();
    let mut gx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(k).zip(grad_out.data().chunks(k)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_parts(y.shape().clone(), gx)
}

/// Row-wise `log Σ exp`.
fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Checks that `labels` is `B×K` with one-hot rows and returns the class
/// index of every row.
pub fn one_hot_classes<T: Float>(labels: &Tensor<T>) -> Result<Vec<usize>> {
    if labels.dims().len() != 2 {
        return Err(Error::Input(format!("labels must be B×K, got {}", labels.shape())));
    }
    let k = labels.dims()[1];
    labels
        .data()
        .chunks(k)
        .enumerate()
        .map(|(b, row)| {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == T::one()).map(|(i, _)| i).collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() == 1 && zeros == k - 1 {
                Ok(ones[0])
            } else {
                Err(Error::Input(format!("label row {b} is not one-hot: {row:?}")))
            }
        })
        .collect()
}

/// Mean over the batch of `−log softmax(logits)[true class]`, computed with
/// log-sum-exp. Returns the loss and its gradient with respect to the logits,
/// `(softmax − one_hot) / B`.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if logits.shape() != labels.shape() {
        return Err(shape_err!("logits {} vs labels {}", logits.shape(), labels.shape()));
    }
    let classes = one_hot_classes(labels)?;
    let k = logits.dims()[1];
    let b = classes.len();
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(b * k);
    for (row, &c) in logits.data().chunks(k).zip(&classes) {
        let lse = log_sum_exp(row);
        loss += lse - row[c];
        grad.extend(row.iter().enumerate().map(|(j, &v)| {
            let p = (v - lse).exp();
            (if j == c { p - T::one() } else { p }) * inv_b
        }));
    }
    Ok((loss * inv_b, Tensor::from_parts(Shape::new([b, k])?, grad)))
}

/// Per-row losses, without the batch mean.
pub fn cross_entropy_rows<T: Float>(logits: &Tensor<T>, classes: &[usize]) -> Result<Vec<T>> {
    let k = logits.shape().last();
    if logits.numel() != classes.len() * k {
        return Err(shape_err!("{} logits for {} labels", logits.shape(), classes.len()));
    }
    Ok(logits
        .data()
        .chunks(k)
        .zip(classes)
        .map(|(row, &c)| log_sum_exp(row) - row[c])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[3f64.ln(), 0.0])).unwrap();
        assert!((y.data()[0] - 0.75).abs() < 1e-15 && (y.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&t(&[2], &[0.3, -1.2])).unwrap();
        let b = softmax(&t(&[2], &[100.3, 98.8])).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn ce_uniform_logits_is_ln2() {
        let (l, _) = cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated() {
        let (l, _) = cross_entropy(&t(&[1, 2], &[20.0, -20.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!(l < 1e-8 && l >= 0.0);
    }

    #[test]
    fn ce_rejects_non_one_hot() {
        let r = cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[0.5, 0.5]));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn ce_gradient_is_softmax_minus_one_hot() {
        let logits = t(&[2, 2], &[0.2, -0.7, 1.5, 0.1]);
        let labels = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let p = softmax(&logits).unwrap();
        for i in 0..4 {
            let expect = (p.data()[i] - labels.data()[i]) / 2.0;
            assert!((g.data()[i] - expect).abs() < 1e-10);
        }
    }
}
