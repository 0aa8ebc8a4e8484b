use crate::element::Float;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)`, with Φ the standard normal CDF.
    Gelu,
    Sigmoid,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate<T: Float>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Gelu => x.map(|v| {
            let v = v.f64();
            T::of(v * gauss_cdf(v))
        }),
        Activation::Sigmoid => x.map(|v| T::of(sigmoid(v.f64()))),
    }
}

/// Gradient with respect to the input given the forward input `x` and output `y`.
/// The ReLU derivative at 0 is taken as 0.
pub fn activate_backward<T: Float>(x: &Tensor<T>, y: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let out = match kind {
        Activation::Relu => y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Gelu => x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| {
                let v = v.f64();
                let d = gauss_cdf(v) + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp();
                g * T::of(d)
            })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
    };
    Tensor::from_parts(x.shape().clone(), out)
}
