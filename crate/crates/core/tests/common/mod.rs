//! Brute-force reference implementations and a finite-difference gradient
//! checker, written independently of the library kernels.
#![allow(dead_code)]

use latentguard_core::autograd::{Tape, Var};
use latentguard_core::layers::{Context, Layer, Mode, ParamStore, RngStream};
use latentguard_core::probes::{ProbeConfig, ProbeKind};
use latentguard_core::tensor::{Fill, Tensor};
use latentguard_core::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn randn<T: Float>(dims: &[usize], seed: u64) -> Tensor<T> {
    Tensor::create(dims.to_vec(), Fill::Normal { mean: 0.0, std: 1.0, seed }).unwrap()
}

fn at5(d: &[usize], i: [usize; 5]) -> usize {
    (((i[0] * d[1] + i[1]) * d[2] + i[2]) * d[3] + i[3]) * d[4] + i[4]
}

/// Direct 7-deep loop convolution with zero padding.
pub fn conv3d_naive(
    x: &[f64],
    xd: &[usize],
    w: &[f64],
    wd: &[usize],
    b: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, Vec<usize>) {
    let od: Vec<usize> = (0..3).map(|a| (xd[a + 2] + 2 * pad[a] - wd[a + 2]) / stride[a] + 1).collect();
    let out_dims = vec![xd[0], wd[0], od[0], od[1], od[2]];
    let mut y = vec![0.0; out_dims.iter().product()];
    for n in 0..xd[0] {
        for co in 0..wd[0] {
            for t in 0..od[0] {
                for h in 0..od[1] {
                    for ww in 0..od[2] {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for ci in 0..wd[1] {
                            for kt in 0..wd[2] {
                                for kh in 0..wd[3] {
                                    for kw in 0..wd[4] {
                                        let it = (t * stride[0] + kt) as isize - pad[0] as isize;
                                        let ih = (h * stride[1] + kh) as isize - pad[1] as isize;
                                        let iw = (ww * stride[2] + kw) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= xd[2] || ih >= xd[3] || iw >= xd[4] {
                                            continue;
                                        }
                                        acc += x[at5(xd, [n, ci, it, ih, iw])] * w[at5(wd, [co, ci, kt, kh, kw])];
                                    }
                                }
                            }
                        }
                        y[at5(&out_dims, [n, co, t, h, ww])] = acc;
                    }
                }
            }
        }
    }
    (y, out_dims)
}

/// Floor-mode max pool, no padding.
pub fn maxpool3d_naive(x: &[f64], xd: &[usize], k: [usize; 3], s: [usize; 3]) -> (Vec<f64>, Vec<usize>) {
    let od: Vec<usize> = (0..3).map(|a| (xd[a + 2] - k[a]) / s[a] + 1).collect();
    let out_dims = vec![xd[0], xd[1], od[0], od[1], od[2]];
    let mut y = vec![0.0; out_dims.iter().product()];
    for n in 0..xd[0] {
        for c in 0..xd[1] {
            for t in 0..od[0] {
                for h in 0..od[1] {
                    for w in 0..od[2] {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for cc in 0..k[2] {
                                    m = m.max(x[at5(xd, [n, c, t * s[0] + a, h * s[1] + bb, w * s[2] + cc])]);
                                }
                            }
                        }
                        y[at5(&out_dims, [n, c, t, h, w])] = m;
                    }
                }
            }
        }
    }
    (y, out_dims)
}

/// Mean over H×W (spatial) or T×H×W (full) per (batch, channel[, frame]).
pub fn avgpool_naive(x: &[f64], xd: &[usize], spatial: bool) -> Vec<f64> {
    let mut y = Vec::new();
    for n in 0..xd[0] {
        for c in 0..xd[1] {
            if spatial {
                for t in 0..xd[2] {
                    let mut s = 0.0;
                    for h in 0..xd[3] {
                        for w in 0..xd[4] {
                            s += x[at5(xd, [n, c, t, h, w])];
                        }
                    }
                    y.push(s / (xd[3] * xd[4]) as f64);
                }
            } else {
                let mut s = 0.0;
                for t in 0..xd[2] {
                    for h in 0..xd[3] {
                        for w in 0..xd[4] {
                            s += x[at5(xd, [n, c, t, h, w])];
                        }
                    }
                }
                y.push(s / (xd[2] * xd[3] * xd[4]) as f64);
            }
        }
    }
    y
}

/// `y[r, o] = b[o] + Σ_i x[r, i] w[o, i]`.
pub fn linear_naive(x: &[f64], rows: usize, din: usize, w: &[f64], dout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..din {
                acc += x[r * din + i] * w[o * din + i];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

/// Binary cross-entropy `-(y ln p + (1 - y) ln(1 - p))` on the
/// violating-class probability `p = σ(l1 - l0)`. `1 - p` is evaluated as
/// `σ(l0 - l1)`; subtracting from one loses digits once `p` nears 1.
pub fn binary_ce(logits: [f64; 2], violating: bool) -> f64 {
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let p = sigmoid(logits[1] - logits[0]);
    let q = sigmoid(logits[0] - logits[1]);
    let y = if violating { 1.0 } else { 0.0 };
    -(y * p.ln() + (1.0 - y) * q.ln())
}

pub fn to_f64<T: Float>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error of an analytic gradient against a numeric one:
/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)`. The floor keeps gradients that are
/// exactly zero (key bias under softmax) from dividing round-off by zero.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-6, f64::max);
    max_abs(analytic, numeric) / scale
}

pub const FD_EPS: f64 = 1e-4;

/// Checks a function of several inputs; the scalar objective is
/// `Σ y ⊙ w` with fixed random weights `w`. Returns the worst relative error
/// over all inputs.
pub fn gradcheck_fn(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars);
    let w = randn::<f64>(y.dims(), 4242);
    let wv = Var::constant(w.clone());
    let prod = tape.mul(&y, &wv).unwrap();
    let loss = tape.sum(&prod);
    let grads = tape.backward(&loss).unwrap();
    let objective = |ins: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var<f64>> = ins.iter().map(|x| Var::constant(x.clone())).collect();
        let y = f(&mut t, &vs);
        y.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(to_f64).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let numeric = numeric_grad(inputs, k, &objective);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn numeric_grad(inputs: &[Tensor<f64>], k: usize, objective: &dyn Fn(&[Tensor<f64>]) -> f64) -> Vec<f64> {
    let base = inputs[k].data().to_vec();
    (0..base.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let mut ins = inputs.to_vec();
                ins[k] = Tensor::from_vec(inputs[k].dims().to_vec(), v).unwrap();
                objective(&ins)
            };
            (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Gradient check of a layer with respect to its input and every trainable
/// parameter. Random streams restart at the same point for each evaluation,
/// so dropout masks are fixed.
pub fn gradcheck_layer<L: Layer<f64>>(layer: &L, input_dims: &[usize], mode: Mode, seed: u64) -> f64 {
    let mut store = ParamStore::<f64>::new();
    layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    perturb_norm_params(&mut store, seed);
    let x = randn::<f64>(input_dims, seed + 1);

    let mut ctx = Context::new(&store, mode, true, RngStream::new(seed));
    let xv = ctx.tape.leaf(x.clone(), true);
    let y = layer.forward(&mut ctx, &xv).unwrap();
    let w = randn::<f64>(y.dims(), seed + 2);
    let prod = ctx.tape.mul(&y, &Var::constant(w.clone())).unwrap();
    let loss = ctx.tape.sum(&prod);
    let out = ctx.finish();
    let grads = out.tape.backward(&loss).unwrap();

    let objective = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut ctx = Context::new(store, mode, false, RngStream::new(seed));
        let y = layer.forward(&mut ctx, &Var::constant(x.clone())).unwrap();
        y.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let gx = to_f64(grads.get(&xv).unwrap());
    let nx: Vec<f64> = (0..x.numel())
        .map(|i| {
            let shifted = |d: f64| {
                let mut v = x.data().to_vec();
                v[i] += d;
                objective(&store, &Tensor::from_vec(x.dims().to_vec(), v).unwrap())
            };
            (shifted(FD_EPS) - shifted(-FD_EPS)) / (2.0 * FD_EPS)
        })
        .collect();
    let mut worst = rel_err(&gx, &nx);

    let names: Vec<String> = store.parameters().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = store.get(&name).unwrap().clone();
        let analytic = out.params.get(&name).and_then(|v| grads.get(v)).map(to_f64).unwrap_or_else(|| vec![0.0; p.numel()]);
        let numeric: Vec<f64> = (0..p.numel())
            .map(|i| {
                let shifted = |d: f64| {
                    let mut v = p.data().to_vec();
                    v[i] += d;
                    let mut s = store.clone();
                    s.set(&name, Tensor::from_vec(p.dims().to_vec(), v).unwrap()).unwrap();
                    objective(&s, &x)
                };
                (shifted(FD_EPS) - shifted(-FD_EPS)) / (2.0 * FD_EPS)
            })
            .collect();
        let e = rel_err(&analytic, &numeric);
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Moves norm affine parameters and buffers off their identity init so the
/// check exercises them.
fn perturb_norm_params(store: &mut ParamStore<f64>, seed: u64) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (k, n) in names.iter().enumerate() {
        let t = store.get(n).unwrap().clone();
        let noise = randn::<f64>(t.dims(), seed * 31 + k as u64);
        let v = if n.ends_with("running_var") {
            t.zip_map(&noise, |a, b| a + 0.25 * b.abs()).unwrap()
        } else {
            t.zip_map(&noise, |a, b| a + 0.1 * b).unwrap()
        };
        store.set(n, v).unwrap();
    }
}

/// Small configurations with the production topology.
pub fn tiny_config(kind: ProbeKind) -> ProbeConfig {
    ProbeConfig {
        height: 8,
        width: 12,
        stem_width: 4,
        stage_widths: [8, 8],
        encoder_layers: 2,
        heads: 2,
        ffn_width: 16,
        head_hidden: 6,
        se_ratio: 4,
        vanilla_widths: [3, 4, 6],
        vanilla_head_hidden: 5,
        ..ProbeConfig::new(kind)
    }
}
