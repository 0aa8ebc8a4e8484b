use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::element::Float;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimState<T: Float = f32> {
    pub step: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Float> OptimState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Flattened as `m/<name>` and `v/<name>` entries.
    pub fn to_entries(&self) -> IndexMap<String, Tensor<T>> {
        let m = self.m.iter().map(|(n, t)| (format!("m/{n}"), t.clone()));
        let v = self.v.iter().map(|(n, t)| (format!("v/{n}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn from_entries(step: u64, entries: &IndexMap<String, Tensor<T>>) -> Result<Self> {
        let mut s = Self::new();
        s.step = step;
        for (k, t) in entries {
            if let Some(n) = k.strip_prefix("m/") {
                s.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("v/") {
                s.v.insert(n.to_string(), t.clone());
            } else {
                return Err(Error::Format(format!("unknown optimizer entry {k}")));
            }
        }
        Ok(s)
    }
}

/// One AdamW step over the named gradients. Decay is decoupled and applied
/// first: `θ ← θ − η·wd·θ`, then `θ ← θ − η·m̂ / (√v̂ + ε)`.
pub fn adamw_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut OptimState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.dims() != g.dims() {
            return Err(Error::Internal(format!(
                "gradient for {name} has shape {}, parameter {}",
                g.shape(),
                p.shape()
            )));
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::from_parts(p.shape().clone(), vec![T::zero(); n]));
        if m.dims() != p.dims() {
            return Err(Error::Internal(format!("moment shape mismatch for {name}")));
        }
        let mut mv = m.data().to_vec();
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::from_parts(p.shape().clone(), vec![T::zero(); n]));
        let mut vv = v.data().to_vec();
        let mut pv = p.data().to_vec();
        for i in 0..n {
            let gi = g.data()[i].f64();
            let mi = cfg.beta1 * mv[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * vv[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            let theta = pv[i].f64() * decay;
            pv[i] = T::of(theta - cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps));
            mv[i] = T::of(mi);
            vv[i] = T::of(vi);
        }
        let shape = p.shape().clone();
        state.m[name] = Tensor::from_parts(shape.clone(), mv);
        state.v[name] = Tensor::from_parts(shape.clone(), vv);
        store.set(name, Tensor::from_parts(shape, pv))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamKind;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec([vals.len()], vals.to_vec()).unwrap(), ParamKind::Parameter).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = store(&[1.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = vec![("w".to_string(), Tensor::zeros([2]).unwrap())];
        adamw_step(&mut s, &g, &mut OptimState::new(), &cfg).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0, -2.0, 0.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = vec![("w".to_string(), Tensor::from_vec([3], vec![0.3, -7.0, 1e-2]).unwrap())];
        adamw_step(&mut s, &g, &mut OptimState::new(), &cfg).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 5e-3)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 5e-3)).abs() < 1e-6);
        assert!((w[2] - (0.5 - 5e-3)).abs() < 1e-6);
    }

    #[test]
    fn decay_only_scales() {
        let mut s = store(&[2.0]);
        let cfg = AdamWConfig::default();
        let g = vec![("w".to_string(), Tensor::zeros([1]).unwrap())];
        adamw_step(&mut s, &g, &mut OptimState::new(), &cfg).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 2.0 * (1.0 - 5e-3 * 0.01));
    }

    #[test]
    fn shape_mismatch_is_internal() {
        let mut s = store(&[2.0]);
        let g = vec![("w".to_string(), Tensor::zeros([2]).unwrap())];
        assert!(matches!(
            adamw_step(&mut s, &g, &mut OptimState::new(), &AdamWConfig::default()),
            Err(Error::Internal(_))
        ));
    }
}
