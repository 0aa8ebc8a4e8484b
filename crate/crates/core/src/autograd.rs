//! Reverse-mode differentiation over a recorded tape.
//!
//! Every op on [`Tape`] computes its forward value eagerly and, when at least
//! one input is tracked, appends a node holding a backward closure. Nodes are
//! appended after their parents, so tape order is a topological order and
//! the backward sweep is a single reverse scan.

use std::collections::HashMap;

use crate::element::Float;
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, activation, conv, layout, linalg, norm, pool, softmax};
use crate::tensor::{Shape, Tensor};

type Grads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Result<Grads<T>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// A value flowing through the tape. Untracked vars are plain constants.
#[derive(Clone)]
pub struct Var<T: Float> {
    id: Option<NodeId>,
    value: Tensor<T>,
}

impl<T: Float> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self { id: None, value }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

struct Node<T: Float> {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
    shape: Shape,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the backward root with respect to every tracked leaf.
pub struct Gradients<T: Float> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(&id))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.id.and_then(|id| self.grads.remove(&id))
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Only leaves with `requires_grad` are recorded.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        if !requires_grad {
            return Var::constant(value);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            shape: value.shape().clone(),
        });
        Var {
            id: Some(id),
            value: value.with_requires_grad(true),
        }
    }

    fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[Option<NodeId>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Result<Grads<T>> + 'static,
    ) -> Var<T> {
        if inputs.iter().all(Option::is_none) {
            return Var::constant(value);
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            parents: inputs.to_vec(),
            backward: Some(Box::new(backward)),
            shape: value.shape().clone(),
        });
        Var {
            id: Some(id),
            value: value.with_requires_grad(true),
        }
    }

    /// Back-propagates from a single-element root, consuming the tape.
    pub fn backward(mut self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {}",
                root.value.shape()
            )));
        }
        let mut grads: HashMap<NodeId, Tensor<T>> = HashMap::new();
        let Some(root_id) = root.id else {
            return Ok(Gradients { grads });
        };
        grads.insert(
            root_id,
            Tensor::from_parts(root.value.shape().clone(), vec![T::one()]),
        );
        let mut leaves = HashMap::new();
        for i in (0..=root_id.0).rev() {
            let id = NodeId(i);
            let Some(g) = grads.remove(&id) else { continue };
            let node = &mut self.nodes[i];
            if g.shape() != &node.shape {
                return Err(Error::Internal(format!(
                    "gradient shape {} differs from node shape {}",
                    g.shape(),
                    node.shape
                )));
            }
            let Some(back) = node.backward.take() else {
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = back(&g, &needs)?;
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else { continue };
                match grads.remove(pid) {
                    Some(acc) => {
                        let sum = acc.zip_map(&pg, |a, b| a + b)?;
                        grads.insert(*pid, sum);
                    }
                    None => {
                        grads.insert(*pid, pg);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.record(y, &[a.id, b.id], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = a.value.zip_map(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(y, &[a.id, b.id], move |g, need| {
            Ok(vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y)).transpose()?,
                need[1].then(|| g.zip_map(&av, |x, y| x * y)).transpose()?,
            ])
        }))
    }

    pub fn scale(&mut self, x: &Var<T>, c: T) -> Var<T> {
        let y = x.value.map(|v| v * c);
        self.record(y, &[x.id], move |g, _| Ok(vec![Some(g.map(|v| v * c))]))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let y = Tensor::scalar(x.value.sum_all());
        let shape = x.value.shape().clone();
        self.record(y, &[x.id], move |g, _| {
            let gv = g.data()[0];
            Ok(vec![Some(Tensor::from_parts(shape.clone(), vec![gv; shape.numel()]))])
        })
    }

    pub fn activation(&mut self, x: &Var<T>, kind: activation::Activation) -> Var<T> {
        let y = activation::activate(&x.value, kind);
        let (xv, yv) = (x.value.clone(), y.clone());
        self.record(y, &[x.id], move |g, _| {
            Ok(vec![Some(activation::activate_backward(&xv, &yv, g, kind))])
        })
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        self.activation(x, activation::Activation::Relu)
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        let y = x.value.reshape(dims.to_vec())?.with_requires_grad(false);
        let in_dims = x.value.dims().to_vec();
        Ok(self.record(y, &[x.id], move |g, _| Ok(vec![Some(g.reshape(in_dims)?)])))
    }

    pub fn permute(&mut self, x: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let y = layout::permute(&x.value, perm)?;
        let inv = layout::inverse_permutation(perm);
        Ok(self.record(y, &[x.id], move |g, _| Ok(vec![Some(layout::permute(g, &inv)?)])))
    }

    pub fn scale_channels(&mut self, x: &Var<T>, scale: &Var<T>) -> Result<Var<T>> {
        let y = layout::scale_channels(&x.value, &scale.value)?;
        let (xv, sv) = (x.value.clone(), scale.value.clone());
        Ok(self.record(y, &[x.id, scale.id], move |g, need| {
            let (gx, gs) = layout::scale_channels_backward(&xv, &sv, g, [need[0], need[1]]);
            Ok(vec![gx, gs])
        }))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = linalg::linear(&x.value, &w.value, b.map(|b| &b.value))?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let has_bias = b.is_some();
        let inputs = [x.id, w.id, b.and_then(|b| b.id)];
        Ok(self.record(y, &inputs, move |g, need| {
            let gr = linalg::linear_backward(&xv, &wv, g, [need[0], need[1], has_bias && need[2]])?;
            Ok(vec![gr.input, gr.weight, gr.bias])
        }))
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>, transpose_rhs: bool) -> Result<Var<T>> {
        let y = linalg::matmul(&a.value, &b.value, transpose_rhs)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(y, &[a.id, b.id], move |g, need| {
            let (ga, gb) = linalg::matmul_backward(&av, &bv, transpose_rhs, g, [need[0], need[1]])?;
            Ok(vec![ga, gb])
        }))
    }

    pub fn conv3d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        spec: conv::Conv3dSpec,
        algo: conv::ConvAlgo,
    ) -> Result<Var<T>> {
        let y = conv::conv3d(&x.value, &w.value, b.map(|b| &b.value), &spec, algo)?;
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let has_bias = b.is_some();
        let inputs = [x.id, w.id, b.and_then(|b| b.id)];
        Ok(self.record(y, &inputs, move |g, need| {
            let gr = conv::conv3d_backward(&xv, &wv, g, &spec, [need[0], need[1], has_bias && need[2]])?;
            Ok(vec![gr.input, gr.weight, gr.bias])
        }))
    }

    // ---- pooling -------------------------------------------------------

    pub fn maxpool3d(&mut self, x: &Var<T>, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var<T>> {
        let out = pool::maxpool3d(&x.value, kernel, stride)?;
        let shape = x.value.shape().clone();
        let argmax = out.argmax;
        Ok(self.record(out.output, &[x.id], move |g, _| {
            Ok(vec![Some(pool::maxpool3d_backward(&shape, g, &argmax))])
        }))
    }

    pub fn adaptive_avg_pool(&mut self, x: &Var<T>, target: pool::PoolTarget) -> Result<Var<T>> {
        let y = pool::adaptive_avg_pool(&x.value, target)?;
        let shape = x.value.shape().clone();
        Ok(self.record(y, &[x.id], move |g, _| Ok(vec![Some(pool::mean_inner_backward(&shape, g))])))
    }

    pub fn mean_axis(&mut self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let y = pool::mean_axis(&x.value, axis)?;
        let shape = x.value.shape().clone();
        Ok(self.record(y, &[x.id], move |g, _| {
            Ok(vec![Some(pool::mean_axis_backward(&shape, axis, g))])
        }))
    }

    // ---- normalization -------------------------------------------------

    /// Train-mode batch norm. Also returns the batch mean and unbiased
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<(Var<T>, Vec<T>, Vec<T>)> {
        let out = norm::batch_norm_train(&x.value, &gamma.value, &beta.value, eps)?;
        let (xh, is, gv) = (out.normalized, out.inv_std, gamma.value.clone());
        let y = self.record(out.output, &[x.id, gamma.id, beta.id], move |g, need| {
            let (gx, gg, gb) = norm::batch_norm_train_backward(g, &xh, &is, &gv);
            Ok(vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gb)])
        });
        Ok((y, out.mean, out.var_unbiased))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let (y, xh, is) = norm::batch_norm_eval(&x.value, &gamma.value, &beta.value, running_mean, running_var, eps)?;
        let gv = gamma.value.clone();
        Ok(self.record(y, &[x.id, gamma.id, beta.id], move |g, need| {
            let (gx, gg, gb) = norm::batch_norm_eval_backward(g, &xh, &is, &gv);
            Ok(vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gb)])
        }))
    }

    pub fn layer_norm(&mut self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let out = norm::layer_norm(&x.value, &gamma.value, &beta.value, eps)?;
        let (xh, is, gv) = (out.normalized, out.inv_std, gamma.value.clone());
        Ok(self.record(out.output, &[x.id, gamma.id, beta.id], move |g, need| {
            let (gx, gg, gb) = norm::layer_norm_backward(g, &xh, &is, &gv);
            Ok(vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gb)])
        }))
    }

    // ---- probabilities and loss ----------------------------------------

    pub fn softmax(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let y = softmax::softmax(&x.value)?;
        let yv = y.clone();
        Ok(self.record(y, &[x.id], move |g, _| Ok(vec![Some(softmax::softmax_backward(&yv, g))])))
    }

    /// Mean two-class (or K-class) cross-entropy of `logits` against one-hot
    /// `labels`, as a scalar var. Labels are never differentiated.
    pub fn cross_entropy(&mut self, logits: &Var<T>, labels: &Tensor<T>) -> Result<Var<T>> {
        let (loss, grad) = ops::cross_entropy(&logits.value, labels)?;
        Ok(self.record(Tensor::scalar(loss), &[logits.id], move |g, _| {
            let s = g.data()[0];
            Ok(vec![Some(grad.map(|v| v * s))])
        }))
    }
}

/// Shape check shared by layers that need a specific rank.
pub fn expect_rank<T: Float>(x: &Var<T>, rank: usize, what: &str) -> Result<()> {
    if x.dims().len() != rank {
        return Err(shape_err!("{what} expects a rank-{rank} input, got {}", x.value.shape()));
    }
    Ok(())
}
