use rand_chacha::ChaCha8Rng;

use super::{join, BatchNorm3d, Context, Conv3d, Layer, ParamStore, SeBlock};
use crate::autograd::Var;
use crate::element::Float;
use crate::error::{shape_err, Result};
use crate::ops::Conv3dSpec;

/// 3-D residual block: `z = SE(BN(Conv(ReLU(BN(Conv(x))))))`,
/// `y = ReLU(z + s(x))`, where the shortcut `s` is the identity when shapes
/// agree and a strided 1×1×1 convolution with batch norm otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock3d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    conv1: Conv3d,
    bn1: BatchNorm3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    se: SeBlock,
    shortcut: Option<(Conv3d, BatchNorm3d)>,
}

impl ResBlock3d {
    /// Convolutions carry no bias: each one feeds a batch norm.
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, stride: usize, se_reduction: usize) -> Self {
        let name = name.into();
        let s = [stride; 3];
        let shortcut = (in_channels != out_channels || stride != 1).then(|| {
            (
                Conv3d::new(join(&name, "shortcut.conv"), in_channels, out_channels, [1, 1, 1], Conv3dSpec::new(s, [0, 0, 0]), false),
                BatchNorm3d::new(join(&name, "shortcut.bn"), out_channels),
            )
        });
        Self {
            conv1: Conv3d::new(join(&name, "conv1"), in_channels, out_channels, [3, 3, 3], Conv3dSpec::new(s, [1, 1, 1]), false),
            bn1: BatchNorm3d::new(join(&name, "bn1"), out_channels),
            conv2: Conv3d::new(join(&name, "conv2"), out_channels, out_channels, [3, 3, 3], Conv3dSpec::same3(), false),
            bn2: BatchNorm3d::new(join(&name, "bn2"), out_channels),
            se: SeBlock::new(join(&name, "se"), out_channels, se_reduction),
            shortcut,
            name,
            in_channels,
            out_channels,
            stride,
        }
    }

    pub fn has_projection_shortcut(&self) -> bool {
        self.shortcut.is_some()
    }
}

impl<T: Float> Layer<T> for ResBlock3d {
    fn init(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        <BatchNorm3d as Layer<T>>::init(&self.bn1, store, rng)?;
        self.conv2.init(store, rng)?;
        <BatchNorm3d as Layer<T>>::init(&self.bn2, store, rng)?;
        <SeBlock as Layer<T>>::init(&self.se, store, rng)?;
        if let Some((conv, bn)) = &self.shortcut {
            conv.init(store, rng)?;
            <BatchNorm3d as Layer<T>>::init(bn, store, rng)?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Context<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.dims().len() != 5 || x.dims()[1] != self.in_channels {
            return Err(shape_err!("{}: expected B×{}×T×H×W, input {:?}", self.name, self.in_channels, x.dims()));
        }
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, &h)?;
        let h = ctx.tape.relu(&h);
        let h = self.conv2.forward(ctx, &h)?;
        let h = self.bn2.forward(ctx, &h)?;
        let z = self.se.forward(ctx, &h)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, &s)?
            }
            None => x.clone(),
        };
        let y = ctx.tape.add(&z, &s)?;
        Ok(ctx.tape.relu(&y))
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let d = <Conv3d as Layer<T>>::output_dims(&self.conv1, input)?;
        <Conv3d as Layer<T>>::output_dims(&self.conv2, &d)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::layers::SeBlock;
    use crate::tensor::{Fill, Tensor};

    #[test]
    fn stride_two_halves_with_ceiling() {
        let r = ResBlock3d::new("r", 4, 8, 2, 4);
        assert!(r.has_projection_shortcut());
        let d = <ResBlock3d as Layer<f32>>::output_dims(&r, &[2, 4, 13, 60, 90]).unwrap();
        assert_eq!(d, vec![2, 8, 7, 30, 45]);
        let d = <ResBlock3d as Layer<f32>>::output_dims(&r, &[2, 4, 7, 30, 45]).unwrap();
        assert_eq!(d, vec![2, 8, 4, 15, 23]);
    }

    #[test]
    fn forward_matches_output_dims_and_is_nonnegative() {
        let r = ResBlock3d::new("r", 3, 6, 2, 2);
        let mut s = ParamStore::<f64>::new();
        r.init(&mut s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::<f64>::create([2, 3, 3, 5, 4], Fill::Normal { mean: 0.0, std: 1.0, seed: 4 }).unwrap();
        let y = r.forward(&mut Context::eval(&s), &Var::constant(x)).unwrap();
        assert_eq!(y.dims(), &[2, 6, 2, 3, 2]);
        assert!(y.value().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_shortcut_when_shapes_agree() {
        assert!(!ResBlock3d::new("r", 8, 8, 1, 4).has_projection_shortcut());
    }

    #[test]
    fn se_gate_is_open_interval() {
        let se = SeBlock::new("se", 8, 4);
        assert_eq!(se.hidden, 2);
        let mut s = ParamStore::<f64>::new();
        <SeBlock as Layer<f64>>::init(&se, &mut s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Tensor::<f64>::create([3, 8, 2, 2, 2], Fill::Normal { mean: 0.0, std: 3.0, seed: 5 }).unwrap();
        let a = se.gate(&mut Context::eval(&s), &Var::constant(x)).unwrap();
        assert_eq!(a.dims(), &[3, 8]);
        assert!(a.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(SeBlock::new("s", 4, 16).hidden, 1);
    }
}
