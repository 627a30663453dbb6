//! Composite layers: convolution/batch-norm/dense parameter containers,
//! residual units, and the trunk/mask attention module.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Distinguishes optimizer-updated parameters from persistent state
/// (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    State,
}

/// Visitor over a layer's tensors with stable dotted names, used for the
/// optimizer, serialization and parameter counting.
pub type TensorVisitor<'a, S> = dyn FnMut(String, &Tensor<S>, ParamKind) + 'a;

fn randn<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Conv2d<S> {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_vec(&[cout, cin, k, k], randn(rng, cout * fan_in, std)).unwrap();
        let bias = Tensor::zeros(&[cout]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<S>) {
        f(format!("{prefix}.weight"), &self.weight, ParamKind::Trainable);
        f(format!("{prefix}.bias"), &self.bias, ParamKind::Trainable);
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d<S: Scalar> {
    pub scale: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> BatchNorm2d<S> {
        let scale = Tensor::full(&[channels], S::one());
        let shift = Tensor::zeros(&[channels]);
        scale.set_requires_grad(true);
        shift.set_requires_grad(true);
        BatchNorm2d {
            scale,
            shift,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::one()),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        ops::batchnorm2d(
            x,
            &self.scale,
            &self.shift,
            &self.running_mean,
            &self.running_var,
            S::from_f64(BN_MOMENTUM),
            S::from_f64(BN_EPS),
            train,
        )
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<S>) {
        f(format!("{prefix}.scale"), &self.scale, ParamKind::Trainable);
        f(format!("{prefix}.shift"), &self.shift, ParamKind::Trainable);
        f(format!("{prefix}.running_mean"), &self.running_mean, ParamKind::State);
        f(format!("{prefix}.running_var"), &self.running_var, ParamKind::State);
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub struct Dense<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Dense<S> {
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_vec(&[fan_in, fan_out], randn(rng, fan_in * fan_out, std)).unwrap();
        let bias = Tensor::zeros(&[fan_out]);
        weight.set_requires_grad(true);
        bias.set_requires_grad(true);
        Dense { weight, bias }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        ops::dense(x, &self.weight, &self.bias)
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<S>) {
        f(format!("{prefix}.weight"), &self.weight, ParamKind::Trainable);
        f(format!("{prefix}.bias"), &self.bias, ParamKind::Trainable);
    }
}

// ---------------------------------------------------------------------------
// Residual unit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualUnitSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualUnitSpec {
    pub fn same(channels: usize) -> ResidualUnitSpec {
        ResidualUnitSpec { in_channels: channels, out_channels: channels, stride: 1 }
    }

    /// Projection is used exactly when input and output shapes differ.
    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

/// conv-BN-relu-conv-BN plus a skip (identity or strided 1x1 projection),
/// then a final relu.
pub struct ResidualUnit<S: Scalar> {
    pub spec: ResidualUnitSpec,
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    projection: Option<(Conv2d<S>, BatchNorm2d<S>)>,
}

impl<S: Scalar> ResidualUnit<S> {
    pub fn new(spec: ResidualUnitSpec, rng: &mut ChaCha8Rng) -> ResidualUnit<S> {
        let conv1 = Conv2d::new(spec.in_channels, spec.out_channels, 3, spec.stride, 1, rng);
        let bn1 = BatchNorm2d::new(spec.out_channels);
        let conv2 = Conv2d::new(spec.out_channels, spec.out_channels, 3, 1, 1, rng);
        let bn2 = BatchNorm2d::new(spec.out_channels);
        let projection = if spec.needs_projection() {
            Some((
                Conv2d::new(spec.in_channels, spec.out_channels, 1, spec.stride, 0, rng),
                BatchNorm2d::new(spec.out_channels),
            ))
        } else {
            None
        };
        ResidualUnit { spec, conv1, bn1, conv2, bn2, projection }
    }

    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        if x.dims().len() != 4 || x.dims()[1] != self.spec.in_channels {
            return Err(Error::shape(
                "residual_unit",
                format!("input dims {:?}, expected {} channels", x.dims(), self.spec.in_channels),
            ));
        }
        let main = self.bn2.forward(
            &self.conv2.forward(&ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?))?,
            train,
        )?;
        let skip = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&main, &skip)?))
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<S>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &self.projection {
            conv.visit(&format!("{prefix}.proj.conv"), f);
            bn.visit(&format!("{prefix}.proj.bn"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Attention module
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionModuleSpec {
    pub channels: usize,
    /// Residual units in the trunk branch.
    pub trunk_depth: usize,
    /// Down/up levels in the mask branch; input spatial dims must be
    /// divisible by 2^mask_levels.
    pub mask_levels: usize,
    /// When true the gate is (1 + M) * T; when false plain M * T (ablation).
    pub residual_gate: bool,
}

/// Trunk branch of residual units, softly gated by a bottom-up/top-down
/// mask branch ending in a 1x1 conv and sigmoid.
pub struct AttentionModule<S: Scalar> {
    pub spec: AttentionModuleSpec,
    trunk: Vec<ResidualUnit<S>>,
    down: Vec<ResidualUnit<S>>,
    up: Vec<ResidualUnit<S>>,
    mask_conv: Conv2d<S>,
}

impl<S: Scalar> AttentionModule<S> {
    pub fn new(spec: AttentionModuleSpec, rng: &mut ChaCha8Rng) -> AttentionModule<S> {
        let unit = || ResidualUnitSpec::same(spec.channels);
        let trunk = (0..spec.trunk_depth).map(|_| ResidualUnit::new(unit(), rng)).collect();
        let down = (0..spec.mask_levels).map(|_| ResidualUnit::new(unit(), rng)).collect();
        let up = (0..spec.mask_levels).map(|_| ResidualUnit::new(unit(), rng)).collect();
        let mask_conv = Conv2d::new(spec.channels, spec.channels, 1, 1, 0, rng);
        AttentionModule { spec, trunk, down, up, mask_conv }
    }

    /// Checks the divisibility constraint at model build time.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.spec.mask_levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "attention module with {} mask levels needs spatial dims divisible by {}, got {}x{}",
                self.spec.mask_levels, div, h, w
            )));
        }
        Ok(())
    }

    /// Bottom-up: mask_levels of maxpool + residual unit. Top-down:
    /// upsample + skip-add from the matching resolution + residual unit.
    fn mask_branch(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let mut feats: Vec<Tensor<S>> = vec![x.clone()];
        for unit in &self.down {
            let pooled = ops::maxpool2d(feats.last().unwrap(), 2, 2)?;
            feats.push(unit.forward(&pooled, train)?);
        }
        let mut cur = feats.last().unwrap().clone();
        for (level, unit) in self.up.iter().enumerate().rev() {
            let skip = &feats[level];
            let (h, w) = (skip.dims()[2], skip.dims()[3]);
            let upsampled = ops::upsample_bilinear(&cur, h, w)?;
            cur = unit.forward(&ops::add(&upsampled, skip)?, train)?;
        }
        Ok(ops::sigmoid(&self.mask_conv.forward(&cur)?))
    }

    /// Returns (gated output, mask tap).
    pub fn forward(&self, x: &Tensor<S>, train: bool) -> Result<(Tensor<S>, Tensor<S>)> {
        self.check_input(x.dims()[2], x.dims()[3])?;
        let mut trunk_out = x.clone();
        for unit in &self.trunk {
            trunk_out = unit.forward(&trunk_out, train)?;
        }
        let mask = self.mask_branch(x, train)?;
        let out = if self.spec.residual_gate {
            ops::mul(&ops::add_scalar(&mask, S::one()), &trunk_out)?
        } else {
            ops::mul(&mask, &trunk_out)?
        };
        Ok((out, mask))
    }

    pub fn visit(&self, prefix: &str, f: &mut TensorVisitor<S>) {
        for (i, unit) in self.trunk.iter().enumerate() {
            unit.visit(&format!("{prefix}.trunk{i}"), f);
        }
        for (i, unit) in self.down.iter().enumerate() {
            unit.visit(&format!("{prefix}.mask.down{i}"), f);
        }
        for (i, unit) in self.up.iter().enumerate() {
            unit.visit(&format!("{prefix}.mask.up{i}"), f);
        }
        self.mask_conv.visit(&format!("{prefix}.mask.out_conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_input(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_conv_weights_identity_skip_gives_relu_of_input() {
        let mut r = rng();
        let unit: ResidualUnit<f64> = ResidualUnit::new(ResidualUnitSpec::same(2), &mut r);
        for t in [&unit.conv1.weight, &unit.conv2.weight] {
            t.data_mut().fill(0.0);
        }
        let x = rand_input(&[1, 2, 4, 4], &mut r);
        let y = unit.forward(&x, false).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(y.dims(), x.dims());
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut r = rng();
        let unit: ResidualUnit<f64> = ResidualUnit::new(
            ResidualUnitSpec { in_channels: 2, out_channels: 4, stride: 2 },
            &mut r,
        );
        let x = rand_input(&[1, 2, 8, 8], &mut r);
        let y = unit.forward(&x, false).unwrap();
        assert_eq!(y.dims(), &[1, 4, 4, 4]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut r = rng();
        let unit: ResidualUnit<f64> = ResidualUnit::new(ResidualUnitSpec::same(3), &mut r);
        let x = rand_input(&[1, 2, 4, 4], &mut r);
        assert!(unit.forward(&x, false).is_err());
    }

    #[test]
    fn mask_shape_matches_input_and_values_in_open_unit_interval() {
        let mut r = rng();
        let spec = AttentionModuleSpec { channels: 2, trunk_depth: 1, mask_levels: 2, residual_gate: true };
        let module: AttentionModule<f64> = AttentionModule::new(spec, &mut r);
        let x = rand_input(&[2, 2, 8, 8], &mut r);
        let (out, mask) = module.forward(&x, false).unwrap();
        assert_eq!(out.dims(), x.dims());
        assert_eq!(mask.dims(), x.dims());
        assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zeroed_mask_head_gives_one_point_five_times_trunk() {
        let mut r = rng();
        let spec = AttentionModuleSpec { channels: 2, trunk_depth: 1, mask_levels: 1, residual_gate: true };
        let module: AttentionModule<f64> = AttentionModule::new(spec, &mut r);
        module.mask_conv.weight.data_mut().fill(0.0);
        module.mask_conv.bias.data_mut().fill(0.0);
        let x = rand_input(&[1, 2, 4, 4], &mut r);
        let (out, mask) = module.forward(&x, false).unwrap();
        assert!(mask.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        // recompute the trunk alone
        let mut trunk = x.clone();
        for unit in &module.trunk {
            trunk = unit.forward(&trunk, false).unwrap();
        }
        for (o, t) in out.data().iter().zip(trunk.data().iter()) {
            assert!((o - 1.5 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_spatial_dims_rejected_at_check() {
        let mut r = rng();
        let spec = AttentionModuleSpec { channels: 2, trunk_depth: 1, mask_levels: 2, residual_gate: true };
        let module: AttentionModule<f64> = AttentionModule::new(spec, &mut r);
        assert!(module.check_input(6, 6).is_err());
        assert!(module.check_input(8, 8).is_ok());
    }
}
