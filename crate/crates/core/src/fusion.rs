//! Structural reparameterization.
//!
//! A train-form unit is a sum of parallel branches, each a convolution
//! followed by its own inference-mode batch-norm:
//!
//! ```text
//! y = BN_main(conv_kxk(x)) + BN_scale(conv_1x1(x)) + BN_id(x)
//! ```
//!
//! Every branch is affine in `x`, so the sum collapses into one `k×k`
//! convolution: fold each BN into its conv, embed the 1×1 kernel and the
//! identity map at the centre of a `k×k` kernel, then add kernels and biases.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{self, BranchShape, Init};
use crate::scalar::Scalar;
use crate::tensor::{add_assign, batchnorm_infer, conv2d, BnSpec, ConvSpec, Tensor};

/// A convolution and the batch-norm applied to its output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: ConvSpec<T>,
    pub bn: BnSpec<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm_infer(&conv2d(x, &self.conv)?, &self.bn)
    }

    pub fn fold(&self) -> Result<ConvSpec<T>> {
        fold_bn(&self.conv, &self.bn)
    }

    /// Conv weights and bias, plus `γ` and `β`. Running statistics are
    /// buffers, not parameters.
    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 2 * self.bn.channels()
    }

    fn cast<U: Scalar>(&self) -> ConvBn<U> {
        ConvBn {
            conv: self.conv.cast(),
            bn: self.bn.cast(),
        }
    }
}

/// Parallel `k×k`, optional 1×1 and optional identity branches, each with
/// its own batch-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RepBranchSpec<T> {
    main: ConvBn<T>,
    scale: Option<ConvBn<T>>,
    identity: Option<BnSpec<T>>,
}

impl<T: Scalar> RepBranchSpec<T> {
    pub fn new(main: ConvBn<T>, scale: Option<ConvBn<T>>, identity: Option<BnSpec<T>>) -> Result<Self> {
        let spec = Self { main, scale, identity };
        spec.validate()?;
        Ok(spec)
    }

    /// Random weights with the given geometry.
    pub fn random<R: Rng + ?Sized>(shape: BranchShape, init: Init, rng: &mut R) -> Result<Self> {
        init::rep_branch(shape, 1e-5, init, rng)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.main.conv;
        let (kh, kw) = m.kernel();
        let incompatible = |msg: String| Err(Error::Fusion(msg));
        if kh != kw || !(kh == 1 || kh == 3) {
            return incompatible(format!("main kernel must be 1x1 or 3x3, got {kh}x{kw}"));
        }
        if m.padding() != (kh - 1) / 2 {
            return incompatible(format!("main {kh}x{kh} kernel needs padding {}", (kh - 1) / 2));
        }
        if self.main.bn.channels() != m.out_channels() {
            return incompatible("main batch-norm width differs from conv output".into());
        }
        if let Some(s) = &self.scale {
            let c = &s.conv;
            if c.kernel() != (1, 1) || c.padding() != 0 {
                return incompatible("scale branch must be an unpadded 1x1 conv".into());
            }
            if c.stride() != m.stride()
                || c.groups() != m.groups()
                || c.in_channels() != m.in_channels()
                || c.out_channels() != m.out_channels()
            {
                return incompatible("scale branch geometry differs from main branch".into());
            }
            if s.bn.channels() != c.out_channels() {
                return incompatible("scale batch-norm width differs from conv output".into());
            }
        }
        if let Some(bn) = &self.identity {
            if m.stride() != 1 || m.in_channels() != m.out_channels() {
                return incompatible("identity branch needs stride 1 and equal channel counts".into());
            }
            if bn.channels() != m.out_channels() {
                return incompatible("identity batch-norm width differs from channel count".into());
            }
        }
        self.main.bn.validate()?;
        if let Some(s) = &self.scale {
            s.bn.validate()?;
        }
        if let Some(bn) = &self.identity {
            bn.validate()?;
        }
        Ok(())
    }

    pub fn main(&self) -> &ConvBn<T> {
        &self.main
    }

    pub fn scale(&self) -> Option<&ConvBn<T>> {
        self.scale.as_ref()
    }

    pub fn identity(&self) -> Option<&BnSpec<T>> {
        self.identity.as_ref()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ConvBn<T>, Option<&mut ConvBn<T>>, Option<&mut BnSpec<T>>) {
        (&mut self.main, self.scale.as_mut(), self.identity.as_mut())
    }

    pub fn in_channels(&self) -> usize {
        self.main.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.main.conv.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.main.conv.stride()
    }

    pub fn groups(&self) -> usize {
        self.main.conv.groups()
    }

    pub fn kernel(&self) -> usize {
        self.main.conv.kernel().0
    }

    pub fn param_count(&self) -> usize {
        self.main.param_count()
            + self.scale.as_ref().map_or(0, ConvBn::param_count)
            + self.identity.as_ref().map_or(0, |bn| 2 * bn.channels())
    }

    /// Branch-sum forward: main, then scale, then identity.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.main.forward(x)?;
        if let Some(s) = &self.scale {
            add_assign(&mut y, &s.forward(x)?)?;
        }
        if let Some(bn) = &self.identity {
            add_assign(&mut y, &batchnorm_infer(x, bn)?)?;
        }
        Ok(y)
    }

    /// Forward pass that first overwrites every branch's running statistics
    /// with the per-channel mean and (population) variance observed on `x`.
    pub fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let raw = conv2d(x, &self.main.conv)?;
        set_stats(&mut self.main.bn, &raw);
        let mut y = batchnorm_infer(&raw, &self.main.bn)?;
        if let Some(s) = &mut self.scale {
            let raw = conv2d(x, &s.conv)?;
            set_stats(&mut s.bn, &raw);
            add_assign(&mut y, &batchnorm_infer(&raw, &s.bn)?)?;
        }
        if let Some(bn) = &mut self.identity {
            set_stats(bn, x);
            add_assign(&mut y, &batchnorm_infer(x, bn)?)?;
        }
        Ok(y)
    }

    /// Collapse all branches into a single convolution.
    pub fn fuse(&self) -> Result<ConvSpec<T>> {
        self.validate()?;
        let k = self.kernel();
        let mut fused = self.main.fold()?;
        if let Some(s) = &self.scale {
            accumulate(&mut fused, &lift_kernel(&s.fold()?, k)?);
        }
        if let Some(bn) = &self.identity {
            let id = identity_kernel(self.out_channels(), self.groups(), k)?;
            accumulate(&mut fused, &fold_bn(&id, bn)?);
        }
        Ok(fused)
    }

    pub fn cast<U: Scalar>(&self) -> RepBranchSpec<U> {
        RepBranchSpec {
            main: self.main.cast(),
            scale: self.scale.as_ref().map(ConvBn::cast),
            identity: self.identity.as_ref().map(BnSpec::cast),
        }
    }
}

fn set_stats<T: Scalar>(bn: &mut BnSpec<T>, x: &Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let count = T::from_f64_lossy((n * h * w) as f64);
    for ch in 0..c {
        let planes = || (0..n).flat_map(move |b| x.plane(b, ch).iter().copied());
        let mean = planes().sum::<T>() / count;
        let var = planes().map(|v| (v - mean) * (v - mean)).sum::<T>() / count;
        bn.running_mean[ch] = mean;
        bn.running_var[ch] = var;
    }
}

fn accumulate<T: Scalar>(acc: &mut ConvSpec<T>, other: &ConvSpec<T>) {
    let (w, b) = acc.parts_mut();
    for (a, &o) in w.data_mut().iter_mut().zip(other.weight().data()) {
        *a += o;
    }
    for (a, &o) in b.iter_mut().zip(other.bias()) {
        *a += o;
    }
}

/// Fold an inference-mode batch-norm into the preceding convolution:
/// `W'ₒ = Wₒ·γₒ/√(σ²ₒ+ε)` and `b'ₒ = βₒ + (bₒ − μₒ)·γₒ/√(σ²ₒ+ε)`.
pub fn fold_bn<T: Scalar>(conv: &ConvSpec<T>, bn: &BnSpec<T>) -> Result<ConvSpec<T>> {
    if bn.channels() != conv.out_channels() {
        return Err(Error::Fusion(format!(
            "batch-norm has {} channels, conv emits {}",
            bn.channels(),
            conv.out_channels()
        )));
    }
    let mut folded = conv.clone();
    let (w, b) = folded.parts_mut();
    let per_out = w.numel() / bn.channels();
    for (o, chunk) in w.data_mut().chunks_exact_mut(per_out).enumerate() {
        let scale = bn.gamma[o] / (bn.running_var[o] + bn.eps).sqrt();
        for v in chunk {
            *v = *v * scale;
        }
        b[o] = bn.beta[o] + (b[o] - bn.running_mean[o]) * scale;
    }
    Ok(folded)
}

/// Embed a 1×1 kernel at the centre of a zero 3×3 kernel, padding 1.
pub fn pad_1x1_to_3x3<T: Scalar>(conv: &ConvSpec<T>) -> Result<ConvSpec<T>> {
    if conv.kernel() != (1, 1) {
        let (kh, kw) = conv.kernel();
        return Err(Error::Fusion(format!("expected a 1x1 kernel, got {kh}x{kw}")));
    }
    lift_kernel(conv, 3)
}

/// Centre a square kernel inside a larger zero `k×k` kernel and widen the
/// padding so the output grid is unchanged.
fn lift_kernel<T: Scalar>(conv: &ConvSpec<T>, k: usize) -> Result<ConvSpec<T>> {
    let (kh, kw) = conv.kernel();
    if kh != kw || kh > k || (k - kh) % 2 != 0 {
        return Err(Error::Fusion(format!("cannot lift {kh}x{kw} kernel to {k}x{k}")));
    }
    if kh == k {
        return Ok(conv.clone());
    }
    let off = (k - kh) / 2;
    let [o, i, _, _] = conv.weight().shape();
    let src = conv.weight();
    let weight = Tensor::from_fn([o, i, k, k], |[a, b, y, x]| {
        if (off..off + kh).contains(&y) && (off..off + kw).contains(&x) {
            src.at([a, b, y - off, x - off])
        } else {
            T::zero()
        }
    });
    ConvSpec::new(weight, conv.bias().to_vec(), conv.stride(), conv.padding() + off, conv.groups())
}

fn identity_kernel<T: Scalar>(channels: usize, groups: usize, k: usize) -> Result<ConvSpec<T>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Fusion(format!("{groups} groups do not divide {channels} channels")));
    }
    let per = channels / groups;
    let c = k / 2;
    let weight = Tensor::from_fn([channels, per, k, k], |[o, i, y, x]| {
        if i == o % per && y == c && x == c {
            T::one()
        } else {
            T::zero()
        }
    });
    ConvSpec::new(weight, vec![T::zero(); channels], 1, c, groups)
}

/// The 3×3 convolution (padding 1) that maps every input to itself.
pub fn identity_to_conv<T: Scalar>(channels: usize, groups: usize, stride: usize) -> Result<ConvSpec<T>> {
    if stride != 1 {
        return Err(Error::Fusion(format!("identity branch cannot have stride {stride}")));
    }
    identity_kernel(channels, groups, 3)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionCheck {
    pub samples: usize,
    pub tol: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for FusionCheck {
    fn default() -> Self {
        Self {
            samples: 100,
            tol: 1e-4,
            height: 7,
            width: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct FusionReport {
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Compare train-form and fused-form outputs on `check.samples` random
/// standard-normal inputs.
pub fn verify_equivalence<T: Scalar, R: Rng + ?Sized>(
    spec: &RepBranchSpec<T>,
    check: &FusionCheck,
    rng: &mut R,
) -> Result<FusionReport> {
    if check.samples == 0 {
        return Err(Error::Config("fusion check needs at least one sample".into()));
    }
    let fused = spec.fuse()?;
    let mut max_abs_diff = 0.0f64;
    for _ in 0..check.samples {
        let x = Tensor::randn([1, spec.in_channels(), check.height, check.width], 1.0, rng);
        let d = spec.forward(&x)?.max_abs_diff(&conv2d(&x, &fused)?)?;
        max_abs_diff = max_abs_diff.max(d.to_f64_lossy());
    }
    Ok(FusionReport {
        max_abs_diff,
        pass: max_abs_diff <= check.tol,
    })
}
