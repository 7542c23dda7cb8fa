//! Weight initialization.
//!
//! Convolutions use Kaiming fan-in scaling, `std = sqrt(2 / fan_in)` with
//! `fan_in = in_channels / groups · kh · kw`, and zero bias. Batch-norm starts
//! fresh (`γ=1, β=0, μ=0, σ²=1`). [`Init::Randomized`] additionally draws
//! conv biases and all batch-norm arrays at random so that fusion has
//! something non-trivial to fold; tests and the fusion checker use it.

use rand::Rng;

use crate::error::Result;
use crate::fusion::{ConvBn, RepBranchSpec};
use crate::scalar::{lit, Scalar};
use crate::tensor::{BnSpec, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Fresh,
    Randomized,
}

/// Geometry of a multi-branch unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub scale: bool,
    pub identity: bool,
}

impl BranchShape {
    /// Single `k×k` conv followed by batch-norm.
    pub fn plain(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            scale: false,
            identity: false,
        }
    }

    /// Depthwise 3×3 + 1×1 + identity, stride 1.
    pub fn depthwise(channels: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: 3,
            stride: 1,
            groups: channels,
            scale: true,
            identity: true,
        }
    }

    /// Dense 3×3 + 1×1, with identity when shapes permit it.
    pub fn embed(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            groups: 1,
            scale: true,
            identity: stride == 1 && in_channels == out_channels,
        }
    }
}

pub fn kaiming_conv<T: Scalar, R: Rng + ?Sized>(
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
    init: Init,
    rng: &mut R,
) -> Result<ConvSpec<T>> {
    let per_group = in_channels / groups;
    let fan_in = (per_group * kernel * kernel) as f64;
    let weight = Tensor::randn([out_channels, per_group, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
    let bias = match init {
        Init::Fresh => vec![T::zero(); out_channels],
        Init::Randomized => (0..out_channels).map(|_| lit(rng.random_range(-0.5..0.5))).collect(),
    };
    ConvSpec::new(weight, bias, stride, (kernel - 1) / 2, groups)
}

pub fn batch_norm<T: Scalar, R: Rng + ?Sized>(channels: usize, eps: f64, init: Init, rng: &mut R) -> BnSpec<T> {
    match init {
        Init::Fresh => BnSpec::fresh(channels, lit(eps)),
        Init::Randomized => {
            let mut draw = |lo: f64, hi: f64| -> Vec<T> { (0..channels).map(|_| lit(rng.random_range(lo..hi))).collect() };
            BnSpec {
                gamma: draw(0.5, 1.5),
                beta: draw(-0.5, 0.5),
                running_mean: draw(-0.5, 0.5),
                running_var: draw(0.5, 2.0),
                eps: lit(eps),
            }
        }
    }
}

pub fn conv_bn<T: Scalar, R: Rng + ?Sized>(shape: BranchShape, eps: f64, init: Init, rng: &mut R) -> Result<ConvBn<T>> {
    Ok(ConvBn {
        conv: kaiming_conv(shape.out_channels, shape.in_channels, shape.kernel, shape.stride, shape.groups, init, rng)?,
        bn: batch_norm(shape.out_channels, eps, init, rng),
    })
}

pub fn rep_branch<T: Scalar, R: Rng + ?Sized>(shape: BranchShape, eps: f64, init: Init, rng: &mut R) -> Result<RepBranchSpec<T>> {
    let main = conv_bn(shape, eps, init, rng)?;
    let scale = if shape.scale {
        Some(conv_bn(BranchShape { kernel: 1, ..shape }, eps, init, rng)?)
    } else {
        None
    };
    let identity = shape
        .identity
        .then(|| batch_norm(shape.out_channels, eps, init, rng));
    RepBranchSpec::new(main, scale, identity)
}
