use rand::Rng;

use super::{sub, Block, Mode, RepConv};
use crate::error::Result;
use crate::fusion::RepBranchSpec;
use crate::init::{self, BranchShape, Init};
use crate::params::{ParamMut, ParamRef, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{gelu, Tensor};

/// Pointwise expand → GELU → pointwise project. The residual connection
/// belongs to the enclosing block.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnBlock<T> {
    pub expand: RepConv<T>,
    pub project: RepConv<T>,
}

impl<T: Scalar> FfnBlock<T> {
    pub fn random<R: Rng + ?Sized>(channels: usize, ratio: usize, eps: f64, init: Init, rng: &mut R) -> Result<Self> {
        let hidden = channels * ratio;
        let expand = init::rep_branch(BranchShape::plain(channels, hidden, 1, 1, 1), eps, init, rng)?;
        let project = init::rep_branch(BranchShape::plain(hidden, channels, 1, 1, 1), eps, init, rng)?;
        Ok(Self::new(expand, project))
    }

    pub fn new(expand: RepBranchSpec<T>, project: RepBranchSpec<T>) -> Self {
        Self {
            expand: RepConv::from_train(expand),
            project: RepConv::from_train(project),
        }
    }

    pub fn channels(&self) -> usize {
        self.expand.in_channels()
    }

    pub fn ratio(&self) -> usize {
        self.expand.out_channels() / self.expand.in_channels()
    }
}

impl<T: Scalar> Block<T> for FfnBlock<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = gelu(&self.expand.forward(x, mode)?);
        self.project.forward(&h, mode)
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = gelu(&self.expand.calibrate(x)?);
        self.project.calibrate(&h)
    }

    fn fused(&self) -> Result<Self> {
        Ok(Self {
            expand: self.expand.fused()?,
            project: self.project.fused()?,
        })
    }

    fn param_count(&self) -> usize {
        self.expand.param_count() + self.project.param_count()
    }
}

impl<T: Scalar> Parameters<T> for FfnBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.expand.collect_params(&sub(prefix, "expand"), out);
        self.project.collect_params(&sub(prefix, "project"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.expand.collect_params_mut(&sub(prefix, "expand"), out);
        self.project.collect_params_mut(&sub(prefix, "project"), out);
    }
}
