use rand::Rng;

use super::{Block, Mode, RepConv};
use crate::error::Result;
use crate::fusion::RepBranchSpec;
use crate::init::{self, BranchShape, Init};
use crate::params::{ParamMut, ParamRef, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{gelu, Tensor};

/// Reparameterized patch embedding: dense 3×3 + 1×1 (+ identity at stride 1),
/// optionally followed by GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct RepEmbedBlock<T> {
    pub conv: RepConv<T>,
    pub gelu: bool,
}

impl<T: Scalar> RepEmbedBlock<T> {
    pub fn new(branch: RepBranchSpec<T>, gelu: bool) -> Self {
        Self {
            conv: RepConv::from_train(branch),
            gelu,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        gelu: bool,
        eps: f64,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = BranchShape::embed(in_channels, out_channels, stride);
        Ok(Self::new(init::rep_branch(shape, eps, init, rng)?, gelu))
    }

    fn activate(&self, y: Tensor<T>) -> Tensor<T> {
        if self.gelu {
            gelu(&y)
        } else {
            y
        }
    }
}

impl<T: Scalar> Block<T> for RepEmbedBlock<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.activate(self.conv.forward(x, mode)?))
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.calibrate(x)?;
        Ok(self.activate(y))
    }

    fn fused(&self) -> Result<Self> {
        Ok(Self {
            conv: self.conv.fused()?,
            gelu: self.gelu,
        })
    }

    fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

impl<T: Scalar> Parameters<T> for RepEmbedBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.collect_params(prefix, out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.collect_params_mut(prefix, out);
    }
}
