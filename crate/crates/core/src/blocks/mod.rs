//! Composite blocks in train form (parallel branches, explicit batch-norm)
//! and deploy form (one fused convolution per unit).

mod embed;
mod ffn;
mod mdta;
mod repdw;
mod sdta;

pub use embed::RepEmbedBlock;
pub use ffn::FfnBlock;
pub use mdta::{mdta_attention, MdtaBlock};
pub use repdw::RepDwBlock;
pub use sdta::{sdta_attention, sdta_split, SdtaBlock, ATTENTION_SCALE, QK_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::RepBranchSpec;
use crate::params::{join, ParamMut, ParamRef, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, ConvSpec, Tensor};

/// Which parameterization a forward pass should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Deploy,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Deploy => "deploy",
        }
    }
}

/// Shared interface of every block.
pub trait Block<T: Scalar>: Sized + Parameters<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Train-form forward that also sets batch-norm running statistics from
    /// the activations it sees.
    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Deploy-form copy: every unit fused, train weights dropped.
    fn fused(&self) -> Result<Self>;

    fn param_count(&self) -> usize;
}

/// One reparameterizable convolution unit.
///
/// Holds the train-form branches, the fused deploy conv, or both.
#[derive(Clone, Debug, PartialEq)]
pub struct RepConv<T> {
    train: Option<RepBranchSpec<T>>,
    deploy: Option<ConvSpec<T>>,
}

impl<T: Scalar> RepConv<T> {
    pub fn from_train(spec: RepBranchSpec<T>) -> Self {
        Self {
            train: Some(spec),
            deploy: None,
        }
    }

    pub fn from_deploy(conv: ConvSpec<T>) -> Self {
        Self {
            train: None,
            deploy: Some(conv),
        }
    }

    pub fn train(&self) -> Option<&RepBranchSpec<T>> {
        self.train.as_ref()
    }

    pub fn deploy(&self) -> Option<&ConvSpec<T>> {
        self.deploy.as_ref()
    }

    /// Fuse the train branches and keep both forms.
    pub fn attach_deploy(&mut self) -> Result<()> {
        let spec = self.train.as_ref().ok_or(Error::MissingForm("train"))?;
        self.deploy = Some(spec.fuse()?);
        Ok(())
    }

    pub fn fused(&self) -> Result<Self> {
        let spec = self.train.as_ref().ok_or(Error::MissingForm("train"))?;
        Ok(Self::from_deploy(spec.fuse()?))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.train.as_ref().ok_or(Error::MissingForm("train"))?.forward(x),
            Mode::Deploy => conv2d(x, self.deploy.as_ref().ok_or(Error::MissingForm("deploy"))?),
        }
    }

    pub fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.train.as_mut().ok_or(Error::MissingForm("train"))?.calibrate(x)
    }

    pub fn param_count(&self) -> usize {
        self.train.as_ref().map_or(0, RepBranchSpec::param_count)
            + self.deploy.as_ref().map_or(0, ConvSpec::param_count)
    }

    pub fn in_channels(&self) -> usize {
        match (&self.train, &self.deploy) {
            (Some(t), _) => t.in_channels(),
            (None, Some(d)) => d.in_channels(),
            (None, None) => unreachable!("RepConv always holds one form"),
        }
    }

    pub fn out_channels(&self) -> usize {
        match (&self.train, &self.deploy) {
            (Some(t), _) => t.out_channels(),
            (None, Some(d)) => d.out_channels(),
            (None, None) => unreachable!("RepConv always holds one form"),
        }
    }
}

impl<T: Scalar> Parameters<T> for RepConv<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        if let Some(t) = &self.train {
            t.collect_params(prefix, out);
        }
        if let Some(d) = &self.deploy {
            d.collect_params(prefix, out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        if let Some(t) = &mut self.train {
            t.collect_params_mut(prefix, out);
        }
        if let Some(d) = &mut self.deploy {
            d.collect_params_mut(prefix, out);
        }
    }
}

pub(crate) fn sub(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

/// Stride-1 blocks take `(N, C, H, W)` to `(N, C, H, W)`.
pub(crate) fn check_channels<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if x.channels() != channels {
        return Err(Error::Shape(format!(
            "{what} expects {channels} channels, got {}",
            x.channels()
        )));
    }
    Ok(())
}
