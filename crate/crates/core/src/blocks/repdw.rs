use rand::Rng;

use super::{check_channels, sub, Block, FfnBlock, Mode, RepConv};
use crate::error::Result;
use crate::init::{self, BranchShape, Init};
use crate::params::{ParamMut, ParamRef, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{add, add_assign, Tensor};

/// `x' = x + RepDW(x)`, then `x'' = x' + FFN(x')`.
#[derive(Clone, Debug, PartialEq)]
pub struct RepDwBlock<T> {
    pub mixer: RepConv<T>,
    pub ffn: FfnBlock<T>,
}

impl<T: Scalar> RepDwBlock<T> {
    pub fn random<R: Rng + ?Sized>(channels: usize, ffn_ratio: usize, eps: f64, init: Init, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mixer: RepConv::from_train(init::rep_branch(BranchShape::depthwise(channels), eps, init, rng)?),
            ffn: FfnBlock::random(channels, ffn_ratio, eps, init, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.mixer.in_channels()
    }
}

impl<T: Scalar> Block<T> for RepDwBlock<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "RepDW block")?;
        let mut x1 = add(x, &self.mixer.forward(x, mode)?)?;
        let f = self.ffn.forward(&x1, mode)?;
        add_assign(&mut x1, &f)?;
        Ok(x1)
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "RepDW block")?;
        let mut x1 = add(x, &self.mixer.calibrate(x)?)?;
        let f = self.ffn.calibrate(&x1)?;
        add_assign(&mut x1, &f)?;
        Ok(x1)
    }

    fn fused(&self) -> Result<Self> {
        Ok(Self {
            mixer: self.mixer.fused()?,
            ffn: self.ffn.fused()?,
        })
    }

    fn param_count(&self) -> usize {
        self.mixer.param_count() + self.ffn.param_count()
    }
}

impl<T: Scalar> Parameters<T> for RepDwBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.mixer.collect_params(&sub(prefix, "mixer"), out);
        self.ffn.collect_params(&sub(prefix, "ffn"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.mixer.collect_params_mut(&sub(prefix, "mixer"), out);
        self.ffn.collect_params_mut(&sub(prefix, "ffn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{ConvBn, RepBranchSpec};
    use crate::tensor::{BnSpec, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_unit(cin: usize, cout: usize, k: usize, groups: usize, scale: bool, identity: bool) -> RepConv<f32> {
        let cb = |k: usize| ConvBn {
            conv: ConvSpec::new(Tensor::zeros([cout, cin / groups, k, k]), vec![0.0; cout], 1, k / 2, groups).unwrap(),
            bn: BnSpec::new(vec![0.0; cout], vec![0.0; cout], vec![0.0; cout], vec![1.0; cout], 1e-5).unwrap(),
        };
        let id = identity.then(|| BnSpec::new(vec![0.0; cout], vec![0.0; cout], vec![0.0; cout], vec![1.0; cout], 1e-5).unwrap());
        RepConv::from_train(RepBranchSpec::new(cb(k), scale.then(|| cb(1)), id).unwrap())
    }

    #[test]
    fn zero_weights_give_pure_residual() {
        let c = 6;
        let block = RepDwBlock {
            mixer: zero_unit(c, c, 3, c, true, true),
            ffn: FfnBlock {
                expand: zero_unit(c, 2 * c, 1, 1, false, false),
                project: zero_unit(2 * c, c, 1, 1, false, false),
            },
        };
        let x = Tensor::randn([1, c, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(block.forward(&x, Mode::Train).unwrap(), x);
        assert_eq!(block.fused().unwrap().forward(&x, Mode::Deploy).unwrap(), x);
    }

    #[test]
    fn train_and_deploy_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block: RepDwBlock<f32> = RepDwBlock::random(16, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let deploy = block.fused().unwrap();
        let x = Tensor::randn([2, 16, 7, 7], 1.0, &mut rng);
        let d = block.forward(&x, Mode::Train).unwrap().max_abs_diff(&deploy.forward(&x, Mode::Deploy).unwrap()).unwrap();
        assert!(d < 1e-4, "{d}");
        assert!(deploy.param_count() < block.param_count());
    }

    #[test]
    fn preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block: RepDwBlock<f32> = RepDwBlock::random(128, 2, 1e-5, Init::Fresh, &mut rng).unwrap();
        let x = Tensor::randn([2, 128, 14, 14], 1.0, &mut rng);
        assert_eq!(block.forward(&x, Mode::Train).unwrap().shape(), [2, 128, 14, 14]);
        assert!(block.forward(&Tensor::zeros([1, 64, 4, 4]), Mode::Train).is_err());
    }
}
