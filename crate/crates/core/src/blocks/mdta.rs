use rand::Rng;

use super::{check_channels, sub, Block, FfnBlock, Mode, RepConv};
use crate::error::{Error, Result};
use crate::init::{self, BranchShape, Init};
use crate::params::{ParamMut, ParamRef, Parameters};
use crate::scalar::{lit, Scalar};
use crate::tensor::{add, add_assign, matmul, narrow_channels, softmax, Matrix, Tensor};

/// Channel attention over a `3C`-channel tensor holding `[Q, K, V]`:
/// `A = softmax₁(Q·Kᵀ/√C)` is `C×C` and row-stochastic, output `A·V`.
pub fn mdta_attention<T: Scalar>(qkv: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Vec<Matrix<T>>)> {
    let [n, c3, h, w] = qkv.shape();
    if c3 != 3 * channels {
        return Err(Error::Shape(format!("MDTA expects {} channels, got {c3}", 3 * channels)));
    }
    let hw = h * w;
    let scale: T = lit(1.0 / (channels as f64).sqrt());
    let mut outputs = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for b in 0..n {
        let s = qkv.sample(b);
        let part = |i: usize| -> Result<Matrix<T>> {
            Matrix::new(channels, hw, narrow_channels(&s, i * channels, channels)?.into_data())
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let a = softmax(&matmul(&q, &k.transpose())?.scale(scale), 1)?;
        outputs.push(Tensor::new([1, channels, h, w], matmul(&a, &v)?.into_data())?);
        maps.push(a);
    }
    Ok((Tensor::stack(&outputs)?, maps))
}

/// Reduced multi-dconv-head transposed attention (single temperature),
/// kept for cost comparisons against [`super::SdtaBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct MdtaBlock<T> {
    pub qkv: RepConv<T>,
    pub dwconv: RepConv<T>,
    pub proj: RepConv<T>,
    pub ffn: FfnBlock<T>,
}

impl<T: Scalar> MdtaBlock<T> {
    pub fn random<R: Rng + ?Sized>(channels: usize, ffn_ratio: usize, eps: f64, init: Init, rng: &mut R) -> Result<Self> {
        let rep = |shape, rng: &mut R| init::rep_branch(shape, eps, init, rng).map(RepConv::from_train);
        let c3 = 3 * channels;
        Ok(Self {
            qkv: rep(BranchShape::plain(channels, c3, 1, 1, 1), rng)?,
            dwconv: rep(BranchShape::plain(c3, c3, 3, 1, c3), rng)?,
            proj: rep(BranchShape::plain(channels, channels, 1, 1, 1), rng)?,
            ffn: FfnBlock::random(channels, ffn_ratio, eps, init, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.qkv.in_channels()
    }

    pub fn mix(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "MDTA block")?;
        let qkv = self.dwconv.forward(&self.qkv.forward(x, mode)?, mode)?;
        let (att, _) = mdta_attention(&qkv, self.channels())?;
        add(x, &self.proj.forward(&att, mode)?)
    }
}

impl<T: Scalar> Block<T> for MdtaBlock<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut x1 = self.mix(x, mode)?;
        let f = self.ffn.forward(&x1, mode)?;
        add_assign(&mut x1, &f)?;
        Ok(x1)
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "MDTA block")?;
        let q = self.qkv.calibrate(x)?;
        let qkv = self.dwconv.calibrate(&q)?;
        let (att, _) = mdta_attention(&qkv, self.channels())?;
        let mut x1 = add(x, &self.proj.calibrate(&att)?)?;
        let f = self.ffn.calibrate(&x1)?;
        add_assign(&mut x1, &f)?;
        Ok(x1)
    }

    fn fused(&self) -> Result<Self> {
        Ok(Self {
            qkv: self.qkv.fused()?,
            dwconv: self.dwconv.fused()?,
            proj: self.proj.fused()?,
            ffn: self.ffn.fused()?,
        })
    }

    fn param_count(&self) -> usize {
        self.qkv.param_count() + self.dwconv.param_count() + self.proj.param_count() + self.ffn.param_count()
    }
}

impl<T: Scalar> Parameters<T> for MdtaBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.qkv.collect_params(&sub(prefix, "qkv"), out);
        self.dwconv.collect_params(&sub(prefix, "dwconv"), out);
        self.proj.collect_params(&sub(prefix, "proj"), out);
        self.ffn.collect_params(&sub(prefix, "ffn"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.qkv.collect_params_mut(&sub(prefix, "qkv"), out);
        self.dwconv.collect_params_mut(&sub(prefix, "dwconv"), out);
        self.proj.collect_params_mut(&sub(prefix, "proj"), out);
        self.ffn.collect_params_mut(&sub(prefix, "ffn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::SdtaBlock;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_channel_single_position_by_hand() {
        // q = (1, 2), k = (3, -1), v = (5, 7); C = 2, scale 1/√2.
        let qkv = Tensor::new([1, 6, 1, 1], vec![1.0f64, 2.0, 3.0, -1.0, 5.0, 7.0]).unwrap();
        let (out, maps) = mdta_attention(&qkv, 2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // logits row i: q_i·k_j·s
        let row = |qi: f64| {
            let (a, b) = ((qi * 3.0 * s).exp(), (qi * -1.0 * s).exp());
            (a / (a + b), b / (a + b))
        };
        let (a00, a01) = row(1.0);
        let (a10, a11) = row(2.0);
        assert!((maps[0].at(0, 0) - a00).abs() < 1e-15 && (maps[0].at(1, 1) - a11).abs() < 1e-15);
        assert!((out.at([0, 0, 0, 0]) - (a00 * 5.0 + a01 * 7.0)).abs() < 1e-12);
        assert!((out.at([0, 1, 0, 0]) - (a10 * 5.0 + a11 * 7.0)).abs() < 1e-12);
        for r in 0..2 {
            assert!((maps[0].row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn output_finite_and_shape_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block: MdtaBlock<f32> = MdtaBlock::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let x = Tensor::randn([1, 8, 4, 4], 1.0, &mut rng);
        let y = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
        let d = y.max_abs_diff(&block.fused().unwrap().forward(&x, Mode::Deploy).unwrap()).unwrap();
        assert!(d < 1e-4);
    }

    #[test]
    fn heavier_than_sdta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for c in [64, 320, 448] {
            let m: MdtaBlock<f32> = MdtaBlock::random(c, 2, 1e-5, Init::Fresh, &mut rng).unwrap();
            let s: SdtaBlock<f32> = SdtaBlock::random(c, 2, 1e-5, Init::Fresh, &mut rng).unwrap();
            assert!(m.fused().unwrap().param_count() > s.fused().unwrap().param_count());
        }
    }
}
