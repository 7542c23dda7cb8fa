use rand::Rng;

use super::{check_channels, sub, Block, FfnBlock, Mode, RepConv};
use crate::error::{Error, Result};
use crate::init::{self, BranchShape, Init};
use crate::params::{ParamMut, ParamRef, Parameters};
use crate::scalar::{lit, Scalar};
use crate::tensor::{add, add_assign, concat_channels, matmul, narrow_channels, sigmoid, softmax, Matrix, Tensor};

/// Channels of the query and of the key.
pub const QK_DIM: usize = 16;

/// `1/√16`, applied to `QᵀK` before the softmax.
pub const ATTENTION_SCALE: f64 = 0.25;

/// Channel split of the `C + 32`-wide projection: `[Q, K, V, U]`.
pub fn sdta_split(channels: usize) -> Result<[usize; 4]> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Shape(format!("SDTA needs channels divisible by 4, got {channels}")));
    }
    Ok([QK_DIM, QK_DIM, channels / 4, 3 * channels / 4])
}

/// Single-head transposed attention over a projected tensor `p` with
/// `C + 32` channels.
///
/// Per sample, with `Q, K ∈ R^{16×HW}` and `V ∈ R^{C/4×HW}`:
/// `M = softmax₀(QᵀK / 4)` (each column sums to one) and `Att = V·M`.
/// Returns `cat(Att, σ(U))` with `C` channels and the per-sample maps `M`.
pub fn sdta_attention<T: Scalar>(p: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Vec<Matrix<T>>)> {
    let [q_dim, k_dim, v_dim, u_dim] = sdta_split(channels)?;
    let [n, pc, h, w] = p.shape();
    if pc != channels + 2 * QK_DIM {
        return Err(Error::Shape(format!(
            "SDTA projection must have {} channels, got {pc}",
            channels + 2 * QK_DIM
        )));
    }
    let hw = h * w;
    let as_matrix = |t: Tensor<T>, rows| Matrix::new(rows, hw, t.into_data());
    let mut outputs = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for b in 0..n {
        let ps = p.sample(b);
        let q = as_matrix(narrow_channels(&ps, 0, q_dim)?, q_dim)?;
        let k = as_matrix(narrow_channels(&ps, q_dim, k_dim)?, k_dim)?;
        let v = as_matrix(narrow_channels(&ps, q_dim + k_dim, v_dim)?, v_dim)?;
        let u = narrow_channels(&ps, q_dim + k_dim + v_dim, u_dim)?;

        let scores = matmul(&q.transpose(), &k)?.scale(lit(ATTENTION_SCALE));
        let m = softmax(&scores, 0)?;
        let att = Tensor::new([1, v_dim, h, w], matmul(&v, &m)?.into_data())?;
        outputs.push(concat_channels(&[&att, &sigmoid(&u)])?);
        maps.push(m);
    }
    Ok((Tensor::stack(&outputs)?, maps))
}

/// Depthwise mixer → `W_p` → split into Q/K/V/U → transposed attention and
/// gated local branch → `W_o`, added back to the input; then an FFN residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SdtaBlock<T> {
    pub pre_mixer: RepConv<T>,
    pub proj_p: RepConv<T>,
    pub proj_o: RepConv<T>,
    pub ffn: FfnBlock<T>,
}

impl<T: Scalar> SdtaBlock<T> {
    pub fn random<R: Rng + ?Sized>(channels: usize, ffn_ratio: usize, eps: f64, init: Init, rng: &mut R) -> Result<Self> {
        sdta_split(channels)?;
        let rep = |shape, rng: &mut R| init::rep_branch(shape, eps, init, rng).map(RepConv::from_train);
        Ok(Self {
            pre_mixer: rep(BranchShape::depthwise(channels), rng)?,
            proj_p: rep(BranchShape::plain(channels, channels + 2 * QK_DIM, 1, 1, 1), rng)?,
            proj_o: rep(BranchShape::plain(channels, channels, 1, 1, 1), rng)?,
            ffn: FfnBlock::random(channels, ffn_ratio, eps, init, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.pre_mixer.in_channels()
    }

    fn project(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "SDTA block")?;
        let t = self.pre_mixer.forward(x, mode)?;
        self.proj_p.forward(&t, mode)
    }

    /// `x + SDTA(x)`, without the FFN residual.
    pub fn mix(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (cat, _) = sdta_attention(&self.project(x, mode)?, self.channels())?;
        add(x, &self.proj_o.forward(&cat, mode)?)
    }

    /// The column-stochastic `HW×HW` map of each sample.
    pub fn attention_maps(&self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Matrix<T>>> {
        Ok(sdta_attention(&self.project(x, mode)?, self.channels())?.1)
    }
}

impl<T: Scalar> Block<T> for SdtaBlock<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut x1 = self.mix(x, mode)?;
        let f = self.ffn.forward(&x1, mode)?;
        add_assign(&mut x1, &f)?;
        Ok(x1)
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "SDTA block")?;
        let t = self.pre_mixer.calibrate(x)?;
        let p = self.proj_p.calibrate(&t)?;
        let (cat, _) = sdta_attention(&p, self.channels())?;
        let mut x1 = add(x, &self.proj_o.calibrate(&cat)?)?;
        let f = self.ffn.calibrate(&x1)?;
        add_assign(&mut x1, &f)?;
        Ok(x1)
    }

    fn fused(&self) -> Result<Self> {
        Ok(Self {
            pre_mixer: self.pre_mixer.fused()?,
            proj_p: self.proj_p.fused()?,
            proj_o: self.proj_o.fused()?,
            ffn: self.ffn.fused()?,
        })
    }

    fn param_count(&self) -> usize {
        self.pre_mixer.param_count() + self.proj_p.param_count() + self.proj_o.param_count() + self.ffn.param_count()
    }
}

impl<T: Scalar> Parameters<T> for SdtaBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.pre_mixer.collect_params(&sub(prefix, "pre_mixer"), out);
        self.proj_p.collect_params(&sub(prefix, "proj_p"), out);
        self.proj_o.collect_params(&sub(prefix, "proj_o"), out);
        self.ffn.collect_params(&sub(prefix, "ffn"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.pre_mixer.collect_params_mut(&sub(prefix, "pre_mixer"), out);
        self.proj_p.collect_params_mut(&sub(prefix, "proj_p"), out);
        self.proj_o.collect_params_mut(&sub(prefix, "proj_o"), out);
        self.ffn.collect_params_mut(&sub(prefix, "ffn"), out);
    }
}
