//! The three-stage pyramid: a stride-16 RepEmbed stem, two RepDW stages,
//! an attention stage, and a pooled linear classifier.
//!
//! ```text
//! 3 ─stem×4 (s2)─▶ d0 ─RepDW×n0─▶ ─RepEmbed(s2)─▶ d1 ─RepDW×n1─▶ ─RepEmbed(s2)─▶ d2 ─SDTA×n2─▶ GAP ─▶ linear
//! ```

mod config;
mod cost;

pub use config::{Attention, ModelConfig, Variant};
pub use cost::{count, CostReport, LayerCost};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{Block, MdtaBlock, Mode, RepDwBlock, RepEmbedBlock, SdtaBlock};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::params::{join, LinearSpec, ParamMut, ParamRef, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{global_avg_pool, linear, Matrix, Tensor};

/// Images in the seeded batch used to set batch-norm statistics at build time.
pub const CALIBRATION_BATCH: usize = 8;

/// Attention-stage block, SDTA or the MDTA ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage3Block<T> {
    Sdta(SdtaBlock<T>),
    Mdta(MdtaBlock<T>),
}

impl<T: Scalar> Block<T> for Stage3Block<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Stage3Block::Sdta(b) => b.forward(x, mode),
            Stage3Block::Mdta(b) => b.forward(x, mode),
        }
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Stage3Block::Sdta(b) => b.calibrate(x),
            Stage3Block::Mdta(b) => b.calibrate(x),
        }
    }

    fn fused(&self) -> Result<Self> {
        Ok(match self {
            Stage3Block::Sdta(b) => Stage3Block::Sdta(b.fused()?),
            Stage3Block::Mdta(b) => Stage3Block::Mdta(b.fused()?),
        })
    }

    fn param_count(&self) -> usize {
        match self {
            Stage3Block::Sdta(b) => b.param_count(),
            Stage3Block::Mdta(b) => b.param_count(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Stage3Block<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        match self {
            Stage3Block::Sdta(b) => b.collect_params(prefix, out),
            Stage3Block::Mdta(b) => b.collect_params(prefix, out),
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        match self {
            Stage3Block::Sdta(b) => b.collect_params_mut(prefix, out),
            Stage3Block::Mdta(b) => b.collect_params_mut(prefix, out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    mode: Mode,
    pub stem: Vec<RepEmbedBlock<T>>,
    pub stage1: Vec<RepDwBlock<T>>,
    pub down12: RepEmbedBlock<T>,
    pub stage2: Vec<RepDwBlock<T>>,
    pub down23: RepEmbedBlock<T>,
    pub stage3: Vec<Stage3Block<T>>,
    pub head: LinearSpec<T>,
}

/// Train-vs-deploy agreement of one block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub max_abs_diff: f64,
    pub pass: bool,
}

impl<T: Scalar> Model<T> {
    /// Train-form model with seeded weights.
    ///
    /// Convolutions use Kaiming fan-in scaling with zero bias, batch-norm
    /// starts at `γ=1, β=0`, the classifier has `N(0, 1/in)` weights and
    /// zero bias. Batch-norm running statistics are then set from one
    /// forward pass over a seeded batch of `N(0,1)` images at the configured
    /// resolution, which keeps activations bounded through the residual
    /// stages.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::random(config, &mut rng)?;
        let r = config.input_resolution;
        let probe = Tensor::randn([CALIBRATION_BATCH, 3, r, r], 1.0, &mut rng);
        model.calibrate(&probe)?;
        Ok(model)
    }

    /// Seeded weights with fresh (uncalibrated) batch-norm statistics.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let eps = config.bn_eps;
        let init = Init::Fresh;
        let stem_c = config.stem_channels();
        let mut stem = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in stem_c.iter().enumerate() {
            stem.push(RepEmbedBlock::random(cin, cout, 2, i < 3, eps, init, rng)?);
            cin = cout;
        }
        let [d1, d2, d3] = config.dims;
        let r = config.ffn_ratio;
        let stage1 = (0..config.depths[0])
            .map(|_| RepDwBlock::random(d1, r, eps, init, rng))
            .collect::<Result<_>>()?;
        let down12 = RepEmbedBlock::random(d1, d2, 2, false, eps, init, rng)?;
        let stage2 = (0..config.depths[1])
            .map(|_| RepDwBlock::random(d2, r, eps, init, rng))
            .collect::<Result<_>>()?;
        let down23 = RepEmbedBlock::random(d2, d3, 2, false, eps, init, rng)?;
        let stage3 = (0..config.depths[2])
            .map(|_| match config.attention {
                Attention::Sdta => SdtaBlock::random(d3, r, eps, init, rng).map(Stage3Block::Sdta),
                Attention::Mdta => MdtaBlock::random(d3, r, eps, init, rng).map(Stage3Block::Mdta),
            })
            .collect::<Result<_>>()?;
        let std = (1.0 / d3 as f64).sqrt();
        let head_w = Tensor::<T>::randn([1, 1, config.num_classes, d3], std, rng);
        let head = LinearSpec {
            weight: Matrix::new(config.num_classes, d3, head_w.into_data())?,
            bias: vec![T::zero(); config.num_classes],
        };
        Ok(Self {
            config: config.clone(),
            mode: Mode::Train,
            stem,
            stage1,
            down12,
            stage2,
            down23,
            stage3,
            head,
        })
    }

    /// Model with the right layout for `config` and `mode`, meant to be
    /// overwritten by stored weights.
    pub fn skeleton(config: &ModelConfig, mode: Mode) -> Result<Self> {
        let model = Self::random(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        match mode {
            Mode::Train => Ok(model),
            Mode::Deploy => model.deploy(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn calibrate(&mut self, x: &Tensor<T>) -> Result<()> {
        let mut h = x.clone();
        for b in &mut self.stem {
            h = b.calibrate(&h)?;
        }
        for b in &mut self.stage1 {
            h = b.calibrate(&h)?;
        }
        h = self.down12.calibrate(&h)?;
        for b in &mut self.stage2 {
            h = b.calibrate(&h)?;
        }
        h = self.down23.calibrate(&h)?;
        for b in &mut self.stage3 {
            h = b.calibrate(&h)?;
        }
        Ok(())
    }

    /// Pooled stage-3 features, `N × dims[2]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Matrix<T>> {
        let [_, c, h, w] = x.shape();
        if c != 3 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "input must be (N, 3, H, W) with H and W multiples of 16, got {:?}",
                x.shape()
            )));
        }
        let mode = self.mode;
        let mut h = x.clone();
        for b in &self.stem {
            h = b.forward(&h, mode)?;
        }
        for b in &self.stage1 {
            h = b.forward(&h, mode)?;
        }
        h = self.down12.forward(&h, mode)?;
        for b in &self.stage2 {
            h = b.forward(&h, mode)?;
        }
        h = self.down23.forward(&h, mode)?;
        for b in &self.stage3 {
            h = b.forward(&h, mode)?;
        }
        Ok(global_avg_pool(&h))
    }

    /// Class scores, `N × num_classes`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Matrix<T>> {
        linear(&self.features(x)?, &self.head.weight, &self.head.bias)
    }

    /// Deploy-form copy: every unit fused, every batch-norm folded.
    pub fn deploy(&self) -> Result<Self> {
        if self.mode == Mode::Deploy {
            return Err(Error::AlreadyDeployed);
        }
        let fuse_all = |v: &[RepDwBlock<T>]| v.iter().map(Block::fused).collect::<Result<Vec<_>>>();
        Ok(Self {
            config: self.config.clone(),
            mode: Mode::Deploy,
            stem: self.stem.iter().map(Block::fused).collect::<Result<_>>()?,
            stage1: fuse_all(&self.stage1)?,
            down12: self.down12.fused()?,
            stage2: fuse_all(&self.stage2)?,
            down23: self.down23.fused()?,
            stage3: self.stage3.iter().map(Block::fused).collect::<Result<_>>()?,
            head: self.head.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.stem.iter().map(Block::param_count).sum::<usize>()
            + self.stage1.iter().map(Block::param_count).sum::<usize>()
            + self.down12.param_count()
            + self.stage2.iter().map(Block::param_count).sum::<usize>()
            + self.down23.param_count()
            + self.stage3.iter().map(Block::param_count).sum::<usize>()
            + self.head.weight.data().len()
            + self.head.bias.len()
    }

    pub fn cost(&self) -> Result<CostReport> {
        count(&self.config, self.mode, self.config.input_resolution)
    }

    /// Run every block in train form and in fused form on `samples` random
    /// inputs shaped like its real input at the configured resolution.
    pub fn verify_blocks<R: Rng + ?Sized>(&self, samples: usize, tol: f64, rng: &mut R) -> Result<Vec<BlockCheck>> {
        if self.mode == Mode::Deploy {
            return Err(Error::MissingForm("train"));
        }
        if samples == 0 {
            return Err(Error::Config("need at least one sample".into()));
        }
        let cfg = &self.config;
        let mut side = cfg.input_resolution;
        let [r1, r2, r3] = cfg.stage_resolutions(side);
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, b) in self.stem.iter().enumerate() {
            out.push(check_block(format!("stem.{i}"), b, [1, cin, side, side], samples, tol, rng)?);
            cin = cfg.stem_channels()[i];
            side = (side - 1) / 2 + 1;
        }
        let [d1, d2, d3] = cfg.dims;
        for (i, b) in self.stage1.iter().enumerate() {
            out.push(check_block(format!("stage1.block{i}"), b, [1, d1, r1, r1], samples, tol, rng)?);
        }
        out.push(check_block("down12".into(), &self.down12, [1, d1, r1, r1], samples, tol, rng)?);
        for (i, b) in self.stage2.iter().enumerate() {
            out.push(check_block(format!("stage2.block{i}"), b, [1, d2, r2, r2], samples, tol, rng)?);
        }
        out.push(check_block("down23".into(), &self.down23, [1, d2, r2, r2], samples, tol, rng)?);
        for (i, b) in self.stage3.iter().enumerate() {
            out.push(check_block(format!("stage3.block{i}"), b, [1, d3, r3, r3], samples, tol, rng)?);
        }
        Ok(out)
    }
}

fn check_block<T: Scalar, B: Block<T>, R: Rng + ?Sized>(
    name: String,
    block: &B,
    shape: [usize; 4],
    samples: usize,
    tol: f64,
    rng: &mut R,
) -> Result<BlockCheck> {
    let fused = block.fused()?;
    let mut worst = T::zero();
    for _ in 0..samples {
        let x = Tensor::randn(shape, 1.0, rng);
        let d = block.forward(&x, Mode::Train)?.max_abs_diff(&fused.forward(&x, Mode::Deploy)?)?;
        worst = worst.max(d);
    }
    let max_abs_diff = worst.to_f64_lossy();
    Ok(BlockCheck {
        block: name,
        max_abs_diff,
        pass: max_abs_diff <= tol,
    })
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, b) in self.stem.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("stem.{i}")), out);
        }
        for (i, b) in self.stage1.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("stage1.block{i}")), out);
        }
        self.down12.collect_params(&join(prefix, "down12"), out);
        for (i, b) in self.stage2.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("stage2.block{i}")), out);
        }
        self.down23.collect_params(&join(prefix, "down23"), out);
        for (i, b) in self.stage3.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("stage3.block{i}")), out);
        }
        self.head.collect_params(&join(prefix, "head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (i, b) in self.stem.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("stem.{i}")), out);
        }
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("stage1.block{i}")), out);
        }
        self.down12.collect_params_mut(&join(prefix, "down12"), out);
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("stage2.block{i}")), out);
        }
        self.down23.collect_params_mut(&join(prefix, "down23"), out);
        for (i, b) in self.stage3.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("stage3.block{i}")), out);
        }
        self.head.collect_params_mut(&join(prefix, "head"), out);
    }
}

/// Seeded `N(0,1)` input batch.
pub fn random_input<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
