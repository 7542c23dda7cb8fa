use super::{Tape, Var};
use crate::blocks::{FfnBlock, MdtaBlock, RepConv, RepDwBlock, RepEmbedBlock, SdtaBlock, ATTENTION_SCALE, QK_DIM};
use crate::error::{Error, Result};
use crate::fusion::{ConvBn, RepBranchSpec};
use crate::scalar::{lit, Scalar};
use crate::tensor::BnSpec;

/// A train-form block that can replay its forward pass on a tape, with
/// every weight, bias, `γ` and `β` recorded as a leaf.
pub trait Differentiable<T: Scalar> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

fn record_bn<T: Scalar>(tape: &mut Tape<T>, x: Var, bn: &BnSpec<T>) -> Result<Var> {
    let gamma = tape.leaf_channels(&bn.gamma);
    let beta = tape.leaf_channels(&bn.beta);
    tape.batchnorm(x, gamma, beta, bn)
}

fn record_conv_bn<T: Scalar>(tape: &mut Tape<T>, x: Var, cb: &ConvBn<T>) -> Result<Var> {
    let w = tape.leaf(cb.conv.weight().clone());
    let b = tape.leaf_channels(cb.conv.bias());
    let y = tape.conv2d(x, w, Some(b), cb.conv.stride(), cb.conv.padding(), cb.conv.groups())?;
    record_bn(tape, y, &cb.bn)
}

impl<T: Scalar> Differentiable<T> for RepBranchSpec<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut y = record_conv_bn(tape, x, self.main())?;
        if let Some(s) = self.scale() {
            let ys = record_conv_bn(tape, x, s)?;
            y = tape.add(y, ys)?;
        }
        if let Some(bn) = self.identity() {
            let yi = record_bn(tape, x, bn)?;
            y = tape.add(y, yi)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> Differentiable<T> for RepConv<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.train().ok_or(Error::MissingForm("train"))?.record(tape, x)
    }
}

impl<T: Scalar> Differentiable<T> for RepEmbedBlock<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = self.conv.record(tape, x)?;
        if self.gelu {
            tape.gelu(y)
        } else {
            Ok(y)
        }
    }
}

impl<T: Scalar> Differentiable<T> for FfnBlock<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.expand.record(tape, x)?;
        let h = tape.gelu(h)?;
        self.project.record(tape, h)
    }
}

fn ffn_residual<T: Scalar>(tape: &mut Tape<T>, x1: Var, ffn: &FfnBlock<T>) -> Result<Var> {
    let f = ffn.record(tape, x1)?;
    tape.add(x1, f)
}

fn single_sample<T: Scalar>(tape: &Tape<T>, x: Var, what: &str) -> Result<[usize; 4]> {
    let shape = tape.value(x)?.shape();
    if shape[0] != 1 {
        return Err(Error::Shape(format!("{what} is recorded one sample at a time, got batch {}", shape[0])));
    }
    Ok(shape)
}

impl<T: Scalar> Differentiable<T> for RepDwBlock<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let m = self.mixer.record(tape, x)?;
        let x1 = tape.add(x, m)?;
        ffn_residual(tape, x1, &self.ffn)
    }
}

impl<T: Scalar> Differentiable<T> for SdtaBlock<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = single_sample(tape, x, "SDTA")?;
        let hw = h * w;
        let t = self.pre_mixer.record(tape, x)?;
        let p = self.proj_p.record(tape, t)?;
        let [q, k, v, u] = crate::blocks::sdta_split(c)?;
        let parts = tape.split(p, &[q, k, v, u])?;
        let qm = tape.reshape(parts[0], [1, 1, QK_DIM, hw])?;
        let km = tape.reshape(parts[1], [1, 1, QK_DIM, hw])?;
        let vm = tape.reshape(parts[2], [1, 1, v, hw])?;
        let qt = tape.transpose(qm)?;
        let scores = tape.matmul(qt, km)?;
        let scores = tape.scale(scores, lit(ATTENTION_SCALE))?;
        let map = tape.softmax(scores, 0)?;
        let att = tape.matmul(vm, map)?;
        let att = tape.reshape(att, [1, v, h, w])?;
        let gate = tape.sigmoid(parts[3])?;
        let cat = tape.concat(&[att, gate])?;
        let y = self.proj_o.record(tape, cat)?;
        let x1 = tape.add(x, y)?;
        ffn_residual(tape, x1, &self.ffn)
    }
}

impl<T: Scalar> Differentiable<T> for MdtaBlock<T> {
    fn record(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = single_sample(tape, x, "MDTA")?;
        let hw = h * w;
        let qkv = self.qkv.record(tape, x)?;
        let qkv = self.dwconv.record(tape, qkv)?;
        let parts = tape.split(qkv, &[c, c, c])?;
        let qm = tape.reshape(parts[0], [1, 1, c, hw])?;
        let km = tape.reshape(parts[1], [1, 1, c, hw])?;
        let vm = tape.reshape(parts[2], [1, 1, c, hw])?;
        let kt = tape.transpose(km)?;
        let scores = tape.matmul(qm, kt)?;
        let scores = tape.scale(scores, lit(1.0 / (c as f64).sqrt()))?;
        let a = tape.softmax(scores, 1)?;
        let out = tape.matmul(a, vm)?;
        let out = tape.reshape(out, [1, c, h, w])?;
        let y = self.proj.record(tape, out)?;
        let x1 = tape.add(x, y)?;
        ffn_residual(tape, x1, &self.ffn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Block, Mode};
    use crate::grad::check_recorded;
    use crate::init::Init;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn replay<B: Differentiable<f64>>(block: &B, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = block.record(&mut tape, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap().wrt(xv).unwrap();
        (tape.value(y).unwrap().clone(), g)
    }

    #[test]
    fn recorded_forward_matches_engine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([1, 8, 4, 4], 1.0, &mut rng);
        let repdw = RepDwBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let sdta = SdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let mdta = MdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let embed = RepEmbedBlock::<f64>::random(8, 16, 2, true, 1e-5, Init::Randomized, &mut rng).unwrap();
        let diffs = [
            replay(&repdw, &x).0.max_abs_diff(&repdw.forward(&x, Mode::Train).unwrap()).unwrap(),
            replay(&sdta, &x).0.max_abs_diff(&sdta.forward(&x, Mode::Train).unwrap()).unwrap(),
            replay(&mdta, &x).0.max_abs_diff(&mdta.forward(&x, Mode::Train).unwrap()).unwrap(),
            replay(&embed, &x).0.max_abs_diff(&embed.forward(&x, Mode::Train).unwrap()).unwrap(),
        ];
        assert!(diffs.iter().all(|&d| d < 1e-12), "{diffs:?}");
    }

    #[test]
    fn composed_block_gradients_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..4 {
            let x = Tensor::<f64>::randn([1, 8, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let repdw = RepDwBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
            let sdta = SdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
            let embed = RepEmbedBlock::<f64>::random(8, 8, 1, true, 1e-5, Init::Randomized, &mut rng).unwrap();
            assert!(replay(&repdw, &x).1.all_finite());
            assert!(replay(&sdta, &x).1.all_finite());
            assert!(replay(&embed, &x).1.all_finite());
        }
    }

    #[test]
    fn sdta_block_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = SdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let x = Tensor::randn([1, 8, 4, 4], 1.0, &mut rng);
        let err = check_recorded(&block, &x, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mdta_block_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = MdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let x = Tensor::randn([1, 8, 4, 4], 1.0, &mut rng);
        let err = check_recorded(&block, &x, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn deploy_only_block_cannot_be_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = RepDwBlock::<f64>::random(4, 2, 1e-5, Init::Randomized, &mut rng).unwrap().fused().unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 4, 2, 2]));
        assert!(matches!(block.record(&mut tape, x), Err(Error::MissingForm("train"))));
    }

    #[test]
    fn batched_attention_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let block = SdtaBlock::<f64>::random(8, 2, 1e-5, Init::Randomized, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 8, 2, 2]));
        assert!(matches!(block.record(&mut tape, x), Err(Error::Shape(_))));
    }
}
