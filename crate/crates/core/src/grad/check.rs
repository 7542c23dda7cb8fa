use rand::Rng;

use super::{Differentiable, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Accepted finite-difference step sizes.
pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

fn evaluate<T, F>(f: &F, x: &Tensor<T>) -> Result<(Tape<T>, Var, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(Error::NonFinite(format!("output of {op}")));
    }
    if tape.value(loss)?.numel() != 1 {
        return Err(Error::Tape("loss must be a scalar".into()));
    }
    Ok((tape, xv, loss))
}

/// Largest `|a − n| / max(1, |a|, |n|)` over coordinates of `x`, comparing
/// the reverse-mode gradient `a` of `f` with the central difference
/// `n = (f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn check_gradient<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(Error::Config(format!(
            "eps {eps} outside [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    let (tape, xv, loss) = evaluate(&f, x)?;
    let analytic = tape.backward(loss)?.wrt(xv)?;
    if !analytic.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let step = T::from_f64_lossy(eps);
    let loss_at = |probe: &Tensor<T>| -> Result<f64> {
        let (tape, _, loss) = evaluate(&f, probe)?;
        Ok(tape.value(loss)?.data()[0].to_f64_lossy())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss_at(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = loss_at(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i].to_f64_lossy();
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check of a recorded block with respect to its input, under the
/// loss `Σ r ⊙ block(x)` for a fixed random `r`.
pub fn check_recorded<T, B, R>(block: &B, x: &Tensor<T>, eps: f64, rng: &mut R) -> Result<f64>
where
    T: Scalar,
    B: Differentiable<T>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = block.record(&mut tape, xv)?;
    let shape = tape.value(y)?.shape();
    let weights = Tensor::<T>::randn(shape, 1.0, rng);
    check_gradient(
        |t, x| {
            let y = block.record(t, x)?;
            let r = t.leaf(weights.clone());
            let p = t.mul(y, r)?;
            t.sum(p)
        },
        x,
        eps,
    )
}
