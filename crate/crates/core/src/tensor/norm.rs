use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Inference-mode batch normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnSpec<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BnSpec<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>, running_mean: Vec<T>, running_var: Vec<T>, eps: T) -> Result<Self> {
        let bn = Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        };
        bn.validate()?;
        Ok(bn)
    }

    /// A normalization that maps every input to itself: `γ=1, β=0, μ=0, σ²=1−ε`.
    pub fn identity(channels: usize, eps: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one() - eps; channels],
            eps,
        }
    }

    /// Fresh layer statistics: `γ=1, β=0, μ=0, σ²=1`.
    pub fn fresh(channels: usize, eps: T) -> Self {
        Self {
            running_var: vec![T::one(); channels],
            ..Self::identity(channels, eps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return shape_err("batch-norm arrays differ in length");
        }
        if !(self.eps > T::zero()) {
            return Err(Error::Config("batch-norm epsilon must be positive".into()));
        }
        if self.running_var.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::Config("batch-norm running variance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale·x + shift`.
    pub fn affine(&self) -> Vec<(T, T)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
                (scale, self.beta[c] - self.running_mean[c] * scale)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> BnSpec<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        BnSpec {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            eps: U::from_f64_lossy(self.eps.to_f64_lossy()),
        }
    }
}

/// `y = γ·(x − μ)/√(σ² + ε) + β` per channel, using running statistics.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor<T>, bn: &BnSpec<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if bn.channels() != c {
        return shape_err(format!("batch-norm has {} channels, input {c}", bn.channels()));
    }
    let denom: Vec<T> = bn.running_var.iter().map(|&v| (v + bn.eps).sqrt()).collect();
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let ch = i % c;
        let (g, m, b, d) = (bn.gamma[ch], bn.running_mean[ch], bn.beta[ch], denom[ch]);
        for v in plane {
            *v = g * (*v - m) / d + b;
        }
    }
    debug_assert_eq!(out.batch(), n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_bn_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([2, 3, 4, 4], 1.0, &mut rng);
        let y = batchnorm_infer(&x, &BnSpec::identity(3, 1e-5)).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn zero_gamma_broadcasts_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::randn([1, 2, 3, 3], 1.0, &mut rng);
        let bn = BnSpec::new(vec![0.0; 2], vec![0.25, -4.0], vec![0.3, 0.1], vec![2.0, 0.5], 1e-5).unwrap();
        let y = batchnorm_infer(&x, &bn).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.plane(0, 1).iter().all(|&v| v == -4.0));
    }

    #[test]
    fn matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn([2, 4, 3, 5], 2.0, &mut rng);
        let r = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..4).map(|_| rng.random_range(lo..hi)).collect() };
        let bn = BnSpec::new(r(&mut rng, 0.5, 2.0), r(&mut rng, -1.0, 1.0), r(&mut rng, -1.0, 1.0), r(&mut rng, 0.1, 3.0), 1e-3).unwrap();
        let y32 = batchnorm_infer(&x.cast::<f32>(), &bn.cast::<f32>()).unwrap();
        let expect = Tensor::from_fn(x.shape(), |[n, c, h, w]| {
            bn.gamma[c] * (x.at([n, c, h, w]) - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.beta[c]
        });
        assert!(y32.cast::<f64>().max_abs_diff(&expect).unwrap() < 1e-6);
        assert!(batchnorm_infer(&x, &bn).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(BnSpec::new(vec![1.0f32], vec![0.0], vec![0.0], vec![-1.0], 1e-5).is_err());
        assert!(BnSpec::new(vec![1.0f32], vec![0.0], vec![0.0], vec![1.0], 0.0).is_err());
        assert!(BnSpec::new(vec![1.0f32; 2], vec![0.0], vec![0.0], vec![1.0], 1e-5).is_err());
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(batchnorm_infer(&x, &BnSpec::identity(2, 1e-5)).is_err());
    }
}
