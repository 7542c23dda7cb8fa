//! Dense NCHW tensors and the numeric kernels the blocks are built from.
//!
//! Every kernel is a pure function of its inputs. Where an output element is
//! a sum, the terms are accumulated in a fixed order (input channel, then
//! kernel row, then kernel column, bias last), so repeated evaluation is
//! bit-identical regardless of how output elements are spread over threads.

mod conv;
mod matrix;
mod norm;

pub use conv::{conv2d, ConvSpec};
pub use matrix::{linear, matmul, softmax, Matrix};
pub use norm::{batchnorm_infer, BnSpec};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};

/// Rank-4 tensor in NCHW layout, W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("all extents must be >= 1, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [_, c, h, w] = shape;
        for (i, v) in t.data.iter_mut().enumerate() {
            let x = i % w;
            let y = (i / w) % h;
            let ch = (i / (w * h)) % c;
            let n = i / (w * h * c);
            *v = f([n, ch, y, x]);
        }
        t
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = lit(z * std);
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, [n, c, h, w]: [usize; 4]) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    /// The `H×W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Sample `n` as a `(1, C, H, W)` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.numel() / self.shape[0];
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("cannot stack an empty list");
        };
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return shape_err(format!("stack: {:?} vs {:?}", p.shape, first.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::new([n, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return shape_err(format!("compare {:?} with {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return shape_err(format!("add {:?} and {:?}", a.shape, b.shape));
    }
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

/// In-place `acc += x`.
pub fn add_assign<T: Scalar>(acc: &mut Tensor<T>, x: &Tensor<T>) -> Result<()> {
    if acc.shape != x.shape {
        return shape_err(format!("add {:?} and {:?}", acc.shape, x.shape));
    }
    for (a, &b) in acc.data.iter_mut().zip(&x.data) {
        *a += b;
    }
    Ok(())
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar<T: Scalar>(v: T) -> T {
    let half: T = lit(0.5);
    half * v * (T::one() + (v * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Mean over H and W; returns an `N × C` matrix.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Matrix<T> {
    let [n, c, h, w] = x.shape;
    let denom: T = lit((h * w) as f64);
    let data = x
        .data
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Matrix::new(n, c, data).expect("pool shape")
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = xs.first() else {
        return shape_err("concat of an empty list");
    };
    let [n, _, h, w] = first.shape;
    if let Some(bad) = xs
        .iter()
        .find(|t| t.shape[0] != n || t.shape[2] != h || t.shape[3] != w)
    {
        return shape_err(format!("concat {:?} with {:?}", first.shape, bad.shape));
    }
    let c_total: usize = xs.iter().map(|t| t.shape[1]).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for t in xs {
            let per = t.shape[1] * h * w;
            data.extend_from_slice(&t.data[b * per..(b + 1) * per]);
        }
    }
    Tensor::new([n, c_total, h, w], data)
}

/// Channels `start..start + len` of `x`.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape;
    if len == 0 || start + len > c {
        return shape_err(format!("narrow {start}+{len} out of {c} channels"));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        let base = (b * c + start) * hw;
        data.extend_from_slice(&x.data[base..base + len * hw]);
    }
    Tensor::new([n, len, h, w], data)
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.channels() {
        return shape_err(format!(
            "split sizes {sizes:?} sum to {total}, tensor has {} channels",
            x.channels()
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = narrow_channels(x, start, len);
            start += len;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn split_then_concat_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn([2, 7, 3, 2], 1.0, &mut rng);
        let parts = split_channels(&x, &[1, 4, 2]).unwrap();
        assert_eq!(parts[1].shape(), [2, 4, 3, 2]);
        let refs: Vec<_> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), x);
        assert!(split_channels(&x, &[3, 3]).is_err());
    }

    #[test]
    fn concat_requires_matching_extents() {
        let a = Tensor::<f32>::zeros([1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 2, 3, 4]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn pool_of_constant() {
        let x = Tensor::<f64>::full([2, 3, 5, 4], 2.5);
        let m = global_avg_pool(&x);
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert!(m.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0f64) - 0.8413447460685429).abs() < 1e-15);
        assert!((sigmoid_scalar(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn index_helpers_agree() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f32);
        assert_eq!(t.at([1, 2, 3, 4]), 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
        assert_eq!(t.sample(1).at([0, 2, 3, 4]), 1234.0);
    }
}
