use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Row-major 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return shape_err(format!("{rows}x{cols} matrix with {} elements", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols]).expect("non-empty matrix")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}

/// `a · b`; each element sums over the inner index in ascending order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return shape_err(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Max-subtracted softmax. `axis = 1` normalizes each row, `axis = 0` each
/// column.
pub fn softmax<T: Scalar>(x: &Matrix<T>, axis: usize) -> Result<Matrix<T>> {
    match axis {
        1 => {
            let mut out = x.clone();
            for row in out.data.chunks_exact_mut(x.cols) {
                softmax_in_place(row);
            }
            Ok(out)
        }
        0 => Ok(softmax(&x.transpose(), 1)?.transpose()),
        _ => Err(Error::Shape(format!("softmax axis {axis} on a matrix"))),
    }
}

fn softmax_in_place<T: Scalar>(lane: &mut [T]) {
    let max = lane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v = *v / sum;
    }
}

/// `x · Wᵀ + b` with `weight` of shape `(out_features, in_features)`.
pub fn linear<T: Scalar>(x: &Matrix<T>, weight: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    if x.cols != weight.cols || bias.len() != weight.rows {
        return shape_err(format!(
            "linear: input {}x{}, weight {}x{}, bias {}",
            x.rows,
            x.cols,
            weight.rows,
            weight.cols,
            bias.len()
        ));
    }
    let mut out = Matrix::zeros(x.rows, weight.rows);
    for i in 0..x.rows {
        let xr = x.row(i);
        for (o, b) in bias.iter().enumerate() {
            let dot = xr
                .iter()
                .zip(weight.row(o))
                .fold(T::zero(), |acc, (&a, &w)| acc + a * w);
            out.data[i * weight.rows + o] = dot + *b;
        }
    }
    Ok(out)
}
