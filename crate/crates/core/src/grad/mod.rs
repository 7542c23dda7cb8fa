//! Reverse-mode differentiation over the tensor kernels, and a
//! central-difference checker.
//!
//! A [`Tape`] records every operation in evaluation order, so node inputs
//! always precede the node and the graph is acyclic by construction.
//! Matrices live on the tape as `[1, 1, rows, cols]` tensors. Batch-norm is
//! differentiated with its running statistics held fixed.

mod check;
mod record;

pub use check::{check_gradient, check_recorded, EPS_RANGE};
pub use record::Differentiable;

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{
    batchnorm_infer, concat_channels, conv2d, gelu, global_avg_pool, linear, matmul, narrow_channels, sigmoid,
    softmax, BnSpec, ConvSpec, Matrix, Tensor,
};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    MatMul(Var, Var),
    Softmax(Var, usize),
    Sigmoid(Var),
    Gelu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    AvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::MatMul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::AvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-owner record of a computation.
#[derive(Debug)]
pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<Matrix<T>> {
    let [n, c, r, k] = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("{what}: expected a [1, 1, r, c] matrix, got {:?}", t.shape())));
    }
    Matrix::new(r, k, t.data().to_vec())
}

fn from_matrix<T: Scalar>(m: Matrix<T>) -> Result<Tensor<T>> {
    Tensor::new([1, 1, m.rows(), m.cols()], m.into_data())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("elementwise op on {:?} and {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(Error::Tape(format!("variable {} was recorded on another tape", v.index)));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Tape(format!("variable {} is not on the tape", v.index)))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Name of the first recorded op whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes.iter().find(|n| !n.value.all_finite()).map(|n| n.op.name())
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a vector as a `[1, len, 1, 1]` tensor.
    pub fn leaf_channels(&mut self, values: &[T]) -> Var {
        let t = Tensor::new([1, values.len(), 1, 1], values.to_vec()).expect("length matches shape");
        self.leaf(t)
    }

    /// Leaf holding a matrix as a `[1, 1, rows, cols]` tensor.
    pub fn leaf_matrix(&mut self, m: &Matrix<T>) -> Var {
        let t = from_matrix(m.clone()).expect("length matches shape");
        self.leaf(t)
    }

    /// Convolution with weight `w` of shape `(out, in/groups, kh, kw)` and
    /// optional bias `b` of shape `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let weight = self.value(w)?.clone();
        let out = weight.shape()[0];
        let bias = match b {
            Some(b) => self.value(b)?.data().to_vec(),
            None => vec![T::zero(); out],
        };
        let spec = ConvSpec::new(weight, bias, stride, padding, groups)?;
        let y = conv2d(self.value(x)?, &spec)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
        ))
    }

    /// Inference-mode batch-norm with `γ`, `β` on the tape and fixed
    /// running statistics taken from `bn`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, bn: &BnSpec<T>) -> Result<Var> {
        let spec = BnSpec::new(
            self.value(gamma)?.data().to_vec(),
            self.value(beta)?.data().to_vec(),
            bn.running_mean.clone(),
            bn.running_var.clone(),
            bn.eps,
        )?;
        let y = batchnorm_infer(self.value(x)?, &spec)?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: spec.running_mean,
                var: spec.running_var,
                eps: spec.eps,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(&as_matrix(self.value(a)?, "matmul")?, &as_matrix(self.value(b)?, "matmul")?)?;
        Ok(self.push(from_matrix(y)?, Op::MatMul(a, b)))
    }

    /// Softmax of a matrix; `axis = 1` over rows, `axis = 0` over columns.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = softmax(&as_matrix(self.value(x)?, "softmax")?, axis)?;
        Ok(self.push(from_matrix(y)?, Op::Softmax(x, axis)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = sigmoid(self.value(x)?);
        Ok(self.push(y, Op::Sigmoid(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = gelu(self.value(x)?);
        Ok(self.push(y, Op::Gelu(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_map(self.value(a)?, self.value(b)?, |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_map(self.value(a)?, self.value(b)?, |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x)?.map(|v| v * s);
        Ok(self.push(y, Op::Scale(x, s)))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals = xs.iter().map(|&v| self.value(v)).collect::<Result<Vec<_>>>()?;
        let y = concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = narrow_channels(self.value(x)?, start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }))
    }

    /// Consecutive channel groups of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let c = self.value(x)?.channels();
        if total != c {
            return Err(Error::Shape(format!("split sizes sum to {total}, tensor has {c} channels")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// `[N, C, H, W]` to the `N×C` matrix of spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = from_matrix(global_avg_pool(self.value(x)?))?;
        Ok(self.push(y, Op::AvgPool(x)))
    }

    /// `x·Wᵀ + b` with `x` an `N×in` matrix, `w` an `out×in` matrix and
    /// `b` a `1×out` matrix.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = linear(
            &as_matrix(self.value(x)?, "linear input")?,
            &as_matrix(self.value(w)?, "linear weight")?,
            as_matrix(self.value(b)?, "linear bias")?.data(),
        )?;
        Ok(self.push(from_matrix(y)?, Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let y = self.value(x)?.clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = as_matrix(self.value(x)?, "transpose")?.transpose();
        Ok(self.push(from_matrix(y)?, Op::Transpose(x)))
    }

    /// Sum of all elements, as a `[1, 1, 1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x)?.data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::full([1, 1, 1, 1], s), Op::Sum(x)))
    }

    /// Gradient of a scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::Tape(format!("loss must be a scalar, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (input, contrib) in self.input_grads(node, &g)? {
                self.node(input)?;
                if input.index >= i {
                    return Err(Error::Tape(format!("node {i} reads a later node {}", input.index)));
                }
                let slot = &mut grads[input.index];
                match slot {
                    Some(acc) => crate::tensor::add_assign(acc, &contrib)?,
                    None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            } => {
                let (dx, dw, db) = conv_backward(val(*x)?, val(*w)?, g, *stride, *padding, *groups)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = val(*x)?;
                let [_, c, h, w] = xv.shape();
                let gam = val(*gamma)?.data();
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                let mut dx = g.clone();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (p, (gp, xp)) in g.data().chunks_exact(h * w).zip(xv.data().chunks_exact(h * w)).enumerate() {
                    let ch = p % c;
                    for (j, (&gv, &xval)) in gp.iter().zip(xp).enumerate() {
                        dx.data_mut()[p * h * w + j] = gv * gam[ch] * inv[ch];
                        dgamma[ch] += gv * (xval - mean[ch]) * inv[ch];
                        dbeta[ch] += gv;
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::new([1, c, 1, 1], dgamma)?),
                    (*beta, Tensor::new([1, c, 1, 1], dbeta)?),
                ]
            }
            Op::MatMul(a, b) => {
                let gm = as_matrix(g, "matmul grad")?;
                let am = as_matrix(val(*a)?, "matmul")?;
                let bm = as_matrix(val(*b)?, "matmul")?;
                vec![
                    (*a, from_matrix(matmul(&gm, &bm.transpose())?)?),
                    (*b, from_matrix(matmul(&am.transpose(), &gm)?)?),
                ]
            }
            Op::Softmax(x, axis) => {
                let ym = as_matrix(y, "softmax")?;
                let gm = as_matrix(g, "softmax grad")?;
                let dx = match axis {
                    1 => softmax_rows_backward(&ym, &gm)?,
                    _ => softmax_rows_backward(&ym.transpose(), &gm.transpose())?.transpose(),
                };
                vec![(*x, from_matrix(dx)?)]
            }
            Op::Sigmoid(x) => vec![(*x, zip_map(g, y, |gv, s| gv * s * (T::one() - s))?)],
            Op::Gelu(x) => {
                let inv_sqrt_2pi: T = lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half: T = lit(0.5);
                let inv_sqrt2: T = lit(std::f64::consts::FRAC_1_SQRT_2);
                let d = zip_map(g, val(*x)?, |gv, v| {
                    let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    gv * (cdf + v * pdf)
                })?;
                vec![(*x, d)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(*b)?, |gv, q| gv * q)?),
                (*b, zip_map(g, val(*a)?, |gv, p| gv * p)?),
            ],
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::Concat(xs) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &v in xs {
                    let c = val(v)?.channels();
                    out.push((v, narrow_channels(g, start, c)?));
                    start += c;
                }
                out
            }
            Op::Narrow { x, start } => {
                let xs = val(*x)?.shape();
                let [n, len, h, w] = g.shape();
                let mut dx = Tensor::zeros(xs);
                let plane = h * w;
                for b in 0..n {
                    for c in 0..len {
                        let dst = (b * xs[1] + start + c) * plane;
                        dx.data_mut()[dst..dst + plane].copy_from_slice(g.plane(b, c));
                    }
                }
                vec![(*x, dx)]
            }
            Op::AvgPool(x) => {
                let [n, c, h, w] = val(*x)?.shape();
                let inv: T = lit(1.0 / (h * w) as f64);
                let gm = g.data();
                vec![(*x, Tensor::from_fn([n, c, h, w], |[b, ch, _, _]| gm[b * c + ch] * inv))]
            }
            Op::Linear { x, w, b } => {
                let gm = as_matrix(g, "linear grad")?;
                let xm = as_matrix(val(*x)?, "linear input")?;
                let wm = as_matrix(val(*w)?, "linear weight")?;
                let mut db = vec![T::zero(); gm.cols()];
                for r in 0..gm.rows() {
                    for (acc, &v) in db.iter_mut().zip(gm.row(r)) {
                        *acc += v;
                    }
                }
                vec![
                    (*x, from_matrix(matmul(&gm, &wm)?)?),
                    (*w, from_matrix(matmul(&gm.transpose(), &xm)?)?),
                    (*b, Tensor::new([1, 1, 1, db.len()], db)?),
                ]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x)?.shape())?)],
            Op::Transpose(x) => vec![(*x, from_matrix(as_matrix(g, "transpose grad")?.transpose())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x)?.shape(), g.data()[0]))],
        })
    }
}

/// Gradients of one loss, indexed by the variables of the tape that
/// produced it.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    tape: usize,
    shapes: Vec<[usize; 4]>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `d loss / d v`; zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(Error::Tape(format!("variable {} is not on this tape", v.index)));
        }
        Ok(match self.grads.get(v.index) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.shapes[v.index]),
        })
    }
}

fn softmax_rows_backward<T: Scalar>(y: &Matrix<T>, g: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Vec::with_capacity(y.data().len());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Matrix::new(y.rows(), y.cols(), out)
}

/// Gradients of a grouped, zero-padded convolution with respect to its
/// input, weight and bias.
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, _, h, wd] = x.shape();
    let [oc, cin_g, kh, kw] = w.shape();
    let [_, _, oh, ow] = g.shape();
    let oc_g = oc / groups;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = vec![T::zero(); oc];
    for b in 0..n {
        for o in 0..oc {
            let grp = o / oc_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g.at([b, o, oy, ox]);
                    db[o] += gv;
                    for icg in 0..cin_g {
                        let ic = grp * cin_g + icg;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = [b, ic, iy as usize, ix as usize];
                                let wi = [o, icg, ky, kx];
                                dw.set(wi, dw.at(wi) + gv * x.at(xi));
                                dx.set(xi, dx.at(xi) + gv * w.at(wi));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, Tensor::new([1, oc, 1, 1], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_bias_gradient_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::randn([1, 1, 3, 4], 1.0, &mut rng));
        let w = t.leaf(Tensor::randn([1, 1, 5, 4], 1.0, &mut rng));
        let b = t.leaf(Tensor::randn([1, 1, 1, 5], 1.0, &mut rng));
        let y = t.linear(x, w, b).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        // Three rows each contribute one.
        assert!(g.wrt(b).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn weighted_sum_gradient_is_the_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Tensor::<f64>::randn([2, 3, 4, 5], 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::randn([2, 3, 4, 5], 1.0, &mut rng));
        let cv = t.leaf(c.clone());
        let y = t.mul(cv, x).unwrap();
        let loss = t.sum(y).unwrap();
        assert_eq!(t.backward(loss).unwrap().wrt(x).unwrap(), c);
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::full([1, 2, 2, 2], 1.0));
        let unused = t.leaf(Tensor::full([1, 1, 1, 3], 1.0));
        let loss = t.sum(a).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let va = a.leaf(Tensor::full([1, 1, 1, 1], 1.0));
        let vb = b.leaf(Tensor::full([1, 1, 1, 1], 1.0));
        assert!(matches!(a.add(va, vb), Err(Error::Tape(_))));
        assert!(matches!(a.backward(vb), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn non_finite_node_is_reported() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full([1, 1, 1, 2], f64::MAX));
        assert_eq!(t.first_non_finite(), None);
        t.scale(x, 10.0).unwrap();
        assert_eq!(t.first_non_finite(), Some("scale"));
    }

    #[test]
    fn split_then_concat_round_trips_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::randn([1, 6, 2, 2], 1.0, &mut rng));
        let parts = t.split(x, &[1, 2, 3]).unwrap();
        let y = t.concat(&[parts[2], parts[0], parts[1]]).unwrap();
        let w = t.leaf(Tensor::from_fn([1, 6, 2, 2], |[_, c, h, w]| (c * 4 + h * 2 + w) as f64));
        let l = t.mul(y, w).unwrap();
        let loss = t.sum(l).unwrap();
        let g = t.backward(loss).unwrap().wrt(x).unwrap();
        // y channel order is x[3..6], x[0], x[1..3].
        let expect_channel = |c: usize| match c {
            0 => 3,
            1 | 2 => c + 3,
            _ => c - 3,
        };
        for c in 0..6 {
            assert_eq!(g.at([0, c, 1, 0]), (expect_channel(c) * 4 + 2) as f64);
        }
    }
}
