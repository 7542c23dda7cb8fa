use rayon::prelude::*;

use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Weights and hyperparameters of a zero-padded 2-D convolution.
///
/// `weight` has shape `(out_channels, in_channels / groups, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T> {
    weight: Tensor<T>,
    bias: Vec<T>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Vec<T>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let out = weight.shape()[0];
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        if groups == 0 || out % groups != 0 {
            return Err(Error::Config(format!(
                "groups {groups} must divide out_channels {out}"
            )));
        }
        if bias.len() != out {
            return shape_err(format!("bias has {} entries, expected {out}", bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Vec<T>) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    /// `(kh, kw)`
    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return shape_err(format!(
                "{h}x{w} input with padding {} is smaller than {kh}x{kw} kernel",
                self.padding
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    /// Weight plus bias entries.
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvSpec<U> {
        ConvSpec {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

/// Direct convolution.
///
/// Each output plane is produced independently (and in parallel); within a
/// plane every element accumulates input channel by input channel, then
/// kernel row, then kernel column, starting from zero, with the bias added
/// last.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if c != spec.in_channels() {
        return shape_err(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels()
        ));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let oc = spec.out_channels();
    let (kh, kw) = spec.kernel();
    let cin_g = spec.weight.shape()[1];
    let oc_g = oc / spec.groups;
    let (s, p) = (spec.stride, spec.padding);
    let wdata = spec.weight.data();
    let xdata = x.data();

    let mut out = vec![T::zero(); n * oc * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let b = idx / oc;
            let o = idx % oc;
            let g = o / oc_g;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let inp = &xdata[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                let kbase = (o * cin_g + icg) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[kbase + ky * kw + kx];
                        let (lo, hi) = valid_range(ow, w, s, p, kx);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row_in = &inp[iy as usize * w..(iy as usize + 1) * w];
                            let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let shift = lo + kx - p;
                                for (acc, &xv) in row_out[lo..hi]
                                    .iter_mut()
                                    .zip(&row_in[shift..shift + (hi - lo)])
                                {
                                    *acc += wv * xv;
                                }
                            } else {
                                for (ox, acc) in row_out.iter_mut().enumerate().take(hi).skip(lo) {
                                    *acc += wv * row_in[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
            let bv = spec.bias[o];
            for v in plane.iter_mut() {
                *v += bv;
            }
        });
    Tensor::new([n, oc, oh, ow], out)
}

/// Output columns `lo..hi` whose input column `ox*s + kx - p` lies in `0..w`.
fn valid_range(ow: usize, w: usize, s: usize, p: usize, kx: usize) -> (usize, usize) {
    let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
    if w + p <= kx {
        return (0, 0);
    }
    let hi = ((w - 1 + p - kx) / s + 1).min(ow);
    (lo, hi)
}
