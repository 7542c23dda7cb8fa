//! Named parameter traversal shared by the weight-file reader and writer.

use crate::fusion::{ConvBn, RepBranchSpec};
use crate::scalar::Scalar;
use crate::tensor::{BnSpec, ConvSpec, Matrix};

pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// Anything holding named arrays. Names are dotted paths rooted at `prefix`.
pub trait Parameters<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn push<'a, T>(out: &mut Vec<ParamRef<'a, T>>, prefix: &str, name: &str, shape: Vec<usize>, data: &'a [T]) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape,
        data,
    });
}

fn push_mut<'a, T>(out: &mut Vec<ParamMut<'a, T>>, prefix: &str, name: &str, shape: Vec<usize>, data: &'a mut [T]) {
    out.push(ParamMut {
        name: join(prefix, name),
        shape,
        data,
    });
}

impl<T: Scalar> Parameters<T> for ConvSpec<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push(out, prefix, "weight", self.weight().shape().to_vec(), self.weight().data());
        push(out, prefix, "bias", vec![self.bias().len()], self.bias());
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let (w, b) = self.parts_mut();
        push_mut(out, prefix, "weight", w.shape().to_vec(), w.data_mut());
        push_mut(out, prefix, "bias", vec![b.len()], b);
    }
}

impl<T: Scalar> Parameters<T> for BnSpec<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let c = vec![self.channels()];
        push(out, prefix, "gamma", c.clone(), &self.gamma);
        push(out, prefix, "beta", c.clone(), &self.beta);
        push(out, prefix, "running_mean", c.clone(), &self.running_mean);
        push(out, prefix, "running_var", c, &self.running_var);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let c = vec![self.channels()];
        push_mut(out, prefix, "gamma", c.clone(), &mut self.gamma);
        push_mut(out, prefix, "beta", c.clone(), &mut self.beta);
        push_mut(out, prefix, "running_mean", c.clone(), &mut self.running_mean);
        push_mut(out, prefix, "running_var", c, &mut self.running_var);
    }
}

impl<T: Scalar> Parameters<T> for ConvBn<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        self.bn.collect_params(&join(prefix, "bn"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.collect_params_mut(&join(prefix, "conv"), out);
        self.bn.collect_params_mut(&join(prefix, "bn"), out);
    }
}

impl<T: Scalar> Parameters<T> for RepBranchSpec<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.main().collect_params(&join(prefix, "main"), out);
        if let Some(s) = self.scale() {
            s.collect_params(&join(prefix, "scale"), out);
        }
        if let Some(i) = self.identity() {
            i.collect_params(&join(prefix, "identity"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let (main, scale, identity) = self.parts_mut();
        main.collect_params_mut(&join(prefix, "main"), out);
        if let Some(s) = scale {
            s.collect_params_mut(&join(prefix, "scale"), out);
        }
        if let Some(i) = identity {
            i.collect_params_mut(&join(prefix, "identity"), out);
        }
    }
}

/// A classifier stored as an `(out, in)` weight matrix plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSpec<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Parameters<T> for LinearSpec<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push(out, prefix, "weight", vec![self.weight.rows(), self.weight.cols()], self.weight.data());
        push(out, prefix, "bias", vec![self.bias.len()], &self.bias);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let shape = vec![self.weight.rows(), self.weight.cols()];
        push_mut(out, prefix, "weight", shape, self.weight.data_mut());
        push_mut(out, prefix, "bias", vec![self.bias.len()], &mut self.bias);
    }
}
