//! Named parameter traversal. Models and their gradients share one type, so a
//! single visiting order serves checkpoints, the optimizer and the
//! finite-difference checks.

use crate::tensor::{ConvLayer, ConvStack};

pub trait Params {
    /// Visit every tensor as `(name, shape, values)` in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Same order as [`Params::visit`].
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for ConvLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let (co, ci, k) = (self.c_out(), self.c_in(), self.kernel());
        f(&join(prefix, "weight"), &[co, ci, k, k], &self.weights);
        f(&join(prefix, "bias"), &[co], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weights);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Params for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

pub fn flatten(p: &(impl Params + ?Sized)) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// Overwrite all parameters from a flat vector in visiting order.
///
/// Panics if `values` does not have exactly [`count`] entries.
pub fn unflatten(p: &mut (impl Params + ?Sized), values: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, v| {
        v.copy_from_slice(&values[offset..offset + v.len()]);
        offset += v.len();
    });
    assert_eq!(offset, values.len(), "parameter vector length mismatch");
}

pub fn count(p: &(impl Params + ?Sized)) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| n += v.len());
    n
}

pub fn names(p: &(impl Params + ?Sized)) -> Vec<String> {
    let mut out = Vec::new();
    p.visit("", &mut |name, _, _| out.push(name.to_string()));
    out
}

/// `dst += scale · src`, tensor by tensor.
pub fn axpy<P: Params>(dst: &mut P, scale: f64, src: &P) {
    let flat = flatten(src);
    let mut offset = 0;
    dst.visit_mut("", &mut |_, v| {
        let len = v.len();
        for (d, s) in v.iter_mut().zip(&flat[offset..offset + len]) {
            *d += scale * s;
        }
        offset += len;
    });
}
