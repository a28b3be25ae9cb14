//! Dense tensor substrate: NHWC storage, same-padded convolution with an
//! analytic backward pass, row softmax, matrix product and a central
//! finite-difference gradient oracle.

use rand::Rng;

use crate::error::{Error, Result};

/// Four-axis tensor in `(n, h, w, c)` raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor4 { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_vec(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (n, h, w, c) = dims;
        let len = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::shape(format!("dims {dims:?} overflow")))?;
        if len != data.len() {
            return Err(Error::shape(format!("dims {dims:?} need {len} values, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite tensor entry at {i}")));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn from_fn(dims: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let (n, h, w, c) = dims;
        let mut data = Vec::with_capacity(n * h * w * c);
        for a in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f(a, y, x, ch));
                    }
                }
            }
        }
        Tensor4 { n, h, w, c, data }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(n, y, x, c);
        self.data[i] = v;
    }

    /// Channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[f64] {
        let i = self.index(n, y, x, 0);
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, n: usize, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(n, y, x, 0);
        let c = self.c;
        &mut self.data[i..i + c]
    }

    /// Copy of frames `start..start + count` along the n axis.
    pub fn frames(&self, start: usize, count: usize) -> Tensor4 {
        assert!(start + count <= self.n, "frame range out of bounds");
        let stride = self.h * self.w * self.c;
        Tensor4 {
            n: count,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        }
    }

    pub fn frame(&self, index: usize) -> Tensor4 {
        self.frames(index, 1)
    }

    /// Concatenate along the n axis.
    pub fn stack(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let (_, h, w, c) = first.dims();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w, p.c) != (h, w, c) {
                return Err(Error::shape(format!("stack: frame dims {:?} differ from {:?}", p.dims(), first.dims())));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Numerically stabilized softmax of one row, in place.
#[inline]
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    if out.cols > 0 {
        for row in out.data.chunks_mut(out.cols) {
            softmax_in_place(row);
        }
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let s = a.data[i * a.cols + k];
            for (d, &bv) in dst.iter_mut().zip(b.row(k)) {
                *d += s * bv;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu(a) => {
                if z > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

/// Slope used after every hidden convolution.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Stride-1, zero same-padded 2-D convolution.
///
/// Weights are laid out `(c_out, c_in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    c_in: usize,
    c_out: usize,
    k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size {k} must be odd")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::config("conv channels must be nonzero"));
        }
        if weights.len() != c_out * c_in * k * k {
            return Err(Error::config(format!(
                "conv weights: expected {} values, got {}",
                c_out * c_in * k * k,
                weights.len()
            )));
        }
        if bias.len() != c_out {
            return Err(Error::config(format!("conv bias: expected {c_out} values, got {}", bias.len())));
        }
        Ok(ConvLayer { c_in, c_out, k, weights, bias, activation })
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, activation: Activation) -> Result<Self> {
        Self::new(c_in, c_out, k, vec![0.0; c_out * c_in * k * k], vec![0.0; c_out], activation)
    }

    /// Variance-preserving uniform init: `±gain·sqrt(3 / (c_in k²))` with
    /// `gain² = 2 / (1 + slope²)` for leaky layers and 1 otherwise. Zero bias.
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(c_in, c_out, k, activation)?;
        let gain2 = match activation {
            Activation::LeakyRelu(a) => 2.0 / (1.0 + a * a),
            Activation::Identity => 1.0,
        };
        let bound = (3.0 * gain2 / (c_in * k * k) as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
        Ok(layer)
    }

    /// 1x1 identity over channels with zero bias and identity activation.
    pub fn identity(channels: usize) -> Self {
        let mut layer = Self::zeros(channels, channels, 1, Activation::Identity).expect("1x1 kernel is odd");
        for c in 0..channels {
            layer.weights[c * channels + c] = 1.0;
        }
        layer
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((co * self.c_in + ci) * self.k + ky) * self.k + kx]
    }

    /// Weights repacked as `(c_out, ky, kx, c_in)`, one contiguous row per
    /// output channel matching the layout of [`ConvLayer::gather`].
    fn packed(&self) -> Vec<f64> {
        let (k, ci_n, co_n) = (self.k, self.c_in, self.c_out);
        let mut out = vec![0.0; self.weights.len()];
        for co in 0..co_n {
            for ci in 0..ci_n {
                for ky in 0..k {
                    for kx in 0..k {
                        out[((co * k + ky) * k + kx) * ci_n + ci] = self.weight(co, ci, ky, kx);
                    }
                }
            }
        }
        out
    }

    /// Copy the zero-padded `k × k` window around `(y, x)` into `buf`
    /// as `(ky, kx, c_in)`.
    fn gather(&self, input: &Tensor4, b: usize, y: usize, x: usize, buf: &mut [f64]) {
        let (_, h, w, _) = input.dims();
        let (k, ci_n) = (self.k, self.c_in);
        let r = k / 2;
        for ky in 0..k {
            let row = &mut buf[ky * k * ci_n..(ky + 1) * k * ci_n];
            let sy = (y + ky).wrapping_sub(r);
            if sy >= h {
                row.fill(0.0);
                continue;
            }
            for kx in 0..k {
                let dst = &mut row[kx * ci_n..(kx + 1) * ci_n];
                let sx = (x + kx).wrapping_sub(r);
                if sx >= w {
                    dst.fill(0.0);
                } else {
                    dst.copy_from_slice(input.pixel(b, sy, sx));
                }
            }
        }
    }

    /// Add `buf`, laid out as in [`ConvLayer::gather`], back onto the
    /// in-frame pixels of the window around `(y, x)`.
    fn scatter_add(&self, target: &mut Tensor4, b: usize, y: usize, x: usize, buf: &[f64]) {
        let (_, h, w, _) = target.dims();
        let (k, ci_n) = (self.k, self.c_in);
        let r = k / 2;
        for ky in 0..k {
            let sy = (y + ky).wrapping_sub(r);
            if sy >= h {
                continue;
            }
            for kx in 0..k {
                let sx = (x + kx).wrapping_sub(r);
                if sx >= w {
                    continue;
                }
                let src = &buf[(ky * k + kx) * ci_n..(ky * k + kx + 1) * ci_n];
                for (d, v) in target.pixel_mut(b, sy, sx).iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.c() != self.c_in {
            return Err(Error::config(format!("conv expects {} input channels, got {}", self.c_in, input.c())));
        }
        Ok(())
    }

    /// Pre-activation output `Σ w·window + b`.
    pub fn pre_activation(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input)?;
        let (n, h, w, _) = input.dims();
        let co_n = self.c_out;
        let span = self.k * self.k * self.c_in;
        let packed = self.packed();
        let mut window = vec![0.0; span];
        let mut out = Tensor4::zeros(n, h, w, co_n);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    self.gather(input, b, y, x, &mut window);
                    let o = out.index(b, y, x, 0);
                    let dst = &mut out.data[o..o + co_n];
                    for ((d, row), bias) in dst.iter_mut().zip(packed.chunks_exact(span)).zip(&self.bias) {
                        *d = bias + dot(row, &window);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let act = self.activation;
        Ok(self.pre_activation(input)?.map(|z| act.apply(z)))
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` (same
    /// shape as `self`) and returns the gradient with respect to `input`
    /// when `want_input` is set.
    pub fn backward(
        &self,
        input: &Tensor4,
        pre: &Tensor4,
        grad_out: &Tensor4,
        grads: &mut ConvLayer,
        want_input: bool,
    ) -> Option<Tensor4> {
        let (n, h, w, _) = input.dims();
        let (k, ci_n, co_n) = (self.k, self.c_in, self.c_out);
        let span = k * k * ci_n;
        let act = self.activation;
        let packed = self.packed();
        let mut gpacked = vec![0.0; packed.len()];
        let mut gin = want_input.then(|| Tensor4::zeros(n, h, w, ci_n));
        let mut window = vec![0.0; span];
        let mut gwindow = vec![0.0; span];
        let mut g = vec![0.0; co_n];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let o = pre.index(b, y, x, 0);
                    let mut any = false;
                    for ((gv, go), z) in g.iter_mut().zip(&grad_out.data[o..o + co_n]).zip(&pre.data[o..o + co_n]) {
                        *gv = go * act.derivative(*z);
                        any |= *gv != 0.0;
                    }
                    if !any {
                        continue;
                    }
                    for (gb, gv) in grads.bias.iter_mut().zip(&g) {
                        *gb += gv;
                    }
                    self.gather(input, b, y, x, &mut window);
                    for (grow, &gv) in gpacked.chunks_exact_mut(span).zip(&g) {
                        axpy_slice(grow, gv, &window);
                    }
                    if let Some(gin) = gin.as_mut() {
                        gwindow.fill(0.0);
                        for (row, &gv) in packed.chunks_exact(span).zip(&g) {
                            axpy_slice(&mut gwindow, gv, row);
                        }
                        self.scatter_add(gin, b, y, x, &gwindow);
                    }
                }
            }
        }
        for co in 0..co_n {
            for ci in 0..ci_n {
                for ky in 0..k {
                    for kx in 0..k {
                        grads.weights[((co * ci_n + ci) * k + ky) * k + kx] +=
                            gpacked[((co * k + ky) * k + kx) * ci_n + ci];
                    }
                }
            }
        }
        gin
    }

    pub fn zeros_like(&self) -> ConvLayer {
        ConvLayer { weights: vec![0.0; self.weights.len()], bias: vec![0.0; self.bias.len()], ..self.clone() }
    }
}

/// Four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy_slice(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub fn conv2d(input: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    layer.forward(input)
}

/// Sequential stack of convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

/// Per-layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    inputs: Vec<Tensor4>,
    pres: Vec<Tensor4>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].c_out() != pair[1].c_in() {
                return Err(Error::config(format!(
                    "conv stack: layer emits {} channels, next expects {}",
                    pair[0].c_out(),
                    pair[1].c_in()
                )));
            }
        }
        if layers.is_empty() {
            return Err(Error::config("conv stack needs at least one layer"));
        }
        Ok(ConvStack { layers })
    }

    /// `depth` layers of kernel `k`: `c_in → c_out`, then `c_out → c_out`.
    /// Leaky activation on all but the last layer.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let act = if i + 1 == depth { Activation::Identity } else { Activation::LeakyRelu(LEAKY_SLOPE) };
            let cin = if i == 0 { c_in } else { c_out };
            layers.push(ConvLayer::init(cin, c_out, k, act, rng)?);
        }
        Self::new(layers)
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].c_in()
    }

    pub fn c_out(&self) -> usize {
        self.layers[self.layers.len() - 1].c_out()
    }

    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut x = self.layers[0].forward(input)?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Tensor4) -> Result<(Tensor4, StackCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let pre = layer.pre_activation(&x)?;
            let act = layer.activation;
            let out = pre.map(|z| act.apply(z));
            inputs.push(x);
            pres.push(pre);
            x = out;
        }
        Ok((x, StackCache { inputs, pres }))
    }

    pub fn backward(
        &self,
        cache: &StackCache,
        grad_out: &Tensor4,
        grads: &mut ConvStack,
        want_input: bool,
    ) -> Option<Tensor4> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let need = i > 0 || want_input;
            match self.layers[i].backward(&cache.inputs[i], &cache.pres[i], &g, &mut grads.layers[i], need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }

    pub fn zeros_like(&self) -> ConvStack {
        ConvStack { layers: self.layers.iter().map(ConvLayer::zeros_like).collect() }
    }
}

/// Central differences `(f(p+ε) − f(p−ε)) / 2ε` per coordinate.
pub fn finite_difference_grad(mut loss_fn: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss_fn(&p);
        p[i] = orig - eps;
        let minus = loss_fn(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("finite-difference oracle: non-finite loss at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor)).fold(0.0, f64::max)
}
