//! Recognition head: two-branch gated fusion, a small conv backbone with
//! temporal max pooling and horizontal strip pooling, and per-strip linear
//! maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::{FieldKind, GaitFeatureField};
use crate::params::{join, Params};
use crate::tensor::{softmax_in_place, Activation, ConvLayer, ConvStack, Matrix, StackCache, Tensor4, LEAKY_SLOPE};

/// One independent linear map per horizontal strip.
#[derive(Debug, Clone, PartialEq)]
pub struct StripLinear {
    strips: usize,
    d_in: usize,
    d_out: usize,
    /// `(strips, d_out, d_in)`
    pub weights: Vec<f64>,
    /// `(strips, d_out)`
    pub bias: Vec<f64>,
}

impl StripLinear {
    pub fn zeros(strips: usize, d_in: usize, d_out: usize) -> Self {
        StripLinear { strips, d_in, d_out, weights: vec![0.0; strips * d_out * d_in], bias: vec![0.0; strips * d_out] }
    }

    pub fn init<R: Rng + ?Sized>(strips: usize, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(strips, d_in, d_out);
        let bound = (3.0 / d_in as f64).sqrt();
        for w in &mut l.weights {
            *w = rng.random_range(-bound..bound);
        }
        l
    }

    pub fn strips(&self) -> usize {
        self.strips
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if (input.rows(), input.cols()) != (self.strips, self.d_in) {
            return Err(Error::shape(format!(
                "strip linear expects {}x{}, got {}x{}",
                self.strips,
                self.d_in,
                input.rows(),
                input.cols()
            )));
        }
        let mut out = Vec::with_capacity(self.strips * self.d_out);
        for s in 0..self.strips {
            let x = input.row(s);
            for o in 0..self.d_out {
                let w = &self.weights[(s * self.d_out + o) * self.d_in..][..self.d_in];
                let mut acc = self.bias[s * self.d_out + o];
                for (a, b) in w.iter().zip(x) {
                    acc += a * b;
                }
                out.push(acc);
            }
        }
        Matrix::from_vec(self.strips, self.d_out, out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, input: &Matrix, grad_out: &Matrix, grads: &mut StripLinear) -> Matrix {
        let mut gin = vec![0.0; self.strips * self.d_in];
        for s in 0..self.strips {
            let x = input.row(s);
            for o in 0..self.d_out {
                let g = grad_out.at(s, o);
                grads.bias[s * self.d_out + o] += g;
                let base = (s * self.d_out + o) * self.d_in;
                for i in 0..self.d_in {
                    grads.weights[base + i] += g * x[i];
                    gin[s * self.d_in + i] += g * self.weights[base + i];
                }
            }
        }
        Matrix::from_vec(self.strips, self.d_in, gin).expect("sized")
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.strips, self.d_in, self.d_out)
    }
}

impl Params for StripLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), &[self.strips, self.d_out, self.d_in], &self.weights);
        f(&join(prefix, "bias"), &[self.strips, self.d_out], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weights);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Which field branches feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Both,
    StaticOnly,
    DynamicOnly,
}

impl FusionMode {
    pub fn uses_static(self) -> bool {
        matches!(self, FusionMode::Both | FusionMode::StaticOnly)
    }

    pub fn uses_dynamic(self) -> bool {
        matches!(self, FusionMode::Both | FusionMode::DynamicOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Both => "both",
            FusionMode::StaticOnly => "static",
            FusionMode::DynamicOnly => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "both" => Some(FusionMode::Both),
            "static" => Some(FusionMode::StaticOnly),
            "dynamic" => Some(FusionMode::DynamicOnly),
            _ => None,
        }
    }
}

/// Per-branch projections plus a per-pixel two-way softmax gate:
/// `fused = a₀·proj(static) + a₁·proj(dynamic)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock {
    pub proj_static: ConvLayer,
    pub proj_dynamic: ConvLayer,
    pub gate: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    static_in: Tensor4,
    dynamic_in: Tensor4,
    static_pre: Tensor4,
    dynamic_pre: Tensor4,
    ps: Tensor4,
    pd: Tensor4,
    gate_in: Tensor4,
    gate_pre: Tensor4,
    weights: Tensor4,
}

/// Cache of a single-branch projection.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    kind: FieldKind,
    input: Tensor4,
    pre: Tensor4,
}

impl FusionBlock {
    pub fn init<R: Rng + ?Sized>(dim: usize, proj_kernel: usize, gate_kernel: usize, rng: &mut R) -> Result<Self> {
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        Ok(FusionBlock {
            proj_static: ConvLayer::init(2, dim, proj_kernel, act, rng)?,
            proj_dynamic: ConvLayer::init(2, dim, proj_kernel, act, rng)?,
            gate: ConvLayer::init(2 * dim, 2, gate_kernel, Activation::Identity, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj_static.c_out()
    }

    /// Fuse two fields. The static field is truncated to the dynamic field's
    /// length.
    pub fn fuse(&self, static_field: &GaitFeatureField, dynamic_field: &GaitFeatureField) -> Result<Tensor4> {
        let (fused, _) = self.fuse_cached(&static_field.frames, &dynamic_field.frames)?;
        Ok(fused)
    }

    /// Per-pixel gate weights `(a₀, a₁)` for the given fields.
    pub fn gate_weights(&self, static_frames: &Tensor4, dynamic_frames: &Tensor4) -> Result<Tensor4> {
        Ok(self.fuse_cached(static_frames, dynamic_frames)?.1.weights)
    }

    pub fn fuse_cached(&self, static_frames: &Tensor4, dynamic_frames: &Tensor4) -> Result<(Tensor4, FusionCache)> {
        let (ld, h, w, _) = dynamic_frames.dims();
        let (ls, hs, ws, _) = static_frames.dims();
        if (hs, ws) != (h, w) {
            return Err(Error::shape(format!("static field is {hs}x{ws}, dynamic field is {h}x{w}")));
        }
        if ls < ld {
            return Err(Error::shape(format!("static field has {ls} frames, dynamic field has {ld}")));
        }
        let static_in = static_frames.frames(0, ld);
        let dynamic_in = dynamic_frames.clone();
        let static_pre = self.proj_static.pre_activation(&static_in)?;
        let dynamic_pre = self.proj_dynamic.pre_activation(&dynamic_in)?;
        let a = self.proj_static.activation;
        let ps = static_pre.map(|z| a.apply(z));
        let a = self.proj_dynamic.activation;
        let pd = dynamic_pre.map(|z| a.apply(z));
        let d = ps.c();
        let mut gate_in = Tensor4::zeros(ld, h, w, 2 * d);
        for ((dst, s), t) in gate_in.data_mut().chunks_mut(2 * d).zip(ps.data().chunks(d)).zip(pd.data().chunks(d)) {
            dst[..d].copy_from_slice(s);
            dst[d..].copy_from_slice(t);
        }
        let gate_pre = self.gate.pre_activation(&gate_in)?;
        let mut weights = gate_pre.clone();
        for row in weights.data_mut().chunks_mut(2) {
            softmax_in_place(row);
        }
        let mut fused = Tensor4::zeros(ld, h, w, d);
        for (((dst, s), t), a) in fused
            .data_mut()
            .chunks_mut(d)
            .zip(ps.data().chunks(d))
            .zip(pd.data().chunks(d))
            .zip(weights.data().chunks(2))
        {
            for ((o, sv), tv) in dst.iter_mut().zip(s).zip(t) {
                *o = a[0] * sv + a[1] * tv;
            }
        }
        let cache = FusionCache { static_in, dynamic_in, static_pre, dynamic_pre, ps, pd, gate_in, gate_pre, weights };
        Ok((fused, cache))
    }

    /// Returns gradients for the (truncated) static and the dynamic fields.
    pub fn backward(&self, cache: &FusionCache, grad: &Tensor4, grads: &mut FusionBlock) -> (Tensor4, Tensor4) {
        let d = cache.ps.c();
        let (n, h, w, _) = grad.dims();
        let mut dps = Tensor4::zeros(n, h, w, d);
        let mut dpd = Tensor4::zeros(n, h, w, d);
        let mut dgate = Tensor4::zeros(n, h, w, 2);
        for i in 0..n * h * w {
            let g = &grad.data()[i * d..(i + 1) * d];
            let s = &cache.ps.data()[i * d..(i + 1) * d];
            let t = &cache.pd.data()[i * d..(i + 1) * d];
            let a = &cache.weights.data()[i * 2..i * 2 + 2];
            let (mut da0, mut da1) = (0.0, 0.0);
            for j in 0..d {
                da0 += g[j] * s[j];
                da1 += g[j] * t[j];
                dps.data_mut()[i * d + j] = a[0] * g[j];
                dpd.data_mut()[i * d + j] = a[1] * g[j];
            }
            let mean = a[0] * da0 + a[1] * da1;
            dgate.data_mut()[i * 2] = a[0] * (da0 - mean);
            dgate.data_mut()[i * 2 + 1] = a[1] * (da1 - mean);
        }
        let dgate_in =
            self.gate.backward(&cache.gate_in, &cache.gate_pre, &dgate, &mut grads.gate, true).expect("requested");
        for (i, g) in dgate_in.data().chunks(2 * d).enumerate() {
            for j in 0..d {
                dps.data_mut()[i * d + j] += g[j];
                dpd.data_mut()[i * d + j] += g[d + j];
            }
        }
        let ds = self
            .proj_static
            .backward(&cache.static_in, &cache.static_pre, &dps, &mut grads.proj_static, true)
            .expect("requested");
        let dd = self
            .proj_dynamic
            .backward(&cache.dynamic_in, &cache.dynamic_pre, &dpd, &mut grads.proj_dynamic, true)
            .expect("requested");
        (ds, dd)
    }

    /// Single-branch path used when the other branch is ablated: the
    /// branch projection alone, no gate.
    pub fn project_cached(&self, kind: FieldKind, frames: &Tensor4) -> Result<(Tensor4, ProjectionCache)> {
        let layer = self.projection(kind);
        let pre = layer.pre_activation(frames)?;
        let act = layer.activation;
        let out = pre.map(|z| act.apply(z));
        Ok((out, ProjectionCache { kind, input: frames.clone(), pre }))
    }

    pub fn project_backward(&self, cache: &ProjectionCache, grad: &Tensor4, grads: &mut FusionBlock) -> Tensor4 {
        let g = match cache.kind {
            FieldKind::Static => &mut grads.proj_static,
            FieldKind::Dynamic => &mut grads.proj_dynamic,
        };
        self.projection(cache.kind).backward(&cache.input, &cache.pre, grad, g, true).expect("requested")
    }

    fn projection(&self, kind: FieldKind) -> &ConvLayer {
        match kind {
            FieldKind::Static => &self.proj_static,
            FieldKind::Dynamic => &self.proj_dynamic,
        }
    }

    pub fn zeros_like(&self) -> Self {
        FusionBlock {
            proj_static: self.proj_static.zeros_like(),
            proj_dynamic: self.proj_dynamic.zeros_like(),
            gate: self.gate.zeros_like(),
        }
    }
}

impl Params for FusionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.proj_static.visit(&join(prefix, "proj_static"), f);
        self.proj_dynamic.visit(&join(prefix, "proj_dynamic"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj_static.visit_mut(&join(prefix, "proj_static"), f);
        self.proj_dynamic.visit_mut(&join(prefix, "proj_dynamic"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

/// Row range of each horizontal strip. Strips are `ceil(h / strips)` rows
/// tall; rows past the bottom edge count as zero padding in the mean.
pub fn strip_rows(h: usize, strips: usize) -> usize {
    h.div_ceil(strips)
}

/// Backbone convolutions, temporal max, strip mean and per-strip linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedHead {
    pub backbone: ConvStack,
    pub fc: StripLinear,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    backbone: StackCache,
    frames: usize,
    dims: (usize, usize, usize),
    argmax: Vec<u32>,
    pooled: Matrix,
}

impl EmbedHead {
    /// Two leaky conv layers `fused_dim → backbone_dim`, then the strip map.
    pub fn init<R: Rng + ?Sized>(
        fused_dim: usize,
        backbone_dim: usize,
        kernel: usize,
        strips: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if strips == 0 {
            return Err(Error::config("strip count must be at least 1"));
        }
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let backbone = ConvStack::new(vec![
            ConvLayer::init(fused_dim, backbone_dim, kernel, act, rng)?,
            ConvLayer::init(backbone_dim, backbone_dim, kernel, act, rng)?,
        ])?;
        Ok(EmbedHead { backbone, fc: StripLinear::init(strips, backbone_dim, embed_dim, rng) })
    }

    pub fn strips(&self) -> usize {
        self.fc.strips()
    }

    pub fn embed_dim(&self) -> usize {
        self.fc.d_out()
    }

    pub fn embed(&self, fused: &Tensor4) -> Result<Matrix> {
        Ok(self.embed_cached(fused)?.0)
    }

    pub fn embed_cached(&self, fused: &Tensor4) -> Result<(Matrix, EmbedCache)> {
        let (l, h, w, _) = fused.dims();
        if l == 0 {
            return Err(Error::shape("cannot embed an empty sequence"));
        }
        let strips = self.strips();
        if strips > h {
            return Err(Error::config(format!("{strips} strips exceed {h} rows")));
        }
        let (feat, backbone) = self.backbone.forward_cached(fused)?;
        let c = feat.c();
        let plane = h * w * c;
        let mut maxed = feat.data()[..plane].to_vec();
        let mut argmax = vec![0u32; plane];
        for f in 1..l {
            for (i, v) in feat.data()[f * plane..(f + 1) * plane].iter().enumerate() {
                if *v > maxed[i] {
                    maxed[i] = *v;
                    argmax[i] = f as u32;
                }
            }
        }
        let rows = strip_rows(h, strips);
        let denom = (rows * w) as f64;
        let mut pooled = vec![0.0; strips * c];
        for y in 0..h {
            let s = y / rows;
            for x in 0..w {
                let px = &maxed[(y * w + x) * c..][..c];
                for (p, v) in pooled[s * c..(s + 1) * c].iter_mut().zip(px) {
                    *p += v;
                }
            }
        }
        for p in &mut pooled {
            *p /= denom;
        }
        let pooled = Matrix::from_vec(strips, c, pooled)?;
        let emb = self.fc.forward(&pooled)?;
        Ok((emb, EmbedCache { backbone, frames: l, dims: (h, w, c), argmax, pooled }))
    }

    /// Returns the gradient with respect to the fused input sequence.
    pub fn backward(&self, cache: &EmbedCache, grad_emb: &Matrix, grads: &mut EmbedHead) -> Tensor4 {
        let dpooled = self.fc.backward(&cache.pooled, grad_emb, &mut grads.fc);
        let (h, w, c) = cache.dims;
        let rows = strip_rows(h, self.strips());
        let denom = (rows * w) as f64;
        let plane = h * w * c;
        let mut dfeat = Tensor4::zeros(cache.frames, h, w, c);
        for y in 0..h {
            let s = y / rows;
            for x in 0..w {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    let f = cache.argmax[i] as usize;
                    dfeat.data_mut()[f * plane + i] = dpooled.at(s, ch) / denom;
                }
            }
        }
        self.backbone.backward(&cache.backbone, &dfeat, &mut grads.backbone, true).expect("requested")
    }

    pub fn zeros_like(&self) -> Self {
        EmbedHead { backbone: self.backbone.zeros_like(), fc: self.fc.zeros_like() }
    }
}

impl Params for EmbedHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}
