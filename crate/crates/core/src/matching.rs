//! Local feature matching that condenses per-pixel features into 2-D
//! direction vectors ("gait feature fields").
//!
//! For every query pixel the dot products with the key features inside a
//! `(2Δh+1) × (2Δw+1)` window are normalized by softmax, and the resulting
//! distribution weights a fixed template of integer offsets. Within-frame
//! matching (`Δl = 0`) yields the static field; cross-frame matching
//! (`Δl > 0`, key taken `Δl` frames later) yields the dynamic field.
//!
//! Keys outside the frame are zero vectors that stay inside the softmax, so
//! every pixel always sees `K` candidates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, Params};
use crate::sequence::{FeatureSequence, MaskSequence, DEFAULT_FEATURE_CHANNELS};
use crate::tensor::{softmax_in_place, ConvStack, Matrix, StackCache, Tensor4};

/// Threshold on the static field magnitude above which texture suppression
/// may zero a pixel.
pub const DEFAULT_SUPPRESS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SUPPRESS_PROBABILITY: f64 = 0.5;

/// Raster-ordered integer offsets `(î, ĵ)`, row offset outer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionTemplate {
    delta_h: usize,
    delta_w: usize,
    rows: Vec<[i32; 2]>,
}

impl DirectionTemplate {
    pub fn new(delta_h: usize, delta_w: usize) -> Self {
        let (dh, dw) = (delta_h as i32, delta_w as i32);
        let rows = (-dh..=dh).flat_map(|i| (-dw..=dw).map(move |j| [i, j])).collect();
        DirectionTemplate { delta_h, delta_w, rows }
    }

    pub fn delta_h(&self) -> usize {
        self.delta_h
    }

    pub fn delta_w(&self) -> usize {
        self.delta_w
    }

    /// Number of offsets `K = (2Δh+1)(2Δw+1)`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[i32; 2]] {
        &self.rows
    }

    pub fn index_of(&self, di: i32, dj: i32) -> Option<usize> {
        let (dh, dw) = (self.delta_h as i32, self.delta_w as i32);
        if di.abs() > dh || dj.abs() > dw {
            return None;
        }
        Some(((di + dh) * (2 * dw + 1) + (dj + dw)) as usize)
    }

    pub fn as_matrix(&self) -> Matrix {
        let data = self.rows.iter().flat_map(|r| [r[0] as f64, r[1] as f64]).collect();
        Matrix::from_vec(self.rows.len(), 2, data).expect("K x 2")
    }
}

pub fn build_template(delta_h: usize, delta_w: usize) -> DirectionTemplate {
    DirectionTemplate::new(delta_h, delta_w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Static,
    Dynamic,
}

impl FieldKind {
    pub fn of_offset(delta_l: usize) -> Self {
        if delta_l == 0 {
            FieldKind::Static
        } else {
            FieldKind::Dynamic
        }
    }
}

/// Per-frame 2-channel direction field; channel 0 is the row component,
/// channel 1 the column component.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitFeatureField {
    pub kind: FieldKind,
    pub delta_l: usize,
    pub frames: Tensor4,
}

impl GaitFeatureField {
    pub fn new(kind: FieldKind, delta_l: usize, frames: Tensor4) -> Result<Self> {
        if frames.c() != 2 {
            return Err(Error::shape(format!("field needs 2 channels, got {}", frames.c())));
        }
        Ok(GaitFeatureField { kind, delta_l, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.n()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.n() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchConfig {
    pub in_channels: usize,
    /// Encoded channel count `C`.
    pub channels: usize,
    pub kernel: usize,
    pub depth: usize,
    pub delta_h: usize,
    pub delta_w: usize,
    pub delta_l: usize,
    /// Multiplier on the last encoder layer's initial weights; similarity
    /// scores scale with its square.
    pub init_gain: f64,
}

impl BranchConfig {
    pub fn static_branch() -> Self {
        BranchConfig {
            in_channels: DEFAULT_FEATURE_CHANNELS,
            channels: 16,
            kernel: 3,
            depth: 4,
            delta_h: 3,
            delta_w: 3,
            delta_l: 0,
            init_gain: 1.0,
        }
    }

    pub fn dynamic_branch() -> Self {
        BranchConfig { delta_l: 1, ..Self::static_branch() }
    }
}

/// Query/key encoder pair plus the matching geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingBranch {
    pub encoder_q: ConvStack,
    pub encoder_k: ConvStack,
    pub delta_l: usize,
    pub template: DirectionTemplate,
}

impl MatchingBranch {
    pub fn new(
        encoder_q: ConvStack,
        encoder_k: ConvStack,
        delta_l: usize,
        template: DirectionTemplate,
    ) -> Result<Self> {
        let shape = |s: &ConvStack| {
            s.layers.iter().map(|l| (l.c_in(), l.c_out(), l.kernel(), l.activation)).collect::<Vec<_>>()
        };
        if shape(&encoder_q) != shape(&encoder_k) {
            return Err(Error::config("query and key encoders must share one architecture"));
        }
        Ok(MatchingBranch { encoder_q, encoder_k, delta_l, template })
    }

    pub fn init<R: Rng + ?Sized>(cfg: &BranchConfig, rng: &mut R) -> Result<Self> {
        let mut q = ConvStack::init(cfg.in_channels, cfg.channels, cfg.kernel, cfg.depth, rng)?;
        let mut k = ConvStack::init(cfg.in_channels, cfg.channels, cfg.kernel, cfg.depth, rng)?;
        if !(cfg.init_gain > 0.0 && cfg.init_gain.is_finite()) {
            return Err(Error::config(format!("encoder init gain {} must be positive", cfg.init_gain)));
        }
        for stack in [&mut q, &mut k] {
            if let Some(last) = stack.layers.last_mut() {
                last.weights.iter_mut().for_each(|w| *w *= cfg.init_gain);
            }
        }
        Self::new(q, k, cfg.delta_l, build_template(cfg.delta_h, cfg.delta_w))
    }

    pub fn kind(&self) -> FieldKind {
        FieldKind::of_offset(self.delta_l)
    }

    pub fn zeros_like(&self) -> Self {
        MatchingBranch {
            encoder_q: self.encoder_q.zeros_like(),
            encoder_k: self.encoder_k.zeros_like(),
            delta_l: self.delta_l,
            template: self.template.clone(),
        }
    }
}

impl Params for MatchingBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder_q.visit(&join(prefix, "query"), f);
        self.encoder_k.visit(&join(prefix, "key"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder_q.visit_mut(&join(prefix, "query"), f);
        self.encoder_k.visit_mut(&join(prefix, "key"), f);
    }
}

fn check_mask(features: &Tensor4, mask: &Tensor4) -> Result<()> {
    let (n, h, w, _) = features.dims();
    if mask.dims() != (n, h, w, 1) {
        return Err(Error::shape(format!("mask dims {:?} do not match features {:?}", mask.dims(), features.dims())));
    }
    Ok(())
}

fn apply_mask(encoded: &mut Tensor4, mask: &Tensor4) {
    let c = encoded.c();
    for (px, &m) in encoded.data_mut().chunks_mut(c).zip(mask.data()) {
        for v in px {
            *v *= m;
        }
    }
}

/// Run `encoder` over every frame, then zero the background channels.
pub fn encode_and_mask(features: &Tensor4, mask: &Tensor4, encoder: &ConvStack) -> Result<Tensor4> {
    check_mask(features, mask)?;
    let mut out = encoder.forward(features)?;
    apply_mask(&mut out, mask);
    Ok(out)
}

/// Softmax over template offsets of query·key dot products, `(n, h, w, K)`.
pub fn neighborhood_distribution(fq: &Tensor4, fk: &Tensor4, template: &DirectionTemplate) -> Result<Tensor4> {
    if fq.dims() != fk.dims() {
        return Err(Error::shape(format!("query dims {:?} differ from key dims {:?}", fq.dims(), fk.dims())));
    }
    let (n, h, w, _) = fq.dims();
    let kk = template.len();
    let mut p = Tensor4::zeros(n, h, w, kk);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let q = fq.pixel(b, y, x);
                let row = p.pixel_mut(b, y, x);
                for (slot, off) in row.iter_mut().zip(template.rows()) {
                    let sy = y as i64 + off[0] as i64;
                    let sx = x as i64 + off[1] as i64;
                    *slot = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        let k = fk.pixel(b, sy as usize, sx as usize);
                        let mut acc = 0.0;
                        for (a, c) in q.iter().zip(k) {
                            acc += a * c;
                        }
                        acc
                    } else {
                        0.0
                    };
                }
                softmax_in_place(row);
            }
        }
    }
    Ok(p)
}

/// `G = P · T` per pixel, `(n, h, w, 2)`.
pub fn assign_directions(p: &Tensor4, template: &DirectionTemplate) -> Result<Tensor4> {
    if p.c() != template.len() {
        return Err(Error::shape(format!(
            "distribution has {} entries per pixel, template has {}",
            p.c(),
            template.len()
        )));
    }
    let (n, h, w, _) = p.dims();
    let mut g = Tensor4::zeros(n, h, w, 2);
    for (row, out) in p.data().chunks(template.len()).zip(g.data_mut().chunks_mut(2)) {
        let (mut gy, mut gx) = (0.0, 0.0);
        for (pv, off) in row.iter().zip(template.rows()) {
            gy += pv * off[0] as f64;
            gx += pv * off[1] as f64;
        }
        out[0] = gy;
        out[1] = gx;
    }
    Ok(g)
}

/// State recorded by [`compute_field_cached`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct FieldCache {
    frames: usize,
    delta_l: usize,
    q_cache: StackCache,
    k_cache: StackCache,
    mask_q: Tensor4,
    mask_k: Tensor4,
    fq: Tensor4,
    fk: Tensor4,
    prob: Tensor4,
}

impl FieldCache {
    pub fn distribution(&self) -> &Tensor4 {
        &self.prob
    }
}

fn check_inputs(seq: &FeatureSequence, masks: &MaskSequence, branch: &MatchingBranch) -> Result<()> {
    masks.check_pairs(seq)?;
    let l = seq.len();
    if l <= branch.delta_l {
        return Err(Error::shape(format!("sequence of {l} frames is too short for frame offset {}", branch.delta_l)));
    }
    let c_in = seq.frame_dims().2;
    if c_in != branch.encoder_q.c_in() {
        return Err(Error::config(format!(
            "encoders expect {} input channels, features have {c_in}",
            branch.encoder_q.c_in()
        )));
    }
    Ok(())
}

pub fn compute_field(seq: &FeatureSequence, masks: &MaskSequence, branch: &MatchingBranch) -> Result<GaitFeatureField> {
    check_inputs(seq, masks, branch)?;
    let out_len = seq.len() - branch.delta_l;
    let fq = encode_and_mask(&seq.frames().frames(0, out_len), &masks.frames().frames(0, out_len), &branch.encoder_q)?;
    let fk = encode_and_mask(
        &seq.frames().frames(branch.delta_l, out_len),
        &masks.frames().frames(branch.delta_l, out_len),
        &branch.encoder_k,
    )?;
    let p = neighborhood_distribution(&fq, &fk, &branch.template)?;
    let g = assign_directions(&p, &branch.template)?;
    GaitFeatureField::new(branch.kind(), branch.delta_l, g)
}

pub fn compute_field_cached(
    seq: &FeatureSequence,
    masks: &MaskSequence,
    branch: &MatchingBranch,
) -> Result<(GaitFeatureField, FieldCache)> {
    check_inputs(seq, masks, branch)?;
    let out_len = seq.len() - branch.delta_l;
    let mask_q = masks.frames().frames(0, out_len);
    let mask_k = masks.frames().frames(branch.delta_l, out_len);
    let (mut fq, q_cache) = branch.encoder_q.forward_cached(&seq.frames().frames(0, out_len))?;
    apply_mask(&mut fq, &mask_q);
    let (mut fk, k_cache) = branch.encoder_k.forward_cached(&seq.frames().frames(branch.delta_l, out_len))?;
    apply_mask(&mut fk, &mask_k);
    let prob = neighborhood_distribution(&fq, &fk, &branch.template)?;
    let g = assign_directions(&prob, &branch.template)?;
    let field = GaitFeatureField::new(branch.kind(), branch.delta_l, g)?;
    let cache =
        FieldCache { frames: seq.len(), delta_l: branch.delta_l, q_cache, k_cache, mask_q, mask_k, fq, fk, prob };
    Ok((field, cache))
}

/// Reverse pass of [`compute_field_cached`].
///
/// Accumulates encoder gradients into `grads` and, when `want_input` is set,
/// returns the gradient with respect to the whole input feature sequence.
pub fn matching_backward(
    branch: &MatchingBranch,
    cache: &FieldCache,
    grad_field: &Tensor4,
    grads: &mut MatchingBranch,
    want_input: bool,
) -> Result<Option<Tensor4>> {
    let (n, h, w, c) = cache.fq.dims();
    if grad_field.dims() != (n, h, w, 2) {
        return Err(Error::shape(format!("field gradient dims {:?}, expected {:?}", grad_field.dims(), (n, h, w, 2))));
    }
    if cache.delta_l != branch.delta_l || cache.prob.c() != branch.template.len() {
        return Err(Error::config("forward cache was recorded for a different branch"));
    }
    let template = &branch.template;
    let kk = template.len();
    let mut dfq = Tensor4::zeros(n, h, w, c);
    let mut dfk = Tensor4::zeros(n, h, w, c);
    let mut ds = vec![0.0; kk];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dg = grad_field.pixel(b, y, x);
                if dg[0] == 0.0 && dg[1] == 0.0 {
                    continue;
                }
                let p = cache.prob.pixel(b, y, x);
                // dL/dP_k = dG · T_k, then the softmax Jacobian.
                let mut mean = 0.0;
                for ((d, off), pv) in ds.iter_mut().zip(template.rows()).zip(p) {
                    *d = dg[0] * off[0] as f64 + dg[1] * off[1] as f64;
                    mean += pv * *d;
                }
                for (d, pv) in ds.iter_mut().zip(p) {
                    *d = pv * (*d - mean);
                }
                let q = cache.fq.pixel(b, y, x).to_vec();
                for (k, off) in template.rows().iter().enumerate() {
                    let sy = y as i64 + off[0] as i64;
                    let sx = x as i64 + off[1] as i64;
                    if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let (sy, sx) = (sy as usize, sx as usize);
                    let s = ds[k];
                    let key = cache.fk.pixel(b, sy, sx);
                    let gq = dfq.pixel_mut(b, y, x);
                    for (g, kv) in gq.iter_mut().zip(key) {
                        *g += s * kv;
                    }
                    let gk = dfk.pixel_mut(b, sy, sx);
                    for (g, qv) in gk.iter_mut().zip(&q) {
                        *g += s * qv;
                    }
                }
            }
        }
    }
    apply_mask(&mut dfq, &cache.mask_q);
    apply_mask(&mut dfk, &cache.mask_k);
    let gin_q = branch.encoder_q.backward(&cache.q_cache, &dfq, &mut grads.encoder_q, want_input);
    let gin_k = branch.encoder_k.backward(&cache.k_cache, &dfk, &mut grads.encoder_k, want_input);
    if !want_input {
        return Ok(None);
    }
    let (gin_q, gin_k) = (gin_q.expect("requested"), gin_k.expect("requested"));
    let c_in = gin_q.c();
    let mut total = Tensor4::zeros(cache.frames, h, w, c_in);
    let stride = h * w * c_in;
    for (i, v) in gin_q.data().iter().enumerate() {
        total.data_mut()[i] += v;
    }
    let off = cache.delta_l * stride;
    for (i, v) in gin_k.data().iter().enumerate() {
        total.data_mut()[off + i] += v;
    }
    Ok(Some(total))
}

/// Euclidean norm per pixel, `(n, h, w, 1)`.
pub fn field_magnitude(field: &GaitFeatureField) -> Tensor4 {
    let (n, h, w, _) = field.frames.dims();
    Tensor4::from_fn((n, h, w, 1), |b, y, x, _| {
        let v = field.frames.pixel(b, y, x);
        v[0].hypot(v[1])
    })
}

/// Training-time random zeroing of high-magnitude static-field pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSuppression {
    pub threshold: f64,
    pub probability: f64,
}

impl Default for TextureSuppression {
    fn default() -> Self {
        TextureSuppression { threshold: DEFAULT_SUPPRESS_THRESHOLD, probability: DEFAULT_SUPPRESS_PROBABILITY }
    }
}

impl TextureSuppression {
    pub fn new(threshold: f64, probability: f64) -> Result<Self> {
        if !(threshold >= 0.0) || !threshold.is_finite() {
            return Err(Error::config(format!("suppression threshold {threshold} must be >= 0")));
        }
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::config(format!("suppression probability {probability} outside [0, 1]")));
        }
        Ok(TextureSuppression { threshold, probability })
    }

    /// Returns the suppressed field and the per-pixel keep mask
    /// (`n, h, w, 1`), which the reverse pass treats as a constant.
    ///
    /// One Bernoulli draw per above-threshold pixel, raster order.
    pub fn apply<R: Rng + ?Sized>(&self, field: &GaitFeatureField, rng: &mut R) -> Result<(GaitFeatureField, Tensor4)> {
        if field.kind != FieldKind::Static {
            return Err(Error::config("texture suppression applies to static fields only"));
        }
        let (n, h, w, _) = field.frames.dims();
        let mut keep = Tensor4::zeros(n, h, w, 1);
        let mut out = field.frames.clone();
        for (px, k) in out.data_mut().chunks_mut(2).zip(keep.data_mut().iter_mut()) {
            *k = 1.0;
            if px[0].hypot(px[1]) > self.threshold && rng.random_bool(self.probability) {
                px[0] = 0.0;
                px[1] = 0.0;
                *k = 0.0;
            }
        }
        Ok((GaitFeatureField { frames: out, ..*field }, keep))
    }
}

pub fn texture_suppress<R: Rng + ?Sized>(
    field: &GaitFeatureField,
    threshold: f64,
    probability: f64,
    rng: &mut R,
) -> Result<GaitFeatureField> {
    Ok(TextureSuppression::new(threshold, probability)?.apply(field, rng)?.0)
}

/// Check the structural guarantees of a computed field: finite values,
/// component bounds from the template, and exact zeros wherever the query
/// mask is background.
pub fn verify_field(field: &GaitFeatureField, query_masks: &Tensor4, template: &DirectionTemplate) -> Result<()> {
    let (n, h, w, _) = field.frames.dims();
    if query_masks.n() < n || (query_masks.h(), query_masks.w()) != (h, w) {
        return Err(Error::shape("query masks do not cover the field"));
    }
    let (dh, dw) = (template.delta_h() as f64, template.delta_w() as f64);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v = field.frames.pixel(b, y, x);
                if !v[0].is_finite() || !v[1].is_finite() {
                    return Err(Error::Numeric(format!("non-finite field at ({b}, {y}, {x})")));
                }
                if v[0].abs() > dh + 1e-12 || v[1].abs() > dw + 1e-12 {
                    return Err(Error::Numeric(format!(
                        "field ({}, {}) at ({b}, {y}, {x}) exceeds template bounds",
                        v[0], v[1]
                    )));
                }
                if query_masks.at(b, y, x, 0) == 0.0 && (v[0].abs() > 1e-12 || v[1].abs() > 1e-12) {
                    return Err(Error::Numeric(format!("background pixel ({b}, {y}, {x}) has nonzero direction")));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{flatten, unflatten};
    use crate::tensor::{finite_difference_grad, max_relative_error, Activation, ConvLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Tensor4 {
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), p: f64) -> Tensor4 {
        Tensor4::from_fn((dims.0, dims.1, dims.2, 1), |_, _, _, _| f64::from(u8::from(rng.random_bool(p))))
    }

    fn small_cfg(delta_l: usize) -> BranchConfig {
        BranchConfig {
            in_channels: 4,
            channels: 3,
            kernel: 3,
            depth: 4,
            delta_h: 1,
            delta_w: 1,
            delta_l,
            init_gain: 1.0,
        }
    }

    #[test]
    fn template_examples() {
        assert_eq!(build_template(0, 0).rows(), &[[0, 0]]);
        let t = build_template(1, 1);
        assert_eq!(t.len(), 9);
        assert_eq!(t.rows()[0], [-1, -1]);
        assert_eq!(t.rows()[4], [0, 0]);
        assert_eq!(t.rows()[8], [1, 1]);
        assert_eq!(build_template(3, 3).len(), 49);
        let t = build_template(2, 1);
        for (k, r) in t.rows().iter().enumerate() {
            assert_eq!(t.index_of(r[0], r[1]), Some(k));
        }
        assert_eq!(t.index_of(3, 0), None);
    }

    #[test]
    fn encode_and_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, (2, 4, 3, 4));
        let enc = ConvStack::init(4, 5, 3, 4, &mut rng).unwrap();
        let zero = Tensor4::zeros(2, 4, 3, 1);
        assert!(encode_and_mask(&x, &zero, &enc).unwrap().data().iter().all(|&v| v == 0.0));

        let ones = Tensor4::from_fn((2, 4, 3, 1), |_, _, _, _| 1.0);
        let ident = ConvStack::new(vec![ConvLayer::identity(4)]).unwrap();
        assert_eq!(encode_and_mask(&x, &ones, &ident).unwrap(), x);

        let m = random_mask(&mut rng, (2, 4, 3), 0.5);
        let got = encode_and_mask(&x, &m, &enc).unwrap();
        let mut want = enc.forward(&x).unwrap();
        for b in 0..2 {
            for y in 0..4 {
                for xx in 0..3 {
                    let mv = m.at(b, y, xx, 0);
                    for v in want.pixel_mut(b, y, xx) {
                        *v *= mv;
                    }
                }
            }
        }
        assert!(got.max_abs_diff(&want) <= 1e-12);
        assert!(encode_and_mask(&x, &Tensor4::zeros(2, 4, 2, 1), &enc).is_err());
    }

    #[test]
    fn zero_query_gives_uniform_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = build_template(2, 1);
        let fk = random(&mut rng, (1, 5, 4, 3));
        let p = neighborhood_distribution(&Tensor4::zeros(1, 5, 4, 3), &fk, &t).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 15.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_matching_key_dominates() {
        let t = build_template(1, 1);
        let mut fq = Tensor4::zeros(1, 3, 3, 4);
        let mut fk = Tensor4::zeros(1, 3, 3, 4);
        fq.set(0, 1, 1, 0, 10.0);
        fk.set(0, 1, 2, 0, 10.0);
        let p = neighborhood_distribution(&fq, &fk, &t).unwrap();
        let k = t.index_of(0, 1).unwrap();
        assert!(p.at(0, 1, 1, k) >= 1.0 - 1e-10);
        let g = assign_directions(&p, &t).unwrap();
        assert!((g.at(0, 1, 1, 0) - 0.0).abs() < 1e-10);
        assert!((g.at(0, 1, 1, 1) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn assign_directions_examples() {
        let t = build_template(1, 1);
        let uniform = Tensor4::from_fn((1, 2, 2, 9), |_, _, _, _| 1.0 / 9.0);
        let g = assign_directions(&uniform, &t).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));

        for k in 0..9 {
            let onehot = Tensor4::from_fn((1, 1, 1, 9), |_, _, _, c| f64::from(u8::from(c == k)));
            let g = assign_directions(&onehot, &t).unwrap();
            assert_eq!(g.data(), &[t.rows()[k][0] as f64, t.rows()[k][1] as f64]);
        }

        let up = t.index_of(-1, 0).unwrap();
        let down = t.index_of(1, 0).unwrap();
        let mut p = Tensor4::zeros(1, 1, 1, 9);
        p.set(0, 0, 0, up, 0.5);
        p.set(0, 0, 0, down, 0.5);
        assert_eq!(assign_directions(&p, &t).unwrap().data(), &[0.0, 0.0]);
        p.set(0, 0, 0, up, 0.25);
        p.set(0, 0, 0, down, 0.75);
        assert_eq!(assign_directions(&p, &t).unwrap().data(), &[0.5, 0.0]);

        assert!(assign_directions(&Tensor4::zeros(1, 1, 1, 4), &t).is_err());
    }

    #[test]
    fn zero_features_give_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let branch = MatchingBranch::init(&small_cfg(0), &mut rng).unwrap();
        let seq = FeatureSequence::new(Tensor4::zeros(1, 4, 4, 4), "zero").unwrap();
        let masks = MaskSequence::ones_like(&seq);
        let f = compute_field(&seq, &masks, &branch).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.kind, FieldKind::Static);
        assert!(f.frames.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dynamic_on_repeated_frames_equals_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random(&mut rng, (1, 6, 5, 4));
        let seq = FeatureSequence::new(Tensor4::stack(&[frame.clone(), frame.clone(), frame]).unwrap(), "rep").unwrap();
        let masks =
            MaskSequence::new(Tensor4::stack(&vec![random_mask(&mut rng, (1, 6, 5), 0.7); 3]).unwrap()).unwrap();
        let stat = MatchingBranch::init(&small_cfg(0), &mut rng).unwrap();
        let dyn_ = MatchingBranch { delta_l: 1, ..stat.clone() };
        let fs = compute_field(&seq, &masks, &stat).unwrap();
        let fd = compute_field(&seq, &masks, &dyn_).unwrap();
        assert_eq!(fd.kind, FieldKind::Dynamic);
        assert_eq!(fd.len(), 2);
        assert!(fd.frames.max_abs_diff(&fs.frames.frames(0, 2)) <= 1e-12);
    }

    #[test]
    fn short_sequences_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let branch = MatchingBranch::init(&small_cfg(2), &mut rng).unwrap();
        let seq = FeatureSequence::new(Tensor4::zeros(2, 3, 3, 4), "s").unwrap();
        let masks = MaskSequence::ones_like(&seq);
        assert!(matches!(compute_field(&seq, &masks, &branch), Err(Error::Shape(_))));
    }

    #[test]
    fn magnitude_examples() {
        let frames = Tensor4::from_vec((1, 1, 2, 2), vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let f = GaitFeatureField::new(FieldKind::Static, 0, frames).unwrap();
        assert_eq!(field_magnitude(&f).data(), &[5.0, 0.0]);
    }

    #[test]
    fn suppression_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = Tensor4::from_fn((2, 5, 5, 2), |_, _, _, _| rng.random_range(-1.5..1.5));
        let f = GaitFeatureField::new(FieldKind::Static, 0, frames).unwrap();
        assert_eq!(texture_suppress(&f, 0.5, 0.0, &mut rng).unwrap(), f);
        let s = texture_suppress(&f, 0.5, 1.0, &mut rng).unwrap();
        let before = field_magnitude(&f);
        let after = field_magnitude(&s);
        for (b, a) in before.data().iter().zip(after.data()) {
            if *b > 0.5 {
                assert_eq!(*a, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(texture_suppress(&f, -0.1, 0.5, &mut rng).is_err());
        assert!(texture_suppress(&f, 0.5, 1.5, &mut rng).is_err());
        let d = GaitFeatureField { kind: FieldKind::Dynamic, delta_l: 1, ..f };
        assert!(texture_suppress(&d, 0.5, 0.5, &mut rng).is_err());
    }

    fn probe_loss(field: &GaitFeatureField, probe: &Tensor4) -> f64 {
        field.frames.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let branch = MatchingBranch::init(&small_cfg(1), &mut rng).unwrap();
        let seq = FeatureSequence::new(random(&mut rng, (2, 3, 3, 4)), "r").unwrap();
        let masks = MaskSequence::ones_like(&seq);
        let (f, cache) = compute_field_cached(&seq, &masks, &branch).unwrap();
        let mut grads = branch.zeros_like();
        let gin = matching_backward(&branch, &cache, &Tensor4::zeros(1, 3, 3, 2), &mut grads, true).unwrap().unwrap();
        assert!(flatten(&grads).iter().all(|&v| v == 0.0));
        assert!(gin.data().iter().all(|&v| v == 0.0));
        assert!(matching_backward(&branch, &cache, &f.frames.map(|_| 0.0), &mut grads, false).is_ok());
        assert!(matching_backward(&branch, &cache, &Tensor4::zeros(1, 3, 2, 2), &mut grads, false).is_err());
    }

    #[test]
    fn single_pixel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for delta_l in [0, 1] {
            let branch = MatchingBranch::init(&small_cfg(delta_l), &mut rng).unwrap();
            let seq = FeatureSequence::new(random(&mut rng, (2, 3, 3, 4)).map(|v| 2.0 * v), "r").unwrap();
            let masks = MaskSequence::ones_like(&seq);
            let out_len = 2 - delta_l;
            let mut probe = Tensor4::zeros(out_len, 3, 3, 2);
            probe.set(0, 1, 1, 0, 1.0);
            probe.set(0, 1, 1, 1, -0.5);

            let (_, cache) = compute_field_cached(&seq, &masks, &branch).unwrap();
            let mut grads = branch.zeros_like();
            let gin = matching_backward(&branch, &cache, &probe, &mut grads, true).unwrap().unwrap();

            let base = flatten(&branch);
            let fd = finite_difference_grad(
                |p| {
                    let mut b = branch.clone();
                    unflatten(&mut b, p);
                    probe_loss(&compute_field(&seq, &masks, &b).unwrap(), &probe)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&flatten(&grads), &fd, 1e-6);
            assert!(err <= 1e-4, "delta_l={delta_l} param rel err {err}");

            let fd_in = finite_difference_grad(
                |p| {
                    let s =
                        FeatureSequence::new(Tensor4::from_vec(seq.frames().dims(), p.to_vec()).unwrap(), "p").unwrap();
                    probe_loss(&compute_field(&s, &masks, &branch).unwrap(), &probe)
                },
                seq.frames().data(),
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(gin.data(), &fd_in, 1e-6);
            assert!(err <= 1e-4, "delta_l={delta_l} input rel err {err}");
        }
    }

    #[test]
    fn background_features_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = BranchConfig { kernel: 1, ..small_cfg(0) };
        let branch = MatchingBranch::init(&cfg, &mut rng).unwrap();
        let seq = FeatureSequence::new(random(&mut rng, (1, 4, 4, 4)), "r").unwrap();
        let mut m = Tensor4::from_fn((1, 4, 4, 1), |_, _, _, _| 1.0);
        m.set(0, 2, 1, 0, 0.0);
        m.set(0, 0, 3, 0, 0.0);
        let masks = MaskSequence::new(m).unwrap();
        let probe = random(&mut rng, (1, 4, 4, 2));
        let (_, cache) = compute_field_cached(&seq, &masks, &branch).unwrap();
        let mut grads = branch.zeros_like();
        let gin = matching_backward(&branch, &cache, &probe, &mut grads, true).unwrap().unwrap();
        let fd_in = finite_difference_grad(
            |p| {
                let s = FeatureSequence::new(Tensor4::from_vec(seq.frames().dims(), p.to_vec()).unwrap(), "p").unwrap();
                probe_loss(&compute_field(&s, &masks, &branch).unwrap(), &probe)
            },
            seq.frames().data(),
            1e-5,
        )
        .unwrap();
        let fd = Tensor4::from_vec(seq.frames().dims(), fd_in).unwrap();
        for (y, x) in [(2, 1), (0, 3)] {
            assert!(gin.pixel(0, y, x).iter().all(|&v| v == 0.0));
            assert!(fd.pixel(0, y, x).iter().all(|v| v.abs() <= 1e-10));
        }
    }

    #[test]
    fn suppression_probability_matches_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames = Tensor4::from_fn((1, 100, 100, 2), |_, _, _, c| if c == 0 { 1.0 } else { 0.0 });
        let f = GaitFeatureField::new(FieldKind::Static, 0, frames).unwrap();
        let s = texture_suppress(&f, 0.5, 0.5, &mut rng).unwrap();
        let zeroed = field_magnitude(&s).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeroed as f64 / 1e4;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn encoders_must_share_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ConvStack::init(4, 3, 3, 4, &mut rng).unwrap();
        let b = ConvStack::init(4, 3, 1, 4, &mut rng).unwrap();
        assert!(MatchingBranch::new(a.clone(), b, 0, build_template(1, 1)).is_err());
        let c = ConvStack::new(vec![ConvLayer::zeros(4, 3, 3, Activation::Identity).unwrap()]).unwrap();
        assert!(MatchingBranch::new(a, c, 0, build_template(1, 1)).is_err());
    }
}
