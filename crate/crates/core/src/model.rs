//! The full trainable pipeline: static and dynamic matching branches,
//! optional texture suppression, fusion, embedding head and per-strip
//! classifier.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::head::{EmbedCache, EmbedHead, FusionBlock, FusionCache, FusionMode, ProjectionCache, StripLinear};
use crate::loss::{cross_entropy_loss, triplet_loss, DEFAULT_TRIPLET_MARGIN};
use crate::matching::{
    compute_field, compute_field_cached, matching_backward, BranchConfig, FieldCache, FieldKind, GaitFeatureField,
    MatchingBranch, TextureSuppression,
};
use crate::params::{join, Params};
use crate::sequence::{FeatureSequence, MaskSequence, DEFAULT_FEATURE_CHANNELS};
use crate::tensor::{Matrix, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Encoded channels `C` of both branches.
    pub channels: usize,
    pub encoder_kernel: usize,
    pub encoder_depth: usize,
    pub delta_h: usize,
    pub delta_w: usize,
    /// Frame offset of the dynamic branch.
    pub delta_l: usize,
    pub fusion_dim: usize,
    pub backbone_dim: usize,
    pub head_kernel: usize,
    pub strips: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub triplet_margin: f64,
    pub mode: FusionMode,
    pub background_removal: bool,
    /// Applied to the static field in training mode only.
    pub suppression: Option<TextureSuppression>,
    /// Init gain of the last encoder layer in both branches. At gain 1 the
    /// initial similarity scores are nearly flat over the window and the
    /// bilinear score leaves the encoders near a saddle.
    pub encoder_gain: f64,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            in_channels: DEFAULT_FEATURE_CHANNELS,
            channels: 16,
            encoder_kernel: 3,
            encoder_depth: 4,
            delta_h: 3,
            delta_w: 3,
            delta_l: 1,
            fusion_dim: 16,
            backbone_dim: 32,
            head_kernel: 3,
            strips: 4,
            embed_dim: 32,
            num_classes,
            triplet_margin: DEFAULT_TRIPLET_MARGIN,
            mode: FusionMode::Both,
            background_removal: true,
            suppression: Some(TextureSuppression::default()),
            encoder_gain: 3.0,
        }
    }

    pub fn branch(&self, kind: FieldKind) -> BranchConfig {
        BranchConfig {
            in_channels: self.in_channels,
            channels: self.channels,
            kernel: self.encoder_kernel,
            depth: self.encoder_depth,
            delta_h: self.delta_h,
            delta_w: self.delta_w,
            delta_l: match kind {
                FieldKind::Static => 0,
                FieldKind::Dynamic => self.delta_l,
            },
            init_gain: self.encoder_gain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("encoder_depth", self.encoder_depth),
            ("fusion_dim", self.fusion_dim),
            ("backbone_dim", self.backbone_dim),
            ("strips", self.strips),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.delta_l == 0 {
            return Err(Error::config("dynamic frame offset must be at least 1"));
        }
        if !(self.encoder_gain > 0.0 && self.encoder_gain.is_finite()) {
            return Err(Error::config(format!("encoder gain {} must be positive", self.encoder_gain)));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::config(format!("triplet margin {} must be >= 0", self.triplet_margin)));
        }
        Ok(())
    }

    /// Frames needed for one forward pass.
    pub fn min_frames(&self) -> usize {
        if self.mode.uses_dynamic() {
            self.delta_l + 1
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub static_branch: MatchingBranch,
    pub dynamic_branch: MatchingBranch,
    pub fusion: FusionBlock,
    pub head: EmbedHead,
    pub classifier: StripLinear,
}

/// Whether texture suppression runs, and with which generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone)]
enum FusionPath {
    Gated(FusionCache),
    Single(ProjectionCache),
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    static_path: Option<(FieldCache, Option<Tensor4>)>,
    dynamic_path: Option<FieldCache>,
    fusion: FusionPath,
    embed: EmbedCache,
    static_len: usize,
    embedding: Matrix,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }
}

/// One labelled sequence of a training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub features: &'a FeatureSequence,
    pub masks: &'a MaskSequence,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub cross_entropy: f64,
    pub active_triplets: usize,
    pub no_valid_triplet: bool,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let static_branch = MatchingBranch::init(&config.branch(FieldKind::Static), rng)?;
        let dynamic_branch = MatchingBranch::init(&config.branch(FieldKind::Dynamic), rng)?;
        let fusion = FusionBlock::init(config.fusion_dim, config.head_kernel, 1, rng)?;
        let head = EmbedHead::init(
            config.fusion_dim,
            config.backbone_dim,
            config.head_kernel,
            config.strips,
            config.embed_dim,
            rng,
        )?;
        let classifier = StripLinear::init(config.strips, config.embed_dim, config.num_classes, rng);
        Ok(Model { config, static_branch, dynamic_branch, fusion, head, classifier })
    }

    /// A parameter-shaped zero value, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        Model {
            config: self.config,
            static_branch: self.static_branch.zeros_like(),
            dynamic_branch: self.dynamic_branch.zeros_like(),
            fusion: self.fusion.zeros_like(),
            head: self.head.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    fn effective_masks(&self, features: &FeatureSequence, masks: &MaskSequence) -> Result<MaskSequence> {
        masks.check_pairs(features)?;
        if self.config.background_removal {
            Ok(masks.clone())
        } else {
            Ok(MaskSequence::ones_like(features))
        }
    }

    fn check_length(&self, features: &FeatureSequence) -> Result<()> {
        let need = self.config.min_frames();
        if features.len() < need {
            return Err(Error::shape(format!("{} frames given, the model needs at least {need}", features.len())));
        }
        Ok(())
    }

    /// Both fields for a sequence, without suppression.
    pub fn fields(
        &self,
        features: &FeatureSequence,
        masks: &MaskSequence,
    ) -> Result<(Option<GaitFeatureField>, Option<GaitFeatureField>)> {
        self.check_length(features)?;
        let masks = self.effective_masks(features, masks)?;
        let s = if self.config.mode.uses_static() {
            Some(compute_field(features, &masks, &self.static_branch)?)
        } else {
            None
        };
        let d = if self.config.mode.uses_dynamic() {
            Some(compute_field(features, &masks, &self.dynamic_branch)?)
        } else {
            None
        };
        Ok((s, d))
    }

    /// Evaluation-mode embedding, `strips × embed_dim`.
    pub fn embed(&self, features: &FeatureSequence, masks: &MaskSequence) -> Result<Matrix> {
        let (s, d) = self.fields(features, masks)?;
        let fused = match (s, d) {
            (Some(s), Some(d)) => self.fusion.fuse(&s, &d)?,
            (Some(s), None) => self.fusion.project_cached(FieldKind::Static, &s.frames)?.0,
            (None, Some(d)) => self.fusion.project_cached(FieldKind::Dynamic, &d.frames)?.0,
            (None, None) => unreachable!("fusion mode uses at least one branch"),
        };
        self.head.embed(&fused)
    }

    pub fn forward_cached(
        &self,
        features: &FeatureSequence,
        masks: &MaskSequence,
        mode: Mode<'_>,
    ) -> Result<ForwardCache> {
        self.check_length(features)?;
        let masks = self.effective_masks(features, masks)?;
        let static_path = if self.config.mode.uses_static() {
            let (field, cache) = compute_field_cached(features, &masks, &self.static_branch)?;
            match (mode, self.config.suppression) {
                (Mode::Train(rng), Some(sup)) => {
                    let (field, keep) = sup.apply(&field, rng)?;
                    Some((field, cache, Some(keep)))
                }
                _ => Some((field, cache, None)),
            }
        } else {
            None
        };
        let dynamic_path = if self.config.mode.uses_dynamic() {
            Some(compute_field_cached(features, &masks, &self.dynamic_branch)?)
        } else {
            None
        };
        let (fused, fusion) = match (&static_path, &dynamic_path) {
            (Some((s, _, _)), Some((d, _))) => {
                let (f, c) = self.fusion.fuse_cached(&s.frames, &d.frames)?;
                (f, FusionPath::Gated(c))
            }
            (Some((s, _, _)), None) => {
                let (f, c) = self.fusion.project_cached(FieldKind::Static, &s.frames)?;
                (f, FusionPath::Single(c))
            }
            (None, Some((d, _))) => {
                let (f, c) = self.fusion.project_cached(FieldKind::Dynamic, &d.frames)?;
                (f, FusionPath::Single(c))
            }
            (None, None) => unreachable!("fusion mode uses at least one branch"),
        };
        let (embedding, embed) = self.head.embed_cached(&fused)?;
        let static_len = static_path.as_ref().map_or(0, |(s, _, _)| s.len());
        Ok(ForwardCache {
            static_path: static_path.map(|(_, c, k)| (c, k)),
            dynamic_path: dynamic_path.map(|(_, c)| c),
            fusion,
            embed,
            static_len,
            embedding,
        })
    }

    /// Accumulates parameter gradients for one sequence given the gradient
    /// with respect to its embedding.
    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &Matrix, grads: &mut Model) -> Result<()> {
        let dfused = self.head.backward(&cache.embed, grad_embedding, &mut grads.head);
        let (dstatic, ddynamic) = match &cache.fusion {
            FusionPath::Gated(c) => {
                let (ds, dd) = self.fusion.backward(c, &dfused, &mut grads.fusion);
                (Some(ds), Some(dd))
            }
            FusionPath::Single(c) => {
                let g = self.fusion.project_backward(c, &dfused, &mut grads.fusion);
                if cache.static_path.is_some() {
                    (Some(g), None)
                } else {
                    (None, Some(g))
                }
            }
        };
        if let (Some((fc, keep)), Some(ds)) = (&cache.static_path, dstatic) {
            // The gated path only sees the first frames of the static field.
            let (n, h, w, c) = ds.dims();
            let mut full = Tensor4::zeros(cache.static_len, h, w, c);
            full.data_mut()[..n * h * w * c].copy_from_slice(ds.data());
            if let Some(keep) = keep {
                for (px, &k) in full.data_mut().chunks_mut(c).zip(keep.data()) {
                    px.iter_mut().for_each(|v| *v *= k);
                }
            }
            matching_backward(&self.static_branch, fc, &full, &mut grads.static_branch, false)?;
        }
        if let (Some(fc), Some(dd)) = (&cache.dynamic_path, ddynamic) {
            matching_backward(&self.dynamic_branch, fc, &dd, &mut grads.dynamic_branch, false)?;
        }
        Ok(())
    }

    /// Triplet plus mean cross-entropy over a batch, with the gradient of
    /// the total.
    pub fn batch_loss(&self, items: &[BatchItem<'_>], mut mode: Mode<'_>) -> Result<(LossBreakdown, Model)> {
        if items.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let mut caches = Vec::with_capacity(items.len());
        for item in items {
            let m = match &mut mode {
                Mode::Eval => Mode::Eval,
                Mode::Train(rng) => Mode::Train(&mut **rng),
            };
            caches.push(self.forward_cached(item.features, item.masks, m)?);
        }
        let embeddings: Vec<Matrix> = caches.iter().map(|c| c.embedding.clone()).collect();
        let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
        let triplet = triplet_loss(&embeddings, &labels, self.config.triplet_margin)?;
        let mut grads = self.zeros_like();
        let scale = 1.0 / items.len() as f64;
        let mut ce_total = 0.0;
        for ((cache, item), tgrad) in caches.iter().zip(items).zip(&triplet.grads) {
            let logits = self.classifier.forward(&cache.embedding)?;
            let (ce, dlogits) = cross_entropy_loss(&logits, item.label)?;
            ce_total += ce;
            let dlogits =
                Matrix::from_vec(dlogits.rows(), dlogits.cols(), dlogits.data().iter().map(|v| v * scale).collect())?;
            let demb = self.classifier.backward(&cache.embedding, &dlogits, &mut grads.classifier);
            let demb = Matrix::from_vec(
                demb.rows(),
                demb.cols(),
                demb.data().iter().zip(tgrad.data()).map(|(a, b)| a + b).collect(),
            )?;
            self.backward(cache, &demb, &mut grads)?;
        }
        let cross_entropy = ce_total * scale;
        let breakdown = LossBreakdown {
            total: triplet.loss + cross_entropy,
            triplet: triplet.loss,
            cross_entropy,
            active_triplets: triplet.active,
            no_valid_triplet: triplet.no_valid_triplet,
        };
        Ok((breakdown, grads))
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.static_branch.visit(&join(prefix, "static"), f);
        self.dynamic_branch.visit(&join(prefix, "dynamic"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.static_branch.visit_mut(&join(prefix, "static"), f);
        self.dynamic_branch.visit_mut(&join(prefix, "dynamic"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
