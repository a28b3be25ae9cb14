//! Deterministic SGD training on a synthetic dataset.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::model::{BatchItem, LossBreakdown, Mode, Model, ModelConfig};
use crate::params::{count, flatten, Params};
use crate::sequence::{FeatureSequence, MaskSequence};
use crate::synth::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Rescale the gradient to this global L2 norm when it is larger; 0
    /// disables clipping.
    pub grad_clip: f64,
    /// Steps at which the learning rate is multiplied by `lr_gamma`.
    pub milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub batch_ids: usize,
    pub batch_seqs: usize,
    /// Frames per ordered training clip.
    pub clip_len: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            seed: 0,
            steps: 1000,
            lr: 0.1,
            weight_decay: 5e-4,
            momentum: 0.0,
            grad_clip: 0.0,
            milestones: Vec::new(),
            lr_gamma: 0.1,
            batch_ids: 8,
            batch_seqs: 2,
            clip_len: 8,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config(format!("weight decay {} must be finite and >= 0", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(Error::config(format!("gradient clip {} must be finite and >= 0", self.grad_clip)));
        }
        if !(self.lr_gamma > 0.0) || !self.lr_gamma.is_finite() {
            return Err(Error::config(format!("lr gamma {} must be positive", self.lr_gamma)));
        }
        if self.batch_ids < 2 || self.batch_seqs < 1 {
            return Err(Error::config("a batch needs at least 2 identities and 1 sequence each"));
        }
        if self.clip_len < self.model.min_frames() {
            return Err(Error::config(format!(
                "clip of {} frames is shorter than the model needs ({})",
                self.clip_len,
                self.model.min_frames()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Running minimum of the total loss.
    pub best_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,total,triplet,cross_entropy,active_triplets,best_total\n");
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.lr, r.loss.total, r.loss.triplet, r.loss.cross_entropy, r.loss.active_triplets, r.best_total
        )
        .unwrap();
    }
    out
}

/// `p ← p − lr·(g + weight_decay·p)` for every parameter.
pub fn sgd_step(model: &mut Model, grads: &Model, lr: f64, weight_decay: f64) {
    let flat = flatten(grads);
    let mut offset = 0;
    model.visit_mut("", &mut |_, v| {
        for (p, g) in v.iter_mut().zip(&flat[offset..]) {
            *p -= lr * (g + weight_decay * *p);
        }
        offset += v.len();
    });
}

/// `v ← μ·v + g + weight_decay·p`, then `p ← p − lr·v`.
pub fn momentum_step(model: &mut Model, velocity: &mut [f64], grads: &Model, lr: f64, weight_decay: f64, mu: f64) {
    let flat = flatten(grads);
    let mut offset = 0;
    model.visit_mut("", &mut |_, v| {
        let vel = &mut velocity[offset..offset + v.len()];
        for ((p, g), u) in v.iter_mut().zip(&flat[offset..]).zip(vel) {
            *u = mu * *u + g + weight_decay * *p;
            *p -= lr * *u;
        }
        offset += v.len();
    });
}

/// Scale `grads` down to global L2 norm `max_norm` if it exceeds it.
pub fn clip_gradient(grads: &mut Model, max_norm: f64) {
    let norm = flatten(grads).iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.visit_mut("", &mut |_, v| v.iter_mut().for_each(|g| *g *= scale));
    }
}

fn check_dataset(dataset: &Dataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<()> {
    split.validate(dataset.spec.seqs_per_id)?;
    if dataset.num_ids() < cfg.batch_ids {
        return Err(Error::config(format!(
            "batch wants {} identities, dataset has {}",
            cfg.batch_ids,
            dataset.num_ids()
        )));
    }
    if split.train.len() < cfg.batch_seqs {
        return Err(Error::config(format!(
            "batch wants {} sequences per identity, training split has {}",
            cfg.batch_seqs,
            split.train.len()
        )));
    }
    if dataset.spec.frames < cfg.clip_len {
        return Err(Error::config(format!(
            "clip of {} frames exceeds sequences of {}",
            cfg.clip_len, dataset.spec.frames
        )));
    }
    if cfg.model.num_classes < dataset.num_ids() {
        return Err(Error::config(format!(
            "classifier has {} classes for {} identities",
            cfg.model.num_classes,
            dataset.num_ids()
        )));
    }
    if cfg.model.in_channels != dataset.spec.channels {
        return Err(Error::config(format!(
            "model expects {} channels, dataset has {}",
            cfg.model.in_channels, dataset.spec.channels
        )));
    }
    Ok(())
}

/// Ordered sampling: a contiguous clip from a random start frame.
fn clip(
    features: &FeatureSequence,
    masks: &MaskSequence,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureSequence, MaskSequence)> {
    let start = rng.random_range(0..=features.len() - len);
    let f = FeatureSequence::new(features.frames().frames(start, len), features.source_tag.clone())?;
    let m = MaskSequence::new(masks.frames().frames(start, len))?;
    Ok((f, m))
}

pub fn train(dataset: &Dataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset, split, cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.model, &mut init_rng)?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut velocity = vec![0.0; count(&model)];
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best = f64::INFINITY;
    for step in 0..cfg.steps {
        // Sorted picks keep the batch order canonical.
        let mut ids = sample(&mut sample_rng, dataset.num_ids(), cfg.batch_ids).into_vec();
        ids.sort_unstable();
        let mut batch = Vec::with_capacity(cfg.batch_ids * cfg.batch_seqs);
        for id in ids {
            let mut picks = sample(&mut sample_rng, split.train.len(), cfg.batch_seqs).into_vec();
            picks.sort_unstable();
            for p in picks {
                let s = dataset.sample(id, split.train[p]);
                let (f, m) = clip(&s.features, &s.masks, cfg.clip_len, &mut sample_rng)?;
                batch.push((f, m, id));
            }
        }
        let items: Vec<BatchItem<'_>> =
            batch.iter().map(|(f, m, l)| BatchItem { features: f, masks: m, label: *l }).collect();
        let (loss, mut grads) = model.batch_loss(&items, Mode::Train(&mut noise_rng))?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        if cfg.grad_clip > 0.0 {
            clip_gradient(&mut grads, cfg.grad_clip);
        }
        let lr = cfg.lr_at(step);
        if cfg.momentum == 0.0 {
            sgd_step(&mut model, &grads, lr, cfg.weight_decay);
        } else {
            momentum_step(&mut model, &mut velocity, &grads, lr, cfg.weight_decay, cfg.momentum);
        }
        best = best.min(loss.total);
        trace.push(TraceRow { step, lr, loss, best_total: best });
    }
    Ok(TrainOutcome { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::FusionMode;
    use crate::params::unflatten;
    use crate::synth::{synth_walkers, SyntheticWalkerSpec};

    fn tiny() -> (Dataset, SplitSpec, TrainConfig) {
        let spec =
            SyntheticWalkerSpec { num_ids: 3, seqs_per_id: 4, frames: 5, height: 12, width: 8, ..Default::default() };
        let ds = synth_walkers(&spec).unwrap();
        let model = ModelConfig {
            channels: 3,
            encoder_depth: 2,
            delta_h: 1,
            delta_w: 1,
            fusion_dim: 3,
            backbone_dim: 4,
            strips: 2,
            embed_dim: 4,
            mode: FusionMode::Both,
            ..ModelConfig::new(3)
        };
        let cfg =
            TrainConfig { steps: 3, lr: 0.05, batch_ids: 3, batch_seqs: 1, clip_len: 3, ..TrainConfig::new(model) };
        (ds, SplitSpec::standard(4).unwrap(), cfg)
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let (ds, split, cfg) = tiny();
        let cfg = TrainConfig { steps: 0, ..cfg };
        let out = train(&ds, &split, &cfg).unwrap();
        let fresh = Model::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.model, fresh);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn zero_learning_rate_gives_a_constant_trace() {
        let (ds, split, cfg) = tiny();
        // One identity-sequence pairing and a full-length clip leave no
        // sampling freedom, and no suppression removes the last randomness.
        let model = ModelConfig { suppression: None, ..cfg.model };
        let cfg = TrainConfig { lr: 0.0, clip_len: 5, model, ..cfg };
        let split = SplitSpec { train: vec![0], ..split };
        let out = train(&ds, &split, &cfg).unwrap();
        let first = out.trace[0].loss.total;
        assert!(out.trace.iter().all(|r| r.loss.total == first));
    }

    #[test]
    fn decay_shrinks_untouched_parameters_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, _, cfg) = tiny();
        let mut model = Model::init(cfg.model, &mut rng).unwrap();
        let before = flatten(&model);
        let grads = model.zeros_like();
        sgd_step(&mut model, &grads, 0.1, 0.01);
        for (a, b) in flatten(&model).iter().zip(&before) {
            assert_eq!(*a, b - 0.1 * (0.0 + 0.01 * b));
            assert!((a - b * (1.0 - 0.1 * 0.01)).abs() <= 1e-16 * b.abs().max(1.0));
        }
    }

    #[test]
    fn momentum_with_zero_mu_matches_plain_sgd_and_clipping_caps_the_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, _, cfg) = tiny();
        let mut a = Model::init(cfg.model, &mut rng).unwrap();
        let mut b = a.clone();
        let mut grads = a.zeros_like();
        let noise: Vec<f64> = (0..count(&grads)).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        unflatten(&mut grads, &noise);
        sgd_step(&mut a, &grads, 0.1, 0.01);
        let mut velocity = vec![0.0; noise.len()];
        momentum_step(&mut b, &mut velocity, &grads, 0.1, 0.01, 0.0);
        assert_eq!(flatten(&a), flatten(&b));

        clip_gradient(&mut grads, 1.5);
        let norm = flatten(&grads).iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norm - 1.5).abs() < 1e-12);
        let before = flatten(&grads);
        clip_gradient(&mut grads, 10.0);
        assert_eq!(flatten(&grads), before);
    }

    #[test]
    fn training_is_deterministic_and_reports_rows() {
        let (ds, split, cfg) = tiny();
        let a = train(&ds, &split, &cfg).unwrap();
        let b = train(&ds, &split, &cfg).unwrap();
        assert_eq!(a, b);
        let csv = trace_csv(&a.trace);
        assert_eq!(csv.lines().count(), 4);
        assert!(a.trace.windows(2).all(|w| w[1].best_total <= w[0].best_total));
    }

    #[test]
    fn learning_rate_steps_down_at_milestones() {
        let (_, _, cfg) = tiny();
        let cfg = TrainConfig { lr: 1.0, milestones: vec![2, 5], lr_gamma: 0.5, ..cfg };
        let lrs: Vec<f64> = (0..7).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, [1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn undersized_datasets_are_rejected() {
        let (ds, split, cfg) = tiny();
        assert!(train(&ds, &split, &TrainConfig { batch_ids: 4, ..cfg.clone() }).is_err());
        assert!(train(&ds, &split, &TrainConfig { batch_seqs: 2, ..cfg.clone() }).is_err());
        assert!(train(&ds, &split, &TrainConfig { clip_len: 6, ..cfg.clone() }).is_err());
        assert!(train(&ds, &split, &TrainConfig { clip_len: 1, ..cfg }).is_err());
    }
}
