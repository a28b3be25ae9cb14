//! Finite-difference checks of the analytic gradients: feature matching,
//! fusion plus head, and the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{EmbedHead, FusionBlock, FusionMode};
use crate::matching::{compute_field, compute_field_cached, matching_backward, BranchConfig, MatchingBranch};
use crate::model::{BatchItem, Mode, Model, ModelConfig};
use crate::params::{flatten, unflatten, Params};
use crate::sequence::{FeatureSequence, MaskSequence};
use crate::tensor::{finite_difference_grad, max_relative_error, Matrix, Tensor4};

/// Relative error accepted by every suite.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Small,
}

impl Scale {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Scale::Tiny),
            "small" => Some(Scale::Small),
            _ => None,
        }
    }

    /// Frame side and sequence length.
    fn dims(self) -> (usize, usize) {
        match self {
            Scale::Tiny => (4, 3),
            Scale::Small => (6, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn randomize_biases(p: &mut impl Params, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, v| {
        if name.ends_with("bias") {
            v.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    });
}

fn result(name: &str, analytic: &[f64], numeric: &[f64]) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        coordinates: analytic.len(),
        max_rel_error: max_relative_error(analytic, numeric, FLOOR),
    }
}

fn weighted(field: &Tensor4, probe: &Tensor4) -> f64 {
    field.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Matching branch with a random linear readout of the field, for
/// `Δl ∈ {0, 1}`; checks encoder parameters and input features.
pub fn matching_suite(scale: Scale, eps: f64) -> Result<Vec<SuiteResult>> {
    let (side, len) = scale.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for delta_l in [0, 1] {
        let cfg = BranchConfig {
            in_channels: 4,
            channels: 3,
            kernel: 3,
            depth: 4,
            delta_h: 1,
            delta_w: 1,
            delta_l,
            init_gain: 1.0,
        };
        let mut branch = MatchingBranch::init(&cfg, &mut rng)?;
        randomize_biases(&mut branch, &mut rng);
        let seq = FeatureSequence::new(random(&mut rng, (len, side, side, 4)), "gradcheck")?;
        let mut m = Tensor4::from_fn((len, side, side, 1), |_, _, _, _| 1.0);
        m.set(0, 0, side - 1, 0, 0.0);
        let masks = MaskSequence::new(m)?;
        let probe = random(&mut rng, (len - delta_l, side, side, 2));

        let (_, cache) = compute_field_cached(&seq, &masks, &branch)?;
        let mut grads = branch.zeros_like();
        let gin = matching_backward(&branch, &cache, &probe, &mut grads, true)?
            .ok_or_else(|| Error::Numeric("no input gradient".into()))?;

        let fd = finite_difference_grad(
            |p| {
                let mut b = branch.clone();
                unflatten(&mut b, p);
                compute_field(&seq, &masks, &b).map(|f| weighted(&f.frames, &probe)).unwrap_or(f64::NAN)
            },
            &flatten(&branch),
            eps,
        )?;
        out.push(result(&format!("matching.dl{delta_l}.params"), &flatten(&grads), &fd));
        let fd = finite_difference_grad(
            |p| {
                let s = Tensor4::from_vec(seq.frames().dims(), p.to_vec())
                    .and_then(|t| FeatureSequence::new(t, "p"))
                    .and_then(|s| compute_field(&s, &masks, &branch));
                s.map(|f| weighted(&f.frames, &probe)).unwrap_or(f64::NAN)
            },
            seq.frames().data(),
            eps,
        )?;
        out.push(result(&format!("matching.dl{delta_l}.input"), gin.data(), &fd));
    }
    Ok(out)
}

/// Gated fusion followed by the embedding head, with a random linear readout
/// of the embedding; checks both parameter sets and both input fields.
pub fn fusion_head_suite(scale: Scale, eps: f64) -> Result<Vec<SuiteResult>> {
    let (side, len) = scale.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut fb = FusionBlock::init(3, 3, 1, &mut rng)?;
    let mut head = EmbedHead::init(3, 4, 3, 2, 3, &mut rng)?;
    randomize_biases(&mut fb, &mut rng);
    randomize_biases(&mut head, &mut rng);
    let s = random(&mut rng, (len - 1, side, side, 2));
    let d = random(&mut rng, (len - 1, side, side, 2));
    let probe = Matrix::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = |fb: &FusionBlock, head: &EmbedHead, s: &Tensor4, d: &Tensor4| -> f64 {
        fb.fuse_cached(s, d)
            .and_then(|(fused, _)| head.embed(&fused))
            .map(|e| e.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
            .unwrap_or(f64::NAN)
    };
    let (fused, fcache) = fb.fuse_cached(&s, &d)?;
    let (_, ecache) = head.embed_cached(&fused)?;
    let (mut hg, mut fg) = (head.zeros_like(), fb.zeros_like());
    let dfused = head.backward(&ecache, &probe, &mut hg);
    let (ds, dd) = fb.backward(&fcache, &dfused, &mut fg);

    let mut out = Vec::new();
    let fd = finite_difference_grad(
        |p| {
            let mut h2 = head.clone();
            unflatten(&mut h2, p);
            loss(&fb, &h2, &s, &d)
        },
        &flatten(&head),
        eps,
    )?;
    out.push(result("fusion_head.head", &flatten(&hg), &fd));
    let fd = finite_difference_grad(
        |p| {
            let mut f2 = fb.clone();
            unflatten(&mut f2, p);
            loss(&f2, &head, &s, &d)
        },
        &flatten(&fb),
        eps,
    )?;
    out.push(result("fusion_head.fusion", &flatten(&fg), &fd));
    let fd = finite_difference_grad(
        |p| loss(&fb, &head, &Tensor4::from_vec(s.dims(), p.to_vec()).unwrap(), &d),
        s.data(),
        eps,
    )?;
    out.push(result("fusion_head.static_field", ds.data(), &fd));
    let fd = finite_difference_grad(
        |p| loss(&fb, &head, &s, &Tensor4::from_vec(d.dims(), p.to_vec()).unwrap()),
        d.data(),
        eps,
    )?;
    out.push(result("fusion_head.dynamic_field", dd.data(), &fd));
    Ok(out)
}

/// Triplet plus cross-entropy loss of the whole model on four sequences of
/// two identities, for every fusion mode, with and without suppression.
pub fn pipeline_suite(scale: Scale, eps: f64) -> Result<Vec<SuiteResult>> {
    let (side, len) = scale.dims();
    let mut out = Vec::new();
    let cases = [
        (FusionMode::Both, false),
        (FusionMode::Both, true),
        (FusionMode::StaticOnly, false),
        (FusionMode::DynamicOnly, false),
    ];
    for (mode, suppress) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = ModelConfig {
            channels: 3,
            encoder_depth: 2,
            delta_h: 1,
            delta_w: 1,
            fusion_dim: 3,
            backbone_dim: 3,
            strips: 2,
            embed_dim: 3,
            // Large enough that every triplet stays active.
            triplet_margin: 1.0,
            mode,
            suppression: if suppress { Some(Default::default()) } else { None },
            ..ModelConfig::new(2)
        };
        let mut model = Model::init(cfg, &mut rng)?;
        randomize_biases(&mut model, &mut rng);
        let batch: Vec<(FeatureSequence, MaskSequence, usize)> = (0..4)
            .map(|i| {
                let f = random(&mut rng, (len, side, side, 4));
                let m = Tensor4::from_fn((len, side, side, 1), |_, y, x, _| f64::from(!(y == 0 && x == side - 1)));
                Ok((FeatureSequence::new(f, "gradcheck")?, MaskSequence::new(m)?, i / 2))
            })
            .collect::<Result<_>>()?;
        let items: Vec<BatchItem<'_>> =
            batch.iter().map(|(f, m, l)| BatchItem { features: f, masks: m, label: *l }).collect();
        let run = |m: &Model| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            m.batch_loss(&items, Mode::Train(&mut r))
        };
        let (_, grads) = run(&model)?;
        let fd = finite_difference_grad(
            |p| {
                let mut m = model.clone();
                unflatten(&mut m, p);
                run(&m).map(|(l, _)| l.total).unwrap_or(f64::NAN)
            },
            &flatten(&model),
            eps,
        )?;
        let tag = if suppress { "+suppression" } else { "" };
        out.push(result(&format!("pipeline.{}{tag}", mode.name()), &flatten(&grads), &fd));
    }
    Ok(out)
}

pub fn run_all(scale: Scale, eps: f64) -> Result<Vec<SuiteResult>> {
    let mut out = matching_suite(scale, eps)?;
    out.extend(fusion_head_suite(scale, eps)?);
    out.extend(pipeline_suite(scale, eps)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_suites_pass() {
        let results = run_all(Scale::Tiny, 1e-5).unwrap();
        assert_eq!(results.len(), 12);
        for r in &results {
            assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_error);
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn bad_eps_is_rejected() {
        assert!(matching_suite(Scale::Tiny, 0.0).is_err());
        assert_eq!(Scale::parse("huge"), None);
    }
}
