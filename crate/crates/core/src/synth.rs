//! Synthetic walkers: a small stick-like body with swinging legs, rendered
//! straight into feature channels so the pipeline can be trained and
//! evaluated without external data.
//!
//! Channel 0 is body occupancy, channel 1 separates torso (+1) from legs
//! (−1). Channels 2 and 3 carry i.i.d. noise on the body, fresh every
//! frame, that says nothing about identity. Identity lives in the leg swing
//! frequency and phase and in the torso width.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sequence::{FeatureSequence, MaskSequence};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Covariate {
    Clean,
    /// Texture channels drawn from a shifted palette never seen in clean
    /// sequences.
    Recolored,
}

impl Covariate {
    pub fn tag(self) -> &'static str {
        match self {
            Covariate::Clean => "clean",
            Covariate::Recolored => "recolored",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(Covariate::Clean),
            "recolored" => Some(Covariate::Recolored),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkerSignature {
    /// Leg swing frequency in cycles per frame.
    pub frequency: f64,
    pub phase: f64,
    pub torso_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticWalkerSpec {
    pub num_ids: usize,
    pub seqs_per_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub texture_noise_level: f64,
    /// Trailing sequences of every identity rendered with the recolored
    /// covariate.
    pub recolored_per_id: usize,
    pub seed: u64,
}

impl Default for SyntheticWalkerSpec {
    fn default() -> Self {
        SyntheticWalkerSpec {
            num_ids: 8,
            seqs_per_id: 6,
            frames: 20,
            height: 32,
            width: 16,
            channels: 4,
            texture_noise_level: 1.0,
            recolored_per_id: 1,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &["ids", "seqs", "frames", "h", "w", "c", "noise", "recolored", "seed"];

impl SyntheticWalkerSpec {
    /// Parse a comma-separated `key=value` list, for example
    /// `ids=8,seqs=6,frames=20,h=32,w=16,c=4,noise=1,recolored=1,seed=0`.
    /// Missing keys keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticWalkerSpec::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) =
                part.split_once('=').ok_or_else(|| Error::config(format!("expected key=value, got `{part}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("`{key}` needs a non-negative integer, got `{value}`")))
            };
            match key {
                "ids" => spec.num_ids = int()?,
                "seqs" => spec.seqs_per_id = int()?,
                "frames" => spec.frames = int()?,
                "h" => spec.height = int()?,
                "w" => spec.width = int()?,
                "c" => spec.channels = int()?,
                "recolored" => spec.recolored_per_id = int()?,
                "noise" => {
                    spec.texture_noise_level =
                        value.parse().map_err(|_| Error::config(format!("`noise` needs a number, got `{value}`")))?
                }
                "seed" => {
                    spec.seed =
                        value.parse().map_err(|_| Error::config(format!("`seed` needs an integer, got `{value}`")))?
                }
                _ => return Err(Error::config(format!("unknown synth key `{key}` (known: {})", KEYS.join(", ")))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_spec_string(&self) -> String {
        format!(
            "ids={},seqs={},frames={},h={},w={},c={},noise={},recolored={},seed={}",
            self.num_ids,
            self.seqs_per_id,
            self.frames,
            self.height,
            self.width,
            self.channels,
            self.texture_noise_level,
            self.recolored_per_id,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids == 0 || self.seqs_per_id == 0 || self.frames == 0 {
            return Err(Error::config("synth needs at least one identity, sequence and frame"));
        }
        if self.height < 12 || self.width < 8 {
            return Err(Error::config(format!(
                "synth frames must be at least 12x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels < 2 {
            return Err(Error::config("synth needs at least 2 channels"));
        }
        if !(self.texture_noise_level >= 0.0) || !self.texture_noise_level.is_finite() {
            return Err(Error::config(format!(
                "texture noise level {} must be finite and >= 0",
                self.texture_noise_level
            )));
        }
        if self.recolored_per_id > self.seqs_per_id {
            return Err(Error::config("more recolored sequences than sequences per identity"));
        }
        let cells = self.num_ids.checked_mul(self.seqs_per_id).and_then(|n| n.checked_mul(self.frames));
        let pixels = self.height.checked_mul(self.width).and_then(|n| n.checked_mul(self.channels));
        match cells.zip(pixels).and_then(|(a, b)| a.checked_mul(b)) {
            Some(n) if n <= 1 << 28 => Ok(()),
            _ => Err(Error::config("synth dataset is too large")),
        }
    }

    fn frequency_count(&self) -> usize {
        self.num_ids.div_ceil(2)
    }

    /// Identities `i` and `i + n/2` share a swing frequency and differ in
    /// torso width, so every identity has a distinct (frequency, width) pair.
    pub fn signature(&self, id: usize) -> WalkerSignature {
        let nf = self.frequency_count();
        let slot = id % nf;
        let frequency = if nf == 1 { 0.1 } else { 0.08 + 0.12 * slot as f64 / (nf - 1) as f64 };
        let narrow = (self.width / 5).max(2);
        let torso_width = if id < nf { narrow } else { 2 * narrow };
        let phase = TAU * ((id as f64 * 0.618_033_988_75) % 1.0);
        WalkerSignature { frequency, phase, torso_width }
    }
}

/// Horizontal foot displacement of the first leg at time `t`, in units of
/// the swing amplitude.
pub fn limb_offset(sig: &WalkerSignature, t: f64) -> f64 {
    (TAU * sig.frequency * t + sig.phase).sin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureSequence,
    pub masks: MaskSequence,
    pub identity: usize,
    /// Index of the sequence within its identity.
    pub sequence: usize,
    /// Unique across the dataset.
    pub sequence_id: usize,
    pub covariate: Covariate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticWalkerSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_ids(&self) -> usize {
        self.spec.num_ids
    }

    pub fn sample(&self, identity: usize, sequence: usize) -> &Sample {
        &self.samples[identity * self.spec.seqs_per_id + sequence]
    }
}

struct Layout {
    head_top: usize,
    torso_top: usize,
    hip: usize,
}

fn layout(h: usize) -> Layout {
    Layout { head_top: h / 32 + 1, torso_top: h * 5 / 32, hip: h * 9 / 16 }
}

/// Render one sequence. `t0` shifts the gait cycle, `cx` is the body
/// centre column.
fn render(
    spec: &SyntheticWalkerSpec,
    sig: &WalkerSignature,
    t0: f64,
    cx: usize,
    texture: &[f64],
) -> (Tensor4, Tensor4) {
    let (l, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let lay = layout(h);
    let amplitude = w as f64 / 8.0;
    let left = cx.saturating_sub(sig.torso_width / 2);
    let right = (left + sig.torso_width).min(w);
    let mut feat = Tensor4::zeros(l, h, w, c);
    let mut mask = Tensor4::zeros(l, h, w, 1);
    for f in 0..l {
        let swing = amplitude * limb_offset(sig, t0 + f as f64);
        let mut put = |y: usize, x: usize, part: f64| {
            mask.set(f, y, x, 0, 1.0);
            feat.set(f, y, x, 0, 1.0);
            feat.set(f, y, x, 1, part);
            for ch in 2..c {
                feat.set(f, y, x, ch, texture[((f * h + y) * w + x) * (c - 2) + ch - 2]);
            }
        };
        for y in lay.head_top..lay.torso_top {
            for x in cx.saturating_sub(1)..(cx + 1).min(w) {
                put(y, x, 1.0);
            }
        }
        for y in lay.torso_top..lay.hip {
            for x in left..right {
                put(y, x, 1.0);
            }
        }
        let leg_len = (h - lay.hip) as f64;
        for y in lay.hip..h {
            let reach = (y - lay.hip + 1) as f64 / leg_len;
            for sign in [1.0, -1.0] {
                let x = (cx as f64 + sign * swing * reach).round();
                let x = x.clamp(0.0, (w - 1) as f64) as usize;
                put(y, x, -1.0);
            }
        }
    }
    (feat, mask)
}

/// Deterministic in `spec.seed`; each sequence draws from its own stream so
/// changing one identity's count of sequences does not disturb the others.
pub fn synth_walkers(spec: &SyntheticWalkerSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let tex_len = spec.frames * h * w * (c - 2);
    let mut samples = Vec::with_capacity(spec.num_ids * spec.seqs_per_id);
    for id in 0..spec.num_ids {
        let sig = spec.signature(id);
        for s in 0..spec.seqs_per_id {
            let sequence_id = id * spec.seqs_per_id + s;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(sequence_id as u64);
            let covariate =
                if s + spec.recolored_per_id >= spec.seqs_per_id { Covariate::Recolored } else { Covariate::Clean };
            let t0 = rng.random_range(0.0..1.0) / sig.frequency;
            let cx = w / 2 + rng.random_range(0..3) - 1;
            let sigma = spec.texture_noise_level;
            let mut texture = vec![0.0; tex_len];
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let shift: Vec<f64> = match covariate {
                    Covariate::Clean => vec![0.0; c - 2],
                    Covariate::Recolored => (0..c - 2).map(|_| rng.random_range(-2.0..2.0) * sigma).collect(),
                };
                for (i, v) in texture.iter_mut().enumerate() {
                    *v = shift[i % (c - 2)] + normal.sample(&mut rng);
                }
            }
            let (feat, mask) = render(spec, &sig, t0, cx, &texture);
            let features = FeatureSequence::new(feat, format!("synth:id={id},seq={s}"))?;
            samples.push(Sample {
                features,
                masks: MaskSequence::new(mask)?,
                identity: id,
                sequence: s,
                sequence_id,
                covariate,
            });
        }
    }
    Ok(Dataset { spec: *spec, samples })
}
