//! Flat `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors.

use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::head::FusionMode;
use crate::matching::TextureSuppression;
use crate::model::ModelConfig;
use crate::synth::SyntheticWalkerSpec;
use crate::train::TrainConfig;

/// Parse lines into ordered `(key, value)` pairs.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::config(format!("line {}: bad key `{k}`", i + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub const MODEL_KEYS: &[&str] = &[
    "in_channels",
    "channels",
    "encoder_kernel",
    "encoder_depth",
    "delta_h",
    "delta_w",
    "delta_l",
    "fusion_dim",
    "backbone_dim",
    "head_kernel",
    "strips",
    "embed_dim",
    "num_classes",
    "margin",
    "fusion",
    "background_removal",
    "suppression",
    "suppress_m",
    "suppress_p",
    "encoder_gain",
];

/// Apply one model key; returns `false` if the key is not a model key.
fn apply_model_key(cfg: &mut ModelConfig, sup: &mut (bool, f64, f64), key: &str, value: &str) -> Result<bool> {
    match key {
        "in_channels" => cfg.in_channels = num(key, value)?,
        "channels" => cfg.channels = num(key, value)?,
        "encoder_kernel" => cfg.encoder_kernel = num(key, value)?,
        "encoder_depth" => cfg.encoder_depth = num(key, value)?,
        "delta_h" => cfg.delta_h = num(key, value)?,
        "delta_w" => cfg.delta_w = num(key, value)?,
        "delta_l" => cfg.delta_l = num(key, value)?,
        "fusion_dim" => cfg.fusion_dim = num(key, value)?,
        "backbone_dim" => cfg.backbone_dim = num(key, value)?,
        "head_kernel" => cfg.head_kernel = num(key, value)?,
        "strips" => cfg.strips = num(key, value)?,
        "embed_dim" => cfg.embed_dim = num(key, value)?,
        "num_classes" => cfg.num_classes = num(key, value)?,
        "margin" => cfg.triplet_margin = num(key, value)?,
        "fusion" => {
            cfg.mode = FusionMode::parse(value)
                .ok_or_else(|| Error::config(format!("`fusion`: expected both, static or dynamic, got `{value}`")))?
        }
        "background_removal" => cfg.background_removal = boolean(key, value)?,
        "suppression" => sup.0 = boolean(key, value)?,
        "suppress_m" => sup.1 = num(key, value)?,
        "suppress_p" => sup.2 = num(key, value)?,
        "encoder_gain" => cfg.encoder_gain = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn suppression_state(cfg: &ModelConfig) -> (bool, f64, f64) {
    let s = cfg.suppression.unwrap_or_default();
    (cfg.suppression.is_some(), s.threshold, s.probability)
}

fn finish_model(mut cfg: ModelConfig, sup: (bool, f64, f64)) -> Result<ModelConfig> {
    cfg.suppression = if sup.0 { Some(TextureSuppression::new(sup.1, sup.2)?) } else { None };
    cfg.validate()?;
    Ok(cfg)
}

/// Render every model key, one per line, in [`MODEL_KEYS`] order.
pub fn model_config_text(cfg: &ModelConfig) -> String {
    let (on, m, p) = suppression_state(cfg);
    format!(
        "in_channels = {}\nchannels = {}\nencoder_kernel = {}\nencoder_depth = {}\n\
         delta_h = {}\ndelta_w = {}\ndelta_l = {}\nfusion_dim = {}\nbackbone_dim = {}\n\
         head_kernel = {}\nstrips = {}\nembed_dim = {}\nnum_classes = {}\nmargin = {}\n\
         fusion = {}\nbackground_removal = {}\nsuppression = {}\nsuppress_m = {}\nsuppress_p = {}\n\
         encoder_gain = {}\n",
        cfg.in_channels,
        cfg.channels,
        cfg.encoder_kernel,
        cfg.encoder_depth,
        cfg.delta_h,
        cfg.delta_w,
        cfg.delta_l,
        cfg.fusion_dim,
        cfg.backbone_dim,
        cfg.head_kernel,
        cfg.strips,
        cfg.embed_dim,
        cfg.num_classes,
        cfg.triplet_margin,
        cfg.mode.name(),
        cfg.background_removal,
        on,
        m,
        p,
        cfg.encoder_gain
    )
}

/// Parse a model configuration; keys not given keep the defaults of
/// [`ModelConfig::new`].
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(1);
    let mut sup = suppression_state(&cfg);
    for (k, v) in parse_key_values(text)? {
        if !apply_model_key(&mut cfg, &mut sup, &k, &v)? {
            return Err(Error::config(format!("unknown model key `{k}`")));
        }
    }
    finish_model(cfg, sup)
}

/// Everything `train` needs: optimisation settings, the synthetic dataset
/// and the split.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: SyntheticWalkerSpec,
    pub split: SplitSpec,
}

impl RunConfig {
    /// The desk-scale setup: 8 identities × 6 sequences × 20 frames of
    /// 32×16×4 synthetic walkers, with a small model.
    pub fn toy() -> Self {
        let dataset = SyntheticWalkerSpec { texture_noise_level: 0.3, ..SyntheticWalkerSpec::default() };
        let model = ModelConfig {
            in_channels: dataset.channels,
            channels: 4,
            delta_h: 2,
            delta_w: 2,
            fusion_dim: 4,
            backbone_dim: 8,
            embed_dim: 16,
            ..ModelConfig::new(dataset.num_ids)
        };
        let train = TrainConfig {
            steps: 1500,
            lr: 0.1,
            momentum: 0.9,
            grad_clip: 2.0,
            milestones: vec![1125],
            batch_ids: 8,
            batch_seqs: 2,
            clip_len: 6,
            ..TrainConfig::new(model)
        };
        RunConfig { train, dataset, split: SplitSpec::standard(dataset.seqs_per_id).expect("6 sequences") }
    }

    /// Render as a config file that [`parse_run_config`] reads back to the
    /// same value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = format!(
            "dataset = synth:{}\nsplit_train = {}\nsplit_gallery = {}\nsplit_probe = {}\n\
             seed = {}\nsteps = {}\nlr = {}\nweight_decay = {}\nmomentum = {}\ngrad_clip = {}\n\
             milestones = {}\nlr_gamma = {}\nbatch_ids = {}\nbatch_seqs = {}\nclip_len = {}\n",
            self.dataset.to_spec_string(),
            join_list(&self.split.train),
            join_list(&self.split.gallery),
            join_list(&self.split.probe),
            t.seed,
            t.steps,
            t.lr,
            t.weight_decay,
            t.momentum,
            t.grad_clip,
            join_list(&t.milestones),
            t.lr_gamma,
            t.batch_ids,
            t.batch_seqs,
            t.clip_len
        );
        out.push_str(&model_config_text(&t.model));
        out
    }
}

/// Strip the `synth:` prefix and parse the dataset spec.
pub fn parse_dataset(value: &str) -> Result<SyntheticWalkerSpec> {
    let spec = value
        .strip_prefix("synth:")
        .ok_or_else(|| Error::config(format!("dataset must be `synth:<spec>`, got `{value}`")))?;
    SyntheticWalkerSpec::parse(spec)
}

/// Parse a training config. Unset keys start from [`RunConfig::toy`];
/// `in_channels` and `num_classes` follow the dataset unless given.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let pairs = parse_key_values(text)?;
    let mut run = RunConfig::toy();
    let mut model = run.train.model;
    let mut sup = suppression_state(&model);
    let (mut in_set, mut classes_set, mut split_set) = (false, false, false);
    for (k, v) in &pairs {
        let (k, v) = (k.as_str(), v.as_str());
        let t = &mut run.train;
        match k {
            "dataset" => run.dataset = parse_dataset(v)?,
            "split_train" => (run.split.train, split_set) = (list(k, v)?, true),
            "split_gallery" => (run.split.gallery, split_set) = (list(k, v)?, true),
            "split_probe" => (run.split.probe, split_set) = (list(k, v)?, true),
            "seed" => t.seed = num(k, v)?,
            "steps" => t.steps = num(k, v)?,
            "lr" => t.lr = num(k, v)?,
            "weight_decay" => t.weight_decay = num(k, v)?,
            "momentum" => t.momentum = num(k, v)?,
            "grad_clip" => t.grad_clip = num(k, v)?,
            "milestones" => t.milestones = list(k, v)?,
            "lr_gamma" => t.lr_gamma = num(k, v)?,
            "batch_ids" => t.batch_ids = num(k, v)?,
            "batch_seqs" => t.batch_seqs = num(k, v)?,
            "clip_len" => t.clip_len = num(k, v)?,
            _ => {
                in_set |= k == "in_channels";
                classes_set |= k == "num_classes";
                if !apply_model_key(&mut model, &mut sup, k, v)? {
                    return Err(Error::config(format!("unknown config key `{k}`")));
                }
            }
        }
    }
    if !in_set {
        model.in_channels = run.dataset.channels;
    }
    if !classes_set {
        model.num_classes = run.dataset.num_ids;
    }
    if !split_set {
        run.split = SplitSpec::standard(run.dataset.seqs_per_id)?;
    }
    run.train.model = finish_model(model, sup)?;
    run.train.validate()?;
    run.split.validate(run.dataset.seqs_per_id)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_handle_comments_and_reject_junk() {
        let kv = parse_key_values("# header\n a = 1 \n\nb=two # trailing\n").unwrap();
        assert_eq!(kv, [("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("just words").is_err());
        assert!(parse_key_values("two words = 1").is_err());
    }

    #[test]
    fn run_config_round_trips() {
        let mut run = RunConfig::toy();
        run.train.seed = 7;
        run.train.model.mode = FusionMode::DynamicOnly;
        run.train.model.suppression = None;
        assert_eq!(parse_run_config(&run.to_text()).unwrap(), run);
        assert_eq!(parse_run_config("").unwrap(), RunConfig::toy());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(parse_run_config("learning_rate = 0.1"), Err(Error::Config(_))));
        assert!(parse_run_config("lr = fast").is_err());
        assert!(parse_run_config("fusion = sideways").is_err());
        assert!(parse_run_config("suppress_p = 2").is_err());
        assert!(parse_run_config("dataset = ids=8").is_err());
        assert!(parse_run_config("split_probe = 9").is_err());
        assert!(parse_run_config("clip_len = 1").is_err());
    }

    #[test]
    fn dataset_drives_channels_and_classes() {
        let run = parse_run_config("dataset = synth:ids=5,c=3\n").unwrap();
        assert_eq!((run.train.model.in_channels, run.train.model.num_classes), (3, 5));
        assert!(parse_run_config("dataset = synth:ids=5\nnum_classes = 3\nbatch_ids = 2").is_ok());
    }

    #[test]
    fn model_config_text_round_trips() {
        let cfg = RunConfig::toy().train.model;
        assert_eq!(parse_model_config(&model_config_text(&cfg)).unwrap(), cfg);
        assert!(parse_model_config("steps = 3").is_err());
    }
}
