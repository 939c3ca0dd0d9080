//! Flat `key = value` configuration with `arch.`, `aug.`, `loss.` and
//! `probe.` sections. Later sources override earlier ones: preset, file,
//! then command-line overrides.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{MaskFill, DEFAULT_ERF_THRESHOLDS, DEFAULT_MASK_FRACTIONS};
use crate::rfnet::{Base, BlockKind};
use crate::trainer::{DatasetFormat, EvalLayer, LrSchedule, OptimizerKind, TauSchedule, TrainConfig};

/// Settings of the analysis probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mask_fractions: Vec<f64>,
    pub mask_fill: MaskFill,
    pub epsilon: f64,
    /// `gamma = epsilon / gamma_div`.
    pub gamma_div: f64,
    pub iters: usize,
    /// Image pairs sampled for the similarity correlation.
    pub pairs: usize,
    pub erf_thresholds: Vec<f64>,
    /// Grid stride between probed cells.
    pub erf_stride: usize,
    /// Test images used by the ERF and similarity probes.
    pub images: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mask_fractions: DEFAULT_MASK_FRACTIONS.to_vec(),
            mask_fill: MaskFill::Renormalize,
            epsilon: 0.03,
            gamma_div: 10.0,
            iters: 5,
            pairs: 2000,
            erf_thresholds: DEFAULT_ERF_THRESHOLDS.to_vec(),
            erf_stride: 2,
            images: 64,
        }
    }
}

/// Training and probe settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = match name {
            "toy" => TrainConfig::toy(),
            "desk" => TrainConfig::desk(),
            other => return Err(Error::config("preset", format!("unknown preset `{other}`; expected `toy` or `desk`"))),
        };
        Ok(RunConfig { train, probe: ProbeConfig::default() })
    }

    /// Every key with its current value, one `key = value` line each, in
    /// registry order. Parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        FIELDS.iter().map(|f| format!("{} = {}\n", f.key, (f.get)(self))).collect()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok((field(key)?.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = field(key)?;
        (f.set)(self, value.trim()).map_err(|m| Error::config(f.key, m))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.dataset.format != DatasetFormat::Synthetic && self.train.dataset.path.as_os_str().is_empty() {
            return Err(Error::config("dataset.path", "required for non-synthetic datasets"));
        }
        let p = &self.probe;
        if let Some(f) = p.mask_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return Err(Error::config("probe.mask_fractions", format!("{f} is outside [0, 1)")));
        }
        if !(p.epsilon >= 0.0 && p.epsilon.is_finite()) {
            return Err(Error::config("probe.epsilon", "must be a non-negative number"));
        }
        if !(p.gamma_div >= 1.0) {
            return Err(Error::config("probe.gamma_div", "must be at least 1 so that gamma ≤ epsilon"));
        }
        if p.iters == 0 {
            return Err(Error::config("probe.iters", "must be positive"));
        }
        if let Some(t) = p.erf_thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::config("probe.erf_thresholds", format!("{t} is outside [0, 1)")));
        }
        if p.erf_stride == 0 {
            return Err(Error::config("probe.erf_stride", "must be positive"));
        }
        Ok(())
    }
}

/// A resolved configuration and the keys set explicitly by a file or
/// override.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped; a
/// `preset` key, if present, must come first.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim().to_string();
        if !seen.insert(k.clone()) {
            return Err(Error::config(k, format!("set twice (again on line {})", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Start from the `toy` preset (or the file's `preset`), apply the file's
/// entries, then `overrides` in order.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ParsedConfig> {
    let mut entries = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
            parse_text(&text)?
        }
        None => Vec::new(),
    };
    entries.extend(overrides.iter().cloned());
    resolve(&entries)
}

/// Apply `entries` over the chosen preset.
pub fn resolve(entries: &[(String, String)]) -> Result<ParsedConfig> {
    let preset = entries.iter().rev().find(|(k, _)| normalize(k) == "preset").map(|(_, v)| v.as_str());
    let mut config = RunConfig::preset(preset.unwrap_or("toy"))?;
    let mut explicit = BTreeSet::new();
    for (k, v) in entries {
        if normalize(k) == "preset" {
            continue;
        }
        let key = resolve_key(k)?;
        config.set(key, v)?;
        explicit.insert(key.to_string());
    }
    config.validate()?;
    Ok(ParsedConfig { config, explicit })
}

fn normalize(key: &str) -> String {
    key.trim().trim_start_matches("--").replace(['.', '_'], "-")
}

/// Map a key or kebab-case flag to its canonical key. A full key matches
/// first; otherwise the last segment must identify a unique key.
pub fn resolve_key(name: &str) -> Result<&'static str> {
    let want = normalize(name);
    if let Some(f) = FIELDS.iter().find(|f| normalize(f.key) == want) {
        return Ok(f.key);
    }
    let leaf: Vec<&Field> = FIELDS.iter().filter(|f| normalize(leaf_of(f.key)) == want).collect();
    match leaf.as_slice() {
        [only] => Ok(only.key),
        [] => Err(Error::config(name, format!("unknown key; did you mean `{}`?", nearest_key(name)))),
        many => Err(Error::config(
            name,
            format!("ambiguous; use one of {}", many.iter().map(|f| format!("`{}`", f.key)).collect::<Vec<_>>().join(", ")),
        )),
    }
}

fn leaf_of(key: &str) -> &str {
    key.rsplit('.').next().unwrap_or(key)
}

/// Registered key closest to `name` by edit distance, comparing against
/// both full keys and their last segment.
pub fn nearest_key(name: &str) -> &'static str {
    let want = normalize(name);
    FIELDS
        .iter()
        .min_by_key(|f| {
            let full = strsim::levenshtein(&want, &normalize(f.key));
            let leaf = strsim::levenshtein(&want, &normalize(leaf_of(f.key)));
            full.min(leaf)
        })
        .map(|f| f.key)
        .expect("registry is not empty")
}

/// All registered keys in order.
pub fn keys() -> Vec<&'static str> {
    FIELDS.iter().map(|f| f.key).collect()
}

/// Text form of one config value.
trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e| format!("expected {what}, got `{s}` ({e})"))
}

impl Value for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_num(s, "a non-negative integer")
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_num(s, "a non-negative integer")
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = parse_num(s, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("expected a finite number, got `{s}`"))
        }
    }
    fn show(&self) -> String {
        // Shortest round-trip form.
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(format!("expected true or false, got `{s}`")),
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some).map_err(|e| format!("{e}, or `none`"))
        }
    }
    fn show(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
}

impl<T: Value + Copy + Default, const N: usize> Value for [T; N] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<T>::parse_value(s)?;
        if v.len() != N {
            return Err(format!("expected {N} comma-separated values, got {}", v.len()));
        }
        let mut out = [T::default(); N];
        out.copy_from_slice(&v);
        Ok(out)
    }
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(",")
    }
}

macro_rules! named_value {
    ($ty:ty, [$($name:literal => $variant:expr),+ $(,)?]) => {
        impl Value for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                let s = s.replace('_', "-");
                match s.as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of {}, got `{s}`", [$($name),+].join(", "))),
                }
            }
            fn show(&self) -> String {
                $(if *self == $variant { return $name.to_string(); })+
                unreachable!()
            }
        }
    };
}

named_value!(Base, ["rf-resnet18" => Base::RfResnet18, "rf-resnet50" => Base::RfResnet50, "resnet-reference" => Base::ResnetReference]);
named_value!(BlockKind, ["basic" => BlockKind::Basic, "bottleneck" => BlockKind::Bottleneck]);
named_value!(DatasetFormat, ["cifar" => DatasetFormat::Cifar, "image-folder" => DatasetFormat::ImageFolder, "synthetic" => DatasetFormat::Synthetic]);
named_value!(LrSchedule, ["cosine-warmup" => LrSchedule::CosineWarmup, "constant" => LrSchedule::Constant]);
named_value!(OptimizerKind, ["sgd" => OptimizerKind::SgdMomentum, "lars" => OptimizerKind::Lars]);
named_value!(TauSchedule, ["cosine" => TauSchedule::CosineToOne, "constant" => TauSchedule::Constant]);
named_value!(EvalLayer, ["patch" => EvalLayer::Patch, "post-mlp" => EvalLayer::PostMlp]);
named_value!(MaskFill, ["renormalize" => MaskFill::Renormalize, "zero-fill" => MaskFill::ZeroFill]);

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! fields {
    ($($key:literal => $($path:ident).+;)+) => {
        &[$(Field {
            key: $key,
            get: |c| Value::show(&c.$($path).+),
            set: |c, s| {
                c.$($path).+ = Value::parse_value(s)?;
                Ok(())
            },
        },)+]
    };
}

static FIELDS: &[Field] = fields! {
    "dataset.format" => train.dataset.format;
    "dataset.path" => train.dataset.path;
    "dataset.synthetic_train" => train.dataset.synthetic_train;
    "dataset.synthetic_test" => train.dataset.synthetic_test;
    "dataset.synthetic_seed" => train.dataset.synthetic_seed;
    "epochs" => train.epochs;
    "batch_size" => train.batch_size;
    "seed" => train.seed;
    "base_lr" => train.base_lr;
    "lr_schedule" => train.lr_schedule;
    "optimizer" => train.optimizer;
    "momentum" => train.momentum;
    "weight_decay" => train.weight_decay;
    "checkpoint_every" => train.checkpoint_every;
    "arch.base" => train.arch.base;
    "arch.keep_maxpool" => train.arch.keep_maxpool;
    "arch.strides" => train.arch.strides;
    "arch.blocks" => train.arch.blocks;
    "arch.block_kind" => train.arch.block_kind;
    "arch.width" => train.arch.width;
    "arch.small_image_stem" => train.arch.small_image_stem;
    "arch.post_pool_mlp" => train.arch.post_pool_mlp;
    "aug.c_min" => train.policy.c_min;
    "aug.flip_prob" => train.policy.flip_prob;
    "aug.jitter_prob" => train.policy.jitter.prob;
    "aug.brightness" => train.policy.jitter.brightness;
    "aug.contrast" => train.policy.jitter.contrast;
    "aug.saturation" => train.policy.jitter.saturation;
    "aug.hue" => train.policy.jitter.hue;
    "aug.grayscale_prob" => train.policy.grayscale_prob;
    "aug.blur_prob" => train.policy.blur_prob;
    "aug.solarize_prob" => train.policy.solarize_prob;
    "aug.output_size" => train.policy.output_size;
    "loss.w_s" => train.w_s;
    "loss.tau" => train.tau;
    "loss.tau_schedule" => train.tau_schedule;
    "loss.local_cells" => train.local_cells;
    "loss.hidden" => train.heads.hidden;
    "loss.out" => train.heads.out;
    "loss.projector_depth" => train.heads.projector_depth;
    "loss.shared_local_heads" => train.heads.shared_local_heads;
    "probe.lr" => train.probe_lr;
    "probe.eval_layer" => train.eval_layer;
    "probe.mask_fractions" => probe.mask_fractions;
    "probe.mask_fill" => probe.mask_fill;
    "probe.epsilon" => probe.epsilon;
    "probe.gamma_div" => probe.gamma_div;
    "probe.iters" => probe.iters;
    "probe.pairs" => probe.pairs;
    "probe.erf_thresholds" => probe.erf_thresholds;
    "probe.erf_stride" => probe.erf_stride;
    "probe.images" => probe.images;
};

fn field(key: &str) -> Result<&'static Field> {
    FIELDS
        .iter()
        .find(|f| f.key == key)
        .ok_or_else(|| Error::config(key, format!("unknown key; did you mean `{}`?", nearest_key(key))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn text_round_trip() {
        for preset in ["toy", "desk"] {
            let c = RunConfig::preset(preset).unwrap();
            let entries = parse_text(&format!("preset = {preset}\n{}", c.to_text())).unwrap();
            assert_eq!(resolve(&entries).unwrap().config, c);
        }
    }

    #[test]
    fn keys_and_flags_resolve() {
        assert_eq!(resolve_key("--w-s").unwrap(), "loss.w_s");
        assert_eq!(resolve_key("--probe-lr").unwrap(), "probe.lr");
        assert_eq!(resolve_key("arch.width").unwrap(), "arch.width");
        assert_eq!(resolve_key("--gamma-div").unwrap(), "probe.gamma_div");
        let err = resolve_key("ws").unwrap_err().to_string();
        assert!(err.contains("loss.w_s"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = resolve(&kv(&[("epochs", "many")])).unwrap_err().to_string();
        assert!(err.contains("`epochs`") && err.contains("integer"), "{err}");
        let err = resolve(&kv(&[("arch.strides", "1,2")])).unwrap_err().to_string();
        assert!(err.contains("arch.strides") && err.contains("3"), "{err}");
        let err = resolve(&kv(&[("dataset.format", "cifar")])).unwrap_err().to_string();
        assert!(err.contains("dataset.path"), "{err}");
        assert!(parse_text("epochs = 1\nepochs = 2").is_err());
        assert!(parse_text("epochs 1").is_err());
    }
}
