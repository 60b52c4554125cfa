//! Run configuration: flat `key = value` text with `[section]` headers.
//!
//! Defaults follow the full-scale training recipe; the shipped desk profile
//! overrides sizes so everything runs on a laptop CPU. A resolved config
//! serializes canonically, and its content hash names the run directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Group(usize),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synth,
    Disk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub root: String,
    pub train_split: String,
    pub eval_split: String,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub tile: usize,
    pub stride: usize,
    pub synth_train: usize,
    pub synth_eval: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub photometric: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub norm: NormKind,
    pub leaky_act: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub gca: bool,
    pub lca: bool,
    pub cg_layer: usize,
    pub patches: (usize, usize),
    pub heads: usize,
    pub atb_scale: bool,
    pub atb_rotation: bool,
    pub atb_offset: bool,
    pub atb_leaky_slope: f64,
    pub tie_value_heads: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_main: f64,
    pub lambda_aux: f64,
    /// `all` supervises every pre-classifier; `deepest` only the global one.
    pub aux_all_stages: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub tta_scales: Vec<f64>,
    pub tta_flip: bool,
    pub tile: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub out_root: String,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            data: DataConfig {
                kind: DataKind::Synth,
                root: String::new(),
                train_split: "train".into(),
                eval_split: "val".into(),
                classes: 4,
                class_names: vec!["background".into(), "box".into(), "disc".into(), "bar".into()],
                tile: 512,
                stride: 512,
                synth_train: 50,
                synth_eval: 20,
                synth_size: 128,
                synth_seed: 7,
            },
            augment: AugmentConfig {
                flip_prob: 0.5,
                scale_min: 0.5,
                scale_max: 1.5,
                photometric: true,
            },
            encoder: EncoderConfig {
                channels: [256, 512, 1024, 2048],
                norm: NormKind::Group(8),
                leaky_act: false,
            },
            model: ModelConfig {
                width: 512,
                gca: true,
                lca: true,
                cg_layer: 4,
                patches: (4, 4),
                heads: 8,
                atb_scale: true,
                atb_rotation: true,
                atb_offset: true,
                atb_leaky_slope: 0.01,
                tie_value_heads: false,
            },
            loss: LossConfig {
                lambda_main: 1.0,
                lambda_aux: 0.8,
                aux_all_stages: true,
            },
            train: TrainSection {
                iterations: 80_000,
                batch: 8,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 0.0005,
                poly_power: 0.9,
                seed: 42,
                log_every: 50,
            },
            eval: EvalSection {
                tta_scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
                tta_flip: true,
                tile: 512,
                stride: 512,
            },
            out_root: "runs".into(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            msg: format!("not a boolean: {v}"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        msg: format!("cannot parse `{v}`"),
    })
}

fn parse_patches(key: &str, v: &str) -> Result<(usize, usize), ConfigError> {
    let (a, b) = v.split_once('x').ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        msg: format!("expected NhxNw, got `{v}`"),
    })?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

fn parse_norm(key: &str, v: &str) -> Result<NormKind, ConfigError> {
    if v == "none" {
        return Ok(NormKind::None);
    }
    if let Some(g) = v.strip_prefix("group") {
        return Ok(NormKind::Group(parse_num(key, g)?));
    }
    Err(ConfigError::BadValue {
        key: key.into(),
        msg: format!("expected none|group<N>, got `{v}`"),
    })
}

fn norm_str(n: NormKind) -> String {
    match n {
        NormKind::Group(g) => format!("group{g}"),
        NormKind::None => "none".into(),
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("nan") {
        s
    } else {
        format!("{s}.0")
    }
}

impl Config {
    /// Applies one `section.key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "data.kind" => {
                self.data.kind = match v {
                    "synth" => DataKind::Synth,
                    "disk" => DataKind::Disk,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("expected synth|disk, got `{v}`"),
                        })
                    }
                }
            }
            "data.root" => self.data.root = v.into(),
            "data.train_split" => self.data.train_split = v.into(),
            "data.eval_split" => self.data.eval_split = v.into(),
            "data.classes" => self.data.classes = parse_num(key, v)?,
            "data.class_names" => {
                self.data.class_names = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            "data.tile" => self.data.tile = parse_num(key, v)?,
            "data.stride" => self.data.stride = parse_num(key, v)?,
            "data.synth_train" => self.data.synth_train = parse_num(key, v)?,
            "data.synth_eval" => self.data.synth_eval = parse_num(key, v)?,
            "data.synth_size" => self.data.synth_size = parse_num(key, v)?,
            "data.synth_seed" => self.data.synth_seed = parse_num(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = parse_num(key, v)?,
            "augment.scale_min" => self.augment.scale_min = parse_num(key, v)?,
            "augment.scale_max" => self.augment.scale_max = parse_num(key, v)?,
            "augment.photometric" => self.augment.photometric = parse_bool(key, v)?,
            "encoder.channels" => {
                let parts: Vec<&str> = v.split(',').map(|s| s.trim()).collect();
                if parts.len() != 4 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        msg: "expected 4 comma-separated channel counts".into(),
                    });
                }
                for (i, p) in parts.iter().enumerate() {
                    self.encoder.channels[i] = parse_num(key, p)?;
                }
            }
            "encoder.norm" => self.encoder.norm = parse_norm(key, v)?,
            "encoder.act" => {
                self.encoder.leaky_act = match v {
                    "relu" => false,
                    "leaky_relu" => true,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("expected relu|leaky_relu, got `{v}`"),
                        })
                    }
                }
            }
            "model.width" => self.model.width = parse_num(key, v)?,
            "model.gca" => self.model.gca = parse_bool(key, v)?,
            "model.lca" => self.model.lca = parse_bool(key, v)?,
            "model.cg_layer" => self.model.cg_layer = parse_num(key, v)?,
            "model.patches" => self.model.patches = parse_patches(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.atb_scale" => self.model.atb_scale = parse_bool(key, v)?,
            "model.atb_rotation" => self.model.atb_rotation = parse_bool(key, v)?,
            "model.atb_offset" => self.model.atb_offset = parse_bool(key, v)?,
            "model.atb_leaky_slope" => self.model.atb_leaky_slope = parse_num(key, v)?,
            "model.tie_value_heads" => self.model.tie_value_heads = parse_bool(key, v)?,
            "loss.lambda_main" => self.loss.lambda_main = parse_num(key, v)?,
            "loss.lambda_aux" => self.loss.lambda_aux = parse_num(key, v)?,
            "loss.aux_scope" => {
                self.loss.aux_all_stages = match v {
                    "all" => true,
                    "deepest" => false,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("expected all|deepest, got `{v}`"),
                        })
                    }
                }
            }
            "train.iterations" => self.train.iterations = parse_num(key, v)?,
            "train.batch" => self.train.batch = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.momentum" => self.train.momentum = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.poly_power" => self.train.poly_power = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.log_every" => self.train.log_every = parse_num(key, v)?,
            "eval.tta_scales" => {
                let mut scales = Vec::new();
                for p in v.split(',') {
                    scales.push(parse_num(key, p.trim())?);
                }
                self.eval.tta_scales = scales;
            }
            "eval.tta_flip" => self.eval.tta_flip = parse_bool(key, v)?,
            "eval.tile" => self.eval.tile = parse_num(key, v)?,
            "eval.stride" => self.eval.stride = parse_num(key, v)?,
            "out.root" => self.out_root = v.into(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    /// Parses config text on top of the current values.
    pub fn merge(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        writeln!(s, "[data]").unwrap();
        writeln!(
            s,
            "kind = {}",
            match d.kind {
                DataKind::Synth => "synth",
                DataKind::Disk => "disk",
            }
        )
        .unwrap();
        writeln!(s, "root = {}", d.root).unwrap();
        writeln!(s, "train_split = {}", d.train_split).unwrap();
        writeln!(s, "eval_split = {}", d.eval_split).unwrap();
        writeln!(s, "classes = {}", d.classes).unwrap();
        writeln!(s, "class_names = {}", d.class_names.join(",")).unwrap();
        writeln!(s, "tile = {}", d.tile).unwrap();
        writeln!(s, "stride = {}", d.stride).unwrap();
        writeln!(s, "synth_train = {}", d.synth_train).unwrap();
        writeln!(s, "synth_eval = {}", d.synth_eval).unwrap();
        writeln!(s, "synth_size = {}", d.synth_size).unwrap();
        writeln!(s, "synth_seed = {}", d.synth_seed).unwrap();
        let a = &self.augment;
        writeln!(s, "\n[augment]").unwrap();
        writeln!(s, "flip_prob = {}", fmt_f64(a.flip_prob)).unwrap();
        writeln!(s, "scale_min = {}", fmt_f64(a.scale_min)).unwrap();
        writeln!(s, "scale_max = {}", fmt_f64(a.scale_max)).unwrap();
        writeln!(s, "photometric = {}", a.photometric).unwrap();
        let e = &self.encoder;
        writeln!(s, "\n[encoder]").unwrap();
        writeln!(
            s,
            "channels = {},{},{},{}",
            e.channels[0], e.channels[1], e.channels[2], e.channels[3]
        )
        .unwrap();
        writeln!(s, "norm = {}", norm_str(e.norm)).unwrap();
        writeln!(s, "act = {}", if e.leaky_act { "leaky_relu" } else { "relu" }).unwrap();
        let m = &self.model;
        writeln!(s, "\n[model]").unwrap();
        writeln!(s, "width = {}", m.width).unwrap();
        writeln!(s, "gca = {}", m.gca).unwrap();
        writeln!(s, "lca = {}", m.lca).unwrap();
        writeln!(s, "cg_layer = {}", m.cg_layer).unwrap();
        writeln!(s, "patches = {}x{}", m.patches.0, m.patches.1).unwrap();
        writeln!(s, "heads = {}", m.heads).unwrap();
        writeln!(s, "atb_scale = {}", m.atb_scale).unwrap();
        writeln!(s, "atb_rotation = {}", m.atb_rotation).unwrap();
        writeln!(s, "atb_offset = {}", m.atb_offset).unwrap();
        writeln!(s, "atb_leaky_slope = {}", fmt_f64(m.atb_leaky_slope)).unwrap();
        writeln!(s, "tie_value_heads = {}", m.tie_value_heads).unwrap();
        let l = &self.loss;
        writeln!(s, "\n[loss]").unwrap();
        writeln!(s, "lambda_main = {}", fmt_f64(l.lambda_main)).unwrap();
        writeln!(s, "lambda_aux = {}", fmt_f64(l.lambda_aux)).unwrap();
        writeln!(s, "aux_scope = {}", if l.aux_all_stages { "all" } else { "deepest" }).unwrap();
        let t = &self.train;
        writeln!(s, "\n[train]").unwrap();
        writeln!(s, "iterations = {}", t.iterations).unwrap();
        writeln!(s, "batch = {}", t.batch).unwrap();
        writeln!(s, "lr = {}", fmt_f64(t.lr)).unwrap();
        writeln!(s, "momentum = {}", fmt_f64(t.momentum)).unwrap();
        writeln!(s, "weight_decay = {}", fmt_f64(t.weight_decay)).unwrap();
        writeln!(s, "poly_power = {}", fmt_f64(t.poly_power)).unwrap();
        writeln!(s, "seed = {}", t.seed).unwrap();
        writeln!(s, "log_every = {}", t.log_every).unwrap();
        let ev = &self.eval;
        writeln!(s, "\n[eval]").unwrap();
        writeln!(
            s,
            "tta_scales = {}",
            ev.tta_scales.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        writeln!(s, "tta_flip = {}", ev.tta_flip).unwrap();
        writeln!(s, "tile = {}", ev.tile).unwrap();
        writeln!(s, "stride = {}", ev.stride).unwrap();
        writeln!(s, "\n[out]").unwrap();
        writeln!(s, "root = {}", self.out_root).unwrap();
        s
    }

    /// Short content hash identifying the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.data.classes < 2 {
            return fail(format!("data.classes must be >= 2, got {}", self.data.classes));
        }
        if self.data.tile == 0 || self.data.stride == 0 {
            return fail("data.tile and data.stride must be positive".into());
        }
        if self.data.tile % 32 != 0 {
            return fail(format!("data.tile must be a multiple of 32, got {}", self.data.tile));
        }
        if !self.data.class_names.is_empty() && self.data.class_names.len() != self.data.classes {
            return fail(format!(
                "{} class names for {} classes",
                self.data.class_names.len(),
                self.data.classes
            ));
        }
        if self.model.patches.0 == 0 || self.model.patches.1 == 0 {
            return fail("model.patches must be at least 1x1".into());
        }
        if self.model.heads == 0 {
            return fail("model.heads must be positive".into());
        }
        if !(1..=4).contains(&self.model.cg_layer) {
            return fail(format!("model.cg_layer must be 1..=4, got {}", self.model.cg_layer));
        }
        // Attention splits the stage channel width across heads.
        let c_top = self.encoder.channels[3];
        if self.model.width % self.model.heads != 0 || c_top % self.model.heads != 0 {
            return fail(format!(
                "model.heads {} must divide model.width {} and encoder stage-4 channels {c_top}",
                self.model.heads, self.model.width
            ));
        }
        if self.loss.lambda_main < 0.0 || self.loss.lambda_aux < 0.0 {
            return fail("loss weights must be nonnegative".into());
        }
        if self.train.iterations == 0 && self.train.batch == 0 {
            return fail("train.batch must be positive".into());
        }
        if self.train.batch == 0 {
            return fail("train.batch must be positive".into());
        }
        if !(self.train.poly_power > 0.0) {
            return fail("train.poly_power must be positive".into());
        }
        for &s in &self.eval.tta_scales {
            if !(0.5..=1.5).contains(&s) {
                return fail(format!("eval.tta_scales entries must lie in [0.5, 1.5], got {s}"));
            }
        }
        if self.eval.tta_scales.is_empty() {
            return fail("eval.tta_scales must not be empty".into());
        }
        if self.eval.tile == 0 || self.eval.stride == 0 {
            return fail("eval.tile and eval.stride must be positive".into());
        }
        Ok(())
    }

    /// Keys recognised by [`Config::set`], for diagnostics.
    pub fn known_keys() -> BTreeSet<&'static str> {
        [
            "data.kind", "data.root", "data.train_split", "data.eval_split", "data.classes",
            "data.class_names", "data.tile", "data.stride", "data.synth_train", "data.synth_eval",
            "data.synth_size", "data.synth_seed", "augment.flip_prob", "augment.scale_min",
            "augment.scale_max", "augment.photometric", "encoder.channels", "encoder.norm",
            "encoder.act", "model.width", "model.gca", "model.lca", "model.cg_layer",
            "model.patches", "model.heads", "model.atb_scale", "model.atb_rotation",
            "model.atb_offset", "model.atb_leaky_slope", "model.tie_value_heads",
            "loss.lambda_main", "loss.lambda_aux", "loss.aux_scope", "train.iterations",
            "train.batch", "train.lr", "train.momentum", "train.weight_decay",
            "train.poly_power", "train.seed", "train.log_every", "eval.tta_scales",
            "eval.tta_flip", "eval.tile", "eval.stride", "out.root",
        ]
        .into_iter()
        .collect()
    }

    /// The desk profile: small encoder and synthetic data sized for CPU runs.
    pub fn desk() -> Config {
        let mut cfg = Config::default();
        let desk = "\
[data]
kind = synth
classes = 4
class_names = background,box,disc,bar
tile = 128
stride = 128
synth_train = 50
synth_eval = 20
synth_size = 128
synth_seed = 7

[encoder]
channels = 24,32,64,96

[model]
width = 64

[train]
iterations = 1200
batch = 4
lr = 0.01
log_every = 25

[eval]
tta_scales = 1.0
tta_flip = false
tile = 128
stride = 128
";
        cfg.merge(desk).expect("desk profile is valid");
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let cfg = Config::default();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 0.0005);
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.train.iterations, 80_000);
        assert_eq!(cfg.model.patches, (4, 4));
        assert_eq!(cfg.model.heads, 8);
        assert_eq!(cfg.loss.lambda_aux, 0.8);
        assert_eq!(cfg.loss.lambda_main, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn roundtrip_is_stable() {
        let cfg = Config::desk();
        let text = cfg.serialize();
        let back = Config::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn overrides_change_hash_and_value() {
        let mut cfg = Config::desk();
        let h0 = cfg.hash();
        cfg.set("model.patches", "8x8").unwrap();
        assert_eq!(cfg.model.patches, (8, 8));
        assert_ne!(cfg.hash(), h0);
        assert!(cfg.serialize().contains("patches = 8x8"));
    }

    #[test]
    fn unknown_key_and_bad_values_are_rejected() {
        let mut cfg = Config::default();
        assert!(matches!(
            cfg.set("model.nope", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(cfg.set("train.lr", "fast").is_err());
        assert!(cfg.set("model.patches", "44").is_err());
        assert!(Config::parse("squiggle").is_err());
    }

    #[test]
    fn validate_rejects_bad_combinations() {
        let mut cfg = Config::desk();
        cfg.data.classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::desk();
        cfg.model.heads = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::desk();
        cfg.eval.tta_scales = vec![2.0];
        assert!(cfg.validate().is_err());
        let mut cfg = Config::desk();
        cfg.data.tile = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let text = "
# full line comment
[train]
lr = 0.02   # trailing comment
  seed =  9
";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.train.seed, 9);
    }
}
