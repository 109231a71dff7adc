//! Run configuration: a flat dotted-key JSON file merged with command-line
//! overrides; the fully resolved view is echoed next to every run's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::data::{AugmentPolicy, DatasetSpec, DefectShape, TextureKind};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::perceptual::{ErrorMapSource, ExtractorKind};
use crate::seeding::derive_seed;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': expected {expected}, got {got}")]
    BadValue {
        key: String,
        expected: &'static str,
        got: String,
    },
    #[error("config file {path}: {reason}")]
    File { path: PathBuf, reason: String },
}

/// Evaluation options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub distance: ErrorMapSource,
    pub pixel_per_image: bool,
    pub extractor_kind: ExtractorKind,
    pub extractor_seed: u64,
    pub extractor_depth: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            distance: ErrorMapSource::MsePd,
            pixel_per_image: false,
            extractor_kind: ExtractorKind::RandomConvPyramid,
            extractor_seed: 7,
            extractor_depth: 3,
        }
    }
}

/// Merged view of every subsystem configuration. All randomness flows from
/// `seed`; subsystem seeds are derived by stable hashing of (seed, name).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DatasetSpec,
    pub eval: EvalOptions,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub category: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data: DatasetSpec::default(),
            eval: EvalOptions::default(),
            seed: 7,
            output_dir: PathBuf::from("out"),
            threads: 1,
            category: "synthetic".into(),
        }
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, ConfigError> {
    v.as_u64().map(|u| u as usize).ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        expected: "non-negative integer",
        got: v.to_string(),
    })
}

fn as_u64(key: &str, v: &Value) -> Result<u64, ConfigError> {
    v.as_u64().ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        expected: "non-negative integer",
        got: v.to_string(),
    })
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    v.as_f64().ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        expected: "number",
        got: v.to_string(),
    })
}

fn as_bool(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        expected: "boolean",
        got: v.to_string(),
    })
}

fn as_str<'v>(key: &str, v: &'v Value) -> Result<&'v str, ConfigError> {
    v.as_str().ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        expected: "string",
        got: v.to_string(),
    })
}

impl RunConfig {
    /// Apply one dotted key. Every supported key appears in
    /// [`RunConfig::to_flat`], which doubles as the documentation of record.
    pub fn apply(&mut self, key: &str, v: &Value) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(as_str(key, v)?),
            "threads" => self.threads = as_usize(key, v)?.max(1),
            "category" => self.category = as_str(key, v)?.to_string(),

            "model.input_size" => {
                let s = as_usize(key, v)?;
                self.model.input_size = (s, s);
            }
            "model.channels" => self.model.channels = as_usize(key, v)?,
            "model.downsample_layers" => self.model.downsample_layers = as_usize(key, v)?,
            "model.residual_blocks" => self.model.residual_blocks = as_usize(key, v)?,
            "model.latent_dim" => self.model.latent_dim = as_usize(key, v)?,
            "model.memory_slots" => self.model.memory_slots = as_usize(key, v)?,
            "model.top_k" => self.model.addressing.k = as_usize(key, v)?,
            "model.sparse_addressing" => self.model.addressing.sparse_enabled = as_bool(key, v)?,
            "model.delta2" => self.model.trust.delta2 = as_f64(key, v)?,
            "model.trust_region" => self.model.trust.enabled = as_bool(key, v)?,
            "model.base_width" => self.model.base_width = as_usize(key, v)?,
            "model.memory_enabled" => self.model.memory_enabled = as_bool(key, v)?,

            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.lr" => self.train.lr = as_f64(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = as_f64(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = as_f64(key, v)?,
            "train.adam_eps" => self.train.adam_eps = as_f64(key, v)?,
            "train.grad_clip" => self.train.grad_clip = as_f64(key, v)?,
            "train.trust_warmup_epochs" => self.train.trust_warmup_epochs = as_usize(key, v)?,
            "train.augment_hflip" => self.train.augment.hflip = as_bool(key, v)?,
            "train.augment_vflip" => self.train.augment.vflip = as_bool(key, v)?,
            "train.augment_rot90" => self.train.augment.rot90 = as_bool(key, v)?,

            "loss.lambda_rec" => self.loss.lambda_rec = as_f64(key, v)?,
            "loss.lambda_sm" => self.loss.lambda_sm = as_f64(key, v)?,
            "loss.lambda_margin" => self.loss.lambda_margin = as_f64(key, v)?,
            "loss.lambda_trust" => self.loss.lambda_trust = as_f64(key, v)?,
            "loss.ssim_window" => self.loss.ssim_window = as_usize(key, v)?,
            "loss.ssim_c1" => self.loss.ssim_c1 = as_f64(key, v)?,
            "loss.ssim_c2" => self.loss.ssim_c2 = as_f64(key, v)?,

            "data.texture" => {
                self.data.texture_kind = match as_str(key, v)? {
                    "stripes" => TextureKind::Stripes,
                    "checker" => TextureKind::Checker,
                    "bandlimited_noise" => TextureKind::BandlimitedNoise,
                    "blobs" => TextureKind::Blobs,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            expected: "stripes|checker|bandlimited_noise|blobs",
                            got: other.into(),
                        })
                    }
                }
            }
            "data.image_size" => {
                let s = as_usize(key, v)?;
                self.data.image_size = (s, s);
            }
            "data.channels" => self.data.channels = as_usize(key, v)?,
            "data.n_train" => self.data.n_train = as_usize(key, v)?,
            "data.n_test_normal" => self.data.n_test_normal = as_usize(key, v)?,
            "data.n_test_defective" => self.data.n_test_defective = as_usize(key, v)?,
            "data.noise_fraction" => self.data.noise_fraction = as_f64(key, v)?,
            "data.defect_min_size" => self.data.defect_size.0 = as_usize(key, v)?,
            "data.defect_max_size" => self.data.defect_size.1 = as_usize(key, v)?,
            "data.defect_min_contrast" => self.data.defect_contrast.0 = as_f64(key, v)?,
            "data.defect_max_contrast" => self.data.defect_contrast.1 = as_f64(key, v)?,
            "data.defect_shapes" => {
                let mut shapes = Vec::new();
                for part in as_str(key, v)?.split(',').filter(|s| !s.is_empty()) {
                    shapes.push(match part {
                        "blob" => DefectShape::Blob,
                        "scratch" => DefectShape::Scratch,
                        "discoloration" => DefectShape::Discoloration,
                        other => {
                            return Err(ConfigError::BadValue {
                                key: key.into(),
                                expected: "blob|scratch|discoloration list",
                                got: other.into(),
                            })
                        }
                    });
                }
                self.data.defect_shapes = shapes;
            }

            "eval.distance" => {
                self.eval.distance = parse_distance(as_str(key, v)?).ok_or_else(|| {
                    ConfigError::BadValue {
                        key: key.into(),
                        expected: "mse|pd|mse-pd|ssim",
                        got: v.to_string(),
                    }
                })?
            }
            "eval.pixel_per_image" => self.eval.pixel_per_image = as_bool(key, v)?,
            "eval.extractor_kind" => {
                self.eval.extractor_kind = match as_str(key, v)? {
                    "random-conv-pyramid" => ExtractorKind::RandomConvPyramid,
                    "trained-encoder" => ExtractorKind::TrainedEncoder,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            expected: "random-conv-pyramid|trained-encoder",
                            got: other.into(),
                        })
                    }
                }
            }
            "eval.extractor_seed" => self.eval.extractor_seed = as_u64(key, v)?,
            "eval.extractor_depth" => self.eval.extractor_depth = as_usize(key, v)?,

            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Flat dotted-key view; the echoed resolved config.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.into());
        put("output_dir", self.output_dir.display().to_string().into());
        put("threads", self.threads.into());
        put("category", self.category.clone().into());

        put("model.input_size", self.model.input_size.0.into());
        put("model.channels", self.model.channels.into());
        put("model.downsample_layers", self.model.downsample_layers.into());
        put("model.residual_blocks", self.model.residual_blocks.into());
        put("model.latent_dim", self.model.latent_dim.into());
        put("model.memory_slots", self.model.memory_slots.into());
        put("model.top_k", self.model.addressing.k.into());
        put("model.sparse_addressing", self.model.addressing.sparse_enabled.into());
        put("model.delta2", self.model.trust.delta2.into());
        put("model.trust_region", self.model.trust.enabled.into());
        put("model.base_width", self.model.base_width.into());
        put("model.memory_enabled", self.model.memory_enabled.into());

        put("train.epochs", self.train.epochs.into());
        put("train.batch_size", self.train.batch_size.into());
        put("train.lr", self.train.lr.into());
        put("train.adam_beta1", self.train.adam_beta1.into());
        put("train.adam_beta2", self.train.adam_beta2.into());
        put("train.adam_eps", self.train.adam_eps.into());
        put("train.grad_clip", self.train.grad_clip.into());
        put("train.trust_warmup_epochs", self.train.trust_warmup_epochs.into());
        put("train.augment_hflip", self.train.augment.hflip.into());
        put("train.augment_vflip", self.train.augment.vflip.into());
        put("train.augment_rot90", self.train.augment.rot90.into());

        put("loss.lambda_rec", self.loss.lambda_rec.into());
        put("loss.lambda_sm", self.loss.lambda_sm.into());
        put("loss.lambda_margin", self.loss.lambda_margin.into());
        put("loss.lambda_trust", self.loss.lambda_trust.into());
        put("loss.ssim_window", self.loss.ssim_window.into());
        put("loss.ssim_c1", self.loss.ssim_c1.into());
        put("loss.ssim_c2", self.loss.ssim_c2.into());

        put("data.texture", texture_name(self.data.texture_kind).into());
        put("data.image_size", self.data.image_size.0.into());
        put("data.channels", self.data.channels.into());
        put("data.n_train", self.data.n_train.into());
        put("data.n_test_normal", self.data.n_test_normal.into());
        put("data.n_test_defective", self.data.n_test_defective.into());
        put("data.noise_fraction", self.data.noise_fraction.into());
        put("data.defect_min_size", self.data.defect_size.0.into());
        put("data.defect_max_size", self.data.defect_size.1.into());
        put("data.defect_min_contrast", self.data.defect_contrast.0.into());
        put("data.defect_max_contrast", self.data.defect_contrast.1.into());
        put(
            "data.defect_shapes",
            self.data
                .defect_shapes
                .iter()
                .map(|s| shape_name(*s))
                .collect::<Vec<_>>()
                .join(",")
                .into(),
        );

        put("eval.distance", distance_name(self.eval.distance).into());
        put("eval.pixel_per_image", self.eval.pixel_per_image.into());
        put(
            "eval.extractor_kind",
            match self.eval.extractor_kind {
                ExtractorKind::RandomConvPyramid => "random-conv-pyramid",
                ExtractorKind::TrainedEncoder => "trained-encoder",
            }
            .into(),
        );
        put("eval.extractor_seed", self.eval.extractor_seed.into());
        put("eval.extractor_depth", self.eval.extractor_depth.into());
        m
    }

    /// Load a flat-key JSON object over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let value: Value = serde_json::from_slice(&bytes).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| ConfigError::File {
            path: path.to_path_buf(),
            reason: "top level must be a JSON object of dotted keys".into(),
        })?;
        let mut cfg = Self::default();
        for (k, v) in obj {
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    /// Apply `key=value` overrides (values parsed as JSON, falling back to
    /// bare strings).
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: s.clone(),
                expected: "key=value",
                got: s.clone(),
            })?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            self.apply(key, &value)?;
        }
        Ok(())
    }

    /// Seed override from the environment: above the config file, below flags.
    pub fn apply_env_seed(&mut self) {
        if let Ok(s) = std::env::var("TRUSTMAE_SEED") {
            if let Ok(seed) = s.trim().parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    /// Propagate the master seed to the subsystems and validate.
    pub fn resolve(&mut self) -> Result<(), ConfigError> {
        self.data.seed = derive_seed(self.seed, "data");
        self.train.seed = derive_seed(self.seed, "train");
        self.model.validate().map_err(|e| ConfigError::BadValue {
            key: "model".into(),
            expected: "valid model config",
            got: e.to_string(),
        })?;
        self.data.validate().map_err(|e| ConfigError::BadValue {
            key: "data".into(),
            expected: "valid dataset spec",
            got: e.to_string(),
        })?;
        self.train.validate().map_err(|e| ConfigError::BadValue {
            key: "train".into(),
            expected: "valid train config",
            got: e.to_string(),
        })?;
        Ok(())
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model-init")
    }

    /// Write the resolved flat config next to the run outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|e| ConfigError::File {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let path = dir.join("config.resolved.json");
        let json = serde_json::to_string_pretty(&self.to_flat()).expect("flat map serializes");
        std::fs::write(&path, json).map_err(|e| ConfigError::File {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(path)
    }
}

pub fn parse_distance(s: &str) -> Option<ErrorMapSource> {
    match s {
        "mse" => Some(ErrorMapSource::Mse),
        "pd" => Some(ErrorMapSource::Pd),
        "mse-pd" => Some(ErrorMapSource::MsePd),
        "ssim" => Some(ErrorMapSource::Ssim),
        _ => None,
    }
}

pub fn distance_name(d: ErrorMapSource) -> &'static str {
    match d {
        ErrorMapSource::Mse => "mse",
        ErrorMapSource::Pd => "pd",
        ErrorMapSource::MsePd => "mse-pd",
        ErrorMapSource::Ssim => "ssim",
    }
}

fn texture_name(t: TextureKind) -> &'static str {
    match t {
        TextureKind::Stripes => "stripes",
        TextureKind::Checker => "checker",
        TextureKind::BandlimitedNoise => "bandlimited_noise",
        TextureKind::Blobs => "blobs",
    }
}

fn shape_name(s: DefectShape) -> &'static str {
    match s {
        DefectShape::Blob => "blob",
        DefectShape::Scratch => "scratch",
        DefectShape::Discoloration => "discoloration",
    }
}

/// The augment policy type is re-exported so flag handling can name it.
pub type Augment = AugmentPolicy;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("model.frobnication", &Value::from(3)).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "model.frobnication"));
    }

    #[test]
    fn every_flat_key_round_trips_through_apply() {
        let cfg = RunConfig::default();
        let flat = cfg.to_flat();
        let mut rebuilt = RunConfig::default();
        for (k, v) in &flat {
            rebuilt.apply(k, v).unwrap_or_else(|e| panic!("key {k}: {e}"));
        }
        assert_eq!(cfg, rebuilt);
    }

    #[test]
    fn file_load_merges_over_defaults_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"model.latent_dim": 32, "seed": 99}"#).unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.model.latent_dim, 32);
        assert_eq!(cfg.seed, 99);
        cfg.apply_overrides(&["model.latent_dim=16".to_string()]).unwrap();
        assert_eq!(cfg.model.latent_dim, 16);
    }

    #[test]
    fn resolve_derives_subsystem_seeds() {
        let mut a = RunConfig::default();
        a.seed = 5;
        a.resolve().unwrap();
        let mut b = RunConfig::default();
        b.seed = 5;
        b.resolve().unwrap();
        assert_eq!(a.data.seed, b.data.seed);
        assert_ne!(a.data.seed, a.train.seed);
        let mut c = RunConfig::default();
        c.seed = 6;
        c.resolve().unwrap();
        assert_ne!(a.data.seed, c.data.seed);
    }

    #[test]
    fn resolved_config_is_written_and_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = 21;
        cfg.resolve().unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        let reloaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(reloaded.seed, 21);
        assert_eq!(reloaded.model, cfg.model);
    }
}
