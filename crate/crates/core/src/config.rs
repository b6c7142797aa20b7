//! Experiment configuration: nested TOML (or JSON) sections layered over a
//! named profile, validated with path-qualified errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{dataset_by_name, AugmentationPolicy, ShapesSpec};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::gan::{GanSpec, GanTrainConfig};
use crate::losses::{LossWeights, RdReduction};
use crate::trainer::{DistillConfig, TrainConfig};

/// Environment variable naming the data and cache root.
pub const DATA_ROOT_ENV: &str = "SQSP_DATA_ROOT";

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("sqsp-data"), PathBuf::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: String,
    pub shapes: ShapesSpec,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "shapes".into(),
            shapes: ShapesSpec::default(),
            train_size: 2000,
            val_size: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub spec: GanSpec,
    pub train: GanTrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub rd_reduction: RdReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_weights(LossWeights::default())
    }
}

impl LossConfig {
    pub fn from_weights(w: LossWeights) -> Self {
        Self {
            lambda: w.lambda,
            mu: w.mu,
            nu: w.nu,
            alpha: w.alpha,
            epsilon: w.epsilon,
            rd_reduction: RdReduction::default(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            mu: self.mu,
            nu: self.nu,
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    /// Samples per side of the synthetic/real MMD estimate.
    pub mmd_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            mmd_samples: 1000,
        }
    }
}

/// The fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Profile the file was layered over; kept for the record.
    pub profile: Option<String>,
    pub seed: u64,
    /// All computation is single-threaded and seeded, so runs are always
    /// reproducible; the flag is recorded so snapshots state it explicitly.
    pub deterministic: bool,
    pub data: DataConfig,
    pub gan: GanSection,
    pub distill: DistillConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: None,
            seed: 0,
            deterministic: true,
            data: DataConfig::default(),
            gan: GanSection::default(),
            distill: DistillConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Cross-section checks beyond what each section validates alone.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |message: String| Error::Config {
            path: "<resolved>".into(),
            message,
        };
        self.data.shapes.validate()?;
        dataset_by_name(&self.data.dataset, &self.data.shapes)?;
        self.gan.spec.validate()?;
        let size = self.data.shapes.image_size;
        if self.gan.spec.discriminator.image_size != size {
            return Err(cfg_err(format!(
                "gan.spec.discriminator.image_size = {} but data.shapes.image_size = {size}",
                self.gan.spec.discriminator.image_size
            )));
        }
        self.gan.spec.generator.check_resolution(size)?;
        if self.distill.student.image_size != size || self.distill.encoder.image_size != size {
            return Err(cfg_err(format!(
                "distill.student.image_size and distill.encoder.image_size must equal data.shapes.image_size = {size}"
            )));
        }
        AugmentationPolicy::by_name(&self.distill.augmentation, size)?.validate()?;
        self.distill.validate(&self.loss.weights())?;
        if self.data.train_size < 2 || self.data.val_size < 1 || self.eval.mmd_samples < 2 {
            return Err(cfg_err(
                "train_size >= 2, val_size >= 1 and mmd_samples >= 2 required".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut distill = self.distill.clone();
        distill.seed = self.seed;
        TrainConfig {
            distill,
            weights: self.loss.weights(),
            rd_reduction: self.loss.rd_reduction,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: "<resolved>".into(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&serde_json::to_value(self).expect("config serializes")).expect("json");
        crate::tensor::digest_hex(&json)
    }
}

const CIFAR_LIKE: &str = r#"
[distill]
batch_size = 512
epochs = 800
base_lr = 0.03
weight_decay = 0.0005
augmentation = "moco-v2-no-blur"
[distill.squeeze]
dim = 2048
mlp_layers = 3
[distill.student]
projector_layers = 5
projector_hidden = 2048
out_dim = 2048
[loss]
lambda = 25.0
mu = 25.0
nu = 1.0
alpha = 0.5
"#;

const CIFAR100_LIKE: &str = r#"
[distill]
batch_size = 512
epochs = 800
base_lr = 0.03
weight_decay = 0.0005
augmentation = "moco-v2-no-blur"
[distill.squeeze]
dim = 2048
mlp_layers = 3
[distill.student]
projector_layers = 5
projector_hidden = 2048
out_dim = 2048
[loss]
lambda = 10.0
mu = 10.0
nu = 1.0
alpha = 0.5
"#;

const STL_LIKE: &str = r#"
[data.shapes]
image_size = 64
[gan.spec.generator]
block_channels = [64, 32, 16, 16]
[gan.spec.discriminator]
image_size = 64
block_channels = [32, 64, 128, 128]
[distill]
batch_size = 512
epochs = 200
base_lr = 0.05
weight_decay = 0.0001
augmentation = "moco-v2"
[distill.squeeze]
dim = 2048
mlp_layers = 3
[distill.student]
image_size = 64
projector_layers = 5
projector_hidden = 2048
out_dim = 2048
[distill.encoder]
image_size = 64
[loss]
lambda = 25.0
mu = 25.0
nu = 1.0
alpha = 0.5
"#;

/// Desk-scale settings used by the acceptance suite.
const DESK: &str = r#"
[data]
train_size = 2000
val_size = 1000
[gan.train]
steps = 2000
batch_size = 64
[distill]
batch_size = 128
steps = 300
base_lr = 0.06
weight_decay = 0.0005
augmentation = "moco-v2-no-blur"
[distill.squeeze]
dim = 64
mlp_layers = 3
norm = "batch"
[distill.student]
projector_layers = 3
projector_hidden = 128
projector_norm = "batch"
out_dim = 64
[loss]
lambda = 25.0
mu = 25.0
nu = 1.0
alpha = 0.5
[eval]
mmd_samples = 1000
"#;

/// Smallest configuration that exercises every code path in seconds.
const TINY: &str = r#"
[data]
train_size = 64
val_size = 32
[data.shapes]
image_size = 16
[gan.spec.generator]
latent_dim = 8
w_dim = 8
base_channels = 8
block_channels = [8, 4]
[gan.spec.discriminator]
image_size = 16
block_channels = [4, 8]
[gan.train]
steps = 3
batch_size = 8
[distill]
batch_size = 8
steps = 3
augmentation = "moco-v2-no-blur"
[distill.squeeze]
dim = 8
mlp_layers = 2
norm = "batch"
[distill.student]
image_size = 16
stem_channels = 4
stage_channels = [4, 8]
norm_groups = 2
projector_layers = 2
projector_hidden = 8
projector_norm = "batch"
out_dim = 8
[distill.encoder]
image_size = 16
block_channels = [4, 8]
norm_groups = 2
[eval]
mmd_samples = 16
[eval.probe]
epochs = 5
batch_size = 16
"#;

pub const PROFILE_NAMES: [&str; 5] = ["cifar-like", "cifar100-like", "stl-like", "desk", "tiny"];

fn profile_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "cifar-like" => CIFAR_LIKE,
        "cifar100-like" => CIFAR100_LIKE,
        "stl-like" => STL_LIKE,
        "desk" => DESK,
        "tiny" => TINY,
        _ => return None,
    })
}

fn config_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn toml_to_json(text: &str, origin: &Path) -> Result<Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| config_error(origin, e.to_string()))?;
    serde_json::to_value(table).map_err(|e| config_error(origin, e.to_string()))
}

/// Overlays `top` on `base`; tables merge recursively, everything else replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies a `dotted.key=value` override; the value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let origin = Path::new("--set");
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(origin, format!("`{assignment}` is not key=value")))?;
    let key = key.trim();
    let parsed: Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(t) => serde_json::to_value(&t["v"]).map_err(|e| config_error(origin, e.to_string()))?,
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut patch = parsed;
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(config_error(origin, format!("empty path segment in `{key}`")));
        }
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    deep_merge(tree, patch);
    Ok(())
}

/// Reads a config file as a JSON tree. `.json` files are JSON, anything
/// else TOML. An empty file is an empty table.
pub fn read_tree(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e.to_string()))?;
    if path.extension().is_some_and(|e| e == "json") {
        if text.trim().is_empty() {
            return Ok(Value::Object(Default::default()));
        }
        serde_json::from_str(&text).map_err(|e| config_error(path, e.to_string()))
    } else {
        toml_to_json(&text, path)
    }
}

/// Builds a config from a profile, an optional file tree and overrides.
/// A `profile` key in the file is used when `profile` is `None`.
pub fn resolve(
    profile: Option<&str>,
    file: Option<Value>,
    overrides: &[String],
    origin: &Path,
) -> Result<ExperimentConfig> {
    let file = file.unwrap_or_else(|| Value::Object(Default::default()));
    let from_file = file.get("profile").and_then(Value::as_str).map(str::to_owned);
    let name = profile.map(str::to_owned).or(from_file);
    let mut tree = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(name) = &name {
        let text = profile_text(name).ok_or_else(|| {
            config_error(
                origin,
                format!("unknown profile `{name}`; expected one of {}", PROFILE_NAMES.join(", ")),
            )
        })?;
        deep_merge(&mut tree, toml_to_json(text, Path::new(name))?);
    }
    deep_merge(&mut tree, file);
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    if let Some(name) = &name {
        tree["profile"] = Value::String(name.clone());
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(tree).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: format!("{} (in {})", e.inner(), origin.display()),
    })?;
    cfg.validate().map_err(|e| match e {
        Error::Config { path, message } => config_error(origin, format!("{path}: {message}")),
        other => config_error(origin, other.to_string()),
    })?;
    Ok(cfg)
}

/// Parses and validates a config file layered over `profile`.
pub fn parse_config(path: Option<&Path>, profile: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let tree = path.map(read_tree).transpose()?;
    resolve(profile, tree, overrides, path.unwrap_or(Path::new("<defaults>")))
}

pub fn profile(name: &str) -> Result<ExperimentConfig> {
    resolve(Some(name), None, &[], Path::new(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str, profile: Option<&str>) -> Result<ExperimentConfig> {
        resolve(
            profile,
            Some(toml_to_json(text, Path::new("t.toml"))?),
            &[],
            Path::new("t.toml"),
        )
    }

    #[test]
    fn every_profile_validates() {
        for name in PROFILE_NAMES {
            let cfg = profile(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.profile.as_deref(), Some(name));
        }
    }

    #[test]
    fn empty_file_takes_profile_values() {
        let cfg = parse_str("", Some("cifar-like")).unwrap();
        assert_eq!((cfg.loss.lambda, cfg.loss.mu, cfg.loss.nu), (25.0, 25.0, 1.0));
        assert_eq!(cfg.distill.batch_size, 512);
        let c100 = parse_str("", Some("cifar100-like")).unwrap();
        assert_eq!((c100.loss.lambda, c100.loss.mu), (10.0, 10.0));
    }

    #[test]
    fn explicit_keys_override_profile() {
        let cfg = parse_str("[loss]\nmu = 0.0\n", Some("cifar-like")).unwrap();
        assert_eq!(cfg.loss.mu, 0.0);
        assert_eq!((cfg.loss.lambda, cfg.loss.nu, cfg.loss.alpha), (25.0, 1.0, 0.5));
    }

    #[test]
    fn unknown_key_is_named_with_its_path() {
        let err = parse_str("[loss]\nlamda = 3.0\n", None).unwrap_err().to_string();
        assert!(err.contains("lamda") && err.contains("loss"), "{err}");
    }

    #[test]
    fn type_error_is_path_qualified() {
        let err = parse_str("[distill]\nbatch_size = \"big\"\n", None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("distill.batch_size"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        for name in PROFILE_NAMES {
            let cfg = profile(name).unwrap();
            let again = parse_str(&cfg.to_toml().unwrap(), None).unwrap();
            assert_eq!(cfg, again, "{name}");
        }
    }

    #[test]
    fn dotted_overrides() {
        let cfg = resolve(
            Some("desk"),
            None,
            &["loss.nu=0".into(), "distill.method=squeeze".into()],
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(cfg.loss.nu, 0.0);
        assert_eq!(cfg.distill.method, crate::trainer::Method::Squeeze);
    }

    #[test]
    fn unknown_profile_rejected() {
        assert!(profile("imagenet-like").is_err());
    }
}
