//! Experiment configuration. Files are TOML; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use crate::attacks::{AttackConfig, AttackMode};
use crate::checkpoint::sha256_hex;
use crate::classifier::ClassifierConfig;
use crate::codec::CodecConfig;
use crate::data::DatasetSpec;
use crate::defenses::DefenseConfig;
use crate::diffusion::{DenoiserConfig, DiffusionSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use crate::metrics::{FeatureMode, DEFAULT_K};

/// An L∞ amount in data units. Config files may write it as a number or
/// as a fraction string such as `"8/255"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Budget(pub f32);

impl Budget {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot read `{s}` as a budget"));
        let v = match s.split_once('/') {
            Some((a, b)) => {
                let a: f32 = a.trim().parse().map_err(|_| bad())?;
                let b: f32 = b.trim().parse().map_err(|_| bad())?;
                if b == 0.0 {
                    return Err(bad());
                }
                a / b
            }
            None => s.trim().parse().map_err(|_| bad())?,
        };
        Ok(Budget(v))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f32(self.0)
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Budget(v as f32)),
            Raw::Text(s) => Budget::parse(&s).map_err(de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSettings {
    /// Run the denoiser on codec latents rather than on raw inputs.
    pub latent: bool,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub train: TrainConfig,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        let d = DenoiserConfig::new(0, 0);
        let s = DiffusionSchedule::default();
        Self {
            latent: true,
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            cond_dim: d.cond_dim,
            time_dim: d.time_dim,
            hidden: d.hidden,
            layers: d.layers,
            train: TrainConfig { seed: 1, ..TrainConfig::default() },
        }
    }
}

impl DiffusionSettings {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn denoiser_config(&self, data_dim: usize, classes: usize) -> DenoiserConfig {
        DenoiserConfig {
            data_dim,
            cond_dim: self.cond_dim,
            time_dim: self.time_dim,
            hidden: self.hidden,
            layers: self.layers,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSettings {
    /// Registry names, one cell column each.
    pub methods: Vec<String>,
    pub epsilon: Budget,
    pub alpha: Budget,
    pub n_steps: usize,
    pub mode: AttackMode,
    pub draws_per_step: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            methods: vec!["none".into(), "advdm".into()],
            epsilon: Budget(a.epsilon),
            alpha: Budget(a.alpha),
            n_steps: a.n_steps,
            mode: a.mode,
            draws_per_step: a.draws_per_step,
        }
    }
}

impl AttackSettings {
    pub fn config(&self, epsilon: Budget, n_steps: usize) -> AttackConfig {
        AttackConfig {
            epsilon: epsilon.0,
            alpha: self.alpha.0.min(epsilon.0.max(f32::MIN_POSITIVE)),
            n_steps,
            mode: self.mode,
            draws_per_step: self.draws_per_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSettings {
    pub methods: Vec<String>,
    pub params: DefenseConfig,
}

impl Default for DefenseSettings {
    fn default() -> Self {
        Self { methods: vec!["identity".into()], params: DefenseConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSettings {
    /// Registry name: `text2img_inversion`, `style_transfer` or `img2img`.
    pub name: String,
    /// Image groups per cell; the group size comes from `[inversion]`.
    pub groups: usize,
    pub samples_per_group: usize,
    /// Image-to-image strength for the scenarios that use it.
    pub strength: f32,
    /// Class under attack; `seed % classes` when absent.
    pub target_class: Option<usize>,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            name: "text2img_inversion".into(),
            groups: 10,
            samples_per_group: 50,
            strength: crate::inversion::DEFAULT_STRENGTH,
            target_class: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub k: usize,
    pub features: FeatureMode,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { k: DEFAULT_K, features: FeatureMode::Encoder }
    }
}

/// Extra sweep axes; an empty list means the `[attack]` value alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub n_steps: Vec<usize>,
    pub epsilon: Vec<Budget>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Cells evaluated concurrently.
    pub workers: usize,
    pub dataset: DatasetSpec,
    pub codec: CodecConfig,
    pub diffusion: DiffusionSettings,
    pub classifier: ClassifierConfig,
    pub attack: AttackSettings,
    pub defense: DefenseSettings,
    pub inversion: InversionConfig,
    pub scenario: ScenarioSettings,
    pub metrics: MetricSettings,
    pub sweep: SweepSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
            dataset: DatasetSpec::default(),
            codec: CodecConfig::default(),
            diffusion: DiffusionSettings::default(),
            classifier: ClassifierConfig::default(),
            attack: AttackSettings::default(),
            defense: DefenseSettings::default(),
            inversion: InversionConfig::default(),
            scenario: ScenarioSettings::default(),
            metrics: MetricSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the canonical JSON form, independent of file formatting.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }

    /// Hash of the sections that determine the trained models.
    pub fn model_hash(&self) -> Result<String> {
        let v = json!({
            "dataset": self.dataset,
            "codec": self.codec,
            "diffusion": self.diffusion,
            "classifier": self.classifier,
        });
        Ok(sha256_hex(&serde_json::to_vec(&v)?))
    }

    /// The ε values of the sweep, or the single configured one.
    pub fn epsilons(&self) -> Vec<Budget> {
        if self.sweep.epsilon.is_empty() {
            vec![self.attack.epsilon]
        } else {
            self.sweep.epsilon.clone()
        }
    }

    pub fn n_steps_axis(&self) -> Vec<usize> {
        if self.sweep.n_steps.is_empty() {
            vec![self.attack.n_steps]
        } else {
            self.sweep.n_steps.clone()
        }
    }

    /// Range and cross-field checks; runs before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.attack.methods.is_empty() || self.defense.methods.is_empty() {
            return Err(Error::Config("attack.methods and defense.methods must be nonempty".into()));
        }
        let attacks = crate::attacks::AttackRegistry::default();
        for m in &self.attack.methods {
            attacks.get(m)?;
        }
        let defenses = crate::defenses::DefenseRegistry::default();
        for m in &self.defense.methods {
            defenses.get(m)?;
        }
        super::ScenarioRegistry::default().get(&self.scenario.name)?;
        for eps in self.epsilons() {
            for n in self.n_steps_axis() {
                self.attack.config(eps, n).validate()?;
            }
        }
        self.defense.params.validate()?;
        self.inversion.validate()?;
        self.diffusion.schedule()?;
        if self.scenario.groups == 0 || self.scenario.samples_per_group == 0 {
            return Err(Error::Config("scenario.groups and samples_per_group must be at least 1".into()));
        }
        if !(self.scenario.strength > 0.0 && self.scenario.strength <= 1.0) {
            return Err(Error::Config(format!("strength {} outside (0, 1]", self.scenario.strength)));
        }
        if self.metrics.k == 0 {
            return Err(Error::Config("metrics.k must be at least 1".into()));
        }
        if self.diffusion.cond_dim == 0 || self.diffusion.hidden == 0 || self.diffusion.layers == 0 {
            return Err(Error::Config("diffusion widths must be positive".into()));
        }
        Ok(())
    }
}

fn number_or_fraction() -> Value {
    json!({ "oneOf": [
        { "type": "number", "minimum": 0 },
        { "type": "string", "pattern": "^\\s*[0-9.]+\\s*(/\\s*[0-9.]+\\s*)?$" }
    ] })
}

fn strict(properties: Value) -> Value {
    json!({ "type": "object", "additionalProperties": false, "properties": properties })
}

/// JSON Schema of the configuration file.
pub fn config_schema() -> Value {
    let uint = json!({ "type": "integer", "minimum": 0 });
    let num = json!({ "type": "number" });
    let names = json!({ "type": "array", "items": { "type": "string" } });
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "ExperimentConfig",
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "seeds": { "type": "array", "items": uint, "minItems": 1 },
            "output_dir": { "type": "string" },
            "workers": { "type": "integer", "minimum": 1 },
            "dataset": { "oneOf": [
                strict(json!({ "kind": { "const": "gaussian_mixture_2d" }, "classes": uint, "per_class": uint, "radius": num, "std": num, "seed": uint })),
                strict(json!({ "kind": { "const": "synthetic_shapes_16x16" }, "classes": uint, "per_class": uint, "seed": uint })),
                strict(json!({ "kind": { "const": "idx_images" }, "images": { "type": "string" }, "labels": { "type": "string" } })),
            ] },
            "codec": strict(json!({
                "latent_dim": uint, "hidden": { "type": "array", "items": uint }, "steps": uint,
                "batch_size": uint, "lr": num, "threshold": num, "validation_fraction": num, "seed": uint
            })),
            "diffusion": strict(json!({
                "latent": { "type": "boolean" }, "steps": uint, "beta_start": num, "beta_end": num,
                "cond_dim": uint, "time_dim": uint, "hidden": uint, "layers": uint,
                "train": strict(json!({
                    "steps": uint, "batch_size": uint, "lr": num, "cond_dropout": num, "seed": uint,
                    "loss_threshold": num
                }))
            })),
            "classifier": strict(json!({
                "hidden": { "type": "array", "items": uint }, "steps": uint, "batch_size": uint, "lr": num, "seed": uint
            })),
            "attack": strict(json!({
                "methods": names, "epsilon": number_or_fraction(), "alpha": number_or_fraction(),
                "n_steps": uint, "mode": { "enum": ["pixel", "latent"] }, "draws_per_step": uint
            })),
            "defense": strict(json!({
                "methods": names,
                "params": strict(json!({
                    "quality": { "type": "integer", "minimum": 1, "maximum": 100 }, "tv_lambda": num,
                    "tv_iters": uint, "resample_factor": num, "t_star": uint
                }))
            })),
            "inversion": strict(json!({
                "steps": uint, "lr": num, "group_size": uint, "draws_per_step": uint, "init_noise": num
            })),
            "scenario": strict(json!({
                "name": { "enum": ["text2img_inversion", "style_transfer", "img2img"] },
                "groups": uint, "samples_per_group": uint, "strength": num, "target_class": uint
            })),
            "metrics": strict(json!({ "k": uint, "features": { "enum": ["encoder", "pixel"] } })),
            "sweep": strict(json!({
                "n_steps": { "type": "array", "items": uint },
                "epsilon": { "type": "array", "items": number_or_fraction() }
            })),
        }
    })
}
