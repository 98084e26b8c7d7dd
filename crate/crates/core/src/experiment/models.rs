//! Trained models of one experiment, with checkpoint caching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::Value;

use super::config::ExperimentConfig;
use crate::checkpoint::{
    classifier_checkpoint, codec_checkpoint, denoiser_checkpoint, read_classifier, read_codec, read_denoiser,
    Checkpoint,
};
use crate::classifier::{train_classifier, Classifier};
use crate::codec::{train_codec, LatentCodec};
use crate::data::{DataRange, Dataset};
use crate::diffusion::{train_denoiser, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::metrics::FeatureMode;
use crate::tensor::{RngStream, Tensor};

pub const CODEC_FILE: &str = "codec.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

#[derive(Clone, Debug)]
pub struct Models {
    pub codec: Option<LatentCodec>,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub classifier: Option<Classifier>,
    /// Whether the denoiser works on codec latents.
    pub latent: bool,
    /// Checkpoint file name to SHA-256 of its bytes.
    pub hashes: BTreeMap<String, String>,
}

impl Models {
    /// Data space to the denoiser's space.
    pub fn to_model_space(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.codec, self.latent) {
            (Some(c), true) => c.encode(x),
            _ => Ok(x.clone()),
        }
    }

    /// Denoiser space back to clamped data.
    pub fn to_data_space(&self, z: &Tensor, range: DataRange) -> Result<Tensor> {
        match (&self.codec, self.latent) {
            (Some(c), true) => Ok(range.clamp(&c.decode(z)?)),
            _ => Ok(range.clamp(z)),
        }
    }
}

/// Where training may happen when no matching checkpoint exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPolicy {
    /// Train anything missing or stale and save it.
    IfMissing,
    /// Require every checkpoint to be present and current.
    Never,
}

pub fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

fn stamp(mut ck: Checkpoint, hash: &str) -> Checkpoint {
    if let Value::Object(m) = &mut ck.meta {
        m.insert("config_hash".into(), Value::String(hash.into()));
    }
    ck
}

/// Loads `path` when it was written under the same model configuration.
fn load_current(path: &Path, hash: &str) -> Result<Option<Checkpoint>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(path)?;
    if ck.meta.get("config_hash").and_then(Value::as_str) == Some(hash) {
        Ok(Some(ck))
    } else {
        info!("{} was written under another configuration", path.display());
        Ok(None)
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(crate::checkpoint::sha256_hex(&std::fs::read(path)?))
}

fn missing(path: &Path) -> Error {
    Error::Precondition(format!("no current checkpoint at {}; train it first", path.display()))
}

fn needs_codec(cfg: &ExperimentConfig, data: &Dataset) -> bool {
    data.range == DataRange::Unit && (cfg.diffusion.latent || cfg.metrics.features == FeatureMode::Encoder)
}

pub fn prepare_codec(cfg: &ExperimentConfig, data: &Dataset, policy: TrainPolicy) -> Result<Option<(LatentCodec, String)>> {
    if !needs_codec(cfg, data) {
        return Ok(None);
    }
    let hash = cfg.model_hash()?;
    let path = checkpoint_dir(cfg).join(CODEC_FILE);
    if let Some(ck) = load_current(&path, &hash)? {
        return Ok(Some((read_codec(&ck)?, file_hash(&path)?)));
    }
    if policy == TrainPolicy::Never {
        return Err(missing(&path));
    }
    info!("training codec ({} steps)", cfg.codec.steps);
    let (codec, report) = train_codec(&data.data, data.range, &cfg.codec)?;
    info!("codec validation mse {:.5}", report.validation_mse);
    let digest = stamp(codec_checkpoint(&codec), &hash).save(&path)?;
    Ok(Some((codec, digest)))
}

pub fn prepare_denoiser(
    cfg: &ExperimentConfig,
    data: &Dataset,
    codec: Option<&LatentCodec>,
    policy: TrainPolicy,
) -> Result<(Denoiser, DiffusionSchedule, String)> {
    let hash = cfg.model_hash()?;
    let path = checkpoint_dir(cfg).join(DENOISER_FILE);
    if let Some(ck) = load_current(&path, &hash)? {
        let (d, s) = read_denoiser(&ck)?;
        return Ok((d, s, file_hash(&path)?));
    }
    if policy == TrainPolicy::Never {
        return Err(missing(&path));
    }
    let sched = cfg.diffusion.schedule()?;
    let train_data = match (codec, cfg.diffusion.latent) {
        (Some(c), true) => c.encode(&data.data)?,
        _ => data.data.clone(),
    };
    let dcfg = cfg.diffusion.denoiser_config(train_data.cols(), data.classes);
    let mut rng = RngStream::new(cfg.diffusion.train.seed).derive(0xD1FF);
    let model = Denoiser::new(dcfg, &mut rng);
    info!("training denoiser ({} steps)", cfg.diffusion.train.steps);
    let (model, report) = train_denoiser(model, &train_data, &data.labels, &sched, &cfg.diffusion.train)?;
    info!("denoiser final loss {:.4}", report.final_loss);
    let digest = stamp(denoiser_checkpoint(&model, &sched), &hash).save(&path)?;
    Ok((model, sched, digest))
}

pub fn prepare_classifier(cfg: &ExperimentConfig, data: &Dataset, policy: TrainPolicy) -> Result<(Classifier, String)> {
    let hash = cfg.model_hash()?;
    let path = checkpoint_dir(cfg).join(CLASSIFIER_FILE);
    if let Some(ck) = load_current(&path, &hash)? {
        return Ok((read_classifier(&ck)?, file_hash(&path)?));
    }
    if policy == TrainPolicy::Never {
        return Err(missing(&path));
    }
    info!("training classifier ({} steps)", cfg.classifier.steps);
    let (clf, _) = train_classifier(&data.data, &data.labels, data.classes, &cfg.classifier)?;
    info!("classifier train accuracy {:.3}", clf.accuracy(&data.data, &data.labels)?);
    let digest = stamp(classifier_checkpoint(&clf), &hash).save(&path)?;
    Ok((clf, digest))
}

/// Everything the configured cells need. The classifier is only prepared
/// when an attack asks for it.
pub fn prepare_models(cfg: &ExperimentConfig, data: &Dataset, policy: TrainPolicy) -> Result<Models> {
    let mut hashes = BTreeMap::new();
    let codec = prepare_codec(cfg, data, policy)?.map(|(c, h)| {
        hashes.insert(CODEC_FILE.to_string(), h);
        c
    });
    let (denoiser, schedule, h) = prepare_denoiser(cfg, data, codec.as_ref(), policy)?;
    hashes.insert(DENOISER_FILE.to_string(), h);
    let classifier = if cfg.attack.methods.iter().any(|m| m == "pgd_classifier") {
        let (c, h) = prepare_classifier(cfg, data, policy)?;
        hashes.insert(CLASSIFIER_FILE.to_string(), h);
        Some(c)
    } else {
        None
    };
    let latent = cfg.diffusion.latent && codec.is_some();
    Ok(Models { codec, denoiser, schedule, classifier, latent, hashes })
}
