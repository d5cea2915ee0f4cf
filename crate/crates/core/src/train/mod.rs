//! Training and inference over pluggable backbones.

mod data;
mod loss;
mod network;
mod optim;
mod tiny;

pub use data::{load_tile, patch_path, Augmentation, BatchSampler, PatchStore};
pub use loss::{bce_cell, bce_cell_grad, bce_multilabel_loss, bce_multilabel_loss_grad, sigmoid};
pub use network::{
    resize_square, BackboneProvider, BackboneRegistry, BackboneSpec, BuildOptions, ImageBatch, Network,
    WEIGHTS_DIR_ENV,
};
pub use optim::{AdamW, AdamWConfig};
pub use tiny::{tiny_parameter_count, TinyNetwork, TinyProvider, TINY_NAME, TINY_SIDE};

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{EnsembleError, ProbabilityMatrix};
use crate::fsutil::{self, StagedDir};
use crate::manifest::{Manifest, PatchRecord, Split};
use crate::schema::{LabelSchema, SchemaError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite logit: {0}")]
    NonFinite(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("unknown backbone `{name}`; available: {}", known.join(", "))]
    UnknownBackbone { name: String, known: Vec<String> },
    #[error("backbone `{0}` cannot run in this build")]
    Unavailable(String),
    #[error("pretrained weights: {0}")]
    Pretrained(String),
    #[error("resolution: {0}")]
    Resolution(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Optimization steps, one batch each.
    pub iterations: u64,
    pub seed: u64,
    /// Network input side in pixels; `None` uses the backbone's native size.
    pub input_resolution: Option<u32>,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            batch_size: 8,
            iterations: 25_000,
            seed: 0,
            input_resolution: None,
            augmentation: Augmentation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    /// `iteration<TAB>loss` per line, loss in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{:?}", e.iteration, e.loss);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = || TrainError::Checkpoint(format!("training log line {}: `{line}`", i + 1));
            let (it, loss) = line.split_once('\t').ok_or_else(bad)?;
            entries.push(LogEntry {
                iteration: it.parse().map_err(|_| bad())?,
                loss: loss.parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { entries })
    }

    pub fn digest(&self) -> String {
        fsutil::sha256_hex(self.to_text().as_bytes())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMetadata {
    pub format_version: u32,
    pub backbone: BackboneSpec,
    pub classes: Vec<String>,
    pub input_resolution: u32,
    pub parameter_count: u64,
    pub config: TrainConfig,
    pub training_log_sha256: String,
}

/// A trained network plus everything needed to reload and audit it.
pub struct ModelArtifact {
    pub network: Box<dyn Network>,
    pub metadata: ArtifactMetadata,
}

pub const METADATA_FILE: &str = "metadata.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const LOG_FILE: &str = "training.log";

impl ModelArtifact {
    pub fn parameter_count(&self) -> u64 {
        self.network.parameter_count()
    }

    /// Writes `metadata.json`, `weights.safetensors` and `training.log`
    /// into `dir`, replacing it atomically.
    pub fn save(&self, dir: &Path, log: &TrainingLog) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            context: dir.display().to_string(),
            source,
        };
        let staged = StagedDir::new(dir).map_err(io)?;
        self.network.save_weights(&staged.path().join(WEIGHTS_FILE))?;
        let meta = serde_json::to_vec_pretty(&self.metadata).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fsutil::write_bytes_atomic(&staged.path().join(METADATA_FILE), &meta).map_err(io)?;
        fsutil::write_bytes_atomic(&staged.path().join(LOG_FILE), log.to_text().as_bytes()).map_err(io)?;
        staged.commit().map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path, registry: &BackboneRegistry, schema: &LabelSchema) -> Result<Self, TrainError> {
        let meta_path = dir.join(METADATA_FILE);
        let bytes = std::fs::read(&meta_path).map_err(|source| TrainError::Io {
            context: meta_path.display().to_string(),
            source,
        })?;
        let metadata: ArtifactMetadata =
            serde_json::from_slice(&bytes).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", meta_path.display())))?;
        schema.check_order(&metadata.classes)?;
        let opts = BuildOptions::from_env(schema.size(), metadata.config.seed, metadata.input_resolution);
        let network = registry.load(&metadata.backbone, &opts, &dir.join(WEIGHTS_FILE))?;
        Ok(Self { network, metadata })
    }

    pub fn load_log(dir: &Path) -> Result<TrainingLog, TrainError> {
        let path = dir.join(LOG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| TrainError::Io {
            context: path.display().to_string(),
            source,
        })?;
        TrainingLog::parse(&text)
    }
}

pub struct TrainOutcome {
    pub artifact: ModelArtifact,
    pub log: TrainingLog,
}

/// Trains for exactly `cfg.iterations` steps on the train split of
/// `manifest`, reading `<patch_id>.png` files from `patch_dir`.
pub fn train(
    manifest: &Manifest,
    patch_dir: &Path,
    registry: &BackboneRegistry,
    backbone: &BackboneSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let opts = BuildOptions::from_env(
        manifest.schema.size(),
        cfg.seed,
        cfg.input_resolution.unwrap_or(backbone.native_resolution),
    );
    train_with_options(manifest, patch_dir, registry, backbone, cfg, &opts, |_| {})
}

/// [`train`] with explicit build options and a per-step observer.
pub fn train_with_options(
    manifest: &Manifest,
    patch_dir: &Path,
    registry: &BackboneRegistry,
    backbone: &BackboneSpec,
    cfg: &TrainConfig,
    opts: &BuildOptions,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let records: Vec<&PatchRecord> = manifest.by_split(Split::Train).collect();
    if records.is_empty() {
        return Err(TrainError::Data("the manifest has no training patches".into()));
    }
    if let Some(r) = records.iter().find(|r| r.labels.len() != manifest.schema.size()) {
        return Err(TrainError::Shape(format!(
            "`{}` has {} labels, schema has {}",
            r.patch_id,
            r.labels.len(),
            manifest.schema.size()
        )));
    }
    let mut network = registry.build(backbone, opts)?;
    let store = PatchStore::open(patch_dir, &records, network.input_side())?;
    let optimizer = cfg.optimizer();
    let mut log = TrainingLog::default();
    let mut iteration = 0u64;
    data::stream_batches(&store, cfg.batch_size, cfg.iterations, cfg.seed, cfg.augmentation, |batch| {
        let loss = network.train_step(&batch.images, &batch.targets, &optimizer)?;
        iteration += 1;
        let entry = LogEntry { iteration, loss };
        on_step(&entry);
        log.entries.push(entry);
        Ok(())
    })?;
    let metadata = ArtifactMetadata {
        format_version: 1,
        backbone: network.spec().clone(),
        classes: manifest.schema.codes(),
        input_resolution: network.input_side(),
        parameter_count: network.parameter_count(),
        config: cfg.clone(),
        training_log_sha256: log.digest(),
    };
    Ok(TrainOutcome {
        artifact: ModelArtifact { network, metadata },
        log,
    })
}

const PREDICT_CHUNK: usize = 32;

/// Class probabilities for each tile, rows in input order.
pub fn predict_probabilities(artifact: &ModelArtifact, tiles: &[RgbImage]) -> Result<Vec<Vec<f64>>, TrainError> {
    let net = artifact.network.as_ref();
    let classes = net.classes();
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(PREDICT_CHUNK) {
        let batch = ImageBatch::from_images(net.input_side(), chunk)?;
        let logits = net.logits(&batch)?;
        for row in logits.chunks_exact(classes) {
            out.push(row.iter().map(|&z| sigmoid(z as f64)).collect());
        }
    }
    Ok(out)
}

/// Probabilities for the given manifest records, read from `patch_dir`.
pub fn predict_records(
    artifact: &ModelArtifact,
    records: &[&PatchRecord],
    patch_dir: &Path,
) -> Result<ProbabilityMatrix, TrainError> {
    let net = artifact.network.as_ref();
    let side = net.input_side();
    let mut values = Vec::with_capacity(records.len() * net.classes());
    for chunk in records.chunks(PREDICT_CHUNK) {
        let mut batch = ImageBatch::new(side);
        let tiles: Vec<Vec<u8>> = {
            use rayon::prelude::*;
            chunk
                .par_iter()
                .map(|r| load_tile(patch_dir, &r.patch_id, side))
                .collect::<Result<_, _>>()?
        };
        for t in &tiles {
            batch.push(t);
        }
        let logits = net.logits(&batch)?;
        values.extend(logits.iter().map(|&z| sigmoid(z as f64)));
    }
    let ids = records.iter().map(|r| r.patch_id.clone()).collect();
    Ok(ProbabilityMatrix::new(ids, net.classes(), values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.iterations, 25_000);
        assert_eq!(c.augmentation, Augmentation::None);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::default();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { weight_decay: -1.0, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { iterations: 0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn log_text_round_trip() {
        let log = TrainingLog {
            entries: vec![
                LogEntry { iteration: 1, loss: std::f64::consts::LN_2 },
                LogEntry { iteration: 2, loss: 1e-20 },
            ],
        };
        let text = log.to_text();
        assert_eq!(text, "1\t0.6931471805599453\n2\t1e-20\n");
        assert_eq!(TrainingLog::parse(&text).unwrap(), log);
        assert!(TrainingLog::parse("x").is_err());
    }
}
