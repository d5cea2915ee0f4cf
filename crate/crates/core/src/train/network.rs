//! Backbone plumbing shared by the built-in network and external runtimes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::TrainError;

/// Environment variable naming the directory of pretrained weight bundles.
pub const WEIGHTS_DIR_ENV: &str = "REEFCOND_WEIGHTS_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub pretrained: bool,
    pub native_resolution: u32,
    /// Trainable parameters of backbone plus an 8-logit head, when the
    /// runtime can construct the architecture.
    pub parameter_count: Option<u64>,
}

/// Square RGB tiles at one resolution, stored as interleaved 8-bit
/// pixels, tile after tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBatch {
    pub side: u32,
    pub len: usize,
    pub pixels: Vec<u8>,
}

impl ImageBatch {
    pub fn new(side: u32) -> Self {
        Self {
            side,
            len: 0,
            pixels: Vec::new(),
        }
    }

    pub fn tile_bytes(&self) -> usize {
        (self.side * self.side * 3) as usize
    }

    pub fn push(&mut self, tile: &[u8]) {
        assert_eq!(tile.len(), self.tile_bytes(), "tile size mismatch");
        self.pixels.extend_from_slice(tile);
        self.len += 1;
    }

    pub fn tile(&self, i: usize) -> &[u8] {
        let n = self.tile_bytes();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn from_images(side: u32, images: &[RgbImage]) -> Result<Self, TrainError> {
        let mut batch = Self::new(side);
        for img in images {
            batch.push(resize_square(img, side)?.as_raw());
        }
        Ok(batch)
    }
}

/// Resizes a square tile to `side × side`. Non-square input is rejected.
pub fn resize_square(img: &RgbImage, side: u32) -> Result<RgbImage, TrainError> {
    let (w, h) = img.dimensions();
    if w != h || w == 0 {
        return Err(TrainError::Resolution(format!(
            "tile is {w}×{h}; only square tiles can be resized to {side}×{side}"
        )));
    }
    if w == side {
        return Ok(img.clone());
    }
    Ok(image::imageops::resize(img, side, side, FilterType::Triangle))
}

/// A backbone with its classification head.
pub trait Network: Send + Sync {
    fn spec(&self) -> &BackboneSpec;
    fn classes(&self) -> usize;
    fn input_side(&self) -> u32;
    /// Trainable scalar parameters, backbone and head.
    fn parameter_count(&self) -> u64;
    /// Row-major `batch.len × classes` logits. Must not change any state.
    fn logits(&self, batch: &ImageBatch) -> Result<Vec<f32>, TrainError>;
    /// One optimization step on the mean per-channel BCE; returns the loss
    /// before the update.
    fn train_step(&mut self, batch: &ImageBatch, targets: &[u8], opt: &AdamWConfig) -> Result<f64, TrainError>;
    fn save_weights(&self, path: &Path) -> Result<(), TrainError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOptions {
    pub classes: usize,
    pub seed: u64,
    pub input_side: u32,
    pub weights_dir: Option<PathBuf>,
}

impl BuildOptions {
    /// Reads [`WEIGHTS_DIR_ENV`] from the environment.
    pub fn from_env(classes: usize, seed: u64, input_side: u32) -> Self {
        Self {
            classes,
            seed,
            input_side,
            weights_dir: std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from),
        }
    }
}

/// A family of backbones the registry can construct.
pub trait BackboneProvider: Send + Sync {
    fn names(&self) -> Vec<String>;
    fn spec(&self, name: &str) -> Option<BackboneSpec>;
    fn build(&self, spec: &BackboneSpec, opts: &BuildOptions) -> Result<Box<dyn Network>, TrainError>;
    /// Restores a network from a checkpoint weights blob written by
    /// [`Network::save_weights`].
    fn load(&self, spec: &BackboneSpec, opts: &BuildOptions, weights: &Path) -> Result<Box<dyn Network>, TrainError>;
}

#[derive(Clone, Default)]
pub struct BackboneRegistry {
    providers: Vec<Arc<dyn BackboneProvider>>,
}

impl BackboneRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding only the built-in tiny network.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(super::tiny::TinyProvider));
        r
    }

    pub fn register(&mut self, provider: Arc<dyn BackboneProvider>) {
        self.providers.push(provider);
    }

    pub fn names(&self) -> Vec<String> {
        self.providers.iter().flat_map(|p| p.names()).collect()
    }

    fn find(&self, name: &str) -> Result<(&Arc<dyn BackboneProvider>, BackboneSpec), TrainError> {
        self.providers
            .iter()
            .find_map(|p| p.spec(name).map(|s| (p, s)))
            .ok_or_else(|| TrainError::UnknownBackbone {
                name: name.to_string(),
                known: self.names(),
            })
    }

    /// Default spec for a registered name (matched case-insensitively).
    pub fn spec(&self, name: &str) -> Result<BackboneSpec, TrainError> {
        self.find(name).map(|(_, s)| s)
    }

    pub fn build(&self, spec: &BackboneSpec, opts: &BuildOptions) -> Result<Box<dyn Network>, TrainError> {
        let (p, _) = self.find(&spec.name)?;
        p.build(spec, opts)
    }

    pub fn load(&self, spec: &BackboneSpec, opts: &BuildOptions, weights: &Path) -> Result<Box<dyn Network>, TrainError> {
        let (p, _) = self.find(&spec.name)?;
        p.load(spec, opts, weights)
    }
}
