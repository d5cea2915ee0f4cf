//! Patch loading and batch sampling for the training loop.

use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{resize_square, ImageBatch};
use super::TrainError;
use crate::ingest::load_rgb;
use crate::manifest::PatchRecord;

/// Above this many decoded bytes, patches are re-read from disk per batch.
const CACHE_LIMIT_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    HorizontalFlip,
}

pub fn patch_path(dir: &Path, patch_id: &str) -> PathBuf {
    dir.join(format!("{patch_id}.png"))
}

/// Reads a patch and resizes it to `side`.
pub fn load_tile(dir: &Path, patch_id: &str, side: u32) -> Result<Vec<u8>, TrainError> {
    let path = patch_path(dir, patch_id);
    let img = load_rgb(&path).map_err(|e| TrainError::Data(e.to_string()))?;
    Ok(resize_square(&img, side)?.into_raw())
}

/// Training patches at the network's resolution.
pub struct PatchStore {
    dir: PathBuf,
    side: u32,
    ids: Vec<String>,
    targets: Vec<Vec<u8>>,
    cache: Option<Vec<Vec<u8>>>,
}

impl PatchStore {
    /// Decodes all `records` up front when they fit in memory. Decoding runs
    /// on the rayon pool; the cache keeps record order.
    pub fn open(dir: &Path, records: &[&PatchRecord], side: u32) -> Result<Self, TrainError> {
        let ids: Vec<String> = records.iter().map(|r| r.patch_id.clone()).collect();
        let targets = records.iter().map(|r| r.labels.flags().to_vec()).collect();
        let missing = ids.iter().find(|id| !patch_path(dir, id).is_file());
        if let Some(id) = missing {
            return Err(TrainError::Data(format!(
                "patch file {} not found",
                patch_path(dir, id).display()
            )));
        }
        let bytes = ids.len() * (side * side * 3) as usize;
        let cache = if bytes <= CACHE_LIMIT_BYTES {
            Some(
                ids.par_iter()
                    .map(|id| load_tile(dir, id, side))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            side,
            ids,
            targets,
            cache,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn tile(&self, i: usize) -> Result<std::borrow::Cow<'_, [u8]>, TrainError> {
        match &self.cache {
            Some(c) => Ok(std::borrow::Cow::Borrowed(&c[i])),
            None => load_tile(&self.dir, &self.ids[i], self.side).map(std::borrow::Cow::Owned),
        }
    }
}

fn flip_horizontal(tile: &mut [u8], side: usize) {
    for row in tile.chunks_exact_mut(side * 3) {
        for x in 0..side / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (side - 1 - x) * 3 + c);
            }
        }
    }
}

/// Draws batch indices epoch by epoch: each epoch is a fresh permutation
/// and batches run across epoch boundaries, so every batch is full.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: (0..len).collect(),
            cursor: len,
            batch_size,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn coin(&mut self) -> bool {
        self.rng.gen_bool(0.5)
    }
}

pub struct Batch {
    pub images: ImageBatch,
    pub targets: Vec<u8>,
}

/// Runs `consume` on `iterations` batches produced by a loader thread that
/// stays a few batches ahead. Batch contents depend only on the sampler seed.
pub fn stream_batches<F>(
    store: &PatchStore,
    batch_size: usize,
    iterations: u64,
    seed: u64,
    augmentation: Augmentation,
    mut consume: F,
) -> Result<(), TrainError>
where
    F: FnMut(Batch) -> Result<(), TrainError>,
{
    let (tx, rx) = mpsc::sync_channel::<Result<Batch, TrainError>>(4);
    std::thread::scope(move |scope| {
        scope.spawn(move || {
            let mut sampler = BatchSampler::new(store.len(), batch_size, seed);
            for _ in 0..iterations {
                let produced = (|| {
                    let idx = sampler.next_batch();
                    let mut images = ImageBatch::new(store.side);
                    let mut targets = Vec::new();
                    for &i in &idx {
                        let mut tile = store.tile(i)?.into_owned();
                        if augmentation == Augmentation::HorizontalFlip && sampler.coin() {
                            flip_horizontal(&mut tile, store.side as usize);
                        }
                        images.push(&tile);
                        targets.extend_from_slice(&store.targets[i]);
                    }
                    Ok(Batch { images, targets })
                })();
                let failed = produced.is_err();
                if tx.send(produced).is_err() || failed {
                    break;
                }
            }
        });
        for _ in 0..iterations {
            let batch = rx
                .recv()
                .map_err(|_| TrainError::Data("batch loader stopped early".into()))??;
            consume(batch)?;
        }
        Ok(())
    })
}
