//! Color-coded synthetic patches whose labels are readable from pixels.
//!
//! Quadrant `q` (row-major) encodes class `2q` in its red channel and class
//! `2q + 1` in its green channel: high intensity for a positive label, low
//! for a negative one. Blue is constant.

use std::io;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fsutil::StagedDir;
use crate::ingest::{MANIFEST_FILE, PATCH_DIR};
use crate::manifest::{Manifest, PatchRecord, Split};
use crate::schema::{LabelSchema, LabelVector};

const ON: i32 = 220;
const OFF: i32 = 30;
const BLUE: u8 = 128;
const NOISE: i32 = 12;

/// Renders an 8-class label vector as a `side × side` patch with seeded noise.
pub fn synthetic_patch(labels: &LabelVector, side: u32, rng: &mut impl Rng) -> RgbImage {
    assert_eq!(labels.len(), 8, "synthetic patches encode exactly 8 classes");
    assert!(side >= 2 && side.is_multiple_of(2), "side must be even");
    let half = side / 2;
    RgbImage::from_fn(side, side, |x, y| {
        let q = (y / half * 2 + x / half) as usize;
        let mut level = |bit: bool| {
            let base = if bit { ON } else { OFF };
            (base + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8
        };
        Rgb([level(labels.get(2 * q)), level(labels.get(2 * q + 1)), BLUE])
    })
}

/// `n` distinct non-empty label vectors with their patches, deterministic in `seed`.
pub fn synthetic_dataset(n: usize, side: u32, seed: u64) -> Vec<(LabelVector, RgbImage)> {
    assert!(n <= 255, "at most 255 distinct non-empty vectors exist");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let code: u8 = rng.gen_range(1..=255);
        if !seen.insert(code) {
            continue;
        }
        let labels = LabelVector::from_bools(&(0..8).map(|i| code >> i & 1 == 1).collect::<Vec<_>>());
        let img = synthetic_patch(&labels, side, &mut rng);
        out.push((labels, img));
    }
    out
}

/// Writes a dataset directory in the ingest layout, every record in `split`.
pub fn write_synthetic_dataset(dir: &Path, n: usize, side: u32, seed: u64, split: Split) -> io::Result<Manifest> {
    let mut manifest = Manifest::new(LabelSchema::coral());
    let staged = StagedDir::new(dir)?;
    let patches = staged.path().join(PATCH_DIR);
    std::fs::create_dir_all(&patches)?;
    for (i, (labels, img)) in synthetic_dataset(n, side, seed).into_iter().enumerate() {
        let id = format!("syn{i:03}_r0_c0");
        img.save(patches.join(format!("{id}.png"))).map_err(io::Error::other)?;
        manifest.records.push(PatchRecord {
            patch_id: id,
            source_image: format!("syn{i:03}"),
            site_code: "UNK".into(),
            grid_row: 0,
            grid_col: 0,
            labels,
            split,
        });
    }
    manifest.save(&staged.path().join(MANIFEST_FILE))?;
    staged.commit()?;
    Ok(manifest)
}
