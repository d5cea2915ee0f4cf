use std::collections::{BTreeSet, HashSet};

use sha2::{Digest, Sha256};

use super::IngestError;
use crate::manifest::{Manifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitGranularity {
    /// All patches of one survey image land in the same split.
    SourceImage,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    pub granularity: SplitGranularity,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
            granularity: SplitGranularity::SourceImage,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(IngestError::InvalidSplit(format!(
                "train fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Sort key of one unit: the first eight bytes of SHA-256(seed ‖ id).
fn unit_key(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Number of training units: `round(fraction · units)`, kept within
/// `1..units` so both splits are non-empty.
pub fn train_unit_count(units: usize, fraction: f64) -> usize {
    let n = (fraction * units as f64).round() as usize;
    n.clamp(1, units - 1)
}

/// Assigns every record to train or test. The result depends only on the
/// set of unit ids, the seed and the fraction; any previous assignment is
/// overwritten.
pub fn assign_split(manifest: &Manifest, cfg: &SplitConfig) -> Result<Manifest, IngestError> {
    cfg.validate()?;
    let unit_of = |r: &crate::manifest::PatchRecord| -> String {
        match cfg.granularity {
            SplitGranularity::SourceImage => r.source_image.clone(),
            SplitGranularity::Patch => r.patch_id.clone(),
        }
    };
    let units: BTreeSet<String> = manifest.records.iter().map(unit_of).collect();
    if units.len() < 2 {
        return Err(IngestError::InvalidSplit(format!(
            "need at least 2 units to form train and test splits, found {}",
            units.len()
        )));
    }
    let mut keyed: Vec<(u64, &String)> = units.iter().map(|u| (unit_key(cfg.seed, u), u)).collect();
    keyed.sort();
    let n_train = train_unit_count(units.len(), cfg.train_fraction);
    let train: HashSet<&str> = keyed[..n_train].iter().map(|(_, u)| u.as_str()).collect();

    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = if train.contains(unit_of(r).as_str()) {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::PatchRecord;
    use crate::schema::{LabelSchema, LabelVector};
    use proptest::prelude::*;

    fn manifest(images: usize, tiles_per_image: u32) -> Manifest {
        let mut m = Manifest::new(LabelSchema::coral());
        for i in 0..images {
            for t in 0..tiles_per_image {
                m.records.push(PatchRecord {
                    patch_id: format!("img{i:03}_r0_c{t}"),
                    source_image: format!("img{i:03}.jpg"),
                    site_code: "UNK".into(),
                    grid_row: 0,
                    grid_col: t,
                    labels: LabelVector::zeros(8),
                    split: Split::Unassigned,
                });
            }
        }
        m
    }

    fn train_images(m: &Manifest) -> BTreeSet<String> {
        m.by_split(Split::Train).map(|r| r.source_image.clone()).collect()
    }

    #[test]
    fn seventy_thirty_by_image() {
        let m = assign_split(&manifest(100, 3), &SplitConfig::default()).unwrap();
        let train = train_images(&m);
        let test: BTreeSet<String> = m.by_split(Split::Test).map(|r| r.source_image.clone()).collect();
        assert_eq!(train.len(), 70);
        assert_eq!(test.len(), 30);
        assert!(train.is_disjoint(&test));
        assert_eq!(m.by_split(Split::Unassigned).count(), 0);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let base = manifest(10, 2);
        let cfg = |seed| SplitConfig {
            seed,
            ..SplitConfig::default()
        };
        let a = assign_split(&base, &cfg(1)).unwrap();
        let again = assign_split(&base, &cfg(1)).unwrap();
        assert_eq!(a, again);
        let b = assign_split(&base, &cfg(2)).unwrap();
        assert_eq!(train_images(&a).len(), 7);
        assert_eq!(train_images(&b).len(), 7);
        assert_ne!(train_images(&a), train_images(&b));
    }

    #[test]
    fn record_order_does_not_matter() {
        let base = manifest(12, 2);
        let mut reversed = base.clone();
        reversed.records.reverse();
        let cfg = SplitConfig::default();
        let a = assign_split(&base, &cfg).unwrap();
        let b = assign_split(&reversed, &cfg).unwrap();
        assert_eq!(train_images(&a), train_images(&b));
    }

    #[test]
    fn patch_granularity_counts_patches() {
        let cfg = SplitConfig {
            granularity: SplitGranularity::Patch,
            ..SplitConfig::default()
        };
        let m = assign_split(&manifest(2, 5), &cfg).unwrap();
        assert_eq!(m.by_split(Split::Train).count(), 7);
    }

    #[test]
    fn rejections() {
        assert!(assign_split(&manifest(1, 10), &SplitConfig::default()).is_err());
        let bad = SplitConfig {
            train_fraction: 1.0,
            ..SplitConfig::default()
        };
        assert!(assign_split(&manifest(10, 1), &bad).is_err());
    }

    #[test]
    fn both_splits_nonempty_at_extremes() {
        assert_eq!(train_unit_count(2, 0.01), 1);
        assert_eq!(train_unit_count(2, 0.99), 1);
        assert_eq!(train_unit_count(100, 0.7), 70);
    }

    proptest! {
        #[test]
        fn idempotent_and_complete(images in 2usize..40, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let cfg = SplitConfig { train_fraction: frac, seed, granularity: SplitGranularity::SourceImage };
            let once = assign_split(&manifest(images, 2), &cfg).unwrap();
            let twice = assign_split(&once, &cfg).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(train_images(&once).len(), train_unit_count(images, frac));
            prop_assert!(once.records.iter().all(|r| r.split != Split::Unassigned));
        }
    }
}
