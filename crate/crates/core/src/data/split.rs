use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Partitions by eye: eyes are shuffled and the first
/// `round(test_fraction * eyes)` (at least one, at most all but one) go to
/// the test side. Returns `(train, test)`.
pub fn split_grouped(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction must lie in (0,1), got {test_fraction}")));
    }
    let mut eyes = manifest.eye_ids();
    if eyes.len() < 2 {
        return Err(Error::Config(format!("grouped split needs at least 2 eyes, got {}", eyes.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eyes.shuffle(&mut rng);
    let n_test = ((test_fraction * eyes.len() as f64).round() as usize).clamp(1, eyes.len() - 1);
    let test_eyes: HashSet<u32> = eyes[..n_test].iter().copied().collect();
    Ok((
        manifest.subset(|e| !test_eyes.contains(&e.eye_id)),
        manifest.subset(|e| test_eyes.contains(&e.eye_id)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;
    use std::path::PathBuf;

    fn manifest(eyes: u32, per_eye: usize) -> DatasetManifest {
        let entries = (0..eyes)
            .flat_map(|e| (0..per_eye).map(move |s| (e, s)))
            .enumerate()
            .map(|(i, (e, _))| ManifestEntry {
                sequence_id: i,
                path: format!("s{i}.smat"),
                label: i % 3,
                eye_id: e,
            })
            .collect();
        DatasetManifest {
            root: PathBuf::new(),
            entries,
        }
    }

    #[test]
    fn two_eyes_split_one_each() {
        let (tr, te) = split_grouped(&manifest(2, 3), 0.5, 1).unwrap();
        assert_eq!(tr.eye_ids().len(), 1);
        assert_eq!(te.eye_ids().len(), 1);
        assert_eq!(tr.entries.len() + te.entries.len(), 6);
    }

    #[test]
    fn default_scale_halves() {
        let (tr, te) = split_grouped(&manifest(66, 24), 0.5, 9).unwrap();
        assert_eq!(tr.eye_ids().len(), 33);
        assert_eq!(te.eye_ids().len(), 33);
    }

    #[test]
    fn invalid_arguments() {
        assert!(split_grouped(&manifest(1, 4), 0.5, 0).is_err());
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(split_grouped(&manifest(4, 2), f, 0).is_err());
        }
    }
}
