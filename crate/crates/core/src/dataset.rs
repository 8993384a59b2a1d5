//! Paired low-light / well-lit datasets.
//!
//! On disk a dataset is a root directory with `low/` and `high/` subfolders
//! holding images with matching file stems. The synthetic generator produces
//! soft-shape scenes with a gamma-and-gain darkening model, enough structure
//! for the full objective to be informative.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, ImageTensor};

/// One aligned training example.
#[derive(Clone, Debug)]
pub struct ImagePair {
    /// File stem (or synthetic index) identifying the pair.
    pub name: String,
    pub low: ImageTensor,
    pub high: ImageTensor,
}

/// An ordered, validated collection of pairs.
#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Maps stem -> path for every image file in `dir`, rejecting stems that
/// appear twice (e.g. both `a.png` and `a.jpg`).
fn index_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut map = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if let Some(prev) = map.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!(
                "stem {stem:?} is ambiguous in {}: {} and {}",
                dir.display(),
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(map)
}

/// Loads `root/low` and `root/high` as a paired dataset, sorted by stem.
/// Files without a counterpart on the other side are skipped with a warning;
/// only an empty intersection is an error.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<PairedDataset> {
    let root = root.as_ref();
    let lows = index_dir(&root.join("low"))?;
    let highs = index_dir(&root.join("high"))?;
    for stem in lows.keys() {
        if !highs.contains_key(stem) {
            log::warn!("skipping {stem:?}: low image has no high counterpart");
        }
    }
    for stem in highs.keys() {
        if !lows.contains_key(stem) {
            log::warn!("skipping {stem:?}: high image has no low counterpart");
        }
    }
    let matched: Vec<&String> = lows.keys().filter(|s| highs.contains_key(*s)).collect();
    if matched.is_empty() {
        let list = |m: &BTreeMap<String, PathBuf>| {
            if m.is_empty() {
                "(empty)".to_string()
            } else {
                m.keys().cloned().collect::<Vec<_>>().join(", ")
            }
        };
        return Err(Error::Dataset(format!(
            "no matching image pairs under {}: low contains [{}], high contains [{}]",
            root.display(),
            list(&lows),
            list(&highs)
        )));
    }
    let mut pairs = Vec::with_capacity(matched.len());
    for stem in matched {
        let low = load_image(&lows[stem])?;
        let high = load_image(&highs[stem])?;
        if low.data().dim() != high.data().dim() {
            return Err(Error::Dataset(format!(
                "pair {stem:?} is misaligned: low is {}x{}x{}, high is {}x{}x{}",
                low.height(),
                low.width(),
                low.channels(),
                high.height(),
                high.width(),
                high.channels()
            )));
        }
        pairs.push(ImagePair {
            name: stem.clone(),
            low,
            high,
        });
    }
    log::info!("loaded {} pairs from {}", pairs.len(), root.display());
    Ok(PairedDataset { pairs })
}

/// Exponent of the synthetic darkening model `low = gain * high^1.2`.
const DARKEN_GAMMA: f64 = 1.2;

/// Deterministic synthetic pairs: well-lit scenes of a brightness ramp plus
/// soft colored blobs, darkened by a per-image gain and mild gamma.
pub fn synthetic_pairs(count: usize, h: usize, w: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for idx in 0..count {
        // Ramp direction and band of the well-lit scene.
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let lo = rng.random_range(0.35..0.5);
        let hi = rng.random_range(0.6..0.85);
        // Soft blobs with per-channel amplitudes.
        let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                let cx = rng.random_range(0.0..1.0);
                let cy = rng.random_range(0.0..1.0);
                let r = rng.random_range(0.12..0.3);
                let amp = [
                    rng.random_range(-0.3..0.35),
                    rng.random_range(-0.3..0.35),
                    rng.random_range(-0.3..0.35),
                ];
                (cx, cy, r, amp)
            })
            .collect();
        let gain = rng.random_range(0.12..0.3);

        let high = ImageTensor::from_fn(h, w, 3, |i, j, k| {
            let (x, y) = (j as f64 / w as f64, i as f64 / h as f64);
            let t = (x * dx + y * dy + 1.0) / 2.0;
            let mut v = lo + (hi - lo) * t;
            for (cx, cy, r, amp) in &blobs {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                v += amp[k] * (-d2 / (2.0 * r * r)).exp();
            }
            v.clamp(0.02, 0.98)
        })
        .expect("generated values are clamped");
        let low = ImageTensor::from_array(high.data().mapv(|v| gain * v.powf(DARKEN_GAMMA)))
            .expect("darkening keeps values in range");
        pairs.push(ImagePair {
            name: format!("synthetic{idx:03}"),
            low,
            high,
        });
    }
    pairs
}

/// Writes a synthetic dataset to `root/low` and `root/high` as PNGs.
pub fn write_synthetic_dataset(
    root: impl AsRef<Path>,
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    for sub in ["low", "high"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    for pair in synthetic_pairs(count, h, w, seed) {
        save_image(&pair.low, root.join("low").join(format!("{}.png", pair.name)))?;
        save_image(&pair.high, root.join("high").join(format!("{}.png", pair.name)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_pairs_are_deterministic_and_dark() {
        let a = synthetic_pairs(3, 16, 16, 5);
        let b = synthetic_pairs(3, 16, 16, 5);
        let c = synthetic_pairs(3, 16, 16, 6);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.low.data(), y.low.data());
            assert_eq!(x.high.data(), y.high.data());
        }
        assert_ne!(a[0].high.data(), c[0].high.data());
        for pair in &a {
            let mean_low: f64 = pair.low.data().mean().unwrap();
            let mean_high: f64 = pair.high.data().mean().unwrap();
            assert!(mean_low < mean_high * 0.5, "low image should be dark");
            // Non-degenerate content: some spatial variation.
            let lo = pair.high.data().iter().cloned().fold(f64::MAX, f64::min);
            let hi = pair.high.data().iter().cloned().fold(f64::MIN, f64::max);
            assert!(hi - lo > 0.1);
        }
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 4, 12, 16, 9).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        let names: Vec<&str> = ds.pairs.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["synthetic000", "synthetic001", "synthetic002", "synthetic003"]
        );
        let fresh = synthetic_pairs(4, 12, 16, 9);
        for (loaded, original) in ds.pairs.iter().zip(&fresh) {
            assert_eq!(loaded.low.data().dim(), (12, 16, 3));
            // 8-bit quantization allows up to 1/510 per value.
            assert!(loaded.high.max_abs_diff(&original.high).unwrap() < 0.003);
            assert!(loaded.low.max_abs_diff(&original.low).unwrap() < 0.003);
        }
    }

    #[test]
    fn skips_unpaired_and_rejects_misaligned_images() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 2, 8, 8, 1).unwrap();

        // Orphan images on either side are skipped, not fatal.
        let img = ImageTensor::constant(8, 8, 3, 0.5).unwrap();
        save_image(&img, dir.path().join("low").join("extra.png")).unwrap();
        save_image(&img, dir.path().join("high").join("other.png")).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        let names: Vec<&str> = ds.pairs.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["synthetic000", "synthetic001"]);

        // Misaligned pair dimensions stay a hard error.
        save_image(
            &ImageTensor::constant(4, 8, 3, 0.5).unwrap(),
            dir.path().join("high").join("synthetic000.png"),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("synthetic000"), "unhelpful error: {err}");
    }

    #[test]
    fn empty_intersection_error_lists_both_sides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("low")).unwrap();
        std::fs::create_dir_all(dir.path().join("high")).unwrap();
        let img = ImageTensor::constant(8, 8, 3, 0.5).unwrap();
        save_image(&img, dir.path().join("low").join("a.png")).unwrap();
        save_image(&img, dir.path().join("high").join("b.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("a") && err.contains("b"), "unhelpful error: {err}");
    }

    #[test]
    fn rejects_ambiguous_stems() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 1, 8, 8, 1).unwrap();
        // Same stem, second extension.
        let img = ImageTensor::constant(8, 8, 3, 0.5).unwrap();
        save_image(&img, dir.path().join("low").join("synthetic000.png")).unwrap();
        std::fs::copy(
            dir.path().join("low").join("synthetic000.png"),
            dir.path().join("low").join("synthetic000.jpg"),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("ambiguous"), "unhelpful error: {err}");
    }

    #[test]
    fn rejects_missing_and_empty_roots() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path().join("nope")).is_err());
        std::fs::create_dir_all(dir.path().join("low")).unwrap();
        std::fs::create_dir_all(dir.path().join("high")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn non_image_files_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 1, 8, 8, 1).unwrap();
        std::fs::write(dir.path().join("low").join("notes.txt"), b"hello").unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().len(), 1);
    }
}
