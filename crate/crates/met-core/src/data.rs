//! Dataset files and the synthetic grating generator.
//!
//! On disk a dataset is `data.json` (manifest), `images.bin` (little-endian
//! `f32`, `N x 3 x H x W`) and `labels.bin` (little-endian `u32`, `N`).
//! The synthetic task gives every class a distinct seeded sinusoidal grating
//! plus per-sample Gaussian pixel noise, so the same seed always reproduces
//! the same bytes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MetError, Result};
use crate::vit::ImageBatch;

pub const NOISE_SIGMA: f64 = 0.3;

/// On-disk description of a dataset directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images_file: String,
    pub labels_file: String,
}

/// An in-memory dataset: `f64` pixels in `N x 3 x H x W` layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixel_stride(&self) -> usize {
        3 * self.height * self.width
    }

    /// Gather the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let stride = self.pixel_stride();
        let mut images = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(MetError::Index(format!("sample {i} out of {}", self.len())));
            }
            images.extend_from_slice(&self.images[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        ImageBatch::new(indices.len(), self.height, self.width, images, labels)
    }

    pub fn full_batch(&self) -> Result<ImageBatch> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }

    /// Deterministically hold out `fraction` of the samples (at least one per
    /// split when possible); returns `(kept, held_out)`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(MetError::Config(format!(
                "holdout fraction {fraction} not in [0, 1)"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let held = ((n as f64 * fraction).round() as usize).min(n - 1);
        let (held_idx, kept_idx) = order.split_at(held);
        let gather = |idx: &[usize]| -> Dataset {
            let stride = self.pixel_stride();
            let mut images = Vec::with_capacity(idx.len() * stride);
            let mut labels = Vec::with_capacity(idx.len());
            let mut sorted = idx.to_vec();
            sorted.sort_unstable();
            for &i in &sorted {
                images.extend_from_slice(&self.images[i * stride..(i + 1) * stride]);
                labels.push(self.labels[i]);
            }
            Dataset {
                height: self.height,
                width: self.width,
                num_classes: self.num_classes,
                images,
                labels,
            }
        };
        Ok((gather(kept_idx), gather(held_idx)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            samples: self.len(),
            channels: 3,
            height: self.height,
            width: self.width,
            classes: self.num_classes,
            images_file: "images.bin".into(),
            labels_file: "labels.bin".into(),
        };
        fs::write(dir.join("data.json"), serde_json::to_vec_pretty(&manifest)?)?;

        let mut image_bytes = Vec::with_capacity(self.images.len() * 4);
        for &v in &self.images {
            image_bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(&manifest.images_file), image_bytes)?;

        let mut label_bytes = Vec::with_capacity(self.labels.len() * 4);
        for &l in &self.labels {
            label_bytes.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(dir.join(&manifest.labels_file), label_bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("data.json"))?)?;
        if manifest.channels != 3 {
            return Err(MetError::Data(format!(
                "expected 3 channels, manifest declares {}",
                manifest.channels
            )));
        }
        let image_bytes = fs::read(dir.join(&manifest.images_file))?;
        let expected = manifest.samples * 3 * manifest.height * manifest.width * 4;
        if image_bytes.len() != expected {
            return Err(MetError::Data(format!(
                "{} has {} bytes, manifest expects {expected}",
                manifest.images_file,
                image_bytes.len()
            )));
        }
        let label_bytes = fs::read(dir.join(&manifest.labels_file))?;
        if label_bytes.len() != manifest.samples * 4 {
            return Err(MetError::Data(format!(
                "{} has {} bytes, manifest expects {}",
                manifest.labels_file,
                label_bytes.len(),
                manifest.samples * 4
            )));
        }
        let images: Vec<f64> = image_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let labels: Vec<usize> = label_bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= manifest.classes) {
            return Err(MetError::Data(format!(
                "label {bad} out of range for {} classes",
                manifest.classes
            )));
        }
        Ok(Dataset {
            height: manifest.height,
            width: manifest.width,
            num_classes: manifest.classes,
            images,
            labels,
        })
    }
}

/// Per-class grating parameters derived from the task seed.
fn class_pattern(seed: u64, class: usize, num_classes: usize) -> (f64, f64, f64) {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1)));
    // evenly spread base orientations with a small jitter keep classes apart
    let theta =
        std::f64::consts::PI * (class as f64 + rng.gen_range(0.0..0.4)) / num_classes as f64;
    let freq = 2.0 + (class % 4) as f64 + rng.gen_range(0.0..0.8);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    (theta, freq, phase)
}

/// Generate `classes * per_class` grating samples with Gaussian pixel noise.
///
/// Class patterns depend only on `(seed, class)`; sample noise depends on
/// `(seed, class, sample_offset + j)`, so disjoint offset ranges under one
/// seed yield train/test splits of the same task. Samples are class-major.
pub fn generate_synthetic(
    seed: u64,
    classes: usize,
    per_class: usize,
    image_size: usize,
    sigma: f64,
    sample_offset: usize,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(MetError::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if per_class == 0 || image_size == 0 {
        return Err(MetError::Config(
            "per_class and image_size must be positive".into(),
        ));
    }
    let s = image_size;
    let stride = 3 * s * s;
    let mut images = Vec::with_capacity(classes * per_class * stride);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let (theta, freq, phase) = class_pattern(seed, c, classes);
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let mut pattern = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 + 0.5) / s as f64;
                let v = (y as f64 + 0.5) / s as f64;
                pattern
                    .push((std::f64::consts::TAU * freq * (u * cos_t + v * sin_t) + phase).sin());
            }
        }
        for j in 0..per_class {
            let sample_id = (sample_offset + j) as u64;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x517c_c1b7_2722_0a95) ^ (c as u64) << 32 ^ sample_id,
            );
            for _ in 0..3 {
                for &p in &pattern {
                    let noise: f64 = noise_rng.sample(StandardNormal);
                    images.push(p + sigma * noise);
                }
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        height: s,
        width: s,
        num_classes: classes,
        images,
        labels,
    })
}

/// Nearest-centroid classification accuracy in pixel space, with centroids
/// from `train`; the learnability oracle for the synthetic task.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let stride = 3 * train.height * train.width;
    let mut centroids = vec![vec![0.0; stride]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for (i, &label) in train.labels.iter().enumerate() {
        counts[label] += 1;
        for (t, &v) in train.images[i * stride..(i + 1) * stride]
            .iter()
            .enumerate()
        {
            centroids[label][t] += v;
        }
    }
    for (centroid, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for v in centroid.iter_mut() {
                *v /= count as f64;
            }
        }
    }
    let mut correct = 0;
    for (i, &label) in test.labels.iter().enumerate() {
        let sample = &test.images[i * stride..(i + 1) * stride];
        let mut best = (f64::INFINITY, 0);
        for (c, centroid) in centroids.iter().enumerate() {
            let dist: f64 = sample
                .iter()
                .zip(centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        if best.1 == label {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = generate_synthetic(7, 3, 4, 8, NOISE_SIGMA, 0).unwrap();
        let b = generate_synthetic(7, 3, 4, 8, NOISE_SIGMA, 0).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn zero_noise_makes_class_samples_identical() {
        let d = generate_synthetic(7, 2, 3, 8, 0.0, 0).unwrap();
        let stride = 3 * 64;
        assert_eq!(&d.images[0..stride], &d.images[stride..2 * stride]);
        // different classes still differ
        assert_ne!(&d.images[0..stride], &d.images[3 * stride..4 * stride]);
    }

    #[test]
    fn offsets_share_patterns_but_not_noise() {
        let train = generate_synthetic(7, 2, 2, 8, NOISE_SIGMA, 0).unwrap();
        let test = generate_synthetic(7, 2, 2, 8, NOISE_SIGMA, 2).unwrap();
        assert_ne!(train.images, test.images);
        // denoised means agree because the underlying patterns are shared
        let clean_a = generate_synthetic(7, 2, 1, 8, 0.0, 0).unwrap();
        let clean_b = generate_synthetic(7, 2, 1, 8, 0.0, 5).unwrap();
        assert_eq!(clean_a.images, clean_b.images);
    }

    #[test]
    fn nearest_centroid_oracle_learns_the_task() {
        let train = generate_synthetic(11, 4, 50, 32, NOISE_SIGMA, 0).unwrap();
        let test = generate_synthetic(11, 4, 50, 32, NOISE_SIGMA, 50).unwrap();
        let acc = nearest_centroid_accuracy(&train, &test);
        assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn save_load_round_trip_at_f32() {
        let d = generate_synthetic(5, 2, 3, 8, NOISE_SIGMA, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("met-data-{}", std::process::id()));
        d.save(&dir).unwrap();
        let loaded = Dataset::load(&dir).unwrap();
        assert_eq!(loaded.labels, d.labels);
        for (a, b) in loaded.images.iter().zip(&d.images) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loader_rejects_out_of_range_labels() {
        let d = generate_synthetic(5, 2, 2, 8, NOISE_SIGMA, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("met-badlabel-{}", std::process::id()));
        d.save(&dir).unwrap();
        // corrupt one label beyond the declared class count
        let mut bytes = std::fs::read(dir.join("labels.bin")).unwrap();
        bytes[0..4].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(dir.join("labels.bin"), bytes).unwrap();
        assert!(matches!(Dataset::load(&dir), Err(MetError::Data(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loader_rejects_size_mismatch() {
        let d = generate_synthetic(5, 2, 2, 8, NOISE_SIGMA, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("met-badsize-{}", std::process::id()));
        d.save(&dir).unwrap();
        let mut bytes = std::fs::read(dir.join("images.bin")).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(dir.join("images.bin"), bytes).unwrap();
        let err = Dataset::load(&dir).unwrap_err().to_string();
        assert!(err.contains("bytes"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn holdout_split_partitions_samples() {
        let d = generate_synthetic(5, 2, 10, 8, NOISE_SIGMA, 0).unwrap();
        let (kept, held) = d.split_holdout(0.25, 3).unwrap();
        assert_eq!(kept.len() + held.len(), 20);
        assert_eq!(held.len(), 5);
        let (k2, h2) = d.split_holdout(0.25, 3).unwrap();
        assert_eq!(kept.labels, k2.labels);
        assert_eq!(held.images, h2.images);
    }
}
