//! Synthetic 2D segmentation data: generation, labeled/unlabeled
//! splitting, and per-step batch sampling.
//!
//! Each image holds 1-3 random ellipses or rectangles of foreground over
//! a noisy background. Ground truth is rendered from the same shape
//! parameters as the intensities, so labels are pixel-exact. Every image
//! is derived from its own seed, so generation order (or parallelism)
//! cannot change content.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::label::LabelMap;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::tsr;

fn default_num_images() -> usize {
    200
}
fn default_num_test() -> usize {
    40
}
fn default_image_size() -> usize {
    64
}
fn default_num_classes() -> usize {
    2
}
fn default_radius_min() -> f64 {
    6.0
}
fn default_radius_max() -> f64 {
    11.0
}
fn default_noise_sigma() -> f64 {
    0.60
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Size of the training pool (split into labeled/unlabeled later).
    #[serde(default = "default_num_images")]
    pub num_images: usize,
    /// Held-out images used only for evaluation.
    #[serde(default = "default_num_test")]
    pub num_test: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Shape half-extents are drawn uniformly from this range (pixels).
    #[serde(default = "default_radius_min")]
    pub radius_min: f64,
    #[serde(default = "default_radius_max")]
    pub radius_max: f64,
    /// Stddev of the additive Gaussian pixel noise.
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_images: default_num_images(),
            num_test: default_num_test(),
            image_size: default_image_size(),
            num_classes: default_num_classes(),
            radius_min: default_radius_min(),
            radius_max: default_radius_max(),
            noise_sigma: default_noise_sigma(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images < 4 {
            return Err(config_err(format!(
                "num_images must be at least 4, got {}",
                self.num_images
            )));
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(config_err(format!(
                "image_size must be at least 16 and divisible by 4, got {}",
                self.image_size
            )));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(config_err(format!(
                "num_classes must be in [2, 256], got {}",
                self.num_classes
            )));
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return Err(config_err(format!(
                "radius range [{}, {}] is invalid",
                self.radius_min, self.radius_max
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(config_err(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One image with its pixel-exact ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// Row-major intensities in [0, 1], length image_size².
    pub pixels: Vec<f32>,
    /// Row-major class indices.
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Indices into `Dataset::train`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// One training step's inputs: two labeled images with ground truth and
/// two unlabeled images.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labeled_images: Tensor<f32>,
    pub ground_truth: LabelMap,
    pub unlabeled_images: Tensor<f32>,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    spec: DatasetSpec,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
}

struct Shape {
    rect: bool,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    class: u32,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if self.rect {
            dx.abs() <= self.rx && dy.abs() <= self.ry
        } else {
            let (u, v) = (dx / self.rx, dy / self.ry);
            u * u + v * v <= 1.0
        }
    }
}

fn render(spec: &DatasetSpec, image_seed: u64) -> Sample {
    let mut rng = Rng::new(image_seed);
    let s = spec.image_size;
    let num_shapes = 1 + rng.below(3) as usize;
    let shapes: Vec<Shape> = (0..num_shapes)
        .map(|_| Shape {
            rect: rng.uniform() < 0.5,
            cx: rng.uniform_range(0.0, s as f64),
            cy: rng.uniform_range(0.0, s as f64),
            rx: rng.uniform_range(spec.radius_min, spec.radius_max),
            ry: rng.uniform_range(spec.radius_min, spec.radius_max),
            class: 1 + rng.below(spec.num_classes as u64 - 1) as u32,
        })
        .collect();

    let mut labels = vec![0u32; s * s];
    for y in 0..s {
        for x in 0..s {
            for shape in &shapes {
                if shape.contains(x as f64, y as f64) {
                    labels[y * s + x] = shape.class;
                }
            }
        }
    }
    let pixels = labels
        .iter()
        .map(|&cls| {
            let base = if cls == 0 { 0.2 } else { 0.8 };
            (base + rng.normal() * spec.noise_sigma).clamp(0.0, 1.0) as f32
        })
        .collect();
    Sample {
        id: String::new(),
        pixels,
        labels,
    }
}

/// Builds the full dataset in memory. `generate_dataset` is this plus
/// serialization.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |prefix: &str, tag: &str, count: usize| -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let mut sample = render(spec, derive_seed(spec.seed, tag, i as u64));
                sample.id = format!("{prefix}_{i:04}");
                sample
            })
            .collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make("train", "datagen/train", spec.num_images),
        test: make("test", "datagen/test", spec.num_test),
    })
}

/// Writes `images/<id>.tsr`, `masks/<id>.tsr`, and `index.json`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let ds = build_dataset(spec)?;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let s = spec.image_size;
    for sample in ds.train.iter().chain(&ds.test) {
        let img = Tensor::new(vec![1, s, s], sample.pixels.clone())?;
        tsr::write_tensor(&dir.join("images").join(format!("{}.tsr", sample.id)), &img)?;
        let bytes: Vec<u8> = sample.labels.iter().map(|&c| c as u8).collect();
        tsr::write_u8(
            &dir.join("masks").join(format!("{}.tsr", sample.id)),
            &[s, s],
            &bytes,
        )?;
    }
    let index = Index {
        spec: spec.clone(),
        train_ids: ds.train.iter().map(|s| s.id.clone()).collect(),
        test_ids: ds.test.iter().map(|s| s.id.clone()).collect(),
    };
    fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index).expect("index serializes"),
    )?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fs::read_to_string(dir.join("index.json"))?;
    let index: Index = serde_json::from_str(&raw)
        .map_err(|e| config_err(format!("invalid index.json: {e}")))?;
    index.spec.validate()?;
    let s = index.spec.image_size;
    let load_side = |ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let img: Tensor<f32> =
                    tsr::read_tensor(&dir.join("images").join(format!("{id}.tsr")))?;
                if img.dims() != [1, s, s] {
                    return Err(config_err(format!(
                        "image {id} has dims {:?}, expected [1, {s}, {s}]",
                        img.dims()
                    )));
                }
                let (mdims, mask) = tsr::read_u8(&dir.join("masks").join(format!("{id}.tsr")))?;
                if mdims != [s, s] {
                    return Err(config_err(format!(
                        "mask {id} has dims {mdims:?}, expected [{s}, {s}]"
                    )));
                }
                let labels: Vec<u32> = mask.iter().map(|&b| b as u32).collect();
                if let Some(&bad) = labels
                    .iter()
                    .find(|&&c| c as usize >= index.spec.num_classes)
                {
                    return Err(config_err(format!(
                        "mask {id} contains class {bad} outside [0, {})",
                        index.spec.num_classes
                    )));
                }
                Ok(Sample {
                    id: id.clone(),
                    pixels: img.into_data(),
                    labels,
                })
            })
            .collect()
    };
    Ok(Dataset {
        spec: index.spec.clone(),
        train: load_side(&index.train_ids)?,
        test: load_side(&index.test_ids)?,
    })
}

/// Seed-deterministic disjoint, exhaustive labeled/unlabeled split of the
/// training pool. The labeled count is round(ratio · n).
pub fn split(num_train: usize, labeled_ratio: f64, seed: u64) -> Result<Split> {
    if !(labeled_ratio > 0.0 && labeled_ratio < 1.0) {
        return Err(config_err(format!(
            "labeled_ratio must be in (0, 1), got {labeled_ratio}"
        )));
    }
    let num_labeled = (labeled_ratio * num_train as f64).round() as usize;
    if num_labeled < 2 || num_train - num_labeled < 2 {
        return Err(config_err(format!(
            "split of {num_train} images at ratio {labeled_ratio} leaves {num_labeled} labeled \
             and {} unlabeled; both sides need at least 2",
            num_train - num_labeled
        )));
    }
    let mut ids: Vec<usize> = (0..num_train).collect();
    let mut rng = Rng::new(derive_seed(seed, "split", 0));
    rng.shuffle(&mut ids);
    let mut labeled: Vec<usize> = ids[..num_labeled].to_vec();
    let mut unlabeled: Vec<usize> = ids[num_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(Split { labeled, unlabeled })
}

/// Index into `ids` for the `global`-th draw of a side, under a
/// per-epoch shuffle keyed by (seed, side, epoch): within one epoch
/// every id is used before any repeats.
fn epoch_pick(ids: &[usize], side: &str, global: usize, seed: u64) -> usize {
    let (epoch, pos) = (global / ids.len(), global % ids.len());
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = Rng::new(derive_seed(seed, side, epoch as u64));
    rng.shuffle(&mut order);
    ids[order[pos]]
}

/// Draws `num_labeled` labeled + `num_unlabeled` unlabeled images for
/// one step. Pure in (dataset, split, step, seed, counts).
pub fn sample_batch(
    dataset: &Dataset,
    split: &Split,
    step: usize,
    seed: u64,
    num_labeled: usize,
    num_unlabeled: usize,
) -> Result<Batch> {
    if num_labeled == 0 || num_unlabeled == 0 {
        return Err(config_err("batch sizes must be positive".to_string()));
    }
    let s = dataset.spec.image_size;
    let pick = |side: &str, ids: &[usize], count: usize| -> Vec<&Sample> {
        (0..count)
            .map(|j| &dataset.train[epoch_pick(ids, side, count * step + j, seed)])
            .collect()
    };
    let labeled = pick("batch/labeled", &split.labeled, num_labeled);
    let unlabeled = pick("batch/unlabeled", &split.unlabeled, num_unlabeled);

    let stack_images = |samples: &[&Sample]| -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(samples.len() * s * s);
        for sample in samples {
            data.extend_from_slice(&sample.pixels);
        }
        Tensor::new(vec![samples.len(), 1, s, s], data)
    };
    let mut gt = Vec::with_capacity(labeled.len() * s * s);
    for sample in &labeled {
        gt.extend_from_slice(&sample.labels);
    }
    Ok(Batch {
        labeled_images: stack_images(&labeled)?,
        ground_truth: LabelMap::new([labeled.len(), s, s], gt)?,
        unlabeled_images: stack_images(&unlabeled)?,
        step,
    })
}

/// `[1, 1, S, S]` tensor for a single sample, for evaluation.
pub fn single_image(sample: &Sample, image_size: usize) -> Result<Tensor<f32>> {
    Tensor::new(vec![1, 1, image_size, image_size], sample.pixels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_images: 12,
            num_test: 4,
            image_size: 32,
            seed: 9,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let spec = small_spec();
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        for sub in ["images", "masks"] {
            let mut names: Vec<_> = fs::read_dir(d1.path().join(sub))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            assert!(!names.is_empty());
            for name in names {
                let a = fs::read(d1.path().join(sub).join(&name)).unwrap();
                let b = fs::read(d2.path().join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "{name:?} differs");
            }
        }
        assert_eq!(
            fs::read(d1.path().join("index.json")).unwrap(),
            fs::read(d2.path().join("index.json")).unwrap()
        );
    }

    #[test]
    fn roundtrip_through_disk_preserves_samples() {
        let spec = small_spec();
        let dir = tempdir().unwrap();
        let built = generate_dataset(&spec, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.train.len(), built.train.len());
        for (a, b) in built.train.iter().zip(&loaded.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn binary_masks_and_intensity_range() {
        let ds = build_dataset(&DatasetSpec {
            num_images: 30,
            num_test: 2,
            seed: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        for sample in ds.train.iter().chain(&ds.test) {
            assert!(sample.labels.iter().all(|&c| c <= 1));
            assert!(sample
                .pixels
                .iter()
                .all(|&p| (0.0..=1.0).contains(&p) && p.is_finite()));
        }
    }

    #[test]
    fn foreground_fraction_is_moderate_over_corpus() {
        let ds = build_dataset(&DatasetSpec {
            num_images: 200,
            num_test: 0,
            ..DatasetSpec::default()
        })
        .unwrap();
        let total: usize = ds.train.iter().map(|s| s.labels.len()).sum();
        let fg: usize = ds
            .train
            .iter()
            .map(|s| s.labels.iter().filter(|&&c| c != 0).count())
            .sum();
        let frac = fg as f64 / total as f64;
        assert!(
            (0.05..=0.60).contains(&frac),
            "foreground fraction {frac} outside [0.05, 0.60]"
        );
        // every image contains some foreground
        assert!(ds
            .train
            .iter()
            .all(|s| s.labels.iter().any(|&c| c != 0)));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_sized() {
        let sp = split(200, 0.05, 77).unwrap();
        assert_eq!(sp.labeled.len(), 10);
        assert_eq!(sp.unlabeled.len(), 190);
        let mut all: Vec<usize> = sp.labeled.iter().chain(&sp.unlabeled).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());

        assert_eq!(split(200, 0.10, 77).unwrap().labeled.len(), 20);
        assert_eq!(split(200, 0.05, 77).unwrap(), sp);
        assert_ne!(split(200, 0.05, 78).unwrap(), sp);
    }

    #[test]
    fn degenerate_splits_are_config_errors() {
        assert!(split(200, 0.0, 1).is_err());
        assert!(split(200, 1.0, 1).is_err());
        assert!(split(20, 0.05, 1).is_err()); // would leave 1 labeled
        assert!(split(4, 0.9, 1).is_err()); // would leave <2 unlabeled
    }

    #[test]
    fn batches_are_deterministic_and_shaped() {
        let ds = build_dataset(&small_spec()).unwrap();
        let sp = split(ds.train.len(), 0.25, 5).unwrap();
        let a = sample_batch(&ds, &sp, 3, 5, 2, 2).unwrap();
        let b = sample_batch(&ds, &sp, 3, 5, 2, 2).unwrap();
        assert_eq!(a.labeled_images.data(), b.labeled_images.data());
        assert_eq!(a.unlabeled_images.data(), b.unlabeled_images.data());
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.labeled_images.dims(), &[2, 1, 32, 32]);
        assert_eq!(a.unlabeled_images.dims(), &[2, 1, 32, 32]);
        assert_eq!(a.ground_truth.dims(), [2, 32, 32]);
    }

    #[test]
    fn epoch_sampling_covers_every_unlabeled_id() {
        let ds = build_dataset(&DatasetSpec {
            num_images: 50,
            num_test: 0,
            image_size: 16,
            radius_min: 3.0,
            radius_max: 6.0,
            seed: 2,
            ..DatasetSpec::default()
        })
        .unwrap();
        let sp = split(ds.train.len(), 0.1, 3).unwrap();
        let mut seen = vec![false; 50];
        for g in 0..400 {
            seen[epoch_pick(&sp.unlabeled, "batch/unlabeled", g, 3)] = true;
        }
        for &i in &sp.unlabeled {
            assert!(seen[i], "unlabeled id {i} never sampled");
        }
        // within one epoch (45 draws span ids once) no id repeats
        let mut first_epoch: Vec<usize> = (0..45)
            .map(|g| epoch_pick(&sp.unlabeled, "batch/unlabeled", g, 3))
            .collect();
        first_epoch.sort_unstable();
        first_epoch.dedup();
        assert_eq!(first_epoch.len(), 45);
    }

    #[test]
    fn labeled_ids_never_leak_into_the_unlabeled_stream() {
        let ds = build_dataset(&small_spec()).unwrap();
        let sp = split(ds.train.len(), 0.25, 5).unwrap();
        for g in 0..100 {
            let u = epoch_pick(&sp.unlabeled, "batch/unlabeled", g, 5);
            assert!(sp.unlabeled.contains(&u));
            assert!(!sp.labeled.contains(&u));
        }
    }
}
