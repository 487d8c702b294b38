//! Patch-based U-Net training with momentum SGD.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SgdState, Tensor};
use crate::error::{Error, Result};
use crate::infer::{sliding_window_predict, threshold_mask, DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::raster::{self, generate_blob_scene, BinaryMask, LabelMask, Raster};
use crate::remap::{augment_with, sample_patches, AugmentConfig, Patch};
use crate::unet::{check_tiling, UNetConfig, UNetModel};
use crate::weightmap::{compute_weight_map, WeightConfig, WeightMap};

pub const METRICS_HEADER: &str = "iter,loss,pixel_accuracy,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: UNetConfig,
    pub lr: f64,
    pub momentum: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    /// Rescale the batch gradient to at most this L2 norm.
    pub clip_grad_norm: Option<f64>,
    pub batch_size: usize,
    pub patch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    pub weights: WeightConfig,
    pub augment: AugmentConfig,
    /// Inference settings used when evaluating full scenes.
    pub window: usize,
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            lr: 0.01,
            momentum: 0.99,
            decay_every: 4000,
            decay_factor: 0.1,
            clip_grad_norm: Some(1.0),
            batch_size: 4,
            patch_size: 64,
            iterations: 300,
            seed: 0,
            weights: WeightConfig::default(),
            augment: AugmentConfig::default(),
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        SgdState::new(self.lr, self.momentum)?;
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("gradient clip must be > 0, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        check_tiling(&self.model, self.patch_size, self.patch_size)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An image with its labels and precomputed loss weights.
#[derive(Clone, Debug)]
pub struct TrainingScene {
    pub image: Raster,
    pub labels: LabelMask,
    pub weights: WeightMap,
}

impl TrainingScene {
    pub fn new(image: Raster, labels: LabelMask, cfg: &WeightConfig) -> Result<Self> {
        if (image.width(), image.height()) != (labels.width(), labels.height()) {
            return Err(Error::Shape(format!(
                "image is {}x{} but labels are {}x{}",
                image.width(),
                image.height(),
                labels.width(),
                labels.height()
            )));
        }
        let weights = compute_weight_map(&labels, cfg)?;
        Ok(Self {
            image,
            labels,
            weights,
        })
    }
}

pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Default blob count for a synthetic scene of the given size.
pub fn default_blob_count(width: usize, height: usize) -> usize {
    ((width * height) / 1536).max(3)
}

/// `n` blob scenes with per-scene seeds derived from `seed`.
pub fn synthetic_scenes(seed: u64, n: usize, width: usize, height: usize) -> Result<Vec<(Raster, LabelMask)>> {
    (0..n as u64)
        .map(|i| {
            let s = generate_blob_scene(mix_seed(seed, i), width, height, default_blob_count(width, height))?;
            Ok((s.image, s.labels))
        })
        .collect()
}

/// Pairs `<name>_image.{ppm,pgm,vcat}` with `<name>_mask.pgm` in `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(Raster, LabelMask)>> {
    let dir = dir.as_ref();
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.ends_with("_image"))
        })
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::Config(format!("no *_image files in {}", dir.display())));
    }
    images
        .into_iter()
        .map(|img_path| {
            let stem = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let base = stem.trim_end_matches("_image");
            let mask_path = dir.join(format!("{base}_mask.pgm"));
            let image = raster::load_raster(&img_path)?;
            let mask = raster::load_mask(&mask_path)?;
            Ok((image, mask.to_label_mask()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iter: u64,
    /// Weighted mean cross-entropy over the batch.
    pub loss: f64,
    pub pixel_accuracy: f64,
    /// Learning rate used for this iteration's update.
    pub lr: f64,
    /// Batch gradient norm before clipping.
    pub grad_norm: f64,
    pub positive_patches: usize,
    pub batch_size: usize,
}

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{}", self.iter, self.loss, self.pixel_accuracy, self.lr)
    }
}

fn argmax_accuracy(logits: &Tensor<f32>, labels: &[u32]) -> Result<usize> {
    let (k, h, w) = logits.chw()?;
    let n = h * w;
    let v = logits.values();
    Ok((0..n)
        .filter(|&i| {
            let best = (1..k).fold(0, |b, c| if v[c * n + i] > v[b * n + i] { c } else { b });
            best as u32 == labels[i]
        })
        .count())
}

pub struct Trainer {
    config: TrainConfig,
    model: UNetModel<f32>,
    sgd: SgdState,
    scenes: Vec<TrainingScene>,
    iter: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Vec<(Raster, LabelMask)>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let scenes = data
            .into_par_iter()
            .map(|(img, labels)| {
                if img.channels() != config.model.in_channels {
                    return Err(Error::Shape(format!(
                        "scene has {} channels, model expects {}",
                        img.channels(),
                        config.model.in_channels
                    )));
                }
                if labels.classes() > config.model.n_classes {
                    return Err(Error::Label {
                        label: labels.classes() as u32 - 1,
                        classes: config.model.n_classes,
                    });
                }
                TrainingScene::new(img, labels, &config.weights)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = UNetModel::build(config.model.clone(), config.seed)?;
        let sgd = SgdState::new(config.lr, config.momentum)?.with_decay(config.decay_every, config.decay_factor);
        Ok(Self {
            config,
            model,
            sgd,
            scenes,
            iter: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &UNetModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> UNetModel<f32> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    /// The augmented batch used at iteration `iter`.
    pub fn batch(&self, iter: u64) -> Result<Vec<Patch>> {
        let seed = mix_seed(self.config.seed, iter + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = &self.scenes[rng.random_range(0..self.scenes.len())];
        let batch = sample_patches(
            &scene.image,
            &scene.labels,
            &scene.weights,
            self.config.patch_size,
            self.config.batch_size,
            rng.random(),
        )?;
        batch
            .patches
            .iter()
            .map(|p| augment_with(p, rng.random(), &self.config.augment))
            .collect()
    }

    pub fn step(&mut self) -> Result<IterationMetrics> {
        let patches = self.batch(self.iter)?;
        let total_weight: f64 = patches.iter().flat_map(|p| p.weight.values()).sum();
        let scale = (1.0 / total_weight) as f32;
        let results = patches
            .par_iter()
            .map(|p| {
                let input = Tensor::new(
                    vec![p.image.channels(), p.image.height(), p.image.width()],
                    p.image.data().to_vec(),
                )?;
                let weights: Vec<f32> = p.weight.values().iter().map(|&w| w as f32).collect();
                let (loss, grads, logits) = self.model.loss_and_grads(input, p.label.labels(), &weights, scale)?;
                let correct = argmax_accuracy(&logits, p.label.labels())?;
                Ok((loss, grads, correct, p.label.labels().len()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads: Vec<Vec<f32>> = self.model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let (mut loss, mut correct, mut pixels) = (0f64, 0usize, 0usize);
        for (l, g, c, n) in results {
            loss += l as f64;
            correct += c;
            pixels += n;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        let grad_norm = grads
            .iter()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if let Some(max) = self.config.clip_grad_norm {
            if grad_norm > max {
                let k = (max / grad_norm) as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= k);
            }
        }
        let metrics = IterationMetrics {
            iter: self.iter,
            loss,
            pixel_accuracy: correct as f64 / pixels as f64,
            lr: self.sgd.lr,
            grad_norm,
            positive_patches: patches.iter().filter(|p| p.has_positive()).count(),
            batch_size: patches.len(),
        };
        self.sgd.step(self.model.params_mut(), &grads)?;
        self.iter += 1;
        Ok(metrics)
    }

    /// Runs `iterations` steps, handing each row to `on_iter`.
    pub fn run(
        &mut self,
        iterations: u64,
        mut on_iter: impl FnMut(&IterationMetrics) -> Result<()>,
    ) -> Result<Vec<IterationMetrics>> {
        let mut rows = Vec::with_capacity(iterations as usize);
        for _ in 0..iterations {
            let m = self.step()?;
            if m.iter % 50 == 0 {
                info!("iter {} loss {:.4} acc {:.3} lr {}", m.iter, m.loss, m.pixel_accuracy, m.lr);
            }
            if m.positive_patches < m.batch_size.div_ceil(2) {
                warn!("iter {}: only {} positive patches", m.iter, m.positive_patches);
            }
            on_iter(&m)?;
            rows.push(m);
        }
        Ok(rows)
    }
}

/// Appends metric rows to a CSV file, writing the header first.
pub struct MetricsWriter {
    file: fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn pixel_accuracy(predicted: &BinaryMask, truth: &LabelMask) -> Result<f64> {
    if (predicted.width(), predicted.height()) != (truth.width(), truth.height()) {
        return Err(Error::Shape("prediction and truth differ in size".into()));
    }
    let fg = truth.foreground();
    let agree = predicted.bits().iter().zip(fg.bits()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / fg.bits().len() as f64)
}

/// Pixel accuracy of thresholded sliding-window predictions, pooled over scenes.
pub fn evaluate(
    model: &UNetModel<f32>,
    scenes: &[(Raster, LabelMask)],
    window: usize,
    stride: usize,
) -> Result<f64> {
    let mut agree = 0f64;
    let mut total = 0f64;
    for (img, labels) in scenes {
        let pred = sliding_window_predict(model, img, window, stride, None)?;
        let mask = threshold_mask(&pred.map, 0.5)?;
        let n = (img.width() * img.height()) as f64;
        agree += pixel_accuracy(&mask, labels)? * n;
        total += n;
    }
    Ok(agree / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig {
            model: UNetConfig {
                in_channels: 3,
                n_classes: 2,
                depth: 2,
                base_channels: 4,
                ..UNetConfig::default()
            },
            batch_size: 3,
            patch_size: 32,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_json() {
        let c = TrainConfig::default();
        assert_eq!((c.window, c.stride), (144, 32));
        assert_eq!((c.momentum, c.decay_every, c.decay_factor), (0.99, 4000, 0.1));
        assert_eq!((c.weights.w0, c.weights.sigma), (10.0, 5.0));
        let partial: TrainConfig = serde_json::from_str(r#"{"lr": 0.5, "model": {"in_channels": 1, "n_classes": 2, "depth": 2, "base_channels": 8}}"#).unwrap();
        assert_eq!(partial.lr, 0.5);
        assert_eq!(partial.momentum, 0.99);
        assert_eq!(partial.model.depth, 2);
        let bad = TrainConfig {
            patch_size: 30,
            model: UNetConfig {
                depth: 2,
                ..UNetConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeds_are_deterministic() {
        let data = synthetic_scenes(1, 2, 48, 48).unwrap();
        let mut a = Trainer::new(small_config(), data.clone()).unwrap();
        let mut b = Trainer::new(small_config(), data).unwrap();
        let ra = a.run(3, |_| Ok(())).unwrap();
        let rb = b.run(3, |_| Ok(())).unwrap();
        assert_eq!(ra, rb);
        for (p, q) in a.model().params().iter().zip(b.model().params()) {
            assert_eq!(p.values(), q.values());
        }
    }

    #[test]
    fn batches_are_half_positive() {
        let t = Trainer::new(small_config(), synthetic_scenes(2, 3, 48, 48).unwrap()).unwrap();
        for it in 0..20 {
            let b = t.batch(it).unwrap();
            assert!(b.iter().filter(|p| p.has_positive()).count() >= 2);
        }
    }

    #[test]
    fn loss_decreases_on_one_scene() {
        let mut cfg = small_config();
        cfg.momentum = 0.9;
        cfg.lr = 0.05;
        let mut t = Trainer::new(cfg, synthetic_scenes(3, 1, 32, 32).unwrap()).unwrap();
        let rows = t.run(40, |_| Ok(())).unwrap();
        let first: f64 = rows[..5].iter().map(|m| m.loss).sum();
        let last: f64 = rows[35..].iter().map(|m| m.loss).sum();
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn lr_drops_at_decay_boundary() {
        let mut cfg = small_config();
        cfg.decay_every = 3;
        cfg.lr = 1e-3;
        let mut t = Trainer::new(cfg, synthetic_scenes(4, 1, 32, 32).unwrap()).unwrap();
        let rows = t.run(4, |_| Ok(())).unwrap();
        assert_eq!(rows[2].lr, 1e-3);
        assert!((rows[3].lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn metrics_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let mut t = Trainer::new(small_config(), synthetic_scenes(4, 1, 32, 32).unwrap()).unwrap();
        t.run(2, |m| w.write(m)).unwrap();
        drop(w);
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn dataset_directory() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_blob_scene(1, 32, 32, 3).unwrap();
        raster::save_raster(&s.image, dir.path().join("a_image.ppm")).unwrap();
        raster::save_mask(&s.labels.foreground(), dir.path().join("a_mask.pgm")).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].1.labels(), s.labels.labels());
        assert!(load_dataset(tempfile::tempdir().unwrap().path()).is_err());
    }

    #[test]
    fn accuracy_of_perfect_prediction() {
        let s = generate_blob_scene(2, 32, 32, 3).unwrap();
        assert_eq!(pixel_accuracy(&s.labels.foreground(), &s.labels).unwrap(), 1.0);
    }
}
