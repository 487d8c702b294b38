//! Synthetic vegetation scenes: textured ellipses over a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMask, Raster};
use crate::error::{Error, Result};

pub const MIN_SCENE_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneStyle {
    pub background: [f32; 3],
    pub background_noise: f32,
    pub vegetation: [f32; 3],
    pub vegetation_noise: f32,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            background: [0.60, 0.50, 0.40],
            background_noise: 0.08,
            vegetation: [0.15, 0.42, 0.15],
            vegetation_noise: 0.03,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlobScene {
    pub image: Raster,
    pub labels: LabelMask,
    pub ellipses: Vec<Ellipse>,
}

pub fn sample_ellipses(rng: &mut impl Rng, width: usize, height: usize, n: usize) -> Vec<Ellipse> {
    let max_axis = (width.min(height) as f64 / 8.0).max(4.0);
    (0..n)
        .map(|_| Ellipse {
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            a: rng.random_range(3.0..max_axis),
            b: rng.random_range(3.0..max_axis),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

/// Rasterizes `ellipses` with pixel (x, y) sampled at integer coordinates.
pub fn render_scene(
    ellipses: &[Ellipse],
    width: usize,
    height: usize,
    noise_seed: u64,
    style: &SceneStyle,
) -> (Raster, LabelMask) {
    let labels: Vec<u32> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| u32::from(ellipses.iter().any(|e| e.contains(x as f64, y as f64))))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let bg = Normal::new(0.0f32, style.background_noise).expect("noise std >= 0");
    let veg = Normal::new(0.0f32, style.vegetation_noise).expect("noise std >= 0");
    let mut data = vec![0.0f32; 3 * width * height];
    for c in 0..3 {
        for (i, &l) in labels.iter().enumerate() {
            let v = if l > 0 {
                style.vegetation[c] + veg.sample(&mut rng)
            } else {
                style.background[c] + bg.sample(&mut rng)
            };
            data[c * width * height + i] = v.clamp(0.0, 1.0);
        }
    }
    let image = Raster::new(width, height, 3, data).expect("scene extent");
    let labels = LabelMask::new(width, height, 2, labels).expect("binary labels");
    (image, labels)
}

/// Deterministic scene of `n_blobs` random ellipses (label 1) over background (label 0).
pub fn generate_blob_scene(seed: u64, width: usize, height: usize, n_blobs: usize) -> Result<BlobScene> {
    if width < MIN_SCENE_SIDE || height < MIN_SCENE_SIDE {
        return Err(Error::Size(format!(
            "synthetic scenes need sides >= {MIN_SCENE_SIDE}, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipses = sample_ellipses(&mut rng, width, height, n_blobs);
    let noise_seed = rng.random();
    let (image, labels) = render_scene(&ellipses, width, height, noise_seed, &SceneStyle::default());
    Ok(BlobScene {
        image,
        labels,
        ellipses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let a = generate_blob_scene(7, 64, 48, 4).unwrap();
        let b = generate_blob_scene(7, 64, 48, 4).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn no_blobs_no_foreground() {
        let s = generate_blob_scene(3, 40, 40, 0).unwrap();
        assert_eq!(s.labels.count_nonzero(), 0);
    }

    #[test]
    fn too_small_scene() {
        assert!(generate_blob_scene(1, 31, 64, 1).is_err());
    }

    #[test]
    fn foreground_matches_conic_oracle() {
        let s = generate_blob_scene(7, 96, 96, 5).unwrap();
        // general conic form A dx^2 + B dx dy + C dy^2 <= 1
        let inside = |e: &Ellipse, x: f64, y: f64| {
            let (dx, dy) = (x - e.cx, y - e.cy);
            let (c2, s2) = (e.theta.cos().powi(2), e.theta.sin().powi(2));
            let cs = e.theta.cos() * e.theta.sin();
            let (ia, ib) = (1.0 / (e.a * e.a), 1.0 / (e.b * e.b));
            let qa = c2 * ia + s2 * ib;
            let qb = 2.0 * cs * (ia - ib);
            let qc = s2 * ia + c2 * ib;
            qa * dx * dx + qb * dx * dy + qc * dy * dy <= 1.0
        };
        let mut expected = 0;
        for y in 0..96 {
            for x in 0..96 {
                let want = s.ellipses.iter().any(|e| inside(e, x as f64, y as f64));
                expected += want as usize;
                assert_eq!(s.labels.get(x, y) == 1, want, "pixel ({x},{y})");
            }
        }
        assert_eq!(s.labels.count_nonzero(), expected);
        assert!(expected > 0);
    }
}
