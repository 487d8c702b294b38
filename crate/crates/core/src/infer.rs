//! Full-scene prediction: overlapping windows, D4 test-time averaging,
//! thresholding and object counting.

use std::sync::OnceLock;

use log::debug;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{softmax_px, Padding, Tensor};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster};
use crate::registry::Registry;
use crate::remap::Dihedral;
use crate::unet::{check_tiling, UNetModel};
use crate::watershed::RegionProposal;
use crate::weightmap::{connected_components, Connectivity};

pub const DEFAULT_WINDOW: usize = 144;
pub const DEFAULT_STRIDE: usize = 32;

/// Windows evaluated concurrently before their results are folded in.
const WINDOW_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    p: Vec<f32>,
    coverage: Vec<u32>,
}

impl ProbabilityMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn p(&self) -> &[f32] {
        &self.p
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.p[y * self.width + x]
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    /// `[1, H, W]` raster of the probabilities.
    pub fn to_raster(&self) -> Raster {
        Raster::new(self.width, self.height, 1, self.p.clone()).expect("consistent dims")
    }

    fn transformed(&self, t: Dihedral) -> ProbabilityMap {
        let (width, height) = t.output_dims(self.width, self.height);
        ProbabilityMap {
            width,
            height,
            p: t.apply_plane(&self.p, self.width, self.height),
            coverage: t.apply_plane(&self.coverage, self.width, self.height),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WindowStats {
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub map: ProbabilityMap,
    pub windows: WindowStats,
}

/// Origins along one axis: the stride grid, plus a final window flush with
/// the far edge when the grid does not reach it.
pub fn window_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window > len || stride == 0 {
        return Vec::new();
    }
    let mut v: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *v.last().expect("at least origin 0") + window < len {
        v.push(len - window);
    }
    v
}

/// Per-pixel probability of any non-background class for one model input.
pub fn foreground_probability(model: &UNetModel<f32>, img: &Raster) -> Result<Vec<f32>> {
    let input = Tensor::new(vec![img.channels(), img.height(), img.width()], img.data().to_vec())?;
    let probs = softmax_px(&model.forward(&input)?)?;
    let (k, h, w) = probs.chw()?;
    let n = h * w;
    let v = probs.values();
    if k == 2 {
        return Ok(v[n..].to_vec());
    }
    Ok((0..n).map(|i| (1..k).map(|c| v[c * n + i]).sum()).collect())
}

fn check_window(model: &UNetModel<f32>, img: &Raster, window: usize, stride: usize) -> Result<()> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be >= 1".into()));
    }
    if model.config().padding != Padding::Same {
        return Err(Error::Config(
            "sliding-window inference needs a same-padded model".into(),
        ));
    }
    if img.width() < window || img.height() < window {
        return Err(Error::Size(format!(
            "image {}x{} is smaller than the {window}px window",
            img.width(),
            img.height()
        )));
    }
    check_tiling(model.config(), window, window)
}

/// Mean foreground probability over all windows covering each pixel. With
/// `regions`, windows touching no proposal are skipped and their pixels
/// report p = 0 with coverage 1.
pub fn sliding_window_predict(
    model: &UNetModel<f32>,
    img: &Raster,
    window: usize,
    stride: usize,
    regions: Option<&[RegionProposal]>,
) -> Result<Prediction> {
    check_window(model, img, window, stride)?;
    let (w, h) = (img.width(), img.height());
    let xs = window_origins(w, window, stride);
    let ys = window_origins(h, window, stride);
    let all: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let origins: Vec<(usize, usize)> = match regions {
        None => all.clone(),
        Some(rs) => all
            .iter()
            .copied()
            .filter(|&(x, y)| rs.iter().any(|r| r.intersects(x, y, window, window)))
            .collect(),
    };
    let stats = WindowStats {
        evaluated: origins.len(),
        skipped: all.len() - origins.len(),
    };
    debug!("{} windows, {} skipped", stats.evaluated, stats.skipped);

    let mut sum = vec![0f64; w * h];
    let mut count = vec![0u32; w * h];
    for chunk in origins.chunks(WINDOW_CHUNK) {
        let probs = chunk
            .par_iter()
            .map(|&(x0, y0)| foreground_probability(model, &img.crop(x0, y0, window, window)?))
            .collect::<Result<Vec<_>>>()?;
        for (&(x0, y0), p) in chunk.iter().zip(probs) {
            for wy in 0..window {
                let row = (y0 + wy) * w + x0;
                for wx in 0..window {
                    sum[row + wx] += p[wy * window + wx] as f64;
                    count[row + wx] += 1;
                }
            }
        }
    }
    let p = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect();
    let coverage = count.into_iter().map(|c| c.max(1)).collect();
    Ok(Prediction {
        map: ProbabilityMap {
            width: w,
            height: h,
            p,
            coverage,
        },
        windows: stats,
    })
}

fn transform_region(r: &RegionProposal, t: Dihedral, width: usize, height: usize) -> RegionProposal {
    let (x, y, bw, bh) = r.bbox;
    let (ax, ay) = t.target_of(x, y, width, height);
    let (bx, by) = t.target_of(x + bw - 1, y + bh - 1, width, height);
    RegionProposal {
        bbox: (ax.min(bx), ay.min(by), ax.abs_diff(bx) + 1, ay.abs_diff(by) + 1),
        ..*r
    }
}

/// Predicts each transformed copy of `img`, maps the result back and
/// averages. Coverage is summed over the copies.
pub fn tta_predict(
    model: &UNetModel<f32>,
    img: &Raster,
    transforms: &[Dihedral],
    window: usize,
    stride: usize,
    regions: Option<&[RegionProposal]>,
) -> Result<Prediction> {
    if transforms.is_empty() {
        return Err(Error::Config("test-time augmentation needs at least one transform".into()));
    }
    let (w, h) = (img.width(), img.height());
    let mut sum = vec![0f64; w * h];
    let mut coverage = vec![0u32; w * h];
    let mut stats = WindowStats::default();
    for &t in transforms {
        let moved: Option<Vec<RegionProposal>> =
            regions.map(|rs| rs.iter().map(|r| transform_region(r, t, w, h)).collect());
        let pred = sliding_window_predict(model, &t.apply(img), window, stride, moved.as_deref())?;
        let back = pred.map.transformed(t.inverse());
        for (s, &v) in sum.iter_mut().zip(&back.p) {
            *s += v as f64;
        }
        for (c, &v) in coverage.iter_mut().zip(&back.coverage) {
            *c += v;
        }
        stats.evaluated += pred.windows.evaluated;
        stats.skipped += pred.windows.skipped;
    }
    let n = transforms.len() as f64;
    Ok(Prediction {
        map: ProbabilityMap {
            width: w,
            height: h,
            p: sum.iter().map(|&s| (s / n) as f32).collect(),
            coverage,
        },
        windows: stats,
    })
}

/// `p ≥ tau`.
pub fn threshold_mask(pm: &ProbabilityMap, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("threshold must lie in (0, 1), got {tau}")));
    }
    let tau = tau as f32;
    Ok(BinaryMask::from_fn(pm.width, pm.height, |x, y| pm.get(x, y) >= tau))
}

/// 8-connected foreground components of at least `min_area` pixels.
pub fn count_components(m: &BinaryMask, min_area: usize) -> usize {
    let comps = connected_components(m, Connectivity::Eight);
    comps.areas().into_iter().filter(|&a| a >= min_area).count()
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub window: usize,
    pub stride: usize,
    pub regions: Option<Vec<RegionProposal>>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            regions: None,
        }
    }
}

pub trait Predictor: Send + Sync {
    fn name(&self) -> String;
    fn predict(&self, model: &UNetModel<f32>, img: &Raster) -> Result<Prediction>;
}

pub struct SlidingWindow {
    pub options: PredictOptions,
}

impl Predictor for SlidingWindow {
    fn name(&self) -> String {
        "sliding".into()
    }

    fn predict(&self, model: &UNetModel<f32>, img: &Raster) -> Result<Prediction> {
        let o = &self.options;
        sliding_window_predict(model, img, o.window, o.stride, o.regions.as_deref())
    }
}

pub struct TestTimeAugmented {
    pub options: PredictOptions,
    pub transforms: Vec<Dihedral>,
}

impl Predictor for TestTimeAugmented {
    fn name(&self) -> String {
        let names: Vec<&str> = self.transforms.iter().map(|t| t.name()).collect();
        format!("tta:{}", names.join(","))
    }

    fn predict(&self, model: &UNetModel<f32>, img: &Raster) -> Result<Prediction> {
        let o = &self.options;
        tta_predict(model, img, &self.transforms, o.window, o.stride, o.regions.as_deref())
    }
}

pub type PredictorRegistry = Registry<dyn Predictor, PredictOptions>;

/// `sliding`, and `tta[:t1,t2,...]` (all of D4 when no list is given).
pub fn predictors() -> &'static PredictorRegistry {
    static REGISTRY: OnceLock<PredictorRegistry> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r = Registry::new("predictor");
        r.register("sliding", |o: &PredictOptions, _| {
            Ok(Box::new(SlidingWindow { options: o.clone() }) as Box<dyn Predictor>)
        })
        .register("tta", |o: &PredictOptions, arg| {
            let transforms = match arg {
                None | Some("") => Dihedral::all().to_vec(),
                Some(list) => list
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<Dihedral>>>()?,
            };
            Ok(Box::new(TestTimeAugmented {
                options: o.clone(),
                transforms,
            }) as Box<dyn Predictor>)
        });
        r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> UNetModel<f32> {
        let cfg = UNetConfig {
            in_channels: 1,
            n_classes: 2,
            depth: 2,
            base_channels: 4,
            ..UNetConfig::default()
        };
        UNetModel::build(cfg, 11).unwrap()
    }

    fn noise(w: usize, h: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(w, h, 1, |_, _, _| rng.random())
    }

    #[test]
    fn origins_cover_the_axis() {
        assert_eq!(window_origins(176, 144, 32), vec![0, 32]);
        assert_eq!(window_origins(144, 144, 32), vec![0]);
        assert_eq!(window_origins(150, 144, 32), vec![0, 6]);
        assert_eq!(window_origins(100, 16, 40), vec![0, 40, 80, 84]);
        assert!(window_origins(10, 16, 4).is_empty());
    }

    #[test]
    fn single_window_equals_forward() {
        let m = model();
        let img = noise(16, 16, 1);
        let pred = sliding_window_predict(&m, &img, 16, 4, None).unwrap();
        assert_eq!(pred.map.p(), &foreground_probability(&m, &img).unwrap()[..]);
        assert!(pred.map.coverage().iter().all(|&c| c == 1));
    }

    #[test]
    fn full_coverage_and_bounds() {
        let m = model();
        let pred = sliding_window_predict(&m, &noise(44, 30, 2), 16, 12, None).unwrap();
        assert!(pred.map.coverage().iter().all(|&c| c >= 1));
        assert!(pred.map.p().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(pred.windows.evaluated, 4 * 3);
    }

    #[test]
    fn gating_skips_windows() {
        let m = model();
        let img = noise(48, 16, 3);
        let region = RegionProposal {
            bbox: (2, 2, 4, 4),
            basin_id: 1,
            area: 16,
        };
        let pred = sliding_window_predict(&m, &img, 16, 16, Some(&[region])).unwrap();
        assert_eq!(pred.windows, WindowStats { evaluated: 1, skipped: 2 });
        assert_eq!(pred.map.get(40, 5), 0.0);
        assert_eq!(pred.map.coverage()[40], 1);
    }

    #[test]
    fn errors() {
        let m = model();
        assert!(matches!(
            sliding_window_predict(&m, &noise(12, 40, 0), 16, 8, None),
            Err(Error::Size(_))
        ));
        assert!(sliding_window_predict(&m, &noise(18, 18, 0), 18, 8, None).is_err());
    }

    #[test]
    fn tta_identity_matches_sliding() {
        let m = model();
        let img = noise(24, 24, 4);
        let a = sliding_window_predict(&m, &img, 16, 8, None).unwrap();
        let b = tta_predict(&m, &img, &[Dihedral::IDENTITY], 16, 8, None).unwrap();
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn tta_symmetric_input() {
        let m = model();
        let base = noise(16, 16, 5);
        let sym = Raster::from_fn(16, 16, 1, |c, x, y| base.get(c, x.min(15 - x), y));
        let pred = tta_predict(&m, &sym, &[Dihedral::IDENTITY, Dihedral::HFLIP], 16, 8, None).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert!((pred.map.get(x, y) - pred.map.get(15 - x, y)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn transformed_regions_follow_the_image() {
        let r = RegionProposal {
            bbox: (1, 2, 3, 4),
            basin_id: 1,
            area: 5,
        };
        for t in Dihedral::all() {
            let moved = transform_region(&r, t, 10, 8);
            for y in 2..6 {
                for x in 1..4 {
                    let (tx, ty) = t.target_of(x, y, 10, 8);
                    assert!(moved.contains(tx, ty));
                }
            }
            let (_, _, w, h) = moved.bbox;
            assert_eq!(w * h, 12);
        }
    }

    #[test]
    fn thresholds_and_counts() {
        let pm = ProbabilityMap {
            width: 3,
            height: 1,
            p: vec![0.5; 3],
            coverage: vec![1; 3],
        };
        assert_eq!(threshold_mask(&pm, 0.5).unwrap().count_ones(), 3);
        assert_eq!(threshold_mask(&pm, 0.999).unwrap().count_ones(), 0);
        assert!(threshold_mask(&pm, 1.0).is_err());
        assert_eq!(count_components(&BinaryMask::zeros(5, 5), 1), 0);
        // diagonal neighbours merge under 8-connectivity
        let m = BinaryMask::from_fn(6, 6, |x, y| (x == y && x < 3) || (x == 5 && y == 0));
        assert_eq!(count_components(&m, 1), 2);
        assert_eq!(count_components(&m, 2), 1);
    }

    #[test]
    fn count_matches_flood_fill() {
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask::from_fn(20, 20, |_, _| rng.random_bool(0.4));
            let mut seen = vec![false; 400];
            let mut areas = Vec::new();
            for s in 0..400 {
                if seen[s] || !m.get(s % 20, s / 20) {
                    continue;
                }
                let mut stack = vec![s];
                seen[s] = true;
                let mut area = 0;
                while let Some(p) = stack.pop() {
                    area += 1;
                    let (x, y) = ((p % 20) as i32, (p / 20) as i32);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nx, ny) = (x + dx, y + dy);
                            if (0..20).contains(&nx) && (0..20).contains(&ny) {
                                let q = (ny * 20 + nx) as usize;
                                if !seen[q] && m.get(nx as usize, ny as usize) {
                                    seen[q] = true;
                                    stack.push(q);
                                }
                            }
                        }
                    }
                }
                areas.push(area);
            }
            for min_area in [1, 3, 10] {
                let want = areas.iter().filter(|&&a| a >= min_area).count();
                assert_eq!(count_components(&m, min_area), want, "seed {seed}");
            }
        }
    }

    #[test]
    fn registry() {
        let o = PredictOptions {
            window: 16,
            stride: 8,
            regions: None,
        };
        let p = predictors().create("tta:identity,hflip", &o).unwrap();
        assert_eq!(p.name(), "tta:identity,hflip");
        assert_eq!(predictors().create("tta", &o).unwrap().name().matches(',').count(), 7);
        assert!(predictors().create("tta:spin", &o).is_err());
        let img = noise(16, 16, 6);
        let a = predictors().create("sliding", &o).unwrap().predict(&model(), &img).unwrap();
        assert_eq!(a.map.p(), &foreground_probability(&model(), &img).unwrap()[..]);
    }
}
