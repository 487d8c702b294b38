//! Per-pixel loss weights: inverse class frequency plus a border bonus
//! `w0 · exp(-(d1 + d2)² / 2σ²)` that peaks in narrow gaps between objects.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, LabelMask};

/// Distance reported when fewer than two objects exist.
pub const NO_OBJECT: f64 = f64::INFINITY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(0, -1), (-1, 0), (1, 0), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (0, -1),
                (1, -1),
                (-1, 0),
                (1, 0),
                (-1, 1),
                (0, 1),
                (1, 1),
            ],
        }
    }

    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Domain(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }

    /// In-bounds neighbours of `(x, y)` on a `w`×`h` grid.
    pub(crate) fn neighbors(
        self,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    ) -> impl Iterator<Item = (usize, usize)> {
        self.offsets().iter().filter_map(move |&(dx, dy)| {
            let nx = x.checked_add_signed(dx)?;
            let ny = y.checked_add_signed(dy)?;
            (nx < w && ny < h).then_some((nx, ny))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl WeightMap {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "weight map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain("weights must be finite and > 0".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![1.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<WeightMap> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Size(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds weight map {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = (y0 + y) * self.width + x0;
            values.extend_from_slice(&self.values[row..row + w]);
        }
        Ok(WeightMap {
            width: w,
            height: h,
            values,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub w0: f64,
    /// Border length scale in pixels.
    pub sigma: f64,
    #[serde(default)]
    pub connectivity: Connectivity,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            w0: 10.0,
            sigma: 5.0,
            connectivity: Connectivity::Four,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w0 >= 0.0 && self.w0.is_finite()) {
            return Err(Error::Config(format!("w0 must be >= 0, got {}", self.w0)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn border_term(&self, d1: f64, d2: f64) -> f64 {
        let s = d1 + d2;
        if !s.is_finite() {
            return 0.0;
        }
        self.w0 * (-(s * s) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

fn morph(m: &BinaryMask, r: usize, dilate: bool) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (w, h) = (m.width(), m.height());
    // square element is separable: rows, then columns; out-of-bounds pixels are ignored
    let pass = |src: &[u8], horizontal: bool| -> Vec<u8> {
        let mut out = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let at = |i: usize| {
                    if horizontal {
                        src[y * w + i]
                    } else {
                        src[i * w + x]
                    }
                };
                let v = if dilate {
                    (lo..=hi).any(|i| at(i) != 0)
                } else {
                    (lo..=hi).all(|i| at(i) != 0)
                };
                out[y * w + x] = u8::from(v);
            }
        }
        out
    };
    let rows = pass(m.bits(), true);
    BinaryMask::new(w, h, pass(&rows, false)).expect("binary morphology")
}

/// Binary dilation with a `(2r+1)²` square.
pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    morph(m, r, true)
}

/// Binary erosion with a `(2r+1)²` square; pixels outside the frame are ignored.
pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
    morph(m, r, false)
}

/// Pixels of the one-pixel band that separates touching objects: foreground
/// removed by a radius-1 erosion.
pub fn separation_boundary(m: &BinaryMask) -> BinaryMask {
    let e = erode(m, 1);
    BinaryMask::from_fn(m.width(), m.height(), |x, y| m.get(x, y) && !e.get(x, y))
}

#[derive(Clone, Debug)]
pub struct Components {
    /// 0 = background, 1..=count = component ids in raster-scan order of first pixel.
    pub labels: LabelMask,
    pub count: usize,
}

impl Components {
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count];
        for &l in self.labels.labels() {
            if l > 0 {
                areas[l as usize - 1] += 1;
            }
        }
        areas
    }
}

pub fn connected_components(m: &BinaryMask, connectivity: Connectivity) -> Components {
    let (w, h) = (m.width(), m.height());
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if m.bits()[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for (nx, ny) in connectivity.neighbors(p % w, p / w, w, h) {
                let q = ny * w + nx;
                if m.bits()[q] != 0 && labels[q] == 0 {
                    labels[q] = count;
                    queue.push_back(q);
                }
            }
        }
    }
    Components {
        labels: LabelMask::new(w, h, (count as usize + 1).max(2), labels).expect("component labels"),
        count: count as usize,
    }
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(start) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    let mut k = 0usize;
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // z[0] = -inf, so k never underflows
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
fn squared_edt(feature: &[bool], w: usize, h: usize) -> Vec<f64> {
    let n = w.max(h);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut col_in = vec![0f64; h];
    let mut col_out = vec![0f64; h];
    let mut grid = vec![0f64; w * h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = if feature[y * w + x] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0f64; w];
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        out[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    out
}

#[derive(Clone, Debug)]
pub struct NearestDistances {
    pub width: usize,
    pub height: usize,
    /// Distance to the nearest object (0 inside an object).
    pub d1: Vec<f64>,
    /// Distance to the second-nearest distinct object, or [`NO_OBJECT`].
    pub d2: Vec<f64>,
}

/// Euclidean distances to the nearest and second-nearest distinct components.
///
/// Runs one exact distance transform per component, so the cost is
/// `O(pixels · components)`.
pub fn two_nearest_distances(components: &LabelMask) -> NearestDistances {
    let (w, h) = (components.width(), components.height());
    let n_comp = components.labels().iter().copied().max().unwrap_or(0) as usize;
    let mut best = vec![f64::INFINITY; w * h];
    let mut second = vec![f64::INFINITY; w * h];
    let mut feature = vec![false; w * h];
    for c in 1..=n_comp as u32 {
        for (f, &l) in feature.iter_mut().zip(components.labels()) {
            *f = l == c;
        }
        if !feature.iter().any(|&f| f) {
            continue;
        }
        let dist = squared_edt(&feature, w, h);
        for i in 0..w * h {
            let d = dist[i];
            if d < best[i] {
                second[i] = best[i];
                best[i] = d;
            } else if d < second[i] {
                second[i] = d;
            }
        }
    }
    NearestDistances {
        width: w,
        height: h,
        d1: best.into_iter().map(f64::sqrt).collect(),
        d2: second.into_iter().map(f64::sqrt).collect(),
    }
}

/// Inverse class frequency normalised so that each present class carries the
/// same total weight: `w_c(x) = P / (K_present · count(l(x)))`.
pub fn class_balance(l: &LabelMask) -> Vec<f64> {
    let mut counts = vec![0usize; l.classes()];
    for &c in l.labels() {
        counts[c as usize] += 1;
    }
    let total = l.labels().len() as f64;
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    l.labels()
        .iter()
        .map(|&c| total / (present * counts[c as usize] as f64))
        .collect()
}

pub fn compute_weight_map(l: &LabelMask, cfg: &WeightConfig) -> Result<WeightMap> {
    cfg.validate()?;
    let wc = class_balance(l);
    let comps = connected_components(&l.foreground(), cfg.connectivity);
    let values = if comps.count < 2 || cfg.w0 == 0.0 {
        wc
    } else {
        let nd = two_nearest_distances(&comps.labels);
        wc.iter()
            .zip(nd.d1.iter().zip(&nd.d2))
            .map(|(&c, (&d1, &d2))| c + cfg.border_term(d1, d2))
            .collect()
    };
    WeightMap::from_values(l.width(), l.height(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| on.contains(&(x, y)))
    }

    #[test]
    fn morphology_basics() {
        let m = mask(5, 5, &[(2, 2)]);
        assert_eq!(dilate(&m, 0), m);
        let d = dilate(&m, 1);
        assert_eq!(d.count_ones(), 9);
        for y in 1..=3 {
            for x in 1..=3 {
                assert!(d.get(x, y));
            }
        }
        assert_eq!(erode(&d, 1), m);
    }

    #[test]
    fn closing_contains_rectangles() {
        let m = BinaryMask::from_fn(12, 10, |x, y| (2..7).contains(&x) && (3..6).contains(&y));
        assert!(m.is_subset_of(&erode(&dilate(&m, 1), 1)));
        assert!(erode(&m, 1).is_subset_of(&m));
    }

    #[test]
    fn boundary_is_the_object_rim() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (1..5).contains(&x) && (1..5).contains(&y));
        assert_eq!(separation_boundary(&m).count_ones(), 12);
    }

    #[test]
    fn connectivity_matters_on_diagonals() {
        let m = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&m, Connectivity::Four).count, 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).count, 1);
        assert_eq!(connected_components(&BinaryMask::zeros(4, 4), Connectivity::Four).count, 0);
    }

    #[test]
    fn labels_follow_raster_order() {
        let m = mask(4, 2, &[(3, 0), (0, 1)]);
        let c = connected_components(&m, Connectivity::Four);
        assert_eq!(c.labels.get(3, 0), 1);
        assert_eq!(c.labels.get(0, 1), 2);
    }

    fn flood_count(m: &BinaryMask, eight: bool) -> usize {
        fn fill(m: &BinaryMask, seen: &mut [bool], x: isize, y: isize, eight: bool) {
            let (w, h) = (m.width() as isize, m.height() as isize);
            if x < 0 || y < 0 || x >= w || y >= h {
                return;
            }
            let i = (y * w + x) as usize;
            if seen[i] || !m.get(x as usize, y as usize) {
                return;
            }
            seen[i] = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    fill(m, seen, x + dx, y + dy, eight);
                }
            }
        }
        let mut seen = vec![false; m.width() * m.height()];
        let mut n = 0;
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) && !seen[y * m.width() + x] {
                    n += 1;
                    fill(m, &mut seen, x as isize, y as isize, eight);
                }
            }
        }
        n
    }

    #[test]
    fn component_counts_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(0.45));
            assert_eq!(connected_components(&m, Connectivity::Four).count, flood_count(&m, false));
            assert_eq!(connected_components(&m, Connectivity::Eight).count, flood_count(&m, true));
        }
    }

    #[test]
    fn distances_basic_cases() {
        let m = mask(5, 1, &[(0, 0), (4, 0)]);
        let c = connected_components(&m, Connectivity::Four);
        let d = two_nearest_distances(&c.labels);
        assert_eq!(d.d1[2], 2.0);
        assert_eq!(d.d2[2], 2.0);
        assert_eq!(d.d1[0], 0.0);
        assert_eq!(d.d2[0], 4.0);

        let single = mask(6, 6, &[(1, 1), (1, 2)]);
        let c = connected_components(&single, Connectivity::Four);
        let d = two_nearest_distances(&c.labels);
        assert!(d.d2.iter().all(|v| v.is_infinite()));
        assert_eq!(d.d1[1 * 6 + 1], 0.0);
    }

    #[test]
    fn exact_edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
            let feat: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.15)).collect();
            let got = squared_edt(&feat, w, h);
            for y in 0..h {
                for x in 0..w {
                    let want = (0..w * h)
                        .filter(|&i| feat[i])
                        .map(|i| {
                            let (dx, dy) = ((i % w) as f64 - x as f64, (i / w) as f64 - y as f64);
                            dx * dx + dy * dy
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(got[y * w + x], want);
                }
            }
        }
    }

    #[test]
    fn class_balance_closed_forms() {
        let balanced = LabelMask::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        assert!(class_balance(&balanced).iter().all(|&v| v == 1.0));
        let quarter = LabelMask::new(2, 2, 2, vec![0, 0, 0, 1]).unwrap();
        let wc = class_balance(&quarter);
        assert_eq!(wc[3], 2.0);
        assert!((wc[0] - 2.0 / 3.0).abs() < 1e-15);
        let single = LabelMask::zeros(3, 3, 2);
        assert!(class_balance(&single).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn weight_map_closed_form_pixel() {
        // objects at x = 0 and x = 2 on a 3x1 strip; the middle pixel has d1 = d2 = 1
        let l = LabelMask::new(3, 1, 2, vec![1, 0, 1]).unwrap();
        let wm = compute_weight_map(&l, &WeightConfig::default()).unwrap();
        let wc = class_balance(&l)[1];
        let expected = wc + 10.0 * (-4.0f64 / 50.0).exp();
        assert!((wm.get(1, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn single_component_means_no_border_term() {
        let l = LabelMask::new(4, 4, 2, (0..16).map(|i| u32::from(i < 6)).collect()).unwrap();
        let wm = compute_weight_map(&l, &WeightConfig::default()).unwrap();
        assert_eq!(wm.values(), &class_balance(&l)[..]);
    }

    #[test]
    fn defaults() {
        let cfg = WeightConfig::default();
        assert_eq!((cfg.w0, cfg.sigma), (10.0, 5.0));
        assert!(WeightConfig { sigma: 0.0, ..cfg }.validate().is_err());
    }
}
