//! Remapping-based augmentation: `out(x, y) = src(h(x, y))` for grid
//! bijections `h`, the dihedral group they generate, photometric jitter and
//! the half-positive patch sampler.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMask, Raster};
use crate::weightmap::WeightMap;

/// Generic remap of a planar buffer: every output pixel reads `src` at `h(x, y)`.
fn remap_planes<T: Copy>(
    src: &[T],
    width: usize,
    height: usize,
    planes: usize,
    out_w: usize,
    out_h: usize,
    h: impl Fn(usize, usize) -> (usize, usize),
) -> Vec<T> {
    debug_assert_eq!(src.len(), width * height * planes);
    let mut out = Vec::with_capacity(out_w * out_h * planes);
    for c in 0..planes {
        let plane = &src[c * width * height..(c + 1) * width * height];
        for y in 0..out_h {
            for x in 0..out_w {
                let (sx, sy) = h(x, y);
                out.push(plane[sy * width + sx]);
            }
        }
    }
    out
}

/// Applies an arbitrary source-lookup `h` producing an `out_w`×`out_h` raster.
///
/// `h` must return in-bounds source coordinates for every output pixel.
pub fn remap(
    src: &Raster,
    out_w: usize,
    out_h: usize,
    h: impl Fn(usize, usize) -> (usize, usize),
) -> Raster {
    let data = remap_planes(
        src.data(),
        src.width(),
        src.height(),
        src.channels(),
        out_w,
        out_h,
        h,
    );
    src.with_data_like(out_w, out_h, data)
}

/// An element of the dihedral group D4 acting on the pixel grid.
///
/// Stored as `rot^k ∘ hflip^f`: horizontal flip first (when `flip`), then
/// `k` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    flip: bool,
    quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral::new(false, 0);
    pub const HFLIP: Dihedral = Dihedral::new(true, 0);
    /// vflip = rot180 ∘ hflip.
    pub const VFLIP: Dihedral = Dihedral::new(true, 2);
    pub const ROT90: Dihedral = Dihedral::new(false, 1);
    pub const ROT180: Dihedral = Dihedral::new(false, 2);
    pub const ROT270: Dihedral = Dihedral::new(false, 3);
    /// Reflection across the main diagonal.
    pub const TRANSPOSE: Dihedral = Dihedral::new(true, 3);
    pub const ANTI_TRANSPOSE: Dihedral = Dihedral::new(true, 1);

    pub const fn new(flip: bool, quarter_turns: u8) -> Self {
        Self {
            flip,
            quarter_turns: quarter_turns % 4,
        }
    }

    pub fn rot90(k: u8) -> Self {
        Self::new(false, k)
    }

    pub fn all() -> [Dihedral; 8] {
        [
            Self::IDENTITY,
            Self::ROT90,
            Self::ROT180,
            Self::ROT270,
            Self::HFLIP,
            Self::ANTI_TRANSPOSE,
            Self::VFLIP,
            Self::TRANSPOSE,
        ]
    }

    pub fn is_flip(self) -> bool {
        self.flip
    }

    pub fn quarter_turns(self) -> u8 {
        self.quarter_turns
    }

    /// Group product: `(self ∘ other)(img) = self(other(img))`.
    pub fn then_after(self, other: Dihedral) -> Dihedral {
        // hflip ∘ rot^b = rot^-b ∘ hflip
        if self.flip {
            Dihedral::new(!other.flip, (4 + self.quarter_turns - other.quarter_turns) % 4)
        } else {
            Dihedral::new(other.flip, self.quarter_turns + other.quarter_turns)
        }
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            self
        } else {
            Dihedral::new(false, 4 - self.quarter_turns)
        }
    }

    pub fn swaps_axes(self) -> bool {
        self.quarter_turns % 2 == 1
    }

    pub fn output_dims(self, width: usize, height: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Source coordinate read by output pixel `(x, y)` for a `width`×`height` source.
    pub fn source_of(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        // undo the rotations one quarter turn at a time, tracking the extent
        let (mut x, mut y) = (x, y);
        let (mut w, mut h) = self.output_dims(width, height);
        for _ in 0..self.quarter_turns {
            // out(x, y) = pre(w_pre - 1 - y, x), where w_pre = h
            let (px, py) = (h - 1 - y, x);
            x = px;
            y = py;
            std::mem::swap(&mut w, &mut h);
        }
        if self.flip {
            x = w - 1 - x;
        }
        (x, y)
    }

    /// Where source pixel `(x, y)` of a `width`×`height` image lands.
    pub fn target_of(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        let (ow, oh) = self.output_dims(width, height);
        self.inverse().source_of(x, y, ow, oh)
    }

    fn apply_planes<T: Copy>(self, src: &[T], width: usize, height: usize, planes: usize) -> Vec<T> {
        let (ow, oh) = self.output_dims(width, height);
        remap_planes(src, width, height, planes, ow, oh, |x, y| {
            self.source_of(x, y, width, height)
        })
    }

    pub fn apply(self, src: &Raster) -> Raster {
        let (ow, oh) = self.output_dims(src.width(), src.height());
        let data = self.apply_planes(src.data(), src.width(), src.height(), src.channels());
        src.with_data_like(ow, oh, data)
    }

    pub fn apply_labels(self, m: &LabelMask) -> LabelMask {
        let (ow, oh) = self.output_dims(m.width(), m.height());
        let labels = self.apply_planes(m.labels(), m.width(), m.height(), 1);
        LabelMask::new(ow, oh, m.classes(), labels).expect("bijection preserves labels")
    }

    pub fn apply_weights(self, wm: &WeightMap) -> WeightMap {
        let (ow, oh) = self.output_dims(wm.width(), wm.height());
        let values = self.apply_planes(wm.values(), wm.width(), wm.height(), 1);
        WeightMap::from_values(ow, oh, values).expect("bijection preserves weights")
    }

    /// Applies the transform to a single row-major plane.
    pub fn apply_plane<T: Copy>(self, src: &[T], width: usize, height: usize) -> Vec<T> {
        self.apply_planes(src, width, height, 1)
    }

    pub fn name(self) -> &'static str {
        match (self.flip, self.quarter_turns) {
            (false, 0) => "identity",
            (false, 1) => "rot90",
            (false, 2) => "rot180",
            (false, 3) => "rot270",
            (true, 0) => "hflip",
            (true, 1) => "antitranspose",
            (true, 2) => "vflip",
            _ => "transpose",
        }
    }
}

impl fmt::Display for Dihedral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dihedral {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dihedral::all()
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "transform",
                name: s.to_string(),
                known: Dihedral::all().map(|d| d.name()).join(", "),
            })
    }
}

pub fn hflip(src: &Raster) -> Raster {
    Dihedral::HFLIP.apply(src)
}

pub fn vflip(src: &Raster) -> Raster {
    Dihedral::VFLIP.apply(src)
}

/// `k` counter-clockwise quarter turns.
pub fn rot90(src: &Raster, k: u8) -> Raster {
    Dihedral::rot90(k).apply(src)
}

/// Zero-mean Gaussian jitter on every sample, clamped to [0, 1].
pub fn color_blur(src: &Raster, sigma: f32, seed: u64) -> Result<Raster> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("color blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(src.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, sigma).expect("sigma > 0");
    let data = src
        .data()
        .iter()
        .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    Ok(src.with_data_like(src.width(), src.height(), data))
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub image: Raster,
    pub label: LabelMask,
    pub weight: WeightMap,
    pub origin: (usize, usize),
}

impl Patch {
    pub fn has_positive(&self) -> bool {
        self.label.labels().iter().any(|&l| l > 0)
    }
}

#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub patches: Vec<Patch>,
    /// Set when positives were requested but the source had none.
    pub no_positive_source: bool,
}

fn cut_patch(
    img: &Raster,
    labels: &LabelMask,
    weights: &WeightMap,
    size: usize,
    x0: usize,
    y0: usize,
) -> Result<Patch> {
    Ok(Patch {
        image: img.crop(x0, y0, size, size)?,
        label: labels.crop(x0, y0, size, size)?,
        weight: weights.crop(x0, y0, size, size)?,
        origin: (x0, y0),
    })
}

/// Draws `n` co-located `size`×`size` crops; the first `⌈n/2⌉` are forced to
/// contain at least one pixel with label > 0 when the source has any.
pub fn sample_patches(
    img: &Raster,
    labels: &LabelMask,
    weights: &WeightMap,
    size: usize,
    n: usize,
    seed: u64,
) -> Result<PatchBatch> {
    let (w, h) = (img.width(), img.height());
    if labels.width() != w || labels.height() != h || weights.width() != w || weights.height() != h {
        return Err(Error::Shape("image, labels and weights must share dimensions".into()));
    }
    if size == 0 || size > w.min(h) {
        return Err(Error::Size(format!("patch size {size} does not fit a {w}x{h} source")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives: Vec<usize> = labels
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l > 0).then_some(i))
        .collect();
    let n_positive = n.div_ceil(2);
    let no_positive_source = n > 0 && positives.is_empty();
    if no_positive_source {
        log::warn!("sample_patches: source has no positive pixels, sampling uniformly");
    }
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let (x0, y0) = if i < n_positive && !positives.is_empty() {
            let p = positives[rng.random_range(0..positives.len())];
            let (px, py) = (p % w, p / w);
            let x0 = rng.random_range(px.saturating_sub(size - 1)..=px.min(w - size));
            let y0 = rng.random_range(py.saturating_sub(size - 1)..=py.min(h - size));
            (x0, y0)
        } else {
            (rng.random_range(0..=w - size), rng.random_range(0..=h - size))
        };
        patches.push(cut_patch(img, labels, weights, size, x0, y0)?);
    }
    Ok(PatchBatch {
        patches,
        no_positive_source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma: 0.02,
        }
    }
}

/// The randomly drawn subset of augmentations for one patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
    pub blur: bool,
    blur_seed: u64,
}

impl AugmentPlan {
    pub fn draw(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hflip: rng.random_bool(cfg.flip_prob),
            vflip: rng.random_bool(cfg.flip_prob),
            quarter_turns: rng.random_range(0..4u8),
            blur: rng.random_bool(cfg.blur_prob),
            blur_seed: rng.random(),
        }
    }

    /// Net geometric transform: hflip, then vflip, then rotation.
    pub fn geometry(&self) -> Dihedral {
        let mut g = Dihedral::IDENTITY;
        if self.hflip {
            g = Dihedral::HFLIP.then_after(g);
        }
        if self.vflip {
            g = Dihedral::VFLIP.then_after(g);
        }
        Dihedral::rot90(self.quarter_turns).then_after(g)
    }

    pub fn apply(&self, p: &Patch, cfg: &AugmentConfig) -> Result<Patch> {
        let g = self.geometry();
        let mut image = g.apply(&p.image);
        if self.blur {
            image = color_blur(&image, cfg.blur_sigma, self.blur_seed)?;
        }
        Ok(Patch {
            image,
            label: g.apply_labels(&p.label),
            weight: g.apply_weights(&p.weight),
            origin: p.origin,
        })
    }
}

pub fn augment(p: &Patch, seed: u64) -> Result<Patch> {
    augment_with(p, seed, &AugmentConfig::default())
}

pub fn augment_with(p: &Patch, seed: u64, cfg: &AugmentConfig) -> Result<Patch> {
    AugmentPlan::draw(seed, cfg).apply(p, cfg)
}
