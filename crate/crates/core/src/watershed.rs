//! Gradient watershed (Vincent–Soille immersion) for region proposals.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::weightmap::Connectivity;

pub const LEVELS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasinLabels {
    width: usize,
    height: usize,
    /// 0 marks watershed-line pixels; basins are numbered from 1.
    labels: Vec<u32>,
    n_basins: usize,
}

impl BasinLabels {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn n_basins(&self) -> usize {
        self.n_basins
    }

    pub fn line_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 0).count()
    }

    /// Labels modulo 256, for a quick look as a grey image.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| (l % 256) as u8).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProposal {
    /// `(x, y, w, h)`
    pub bbox: (usize, usize, usize, usize),
    pub basin_id: u32,
    pub area: usize,
}

impl RegionProposal {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (bx, by, bw, bh) = self.bbox;
        x >= bx && x < bx + bw && y >= by && y < by + bh
    }

    /// True when the half-open rectangle `(x, y, w, h)` overlaps the bbox.
    pub fn intersects(&self, x: usize, y: usize, w: usize, h: usize) -> bool {
        let (bx, by, bw, bh) = self.bbox;
        x < bx + bw && bx < x + w && y < by + bh && by < y + h
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian with edge clamping, applied per channel.
pub fn gaussian_blur(r: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(r.clone());
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (w, h) = (r.width(), r.height());
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = Vec::with_capacity(r.data().len());
    for c in 0..r.channels() {
        let src = r.plane(c);
        let mut tmp = vec![0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - radius, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - radius, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Ok(r.with_data_like(w, h, out))
}

/// Sobel magnitude of the channel mean, edge-clamped.
pub fn gradient_magnitude(r: &Raster) -> Raster {
    let g = if r.channels() == 1 { r.clone() } else { r.mean_channel() };
    let (w, h) = (g.width(), g.height());
    let px = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        g.get(0, xc, yc) as f64
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x - 1, y)
                - px(x - 1, y + 1);
            let gy = px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1)
                - px(x - 1, y - 1)
                - 2.0 * px(x, y - 1)
                - px(x + 1, y - 1);
            out.push((gx * gx + gy * gy).sqrt() as f32);
        }
    }
    g.with_data_like(w, h, out)
}

/// Min-max stretch to `0..=255` with round-half-up; a constant plane maps to 0.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    let scale = (LEVELS - 1) as f64 / (hi - lo);
    values
        .iter()
        .map(|&v| ((v as f64 - lo) * scale + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Watershed of a single-channel raster after 256-level quantization.
pub fn vincent_watershed(g: &Raster, connectivity: Connectivity) -> Result<BasinLabels> {
    if g.channels() != 1 {
        return Err(Error::Shape(format!(
            "watershed needs a single channel, got {}",
            g.channels()
        )));
    }
    Ok(watershed_levels(&quantize(g.plane(0)), g.width(), g.height(), connectivity))
}

const INIT: i64 = -1;
const MASK: i64 = -2;
const INQUEUE: i64 = -3;
const WSHED: i64 = 0;
const FICTITIOUS: usize = usize::MAX;

/// Immersion over pre-quantized levels (row-major, `width * height`).
///
/// A pixel reached from exactly one basin joins it; reached from two or more
/// basins, or only from line pixels, it becomes a line pixel.
pub fn watershed_levels(levels: &[u8], width: usize, height: usize, connectivity: Connectivity) -> BasinLabels {
    assert_eq!(levels.len(), width * height, "level buffer does not match dimensions");
    let n = levels.len();
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); LEVELS];
    for (p, &l) in levels.iter().enumerate() {
        buckets[l as usize].push(p);
    }
    let mut lab = vec![INIT; n];
    let mut dist = vec![0u32; n];
    let mut fifo = VecDeque::new();
    let mut current: i64 = 0;
    let nbrs = |p: usize| {
        connectivity
            .neighbors(p % width, p / width, width, height)
            .map(move |(x, y)| y * width + x)
    };

    for pixels in buckets.iter().filter(|b| !b.is_empty()) {
        for &p in pixels {
            lab[p] = MASK;
            if nbrs(p).any(|q| lab[q] >= WSHED) {
                lab[p] = INQUEUE;
                dist[p] = 1;
                fifo.push_back(p);
            }
        }
        let mut cur = 1u32;
        fifo.push_back(FICTITIOUS);
        loop {
            let mut p = fifo.pop_front().expect("queue holds the fictitious marker");
            if p == FICTITIOUS {
                if fifo.is_empty() {
                    break;
                }
                fifo.push_back(FICTITIOUS);
                cur += 1;
                p = fifo.pop_front().expect("non-empty queue");
            }
            // true while p is a line pixel only because of line neighbours
            let mut from_line = false;
            for q in nbrs(p) {
                if dist[q] < cur && lab[q] >= WSHED {
                    if lab[q] > 0 {
                        if lab[p] == INQUEUE || (lab[p] == WSHED && from_line) {
                            lab[p] = lab[q];
                            from_line = false;
                        } else if lab[p] > 0 && lab[p] != lab[q] {
                            lab[p] = WSHED;
                        }
                    } else if lab[p] == INQUEUE {
                        lab[p] = WSHED;
                        from_line = true;
                    }
                } else if lab[q] == MASK && dist[q] == 0 {
                    dist[q] = cur + 1;
                    lab[q] = INQUEUE;
                    fifo.push_back(q);
                }
            }
        }
        for &p in pixels {
            dist[p] = 0;
            if lab[p] == MASK {
                current += 1;
                lab[p] = current;
                fifo.push_back(p);
                while let Some(q) = fifo.pop_front() {
                    for r in nbrs(q) {
                        if lab[r] == MASK {
                            lab[r] = current;
                            fifo.push_back(r);
                        }
                    }
                }
            }
        }
    }
    BasinLabels {
        width,
        height,
        labels: lab.into_iter().map(|l| l as u32).collect(),
        n_basins: current as usize,
    }
}

/// Bounding box and area of every basin.
pub fn basin_regions(b: &BasinLabels) -> Vec<RegionProposal> {
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize, 0usize); b.n_basins];
    for y in 0..b.height {
        for x in 0..b.width {
            let l = b.get(x, y);
            if l == 0 {
                continue;
            }
            let e = &mut boxes[l as usize - 1];
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
            e.4 += 1;
        }
    }
    boxes
        .into_iter()
        .enumerate()
        .filter(|(_, e)| e.4 > 0)
        .map(|(i, (x0, y0, x1, y1, area))| RegionProposal {
            bbox: (x0, y0, x1 - x0 + 1, y1 - y0 + 1),
            basin_id: i as u32 + 1,
            area,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RegionAnalysis {
    pub basins: BasinLabels,
    pub proposals: Vec<RegionProposal>,
}

/// Mean channel, blur, Sobel, watershed; keeps basins of at least
/// `min_area` pixels, largest first.
pub fn analyze_regions(img: &Raster, blur_sigma: f64, min_area: usize) -> Result<RegionAnalysis> {
    let grey = img.mean_channel();
    let grad = gradient_magnitude(&gaussian_blur(&grey, blur_sigma)?);
    let basins = vincent_watershed(&grad, Connectivity::Four)?;
    let mut proposals: Vec<_> = basin_regions(&basins)
        .into_iter()
        .filter(|r| r.area >= min_area)
        .collect();
    proposals.sort_by(|a, b| b.area.cmp(&a.area).then(a.basin_id.cmp(&b.basin_id)));
    Ok(RegionAnalysis { basins, proposals })
}

pub fn propose_regions(img: &Raster, blur_sigma: f64, min_area: usize) -> Result<Vec<RegionProposal>> {
    Ok(analyze_regions(img, blur_sigma, min_area)?.proposals)
}
