//! Tile-integrated vegetation area and the change rate between two dates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster};
use crate::similarity::{l1, l2, tile_signature};

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    width: usize,
    height: usize,
    tile_size: usize,
    cols: usize,
    rows: usize,
    tau: f64,
    occupancy: Vec<u8>,
    occupied_count: usize,
}

impl TileGrid {
    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mask_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Row-major 0/1 occupancy.
    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    pub fn occupied(&self, col: usize, row: usize) -> bool {
        self.occupancy[row * self.cols + col] == 1
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied_count
    }

    /// Pixel rectangle `(x, y, w, h)` of a tile, clipped at the mask edge.
    pub fn tile_rect(&self, col: usize, row: usize) -> (usize, usize, usize, usize) {
        let x = col * self.tile_size;
        let y = row * self.tile_size;
        (
            x,
            y,
            self.tile_size.min(self.width - x),
            self.tile_size.min(self.height - y),
        )
    }
}

/// Marks a tile occupied when its white fraction reaches `tau`. Edge tiles
/// are judged against their own (smaller) pixel count.
pub fn tile_grid(m: &BinaryMask, tile_size: usize, tau: f64) -> Result<TileGrid> {
    if tile_size == 0 {
        return Err(Error::Domain("tile size must be >= 1".into()));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("tau must lie in (0, 1], got {tau}")));
    }
    let (width, height) = (m.width(), m.height());
    let cols = width.div_ceil(tile_size);
    let rows = height.div_ceil(tile_size);
    let occupancy: Vec<u8> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..cols).map(move |col| {
                let x0 = col * tile_size;
                let y0 = row * tile_size;
                let x1 = (x0 + tile_size).min(width);
                let y1 = (y0 + tile_size).min(height);
                let mut white = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        white += m.get(x, y) as usize;
                    }
                }
                let total = (x1 - x0) * (y1 - y0);
                (white as f64 >= tau * total as f64) as u8
            })
        })
        .collect();
    let occupied_count = occupancy.iter().map(|&o| o as usize).sum();
    Ok(TileGrid {
        width,
        height,
        tile_size,
        cols,
        rows,
        tau,
        occupancy,
        occupied_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VegetationArea {
    pub tiles: usize,
    pub pixels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m2: Option<f64>,
}

pub fn vegetation_area(g: &TileGrid, pixel_size_m: Option<f64>) -> VegetationArea {
    let tiles = g.occupied_count;
    let pixels = tiles * g.tile_size * g.tile_size;
    VegetationArea {
        tiles,
        pixels,
        m2: pixel_size_m.map(|s| pixels as f64 * s * s),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Growth,
    Degradation,
    Unchanged,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Growth => "growth",
            Verdict::Degradation => "degradation",
            Verdict::Unchanged => "unchanged",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChangeRate {
    pub t_q: f64,
    pub t_h: f64,
    pub mu: f64,
    pub verdict: Verdict,
}

impl ChangeRate {
    /// `|mu|` when the cover shrank.
    pub fn degradation_rate(&self) -> Option<f64> {
        (self.verdict == Verdict::Degradation).then(|| self.mu.abs())
    }

    pub fn percent(&self) -> f64 {
        self.mu * 100.0
    }
}

/// Relative change of vegetated area from `t_q` (earlier) to `t_h` (later).
pub fn change_rate(t_q: f64, t_h: f64) -> Result<ChangeRate> {
    if !t_q.is_finite() || !t_h.is_finite() || t_h < 0.0 || t_q < 0.0 {
        return Err(Error::Domain(format!(
            "areas must be finite and non-negative, got {t_q} and {t_h}"
        )));
    }
    if t_q == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    let mu = (t_h - t_q) / t_q;
    let verdict = if mu > 0.0 {
        Verdict::Growth
    } else if mu < 0.0 {
        Verdict::Degradation
    } else {
        Verdict::Unchanged
    };
    Ok(ChangeRate {
        t_q,
        t_h,
        mu,
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub t_q_tiles: usize,
    pub t_h_tiles: usize,
    pub t_q_px: usize,
    pub t_h_px: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_q_m2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_h_m2: Option<f64>,
    pub mu: f64,
    pub verdict: Verdict,
    pub l1: f64,
    pub l2: f64,
    pub tile_size: usize,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct Assessment {
    pub report: ChangeReport,
    pub before: TileGrid,
    pub after: TileGrid,
}

pub fn assess(
    before: &BinaryMask,
    after: &BinaryMask,
    tile_size: usize,
    tau: f64,
    pixel_size_m: Option<f64>,
) -> Result<Assessment> {
    if (before.width(), before.height()) != (after.width(), after.height()) {
        return Err(Error::Registration(format!(
            "masks are {}x{} and {}x{}",
            before.width(),
            before.height(),
            after.width(),
            after.height()
        )));
    }
    let gb = tile_grid(before, tile_size, tau)?;
    let ga = tile_grid(after, tile_size, tau)?;
    let ab = vegetation_area(&gb, pixel_size_m);
    let aa = vegetation_area(&ga, pixel_size_m);
    let rate = change_rate(ab.tiles as f64, aa.tiles as f64)?;
    let (sb, sa) = (tile_signature(&gb), tile_signature(&ga));
    let report = ChangeReport {
        t_q_tiles: ab.tiles,
        t_h_tiles: aa.tiles,
        t_q_px: ab.pixels,
        t_h_px: aa.pixels,
        t_q_m2: ab.m2,
        t_h_m2: aa.m2,
        mu: rate.mu,
        verdict: rate.verdict,
        l1: l1(&sb, &sa)?,
        l2: l2(&sb, &sa)?,
        tile_size,
        tau,
    };
    Ok(Assessment {
        report,
        before: gb,
        after: ga,
    })
}

const GAP: usize = 8;

/// Both masks side by side (before left), occupied tiles tinted green and
/// tile borders drawn in grey.
pub fn render_overlay(
    before: &BinaryMask,
    after: &BinaryMask,
    gb: &TileGrid,
    ga: &TileGrid,
) -> Result<Raster> {
    let (w, h) = (before.width(), before.height());
    if (after.width(), after.height()) != (w, h) || gb.mask_dims() != (w, h) || ga.mask_dims() != (w, h) {
        return Err(Error::Registration("overlay inputs must share dimensions".into()));
    }
    let out_w = 2 * w + GAP;
    let mut out = Raster::filled(out_w, h, 3, 1.0);
    for (panel, (m, g)) in [(before, gb), (after, ga)].into_iter().enumerate() {
        let x_off = panel * (w + GAP);
        let t = g.tile_size();
        for y in 0..h {
            for x in 0..w {
                let white = m.get(x, y);
                let occ = g.occupied(x / t, y / t);
                let border = x % t == 0 || y % t == 0;
                let rgb = match (border, occ, white) {
                    (true, _, _) => [0.55, 0.55, 0.55],
                    (false, true, true) => [0.10, 0.60, 0.15],
                    (false, true, false) => [0.70, 0.90, 0.70],
                    (false, false, true) => [0.85, 0.85, 0.85],
                    (false, false, false) => [0.0, 0.0, 0.0],
                };
                for (c, v) in rgb.into_iter().enumerate() {
                    out.set(c, x_off + x, y, v);
                }
            }
        }
    }
    Ok(out)
}
