//! Image and mask data model plus the on-disk formats.
//!
//! Samples are stored planar (`[channel][row][column]`), which is the same
//! order the VCAT tensor format and the network tensors use.

mod pnm;
mod synth;
pub mod vcat;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use synth::{generate_blob_scene, render_scene, sample_ellipses, BlobScene, Ellipse, SceneStyle};

/// Ground resolution of the RGB band used as the fallback when a raster
/// carries no resolution of its own.
pub const DEFAULT_PIXEL_SIZE_M: f64 = 0.31;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pixel_size_m: Option<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "raster must be non-empty, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "raster {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raster construction"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            pixel_size_m: None,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("filled raster must have non-zero extent and finite value")
    }

    /// Builds a raster from a per-pixel closure `f(channel, x, y)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self::new(width, height, channels, data).expect("from_fn raster must be valid")
    }

    pub fn with_pixel_size(mut self, meters: f64) -> Result<Self> {
        if !(meters > 0.0 && meters.is_finite()) {
            return Err(Error::Domain(format!("pixel size must be > 0, got {meters}")));
        }
        self.pixel_size_m = Some(meters);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_size_m(&self) -> Option<f64> {
        self.pixel_size_m
    }

    pub fn pixel_size_or_default(&self) -> f64 {
        self.pixel_size_m.unwrap_or(DEFAULT_PIXEL_SIZE_M)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Averages all channels into a single-channel raster.
    pub fn mean_channel(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.width * self.height;
        let mut out = vec![0.0f32; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += *v;
            }
        }
        let inv = 1.0 / self.channels as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut r = Raster::new(self.width, self.height, 1, out).expect("same extent");
        r.pixel_size_m = self.pixel_size_m;
        r
    }

    /// Copies out the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Size(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        let mut r = Raster::from_fn(w, h, self.channels, |c, x, y| self.get(c, x0 + x, y0 + y));
        r.pixel_size_m = self.pixel_size_m;
        Ok(r)
    }

    pub(crate) fn with_data_like(&self, width: usize, height: usize, data: Vec<f32>) -> Raster {
        let mut r = Raster::new(width, height, self.channels, data).expect("derived raster");
        r.pixel_size_m = self.pixel_size_m;
        r
    }
}

/// Per-pixel class indices in `0..classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    classes: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, classes: usize, labels: Vec<u32>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {classes}")));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "label mask {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(Self {
            width,
            height,
            classes,
            labels,
        })
    }

    pub fn zeros(width: usize, height: usize, classes: usize) -> Self {
        Self::new(width, height, classes, vec![0; width * height]).expect("zero mask")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn count_nonzero(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<LabelMask> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Size(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds mask {}x{}",
                self.width, self.height
            )));
        }
        let mut labels = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = (y0 + y) * self.width + x0;
            labels.extend_from_slice(&self.labels[row..row + w]);
        }
        Ok(LabelMask {
            width: w,
            height: h,
            classes: self.classes,
            labels,
        })
    }

    /// Foreground (`label > 0`) as a binary mask.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| u8::from(l > 0)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "binary mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Domain("binary mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn to_label_mask(&self) -> LabelMask {
        LabelMask {
            width: self.width,
            height: self.height,
            classes: 2,
            labels: self.bits.iter().map(|&b| b as u32).collect(),
        }
    }

    /// Renders the mask as a gray raster with values {0, 1}.
    pub fn to_raster(&self) -> Raster {
        Raster::new(
            self.width,
            self.height,
            1,
            self.bits.iter().map(|&b| b as f32).collect(),
        )
        .expect("mask extent")
    }
}

enum Format {
    Pgm,
    Ppm,
    Vcat,
}

fn format_for(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("pgm") => Ok(Format::Pgm),
        Some("ppm") => Ok(Format::Ppm),
        Some("vcat") => Ok(Format::Vcat),
        other => Err(Error::Format(format!(
            "cannot infer raster format from extension {other:?} of {}",
            path.display()
        ))),
    }
}

/// Loads a PGM (P5), PPM (P6) or VCAT file, detected from its magic bytes.
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    if bytes.starts_with(vcat::MAGIC) {
        let t = vcat::decode(bytes)?;
        let dims = t.dims();
        let (c, h, w) = match *dims {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Format(format!(
                    "raster tensors must have 2 or 3 dims, got {dims:?}"
                )))
            }
        };
        let data = t.into_values();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("VCAT raster contains non-finite samples".into()));
        }
        return Raster::new(w, h, c, data);
    }
    let img = pnm::decode(bytes)?;
    let scale = 1.0 / img.maxval as f32;
    let (w, h, c) = (img.width, img.height, img.channels);
    // interleaved → planar
    let mut data = vec![0.0f32; w * h * c];
    for (i, px) in img.samples.chunks_exact(c).enumerate() {
        for (ch, &s) in px.iter().enumerate() {
            data[ch * w * h + i] = s as f32 * scale;
        }
    }
    Raster::new(w, h, c, data)
}

/// Writes a raster, choosing the format from the file extension.
pub fn save_raster(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format_for(path)? {
        Format::Vcat => vcat::encode(&[r.channels, r.height, r.width], &r.data),
        Format::Pgm => {
            if r.channels != 1 {
                return Err(Error::Format(format!(
                    "PGM holds 1 channel, raster has {}",
                    r.channels
                )));
            }
            pnm::encode(r.width, r.height, 1, &quantize_interleaved(r))
        }
        Format::Ppm => {
            if r.channels != 3 {
                return Err(Error::Format(format!(
                    "PPM holds 3 channels, raster has {}",
                    r.channels
                )));
            }
            pnm::encode(r.width, r.height, 3, &quantize_interleaved(r))
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn quantize_interleaved(r: &Raster) -> Vec<u8> {
    let n = r.width * r.height;
    let mut out = vec![0u8; n * r.channels];
    for c in 0..r.channels {
        for (i, &v) in r.plane(c).iter().enumerate() {
            out[i * r.channels + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Writes a binary mask as P5 with values {0, 255}.
pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = m.bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    fs::write(path, pnm::encode(m.width, m.height, 1, &bytes)).map_err(|e| Error::io(path, e))
}

/// Reads a mask from a single-channel raster file; samples >= 0.5 are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let r = load_raster(path)?;
    if r.channels != 1 {
        return Err(Error::Format(format!(
            "mask must have 1 channel, file has {}",
            r.channels
        )));
    }
    Ok(BinaryMask {
        width: r.width,
        height: r.height,
        bits: r.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    })
}

/// Writes raw 8-bit gray values as P5; used for label visualisations.
pub fn save_gray_bytes(width: usize, height: usize, bytes: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if bytes.len() != width * height {
        return Err(Error::Shape("gray byte buffer does not match extent".into()));
    }
    fs::write(path, pnm::encode(width, height, 1, bytes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_bytes_are_normalized_by_255() {
        let mut file = b"P5\n2 2\n255\n".to_vec();
        file.extend_from_slice(&[0, 255, 128, 64]);
        let r = decode_raster(&file).unwrap();
        assert_eq!(r.channels(), 1);
        assert_eq!(r.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn p6_has_three_channels() {
        let mut file = b"P6\n3 1\n255\n".to_vec();
        file.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255]);
        let r = decode_raster(&file).unwrap();
        assert_eq!((r.width(), r.height(), r.channels()), (3, 1, 3));
        assert_eq!(r.get(0, 0, 0), 1.0);
        assert_eq!(r.get(1, 1, 0), 1.0);
        assert_eq!(r.get(2, 2, 0), 1.0);
        assert_eq!(r.get(0, 2, 0), 0.0);
    }

    #[test]
    fn truncated_p5_is_rejected() {
        let mut file = b"P5\n2 2\n255\n".to_vec();
        file.extend_from_slice(&[0, 255, 128]);
        assert!(matches!(decode_raster(&file), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_magic_is_rejected() {
        assert!(matches!(decode_raster(b"GIF89a...."), Err(Error::Format(_))));
    }

    #[test]
    fn vcat_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vcat");
        let r = Raster::from_fn(8, 8, 1, |_, x, y| ((x * 31 + y * 17) % 97) as f32 / 97.0);
        save_raster(&r, &path).unwrap();
        assert_eq!(load_raster(&path).unwrap(), r);
    }

    #[test]
    fn five_channels_cannot_be_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::filled(4, 4, 5, 0.5);
        assert!(matches!(
            save_raster(&r, dir.path().join("x.pgm")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn ppm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ppm");
        let r = Raster::from_fn(7, 5, 3, |c, x, y| ((c * 13 + x * 7 + y * 3) % 23) as f32 / 23.0);
        save_raster(&r, &path).unwrap();
        let back = load_raster(&path).unwrap();
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = BinaryMask::from_fn(9, 4, |x, y| (x + y) % 3 == 0);
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn invalid_constructors() {
        assert!(Raster::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Raster::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(Raster::filled(2, 2, 1, 0.0).with_pixel_size(0.0).is_err());
        assert!(LabelMask::new(1, 2, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::new(1, 1, vec![2]).is_err());
    }
}
