//! Minkowsky-family distances between feature vectors.

use std::sync::OnceLock;

use crate::change::TileGrid;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature vectors must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for FeatureVector {
    /// Panics on non-finite components; use [`FeatureVector::new`] for untrusted data.
    fn from(values: Vec<f64>) -> Self {
        Self::new(values).expect("finite feature vector")
    }
}

fn check_len(a: &FeatureVector, b: &FeatureVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `(Σ |aᵢ − bᵢ|^p)^(1/p)` for `p ≥ 1`.
pub fn minkowsky(a: &FeatureVector, b: &FeatureVector, p: f64) -> Result<f64> {
    check_len(a, b)?;
    if !(p >= 1.0) || p.is_nan() {
        return Err(Error::Domain(format!("Minkowsky order must be >= 1, got {p}")));
    }
    let diffs = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs());
    Ok(if p == 1.0 {
        diffs.sum()
    } else if p == 2.0 {
        diffs.map(|d| d * d).sum::<f64>().sqrt()
    } else if p.is_infinite() {
        diffs.fold(0.0, f64::max)
    } else {
        // scale by the largest difference to keep d^p in range
        let diffs: Vec<f64> = diffs.collect();
        let m = diffs.iter().copied().fold(0.0, f64::max);
        if m == 0.0 {
            0.0
        } else {
            m * diffs.iter().map(|d| (d / m).powf(p)).sum::<f64>().powf(1.0 / p)
        }
    })
}

/// City-block distance.
pub fn l1(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    minkowsky(a, b, 1.0)
}

/// Euclidean distance.
pub fn l2(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    minkowsky(a, b, 2.0)
}

/// Number of positions where two binary vectors differ.
pub fn hamming(a: &FeatureVector, b: &FeatureVector) -> Result<usize> {
    check_len(a, b)?;
    Ok(a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count())
}

/// Row-major 0/1 tile occupancy.
pub fn tile_signature(g: &TileGrid) -> FeatureVector {
    FeatureVector(g.occupancy().iter().map(|&o| o as f64).collect())
}

pub trait DistanceMetric: Send + Sync {
    fn name(&self) -> String;
    fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64>;
}

#[derive(Clone, Copy, Debug)]
pub struct Minkowsky {
    pub p: f64,
}

impl DistanceMetric for Minkowsky {
    fn name(&self) -> String {
        format!("minkowsky:{}", self.p)
    }

    fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
        minkowsky(a, b, self.p)
    }
}

pub struct CityBlock;

impl DistanceMetric for CityBlock {
    fn name(&self) -> String {
        "l1".into()
    }

    fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
        l1(a, b)
    }
}

pub struct Euclidean;

impl DistanceMetric for Euclidean {
    fn name(&self) -> String {
        "l2".into()
    }

    fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
        l2(a, b)
    }
}

pub type MetricRegistry = Registry<dyn DistanceMetric, ()>;

/// Built-in metrics: `l1`, `l2` and `minkowsky:<p>` (default p = 2).
pub fn metrics() -> &'static MetricRegistry {
    static REGISTRY: OnceLock<MetricRegistry> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r = Registry::new("metric");
        r.register("l1", |_, _| Ok(Box::new(CityBlock) as Box<dyn DistanceMetric>))
            .register("l2", |_, _| Ok(Box::new(Euclidean) as Box<dyn DistanceMetric>))
            .register("minkowsky", |_, arg| {
                let p = match arg {
                    None => 2.0,
                    Some(s) => s
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad Minkowsky order `{s}`")))?,
                };
                if !(p >= 1.0) {
                    return Err(Error::Domain(format!("Minkowsky order must be >= 1, got {p}")));
                }
                Ok(Box::new(Minkowsky { p }) as Box<dyn DistanceMetric>)
            });
        r
    })
}
