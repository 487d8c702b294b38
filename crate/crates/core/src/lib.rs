//! Vegetation segmentation and change assessment.
//!
//! The pipeline trains a small U-Net on image patches with a border-aware
//! weighted cross-entropy, proposes candidate regions with a watershed
//! transform, predicts full-scene masks with overlapping sliding windows and
//! dihedral test-time averaging, and finally measures vegetated area by
//! counting occupied tiles so two dates of one scene can be compared.

pub mod autodiff;
pub mod change;
pub mod checkpoint;
pub mod error;
pub mod infer;
pub mod raster;
pub mod registry;
pub mod remap;
pub mod similarity;
pub mod train;
pub mod unet;
pub mod watershed;
pub mod weightmap;

pub use error::{Error, Result};
