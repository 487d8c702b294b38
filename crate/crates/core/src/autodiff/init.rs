use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `√(2/N)` where `N` is the fan-in (every axis after the first).
pub fn he_std(dims: &[usize]) -> Result<f64> {
    let fan_in: usize = dims.iter().skip(1).product();
    if dims.len() < 2 || fan_in == 0 {
        return Err(Error::Shape(format!("cannot derive fan-in from dims {dims:?}")));
    }
    Ok((2.0 / fan_in as f64).sqrt())
}

/// Weights drawn from `N(0, 2/N)`; deterministic given `seed`.
pub fn gaussian_init<T: Scalar>(dims: &[usize], seed: u64) -> Result<Tensor<T>> {
    let std = he_std(dims)?;
    let normal = Normal::new(0.0, std).expect("std > 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let values = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
    Tensor::new(dims.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_of_a_3x3_conv_over_64_channels() {
        let std = he_std(&[64, 64, 3, 3]).unwrap();
        assert!((std - (2.0f64 / 576.0).sqrt()).abs() < 1e-15);
        assert!((std - 0.0589).abs() < 1e-4);
    }

    #[test]
    fn empirical_std() {
        // 100 * 1000 = 1e5 samples, fan-in 1000
        let t: Tensor<f64> = gaussian_init(&[100, 1000], 9).unwrap();
        let n = t.len() as f64;
        let mean = t.values().iter().sum::<f64>() / n;
        let var = t.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want = (2.0f64 / 1000.0).sqrt();
        assert!((var.sqrt() - want).abs() / want < 0.05);
    }

    #[test]
    fn deterministic() {
        let a: Tensor<f32> = gaussian_init(&[4, 3, 3, 3], 5).unwrap();
        let b: Tensor<f32> = gaussian_init(&[4, 3, 3, 3], 5).unwrap();
        assert_eq!(a, b);
        assert!(gaussian_init::<f32>(&[4], 5).is_err());
    }
}
