use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mix_seed;
use super::phantom::smooth_field;

/// Intensity-only domain shift:
/// `y = max(0, scale * (bias * x)^gamma + offset + noise)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainTransform {
    pub gamma: f64,
    pub scale: f64,
    pub offset: f64,
    /// Peak deviation of the multiplicative bias field from 1; in `[0, 1)`.
    pub bias_amplitude: f64,
    /// Spatial period of the bias field as a fraction of the image.
    pub bias_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainTransform {
    pub fn identity() -> Self {
        Self { gamma: 1.0, scale: 1.0, offset: 0.0, bias_amplitude: 0.0, bias_scale: 1.0, noise_std: 0.0, seed: 0 }
    }

    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param("transform.gamma", format!("must be positive, got {}", self.gamma)));
        }
        if !self.scale.is_finite() || !self.offset.is_finite() {
            return Err(Error::param("transform.scale", "scale and offset must be finite"));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::param("transform.bias_amplitude", "must lie in [0, 1)"));
        }
        if !(self.bias_scale > 0.0) {
            return Err(Error::param("transform.bias_scale", "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::param("transform.noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Applies a transform to the slices of one volume. The bias field is shared
/// by the volume; noise is drawn per slice.
pub fn apply_domain(images: &[Vec<f32>], size: [usize; 2], t: &DomainTransform) -> Result<Vec<Vec<f32>>> {
    t.validate()?;
    let n = size[0] * size[1];
    if images.iter().any(|im| im.len() != n) {
        return Err(Error::shape("apply_domain", format!("images must hold {n} pixels")));
    }
    if images.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(Error::Contract("apply_domain expects non-negative images".into()));
    }
    let bias = if t.bias_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(t.seed, &[0]));
        smooth_field(&mut rng, size, t.bias_scale).into_iter().map(|f| 1.0 + t.bias_amplitude * f.clamp(-1.0, 1.0)).collect()
    } else {
        vec![1.0; n]
    };
    Ok(images
        .iter()
        .enumerate()
        .map(|(k, im)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(t.seed, &[1, k as u64]));
            im.iter()
                .zip(&bias)
                .map(|(&x, &b)| {
                    let noise = if t.noise_std > 0.0 {
                        t.noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    let y = t.scale * (b * x as f64).powf(t.gamma) + t.offset + noise;
                    y.max(0.0) as f32
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_images_unchanged() {
        let im = vec![vec![0.0f32, 0.25, 0.5, 1.5]];
        assert_eq!(apply_domain(&im, [2, 2], &DomainTransform::identity()).unwrap(), im);
    }

    #[test]
    fn gamma_two_squares() {
        let t = DomainTransform { gamma: 2.0, ..DomainTransform::identity() };
        let out = apply_domain(&[vec![0.5f32]], [1, 1], &t).unwrap();
        assert_eq!(out[0][0], 0.25);
    }

    #[test]
    fn non_positive_gamma_is_rejected() {
        let t = DomainTransform { gamma: 0.0, ..DomainTransform::identity() };
        assert!(matches!(apply_domain(&[vec![0.5f32]], [1, 1], &t), Err(Error::Parameter { .. })));
    }

    #[test]
    fn inversion_clamps_at_zero() {
        let t = DomainTransform { scale: -1.0, offset: 0.5, ..DomainTransform::identity() };
        let out = apply_domain(&[vec![0.0f32, 0.25, 1.0]], [1, 3], &t).unwrap();
        assert_eq!(out[0], vec![0.5, 0.25, 0.0]);
    }
}
