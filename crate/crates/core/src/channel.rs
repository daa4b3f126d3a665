//! Over-the-air aggregation: every participant transmits at once, the
//! server receives the superposition of their gradient vectors plus
//! receiver-side white Gaussian noise, and divides by the participant
//! count. Channel gains are unity and transmitters perfectly synchronized.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradientVector;

pub const DEFAULT_SNR_DB: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub noise_enabled: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            snr_db: DEFAULT_SNR_DB,
            noise_enabled: true,
        }
    }
}

impl ChannelConfig {
    pub fn noiseless() -> Self {
        ChannelConfig {
            snr_db: DEFAULT_SNR_DB,
            noise_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Domain(format!("snr_db must be finite, got {}", self.snr_db)));
        }
        Ok(())
    }
}

/// Coordinate-wise sum, accumulated in slice order.
fn superpose(gvs: &[GradientVector]) -> Result<GradientVector> {
    let (first, rest) = gvs.split_first().ok_or(Error::NoParticipants)?;
    let mut sum = first.clone();
    for gv in rest {
        if gv.layout() != first.layout() {
            return Err(Error::Layout {
                expected: first.len(),
                actual: gv.len(),
            });
        }
        for (s, g) in sum.values_mut().iter_mut().zip(gv.values()) {
            *s += g;
        }
    }
    Ok(sum)
}

fn scale_down(mut sum: GradientVector, count: usize) -> GradientVector {
    let m = count as f64;
    sum.values_mut().iter_mut().for_each(|v| *v /= m);
    sum
}

/// Noise-free mean of the participants' vectors. Callers pass `gvs` in
/// ascending client-id order; the summation follows that order.
pub fn ideal_aggregate(gvs: &[GradientVector]) -> Result<GradientVector> {
    let sum = superpose(gvs)?;
    Ok(scale_down(sum, gvs.len()))
}

/// Noise standard deviation for a given per-dimension signal power and SNR.
pub fn noise_sigma(signal_power_per_dim: f64, snr_db: f64) -> Result<f64> {
    if !(signal_power_per_dim > 0.0 && signal_power_per_dim.is_finite()) {
        return Err(Error::Domain(format!(
            "signal power must be positive, got {signal_power_per_dim}"
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Domain(format!("snr_db must be finite, got {snr_db}")));
    }
    Ok((signal_power_per_dim / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// Mean squared coordinate of a vector.
pub fn power_per_dim(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

/// `(sum_e g_e + n) / M` with `n ~ N(0, sigma^2 I)` and sigma set so the
/// superposed signal sits `cfg.snr_db` above the noise. An all-zero
/// superposition has no power to calibrate against and receives no noise.
/// With noise disabled the result is bit-identical to [`ideal_aggregate`]
/// and `noise` is not consumed.
pub fn ota_aggregate<R: Rng + ?Sized>(
    gvs: &[GradientVector],
    cfg: &ChannelConfig,
    noise: &mut R,
) -> Result<GradientVector> {
    cfg.validate()?;
    let mut sum = superpose(gvs)?;
    if cfg.noise_enabled {
        let power = power_per_dim(sum.values());
        if power > 0.0 {
            let sigma = noise_sigma(power, cfg.snr_db)?;
            for v in sum.values_mut() {
                let z: f64 = noise.sample(StandardNormal);
                *v += sigma * z;
            }
        }
    }
    Ok(scale_down(sum, gvs.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::rng;
    use std::sync::Arc;

    fn gv(values: Vec<f64>) -> GradientVector {
        let spec = ModelSpec::new(vec![values.len() - 1, 1]).unwrap();
        GradientVector::new(values, Arc::new(spec.layout())).unwrap()
    }

    #[test]
    fn ideal_mean_examples() {
        let out = ideal_aggregate(&[gv(vec![1.0, 2.0]), gv(vec![3.0, 4.0])]).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0]);
        let single = gv(vec![0.1, -0.7, 3.0]);
        assert_eq!(ideal_aggregate(std::slice::from_ref(&single)).unwrap(), single);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(ideal_aggregate(&[]), Err(Error::NoParticipants)));
        assert!(matches!(
            ideal_aggregate(&[gv(vec![1.0, 2.0]), gv(vec![1.0, 2.0, 3.0])]),
            Err(Error::Layout { .. })
        ));
    }

    #[test]
    fn sigma_examples() {
        assert!((noise_sigma(1.0, 10.0).unwrap().powi(2) - 0.1).abs() < 1e-15);
        assert!((noise_sigma(1.0, 10.0).unwrap() - 0.316228).abs() < 1e-6);
        assert!((noise_sigma(1.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((noise_sigma(4.0, 10.0).unwrap().powi(2) - 0.4).abs() < 1e-15);
        assert!(noise_sigma(0.0, 10.0).is_err());
        assert!(noise_sigma(-1.0, 10.0).is_err());
    }

    #[test]
    fn noiseless_matches_ideal_and_ignores_stream() {
        let gvs = vec![gv(vec![1.0, 2.0]), gv(vec![3.0, 4.0])];
        let mut s = rng::stream(1, &[]);
        let out = ota_aggregate(&gvs, &ChannelConfig::noiseless(), &mut s).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0]);
        let mut fresh = rng::stream(1, &[]);
        assert_eq!(s.random::<u64>(), fresh.random::<u64>());
    }

    #[test]
    fn vanishing_noise_at_high_snr() {
        let gvs = vec![gv(vec![1.0, -2.0, 0.5]), gv(vec![3.0, 4.0, 0.25])];
        let ideal = ideal_aggregate(&gvs).unwrap();
        let cfg = ChannelConfig {
            snr_db: 300.0,
            noise_enabled: true,
        };
        let out = ota_aggregate(&gvs, &cfg, &mut rng::stream(4, &[])).unwrap();
        for (a, b) in out.values().iter().zip(ideal.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_signal_gets_no_noise() {
        let gvs = vec![gv(vec![0.0; 4]), gv(vec![0.0; 4])];
        let out = ota_aggregate(&gvs, &ChannelConfig::default(), &mut rng::stream(4, &[])).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noisy_output_is_deterministic() {
        let gvs = vec![gv(vec![1.0, -2.0, 0.5]), gv(vec![3.0, 4.0, 0.25])];
        let cfg = ChannelConfig::default();
        let a = ota_aggregate(&gvs, &cfg, &mut rng::stream(4, &[])).unwrap();
        let b = ota_aggregate(&gvs, &cfg, &mut rng::stream(4, &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ideal_aggregate(&gvs).unwrap());
    }
}
