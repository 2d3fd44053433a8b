//! Noise schedule and Min-SNR loss weighting.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_GAMMA_SNR: f64 = 5.0;

/// Linear `β` schedule with cumulative products `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::validation("need at least 2 diffusion timesteps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::validation(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alphas_cumprod[t];
        a / (1.0 - a)
    }

    /// `(sqrt(ᾱ_t), sqrt(1 - ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alphas_cumprod[t];
        (math::sqrt(a), math::sqrt(1.0 - a))
    }
}

/// `min(SNR(t), γ) / SNR(t)` for noise prediction.
pub fn min_snr_weight(t: usize, schedule: &NoiseSchedule, gamma_snr: f64) -> f64 {
    let snr = schedule.snr(t);
    snr.min(gamma_snr) / snr
}
