//! Feature-space augmentation.
//!
//! Multiplicative per-dimension jitter stands in for color jitter and
//! zeroing a contiguous block of dimensions stands in for a resized crop.
//! `Uniform` draws a fresh jitter per sample and applies it half of the
//! time; `ClientSpecific` draws one jitter vector per client and applies it
//! to every sample that client sees.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    #[default]
    None,
    Uniform,
    ClientSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    pub jitter_scale: f64,
    pub crop_fraction: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            mode: AugmentMode::None,
            jitter_scale: 0.0,
            crop_fraction: 1.0,
        }
    }
}

/// Probability that a `Uniform` augmentation (or a crop) fires for a sample.
pub const APPLY_PROBABILITY: f64 = 0.5;

impl AugmentSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.jitter_scale >= 0.0 && self.jitter_scale.is_finite()) {
            return Err(crate::Error::config("jitter_scale must be finite and >= 0"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(crate::Error::config("crop_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.mode == AugmentMode::None || (self.jitter_scale == 0.0 && self.crop_fraction >= 1.0)
    }
}

fn jitter_vector(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| 1.0 + scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

fn crop(x: &mut [f64], rng: &mut impl Rng, crop_fraction: f64) {
    let dim = x.len();
    let len = ((1.0 - crop_fraction) * dim as f64).round() as usize;
    if len == 0 || dim == 0 {
        return;
    }
    let len = len.min(dim);
    let start = rng.random_range(0..=dim - len);
    x[start..start + len].iter_mut().for_each(|v| *v = 0.0);
}

/// The per-client jitter vector used by `ClientSpecific` mode.
pub fn client_jitter(dim: usize, scale: f64, client_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(client_seed, seed::Stream::Augment, &[dim as u64]);
    jitter_vector(&mut rng, dim, scale)
}

pub fn apply_augmentation(
    x: &[f64],
    spec: &AugmentSpec,
    client_seed: u64,
    sample_seed: u64,
) -> Vec<f64> {
    let mut out = x.to_vec();
    if spec.is_identity() {
        return out;
    }
    let mut rng = seed::rng(sample_seed, seed::Stream::Augment, &[]);
    match spec.mode {
        AugmentMode::None => {}
        AugmentMode::Uniform => {
            if rng.random::<f64>() < APPLY_PROBABILITY {
                let j = jitter_vector(&mut rng, out.len(), spec.jitter_scale);
                out.iter_mut().zip(&j).for_each(|(v, u)| *v *= u);
                crop(&mut out, &mut rng, spec.crop_fraction);
            }
        }
        AugmentMode::ClientSpecific => {
            let j = client_jitter(out.len(), spec.jitter_scale, client_seed);
            out.iter_mut().zip(&j).for_each(|(v, u)| *v *= u);
            if rng.random::<f64>() < APPLY_PROBABILITY {
                crop(&mut out, &mut rng, spec.crop_fraction);
            }
        }
    }
    out
}
