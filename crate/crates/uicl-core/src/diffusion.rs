//! Denoising-diffusion machinery: the noise schedule, forward corruption,
//! the single reverse step, and random mask construction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 1000;
/// Default first-step noise variance of the linear schedule.
pub const DEFAULT_BETA_START: f64 = 1e-4;
/// Default last-step noise variance of the linear schedule.
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Lower bound of the truncated mask-ratio distribution.
pub const MASK_RATIO_MIN: f64 = 0.01;
/// Upper bound of the truncated mask-ratio distribution.
pub const MASK_RATIO_MAX: f64 = 0.99;

/// Precomputed per-step noise quantities for a `T`-step diffusion.
///
/// Step indices are 1-based in the public API; array slot `t - 1` holds the
/// values for step `t`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a linear beta schedule from `beta_start` to `beta_end` over
    /// `t_steps` steps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut beta = Vec::with_capacity(t_steps);
        for i in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                i as f64 / (t_steps - 1) as f64
            };
            beta.push(beta_start + frac * (beta_end - beta_start));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::config(format!(
                "step {t} outside schedule range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// Binary mask over regions: 1 = masked/unknown, 0 = observed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    bits: Vec<u8>,
    ratio: f64,
}

impl MaskVector {
    /// Wraps explicit bits. `ratio` records the realized masked fraction.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::data("mask bits must be 0 or 1"));
        }
        let ratio = bits.iter().map(|b| *b as f64).sum::<f64>() / bits.len().max(1) as f64;
        Ok(MaskVector { bits, ratio })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Realized masked fraction.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|i| self.bits[*i] == 1).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|i| self.bits[*i] == 0).collect()
    }
}

/// Applies the forward corruption at step `t`:
/// `x_t = sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse(
    x: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x.len() != eps.len() {
        return Err(Error::data(format!(
            "signal length {} does not match noise length {}",
            x.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x.iter()
        .zip(eps)
        .map(|(xi, ei)| signal * xi + noise * ei)
        .collect())
}

/// Applies one reverse update from step `t` to `t - 1`:
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z`.
///
/// At `t = 1` the caller passes `z = 0` so the final step is noiseless.
pub fn reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    z: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x_t.len() != eps_hat.len() || x_t.len() != z.len() {
        return Err(Error::data(format!(
            "reverse_step length mismatch: x {} eps {} z {}",
            x_t.len(),
            eps_hat.len(),
            z.len()
        )));
    }
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let noise_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = schedule.sigma(t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((xi, ei), zi)| inv_sqrt_alpha * (xi - noise_coef * ei) + sigma * zi)
        .collect())
}

/// Samples a mask ratio from a Gaussian with mean 0.5 and unit standard
/// deviation, truncated to `[0.01, 0.99]` by rejection.
pub fn sample_mask_ratio(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let p = 0.5 + z;
        if (MASK_RATIO_MIN..=MASK_RATIO_MAX).contains(&p) {
            return p;
        }
    }
}

/// Draws a random mask over `n` positions with target masked fraction
/// `ratio`. The masked count is `round(ratio * n)` clamped to `[1, n - 1]`,
/// so every mask keeps at least one masked and one observed position.
pub fn make_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskVector> {
    if n < 2 {
        return Err(Error::config("mask needs at least 2 positions"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {ratio} outside (0,1)")));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut bits = vec![0u8; n];
    for idx in rand::seq::index::sample(rng, n, k) {
        bits[idx] = 1;
    }
    Ok(MaskVector {
        bits,
        ratio: k as f64 / n as f64,
    })
}
