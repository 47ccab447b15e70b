//! Training-free conditioned inference: unknown regions start as Gaussian
//! noise, the reverse diffusion runs with observed regions pinned to their
//! true values at every step, and K independent chains are averaged.
//!
//! Pinning is hard replacement: after each reverse update the observed
//! entries are overwritten with the request's values, so they survive the
//! whole chain bit for bit.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_step, MaskVector, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParameters};
use crate::region::NormStats;
use crate::rng::sub_rng;

/// Default number of reverse-diffusion rounds averaged per prediction.
pub const DEFAULT_ROUNDS: usize = 10;

/// One conditioned completion task: which regions are known, their values,
/// and how many chains to average.
#[derive(Debug, Clone)]
pub struct InferenceRequest {
    observed_values: Vec<f64>,
    mask: MaskVector,
    rounds: usize,
    seed: u64,
}

impl InferenceRequest {
    /// Builds a request. `mask` marks regions to predict with 1 and
    /// observed regions with 0; there must be at least one of each.
    /// `observed_values` entries at masked positions are ignored but must
    /// still be finite.
    pub fn new(
        observed_values: Vec<f64>,
        mask: MaskVector,
        rounds: usize,
        seed: u64,
    ) -> Result<Self> {
        if observed_values.len() != mask.len() {
            return Err(Error::config(format!(
                "request has {} values but a mask over {} regions",
                observed_values.len(),
                mask.len()
            )));
        }
        let unknown = mask.masked_count();
        if unknown == 0 {
            return Err(Error::config("request must leave at least one region to predict"));
        }
        if unknown == mask.len() {
            return Err(Error::config("request must observe at least one region"));
        }
        if let Some(i) = observed_values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("request value at region {i} is not finite")));
        }
        if rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        Ok(Self { observed_values, mask, rounds, seed })
    }

    pub fn observed_values(&self) -> &[f64] {
        &self.observed_values
    }

    pub fn mask(&self) -> &MaskVector {
        &self.mask
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// The K completed profiles of one prediction plus their pointwise mean
/// and spread.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionEnsemble {
    samples: Vec<Vec<f64>>,
    mean_prediction: Vec<f64>,
    per_region_std: Vec<f64>,
}

impl PredictionEnsemble {
    /// Computes mean and std from raw chain outputs. The std is the
    /// population standard deviation over chains; regions where every
    /// chain produced the bitwise-same value (observed regions in
    /// particular) get a std of exactly zero.
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let k = samples.len();
        if k == 0 {
            return Err(Error::data("ensemble requires at least one sample"));
        }
        let n = samples[0].len();
        if let Some(bad) = samples.iter().position(|s| s.len() != n) {
            return Err(Error::data(format!(
                "ensemble sample {bad} has {} values, expected {n}",
                samples[bad].len()
            )));
        }
        let inv_k = 1.0 / k as f64;
        let mut mean_prediction = vec![0.0; n];
        let mut per_region_std = vec![0.0; n];
        for i in 0..n {
            if samples.iter().all(|s| s[i].to_bits() == samples[0][i].to_bits()) {
                mean_prediction[i] = samples[0][i];
                continue;
            }
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() * inv_k;
            let var = samples.iter().map(|s| (s[i] - mean) * (s[i] - mean)).sum::<f64>() * inv_k;
            mean_prediction[i] = mean;
            per_region_std[i] = var.sqrt();
        }
        Ok(Self { samples, mean_prediction, per_region_std })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn mean_prediction(&self) -> &[f64] {
        &self.mean_prediction
    }

    pub fn per_region_std(&self) -> &[f64] {
        &self.per_region_std
    }

    /// Number of chains in the ensemble.
    pub fn rounds(&self) -> usize {
        self.samples.len()
    }
}

/// Starts a chain: observed entries copied from the request, unknown
/// entries drawn from the standard normal.
pub fn init_noisy_profile(request: &InferenceRequest, rng: &mut ChaCha8Rng) -> Vec<f64> {
    request
        .observed_values
        .iter()
        .zip(request.mask.bits())
        .map(|(&v, &bit)| if bit == 1 { StandardNormal.sample(rng) } else { v })
        .collect()
}

/// Overwrites observed entries with the request's values.
fn pin_observed(x: &mut [f64], request: &InferenceRequest) {
    for (xi, (&v, &bit)) in x.iter_mut().zip(request.observed_values.iter().zip(request.mask.bits()))
    {
        if bit == 0 {
            *xi = v;
        }
    }
}

/// Runs one full reverse chain from `t = T` down to `t = 1`.
///
/// Each step feeds the current state to the model as the noisy profile,
/// applies the reverse update with the predicted noise, then pins the
/// observed entries back to their requested values. The added noise `z`
/// is zero on the final step.
pub fn reverse_chain(
    request: &InferenceRequest,
    params: &ModelParameters,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = params.config().n_regions;
    if request.observed_values.len() != n {
        return Err(Error::config(format!(
            "request covers {} regions, checkpoint expects {n}",
            request.observed_values.len()
        )));
    }
    if schedule.len() != params.config().t_steps {
        return Err(Error::config(format!(
            "schedule has {} steps, checkpoint was trained with {}",
            schedule.len(),
            params.config().t_steps
        )));
    }

    let mut x = init_noisy_profile(request, rng);
    pin_observed(&mut x, request);
    for t in (1..=schedule.len()).rev() {
        let trace = forward(params, &request.observed_values, &x, &request.mask, t, false)?;
        let eps_hat = trace.eps_hat().as_slice().expect("head outputs are contiguous");
        let z: Vec<f64> = if t > 1 {
            (0..n).map(|_| StandardNormal.sample(rng)).collect()
        } else {
            vec![0.0; n]
        };
        x = reverse_step(&x, eps_hat, t, &z, schedule)?;
        pin_observed(&mut x, request);
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "reverse chain produced a non-finite value at region {i}"
        )));
    }
    Ok(x)
}

/// Runs `request.rounds` independent chains and aggregates them.
///
/// Chain `k` draws from the sub-stream `(seed, "chain", k)`, so the
/// ensemble is reproducible and identical for any worker count; chains
/// run on up to `threads` workers and are gathered in chain order.
pub fn predict(
    request: &InferenceRequest,
    params: &ModelParameters,
    schedule: &NoiseSchedule,
    threads: usize,
) -> Result<PredictionEnsemble> {
    if threads == 0 {
        return Err(Error::config("threads must be at least 1"));
    }
    let k = request.rounds;
    let run = |chain: usize| -> Result<Vec<f64>> {
        let mut rng = sub_rng(request.seed, "chain", chain as u64);
        reverse_chain(request, params, schedule, &mut rng)
    };

    let samples = if threads <= 1 || k <= 1 {
        (0..k).map(run).collect::<Result<Vec<_>>>()?
    } else {
        let threads = threads.min(k);
        let mut slots: Vec<Result<Vec<f64>>> = Vec::with_capacity(k);
        std::thread::scope(|scope| {
            let run = &run;
            let mut handles = Vec::new();
            for w in 0..threads {
                handles.push(scope.spawn(move || {
                    (w..k).step_by(threads).map(|c| (c, run(c))).collect::<Vec<_>>()
                }));
            }
            let mut gathered: Vec<Option<Result<Vec<f64>>>> = (0..k).map(|_| None).collect();
            for handle in handles {
                for (c, result) in handle.join().expect("chain worker panicked") {
                    gathered[c] = Some(result);
                }
            }
            slots.extend(gathered.into_iter().map(|s| s.expect("all chains scheduled")));
        });
        slots.into_iter().collect::<Result<Vec<_>>>()?
    };

    PredictionEnsemble::from_samples(samples)
}

/// On-disk form of a prediction: the ensemble plus the mask it answered.
/// Values are on whatever scale the caller sampled in; `norm` records the
/// z-scoring applied to the model inputs, when the caller applied one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionFile {
    /// 1 = predicted, 0 = observed.
    pub mask: Vec<u8>,
    /// Pointwise mean over the ensemble.
    pub mean: Vec<f64>,
    /// Pointwise population std over the ensemble.
    pub std: Vec<f64>,
    /// All completed profiles, chain-ordered, each over every region.
    pub samples: Vec<Vec<f64>>,
    /// Stats for denormalization, when the caller normalized the inputs.
    pub norm: Option<NormStats>,
}

/// Writes a prediction with its mask and normalization stats as JSON.
pub fn save_prediction_json(
    path: impl AsRef<Path>,
    ensemble: &PredictionEnsemble,
    mask: &MaskVector,
    norm: Option<NormStats>,
) -> Result<()> {
    let file = PredictionFile {
        mask: mask.bits().to_vec(),
        mean: ensemble.mean_prediction.clone(),
        std: ensemble.per_region_std.clone(),
        samples: ensemble.samples.clone(),
        norm,
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Reads a prediction written by [`save_prediction_json`].
pub fn load_prediction_json(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let text = std::fs::read_to_string(&path)?;
    let file: PredictionFile = serde_json::from_str(&text)?;
    let n = file.mask.len();
    if file.mean.len() != n || file.std.len() != n || file.samples.iter().any(|s| s.len() != n) {
        return Err(Error::data(format!(
            "prediction file {} has inconsistent lengths",
            path.as_ref().display()
        )));
    }
    if file.samples.is_empty() {
        return Err(Error::data("prediction file contains no samples"));
    }
    Ok(file)
}
