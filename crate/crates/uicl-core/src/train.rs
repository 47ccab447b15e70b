//! Pretraining loop: masked-noise regression with mask and alignment
//! auxiliaries, optimized with Adam.
//!
//! The objective is `L = L_noise + lambda_mask * L_mask + lambda_align *
//! L_align`. The noise term scores the denoiser on masked entries only, the
//! mask term asks the mask head to reproduce the mask bits, and the optional
//! alignment term pulls the mid-layer embedding head toward reference region
//! embeddings by cosine similarity.
//!
//! Every source of randomness (mask ratios, masks, timesteps, noise, epoch
//! shuffles, validation draws) comes from labelled sub-streams of the run
//! seed, so a rerun with the same configuration reproduces the checkpoint
//! byte for byte.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::diffusion::{
    forward_diffuse, make_mask, sample_mask_ratio, MaskVector, NoiseSchedule,
    DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, save_checkpoint, HeadGradients, ModelConfig, ModelParameters,
    ParameterGradients,
};
use crate::region::{ProfileMatrix, ReferenceEmbeddings};
use crate::rng::sub_rng;

/// Sigmoid outputs are clamped to this range before the logs in the mask
/// loss, so saturated logits cannot produce infinities.
pub const MASK_PROB_CLAMP: f64 = 1e-7;

/// Alignment rows with norm below this threshold contribute a fixed loss of
/// one (cosine treated as zero) and no gradient, since the cosine direction
/// is undefined at the origin.
pub const ALIGN_NORM_FLOOR: f64 = 1e-12;

/// Hyperparameters for a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Adam learning rate.
    pub lr: f64,
    /// Number of passes over the training profiles.
    pub epochs: usize,
    /// Examples per optimizer step. Final batch of an epoch may be smaller.
    pub batch_size: usize,
    /// Weight of the mask-reconstruction loss.
    pub lambda_mask: f64,
    /// Weight of the alignment loss. Forced to zero when no reference
    /// embeddings are supplied.
    pub lambda_align: f64,
    /// Run seed. All randomness derives from labelled sub-streams of it.
    pub seed: u64,
    /// Noise-schedule start, at `t = 1`.
    pub beta_start: f64,
    /// Noise-schedule end, at `t = T`.
    pub beta_end: f64,
    /// Adam first-moment decay.
    pub adam_beta1: f64,
    /// Adam second-moment decay.
    pub adam_beta2: f64,
    /// Adam denominator offset.
    pub adam_eps: f64,
    /// Run validation every this many epochs. Zero disables validation.
    pub val_every: usize,
    /// Fraction of profiles held out for validation. Zero disables.
    pub val_frac: f64,
    /// Optional max L2 norm for the mean batch gradient.
    pub grad_clip: Option<f64>,
    /// Worker threads for the per-example forward/backward passes. Results
    /// are deterministic for a fixed thread count; changing the count only
    /// regroups the floating-point reduction.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            epochs: 1000,
            batch_size: 128,
            lambda_mask: 0.3,
            lambda_align: 0.1,
            seed: 0,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 10,
            val_frac: 0.1,
            grad_clip: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Checks the ranges of every field.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        for (name, value) in [("lambda_mask", self.lambda_mask), ("lambda_align", self.lambda_align)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative, got {value}")));
            }
        }
        for (name, value) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(value.is_finite() && (0.0..1.0).contains(&value)) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {value}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if !(self.val_frac.is_finite() && (0.0..1.0).contains(&self.val_frac)) {
            return Err(Error::config(format!("val_frac must be in [0, 1), got {}", self.val_frac)));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {clip}")));
            }
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        Ok(())
    }
}

/// Loss components of one optimizer step or one epoch average.
///
/// `total` is always assembled as `noise + lambda_mask * mask + lambda_align
/// * align` from the (averaged) components, so the decomposition identity
/// holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// One-based epoch index.
    pub epoch: usize,
    /// One-based global optimizer step index.
    pub step: usize,
    /// Weighted sum of the three components.
    pub total: f64,
    /// Masked-entry noise regression loss.
    pub noise: f64,
    /// Mask-bit reconstruction loss.
    pub mask: f64,
    /// Cosine alignment loss, zero when alignment is inactive.
    pub align: f64,
}

/// Mean squared error between predicted and true noise over the masked
/// entries only. Observed entries carry no noise target.
pub fn noise_loss(eps_hat: &[f64], eps_true: &[f64], mask: &MaskVector) -> Result<f64> {
    Ok(noise_loss_grad(eps_hat, eps_true, mask)?.0)
}

/// Noise loss together with its gradient with respect to `eps_hat`.
pub fn noise_loss_grad(
    eps_hat: &[f64],
    eps_true: &[f64],
    mask: &MaskVector,
) -> Result<(f64, Array1<f64>)> {
    let n = mask.bits().len();
    if eps_hat.len() != n || eps_true.len() != n {
        return Err(Error::config(format!(
            "noise loss length mismatch: eps_hat {}, eps_true {}, mask {n}",
            eps_hat.len(),
            eps_true.len()
        )));
    }
    let m = mask.masked_count();
    if m == 0 {
        return Err(Error::config("noise loss requires at least one masked entry"));
    }
    let mut loss = 0.0;
    let mut grad = Array1::zeros(n);
    let scale = 1.0 / m as f64;
    for i in mask.masked_indices() {
        let diff = eps_hat[i] - eps_true[i];
        loss += diff * diff * scale;
        grad[i] = 2.0 * diff * scale;
    }
    Ok((loss, grad))
}

/// Binary cross-entropy between the mask head's logits and the mask bits,
/// averaged over all regions.
pub fn mask_loss(logits: &[f64], mask: &MaskVector) -> Result<f64> {
    Ok(mask_loss_grad(logits, mask)?.0)
}

/// Mask loss together with its gradient with respect to the logits.
///
/// Probabilities are clamped away from 0 and 1 before the logs; inside the
/// clamp the gradient is the usual `sigmoid(x) - bit`, and a clamped entry
/// contributes a constant, so its gradient is zero.
pub fn mask_loss_grad(logits: &[f64], mask: &MaskVector) -> Result<(f64, Array1<f64>)> {
    let n = mask.bits().len();
    if logits.len() != n {
        return Err(Error::config(format!(
            "mask loss length mismatch: logits {}, mask {n}",
            logits.len()
        )));
    }
    let lo = MASK_PROB_CLAMP;
    let hi = 1.0 - MASK_PROB_CLAMP;
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(n);
    for (i, (&x, &bit)) in logits.iter().zip(mask.bits()).enumerate() {
        let p = 1.0 / (1.0 + (-x).exp());
        let pc = p.clamp(lo, hi);
        let b = f64::from(bit);
        loss -= (b * pc.ln() + (1.0 - b) * (1.0 - pc).ln()) * scale;
        if (lo..=hi).contains(&p) {
            grad[i] = (p - b) * scale;
        }
    }
    Ok((loss, grad))
}

/// Mean cosine disagreement `1 - cos(e_hat_i, reference_i)` over regions.
///
/// Ranges over `[0, 2]`: zero when every row points along its reference,
/// two when every row points opposite.
pub fn align_loss(e_hat: &Array2<f64>, reference: &ReferenceEmbeddings) -> Result<f64> {
    Ok(align_loss_grad(e_hat, reference)?.0)
}

/// Alignment loss together with its gradient with respect to `e_hat`.
pub fn align_loss_grad(
    e_hat: &Array2<f64>,
    reference: &ReferenceEmbeddings,
) -> Result<(f64, Array2<f64>)> {
    let refs = reference.matrix();
    if e_hat.dim() != refs.dim() {
        return Err(Error::config(format!(
            "alignment shape mismatch: predictions {:?}, references {:?}",
            e_hat.dim(),
            refs.dim()
        )));
    }
    let n = e_hat.nrows();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(e_hat.raw_dim());
    for i in 0..n {
        let e = e_hat.row(i);
        let r = refs.row(i);
        let ne = e.dot(&e).sqrt();
        // Reference rows are non-zero by construction of ReferenceEmbeddings.
        let nr = r.dot(&r).sqrt();
        if ne < ALIGN_NORM_FLOOR {
            loss += scale;
            continue;
        }
        let dot = e.dot(&r);
        let cos = dot / (ne * nr);
        loss += (1.0 - cos) * scale;
        // d(1 - cos)/de = -r / (|e||r|) + cos * e / |e|^2, divided by n.
        let mut g = grad.row_mut(i);
        g.scaled_add(-scale / (ne * nr), &r);
        g.scaled_add(scale * cos / (ne * ne), &e);
    }
    Ok((loss, grad))
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// Creates zeroed optimizer state for `len` parameters.
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// Creates state sized for `params` from a training configuration.
    pub fn for_params(params: &ModelParameters, config: &TrainConfig) -> Self {
        Self::new(
            params.param_count(),
            config.lr,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer length mismatch: state {}, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Pre-drawn randomness for one training example: mask, timestep, and the
/// noise vector. Drawing everything up front in example order keeps the
/// step deterministic regardless of how the examples are later scheduled
/// across workers.
#[derive(Debug, Clone)]
struct ExampleDraw {
    mask: MaskVector,
    t: usize,
    eps: Vec<f64>,
}

fn draw_example(n: usize, t_steps: usize, rng: &mut ChaCha8Rng) -> Result<ExampleDraw> {
    let ratio = sample_mask_ratio(rng);
    let mask = make_mask(n, ratio, rng)?;
    let t = rng.gen_range(1..=t_steps);
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(ExampleDraw { mask, t, eps })
}

/// Loss sums accumulated over the examples of one batch.
#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    noise: f64,
    mask: f64,
    align: f64,
}

impl LossSums {
    fn add(&mut self, other: &LossSums) {
        self.noise += other.noise;
        self.mask += other.mask;
        self.align += other.align;
    }
}

/// Forward/backward for one example; returns its loss components and adds
/// its parameter gradient into `grads`.
fn example_gradient(
    profile: &[f64],
    draw: &ExampleDraw,
    params: &ModelParameters,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    reference: Option<&ReferenceEmbeddings>,
    grads: &mut ParameterGradients,
) -> Result<LossSums> {
    let noisy = forward_diffuse(profile, draw.t, &draw.eps, schedule)?;
    let trace = forward(params, profile, &noisy, &draw.mask, draw.t, true)?;

    let eps_hat = trace.eps_hat().as_slice().expect("head outputs are contiguous");
    let logits = trace.mask_logits().as_slice().expect("head outputs are contiguous");
    let (noise, d_eps) = noise_loss_grad(eps_hat, &draw.eps, &draw.mask)?;
    let (mask, d_logits_raw) = mask_loss_grad(logits, &draw.mask)?;

    let align_active = config.lambda_align > 0.0 && reference.is_some();
    let (align, d_ehat) = if align_active {
        let reference = reference.expect("reference checked above");
        let e_hat = trace.e_hat().ok_or_else(|| {
            Error::config("alignment loss requires a model with an alignment head (ref_dim > 0)")
        })?;
        let (align, d_align) = align_loss_grad(&e_hat.to_owned(), reference)?;
        (align, Some(d_align * config.lambda_align))
    } else {
        (0.0, None)
    };

    let upstream = HeadGradients {
        d_eps,
        d_logits: d_logits_raw * config.lambda_mask,
        d_ehat,
    };
    let g = backward(&trace, &upstream, params)?;
    grads.add_scaled(&g, 1.0);
    Ok(LossSums { noise, mask, align })
}

/// Computes the summed batch gradient and loss sums, optionally spreading
/// the per-example passes over a scoped worker pool. Workers own disjoint
/// contiguous chunks and their partial sums combine in chunk order, so the
/// result is deterministic for any fixed thread count.
fn batch_gradients(
    batch: &[&[f64]],
    draws: &[ExampleDraw],
    params: &ModelParameters,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    reference: Option<&ReferenceEmbeddings>,
) -> Result<(ParameterGradients, LossSums)> {
    let count = params.param_count();
    if config.threads <= 1 || batch.len() <= 1 {
        let mut grads = ParameterGradients::zeros(count);
        let mut sums = LossSums::default();
        for (profile, draw) in batch.iter().zip(draws) {
            let s = example_gradient(profile, draw, params, config, schedule, reference, &mut grads)?;
            sums.add(&s);
        }
        return Ok((grads, sums));
    }

    let threads = config.threads.min(batch.len());
    let chunk_len = batch.len().div_ceil(threads);
    let mut partials: Vec<Result<(ParameterGradients, LossSums)>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (chunk, chunk_draws) in batch.chunks(chunk_len).zip(draws.chunks(chunk_len)) {
            handles.push(scope.spawn(move || {
                let mut grads = ParameterGradients::zeros(count);
                let mut sums = LossSums::default();
                for (profile, draw) in chunk.iter().zip(chunk_draws) {
                    let s = example_gradient(
                        profile, draw, params, config, schedule, reference, &mut grads,
                    )?;
                    sums.add(&s);
                }
                Ok((grads, sums))
            }));
        }
        for handle in handles {
            partials.push(handle.join().expect("worker thread panicked"));
        }
    });

    let mut grads = ParameterGradients::zeros(count);
    let mut sums = LossSums::default();
    for partial in partials {
        let (g, s) = partial?;
        grads.add_scaled(&g, 1.0);
        sums.add(&s);
    }
    Ok((grads, sums))
}

/// Runs one optimizer step on a batch of normalized profiles.
///
/// Per example this draws a mask ratio, a mask, a timestep, and a noise
/// vector from `rng` (in that order, in example order), runs the forward
/// and backward passes, and averages the gradients. The mean gradient is
/// optionally norm-clipped, then applied with one Adam update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[&[f64]],
    params: &mut ModelParameters,
    opt: &mut Adam,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    reference: Option<&ReferenceEmbeddings>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::config("training batch is empty"));
    }
    let n = params.config().n_regions;
    for (b, profile) in batch.iter().enumerate() {
        if profile.len() != n {
            return Err(Error::config(format!(
                "batch profile {b} has {} values, model expects {n}",
                profile.len()
            )));
        }
    }

    let draws = batch
        .iter()
        .map(|_| draw_example(n, params.config().t_steps, rng))
        .collect::<Result<Vec<_>>>()?;

    let (mut grads, sums) = batch_gradients(batch, &draws, params, config, schedule, reference)?;

    let inv_b = 1.0 / batch.len() as f64;
    grads.scale(inv_b);
    if let Some(clip) = config.grad_clip {
        let norm = grads.l2_norm();
        if norm > clip {
            grads.scale(clip / norm);
        }
    }

    let noise = sums.noise * inv_b;
    let mask = sums.mask * inv_b;
    let align = sums.align * inv_b;
    let total = noise + config.lambda_mask * mask + config.lambda_align * align;
    if !total.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite loss at epoch {epoch} step {step}: \
             total {total}, noise {noise}, mask {mask}, align {align}"
        )));
    }

    opt.step(params.data_mut(), grads.data())?;
    Ok(LossReport { epoch, step, total, noise, mask, align })
}

/// Timesteps used for validation: quarter, half, and three-quarter of the
/// schedule, each at least one.
fn validation_timesteps(t_steps: usize) -> [usize; 3] {
    [
        (t_steps / 4).max(1),
        (t_steps / 2).max(1),
        (3 * t_steps / 4).max(1),
    ]
}

/// Masked noise loss on held-out profiles, averaged over a fixed mask
/// ratio of 0.5 and the three validation timesteps.
///
/// Masks and noise are drawn from per-profile sub-streams of `seed`, so
/// repeated calls score the model on identical draws and the values are
/// comparable across epochs.
pub fn validation_noise_loss(
    params: &ModelParameters,
    profiles: &[&[f64]],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if profiles.is_empty() {
        return Err(Error::config("validation requires at least one profile"));
    }
    let n = params.config().n_regions;
    let grid = validation_timesteps(params.config().t_steps);
    let mut total = 0.0;
    let mut count = 0usize;
    for (vi, profile) in profiles.iter().enumerate() {
        if profile.len() != n {
            return Err(Error::config(format!(
                "validation profile {vi} has {} values, model expects {n}",
                profile.len()
            )));
        }
        let mut rng = sub_rng(seed, "val", vi as u64);
        let mask = make_mask(n, 0.5, &mut rng)?;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for t in grid {
            let noisy = forward_diffuse(profile, t, &eps, schedule)?;
            let trace = forward(params, profile, &noisy, &mask, t, false)?;
            let eps_hat = trace.eps_hat().as_slice().expect("head outputs are contiguous");
            total += noise_loss(eps_hat, &eps, &mask)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Everything a finished training run produced.
#[derive(Debug)]
pub struct TrainSummary {
    /// Parameters after the last optimizer step.
    pub final_params: ModelParameters,
    /// Parameters at the best validation loss (final parameters when
    /// validation was disabled).
    pub best_params: ModelParameters,
    /// Path of the final checkpoint, `final.ckpt` under the output dir.
    pub final_path: PathBuf,
    /// Path of the best checkpoint, `best.ckpt` under the output dir.
    pub best_path: PathBuf,
    /// Path of the loss curve CSV, `loss_curve.csv` under the output dir.
    pub curve_path: PathBuf,
    /// Best validation loss seen, when validation ran.
    pub best_val: Option<f64>,
    /// One averaged report per epoch, in epoch order.
    pub epoch_reports: Vec<LossReport>,
}

/// Splits profile indices into train and validation sets.
///
/// The validation set takes `round(val_frac * m)` profiles (at least one
/// when the fraction is positive), chosen by a seeded shuffle, and never
/// leaves the training set empty.
fn split_validation(m: usize, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if val_frac <= 0.0 || m < 2 {
        return ((0..m).collect(), Vec::new());
    }
    let n_val = ((val_frac * m as f64).round() as usize).clamp(1, m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut sub_rng(seed, "val-split", 0));
    let val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

/// Trains a model from scratch on the given profiles.
///
/// Writes `final.ckpt`, `best.ckpt`, and `loss_curve.csv` (one row per
/// epoch: `epoch,step,total,noise,mask,align`) into `out_dir`, creating it
/// if needed. Aborts with a numerical error if any step's loss is
/// non-finite. When `reference` is `None` the alignment weight is forced
/// to zero; when it is present the model must have a matching alignment
/// head.
pub fn train(
    matrix: &ProfileMatrix,
    model_config: ModelConfig,
    config: &TrainConfig,
    reference: Option<&ReferenceEmbeddings>,
    out_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    if matrix.region_count() != model_config.n_regions {
        return Err(Error::config(format!(
            "profile matrix covers {} regions, model expects {}",
            matrix.region_count(),
            model_config.n_regions
        )));
    }
    if matrix.len() == 0 {
        return Err(Error::data("training requires at least one profile"));
    }
    let mut lambda_align = config.lambda_align;
    match reference {
        Some(r) => {
            if lambda_align > 0.0 {
                if model_config.ref_dim == 0 {
                    return Err(Error::config(
                        "alignment is enabled but the model has no alignment head (ref_dim is 0)",
                    ));
                }
                if r.dim() != model_config.ref_dim {
                    return Err(Error::config(format!(
                        "reference embeddings have dimension {}, model alignment head expects {}",
                        r.dim(),
                        model_config.ref_dim
                    )));
                }
                if r.rows() != model_config.n_regions {
                    return Err(Error::config(format!(
                        "reference embeddings cover {} regions, model expects {}",
                        r.rows(),
                        model_config.n_regions
                    )));
                }
            }
        }
        None => lambda_align = 0.0,
    }
    let config = TrainConfig { lambda_align, ..config.clone() };
    let reference = if lambda_align > 0.0 { reference } else { None };

    std::fs::create_dir_all(out_dir)?;
    let schedule = NoiseSchedule::linear(model_config.t_steps, config.beta_start, config.beta_end)?;
    let mut params = ModelParameters::init(model_config, config.seed);
    let mut opt = Adam::for_params(&params, &config);

    let all_values: Vec<&[f64]> = matrix.profiles().iter().map(|p| p.values()).collect();
    let val_every = if config.val_every == 0 { 0 } else { config.val_every };
    let (train_idx, val_idx) = if val_every > 0 {
        split_validation(all_values.len(), config.val_frac, config.seed)
    } else {
        ((0..all_values.len()).collect(), Vec::new())
    };
    let val_values: Vec<&[f64]> = val_idx.iter().map(|&i| all_values[i]).collect();

    let mut step_rng = sub_rng(config.seed, "train", 0);
    let mut best_val: Option<f64> = None;
    let mut best_params = params.clone();
    let mut epoch_reports = Vec::with_capacity(config.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut sub_rng(config.seed, "shuffle", epoch as u64));

        let mut sums = LossSums::default();
        let mut steps_in_epoch = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| all_values[i]).collect();
            global_step += 1;
            let report = train_step(
                &batch,
                &mut params,
                &mut opt,
                &config,
                &schedule,
                reference,
                &mut step_rng,
                epoch,
                global_step,
            )?;
            sums.add(&LossSums { noise: report.noise, mask: report.mask, align: report.align });
            steps_in_epoch += 1;
        }

        let inv = 1.0 / steps_in_epoch as f64;
        let noise = sums.noise * inv;
        let mask = sums.mask * inv;
        let align = sums.align * inv;
        epoch_reports.push(LossReport {
            epoch,
            step: global_step,
            total: noise + config.lambda_mask * mask + config.lambda_align * align,
            noise,
            mask,
            align,
        });

        if val_every > 0 && !val_values.is_empty() && epoch % val_every == 0 {
            let val = validation_noise_loss(&params, &val_values, &schedule, config.seed)?;
            if !val.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite validation loss {val} at epoch {epoch}"
                )));
            }
            if best_val.is_none_or(|b| val < b) {
                best_val = Some(val);
                best_params = params.clone();
            }
        }
    }
    if best_val.is_none() {
        best_params = params.clone();
    }

    let curve_path = out_dir.join("loss_curve.csv");
    let mut curve = std::io::BufWriter::new(std::fs::File::create(&curve_path)?);
    writeln!(curve, "epoch,step,total,noise,mask,align")?;
    for r in &epoch_reports {
        writeln!(curve, "{},{},{},{},{},{}", r.epoch, r.step, r.total, r.noise, r.mask, r.align)?;
    }
    curve.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;

    let final_path = out_dir.join("final.ckpt");
    let best_path = out_dir.join("best.ckpt");
    save_checkpoint(&params, &final_path)?;
    save_checkpoint(&best_params, &best_path)?;

    Ok(TrainSummary {
        final_params: params,
        best_params,
        final_path,
        best_path,
        curve_path,
        best_val,
        epoch_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{Profile, SourceTag};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn bits(v: &[u8]) -> MaskVector {
        MaskVector::from_bits(v.to_vec()).unwrap()
    }

    #[test]
    fn noise_loss_scores_masked_entries_only() {
        let eps_hat = [2.0, 7.0, -1.0, 0.0];
        let eps_true = [0.0, 7.0, -1.0, 123.0];
        let mask = bits(&[1, 0, 1, 0]);
        // Masked entries are 0 and 2: errors 2 and 0, mean of squares 2.
        let loss = noise_loss(&eps_hat, &eps_true, &mask).unwrap();
        assert_abs_diff_eq!(loss, 2.0, epsilon = 1e-15);

        // A single masked entry with error 2 gives loss 4.
        let mask = bits(&[1, 0, 0, 0]);
        let loss = noise_loss(&eps_hat, &eps_true, &mask).unwrap();
        assert_abs_diff_eq!(loss, 4.0, epsilon = 1e-15);

        // Perturbing an observed entry leaves the loss bitwise unchanged.
        let mut other = eps_hat;
        other[3] = -55.5;
        let same = noise_loss(&other, &eps_true, &mask).unwrap();
        assert_eq!(loss, same);
    }

    #[test]
    fn noise_loss_rejects_empty_mask() {
        let x = [1.0, 2.0];
        let mask = bits(&[0, 0]);
        assert!(noise_loss(&x, &x, &mask).is_err());
    }

    #[test]
    fn mask_loss_matches_scalar_formula() {
        let logits = [0.3, -1.7, 2.2, 0.0, -0.4];
        let mask = bits(&[1, 0, 1, 1, 0]);
        let mut expected = 0.0;
        for (&x, &b) in logits.iter().zip(mask.bits()) {
            let p: f64 = 1.0 / (1.0 + (-x as f64).exp());
            let b = f64::from(b);
            expected -= (b * p.ln() + (1.0 - b) * (1.0 - p).ln()) / 5.0;
        }
        let loss = mask_loss(&logits, &mask).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-15);
    }

    #[test]
    fn mask_loss_at_zero_logits_is_ln_two() {
        for n in [2usize, 7, 64] {
            let logits = vec![0.0; n];
            let mask_bits: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
            let loss = mask_loss(&logits, &bits(&mask_bits)).unwrap();
            assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        }
    }

    #[test]
    fn mask_loss_survives_saturated_logits() {
        // Sigmoid overflows to exactly 0/1 near +-40; the clamp keeps the
        // logs finite and the gradient zero there.
        let logits = [500.0, -500.0, 40.0, -40.0];
        let mask = bits(&[1, 0, 0, 1]);
        let (loss, grad) = mask_loss_grad(&logits, &mask).unwrap();
        assert!(loss.is_finite());
        // Correctly classified saturated entries cost about -ln(1 - 1e-7)/n
        // each, i.e. nearly zero; the two wrong ones cost -ln(1e-7)/n.
        let expected = 2.0 * ((1.0f64 - 1e-7).ln() * -1.0 + -(1e-7f64).ln()) / 4.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-9);
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn align_loss_endpoints_and_scale_invariance() {
        let refs = ReferenceEmbeddings::new(
            array![[1.0, 2.0, 0.0], [0.0, -1.0, 3.0], [4.0, 4.0, 4.0], [1.0, 0.0, -2.0]],
            "test",
        )
        .unwrap();
        // Predicting the references exactly gives zero loss.
        let zero = align_loss(&refs.matrix().to_owned(), &refs).unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-15);
        // Cosine ignores scale.
        let scaled = align_loss(&(refs.matrix().to_owned() * 3.0), &refs).unwrap();
        assert_abs_diff_eq!(scaled, 0.0, epsilon = 1e-15);
        // Opposite directions give the maximum of two.
        let two = align_loss(&(refs.matrix().to_owned() * -1.0), &refs).unwrap();
        assert_abs_diff_eq!(two, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn align_loss_zero_norm_rows_contribute_one_without_gradient() {
        let refs =
            ReferenceEmbeddings::new(array![[1.0, 0.0], [0.0, 2.0]], "test").unwrap();
        let e_hat = array![[0.0, 0.0], [0.0, 2.0]];
        let (loss, grad) = align_loss_grad(&e_hat, &refs).unwrap();
        // Row 0 is degenerate (contributes 1), row 1 is perfect (0).
        assert_abs_diff_eq!(loss, 0.5, epsilon = 1e-15);
        assert_eq!(grad.row(0).to_vec(), vec![0.0, 0.0]);
    }

    /// Central finite differences around `x` for a scalar loss closure.
    fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>, tol: f64) {
        for (i, (x, y)) in a.into_iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = sub_rng(11, "loss-fd", 0);
        let n = 6;
        let mask = bits(&[1, 0, 1, 1, 0, 1]);
        let eps_true: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();

        let (_, g) = noise_loss_grad(&x, &eps_true, &mask).unwrap();
        let fd = fd_grad(&x, |p| noise_loss(p, &eps_true, &mask).unwrap());
        assert_close(g.iter().copied(), fd.iter().copied(), 1e-8);

        let (_, g) = mask_loss_grad(&x, &mask).unwrap();
        let fd = fd_grad(&x, |p| mask_loss(p, &mask).unwrap());
        assert_close(g.iter().copied(), fd.iter().copied(), 1e-8);

        let refs = ReferenceEmbeddings::new(
            Array2::from_shape_fn((3, 4), |_| StandardNormal.sample(&mut rng)),
            "test",
        )
        .unwrap();
        let e_flat: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let to_mat = |v: &[f64]| Array2::from_shape_vec((3, 4), v.to_vec()).unwrap();
        let (_, g) = align_loss_grad(&to_mat(&e_flat), &refs).unwrap();
        let fd = fd_grad(&e_flat, |p| align_loss(&to_mat(p), &refs).unwrap());
        assert_close(g.iter().copied(), fd.iter().copied(), 1e-8);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // Hand-rolled scalar Adam on f(x) = (x - 3)^2, gradient 2(x - 3).
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut x_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut opt = Adam::new(1, lr, b1, b2, eps);
        let mut x = vec![0.0f64];
        for t in 1..=100 {
            let g = 2.0 * (x_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);

            let g_vec = [2.0 * (x[0] - 3.0)];
            opt.step(&mut x, &g_vec).unwrap();
            assert_abs_diff_eq!(x[0], x_ref, epsilon = 1e-12);
        }
        // 100 steps at lr 0.05 move x well toward the minimum at 3.
        assert!(x[0] > 1.0);
    }

    fn toy_matrix(n_regions: usize, n_profiles: usize, seed: u64) -> ProfileMatrix {
        let mut matrix = ProfileMatrix::new(n_regions).unwrap();
        let mut rng = sub_rng(seed, "toy-matrix", 0);
        for p in 0..n_profiles {
            let values: Vec<f64> =
                (0..n_regions).map(|_| StandardNormal.sample(&mut rng)).collect();
            let profile = Profile::new(format!("toy-{p:02}"), values).unwrap().normalize();
            matrix.push(profile, SourceTag::Synthetic).unwrap();
        }
        matrix
    }

    fn small_model(n: usize, ref_dim: usize) -> ModelConfig {
        ModelConfig::new(n, 16, 2, 2, ref_dim, 10).unwrap()
    }

    #[test]
    fn train_step_reduces_noise_loss_on_repeated_profile() {
        // One fixed 4-region profile, 200 steps: the denoiser should fit it.
        let mut wins = 0;
        for seed in 0..5u64 {
            let config = TrainConfig {
                lr: 3e-3,
                lambda_mask: 0.3,
                lambda_align: 0.0,
                seed,
                ..TrainConfig::default()
            };
            let model = ModelConfig::new(4, 16, 1, 2, 0, 10).unwrap();
            let schedule = NoiseSchedule::linear(10, config.beta_start, config.beta_end).unwrap();
            let mut params = ModelParameters::init(model, seed);
            let mut opt = Adam::for_params(&params, &config);
            let mut rng = sub_rng(seed, "train", 0);
            let profile = [0.5, -1.0, 1.5, -1.0];
            let batch: Vec<&[f64]> = vec![&profile; 8];

            let mut first = 0.0;
            let mut last = 0.0;
            for step in 1..=200 {
                let report = train_step(
                    &batch, &mut params, &mut opt, &config, &schedule, None, &mut rng, 1, step,
                )
                .unwrap();
                if step <= 10 {
                    first += report.noise / 10.0;
                }
                if step > 190 {
                    last += report.noise / 10.0;
                }
            }
            if last < first {
                wins += 1;
            }
        }
        // Median over seeds must improve; demand a strict majority.
        assert!(wins >= 3, "noise loss improved in only {wins}/5 seeds");
    }

    #[test]
    fn train_step_total_decomposes() {
        let config = TrainConfig { lambda_align: 0.0, seed: 3, ..TrainConfig::default() };
        let model = small_model(6, 0);
        let schedule = NoiseSchedule::linear(10, config.beta_start, config.beta_end).unwrap();
        let mut params = ModelParameters::init(model, 3);
        params.randomize_all(3, 0.05);
        let mut opt = Adam::for_params(&params, &config);
        let mut rng = sub_rng(3, "train", 0);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.3 - 0.5; 6]).collect();
        let batch: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        for step in 1..=5 {
            let r = train_step(
                &batch, &mut params, &mut opt, &config, &schedule, None, &mut rng, 1, step,
            )
            .unwrap();
            let recomposed = r.noise + config.lambda_mask * r.mask + config.lambda_align * r.align;
            assert_abs_diff_eq!(r.total, recomposed, epsilon = 1e-9);
        }
    }

    #[test]
    fn lambda_align_zero_ignores_reference_bitwise() {
        // With lambda_align = 0 the reference embeddings must not influence
        // training at all, not even through rng consumption.
        let model = small_model(5, 4);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let config = TrainConfig { lambda_align: 0.0, seed: 9, ..TrainConfig::default() };
        let refs_a = ReferenceEmbeddings::new(Array2::ones((5, 4)), "a").unwrap();
        let refs_b =
            ReferenceEmbeddings::new(Array2::from_elem((5, 4), -2.5), "b").unwrap();

        let run = |reference: Option<&ReferenceEmbeddings>| {
            let mut params = ModelParameters::init(model, 9);
            let mut opt = Adam::for_params(&params, &config);
            let mut rng = sub_rng(9, "train", 0);
            let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![0.1 * i as f64; 5]).collect();
            let batch: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            for step in 1..=3 {
                train_step(
                    &batch, &mut params, &mut opt, &config, &schedule, reference, &mut rng, 1,
                    step,
                )
                .unwrap();
            }
            params.data().to_vec()
        };

        let with_a = run(Some(&refs_a));
        let with_b = run(Some(&refs_b));
        let without = run(None);
        assert_eq!(with_a, with_b);
        assert_eq!(with_a, without);
    }

    #[test]
    fn gradient_clipping_bounds_update_direction() {
        let model = small_model(5, 0);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let clipped = TrainConfig {
            lambda_align: 0.0,
            seed: 2,
            grad_clip: Some(1e-6),
            lr: 1.0,
            ..TrainConfig::default()
        };
        let mut params = ModelParameters::init(model, 2);
        params.randomize_all(2, 0.1);
        let before = params.data().to_vec();
        let mut opt = Adam::for_params(&params, &clipped);
        let mut rng = sub_rng(2, "train", 0);
        let row = vec![0.4, -0.2, 0.0, 0.9, -1.1];
        let batch: Vec<&[f64]> = vec![row.as_slice()];
        train_step(&batch, &mut params, &mut opt, &clipped, &schedule, None, &mut rng, 1, 1)
            .unwrap();
        // With a tiny clip the gradient magnitude shrinks but Adam's
        // normalization keeps per-parameter steps near lr; the update must
        // still be finite and change the parameters.
        let moved = params
            .data()
            .iter()
            .zip(&before)
            .any(|(a, b)| a != b);
        assert!(moved);
        assert!(params.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn threaded_batches_are_deterministic_per_thread_count() {
        let model = small_model(6, 0);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![0.2 * i as f64 - 0.7; 6]).collect();
        let batch: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();

        let run = |threads: usize| {
            let config =
                TrainConfig { lambda_align: 0.0, seed: 4, threads, ..TrainConfig::default() };
            let mut params = ModelParameters::init(model, 4);
            let mut opt = Adam::for_params(&params, &config);
            let mut rng = sub_rng(4, "train", 0);
            for step in 1..=2 {
                train_step(
                    &batch, &mut params, &mut opt, &config, &schedule, None, &mut rng, 1, step,
                )
                .unwrap();
            }
            params.data().to_vec()
        };

        assert_eq!(run(3), run(3));
        // Chunked reduction regroups float sums, so cross-count agreement is
        // approximate rather than bitwise.
        let single = run(1);
        let multi = run(3);
        for (a, b) in single.iter().zip(&multi) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn validation_loss_is_repeatable_and_finite() {
        let model = small_model(8, 0);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut params = ModelParameters::init(model, 5);
        params.randomize_all(5, 0.05);
        let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![0.1 * (i + 1) as f64; 8]).collect();
        let profiles: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let a = validation_noise_loss(&params, &profiles, &schedule, 5).unwrap();
        let b = validation_noise_loss(&params, &profiles, &schedule, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite() && a >= 0.0);
    }

    #[test]
    fn train_writes_checkpoints_and_epoch_rows() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = toy_matrix(8, 10, 7);
        let model = small_model(8, 0);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lambda_align: 0.0,
            seed: 7,
            val_every: 1,
            val_frac: 0.2,
            ..TrainConfig::default()
        };
        let summary = train(&matrix, model, &config, None, dir.path()).unwrap();

        assert!(summary.final_path.exists());
        assert!(summary.best_path.exists());
        assert_eq!(summary.epoch_reports.len(), 3);
        assert!(summary.best_val.unwrap().is_finite());

        let curve = std::fs::read_to_string(&summary.curve_path).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines[0], "epoch,step,total,noise,mask,align");
        // One row per epoch.
        assert_eq!(lines.len() - 1, 3);
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 6);
            assert_eq!(fields[0], (i + 1).to_string());
            let total: f64 = fields[2].parse().unwrap();
            let noise: f64 = fields[3].parse().unwrap();
            let mask: f64 = fields[4].parse().unwrap();
            let align: f64 = fields[5].parse().unwrap();
            assert_abs_diff_eq!(total, noise + 0.3 * mask + 0.1 * align, epsilon = 1e-9);
        }

        // The checkpoints load back to the returned parameters.
        let loaded = crate::model::load_checkpoint(&summary.final_path).unwrap();
        let quantized: Vec<f64> =
            summary.final_params.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(loaded.data(), quantized.as_slice());
    }

    #[test]
    fn train_is_deterministic_across_runs() {
        let matrix = toy_matrix(6, 6, 13);
        let model = small_model(6, 0);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lambda_align: 0.0,
            seed: 13,
            val_every: 1,
            val_frac: 0.2,
            ..TrainConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train(&matrix, model, &config, None, dir_a.path()).unwrap();
        let b = train(&matrix, model, &config, None, dir_b.path()).unwrap();
        assert_eq!(a.final_params.data(), b.final_params.data());
        assert_eq!(
            std::fs::read(&a.final_path).unwrap(),
            std::fs::read(&b.final_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&a.curve_path).unwrap(),
            std::fs::read(&b.curve_path).unwrap()
        );
    }

    #[test]
    fn train_with_alignment_runs_and_reports_align_loss() {
        let dir = tempfile::tempdir().unwrap();
        let matrix = toy_matrix(6, 5, 21);
        let model = small_model(6, 3);
        let refs = ReferenceEmbeddings::new(
            Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin() + 0.1),
            "test-refs",
        )
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 5,
            seed: 21,
            val_every: 0,
            val_frac: 0.0,
            ..TrainConfig::default()
        };
        let summary = train(&matrix, model, &config, Some(&refs), dir.path()).unwrap();
        assert!(summary.epoch_reports.iter().all(|r| r.align > 0.0));
        assert!(summary.best_val.is_none());
    }

    #[test]
    fn train_rejects_mismatched_reference_dimension() {
        let matrix = toy_matrix(6, 4, 30);
        let model = small_model(6, 3);
        let refs = ReferenceEmbeddings::new(Array2::ones((6, 5)), "bad-dim").unwrap();
        let config = TrainConfig { epochs: 1, seed: 30, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let err = train(&matrix, model, &config, Some(&refs), dir.path()).unwrap_err();
        assert!(err.to_string().contains("dimension"), "unexpected error: {err}");
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lambda_mask: -0.1, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { adam_beta1: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { val_frac: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { grad_clip: Some(0.0), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { threads: 0, ..ok }.validate().is_err());
    }
}
