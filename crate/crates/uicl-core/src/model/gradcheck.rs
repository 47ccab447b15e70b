//! Finite-difference validation of the analytic gradients.
//!
//! The checker builds a random model and a random scalar objective (a fixed
//! linear functional of the three head outputs), computes analytic gradients
//! once via [`crate::model::backward`], and then sweeps every parameter with
//! central differences. A linear objective means the two must agree up to
//! finite-difference truncation alone.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::make_mask;
use crate::error::Result;
use crate::model::backward::{backward, HeadGradients};
use crate::model::forward::forward;
use crate::model::params::{ModelConfig, ModelParameters};
use crate::rng::sub_rng;

/// Relative-error denominator floor; keeps near-zero gradients from
/// amplifying finite-difference noise into spurious failures.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Worst finite-difference disagreement within one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat parameter index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_err: f64,
    pub params_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// The group containing the overall worst entry.
    pub fn worst_group(&self) -> &GradCheckGroup {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("report has at least one group")
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Checks every parameter of a randomized model against central finite
/// differences with the given step. `corrupt` deliberately perturbs one
/// analytic gradient entry first; a healthy checker must then fail, which
/// makes this the negative control for the check itself.
pub fn gradient_check(
    config: ModelConfig,
    seed: u64,
    fd_step: f64,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let mut params = ModelParameters::init(config, seed);
    params.randomize_all(seed, 0.3);

    let n = config.n_regions;
    let mut rng = sub_rng(seed, "gradcheck", 0);
    let p_obs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let p_noisy: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mask = make_mask(n, 0.5, &mut rng)?;
    let t = (config.t_steps / 2).max(1);

    // Fixed random linear objective over the head outputs.
    let coef_eps = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let coef_logits = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let coef_ehat = (config.ref_dim > 0).then(|| {
        Array2::from_shape_fn((n, config.ref_dim), |_| rng.sample::<f64, _>(StandardNormal))
    });

    let objective = |params: &ModelParameters| -> Result<f64> {
        let trace = forward(params, &p_obs, &p_noisy, &mask, t, false)?;
        let mut j = trace.eps_hat().dot(&coef_eps) + trace.mask_logits().dot(&coef_logits);
        if let Some(c) = &coef_ehat {
            j += (trace.e_hat().expect("alignment enabled") * c).sum();
        }
        Ok(j)
    };

    let trace = forward(&params, &p_obs, &p_noisy, &mask, t, true)?;
    let upstream = HeadGradients {
        d_eps: coef_eps.clone(),
        d_logits: coef_logits.clone(),
        d_ehat: coef_ehat.clone(),
    };
    let mut grads = backward(&trace, &upstream, &params)?;
    if corrupt {
        let idx = params.layout().layers[0].ffn_w1.start;
        grads.data_mut()[idx] += 0.05;
    }

    let group_ranges = params.layout().groups();
    let mut groups = Vec::with_capacity(group_ranges.len());
    let mut overall = 0.0f64;
    let total = params.param_count();
    for (name, range) in group_ranges {
        let mut worst = GradCheckGroup {
            name,
            max_rel_err: -1.0,
            worst_index: range.start,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in range {
            let orig = params.data()[k];
            params.data_mut()[k] = orig + fd_step;
            let plus = objective(&params)?;
            params.data_mut()[k] = orig - fd_step;
            let minus = objective(&params)?;
            params.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * fd_step);
            let analytic = grads.data()[k];
            let err = rel_err(analytic, numeric);
            if err > worst.max_rel_err {
                worst = GradCheckGroup {
                    name: worst.name,
                    max_rel_err: err,
                    worst_index: k,
                    analytic,
                    numeric,
                };
            }
        }
        overall = overall.max(worst.max_rel_err);
        groups.push(worst);
    }

    Ok(GradCheckReport {
        groups,
        max_rel_err: overall,
        params_checked: total,
    })
}
