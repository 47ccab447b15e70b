//! Forward pass: input embedding, the modulated transformer encoder, and
//! the output heads, optionally recording every intermediate for backprop.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::diffusion::MaskVector;
use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ModelParameters, TIME_FEAT_DIM};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-6;

/// Sigmoid-weighted linear unit.
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of [`silu`].
pub(crate) fn dsilu(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Derivative of [`silu`] from a cached sigmoid; equal to `dsilu(x)` when
/// `s = sigmoid(x)`, but free of the exponential.
pub(crate) fn dsilu_cached(x: f64, s: f64) -> f64 {
    s * (1.0 + x * (1.0 - s))
}

/// Elementwise silu of a matrix, also returning the sigmoid factors so
/// backprop can avoid recomputing the exponentials.
fn silu_with_sigma(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let sig = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let out = x * &sig;
    (out, sig)
}

fn all_finite1(x: &Array1<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

fn all_finite2(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Sinusoidal timestep features: half sines, half cosines, with frequencies
/// falling geometrically from 1 to 1e-4.
pub fn time_features(t: usize) -> Array1<f64> {
    let half = TIME_FEAT_DIM / 2;
    let mut feat = Array1::zeros(TIME_FEAT_DIM);
    for k in 0..half {
        let freq = (-(1e4f64).ln() * k as f64 / (half - 1) as f64).exp();
        let angle = t as f64 * freq;
        feat[k] = angle.sin();
        feat[half + k] = angle.cos();
    }
    feat
}

/// Feature modulation `x * tanh(beta) + gamma`, with the two control vectors
/// broadcast across rows.
pub fn modulate(x: ArrayView2<f64>, beta: ArrayView1<f64>, gamma: ArrayView1<f64>) -> Result<Array2<f64>> {
    if beta.len() != x.ncols() || gamma.len() != x.ncols() {
        return Err(Error::config(format!(
            "modulation vectors of length {}/{} do not match {} features",
            beta.len(),
            gamma.len(),
            x.ncols()
        )));
    }
    Ok(mod_bc(&x.to_owned(), &beta.to_owned(), &gamma.to_owned()))
}

fn mod_bc(x: &Array2<f64>, beta: &Array1<f64>, gamma: &Array1<f64>) -> Array2<f64> {
    let tb = beta.mapv(f64::tanh);
    let mut out = x * &tb;
    out += gamma;
    out
}

/// Layer normalization over the feature axis with learned scale and offset.
/// Returns `(y, x_hat, r)` where `x_hat` is the pre-scale normalized input
/// and `r` the per-row inverse standard deviation, both needed by backprop.
fn ln_forward(
    x: &Array2<f64>,
    scale: ArrayView1<f64>,
    offset: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut x_hat = Array2::zeros(x.raw_dim());
    let mut r = Array1::zeros(x.nrows());
    for ((row, mut hat), ri) in x
        .rows()
        .into_iter()
        .zip(x_hat.rows_mut())
        .zip(r.iter_mut())
    {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        *ri = inv;
        hat.zip_mut_with(&row, |h, &v| *h = (v - mean) * inv);
    }
    let y = &x_hat * &scale + &offset;
    (y, x_hat, r)
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Embeds observed and noisy profile values into region rows:
/// row i is `R_i + p_i * v` when observed, `R_i + p~_i * v` when masked.
/// Observed rows never read the noisy vector and masked rows never read the
/// observed one.
pub fn embed_input(
    p_obs: &[f64],
    p_noisy: &[f64],
    mask: &MaskVector,
    params: &ModelParameters,
) -> Result<Array2<f64>> {
    Ok(embed_with_eff(p_obs, p_noisy, mask, params)?.0)
}

fn embed_with_eff(
    p_obs: &[f64],
    p_noisy: &[f64],
    mask: &MaskVector,
    params: &ModelParameters,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = params.config().n_regions;
    if p_obs.len() != n || p_noisy.len() != n || mask.len() != n {
        return Err(Error::data(format!(
            "embed_input lengths obs {} noisy {} mask {} do not match {n} regions",
            p_obs.len(),
            p_noisy.len(),
            mask.len()
        )));
    }
    let layout = params.layout();
    let d = params.config().hidden_dim;
    let r = params.mat(&layout.region_embed, n, d);
    let v = params.vec(&layout.value_vec);
    let mut h0 = r.to_owned();
    let mut p_eff = Array1::zeros(n);
    for i in 0..n {
        let p = if mask.is_masked(i) { p_noisy[i] } else { p_obs[i] };
        p_eff[i] = p;
        h0.row_mut(i).scaled_add(p, &v);
    }
    Ok((h0, p_eff))
}

/// Intermediates of one encoder layer, kept when recording for backprop.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub(crate) alpha1: Array1<f64>,
    pub(crate) beta1: Array1<f64>,
    pub(crate) alpha2: Array1<f64>,
    pub(crate) beta2: Array1<f64>,
    pub(crate) h_in: Array2<f64>,
    pub(crate) m1_hat: Array2<f64>,
    pub(crate) m1_r: Array1<f64>,
    pub(crate) n1: Array2<f64>,
    pub(crate) q: Array2<f64>,
    pub(crate) k: Array2<f64>,
    pub(crate) v: Array2<f64>,
    pub(crate) probs: Vec<Array2<f64>>,
    pub(crate) ctx: Array2<f64>,
    pub(crate) attn: Array2<f64>,
    pub(crate) h_check: Array2<f64>,
    pub(crate) m2_hat: Array2<f64>,
    pub(crate) m2_r: Array1<f64>,
    pub(crate) n2: Array2<f64>,
    pub(crate) f1: Array2<f64>,
    pub(crate) af: Array2<f64>,
    pub(crate) sig1: Array2<f64>,
    pub(crate) f2: Array2<f64>,
}

/// Intermediates of the output heads.
#[derive(Debug, Clone)]
pub(crate) struct HeadTrace {
    pub(crate) beta_o: Array1<f64>,
    pub(crate) mo_hat: Array2<f64>,
    pub(crate) mo_r: Array1<f64>,
    pub(crate) h_out: Array2<f64>,
    pub(crate) g1: Option<Array2<f64>>,
    pub(crate) ag: Option<Array2<f64>>,
    pub(crate) sg: Option<Array2<f64>>,
    pub(crate) eps_hat: Array1<f64>,
    pub(crate) mask_logits: Array1<f64>,
    pub(crate) e_hat: Option<Array2<f64>>,
}

/// Everything the forward pass computed. Encoder intermediates are present
/// only when the pass was recorded; outputs are present once
/// [`heads_forward`] has run.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) config: ModelConfig,
    pub(crate) t: usize,
    pub(crate) feat: Array1<f64>,
    pub(crate) u1: Array1<f64>,
    pub(crate) a1: Array1<f64>,
    pub(crate) c: Array1<f64>,
    pub(crate) sc: Array1<f64>,
    pub(crate) h0: Array2<f64>,
    pub(crate) p_eff: Option<Array1<f64>>,
    pub(crate) layers: Option<Vec<LayerTrace>>,
    pub(crate) h_mid: Option<Array2<f64>>,
    pub(crate) h_last: Array2<f64>,
    pub(crate) head: Option<HeadTrace>,
}

impl ForwardTrace {
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn h0(&self) -> &Array2<f64> {
        &self.h0
    }

    pub fn h_last(&self) -> &Array2<f64> {
        &self.h_last
    }

    /// Output of the middle encoder layer; present when the model has at
    /// least 2 layers.
    pub fn h_mid(&self) -> Option<&Array2<f64>> {
        self.h_mid.as_ref()
    }

    pub fn recorded(&self) -> bool {
        self.layers.is_some()
    }

    fn head(&self) -> &HeadTrace {
        self.head.as_ref().expect("heads_forward has not run")
    }

    /// Predicted per-region noise.
    pub fn eps_hat(&self) -> &Array1<f64> {
        &self.head().eps_hat
    }

    /// Mask-prediction logits (sigmoid applied by the loss).
    pub fn mask_logits(&self) -> &Array1<f64> {
        &self.head().mask_logits
    }

    /// Predicted region embeddings; `None` when alignment is disabled.
    pub fn e_hat(&self) -> Option<&Array2<f64>> {
        self.head().e_hat.as_ref()
    }

    /// Attention probabilities `(layer, head)`; recorded passes only.
    pub fn attention_probs(&self, layer: usize, hd: usize) -> Option<&Array2<f64>> {
        self.layers.as_ref().map(|l| &l[layer].probs[hd])
    }
}

/// Runs the timestep conditioning and all encoder layers on an embedded
/// input. `record` keeps per-layer intermediates so [`crate::model::backward`]
/// can replay the pass.
pub fn encoder_forward(
    h0: &Array2<f64>,
    t: usize,
    params: &ModelParameters,
    record: bool,
) -> Result<ForwardTrace> {
    let config = *params.config();
    let (n, d) = (config.n_regions, config.hidden_dim);
    if h0.nrows() != n || h0.ncols() != d {
        return Err(Error::config(format!(
            "input is {}x{}, model expects {n}x{d}",
            h0.nrows(),
            h0.ncols()
        )));
    }
    if t == 0 || t > config.t_steps {
        return Err(Error::config(format!(
            "step {t} outside schedule range 1..={}",
            config.t_steps
        )));
    }
    if !all_finite2(h0) {
        return Err(Error::numerical("non-finite value in embedded input"));
    }
    let layout = params.layout();

    // Timestep conditioning vector.
    let feat = time_features(t);
    let u1 = feat.dot(&params.mat(&layout.time_w1, TIME_FEAT_DIM, d)) + params.vec(&layout.time_b1);
    let a1 = u1.mapv(silu);
    let c = a1.dot(&params.mat(&layout.time_w2, d, d)) + params.vec(&layout.time_b2);
    let sc = c.mapv(silu);

    let heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut h = h0.clone();
    let mut layer_traces = record.then(|| Vec::with_capacity(config.n_layers));
    let mut h_mid = None;

    for (l, layer) in layout.layers.iter().enumerate() {
        let six = sc.dot(&params.mat(&layer.adaln_w, d, 6 * d)) + params.vec(&layer.adaln_b);
        let alpha1 = six.slice(s![0..d]).to_owned();
        let beta1 = six.slice(s![d..2 * d]).to_owned();
        let gamma1 = six.slice(s![2 * d..3 * d]).to_owned();
        let alpha2 = six.slice(s![3 * d..4 * d]).to_owned();
        let beta2 = six.slice(s![4 * d..5 * d]).to_owned();
        let gamma2 = six.slice(s![5 * d..6 * d]).to_owned();

        // Attention branch.
        let m1 = mod_bc(&h, &beta1, &gamma1);
        let (n1, m1_hat, m1_r) = ln_forward(
            &m1,
            params.vec(&layer.ln1_scale),
            params.vec(&layer.ln1_offset),
        );
        let q = n1.dot(&params.mat(&layer.attn_wq, d, d));
        let k = n1.dot(&params.mat(&layer.attn_wk, d, d));
        let v = n1.dot(&params.mat(&layer.attn_wv, d, d));
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for hd_i in 0..heads {
            let c0 = hd_i * dh;
            let c1 = c0 + dh;
            let mut scores = q.slice(s![.., c0..c1]).dot(&k.slice(s![.., c0..c1]).t());
            scores *= scale;
            let p = softmax_rows(&scores);
            ctx.slice_mut(s![.., c0..c1])
                .assign(&p.dot(&v.slice(s![.., c0..c1])));
            probs.push(p);
        }
        let attn = ctx.dot(&params.mat(&layer.attn_wo, d, d));
        let h_check = &h + &(&attn * &alpha1);

        // Feed-forward branch.
        let m2 = mod_bc(&h_check, &beta2, &gamma2);
        let (n2, m2_hat, m2_r) = ln_forward(
            &m2,
            params.vec(&layer.ln2_scale),
            params.vec(&layer.ln2_offset),
        );
        let f1 = n2.dot(&params.mat(&layer.ffn_w1, d, config.ffn_dim()))
            + params.vec(&layer.ffn_b1);
        let (af, sig1) = silu_with_sigma(&f1);
        let f2 = af.dot(&params.mat(&layer.ffn_w2, config.ffn_dim(), d))
            + params.vec(&layer.ffn_b2);
        let h_new = &h_check + &(&f2 * &alpha2);

        if !all_finite2(&h_new) {
            return Err(Error::numerical(format!(
                "non-finite activation in encoder layer {l}"
            )));
        }
        if let Some(traces) = layer_traces.as_mut() {
            traces.push(LayerTrace {
                alpha1,
                beta1,
                alpha2,
                beta2,
                h_in: h,
                m1_hat,
                m1_r,
                n1,
                q,
                k,
                v,
                probs,
                ctx,
                attn,
                h_check,
                m2_hat,
                m2_r,
                n2,
                f1,
                af,
                sig1,
                f2,
            });
        }
        h = h_new;
        if l + 1 == config.mid_layer() {
            h_mid = Some(h.clone());
        }
    }

    Ok(ForwardTrace {
        config,
        t,
        feat,
        u1,
        a1,
        c,
        sc,
        h0: h0.clone(),
        p_eff: None,
        layers: layer_traces,
        h_mid,
        h_last: h,
        head: None,
    })
}

/// Applies the modulated output norm, the noise and mask heads, and (when
/// enabled) the alignment MLP on the middle-layer tap. Results land in the
/// trace.
pub fn heads_forward(trace: &mut ForwardTrace, params: &ModelParameters) -> Result<()> {
    let config = trace.config;
    let d = config.hidden_dim;
    let layout = params.layout();

    let out2 = trace.sc.dot(&params.mat(&layout.out_adaln_w, d, 2 * d))
        + params.vec(&layout.out_adaln_b);
    let beta_o = out2.slice(s![0..d]).to_owned();
    let gamma_o = out2.slice(s![d..2 * d]).to_owned();
    let mo = mod_bc(&trace.h_last, &beta_o, &gamma_o);
    let (h_out, mo_hat, mo_r) = ln_forward(
        &mo,
        params.vec(&layout.out_ln_scale),
        params.vec(&layout.out_ln_offset),
    );

    let eps_hat = h_out.dot(&params.vec(&layout.noise_w)) + params.data()[layout.noise_b.start];
    let mask_logits = h_out.dot(&params.vec(&layout.mask_w)) + params.data()[layout.mask_b.start];

    let (g1, ag, sg, e_hat) = if config.ref_dim > 0 {
        let h_mid = trace
            .h_mid
            .as_ref()
            .ok_or_else(|| Error::config("alignment enabled but no middle-layer tap recorded"))?;
        let g1 = h_mid.dot(&params.mat(&layout.align_w1, d, d)) + params.vec(&layout.align_b1);
        let (ag, sg) = silu_with_sigma(&g1);
        let e_hat =
            ag.dot(&params.mat(&layout.align_w2, d, config.ref_dim)) + params.vec(&layout.align_b2);
        if !all_finite2(&e_hat) {
            return Err(Error::numerical("non-finite value in alignment output"));
        }
        (Some(g1), Some(ag), Some(sg), Some(e_hat))
    } else {
        (None, None, None, None)
    };

    if !all_finite1(&eps_hat) || !all_finite1(&mask_logits) {
        return Err(Error::numerical("non-finite value in head output"));
    }

    trace.head = Some(HeadTrace {
        beta_o,
        mo_hat,
        mo_r,
        h_out,
        g1,
        ag,
        sg,
        eps_hat,
        mask_logits,
        e_hat,
    });
    Ok(())
}

/// Full forward pass from profile values to head outputs.
pub fn forward(
    params: &ModelParameters,
    p_obs: &[f64],
    p_noisy: &[f64],
    mask: &MaskVector,
    t: usize,
    record: bool,
) -> Result<ForwardTrace> {
    let (h0, p_eff) = embed_with_eff(p_obs, p_noisy, mask, params)?;
    let mut trace = encoder_forward(&h0, t, params, record)?;
    trace.p_eff = Some(p_eff);
    heads_forward(&mut trace, params)?;
    Ok(trace)
}
