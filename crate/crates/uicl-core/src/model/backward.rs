//! Exact reverse-mode differentiation over a recorded forward trace.
//!
//! Every formula here is the hand-derived adjoint of the corresponding step
//! in [`crate::model::forward`]; the finite-difference checker in
//! [`crate::model::gradcheck`] validates all of them against central
//! differences.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use crate::error::{Error, Result};
use crate::model::forward::{dsilu, dsilu_cached, ForwardTrace};
use crate::model::params::ModelParameters;

/// Gradient for every scalar parameter, flat in the same layout as
/// [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    data: Vec<f64>,
}

impl ParameterGradients {
    pub fn zeros(len: usize) -> Self {
        ParameterGradients {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self += other * factor`, used for batch averaging.
    pub fn add_scaled(&mut self, other: &ParameterGradients, factor: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (dst, src) in self.data.iter_mut().zip(&other.data) {
            *dst += src * factor;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Euclidean norm over all entries.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Upstream gradients of a scalar objective with respect to the three head
/// outputs. `d_ehat` may be omitted when the objective ignores alignment.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub d_eps: Array1<f64>,
    pub d_logits: Array1<f64>,
    pub d_ehat: Option<Array2<f64>>,
}

fn add1(grads: &mut [f64], range: &Range<usize>, v: &Array1<f64>) {
    debug_assert_eq!(range.len(), v.len());
    for (slot, x) in grads[range.clone()].iter_mut().zip(v.iter()) {
        *slot += x;
    }
}

fn add2(grads: &mut [f64], range: &Range<usize>, m: &Array2<f64>) {
    debug_assert_eq!(range.len(), m.len());
    for (slot, x) in grads[range.clone()].iter_mut().zip(m.iter()) {
        *slot += x;
    }
}

/// Accumulates the outer product `a bᵀ` straight into the flat gradient
/// slice for `range`, laid out row-major with `b.len()` columns.
fn add_outer(grads: &mut [f64], range: &Range<usize>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    debug_assert_eq!(range.len(), a.len() * b.len());
    let cols = b.len();
    let dst = &mut grads[range.clone()];
    for (i, ai) in a.iter().enumerate() {
        for (slot, bv) in dst[i * cols..(i + 1) * cols].iter_mut().zip(b.iter()) {
            *slot += ai * bv;
        }
    }
}

/// Adjoint of layer normalization. `x_hat` and `r` come from the forward
/// trace; returns `(dx, dscale, doffset)`.
fn ln_backward(
    dy: &Array2<f64>,
    x_hat: &Array2<f64>,
    r: &Array1<f64>,
    scale: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dscale = (dy * x_hat).sum_axis(Axis(0));
    let doffset = dy.sum_axis(Axis(0));
    let dxhat = dy * &scale;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((dh_row, xh_row), mut dx_row), ri) in dxhat
        .rows()
        .into_iter()
        .zip(x_hat.rows())
        .zip(dx.rows_mut())
        .zip(r.iter())
    {
        let mean_d = dh_row.sum() / d;
        let mean_dx = dh_row.dot(&xh_row) / d;
        Zip::from(&mut dx_row)
            .and(&dh_row)
            .and(&xh_row)
            .for_each(|o, &dh_v, &xh_v| *o = ri * (dh_v - mean_d - xh_v * mean_dx));
    }
    (dx, dscale, doffset)
}

/// Adjoint of `m = x * tanh(beta) + gamma`; returns `(dx, dbeta, dgamma)`.
fn mod_backward(
    dm: &Array2<f64>,
    x: &Array2<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let tb = beta.mapv(f64::tanh);
    let dx = dm * &tb;
    let sech2 = tb.mapv(|t| 1.0 - t * t);
    let dbeta = (dm * x).sum_axis(Axis(0)) * &sech2;
    let dgamma = dm.sum_axis(Axis(0));
    (dx, dbeta, dgamma)
}

/// Computes the gradient of every parameter from a recorded trace and the
/// upstream head gradients. The trace and parameters are left untouched.
pub fn backward(
    trace: &ForwardTrace,
    upstream: &HeadGradients,
    params: &ModelParameters,
) -> Result<ParameterGradients> {
    let config = trace.config;
    let (n, d) = (config.n_regions, config.hidden_dim);
    let f = config.ffn_dim();
    let layout = params.layout();

    let layers = trace
        .layers
        .as_ref()
        .ok_or_else(|| Error::config("backward needs a trace recorded with record=true"))?;
    let head = trace
        .head
        .as_ref()
        .ok_or_else(|| Error::config("backward needs head outputs; run heads_forward first"))?;
    let p_eff = trace
        .p_eff
        .as_ref()
        .ok_or_else(|| Error::config("backward needs a trace built by the full forward pass"))?;
    if upstream.d_eps.len() != n || upstream.d_logits.len() != n {
        return Err(Error::config(format!(
            "upstream gradient lengths {}/{} do not match {n} regions",
            upstream.d_eps.len(),
            upstream.d_logits.len()
        )));
    }
    if let Some(de) = &upstream.d_ehat {
        if config.ref_dim == 0 {
            return Err(Error::config(
                "alignment gradient supplied but the model has no alignment branch",
            ));
        }
        if de.nrows() != n || de.ncols() != config.ref_dim {
            return Err(Error::config(format!(
                "alignment gradient is {}x{}, expected {n}x{}",
                de.nrows(),
                de.ncols(),
                config.ref_dim
            )));
        }
    }

    let mut g = vec![0.0f64; layout.total()];
    let mut dsc: Array1<f64> = Array1::zeros(d);

    // Alignment MLP: e_hat = silu(h_mid W1 + b1) W2 + b2.
    let mut dh_mid: Option<Array2<f64>> = None;
    if let Some(de) = &upstream.d_ehat {
        let ag = head.ag.as_ref().expect("alignment trace present");
        let g1 = head.g1.as_ref().expect("alignment trace present");
        let sg = head.sg.as_ref().expect("alignment trace present");
        let h_mid = trace
            .h_mid
            .as_ref()
            .ok_or_else(|| Error::config("alignment gradient needs the middle-layer tap"))?;
        add2(&mut g, &layout.align_w2, &ag.t().dot(de));
        add1(&mut g, &layout.align_b2, &de.sum_axis(Axis(0)));
        let mut dg1 = de.dot(&params.mat(&layout.align_w2, d, config.ref_dim).t());
        Zip::from(&mut dg1)
            .and(g1)
            .and(sg)
            .for_each(|dv, &x, &s| *dv *= dsilu_cached(x, s));
        add2(&mut g, &layout.align_w1, &h_mid.t().dot(&dg1));
        add1(&mut g, &layout.align_b1, &dg1.sum_axis(Axis(0)));
        dh_mid = Some(dg1.dot(&params.mat(&layout.align_w1, d, d).t()));
    }

    // Scalar heads: out = h_out w + b.
    let mut dh_out = Array2::zeros((n, d));
    for i in 0..n {
        dh_out
            .row_mut(i)
            .scaled_add(upstream.d_eps[i], &params.vec(&layout.noise_w));
        dh_out
            .row_mut(i)
            .scaled_add(upstream.d_logits[i], &params.vec(&layout.mask_w));
    }
    add1(&mut g, &layout.noise_w, &head.h_out.t().dot(&upstream.d_eps));
    g[layout.noise_b.start] += upstream.d_eps.sum();
    add1(&mut g, &layout.mask_w, &head.h_out.t().dot(&upstream.d_logits));
    g[layout.mask_b.start] += upstream.d_logits.sum();

    // Output norm and modulation.
    let (dmo, d_oscale, d_ooffset) = ln_backward(
        &dh_out,
        &head.mo_hat,
        &head.mo_r,
        params.vec(&layout.out_ln_scale),
    );
    add1(&mut g, &layout.out_ln_scale, &d_oscale);
    add1(&mut g, &layout.out_ln_offset, &d_ooffset);
    let (mut dh, dbeta_o, dgamma_o) = mod_backward(&dmo, &trace.h_last, &head.beta_o);
    let mut dout2 = Array1::zeros(2 * d);
    dout2.slice_mut(s![0..d]).assign(&dbeta_o);
    dout2.slice_mut(s![d..2 * d]).assign(&dgamma_o);
    add_outer(&mut g, &layout.out_adaln_w, trace.sc.view(), dout2.view());
    add1(&mut g, &layout.out_adaln_b, &dout2);
    dsc += &params.mat(&layout.out_adaln_w, d, 2 * d).dot(&dout2);

    // Encoder layers, last to first.
    let heads_n = config.n_heads;
    let dh_head = config.head_dim();
    let attn_scale = 1.0 / (dh_head as f64).sqrt();
    for l in (0..config.n_layers).rev() {
        // The alignment branch taps the output of layer mid; inject its
        // gradient where that output appears in the chain.
        if l + 1 == config.mid_layer() {
            if let Some(dm) = &dh_mid {
                dh += dm;
            }
        }
        let lt = &layers[l];
        let lo = &layout.layers[l];

        // Feed-forward residual: h = h_check + alpha2 * f2.
        let dalpha2 = (&dh * &lt.f2).sum_axis(Axis(0));
        let df2 = &dh * &lt.alpha2;
        let mut dh_check = dh;

        add2(&mut g, &lo.ffn_w2, &lt.af.t().dot(&df2));
        add1(&mut g, &lo.ffn_b2, &df2.sum_axis(Axis(0)));
        let mut df1 = df2.dot(&params.mat(&lo.ffn_w2, f, d).t());
        Zip::from(&mut df1)
            .and(&lt.f1)
            .and(&lt.sig1)
            .for_each(|dv, &x, &s| *dv *= dsilu_cached(x, s));
        add2(&mut g, &lo.ffn_w1, &lt.n2.t().dot(&df1));
        add1(&mut g, &lo.ffn_b1, &df1.sum_axis(Axis(0)));
        let dn2 = df1.dot(&params.mat(&lo.ffn_w1, d, f).t());

        let (dm2, ds2, do2) = ln_backward(&dn2, &lt.m2_hat, &lt.m2_r, params.vec(&lo.ln2_scale));
        add1(&mut g, &lo.ln2_scale, &ds2);
        add1(&mut g, &lo.ln2_offset, &do2);
        let (dx2, dbeta2, dgamma2) = mod_backward(&dm2, &lt.h_check, &lt.beta2);
        dh_check += &dx2;

        // Attention residual: h_check = h_in + alpha1 * attn.
        let dalpha1 = (&dh_check * &lt.attn).sum_axis(Axis(0));
        let dattn = &dh_check * &lt.alpha1;
        let mut dh_in = dh_check;

        add2(&mut g, &lo.attn_wo, &lt.ctx.t().dot(&dattn));
        let dctx = dattn.dot(&params.mat(&lo.attn_wo, d, d).t());

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for hd in 0..heads_n {
            let c0 = hd * dh_head;
            let c1 = c0 + dh_head;
            let p = &lt.probs[hd];
            let dctx_h = dctx.slice(s![.., c0..c1]);
            // dp is consumed in place: each row becomes p * (dp - <dp, p>),
            // the softmax adjoint, already carrying the score scale.
            let mut ds = dctx_h.dot(&lt.v.slice(s![.., c0..c1]).t());
            dv.slice_mut(s![.., c0..c1])
                .assign(&p.t().dot(&dctx_h));
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = ds_row.dot(&p_row);
                Zip::from(&mut ds_row)
                    .and(&p_row)
                    .for_each(|dv_s, &pv| *dv_s = pv * (*dv_s - dot) * attn_scale);
            }
            dq.slice_mut(s![.., c0..c1])
                .assign(&ds.dot(&lt.k.slice(s![.., c0..c1])));
            dk.slice_mut(s![.., c0..c1])
                .assign(&ds.t().dot(&lt.q.slice(s![.., c0..c1])));
        }

        add2(&mut g, &lo.attn_wq, &lt.n1.t().dot(&dq));
        add2(&mut g, &lo.attn_wk, &lt.n1.t().dot(&dk));
        add2(&mut g, &lo.attn_wv, &lt.n1.t().dot(&dv));
        let mut dn1 = dq.dot(&params.mat(&lo.attn_wq, d, d).t());
        dn1 += &dk.dot(&params.mat(&lo.attn_wk, d, d).t());
        dn1 += &dv.dot(&params.mat(&lo.attn_wv, d, d).t());

        let (dm1, ds1, do1) = ln_backward(&dn1, &lt.m1_hat, &lt.m1_r, params.vec(&lo.ln1_scale));
        add1(&mut g, &lo.ln1_scale, &ds1);
        add1(&mut g, &lo.ln1_offset, &do1);
        let (dx1, dbeta1, dgamma1) = mod_backward(&dm1, &lt.h_in, &lt.beta1);
        dh_in += &dx1;

        let mut dsix = Array1::zeros(6 * d);
        dsix.slice_mut(s![0..d]).assign(&dalpha1);
        dsix.slice_mut(s![d..2 * d]).assign(&dbeta1);
        dsix.slice_mut(s![2 * d..3 * d]).assign(&dgamma1);
        dsix.slice_mut(s![3 * d..4 * d]).assign(&dalpha2);
        dsix.slice_mut(s![4 * d..5 * d]).assign(&dbeta2);
        dsix.slice_mut(s![5 * d..6 * d]).assign(&dgamma2);
        add_outer(&mut g, &lo.adaln_w, trace.sc.view(), dsix.view());
        add1(&mut g, &lo.adaln_b, &dsix);
        dsc += &params.mat(&lo.adaln_w, d, 6 * d).dot(&dsix);

        dh = dh_in;
    }

    // Input embedding: h0 = R + p_eff v (row-wise).
    add2(&mut g, &layout.region_embed, &dh);
    add1(&mut g, &layout.value_vec, &dh.t().dot(p_eff));

    // Timestep conditioning: sc = silu(c), c = silu(u1) W2 + b2, u1 = feat W1 + b1.
    let dc = &dsc * &trace.c.mapv(dsilu);
    add_outer(&mut g, &layout.time_w2, trace.a1.view(), dc.view());
    add1(&mut g, &layout.time_b2, &dc);
    let da1 = params.mat(&layout.time_w2, d, d).dot(&dc);
    let du1 = &da1 * &trace.u1.mapv(dsilu);
    add_outer(&mut g, &layout.time_w1, trace.feat.view(), du1.view());
    add1(&mut g, &layout.time_b1, &du1);

    Ok(ParameterGradients { data: g })
}
