//! Model configuration, the flat parameter store, and its layout.
//!
//! All learnable tensors live in one contiguous `Vec<f64>` addressed through
//! a [`ParamLayout`] of typed offset ranges. The optimizer, the checkpoint
//! format, and the finite-difference gradient checker all walk the same
//! layout, so they cannot disagree about ordering.

use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;

/// Width of the sinusoidal timestep feature vector fed to the time MLP.
pub const TIME_FEAT_DIM: usize = 128;

/// Feed-forward hidden width as a multiple of the hidden dimension.
pub const FFN_EXPANSION: usize = 4;

/// Weight initialization standard deviation.
pub const INIT_STD: f64 = 0.02;

/// Shape-defining hyperparameters of the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of regions N.
    pub n_regions: usize,
    /// Hidden dimension D.
    pub hidden_dim: usize,
    /// Number of encoder layers L.
    pub n_layers: usize,
    /// Attention heads; must divide the hidden dimension.
    pub n_heads: usize,
    /// Reference-embedding dimension D'; 0 disables the alignment branch.
    pub ref_dim: usize,
    /// Diffusion step count T.
    pub t_steps: usize,
}

impl ModelConfig {
    pub fn new(
        n_regions: usize,
        hidden_dim: usize,
        n_layers: usize,
        n_heads: usize,
        ref_dim: usize,
        t_steps: usize,
    ) -> Result<Self> {
        if n_regions < 2 {
            return Err(Error::config("model needs at least 2 regions"));
        }
        if hidden_dim == 0 || n_heads == 0 || hidden_dim % n_heads != 0 {
            return Err(Error::config(format!(
                "hidden dim {hidden_dim} must be a positive multiple of {n_heads} heads"
            )));
        }
        if n_layers == 0 {
            return Err(Error::config("model needs at least 1 layer"));
        }
        if ref_dim > 0 && n_layers < 2 {
            return Err(Error::config(
                "alignment taps the middle layer, which needs at least 2 layers",
            ));
        }
        if t_steps == 0 {
            return Err(Error::config("diffusion needs at least 1 step"));
        }
        Ok(ModelConfig {
            n_regions,
            hidden_dim,
            n_layers,
            n_heads,
            ref_dim,
            t_steps,
        })
    }

    /// Per-head feature width.
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Feed-forward hidden width.
    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * FFN_EXPANSION
    }

    /// 1-based index of the layer whose output feeds the alignment MLP.
    pub fn mid_layer(&self) -> usize {
        self.n_layers / 2
    }
}

/// Offset ranges of one encoder layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub attn_wq: Range<usize>,
    pub attn_wk: Range<usize>,
    pub attn_wv: Range<usize>,
    pub attn_wo: Range<usize>,
    pub ffn_w1: Range<usize>,
    pub ffn_b1: Range<usize>,
    pub ffn_w2: Range<usize>,
    pub ffn_b2: Range<usize>,
    pub adaln_w: Range<usize>,
    pub adaln_b: Range<usize>,
    pub ln1_scale: Range<usize>,
    pub ln1_offset: Range<usize>,
    pub ln2_scale: Range<usize>,
    pub ln2_offset: Range<usize>,
}

/// Offset ranges of every parameter tensor. The order of [`ParamLayout::groups`]
/// is the canonical serialization order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub region_embed: Range<usize>,
    pub value_vec: Range<usize>,
    pub time_w1: Range<usize>,
    pub time_b1: Range<usize>,
    pub time_w2: Range<usize>,
    pub time_b2: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub out_adaln_w: Range<usize>,
    pub out_adaln_b: Range<usize>,
    pub out_ln_scale: Range<usize>,
    pub out_ln_offset: Range<usize>,
    pub noise_w: Range<usize>,
    pub noise_b: Range<usize>,
    pub mask_w: Range<usize>,
    pub mask_b: Range<usize>,
    /// Alignment MLP ranges; all empty when `ref_dim == 0`.
    pub align_w1: Range<usize>,
    pub align_b1: Range<usize>,
    pub align_w2: Range<usize>,
    pub align_b2: Range<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let range = cursor..cursor + len;
            cursor += len;
            range
        };

        let region_embed = take(config.n_regions * d);
        let value_vec = take(d);
        let time_w1 = take(TIME_FEAT_DIM * d);
        let time_b1 = take(d);
        let time_w2 = take(d * d);
        let time_b2 = take(d);
        let layers = (0..config.n_layers)
            .map(|_| LayerLayout {
                attn_wq: take(d * d),
                attn_wk: take(d * d),
                attn_wv: take(d * d),
                attn_wo: take(d * d),
                ffn_w1: take(d * f),
                ffn_b1: take(f),
                ffn_w2: take(f * d),
                ffn_b2: take(d),
                adaln_w: take(d * 6 * d),
                adaln_b: take(6 * d),
                ln1_scale: take(d),
                ln1_offset: take(d),
                ln2_scale: take(d),
                ln2_offset: take(d),
            })
            .collect();
        let out_adaln_w = take(d * 2 * d);
        let out_adaln_b = take(2 * d);
        let out_ln_scale = take(d);
        let out_ln_offset = take(d);
        let noise_w = take(d);
        let noise_b = take(1);
        let mask_w = take(d);
        let mask_b = take(1);
        let (align_w1, align_b1, align_w2, align_b2) = if config.ref_dim > 0 {
            (
                take(d * d),
                take(d),
                take(d * config.ref_dim),
                take(config.ref_dim),
            )
        } else {
            (take(0), take(0), take(0), take(0))
        };

        ParamLayout {
            region_embed,
            value_vec,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            layers,
            out_adaln_w,
            out_adaln_b,
            out_ln_scale,
            out_ln_offset,
            noise_w,
            noise_b,
            mask_w,
            mask_b,
            align_w1,
            align_b1,
            align_w2,
            align_b2,
            total: cursor,
        }
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Every tensor as `(name, range)` in canonical serialization order.
    /// Empty ranges (disabled alignment branch) are omitted.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("region_embed".to_string(), self.region_embed.clone()),
            ("value_vec".to_string(), self.value_vec.clone()),
            ("time_w1".to_string(), self.time_w1.clone()),
            ("time_b1".to_string(), self.time_b1.clone()),
            ("time_w2".to_string(), self.time_w2.clone()),
            ("time_b2".to_string(), self.time_b2.clone()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_wq"), layer.attn_wq.clone()));
            out.push((format!("layer{l}.attn_wk"), layer.attn_wk.clone()));
            out.push((format!("layer{l}.attn_wv"), layer.attn_wv.clone()));
            out.push((format!("layer{l}.attn_wo"), layer.attn_wo.clone()));
            out.push((format!("layer{l}.ffn_w1"), layer.ffn_w1.clone()));
            out.push((format!("layer{l}.ffn_b1"), layer.ffn_b1.clone()));
            out.push((format!("layer{l}.ffn_w2"), layer.ffn_w2.clone()));
            out.push((format!("layer{l}.ffn_b2"), layer.ffn_b2.clone()));
            out.push((format!("layer{l}.adaln_w"), layer.adaln_w.clone()));
            out.push((format!("layer{l}.adaln_b"), layer.adaln_b.clone()));
            out.push((format!("layer{l}.ln1_scale"), layer.ln1_scale.clone()));
            out.push((format!("layer{l}.ln1_offset"), layer.ln1_offset.clone()));
            out.push((format!("layer{l}.ln2_scale"), layer.ln2_scale.clone()));
            out.push((format!("layer{l}.ln2_offset"), layer.ln2_offset.clone()));
        }
        out.push(("out_adaln_w".to_string(), self.out_adaln_w.clone()));
        out.push(("out_adaln_b".to_string(), self.out_adaln_b.clone()));
        out.push(("out_ln_scale".to_string(), self.out_ln_scale.clone()));
        out.push(("out_ln_offset".to_string(), self.out_ln_offset.clone()));
        out.push(("noise_w".to_string(), self.noise_w.clone()));
        out.push(("noise_b".to_string(), self.noise_b.clone()));
        out.push(("mask_w".to_string(), self.mask_w.clone()));
        out.push(("mask_b".to_string(), self.mask_b.clone()));
        if !self.align_w1.is_empty() {
            out.push(("align_w1".to_string(), self.align_w1.clone()));
            out.push(("align_b1".to_string(), self.align_b1.clone()));
            out.push(("align_w2".to_string(), self.align_w2.clone()));
            out.push(("align_b2".to_string(), self.align_b2.clone()));
        }
        out
    }
}

/// All learnable parameters of one model, stored flat in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<f64>,
}

impl ModelParameters {
    /// Initializes a fresh model.
    ///
    /// Weight matrices draw from N(0, 0.02^2) and biases start at zero, with
    /// two deliberate exceptions: layer-norm scales start at one, and the
    /// adaLN projections plus both output heads start at exactly zero. Zero
    /// adaLN output closes every tanh-gated branch, so the encoder is an
    /// identity map and the predicted noise is zero until training moves the
    /// gates.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let layout = ParamLayout::new(&config);
        let mut data = vec![0.0f64; layout.total()];
        let mut rng = sub_rng(seed, "init", 0);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |range: &Range<usize>, data: &mut Vec<f64>| {
            for slot in &mut data[range.clone()] {
                *slot = rng.sample(normal);
            }
        };

        fill(&layout.region_embed, &mut data);
        fill(&layout.value_vec, &mut data);
        fill(&layout.time_w1, &mut data);
        fill(&layout.time_w2, &mut data);
        let d = config.hidden_dim;
        for layer in &layout.layers {
            fill(&layer.attn_wq, &mut data);
            fill(&layer.attn_wk, &mut data);
            fill(&layer.attn_wv, &mut data);
            fill(&layer.attn_wo, &mut data);
            fill(&layer.ffn_w1, &mut data);
            fill(&layer.ffn_w2, &mut data);
            // The adaLN projection weight starts at zero, but the beta
            // slots of its bias start at one. Blocks are still exact
            // identities (the alpha gates are zero), yet the inner
            // modulation passes tanh(1) of the signal through, so the
            // branches and heads see real features and receive gradient
            // from the first step. With the beta biases also at zero every
            // mod() output and every gradient into the branches vanishes
            // identically and training can never move off its start.
            let b = layer.adaln_b.start;
            data[b + d..b + 2 * d].fill(1.0);
            data[b + 4 * d..b + 5 * d].fill(1.0);
            for slot in &mut data[layer.ln1_scale.clone()] {
                *slot = 1.0;
            }
            for slot in &mut data[layer.ln2_scale.clone()] {
                *slot = 1.0;
            }
        }
        // Same opening for the output modulation's beta slots.
        let ob = layout.out_adaln_b.start;
        data[ob..ob + d].fill(1.0);
        for slot in &mut data[layout.out_ln_scale.clone()] {
            *slot = 1.0;
        }
        // The alignment MLP must not start at zero: a zero output has no
        // defined cosine direction and therefore no gradient.
        fill(&layout.align_w1, &mut data);
        fill(&layout.align_w2, &mut data);

        ModelParameters {
            config,
            layout,
            data,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rebuilds a parameter set from a flat vector in layout order.
    pub fn from_flat(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        let layout = ParamLayout::new(&config);
        if data.len() != layout.total() {
            return Err(Error::config(format!(
                "parameter vector has {} entries, config needs {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(ModelParameters {
            config,
            layout,
            data,
        })
    }

    /// Overwrites every parameter with N(0, scale^2) noise. Used by the
    /// gradient checker, which needs all gates open and heads nonzero.
    pub fn randomize_all(&mut self, seed: u64, scale: f64) {
        let mut rng = sub_rng(seed, "randomize", 0);
        let normal = Normal::new(0.0, scale).expect("valid std");
        for slot in &mut self.data {
            *slot = rng.sample(normal);
        }
    }

    /// Views a range as a `rows x cols` row-major matrix.
    pub fn mat(&self, range: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.data[range.clone()])
            .expect("layout range matches shape")
    }

    /// Views a range as a vector.
    pub fn vec(&self, range: &Range<usize>) -> ArrayView1<'_, f64> {
        ArrayView1::from_shape(range.len(), &self.data[range.clone()])
            .expect("layout range matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(8, 16, 2, 2, 4, 10).is_ok());
        assert!(ModelConfig::new(1, 16, 2, 2, 4, 10).is_err());
        assert!(ModelConfig::new(8, 15, 2, 2, 4, 10).is_err());
        assert!(ModelConfig::new(8, 16, 0, 2, 4, 10).is_err());
        assert!(ModelConfig::new(8, 16, 1, 2, 4, 10).is_err());
        assert!(ModelConfig::new(8, 16, 1, 2, 0, 10).is_ok());
        assert!(ModelConfig::new(8, 16, 2, 2, 4, 0).is_err());
    }

    #[test]
    fn layout_covers_vector_exactly() {
        let config = ModelConfig::new(8, 16, 2, 2, 4, 10).unwrap();
        let layout = ParamLayout::new(&config);
        let mut cursor = 0;
        for (name, range) in layout.groups() {
            assert_eq!(range.start, cursor, "gap before {name}");
            cursor = range.end;
        }
        assert_eq!(cursor, layout.total());
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        let (n, d, l, dp) = (267usize, 128usize, 4usize, 128usize);
        let config = ModelConfig::new(n, d, l, 4, dp, 1000).unwrap();
        let f = FFN_EXPANSION * d;
        let per_layer = 4 * d * d + (d * f + f + f * d + d) + (d * 6 * d + 6 * d) + 4 * d;
        let expected = n * d
            + d
            + (TIME_FEAT_DIM * d + d + d * d + d)
            + l * per_layer
            + (d * 2 * d + 2 * d)
            + 2 * d
            + 2 * (d + 1)
            + (d * d + d + d * dp + dp);
        let params = ModelParameters::init(config, 0);
        assert_eq!(params.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let config = ModelConfig::new(8, 16, 2, 2, 4, 10).unwrap();
        let a = ModelParameters::init(config, 42);
        let b = ModelParameters::init(config, 42);
        assert_eq!(a, b);
        let c = ModelParameters::init(config, 43);
        assert_ne!(a, c);

        let layout = a.layout();
        let d = 16;
        for layer in &layout.layers {
            assert!(a.data()[layer.adaln_w.clone()].iter().all(|v| *v == 0.0));
            // Bias slot order is alpha1, beta1, gamma1, alpha2, beta2,
            // gamma2: gates and shifts closed, modulations open.
            let bias = &a.data()[layer.adaln_b.clone()];
            assert!(bias[..d].iter().all(|v| *v == 0.0));
            assert!(bias[d..2 * d].iter().all(|v| *v == 1.0));
            assert!(bias[2 * d..3 * d].iter().all(|v| *v == 0.0));
            assert!(bias[3 * d..4 * d].iter().all(|v| *v == 0.0));
            assert!(bias[4 * d..5 * d].iter().all(|v| *v == 1.0));
            assert!(bias[5 * d..].iter().all(|v| *v == 0.0));
            assert!(a.data()[layer.ln1_scale.clone()].iter().all(|v| *v == 1.0));
            assert!(a.data()[layer.ffn_b1.clone()].iter().all(|v| *v == 0.0));
        }
        assert!(a.data()[layout.noise_w.clone()].iter().all(|v| *v == 0.0));
        assert!(a.data()[layout.mask_w.clone()].iter().all(|v| *v == 0.0));
        assert!(a.data()[layout.out_adaln_w.clone()].iter().all(|v| *v == 0.0));
        let out_bias = &a.data()[layout.out_adaln_b.clone()];
        assert!(out_bias[..d].iter().all(|v| *v == 1.0));
        assert!(out_bias[d..].iter().all(|v| *v == 0.0));
        assert!(a.data()[layout.align_w1.clone()].iter().any(|v| *v != 0.0));
        assert!(a.data()[layout.region_embed.clone()].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn alignment_disabled_drops_align_tensors() {
        let with = ModelParameters::init(ModelConfig::new(8, 16, 2, 2, 4, 10).unwrap(), 0);
        let without = ModelParameters::init(ModelConfig::new(8, 16, 2, 2, 0, 10).unwrap(), 0);
        let diff = 16 * 16 + 16 + 16 * 4 + 4;
        assert_eq!(with.param_count(), without.param_count() + diff);
        assert!(without.layout().align_w1.is_empty());
    }
}
