//! Run configuration: the optional TOML config file, documented defaults,
//! and the precedence rule (command-line flag, then config file, then
//! default).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use uicl_core::{Error, Result};

/// Optional settings read from a `--config` TOML file. Keys are exactly
/// these field names; unknown keys are rejected so typos cannot silently
/// fall back to defaults. Every field is optional, and a flag with the
/// same meaning always wins over the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Profile matrix JSON or single-profile CSV.
    pub data: Option<PathBuf>,
    /// Reference embeddings JSON for the alignment loss.
    pub reference: Option<PathBuf>,
    /// Directory for run outputs.
    pub out_dir: Option<PathBuf>,
    /// Transformer hidden dimension.
    pub hidden_dim: Option<usize>,
    /// Encoder layer count.
    pub layers: Option<usize>,
    /// Attention head count.
    pub heads: Option<usize>,
    /// Diffusion step count.
    pub t_steps: Option<usize>,
    /// Noise-schedule start.
    pub beta_start: Option<f64>,
    /// Noise-schedule end.
    pub beta_end: Option<f64>,
    /// Adam learning rate.
    pub lr: Option<f64>,
    /// Training epochs.
    pub epochs: Option<usize>,
    /// Examples per optimizer step.
    pub batch_size: Option<usize>,
    /// Mask-loss weight.
    pub lambda_mask: Option<f64>,
    /// Alignment-loss weight.
    pub lambda_align: Option<f64>,
    /// Epochs between validation passes.
    pub val_every: Option<usize>,
    /// Fraction of profiles held out for validation.
    pub val_frac: Option<f64>,
    /// Max L2 norm for the batch gradient; 0 disables clipping.
    pub grad_clip: Option<f64>,
    /// Inference ensemble size.
    pub rounds: Option<usize>,
    /// Run seed.
    pub seed: Option<u64>,
    /// Worker threads.
    pub threads: Option<usize>,
}

impl RunConfig {
    /// Parses a TOML config file. Parse failures and unknown keys are
    /// config errors carrying the file path.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("config file {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::config(format!("config file {}: {e}", path.display())))
    }
}

/// Documented defaults for settings that are not already defaults of a
/// core type. Help text quotes the same values.
pub mod defaults {
    /// Transformer hidden dimension.
    pub const HIDDEN_DIM: usize = 128;
    /// Encoder layer count.
    pub const LAYERS: usize = 4;
    /// Attention head count.
    pub const HEADS: usize = 4;
}

/// Applies the precedence rule for one setting.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Requires a referenced input path to exist before any work starts, so a
/// bad path can never leave partial outputs behind.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}
