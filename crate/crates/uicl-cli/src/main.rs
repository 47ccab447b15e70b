//! `uicl`: command-line front end for the diffusion profiling toolkit.
//!
//! Subcommands cover the full workflow: synthesize a city, train a model,
//! complete partially observed profiles, score predictions, and run
//! post-hoc analyses. Every command validates its whole configuration
//! before writing anything, so an invalid invocation never leaves partial
//! outputs, and all randomness derives from `--seed`, so reruns with the
//! same flags reproduce outputs byte for byte.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data or file
//! error, 4 numerical failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use uicl_core::analysis::{
    epanechnikov_kde, evaluate, fit_scaling_law, kmeans, linear_probe_baseline, save_kde_csv,
    save_metrics_json, save_scaling_json, silverman_bandwidth, MetricReport, TaskReport,
    DEFAULT_RIDGE,
};
use uicl_core::diffusion::{
    MaskVector, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T,
};
use uicl_core::infer::{
    load_prediction_json, predict, save_prediction_json, InferenceRequest, PredictionEnsemble,
    DEFAULT_ROUNDS,
};
use uicl_core::model::{gradient_check, load_checkpoint, ModelConfig};
use uicl_core::region::{
    generate_synthetic_city, load_profiles, load_profiles_auto, make_split, NormStats,
    ReferenceEmbeddings, RegionSet, Split,
};
use uicl_core::train::{train, TrainConfig};
use uicl_core::{Error, Result};

use config::{defaults, pick, require_exists, RunConfig};

#[derive(Parser)]
#[command(
    name = "uicl",
    version,
    about = "Masked-diffusion toolkit for urban region profiles",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city: profile matrix, reference embeddings, and a region split
    GenSynth(GenSynthArgs),
    /// Train a model on a profile matrix
    Train(TrainArgs),
    /// Complete a partially observed profile with a trained checkpoint
    Infer(InferArgs),
    /// Score predictions against ground truth on the predicted regions
    Eval(EvalArgs),
    /// Post-hoc analyses over predictions, fits, and checkpoints
    Analyze(AnalyzeArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numerical(_) => 4,
                _ => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => match args.what {
            AnalyzeCommand::Kde(args) => cmd_kde(args),
            AnalyzeCommand::Scaling(args) => cmd_scaling(args),
            AnalyzeCommand::Cluster(args) => cmd_cluster(args),
            AnalyzeCommand::Probe(args) => cmd_probe(args),
        },
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

// ---------------------------------------------------------------- gen-synth

#[derive(Args)]
struct GenSynthArgs {
    /// Number of regions
    #[arg(long, default_value_t = 64)]
    regions: usize,
    /// Number of profiles
    #[arg(long, default_value_t = 200)]
    profiles: usize,
    /// Latent factor dimension
    #[arg(long, default_value_t = 8)]
    latent: usize,
    /// Observation noise standard deviation
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Train fraction of the region split
    #[arg(long, default_value_t = 0.6)]
    train_frac: f64,
    /// Validation fraction of the region split
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    /// Test fraction of the region split
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let (matrix, embeddings) = generate_synthetic_city(
        args.regions,
        args.profiles,
        args.latent,
        args.noise_std,
        args.seed,
    )?;
    let regions = RegionSet::new(args.regions)?;
    let split = make_split(
        &regions,
        (args.train_frac, args.val_frac, args.test_frac),
        args.seed,
    )?;

    fs::create_dir_all(&args.out_dir)?;
    let profiles_path = args.out_dir.join("profiles.json");
    let embeddings_path = args.out_dir.join("embeddings.json");
    let split_path = args.out_dir.join("split.json");
    matrix.save_json(&profiles_path)?;
    embeddings.save_json(&embeddings_path)?;
    split.save_json(&split_path)?;

    println!(
        "synthetic city: {} regions x {} profiles, latent dim {}, noise std {}",
        args.regions, args.profiles, args.latent, args.noise_std
    );
    println!(
        "split: {} train / {} val / {} test regions",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    println!(
        "wrote {}, {}, {}",
        profiles_path.display(),
        embeddings_path.display(),
        split_path.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Profile matrix JSON or single-profile CSV [required here or in the config file]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reference embeddings JSON; enables the alignment loss
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Output directory for checkpoints and the loss curve [default: .]
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Hidden dimension [default: 128]
    #[arg(long = "dim")]
    hidden_dim: Option<usize>,
    /// Encoder layer count [default: 4]
    #[arg(long)]
    layers: Option<usize>,
    /// Attention head count [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Diffusion step count [default: 1000]
    #[arg(long = "t-steps", visible_alias = "T")]
    t_steps: Option<usize>,
    /// Noise-schedule start [default: 0.0001]
    #[arg(long)]
    beta_start: Option<f64>,
    /// Noise-schedule end [default: 0.02]
    #[arg(long)]
    beta_end: Option<f64>,
    /// Adam learning rate [default: 0.0004]
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs [default: 1000]
    #[arg(long)]
    epochs: Option<usize>,
    /// Examples per optimizer step [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Mask-loss weight [default: 0.3]
    #[arg(long)]
    lambda_mask: Option<f64>,
    /// Alignment-loss weight; requires --ref when positive [default: 0.1 with --ref, else 0]
    #[arg(long)]
    lambda_align: Option<f64>,
    /// Epochs between validation passes; 0 disables validation [default: 10]
    #[arg(long)]
    val_every: Option<usize>,
    /// Fraction of profiles held out for validation [default: 0.1]
    #[arg(long)]
    val_frac: Option<f64>,
    /// Max L2 norm for the batch gradient; 0 disables clipping [default: 0]
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    threads: Option<usize>,
}

/// Fully resolved settings for a training run.
struct TrainSettings {
    data: PathBuf,
    reference: Option<PathBuf>,
    out_dir: PathBuf,
    hidden_dim: usize,
    layers: usize,
    heads: usize,
    t_steps: usize,
    train: TrainConfig,
}

fn resolve_train(args: TrainArgs) -> Result<TrainSettings> {
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let base = TrainConfig::default();

    let data = args
        .data
        .or(file.data)
        .ok_or_else(|| Error::config("train needs a profile file: pass --data or set data in the config file"))?;
    let reference = args.reference.or(file.reference);
    let out_dir = pick(args.out_dir, file.out_dir, PathBuf::from("."));

    // A positive alignment weight without reference embeddings is only an
    // error when the user asked for it; the default weight degrades to zero.
    let lambda_align_requested = args.lambda_align.is_some() || file.lambda_align.is_some();
    let mut lambda_align = pick(args.lambda_align, file.lambda_align, base.lambda_align);
    if reference.is_none() && lambda_align > 0.0 {
        if lambda_align_requested {
            return Err(Error::config(
                "lambda_align > 0 requires reference embeddings: pass --ref or set reference in the config file",
            ));
        }
        lambda_align = 0.0;
    }

    // A zero from either source disables clipping.
    let grad_clip = match pick(args.grad_clip, file.grad_clip, 0.0) {
        0.0 => None,
        v => Some(v),
    };

    let train = TrainConfig {
        lr: pick(args.lr, file.lr, base.lr),
        epochs: pick(args.epochs, file.epochs, base.epochs),
        batch_size: pick(args.batch_size, file.batch_size, base.batch_size),
        lambda_mask: pick(args.lambda_mask, file.lambda_mask, base.lambda_mask),
        lambda_align,
        seed: pick(args.seed, file.seed, base.seed),
        beta_start: pick(args.beta_start, file.beta_start, base.beta_start),
        beta_end: pick(args.beta_end, file.beta_end, base.beta_end),
        val_every: pick(args.val_every, file.val_every, base.val_every),
        val_frac: pick(args.val_frac, file.val_frac, base.val_frac),
        grad_clip,
        threads: pick(args.threads, file.threads, base.threads),
        ..base
    };
    train.validate()?;

    let settings = TrainSettings {
        data,
        reference,
        out_dir,
        hidden_dim: pick(args.hidden_dim, file.hidden_dim, defaults::HIDDEN_DIM),
        layers: pick(args.layers, file.layers, defaults::LAYERS),
        heads: pick(args.heads, file.heads, defaults::HEADS),
        t_steps: pick(args.t_steps, file.t_steps, DEFAULT_T),
        train,
    };
    require_exists(&settings.data, "profile file")?;
    if let Some(reference) = &settings.reference {
        require_exists(reference, "reference embeddings file")?;
    }
    Ok(settings)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = resolve_train(args)?;
    let matrix = load_profiles_auto(&settings.data)?;
    let reference = match &settings.reference {
        Some(path) if settings.train.lambda_align > 0.0 => {
            Some(ReferenceEmbeddings::load_json(path)?)
        }
        _ => None,
    };
    let ref_dim = reference.as_ref().map_or(0, ReferenceEmbeddings::dim);

    let model_config = ModelConfig::new(
        matrix.region_count(),
        settings.hidden_dim,
        settings.layers,
        settings.heads,
        ref_dim,
        settings.t_steps,
    )?;

    println!(
        "training on {} profiles over {} regions: dim {}, {} layers, {} heads, T {}",
        matrix.len(),
        matrix.region_count(),
        settings.hidden_dim,
        settings.layers,
        settings.heads,
        settings.t_steps
    );
    println!(
        "epochs {}, batch {}, lr {}, lambda_mask {}, lambda_align {}, seed {}",
        settings.train.epochs,
        settings.train.batch_size,
        settings.train.lr,
        settings.train.lambda_mask,
        settings.train.lambda_align,
        settings.train.seed
    );

    let summary = train(
        &matrix,
        model_config,
        &settings.train,
        reference.as_ref(),
        &settings.out_dir,
    )?;

    if let Some(last) = summary.epoch_reports.last() {
        println!(
            "final losses: total {:.6}, noise {:.6}, mask {:.6}, align {:.6}",
            last.total, last.noise, last.mask, last.align
        );
    }
    if let Some(best) = summary.best_val {
        println!("best validation noise loss: {best:.6}");
    }
    println!(
        "wrote {}, {}, {}",
        summary.final_path.display(),
        summary.best_path.display(),
        summary.curve_path.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- infer

#[derive(Args)]
struct InferArgs {
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Profile CSV (region_id,<name>) or single-profile matrix JSON with observed values
    #[arg(long)]
    profile: PathBuf,
    /// Mask JSON: an array with one 0/1 per region, 1 = predict this region
    #[arg(long)]
    mask_file: PathBuf,
    /// Ensemble chains to average [default: 10]
    #[arg(long)]
    rounds: Option<usize>,
    /// Noise-schedule start [default: 0.0001]
    #[arg(long)]
    beta_start: Option<f64>,
    /// Noise-schedule end [default: 0.02]
    #[arg(long)]
    beta_end: Option<f64>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: 1]
    #[arg(long)]
    threads: Option<usize>,
    /// Output prediction JSON
    #[arg(long, default_value = "prediction.json")]
    out: PathBuf,
}

/// Normalization statistics of the observed entries alone. Masked entries
/// hold placeholders, so letting them into the statistics would corrupt
/// the scale the model sees.
fn observed_norm_stats(values: &[f64], mask: &MaskVector) -> NormStats {
    let observed: Vec<f64> = mask.observed_indices().iter().map(|&i| values[i]).collect();
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let std = if std.is_finite() && std > 0.0 { std } else { 1.0 };
    NormStats { mean, std }
}

fn load_mask_file(path: &Path) -> Result<MaskVector> {
    let text = fs::read_to_string(path)?;
    let bits: Vec<u8> = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("mask file {}: {e}", path.display())))?;
    MaskVector::from_bits(bits)
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let rounds = pick(args.rounds, file.rounds, DEFAULT_ROUNDS);
    let beta_start = pick(args.beta_start, file.beta_start, DEFAULT_BETA_START);
    let beta_end = pick(args.beta_end, file.beta_end, DEFAULT_BETA_END);
    let seed = pick(args.seed, file.seed, 0);
    let threads = pick(args.threads, file.threads, 1);
    if threads == 0 {
        return Err(Error::config("threads must be at least 1"));
    }
    require_exists(&args.checkpoint, "checkpoint")?;
    require_exists(&args.profile, "profile file")?;
    require_exists(&args.mask_file, "mask file")?;

    let params = load_checkpoint(&args.checkpoint)?;
    let n = params.config().n_regions;
    let regions = RegionSet::new(n)?;
    let matrix = load_profiles(&args.profile, &regions)?;
    if matrix.len() != 1 {
        return Err(Error::data(format!(
            "inference takes exactly one profile, {} has {}",
            args.profile.display(),
            matrix.len()
        )));
    }
    let raw = matrix.profile(0).values();

    let mask = load_mask_file(&args.mask_file)?;
    if mask.len() != n {
        return Err(Error::config(format!(
            "mask covers {} regions, checkpoint model has {n}",
            mask.len()
        )));
    }

    let stats = observed_norm_stats(raw, &mask);
    let normalized: Vec<f64> = raw.iter().map(|v| (v - stats.mean) / stats.std).collect();
    let request = InferenceRequest::new(normalized, mask.clone(), rounds, seed)?;
    let schedule = NoiseSchedule::linear(params.config().t_steps, beta_start, beta_end)?;
    let ensemble = predict(&request, &params, &schedule, threads)?;

    // Back to the input scale. Observed entries are spliced in verbatim so
    // the output echoes them bit for bit; only predictions go through the
    // denormalization arithmetic.
    let raw_samples: Vec<Vec<f64>> = ensemble
        .samples()
        .iter()
        .map(|sample| {
            sample
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if mask.is_masked(i) {
                        v * stats.std + stats.mean
                    } else {
                        raw[i]
                    }
                })
                .collect()
        })
        .collect();
    let raw_ensemble = PredictionEnsemble::from_samples(raw_samples)?;
    save_prediction_json(&args.out, &raw_ensemble, &mask, Some(stats))?;

    println!(
        "predicted {} of {n} regions with {rounds} chains -> {}",
        mask.masked_count(),
        args.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    /// Prediction JSON; repeat the flag to average several runs
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Ground-truth profile CSV (region_id,<name>) or single-profile matrix JSON
    #[arg(long)]
    truth: PathBuf,
    /// Task name echoed into the report
    #[arg(long, default_value = "eval")]
    task: String,
    /// Output report JSON
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    for path in &args.pred {
        require_exists(path, "prediction file")?;
    }
    require_exists(&args.truth, "truth file")?;

    let mut reports: Vec<MetricReport> = Vec::with_capacity(args.pred.len());
    let mut truth_values: Option<Vec<f64>> = None;
    for path in &args.pred {
        let pred = load_prediction_json(path)?;
        let n = pred.mask.len();
        let truth = match &truth_values {
            Some(values) => {
                if values.len() != n {
                    return Err(Error::data(format!(
                        "{}: mask covers {n} regions, truth covers {}",
                        path.display(),
                        values.len()
                    )));
                }
                values.clone()
            }
            None => {
                let matrix = load_profiles(&args.truth, &RegionSet::new(n)?)?;
                if matrix.len() != 1 {
                    return Err(Error::data(format!(
                        "evaluation takes exactly one truth profile, {} has {}",
                        args.truth.display(),
                        matrix.len()
                    )));
                }
                let values = matrix.profile(0).values().to_vec();
                truth_values = Some(values.clone());
                values
            }
        };

        let masked: Vec<usize> = (0..n).filter(|&i| pred.mask[i] == 1).collect();
        if masked.is_empty() {
            return Err(Error::data(format!(
                "{}: prediction has no predicted regions to score",
                path.display()
            )));
        }
        let p: Vec<f64> = masked.iter().map(|&i| pred.mean[i]).collect();
        let t: Vec<f64> = masked.iter().map(|&i| truth[i]).collect();
        let report = evaluate(&p, &t)?;
        if args.pred.len() > 1 {
            println!(
                "{}: n {}, mae {:.6}, rmse {:.6}, pcc {:.6}",
                path.display(),
                report.n,
                report.mae,
                report.rmse,
                report.pcc
            );
        }
        reports.push(report);
    }

    let n = reports[0].n;
    if reports.iter().any(|r| r.n != n) {
        return Err(Error::data(
            "prediction files disagree on the number of predicted regions",
        ));
    }
    let k = reports.len() as f64;
    let mean = MetricReport {
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / k,
        rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / k,
        pcc: reports.iter().map(|r| r.pcc).sum::<f64>() / k,
        n,
    };
    let report = TaskReport::new(args.task.clone(), mean);
    save_metrics_json(&args.out, &[report])?;

    println!(
        "{} over {} run(s): n {}, mae {:.6}, rmse {:.6}, pcc {:.6} -> {}",
        args.task,
        reports.len(),
        n,
        mean.mae,
        mean.rmse,
        mean.pcc,
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ analyze

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    what: AnalyzeCommand,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Kernel density of one region's prediction ensemble
    Kde(KdeArgs),
    /// Exponential scaling-law fit over (x, y) points
    Scaling(ScalingArgs),
    /// Cluster regions by their learned embeddings
    Cluster(ClusterArgs),
    /// Ridge linear probe from reference embeddings to an indicator
    Probe(ProbeArgs),
}

#[derive(Args)]
struct KdeArgs {
    /// Prediction JSON holding the ensemble samples
    #[arg(long)]
    samples: PathBuf,
    /// Region whose ensemble values to analyze
    #[arg(long)]
    region: usize,
    /// Kernel bandwidth [default: Silverman's rule]
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Number of evenly spaced density evaluation points
    #[arg(long, default_value_t = 256)]
    grid_points: usize,
    /// Output CSV (x,density)
    #[arg(long, default_value = "kde.csv")]
    out: PathBuf,
}

fn cmd_kde(args: KdeArgs) -> Result<()> {
    require_exists(&args.samples, "samples file")?;
    if args.grid_points < 2 {
        return Err(Error::config("kde needs at least 2 grid points"));
    }
    let pred = load_prediction_json(&args.samples)?;
    let n = pred.mask.len();
    if args.region >= n {
        return Err(Error::config(format!(
            "region {} out of range for {n} regions",
            args.region
        )));
    }
    let values: Vec<f64> = pred.samples.iter().map(|s| s[args.region]).collect();
    let bandwidth = match args.bandwidth {
        Some(h) => h,
        None => silverman_bandwidth(&values)?,
    };

    // Grid spans one bandwidth beyond the sample range, which covers the
    // kernel's entire support.
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min) - bandwidth;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + bandwidth;
    let step = (hi - lo) / (args.grid_points - 1) as f64;
    let xs: Vec<f64> = (0..args.grid_points).map(|i| lo + step * i as f64).collect();
    let densities = epanechnikov_kde(&values, bandwidth, &xs)?;
    save_kde_csv(&args.out, &xs, &densities)?;

    let mass: f64 = xs
        .windows(2)
        .zip(densities.windows(2))
        .map(|(x, d)| (x[1] - x[0]) * (d[0] + d[1]) / 2.0)
        .sum();
    println!(
        "kde over {} samples of region {}: bandwidth {:.6}, trapezoid mass {:.4} -> {}",
        values.len(),
        args.region,
        bandwidth,
        mass,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct ScalingArgs {
    /// CSV of points with a header row and two numeric columns (x, y)
    #[arg(long)]
    points: PathBuf,
    /// Output fit JSON {a, b, r2}
    #[arg(long, default_value = "scaling.json")]
    out: PathBuf,
}

fn cmd_scaling(args: ScalingArgs) -> Result<()> {
    require_exists(&args.points, "points file")?;
    let mut reader = csv::Reader::from_path(&args.points)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != 2 {
            return Err(Error::data(format!(
                "{}: row {line} has {} columns, expected 2",
                args.points.display(),
                record.len()
            )));
        }
        let parse = |field: &str, col: usize| -> Result<f64> {
            field.trim().parse().map_err(|_| {
                Error::data(format!(
                    "{}: row {line}, column {col}: '{field}' is not a number",
                    args.points.display()
                ))
            })
        };
        xs.push(parse(&record[0], 1)?);
        ys.push(parse(&record[1], 2)?);
    }
    let fit = fit_scaling_law(&xs, &ys)?;
    save_scaling_json(&args.out, &fit)?;
    println!(
        "fit over {} points: y = {:.6} * exp({:.6} x), r2 {:.6} -> {}",
        xs.len(),
        fit.a,
        fit.b,
        fit.r_squared,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct ClusterArgs {
    /// Trained checkpoint whose region embeddings to cluster
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of clusters
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Random seed for centroid seeding
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iteration cap for Lloyd's algorithm
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Output CSV (region,cluster)
    #[arg(long, default_value = "clusters.csv")]
    out: PathBuf,
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    require_exists(&args.checkpoint, "checkpoint")?;
    let params = load_checkpoint(&args.checkpoint)?;
    let config = params.config();
    let points = params
        .mat(
            &params.layout().region_embed.clone(),
            config.n_regions,
            config.hidden_dim,
        )
        .to_owned();
    let result = kmeans(&points, args.k, args.seed, args.max_iter)?;

    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["region", "cluster"])?;
    for (region, cluster) in result.assignments.iter().enumerate() {
        writer.write_record([region.to_string(), cluster.to_string()])?;
    }
    writer.flush()?;

    println!(
        "clustered {} regions into {} clusters in {} iterations, wcss {:.6} -> {}",
        config.n_regions,
        args.k,
        result.wcss_history.len(),
        result.wcss(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct ProbeArgs {
    /// Reference embeddings JSON used as probe features
    #[arg(long)]
    embeddings: PathBuf,
    /// Ground-truth profile CSV (region_id,<name>) or single-profile matrix JSON
    #[arg(long)]
    truth: PathBuf,
    /// Region split JSON; train and val rows fit the probe, test rows are scored
    #[arg(long)]
    split: PathBuf,
    /// Ridge regularization strength
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    /// Output report JSON
    #[arg(long, default_value = "probe.json")]
    out: PathBuf,
}

/// On-disk probe result: metrics over the test regions plus the
/// predictions themselves.
#[derive(Serialize)]
struct ProbeReport {
    task: String,
    ridge: f64,
    n: usize,
    mae: f64,
    rmse: f64,
    pcc: f64,
    test_regions: Vec<usize>,
    predictions: Vec<f64>,
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    require_exists(&args.embeddings, "embeddings file")?;
    require_exists(&args.truth, "truth file")?;
    require_exists(&args.split, "split file")?;

    let embeddings = ReferenceEmbeddings::load_json(&args.embeddings)?;
    let regions = RegionSet::new(embeddings.rows())?;
    let matrix = load_profiles(&args.truth, &regions)?;
    if matrix.len() != 1 {
        return Err(Error::data(format!(
            "probe takes exactly one truth profile, {} has {}",
            args.truth.display(),
            matrix.len()
        )));
    }
    let truth = matrix.profile(0).values();
    let split = Split::load_json(&args.split, &regions)?;

    let mut train_idx: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    train_idx.sort_unstable();
    let y_train: Vec<f64> = train_idx.iter().map(|&i| truth[i]).collect();
    let predictions =
        linear_probe_baseline(&embeddings, &y_train, &train_idx, &split.test, args.ridge)?;

    let y_test: Vec<f64> = split.test.iter().map(|&i| truth[i]).collect();
    let metrics = evaluate(&predictions, &y_test)?;
    let report = ProbeReport {
        task: "probe".to_string(),
        ridge: args.ridge,
        n: metrics.n,
        mae: metrics.mae,
        rmse: metrics.rmse,
        pcc: metrics.pcc,
        test_regions: split.test.clone(),
        predictions,
    };
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;

    println!(
        "probe on {} test regions: mae {:.6}, rmse {:.6}, pcc {:.6} -> {}",
        metrics.n,
        metrics.mae,
        metrics.rmse,
        metrics.pcc,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args)]
struct GradcheckArgs {
    /// Number of regions
    #[arg(long, default_value_t = 8)]
    regions: usize,
    /// Hidden dimension
    #[arg(long = "dim", default_value_t = 16)]
    hidden_dim: usize,
    /// Encoder layer count
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Attention head count
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Reference embedding dimension; 0 skips the alignment head
    #[arg(long, default_value_t = 4)]
    ref_dim: usize,
    /// Diffusion step count
    #[arg(long = "t-steps", visible_alias = "T", default_value_t = 10)]
    t_steps: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,
    /// Max tolerated relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one analytic gradient first; a healthy checker must then fail
    #[arg(long)]
    corrupt: bool,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if !(args.fd_step.is_finite() && args.fd_step > 0.0) {
        return Err(Error::config("fd_step must be positive"));
    }
    if !(args.tolerance.is_finite() && args.tolerance > 0.0) {
        return Err(Error::config("tolerance must be positive"));
    }
    let config = ModelConfig::new(
        args.regions,
        args.hidden_dim,
        args.layers,
        args.heads,
        args.ref_dim,
        args.t_steps,
    )?;
    let report = gradient_check(config, args.seed, args.fd_step, args.corrupt)?;

    println!("{:<24} {:>14} {:>18} {:>18}", "group", "max rel err", "analytic", "numeric");
    for group in &report.groups {
        println!(
            "{:<24} {:>14.3e} {:>18.9e} {:>18.9e}",
            group.name, group.max_rel_err, group.analytic, group.numeric
        );
    }
    println!(
        "checked {} parameters, max relative error {:.3e}, tolerance {:.1e}",
        report.params_checked, report.max_rel_err, args.tolerance
    );

    if report.passed(args.tolerance) {
        println!("gradient check passed");
        Ok(())
    } else {
        let worst = report.worst_group();
        Err(Error::numerical(format!(
            "gradient check failed: {} has relative error {:.3e} at flat index {}",
            worst.name, worst.max_rel_err, worst.worst_index
        )))
    }
}
