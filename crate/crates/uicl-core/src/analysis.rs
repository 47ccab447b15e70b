//! Evaluation toolkit: error metrics, the composite score, Epanechnikov
//! kernel density estimation, exponential scaling-law fits, k-means over
//! region embeddings, and the closed-form linear-probe baseline.
//!
//! Everything here is pure and deterministic; the only randomness is the
//! seeded k-means++ initialization.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::ReferenceEmbeddings;
use crate::rng::sub_rng;

/// Default ridge strength for [`linear_probe_baseline`].
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// The three error metrics of one evaluation task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean absolute error.
    pub mae: f64,
    /// Root mean squared error. Never below `mae` for the same inputs.
    pub rmse: f64,
    /// Pearson correlation coefficient, in `[-1, 1]`.
    pub pcc: f64,
    /// Number of compared values.
    pub n: usize,
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::data("metric inputs must be nonempty"));
    }
    if pred.len() != truth.len() {
        return Err(Error::data(format!(
            "metric length mismatch: {} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Pearson correlation coefficient. Undefined, and therefore an error,
/// when either vector is constant.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let dp = p - mean_p;
        let dt = t - mean_t;
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Err(Error::numerical(
            "correlation is undefined for a constant input vector",
        ));
    }
    Ok(cov / (var_p.sqrt() * var_t.sqrt()))
}

/// Computes all three metrics at once.
pub fn evaluate(pred: &[f64], truth: &[f64]) -> Result<MetricReport> {
    Ok(MetricReport {
        mae: mae(pred, truth)?,
        rmse: rmse(pred, truth)?,
        pcc: pcc(pred, truth)?,
        n: pred.len(),
    })
}

/// Composite score over several tasks: the sum of MAEs plus the sum of
/// RMSEs minus the sum of PCCs. Lower is better.
pub fn composite_loss(reports: &[MetricReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::data("composite loss requires at least one report"));
    }
    Ok(reports.iter().map(|r| r.mae + r.rmse - r.pcc).sum())
}

/// Bandwidth rule of thumb `h = 1.06 * sigma_hat * n^(-1/5)` with the
/// sample standard deviation. Needs at least two distinct samples.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::data("bandwidth selection needs at least 2 samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(Error::data(
            "bandwidth selection needs non-constant samples",
        ));
    }
    Ok(1.06 * sigma * n.powf(-0.2))
}

/// Kernel density estimate with the Epanechnikov kernel
/// `K(u) = 0.75 (1 - u^2)` on `|u| <= 1`:
/// `f_hat(x) = (1 / (n h)) * sum K((x - s_i) / h)`.
///
/// The estimate is exactly zero outside `[min(s) - h, max(s) + h]`.
pub fn epanechnikov_kde(samples: &[f64], bandwidth: f64, query_points: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::data("kde requires at least one sample"));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::config(format!(
            "kde bandwidth must be positive, got {bandwidth}"
        )));
    }
    let scale = 1.0 / (samples.len() as f64 * bandwidth);
    Ok(query_points
        .iter()
        .map(|&x| {
            let sum: f64 = samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / bandwidth;
                    if u.abs() <= 1.0 {
                        0.75 * (1.0 - u * u)
                    } else {
                        0.0
                    }
                })
                .sum();
            sum * scale
        })
        .collect())
}

/// Parameters of an exponential trend `y = a * e^(b x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Prefactor, always positive.
    pub a: f64,
    /// Exponential rate.
    pub b: f64,
    /// Coefficient of determination in log space, at most 1.
    #[serde(rename = "r2")]
    pub r_squared: f64,
}

/// Least-squares fit of `log y = log a + b x`, the linearized form of
/// `y = a e^(b x)`. `r_squared` is computed in log space. Constant `y`
/// data fits exactly with a zero rate.
pub fn fit_scaling_law(x: &[f64], y: &[f64]) -> Result<ScalingFit> {
    if x.len() != y.len() {
        return Err(Error::data(format!(
            "scaling fit length mismatch: {} x values vs {} y values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::data("scaling fit requires at least 3 points"));
    }
    if let Some(i) = y.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::data(format!(
            "scaling fit requires positive y values, got {} at index {i}",
            y[i]
        )));
    }
    let n = x.len() as f64;
    let ln_y: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_ln = ln_y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mean_x) * (v - mean_x)).sum();
    let sst: f64 = ln_y.iter().map(|v| (v - mean_ln) * (v - mean_ln)).sum();
    if sst == 0.0 {
        // Constant y: the flat line reproduces the data exactly.
        return Ok(ScalingFit { a: y[0], b: 0.0, r_squared: 1.0 });
    }
    if sxx == 0.0 {
        return Err(Error::data(
            "scaling fit requires at least two distinct x values",
        ));
    }
    let sxy: f64 = x.iter().zip(&ln_y).map(|(xi, li)| (xi - mean_x) * (li - mean_ln)).sum();
    let b = sxy / sxx;
    let ln_a = mean_ln - b * mean_x;
    let ss_res: f64 = x
        .iter()
        .zip(&ln_y)
        .map(|(xi, li)| {
            let r = li - (ln_a + b * xi);
            r * r
        })
        .sum();
    Ok(ScalingFit { a: ln_a.exp(), b, r_squared: 1.0 - ss_res / sst })
}

/// Output of [`kmeans`]: cluster indices for every point, the final
/// centroids, and the within-cluster sum of squares after each Lloyd
/// iteration.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index of every input point.
    pub assignments: Vec<usize>,
    /// Final centroids, one row per cluster.
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares after each iteration; never
    /// increasing.
    pub wcss_history: Vec<f64>,
}

impl KMeansResult {
    /// Final within-cluster sum of squares.
    pub fn wcss(&self) -> f64 {
        *self.wcss_history.last().expect("at least one iteration")
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks initial centroids with k-means++: the first uniformly, each
/// next with probability proportional to the squared distance from the
/// nearest centroid chosen so far.
fn seed_centroids(points: &ArrayView2<'_, f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = points.nrows();
    let mut rng = sub_rng(seed, "kmeans", 0);
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));

    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, d) in best.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            // All points coincide with chosen centroids; any point works.
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < *b {
                *b = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when the assignments reach a fixpoint or after `max_iter`
/// iterations. Ties in distance go to the lower cluster index. A cluster
/// left empty after an update is re-seeded at the point farthest from
/// its current centroid, which keeps the run deterministic.
pub fn kmeans(
    points: &Array2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::config("kmeans requires at least one cluster"));
    }
    if k > n {
        return Err(Error::config(format!(
            "kmeans asked for {k} clusters but only {n} points"
        )));
    }
    if max_iter == 0 {
        return Err(Error::config("kmeans requires at least one iteration"));
    }
    if let Some(bad) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!(
            "kmeans input contains a non-finite value at flat index {bad}"
        )));
    }

    let view = points.view();
    let mut centroids = seed_centroids(&view, k, seed);
    let mut assignments = vec![0usize; n];
    let mut wcss_history = Vec::new();

    for _ in 0..max_iter {
        // Assignment step.
        let mut changed = false;
        let mut wcss = 0.0;
        for i in 0..n {
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            wcss += best_d;
            if assignments[i] != best_c {
                assignments[i] = best_c;
                changed = true;
            }
        }
        let first_iteration = wcss_history.is_empty();
        wcss_history.push(wcss);
        if !changed && !first_iteration {
            break;
        }

        // Update step.
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, points.ncols()));
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            sums.row_mut(c).scaled_add(1.0, &points.row(i));
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Re-seed an empty cluster at the point farthest from its
                // assigned centroid (lowest index on ties).
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(points.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).expect("finite distances").then(b.cmp(&a))
                    })
                    .expect("nonempty points");
                centroids.row_mut(c).assign(&points.row(far));
            }
        }
    }

    Ok(KMeansResult { assignments, centroids, wcss_history })
}

/// Closed-form ridge-regularized linear probe.
///
/// Fits `y ~ intercept + embeddings * w` on the training rows by
/// centering both sides with training means and solving the normal
/// equations `(Xc' Xc + ridge I) w = Xc' yc` with a Cholesky
/// factorization, then predicts the test rows. With `ridge = 0` a
/// rank-deficient design is reported as an error.
pub fn linear_probe_baseline(
    embeddings: &ReferenceEmbeddings,
    y_train: &[f64],
    train_idx: &[usize],
    test_idx: &[usize],
    ridge: f64,
) -> Result<Vec<f64>> {
    let x = embeddings.matrix();
    let n = x.nrows();
    let d = x.ncols();
    if train_idx.is_empty() {
        return Err(Error::config("linear probe requires at least one training row"));
    }
    if test_idx.is_empty() {
        return Err(Error::config("linear probe requires at least one test row"));
    }
    if y_train.len() != train_idx.len() {
        return Err(Error::config(format!(
            "linear probe got {} targets for {} training rows",
            y_train.len(),
            train_idx.len()
        )));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::config(format!("ridge must be non-negative, got {ridge}")));
    }
    for &i in train_idx.iter().chain(test_idx) {
        if i >= n {
            return Err(Error::config(format!(
                "probe index {i} out of range for {n} embedding rows"
            )));
        }
    }
    if train_idx.iter().any(|i| test_idx.contains(i)) {
        return Err(Error::config("probe train and test indices overlap"));
    }

    let m = train_idx.len() as f64;
    let mut x_mean = Array1::<f64>::zeros(d);
    for &i in train_idx {
        x_mean.scaled_add(1.0, &x.row(i));
    }
    x_mean /= m;
    let y_mean = y_train.iter().sum::<f64>() / m;

    // Normal equations on centered data.
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for (&i, &yi) in train_idx.iter().zip(y_train) {
        let xc: Vec<f64> = x.row(i).iter().zip(&x_mean).map(|(v, mu)| v - mu).collect();
        let yc = yi - y_mean;
        for a in 0..d {
            rhs[a] += xc[a] * yc;
            for b in 0..d {
                gram[(a, b)] += xc[a] * xc[b];
            }
        }
    }
    for a in 0..d {
        gram[(a, a)] += ridge;
    }

    let weights = match Cholesky::new(gram) {
        Some(chol) => chol.solve(&rhs),
        None if ridge == 0.0 => {
            return Err(Error::numerical(
                "probe design matrix is singular with ridge = 0; rerun with ridge > 0",
            ));
        }
        None => {
            return Err(Error::numerical(
                "probe normal equations are not positive definite despite ridge > 0",
            ));
        }
    };

    Ok(test_idx
        .iter()
        .map(|&i| {
            let row = x.row(i);
            let xc = row.iter().zip(&x_mean).map(|(v, mu)| v - mu);
            y_mean + xc.zip(weights.iter()).map(|(a, w)| a * w).sum::<f64>()
        })
        .collect())
}

/// Metric report JSON shape: the report plus the task it scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    /// Task or profile name the metrics belong to.
    pub task: String,
    pub mae: f64,
    pub rmse: f64,
    pub pcc: f64,
    pub n: usize,
}

impl TaskReport {
    pub fn new(task: impl Into<String>, report: MetricReport) -> Self {
        Self {
            task: task.into(),
            mae: report.mae,
            rmse: report.rmse,
            pcc: report.pcc,
            n: report.n,
        }
    }

    pub fn metrics(&self) -> MetricReport {
        MetricReport { mae: self.mae, rmse: self.rmse, pcc: self.pcc, n: self.n }
    }
}

/// Writes one task's metrics as `{"task", "mae", "rmse", "pcc", "n"}`.
pub fn save_metrics_json(path: impl AsRef<Path>, reports: &[TaskReport]) -> Result<()> {
    let json = match reports {
        [single] => serde_json::to_string_pretty(single)?,
        many => serde_json::to_string_pretty(many)?,
    };
    std::fs::write(path, json)?;
    Ok(())
}

/// Writes a density estimate as `x,density` CSV rows.
pub fn save_kde_csv(path: impl AsRef<Path>, xs: &[f64], densities: &[f64]) -> Result<()> {
    if xs.len() != densities.len() {
        return Err(Error::data(format!(
            "kde csv length mismatch: {} xs vs {} densities",
            xs.len(),
            densities.len()
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,density")?;
    for (x, f) in xs.iter().zip(densities) {
        writeln!(out, "{x},{f}")?;
    }
    out.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
    Ok(())
}

/// Writes a scaling fit as `{"a", "b", "r2"}`.
pub fn save_scaling_json(path: impl AsRef<Path>, fit: &ScalingFit) -> Result<()> {
    let json = serde_json::to_string_pretty(fit)?;
    std::fs::write(path, json)?;
    Ok(())
}
