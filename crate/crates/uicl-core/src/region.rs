//! Region and profile data model: file ingestion, normalization,
//! train/val/test splitting, and a synthetic-city generator used as ground
//! truth in tests.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;

/// The set of regions a city is partitioned into. Region ids are dense
/// `0..count` and order-stable for the lifetime of the value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    count: usize,
    names: Option<Vec<String>>,
}

impl RegionSet {
    pub fn new(count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::config("a region set needs at least 2 regions"));
        }
        Ok(RegionSet { count, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut set = RegionSet::new(names.len())?;
        set.names = Some(names);
        Ok(set)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.as_ref().and_then(|n| n.get(id)).map(String::as_str)
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.count
    }
}

/// Normalization statistics recorded when a profile is z-scored, kept so the
/// transform can be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// One indicator measured over every region of a city.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    values: Vec<f64>,
    name: String,
    norm: Option<NormStats>,
}

impl Profile {
    /// Wraps raw values. Rejects non-finite entries and vectors shorter than
    /// two regions.
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::data("a profile needs at least 2 regions"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!(
                "profile value at region {i} is not finite"
            )));
        }
        Ok(Profile {
            values,
            name: name.into(),
            norm: None,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Stats recorded by [`Profile::normalize`], if any.
    pub fn norm_stats(&self) -> Option<NormStats> {
        self.norm
    }

    /// Z-scores the profile with population statistics and records the
    /// inversion stats. A constant profile maps to all zeros with the std
    /// recorded as 1, so downstream code never divides by zero.
    pub fn normalize(&self) -> Profile {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self
            .values
            .iter()
            .map(|v| {
                let d = v - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std == 0.0 {
            return Profile {
                values: vec![0.0; self.values.len()],
                name: self.name.clone(),
                norm: Some(NormStats { mean, std: 1.0 }),
            };
        }
        Profile {
            values: self.values.iter().map(|v| (v - mean) / std).collect(),
            name: self.name.clone(),
            norm: Some(NormStats { mean, std }),
        }
    }

    /// Inverts [`Profile::normalize`] using the recorded stats.
    pub fn denormalize(&self) -> Result<Profile> {
        let stats = self
            .norm
            .ok_or_else(|| Error::data("profile has no normalization stats to invert"))?;
        Ok(Profile {
            values: self
                .values
                .iter()
                .map(|v| v * stats.std + stats.mean)
                .collect(),
            name: self.name.clone(),
            norm: None,
        })
    }
}

/// Provenance label attached to each profile in a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    PoiCategory,
    MobilityInflow,
    MobilityOutflow,
    Synthetic,
    Indicator,
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SourceTag::PoiCategory => "poi-category",
            SourceTag::MobilityInflow => "mobility-inflow",
            SourceTag::MobilityOutflow => "mobility-outflow",
            SourceTag::Synthetic => "synthetic",
            SourceTag::Indicator => "indicator",
        };
        f.write_str(s)
    }
}

/// A collection of profiles over one shared region set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMatrix {
    region_count: usize,
    profiles: Vec<Profile>,
    tags: Vec<SourceTag>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    name: String,
    tag: SourceTag,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    regions: usize,
    profiles: Vec<MatrixRecord>,
}

impl ProfileMatrix {
    pub fn new(region_count: usize) -> Result<Self> {
        if region_count < 2 {
            return Err(Error::config("a profile matrix needs at least 2 regions"));
        }
        Ok(ProfileMatrix {
            region_count,
            profiles: Vec::new(),
            tags: Vec::new(),
        })
    }

    pub fn push(&mut self, profile: Profile, tag: SourceTag) -> Result<()> {
        if profile.len() != self.region_count {
            return Err(Error::data(format!(
                "profile '{}' has {} regions, matrix expects {}",
                profile.name(),
                profile.len(),
                self.region_count
            )));
        }
        self.profiles.push(profile);
        self.tags.push(tag);
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profile(&self, i: usize) -> &Profile {
        &self.profiles[i]
    }

    pub fn tag(&self, i: usize) -> SourceTag {
        self.tags[i]
    }

    pub fn profiles(&self) -> &[Profile] {
        &self.profiles
    }

    /// Stacks all profiles into a `profiles x regions` array.
    pub fn to_array(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.profiles.len(), self.region_count));
        for (i, p) in self.profiles.iter().enumerate() {
            for (j, v) in p.values().iter().enumerate() {
                out[[i, j]] = *v;
            }
        }
        out
    }

    /// Serializes to the matrix JSON schema. Normalization stats are not
    /// part of the schema and are dropped; persist raw or normalized values
    /// deliberately.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = MatrixFile {
            regions: self.region_count,
            profiles: self
                .profiles
                .iter()
                .zip(&self.tags)
                .map(|(p, t)| MatrixRecord {
                    name: p.name().to_string(),
                    tag: *t,
                    values: p.values().to_vec(),
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// Loads profiles from a file, dispatching on the extension: `.csv` reads a
/// single-indicator profile, `.json` reads a profile matrix.
pub fn load_profiles(path: impl AsRef<Path>, regions: &RegionSet) -> Result<ProfileMatrix> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("csv") => load_profile_csv(path, regions),
        Some("json") => load_matrix_json(path, regions),
        _ => Err(Error::data(format!(
            "unsupported profile file extension in {}",
            path.display()
        ))),
    }
}

/// Loads profiles like [`load_profiles`] but takes the region count from the
/// file itself: the declared `regions` field for `.json`, the row count for
/// `.csv`.
pub fn load_profiles_auto(path: impl AsRef<Path>) -> Result<ProfileMatrix> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let count = match ext.as_deref() {
        Some("csv") => csv::Reader::from_path(path)?.into_records().count(),
        Some("json") => {
            #[derive(Deserialize)]
            struct Probe {
                regions: usize,
            }
            let probe: Probe = serde_json::from_str(&fs::read_to_string(path)?)?;
            probe.regions
        }
        _ => {
            return Err(Error::data(format!(
                "unsupported profile file extension in {}",
                path.display()
            )))
        }
    };
    let regions = RegionSet::new(count).map_err(|_| {
        Error::data(format!(
            "{}: describes {count} regions, need at least 2",
            path.display()
        ))
    })?;
    load_profiles(path, &regions)
}

fn load_profile_csv(path: &Path, regions: &RegionSet) -> Result<ProfileMatrix> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "region_id" {
        return Err(Error::data(format!(
            "{}: header must be region_id,<indicator_name>",
            path.display()
        )));
    }
    let name = headers[1].to_string();

    let n = regions.count();
    let mut values = vec![0.0f64; n];
    let mut seen = vec![false; n];
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let id: usize = record[0].parse().map_err(|_| {
            Error::data(format!(
                "{}: row {line}, column 1: '{}' is not a region id",
                path.display(),
                &record[0]
            ))
        })?;
        if id >= n {
            return Err(Error::data(format!(
                "{}: row {line}: region id {id} outside 0..{n}",
                path.display()
            )));
        }
        if seen[id] {
            return Err(Error::data(format!(
                "{}: row {line}: duplicate region id {id}",
                path.display()
            )));
        }
        let value: f64 = record[1].parse().map_err(|_| {
            Error::data(format!(
                "{}: row {line}, column 2: '{}' is not a number",
                path.display(),
                &record[1]
            ))
        })?;
        if !value.is_finite() {
            return Err(Error::data(format!(
                "{}: row {line}, column 2: value is not finite",
                path.display()
            )));
        }
        seen[id] = true;
        values[id] = value;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::data(format!(
            "{}: region id {missing} has no row",
            path.display()
        )));
    }

    let mut matrix = ProfileMatrix::new(n)?;
    matrix.push(Profile::new(name, values)?, SourceTag::Indicator)?;
    Ok(matrix)
}

fn load_matrix_json(path: &Path, regions: &RegionSet) -> Result<ProfileMatrix> {
    let text = fs::read_to_string(path)?;
    let file: MatrixFile = serde_json::from_str(&text)?;
    if file.regions != regions.count() {
        return Err(Error::data(format!(
            "{}: file declares {} regions, region set has {}",
            path.display(),
            file.regions,
            regions.count()
        )));
    }
    let mut matrix = ProfileMatrix::new(file.regions)?;
    for (i, record) in file.profiles.into_iter().enumerate() {
        if record.values.len() != file.regions {
            return Err(Error::data(format!(
                "{}: profile {} ('{}') has {} values, expected {}",
                path.display(),
                i,
                record.name,
                record.values.len(),
                file.regions
            )));
        }
        let profile = Profile::new(record.name, record.values).map_err(|e| {
            Error::data(format!("{}: profile {}: {e}", path.display(), i))
        })?;
        matrix.push(profile, record.tag)?;
    }
    Ok(matrix)
}

/// Writes a single profile to the CSV schema, one row per region in id
/// order. Values print in shortest round-trip form, so a save-then-load is
/// bit-identical.
pub fn save_profile_csv(profile: &Profile, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["region_id", profile.name()])?;
    for (id, value) in profile.values().iter().enumerate() {
        writer.write_record([id.to_string(), format!("{value}")])?;
    }
    writer.flush()?;
    Ok(())
}

/// Disjoint train/validation/test region-id lists covering a region set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>, regions: &RegionSet) -> Result<Split> {
        let path = path.as_ref();
        let split: Split = serde_json::from_str(&fs::read_to_string(path)?)?;
        let n = regions.count();
        let mut seen = vec![false; n];
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if *id >= n {
                return Err(Error::data(format!(
                    "{}: region id {id} outside 0..{n}",
                    path.display()
                )));
            }
            if seen[*id] {
                return Err(Error::data(format!(
                    "{}: region id {id} appears in more than one part",
                    path.display()
                )));
            }
            seen[*id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::data(format!(
                "{}: region id {missing} is in no part",
                path.display()
            )));
        }
        Ok(split)
    }
}

/// Randomly partitions region ids into train/val/test with the given
/// fractions. Train and val sizes round to nearest; test takes the
/// remainder, so the three parts always cover the set exactly.
pub fn make_split(regions: &RegionSet, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs_) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs_ > 0.0) {
        return Err(Error::config("split fractions must be positive"));
    }
    if (ft + fv + fs_ - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs_
        )));
    }
    let n = regions.count();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_train + n_val >= n || n_train == 0 || n_val == 0 {
        if n >= 3 {
            return Err(Error::config(format!(
                "fractions ({ft}, {fv}, {fs_}) leave an empty part for {n} regions"
            )));
        }
        return Err(Error::config(
            "cannot split fewer than 3 regions into 3 non-empty parts",
        ));
    }

    let mut ids: Vec<usize> = regions.ids().collect();
    let mut rng = sub_rng(seed, "split", 0);
    ids.shuffle(&mut rng);
    let val_end = n_train + n_val;
    Ok(Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..val_end].to_vec(),
        test: ids[val_end..].to_vec(),
        seed,
    })
}

/// Per-region embeddings from an external source, used as the alignment
/// target during pretraining and as features for the linear-probe baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbeddings {
    matrix: Array2<f64>,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingsFile {
    source: String,
    rows: usize,
    dim: usize,
    matrix: Vec<Vec<f64>>,
}

impl ReferenceEmbeddings {
    /// Wraps an `regions x dim` matrix. Every row must have nonzero norm so
    /// cosine similarity against it is defined.
    pub fn new(matrix: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::data("reference embeddings must be non-empty"));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "reference embedding row {i} has a non-finite value"
                )));
            }
            if row.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(Error::data(format!(
                    "reference embedding row {i} has zero norm"
                )));
            }
        }
        Ok(ReferenceEmbeddings {
            matrix,
            source: source.into(),
        })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = EmbeddingsFile {
            source: self.source.clone(),
            rows: self.rows(),
            dim: self.dim(),
            matrix: self
                .matrix
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<ReferenceEmbeddings> {
        let path = path.as_ref();
        let file: EmbeddingsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.matrix.len() != file.rows {
            return Err(Error::data(format!(
                "{}: file declares {} rows, matrix has {}",
                path.display(),
                file.rows,
                file.matrix.len()
            )));
        }
        let mut matrix = Array2::zeros((file.rows, file.dim));
        for (i, row) in file.matrix.iter().enumerate() {
            if row.len() != file.dim {
                return Err(Error::data(format!(
                    "{}: row {} has {} values, expected {}",
                    path.display(),
                    i,
                    row.len(),
                    file.dim
                )));
            }
            for (j, v) in row.iter().enumerate() {
                matrix[[i, j]] = *v;
            }
        }
        ReferenceEmbeddings::new(matrix, file.source)
    }
}

/// Draws a synthetic city from a linear latent-factor model.
///
/// Region latent factors `Z` (`n_regions x latent_dim`, standard normal,
/// columns centered) generate each profile as `Z w + eps` with per-profile
/// loadings `w` and noise `eps ~ N(0, noise_std^2)`; profiles are then
/// z-scored. Column centering keeps every noiseless profile exactly in the
/// span of `Z` after normalization. `Z` is returned as reference embeddings
/// so alignment has a known-informative target.
pub fn generate_synthetic_city(
    n_regions: usize,
    n_profiles: usize,
    latent_dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(ProfileMatrix, ReferenceEmbeddings)> {
    if n_regions < 2 {
        return Err(Error::config("synthetic city needs at least 2 regions"));
    }
    if n_profiles == 0 {
        return Err(Error::config("synthetic city needs at least 1 profile"));
    }
    if latent_dim == 0 || latent_dim >= n_regions {
        return Err(Error::config(format!(
            "latent_dim must be in 1..n_regions, got {latent_dim} for {n_regions} regions"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::config(format!("noise_std {noise_std} must be >= 0")));
    }

    let mut rng = sub_rng(seed, "city-latent", 0);
    let mut z = Array2::zeros((n_regions, latent_dim));
    for i in 0..n_regions {
        for j in 0..latent_dim {
            z[[i, j]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    for j in 0..latent_dim {
        let mean = z.column(j).sum() / n_regions as f64;
        z.column_mut(j).mapv_inplace(|v| v - mean);
    }

    let mut matrix = ProfileMatrix::new(n_regions)?;
    for p in 0..n_profiles {
        let mut rng = sub_rng(seed, "city-profile", p as u64);
        let w: Vec<f64> = (0..latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let values: Vec<f64> = (0..n_regions)
            .map(|i| {
                let signal: f64 = (0..latent_dim).map(|j| z[[i, j]] * w[j]).sum();
                signal + noise_std * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let profile = Profile::new(format!("synthetic-{p:03}"), values)?.normalize();
        matrix.push(profile, SourceTag::Synthetic)?;
    }

    let embeddings = ReferenceEmbeddings::new(z, "synthetic-latent")?;
    Ok((matrix, embeddings))
}
