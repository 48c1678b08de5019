//! Synthetic classification tasks, class-balanced subsampling, minibatch
//! iteration and CSV ingestion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DtlError, Result};

/// Mixes a base seed with tags into an independent stream seed (splitmix64).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags.iter().chain(std::iter::once(&0x9e37_79b9_7f4a_7c15)) {
        z = z.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Gaussian(GaussianTaskSpec),
    Csv { path: PathBuf },
    Subsample { ratio: f64, seed: u64 },
}

/// Labelled feature matrix (row-major, `len() x dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub split: Split,
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Identity of each row in the generator or source file; disjoint between
    /// the train and test split of one task.
    pub row_ids: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

/// A gathered minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous rows `range` of this batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            dim: self.dim,
            features: self.features[range.start * self.dim..range.end * self.dim].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            indices: self.indices[range].to_vec(),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Batch {
            dim: self.dim,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn all(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.select(&idx)
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize], prov: Provenance) -> Dataset {
        let b = self.select(indices);
        let mut provenance = self.provenance.clone();
        provenance.push(prov);
        Dataset {
            task: self.task.clone(),
            split: self.split,
            dim: self.dim,
            num_classes: self.num_classes,
            features: b.features,
            labels: b.labels,
            row_ids: indices.iter().map(|&i| self.row_ids[i]).collect(),
            provenance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.len() * self.dim {
            return Err(DtlError::InvalidShape(format!(
                "{} feature values for {} rows of width {}",
                self.features.len(),
                self.len(),
                self.dim
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(DtlError::InvalidLabel {
                label: y,
                classes: self.num_classes,
            });
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(DtlError::ContractViolation(format!(
                "non-finite feature in {}",
                self.task
            )));
        }
        if self.split == Split::Train {
            if let Some(c) = self.class_counts().iter().position(|&n| n == 0) {
                return Err(DtlError::ContractViolation(format!(
                    "class {c} missing from train split of {}",
                    self.task
                )));
            }
        }
        Ok(())
    }
}

/// Generator for a Gaussian-cluster classification task.
///
/// Class means live in an `informative_dim`-dimensional subspace: on a regular
/// simplex with pairwise distance `2 * separation` when it fits
/// (`classes <= informative_dim + 1`), otherwise at random directions on the
/// sphere of radius `sqrt(2) * separation`. Points get unit-variance noise in
/// that subspace and `nuisance_scale`-variance noise in the remaining
/// coordinates, and are then rotated by an orthogonal basis drawn from
/// `basis_seed`. Tasks sharing `basis_seed` and `informative_dim` share an
/// input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTaskSpec {
    pub name: String,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    #[serde(default)]
    pub informative_dim: Option<usize>,
    #[serde(default)]
    pub nuisance_scale: f64,
    #[serde(default)]
    pub basis_seed: u64,
    pub seed: u64,
}

impl GaussianTaskSpec {
    pub fn new(name: &str, classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Self {
        GaussianTaskSpec {
            name: name.to_string(),
            classes,
            dim,
            train_per_class: per_class,
            test_per_class: per_class,
            separation,
            informative_dim: None,
            nuisance_scale: 0.0,
            basis_seed: 0,
            seed,
        }
    }
}

fn orthogonal_basis(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, &[0xba5e]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // two Gram-Schmidt passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn class_means(spec: &GaussianTaskSpec, rdim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = spec.classes;
    if k <= rdim + 1 {
        // regular simplex: centred standard basis vectors of R^k, mapped into
        // R^(k-1) by an orthonormal basis of the sum-zero hyperplane
        let hyper = {
            let mut vs: Vec<Vec<f64>> = Vec::new();
            for j in 0..k - 1 {
                let mut v = vec![0.0; k];
                v[j] = 1.0;
                v[j + 1] = -1.0;
                for _ in 0..2 {
                    for b in &vs {
                        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                    }
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                vs.push(v.into_iter().map(|x| x / n).collect());
            }
            vs
        };
        // vertex c: e_c - 1/k; pairwise distance is sqrt(2) before scaling
        let scale = 2.0 * spec.separation / 2f64.sqrt();
        (0..k)
            .map(|c| {
                let mut m = vec![0.0; rdim];
                for (j, b) in hyper.iter().enumerate() {
                    m[j] = scale * b[c];
                }
                m
            })
            .collect()
    } else {
        let radius = 2f64.sqrt() * spec.separation;
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..rdim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| radius * x / n).collect()
            })
            .collect()
    }
}

/// Draws the train and test splits of a Gaussian task.
pub fn make_gaussian_task(spec: &GaussianTaskSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(DtlError::ContractViolation(format!(
            "gaussian task needs k >= 2 and d >= 2, got k={} d={}",
            spec.classes, spec.dim
        )));
    }
    let rdim = spec.informative_dim.unwrap_or(spec.dim);
    if rdim == 0 || rdim > spec.dim {
        return Err(DtlError::ContractViolation(format!(
            "informative_dim {rdim} outside 1..={}",
            spec.dim
        )));
    }
    if spec.train_per_class == 0 {
        return Err(DtlError::ContractViolation("empty train split".into()));
    }
    let basis = orthogonal_basis(spec.dim, spec.basis_seed);
    let mut rng = rng_for(spec.seed, &[0x6a05]);
    let means = class_means(spec, rdim, &mut rng);

    let mut draw = |per_class: usize, split: Split, first_id: usize| {
        let n = per_class * spec.classes;
        let mut features = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                let latent: Vec<f64> = (0..spec.dim)
                    .map(|j| {
                        let z: f64 = rng.sample(StandardNormal);
                        if j < rdim {
                            mean[j] + z
                        } else {
                            spec.nuisance_scale * z
                        }
                    })
                    .collect();
                for i in 0..spec.dim {
                    features.push((0..spec.dim).map(|j| basis[j][i] * latent[j]).sum());
                }
                labels.push(c);
            }
        }
        Dataset {
            task: spec.name.clone(),
            split,
            dim: spec.dim,
            num_classes: spec.classes,
            features,
            labels,
            row_ids: (first_id..first_id + n).collect(),
            provenance: vec![Provenance::Gaussian(spec.clone())],
        }
    };
    let train = draw(spec.train_per_class, Split::Train, 0);
    let test = draw(spec.test_per_class, Split::Test, train.len());
    train.validate()?;
    Ok((train, test))
}

/// Class-balanced random subsampling: keeps `round(ratio * n_c)` rows of each
/// class `c`, drawn without replacement, in their original order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub ratio: f64,
    pub seed: u64,
}

pub fn subsample(ds: &Dataset, spec: SubsampleSpec) -> Result<Dataset> {
    if !(spec.ratio > 0.0 && spec.ratio <= 1.0) {
        return Err(DtlError::ContractViolation(format!(
            "subsample ratio {} outside (0, 1]",
            spec.ratio
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = rng_for(spec.seed, &[0x5ab5]);
    let mut keep = Vec::new();
    for (c, mut idx) in by_class {
        let want = (spec.ratio * idx.len() as f64).round() as usize;
        if want == 0 {
            return Err(DtlError::ContractViolation(format!(
                "ratio {} leaves no samples of class {c} ({} available)",
                spec.ratio,
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..want]);
    }
    keep.sort_unstable();
    Ok(ds.subset(
        &keep,
        Provenance::Subsample {
            ratio: spec.ratio,
            seed: spec.seed,
        },
    ))
}

/// Minibatch index lists for one epoch: a seeded shuffle of `0..n`, cut into
/// `batch_size` pieces. The short tail is dropped when `drop_last` is set.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[0xba7c, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Iterator over the minibatches of one epoch.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> impl Iterator<Item = Batch> + '_ {
    batch_indices(ds.len(), batch_size, seed, epoch, drop_last)
        .into_iter()
        .map(move |idx| ds.select(&idx))
}

/// Numeric table as read from a CSV file, before any relabelling or scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<i64>,
    /// 1-based line number of each row in the file.
    pub lines: Vec<usize>,
}

/// Reads a numeric CSV whose last column is an integer label. A first line
/// that does not parse as numbers is treated as a header.
pub fn read_csv_raw(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e))?;
    let mut table = RawTable {
        dim: 0,
        features: Vec::new(),
        labels: Vec::new(),
        lines: Vec::new(),
    };
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, i + 1, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if table.lines.is_empty() && i == 0 => continue,
            Err(e) => {
                return Err(DtlError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: e.to_string(),
                })
            }
        };
        if values.len() < 2 {
            return Err(DtlError::Parse {
                path: path.to_path_buf(),
                line,
                msg: "need at least one feature and a label".into(),
            });
        }
        let dim = values.len() - 1;
        if table.lines.is_empty() {
            table.dim = dim;
        } else if dim != table.dim {
            return Err(DtlError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {} columns, found {}", table.dim + 1, values.len()),
            });
        }
        let label = values[dim];
        if label.fract() != 0.0 || !label.is_finite() {
            return Err(DtlError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("label {label} is not an integer"),
            });
        }
        if values[..dim].iter().any(|v| !v.is_finite()) {
            return Err(DtlError::Parse {
                path: path.to_path_buf(),
                line,
                msg: "non-finite feature".into(),
            });
        }
        table.features.extend_from_slice(&values[..dim]);
        table.labels.push(label as i64);
        table.lines.push(line);
    }
    if table.lines.is_empty() {
        return Err(DtlError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no data rows".into(),
        });
    }
    Ok(table)
}

fn csv_err(path: &Path, line: usize, e: csv::Error) -> DtlError {
    DtlError::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Per-column affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[f64], dim: usize) -> Standardizer {
        let n = (features.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            var.iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(v, (x, m))| *v += (x - m) * (x - m));
        }
        // constant columns are centred but left unscaled
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, features: &mut [f64]) {
        let dim = self.mean.len();
        for row in features.chunks_mut(dim) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Result of CSV ingestion.
#[derive(Clone, Debug)]
pub struct CsvTask {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub standardizer: Standardizer,
    /// Original label -> contiguous class index, when the file's labels were
    /// not already `0..k`.
    pub relabel: Option<BTreeMap<i64, usize>>,
}

/// Loads a train CSV (and optionally a test CSV), maps labels onto `0..k`
/// and standardizes both splits with the train statistics.
pub fn load_csv(task: &str, train_path: &Path, test_path: Option<&Path>) -> Result<CsvTask> {
    let train_raw = read_csv_raw(train_path)?;
    let test_raw = test_path.map(read_csv_raw).transpose()?;
    if let Some(t) = &test_raw {
        if t.dim != train_raw.dim {
            return Err(DtlError::Parse {
                path: test_path.unwrap().to_path_buf(),
                line: t.lines[0],
                msg: format!("test width {} differs from train width {}", t.dim, train_raw.dim),
            });
        }
    }
    let mut distinct: Vec<i64> = train_raw.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let map: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let contiguous = distinct.iter().enumerate().all(|(i, &l)| l == i as i64);
    let k = distinct.len();

    let standardizer = Standardizer::fit(&train_raw.features, train_raw.dim);
    let build = |raw: &RawTable, split: Split, path: &Path| -> Result<Dataset> {
        let mut features = raw.features.clone();
        standardizer.apply(&mut features);
        let labels = raw
            .labels
            .iter()
            .zip(&raw.lines)
            .map(|(l, &line)| {
                map.get(l).copied().ok_or_else(|| DtlError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("label {l} does not occur in the train split"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            task: task.to_string(),
            split,
            dim: raw.dim,
            num_classes: k,
            features,
            labels,
            row_ids: raw.lines.clone(),
            provenance: vec![Provenance::Csv {
                path: path.to_path_buf(),
            }],
        })
    };
    let train = build(&train_raw, Split::Train, train_path)?;
    let test = match (&test_raw, test_path) {
        (Some(raw), Some(p)) => Some(build(raw, Split::Test, p)?),
        _ => None,
    };
    Ok(CsvTask {
        train,
        test,
        standardizer,
        relabel: (!contiguous).then_some(map),
    })
}
