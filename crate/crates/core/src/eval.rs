//! Readouts: accuracy, piggyback-learning accuracy, threshold membership
//! inference and Hutchinson curvature.
//!
//! Membership scores are oriented so that higher means "more member-like":
//!
//! * `softmax`: largest class probability.
//! * `mentr`: negated modified entropy,
//!   `-( -(1 - p_y) ln p_y - sum_{i != y} p_i ln(1 - p_i) )`.
//! * `loss`: negated per-sample cross-entropy.
//! * `gradnorm`: negated L2 norm of the per-sample parameter gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, hvp_from_grads, Tensor};
use crate::data::{rng_for, Dataset};
use crate::error::{DtlError, Result};
use crate::losses::{cross_entropy, cross_entropy_rows};
use crate::nn::{Model, TrainScheme};
use crate::pipeline::{train_ce, RunRecord};

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(model: &Model, task: &str, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(DtlError::ContractViolation("accuracy of an empty split".into()));
    }
    let logits = model.logits(task, &data.all())?;
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(k)
        .zip(&data.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    // first maximal index
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Piggyback adaptation of a base model to `task`.
#[derive(Clone, Debug)]
pub struct PlProtocol<'a> {
    pub base: &'a Model,
    pub task: &'a str,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub scheme: TrainScheme,
    /// Draw a new head even when the base already has one for `task`.
    pub fresh_head: bool,
    pub head_seed: u64,
}

pub struct PlResult {
    pub accuracy: f64,
    pub model: Model,
    pub records: Vec<RunRecord>,
}

/// Fine-tunes a copy of the base on the piggyback train split and reports
/// test accuracy. An existing head for the task is reused unless
/// `fresh_head` is set.
pub fn pl_accuracy(p: &PlProtocol<'_>) -> Result<PlResult> {
    if p.train.row_ids.iter().any(|i| p.test.row_ids.contains(i)) && p.train.provenance == p.test.provenance {
        return Err(DtlError::ContractViolation("piggyback train and test splits overlap".into()));
    }
    let mut model = p.base.clone();
    if !model.has_head(p.task) {
        model.add_head(p.task, p.train.num_classes, p.head_seed)?;
    } else if p.fresh_head {
        model.reset_head(p.task, p.head_seed)?;
    }
    let records = train_ce("piggyback", &mut model, p.task, p.train, &p.scheme, None)?;
    Ok(PlResult {
        accuracy: accuracy(&model, p.task, p.test)?,
        model,
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiaStrategy {
    Softmax,
    Mentr,
    Loss,
    Gradnorm,
}

impl MiaStrategy {
    pub const ALL: [MiaStrategy; 4] = [Self::Softmax, Self::Mentr, Self::Loss, Self::Gradnorm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Mentr => "mentr",
            Self::Loss => "loss",
            Self::Gradnorm => "gradnorm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaScore {
    pub strategy: MiaStrategy,
    pub members: Vec<f64>,
    pub nonmembers: Vec<f64>,
    pub auroc: f64,
    pub best_accuracy: f64,
}

/// Per-sample membership scores, higher = more member-like.
pub fn membership_scores(model: &Model, task: &str, data: &Dataset, strategy: MiaStrategy) -> Result<Vec<f64>> {
    let b = data.all();
    match strategy {
        MiaStrategy::Gradnorm => (0..data.len())
            .map(|i| {
                let row = b.slice(i..i + 1);
                let leaves = model.leaves();
                let l = cross_entropy(&model.forward_with(&leaves, task, &model.input(&row)?)?, &row.labels)?;
                let g = grad(&l, &leaves, false)?.flatten();
                Ok(-g.iter().map(|v| v * v).sum::<f64>().sqrt())
            })
            .collect(),
        MiaStrategy::Loss => Ok(cross_entropy_rows(&model.logits(task, &b)?, &b.labels)?
            .into_iter()
            .map(|v| -v)
            .collect()),
        MiaStrategy::Softmax | MiaStrategy::Mentr => {
            let p = model.logits(task, &b)?.softmax()?;
            let k = p.shape()[1];
            Ok(p.data()
                .chunks(k)
                .zip(&b.labels)
                .map(|(row, &y)| {
                    if strategy == MiaStrategy::Softmax {
                        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        -modified_entropy(row, y)
                    }
                })
                .collect())
        }
    }
}

/// Modified prediction entropy of a probability row for true label `y`.
pub fn modified_entropy(p: &[f64], y: usize) -> f64 {
    const TINY: f64 = 1e-30;
    let mut h = -(1.0 - p[y]) * p[y].max(TINY).ln();
    for (i, &pi) in p.iter().enumerate() {
        if i != y {
            h -= pi * (1.0 - pi).max(TINY).ln();
        }
    }
    h
}

pub fn mia_scores(model: &Model, task: &str, members: &Dataset, nonmembers: &Dataset, strategy: MiaStrategy) -> Result<MiaScore> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(DtlError::ContractViolation("membership inference needs non-empty splits".into()));
    }
    if members.len() != nonmembers.len() {
        return Err(DtlError::ContractViolation(format!(
            "member/non-member sizes differ: {} vs {}",
            members.len(),
            nonmembers.len()
        )));
    }
    let m = membership_scores(model, task, members, strategy)?;
    let n = membership_scores(model, task, nonmembers, strategy)?;
    Ok(MiaScore {
        strategy,
        auroc: auroc(&m, &n),
        best_accuracy: best_threshold_accuracy(&m, &n),
        members: m,
        nonmembers: n,
    })
}

/// Mann-Whitney estimate of P(member score > non-member score), ties counted
/// one half via averaged ranks.
pub fn auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Best balanced accuracy of the rule "score >= t means member" over all t.
pub fn best_threshold_accuracy(pos: &[f64], neg: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(f64::INFINITY);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    cuts.into_iter()
        .map(|t| {
            let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
            let tn = neg.iter().filter(|&&s| s < t).count() as f64;
            0.5 * (tp / np + tn / nn)
        })
        .fold(0.0, f64::max)
}

/// Hutchinson estimate `(1/P) sum_p vᵀ H v` with Rademacher probes, for a
/// scalar loss built from `leaves`.
pub fn hutchinson_trace(loss: &Tensor, leaves: &[Tensor], probes: usize, seed: u64) -> Result<f64> {
    if probes == 0 {
        return Err(DtlError::ContractViolation("at least one probe is required".into()));
    }
    let n: usize = leaves.iter().map(Tensor::numel).sum();
    let g = grad(loss, leaves, true)?;
    let mut rng = rng_for(seed, &[0x4a7c]);
    let mut acc = 0.0;
    for _ in 0..probes {
        let v: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let hv = hvp_from_grads(&g, leaves, &v)?;
        acc += v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / probes as f64)
}

/// Hutchinson trace of the mean cross-entropy of `task` over `data`.
pub fn hessian_trace(model: &Model, task: &str, data: &Dataset, probes: usize, seed: u64) -> Result<f64> {
    let b = data.all();
    let leaves = model.leaves();
    let loss = cross_entropy(&model.forward_with(&leaves, task, &model.input(&b)?)?, &b.labels)?;
    hutchinson_trace(&loss, &leaves, probes, seed)
}
