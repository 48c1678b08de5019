//! Scalar objectives: cross-entropy, distillation, the fooling baselines
//! (random labels, uniform output, negated cross-entropy), gradient-collision
//! losses and their combination into the disposal objective.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, GradientMap, Tensor};
use crate::data::{rng_for, Batch, Dataset};
use crate::error::{DtlError, Result};
use crate::nn::Model;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DtlError::InvalidShape(format!(
            "logits {:?} for {} labels",
            shape,
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(DtlError::InvalidLabel { label: bad, classes: k });
    }
    Ok(k)
}

/// Mean of `-log softmax(logits)[label]` over rows.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(logits, labels)?;
    if labels.is_empty() {
        return Err(DtlError::ContractViolation("cross-entropy of an empty batch".into()));
    }
    Ok(logits.log_softmax()?.gather(labels)?.mean().scale(-1.0))
}

/// Per-row cross-entropy values (no graph).
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(logits
        .detach()
        .log_softmax()?
        .gather(labels)?
        .data()
        .iter()
        .map(|v| -v)
        .collect())
}

/// Mean `KL(teacher || student)` over rows at temperature 1. The teacher is
/// treated as a constant.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() || student_logits.shape().len() != 2 {
        return Err(DtlError::ContractViolation(format!(
            "student logits {:?} vs teacher logits {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let n = student_logits.shape()[0] as f64;
    let t_log = teacher_logits.detach().log_softmax()?;
    let p: Vec<f64> = t_log.data().iter().map(|v| v.exp()).collect();
    // entries with p = 0 contribute nothing; keep them finite
    let logp: Vec<f64> = t_log.data().iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    let shape = student_logits.shape();
    let p = Tensor::constant(p, shape)?;
    let logp = Tensor::constant(logp, shape)?;
    let diff = logp.sub(&student_logits.log_softmax()?)?;
    Ok(p.mul(&diff)?.sum().scale(1.0 / n))
}

/// Mean `KL(U || softmax(logits))` = `-ln k - (1/k) sum_j log q_j`.
pub fn unif_loss(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[0] == 0 {
        return Err(DtlError::InvalidShape(format!("logits {:?}", logits.shape())));
    }
    let (n, k) = (logits.shape()[0] as f64, logits.shape()[1] as f64);
    let s = logits.log_softmax()?.sum().scale(-1.0 / (n * k));
    s.add(&Tensor::scalar(-k.ln()))
}

/// Negated cross-entropy: `mean log P(y|x)`. Unbounded below.
pub fn neg_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(cross_entropy(logits, labels)?.scale(-1.0))
}

/// A dataset's rows paired with labels drawn once, uniformly over its label
/// space. Collisions with the true labels are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledDataset {
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl RelabeledDataset {
    pub fn new(ds: &Dataset, seed: u64) -> RelabeledDataset {
        let mut rng = rng_for(seed, &[0x4a4d]);
        RelabeledDataset {
            labels: (0..ds.len()).map(|_| rng.random_range(0..ds.num_classes)).collect(),
            classes: ds.num_classes,
            seed,
        }
    }

    /// Random labels for the rows of `batch` (its indices refer to the
    /// relabeled dataset).
    pub fn labels_for(&self, batch: &Batch) -> Result<Vec<usize>> {
        batch
            .indices
            .iter()
            .map(|&i| {
                self.labels.get(i).copied().ok_or_else(|| {
                    DtlError::ContractViolation(format!("row {i} not in relabeled dataset"))
                })
            })
            .collect()
    }
}

/// Cross-entropy against the fixed random labels.
pub fn rand_loss(logits: &Tensor, relabeled: &RelabeledDataset, batch: &Batch) -> Result<Tensor> {
    cross_entropy(logits, &relabeled.labels_for(batch)?)
}

/// A loss defined as a mean over samples, evaluated on contiguous sample
/// ranges. The gradient-collision machinery only sees this interface.
pub trait ChunkObjective: Sync {
    fn num_samples(&self) -> usize;

    /// Fresh trainable leaves holding the current parameter values.
    fn leaves(&self) -> Vec<Tensor>;

    /// Mean loss over the samples in `range`, as a function of `leaves`.
    fn chunk_loss(&self, leaves: &[Tensor], range: Range<usize>) -> Result<Tensor>;
}

/// Cross-entropy of one task's head over a batch. Registry entries marked
/// frozen enter as constants and are not part of the leaf set.
pub struct ClassifierObjective<'a> {
    pub model: &'a Model,
    pub task: &'a str,
    pub batch: &'a Batch,
    pub trainable: Option<&'a [bool]>,
}

impl<'a> ClassifierObjective<'a> {
    pub fn new(model: &'a Model, task: &'a str, batch: &'a Batch) -> Self {
        ClassifierObjective { model, task, batch, trainable: None }
    }

    fn is_trainable(&self, i: usize) -> bool {
        self.trainable.is_none_or(|t| t[i])
    }

    /// Full registry parameter list from the trainable leaves.
    pub fn registry_params(&self, leaves: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut it = leaves.iter();
        let out: Vec<Tensor> = self
            .model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if self.is_trainable(i) {
                    it.next().cloned().ok_or_else(|| {
                        DtlError::InvalidShape("too few leaves for the trainable set".into())
                    })
                } else {
                    Tensor::constant(p.values.clone(), &p.shape)
                }
            })
            .collect::<Result<_>>()?;
        if it.next().is_some() {
            return Err(DtlError::InvalidShape("too many leaves for the trainable set".into()));
        }
        Ok(out)
    }
}

impl ChunkObjective for ClassifierObjective<'_> {
    fn num_samples(&self) -> usize {
        self.batch.len()
    }

    fn leaves(&self) -> Vec<Tensor> {
        self.model
            .params
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_trainable(*i))
            .map(|(_, p)| Tensor::param(p.values.clone(), &p.shape).expect("registry shape"))
            .collect()
    }

    fn chunk_loss(&self, leaves: &[Tensor], range: Range<usize>) -> Result<Tensor> {
        let params = self.registry_params(leaves)?;
        let part = self.batch.slice(range);
        let x = self.model.input(&part)?;
        cross_entropy(&self.model.forward_with(&params, self.task, &x)?, &part.labels)
    }
}

/// Linear regression with per-sample loss `½ (wᵀx - y)²`.
pub struct LeastSquares {
    pub weights: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
}

impl ChunkObjective for LeastSquares {
    fn num_samples(&self) -> usize {
        self.ys.len()
    }

    fn leaves(&self) -> Vec<Tensor> {
        vec![Tensor::param(self.weights.clone(), &[self.weights.len()]).expect("vector")]
    }

    fn chunk_loss(&self, leaves: &[Tensor], range: Range<usize>) -> Result<Tensor> {
        let d = self.weights.len();
        let n = range.len();
        let x: Vec<f64> = self.xs[range.clone()].concat();
        let x = Tensor::constant(x, &[n, d])?;
        let y = Tensor::constant(self.ys[range].to_vec(), &[n, 1])?;
        let w = leaves[0].reshape(&[d, 1])?;
        let r = x.matmul(&w)?.sub(&y)?;
        Ok(r.mul(&r)?.sum().scale(0.5 / n as f64))
    }
}

/// Contiguous equal ranges splitting `n` samples into `c` chunks.
pub fn chunk_ranges(n: usize, c: usize) -> Result<Vec<Range<usize>>> {
    if c < 2 {
        return Err(DtlError::ContractViolation(format!("chunk count {c} < 2")));
    }
    if n == 0 || !n.is_multiple_of(c) {
        return Err(DtlError::ContractViolation(format!(
            "batch of {n} samples is not divisible into {c} chunks"
        )));
    }
    let s = n / c;
    Ok((0..c).map(|m| m * s..(m + 1) * s).collect())
}

pub fn pair_count(c: usize) -> f64 {
    (c * (c - 1) / 2) as f64
}

fn map_dot(a: &GradientMap, b: &GradientMap) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        let d = x.dot(y)?;
        acc = Some(match acc {
            None => d,
            Some(s) => s.add(&d)?,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::scalar(0.0)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean pairwise inner product of per-sample gradients over the whole
/// objective. Evaluation only.
pub fn gc_loss_full(obj: &dyn ChunkObjective) -> Result<f64> {
    let n = obj.num_samples();
    if n < 2 {
        return Err(DtlError::ContractViolation(format!("full collision loss needs N >= 2, got {n}")));
    }
    let leaves = obj.leaves();
    let grads = (0..n)
        .map(|i| Ok(grad(&obj.chunk_loss(&leaves, i..i + 1)?, &leaves, false)?.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let mut s = 0.0;
    for m in 0..n {
        for k in m + 1..n {
            s += dot(&grads[m], &grads[k]);
        }
    }
    Ok(s / pair_count(n))
}

fn chunk_grads(obj: &dyn ChunkObjective, leaves: &[Tensor], c: usize) -> Result<Vec<GradientMap>> {
    chunk_ranges(obj.num_samples(), c)?
        .into_iter()
        .map(|r| grad(&obj.chunk_loss(leaves, r)?, leaves, true))
        .collect()
}

/// Mean over chunk pairs `m < n` of `<grad mean-loss_m, grad mean-loss_n>`,
/// as a differentiable scalar of `leaves`.
pub fn gc_loss_stochastic(obj: &dyn ChunkObjective, leaves: &[Tensor], c: usize) -> Result<Tensor> {
    let g = chunk_grads(obj, leaves, c)?;
    let mut acc: Option<Tensor> = None;
    for m in 0..c {
        for n in m + 1..c {
            let d = map_dot(&g[m], &g[n])?;
            acc = Some(match acc {
                None => d,
                Some(s) => s.add(&d)?,
            });
        }
    }
    Ok(acc.expect("c >= 2").scale(1.0 / pair_count(c)))
}

/// Mean pairwise cosine similarity of chunk gradients.
pub fn ngc_loss(obj: &dyn ChunkObjective, leaves: &[Tensor], c: usize) -> Result<Tensor> {
    let g = chunk_grads(obj, leaves, c)?;
    let mut inv_norm = Vec::with_capacity(c);
    for (m, gm) in g.iter().enumerate() {
        let sq = map_dot(gm, gm)?;
        if !(sq.item() > 0.0) {
            return Err(DtlError::DegenerateGradient(format!(
                "chunk {m} has a zero gradient; cosine similarity is undefined"
            )));
        }
        inv_norm.push(sq.powf(-0.5));
    }
    let mut acc: Option<Tensor> = None;
    for m in 0..c {
        for n in m + 1..c {
            let cos = map_dot(&g[m], &g[n])?.mul(&inv_norm[m])?.mul(&inv_norm[n])?;
            acc = Some(match acc {
                None => cos,
                Some(s) => s.add(&cos)?,
            });
        }
    }
    Ok(acc.expect("c >= 2").scale(1.0 / pair_count(c)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnlearnKind {
    Gc,
    Ngc,
    Rand,
    Unif,
    Neg,
}

impl UnlearnKind {
    pub const ALL: [UnlearnKind; 5] = [Self::Gc, Self::Ngc, Self::Rand, Self::Unif, Self::Neg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gc => "gc",
            Self::Ngc => "ngc",
            Self::Rand => "rand",
            Self::Unif => "unif",
            Self::Neg => "neg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DtlError::Config(format!("unknown unlearning loss `{s}`")))
    }

    pub fn is_collision(self) -> bool {
        matches!(self, Self::Gc | Self::Ngc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetainKind {
    SrcKd,
    TgtKd,
    TgtCe,
    TgtAGem,
}

impl RetainKind {
    pub const ALL: [RetainKind; 4] = [Self::SrcKd, Self::TgtKd, Self::TgtCe, Self::TgtAGem];

    pub fn name(self) -> &'static str {
        match self {
            Self::SrcKd => "src-kd",
            Self::TgtKd => "tgt-kd",
            Self::TgtCe => "tgt-ce",
            Self::TgtAGem => "tgt-a-gem",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DtlError::Config(format!("unknown retaining loss `{s}`")))
    }

    /// Whether the retaining batch comes from the source dataset.
    pub fn uses_source(self) -> bool {
        matches!(self, Self::SrcKd)
    }
}

/// Disposal objective: `(1 - lambda) * retain + lambda * unlearn`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtlConfig {
    pub lambda: f64,
    pub unlearn: UnlearnKind,
    pub retain: RetainKind,
    #[serde(default = "default_chunks")]
    pub chunks: usize,
    /// Simulated workers for the collision gradient (1 = sequential path).
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub freeze_source_head: bool,
}

fn default_chunks() -> usize {
    4
}
fn default_workers() -> usize {
    1
}

impl DtlConfig {
    pub fn new(lambda: f64, unlearn: UnlearnKind, retain: RetainKind) -> Self {
        DtlConfig {
            lambda,
            unlearn,
            retain,
            chunks: default_chunks(),
            workers: default_workers(),
            freeze_source_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DtlError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.chunks < 2 {
            return Err(DtlError::Config(format!("chunks {} < 2", self.chunks)));
        }
        if self.workers == 0 || !self.chunks.is_multiple_of(self.workers) {
            return Err(DtlError::Config(format!(
                "workers {} must divide chunks {}",
                self.workers, self.chunks
            )));
        }
        Ok(())
    }
}

/// Batches feeding one disposal step. `source` is always the unlearning
/// batch (and the retaining batch for source distillation).
pub struct DtlBatches<'a> {
    pub source: &'a Batch,
    pub target: Option<&'a Batch>,
    pub relabeled: Option<&'a RelabeledDataset>,
}

pub struct DtlTerms {
    /// `(1 - lambda) * retain`
    pub retain: Tensor,
    /// `lambda * unlearn`
    pub unlearn: Tensor,
    pub total: Tensor,
}

/// Retaining term of the disposal objective through the target head.
pub fn retain_loss(
    kind: RetainKind,
    model: &Model,
    params: &[Tensor],
    teacher: &Model,
    target_task: &str,
    batches: &DtlBatches<'_>,
) -> Result<Tensor> {
    let batch = if kind.uses_source() {
        batches.source
    } else {
        batches.target.ok_or_else(|| {
            DtlError::ContractViolation(format!("{} needs a target batch", kind.name()))
        })?
    };
    let x = model.input(batch)?;
    let logits = model.forward_with(params, target_task, &x)?;
    match kind {
        RetainKind::SrcKd | RetainKind::TgtKd => {
            if teacher.head(target_task)?.classes != model.head(target_task)?.classes {
                return Err(DtlError::ContractViolation("teacher and student head widths differ".into()));
            }
            kd_loss(&logits, &teacher.logits(target_task, batch)?)
        }
        RetainKind::TgtCe | RetainKind::TgtAGem => cross_entropy(&logits, &batch.labels),
    }
}

/// Unlearning term on the source batch through the source head.
pub fn unlearn_loss(
    kind: UnlearnKind,
    chunks: usize,
    model: &Model,
    params: &[Tensor],
    source_task: &str,
    batches: &DtlBatches<'_>,
) -> Result<Tensor> {
    let batch = batches.source;
    match kind {
        UnlearnKind::Gc | UnlearnKind::Ngc => {
            let obj = ClassifierObjective::new(model, source_task, batch);
            let chunk_loss = RegistryObjective { inner: &obj, params };
            if kind == UnlearnKind::Gc {
                gc_loss_stochastic(&chunk_loss, params, chunks)
            } else {
                ngc_loss(&chunk_loss, params, chunks)
            }
        }
        _ => {
            let logits = model.forward_with(params, source_task, &model.input(batch)?)?;
            match kind {
                UnlearnKind::Rand => {
                    let r = batches.relabeled.ok_or_else(|| {
                        DtlError::ContractViolation("rand needs a relabeled source dataset".into())
                    })?;
                    rand_loss(&logits, r, batch)
                }
                UnlearnKind::Unif => unif_loss(&logits),
                _ => neg_loss(&logits, &batch.labels),
            }
        }
    }
}

// Reuses caller-provided registry leaves instead of minting fresh ones.
struct RegistryObjective<'a> {
    inner: &'a ClassifierObjective<'a>,
    params: &'a [Tensor],
}

impl ChunkObjective for RegistryObjective<'_> {
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn leaves(&self) -> Vec<Tensor> {
        self.params.to_vec()
    }
    fn chunk_loss(&self, leaves: &[Tensor], range: Range<usize>) -> Result<Tensor> {
        self.inner.chunk_loss(leaves, range)
    }
}

/// The disposal objective as one differentiable scalar of `params` (the full
/// registry). `lambda = 0` and `lambda = 1` return the bare retaining and
/// unlearning losses.
#[allow(clippy::too_many_arguments)]
pub fn dtl_loss(
    cfg: &DtlConfig,
    model: &Model,
    params: &[Tensor],
    teacher: &Model,
    source_task: &str,
    target_task: &str,
    batches: &DtlBatches<'_>,
) -> Result<DtlTerms> {
    cfg.validate()?;
    let lam = cfg.lambda;
    let zero = Tensor::scalar(0.0);
    let retain = if lam < 1.0 {
        retain_loss(cfg.retain, model, params, teacher, target_task, batches)?.scale(1.0 - lam)
    } else {
        zero.clone()
    };
    let unlearn = if lam > 0.0 {
        unlearn_loss(cfg.unlearn, cfg.chunks, model, params, source_task, batches)?.scale(lam)
    } else {
        zero
    };
    let total = if lam == 0.0 {
        retain.clone()
    } else if lam == 1.0 {
        unlearn.clone()
    } else {
        retain.add(&unlearn)?
    };
    Ok(DtlTerms { retain, unlearn, total })
}
