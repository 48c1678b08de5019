//! Training stages: seeded minibatch SGD for pre-training, fine-tuning and
//! piggyback adaptation; the knowledge-disposal stage; the A-GEM projection;
//! and distillation into a freshly initialized student.

use serde::{Deserialize, Serialize};

use crate::autodiff::grad;
use crate::data::{batch_indices, derive_seed, Batch, Dataset};
use crate::error::{DtlError, Result};
use crate::gc_engine::{gc_grad, Instruments};
use crate::losses::{
    cross_entropy, kd_loss, ngc_loss, retain_loss, unlearn_loss, ChunkObjective, ClassifierObjective,
    DtlBatches, DtlConfig, RelabeledDataset, RetainKind, UnlearnKind,
};
use crate::nn::{HeadSpec, Model, Sgd, TrainScheme};

/// One optimizer step as logged. `retain` and `unlearn` are already weighted
/// by `1 - lambda` and `lambda`; `total` is their sum. Outside disposal the
/// whole loss is reported as `retain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub retain: f64,
    pub unlearn: f64,
    pub total: f64,
    pub lr: f64,
    /// Seconds since the stage started. Kept out of the serialized record so
    /// record files are reproducible bit for bit.
    #[serde(skip)]
    pub wall_time: f64,
}

/// What a divergence check looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guard {
    /// Abort when the loss is non-finite or exceeds 1e6 in magnitude.
    Loss,
    /// Abort when parameters become non-finite or their norm exceeds 1e4
    /// times the initial norm (for losses that are unbounded below).
    ParamNorm,
}

pub const LOSS_LIMIT: f64 = 1e6;
pub const NORM_GROWTH_LIMIT: f64 = 1e4;

pub struct StepTerms {
    pub grad: Vec<f64>,
    pub retain: f64,
    pub unlearn: f64,
}

/// Shared SGD loop: epochs of seeded minibatches over `n` rows.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: &str,
    model: &mut Model,
    scheme: &TrainScheme,
    n: usize,
    drop_last: bool,
    trainable: Option<Vec<bool>>,
    guard: Guard,
    mut step_fn: impl FnMut(&Model, &[usize], usize) -> Result<StepTerms>,
) -> Result<Vec<RunRecord>> {
    scheme.validate()?;
    let per_epoch = if drop_last { n / scheme.batch_size } else { n.div_ceil(scheme.batch_size) };
    if per_epoch == 0 && scheme.epochs > 0 {
        return Err(DtlError::ContractViolation(format!(
            "{stage}: {n} rows give no full batch of {}",
            scheme.batch_size
        )));
    }
    let total_steps = per_epoch * scheme.epochs;
    let mut opt = Sgd::new(scheme, total_steps);
    if let Some(mask) = trainable {
        opt = opt.with_mask(mask);
    }
    let init_norm = model.param_norm();
    let started = std::time::Instant::now();
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..scheme.epochs {
        for idx in batch_indices(n, scheme.batch_size, scheme.seed, epoch, drop_last) {
            let terms = step_fn(model, &idx, step)?;
            let total = terms.retain + terms.unlearn;
            let diverged = |reason: String| DtlError::Diverged {
                stage: stage.to_string(),
                epoch,
                step,
                reason,
            };
            if terms.grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            if guard == Guard::Loss && !(total.abs() <= LOSS_LIMIT) {
                return Err(diverged(format!("loss {total}")));
            }
            let lr = opt.step(model, &terms.grad, step)?;
            if guard == Guard::ParamNorm {
                let norm = model.param_norm();
                if !norm.is_finite() || norm > NORM_GROWTH_LIMIT * init_norm.max(f64::MIN_POSITIVE) {
                    return Err(diverged(format!("parameter norm {norm} from {init_norm}")));
                }
            }
            records.push(RunRecord {
                stage: stage.to_string(),
                epoch,
                step,
                retain: terms.retain,
                unlearn: terms.unlearn,
                total,
                lr,
                wall_time: started.elapsed().as_secs_f64(),
            });
            step += 1;
        }
    }
    Ok(records)
}

/// Cross-entropy training of one head (and the trunk) on a dataset.
pub fn train_ce(
    stage: &str,
    model: &mut Model,
    task: &str,
    data: &Dataset,
    scheme: &TrainScheme,
    trainable: Option<Vec<bool>>,
) -> Result<Vec<RunRecord>> {
    check_task(model, task, data)?;
    run_stage(stage, model, scheme, data.len(), false, trainable, Guard::Loss, |m, idx, _| {
        let b = data.select(idx);
        let leaves = m.leaves();
        let loss = cross_entropy(&m.forward_with(&leaves, task, &m.input(&b)?)?, &b.labels)?;
        Ok(StepTerms {
            grad: grad(&loss, &leaves, false)?.flatten(),
            retain: loss.item(),
            unlearn: 0.0,
        })
    })
}

fn check_task(model: &Model, task: &str, data: &Dataset) -> Result<()> {
    let head = model.head(task)?;
    if head.classes != data.num_classes {
        return Err(DtlError::ContractViolation(format!(
            "head `{task}` has {} classes but the data has {}",
            head.classes, data.num_classes
        )));
    }
    if data.dim != model.input_width() {
        return Err(DtlError::InvalidShape(format!(
            "data width {} but model input width {}",
            data.dim,
            model.input_width()
        )));
    }
    Ok(())
}

/// Fresh model with one head for the source task, trained on it.
pub fn pretrain(widths: &[usize], task: &str, data: &Dataset, scheme: &TrainScheme, seed: u64) -> Result<(Model, Vec<RunRecord>)> {
    let mut model = Model::init(
        widths,
        &[HeadSpec { task: task.to_string(), classes: data.num_classes }],
        seed,
    )?;
    let records = train_ce("pretrain", &mut model, task, data, scheme, None)?;
    Ok((model, records))
}

/// Adds a head for `task` when missing and trains the whole model on it.
pub fn finetune(base: &Model, task: &str, data: &Dataset, scheme: &TrainScheme, head_seed: u64) -> Result<(Model, Vec<RunRecord>)> {
    let mut model = base.clone();
    if !model.has_head(task) {
        model.add_head(task, data.num_classes, head_seed)?;
    }
    let records = train_ce("finetune", &mut model, task, data, scheme, None)?;
    Ok((model, records))
}

/// Retrains only the `task` head, trunk frozen, toward the shifted labels
/// `(y + 1) mod k`, so task accuracy collapses while every trunk feature
/// stays bit-identical.
pub fn fool_head(base: &Model, task: &str, data: &Dataset, scheme: &TrainScheme) -> Result<(Model, Vec<RunRecord>)> {
    check_task(base, task, data)?;
    let mut model = base.clone();
    let (w, b) = model.head_indices(task)?;
    let mask = model.flat_mask(|i| i == w || i == b);
    let k = data.num_classes;
    let records = run_stage("fool-head", &mut model, scheme, data.len(), false, Some(mask), Guard::Loss, |m, idx, _| {
        let batch = data.select(idx);
        let shifted: Vec<usize> = batch.labels.iter().map(|y| (y + 1) % k).collect();
        let leaves = m.leaves();
        let loss = cross_entropy(&m.forward_with(&leaves, task, &m.input(&batch)?)?, &shifted)?;
        Ok(StepTerms {
            grad: grad(&loss, &leaves, false)?.flatten(),
            retain: loss.item(),
            unlearn: 0.0,
        })
    })?;
    Ok((model, records))
}

/// Projects `g` so it does not conflict with `reference`: returned unchanged
/// when `<g, reference> >= 0`, otherwise minus its component along `reference`.
pub fn agem_update(g: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    if g.len() != reference.len() {
        return Err(DtlError::InvalidShape(format!("{} vs {} entries", g.len(), reference.len())));
    }
    let d: f64 = g.iter().zip(reference).map(|(a, b)| a * b).sum();
    if d >= 0.0 {
        return Ok(g.to_vec());
    }
    let rr: f64 = reference.iter().map(|b| b * b).sum();
    if !(rr > 0.0) {
        return Err(DtlError::DegenerateGradient("A-GEM reference gradient is zero".into()));
    }
    let s = d / rr;
    Ok(g.iter().zip(reference).map(|(a, b)| a - s * b).collect())
}

/// Tasks and data bound to a disposal stage.
pub struct DisposalData<'a> {
    pub source_task: &'a str,
    pub target_task: &'a str,
    pub source: &'a Dataset,
    pub target: &'a Dataset,
}

fn scatter(partial: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut it = partial.iter();
    mask.iter()
        .map(|&t| if t { *it.next().expect("mask count") } else { 0.0 })
        .collect()
}

/// Target-data batch for a step, cycling through seeded epochs of the target
/// set independently of the source loader.
fn target_batch(target: &Dataset, batch_size: usize, seed: u64, step: usize, stream: u64) -> Batch {
    let bs = batch_size.min(target.len());
    let per_epoch = target.len() / bs;
    let (epoch, k) = (step / per_epoch, step % per_epoch);
    let idx = batch_indices(target.len(), bs, derive_seed(seed, &[stream]), epoch, true);
    target.select(&idx[k])
}

/// The disposal stage: starting from the transfer-learned model (also the
/// frozen teacher), optimizes `(1 - lambda) * retain + lambda * unlearn`.
/// Collision gradients come from the O(c) engine.
pub fn dispose(
    tl: &Model,
    cfg: &DtlConfig,
    scheme: &TrainScheme,
    data: &DisposalData<'_>,
    inst: &Instruments,
) -> Result<(Model, Vec<RunRecord>)> {
    cfg.validate()?;
    check_task(tl, data.source_task, data.source)?;
    check_task(tl, data.target_task, data.target)?;
    let collision = cfg.unlearn.is_collision();
    if collision && !scheme.batch_size.is_multiple_of(cfg.chunks) {
        return Err(DtlError::Config(format!(
            "batch size {} not divisible by {} chunks",
            scheme.batch_size, cfg.chunks
        )));
    }
    let teacher = tl.clone();
    let mut model = tl.clone();
    let relabeled = (cfg.unlearn == UnlearnKind::Rand).then(|| RelabeledDataset::new(data.source, scheme.seed));
    let (sw, sb) = tl.head_indices(data.source_task)?;
    let registry_mask: Vec<bool> = (0..tl.params.len())
        .map(|i| !(cfg.freeze_source_head && (i == sw || i == sb)))
        .collect();
    let flat_mask = tl.flat_mask(|i| registry_mask[i]);
    let guard = if cfg.unlearn == UnlearnKind::Neg { Guard::ParamNorm } else { Guard::Loss };
    let lam = cfg.lambda;

    let records = run_stage(
        "dispose",
        &mut model,
        scheme,
        data.source.len(),
        collision,
        Some(flat_mask.clone()),
        guard,
        |m, idx, step| {
            if let Some(t) = &inst.trace {
                t.set_step(step as u64);
            }
            let src = data.source.select(idx);
            let tgt = (!cfg.retain.uses_source())
                .then(|| target_batch(data.target, scheme.batch_size, scheme.seed, step, 0x7e7a));
            let batches = DtlBatches {
                source: &src,
                target: tgt.as_ref(),
                relabeled: relabeled.as_ref(),
            };
            let n = m.num_params();
            let mut g = vec![0.0; n];
            let (mut retain, mut unlearn) = (0.0, 0.0);
            if lam < 1.0 {
                let leaves = m.leaves();
                let r = retain_loss(cfg.retain, m, &leaves, &teacher, data.target_task, &batches)?;
                retain = (1.0 - lam) * r.item();
                let gr = grad(&r, &leaves, false)?.flatten();
                g.iter_mut().zip(&gr).for_each(|(a, b)| *a += (1.0 - lam) * b);
            }
            if lam > 0.0 {
                let (value, gu) = if collision {
                    let obj = ClassifierObjective {
                        model: m,
                        task: data.source_task,
                        batch: &src,
                        trainable: Some(&registry_mask),
                    };
                    if cfg.unlearn == UnlearnKind::Gc {
                        let out = gc_grad(&obj, cfg.chunks, cfg.workers, inst)?;
                        (out.value, scatter(&out.grad, &flat_mask))
                    } else {
                        let leaves = obj.leaves();
                        let l = ngc_loss(&obj, &leaves, cfg.chunks)?;
                        (l.item(), scatter(&grad(&l, &leaves, false)?.flatten(), &flat_mask))
                    }
                } else {
                    let leaves = m.leaves();
                    let l = unlearn_loss(cfg.unlearn, cfg.chunks, m, &leaves, data.source_task, &batches)?;
                    (l.item(), grad(&l, &leaves, false)?.flatten())
                };
                unlearn = lam * value;
                g.iter_mut().zip(&gu).for_each(|(a, b)| *a += lam * b);
            }
            if cfg.retain == RetainKind::TgtAGem {
                let rb = target_batch(data.target, scheme.batch_size, scheme.seed, step, 0xa6e3);
                let leaves = m.leaves();
                let l = cross_entropy(&m.forward_with(&leaves, data.target_task, &m.input(&rb)?)?, &rb.labels)?;
                let gr = grad(&l, &leaves, false)?.flatten();
                g = agem_update(&g, &gr)?;
            }
            Ok(StepTerms { grad: g, retain, unlearn })
        },
    )?;
    Ok((model, records))
}

/// Trains a freshly initialized student of the given trunk widths to match
/// the teacher's `task` head on `data` inputs by distillation.
pub fn distill_to_fresh(
    teacher: &Model,
    task: &str,
    student_widths: &[usize],
    data: &Dataset,
    scheme: &TrainScheme,
    seed: u64,
) -> Result<(Model, Vec<RunRecord>)> {
    if student_widths.first() != Some(&teacher.input_width()) {
        return Err(DtlError::ContractViolation("student input width differs from teacher".into()));
    }
    teacher.head(task)?;
    let mut student = Model::init(student_widths, &teacher.heads, seed)?;
    let records = run_stage("distill", &mut student, scheme, data.len(), false, None, Guard::Loss, |m, idx, _| {
        let b = data.select(idx);
        let leaves = m.leaves();
        let s = m.forward_with(&leaves, task, &m.input(&b)?)?;
        let l = kd_loss(&s, &teacher.logits(task, &b)?)?;
        Ok(StepTerms {
            grad: grad(&l, &leaves, false)?.flatten(),
            retain: l.item(),
            unlearn: 0.0,
        })
    })?;
    Ok((student, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gaussian_task, GaussianTaskSpec};
    use crate::nn::Schedule;

    fn scheme(epochs: usize, bs: usize, lr: f64) -> TrainScheme {
        TrainScheme { lr, momentum: 0.9, weight_decay: 1e-4, epochs, batch_size: bs, schedule: Schedule::Cosine, seed: 3 }
    }

    fn tasks() -> (Dataset, Dataset) {
        let (s, _) = make_gaussian_task(&GaussianTaskSpec::new("src", 3, 4, 16, 2.0, 1)).unwrap();
        let (t, _) = make_gaussian_task(&GaussianTaskSpec::new("tgt", 2, 4, 8, 2.0, 2)).unwrap();
        (s, t)
    }

    #[test]
    fn agem_cases() {
        assert_eq!(agem_update(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(agem_update(&[-1.0, 2.0], &[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
        let p = agem_update(&[1.0, -3.0], &[0.5, 1.0]).unwrap();
        assert!(p.iter().zip([0.5, 1.0]).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-12);
        assert_eq!(agem_update(&p, &[0.5, 1.0]).unwrap(), p);
        assert!(matches!(agem_update(&[1.0], &[0.0]), Ok(v) if v == vec![1.0]));
        assert!(agem_update(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (s, _) = tasks();
        let (m, _) = pretrain(&[4, 8], "src", &s, &scheme(1, 8, 0.05), 0).unwrap();
        let mut same = m.clone();
        let rec = train_ce("pretrain", &mut same, "src", &s, &scheme(0, 8, 0.05), None).unwrap();
        assert!(rec.is_empty());
        assert_eq!(same, m);
    }

    #[test]
    fn records_are_ordered_and_reproducible() {
        let (s, t) = tasks();
        let (pre, r1) = pretrain(&[4, 8], "src", &s, &scheme(2, 8, 0.05), 0).unwrap();
        let (pre2, r2) = pretrain(&[4, 8], "src", &s, &scheme(2, 8, 0.05), 0).unwrap();
        assert_eq!(pre, pre2);
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert!(r1.windows(2).all(|w| (w[0].epoch, w[0].step) < (w[1].epoch, w[1].step)));
        let (tl, _) = finetune(&pre, "tgt", &t, &scheme(2, 4, 0.01), 0).unwrap();
        assert!(tl.has_head("tgt") && tl.has_head("src"));
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (s, _) = tasks();
        let err = pretrain(&[4, 8], "src", &s, &scheme(5, 8, 1e6), 0).unwrap_err();
        assert!(matches!(err, DtlError::Diverged { .. }), "{err}");
    }

    #[test]
    fn dispose_components_sum_and_freeze() {
        let (s, t) = tasks();
        let (pre, _) = pretrain(&[4, 8], "src", &s, &scheme(2, 8, 0.05), 0).unwrap();
        let (tl, _) = finetune(&pre, "tgt", &t, &scheme(2, 4, 0.01), 0).unwrap();
        let data = DisposalData { source_task: "src", target_task: "tgt", source: &s, target: &t };
        for unlearn in UnlearnKind::ALL {
            for retain in RetainKind::ALL {
                let mut cfg = DtlConfig::new(0.4, unlearn, retain);
                cfg.freeze_source_head = true;
                let inst = Instruments::default();
                let (m, rec) = dispose(&tl, &cfg, &scheme(1, 8, 0.01), &data, &inst).unwrap();
                assert!(rec.iter().all(|r| (r.retain + r.unlearn - r.total).abs() <= 1e-12));
                let (w, b) = tl.head_indices("src").unwrap();
                assert_eq!(m.params[w], tl.params[w]);
                assert_eq!(m.params[b], tl.params[b]);
                if unlearn == UnlearnKind::Gc {
                    assert_eq!(inst.counters.snapshot().hvps, 4 * rec.len() as u64);
                }
            }
        }
        let cfg = DtlConfig::new(0.4, UnlearnKind::Gc, RetainKind::SrcKd);
        assert!(dispose(&tl, &cfg, &scheme(1, 6, 0.01), &data, &Instruments::default()).is_err());
    }

    #[test]
    fn dispose_with_parallel_workers_matches_sequential() {
        let (s, t) = tasks();
        let (pre, _) = pretrain(&[4, 8], "src", &s, &scheme(1, 8, 0.05), 0).unwrap();
        let (tl, _) = finetune(&pre, "tgt", &t, &scheme(1, 4, 0.01), 0).unwrap();
        let data = DisposalData { source_task: "src", target_task: "tgt", source: &s, target: &t };
        let mut cfg = DtlConfig::new(0.5, UnlearnKind::Gc, RetainKind::SrcKd);
        let (a, _) = dispose(&tl, &cfg, &scheme(1, 8, 0.01), &data, &Instruments::default()).unwrap();
        cfg.workers = 4;
        let (b, _) = dispose(&tl, &cfg, &scheme(1, 8, 0.01), &data, &Instruments::default()).unwrap();
        assert_eq!(a, b);
    }
}
