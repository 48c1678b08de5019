//! Property tests over randomly drawn graphs, models, batches and datasets.

use std::ops::Range;

use dtl_core::autodiff::{grad, hvp, Tensor};
use dtl_core::data::{make_gaussian_task, rng_for, subsample, Batch, Dataset, GaussianTaskSpec, SubsampleSpec};
use dtl_core::eval::{auroc, pl_accuracy, PlProtocol};
use dtl_core::gc_engine::{gc_grad_parallel, gc_grad_sequential, Instruments, OpCounters};
use dtl_core::losses::{
    chunk_ranges, cross_entropy, gc_loss_full, gc_loss_stochastic, kd_loss, neg_loss, ngc_loss, ChunkObjective,
    ClassifierObjective, DtlConfig, RetainKind, UnlearnKind,
};
use dtl_core::nn::{HeadSpec, Model, TrainScheme};
use dtl_core::oracle::{fd_gradient, naive_gc_grad};
use dtl_core::pipeline::{agem_update, dispose, pretrain, DisposalData};
use dtl_core::Result;
use proptest::prelude::*;
use rand::Rng;

fn task(classes: usize, dim: usize, per_class: usize, seed: u64) -> (Dataset, Dataset) {
    make_gaussian_task(&GaussianTaskSpec::new("t", classes, dim, per_class, 1.5, seed)).unwrap()
}

fn model(widths: &[usize], classes: usize, seed: u64) -> Model {
    Model::init(widths, &[HeadSpec { task: "t".into(), classes }], seed).unwrap()
}

fn first_rows(ds: &Dataset, n: usize) -> Batch {
    ds.select(&(0..n).collect::<Vec<_>>())
}

fn ce_of(m: &Model, leaves: &[Tensor], b: &Batch) -> Tensor {
    cross_entropy(&m.forward_with(leaves, "t", &m.input(b).unwrap()).unwrap(), &b.labels).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Composite of every differentiable primitive used by the losses.
fn composite(l: &[Tensor]) -> Result<Tensor> {
    let x = l[0].reshape(&[2, 3])?;
    let w = l[1].reshape(&[3, 2])?;
    let h = x.matmul(&w)?.add_bias(&l[2])?;
    let a = h.relu().add(&h.exp().scale(0.1))?;
    let ls = a.log_softmax()?;
    let sm = a.softmax()?;
    let rows = sm.mul(&ls)?.sum_rows()?.broadcast_rows(2)?;
    let g = ls.gather(&[0, 1])?.sum();
    let t = rows.transpose()?.powf(2.0).mean();
    let fill = l[2].sum().fill(&[2])?;
    let d = fill.dot(&l[2])?;
    g.add(&t)?.add(&d)?.add(&a.row_sum_broadcast()?.mean())?.add(&l[2].dot(&l[2])?.mul_scalar(&g)?)
}

fn composite_leaves(vals: &[f64]) -> Vec<Tensor> {
    vec![
        Tensor::param(vals[0..6].to_vec(), &[6]).unwrap(),
        Tensor::param(vals[6..12].to_vec(), &[6]).unwrap(),
        Tensor::param(vals[12..14].to_vec(), &[2]).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradient_matches_fd(vals in proptest::collection::vec(-1.0f64..1.0, 14)) {
        let leaves = composite_leaves(&vals);
        let g = grad(&composite(&leaves).unwrap(), &leaves, false).unwrap().flatten();
        let f = |t: &[f64]| Ok(composite(&composite_leaves(t))?.item());
        let fd = fd_gradient(&f, &vals, 1e-6).unwrap();
        let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        // relu kinks are measure-zero; skip draws landing within the step
        let x = Tensor::constant(vals[0..6].to_vec(), &[2, 3]).unwrap();
        let w = Tensor::constant(vals[6..12].to_vec(), &[3, 2]).unwrap();
        let b = Tensor::constant(vals[12..14].to_vec(), &[2]).unwrap();
        let h = x.matmul(&w).unwrap().add_bias(&b).unwrap();
        prop_assume!(h.data().iter().all(|v| v.abs() > 1e-3));
        prop_assert!(max_abs_diff(&g, &fd) / scale < 1e-6);
    }

    #[test]
    fn second_grad_closes_over_every_primitive(vals in proptest::collection::vec(-1.0f64..1.0, 14)) {
        let leaves = composite_leaves(&vals);
        let v: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin()).collect();
        let hv = hvp(&composite(&leaves).unwrap(), &leaves, &v).unwrap();
        prop_assert!(hv.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gradients_are_deterministic(seed in 0u64..1000) {
        let (train, _) = task(3, 4, 4, seed);
        let m = model(&[4, 6], 3, seed);
        let b = train.all();
        let run = || {
            let l = m.leaves();
            grad(&ce_of(&m, &l, &b), &l, false).unwrap().flatten()
        };
        let (a, c) = (run(), run());
        prop_assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn heads_are_isolated(seed in 0u64..1000) {
        let (train, _) = task(3, 4, 3, seed);
        let mut m = model(&[4, 5], 3, seed);
        m.add_head("other", 2, seed + 1).unwrap();
        let b = train.all();
        let l = m.leaves();
        let g = grad(&ce_of(&m, &l, &b), &l, false).unwrap();
        let (w, bias) = m.head_indices("other").unwrap();
        prop_assert!(g.tensors()[w].data().iter().chain(g.tensors()[bias].data()).all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in 0u64..1000) {
        let (train, _) = task(3, 4, 3, seed);
        let m = model(&[4, 5, 3], 3, seed);
        let bytes = m.to_bytes(&Default::default()).unwrap();
        let (back, _) = Model::from_bytes(&bytes).unwrap();
        let b = train.all();
        let (x, y) = (m.logits("t", &b).unwrap(), back.logits("t", &b).unwrap());
        prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn collision_with_one_sample_per_chunk_is_the_full_loss(seed in 0u64..1000, n in 2usize..7) {
        let (train, _) = task(2, 3, n, seed);
        let m = model(&[3, 4], 2, seed);
        let b = first_rows(&train, n);
        let obj = ClassifierObjective::new(&m, "t", &b);
        let full = gc_loss_full(&obj).unwrap();
        let leaves = obj.leaves();
        let st = gc_loss_stochastic(&obj, &leaves, n).unwrap().item();
        prop_assert!((full - st).abs() <= 1e-10 * full.abs().max(1e-12));
    }

    #[test]
    fn collision_ignores_order_within_chunks(seed in 0u64..1000) {
        let (train, _) = task(2, 3, 6, seed);
        let m = model(&[3, 4], 2, seed);
        let idx: Vec<usize> = (0..12).collect();
        // reverse the order inside each of 3 chunks of 4
        let perm: Vec<usize> = idx.chunks(4).flat_map(|c| c.iter().rev().copied().collect::<Vec<_>>()).collect();
        let (a, b) = (train.select(&idx), train.select(&perm));
        let va = gc_loss_stochastic(&ClassifierObjective::new(&m, "t", &a), &m.leaves(), 3).unwrap().item();
        let vb = gc_loss_stochastic(&ClassifierObjective::new(&m, "t", &b), &m.leaves(), 3).unwrap().item();
        prop_assert!((va - vb).abs() <= 1e-12 * va.abs().max(1.0));
    }

    #[test]
    fn ngc_is_bounded_and_scale_free(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let (train, _) = task(2, 3, 4, seed);
        let m = model(&[3, 4], 2, seed);
        let b = first_rows(&train, 8);
        let obj = ClassifierObjective::new(&m, "t", &b);
        let scaled = Scaled { inner: &obj, factor: scale };
        let l1 = obj.leaves();
        let v = ngc_loss(&obj, &l1, 4).unwrap().item();
        let l2 = scaled.leaves();
        let w = ngc_loss(&scaled, &l2, 4).unwrap().item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - w).abs() < 1e-10);
    }

    #[test]
    fn distillation_vanishes_at_the_teacher(seed in 0u64..1000) {
        let (train, _) = task(3, 4, 3, seed);
        let m = model(&[4, 5], 3, seed);
        let b = train.all();
        let l = m.leaves();
        let student = m.forward_with(&l, "t", &m.input(&b).unwrap()).unwrap();
        let teacher = m.logits("t", &b).unwrap();
        let kd = kd_loss(&student, &teacher).unwrap();
        prop_assert!(kd.item().abs() < 1e-10);
        let g = grad(&kd, &l, false).unwrap().flatten();
        prop_assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn neg_is_negated_cross_entropy(seed in 0u64..1000) {
        let (train, _) = task(3, 4, 3, seed);
        let m = model(&[4, 5], 3, seed);
        let b = train.all();
        let logits = m.logits("t", &b).unwrap();
        let ce = cross_entropy(&logits, &b.labels).unwrap().item();
        prop_assert_eq!(neg_loss(&logits, &b.labels).unwrap().item(), -ce);
    }

    #[test]
    fn engine_paths_agree(seed in 0u64..1000, ci in 0usize..4, ki in 0usize..4) {
        let c = [2usize, 3, 4, 8][ci];
        // workers must divide the chunk count
        let divisors: Vec<usize> = (2..=c).filter(|d| c.is_multiple_of(*d)).collect();
        let k = divisors[ki % divisors.len()];
        let (train, _) = task(3, 5, 8, seed);
        let m = model(&[5, 8, 6], 3, seed);
        let b = first_rows(&train, 24);
        let obj = ClassifierObjective::new(&m, "t", &b);
        let inst = Instruments::default();
        let seq = gc_grad_sequential(&obj, c, &inst).unwrap();
        prop_assert_eq!(inst.counters.snapshot().hvps, c as u64);
        let par = gc_grad_parallel(&obj, c, k, None, &Instruments::default()).unwrap();
        prop_assert!(max_abs_diff(&seq.grad, &par.grad) < 1e-12);
        let naive = naive_gc_grad(&obj, c, &OpCounters::new()).unwrap();
        let norm = naive.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(max_abs_diff(&seq.grad, &naive) / (1.0 + norm) < 1e-8);

        // gathered total is the plain sum of chunk gradients
        let leaves = obj.leaves();
        let mut sum = vec![0.0; seq.total.len()];
        for r in chunk_ranges(24, c).unwrap() {
            let g = grad(&obj.chunk_loss(&leaves, r).unwrap(), &leaves, false).unwrap().flatten();
            sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        prop_assert!(max_abs_diff(&sum, &seq.total) < 1e-14 * (1.0 + norm));
    }

    #[test]
    fn subsampling_composes(seed in 0u64..1000, g1 in 0.2f64..1.0, g2 in 0.2f64..1.0) {
        let (train, test) = task(4, 3, 50, seed);
        let once = subsample(&train, SubsampleSpec { ratio: g1, seed }).unwrap();
        let twice = subsample(&once, SubsampleSpec { ratio: g2, seed: seed + 1 }).unwrap();
        let direct = subsample(&train, SubsampleSpec { ratio: g1 * g2, seed }).unwrap();
        for (a, b) in twice.class_counts().iter().zip(direct.class_counts()) {
            prop_assert!((*a as i64 - b as i64).abs() <= 1);
        }
        prop_assert!(train.row_ids.iter().all(|i| !test.row_ids.contains(i)));
    }

    #[test]
    fn agem_is_idempotent(g in proptest::collection::vec(-1.0f64..1.0, 1..30), seed in 0u64..1000) {
        let mut rng = rng_for(seed, &[]);
        let r: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assume!(r.iter().any(|v| *v != 0.0));
        let once = agem_update(&g, &r).unwrap();
        let twice = agem_update(&once, &r).unwrap();
        prop_assert!(max_abs_diff(&once, &twice) < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        pos in proptest::collection::vec(-5.0f64..5.0, 1..20),
        neg in proptest::collection::vec(-5.0f64..5.0, 1..20),
    ) {
        let f = |v: &[f64]| v.iter().map(|x| x.exp() * 3.0 - 1.0).collect::<Vec<_>>();
        prop_assert!((auroc(&pos, &neg) - auroc(&f(&pos), &f(&neg))).abs() < 1e-12);
    }
}

/// Objective whose every chunk loss is multiplied by a positive constant.
struct Scaled<'a> {
    inner: &'a dyn ChunkObjective,
    factor: f64,
}

impl ChunkObjective for Scaled<'_> {
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn leaves(&self) -> Vec<Tensor> {
        self.inner.leaves()
    }
    fn chunk_loss(&self, leaves: &[Tensor], range: Range<usize>) -> Result<Tensor> {
        Ok(self.inner.chunk_loss(leaves, range)?.scale(self.factor))
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let s = TrainScheme::new(0.1, 10, 4);
    assert_eq!(s.lr_at(0, 100), 0.1);
    assert!(s.lr_at(100, 100) <= 0.1 * 1e-3);
}

#[test]
fn disposal_terms_sum_to_total() {
    let (src, _) = task(3, 4, 16, 1);
    let mut tgt = make_gaussian_task(&GaussianTaskSpec::new("u", 2, 4, 8, 1.5, 2)).unwrap().0;
    tgt.task = "u".into();
    let (mut m, _) = pretrain(&[4, 6], "t", &src, &TrainScheme::new(0.05, 2, 8), 0).unwrap();
    m.add_head("u", 2, 3).unwrap();
    for kind in UnlearnKind::ALL {
        let cfg = DtlConfig::new(0.4, kind, RetainKind::SrcKd);
        let d = DisposalData { source_task: "t", target_task: "u", source: &src, target: &tgt };
        let (_, recs) = dispose(&m, &cfg, &TrainScheme::new(0.01, 1, 8), &d, &Instruments::default()).unwrap();
        assert!(!recs.is_empty());
        for r in recs {
            assert!((r.retain + r.unlearn - r.total).abs() <= 1e-12, "{kind:?}: {r:?}");
        }
    }
}

#[test]
fn piggyback_leaves_base_untouched() {
    let (train, test) = task(3, 4, 10, 4);
    let m = model(&[4, 6], 3, 4);
    let before = m.to_bytes(&Default::default()).unwrap();
    let p = PlProtocol {
        base: &m,
        task: "t",
        train: &train,
        test: &test,
        scheme: TrainScheme::new(0.05, 3, 8),
        fresh_head: false,
        head_seed: 0,
    };
    pl_accuracy(&p).unwrap();
    assert_eq!(before, m.to_bytes(&Default::default()).unwrap());
}
