//! Gradient of the chunked collision loss in O(c) Hessian-vector products.
//!
//! With chunk gradients `g_m` and their detached sum `T`, the loss
//! `(1/P) sum_{m<n} <g_m, g_n>` (`P = c(c-1)/2`) has gradient
//! `(1/P) sum_m H_m (T - g_m)`: one backward-on-backward pass per chunk.
//!
//! [`gc_grad_parallel`] runs the same computation on simulated workers that
//! meet at a gather barrier (chunk gradients in, total out) and a reduce
//! barrier (partial gradients in, fixed summation order).

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Mutex};

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, hvp_from_grads, GradientMap, Tensor};
use crate::error::{DtlError, Result};
use crate::losses::{chunk_ranges, pair_count, ChunkObjective};

/// Operation counters. Each computation takes an explicit instance so
/// concurrent runs do not share counts.
#[derive(Debug, Default)]
pub struct OpCounters {
    forward_passes: AtomicU64,
    reverse_sweeps: AtomicU64,
    hvps: AtomicU64,
    pair_products: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub forward_passes: u64,
    pub reverse_sweeps: u64,
    pub hvps: u64,
    pub pair_products: u64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            forward_passes: self.forward_passes.load(Ordering::SeqCst),
            reverse_sweeps: self.reverse_sweeps.load(Ordering::SeqCst),
            hvps: self.hvps.load(Ordering::SeqCst),
            pair_products: self.pair_products.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.forward_passes.store(0, Ordering::SeqCst);
        self.reverse_sweeps.store(0, Ordering::SeqCst);
        self.hvps.store(0, Ordering::SeqCst);
        self.pair_products.store(0, Ordering::SeqCst);
    }

    pub fn add_forward(&self) {
        self.forward_passes.fetch_add(1, Ordering::SeqCst);
    }
    pub fn add_reverse(&self) {
        self.reverse_sweeps.fetch_add(1, Ordering::SeqCst);
    }
    pub fn add_hvp(&self) {
        self.hvps.fetch_add(1, Ordering::SeqCst);
    }
    pub fn add_pair_product(&self) {
        self.pair_products.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Grad,
    Gather,
    Hvp,
    Reduce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u64,
    pub worker: usize,
    pub phase: Phase,
    pub norm: f64,
}

/// Collects per-step engine events for debugging.
#[derive(Debug, Default)]
pub struct GcTrace {
    step: AtomicU64,
    events: Mutex<Vec<TraceEvent>>,
}

impl GcTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_step(&self, step: u64) {
        self.step.store(step, Ordering::SeqCst);
    }

    fn record(&self, worker: usize, phase: Phase, v: &[f64]) {
        let ev = TraceEvent {
            step: self.step.load(Ordering::SeqCst),
            worker,
            phase,
            norm: norm(v),
        };
        self.events.lock().expect("trace lock").push(ev);
    }

    /// Events sorted by (step, phase, worker); worker threads record out of order.
    pub fn events(&self) -> Vec<TraceEvent> {
        let mut ev = self.events.lock().expect("trace lock").clone();
        ev.sort_by_key(|e| (e.step, e.phase as u8, e.worker));
        ev
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in self.events() {
            serde_json::to_writer(&mut f, &e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Instrumentation shared by one computation.
#[derive(Debug, Default)]
pub struct Instruments {
    pub counters: OpCounters,
    pub trace: Option<GcTrace>,
}

impl Instruments {
    pub fn with_trace() -> Self {
        Instruments {
            counters: OpCounters::new(),
            trace: Some(GcTrace::new()),
        }
    }

    fn record(&self, worker: usize, phase: Phase, v: &[f64]) {
        if let Some(t) = &self.trace {
            t.record(worker, phase, v);
        }
    }
}

/// Summation order for the reduce barrier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReduceSchedule(Vec<usize>);

impl ReduceSchedule {
    pub fn ascending(workers: usize) -> Self {
        ReduceSchedule((0..workers).collect())
    }

    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..order.len()).collect::<Vec<_>>() {
            return Err(DtlError::ContractViolation(format!(
                "reduce order {order:?} is not a permutation of 0..{}",
                order.len()
            )));
        }
        Ok(ReduceSchedule(order))
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }
}

/// A chunk gradient tagged with the chunk it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkGradient {
    pub chunk: usize,
    pub worker: usize,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcOutput {
    /// Gradient of the collision loss w.r.t. the objective's leaves, flat.
    pub grad: Vec<f64>,
    /// Collision loss value.
    pub value: f64,
    /// Gathered sum of chunk gradients.
    pub total: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Left fold starting from the first vector; no `0.0 +` rounding at the start.
fn sum_vectors<'a>(mut it: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc = it.next().expect("at least one vector").to_vec();
    for v in it {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    acc
}

fn minus(total: &[f64], own: &[f64]) -> Vec<f64> {
    total.iter().zip(own).map(|(t, o)| t - o).collect()
}

fn chunk_gradient(
    obj: &dyn ChunkObjective,
    leaves: &[Tensor],
    range: std::ops::Range<usize>,
    inst: &Instruments,
) -> Result<GradientMap> {
    let loss = obj.chunk_loss(leaves, range)?;
    inst.counters.add_forward();
    let g = grad(&loss, leaves, true)?;
    inst.counters.add_reverse();
    Ok(g)
}

fn hvp_term(g: &GradientMap, leaves: &[Tensor], v: &[f64], inst: &Instruments) -> Result<Vec<f64>> {
    let h = hvp_from_grads(g, leaves, v)?;
    inst.counters.add_hvp();
    inst.counters.add_reverse();
    Ok(h)
}

fn value_from(flats: &[&[f64]], total: &[f64], c: usize) -> f64 {
    // sum_{m<n} <g_m, g_n> = ½ sum_m <g_m, T - g_m>
    let s: f64 = flats.iter().map(|g| dot(g, &minus(total, g))).sum();
    0.5 * s / pair_count(c)
}

/// Single-threaded reference: `c` chunk gradients, one gather, `c` HVPs.
pub fn gc_grad_sequential(obj: &dyn ChunkObjective, c: usize, inst: &Instruments) -> Result<GcOutput> {
    let ranges = chunk_ranges(obj.num_samples(), c)?;
    let leaves = obj.leaves();
    let mut grads = Vec::with_capacity(c);
    let mut flats = Vec::with_capacity(c);
    for r in ranges {
        let g = chunk_gradient(obj, &leaves, r, inst)?;
        let f = g.flatten();
        inst.record(0, Phase::Grad, &f);
        grads.push(g);
        flats.push(f);
    }
    let total = sum_vectors(flats.iter().map(Vec::as_slice));
    inst.record(0, Phase::Gather, &total);
    let refs: Vec<&[f64]> = flats.iter().map(Vec::as_slice).collect();
    let value = value_from(&refs, &total, c);
    let mut terms = Vec::with_capacity(c);
    for (g, f) in grads.iter().zip(&flats) {
        let h = hvp_term(g, &leaves, &minus(&total, f), inst)?;
        inst.record(0, Phase::Hvp, &h);
        terms.push(h);
    }
    let mut out = sum_vectors(terms.iter().map(Vec::as_slice));
    let scale = 1.0 / pair_count(c);
    out.iter_mut().for_each(|v| *v *= scale);
    inst.record(0, Phase::Reduce, &out);
    Ok(GcOutput { grad: out, value, total })
}

enum ToCoordinator {
    Chunks(usize, Vec<ChunkGradient>),
    Partial(usize, Vec<f64>),
    Failed(usize, DtlError),
}

/// Simulated data-parallel schedule over `workers` threads; worker `w` owns
/// chunks `w*c/k .. (w+1)*c/k`. Partial gradients are reduced in `schedule`
/// order (ascending worker id by default).
pub fn gc_grad_parallel(
    obj: &dyn ChunkObjective,
    c: usize,
    workers: usize,
    schedule: Option<&ReduceSchedule>,
    inst: &Instruments,
) -> Result<GcOutput> {
    let ranges = chunk_ranges(obj.num_samples(), c)?;
    if workers == 0 || !c.is_multiple_of(workers) {
        return Err(DtlError::ContractViolation(format!(
            "{workers} workers do not divide {c} chunks"
        )));
    }
    let default_schedule = ReduceSchedule::ascending(workers);
    let schedule = schedule.unwrap_or(&default_schedule);
    if schedule.order().len() != workers {
        return Err(DtlError::ContractViolation(format!(
            "reduce schedule covers {} workers, expected {workers}",
            schedule.order().len()
        )));
    }
    let per = c / workers;

    std::thread::scope(|scope| {
        let (to_coord, from_workers) = mpsc::channel::<ToCoordinator>();
        let mut to_workers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx_total, rx_total) = mpsc::channel::<Vec<f64>>();
            to_workers.push(tx_total);
            let to_coord = to_coord.clone();
            let mine = ranges[w * per..(w + 1) * per].to_vec();
            handles.push(scope.spawn(move || {
                let run = || -> Result<()> {
                    // private parameter snapshot
                    let leaves = obj.leaves();
                    let mut grads = Vec::with_capacity(per);
                    let mut sent = Vec::with_capacity(per);
                    for (j, r) in mine.into_iter().enumerate() {
                        let g = chunk_gradient(obj, &leaves, r, inst)?;
                        let f = g.flatten();
                        inst.record(w, Phase::Grad, &f);
                        sent.push(ChunkGradient { chunk: w * per + j, worker: w, grad: f });
                        grads.push(g);
                    }
                    let flats: Vec<Vec<f64>> = sent.iter().map(|s| s.grad.clone()).collect();
                    if to_coord.send(ToCoordinator::Chunks(w, sent)).is_err() {
                        return Ok(());
                    }
                    // gather barrier
                    let Ok(total) = rx_total.recv() else {
                        return Ok(());
                    };
                    let mut terms = Vec::with_capacity(per);
                    for (g, f) in grads.iter().zip(&flats) {
                        let h = hvp_term(g, &leaves, &minus(&total, f), inst)?;
                        inst.record(w, Phase::Hvp, &h);
                        terms.push(h);
                    }
                    let partial = sum_vectors(terms.iter().map(Vec::as_slice));
                    let _ = to_coord.send(ToCoordinator::Partial(w, partial));
                    Ok(())
                };
                if let Err(e) = run() {
                    let _ = to_coord.send(ToCoordinator::Failed(w, e));
                }
            }));
        }
        drop(to_coord);

        let coordinate = |to_workers: &[mpsc::Sender<Vec<f64>>]| -> Result<GcOutput> {
            let mut chunks: Vec<Option<ChunkGradient>> = vec![None; c];
            for _ in 0..workers {
                match from_workers.recv() {
                    Ok(ToCoordinator::Chunks(_, cs)) => {
                        for cg in cs {
                            let i = cg.chunk;
                            chunks[i] = Some(cg);
                        }
                    }
                    Ok(ToCoordinator::Failed(w, e)) => {
                        return Err(DtlError::Aborted(format!("worker {w} failed before gather: {e}")));
                    }
                    Ok(ToCoordinator::Partial(w, _)) => {
                        return Err(DtlError::Aborted(format!("worker {w} skipped the gather barrier")));
                    }
                    Err(_) => return Err(DtlError::Aborted("worker exited before gather".into())),
                }
            }
            let chunks: Vec<ChunkGradient> = chunks.into_iter().map(|c| c.expect("all chunks reported")).collect();
            if chunks.iter().any(|cg| cg.grad.len() != chunks[0].grad.len()) {
                return Err(DtlError::Aborted("workers reported different gradient lengths".into()));
            }
            let total = sum_vectors(chunks.iter().map(|cg| cg.grad.as_slice()));
            inst.record(0, Phase::Gather, &total);
            let refs: Vec<&[f64]> = chunks.iter().map(|cg| cg.grad.as_slice()).collect();
            let value = value_from(&refs, &total, c);
            for tx in to_workers {
                let _ = tx.send(total.clone());
            }

            let mut partials: Vec<Option<Vec<f64>>> = vec![None; workers];
            for _ in 0..workers {
                match from_workers.recv() {
                    Ok(ToCoordinator::Partial(w, p)) => partials[w] = Some(p),
                    Ok(ToCoordinator::Failed(w, e)) => {
                        return Err(DtlError::Aborted(format!("worker {w} failed after gather: {e}")));
                    }
                    Ok(ToCoordinator::Chunks(w, _)) => {
                        return Err(DtlError::Aborted(format!("worker {w} reported chunks twice")));
                    }
                    Err(_) => return Err(DtlError::Aborted("worker exited before reduce".into())),
                }
            }
            // reduce barrier
            let partials: Vec<Vec<f64>> = partials.into_iter().map(|p| p.expect("all partials")).collect();
            let mut out = sum_vectors(schedule.order().iter().map(|&w| partials[w].as_slice()));
            let scale = 1.0 / pair_count(c);
            out.iter_mut().for_each(|v| *v *= scale);
            inst.record(0, Phase::Reduce, &out);
            Ok(GcOutput { grad: out, value, total })
        };
        let result = coordinate(&to_workers);
        // unblock workers still waiting at the gather barrier
        drop(to_workers);
        let mut panicked = false;
        for h in handles {
            panicked |= h.join().is_err();
        }
        if panicked {
            return Err(DtlError::Aborted("worker panicked".into()));
        }
        result
    })
}

/// Dispatches to the sequential path for one worker.
pub fn gc_grad(obj: &dyn ChunkObjective, c: usize, workers: usize, inst: &Instruments) -> Result<GcOutput> {
    if workers <= 1 {
        gc_grad_sequential(obj, c, inst)
    } else {
        gc_grad_parallel(obj, c, workers, None, inst)
    }
}
