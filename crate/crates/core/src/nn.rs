//! MLP classifier with a shared ReLU trunk and one linear head per task,
//! momentum SGD with coupled weight decay, and the checkpoint format.
//!
//! # Checkpoint layout
//!
//! All integers little-endian:
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 8     | magic `DTLCKPT\0`                                    |
//! | 4     | format version, `u32` (currently 1)                  |
//! | 8     | header length `h`, `u64`                             |
//! | h     | UTF-8 JSON header: `widths`, `heads`, `params`, `meta` |
//! | 8 * n | parameter values, `f64`, in registry order           |
//!
//! `params` lists `{name, shape}` for every registry entry; `n` is the sum of
//! their element counts. Trailing bytes are rejected.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{rng_for, Batch};
use crate::error::{DtlError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: String,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Trunk widths `[input, hidden...]` plus task heads. Parameters are kept in a
/// registry: trunk layers first (weight `[in, out]`, then bias), then heads in
/// insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub widths: Vec<usize>,
    pub heads: Vec<HeadSpec>,
    pub params: Vec<Param>,
}

fn task_tag(task: &str) -> u64 {
    // FNV-1a; stable across platforms and releases
    task.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn affine(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> [Param; 2] {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
        .collect();
    [
        Param {
            name: format!("{name}.weight"),
            shape: vec![fan_in, fan_out],
            values: w,
        },
        Param {
            name: format!("{name}.bias"),
            shape: vec![fan_out],
            values: vec![0.0; fan_out],
        },
    ]
}

impl Model {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    /// Each head draws from its own stream keyed by task name, so a head added
    /// later is identical to one created here.
    pub fn init(widths: &[usize], heads: &[HeadSpec], seed: u64) -> Result<Model> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(DtlError::ContractViolation(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        let mut params = Vec::new();
        for (i, win) in widths.windows(2).enumerate() {
            let mut rng = rng_for(seed, &[0x7e0c, i as u64]);
            params.extend(affine(&format!("trunk.{i}"), win[0], win[1], &mut rng));
        }
        let mut model = Model {
            widths: widths.to_vec(),
            heads: Vec::new(),
            params,
        };
        for h in heads {
            model.add_head(&h.task, h.classes, seed)?;
        }
        Ok(model)
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn trunk_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn has_head(&self, task: &str) -> bool {
        self.heads.iter().any(|h| h.task == task)
    }

    pub fn head(&self, task: &str) -> Result<&HeadSpec> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or_else(|| DtlError::MissingHead(task.to_string()))
    }

    pub fn add_head(&mut self, task: &str, classes: usize, seed: u64) -> Result<()> {
        if self.has_head(task) {
            return Err(DtlError::ContractViolation(format!("head `{task}` already exists")));
        }
        if classes < 2 {
            return Err(DtlError::ContractViolation(format!(
                "head `{task}` needs at least 2 classes"
            )));
        }
        let mut rng = rng_for(seed, &[0x4ead, task_tag(task)]);
        self.params.extend(affine(
            &format!("head.{task}"),
            self.feature_width(),
            classes,
            &mut rng,
        ));
        self.heads.push(HeadSpec {
            task: task.to_string(),
            classes,
        });
        Ok(())
    }

    /// Redraws the head of `task` in place.
    pub fn reset_head(&mut self, task: &str, seed: u64) -> Result<()> {
        let classes = self.head(task)?.classes;
        let mut rng = rng_for(seed, &[0x4ead, task_tag(task)]);
        let fresh = affine(&format!("head.{task}"), self.feature_width(), classes, &mut rng);
        let (w, _) = self.head_indices(task)?;
        let [fw, fb] = fresh;
        self.params[w] = fw;
        self.params[w + 1] = fb;
        Ok(())
    }

    /// Registry indices of a head's weight and bias.
    pub fn head_indices(&self, task: &str) -> Result<(usize, usize)> {
        let pos = self
            .heads
            .iter()
            .position(|h| h.task == task)
            .ok_or_else(|| DtlError::MissingHead(task.to_string()))?;
        let w = 2 * self.trunk_layers() + 2 * pos;
        Ok((w, w + 1))
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in &self.params {
            out.extend_from_slice(&p.values);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DtlError::InvalidShape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Per-element mask over the flat parameter vector, true where the entry
    /// belongs to registry entry `i` with `pred(i)`.
    pub fn flat_mask(&self, pred: impl Fn(usize) -> bool) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        for (i, p) in self.params.iter().enumerate() {
            out.extend(std::iter::repeat_n(pred(i), p.numel()));
        }
        out
    }

    /// Fresh trainable leaves, one per registry entry.
    pub fn leaves(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::param(p.values.clone(), &p.shape).expect("registry shape"))
            .collect()
    }

    /// Constant tensors of the current values (no gradient tracking).
    pub fn constants(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::constant(p.values.clone(), &p.shape).expect("registry shape"))
            .collect()
    }

    pub fn input(&self, batch: &Batch) -> Result<Tensor> {
        if batch.dim != self.input_width() {
            return Err(DtlError::InvalidShape(format!(
                "batch width {} but model input width {}",
                batch.dim,
                self.input_width()
            )));
        }
        Tensor::constant(batch.features.clone(), &[batch.len(), batch.dim])
    }

    /// Logits of `task` for input `x`, using `params` (aligned with the
    /// registry) as the parameter values.
    pub fn forward_with(&self, params: &[Tensor], task: &str, x: &Tensor) -> Result<Tensor> {
        if params.len() != self.params.len() {
            return Err(DtlError::InvalidShape(format!(
                "{} parameter tensors for a registry of {}",
                params.len(),
                self.params.len()
            )));
        }
        let (hw, hb) = self.head_indices(task)?;
        if x.shape().len() != 2 || x.shape()[1] != self.input_width() {
            return Err(DtlError::InvalidShape(format!(
                "input shape {:?} for input width {}",
                x.shape(),
                self.input_width()
            )));
        }
        let mut h = x.clone();
        for l in 0..self.trunk_layers() {
            h = h.matmul(&params[2 * l])?.add_bias(&params[2 * l + 1])?.relu();
        }
        h.matmul(&params[hw])?.add_bias(&params[hb])
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, task: &str, batch: &Batch) -> Result<Tensor> {
        self.forward_with(&self.constants(), task, &self.input(batch)?)
    }

    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainScheme {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}

impl TrainScheme {
    /// Momentum 0.9, weight decay 1e-4, cosine schedule, seed 0.
    pub fn new(lr: f64, epochs: usize, batch_size: usize) -> TrainScheme {
        TrainScheme {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs,
            batch_size,
            schedule: default_schedule(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DtlError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Learning rate at `step` of a run lasting `total_steps` steps.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = total_steps.max(1) as f64;
                let s = (step as f64).min(t);
                0.5 * self.lr * (1.0 + (PI * s / t).cos())
            }
        }
    }
}

/// Momentum SGD state for one training stage.
#[derive(Clone, Debug)]
pub struct Sgd {
    scheme: TrainScheme,
    total_steps: usize,
    buffer: Option<Vec<f64>>,
    /// Entries with `false` are left untouched (no decay, no momentum).
    trainable: Option<Vec<bool>>,
}

impl Sgd {
    pub fn new(scheme: &TrainScheme, total_steps: usize) -> Sgd {
        Sgd {
            scheme: scheme.clone(),
            total_steps,
            buffer: None,
            trainable: None,
        }
    }

    pub fn with_mask(mut self, trainable: Vec<bool>) -> Sgd {
        self.trainable = Some(trainable);
        self
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.scheme.lr_at(step, self.total_steps)
    }

    pub fn buffer(&self) -> Option<&[f64]> {
        self.buffer.as_deref()
    }

    /// `d = g + wd * theta`; `buf = d` on the first step, else
    /// `momentum * buf + d`; `theta -= lr(step) * buf`.
    pub fn step(&mut self, model: &mut Model, grads: &[f64], step: usize) -> Result<f64> {
        let n = model.num_params();
        if grads.len() != n {
            return Err(DtlError::InvalidShape(format!(
                "{} gradient entries for {n} parameters",
                grads.len()
            )));
        }
        if let Some(mask) = &self.trainable {
            if mask.len() != n {
                return Err(DtlError::InvalidShape("trainable mask length".into()));
            }
        }
        let lr = self.lr_at(step);
        let mut theta = model.flat();
        let first = self.buffer.is_none();
        let buf = self.buffer.get_or_insert_with(|| vec![0.0; n]);
        let (mom, wd) = (self.scheme.momentum, self.scheme.weight_decay);
        for i in 0..n {
            if let Some(mask) = &self.trainable {
                if !mask[i] {
                    continue;
                }
            }
            let d = grads[i] + wd * theta[i];
            buf[i] = if first { d } else { mom * buf[i] + d };
            theta[i] -= lr * buf[i];
        }
        model.set_flat(&theta)?;
        Ok(lr)
    }
}

/// One momentum-SGD update of `model` at `step` of `total_steps`, with a fresh
/// or continuing buffer held by the caller.
pub fn sgd_step(model: &mut Model, grads: &[f64], opt: &mut Sgd, step: usize) -> Result<f64> {
    opt.step(model, grads, step)
}

const MAGIC: &[u8; 8] = b"DTLCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    widths: Vec<usize>,
    heads: Vec<HeadSpec>,
    params: Vec<ParamHeader>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl Model {
    pub fn to_bytes(&self, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            widths: self.widths.clone(),
            heads: self.heads.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            meta: meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().flat_map(|p| p.values.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Model, BTreeMap<String, String>)> {
        let bad = |m: &str| DtlError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(DtlError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| DtlError::Checkpoint(e.to_string()))?;
        let mut rest = &bytes[20 + hlen..];
        let mut params = Vec::with_capacity(header.params.len());
        for ph in header.params {
            let n: usize = ph.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad("truncated parameter data"));
            }
            let values = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[8 * n..];
            params.push(Param {
                name: ph.name,
                shape: ph.shape,
                values,
            });
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let model = Model {
            widths: header.widths,
            heads: header.heads,
            params,
        };
        model.check_registry()?;
        Ok((model, header.meta))
    }

    fn check_registry(&self) -> Result<()> {
        let mut expect: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, w) in self.widths.windows(2).enumerate() {
            expect.push((format!("trunk.{i}.weight"), vec![w[0], w[1]]));
            expect.push((format!("trunk.{i}.bias"), vec![w[1]]));
        }
        for h in &self.heads {
            expect.push((format!("head.{}.weight", h.task), vec![self.feature_width(), h.classes]));
            expect.push((format!("head.{}.bias", h.task), vec![h.classes]));
        }
        let got: Vec<(String, Vec<usize>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if got != expect {
            return Err(DtlError::Checkpoint(
                "parameter registry does not match layer and head specs".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let bytes = self.to_bytes(meta)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| DtlError::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
