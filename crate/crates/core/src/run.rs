//! Run configuration, output-directory manifest, stage orchestration, the
//! lambda sweep and report emission.
//!
//! One TOML file drives every stage. Stages find each other's checkpoints by
//! fixed names inside the output directory, and every command records the
//! fully resolved configuration in `manifest.json`, which can itself be passed
//! back as `--config` to reproduce the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, load_csv, make_gaussian_task, subsample, Dataset, GaussianTaskSpec, SubsampleSpec};
use crate::error::{DtlError, Result};
use crate::eval::{accuracy, hessian_trace, mia_scores, pl_accuracy, MiaStrategy, PlProtocol};
use crate::gc_engine::Instruments;
use crate::losses::{DtlConfig, RetainKind, UnlearnKind};
use crate::nn::{HeadSpec, Model, Schedule, TrainScheme};
use crate::pipeline::{dispose, finetune, pretrain, DisposalData, RunRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSource {
    Gaussian(GaussianTaskSpec),
    Csv {
        name: String,
        train: PathBuf,
        test: PathBuf,
    },
}

impl TaskSource {
    pub fn name(&self) -> &str {
        match self {
            TaskSource::Gaussian(g) => &g.name,
            TaskSource::Csv { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden widths of the trunk; the input width comes from the data.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisposeSection {
    pub lambda: f64,
    pub unlearn: UnlearnKind,
    pub retain: RetainKind,
    #[serde(default = "default_chunks")]
    pub chunks: usize,
    #[serde(default = "default_one")]
    pub workers: usize,
    #[serde(default)]
    pub freeze_source_head: bool,
    #[serde(default)]
    pub trace: bool,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
}

fn default_chunks() -> usize {
    4
}
fn default_one() -> usize {
    1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}

impl DisposeSection {
    pub fn dtl(&self) -> DtlConfig {
        DtlConfig {
            lambda: self.lambda,
            unlearn: self.unlearn,
            retain: self.retain,
            chunks: self.chunks,
            workers: self.workers,
            freeze_source_head: self.freeze_source_head,
        }
    }

    pub fn scheme(&self, seed: u64) -> TrainScheme {
        TrainScheme {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiggybackSection {
    /// Source-train subsampling ratios for piggyback training sets.
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub fresh_head: bool,
    pub scheme: TrainScheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_true")]
    pub mia: bool,
    /// Hutchinson probes for the curvature readout; 0 disables it.
    #[serde(default)]
    pub hessian_probes: usize,
}

fn default_true() -> bool {
    true
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { mia: true, hessian_probes: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub unlearn: Vec<UnlearnKind>,
    pub retain: Vec<RetainKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub source: TaskSource,
    pub target: TaskSource,
    /// Fraction of the target train split kept for transfer learning.
    pub target_ratio: f64,
    pub pretrain: TrainScheme,
    pub finetune: TrainScheme,
    pub dispose: DisposeSection,
    pub piggyback: PiggybackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// The built-in Gaussian benchmark: a 10-class source and a 4-class target
/// sharing a 6-dimensional informative subspace of a 16-dimensional input,
/// with the target train split cut to 5%.
pub const DEFAULT_CONFIG: &str = r#"
seed = 0
target_ratio = 0.05

[model]
hidden = [64, 64]

[source]
kind = "gaussian"
name = "src"
classes = 10
dim = 16
train_per_class = 200
test_per_class = 100
separation = 2.83
informative_dim = 6
nuisance_scale = 4.0
basis_seed = 1
seed = 100

[target]
kind = "gaussian"
name = "tgt"
classes = 4
dim = 16
train_per_class = 200
test_per_class = 100
separation = 2.83
informative_dim = 6
nuisance_scale = 4.0
basis_seed = 1
seed = 200

[pretrain]
lr = 0.05
epochs = 30
batch_size = 64

[finetune]
lr = 0.01
epochs = 30
batch_size = 8

[dispose]
lambda = 0.3
unlearn = "gc"
retain = "src-kd"
chunks = 4
lr = 0.01
epochs = 30
batch_size = 64

[piggyback]
ratios = [0.1]

[piggyback.scheme]
lr = 0.01
epochs = 30
batch_size = 16

[eval]
mia = true
hessian_probes = 0

[sweep]
lambdas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
unlearn = ["gc", "rand", "unif", "neg"]
retain = ["src-kd"]
"#;

fn config_err(e: impl std::fmt::Display) -> DtlError {
    DtlError::Config(e.to_string())
}

/// Parses the right-hand side of a `--set KEY=VALUE` override: any TOML value,
/// or a bare string.
fn parse_value(raw: &str) -> serde_json::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).unwrap_or(serde_json::Value::String(raw.into())),
        Err(_) => serde_json::Value::String(raw.to_string()),
    }
}

/// Applies dotted-key overrides to a JSON tree.
pub fn apply_overrides(tree: &mut serde_json::Value, sets: &[(String, String)]) -> Result<()> {
    for (key, raw) in sets {
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(DtlError::Config(format!("bad override key `{key}`")));
        }
        let mut node = &mut *tree;
        for p in &parts[..parts.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| DtlError::Config(format!("`{key}`: `{p}` is not a table")))?;
            node = obj.entry(p.to_string()).or_insert_with(|| serde_json::json!({}));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| DtlError::Config(format!("`{key}` does not address a table entry")))?;
        obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    }
    Ok(())
}

impl RunConfig {
    pub fn default_benchmark() -> RunConfig {
        Self::from_toml_str(DEFAULT_CONFIG, &[]).expect("built-in config parses")
    }

    pub fn from_toml_str(text: &str, sets: &[(String, String)]) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(config_err)?;
        let mut tree = serde_json::to_value(table).map_err(config_err)?;
        apply_overrides(&mut tree, sets)?;
        Self::from_tree(tree)
    }

    fn from_tree(tree: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(tree).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or a `manifest.json` whose embedded config is
    /// reused, then applies overrides.
    pub fn load(path: &Path, sets: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DtlError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_str(&text).map_err(config_err)?;
            let mut tree = serde_json::to_value(&manifest.config)?;
            apply_overrides(&mut tree, sets)?;
            Self::from_tree(tree)
        } else {
            Self::from_toml_str(&text, sets)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.name() == self.target.name() {
            return Err(DtlError::Config("source and target tasks need distinct names".into()));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(DtlError::Config("target_ratio must lie in (0, 1]".into()));
        }
        if self.piggyback.ratios.is_empty() {
            return Err(DtlError::Config("piggyback.ratios is empty".into()));
        }
        for s in [&self.pretrain, &self.finetune, &self.piggyback.scheme] {
            s.validate()?;
        }
        self.dispose.scheme(0).validate()?;
        self.dispose.dtl().validate()?;
        if let Some(sw) = &self.sweep {
            if let Some(l) = sw.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                return Err(DtlError::Config(format!("sweep lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::resolve(self)
    }
}

/// Every random stream of a run, derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds(pub BTreeMap<String, u64>);

impl Seeds {
    fn resolve(cfg: &RunConfig) -> Seeds {
        let s = cfg.seed;
        let mut m = BTreeMap::new();
        let task_seed = |t: &TaskSource, tag: u64| match t {
            TaskSource::Gaussian(g) => (derive_seed(s, &[tag, g.seed]), derive_seed(s, &[2, g.basis_seed])),
            TaskSource::Csv { .. } => (0, 0),
        };
        let (src, src_basis) = task_seed(&cfg.source, 1);
        let (tgt, tgt_basis) = task_seed(&cfg.target, 1);
        m.insert("source_data".into(), src);
        m.insert("source_basis".into(), src_basis);
        m.insert("target_data".into(), tgt);
        m.insert("target_basis".into(), tgt_basis);
        m.insert("target_subsample".into(), derive_seed(s, &[3]));
        m.insert("init".into(), derive_seed(s, &[4]));
        m.insert("pretrain".into(), derive_seed(s, &[5, cfg.pretrain.seed]));
        m.insert("finetune".into(), derive_seed(s, &[6, cfg.finetune.seed]));
        m.insert("target_only".into(), derive_seed(s, &[7, cfg.finetune.seed]));
        m.insert("dispose".into(), derive_seed(s, &[8]));
        m.insert("piggyback".into(), derive_seed(s, &[9, cfg.piggyback.scheme.seed]));
        m.insert("piggyback_subsample".into(), derive_seed(s, &[10]));
        m.insert("mia".into(), derive_seed(s, &[11]));
        m.insert("hessian".into(), derive_seed(s, &[12]));
        Seeds(m)
    }

    pub fn get(&self, k: &str) -> u64 {
        self.0[k]
    }
}

/// Datasets of a run.
pub struct RunData {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    /// Source-train subsets for piggyback training, one per configured ratio.
    pub piggyback_train: Vec<(f64, Dataset)>,
}

fn build_task(t: &TaskSource, seed: u64, basis: u64) -> Result<(Dataset, Dataset)> {
    match t {
        TaskSource::Gaussian(g) => {
            let mut g = g.clone();
            g.seed = seed;
            g.basis_seed = basis;
            make_gaussian_task(&g)
        }
        TaskSource::Csv { name, train, test } => {
            let t = load_csv(name, train, Some(test))?;
            Ok((t.train, t.test.expect("test path given")))
        }
    }
}

impl RunData {
    pub fn build(cfg: &RunConfig) -> Result<RunData> {
        let seeds = cfg.seeds();
        let (source_train, source_test) =
            build_task(&cfg.source, seeds.get("source_data"), seeds.get("source_basis"))?;
        let (target_full, target_test) =
            build_task(&cfg.target, seeds.get("target_data"), seeds.get("target_basis"))?;
        if source_train.dim != target_full.dim {
            return Err(DtlError::Config(format!(
                "source width {} differs from target width {}",
                source_train.dim, target_full.dim
            )));
        }
        let target_train = subsample(
            &target_full,
            SubsampleSpec { ratio: cfg.target_ratio, seed: seeds.get("target_subsample") },
        )?;
        let piggyback_train = cfg
            .piggyback
            .ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let seed = derive_seed(seeds.get("piggyback_subsample"), &[i as u64]);
                Ok((r, subsample(&source_train, SubsampleSpec { ratio: r, seed })?))
            })
            .collect::<Result<_>>()?;
        Ok(RunData { source_train, source_test, target_train, target_test, piggyback_train })
    }
}

/// One evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub metric: String,
    pub dataset: String,
    #[serde(default)]
    pub gamma: Option<f64>,
    pub seed: u64,
    pub value: f64,
}

impl MetricRecord {
    fn key(&self) -> (String, String, String, Option<u64>) {
        (self.model.clone(), self.metric.clone(), self.dataset.clone(), self.gamma.map(f64::to_bits))
    }
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub out_dir: PathBuf,
    pub checkpoints: BTreeMap<String, String>,
    pub metric_files: Vec<String>,
    pub record_files: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const SWEEP: &str = "sweep.jsonl";

/// Output directory bound to one configuration.
pub struct RunDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DtlError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

impl RunDir {
    /// Opens (or creates) an output directory for `cfg`. A directory already
    /// holding a different configuration is rejected.
    pub fn open(dir: &Path, cfg: &RunConfig, config_path: Option<&Path>) -> Result<RunDir> {
        std::fs::create_dir_all(dir)?;
        let mpath = dir.join(MANIFEST);
        let manifest = if mpath.exists() {
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
            if &m.config != cfg {
                return Err(DtlError::Config(format!(
                    "{} was produced by a different configuration",
                    dir.display()
                )));
            }
            m
        } else {
            Manifest {
                config_path: config_path.map(Path::to_path_buf),
                config: cfg.clone(),
                seeds: cfg.seeds(),
                out_dir: dir.to_path_buf(),
                checkpoints: BTreeMap::new(),
                metric_files: Vec::new(),
                record_files: Vec::new(),
            }
        };
        let rd = RunDir { dir: dir.to_path_buf(), manifest };
        rd.save_manifest()?;
        Ok(rd)
    }

    pub fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt"))
    }

    pub fn save_checkpoint(&mut self, stage: &str, model: &Model) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("stage".to_string(), stage.to_string());
        meta.insert("seed".to_string(), self.manifest.config.seed.to_string());
        model.save(&self.checkpoint_path(stage), &meta)?;
        self.manifest.checkpoints.insert(stage.to_string(), format!("{stage}.ckpt"));
        self.save_manifest()
    }

    /// Loads a stage checkpoint; a missing file is an input error.
    pub fn load_checkpoint(&self, stage: &str) -> Result<Model> {
        let p = self.checkpoint_path(stage);
        if !p.exists() {
            return Err(DtlError::Checkpoint(format!(
                "missing {} (run the `{stage}` stage first)",
                p.display()
            )));
        }
        Ok(Model::load(&p)?.0)
    }

    pub fn write_records(&mut self, stage: &str, records: &[RunRecord]) -> Result<()> {
        let name = format!("{stage}.records.jsonl");
        write_jsonl(&self.dir.join(&name), records)?;
        push_unique(&mut self.manifest.record_files, &name);
        self.save_manifest()
    }

    /// Inserts metrics, replacing earlier values with the same
    /// (model, metric, dataset, gamma) key in place.
    pub fn upsert_metrics(&mut self, new: &[MetricRecord]) -> Result<()> {
        let path = self.dir.join(METRICS);
        let mut all: Vec<MetricRecord> = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        for m in new {
            match all.iter_mut().find(|x| x.key() == m.key()) {
                Some(slot) => *slot = m.clone(),
                None => all.push(m.clone()),
            }
        }
        write_jsonl(&path, &all)?;
        push_unique(&mut self.manifest.metric_files, METRICS);
        self.save_manifest()
    }

    pub fn write_sweep(&mut self, rows: &[SweepRow]) -> Result<()> {
        write_jsonl(&self.dir.join(SWEEP), rows)?;
        push_unique(&mut self.manifest.metric_files, SWEEP);
        self.save_manifest()
    }
}

fn input_widths(cfg: &RunConfig, data: &RunData) -> Vec<usize> {
    std::iter::once(data.source_train.dim).chain(cfg.model.hidden.iter().copied()).collect()
}

fn metric(model: &str, metric: &str, ds: &Dataset, gamma: Option<f64>, seed: u64, value: f64) -> MetricRecord {
    MetricRecord {
        model: model.into(),
        metric: metric.into(),
        dataset: format!("{}-{}", ds.task, if ds.split == crate::data::Split::Test { "test" } else { "train" }),
        gamma,
        seed,
        value,
    }
}

/// Random-init reference with both heads.
pub fn scratch_model(cfg: &RunConfig, data: &RunData) -> Result<Model> {
    let heads = [
        HeadSpec { task: data.source_train.task.clone(), classes: data.source_train.num_classes },
        HeadSpec { task: data.target_train.task.clone(), classes: data.target_train.num_classes },
    ];
    Model::init(&input_widths(cfg, data), &heads, cfg.seeds().get("init"))
}

pub fn stage_pretrain(rd: &mut RunDir, data: &RunData) -> Result<Model> {
    let cfg = rd.manifest.config.clone();
    let seeds = cfg.seeds();
    let mut scheme = cfg.pretrain.clone();
    scheme.seed = seeds.get("pretrain");
    let (model, records) = pretrain(&input_widths(&cfg, data), &data.source_train.task, &data.source_train, &scheme, seeds.get("init"))?;
    rd.save_checkpoint("pretrain", &model)?;
    rd.write_records("pretrain", &records)?;
    let acc = accuracy(&model, &data.source_train.task, &data.source_test)?;
    rd.upsert_metrics(&[metric("pre", "acc_s", &data.source_test, None, cfg.seed, acc)])?;
    Ok(model)
}

/// Transfer learning from the pre-trained checkpoint, plus the target-only
/// reference trained from random initialization.
pub fn stage_finetune(rd: &mut RunDir, data: &RunData) -> Result<Model> {
    let cfg = rd.manifest.config.clone();
    let seeds = cfg.seeds();
    let pre = rd.load_checkpoint("pretrain")?;
    let tgt_task = data.target_train.task.clone();
    let src_task = data.source_train.task.clone();
    let mut scheme = cfg.finetune.clone();
    scheme.seed = seeds.get("finetune");
    let (tl, records) = finetune(&pre, &tgt_task, &data.target_train, &scheme, seeds.get("init"))?;
    rd.save_checkpoint("finetune", &tl)?;
    rd.write_records("finetune", &records)?;

    scheme.seed = seeds.get("target_only");
    let (tgt, records) = finetune(&scratch_model(&cfg, data)?, &tgt_task, &data.target_train, &scheme, seeds.get("init"))?;
    rd.save_checkpoint("target_only", &tgt)?;
    rd.write_records("target_only", &records)?;
    rd.upsert_metrics(&[
        metric("tl", "acc_t", &data.target_test, None, cfg.seed, accuracy(&tl, &tgt_task, &data.target_test)?),
        metric("tl", "acc_s", &data.source_test, None, cfg.seed, accuracy(&tl, &src_task, &data.source_test)?),
        metric("tgt", "acc_t", &data.target_test, None, cfg.seed, accuracy(&tgt, &tgt_task, &data.target_test)?),
    ])?;
    Ok(tl)
}

pub fn stage_dispose(rd: &mut RunDir, data: &RunData) -> Result<Model> {
    let cfg = rd.manifest.config.clone();
    let tl = rd.load_checkpoint("finetune")?;
    let inst = if cfg.dispose.trace { Instruments::with_trace() } else { Instruments::default() };
    let (model, records) = dispose_with(&cfg, &tl, data, &cfg.dispose.dtl(), &inst)?;
    rd.save_checkpoint("dispose", &model)?;
    rd.write_records("dispose", &records)?;
    if let Some(t) = &inst.trace {
        t.write_jsonl(&rd.dir.join("gc_trace.jsonl"))?;
    }
    rd.upsert_metrics(&[
        metric("dtl", "acc_t", &data.target_test, None, cfg.seed, accuracy(&model, &data.target_test.task, &data.target_test)?),
        metric("dtl", "acc_s", &data.source_test, None, cfg.seed, accuracy(&model, &data.source_test.task, &data.source_test)?),
    ])?;
    Ok(model)
}

pub fn dispose_with(cfg: &RunConfig, tl: &Model, data: &RunData, dtl: &DtlConfig, inst: &Instruments) -> Result<(Model, Vec<RunRecord>)> {
    let scheme = cfg.dispose.scheme(cfg.seeds().get("dispose"));
    dispose(
        tl,
        dtl,
        &scheme,
        &DisposalData {
            source_task: &data.source_train.task,
            target_task: &data.target_train.task,
            source: &data.source_train,
            target: &data.target_train,
        },
        inst,
    )
}

/// Source-subset piggyback accuracy of `model` at ratio index `i`.
pub fn pl_source(cfg: &RunConfig, data: &RunData, model: &Model, i: usize) -> Result<f64> {
    let seeds = cfg.seeds();
    let mut scheme = cfg.piggyback.scheme.clone();
    scheme.seed = derive_seed(seeds.get("piggyback"), &[i as u64]);
    let p = PlProtocol {
        base: model,
        task: &data.source_train.task,
        train: &data.piggyback_train[i].1,
        test: &data.source_test,
        scheme,
        fresh_head: cfg.piggyback.fresh_head,
        head_seed: seeds.get("init"),
    };
    Ok(pl_accuracy(&p)?.accuracy)
}

/// Piggyback accuracy (per ratio), membership inference and curvature for
/// every checkpoint present in the directory plus the random-init reference.
pub fn stage_piggyback(rd: &mut RunDir, data: &RunData) -> Result<Vec<MetricRecord>> {
    let cfg = rd.manifest.config.clone();
    let seeds = cfg.seeds();
    let mut models: Vec<(String, Model)> = vec![("scratch".into(), scratch_model(&cfg, data)?)];
    for (name, stage) in [("pre", "pretrain"), ("tl", "finetune"), ("tgt", "target_only"), ("dtl", "dispose")] {
        if rd.checkpoint_path(stage).exists() {
            models.push((name.into(), rd.load_checkpoint(stage)?));
        }
    }
    if models.len() == 1 {
        return Err(DtlError::Checkpoint(format!("no stage checkpoints in {}", rd.dir.display())));
    }
    let src = &data.source_train.task;
    let mut out = Vec::new();
    // members: a random train subset as large as the test split
    let members = {
        let n = data.source_test.len().min(data.source_train.len());
        let mut idx: Vec<usize> = (0..data.source_train.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut crate::data::rng_for(seeds.get("mia"), &[]));
        let mut pick = idx[..n].to_vec();
        pick.sort_unstable();
        data.source_train.subset(&pick, crate::data::Provenance::Subsample { ratio: n as f64 / data.source_train.len() as f64, seed: seeds.get("mia") })
    };
    let nonmembers = {
        let n = members.len();
        let idx: Vec<usize> = (0..n).collect();
        data.source_test.subset(&idx, crate::data::Provenance::Subsample { ratio: 1.0, seed: 0 })
    };
    for (name, m) in &models {
        for (i, (gamma, train)) in data.piggyback_train.iter().enumerate() {
            let v = pl_source(&cfg, data, m, i)?;
            let mut r = metric(name, "pl_acc", train, Some(*gamma), cfg.seed, v);
            r.dataset = format!("{}-pl", src);
            out.push(r);
        }
        if cfg.eval.mia && m.has_head(src) {
            for s in MiaStrategy::ALL {
                let score = mia_scores(m, src, &members, &nonmembers, s)?;
                out.push(metric(name, &format!("mia_auroc_{}", s.name()), &data.source_test, None, cfg.seed, score.auroc));
            }
        }
        if cfg.eval.hessian_probes > 0 && m.has_head(src) {
            let tr = hessian_trace(m, src, &data.piggyback_train[0].1, cfg.eval.hessian_probes, seeds.get("hessian"))?;
            out.push(metric(name, "tr_h", &data.piggyback_train[0].1, None, cfg.seed, tr));
        }
    }
    rd.upsert_metrics(&out)?;
    Ok(out)
}

/// Runs every stage in order.
pub fn run_all(rd: &mut RunDir) -> Result<()> {
    let data = RunData::build(&rd.manifest.config)?;
    stage_pretrain(rd, &data)?;
    stage_finetune(rd, &data)?;
    stage_dispose(rd, &data)?;
    stage_piggyback(rd, &data)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub unlearn: UnlearnKind,
    pub retain: RetainKind,
    pub lambda: f64,
    /// `ok`, `diverged` or `degenerate`.
    pub status: String,
    pub acc_t: Option<f64>,
    pub acc_s: Option<f64>,
    pub acc_pl: Option<f64>,
}

/// Disposal plus source-subset piggyback evaluation (first configured ratio)
/// over the lambda grid, for every (retain, unlearn) pair.
pub fn sweep(cfg: &RunConfig, data: &RunData, tl: &Model, grid: &SweepSection) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &retain in &grid.retain {
        for &unlearn in &grid.unlearn {
            for &lambda in &grid.lambdas {
                let mut dtl = cfg.dispose.dtl();
                dtl.lambda = lambda;
                dtl.unlearn = unlearn;
                dtl.retain = retain;
                let row = |status: &str, t, s, p| SweepRow {
                    unlearn,
                    retain,
                    lambda,
                    status: status.into(),
                    acc_t: t,
                    acc_s: s,
                    acc_pl: p,
                };
                rows.push(match dispose_with(cfg, tl, data, &dtl, &Instruments::default()) {
                    Ok((m, _)) => row(
                        "ok",
                        Some(accuracy(&m, &data.target_test.task, &data.target_test)?),
                        Some(accuracy(&m, &data.source_test.task, &data.source_test)?),
                        Some(pl_source(cfg, data, &m, 0)?),
                    ),
                    Err(DtlError::Diverged { .. }) => row("diverged", None, None, None),
                    Err(DtlError::DegenerateGradient(_)) => row("degenerate", None, None, None),
                    Err(e) => return Err(e),
                });
            }
        }
    }
    Ok(rows)
}

pub fn stage_sweep(rd: &mut RunDir, data: &RunData) -> Result<Vec<SweepRow>> {
    let cfg = rd.manifest.config.clone();
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| DtlError::Config("no [sweep] section in the configuration".into()))?;
    let tl = rd.load_checkpoint("finetune")?;
    let rows = sweep(&cfg, data, &tl, &grid)?;
    rd.write_sweep(&rows)?;
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{:.2}", 100.0 * x))
}

fn delta(a: Option<f64>, b: Option<f64>) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.2}", 100.0 * (a - b)),
        _ => "n/a".into(),
    }
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = w[i]) } else { format!("{c:>w$}", w = w[i]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut s = line(header) + "\n";
    s += &(w.iter().map(|n| "-".repeat(*n)).collect::<Vec<_>>().join("  ") + "\n");
    for r in rows {
        s += &(line(r) + "\n");
    }
    s
}

fn fmt_gamma(g: f64) -> String {
    format!("{}%", 100.0 * g)
}

/// Plain-text tables and `.dat` plot series (written into `dir/plots`) from
/// the metric and sweep records of an output directory.
pub fn report(dir: &Path) -> Result<String> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(DtlError::Config(format!("no {} in {}", MANIFEST, dir.display())));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
    let metrics: Vec<MetricRecord> = if dir.join(METRICS).exists() { read_jsonl(&dir.join(METRICS))? } else { Vec::new() };
    let sweep_rows: Vec<SweepRow> = if dir.join(SWEEP).exists() { read_jsonl(&dir.join(SWEEP))? } else { Vec::new() };
    if metrics.is_empty() && sweep_rows.is_empty() {
        return Err(DtlError::Config(format!("{} holds no metric records", dir.display())));
    }
    let get = |model: &str, m: &str, gamma: Option<f64>| {
        metrics
            .iter()
            .find(|r| r.model == model && r.metric == m && r.gamma.map(f64::to_bits) == gamma.map(f64::to_bits))
            .map(|r| r.value)
    };
    let models = ["pre", "tl", "tgt", "scratch", "dtl"];
    let gammas = manifest.config.piggyback.ratios.clone();
    let mut out = String::new();
    let src = manifest.config.source.name().to_string();

    let _ = writeln!(out, "# Accuracy (%) and piggyback accuracy on {src} subsets; deltas in percentage points\n");
    let mut header: Vec<String> = vec!["model".into(), "acc_t".into(), "acc_s".into()];
    for g in &gammas {
        header.push(format!("pl@{}", fmt_gamma(*g)));
    }
    header.extend(["d_acc_t vs TL", "d_acc_t vs TGT"].map(String::from));
    for g in &gammas {
        header.push(format!("d_pl@{} vs TL", fmt_gamma(*g)));
    }
    let rows: Vec<Vec<String>> = models
        .iter()
        .map(|&m| {
            let mut r = vec![m.to_string(), cell(get(m, "acc_t", None)), cell(get(m, "acc_s", None))];
            for g in &gammas {
                r.push(cell(get(m, "pl_acc", Some(*g))));
            }
            r.push(delta(get(m, "acc_t", None), get("tl", "acc_t", None)));
            r.push(delta(get(m, "acc_t", None), get("tgt", "acc_t", None)));
            for g in &gammas {
                r.push(delta(get(m, "pl_acc", Some(*g)), get("tl", "pl_acc", Some(*g))));
            }
            r
        })
        .collect();
    out += &table(&header, &rows);

    let _ = writeln!(out, "\n# Membership inference AUROC (%) on {src}\n");
    let mut header: Vec<String> = vec!["model".into()];
    header.extend(MiaStrategy::ALL.iter().map(|s| s.name().to_string()));
    header.push("tr_h".into());
    let rows: Vec<Vec<String>> = models
        .iter()
        .map(|&m| {
            let mut r = vec![m.to_string()];
            r.extend(MiaStrategy::ALL.iter().map(|s| cell(get(m, &format!("mia_auroc_{}", s.name()), None))));
            r.push(get(m, "tr_h", None).map_or("n/a".into(), |v| format!("{v:.3}")));
            r
        })
        .collect();
    out += &table(&header, &rows);

    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    for &m in &models {
        let mut s = format!("# piggyback accuracy of {m} on {src} subsets\n# gamma pl_acc\n");
        for g in &gammas {
            match get(m, "pl_acc", Some(*g)) {
                Some(v) => s += &format!("{g} {v}\n"),
                None => s += &format!("{g} nan\n"),
            }
        }
        std::fs::write(plots.join(format!("pl_vs_gamma_{m}.dat")), s)?;
    }

    if !sweep_rows.is_empty() {
        let _ = writeln!(out, "\n# Lambda sweep: target accuracy vs source piggyback accuracy (%)\n");
        let header: Vec<String> = ["retain", "unlearn", "lambda", "status", "acc_t", "acc_s", "acc_pl"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = sweep_rows
            .iter()
            .map(|r| {
                vec![
                    r.retain.name().into(),
                    r.unlearn.name().into(),
                    format!("{:.2}", r.lambda),
                    r.status.clone(),
                    cell(r.acc_t),
                    cell(r.acc_s),
                    cell(r.acc_pl),
                ]
            })
            .collect();
        out += &table(&header, &rows);
        let mut series: BTreeMap<(String, String), String> = BTreeMap::new();
        for r in &sweep_rows {
            let s = series.entry((r.retain.name().into(), r.unlearn.name().into())).or_insert_with(|| {
                format!("# frontier {} / {}\n# acc_t acc_pl lambda\n", r.retain.name(), r.unlearn.name())
            });
            match (r.acc_t, r.acc_pl) {
                (Some(t), Some(p)) => *s += &format!("{t} {p} {}\n", r.lambda),
                _ => *s += &format!("nan nan {}\n", r.lambda),
            }
        }
        for ((ret, unl), s) in series {
            std::fs::write(plots.join(format!("frontier_{ret}_{unl}.dat")), s)?;
        }
    }
    std::fs::write(dir.join("report.txt"), &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses_and_round_trips() {
        let cfg = RunConfig::default_benchmark();
        assert_eq!(cfg.dispose.lambda, 0.3);
        assert_eq!(cfg.dispose.unlearn, UnlearnKind::Gc);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let sets = vec![
            ("dispose.lambda".to_string(), "0.7".to_string()),
            ("dispose.unlearn".to_string(), "unif".to_string()),
            ("seed".to_string(), "9".to_string()),
        ];
        let cfg = RunConfig::from_toml_str(DEFAULT_CONFIG, &sets).unwrap();
        assert_eq!(cfg.dispose.lambda, 0.7);
        assert_eq!(cfg.dispose.unlearn, UnlearnKind::Unif);
        assert_eq!(cfg.seed, 9);
        let bad = vec![("dispose.lambda".to_string(), "2.0".to_string())];
        assert!(RunConfig::from_toml_str(DEFAULT_CONFIG, &bad).is_err());
        let unknown = vec![("dispose.lamda".to_string(), "0.2".to_string())];
        assert!(RunConfig::from_toml_str(DEFAULT_CONFIG, &unknown).is_err());
    }

    #[test]
    fn seeds_follow_run_seed() {
        let a = RunConfig::default_benchmark();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.seeds().get("init"), b.seeds().get("init"));
        assert_eq!(a.seeds(), a.seeds());
        assert_eq!(a.seeds().get("source_basis"), a.seeds().get("target_basis"));
    }

    #[test]
    fn table_alignment() {
        let t = table(&["a".into(), "bb".into()], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz   1\n");
    }
}
