//! `dtl`: drives pre-training, transfer, knowledge disposal, piggyback
//! evaluation, lambda sweeps and reports from one run configuration.
//!
//! Exit codes: 0 success, 2 input error, 3 divergence, 4 degenerate gradient,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtl_core::losses::{RetainKind, UnlearnKind};
use dtl_core::run::{self, RunConfig, RunData, RunDir, DEFAULT_CONFIG};
use dtl_core::DtlError;

#[derive(Parser)]
#[command(name = "dtl", version, about = "Disposable transfer learning runs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on the source task.
    Pretrain(RunArgs),
    /// Fine-tune the pre-trained model on the target task, and train the
    /// target-only reference.
    Finetune(RunArgs),
    /// Dispose of source knowledge in the fine-tuned model.
    Dispose(RunArgs),
    /// Piggyback, membership-inference and curvature evaluation of every
    /// checkpoint in the output directory.
    Piggyback(RunArgs),
    /// All of the above in order.
    Run(RunArgs),
    /// Disposal over the configured lambda grid and loss kinds.
    Sweep(RunArgs),
    /// Tables and plot-data files from an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in benchmark configuration.
    DefaultConfig,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override a configuration entry, e.g. `--set dispose.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    unlearn: Option<String>,
    #[arg(long)]
    retain: Option<String>,
    #[arg(long)]
    freeze_source_head: bool,
    /// Write per-step gc-engine events to `gc_trace.jsonl`.
    #[arg(long)]
    trace: bool,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, DtlError> {
        let mut out = Vec::new();
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| DtlError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        if let Some(w) = self.workers {
            put("dispose.workers", w.to_string());
        }
        if let Some(c) = self.chunks {
            put("dispose.chunks", c.to_string());
        }
        if let Some(l) = self.lambda {
            put("dispose.lambda", format!("{l:?}"));
        }
        if let Some(u) = &self.unlearn {
            put("dispose.unlearn", format!("\"{}\"", UnlearnKind::parse(u)?.name()));
        }
        if let Some(r) = &self.retain {
            put("dispose.retain", format!("\"{}\"", RetainKind::parse(r)?.name()));
        }
        if self.freeze_source_head {
            put("dispose.freeze_source_head", "true".into());
        }
        if self.trace {
            put("dispose.trace", "true".into());
        }
        Ok(out)
    }

    fn open(&self) -> Result<(RunDir, RunData), DtlError> {
        let sets = self.overrides()?;
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p, &sets)?,
            None => RunConfig::from_toml_str(DEFAULT_CONFIG, &sets)?,
        };
        let data = RunData::build(&cfg)?;
        let rd = RunDir::open(&self.out, &cfg, self.config.as_deref())?;
        Ok((rd, data))
    }
}

fn summarize(dir: &Path) -> Result<(), DtlError> {
    let path = dir.join(run::METRICS);
    if path.exists() {
        for m in run::read_jsonl::<run::MetricRecord>(&path)? {
            let gamma = m.gamma.map(|g| format!(" gamma={g}")).unwrap_or_default();
            println!("{:<8} {:<22} {:<10}{} {:.4}", m.model, m.metric, m.dataset, gamma, m.value);
        }
    }
    Ok(())
}

fn run_stages(a: &RunArgs, stages: &[&str]) -> Result<(), DtlError> {
    let (mut rd, data) = a.open()?;
    for &st in stages {
        match st {
            "pretrain" => drop(run::stage_pretrain(&mut rd, &data)?),
            "finetune" => drop(run::stage_finetune(&mut rd, &data)?),
            "dispose" => drop(run::stage_dispose(&mut rd, &data)?),
            _ => drop(run::stage_piggyback(&mut rd, &data)?),
        }
    }
    summarize(&rd.dir)
}

fn execute(cmd: Command) -> Result<(), DtlError> {
    match cmd {
        Command::Pretrain(a) => run_stages(&a, &["pretrain"]),
        Command::Finetune(a) => run_stages(&a, &["finetune"]),
        Command::Dispose(a) => run_stages(&a, &["dispose"]),
        Command::Piggyback(a) => run_stages(&a, &["piggyback"]),
        Command::Run(a) => run_stages(&a, &["pretrain", "finetune", "dispose", "piggyback"]),
        Command::Sweep(a) => {
            let (mut rd, data) = a.open()?;
            let rows = run::stage_sweep(&mut rd, &data)?;
            let bad = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} sweep rows ({bad} not ok) -> {}", rows.len(), rd.dir.join(run::SWEEP).display());
            Ok(())
        }
        Command::Report { out } => {
            print!("{}", run::report(&out)?);
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", DEFAULT_CONFIG.trim_start());
            Ok(())
        }
    }
}

fn exit_code(e: &DtlError) -> u8 {
    match e {
        DtlError::Diverged { .. } => 3,
        DtlError::DegenerateGradient(_) => 4,
        DtlError::Config(_)
        | DtlError::Parse { .. }
        | DtlError::Checkpoint(_)
        | DtlError::Io(_)
        | DtlError::Json(_)
        | DtlError::InvalidLabel { .. }
        | DtlError::InvalidShape(_)
        | DtlError::MissingHead(_) => 2,
        DtlError::ContractViolation(_) | DtlError::Aborted(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dtl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
