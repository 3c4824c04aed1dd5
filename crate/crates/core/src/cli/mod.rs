//! The `bicir` command line: dataset generation, two-stage training,
//! evaluation, ablation sweeps and report tables.

pub mod ablate;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::data::{synth_generate, Dataset, ReversalOracle, Split, SynthSpec};
use crate::encoders::Direction;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with_oracle, RetrievalReport};
use crate::model::ModelState;
use crate::training::{train_stage1, train_stage2, ExperimentConfig, TrainOutcome};

use ablate::{parse_axes, run_ablation, AblationPlan, DEFAULT_ALPHAS};

pub const CHECKPOINT_FILE: &str = "model.bckp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SPEC_SNAPSHOT: &str = "spec.toml";

#[derive(Debug, Parser)]
#[command(name = "bicir", version, about = "Bi-directional composed image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic triplet dataset.
    GenData(GenDataArgs),
    /// Train stage 1 (text encoder) or stage 2 (combiner).
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run an ablation sweep.
    Ablate(AblateArgs),
    /// Collect report files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML generator spec; defaults apply to omitted keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Options shared by commands that resolve an experiment configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment configuration layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// `key=value` override, e.g. `stage1.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Weight of the reversed-query loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Train on forward queries only.
    #[arg(long)]
    pub no_bidirectional: bool,
    /// Stage-1 checkpoint; required for stage 2.
    #[arg(long)]
    pub from_stage1: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value = "forward")]
    pub direction: Direction,
    /// Also score reversed queries against the dataset's reversal oracle.
    #[arg(long)]
    pub oracle: bool,
    /// Output directory for `report.json` and `report.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated subset of neg-sampling, bi-token, alpha.
    #[arg(long, default_value = "neg-sampling,bi-token,alpha")]
    pub axes: String,
    /// Stage-2 alpha grid for the alpha axis.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS)]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    /// Also train the forward-only baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Fixed dataset directory; without it each seed generates its own.
    #[arg(long, conflicts_with = "spec")]
    pub data: Option<PathBuf>,
    /// Generator spec used per seed when `--data` is absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files, or directories holding a `report.json`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn load_spec(path: Option<&Path>) -> Result<SynthSpec> {
    match path {
        None => Ok(SynthSpec::default()),
        Some(p) => toml::from_str(&read(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref())?;
    let out = synth_generate(&spec, a.seed)?;
    out.dataset.save(&a.out)?;
    for (split, oracle) in &out.oracles {
        oracle.save(&a.out.join(split.oracle_file_name()))?;
    }
    let snapshot = format!(
        "# seed = {}\n{}",
        a.seed,
        toml::to_string(&spec).expect("spec serializes")
    );
    write(&a.out.join(SPEC_SNAPSHOT), snapshot)?;
    info!(
        "wrote {} images, {}/{}/{} triplets to {}",
        out.dataset.store.len(),
        out.dataset.train.len(),
        out.dataset.val.len(),
        out.dataset.test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn resolve_config(c: &ConfigArgs, extra: &[String]) -> Result<ExperimentConfig> {
    let text = c.config.as_deref().map(read).transpose()?;
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(extra.iter().cloned());
    ExperimentConfig::resolve(&c.preset, text.as_deref(), &overrides)
}

fn metrics_jsonl(outcome: &TrainOutcome) -> String {
    outcome
        .log
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Trains one stage and writes the checkpoint, epoch log and resolved
/// configuration to `--out`. On divergence the best state so far is still
/// written, then a divergence error is returned.
pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let mut extra = Vec::new();
    if let Some(alpha) = a.alpha {
        extra.push(format!("loss.alpha={alpha}"));
    }
    if a.no_bidirectional {
        extra.push("train.bidirectional=false".into());
    }
    let exp = resolve_config(&a.config, &extra)?;
    let stage1 = match (a.stage, &a.from_stage1) {
        (2, None) => return Err(Error::Usage("--stage 2 requires --from-stage1".into())),
        (1, Some(_)) => return Err(Error::Usage("--from-stage1 only applies to --stage 2".into())),
        (_, p) => p.as_deref().map(ModelState::load).transpose()?,
    };
    let ds = Dataset::load(&a.data)?;
    let outcome = match &stage1 {
        None => train_stage1(&exp, &ds)?,
        Some(s1) => train_stage2(&exp, &ds, s1)?,
    };
    create_dir(&a.out)?;
    write(&a.out.join(CONFIG_SNAPSHOT), exp.to_toml())?;
    write(&a.out.join(METRICS_FILE), metrics_jsonl(&outcome))?;
    outcome.best.save(&a.out.join(CHECKPOINT_FILE))?;
    for audit in &outcome.audits {
        if !audit.intact() {
            warn!("frozen {} changed during training", audit.what);
        }
    }
    if let Some(d) = &outcome.divergence {
        return Err(Error::Divergence(format!(
            "{d}; checkpoint from epoch {} written",
            outcome.best_epoch
        )));
    }
    info!("stage {} best epoch {}", a.stage, outcome.best_epoch);
    Ok(outcome)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<RetrievalReport> {
    let model = ModelState::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let oracle = if a.oracle {
        Some(ReversalOracle::load(&a.data.join(a.split.oracle_file_name()))?)
    } else {
        None
    };
    let report = evaluate_with_oracle(&ds, a.split, &model, a.direction, oracle.as_ref())?;
    create_dir(&a.out)?;
    report.save(&a.out.join("report.json"), Some(&a.out.join("report.csv")))?;
    info!("{} {:?}: {:.4}", a.split, a.direction, report.primary_metric());
    Ok(report)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<ablate::AblationResult> {
    let axes = parse_axes(&a.axes)?;
    let base = resolve_config(&a.config, &[])?;
    let plan = AblationPlan {
        base: base.clone(),
        axes,
        alphas: a.alphas.clone(),
        seeds: a.seeds.clone(),
        baseline: a.baseline,
    };
    let fixed = a.data.as_deref().map(Dataset::load).transpose()?;
    let spec = load_spec(a.spec.as_deref())?;
    let result = run_ablation(&plan, &|seed| match &fixed {
        Some(ds) => Ok(ds.clone()),
        None => Ok(synth_generate(&spec, seed)?.dataset),
    })?;
    create_dir(&a.out)?;
    write(&a.out.join(CONFIG_SNAPSHOT), base.to_toml())?;
    result.save(&a.out)?;
    Ok(result)
}

/// One row per report: split, direction, then every stored metric.
pub fn report_table(reports: &[(String, RetrievalReport)]) -> String {
    let mut cols = std::collections::BTreeSet::new();
    let rows: Vec<_> = reports
        .iter()
        .map(|(name, r)| {
            let mut m = std::collections::BTreeMap::new();
            for line in r.to_csv().lines().skip(1) {
                if let Some((k, v)) = line.split_once(',') {
                    cols.insert(k.to_string());
                    m.insert(k.to_string(), v.to_string());
                }
            }
            (name, r, m)
        })
        .collect();
    let mut s = String::from("source,split,direction");
    for c in &cols {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (name, r, m) in rows {
        let dir = match r.direction {
            Direction::Forward => "forward",
            Direction::Reversed => "reversed",
        };
        let _ = write!(s, "{name},{},{dir}", r.split);
        for c in &cols {
            let _ = write!(s, ",{}", m.get(c).map(String::as_str).unwrap_or(""));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("report.json") } else { p.clone() };
            Ok((p.display().to_string(), RetrievalReport::load(&file)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = report_table(&reports);
    match &a.out {
        Some(p) => write(p, table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
