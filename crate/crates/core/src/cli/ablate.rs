//! Ablation sweeps: negative sampling, direction-token scheme and the
//! stage-2 reversed-loss weight, each over a common seed set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, TokenScheme};
use crate::encoders::Direction;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RetrievalReport};
use crate::model::ModelState;
use crate::objective::NegativeMode;
use crate::training::{train_stage1, train_stage2, ExperimentConfig};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    NegSampling,
    BiToken,
    Alpha,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "neg-sampling" => Ok(Axis::NegSampling),
            "bi-token" => Ok(Axis::BiToken),
            "alpha" => Ok(Axis::Alpha),
            other => Err(Error::Usage(format!(
                "unknown ablation axis {other:?}; expected neg-sampling, bi-token or alpha"
            ))),
        }
    }
}

/// Parses a comma-separated axis list.
pub fn parse_axes(s: &str) -> Result<BTreeSet<Axis>> {
    let axes = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Axis::from_str)
        .collect::<Result<BTreeSet<_>>>()?;
    if axes.is_empty() {
        return Err(Error::Usage("no ablation axis given".into()));
    }
    Ok(axes)
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    /// The fully-configured model; every variant differs from it in one
    /// setting.
    pub base: ExperimentConfig,
    pub axes: BTreeSet<Axis>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also train the forward-only baseline (`alpha = 0`, no reversed
    /// queries).
    pub baseline: bool,
}

/// Forward and reversed validation summaries of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScores {
    pub forward: RetrievalReport,
    pub reversed: RetrievalReport,
}

impl StageScores {
    fn of(ds: &Dataset, model: &ModelState) -> Result<Self> {
        Ok(Self {
            forward: evaluate(ds, Split::Val, model, Direction::Forward)?,
            reversed: evaluate(ds, Split::Val, model, Direction::Reversed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    /// Reversed-loss weight used in stage 2.
    pub stage2_alpha: f64,
    pub stage1: StageScores,
    pub stage2: StageScores,
    pub divergence: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<RunRecord>,
}

pub const FULL: &str = "fully-configured";
pub const BASELINE: &str = "baseline";
pub const NO_NEG_SAMPLING: &str = "no-neg-sampling";
pub const NO_BI_TOKEN: &str = "no-bi-token";

fn variant_config(base: &ExperimentConfig, variant: &str) -> ExperimentConfig {
    let mut c = base.clone();
    match variant {
        BASELINE => {
            c.loss.alpha = 0.0;
            c.train.bidirectional = false;
        }
        NO_NEG_SAMPLING => c.loss.reversed_negatives = NegativeMode::ReferenceSide,
        NO_BI_TOKEN => c.train.token_scheme = TokenScheme::ReversedOnly,
        _ => {}
    }
    c
}

fn alpha_label(a: f64) -> String {
    format!("alpha={a}")
}

/// Runs every configuration implied by `plan`. Stage-1 and stage-2 jobs
/// are deduplicated by configuration and run in parallel; `dataset` maps a
/// seed to the data for that seed.
pub fn run_ablation(plan: &AblationPlan, dataset: &(dyn Fn(u64) -> Result<Dataset> + Sync)) -> Result<AblationResult> {
    if plan.seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    if plan.axes.contains(&Axis::Alpha) && plan.alphas.is_empty() {
        return Err(Error::Usage("alpha axis needs a non-empty grid".into()));
    }
    plan.base.validate()?;

    // (variant label, stage-1 variant, stage-2 alpha)
    let mut variants: Vec<(String, &str, f64)> = vec![(FULL.into(), FULL, plan.base.loss.alpha)];
    if plan.baseline {
        variants.push((BASELINE.into(), BASELINE, 0.0));
    }
    if plan.axes.contains(&Axis::NegSampling) {
        variants.push((NO_NEG_SAMPLING.into(), NO_NEG_SAMPLING, plan.base.loss.alpha));
    }
    if plan.axes.contains(&Axis::BiToken) {
        variants.push((NO_BI_TOKEN.into(), NO_BI_TOKEN, plan.base.loss.alpha));
    }
    if plan.axes.contains(&Axis::Alpha) {
        for &a in &plan.alphas {
            variants.push((alpha_label(a), FULL, a));
        }
    }

    let datasets = plan
        .seeds
        .par_iter()
        .map(|&s| dataset(s).map(|d| (s, d)))
        .collect::<Result<BTreeMap<u64, Dataset>>>()?;

    let stage1_keys: BTreeSet<(u64, &str)> = plan
        .seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |v| (s, v.1)))
        .collect();
    let stage1: BTreeMap<(u64, &str), (ModelState, Option<String>)> = stage1_keys
        .par_iter()
        .map(|&(seed, v)| {
            let mut exp = variant_config(&plan.base, v);
            exp.seed = seed;
            info!("ablation: stage 1 {v} seed {seed}");
            let out = train_stage1(&exp, &datasets[&seed])?;
            Ok(((seed, v), (out.best, out.divergence)))
        })
        .collect::<Result<_>>()?;

    // The same stage-2 configuration reached through two labels trains once.
    let mut stage2_jobs: BTreeMap<(u64, &str, u64), ExperimentConfig> = BTreeMap::new();
    for &seed in &plan.seeds {
        for (_, v, a) in &variants {
            let mut exp = variant_config(&plan.base, v);
            exp.seed = seed;
            exp.loss.alpha = *a;
            stage2_jobs.insert((seed, *v, exp.fingerprint()), exp);
        }
    }
    let stage2: BTreeMap<(u64, &str, u64), (StageScores, Option<String>)> = stage2_jobs
        .par_iter()
        .map(|(&(seed, v, fp), exp)| {
            info!("ablation: stage 2 {v} alpha {} seed {seed}", exp.loss.alpha);
            let ds = &datasets[&seed];
            let out = train_stage2(exp, ds, &stage1[&(seed, v)].0)?;
            Ok(((seed, v, fp), (StageScores::of(ds, &out.best)?, out.divergence)))
        })
        .collect::<Result<_>>()?;
    let stage1_scores: BTreeMap<(u64, &str), StageScores> = stage1
        .par_iter()
        .map(|(&(seed, v), (m, _))| Ok(((seed, v), StageScores::of(&datasets[&seed], m)?)))
        .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        for (label, v, a) in &variants {
            let mut exp = variant_config(&plan.base, v);
            exp.seed = seed;
            exp.loss.alpha = *a;
            let (s2, d2) = &stage2[&(seed, *v, exp.fingerprint())];
            let d1 = &stage1[&(seed, *v)].1;
            runs.push(RunRecord {
                variant: label.clone(),
                seed,
                stage2_alpha: *a,
                stage1: stage1_scores[&(seed, *v)].clone(),
                stage2: s2.clone(),
                divergence: d1.clone().or_else(|| d2.clone()),
            });
        }
    }
    Ok(AblationResult { runs })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl AblationResult {
    pub fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Seed mean of `metric` over the runs of `variant`.
    pub fn mean_of(&self, variant: &str, metric: impl Fn(&RunRecord) -> f64) -> f64 {
        mean(self.runs_of(variant).map(metric))
    }

    /// `(alpha, seed-mean stage-2 forward metric)` in grid order.
    pub fn alpha_curve(&self) -> Vec<(f64, f64)> {
        let mut seen = Vec::new();
        for r in &self.runs {
            if r.variant.starts_with("alpha=") && !seen.contains(&r.stage2_alpha) {
                seen.push(r.stage2_alpha);
            }
        }
        seen.into_iter()
            .map(|a| (a, self.mean_of(&alpha_label(a), |r| r.stage2.forward.primary_metric())))
            .collect()
    }

    /// Seed-averaged forward validation metrics of the final models, one
    /// row per variant, with check marks for the two ablated components.
    pub fn table_csv(&self) -> String {
        let rows: [(&str, &str, &str); 4] = [
            (BASELINE, "", ""),
            (NO_NEG_SAMPLING, "yes", "no"),
            (NO_BI_TOKEN, "no", "yes"),
            (FULL, "yes", "yes"),
        ];
        let mut keys: BTreeSet<String> = BTreeSet::new();
        for r in &self.runs {
            keys.extend(metric_columns(&r.stage2.forward).into_keys());
        }
        let mut s = String::from("row,variant,bi_token,neg_sampling,seeds");
        for k in &keys {
            let _ = write!(s, ",{k}");
        }
        s.push('\n');
        for (i, (variant, bi, neg)) in rows.iter().enumerate() {
            let runs: Vec<&RunRecord> = self.runs_of(variant).collect();
            if runs.is_empty() {
                continue;
            }
            let _ = write!(s, "{},{variant},{bi},{neg},{}", i + 1, runs.len());
            for k in &keys {
                let v = mean(runs.iter().filter_map(|r| metric_columns(&r.stage2.forward).get(k).copied()));
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    /// `alpha,seed,metric` rows plus a `mean` row per alpha.
    pub fn alpha_curve_csv(&self) -> String {
        let mut s = String::from("alpha,seed,metric\n");
        for (a, m) in self.alpha_curve() {
            for r in self.runs_of(&alpha_label(a)) {
                let _ = writeln!(s, "{a},{},{:.6}", r.seed, r.stage2.forward.primary_metric());
            }
            let _ = writeln!(s, "{a},mean,{m:.6}");
        }
        s
    }

    pub fn runs_jsonl(&self) -> String {
        self.runs
            .iter()
            .map(|r| serde_json::to_string(r).expect("run serializes") + "\n")
            .collect()
    }

    /// Writes `table.csv`, `runs.jsonl` and, when swept, `alpha_curve.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("table.csv", self.table_csv())?;
        write("runs.jsonl", self.runs_jsonl())?;
        if !self.alpha_curve().is_empty() {
            write("alpha_curve.csv", self.alpha_curve_csv())?;
        }
        Ok(())
    }
}

fn metric_columns(r: &RetrievalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (k, v) in &r.recall {
        m.insert(format!("recall@{k:02}"), *v);
    }
    for (k, v) in &r.subset_recall {
        m.insert(format!("subset_recall@{k}"), *v);
    }
    m.insert("avg".into(), r.primary_metric());
    m
}
