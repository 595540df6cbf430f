use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use protoreg::data::{
    generate_eval_grids, generate_world, load_feature_file, mask_to_step_visibility,
    save_feature_file, FeatureGrid, StepDataset, WorldParams,
};
use protoreg::engine::{
    load_checkpoint, save_checkpoint, train_base, train_incremental, Model, TrainConfig,
};
use protoreg::matching::AssignmentPlan;
use protoreg::metrics::{evaluate, EvalReport};
use protoreg::Execution;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::ExperimentManifest;

pub const SCHEDULE_FILE: &str = "schedule.json";
pub const EVAL_FILE: &str = "eval.oifg";

/// Index written by `gen-data` next to the feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dim: usize,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
    pub steps: Vec<ScheduleStep>,
    pub eval_file: String,
    pub eval_grids: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub step: usize,
    pub file: String,
    pub visible_classes: Vec<u32>,
    pub new_classes: Vec<u32>,
    pub shots: usize,
    pub grids: usize,
}

/// Everything one trial trains and evaluates on.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub steps: Vec<StepDataset>,
    pub eval: Vec<FeatureGrid>,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
}

impl Experiment {
    pub fn generate(world: &WorldParams) -> Result<Self> {
        let spec = world.build()?;
        Ok(Self {
            steps: generate_world(&spec)?,
            eval: generate_eval_grids(&spec)?,
            base_classes: spec.base_classes(),
            novel_classes: spec.novel_classes(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schedule: Schedule = read_json(&dir.join(SCHEDULE_FILE))?;
        let mut steps = Vec::with_capacity(schedule.steps.len());
        for s in &schedule.steps {
            let grids = load_feature_file(dir.join(&s.file))?;
            steps.push(StepDataset {
                step: s.step,
                visible_classes: s.visible_classes.clone(),
                new_classes: s.new_classes.clone(),
                grids,
                shots: s.shots,
            });
        }
        Ok(Self {
            steps,
            eval: load_feature_file(dir.join(&schedule.eval_file))?,
            base_classes: schedule.base_classes,
            novel_classes: schedule.novel_classes,
        })
    }

    pub fn for_trial(manifest: &ExperimentManifest, seed: u64) -> Result<Self> {
        match &manifest.data_dir {
            Some(dir) => Self::load(dir),
            None => Self::generate(&WorldParams {
                seed,
                ..manifest.world.clone()
            }),
        }
    }

    /// Evaluation grids with classes unseen by step `t` relabelled as background.
    pub fn eval_at(&self, t: usize) -> Vec<FeatureGrid> {
        let visible = &self.steps[t].visible_classes;
        self.eval
            .iter()
            .map(|g| mask_to_step_visibility(g, visible))
            .collect()
    }

    pub fn novel_until(&self, t: usize) -> Vec<u32> {
        self.steps[1..=t]
            .iter()
            .flat_map(|s| s.new_classes.iter().copied())
            .collect()
    }

    pub fn evaluate_step(&self, model: &Model, t: usize, exec: Execution) -> Result<EvalReport> {
        Ok(evaluate(
            model,
            &self.eval_at(t),
            &self.base_classes,
            &self.novel_until(t),
            t,
            exec,
        )?)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes one OIFG file per step plus the evaluation set and a schedule
/// index. Returns the feature files written.
pub fn cmd_gen_data(manifest: &ExperimentManifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let spec = manifest.world.build()?;
    let steps = generate_world(&spec)?;
    let eval = generate_eval_grids(&spec)?;
    create_dir(out_dir)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for s in &steps {
        let name = format!("step_{}.oifg", s.step);
        let path = out_dir.join(&name);
        save_feature_file(&path, &s.grids)?;
        files.push(path);
        entries.push(ScheduleStep {
            step: s.step,
            file: name,
            visible_classes: s.visible_classes.clone(),
            new_classes: s.new_classes.clone(),
            shots: s.shots,
            grids: s.grids.len(),
        });
    }
    let eval_path = out_dir.join(EVAL_FILE);
    save_feature_file(&eval_path, &eval)?;
    files.push(eval_path);
    write_json(
        &out_dir.join(SCHEDULE_FILE),
        &Schedule {
            dim: spec.params.dim,
            base_classes: spec.base_classes(),
            novel_classes: spec.novel_classes(),
            steps: entries,
            eval_file: EVAL_FILE.to_string(),
            eval_grids: eval.len(),
        },
    )?;
    Ok(files)
}

/// Outcome of base training plus every incremental step.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub seed: u64,
    /// One report per step, step 0 first.
    pub reports: Vec<EvalReport>,
    pub plans: Vec<Option<AssignmentPlan>>,
    pub model: Model,
}

impl TrialResult {
    pub fn base_report(&self) -> &EvalReport {
        &self.reports[0]
    }

    pub fn final_report(&self) -> &EvalReport {
        self.reports.last().expect("at least the base report")
    }

    /// mIoU-Base lost between the base model and the final model.
    pub fn forgetting(&self) -> f64 {
        self.base_report().miou_base - self.final_report().miou_base
    }
}

pub fn trial_config(manifest: &ExperimentManifest, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..manifest.train.clone()
    }
}

/// Base model of one trial and its step-0 report.
pub fn train_base_model(exp: &Experiment, config: &TrainConfig) -> Result<(Model, EvalReport)> {
    let (model, _) = train_base(&exp.steps[0], config)?;
    let report = exp.evaluate_step(&model, 0, config.execution)?;
    Ok((model, report))
}

/// Runs every incremental step on top of a trained base model.
pub fn run_steps(
    exp: &Experiment,
    config: &TrainConfig,
    base: Model,
    base_report: EvalReport,
) -> Result<TrialResult> {
    let mut model = base;
    let mut reports = vec![base_report];
    let mut plans = vec![None];
    for t in 1..exp.steps.len() {
        let (next, log) = train_incremental(&model, &exp.steps[t], config)?;
        model = next;
        reports.push(exp.evaluate_step(&model, t, config.execution)?);
        plans.push(log.plan);
    }
    Ok(TrialResult {
        seed: config.seed,
        reports,
        plans,
        model,
    })
}

pub fn run_trial(manifest: &ExperimentManifest, seed: u64) -> Result<TrialResult> {
    let exp = Experiment::for_trial(manifest, seed)?;
    let config = trial_config(manifest, seed);
    let (base, report) = train_base_model(&exp, &config)?;
    run_steps(&exp, &config, base, report)
}

fn map_trials<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Final metrics of a trial or of a trial average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub miou_base: f64,
    pub miou_novel: f64,
    pub hm: f64,
    /// mIoU-Base of the step-0 model.
    pub base_model_miou: f64,
    pub forgetting: f64,
}

impl SummaryRow {
    pub fn from_trial(setting: String, t: &TrialResult) -> Self {
        let f = t.final_report();
        Self {
            setting,
            miou_base: f.miou_base,
            miou_novel: f.miou_novel,
            hm: f.hm,
            base_model_miou: t.base_report().miou_base,
            forgetting: t.forgetting(),
        }
    }

    pub fn mean(setting: String, rows: &[SummaryRow]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&SummaryRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            setting,
            miou_base: avg(|r| r.miou_base),
            miou_novel: avg(|r| r.miou_novel),
            hm: avg(|r| r.hm),
            base_model_miou: avg(|r| r.base_model_miou),
            forgetting: avg(|r| r.forgetting),
        }
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("setting,miou_base,miou_novel,hm\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.setting, r.miou_base, r.miou_novel, r.hm
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct TrialSummary {
    seed: u64,
    steps: Vec<EvalReport>,
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    trials: Vec<TrialSummary>,
    rows: Vec<SummaryRow>,
    mean: SummaryRow,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trials: Vec<TrialResult>,
    pub rows: Vec<SummaryRow>,
    pub mean: SummaryRow,
}

/// Runs every trial of the manifest and writes reports, assignment plans,
/// checkpoints, the summary and a copy of the manifest to `output_dir`.
pub fn cmd_run(manifest: &ExperimentManifest) -> Result<RunOutput> {
    manifest.validate()?;
    let out = &manifest.output_dir;
    create_dir(out)?;
    write_text(&out.join("manifest.toml"), &manifest.to_toml_string())?;
    let seeds = manifest.trial_seeds();
    let trials = map_trials(&seeds, |s| run_trial(manifest, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for t in &trials {
        let dir = out.join(format!("trial_{}", t.seed));
        create_dir(&dir)?;
        for (r, plan) in t.reports.iter().zip(&t.plans) {
            write_json(&dir.join(format!("step_{}.json", r.step)), &r.to_percent())?;
            if let Some(p) = plan {
                write_json(&dir.join(format!("plan_step_{}.json", r.step)), p)?;
            }
        }
        save_checkpoint(dir.join("model.oinc"), &t.model)?;
    }
    let rows: Vec<SummaryRow> = trials
        .iter()
        .map(|t| SummaryRow::from_trial(format!("seed={}", t.seed), t))
        .collect();
    let mean = SummaryRow::mean("mean".into(), &rows);
    let mut csv_rows = rows.clone();
    csv_rows.push(mean.clone());
    write_text(&out.join("summary.csv"), &summary_csv(&csv_rows))?;
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            trials: trials
                .iter()
                .map(|t| TrialSummary {
                    seed: t.seed,
                    steps: t.reports.iter().map(EvalReport::to_percent).collect(),
                })
                .collect(),
            rows: rows.clone(),
            mean: mean.clone(),
        },
    )?;
    Ok(RunOutput { trials, rows, mean })
}

/// Evaluates a checkpoint on a feature file. Classes added at step 0 count
/// as base classes, later ones as novel.
pub fn cmd_eval(checkpoint: &Path, features: &Path, exec: Execution) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let grids = load_feature_file(features)?;
    let step = model.head.introduced.iter().copied().max().unwrap_or(0);
    Ok(evaluate(
        &model,
        &grids,
        &model.head.base_classes(),
        &model.head.novel_classes(),
        step,
        exec,
    )?)
}

/// One full run per value of `param`; writes `sweep.csv` with one mean row
/// per setting and each setting's run under `output_dir/<param>=<value>`.
pub fn cmd_sweep(
    manifest: &ExperimentManifest,
    param: &str,
    values: &[String],
) -> Result<Vec<SummaryRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    create_dir(&manifest.output_dir)?;
    let mut rows = Vec::new();
    for v in values {
        let mut m = manifest.clone();
        m.set(param, v)?;
        let setting = format!("{param}={v}");
        m.output_dir = manifest.output_dir.join(&setting);
        let out = cmd_run(&m)?;
        rows.push(SummaryRow {
            setting,
            ..out.mean
        });
    }
    write_text(&manifest.output_dir.join("sweep.csv"), &summary_csv(&rows))?;
    Ok(rows)
}
