//! Experiment configuration, batch runs and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, EnvError, Environment};
use crate::execution::{ExecutionPolicy, Toolbox};
use crate::explore::{sample_profile, ExplorationConfig};
use crate::knowledge::{ExperienceRecord, KnowledgeBase};
use crate::llm_bridge::{Bridge, BridgeConfig, LlmScheduler, RemoteEvaluator};
use crate::model::{builtin_combinations, DegradationCombination, DegradationProfile, Group};
use crate::perception::{Evaluator, EvaluatorConfig, NoiseModel, NoisyOracle, PerfectOracle};
use crate::rng::Substream;
use crate::scheduling::{
    measure_consistency, ConsistencyReport, ExperienceScheduler, PresentationScheduler, RandomScheduler, ScheduleError,
    Scheduler,
};
use crate::search::{restored, run_workflow, RunMode, RunStatus, SearchDeps, SearchTrace};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("config error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerSpec {
    #[default]
    Experience,
    Random,
    Presentation,
    Llm,
}

impl std::str::FromStr for SchedulerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "experience" => Ok(SchedulerSpec::Experience),
            "random" => Ok(SchedulerSpec::Random),
            "presentation" => Ok(SchedulerSpec::Presentation),
            "llm" => Ok(SchedulerSpec::Llm),
            other => Err(format!(
                "unknown scheduler `{other}` (expected experience, random, presentation or llm)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub combinations: Vec<DegradationCombination>,
    pub modes: Vec<RunMode>,
    pub runs: u64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            combinations: builtin_combinations(),
            modes: vec![RunMode::Full],
            runs: 10,
            seed: 0,
        }
    }
}

/// A whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub scheduler: SchedulerSpec,
    #[serde(default)]
    pub policy: ExecutionPolicy,
    #[serde(default)]
    pub exploration: ExplorationConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub bridge: Option<BridgeConfig>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

/// Tabular environment on the reported calibration.
pub fn reference_config() -> ExperimentConfig {
    parse_config(r#"{"env": {"mode": "tabular", "calibration": "reported"}}"#).expect("built-in config parses")
}

/// Built components of an experiment.
pub struct Harness {
    pub env: Arc<Environment>,
    pub toolbox: Toolbox,
    pub evaluator: Box<dyn Evaluator>,
    pub scheduler: Box<dyn Scheduler>,
    pub policy: ExecutionPolicy,
}

impl Harness {
    pub fn build(cfg: &ExperimentConfig) -> Result<Harness, HarnessError> {
        let (env, external) = cfg.env.build()?;
        let env = Arc::new(env);
        let toolbox = Toolbox::from_env(env.clone(), &external);
        cfg.policy
            .validate()
            .map_err(|e| HarnessError::Invalid(format!("policy: {e}")))?;
        let bridge = || -> Result<Arc<Bridge>, HarnessError> {
            let bc = cfg.bridge.clone().unwrap_or_default().with_env_endpoint();
            Ok(Arc::new(
                Bridge::from_config(&bc).map_err(|e| HarnessError::Invalid(format!("bridge: {e}")))?,
            ))
        };
        let invalid = |e: crate::perception::PerceptionError| HarnessError::Invalid(format!("evaluator: {e}"));
        let evaluator: Box<dyn Evaluator> = match &cfg.evaluator {
            EvaluatorConfig::Perfect => Box::new(PerfectOracle),
            EvaluatorConfig::Noisy { confusion } => Box::new(
                NoisyOracle::new(NoiseModel {
                    confusion: confusion.clone(),
                })
                .map_err(invalid)?,
            ),
            EvaluatorConfig::Reported { prevalence } => {
                Box::new(NoisyOracle::new(NoiseModel::from_reported(*prevalence).map_err(invalid)?).map_err(invalid)?)
            }
            EvaluatorConfig::Remote => Box::new(RemoteEvaluator { bridge: bridge()? }),
        };
        let scheduler: Box<dyn Scheduler> = match cfg.scheduler {
            SchedulerSpec::Experience => Box::new(ExperienceScheduler),
            SchedulerSpec::Random => Box::new(RandomScheduler),
            SchedulerSpec::Presentation => Box::new(PresentationScheduler),
            SchedulerSpec::Llm => Box::new(LlmScheduler { bridge: bridge()? }),
        };
        Ok(Harness {
            env,
            toolbox,
            evaluator,
            scheduler,
            policy: cfg.policy,
        })
    }
}

/// One workflow run as written to the trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub group: Group,
    pub combination: String,
    pub mode: RunMode,
    pub run: u64,
    pub input: DegradationProfile,
    pub output: DegradationProfile,
    pub restored: bool,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub runs: u64,
    pub successes: u64,
    pub aborted: u64,
    pub success_rate: f64,
    pub mean_invocations: f64,
    pub mean_rollbacks: f64,
}

impl Stats {
    fn of<'a>(records: impl Iterator<Item = &'a RunRecord>) -> Stats {
        let (mut n, mut ok, mut aborted, mut inv, mut rb) = (0u64, 0u64, 0u64, 0u64, 0u64);
        for r in records {
            n += 1;
            ok += u64::from(r.restored);
            aborted += u64::from(r.trace.status == RunStatus::Aborted);
            inv += r.trace.counters.invocations;
            rb += r.trace.counters.rollbacks;
        }
        let div = |x: u64| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        Stats {
            runs: n,
            successes: ok,
            aborted,
            success_rate: div(ok),
            mean_invocations: div(inv),
            mean_rollbacks: div(rb),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combination: Option<String>,
    pub mode: RunMode,
    #[serde(flatten)]
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub runs_per_combination: u64,
    pub groups: Vec<ReportRow>,
    pub combinations: Vec<ReportRow>,
}

impl RunReport {
    /// Aggregates records; rows follow first appearance of (group, mode).
    pub fn from_records(seed: u64, runs: u64, records: &[RunRecord]) -> RunReport {
        let mut group_keys: Vec<(Group, RunMode)> = Vec::new();
        let mut combo_keys: Vec<(Group, String, RunMode)> = Vec::new();
        for r in records {
            if !group_keys.contains(&(r.group, r.mode)) {
                group_keys.push((r.group, r.mode));
            }
            let k = (r.group, r.combination.clone(), r.mode);
            if !combo_keys.contains(&k) {
                combo_keys.push(k);
            }
        }
        group_keys.sort();
        let groups = group_keys
            .into_iter()
            .map(|(g, m)| ReportRow {
                group: g,
                combination: None,
                mode: m,
                stats: Stats::of(records.iter().filter(|r| r.group == g && r.mode == m)),
            })
            .collect();
        let combinations = combo_keys
            .into_iter()
            .map(|(g, c, m)| ReportRow {
                group: g,
                mode: m,
                stats: Stats::of(records.iter().filter(|r| r.group == g && r.mode == m && r.combination == c)),
                combination: Some(c),
            })
            .collect();
        RunReport {
            seed,
            runs_per_combination: runs,
            groups,
            combinations,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let header = |out: &mut String, first: &str| {
            let _ = writeln!(
                out,
                "{first:<44} {:<17} {:>6} {:>9} {:>12} {:>10}",
                "mode", "runs", "success", "invocations", "rollbacks"
            );
        };
        let line = |out: &mut String, first: &str, r: &ReportRow| {
            let _ = writeln!(
                out,
                "{first:<44} {:<17} {:>6} {:>8.1}% {:>12.2} {:>10.2}",
                r.mode.name(),
                r.stats.runs,
                100.0 * r.stats.success_rate,
                r.stats.mean_invocations,
                r.stats.mean_rollbacks
            );
        };
        header(&mut out, "group");
        for r in &self.groups {
            line(&mut out, &r.group.to_string(), r);
        }
        out.push('\n');
        header(&mut out, "combination");
        for r in &self.combinations {
            let label = format!("{} {}", r.group, r.combination.as_deref().unwrap_or(""));
            line(&mut out, &label, r);
        }
        out
    }
}

/// Wall-clock figures, kept apart from the reproducible report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub group: Group,
    pub mode: RunMode,
    pub mean_seconds: f64,
}

pub struct BatchOutput {
    pub records: Vec<RunRecord>,
    pub report: RunReport,
    pub timing: Vec<Timing>,
}

/// `runs` workflows per combination per mode. Run `r` of combination `c`
/// uses `root.child(c).child(r)` in every mode, so modes see the same
/// inputs and randomness.
pub fn run_batch(
    h: &Harness,
    kb: &KnowledgeBase,
    combinations: &[DegradationCombination],
    modes: &[RunMode],
    runs: u64,
    seed: u64,
    jobs: usize,
) -> Result<BatchOutput, HarnessError> {
    let root = Substream::root(seed);
    let mut work = Vec::new();
    for mode in modes {
        for (ci, combo) in combinations.iter().enumerate() {
            for r in 0..runs {
                work.push((*mode, ci, combo, r));
            }
        }
    }
    let random = RandomScheduler;
    let run_one = |(mode, ci, combo, r): &(RunMode, usize, &DegradationCombination, u64)| {
        let base = root.child(*ci as u64).child(*r);
        let input = sample_profile(combo, *r, base.child(u64::MAX));
        let scheduler: &dyn Scheduler = if mode.retrieval() { h.scheduler.as_ref() } else { &random };
        let deps = SearchDeps {
            scheduler,
            evaluator: h.evaluator.as_ref(),
            toolbox: &h.toolbox,
            policy: mode.policy(h.policy),
            kb,
            rollback: mode.rollback(),
        };
        let t0 = Instant::now();
        let (output, trace) = run_workflow(&input, &deps, base.child(0));
        let secs = t0.elapsed().as_secs_f64();
        let rec = RunRecord {
            group: combo.group,
            combination: combo.label(),
            mode: *mode,
            run: *r,
            restored: restored(&output),
            input,
            output,
            trace,
        };
        (rec, secs)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(format!("thread pool: {e}")))?;
    let done: Vec<(RunRecord, f64)> = pool.install(|| work.par_iter().map(run_one).collect());

    let mut clock: BTreeMap<(Group, RunMode), (f64, u64)> = BTreeMap::new();
    for (rec, secs) in &done {
        let e = clock.entry((rec.group, rec.mode)).or_default();
        e.0 += secs;
        e.1 += 1;
    }
    let timing = clock
        .into_iter()
        .map(|((group, mode), (s, n))| Timing {
            group,
            mode,
            mean_seconds: s / n as f64,
        })
        .collect();
    let records: Vec<RunRecord> = done.into_iter().map(|(r, _)| r).collect();
    let report = RunReport::from_records(seed, runs, &records);
    Ok(BatchOutput {
        records,
        report,
        timing,
    })
}

pub const TRACES_DIR: &str = "traces";

/// Writes `report.json`, `report.txt`, `timing.json` and one JSON-lines
/// trace file per mode under `dir`.
pub fn write_batch(out: &BatchOutput, dir: &Path) -> Result<(), HarnessError> {
    let traces = dir.join(TRACES_DIR);
    std::fs::create_dir_all(&traces).map_err(io_err(&traces))?;
    let write = |p: PathBuf, text: String| std::fs::write(&p, text).map_err(io_err(&p));
    write(dir.join("report.json"), out.report.to_json())?;
    write(dir.join("report.txt"), out.report.to_text())?;
    write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&out.timing).expect("timing serializes") + "\n",
    )?;
    let mut by_mode: BTreeMap<RunMode, String> = BTreeMap::new();
    for r in &out.records {
        let s = by_mode.entry(r.mode).or_default();
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    for (mode, text) in by_mode {
        write(traces.join(format!("{}.jsonl", mode.name())), text)?;
    }
    Ok(())
}

pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let traces = dir.join(TRACES_DIR);
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&traces) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(e) => return Err(io_err(&traces)(e)),
    };
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(io_err(&f))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec = serde_json::from_str(line).map_err(|e| HarnessError::Io {
                path: f.clone(),
                message: format!("line {}: {e}", i + 1),
            })?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Recomputes every report cell from the trace files and checks each
/// trace's internal counters.
pub fn verify_dir(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let report: RunReport = serde_json::from_str(&text).map_err(|e| HarnessError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut records = read_records(dir)?;
    records.sort_by_key(|r| (r.mode, r.run));
    let mut problems = Vec::new();
    for r in &records {
        if let Err(e) = r.trace.verify() {
            problems.push(format!("{} {} run {}: {e}", r.mode, r.combination, r.run));
        }
        if r.restored != restored(&r.output) {
            problems.push(format!("{} {} run {}: restored flag disagrees with output", r.mode, r.combination, r.run));
        }
    }
    let recomputed = RunReport::from_records(report.seed, report.runs_per_combination, &records);
    let key = |r: &ReportRow| (r.group, r.combination.clone(), r.mode);
    let index = |rows: &[ReportRow]| -> BTreeMap<_, Stats> { rows.iter().map(|r| (key(r), r.stats)).collect() };
    let (want_g, got_g) = (index(&report.groups), index(&recomputed.groups));
    let (want_c, got_c) = (index(&report.combinations), index(&recomputed.combinations));
    for (want, got) in [(want_g, got_g), (want_c, got_c)] {
        if want.len() != got.len() {
            problems.push(format!("report has {} rows, traces give {}", want.len(), got.len()));
        }
        for (k, s) in &want {
            match got.get(k) {
                Some(g) if g == s => {}
                Some(g) => problems.push(format!("{k:?}: report {s:?} but traces give {g:?}")),
                None => problems.push(format!("{k:?}: no traces")),
            }
        }
    }
    Ok(problems)
}

pub fn consistency_table(
    scheduler: &dyn Scheduler,
    combinations: &[DegradationCombination],
    kb: &KnowledgeBase,
    n: u64,
    seed: u64,
) -> Result<Vec<(DegradationCombination, ConsistencyReport)>, HarnessError> {
    let root = Substream::root(seed);
    let mut out = Vec::new();
    for (ci, c) in combinations.iter().enumerate() {
        let r = measure_consistency(scheduler, &c.tasks(), kb, n, root.child(ci as u64))?;
        out.push((c.clone(), r));
    }
    Ok(out)
}

pub fn consistency_text(rows: &[(DegradationCombination, ConsistencyReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<5} {:<44} {:>8} {:>8} {:>10} {:>9} {:>8}",
        "group", "combination", "entropy", "var.rat", "sens.ent", "sens.vr", "samples"
    );
    let mut sorted: Vec<&(DegradationCombination, ConsistencyReport)> = rows.iter().collect();
    sorted.sort_by_key(|(c, _)| c.group);
    for (c, r) in sorted {
        let _ = writeln!(
            out,
            "{:<5} {:<44} {:>8.4} {:>8.4} {:>10.4} {:>9.4} {:>8}",
            c.group.to_string(),
            c.label(),
            r.entropy_bits,
            r.variation_ratio,
            r.sensitivity_entropy,
            r.sensitivity_vr,
            r.n_samples
        );
    }
    out
}

/// Per-order fail-rate sentences grouped by combination.
pub fn fail_rate_table(records: &[ExperienceRecord]) -> String {
    let mut by_combo: BTreeMap<Vec<crate::model::Degradation>, Vec<ExperienceRecord>> = BTreeMap::new();
    for r in records {
        by_combo.entry(r.combination.clone()).or_default().push(r.clone());
    }
    let mut out = String::new();
    for recs in by_combo.values() {
        out.push_str(&crate::knowledge::render_experience(recs));
        out.push('\n');
    }
    out
}
