//! Exhaustive self-exploration of subtask orders.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{ExecutionError, Toolbox};
use crate::knowledge::{aggregate, KnowledgeBase, KnowledgeError, Trial};
use crate::model::{builtin_combinations, permutations, DegradationCombination, DegradationProfile, Group, Severity, TaskKind};
use crate::perception::{Evaluator, PerceptionError};
use crate::rng::Substream;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("no tools registered for {0}")]
    MissingTools(TaskKind),
    #[error("invalid exploration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Execution(#[from] ExecutionError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn group_a() -> Vec<DegradationCombination> {
    builtin_combinations().into_iter().filter(|c| c.group == Group::A).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub combinations: Vec<DegradationCombination>,
    pub samples_per_combination: u64,
    pub trials_per_sample: u64,
    pub success_threshold: Severity,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            combinations: group_a(),
            samples_per_combination: 20,
            trials_per_sample: 1,
            success_threshold: Severity::Low,
            seed: 0,
            parallel: true,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<(), ExploreError> {
        if self.samples_per_combination == 0 {
            return Err(ExploreError::InvalidConfig("samples_per_combination must be at least 1".into()));
        }
        if self.trials_per_sample == 0 {
            return Err(ExploreError::InvalidConfig("trials_per_sample must be at least 1".into()));
        }
        if self.success_threshold > Severity::Low {
            return Err(ExploreError::InvalidConfig(format!(
                "success_threshold must be very low or low, got {}",
                self.success_threshold
            )));
        }
        Ok(())
    }

    pub fn expected_trials(&self) -> u64 {
        self.combinations
            .iter()
            .map(|c| permutations(&c.degradations).len() as u64)
            .sum::<u64>()
            * self.samples_per_combination
            * self.trials_per_sample
    }

    pub fn provenance(&self) -> String {
        let labels: Vec<String> = self.combinations.iter().map(|c| c.label()).collect();
        format!(
            "explore seed={} samples={} trials={} threshold={} combinations=[{}]",
            self.seed,
            self.samples_per_combination,
            self.trials_per_sample,
            self.success_threshold,
            labels.join(", ")
        )
    }
}

/// A sample's starting profile: every degradation of `combo` at a uniform
/// severity in `Medium..=VeryHigh`.
pub fn sample_profile(combo: &DegradationCombination, sample: u64, stream: Substream) -> DegradationProfile {
    let mut rng = stream.rng();
    let mut p = DegradationProfile::new(format!("{}#{sample}", combo.label()));
    for d in &combo.degradations {
        p.set(*d, Severity::from_level(rng.random_range(2..=4)));
    }
    p
}

const PROFILE_STREAM: u64 = u64::MAX;

struct Job {
    ci: usize,
    sample: u64,
    order: Vec<TaskKind>,
    pi: u64,
    trial: u64,
}

/// Runs `order` straight through with one uniformly chosen tool per step,
/// then judges every task on the final profile.
///
/// Stream layout: `child(0).child(step)` per step (tool choice, then tool),
/// `child(1)` for judging.
pub fn run_trial(
    combo: &DegradationCombination,
    start: &DegradationProfile,
    order: &[TaskKind],
    toolbox: &Toolbox,
    ev: &dyn Evaluator,
    threshold: Severity,
    stream: Substream,
) -> Result<Trial, ExploreError> {
    let mut state = start.clone();
    for (step, task) in order.iter().enumerate() {
        let tools = toolbox.for_task(*task);
        if tools.is_empty() {
            return Err(ExploreError::MissingTools(*task));
        }
        let s = stream.child(0).child(step as u64);
        let pick = s.child(0).rng().random_range(0..tools.len());
        state = tools[pick].invoke(&state, s.child(1))?;
    }
    let judge = stream.child(1);
    let mut success = std::collections::BTreeMap::new();
    for d in &combo.degradations {
        let sev = ev.assess(&state, *d, judge.child(d.index() as u64))?;
        success.insert(d.task(), sev <= threshold);
    }
    Ok(Trial {
        combination: combo.sorted(),
        order: order.to_vec(),
        success,
    })
}

/// Every permutation of every combination over sampled profiles. Trial
/// `(c, s, p, t)` draws from `root.child(c).child(s).child(p).child(t)`;
/// output order is the same serial or parallel.
pub fn explore(toolbox: &Toolbox, cfg: &ExplorationConfig, ev: &dyn Evaluator) -> Result<Vec<Trial>, ExploreError> {
    cfg.validate()?;
    for combo in &cfg.combinations {
        for t in combo.tasks() {
            if !toolbox.has_task(t) {
                return Err(ExploreError::MissingTools(t));
            }
        }
    }
    let root = Substream::root(cfg.seed);
    let mut jobs = Vec::new();
    for (ci, combo) in cfg.combinations.iter().enumerate() {
        let mut tasks = combo.tasks();
        tasks.sort();
        let orders = permutations(&tasks);
        for sample in 0..cfg.samples_per_combination {
            for (pi, order) in orders.iter().enumerate() {
                for trial in 0..cfg.trials_per_sample {
                    jobs.push(Job {
                        ci,
                        sample,
                        order: order.clone(),
                        pi: pi as u64,
                        trial,
                    });
                }
            }
        }
    }
    let run = |job: &Job| {
        let combo = &cfg.combinations[job.ci];
        let base = root.child(job.ci as u64).child(job.sample);
        let start = sample_profile(combo, job.sample, base.child(PROFILE_STREAM));
        let stream = base.child(job.pi).child(job.trial);
        run_trial(combo, &start, &job.order, toolbox, ev, cfg.success_threshold, stream)
    };
    if cfg.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    }
}

pub fn explore_and_build_kb(
    toolbox: &Toolbox,
    cfg: &ExplorationConfig,
    ev: &dyn Evaluator,
) -> Result<KnowledgeBase, ExploreError> {
    let trials = explore(toolbox, cfg, ev)?;
    Ok(KnowledgeBase::from_records(aggregate(&trials)?, cfg.provenance())?)
}

pub fn write_jsonl(trials: &[Trial], path: &Path) -> Result<(), ExploreError> {
    let io = |e: std::io::Error| ExploreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for t in trials {
        let line = serde_json::to_string(t).expect("trials serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trial>, ExploreError> {
    let io = |e: std::io::Error| ExploreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let trial = serde_json::from_str(&line).map_err(|e| ExploreError::Io {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(trial);
    }
    Ok(out)
}
