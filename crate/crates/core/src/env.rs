//! Simulated restoration environment.
//!
//! Tools are stochastic operators on [`DegradationProfile`]s. Two
//! calibration modes exist: `Mechanistic`, where every tool has a base
//! outcome distribution that context-dependent [`InteractionRule`]s skew,
//! and `Tabular`, where the probability that a degradation survives its
//! task is read from a per-(combination, order) table.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Degradation, DegradationProfile, Severity, TaskKind};
use crate::rng::Substream;

const PROB_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("tool `{0}` is not registered in this environment")]
    UnknownTool(String),
    #[error("tool `{id}`: {reason}")]
    InvalidDistribution { id: String, reason: String },
    #[error("invalid calibration entry: {0}")]
    InvalidCalibration(String),
    #[error("no calibration data covers {0}")]
    Uncalibrated(Degradation),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("invalid environment config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    FullSuccess,
    PartialSuccess,
    NoEffect,
}

/// Outcome probabilities of one invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDist {
    pub full: f64,
    pub partial: f64,
    pub none: f64,
}

impl OutcomeDist {
    pub const ALWAYS: OutcomeDist = OutcomeDist {
        full: 1.0,
        partial: 0.0,
        none: 0.0,
    };
    pub const NEVER: OutcomeDist = OutcomeDist {
        full: 0.0,
        partial: 0.0,
        none: 1.0,
    };
    pub const PARTIAL: OutcomeDist = OutcomeDist {
        full: 0.0,
        partial: 1.0,
        none: 0.0,
    };

    pub fn new(full: f64, partial: f64, none: f64) -> OutcomeDist {
        OutcomeDist {
            full,
            partial,
            none,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("full", self.full), ("partial", self.partial), ("none", self.none)] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(format!("probability `{name}` = {p} outside [0, 1]"));
            }
        }
        let total = self.full + self.partial + self.none;
        if (total - 1.0).abs() > PROB_EPS {
            return Err(format!("outcome probabilities sum to {total}, not 1"));
        }
        Ok(())
    }

    /// Moves up to `delta` of success mass onto `NoEffect`, proportionally
    /// from full and partial success, then renormalizes.
    pub fn fail_boost(self, delta: f64) -> OutcomeDist {
        let success = self.full + self.partial;
        let moved = delta.clamp(0.0, 1.0).min(success);
        let (mut full, mut partial) = (self.full, self.partial);
        if success > 0.0 {
            full -= moved * self.full / success;
            partial -= moved * self.partial / success;
        }
        let d = OutcomeDist {
            full: full.max(0.0),
            partial: partial.max(0.0),
            none: (self.none + moved).max(0.0),
        };
        let total = d.full + d.partial + d.none;
        OutcomeDist {
            full: d.full / total,
            partial: d.partial / total,
            none: d.none / total,
        }
    }

    pub fn sample(&self, u: f64) -> Outcome {
        if u < self.full {
            Outcome::FullSuccess
        } else if u < self.full + self.partial {
            Outcome::PartialSuccess
        } else {
            Outcome::NoEffect
        }
    }

    pub fn is_degenerate(&self) -> bool {
        [self.full, self.partial, self.none]
            .iter()
            .any(|p| (p - 1.0).abs() <= PROB_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: String,
    pub task: TaskKind,
    pub outcome: OutcomeDist,
}

impl ToolSpec {
    pub fn new(id: impl Into<String>, task: TaskKind, outcome: OutcomeDist) -> ToolSpec {
        ToolSpec {
            id: id.into(),
            task,
            outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    DegradationPresent {
        degradation: Degradation,
        min_severity: Severity,
    },
    TaskInHistory {
        task: TaskKind,
    },
}

impl Condition {
    pub fn holds(&self, state: &DegradationProfile) -> bool {
        match self {
            Condition::DegradationPresent {
                degradation,
                min_severity,
            } => state.severity(*degradation) >= *min_severity,
            Condition::TaskInHistory { task } => state.task_in_history(*task),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    FailBoost {
        delta: f64,
    },
    SideEffect {
        degradation: Degradation,
        levels: u8,
        probability: f64,
    },
}

/// Context-conditioned modifier for every tool of `task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRule {
    pub task: TaskKind,
    pub condition: Condition,
    pub effect: Effect,
}

impl InteractionRule {
    pub fn fail_boost(task: TaskKind, condition: Condition, delta: f64) -> Self {
        InteractionRule {
            task,
            condition,
            effect: Effect::FailBoost { delta },
        }
    }

    pub fn side_effect(
        task: TaskKind,
        condition: Condition,
        degradation: Degradation,
        levels: u8,
        probability: f64,
    ) -> Self {
        InteractionRule {
            task,
            condition,
            effect: Effect::SideEffect {
                degradation,
                levels,
                probability,
            },
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        match &self.effect {
            Effect::FailBoost { delta } if !(0.0..=1.0).contains(delta) => Err(
                EnvError::InvalidRule(format!("fail boost delta {delta} outside [0, 1]")),
            ),
            Effect::SideEffect { levels: 0, .. } => {
                Err(EnvError::InvalidRule("side effect must raise by at least one level".into()))
            }
            Effect::SideEffect { probability, .. } if !(0.0..=1.0).contains(probability) => Err(
                EnvError::InvalidRule(format!("side effect probability {probability} outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

/// Fail probability of every degradation for one execution order of one
/// combination. The failure of a degradation is attributed to the step that
/// executes its task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEntry {
    pub combination: Vec<Degradation>,
    pub order: Vec<TaskKind>,
    pub fail: BTreeMap<Degradation, f64>,
}

impl TabularEntry {
    pub fn new(order: Vec<TaskKind>, fail: &[(Degradation, f64)]) -> TabularEntry {
        let mut combination: Vec<Degradation> = order.iter().map(|t| t.degradation()).collect();
        combination.sort();
        TabularEntry {
            combination,
            order,
            fail: fail.iter().copied().collect(),
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        let mut sorted = self.combination.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.combination {
            return Err(EnvError::InvalidCalibration(
                "combination must be sorted and duplicate-free".into(),
            ));
        }
        let mut order_degs: Vec<Degradation> = self.order.iter().map(|t| t.degradation()).collect();
        order_degs.sort();
        if order_degs != self.combination {
            return Err(EnvError::InvalidCalibration(format!(
                "order {:?} is not a permutation of the combination's tasks",
                self.order
            )));
        }
        let keys: Vec<Degradation> = self.fail.keys().copied().collect();
        if keys != self.combination {
            return Err(EnvError::InvalidCalibration(
                "fail probabilities must cover exactly the combination".into(),
            ));
        }
        if let Some((d, p)) = self.fail.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(EnvError::InvalidCalibration(format!(
                "fail probability {p} for {d} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TabularCalibration {
    pub entries: Vec<TabularEntry>,
}

impl TabularCalibration {
    pub fn new(entries: Vec<TabularEntry>) -> Result<Self, EnvError> {
        let cal = TabularCalibration { entries };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            e.validate()?;
            if !seen.insert(e.order.clone()) {
                return Err(EnvError::InvalidCalibration(format!(
                    "duplicate entry for order {:?}",
                    e.order
                )));
            }
        }
        Ok(())
    }

    pub fn lookup(&self, order: &[TaskKind]) -> Option<&TabularEntry> {
        self.entries.iter().find(|e| e.order == order)
    }

    pub fn tasks(&self) -> BTreeSet<TaskKind> {
        self.entries
            .iter()
            .flat_map(|e| e.order.iter().copied())
            .collect()
    }

    /// Fail probability of `target` when its task runs at the end of
    /// `prefix` within `combination`. Entries whose order extends the prefix
    /// are averaged; without any, the marginal over all entries mentioning
    /// the degradation is used.
    pub fn fail_probability(
        &self,
        combination: &BTreeSet<Degradation>,
        prefix: &[TaskKind],
        target: Degradation,
    ) -> Result<f64, EnvError> {
        let mean = |it: &mut dyn Iterator<Item = f64>| {
            let (sum, n) = it.fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
            (n > 0).then(|| sum / n as f64)
        };
        let exact = mean(&mut self.entries.iter().filter_map(|e| {
            let same_set = e.combination.len() == combination.len()
                && e.combination.iter().all(|d| combination.contains(d));
            (same_set && e.order.starts_with(prefix))
                .then(|| e.fail.get(&target).copied())
                .flatten()
        }));
        if let Some(p) = exact {
            return Ok(p);
        }
        mean(&mut self.entries.iter().filter_map(|e| e.fail.get(&target).copied()))
            .ok_or(EnvError::Uncalibrated(target))
    }
}

/// Fail rates transcribed from the self-exploration statistics of the eight
/// group-A combinations, both execution orders each.
pub fn paper_calibration() -> TabularCalibration {
    use Degradation::*;
    use TaskKind::*;
    let rows = vec![
        TabularEntry::new(vec![Denoising, Brightening], &[(LowLight, 0.22), (Noise, 0.43)]),
        TabularEntry::new(vec![Brightening, Denoising], &[(LowLight, 0.28), (Noise, 0.42)]),
        TabularEntry::new(vec![DefocusDeblurring, Dehazing], &[(DefocusBlur, 0.0), (Haze, 0.36)]),
        TabularEntry::new(vec![Dehazing, DefocusDeblurring], &[(DefocusBlur, 0.0), (Haze, 0.40)]),
        TabularEntry::new(
            vec![JpegArtifactRemoval, DefocusDeblurring],
            &[(DefocusBlur, 0.10), (JpegArtifact, 0.31)],
        ),
        TabularEntry::new(
            vec![DefocusDeblurring, JpegArtifactRemoval],
            &[(DefocusBlur, 0.08), (JpegArtifact, 0.48)],
        ),
        TabularEntry::new(vec![MotionDeblurring, Brightening], &[(MotionBlur, 0.22), (LowLight, 0.25)]),
        TabularEntry::new(vec![Brightening, MotionDeblurring], &[(MotionBlur, 0.28), (LowLight, 0.25)]),
        TabularEntry::new(
            vec![MotionDeblurring, SuperResolution],
            &[(MotionBlur, 0.23), (LowResolution, 0.09)],
        ),
        TabularEntry::new(
            vec![SuperResolution, MotionDeblurring],
            &[(MotionBlur, 0.31), (LowResolution, 0.06)],
        ),
        TabularEntry::new(vec![Denoising, JpegArtifactRemoval], &[(Noise, 0.38), (JpegArtifact, 0.13)]),
        TabularEntry::new(vec![JpegArtifactRemoval, Denoising], &[(Noise, 0.38), (JpegArtifact, 0.14)]),
        TabularEntry::new(vec![Deraining, Dehazing], &[(Rain, 0.05), (Haze, 0.37)]),
        TabularEntry::new(vec![Dehazing, Deraining], &[(Rain, 0.25), (Haze, 0.24)]),
        TabularEntry::new(vec![Deraining, SuperResolution], &[(Rain, 0.26), (LowResolution, 0.02)]),
        TabularEntry::new(vec![SuperResolution, Deraining], &[(Rain, 0.63), (LowResolution, 0.0)]),
    ];
    TabularCalibration { entries: rows }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvMode {
    Mechanistic { rules: Vec<InteractionRule> },
    Tabular { calibration: TabularCalibration },
}

/// Immutable after construction; safe to share between worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    mode: EnvMode,
    tools: Vec<ToolSpec>,
    pub seed: u64,
}

pub fn tool_slug(task: TaskKind) -> String {
    task.name().replace(' ', "-")
}

impl Environment {
    pub fn mechanistic(
        tools: Vec<ToolSpec>,
        rules: Vec<InteractionRule>,
        seed: u64,
    ) -> Result<Environment, EnvError> {
        let mut ids = BTreeSet::new();
        for t in &tools {
            t.outcome.validate().map_err(|reason| EnvError::InvalidDistribution {
                id: t.id.clone(),
                reason,
            })?;
            if !ids.insert(t.id.as_str()) {
                return Err(EnvError::Config(format!("duplicate tool id `{}`", t.id)));
            }
        }
        for r in &rules {
            r.validate()?;
        }
        Ok(Environment {
            mode: EnvMode::Mechanistic { rules },
            tools,
            seed,
        })
    }

    /// Tabular environments get `tools_per_task` interchangeable tools for
    /// every task the table mentions.
    pub fn tabular(
        calibration: TabularCalibration,
        tools_per_task: usize,
        seed: u64,
    ) -> Result<Environment, EnvError> {
        calibration.validate()?;
        if tools_per_task == 0 {
            return Err(EnvError::Config("tools_per_task must be at least 1".into()));
        }
        let tools = calibration
            .tasks()
            .into_iter()
            .flat_map(|task| {
                (1..=tools_per_task).map(move |k| {
                    ToolSpec::new(format!("{}-{k}", tool_slug(task)), task, OutcomeDist::ALWAYS)
                })
            })
            .collect();
        Ok(Environment {
            mode: EnvMode::Tabular { calibration },
            tools,
            seed,
        })
    }

    pub fn mode(&self) -> &EnvMode {
        &self.mode
    }

    pub fn tools(&self) -> &[ToolSpec] {
        &self.tools
    }

    pub fn tools_for(&self, task: TaskKind) -> Vec<&ToolSpec> {
        self.tools.iter().filter(|t| t.task == task).collect()
    }

    pub fn tool(&self, id: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.id == id)
    }

    /// Outcome distribution `tool` would sample from on `state`, after all
    /// matching fail boosts in registration order.
    pub fn outcome_distribution(
        &self,
        state: &DegradationProfile,
        tool: &ToolSpec,
    ) -> Result<OutcomeDist, EnvError> {
        match &self.mode {
            EnvMode::Mechanistic { rules } => Ok(rules
                .iter()
                .filter(|r| r.task == tool.task && r.condition.holds(state))
                .fold(tool.outcome, |dist, r| match r.effect {
                    Effect::FailBoost { delta } => dist.fail_boost(delta),
                    Effect::SideEffect { .. } => dist,
                })),
            EnvMode::Tabular { calibration } => {
                let target = tool.task.degradation();
                let mut combination: BTreeSet<Degradation> = state.present().collect();
                let mut prefix: Vec<TaskKind> = Vec::new();
                for step in &state.history {
                    combination.insert(step.task.degradation());
                    if !prefix.contains(&step.task) {
                        prefix.push(step.task);
                    }
                }
                combination.insert(target);
                if !prefix.contains(&tool.task) {
                    prefix.push(tool.task);
                }
                let fail = calibration.fail_probability(&combination, &prefix, target)?;
                Ok(OutcomeDist::new(1.0 - fail, 0.0, fail))
            }
        }
    }

    /// Applies `tool` to a copy of `state`. All randomness comes from
    /// `stream`; the input is never modified.
    pub fn apply_tool(
        &self,
        state: &DegradationProfile,
        tool: &ToolSpec,
        stream: Substream,
    ) -> Result<DegradationProfile, EnvError> {
        if !self.tools.iter().any(|t| t == tool) {
            return Err(EnvError::UnknownTool(tool.id.clone()));
        }
        let dist = self.outcome_distribution(state, tool)?;
        let mut rng = stream.rng();
        let target = tool.task.degradation();
        let mut next = state.clone();
        match dist.sample(rng.random::<f64>()) {
            Outcome::FullSuccess => next.set(target, Severity::VeryLow),
            Outcome::PartialSuccess => next.set(target, state.severity(target).min(Severity::Low)),
            Outcome::NoEffect => {}
        }
        if let EnvMode::Mechanistic { rules } = &self.mode {
            for r in rules.iter().filter(|r| r.task == tool.task && r.condition.holds(state)) {
                if let Effect::SideEffect {
                    degradation,
                    levels,
                    probability,
                } = r.effect
                {
                    if rng.random::<f64>() < probability {
                        next.set(degradation, next.severity(degradation).raised(levels));
                    }
                }
            }
        }
        next.record(tool.task, tool.id.clone());
        Ok(next)
    }

    /// True when every outcome is fixed regardless of the random stream.
    pub fn is_deterministic(&self) -> bool {
        match &self.mode {
            EnvMode::Mechanistic { rules } => {
                self.tools.iter().all(|t| t.outcome.is_degenerate())
                    && rules.iter().all(|r| match r.effect {
                        Effect::FailBoost { delta } => delta == 0.0 || delta >= 1.0,
                        Effect::SideEffect { probability, .. } => {
                            probability == 0.0 || probability == 1.0
                        }
                    })
            }
            EnvMode::Tabular { calibration } => calibration
                .entries
                .iter()
                .all(|e| e.fail.values().all(|p| *p == 0.0 || *p == 1.0)),
        }
    }
}

/// Environment with a strong and a weak tool per task and the interaction
/// rules below. Group-C mixtures get nontrivial order structure from them.
pub fn default_mechanistic_env(seed: u64) -> Environment {
    use Degradation::*;
    use TaskKind::*;
    let mut tools = Vec::new();
    for task in TaskKind::ALL {
        tools.push(ToolSpec::new(
            format!("{}-strong", tool_slug(task)),
            task,
            OutcomeDist::new(0.75, 0.15, 0.10),
        ));
        tools.push(ToolSpec::new(
            format!("{}-weak", tool_slug(task)),
            task,
            OutcomeDist::new(0.45, 0.30, 0.25),
        ));
    }
    let present = |d| Condition::DegradationPresent {
        degradation: d,
        min_severity: Severity::Medium,
    };
    let lingering = |d| Condition::DegradationPresent {
        degradation: d,
        min_severity: Severity::Low,
    };
    let rules = vec![
        // dehazing breaks down on noisy input
        InteractionRule::fail_boost(Dehazing, present(Noise), 0.5),
        // super-resolution bakes rain streaks in
        InteractionRule::fail_boost(Deraining, Condition::TaskInHistory { task: SuperResolution }, 0.6),
        // sharpening exaggerates blocking
        InteractionRule::side_effect(MotionDeblurring, lingering(JpegArtifact), JpegArtifact, 1, 0.5),
        InteractionRule::fail_boost(DefocusDeblurring, present(JpegArtifact), 0.35),
        InteractionRule::fail_boost(Brightening, present(Noise), 0.3),
        InteractionRule::side_effect(Brightening, lingering(Noise), Noise, 1, 0.4),
        InteractionRule::fail_boost(SuperResolution, present(MotionBlur), 0.35),
        InteractionRule::fail_boost(SuperResolution, present(DefocusBlur), 0.3),
        InteractionRule::fail_boost(Dehazing, present(Rain), 0.3),
        InteractionRule::side_effect(SuperResolution, lingering(Noise), Noise, 1, 0.5),
    ];
    Environment::mechanistic(tools, rules, seed).expect("built-in environment is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Mechanistic,
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    #[default]
    Simulated,
    Command,
}

/// One `tools` entry of the environment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolEntry {
    pub id: String,
    pub task: TaskKind,
    #[serde(default)]
    pub kind: ToolKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeDist>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

/// An external tool declared in config and run through a command adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalToolDecl {
    pub id: String,
    pub task: TaskKind,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CalibrationSource {
    Named(String),
    Inline(TabularCalibration),
}

fn default_tools_per_task() -> usize {
    3
}

/// The environment part of a config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub mode: ModeName,
    /// `"default"` starts from [`default_mechanistic_env`]; listed tools and
    /// rules are appended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub tools: Vec<ToolEntry>,
    #[serde(default)]
    pub rules: Vec<InteractionRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSource>,
    #[serde(default = "default_tools_per_task")]
    pub tools_per_task: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EnvConfig {
    pub fn build(&self) -> Result<(Environment, Vec<ExternalToolDecl>), EnvError> {
        let mut simulated = Vec::new();
        let mut external = Vec::new();
        for entry in &self.tools {
            match entry.kind {
                ToolKind::Simulated => {
                    let outcome = entry.outcome.ok_or_else(|| {
                        EnvError::Config(format!("tools.{}: simulated tool needs `outcome`", entry.id))
                    })?;
                    simulated.push(ToolSpec::new(entry.id.clone(), entry.task, outcome));
                }
                ToolKind::Command => {
                    let template = entry.template.clone().ok_or_else(|| {
                        EnvError::Config(format!("tools.{}: command tool needs `template`", entry.id))
                    })?;
                    external.push(ExternalToolDecl {
                        id: entry.id.clone(),
                        task: entry.task,
                        template,
                    });
                }
            }
        }
        let env = match self.mode {
            ModeName::Mechanistic => {
                let (mut tools, mut rules) = match self.preset.as_deref() {
                    None => (Vec::new(), Vec::new()),
                    Some("default") => {
                        let base = default_mechanistic_env(self.seed);
                        let EnvMode::Mechanistic { rules } = base.mode else {
                            unreachable!()
                        };
                        (base.tools, rules)
                    }
                    Some(other) => {
                        return Err(EnvError::Config(format!("preset: unknown preset `{other}`")))
                    }
                };
                tools.extend(simulated);
                rules.extend(self.rules.iter().cloned());
                Environment::mechanistic(tools, rules, self.seed)?
            }
            ModeName::Tabular => {
                if !simulated.is_empty() || !self.rules.is_empty() {
                    return Err(EnvError::Config(
                        "tabular mode takes no simulated tools or rules".into(),
                    ));
                }
                let calibration = match &self.calibration {
                    Some(CalibrationSource::Named(name)) if name == "reported" => paper_calibration(),
                    Some(CalibrationSource::Named(name)) => {
                        return Err(EnvError::Config(format!(
                            "calibration: unknown named calibration `{name}`"
                        )))
                    }
                    Some(CalibrationSource::Inline(cal)) => cal.clone(),
                    None => {
                        return Err(EnvError::Config("calibration: required in tabular mode".into()))
                    }
                };
                Environment::tabular(calibration, self.tools_per_task, self.seed)?
            }
        };
        Ok((env, external))
    }
}
