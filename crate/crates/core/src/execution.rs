//! Single-subtask execution and the tool adapter boundary.

use std::cmp::Ordering;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment, ExternalToolDecl};
use crate::model::{Degradation, DegradationProfile, Severity, TaskKind};
use crate::perception::{reflect, Evaluator, PerceptionError};
use crate::rng::Substream;

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("no tools registered for {0}")]
    NoTools(TaskKind),
    #[error("tool `{id}` failed: {message}")]
    Tool { id: String, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error("pick_best needs at least one candidate")]
    EmptyCandidates,
    #[error("invalid execution policy: {0}")]
    InvalidPolicy(String),
}

/// A restoration tool. `invoke` returns a new profile and must leave its
/// input untouched.
pub trait ToolAdapter: Send + Sync {
    fn id(&self) -> &str;
    fn task(&self) -> TaskKind;
    fn invoke(&self, profile: &DegradationProfile, stream: Substream) -> Result<DegradationProfile, ExecutionError>;
}

/// A tool backed by the simulated environment.
pub struct SimulatedTool {
    env: Arc<Environment>,
    index: usize,
}

impl ToolAdapter for SimulatedTool {
    fn id(&self) -> &str {
        &self.env.tools()[self.index].id
    }

    fn task(&self) -> TaskKind {
        self.env.tools()[self.index].task
    }

    fn invoke(&self, profile: &DegradationProfile, stream: Substream) -> Result<DegradationProfile, ExecutionError> {
        Ok(self.env.apply_tool(profile, &self.env.tools()[self.index], stream)?)
    }
}

/// Runs a shell command that reads the profile JSON at `{input}` and writes
/// the restored profile JSON to `{output}`. The stream key is exported as
/// `AGENTIR_SEED`.
#[derive(Debug, Clone)]
pub struct CommandTool {
    pub id: String,
    pub task: TaskKind,
    pub template: String,
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

impl ToolAdapter for CommandTool {
    fn id(&self) -> &str {
        &self.id
    }

    fn task(&self) -> TaskKind {
        self.task
    }

    fn invoke(&self, profile: &DegradationProfile, stream: Substream) -> Result<DegradationProfile, ExecutionError> {
        let fail = |message: String| ExecutionError::Tool {
            id: self.id.clone(),
            message,
        };
        let dir = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        let input = dir.path().join("input.json");
        let output = dir.path().join("output.json");
        let text = serde_json::to_string(profile).map_err(|e| fail(e.to_string()))?;
        std::fs::write(&input, text).map_err(|e| fail(e.to_string()))?;
        let cmd = self
            .template
            .replace("{input}", &shell_quote(&input))
            .replace("{output}", &shell_quote(&output));
        let out = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .env("AGENTIR_SEED", stream.key().to_string())
            .output()
            .map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let raw = std::fs::read_to_string(&output).map_err(|e| fail(format!("reading output: {e}")))?;
        serde_json::from_str(&raw).map_err(|e| fail(format!("output is not a profile: {e}")))
    }
}

/// Registered tools in registration order.
#[derive(Clone, Default)]
pub struct Toolbox {
    tools: Vec<Arc<dyn ToolAdapter>>,
}

impl Toolbox {
    pub fn new() -> Toolbox {
        Toolbox::default()
    }

    /// Every simulated tool of `env`, followed by `external` command tools.
    pub fn from_env(env: Arc<Environment>, external: &[ExternalToolDecl]) -> Toolbox {
        let mut tb = Toolbox::new();
        for index in 0..env.tools().len() {
            tb.push(Arc::new(SimulatedTool {
                env: env.clone(),
                index,
            }));
        }
        for d in external {
            tb.push(Arc::new(CommandTool {
                id: d.id.clone(),
                task: d.task,
                template: d.template.clone(),
            }));
        }
        tb
    }

    pub fn push(&mut self, tool: Arc<dyn ToolAdapter>) {
        self.tools.push(tool);
    }

    pub fn for_task(&self, task: TaskKind) -> Vec<Arc<dyn ToolAdapter>> {
        self.tools.iter().filter(|t| t.task() == task).cloned().collect()
    }

    pub fn has_task(&self, task: TaskKind) -> bool {
        self.tools.iter().any(|t| t.task() == task)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOrder {
    FixedRegistry,
    #[default]
    SeededShuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionPolicy {
    pub accept_now: Severity,
    pub accept_candidate: Severity,
    pub tool_order: ToolOrder,
    /// When false the first tool result is accepted without assessment.
    pub reflect: bool,
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        ExecutionPolicy {
            accept_now: Severity::VeryLow,
            accept_candidate: Severity::Low,
            tool_order: ToolOrder::SeededShuffle,
            reflect: true,
        }
    }
}

impl ExecutionPolicy {
    /// Only very low residual severity passes.
    pub fn strict() -> Self {
        ExecutionPolicy {
            accept_candidate: Severity::VeryLow,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExecutionError> {
        if self.accept_now > self.accept_candidate {
            return Err(ExecutionError::InvalidPolicy(format!(
                "accept_now ({}) is laxer than accept_candidate ({})",
                self.accept_now, self.accept_candidate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskOutcome {
    pub status: SubtaskStatus,
    pub result: DegradationProfile,
    /// Assessed severity of the task's degradation on `result`, if reflected.
    pub verdict: Option<Severity>,
    pub tools_tried: Vec<String>,
    pub invocations: u64,
    pub candidates_considered: u64,
    pub comparisons: u64,
}

impl SubtaskOutcome {
    pub fn passed(&self) -> bool {
        self.status == SubtaskStatus::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    First,
    Second,
}

/// Pairwise judge used by [`pick_best`]. `call` numbers the comparison.
pub trait Comparator {
    fn compare(&mut self, a: &DegradationProfile, b: &DegradationProfile, call: u64) -> Result<Winner, ExecutionError>;
}

impl<F> Comparator for F
where
    F: FnMut(&DegradationProfile, &DegradationProfile) -> Winner,
{
    fn compare(&mut self, a: &DegradationProfile, b: &DegradationProfile, _call: u64) -> Result<Winner, ExecutionError> {
        Ok(self(a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Picked {
    pub index: usize,
    pub comparisons: u64,
}

/// Linear scan keeping the pairwise winner: exactly `n - 1` comparisons.
pub fn pick_best(candidates: &[DegradationProfile], cmp: &mut dyn Comparator) -> Result<Picked, ExecutionError> {
    if candidates.is_empty() {
        return Err(ExecutionError::EmptyCandidates);
    }
    let mut best = 0;
    let mut comparisons = 0;
    for i in 1..candidates.len() {
        if cmp.compare(&candidates[best], &candidates[i], comparisons)? == Winner::Second {
            best = i;
        }
        comparisons += 1;
    }
    Ok(Picked {
        index: best,
        comparisons,
    })
}

/// Assessed severities of every degradation above `VeryLow`, worst first.
pub fn assessed_multiset(
    ev: &dyn Evaluator,
    profile: &DegradationProfile,
    stream: Substream,
) -> Result<Vec<Severity>, PerceptionError> {
    let mut out = Vec::new();
    for d in Degradation::ALL {
        let s = ev.assess(profile, d, stream.child(d.index() as u64))?;
        if s > Severity::VeryLow {
            out.push(s);
        }
    }
    out.sort_by(|a, b| b.cmp(a));
    Ok(out)
}

/// Evaluator-backed quality comparison: the lexicographically smaller
/// worst-first severity list wins, ties go to the first argument.
pub struct DefaultComparator<'a> {
    pub ev: &'a dyn Evaluator,
    pub stream: Substream,
}

impl Comparator for DefaultComparator<'_> {
    fn compare(&mut self, a: &DegradationProfile, b: &DegradationProfile, call: u64) -> Result<Winner, ExecutionError> {
        let s = self.stream.child(call);
        let ma = assessed_multiset(self.ev, a, s.child(0))?;
        let mb = assessed_multiset(self.ev, b, s.child(1))?;
        Ok(match ma.cmp(&mb) {
            Ordering::Greater => Winner::Second,
            _ => Winner::First,
        })
    }
}

pub fn default_comparator(ev: &dyn Evaluator, stream: Substream) -> DefaultComparator<'_> {
    DefaultComparator { ev, stream }
}

/// Tries tools for `task` on `profile` until one is accepted outright, then
/// settles on the best candidate or the best effort.
///
/// Stream layout: `child(0)` tool order, `child(1).child(k)` invocation k,
/// `child(2).child(k)` reflection k, `child(3)` comparisons.
pub fn execute_subtask(
    task: TaskKind,
    profile: &DegradationProfile,
    toolbox: &Toolbox,
    ev: &dyn Evaluator,
    policy: &ExecutionPolicy,
    stream: Substream,
) -> Result<SubtaskOutcome, ExecutionError> {
    policy.validate()?;
    let mut tools = toolbox.for_task(task);
    if tools.is_empty() {
        return Err(ExecutionError::NoTools(task));
    }
    if policy.tool_order == ToolOrder::SeededShuffle {
        tools.shuffle(&mut stream.child(0).rng());
    }

    let mut results: Vec<DegradationProfile> = Vec::new();
    let mut verdicts: Vec<Severity> = Vec::new();
    let mut tried = Vec::new();
    let mut candidates = Vec::new();
    for (k, tool) in tools.iter().enumerate() {
        let out = tool.invoke(profile, stream.child(1).child(k as u64))?;
        tried.push(tool.id().to_string());
        if !policy.reflect {
            return Ok(SubtaskOutcome {
                status: SubtaskStatus::Success,
                result: out,
                verdict: None,
                tools_tried: tried,
                invocations: 1,
                candidates_considered: 0,
                comparisons: 0,
            });
        }
        let sev = reflect(ev, &out, task, stream.child(2).child(k as u64))?;
        if sev <= policy.accept_now {
            return Ok(SubtaskOutcome {
                status: SubtaskStatus::Success,
                result: out,
                verdict: Some(sev),
                invocations: tried.len() as u64,
                tools_tried: tried,
                candidates_considered: candidates.len() as u64,
                comparisons: 0,
            });
        }
        if sev <= policy.accept_candidate {
            candidates.push(results.len());
        }
        results.push(out);
        verdicts.push(sev);
    }

    let (status, pool) = if candidates.is_empty() {
        (SubtaskStatus::Failure, (0..results.len()).collect::<Vec<_>>())
    } else {
        (SubtaskStatus::Success, candidates.clone())
    };
    let profiles: Vec<DegradationProfile> = pool.iter().map(|i| results[*i].clone()).collect();
    let picked = pick_best(&profiles, &mut default_comparator(ev, stream.child(3)))?;
    let chosen = pool[picked.index];
    Ok(SubtaskOutcome {
        status,
        result: results.swap_remove(chosen),
        verdict: Some(verdicts[chosen]),
        invocations: tried.len() as u64,
        tools_tried: tried,
        candidates_considered: candidates.len() as u64,
        comparisons: picked.comparisons,
    })
}
