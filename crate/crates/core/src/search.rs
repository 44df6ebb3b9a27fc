//! Depth-first search over subtask orders and the outer workflow loop.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment};
use crate::execution::{
    default_comparator, execute_subtask, pick_best, ExecutionError, ExecutionPolicy, SubtaskStatus, Toolbox,
};
use crate::knowledge::KnowledgeBase;
use crate::model::{permutations, Agenda, DegradationProfile, Plan, Severity, TaskKind};
use crate::perception::{evaluate_agenda, Evaluator, PerceptionError};
use crate::rng::Substream;
use crate::scheduling::{reschedule, validate_plan, ScheduleError, Scheduler};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Execution(#[from] ExecutionError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("brute force needs a deterministic environment")]
    NondeterministicEnv,
    #[error("agenda of {0} tasks is too large for brute force (max 4)")]
    AgendaTooLarge(usize),
}

/// Everything the search consults besides the profile.
pub struct SearchDeps<'a> {
    pub scheduler: &'a dyn Scheduler,
    pub evaluator: &'a dyn Evaluator,
    pub toolbox: &'a Toolbox,
    pub policy: ExecutionPolicy,
    pub kb: &'a KnowledgeBase,
    pub rollback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Full,
    NoReflection,
    NoRollback,
    NoRetrieval,
    StrictThreshold,
}

impl RunMode {
    pub const ALL: [RunMode; 5] = [
        RunMode::Full,
        RunMode::NoReflection,
        RunMode::NoRollback,
        RunMode::NoRetrieval,
        RunMode::StrictThreshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Full => "full",
            RunMode::NoReflection => "no-reflection",
            RunMode::NoRollback => "no-rollback",
            RunMode::NoRetrieval => "no-retrieval",
            RunMode::StrictThreshold => "strict-threshold",
        }
    }

    pub fn policy(self, base: ExecutionPolicy) -> ExecutionPolicy {
        match self {
            RunMode::NoReflection => ExecutionPolicy { reflect: false, ..base },
            RunMode::StrictThreshold => ExecutionPolicy {
                accept_now: Severity::VeryLow,
                accept_candidate: Severity::VeryLow,
                ..base
            },
            _ => base,
        }
    }

    pub fn rollback(self) -> bool {
        self != RunMode::NoRollback
    }

    /// False when the scheduler should ignore the knowledge base.
    pub fn retrieval(self) -> bool {
        self != RunMode::NoRetrieval
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = RunMode::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// A profile together with the subtasks that passed on the path producing
/// it and the first-level subtask of that path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotated {
    pub profile: DegradationProfile,
    pub completed: BTreeSet<TaskKind>,
    pub head: Option<TaskKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub subtask: TaskKind,
    pub status: SubtaskStatus,
    pub verdict: Option<Severity>,
    pub tools_tried: Vec<String>,
    pub invocations: u64,
    pub comparisons: u64,
    /// True when this branch completed the rest of the plan.
    pub succeeded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<Box<TraceNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescheduled_to: Option<Plan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// One expansion: a non-empty plan tried on one input profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub plan: Plan,
    pub input: DegradationProfile,
    pub branches: Vec<Branch>,
    pub success: bool,
    /// Index into the failed branches of the inferior kept, on failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picked: Option<usize>,
    #[serde(default)]
    pub pick_comparisons: u64,
}

impl TraceNode {
    fn walk<'a>(&'a self, out: &mut Vec<&'a TraceNode>) {
        out.push(self);
        for b in &self.branches {
            if let Some(c) = &b.child {
                c.walk(out);
            }
        }
    }

    pub fn nodes(&self) -> Vec<&TraceNode> {
        let mut out = Vec::new();
        self.walk(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compromise {
    pub consumed: TaskKind,
    pub completed: BTreeSet<TaskKind>,
    pub remaining: Plan,
}

/// One pass of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub plan: Plan,
    pub root: TraceNode,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compromise: Option<Compromise>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub rollbacks: u64,
    pub reschedules: u64,
    pub compromises: u64,
    pub invocations: u64,
    pub comparisons: u64,
    pub nodes_expanded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Compromise,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub status: RunStatus,
    pub agenda: Agenda,
    pub counters: Counters,
    pub tree: Vec<Iteration>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule_notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchTrace {
    pub fn recount(tree: &[Iteration]) -> Counters {
        let mut c = Counters::default();
        for it in tree {
            if it.compromise.is_some() {
                c.compromises += 1;
            }
            for n in it.root.nodes() {
                c.nodes_expanded += 1;
                c.rollbacks += n.branches.len().saturating_sub(1) as u64;
                c.comparisons += n.pick_comparisons;
                for b in &n.branches {
                    c.invocations += b.invocations;
                    c.comparisons += b.comparisons;
                    if b.rescheduled_to.is_some() {
                        c.reschedules += 1;
                    }
                }
            }
        }
        c
    }

    /// Checks that counters and status agree with the tree.
    pub fn verify(&self) -> Result<(), String> {
        let c = Self::recount(&self.tree);
        if c != self.counters {
            return Err(format!("counters {:?} differ from recount {:?}", self.counters, c));
        }
        let expected = if self.error.is_some() {
            RunStatus::Aborted
        } else if c.compromises == 0 && self.tree.iter().all(|i| i.success) {
            RunStatus::Success
        } else {
            RunStatus::Compromise
        };
        if expected != self.status {
            return Err(format!("status {:?} but tree implies {:?}", self.status, expected));
        }
        if self.tree.len() > self.agenda.len() {
            return Err(format!(
                "{} outer iterations for an agenda of {}",
                self.tree.len(),
                self.agenda.len()
            ));
        }
        Ok(())
    }
}

const PICK_STREAM: u64 = u64::MAX;

/// Depth-first search over orders of `plan` starting from `profile`.
///
/// Per attempt `i` the node stream's `child(i)` is split into execution
/// (`child(0)`), recursion (`child(1)`) and rescheduling (`child(2)`).
pub fn dfs(
    profile: &DegradationProfile,
    plan: &Plan,
    deps: &SearchDeps,
    stream: Substream,
) -> Result<(Annotated, bool, Option<TraceNode>), SearchError> {
    if plan.is_empty() {
        let done = Annotated {
            profile: profile.clone(),
            completed: BTreeSet::new(),
            head: None,
        };
        return Ok((done, true, None));
    }
    let (a, ok, node) = expand(profile, plan.clone(), deps, stream)?;
    Ok((a, ok, Some(node)))
}

fn expand(
    profile: &DegradationProfile,
    mut plan: Plan,
    deps: &SearchDeps,
    stream: Substream,
) -> Result<(Annotated, bool, TraceNode), SearchError> {
    let mut node = TraceNode {
        plan: plan.clone(),
        input: profile.clone(),
        branches: Vec::new(),
        success: false,
        picked: None,
        pick_comparisons: 0,
    };
    let mut attempts = BTreeSet::new();
    let mut inferiors: Vec<Annotated> = Vec::new();
    for i in 0u64.. {
        let s = plan.first().expect("plan is non-empty");
        let bs = stream.child(i);
        let out = execute_subtask(s, profile, deps.toolbox, deps.evaluator, &deps.policy, bs.child(0))?;
        let mut branch = Branch {
            subtask: s,
            status: out.status,
            verdict: out.verdict,
            tools_tried: out.tools_tried.clone(),
            invocations: out.invocations,
            comparisons: out.comparisons,
            succeeded: false,
            child: None,
            rescheduled_to: None,
            notes: Vec::new(),
        };
        if out.passed() {
            let (sub, ok, child) = dfs(&out.result, &plan.without(s), deps, bs.child(1))?;
            branch.child = child.map(Box::new);
            let mut completed = sub.completed;
            completed.insert(s);
            let annotated = Annotated {
                profile: sub.profile,
                completed,
                head: Some(s),
            };
            if ok {
                branch.succeeded = true;
                node.branches.push(branch);
                node.success = true;
                return Ok((annotated, true, node));
            }
            inferiors.push(annotated);
        } else {
            inferiors.push(Annotated {
                profile: out.result,
                completed: BTreeSet::new(),
                head: Some(s),
            });
        }
        attempts.insert(s);
        if attempts.len() < plan.len() {
            let next = reschedule(deps.scheduler, &plan, &attempts, deps.kb, bs.child(2))?;
            branch.rescheduled_to = Some(next.plan.clone());
            branch.notes = next.notes;
            plan = next.plan;
            node.branches.push(branch);
        } else {
            node.branches.push(branch);
            break;
        }
    }
    let profiles: Vec<DegradationProfile> = inferiors.iter().map(|a| a.profile.clone()).collect();
    let picked = pick_best(&profiles, &mut default_comparator(deps.evaluator, stream.child(PICK_STREAM)))?;
    node.picked = Some(picked.index);
    node.pick_comparisons = picked.comparisons;
    Ok((inferiors.swap_remove(picked.index), false, node))
}

/// Executes `plan` in order without rollback, keeping best-effort results.
fn straight_line(
    profile: &DegradationProfile,
    plan: &Plan,
    deps: &SearchDeps,
    stream: Substream,
) -> Result<(Annotated, bool, Option<TraceNode>), SearchError> {
    let Some(s) = plan.first() else {
        let done = Annotated {
            profile: profile.clone(),
            completed: BTreeSet::new(),
            head: None,
        };
        return Ok((done, true, None));
    };
    let out = execute_subtask(s, profile, deps.toolbox, deps.evaluator, &deps.policy, stream.child(0).child(0))?;
    let passed = out.passed();
    let (sub, ok, child) = straight_line(&out.result, &plan.without(s), deps, stream.child(0).child(1))?;
    let mut completed = sub.completed;
    if passed {
        completed.insert(s);
    }
    let success = passed && ok;
    let node = TraceNode {
        plan: plan.clone(),
        input: profile.clone(),
        branches: vec![Branch {
            subtask: s,
            status: out.status,
            verdict: out.verdict,
            tools_tried: out.tools_tried,
            invocations: out.invocations,
            comparisons: out.comparisons,
            succeeded: success,
            child: child.map(Box::new),
            rescheduled_to: None,
            notes: Vec::new(),
        }],
        success,
        picked: None,
        pick_comparisons: 0,
    };
    let annotated = Annotated {
        profile: sub.profile,
        completed,
        head: Some(s),
    };
    Ok((annotated, success, Some(node)))
}

/// Ground-truth restoration: no degradation above `Low`.
pub fn restored(profile: &DegradationProfile) -> bool {
    profile.max_severity() <= Severity::Low
}

/// Evaluate, schedule, search; on failure accept the best inferior and
/// continue with what is left of the plan.
///
/// Stream layout: `child(0)` agenda, `child(1)` schedule, `child(2).child(k)`
/// outer iteration `k`.
pub fn run_workflow(
    input: &DegradationProfile,
    deps: &SearchDeps,
    stream: Substream,
) -> (DegradationProfile, SearchTrace) {
    let mut trace = SearchTrace {
        status: RunStatus::Success,
        agenda: Agenda::default(),
        counters: Counters::default(),
        tree: Vec::new(),
        schedule_notes: Vec::new(),
        error: None,
    };
    let mut current = input.clone();
    if let Err(e) = outer_loop(&mut current, &mut trace, deps, stream) {
        trace.error = Some(e.to_string());
    }
    trace.counters = SearchTrace::recount(&trace.tree);
    trace.status = if trace.error.is_some() {
        RunStatus::Aborted
    } else if trace.counters.compromises == 0 && trace.tree.iter().all(|i| i.success) {
        RunStatus::Success
    } else {
        RunStatus::Compromise
    };
    (current, trace)
}

fn outer_loop(
    current: &mut DegradationProfile,
    trace: &mut SearchTrace,
    deps: &SearchDeps,
    stream: Substream,
) -> Result<(), SearchError> {
    let agenda = evaluate_agenda(deps.evaluator, current, stream.child(0))?;
    trace.agenda = agenda.clone();
    if agenda.is_empty() {
        return Ok(());
    }
    let none = BTreeSet::new();
    let first = deps.scheduler.schedule(agenda.tasks(), deps.kb, &none, stream.child(1))?;
    validate_plan(agenda.tasks(), &none, &first.plan)?;
    trace.schedule_notes = first.notes;
    let mut plan = first.plan;
    let mut k = 0;
    while !plan.is_empty() {
        let s = stream.child(2).child(k);
        let (best, ok, root) = if deps.rollback {
            dfs(current, &plan, deps, s)?
        } else {
            straight_line(current, &plan, deps, s)?
        };
        let root = root.expect("plan is non-empty");
        *current = best.profile;
        if ok || !deps.rollback {
            trace.tree.push(Iteration {
                plan,
                root,
                success: ok,
                compromise: None,
            });
            return Ok(());
        }
        let consumed = best.head.expect("failed search has a head");
        let remaining: Vec<TaskKind> = plan
            .tasks()
            .iter()
            .copied()
            .filter(|t| *t != consumed && !best.completed.contains(t))
            .collect();
        let remaining = Plan::new(remaining).expect("subset of a plan");
        trace.tree.push(Iteration {
            plan,
            root,
            success: false,
            compromise: Some(Compromise {
                consumed,
                completed: best.completed,
                remaining: remaining.clone(),
            }),
        });
        plan = remaining;
        k += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub success: bool,
    /// Order and tool ids of the first passing sequence found.
    pub witness: Option<Vec<(TaskKind, String)>>,
}

/// Exhaustive check over every order of `agenda` and every tool choice per
/// step: does some sequence pass every reflection (ground-truth severity
/// within `policy.accept_candidate`)?
pub fn brute_force_oracle(
    profile: &DegradationProfile,
    agenda: &[TaskKind],
    env: &Environment,
    policy: &ExecutionPolicy,
) -> Result<OracleVerdict, SearchError> {
    if !env.is_deterministic() {
        return Err(SearchError::NondeterministicEnv);
    }
    if agenda.len() > 4 {
        return Err(SearchError::AgendaTooLarge(agenda.len()));
    }
    let mut sorted = agenda.to_vec();
    sorted.sort();
    for order in permutations(&sorted) {
        let mut path = Vec::new();
        if try_order(profile, &order, env, policy, &mut path)? {
            return Ok(OracleVerdict {
                success: true,
                witness: Some(path),
            });
        }
    }
    Ok(OracleVerdict {
        success: false,
        witness: None,
    })
}

fn try_order(
    state: &DegradationProfile,
    order: &[TaskKind],
    env: &Environment,
    policy: &ExecutionPolicy,
    path: &mut Vec<(TaskKind, String)>,
) -> Result<bool, SearchError> {
    let Some((&task, rest)) = order.split_first() else {
        return Ok(true);
    };
    for tool in env.tools_for(task) {
        let next = env.apply_tool(state, tool, Substream::root(0))?;
        if next.severity(task.degradation()) <= policy.accept_candidate {
            path.push((task, tool.id.clone()));
            if try_order(&next, rest, env, policy, path)? {
                return Ok(true);
            }
            path.pop();
        }
    }
    Ok(false)
}
