#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use agentir::env::{Condition, Environment, InteractionRule, OutcomeDist, ToolSpec};
use agentir::execution::{ExecutionError, ExecutionPolicy, ToolAdapter, ToolOrder, Toolbox};
use agentir::model::{Degradation, DegradationProfile, Severity, TaskKind};
use agentir::rng::Substream;
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn fixed_policy() -> ExecutionPolicy {
    ExecutionPolicy {
        tool_order: ToolOrder::FixedRegistry,
        ..Default::default()
    }
}

/// A random mechanistic environment whose outcomes do not depend on the
/// random stream, plus a profile whose agenda is the chosen tasks.
pub struct Instance {
    pub env: Arc<Environment>,
    pub profile: DegradationProfile,
    pub agenda: Vec<TaskKind>,
}

pub fn random_deterministic_instance(stream: Substream, max_tasks: usize, max_tools: usize) -> Instance {
    let mut rng = stream.rng();
    let k = rng.random_range(1..=max_tasks);
    let mut pool = Degradation::ALL.to_vec();
    let mut chosen = Vec::new();
    for _ in 0..k {
        let i = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(i));
    }
    let present = [Severity::Medium, Severity::High, Severity::VeryHigh];
    let mut profile = DegradationProfile::new(format!("rand-{}", stream.key()));
    for d in &chosen {
        profile.set(*d, *present.choose(&mut rng).unwrap());
    }
    let outcomes = [OutcomeDist::ALWAYS, OutcomeDist::PARTIAL, OutcomeDist::NEVER];
    let mut tools = Vec::new();
    for d in &chosen {
        for j in 0..rng.random_range(1..=max_tools) {
            tools.push(ToolSpec::new(
                format!("{}-{j}", d.task().name()),
                d.task(),
                *outcomes.choose(&mut rng).unwrap(),
            ));
        }
    }
    let mut rules = Vec::new();
    for _ in 0..rng.random_range(0..=4) {
        let task = chosen.choose(&mut rng).unwrap().task();
        let condition = if rng.random::<bool>() {
            Condition::TaskInHistory {
                task: chosen.choose(&mut rng).unwrap().task(),
            }
        } else {
            Condition::DegradationPresent {
                degradation: *chosen.choose(&mut rng).unwrap(),
                min_severity: *Severity::ALL.choose(&mut rng).unwrap(),
            }
        };
        let rule = if rng.random::<bool>() {
            InteractionRule::fail_boost(task, condition, if rng.random::<bool>() { 1.0 } else { 0.0 })
        } else {
            InteractionRule::side_effect(
                task,
                condition,
                *chosen.choose(&mut rng).unwrap(),
                rng.random_range(1..=2),
                if rng.random::<bool>() { 1.0 } else { 0.0 },
            )
        };
        rules.push(rule);
    }
    let env = Environment::mechanistic(tools, rules, stream.key()).unwrap();
    assert!(env.is_deterministic());
    let agenda = chosen.iter().map(|d| d.task()).collect();
    Instance {
        env: Arc::new(env),
        profile,
        agenda,
    }
}

/// Wraps a tool and logs every input profile it receives as JSON.
pub struct Recording {
    pub inner: Arc<dyn ToolAdapter>,
    pub log: Arc<Mutex<Vec<String>>>,
}

impl ToolAdapter for Recording {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn task(&self) -> TaskKind {
        self.inner.task()
    }

    fn invoke(&self, profile: &DegradationProfile, stream: Substream) -> Result<DegradationProfile, ExecutionError> {
        self.log.lock().unwrap().push(serde_json::to_string(profile).unwrap());
        self.inner.invoke(profile, stream)
    }
}

pub fn recording_toolbox(env: Arc<Environment>) -> (Toolbox, Arc<Mutex<Vec<String>>>) {
    let plain = Toolbox::from_env(env.clone(), &[]);
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut tb = Toolbox::new();
    for task in TaskKind::ALL {
        for t in plain.for_task(task) {
            tb.push(Arc::new(Recording {
                inner: t,
                log: log.clone(),
            }));
        }
    }
    (tb, log)
}

/// Sum over k = 1..=n of n!/(n-k)!.
pub fn permutation_tree_size(n: u64) -> u64 {
    (1..=n).map(|k| ((n - k + 1)..=n).product::<u64>()).sum()
}
