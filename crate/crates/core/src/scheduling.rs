//! Schedule / Reschedule and scheduling-consistency measurement.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{retrieve, KnowledgeBase, PrecedenceRule};
use crate::model::{permutations, Plan, TaskKind};
use crate::rng::Substream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("cannot schedule an empty agenda")]
    EmptyAgenda,
    #[error("duplicate task {0} in agenda")]
    DuplicateTask(TaskKind),
    #[error("unschedulable: {0}")]
    Unschedulable(String),
    #[error("scheduler returned an invalid plan: {0}")]
    InvalidPlan(String),
    #[error("scheduler backend failed: {0}")]
    Backend(String),
}

/// A plan plus free-text notes (conflict warnings, backend reasoning).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub plan: Plan,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Schedule {
    fn bare(plan: Vec<TaskKind>) -> Schedule {
        Schedule {
            plan: Plan::new(plan).expect("scheduler output is duplicate-free"),
            notes: Vec::new(),
        }
    }
}

/// Orders an agenda. The agenda slice is the presentation order; output must
/// be a permutation of it that does not start with a banned task.
pub trait Scheduler: Send + Sync {
    fn name(&self) -> &str;

    fn schedule(
        &self,
        agenda: &[TaskKind],
        kb: &KnowledgeBase,
        banned_first: &BTreeSet<TaskKind>,
        stream: Substream,
    ) -> Result<Schedule, ScheduleError>;
}

fn check_request(agenda: &[TaskKind], banned_first: &BTreeSet<TaskKind>) -> Result<(), ScheduleError> {
    if agenda.is_empty() {
        return Err(ScheduleError::EmptyAgenda);
    }
    let mut seen = BTreeSet::new();
    for t in agenda {
        if !seen.insert(*t) {
            return Err(ScheduleError::DuplicateTask(*t));
        }
    }
    if agenda.iter().all(|t| banned_first.contains(t)) {
        return Err(ScheduleError::Unschedulable(
            "every task is banned from the first position".into(),
        ));
    }
    Ok(())
}

/// Checks the scheduler contract on a produced plan.
pub fn validate_plan(
    agenda: &[TaskKind],
    banned_first: &BTreeSet<TaskKind>,
    plan: &Plan,
) -> Result<(), ScheduleError> {
    if !plan.is_permutation_of(agenda) {
        return Err(ScheduleError::InvalidPlan(format!(
            "{plan} is not a permutation of the agenda"
        )));
    }
    if let Some(first) = plan.first() {
        if banned_first.contains(&first) && agenda.len() > banned_first.len() {
            return Err(ScheduleError::InvalidPlan(format!(
                "{plan} starts with banned task {first}"
            )));
        }
    }
    Ok(())
}

/// Deterministic experience-grounded scheduling.
///
/// Priority: an exact-match record for the agenda's task set (lowest total
/// fail among feasible orders, ties by canonical names), then a topological
/// order under the applicable strict precedence rules, then canonical name
/// order. Output depends only on the agenda as a set.
pub fn experience_schedule(
    agenda: &[TaskKind],
    kb: &KnowledgeBase,
    banned_first: &BTreeSet<TaskKind>,
) -> Result<Schedule, ScheduleError> {
    check_request(agenda, banned_first)?;
    let set: BTreeSet<TaskKind> = agenda.iter().copied().collect();
    let found = retrieve(kb, &set);

    let best_record = found
        .records
        .iter()
        .filter(|r| r.order.first().is_some_and(|t| !banned_first.contains(t)))
        .min_by(|a, b| {
            a.total_fail
                .total_cmp(&b.total_fail)
                .then_with(|| a.order.cmp(&b.order))
        });
    if let Some(rec) = best_record {
        return Ok(Schedule::bare(rec.order.clone()));
    }
    Ok(topological(&set, &found.rules, banned_first))
}

fn reachable(edges: &BTreeSet<(TaskKind, TaskKind)>, from: TaskKind, to: TaskKind) -> bool {
    let mut stack = vec![from];
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            stack.extend(edges.iter().filter(|(a, _)| *a == n).map(|(_, b)| *b));
        }
    }
    false
}

fn topological(
    tasks: &BTreeSet<TaskKind>,
    rules: &[PrecedenceRule],
    banned_first: &BTreeSet<TaskKind>,
) -> Schedule {
    let mut notes = Vec::new();
    let mut strict: Vec<&PrecedenceRule> = rules.iter().filter(|r| !r.indifferent).collect();
    strict.sort_by(|a, b| {
        b.margin
            .total_cmp(&a.margin)
            .then_with(|| (a.before, a.after).cmp(&(b.before, b.after)))
    });
    let mut edges = BTreeSet::new();
    for r in strict {
        if reachable(&edges, r.after, r.before) {
            notes.push(format!(
                "dropped rule {} before {} (margin {:.3}): conflicts with stronger rules",
                r.before, r.after, r.margin
            ));
        } else {
            edges.insert((r.before, r.after));
        }
    }

    let mut remaining = tasks.clone();
    let mut plan = Vec::with_capacity(tasks.len());
    while !remaining.is_empty() {
        let free: Vec<TaskKind> = remaining
            .iter()
            .copied()
            .filter(|t| !edges.iter().any(|(a, b)| b == t && remaining.contains(a)))
            .collect();
        let next = if plan.is_empty() {
            match free.iter().find(|t| !banned_first.contains(t)) {
                Some(t) => *t,
                None => {
                    let forced = *remaining
                        .iter()
                        .find(|t| !banned_first.contains(t))
                        .expect("request was checked");
                    notes.push(format!(
                        "started with {forced} against precedence rules to respect failed attempts"
                    ));
                    forced
                }
            }
        } else {
            free[0]
        };
        remaining.remove(&next);
        plan.push(next);
    }
    Schedule {
        plan: Plan::new(plan).expect("each task placed once"),
        notes,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExperienceScheduler;

impl Scheduler for ExperienceScheduler {
    fn name(&self) -> &str {
        "experience"
    }

    fn schedule(
        &self,
        agenda: &[TaskKind],
        kb: &KnowledgeBase,
        banned_first: &BTreeSet<TaskKind>,
        _stream: Substream,
    ) -> Result<Schedule, ScheduleError> {
        experience_schedule(agenda, kb, banned_first)
    }
}

/// Uniform over the permutations whose first task is not banned.
pub fn random_schedule(
    agenda: &[TaskKind],
    banned_first: &BTreeSet<TaskKind>,
    stream: Substream,
) -> Result<Schedule, ScheduleError> {
    check_request(agenda, banned_first)?;
    let mut rng = stream.rng();
    let allowed: Vec<TaskKind> = agenda
        .iter()
        .copied()
        .filter(|t| !banned_first.contains(t))
        .collect();
    let first = allowed[rng.random_range(0..allowed.len())];
    let mut rest: Vec<TaskKind> = agenda.iter().copied().filter(|t| *t != first).collect();
    rest.shuffle(&mut rng);
    let mut plan = vec![first];
    plan.extend(rest);
    Ok(Schedule::bare(plan))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomScheduler;

impl Scheduler for RandomScheduler {
    fn name(&self) -> &str {
        "random"
    }

    fn schedule(
        &self,
        agenda: &[TaskKind],
        _kb: &KnowledgeBase,
        banned_first: &BTreeSet<TaskKind>,
        stream: Substream,
    ) -> Result<Schedule, ScheduleError> {
        random_schedule(agenda, banned_first, stream)
    }
}

/// Keeps the presentation order, moving the first allowed task to the front
/// when needed. Maximally sensitive to presentation order.
#[derive(Debug, Clone, Copy, Default)]
pub struct PresentationScheduler;

impl Scheduler for PresentationScheduler {
    fn name(&self) -> &str {
        "presentation"
    }

    fn schedule(
        &self,
        agenda: &[TaskKind],
        _kb: &KnowledgeBase,
        banned_first: &BTreeSet<TaskKind>,
        _stream: Substream,
    ) -> Result<Schedule, ScheduleError> {
        check_request(agenda, banned_first)?;
        let mut plan = agenda.to_vec();
        let i = plan
            .iter()
            .position(|t| !banned_first.contains(t))
            .expect("request was checked");
        let t = plan.remove(i);
        plan.insert(0, t);
        Ok(Schedule::bare(plan))
    }
}

/// New plan over the same tasks whose head avoids every failed attempt.
pub fn reschedule(
    scheduler: &dyn Scheduler,
    plan: &Plan,
    attempts: &BTreeSet<TaskKind>,
    kb: &KnowledgeBase,
    stream: Substream,
) -> Result<Schedule, ScheduleError> {
    let tasks = plan.to_set();
    if !attempts.is_subset(&tasks) {
        return Err(ScheduleError::Unschedulable(
            "attempts include tasks outside the plan".into(),
        ));
    }
    if attempts.len() >= tasks.len() {
        return Err(ScheduleError::Unschedulable(
            "every task of the plan has already failed first".into(),
        ));
    }
    let out = scheduler.schedule(plan.tasks(), kb, attempts, stream)?;
    validate_plan(plan.tasks(), attempts, &out.plan)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub entropy_bits: f64,
    pub variation_ratio: f64,
    pub sensitivity_entropy: f64,
    pub sensitivity_vr: f64,
    pub n_samples: u64,
    pub modal_plan: Plan,
}

pub fn entropy_bits<K>(counts: &BTreeMap<K, u64>) -> f64 {
    let n: u64 = counts.values().sum();
    if n == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .values()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n as f64;
            -p * p.log2()
        })
        .sum();
    // -0.0 for a single atom
    h.max(0.0)
}

pub fn variation_ratio<K>(counts: &BTreeMap<K, u64>) -> f64 {
    let n: u64 = counts.values().sum();
    if n == 0 {
        return 0.0;
    }
    let mode = counts.values().copied().max().unwrap_or(0);
    1.0 - mode as f64 / n as f64
}

/// Schedules `agenda` `n_per_presentation` times under every presentation
/// permutation and reports pooled dispersion plus presentation sensitivity
/// `M(pooled) - mean_i M(per-presentation_i)`.
pub fn measure_consistency(
    scheduler: &dyn Scheduler,
    agenda: &[TaskKind],
    kb: &KnowledgeBase,
    n_per_presentation: u64,
    stream: Substream,
) -> Result<ConsistencyReport, ScheduleError> {
    if n_per_presentation == 0 {
        return Err(ScheduleError::Unschedulable("n_per_presentation must be at least 1".into()));
    }
    check_request(agenda, &BTreeSet::new())?;
    let mut canonical = agenda.to_vec();
    canonical.sort();
    let presentations = permutations(&canonical);
    let none = BTreeSet::new();
    let mut pooled: BTreeMap<Plan, u64> = BTreeMap::new();
    let (mut h_sum, mut vr_sum) = (0.0, 0.0);
    for (i, presentation) in presentations.iter().enumerate() {
        let mut local: BTreeMap<Plan, u64> = BTreeMap::new();
        for j in 0..n_per_presentation {
            let s = scheduler.schedule(presentation, kb, &none, stream.child(i as u64).child(j))?;
            validate_plan(presentation, &none, &s.plan)?;
            *local.entry(s.plan.clone()).or_default() += 1;
            *pooled.entry(s.plan).or_default() += 1;
        }
        h_sum += entropy_bits(&local);
        vr_sum += variation_ratio(&local);
    }
    let n = presentations.len() as f64;
    let entropy = entropy_bits(&pooled);
    let vr = variation_ratio(&pooled);
    let modal_plan = pooled
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(p, _)| p.clone())
        .expect("at least one sample");
    Ok(ConsistencyReport {
        entropy_bits: entropy,
        variation_ratio: vr,
        sensitivity_entropy: entropy - h_sum / n,
        sensitivity_vr: vr - vr_sum / n,
        n_samples: n_per_presentation * presentations.len() as u64,
        modal_plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{reported_knowledge_base, ExperienceRecord};
    use crate::model::Degradation;
    use proptest::prelude::*;
    use TaskKind::*;

    fn none() -> BTreeSet<TaskKind> {
        BTreeSet::new()
    }

    #[test]
    fn exact_record_wins() {
        let kb = reported_knowledge_base();
        let s = experience_schedule(&[Dehazing, Deraining], &kb, &none()).unwrap();
        assert_eq!(s.plan.tasks(), &[Deraining, Dehazing]);
        let s = experience_schedule(&[JpegArtifactRemoval, Denoising], &kb, &none()).unwrap();
        assert_eq!(s.plan.tasks(), &[Denoising, JpegArtifactRemoval]);
        let s = experience_schedule(&[Dehazing, Deraining], &kb, &[Deraining].into()).unwrap();
        assert_eq!(s.plan.tasks(), &[Dehazing, Deraining]);
    }

    #[test]
    fn exact_tie_breaks_lexicographically() {
        use Degradation::*;
        let combo = vec![Noise, JpegArtifact];
        let rec = |order: Vec<TaskKind>| {
            ExperienceRecord::new(combo.clone(), order, [(Denoising, 0.26), (JpegArtifactRemoval, 0.26)].into(), 10)
        };
        let kb = KnowledgeBase::from_records(
            vec![rec(vec![JpegArtifactRemoval, Denoising]), rec(vec![Denoising, JpegArtifactRemoval])],
            "",
        )
        .unwrap();
        let s = experience_schedule(&[JpegArtifactRemoval, Denoising], &kb, &none()).unwrap();
        assert_eq!(s.plan.tasks(), &[Denoising, JpegArtifactRemoval]);
    }

    #[test]
    fn all_banned_is_unschedulable() {
        let kb = reported_knowledge_base();
        let err = experience_schedule(&[Dehazing, Deraining], &kb, &[Dehazing, Deraining].into()).unwrap_err();
        assert!(matches!(err, ScheduleError::Unschedulable(_)));
        assert_eq!(experience_schedule(&[], &kb, &none()).unwrap_err(), ScheduleError::EmptyAgenda);
    }

    #[test]
    fn rules_drive_unseen_agendas() {
        let kb = reported_knowledge_base();
        // derain < dehaze, derain < SR, no exact record
        let s = experience_schedule(&[SuperResolution, Dehazing, Deraining], &kb, &none()).unwrap();
        assert_eq!(s.plan.first(), Some(Deraining));
        assert_eq!(s.plan.tasks(), &[Deraining, Dehazing, SuperResolution]);
    }

    #[test]
    fn conflicting_rules_keep_the_stronger() {
        let rule = |before, after, margin| PrecedenceRule {
            before,
            after,
            margin,
            indifferent: false,
            support: vec![],
        };
        let kb = KnowledgeBase {
            rules: vec![
                rule(Dehazing, Deraining, 0.3),
                rule(Deraining, Denoising, 0.2),
                rule(Denoising, Dehazing, 0.1),
            ],
            ..Default::default()
        };
        let s = experience_schedule(&[Denoising, Deraining, Dehazing], &kb, &none()).unwrap();
        assert_eq!(s.plan.tasks(), &[Dehazing, Deraining, Denoising]);
        assert_eq!(s.notes.len(), 1);
        assert!(s.notes[0].contains("dropped rule denoising before dehazing"));
    }

    #[test]
    fn reschedule_examples() {
        let kb = reported_knowledge_base();
        let plan = Plan::new(vec![Deraining, Dehazing]).unwrap();
        let s = reschedule(&ExperienceScheduler, &plan, &[Deraining].into(), &kb, Substream::root(0)).unwrap();
        assert_eq!(s.plan.tasks(), &[Dehazing, Deraining]);

        // KB prefers deraining before super-resolution; dehazing already failed first
        let plan = Plan::new(vec![Dehazing, Deraining, SuperResolution]).unwrap();
        let s = reschedule(&ExperienceScheduler, &plan, &[Dehazing].into(), &kb, Substream::root(0)).unwrap();
        assert_eq!(s.plan.first(), Some(Deraining));
        // brute-force check against the stated rules: among feasible orders
        // that satisfy every applicable strict rule, pick the smallest by name
        let feasible: Vec<Vec<TaskKind>> = permutations(plan.tasks())
            .into_iter()
            .filter(|p| p[0] != Dehazing)
            .filter(|p| {
                let pos = |t| p.iter().position(|x| *x == t).unwrap();
                kb.rules.iter().filter(|r| !r.indifferent && plan.contains(r.before) && plan.contains(r.after))
                    .all(|r| pos(r.before) < pos(r.after))
            })
            .collect();
        let best = feasible.iter().min().unwrap();
        assert_eq!(s.plan.tasks(), best.as_slice());

        let err = reschedule(&ExperienceScheduler, &plan, &plan.to_set(), &kb, Substream::root(0)).unwrap_err();
        assert!(matches!(err, ScheduleError::Unschedulable(_)));
    }

    #[test]
    fn random_schedule_basics() {
        let s = random_schedule(&[Brightening], &none(), Substream::root(1)).unwrap();
        assert_eq!(s.plan.tasks(), &[Brightening]);
        let a = random_schedule(&[Dehazing, Deraining, Denoising], &none(), Substream::root(9)).unwrap();
        let b = random_schedule(&[Dehazing, Deraining, Denoising], &none(), Substream::root(9)).unwrap();
        assert_eq!(a, b);
        let n = 10_000u64;
        let root = Substream::root(4);
        let first = (0..n)
            .filter(|i| {
                random_schedule(&[Dehazing, Deraining], &none(), root.child(*i)).unwrap().plan.first()
                    == Some(Dehazing)
            })
            .count() as f64
            / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((first - 0.5).abs() <= 3.0 * sigma, "{first}");
    }

    #[test]
    fn entropy_closed_forms() {
        let single: BTreeMap<u8, u64> = [(0, 60)].into();
        assert_eq!(entropy_bits(&single), 0.0);
        assert_eq!(variation_ratio(&single), 0.0);
        for k in 1..7u8 {
            let uniform: BTreeMap<u8, u64> = (0..k).map(|i| (i, 10)).collect();
            assert!((entropy_bits(&uniform) - (k as f64).log2()).abs() < 1e-12);
        }
    }

    #[test]
    fn consistency_of_deterministic_scheduler() {
        let kb = reported_knowledge_base();
        let r = measure_consistency(&ExperienceScheduler, &[Dehazing, Deraining], &kb, 60, Substream::root(0)).unwrap();
        assert_eq!((r.entropy_bits, r.variation_ratio, r.sensitivity_entropy, r.sensitivity_vr), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.n_samples, 120);
    }

    #[test]
    fn consistency_of_presentation_echo() {
        let kb = KnowledgeBase::default();
        let r = measure_consistency(&PresentationScheduler, &[Dehazing, Deraining], &kb, 10, Substream::root(0)).unwrap();
        assert!((r.entropy_bits - 1.0).abs() < 1e-12);
        assert!((r.sensitivity_entropy - 1.0).abs() < 1e-12);
        assert!((r.variation_ratio - 0.5).abs() < 1e-12);
        assert!((r.sensitivity_vr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn consistency_of_random_scheduler() {
        let kb = KnowledgeBase::default();
        let n = 5_000;
        let r = measure_consistency(&RandomScheduler, &[Dehazing, Deraining], &kb, n, Substream::root(3)).unwrap();
        let total = 2.0 * n as f64;
        let sigma = (0.25 / total).sqrt();
        assert!((r.variation_ratio - 0.5).abs() <= 3.0 * sigma);
        assert!((r.entropy_bits - 1.0).abs() < 0.01);
        assert!(r.sensitivity_entropy.abs() < 0.01);
        assert!(r.sensitivity_vr.abs() <= 6.0 * sigma);
        let one = measure_consistency(&RandomScheduler, &[Dehazing], &kb, 1, Substream::root(3)).unwrap();
        assert_eq!(one.entropy_bits, 0.0);
    }

    fn arb_kb() -> impl Strategy<Value = KnowledgeBase> {
        let rule = (0usize..8, 0usize..8, 0.0f64..0.5, any::<bool>()).prop_map(|(a, b, m, ind)| PrecedenceRule {
            before: TaskKind::ALL[a],
            after: TaskKind::ALL[b],
            margin: m,
            indifferent: ind,
            support: vec![],
        });
        proptest::collection::vec(rule, 0..12)
            .prop_map(|rules| KnowledgeBase {
                rules: rules.into_iter().filter(|r| r.before != r.after).collect(),
                ..Default::default()
            })
    }

    fn arb_agenda() -> impl Strategy<Value = Vec<TaskKind>> {
        proptest::sample::subsequence(TaskKind::ALL.to_vec(), 1..6).prop_shuffle()
    }

    proptest! {
        #[test]
        fn experience_output_is_valid_and_presentation_invariant(
            agenda in arb_agenda(),
            kb in arb_kb(),
            ban_mask in any::<u8>(),
            shuffle_key in any::<u64>(),
        ) {
            let banned: BTreeSet<TaskKind> = agenda.iter().enumerate()
                .filter(|(i, _)| ban_mask & (1 << i) != 0).map(|(_, t)| *t).collect();
            prop_assume!(banned.len() < agenda.len());
            let s = experience_schedule(&agenda, &kb, &banned).unwrap();
            prop_assert!(validate_plan(&agenda, &banned, &s.plan).is_ok());
            let mut shuffled = agenda.clone();
            shuffled.shuffle(&mut Substream::root(shuffle_key).rng());
            let t = experience_schedule(&shuffled, &kb, &banned).unwrap();
            prop_assert_eq!(s.plan, t.plan);
        }

        #[test]
        fn random_output_is_valid(agenda in arb_agenda(), key in any::<u64>(), ban_mask in any::<u8>()) {
            let banned: BTreeSet<TaskKind> = agenda.iter().enumerate()
                .filter(|(i, _)| ban_mask & (1 << i) != 0).map(|(_, t)| *t).collect();
            prop_assume!(banned.len() < agenda.len());
            let s = random_schedule(&agenda, &banned, Substream::root(key)).unwrap();
            prop_assert!(validate_plan(&agenda, &banned, &s.plan).is_ok());
        }
    }
}
