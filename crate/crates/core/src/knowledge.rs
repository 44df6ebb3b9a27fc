//! Exploration statistics, precedence-rule distillation and the persisted
//! knowledge base consulted by the scheduler.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::TabularCalibration;
use crate::model::{Degradation, TaskKind};

/// Totals closer than this count as indifferent.
pub const TIE_EPSILON: f64 = 0.005;
const FLOAT_SLACK: f64 = 1e-9;
pub const KB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("inconsistent trial: {0}")]
    InconsistentTrial(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("invalid knowledge base: {0}")]
    Invalid(String),
}

/// Outcome of running one order on one sample: per-task success judged on
/// the final profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub combination: Vec<Degradation>,
    pub order: Vec<TaskKind>,
    pub success: BTreeMap<TaskKind, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub combination: Vec<Degradation>,
    pub order: Vec<TaskKind>,
    pub per_task_fail: BTreeMap<TaskKind, f64>,
    pub total_fail: f64,
    pub n_trials: u64,
}

impl ExperienceRecord {
    pub fn new(combination: Vec<Degradation>, order: Vec<TaskKind>, per_task_fail: BTreeMap<TaskKind, f64>, n_trials: u64) -> Self {
        let total_fail = mean(per_task_fail.values().copied());
        ExperienceRecord {
            combination,
            order,
            per_task_fail,
            total_fail,
            n_trials,
        }
    }

    pub fn task_set(&self) -> BTreeSet<TaskKind> {
        self.combination.iter().map(|d| d.task()).collect()
    }

    fn before(&self, a: TaskKind, b: TaskKind) -> bool {
        let pos = |t| self.order.iter().position(|x| *x == t);
        matches!((pos(a), pos(b)), (Some(i), Some(j)) if i < j)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Integer percent, rounding exact halves down (32.5% prints as 32%).
pub fn display_percent(fraction: f64) -> u32 {
    // snap away binary noise so 0.325 is treated as an exact half
    let pct = (fraction * 100.0 * 1e6).round() / 1e6;
    (pct - 0.5).ceil().max(0.0) as u32
}

fn sorted_set(ds: &[Degradation]) -> Result<Vec<Degradation>, KnowledgeError> {
    let mut v = ds.to_vec();
    v.sort();
    v.dedup();
    if v.len() != ds.len() || v.is_empty() {
        return Err(KnowledgeError::InconsistentTrial(format!(
            "combination {ds:?} is empty or has duplicates"
        )));
    }
    Ok(v)
}

/// Groups trials by (combination, order) and computes fail fractions.
pub fn aggregate(trials: &[Trial]) -> Result<Vec<ExperienceRecord>, KnowledgeError> {
    type Key = (Vec<Degradation>, Vec<TaskKind>);
    let mut groups: BTreeMap<Key, (u64, BTreeMap<TaskKind, u64>)> = BTreeMap::new();
    for trial in trials {
        let combination = sorted_set(&trial.combination)?;
        let tasks: BTreeSet<TaskKind> = combination.iter().map(|d| d.task()).collect();
        let order_set: BTreeSet<TaskKind> = trial.order.iter().copied().collect();
        if order_set != tasks || trial.order.len() != tasks.len() {
            return Err(KnowledgeError::InconsistentTrial(format!(
                "order {:?} is not a permutation of the tasks of {:?}",
                trial.order, trial.combination
            )));
        }
        let flagged: BTreeSet<TaskKind> = trial.success.keys().copied().collect();
        if flagged != tasks {
            return Err(KnowledgeError::InconsistentTrial(format!(
                "success flags {:?} do not match the tasks of {:?}",
                flagged, trial.combination
            )));
        }
        let entry = groups.entry((combination, trial.order.clone())).or_default();
        entry.0 += 1;
        for (task, ok) in &trial.success {
            *entry.1.entry(*task).or_default() += u64::from(!ok);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((combination, order), (n, fails))| {
            let per_task_fail = combination
                .iter()
                .map(|d| {
                    let t = d.task();
                    (t, fails.get(&t).copied().unwrap_or(0) as f64 / n as f64)
                })
                .collect();
            ExperienceRecord::new(combination, order, per_task_fail, n)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecedenceRule {
    pub before: TaskKind,
    pub after: TaskKind,
    pub margin: f64,
    #[serde(default)]
    pub indifferent: bool,
    #[serde(default)]
    pub support: Vec<Vec<Degradation>>,
}

/// Pairwise precedence rules. For every task pair, each combination that
/// recorded both relative orders contributes the difference of mean
/// total fail rate between them; the contributions are averaged.
pub fn distill(records: &[ExperienceRecord]) -> Vec<PrecedenceRule> {
    let mut by_combo: BTreeMap<&[Degradation], Vec<&ExperienceRecord>> = BTreeMap::new();
    for r in records {
        by_combo.entry(r.combination.as_slice()).or_default().push(r);
    }
    type Margins = BTreeMap<(TaskKind, TaskKind), Vec<(f64, Vec<Degradation>)>>;
    let mut diffs = Margins::new();
    for (combo, recs) in &by_combo {
        let tasks: Vec<TaskKind> = {
            let mut v: Vec<TaskKind> = combo.iter().map(|d| d.task()).collect();
            v.sort();
            v
        };
        for (i, &a) in tasks.iter().enumerate() {
            for &b in &tasks[i + 1..] {
                let a_first: Vec<f64> = recs.iter().filter(|r| r.before(a, b)).map(|r| r.total_fail).collect();
                let b_first: Vec<f64> = recs.iter().filter(|r| r.before(b, a)).map(|r| r.total_fail).collect();
                if a_first.is_empty() || b_first.is_empty() {
                    continue;
                }
                let diff = mean(b_first.into_iter()) - mean(a_first.into_iter());
                diffs.entry((a, b)).or_default().push((diff, combo.to_vec()));
            }
        }
    }
    diffs
        .into_iter()
        .map(|((a, b), contributions)| {
            let signed = mean(contributions.iter().map(|(d, _)| *d));
            let support = contributions.into_iter().map(|(_, c)| c).collect();
            if signed.abs() <= TIE_EPSILON + FLOAT_SLACK {
                PrecedenceRule {
                    before: a,
                    after: b,
                    margin: 0.0,
                    indifferent: true,
                    support,
                }
            } else {
                let (before, after) = if signed > 0.0 { (a, b) } else { (b, a) };
                PrecedenceRule {
                    before,
                    after,
                    margin: signed.abs(),
                    indifferent: false,
                    support,
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub version: u32,
    pub records: Vec<ExperienceRecord>,
    pub rules: Vec<PrecedenceRule>,
    #[serde(default)]
    pub provenance: String,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        KnowledgeBase {
            version: KB_VERSION,
            records: Vec::new(),
            rules: Vec::new(),
            provenance: String::new(),
        }
    }
}

impl KnowledgeBase {
    pub fn from_records(records: Vec<ExperienceRecord>, provenance: impl Into<String>) -> Result<Self, KnowledgeError> {
        let kb = KnowledgeBase {
            version: KB_VERSION,
            rules: distill(&records),
            records,
            provenance: provenance.into(),
        };
        kb.validate()?;
        Ok(kb)
    }

    /// Knowledge base whose records carry the calibration's probabilities
    /// as fail fractions.
    pub fn from_calibration(cal: &TabularCalibration, n_trials: u64, provenance: impl Into<String>) -> Result<Self, KnowledgeError> {
        let records = cal
            .entries
            .iter()
            .map(|e| {
                let per_task_fail = e.fail.iter().map(|(d, p)| (d.task(), *p)).collect();
                ExperienceRecord::new(e.combination.clone(), e.order.clone(), per_task_fail, n_trials)
            })
            .collect();
        KnowledgeBase::from_records(records, provenance)
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.version != KB_VERSION {
            return Err(KnowledgeError::Invalid(format!("unsupported version {}", self.version)));
        }
        let mut keys = BTreeSet::new();
        for r in &self.records {
            if !keys.insert((&r.combination, &r.order)) {
                return Err(KnowledgeError::Invalid(format!(
                    "duplicate record for {:?} in order {:?}",
                    r.combination, r.order
                )));
            }
            let keys: BTreeSet<TaskKind> = r.per_task_fail.keys().copied().collect();
            if keys != r.task_set() {
                return Err(KnowledgeError::Invalid(format!(
                    "record for {:?}: per_task_fail keys do not match its tasks",
                    r.combination
                )));
            }
            if r.n_trials == 0 {
                return Err(KnowledgeError::Invalid("n_trials must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn reported_knowledge_base() -> KnowledgeBase {
    KnowledgeBase::from_calibration(
        &crate::env::paper_calibration(),
        20,
        "group-A exploration statistics (transcribed calibration table)",
    )
    .expect("built-in calibration is consistent")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Retrieval {
    pub rules: Vec<PrecedenceRule>,
    pub records: Vec<ExperienceRecord>,
}

/// Rules among agenda tasks plus records for exactly the agenda's task set.
pub fn retrieve(kb: &KnowledgeBase, agenda: &BTreeSet<TaskKind>) -> Retrieval {
    Retrieval {
        rules: kb
            .rules
            .iter()
            .filter(|r| agenda.contains(&r.before) && agenda.contains(&r.after))
            .cloned()
            .collect(),
        records: kb
            .records
            .iter()
            .filter(|r| &r.task_set() == agenda)
            .cloned()
            .collect(),
    }
}

pub fn save_kb(kb: &KnowledgeBase, path: &Path) -> Result<(), KnowledgeError> {
    let mut text = serde_json::to_string_pretty(kb).expect("knowledge base serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_kb(text: &str) -> Result<KnowledgeBase, KnowledgeError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let kb: KnowledgeBase = serde_path_to_error::deserialize(de).map_err(|e| KnowledgeError::Schema {
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    kb.validate()?;
    Ok(kb)
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, KnowledgeError> {
    let text = fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_kb(&text)
}

fn quoted_list<I: IntoIterator<Item = String>>(items: I) -> String {
    let parts: Vec<String> = items.into_iter().map(|s| format!("'{s}'")).collect();
    format!("[{}]", parts.join(", "))
}

fn order_phrase(order: &[TaskKind]) -> String {
    match order {
        [] => String::new(),
        [only] => format!("only {only}"),
        [first, rest @ ..] => {
            let mut s = format!("first {first}");
            for (i, t) in rest.iter().enumerate() {
                if i + 1 == rest.len() {
                    s.push_str(&format!(" and then {t}"));
                } else {
                    s.push_str(&format!(", then {t}"));
                }
            }
            s
        }
    }
}

/// One sentence per combination in the experience-report phrasing: fail
/// rates of every order, then the total fail rate.
pub fn render_experience(records: &[ExperienceRecord]) -> String {
    let mut by_combo: BTreeMap<&[Degradation], Vec<&ExperienceRecord>> = BTreeMap::new();
    for r in records {
        by_combo.entry(r.combination.as_slice()).or_default().push(r);
    }
    let mut lines = Vec::new();
    for (combo, recs) in by_combo {
        let label = combo.iter().map(|d| d.name()).collect::<Vec<_>>().join("+");
        let names = quoted_list(combo.iter().map(|d| d.name().to_string()));
        let clauses: Vec<String> = recs
            .iter()
            .map(|r| {
                let rates = quoted_list(
                    combo
                        .iter()
                        .map(|d| format!("{}%", display_percent(r.per_task_fail[&d.task()]))),
                );
                format!(
                    "when conducting {}, the fail rates of addressing {names} are {rates} respectively, and the total fail rate is {}%",
                    order_phrase(&r.order),
                    display_percent(r.total_fail)
                )
            })
            .collect();
        lines.push(format!("To address {label} in the image, {}.", clauses.join("; ")));
    }
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TaskKind::*;

    fn trials(combo: &[Degradation], order: &[TaskKind], n: usize, fails: &[(TaskKind, usize)]) -> Vec<Trial> {
        (0..n)
            .map(|i| Trial {
                combination: combo.to_vec(),
                order: order.to_vec(),
                success: order
                    .iter()
                    .map(|t| {
                        let k = fails.iter().find(|(x, _)| x == t).map(|(_, k)| *k).unwrap_or(0);
                        (*t, i >= k)
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn aggregate_rain_haze() {
        use Degradation::*;
        let t = trials(&[Rain, Haze], &[Deraining, Dehazing], 100, &[(Deraining, 5), (Dehazing, 37)]);
        let recs = aggregate(&t).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.per_task_fail[&Deraining], 0.05);
        assert_eq!(r.per_task_fail[&Dehazing], 0.37);
        assert!((r.total_fail - 0.21).abs() < 1e-12);
        assert_eq!(r.n_trials, 100);
        assert_eq!(r.combination, vec![Rain, Haze]);
    }

    #[test]
    fn aggregate_all_success() {
        use Degradation::*;
        let t = trials(&[Noise, LowLight], &[Denoising, Brightening], 10, &[]);
        let r = &aggregate(&t).unwrap()[0];
        assert!(r.per_task_fail.values().all(|f| *f == 0.0));
        assert_eq!(r.total_fail, 0.0);
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        use Degradation::*;
        let mut t = trials(&[Rain, Haze], &[Deraining, Dehazing], 1, &[]);
        t[0].success.remove(&Dehazing);
        assert!(matches!(aggregate(&t), Err(KnowledgeError::InconsistentTrial(_))));
        let mut t = trials(&[Rain, Haze], &[Deraining, Dehazing], 1, &[]);
        t[0].order = vec![Deraining, Denoising];
        assert!(aggregate(&t).is_err());
    }

    #[test]
    fn half_down_display() {
        assert_eq!(display_percent((0.22 + 0.43) / 2.0), 32);
        assert_eq!(display_percent((0.25 + 0.24) / 2.0), 24);
        assert_eq!(display_percent(0.326), 33);
        assert_eq!(display_percent(0.3249), 32);
        assert_eq!(display_percent(0.0), 0);
        assert_eq!(display_percent(1.0), 100);
    }

    fn rule(rules: &[PrecedenceRule], a: TaskKind, b: TaskKind) -> Option<&PrecedenceRule> {
        rules.iter().find(|r| (r.before == a && r.after == b) || (r.before == b && r.after == a))
    }

    #[test]
    fn distill_reported_rules() {
        let kb = reported_knowledge_base();
        let r = rule(&kb.rules, Deraining, Dehazing).unwrap();
        assert_eq!((r.before, r.after, r.indifferent), (Deraining, Dehazing, false));
        // 0.21 vs 0.245 before display rounding
        assert!((r.margin - 0.035).abs() < 1e-12);
        let tie = rule(&kb.rules, Denoising, JpegArtifactRemoval).unwrap();
        assert!(tie.indifferent);
        assert_eq!(tie.margin, 0.0);
        assert_eq!(kb.rules.len(), 8);
    }

    #[test]
    fn distill_needs_both_orders() {
        use Degradation::*;
        let recs = aggregate(&trials(&[Rain, Haze], &[Deraining, Dehazing], 4, &[])).unwrap();
        assert!(distill(&recs).is_empty());
    }

    #[test]
    fn three_task_marginalization() {
        use Degradation::*;
        let combo = vec![Noise, Rain, Haze];
        let mut recs = Vec::new();
        for order in crate::model::permutations(&[Denoising, Deraining, Dehazing]) {
            // failures only when dehazing precedes denoising
            let bad = order.iter().position(|t| *t == Dehazing) < order.iter().position(|t| *t == Denoising);
            let fail: BTreeMap<_, _> = order.iter().map(|t| (*t, if bad { 0.6 } else { 0.0 })).collect();
            recs.push(ExperienceRecord::new(combo.clone(), order, fail, 10));
        }
        let rules = distill(&recs);
        let r = rule(&rules, Denoising, Dehazing).unwrap();
        assert_eq!((r.before, r.after), (Denoising, Dehazing));
        assert!((r.margin - 0.6).abs() < 1e-12);
        // R<H orders: DRH, RDH, RHD -> 0.2 mean; H<R orders: DHR, HDR, HRD -> 0.4
        let r = rule(&rules, Deraining, Dehazing).unwrap();
        assert_eq!(r.before, Deraining);
        assert!((r.margin - 0.2).abs() < 1e-12);
    }

    #[test]
    fn retrieve_filters() {
        let kb = reported_knowledge_base();
        let got = retrieve(&kb, &[Deraining, Dehazing].into());
        assert_eq!(got.rules.len(), 1);
        assert_eq!(got.rules[0].before, Deraining);
        assert_eq!(got.records.len(), 2);
        assert!(retrieve(&kb, &[Brightening].into()).rules.is_empty());
        let partial = retrieve(&kb, &[Deraining, Dehazing, SuperResolution].into());
        assert_eq!(partial.rules.len(), 2);
        assert!(partial.records.is_empty());
    }

    #[test]
    fn kb_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for kb in [KnowledgeBase::default(), reported_knowledge_base()] {
            let path = dir.path().join("kb.json");
            save_kb(&kb, &path).unwrap();
            let back = load_kb(&path).unwrap();
            assert_eq!(back, kb);
            let bytes = fs::read(&path).unwrap();
            save_kb(&back, &path).unwrap();
            assert_eq!(fs::read(&path).unwrap(), bytes);
        }
    }

    #[test]
    fn kb_schema_errors_name_the_field() {
        let err = parse_kb(r#"{"version":1,"records":[{"combination":["rain"],"order":["deraining"],"per_task_fail":{"deraining":"x"},"total_fail":0.0,"n_trials":1}],"rules":[]}"#).unwrap_err();
        match err {
            KnowledgeError::Schema { field, .. } => assert!(field.contains("per_task_fail"), "{field}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_kb("{not json"), Err(KnowledgeError::Schema { .. })));
        let err = load_kb(Path::new("/nonexistent/kb.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/kb.json"));
    }

    #[test]
    fn experience_sentence() {
        let kb = reported_knowledge_base();
        let text = render_experience(&kb.records);
        assert!(text.contains(
            "To address rain+haze in the image, when conducting first deraining and then dehazing, the fail rates of addressing ['rain', 'haze'] are ['5%', '37%'] respectively, and the total fail rate is 21%"
        ), "{text}");
        assert_eq!(text.lines().count(), 8);
    }

    fn arb_records() -> impl Strategy<Value = Vec<ExperienceRecord>> {
        use Degradation::*;
        let pairs = [(Rain, Haze), (Noise, LowLight), (MotionBlur, LowResolution), (Rain, LowResolution)];
        proptest::collection::vec((0usize..4, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..6).prop_map(move |rows| {
            let mut out: BTreeMap<usize, Vec<ExperienceRecord>> = BTreeMap::new();
            for (i, a, b, c, d) in rows {
                let (x, y) = pairs[i];
                let mut combo = vec![x, y];
                combo.sort();
                let (tx, ty) = (x.task(), y.task());
                out.insert(i, vec![
                    ExperienceRecord::new(combo.clone(), vec![tx, ty], [(tx, a), (ty, b)].into(), 10),
                    ExperienceRecord::new(combo, vec![ty, tx], [(tx, c), (ty, d)].into(), 10),
                ]);
            }
            out.into_values().flatten().collect()
        })
    }

    proptest! {
        #[test]
        fn distill_is_antisymmetric(records in arb_records()) {
            let rules = distill(&records);
            for r in rules.iter().filter(|r| !r.indifferent) {
                prop_assert!(r.margin > 0.0);
                prop_assert!(!rules.iter().any(|o| !o.indifferent && o.before == r.after && o.after == r.before));
            }
        }

        #[test]
        fn retrieve_ignores_presentation(perm in Just(vec![Deraining, Dehazing, SuperResolution]).prop_shuffle()) {
            let kb = reported_knowledge_base();
            let a = retrieve(&kb, &perm.iter().copied().collect());
            let b = retrieve(&kb, &[Deraining, Dehazing, SuperResolution].into());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn retrieve_matches_brute_force(mask in 0u16..256) {
            let kb = reported_knowledge_base();
            let agenda: BTreeSet<TaskKind> = TaskKind::ALL.iter().enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0).map(|(_, t)| *t).collect();
            let got = retrieve(&kb, &agenda);
            let mut expected = Vec::new();
            for r in &kb.rules {
                let mut both = 0;
                for t in &agenda { if *t == r.before || *t == r.after { both += 1; } }
                if both == 2 { expected.push(r.clone()); }
            }
            prop_assert_eq!(got.rules, expected);
        }
    }
}
