//! Domain vocabulary: degradations, restoration tasks, severities, the
//! abstract image state and the ordered/unordered task lists built on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown degradation name `{0}`")]
    UnknownDegradation(String),
    #[error("unknown task name `{0}`")]
    UnknownTask(String),
    #[error("unknown severity `{0}`")]
    UnknownSeverity(String),
    #[error("duplicate task `{0}` in task list")]
    DuplicateTask(TaskKind),
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

fn normalize(raw: &str) -> String {
    raw.trim()
        .to_ascii_lowercase()
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// One of the eight image defects the system knows how to address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Degradation {
    LowResolution,
    Noise,
    MotionBlur,
    DefocusBlur,
    Rain,
    Haze,
    JpegArtifact,
    LowLight,
}

impl Degradation {
    /// Canonical iteration order.
    pub const ALL: [Degradation; 8] = [
        Degradation::LowResolution,
        Degradation::Noise,
        Degradation::MotionBlur,
        Degradation::DefocusBlur,
        Degradation::Rain,
        Degradation::Haze,
        Degradation::JpegArtifact,
        Degradation::LowLight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Degradation::LowResolution => "low resolution",
            Degradation::Noise => "noise",
            Degradation::MotionBlur => "motion blur",
            Degradation::DefocusBlur => "defocus blur",
            Degradation::Rain => "rain",
            Degradation::Haze => "haze",
            Degradation::JpegArtifact => "jpeg compression artifact",
            Degradation::LowLight => "dark",
        }
    }

    pub fn task(self) -> TaskKind {
        task_for(self)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Degradation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let d = match normalize(s).as_str() {
            "low resolution" => Degradation::LowResolution,
            "noise" => Degradation::Noise,
            "motion blur" => Degradation::MotionBlur,
            "defocus blur" => Degradation::DefocusBlur,
            "rain" => Degradation::Rain,
            "haze" => Degradation::Haze,
            "jpeg compression artifact" | "jpeg artifact" | "jpeg" => Degradation::JpegArtifact,
            "dark" | "low light" => Degradation::LowLight,
            _ => return Err(ModelError::UnknownDegradation(s.to_string())),
        };
        Ok(d)
    }
}

string_serde!(Degradation);

/// A single-degradation restoration subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    SuperResolution,
    Denoising,
    MotionDeblurring,
    DefocusDeblurring,
    Deraining,
    Dehazing,
    JpegArtifactRemoval,
    Brightening,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::SuperResolution,
        TaskKind::Denoising,
        TaskKind::MotionDeblurring,
        TaskKind::DefocusDeblurring,
        TaskKind::Deraining,
        TaskKind::Dehazing,
        TaskKind::JpegArtifactRemoval,
        TaskKind::Brightening,
    ];

    /// Canonical name. These strings key the knowledge base and drive
    /// lexicographic tie-breaking, so they must never change.
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SuperResolution => "super-resolution",
            TaskKind::Denoising => "denoising",
            TaskKind::MotionDeblurring => "motion deblurring",
            TaskKind::DefocusDeblurring => "defocus deblurring",
            TaskKind::Deraining => "deraining",
            TaskKind::Dehazing => "dehazing",
            TaskKind::JpegArtifactRemoval => "jpeg compression artifact removal",
            TaskKind::Brightening => "brightening",
        }
    }

    pub fn degradation(self) -> Degradation {
        degradation_for(self)
    }
}

// Tasks order by canonical name so every sorted collection of tasks is
// already in tie-break order.
impl Ord for TaskKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name().cmp(other.name())
    }
}

impl PartialOrd for TaskKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl FromStr for TaskKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = match normalize(s).as_str() {
            "super resolution" | "sr" => TaskKind::SuperResolution,
            "denoising" => TaskKind::Denoising,
            "motion deblurring" => TaskKind::MotionDeblurring,
            "defocus deblurring" => TaskKind::DefocusDeblurring,
            "deraining" => TaskKind::Deraining,
            "dehazing" => TaskKind::Dehazing,
            "jpeg compression artifact removal" | "jpeg artifact removal" => {
                TaskKind::JpegArtifactRemoval
            }
            "brightening" | "low light enhancement" => TaskKind::Brightening,
            _ => return Err(ModelError::UnknownTask(s.to_string())),
        };
        Ok(t)
    }
}

string_serde!(TaskKind);

pub fn task_for(d: Degradation) -> TaskKind {
    match d {
        Degradation::LowResolution => TaskKind::SuperResolution,
        Degradation::Noise => TaskKind::Denoising,
        Degradation::MotionBlur => TaskKind::MotionDeblurring,
        Degradation::DefocusBlur => TaskKind::DefocusDeblurring,
        Degradation::Rain => TaskKind::Deraining,
        Degradation::Haze => TaskKind::Dehazing,
        Degradation::JpegArtifact => TaskKind::JpegArtifactRemoval,
        Degradation::LowLight => TaskKind::Brightening,
    }
}

pub fn degradation_for(t: TaskKind) -> Degradation {
    match t {
        TaskKind::SuperResolution => Degradation::LowResolution,
        TaskKind::Denoising => Degradation::Noise,
        TaskKind::MotionDeblurring => Degradation::MotionBlur,
        TaskKind::DefocusDeblurring => Degradation::DefocusBlur,
        TaskKind::Deraining => Degradation::Rain,
        TaskKind::Dehazing => Degradation::Haze,
        TaskKind::JpegArtifactRemoval => Degradation::JpegArtifact,
        TaskKind::Brightening => Degradation::LowLight,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Severity {
    #[default]
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

/// A degradation counts as present at or above this level.
pub const PRESENCE_THRESHOLD: Severity = Severity::Medium;

impl Severity {
    pub const ALL: [Severity; 5] = [
        Severity::VeryLow,
        Severity::Low,
        Severity::Medium,
        Severity::High,
        Severity::VeryHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Severity::VeryLow => "very low",
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
            Severity::VeryHigh => "very high",
        }
    }

    pub fn level(self) -> u8 {
        self as u8
    }

    pub fn from_level(level: u8) -> Severity {
        Severity::ALL[usize::from(level.min(4))]
    }

    pub fn succ(self) -> Severity {
        Severity::from_level(self.level().saturating_add(1))
    }

    pub fn pred(self) -> Severity {
        Severity::from_level(self.level().saturating_sub(1))
    }

    /// Raises by `levels`, saturating at `VeryHigh`.
    pub fn raised(self, levels: u8) -> Severity {
        Severity::from_level(self.level().saturating_add(levels))
    }

    pub fn is_present(self) -> bool {
        self >= PRESENCE_THRESHOLD
    }
}

impl FromStr for Severity {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let sev = match normalize(s).as_str() {
            "very low" | "verylow" => Severity::VeryLow,
            "low" => Severity::Low,
            "medium" => Severity::Medium,
            "high" => Severity::High,
            "very high" | "veryhigh" => Severity::VeryHigh,
            _ => return Err(ModelError::UnknownSeverity(s.to_string())),
        };
        Ok(sev)
    }
}

string_serde!(Severity);

/// One applied restoration step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AppliedStep {
    pub task: TaskKind,
    pub tool: String,
}

/// The abstract "image": per-degradation severity plus what has been done
/// to it. Entries at `VeryLow` are never stored, so a clean profile has an
/// empty map and equal states compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DegradationProfile {
    #[serde(default)]
    severities: BTreeMap<Degradation, Severity>,
    #[serde(default)]
    pub history: Vec<AppliedStep>,
    #[serde(default)]
    pub origin: String,
}

impl DegradationProfile {
    pub fn new(origin: impl Into<String>) -> Self {
        DegradationProfile {
            origin: origin.into(),
            ..Default::default()
        }
    }

    pub fn with(mut self, d: Degradation, s: Severity) -> Self {
        self.set(d, s);
        self
    }

    pub fn severity(&self, d: Degradation) -> Severity {
        self.severities.get(&d).copied().unwrap_or_default()
    }

    pub fn set(&mut self, d: Degradation, s: Severity) {
        if s == Severity::VeryLow {
            self.severities.remove(&d);
        } else {
            self.severities.insert(d, s);
        }
    }

    pub fn is_present(&self, d: Degradation) -> bool {
        self.severity(d).is_present()
    }

    pub fn present(&self) -> impl Iterator<Item = Degradation> + '_ {
        self.severities
            .iter()
            .filter(|(_, s)| s.is_present())
            .map(|(d, _)| *d)
    }

    /// Non-`VeryLow` entries in canonical degradation order.
    pub fn severities(&self) -> impl Iterator<Item = (Degradation, Severity)> + '_ {
        self.severities.iter().map(|(d, s)| (*d, *s))
    }

    pub fn record(&mut self, task: TaskKind, tool: impl Into<String>) {
        self.history.push(AppliedStep {
            task,
            tool: tool.into(),
        });
    }

    pub fn task_in_history(&self, task: TaskKind) -> bool {
        self.history.iter().any(|s| s.task == task)
    }

    /// Worst remaining severity; `VeryLow` for a clean profile.
    pub fn max_severity(&self) -> Severity {
        self.severities.values().copied().max().unwrap_or_default()
    }
}

/// Unordered restoration subtasks, kept in the order they were presented.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskKind>", into = "Vec<TaskKind>")]
pub struct Agenda(Vec<TaskKind>);

/// Ordered restoration subtasks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskKind>", into = "Vec<TaskKind>")]
pub struct Plan(Vec<TaskKind>);

fn check_unique(tasks: &[TaskKind]) -> Result<(), ModelError> {
    let mut seen = BTreeSet::new();
    for t in tasks {
        if !seen.insert(*t) {
            return Err(ModelError::DuplicateTask(*t));
        }
    }
    Ok(())
}

macro_rules! task_list {
    ($ty:ident) => {
        impl $ty {
            pub fn new(tasks: Vec<TaskKind>) -> Result<Self, ModelError> {
                check_unique(&tasks)?;
                Ok($ty(tasks))
            }

            pub fn tasks(&self) -> &[TaskKind] {
                &self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn contains(&self, t: TaskKind) -> bool {
                self.0.contains(&t)
            }

            pub fn to_set(&self) -> BTreeSet<TaskKind> {
                self.0.iter().copied().collect()
            }

            pub fn into_vec(self) -> Vec<TaskKind> {
                self.0
            }
        }

        impl TryFrom<Vec<TaskKind>> for $ty {
            type Error = ModelError;

            fn try_from(v: Vec<TaskKind>) -> Result<Self, ModelError> {
                $ty::new(v)
            }
        }

        impl From<$ty> for Vec<TaskKind> {
            fn from(v: $ty) -> Self {
                v.0
            }
        }
    };
}

task_list!(Agenda);
task_list!(Plan);

impl Agenda {
    pub fn from_set(set: &BTreeSet<TaskKind>) -> Agenda {
        Agenda(set.iter().copied().collect())
    }
}

impl Plan {
    pub fn first(&self) -> Option<TaskKind> {
        self.0.first().copied()
    }

    pub fn without(&self, task: TaskKind) -> Plan {
        Plan(self.0.iter().copied().filter(|t| *t != task).collect())
    }

    /// Whether this plan orders exactly the given tasks.
    pub fn is_permutation_of(&self, tasks: &[TaskKind]) -> bool {
        let mine: BTreeSet<_> = self.0.iter().collect();
        let theirs: BTreeSet<_> = tasks.iter().collect();
        mine.len() == self.0.len() && tasks.len() == self.0.len() && mine == theirs
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|t| t.name()).collect()
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.names().join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
    C,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Group::A => "A",
            Group::B => "B",
            Group::C => "C",
        };
        f.write_str(s)
    }
}

/// A benchmark mixture. `degradations` keeps synthesis order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DegradationCombination {
    pub group: Group,
    pub degradations: Vec<Degradation>,
}

impl DegradationCombination {
    pub fn sorted(&self) -> Vec<Degradation> {
        let mut v = self.degradations.clone();
        v.sort();
        v
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        self.degradations.iter().map(|d| d.task()).collect()
    }

    pub fn label(&self) -> String {
        self.degradations
            .iter()
            .map(|d| d.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn profile(&self, severity: Severity, origin: impl Into<String>) -> DegradationProfile {
        let mut p = DegradationProfile::new(origin);
        for d in &self.degradations {
            p.set(*d, severity);
        }
        p
    }
}

pub fn builtin_combinations() -> Vec<DegradationCombination> {
    use Degradation::*;
    let rows: [(Group, &[Degradation]); 16] = [
        (Group::A, &[Rain, Haze]),
        (Group::A, &[MotionBlur, LowResolution]),
        (Group::A, &[LowLight, Noise]),
        (Group::A, &[DefocusBlur, JpegArtifact]),
        (Group::A, &[Noise, JpegArtifact]),
        (Group::A, &[Rain, LowResolution]),
        (Group::A, &[MotionBlur, LowLight]),
        (Group::A, &[DefocusBlur, Haze]),
        (Group::B, &[MotionBlur, JpegArtifact]),
        (Group::B, &[Haze, Noise]),
        (Group::B, &[DefocusBlur, LowResolution]),
        (Group::B, &[Rain, LowLight]),
        (Group::C, &[Haze, MotionBlur, LowResolution]),
        (Group::C, &[Rain, Noise, LowResolution]),
        (Group::C, &[LowLight, DefocusBlur, JpegArtifact]),
        (Group::C, &[MotionBlur, DefocusBlur, Noise]),
    ];
    rows.iter()
        .map(|(group, ds)| DegradationCombination {
            group: *group,
            degradations: ds.to_vec(),
        })
        .collect()
}

/// All permutations of `items` in lexicographic order of positions.
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    fn go<T: Clone>(rest: &mut Vec<T>, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x.clone());
            go(rest, cur, out);
            cur.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut items.to_vec(), &mut Vec::new(), &mut out);
    out
}
