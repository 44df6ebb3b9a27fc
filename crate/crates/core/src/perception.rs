//! Severity assessment (Evaluate / Reflect) and binary-presence metrics.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Agenda, Degradation, DegradationProfile, Severity, TaskKind};
use crate::rng::Substream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("evaluator backend failed: {0}")]
    Backend(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no predictions given")]
    EmptyInput,
}

/// Reads the severity of one degradation off a profile. Implementations
/// must be pure functions of (profile, degradation, stream).
pub trait Evaluator: Send + Sync {
    fn assess(
        &self,
        profile: &DegradationProfile,
        degradation: Degradation,
        stream: Substream,
    ) -> Result<Severity, PerceptionError>;
}

/// Reports stored severities verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectOracle;

impl Evaluator for PerfectOracle {
    fn assess(
        &self,
        profile: &DegradationProfile,
        degradation: Degradation,
        _stream: Substream,
    ) -> Result<Severity, PerceptionError> {
        Ok(profile.severity(degradation))
    }
}

/// Per-degradation confusion: `p_miss` reports a non-clean severity one
/// level lower, `p_false` reports an absent degradation as `Medium`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub p_miss: f64,
    pub p_false: f64,
}

impl Confusion {
    /// Confusion that reproduces a target precision/recall when present
    /// instances sit at `Medium` (so every miss flips presence) and a
    /// fraction `prevalence` of instances is truly present.
    pub fn from_precision_recall(
        precision: f64,
        recall: f64,
        prevalence: f64,
    ) -> Result<Confusion, PerceptionError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(recall) && precision > 0.0 && precision <= 1.0 && prevalence > 0.0 && prevalence < 1.0) {
            return Err(PerceptionError::InvalidNoise(format!(
                "precision {precision}, recall {recall}, prevalence {prevalence}"
            )));
        }
        let p_false = prevalence * recall * (1.0 - precision) / (precision * (1.0 - prevalence));
        if p_false > 1.0 {
            return Err(PerceptionError::InvalidNoise(format!(
                "precision {precision} unreachable at prevalence {prevalence}"
            )));
        }
        Ok(Confusion {
            p_miss: 1.0 - recall,
            p_false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub confusion: BTreeMap<Degradation, Confusion>,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        for (d, c) in &self.confusion {
            for p in [c.p_miss, c.p_false] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(PerceptionError::InvalidNoise(format!(
                        "{d}: probability {p} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Noise calibrated to the reported evaluator quality table.
    pub fn from_reported(prevalence: f64) -> Result<NoiseModel, PerceptionError> {
        let mut confusion = BTreeMap::new();
        for row in reported_evaluator_metrics() {
            confusion.insert(
                row.degradation,
                Confusion::from_precision_recall(row.precision, row.recall, prevalence)?,
            );
        }
        Ok(NoiseModel { confusion })
    }
}

#[derive(Debug, Clone)]
pub struct NoisyOracle {
    model: NoiseModel,
}

impl NoisyOracle {
    pub fn new(model: NoiseModel) -> Result<NoisyOracle, PerceptionError> {
        model.validate()?;
        Ok(NoisyOracle { model })
    }
}

impl Evaluator for NoisyOracle {
    fn assess(
        &self,
        profile: &DegradationProfile,
        degradation: Degradation,
        stream: Substream,
    ) -> Result<Severity, PerceptionError> {
        let truth = profile.severity(degradation);
        let c = self.model.confusion.get(&degradation).copied().unwrap_or_default();
        let mut rng = stream.child(degradation.index() as u64).rng();
        let (u_miss, u_false) = (rng.random::<f64>(), rng.random::<f64>());
        if !truth.is_present() && u_false < c.p_false {
            return Ok(Severity::Medium);
        }
        if truth > Severity::VeryLow && u_miss < c.p_miss {
            return Ok(truth.pred());
        }
        Ok(truth)
    }
}

/// The `evaluator` section of a config document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorConfig {
    #[default]
    Perfect,
    Noisy {
        #[serde(default)]
        confusion: BTreeMap<Degradation, Confusion>,
    },
    /// Confusions derived from the reported precision/recall table.
    Reported { prevalence: f64 },
    /// Backed by the HTTP bridge.
    Remote,
}

/// Detected subtasks: one per degradation assessed at or above `Medium`,
/// in canonical degradation order.
pub fn evaluate_agenda(
    ev: &dyn Evaluator,
    profile: &DegradationProfile,
    stream: Substream,
) -> Result<Agenda, PerceptionError> {
    let mut tasks = Vec::new();
    for d in Degradation::ALL {
        if ev.assess(profile, d, stream.child(d.index() as u64))?.is_present() {
            tasks.push(d.task());
        }
    }
    Ok(Agenda::new(tasks).expect("one task per degradation"))
}

pub fn reflect(
    ev: &dyn Evaluator,
    profile: &DegradationProfile,
    task: TaskKind,
    stream: Substream,
) -> Result<Severity, PerceptionError> {
    ev.assess(profile, task.degradation(), stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
    /// No positive ground truth; recall reported as 0.
    pub recall_undefined: bool,
}

/// Per-degradation precision/recall/F1 from `(degradation, predicted
/// present, truly present)` items.
pub fn classification_metrics(
    items: &[(Degradation, bool, bool)],
) -> Result<BTreeMap<Degradation, ClassMetrics>, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut counts: BTreeMap<Degradation, (u64, u64, u64)> = BTreeMap::new();
    for &(d, predicted, actual) in items {
        let c = counts.entry(d).or_default();
        match (predicted, actual) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    Ok(counts
        .into_iter()
        .map(|(d, (tp, fp, fn_))| {
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let m = ClassMetrics {
                tp,
                fp,
                fn_,
                precision,
                recall,
                f1,
                precision_undefined: tp + fp == 0,
                recall_undefined: tp + fn_ == 0,
            };
            (d, m)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportedMetrics {
    pub degradation: Degradation,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Measured presence-detection quality of the fine-tuned evaluator. Low
/// resolution has no row.
pub fn reported_evaluator_metrics() -> [ReportedMetrics; 7] {
    use Degradation::*;
    let row = |degradation, precision, recall, f1| ReportedMetrics {
        degradation,
        precision,
        recall,
        f1,
    };
    [
        row(Noise, 0.99, 0.92, 0.95),
        row(MotionBlur, 0.88, 0.52, 0.65),
        row(DefocusBlur, 0.82, 0.65, 0.72),
        row(JpegArtifact, 0.98, 1.00, 0.99),
        row(Rain, 0.97, 0.98, 0.98),
        row(Haze, 0.88, 0.91, 0.89),
        row(LowLight, 0.87, 0.65, 0.74),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noisy(d: Degradation, p_miss: f64, p_false: f64) -> NoisyOracle {
        let mut confusion = BTreeMap::new();
        confusion.insert(d, Confusion { p_miss, p_false });
        NoisyOracle::new(NoiseModel { confusion }).unwrap()
    }

    #[test]
    fn agenda_from_threshold() {
        let p = DegradationProfile::new("x")
            .with(Degradation::Rain, Severity::High)
            .with(Degradation::Haze, Severity::Medium)
            .with(Degradation::Noise, Severity::Low);
        let agenda = evaluate_agenda(&PerfectOracle, &p, Substream::root(0)).unwrap();
        assert_eq!(agenda.to_set(), [TaskKind::Deraining, TaskKind::Dehazing].into());
        let empty = evaluate_agenda(&PerfectOracle, &DegradationProfile::new("c"), Substream::root(0)).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn forced_false_positive() {
        let ev = noisy(Degradation::Noise, 0.0, 1.0);
        let agenda = evaluate_agenda(&ev, &DegradationProfile::new("c"), Substream::root(3)).unwrap();
        assert!(agenda.contains(TaskKind::Denoising));
        assert_eq!(agenda.len(), 1);
    }

    #[test]
    fn reflect_reads_task_degradation() {
        let p = DegradationProfile::new("x").with(Degradation::Haze, Severity::High);
        let s = Substream::root(0);
        assert_eq!(reflect(&PerfectOracle, &p, TaskKind::Dehazing, s).unwrap(), Severity::High);
        assert_eq!(reflect(&PerfectOracle, &p, TaskKind::Denoising, s).unwrap(), Severity::VeryLow);
        let low = DegradationProfile::new("x").with(Degradation::Noise, Severity::Low);
        let ev = noisy(Degradation::Noise, 1.0, 0.0);
        assert_eq!(reflect(&ev, &low, TaskKind::Denoising, s).unwrap(), Severity::VeryLow);
        let high = DegradationProfile::new("x").with(Degradation::Noise, Severity::High);
        assert_eq!(reflect(&ev, &high, TaskKind::Denoising, s).unwrap(), Severity::Medium);
    }

    #[test]
    fn noisy_oracle_is_stream_deterministic() {
        let ev = noisy(Degradation::Haze, 0.5, 0.5);
        let p = DegradationProfile::new("x").with(Degradation::Haze, Severity::Medium);
        for k in 0..50 {
            let s = Substream::root(k);
            assert_eq!(
                ev.assess(&p, Degradation::Haze, s).unwrap(),
                ev.assess(&p, Degradation::Haze, s).unwrap()
            );
        }
    }

    #[test]
    fn metrics_examples() {
        let mut items = vec![(Degradation::Rain, true, true); 100];
        let m = classification_metrics(&items).unwrap()[&Degradation::Rain];
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        items.clear();
        items.extend(std::iter::repeat_n((Degradation::Noise, true, true), 92));
        items.extend(std::iter::repeat_n((Degradation::Noise, false, true), 8));
        items.push((Degradation::Noise, true, false));
        let m = classification_metrics(&items).unwrap()[&Degradation::Noise];
        assert_eq!((m.tp, m.fp, m.fn_), (92, 1, 8));
        assert!((m.precision - 92.0 / 93.0).abs() < 1e-12);
        assert!((m.recall - 0.92).abs() < 1e-12);
        assert_eq!(format!("{:.2}/{:.2}/{:.2}", m.precision, m.recall, m.f1), "0.99/0.92/0.95");

        items.clear();
        items.extend(std::iter::repeat_n((Degradation::MotionBlur, true, true), 52));
        items.extend(std::iter::repeat_n((Degradation::MotionBlur, false, true), 48));
        items.extend(std::iter::repeat_n((Degradation::MotionBlur, true, false), 7));
        let m = classification_metrics(&items).unwrap()[&Degradation::MotionBlur];
        assert!((m.recall - 0.52).abs() < 1e-12);
    }

    #[test]
    fn metrics_flags_and_errors() {
        assert_eq!(classification_metrics(&[]), Err(MetricsError::EmptyInput));
        let m = classification_metrics(&[(Degradation::Haze, false, true)]).unwrap()[&Degradation::Haze];
        assert!(m.precision_undefined);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn calibration_round_trip() {
        let (precision, recall, prevalence) = (0.88, 0.52, 0.5);
        let c = Confusion::from_precision_recall(precision, recall, prevalence).unwrap();
        let ev = noisy(Degradation::MotionBlur, c.p_miss, c.p_false);
        let present = DegradationProfile::new("p").with(Degradation::MotionBlur, Severity::Medium);
        let absent = DegradationProfile::new("a");
        let root = Substream::root(17);
        let n = 20_000u64;
        let mut items = Vec::new();
        for i in 0..n {
            let truly = (i as f64) < prevalence * n as f64;
            let p = if truly { &present } else { &absent };
            let s = ev.assess(p, Degradation::MotionBlur, root.child(i)).unwrap();
            items.push((Degradation::MotionBlur, s.is_present(), truly));
        }
        let m = classification_metrics(&items).unwrap()[&Degradation::MotionBlur];
        let positives = prevalence * n as f64;
        let sigma_r = (recall * (1.0 - recall) / positives).sqrt();
        let predicted = (m.tp + m.fp) as f64;
        let sigma_p = (precision * (1.0 - precision) / predicted).sqrt();
        assert!((m.recall - recall).abs() <= 3.0 * sigma_r, "recall {}", m.recall);
        assert!((m.precision - precision).abs() <= 3.0 * sigma_p, "precision {}", m.precision);
    }

    #[test]
    fn reported_noise_model_is_valid() {
        let model = NoiseModel::from_reported(0.5).unwrap();
        assert_eq!(model.confusion.len(), 7);
        model.validate().unwrap();
    }

    #[test]
    fn evaluator_config_parses() {
        let cfg: EvaluatorConfig =
            serde_json::from_str(r#"{"kind":"noisy","confusion":{"noise":{"p_miss":0.1,"p_false":0.0}}}"#).unwrap();
        assert!(matches!(cfg, EvaluatorConfig::Noisy { .. }));
        let cfg: EvaluatorConfig = serde_json::from_str(r#"{"kind":"perfect"}"#).unwrap();
        assert_eq!(cfg, EvaluatorConfig::Perfect);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]
        #[test]
        fn harmonic_mean_identity(
            flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..300)
        ) {
            let items: Vec<_> = flags.iter().map(|(p, t)| (Degradation::Rain, *p, *t)).collect();
            let m = classification_metrics(&items).unwrap()[&Degradation::Rain];
            for x in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            if m.precision + m.recall > 0.0 {
                let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - h).abs() <= 1e-9);
            }
        }

        #[test]
        fn perfect_oracle_is_identity(levels in proptest::collection::vec(0u8..5, 8), key in any::<u64>()) {
            let mut p = DegradationProfile::new("x");
            for (d, l) in Degradation::ALL.iter().zip(&levels) {
                p.set(*d, Severity::from_level(*l));
            }
            for d in Degradation::ALL {
                prop_assert_eq!(PerfectOracle.assess(&p, d, Substream::root(key)).unwrap(), p.severity(d));
            }
            let agenda = evaluate_agenda(&PerfectOracle, &p, Substream::root(key)).unwrap();
            for d in Degradation::ALL {
                prop_assert_eq!(agenda.contains(d.task()), p.severity(d) >= Severity::Medium);
            }
        }
    }
}
