//! Python bindings. Structured values cross the boundary as JSON text or
//! plain dicts and lists.

use std::collections::BTreeSet;

use agentir::explore::explore_and_build_kb;
use agentir::harness::{reference_config, parse_config, run_batch, Harness};
use agentir::knowledge::{reported_knowledge_base, parse_kb, KnowledgeBase};
use agentir::model::{Degradation, DegradationProfile, Severity, TaskKind};
use agentir::perception::classification_metrics as metrics;
use agentir::rng::Substream;
use agentir::search::{restored, run_workflow, RunMode, SearchDeps};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

/// Per-degradation severities plus the tools applied so far.
#[pyclass(name = "Profile", from_py_object)]
#[derive(Clone)]
struct PyProfile {
    inner: DegradationProfile,
}

#[pymethods]
impl PyProfile {
    #[new]
    #[pyo3(signature = (severities = None, origin = String::new()))]
    fn new(severities: Option<Vec<(String, String)>>, origin: String) -> PyResult<Self> {
        let mut inner = DegradationProfile::new(origin);
        for (d, s) in severities.unwrap_or_default() {
            inner.set(parse::<Degradation>(&d)?, parse::<Severity>(&s)?);
        }
        Ok(PyProfile { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyProfile {
            inner: serde_json::from_str(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("profile serializes")
    }

    fn severity(&self, degradation: &str) -> PyResult<String> {
        Ok(self.inner.severity(parse(degradation)?).name().to_string())
    }

    fn set(&mut self, degradation: &str, severity: &str) -> PyResult<()> {
        self.inner.set(parse(degradation)?, parse(severity)?);
        Ok(())
    }

    fn severities(&self) -> Vec<(String, String)> {
        self.inner
            .severities()
            .map(|(d, s)| (d.name().to_string(), s.name().to_string()))
            .collect()
    }

    fn history(&self) -> Vec<(String, String)> {
        self.inner
            .history
            .iter()
            .map(|s| (s.task.name().to_string(), s.tool.clone()))
            .collect()
    }

    #[getter]
    fn restored(&self) -> bool {
        restored(&self.inner)
    }

    fn __repr__(&self) -> String {
        let parts: Vec<String> = self.severities().into_iter().map(|(d, s)| format!("{d}={s}")).collect();
        format!("Profile({})", parts.join(", "))
    }
}

/// An environment, tools, evaluator and scheduler built from a config,
/// paired with a knowledge base.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    harness: Harness,
    kb: KnowledgeBase,
    config: agentir::harness::ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    /// `config` and `kb` are JSON documents; both default to the reported calibration.
    #[new]
    #[pyo3(signature = (config = None, kb = None))]
    fn new(config: Option<&str>, kb: Option<&str>) -> PyResult<Self> {
        let config = match config {
            Some(text) => parse_config(text).map_err(value_err)?,
            None => reference_config(),
        };
        let kb = match kb {
            Some(text) => parse_kb(text).map_err(value_err)?,
            None => reported_knowledge_base(),
        };
        let harness = Harness::build(&config).map_err(value_err)?;
        Ok(PyExperiment { harness, kb, config })
    }

    fn kb_json(&self) -> String {
        serde_json::to_string_pretty(&self.kb).expect("kb serializes")
    }

    /// Orders the restoration tasks for the given degradations.
    #[pyo3(signature = (degradations, seed = 0))]
    fn schedule(&self, degradations: Vec<String>, seed: u64) -> PyResult<Vec<String>> {
        let tasks = degradations
            .iter()
            .map(|d| parse::<Degradation>(d).map(|d| d.task()))
            .collect::<PyResult<Vec<TaskKind>>>()?;
        let s = self
            .harness
            .scheduler
            .schedule(&tasks, &self.kb, &BTreeSet::new(), Substream::root(seed))
            .map_err(value_err)?;
        Ok(s.plan.tasks().iter().map(|t| t.name().to_string()).collect())
    }

    /// Runs one workflow; returns the output profile and the trace as JSON.
    #[pyo3(signature = (profile, seed = 0, mode = "full"))]
    fn restore(&self, py: Python<'_>, profile: &PyProfile, seed: u64, mode: &str) -> PyResult<(PyProfile, String)> {
        let mode: RunMode = parse(mode)?;
        let h = &self.harness;
        let deps = SearchDeps {
            scheduler: h.scheduler.as_ref(),
            evaluator: h.evaluator.as_ref(),
            toolbox: &h.toolbox,
            policy: mode.policy(h.policy),
            kb: &self.kb,
            rollback: mode.rollback(),
        };
        let input = profile.inner.clone();
        let (out, trace) = py.detach(|| run_workflow(&input, &deps, Substream::root(seed)));
        Ok((PyProfile { inner: out }, serde_json::to_string(&trace).expect("trace serializes")))
    }

    /// Batch over the configured combinations; returns the report as JSON.
    #[pyo3(signature = (runs = 10, seed = 0, modes = None, jobs = 1))]
    fn run_batch(&self, py: Python<'_>, runs: u64, seed: u64, modes: Option<Vec<String>>, jobs: usize) -> PyResult<String> {
        let modes = match modes {
            Some(m) => m.iter().map(|s| parse::<RunMode>(s)).collect::<PyResult<Vec<_>>>()?,
            None => self.config.run.modes.clone(),
        };
        let combos = &self.config.run.combinations;
        let out = py
            .detach(|| run_batch(&self.harness, &self.kb, combos, &modes, runs, seed, jobs))
            .map_err(value_err)?;
        Ok(out.report.to_json())
    }

    /// Explores with the configured settings and returns the resulting
    /// knowledge base as JSON.
    #[pyo3(signature = (seed = None))]
    fn explore(&self, py: Python<'_>, seed: Option<u64>) -> PyResult<String> {
        let mut cfg = self.config.exploration.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let h = &self.harness;
        let kb = py
            .detach(|| explore_and_build_kb(&h.toolbox, &cfg, h.evaluator.as_ref()))
            .map_err(value_err)?;
        Ok(serde_json::to_string_pretty(&kb).expect("kb serializes"))
    }
}

#[pyfunction]
fn reported_kb_json() -> String {
    serde_json::to_string_pretty(&reported_knowledge_base()).expect("kb serializes")
}

/// `items` are `(degradation, predicted, actual)` triples.
#[pyfunction]
fn classification_metrics<'py>(py: Python<'py>, items: Vec<(String, bool, bool)>) -> PyResult<Bound<'py, PyDict>> {
    let parsed = items
        .iter()
        .map(|(d, p, a)| parse::<Degradation>(d).map(|d| (d, *p, *a)))
        .collect::<PyResult<Vec<_>>>()?;
    let table = metrics(&parsed).map_err(|e| PyValueError::new_err(format!("{e:?}")))?;
    let out = PyDict::new(py);
    for (d, m) in table {
        let row = PyDict::new(py);
        row.set_item("tp", m.tp)?;
        row.set_item("fp", m.fp)?;
        row.set_item("fn", m.fn_)?;
        row.set_item("precision", m.precision)?;
        row.set_item("recall", m.recall)?;
        row.set_item("f1", m.f1)?;
        out.set_item(d.name(), row)?;
    }
    Ok(out)
}

#[pymodule(name = "agentir")]
fn agentir_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfile>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(reported_kb_json, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    Ok(())
}
