//! Python bindings: the graph tools, rollouts with scripted or remote
//! policies, curriculum rewards and GRPO objective math.
//!
//! Structured values cross the boundary as plain dicts and lists built from
//! the same JSON the library and server emit, so Python sees exactly the
//! documented wire format.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use sake_core::config::{EncoderConfig, Resources};
use sake_core::eval::token_accounting;
use sake_core::grpo::{self, GrpoConfig, LogprobRecord};
use sake_core::kg::{KnowledgeGraph, TripletFormat};
use sake_core::policy::{self, RemotePolicyConfig, ScriptedPolicy};
use sake_core::reward::{self, normalize_gold, RewardSchedule};
use sake_core::rollout::{run_rollout, RolloutConfig, Trajectory, Variant};
use sake_core::server::{tool1_response, tool2_response, Tool1Request, Tool2Request};
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(sake, SakeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    SakeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// A policy backend: a fixed script or an OpenAI-compatible endpoint.
#[pyclass(frozen, name = "Policy", module = "sake")]
pub struct PyPolicy {
    inner: Arc<dyn policy::Policy>,
}

#[pymethods]
impl PyPolicy {
    /// Turn texts in order; `by_query` maps a question to its own turns.
    #[staticmethod]
    #[pyo3(signature = (turns, by_query=None))]
    fn scripted(turns: Vec<String>, by_query: Option<std::collections::HashMap<String, Vec<String>>>) -> Self {
        let mut script = ScriptedPolicy::new(turns);
        for (query, turns) in by_query.unwrap_or_default() {
            script = script.with_query(&query, turns);
        }
        Self { inner: Arc::new(script) }
    }

    #[staticmethod]
    fn from_script_file(path: PathBuf) -> PyResult<Self> {
        let script = ScriptedPolicy::from_json_path(&path).map_err(err)?;
        Ok(Self { inner: Arc::new(script) })
    }

    #[staticmethod]
    #[pyo3(signature = (endpoint, model, timeout_secs=None))]
    fn remote(endpoint: String, model: String, timeout_secs: Option<u64>) -> Self {
        let mut cfg = RemotePolicyConfig::new(endpoint, model);
        if let Some(t) = timeout_secs {
            cfg.timeout_secs = t;
        }
        Self {
            inner: Arc::new(policy::RemotePolicy::new(cfg)),
        }
    }
}

/// One rollout: segments, token mask and parsed fields.
#[pyclass(frozen, name = "Trajectory", module = "sake")]
pub struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json_line()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// Concatenated segment texts, without the prompt.
    fn text(&self) -> String {
        self.inner.text()
    }

    #[getter]
    fn id(&self) -> Option<String> {
        self.inner.id.clone()
    }

    #[getter]
    fn query(&self) -> String {
        self.inner.query.clone()
    }

    #[getter]
    fn answer(&self) -> Option<String> {
        self.inner.answer.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<u8> {
        self.inner.mask.clone()
    }

    #[getter]
    fn policy_calls(&self) -> usize {
        self.inner.policy_calls()
    }

    #[getter]
    fn total_tokens(&self) -> usize {
        self.inner.total_tokens()
    }

    /// Per-call context lengths, their sum and the final context length.
    fn token_usage<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &token_accounting(&self.inner, self.inner.prompt_tokens))
    }

    /// Behavior log-probs over every token, 0.0 on tool output.
    fn recorded_logprobs(&self) -> Vec<f64> {
        grpo::recorded_logprobs(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.mask.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trajectory(query={:?}, tokens={}, answer={:?})",
            self.inner.query,
            self.inner.mask.len(),
            self.inner.answer
        )
    }
}

/// The knowledge graph, its entity index and the encoder, loaded once and
/// shared read-only.
#[pyclass(frozen, name = "Engine", module = "sake")]
pub struct Engine {
    resources: Resources,
}

#[pymethods]
impl Engine {
    /// `kg_path` is an index file (`.json`) or a triplet file (`.tsv` or
    /// `.csv`). `embeddings` names a JSON vector table; without it labels
    /// are hashed into `dim` dimensions.
    #[new]
    #[pyo3(signature = (kg_path, embeddings=None, dim=64, seed=0))]
    fn new(py: Python<'_>, kg_path: PathBuf, embeddings: Option<PathBuf>, dim: usize, seed: u64) -> PyResult<Self> {
        let encoder = match embeddings {
            Some(path) => EncoderConfig::Table { path },
            None => EncoderConfig::Hash { dim, seed },
        };
        let resources = py.detach(|| -> Result<Resources, String> {
            let ext = kg_path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext == "json" {
                return Resources::load(&kg_path, &encoder).map_err(|e| e.to_string());
            }
            let format = if ext.eq_ignore_ascii_case("csv") {
                TripletFormat::Csv
            } else {
                TripletFormat::Tsv
            };
            let kg = KnowledgeGraph::ingest_path(&kg_path, format)
                .map_err(|e| format!("{}: {e}", kg_path.display()))?;
            let encoder = encoder.build().map_err(|e| e.to_string())?;
            Resources::build(kg, encoder).map_err(|e| e.to_string())
        });
        Ok(Self {
            resources: resources.map_err(err)?,
        })
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.resources.kg.stats())
    }

    fn entities(&self) -> Vec<String> {
        self.resources.kg.entities().iter().cloned().collect()
    }

    /// Edges with head in `heads` and tail in `tails`, sorted.
    fn edges_between(&self, heads: Vec<String>, tails: Vec<String>) -> Vec<(String, String, String)> {
        self.resources
            .kg
            .edges_between(&heads, &tails)
            .into_iter()
            .map(|t| (t.head, t.relation, t.tail))
            .collect()
    }

    /// The `p` labels most similar to `label`, as `(label, score)` pairs.
    fn top_p(&self, label: &str, p: usize) -> PyResult<Vec<(String, f64)>> {
        let res = &self.resources;
        Ok(res
            .index
            .top_p_similar(label, res.encoder.as_ref(), p)
            .map_err(err)?
            .into_iter()
            .map(|n| (n.label, n.score))
            .collect())
    }

    /// Same body as `POST /tool1`.
    #[pyo3(signature = (entities, p=None))]
    fn tool1<'py>(&self, py: Python<'py>, entities: Vec<String>, p: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let resp = tool1_response(&self.resources, &Tool1Request { entities, p }, sake_core::DEFAULT_P).map_err(err)?;
        to_py(py, &resp)
    }

    /// Same body as `POST /tool2`. `groups` is the list returned by `tool1`.
    fn tool2<'py>(
        &self,
        py: Python<'py>,
        groups: &Bound<'py, PyAny>,
        selected: Vec<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let request = Tool2Request {
            groups: from_py(groups)?,
            selected,
        };
        to_py(py, &tool2_response(&self.resources, &request))
    }

    /// Runs one rollout with the GIL released.
    #[pyo3(signature = (policy, question, variant="full", p=3, max_tokens_per_turn=1024, id=None))]
    #[allow(clippy::too_many_arguments)]
    fn rollout(
        &self,
        py: Python<'_>,
        policy: &PyPolicy,
        question: &str,
        variant: &str,
        p: usize,
        max_tokens_per_turn: usize,
        id: Option<String>,
    ) -> PyResult<PyTrajectory> {
        let config = RolloutConfig {
            p,
            max_tokens_per_turn,
            variant: variant.parse::<Variant>().map_err(err)?,
            ..RolloutConfig::default()
        };
        let result = py.detach(|| run_rollout(policy.inner.as_ref(), question, self.resources.view(), &config));
        let mut inner = result.map_err(err)?;
        inner.id = id;
        Ok(PyTrajectory { inner })
    }
}

/// Curriculum reward: format in phase 1, format times accuracy in phase 2,
/// accuracy in phase 3.
#[pyfunction]
#[pyo3(signature = (text, gold, step, s1=100, s2=300))]
fn curriculum_reward<'py>(
    py: Python<'py>,
    text: &str,
    gold: &str,
    step: u64,
    s1: u64,
    s2: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let schedule = RewardSchedule::new(s1, s2).map_err(err)?;
    to_py(py, &reward::curriculum_reward(text, &normalize_gold(gold), step, &schedule))
}

#[pyfunction]
fn format_reward(text: &str) -> u8 {
    reward::format_reward(text)
}

#[pyfunction]
fn accuracy_reward(text: &str, gold: &str) -> u8 {
    reward::accuracy_reward(text, &normalize_gold(gold))
}

#[pyfunction]
fn extract_answer(text: &str) -> Option<String> {
    sake_core::tags::extract_answer(text)
}

#[pyfunction]
#[pyo3(signature = (rewards, floor=grpo::DEFAULT_STD_FLOOR))]
fn group_advantages(rewards: Vec<f64>, floor: f64) -> PyResult<Vec<f64>> {
    grpo::group_advantages(&rewards, floor).map_err(err)
}

#[pyfunction]
fn surrogate_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    grpo::surrogate_term(ratio, advantage, epsilon)
}

#[pyfunction]
fn k3(logprob_ref: f64, logprob_current: f64) -> f64 {
    grpo::k3(logprob_ref, logprob_current)
}

/// Per-group reports for aligned trajectories and log-prob records, the
/// same lines `sake grpo` prints.
#[pyfunction]
#[pyo3(signature = (trajectories, records, clip_epsilon=0.2, kl_beta=grpo::DEFAULT_KL_BETA))]
fn grpo_batch<'py>(
    py: Python<'py>,
    trajectories: Vec<PyRef<'py, PyTrajectory>>,
    records: &Bound<'py, PyAny>,
    clip_epsilon: f64,
    kl_beta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let config = GrpoConfig {
        clip_epsilon,
        kl_beta,
        ..GrpoConfig::default()
    };
    config.validate().map_err(err)?;
    let records: Vec<LogprobRecord> = from_py(records)?;
    let trajectories = trajectories.iter().map(|t| t.inner.clone()).collect();
    let reports = grpo::evaluate_batch(trajectories, records, &config).map_err(err)?;
    to_py(py, &reports)
}

/// Adds every binding to `m`. Shared by the extension entry point and
/// embedded-interpreter tests.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SakeError", m.py().get_type::<SakeError>())?;
    m.add_class::<Engine>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(curriculum_reward, m)?)?;
    m.add_function(wrap_pyfunction!(format_reward, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_reward, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_term, m)?)?;
    m.add_function(wrap_pyfunction!(k3, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_batch, m)?)?;
    Ok(())
}

#[pymodule]
fn sake(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
