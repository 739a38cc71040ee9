//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists built from the JSON form of the Rust types.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use star_forge::backend::{BackendMode, LlmClient};
use star_forge::codec::{self, AnnotatedPassage};
use star_forge::dataset;
use star_forge::ontology::{load_ontology, load_ontology_file};
use star_forge::pipeline::{GenerateOptions, RunConfig, Workspace};
use star_forge::pools::{PoolKey, PoolSet};
use star_forge::prompt::{build_passage_prompt, Task};
use star_forge::refine::LexicalChecker;
use star_forge::sampler::{self, GenerationConfig, PlanItem, TargetStructure};

create_exception!(star_forge_py, StarForgeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    StarForgeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

#[pyclass(module = "star_forge_py", frozen)]
struct Ontology {
    inner: star_forge::ontology::Ontology,
}

#[pymethods]
impl Ontology {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Ontology {
            inner: load_ontology(text.as_bytes()).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Ontology {
            inner: load_ontology_file(&path).map_err(err)?,
        })
    }

    #[getter]
    fn event_types(&self) -> Vec<String> {
        self.inner.event_types.iter().map(|e| e.name.clone()).collect()
    }

    #[getter]
    fn entity_types(&self) -> Vec<String> {
        self.inner.entity_types.clone()
    }

    fn roles(&self, event_type: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.roles_of(event_type).map_err(err)?.iter().map(|r| r.role.clone()).collect())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

#[pyclass(module = "star_forge_py", frozen)]
struct Pools {
    inner: PoolSet,
}

#[pymethods]
impl Pools {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Pools {
            inner: PoolSet::load(&path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Trigger candidates of `event_type`, or argument candidates when
    /// `role` is given.
    #[pyo3(signature = (event_type, role=None))]
    fn candidates(&self, event_type: &str, role: Option<&str>) -> Vec<String> {
        let key = match role {
            Some(r) => PoolKey::Argument {
                event_type: event_type.into(),
                role: r.into(),
            },
            None => PoolKey::Trigger {
                event_type: event_type.into(),
            },
        };
        self.inner.get(&key).map(|p| p.candidates.clone()).unwrap_or_default()
    }
}

#[pyfunction]
#[pyo3(signature = (ontology, k, n, rng_seed, max_density=None, hallucination_bins=None))]
fn plan_batch<'py>(
    py: Python<'py>,
    ontology: &Ontology,
    k: usize,
    n: usize,
    rng_seed: u64,
    max_density: Option<usize>,
    hallucination_bins: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut config = GenerationConfig::new(k, n, rng_seed);
    if let Some(d) = max_density {
        config.max_density = d;
    }
    if let Some(b) = hallucination_bins {
        config.hallucination_bins = b;
    }
    let plan = sampler::plan_batch(&config, &ontology.inner).map_err(err)?;
    to_py(py, &plan.items)
}

#[pyfunction]
fn sample_target_structure<'py>(
    item: &Bound<'py, PyAny>,
    pools: &Pools,
    ontology: &Ontology,
) -> PyResult<Bound<'py, PyAny>> {
    let plan_item: PlanItem = from_py(item)?;
    let y = sampler::sample_target_structure(&plan_item, &pools.inner, &ontology.inner).map_err(err)?;
    to_py(item.py(), &y)
}

#[pyfunction]
#[pyo3(signature = (structure, ontology, task="ee"))]
fn passage_prompt(structure: &Bound<'_, PyAny>, ontology: &Ontology, task: &str) -> PyResult<String> {
    let y: TargetStructure = from_py(structure)?;
    let task: Task = serde_json::from_value(serde_json::Value::String(task.into())).map_err(err)?;
    Ok(build_passage_prompt(&y, &[], &ontology.inner, task).map_err(err)?.rendered)
}

#[pyfunction]
fn encode(passage: &Bound<'_, PyAny>) -> PyResult<String> {
    let a: AnnotatedPassage = from_py(passage)?;
    codec::encode(&a).map_err(err)
}

#[pyfunction]
fn decode<'py>(
    py: Python<'py>,
    tagged: &str,
    structure: &Bound<'py, PyAny>,
    ontology: &Ontology,
) -> PyResult<Bound<'py, PyAny>> {
    let y: TargetStructure = from_py(structure)?;
    to_py(py, &codec::decode(tagged, &y, &ontology.inner))
}

#[pyfunction]
fn strip_tags(tagged: &str) -> String {
    codec::strip_tags(tagged)
}

#[pyfunction]
fn hallucination_count(ratio: f64, roles: usize) -> usize {
    sampler::hallucination_count(ratio, roles)
}

/// Whether a reflection answer reads as affirmative.
#[pyfunction]
fn is_affirmative(answer: &str) -> bool {
    LexicalChecker::classify(answer)
}

#[pyfunction]
fn read_instances<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &dataset::read_instances(&path).map_err(err)?)
}

#[pyfunction]
fn compute_stats<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let instances = dataset::read_instances(&path).map_err(err)?;
    to_py(py, &dataset::compute_stats(&instances))
}

#[pyfunction]
#[pyo3(signature = (input, out, drop_flagged=false))]
fn export_span_format<'py>(
    py: Python<'py>,
    input: PathBuf,
    out: PathBuf,
    drop_flagged: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let instances = dataset::read_instances(&input).map_err(err)?;
    to_py(py, &dataset::export_span_format(&instances, &out, drop_flagged).map_err(err)?)
}

/// Runs generation for a configuration file. With `replay`, completions come
/// from that cassette and no network access happens.
#[pyfunction]
#[pyo3(signature = (config, replay=None, with_refine=true, workers=None))]
fn generate<'py>(
    py: Python<'py>,
    config: PathBuf,
    replay: Option<PathBuf>,
    with_refine: bool,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let instances = py
        .detach(|| -> star_forge::Result<_> {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(c) = replay {
                cfg.backend.mode = BackendMode::Replay;
                cfg.backend.cassette_path = Some(c);
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            let client = LlmClient::new(&cfg.backend)?;
            let ws = Workspace::open(cfg, true)?;
            let checkers = ws.checkers()?;
            let plan = ws.plan()?;
            let opts = GenerateOptions {
                workers: ws.config.workers,
                dump_prompts: None,
                with_refine,
            };
            ws.generate(&plan, &client, &checkers, &opts)
        })
        .map_err(err)?;
    to_py(py, &instances)
}

#[pymodule]
fn star_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StarForgeError", m.py().get_type::<StarForgeError>())?;
    m.add_class::<Ontology>()?;
    m.add_class::<Pools>()?;
    m.add_function(wrap_pyfunction!(plan_batch, m)?)?;
    m.add_function(wrap_pyfunction!(sample_target_structure, m)?)?;
    m.add_function(wrap_pyfunction!(passage_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(strip_tags, m)?)?;
    m.add_function(wrap_pyfunction!(hallucination_count, m)?)?;
    m.add_function(wrap_pyfunction!(is_affirmative, m)?)?;
    m.add_function(wrap_pyfunction!(read_instances, m)?)?;
    m.add_function(wrap_pyfunction!(compute_stats, m)?)?;
    m.add_function(wrap_pyfunction!(export_span_format, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
