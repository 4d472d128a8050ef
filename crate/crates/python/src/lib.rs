//! Python bindings. Scenarios, labels and predictions cross the boundary as
//! JSON strings in the same formats the CLI reads and writes.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mi::autolabel::LabelConfig;
use mi::eval::MemberOutput;
use mi::model::{Model, ModelConfig};
use mi::scene::{normalize_scene, Scenario, SceneConfig};
use mi::synth::GeneratorConfig;

fn py_err(e: mi::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Synthetic scenario `index` of the corpus seeded by `seed`, as JSON.
#[pyfunction]
#[pyo3(signature = (seed, index, future_steps = 80))]
fn generate_scenario(seed: u64, index: usize, future_steps: usize) -> PyResult<String> {
    let cfg = GeneratorConfig {
        seed,
        future_steps,
        ..GeneratorConfig::default()
    };
    let (s, _) = mi::synth::generate_scenario(&cfg, index).map_err(py_err)?;
    s.to_json().map_err(py_err)
}

/// Intention and occupancy labels of a scenario, as label-dump JSON.
#[pyfunction]
fn label_scenario(scenario_json: &str) -> PyResult<String> {
    let s = Scenario::from_json(scenario_json).map_err(py_err)?;
    let l = mi::autolabel::label_scenario(&s, &LabelConfig::default(), &SceneConfig::default()).map_err(py_err)?;
    l.to_json().map_err(py_err)
}

/// Prediction of a freshly initialized model. `preset` is `"tiny"` (sized
/// to the scenario's horizon) or `"toy"`.
#[pyfunction]
#[pyo3(signature = (scenario_json, seed = 0, preset = "tiny"))]
fn predict(scenario_json: &str, seed: u64, preset: &str) -> PyResult<String> {
    let s = Scenario::from_json(scenario_json).map_err(py_err)?;
    let cfg = match preset {
        "tiny" => ModelConfig::tiny(s.target().future.len().max(1)),
        "toy" => ModelConfig::toy(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    let (model, store) = Model::new(cfg, seed).map_err(py_err)?;
    let scene = normalize_scene(&s, &SceneConfig::default()).map_err(py_err)?;
    let p = model.predict(&store, &scene).map_err(py_err)?;
    serde_json::to_string(&p.to_dump(&scene)).map_err(json_err)
}

#[pyfunction]
fn adaptive_threshold(length: f64) -> f64 {
    mi::eval::adaptive_threshold(length)
}

/// Endpoint-NMS ensemble of `[{"trajectories": ..., "scores": ...}, ...]`.
#[pyfunction]
fn ensemble(members_json: &str) -> PyResult<String> {
    let members: Vec<MemberOutput> = serde_json::from_str(members_json).map_err(json_err)?;
    let out = mi::eval::ensemble_nms(&members).map_err(py_err)?;
    serde_json::to_string(&out).map_err(json_err)
}

/// Runs the finite-difference suite; returns `(passed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, cases = 1))]
fn gradcheck(seed: u64, cases: usize) -> PyResult<(bool, f64)> {
    let r = mi::gradsuite::run_suite(seed, cases).map_err(py_err)?;
    Ok((r.passed(), r.max_rel_error()))
}

#[pymodule]
fn motion_intent(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(label_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
