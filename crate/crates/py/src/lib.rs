//! Python module `wisp`.
//!
//! Results cross the boundary as plain Python objects (dicts, lists,
//! floats) built from the same JSON the CLI writes. Every entry point takes
//! a scenario, either a bundled name or TOML text, plus `--set` style
//! overrides.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value};
use wisp_core::channel::{self, PathKind};
use wisp_core::dpolicy::{self, DiffusionPolicy};
use wisp_core::incentive;
use wisp_core::rng::derive_seed;
use wisp_core::scenario::{self, Scenario};
use wisp_core::{smsp, spectral};

#[derive(Debug)]
pub enum BindError {
    Invalid(String),
    Runtime(String),
}

impl From<wisp_core::Error> for BindError {
    fn from(e: wisp_core::Error) -> Self {
        BindError::Runtime(e.to_string())
    }
}

impl From<BindError> for PyErr {
    fn from(e: BindError) -> Self {
        match e {
            BindError::Invalid(m) => PyValueError::new_err(m),
            BindError::Runtime(m) => PyRuntimeError::new_err(m),
        }
    }
}

pub type BindResult<T> = std::result::Result<T, BindError>;

/// Resolve a bundled name or TOML text, apply overrides and an optional seed.
pub fn load(source: &str, overrides: &[String], seed: Option<u64>) -> BindResult<Scenario> {
    let text = scenario::bundled(source).unwrap_or(source);
    let mut sc = Scenario::parse(text, overrides).map_err(|e| BindError::Invalid(e.to_string()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

fn simulate(sc: &Scenario) -> BindResult<(Vec<Vec<channel::PathSpec>>, Vec<channel::CsiStream>)> {
    let mut truth = channel::ground_truth_paths(&sc.scene)?;
    channel::randomize_phases(&mut truth, sc.seed);
    let streams =
        channel::synthesize_csi(&sc.scene, &truth, sc.channel.noise, sc.channel.phase_errors, sc.channel.frames, sc.seed)?;
    Ok((truth, streams))
}

/// Per receiver: `frames[u][m][n] = [re, im]`.
pub fn csi_value(sc: &Scenario) -> BindResult<Value> {
    let (_, streams) = simulate(sc)?;
    Ok(json!(streams
        .iter()
        .map(|s| json!({
            "receiver_id": s.receiver_id,
            "noise_variance_linear": s.noise_var,
            "phase_errors_rad": s.phase_errors_rad,
            "frames": s.frames.iter().map(|f| (0..f.rows())
                .map(|m| f.row(m).iter().map(|z| [z.re, z.im]).collect::<Vec<_>>())
                .collect::<Vec<_>>()).collect::<Vec<_>>(),
        }))
        .collect::<Vec<_>>()))
}

pub fn estimate_value(sc: &Scenario) -> BindResult<Value> {
    let (truth, streams) = simulate(sc)?;
    let mut out = Vec::new();
    for (q, s) in streams.iter().enumerate() {
        let res = spectral::estimate_paths(s, &sc.scene, &sc.estimation.music)?;
        let user = truth[q].iter().find(|p| p.kind == PathKind::UserReflection);
        let m = user.and_then(|u| spectral::match_path(&res.estimate.peaks, u.aoa_rad, u.tof_s));
        out.push(json!({
            "receiver_id": s.receiver_id,
            "estimated_paths_count": res.decomposition.order,
            "true_paths_count": truth[q].len(),
            "peaks": res.estimate.peaks.iter().map(|p| json!({
                "aoa_deg": p.aoa_rad.to_degrees(),
                "tof_ns": p.tof_s * 1e9,
            })).collect::<Vec<_>>(),
            "user_aoa_error_deg": m.map(|m| m.aoa_error_deg),
            "user_tof_error_ns": m.map(|m| m.tof_error_ns),
        }));
    }
    Ok(Value::Array(out))
}

pub fn smsp_value(sc: &Scenario) -> BindResult<Value> {
    let (truth, streams) = simulate(sc)?;
    let out = smsp::run_smsp(&sc.scene, &streams, &sc.estimation, Some(&truth))?;
    let coherence = smsp::user_coherence(&sc.scene, &streams, &out.receivers, &truth, sc.estimation.rotation, 0)?;
    Ok(json!({
        "location_m": [out.location.pos.x, out.location.pos.y],
        "location_error_m": out.location.pos.distance(&sc.scene.user_pos),
        "s1_score": out.scores.s1,
        "s2_score": out.scores.s2,
        "user_coherence_ratio": coherence,
        "feature_frames_count": out.features.len(),
    }))
}

fn outcome_value(o: &incentive::GameOutcome) -> Value {
    json!({
        "v_r": o.strategy.v_r,
        "I_b": o.strategy.i_b,
        "chi_s": o.allocation.chi_s,
        "chi_ag": o.allocation.chi_ag,
        "U_us": o.u_us,
        "U_vsp": o.u_vsp,
        "Q_t": o.q_t,
    })
}

/// Oracle optimum of the scenario's economy; `null` when nothing is feasible.
pub fn oracle_value(sc: &Scenario) -> BindResult<Value> {
    let o = incentive::oracle_optimal_pricing(&sc.economy.env, &sc.economy.pricing)?;
    Ok(o.as_ref().map_or(Value::Null, outcome_value))
}

/// Train on the scenario's sampler and return the checkpoint as JSON text.
pub fn train_json(sc: &Scenario) -> BindResult<String> {
    let run = dpolicy::train_policy(&sc.training.sampler, &sc.training.config, sc.seed)?;
    serde_json::to_string(&run.policy).map_err(|e| BindError::Runtime(e.to_string()))
}

fn policy_from(text: &str) -> BindResult<DiffusionPolicy> {
    let p: DiffusionPolicy = serde_json::from_str(text).map_err(|e| BindError::Invalid(format!("checkpoint: {e}")))?;
    p.validate()?;
    Ok(p)
}

/// Policy strategy and oracle comparison on the scenario's economy.
pub fn compare_value(policy: &str, sc: &Scenario) -> BindResult<Value> {
    let p = policy_from(policy)?;
    let c = dpolicy::compare_with_oracle(&p, &sc.economy.env, derive_seed(sc.seed, "py-generate", 0))?;
    Ok(json!({
        "policy": outcome_value(&c.policy),
        "policy_feasible": c.policy_feasible,
        "oracle": c.oracle.as_ref().map(outcome_value),
        "ratio": c.ratio,
    }))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

/// Bundled scenario names.
#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    scenario::BUNDLED.iter().map(|(n, _)| *n).collect()
}

/// Resolved scenario as TOML text.
#[pyfunction]
#[pyo3(signature = (scenario = "default_3rx", overrides = Vec::new(), seed = None))]
fn scenario_toml(scenario: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<String> {
    Ok(load(scenario, &overrides, seed)?.to_toml().map_err(BindError::from)?)
}

/// Synthesized CSI: one dict per receiver with `frames[u][m][n] = [re, im]`.
#[pyfunction]
#[pyo3(signature = (scenario = "default_3rx", overrides = Vec::new(), seed = None))]
fn simulate_csi<'py>(py: Python<'py>, scenario: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let sc = load(scenario, &overrides, seed)?;
    to_py(py, &py.detach(|| csi_value(&sc))?)
}

/// Path count and (AoA, ToF) estimates per receiver.
#[pyfunction]
#[pyo3(signature = (scenario = "default_3rx", overrides = Vec::new(), seed = None))]
fn estimate_paths<'py>(py: Python<'py>, scenario: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let sc = load(scenario, &overrides, seed)?;
    to_py(py, &py.detach(|| estimate_value(&sc))?)
}

/// Localization, link scores and rotation coherence.
#[pyfunction]
#[pyo3(signature = (scenario = "default_3rx", overrides = Vec::new(), seed = None))]
fn run_smsp<'py>(py: Python<'py>, scenario: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let sc = load(scenario, &overrides, seed)?;
    to_py(py, &py.detach(|| smsp_value(&sc))?)
}

/// Optimal pricing by exhaustive search, or `None`.
#[pyfunction]
#[pyo3(signature = (scenario = "economy_default", overrides = Vec::new()))]
fn oracle_optimal_pricing<'py>(py: Python<'py>, scenario: &str, overrides: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let sc = load(scenario, &overrides, None)?;
    to_py(py, &py.detach(|| oracle_value(&sc))?)
}

/// Train a pricing policy; returns the checkpoint as JSON text.
#[pyfunction]
#[pyo3(signature = (scenario = "economy_default", overrides = Vec::new(), seed = None))]
fn train_policy(py: Python<'_>, scenario: &str, overrides: Vec<String>, seed: Option<u64>) -> PyResult<String> {
    let sc = load(scenario, &overrides, seed)?;
    Ok(py.detach(|| train_json(&sc))?)
}

/// Generate a strategy with a checkpoint and compare it with the oracle.
#[pyfunction]
#[pyo3(signature = (policy, scenario = "economy_default", overrides = Vec::new(), seed = None))]
fn compare_with_oracle<'py>(
    py: Python<'py>,
    policy: &str,
    scenario: &str,
    overrides: Vec<String>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let sc = load(scenario, &overrides, seed)?;
    to_py(py, &py.detach(|| compare_value(policy, &sc))?)
}

#[pymodule]
fn wisp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_toml, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_csi, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_paths, m)?)?;
    m.add_function(wrap_pyfunction!(run_smsp, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_optimal_pricing, m)?)?;
    m.add_function(wrap_pyfunction!(train_policy, m)?)?;
    m.add_function(wrap_pyfunction!(compare_with_oracle, m)?)?;
    Ok(())
}
