//! Python extension module `boltzgrad`: scenario runner plus a few direct entry points.

use std::path::PathBuf;

use kinetic::experiments::{self, ExperimentConfig, ExperimentError, Scenario};
use kinetic::sim::{simulate as run_hard_spheres, Configuration};
use kinetic::torus::pair_collision_time;
use kinetic::{ParticleState, Vector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn state(x: [f64; 2], v: [f64; 2]) -> ParticleState<2> {
    ParticleState { x: Vector(x), v: Vector(v) }
}

/// `(name, description)` for every scenario.
#[pyfunction]
fn list_scenarios() -> Vec<(&'static str, &'static str)> {
    Scenario::ALL.iter().map(|s| (s.name(), s.describe())).collect()
}

/// Checks a JSON config and returns the fully resolved parameters as JSON.
#[pyfunction]
fn validate_config(config_json: &str) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let validated = experiments::validate(&config).map_err(to_py)?;
    Ok(serde_json::to_string(&validated.params).expect("params serialize"))
}

/// Runs a scenario into `out_dir` and returns its summary as JSON.
#[pyfunction]
fn run_scenario(py: Python<'_>, config_json: &str, out_dir: PathBuf) -> PyResult<String> {
    let config = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let outcome = py.detach(|| experiments::run(&config, Some(&out_dir))).map_err(to_py)?;
    Ok(serde_json::to_string(&outcome.summary).expect("summary serializes"))
}

/// First approach-contact time of two disks of diameter `eps` on the unit torus, or `None`.
#[pyfunction]
fn collision_time(x1: [f64; 2], v1: [f64; 2], x2: [f64; 2], v2: [f64; 2], eps: f64, t_max: f64) -> PyResult<Option<f64>> {
    pair_collision_time(&state(x1, v1), &state(x2, v2), eps, t_max)
        .map(|c| c.map(|c| c.time))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Evolves hard disks to time `t`; returns final positions, velocities and the event count.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn simulate(
    py: Python<'_>,
    positions: Vec<[f64; 2]>,
    velocities: Vec<[f64; 2]>,
    eps: f64,
    t: f64,
) -> PyResult<(Vec<[f64; 2]>, Vec<[f64; 2]>, usize)> {
    if positions.len() != velocities.len() {
        return Err(PyValueError::new_err("positions and velocities differ in length"));
    }
    let particles = positions.into_iter().zip(velocities).map(|(x, v)| state(x, v)).collect();
    let config = Configuration::new(particles, eps).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (end, log) = py
        .detach(|| run_hard_spheres(&config, t))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let xs = end.particles.iter().map(|p| p.x.0).collect();
    let vs = end.particles.iter().map(|p| p.v.0).collect();
    Ok((xs, vs, log.events.len()))
}

/// Number of collision trees with `n` roots and `s` added particles.
#[pyfunction]
fn tree_count(n: usize, s: usize) -> u128 {
    kinetic::trees::tree_count(n, s)
}

#[pymodule]
fn boltzgrad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(collision_time, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(tree_count, m)?)?;
    Ok(())
}
