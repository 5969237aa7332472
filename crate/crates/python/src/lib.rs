//! Python bindings: the incremental predictor, the delayed-coin environment,
//! bound calculators and the experiment harness.
//!
//! Outcomes cross the boundary as `1` (heads) and `0` (tails); observations
//! as lists of `(index, outcome)` pairs.

use std::sync::Mutex;

use num_bigint::BigUint;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use evop_core::bounds::{self, BoundParams, GeneratorSpec, GrowthFn, GrowthFunctions};
use evop_core::environments::{self as envs, Environment, EnvSpec};
use evop_core::evop::{EvopConfig, EvopState};
use evop_core::forecasters::{ForecasterPool, ForecasterSpec};
use evop_core::harness::{self, ExperimentConfig};
use evop_core::loss::LossSpec;
use evop_core::model::{Observation, Outcome, Prediction};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

pub fn outcome_from_int(x: u8) -> Result<Outcome, String> {
    match x {
        0 => Ok(Outcome::TAILS),
        1 => Ok(Outcome::HEADS),
        other => Err(format!("outcome must be 0 or 1, got {other}")),
    }
}

pub fn outcome_to_int(x: Outcome) -> u8 {
    u8::from(x.is_heads())
}

pub fn observation_from_pairs(pairs: Vec<(u64, u8)>) -> Result<Observation, String> {
    let reveals = pairs
        .into_iter()
        .map(|(t, x)| outcome_from_int(x).map(|o| (t, o)))
        .collect::<Result<Vec<_>, _>>()?;
    Observation::new(reveals).map_err(|e| e.to_string())
}

pub fn pool_from_json(json: &str) -> Result<ForecasterPool, String> {
    let specs: Vec<ForecasterSpec> = serde_json::from_str(json).map_err(|e| e.to_string())?;
    ForecasterPool::from_specs(&specs).map_err(|e| e.to_string())
}

fn scalar(p: &Prediction) -> f64 {
    p.value()
}

/// The incremental eventually-optimal predictor.
#[pyclass(name = "Evop")]
struct PyEvop {
    state: EvopState,
    last_scores: Vec<(f64, usize, u64)>,
}

#[pymethods]
impl PyEvop {
    /// `pool_json`: a JSON list of forecaster specs.
    #[new]
    #[pyo3(signature = (pool_json, epsilon = 0.5))]
    fn new(pool_json: &str, epsilon: f64) -> PyResult<Self> {
        let pool = pool_from_json(pool_json).map_err(value_err)?;
        let config = EvopConfig::new(epsilon, LossSpec::squared_error(), pool).map_err(value_err)?;
        Ok(PyEvop {
            state: EvopState::new(config),
            last_scores: Vec::new(),
        })
    }

    /// Appends `obs_n` and returns `(choice, prediction)` for `x_n`; `choice`
    /// is the 1-based pool index.
    fn observe(&mut self, reveals: Vec<(u64, u8)>) -> PyResult<(usize, f64)> {
        let obs = observation_from_pairs(reveals).map_err(value_err)?;
        let d = self.state.observe(obs).map_err(value_err)?;
        self.last_scores = d.max_scores.iter().map(|s| (s.value, s.j, s.m)).collect();
        Ok((d.choice, scalar(&d.prediction)))
    }

    /// `(value, j, m)` of every member's `MaxScore` at the last step.
    fn max_scores(&self) -> Vec<(f64, usize, u64)> {
        self.last_scores.clone()
    }

    /// Pool predictions at step `k`; `None` where a member abstained.
    fn predictions(&self, k: u64) -> PyResult<Vec<Option<f64>>> {
        if k == 0 || k > self.state.log().len() {
            return Err(PyValueError::new_err(format!("step {k} outside 1..={}", self.state.log().len())));
        }
        Ok(self.state.predictions_at(k).iter().map(|p| p.as_ref().map(scalar)).collect())
    }

    fn names(&self) -> Vec<String> {
        self.state.config().pool.names().to_vec()
    }

    fn __len__(&self) -> usize {
        self.state.log().len() as usize
    }
}

/// Any configured environment.
#[pyclass(name = "Environment")]
struct PyEnvironment {
    env: Mutex<Box<dyn Environment>>,
}

#[pymethods]
impl PyEnvironment {
    /// `spec_json`: an environment spec as used in experiment configs.
    #[new]
    #[pyo3(signature = (spec_json, seed = 0))]
    fn new(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec: EnvSpec = serde_json::from_str(spec_json).map_err(value_err)?;
        Ok(PyEnvironment {
            env: Mutex::new(spec.build(seed).map_err(value_err)?),
        })
    }

    /// `(n, outcome, reveals)` or `None` once exhausted.
    #[allow(clippy::type_complexity)]
    fn step(&mut self) -> Option<(u64, u8, Vec<(u64, u8)>)> {
        self.env.get_mut().expect("not poisoned").step().map(|s| {
            let reveals = s.observation.reveals().iter().map(|&(t, x)| (t, outcome_to_int(x))).collect();
            (s.n, outcome_to_int(s.outcome), reveals)
        })
    }

    fn name(&self) -> String {
        self.env.lock().expect("not poisoned").name()
    }
}

#[pyfunction]
fn squared_error(x: u8, y: f64) -> PyResult<f64> {
    let x = outcome_from_int(x).map_err(value_err)?;
    Ok(LossSpec::squared_error().eval(x, &Prediction::scalar(y)))
}

/// Number of outcomes revealed by step `n` of the delayed-coin chain.
#[pyfunction]
#[pyo3(signature = (n, base = 10))]
fn reveal_count(n: u64, base: u64) -> u64 {
    envs::reveal_count(n, base)
}

#[pyfunction]
fn lemma3_bound(lam: f64, a: f64) -> PyResult<f64> {
    bounds::lemma3_bound(lam, a).map_err(value_err)
}

fn params(rho: f64, kappa: f64, epsilon: f64, m: u64, z: u64, pool_size: u64) -> PyResult<BoundParams> {
    BoundParams::new(rho, kappa, epsilon, m, z, pool_size).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (big_lambda, rho = 2.0, kappa = 2.0, epsilon = 0.5, m = 3, z = 1, pool_size = 3))]
fn relscore_tail(big_lambda: f64, rho: f64, kappa: f64, epsilon: f64, m: u64, z: u64, pool_size: u64) -> PyResult<f64> {
    Ok(bounds::relscore_tail(&params(rho, kappa, epsilon, m, z, pool_size)?, big_lambda))
}

fn growth(h_json: &str, g_json: &str) -> PyResult<GrowthFunctions> {
    let h: GrowthFn = serde_json::from_str(h_json).map_err(value_err)?;
    let g: GrowthFn = serde_json::from_str(g_json).map_err(value_err)?;
    Ok(GrowthFunctions { h, g })
}

fn big(decimal: &str) -> PyResult<BigUint> {
    decimal.parse().map_err(value_err)
}

/// `(h ∘ g)^t(1)` as a decimal string, or `"Overflow(cap)"`.
#[pyfunction]
#[pyo3(signature = (h_json, g_json, t, cap = "1000000000000"))]
fn compose_hg(h_json: &str, g_json: &str, t: u64, cap: &str) -> PyResult<String> {
    let r = bounds::compose_hg(&growth(h_json, g_json)?, t, &big(cap)?).map_err(value_err)?;
    Ok(r.to_string())
}

/// `(t, N)` with `N` a decimal string or `"Overflow(cap)"`.
#[pyfunction]
#[pyo3(signature = (p, h_json, g_json, rho = 2.0, kappa = 2.0, epsilon = 0.5, m = 3, z = 1, pool_size = 3, cap = "1000000000000"))]
#[allow(clippy::too_many_arguments)]
fn steps_for_probability(
    p: f64,
    h_json: &str,
    g_json: &str,
    rho: f64,
    kappa: f64,
    epsilon: f64,
    m: u64,
    z: u64,
    pool_size: u64,
    cap: &str,
) -> PyResult<(u64, String)> {
    let params = params(rho, kappa, epsilon, m, z, pool_size)?;
    let r = bounds::steps_for_probability(&params, &growth(h_json, g_json)?, p, &big(cap)?).map_err(value_err)?;
    Ok((r.t, r.steps.to_string()))
}

/// `(t, probability)` for the horizon given as a decimal string.
#[pyfunction]
#[pyo3(signature = (horizon, h_json, g_json, rho = 2.0, kappa = 2.0, epsilon = 0.5, m = 3, z = 1, pool_size = 3))]
#[allow(clippy::too_many_arguments)]
fn convergence_probability(
    horizon: &str,
    h_json: &str,
    g_json: &str,
    rho: f64,
    kappa: f64,
    epsilon: f64,
    m: u64,
    z: u64,
    pool_size: u64,
) -> PyResult<(u64, f64)> {
    let params = params(rho, kappa, epsilon, m, z, pool_size)?;
    let r = bounds::convergence_probability(&params, &growth(h_json, g_json)?, &big(horizon)?).map_err(value_err)?;
    Ok((r.t, r.probability))
}

/// `(lambda, empirical, bound, std_error, pass)`
type TailRow = (f64, f64, f64, f64, bool);

/// One row per lambda.
#[pyfunction]
#[pyo3(signature = (generator_json, increments, trials, lambdas, seed = 0))]
fn verify_concentration(
    generator_json: &str,
    increments: usize,
    trials: usize,
    lambdas: Vec<f64>,
    seed: u64,
) -> PyResult<Vec<TailRow>> {
    let gen: GeneratorSpec = serde_json::from_str(generator_json).map_err(value_err)?;
    let r = bounds::verify_concentration(&gen, increments, trials, &lambdas, seed).map_err(value_err)?;
    Ok(r.tails.iter().map(|t| (t.lambda, t.empirical, t.bound, t.std_error, t.pass)).collect())
}

fn harness_call(
    config_json: &str,
    f: fn(&ExperimentConfig) -> Result<harness::Report, harness::HarnessError>,
) -> PyResult<(bool, String)> {
    let config = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    let report = f(&config).map_err(value_err)?;
    Ok((report.passed(), report.render()))
}

/// Runs an experiment config; returns `(all assertions passed, report text)`.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<(bool, String)> {
    py.detach(|| harness_call(config_json, harness::run))
}

#[pyfunction]
fn bound_report(config_json: &str) -> PyResult<(bool, String)> {
    harness_call(config_json, harness::bound)
}

#[pymodule]
fn evop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEvop>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_function(wrap_pyfunction!(squared_error, m)?)?;
    m.add_function(wrap_pyfunction!(reveal_count, m)?)?;
    m.add_function(wrap_pyfunction!(lemma3_bound, m)?)?;
    m.add_function(wrap_pyfunction!(relscore_tail, m)?)?;
    m.add_function(wrap_pyfunction!(compose_hg, m)?)?;
    m.add_function(wrap_pyfunction!(steps_for_probability, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_probability, m)?)?;
    m.add_function(wrap_pyfunction!(verify_concentration, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(bound_report, m)?)?;
    Ok(())
}
