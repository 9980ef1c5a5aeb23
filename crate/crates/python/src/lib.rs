//! Python bindings. Structured results come back as plain dicts and lists.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;

use dpsde::harness::{self, RunContext, SweepSpec};
use dpsde::optimizers::{run_optimizer_rng, RecordOptions};
use dpsde::privacy::{self, CalibrationMode, PrivacyParams};
use dpsde::rng::stream;
use dpsde::sde::{euler_maruyama, SdeLabel};
use dpsde::theory::{self, BoundInputs, Phase};
use dpsde::{make_synthetic_logistic, Method, NoiseSpec, Nu, Objective, OptimizerConfig};

fn to_py(e: dpsde::Error) -> PyErr {
    match e {
        dpsde::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.to_string());
    }
    let json = obj.py().import("json")?;
    json.call_method1("dumps", (obj,))?.extract()
}

fn from_json<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_str(&to_json_text(obj)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn nu_of(nu: Option<f64>) -> PyResult<Nu> {
    nu.map_or(Ok(Nu::Infinite), |v| Nu::new(v).map_err(to_py))
}

fn method_of(name: &str) -> PyResult<Method> {
    name.parse().map_err(to_py)
}

fn mode_of(name: &str) -> PyResult<CalibrationMode> {
    name.parse().map_err(to_py)
}

/// A differentiable objective.
#[pyclass(name = "Objective", module = "dpsde_py", frozen)]
struct PyObjective {
    inner: Objective,
}

#[pymethods]
impl PyObjective {
    /// `f(x) = ½ Σ hᵢ xᵢ²`.
    #[staticmethod]
    fn quadratic(h: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: Objective::quadratic(h).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn quartic(h: Vec<f64>, lam: f64, xi: f64) -> PyResult<Self> {
        Ok(Self {
            inner: Objective::quartic(h, lam, xi).map_err(to_py)?,
        })
    }

    /// Logistic regression on a synthetic two-cluster dataset.
    #[staticmethod]
    #[pyo3(signature = (n, d, separation=1.0, seed=0))]
    fn synthetic_logistic(n: usize, d: usize, separation: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: Objective::logistic(make_synthetic_logistic(n, d, separation, seed).map_err(to_py)?),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.value(&x).map_err(to_py)
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.gradient(&x).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Objective({:?}, d={})", self.inner.kind(), self.inner.dim())
    }
}

#[pyfunction]
fn clip(x: Vec<f64>, c: f64) -> PyResult<Vec<f64>> {
    privacy::clip(&x, c).map_err(to_py)
}

#[pyfunction]
fn k_of_nu(nu: f64) -> PyResult<f64> {
    dpsde::k_of_nu(Nu::new(nu).map_err(to_py)?).map_err(to_py)
}

/// Returns `{epsilon, sigma, q, T, phi}`. Give exactly one of `sigma`, `epsilon`.
#[pyfunction]
#[pyo3(signature = (n, batch, steps, delta, sigma=None, epsilon=None, mode="analytic"))]
fn accountant<'py>(
    py: Python<'py>,
    n: usize,
    batch: usize,
    steps: u64,
    delta: f64,
    sigma: Option<f64>,
    epsilon: Option<f64>,
    mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = mode_of(mode)?;
    let p = match (sigma, epsilon) {
        (Some(s), None) => PrivacyParams::from_sigma(s, delta, n, batch, steps, 1.0, mode),
        (None, Some(e)) => PrivacyParams::from_epsilon(e, delta, n, batch, steps, 1.0, mode),
        _ => return Err(PyValueError::new_err("give exactly one of sigma or epsilon")),
    }
    .map_err(to_py)?;
    from_json(
        py,
        &serde_json::json!({
            "epsilon": p.epsilon, "sigma": p.sigma_dp, "q": p.q, "T": p.steps, "phi": p.phi,
        }),
    )
}

#[pyfunction]
fn steps_from_epochs(n: usize, batch: usize, epochs: u64) -> u64 {
    privacy::steps_from_epochs(n, batch, epochs)
}

#[pyfunction]
fn epsilon_star(c: f64, steps: u64, batch: usize, n: usize, sigma_gamma: f64, delta: f64) -> PyResult<f64> {
    privacy::epsilon_star(c, steps, batch, n, sigma_gamma, delta).map_err(to_py)
}

fn bound_inputs(obj: &Bound<'_, PyAny>, calibrate: bool) -> PyResult<BoundInputs> {
    let inp: BoundInputs = parse(obj)?;
    if calibrate {
        inp.calibrated().map_err(to_py)
    } else {
        inp.validate().map_err(to_py)?;
        Ok(inp)
    }
}

/// Every closed-form quantity for one input dict. `sigma_dp` is derived from
/// `epsilon` when `calibrate` is true.
#[pyfunction]
#[pyo3(signature = (inputs, t=None, calibrate=true))]
fn theory_report<'py>(inputs: &Bound<'py, PyAny>, t: Option<f64>, calibrate: bool) -> PyResult<Bound<'py, PyAny>> {
    let inp = bound_inputs(inputs, calibrate)?;
    let rep = theory::report(&inp, t.unwrap_or(inp.tau())).map_err(to_py)?;
    from_json(inputs.py(), &rep)
}

#[pyfunction]
#[pyo3(signature = (inputs, t, phase=2, calibrate=true))]
fn lossbound_sgd(inputs: &Bound<'_, PyAny>, t: f64, phase: u8, calibrate: bool) -> PyResult<f64> {
    let phase = Phase::try_from(phase).map_err(to_py)?;
    theory::lossbound_sgd(&bound_inputs(inputs, calibrate)?, t, phase).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (inputs, t, phase=2, calibrate=true))]
fn lossbound_sign(inputs: &Bound<'_, PyAny>, t: f64, phase: u8, calibrate: bool) -> PyResult<f64> {
    let phase = Phase::try_from(phase).map_err(to_py)?;
    theory::lossbound_sign(&bound_inputs(inputs, calibrate)?, t, phase).map_err(to_py)
}

/// `(mean, var)` per mode of the SGD (`method="dpsgd"`) or sign stationary law.
#[pyfunction]
#[pyo3(signature = (h, x0, inputs, t, method="dpsgd", calibrate=true))]
fn stationary(
    h: Vec<f64>,
    x0: Vec<f64>,
    inputs: &Bound<'_, PyAny>,
    t: f64,
    method: &str,
    calibrate: bool,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let inp = bound_inputs(inputs, calibrate)?;
    let m = match method_of(method)? {
        Method::DpSgd => theory::stationary_sgd(&h, &x0, &inp, t),
        Method::DpSignSgd => theory::stationary_sign(&h, &x0, &inp, t),
        Method::DpAdam => return Err(PyValueError::new_err("no stationary law for dpadam")),
    }
    .map_err(to_py)?;
    Ok((m.mean, m.var))
}

#[allow(clippy::too_many_arguments)]
fn make_config(
    method: &str,
    eta: f64,
    clip: f64,
    batch: usize,
    n: usize,
    delta: f64,
    steps: u64,
    sigma: Option<f64>,
    epsilon: Option<f64>,
    sigma_gamma: f64,
    nu: Option<f64>,
) -> PyResult<OptimizerConfig> {
    let privacy = match (sigma, epsilon) {
        (Some(s), None) => PrivacyParams::from_sigma(s, delta, n, batch, steps, clip, CalibrationMode::Analytic),
        (None, Some(e)) => PrivacyParams::from_epsilon(e, delta, n, batch, steps, clip, CalibrationMode::Analytic),
        (None, None) => PrivacyParams::from_sigma(0.0, delta, n, batch, steps, clip, CalibrationMode::Analytic),
        _ => return Err(PyValueError::new_err("give at most one of sigma or epsilon")),
    }
    .map_err(to_py)?;
    let noise = NoiseSpec::new(sigma_gamma, nu_of(nu)?, batch).map_err(to_py)?;
    OptimizerConfig::new(method_of(method)?, eta, privacy, noise).map_err(to_py)
}

/// One optimizer trajectory; returns the run record as a dict.
#[pyfunction]
#[pyo3(signature = (objective, x0, method, eta, steps, clip, batch=1, n=1000, delta=1e-5,
                    sigma=None, epsilon=None, sigma_gamma=0.0, nu=None, seed=0, record_every=1))]
#[allow(clippy::too_many_arguments)]
fn run_optimizer<'py>(
    py: Python<'py>,
    objective: &PyObjective,
    x0: Vec<f64>,
    method: &str,
    eta: f64,
    steps: u64,
    clip: f64,
    batch: usize,
    n: usize,
    delta: f64,
    sigma: Option<f64>,
    epsilon: Option<f64>,
    sigma_gamma: f64,
    nu: Option<f64>,
    seed: u64,
    record_every: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = make_config(method, eta, clip, batch, n, delta, steps, sigma, epsilon, sigma_gamma, nu)?;
    let mut rng = stream(seed, 0, 0);
    let mut rec = run_optimizer_rng(&objective.inner, &cfg, &x0, steps, RecordOptions::every(record_every), &mut rng)
        .map_err(to_py)?;
    rec.seed = seed;
    from_json(py, &rec)
}

/// One Euler–Maruyama path of the named SDE model with `Δt = η`.
#[pyfunction]
#[pyo3(signature = (objective, x0, model, method, eta, steps, clip, batch=1, n=1000, delta=1e-5,
                    sigma=None, epsilon=None, sigma_gamma=0.0, nu=None, p=None, seed=0, record_every=1))]
#[allow(clippy::too_many_arguments)]
fn simulate_sde<'py>(
    py: Python<'py>,
    objective: &PyObjective,
    x0: Vec<f64>,
    model: &str,
    method: &str,
    eta: f64,
    steps: u64,
    clip: f64,
    batch: usize,
    n: usize,
    delta: f64,
    sigma: Option<f64>,
    epsilon: Option<f64>,
    sigma_gamma: f64,
    nu: Option<f64>,
    p: Option<f64>,
    seed: u64,
    record_every: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = make_config(method, eta, clip, batch, n, delta, steps, sigma, epsilon, sigma_gamma, nu)?;
    let label: SdeLabel = serde_json::from_value(serde_json::json!(model))
        .map_err(|_| PyValueError::new_err(format!("unknown SDE model '{model}'")))?;
    let sde = harness::build_model(label, &objective.inner, &cfg, p, 64).map_err(to_py)?;
    let mut rng = stream(seed, 0, 0);
    let mut rec = euler_maruyama(&sde, &x0, eta, steps, RecordOptions::every(record_every), &mut rng).map_err(to_py)?;
    rec.seed = seed;
    from_json(py, &rec)
}

/// Expanded cell list of a sweep config (dict or JSON text).
#[pyfunction]
fn expand_cells<'py>(config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let spec = SweepSpec::from_json(&to_json_text(config)?).map_err(to_py)?;
    from_json(config.py(), &harness::expand_cells(&spec).map_err(to_py)?)
}

/// Runs a sweep and returns its report. Outputs are written when the config
/// names an `output` directory.
#[pyfunction]
#[pyo3(signature = (config, workers=None))]
fn run_sweep<'py>(config: &Bound<'py, PyAny>, workers: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let spec = SweepSpec::from_json(&to_json_text(config)?).map_err(to_py)?;
    let ctx = RunContext {
        workers,
        ..RunContext::default()
    };
    let report = harness::run_sweep(&spec, &ctx).map_err(to_py)?;
    from_json(config.py(), &report)
}

#[pymodule]
fn dpsde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyObjective>()?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(k_of_nu, m)?)?;
    m.add_function(wrap_pyfunction!(accountant, m)?)?;
    m.add_function(wrap_pyfunction!(steps_from_epochs, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_star, m)?)?;
    m.add_function(wrap_pyfunction!(theory_report, m)?)?;
    m.add_function(wrap_pyfunction!(lossbound_sgd, m)?)?;
    m.add_function(wrap_pyfunction!(lossbound_sign, m)?)?;
    m.add_function(wrap_pyfunction!(stationary, m)?)?;
    m.add_function(wrap_pyfunction!(run_optimizer, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_sde, m)?)?;
    m.add_function(wrap_pyfunction!(expand_cells, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
