//! Python bindings for the steering simulator.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use steerlab::bounds::{self, Kappa};
use steerlab::construct::{self, MarginSpec};
use steerlab::fitting;
use steerlab::harness::{self, experiment, report};
use steerlab::metrics::{self, BehaviorMode, BehaviorSpec};
use steerlab::oracle;
use steerlab::validators;
use steerlab::{Error, HiddenState, LayeredModel, SteeringVectorSet};

create_exception!(pysteerlab, SteerlabError, PyException);
create_exception!(pysteerlab, OracleDisagreement, SteerlabError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::OracleDisagreement(m) => OracleDisagreement::new_err(m),
        e @ (Error::Config { .. }
        | Error::Precondition(_)
        | Error::InvalidDimension(_)
        | Error::DimensionMismatch { .. }) => PyValueError::new_err(e.to_string()),
        e => SteerlabError::new_err(e.to_string()),
    }
}

fn kappa(k: f64) -> PyResult<Kappa> {
    Kappa::try_from(k).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn mode(name: &str) -> PyResult<BehaviorMode> {
    match name {
        "raw" => Ok(BehaviorMode::Raw),
        "renormalized" => Ok(BehaviorMode::Renormalized),
        other => Err(PyValueError::new_err(format!(
            "mode must be 'raw' or 'renormalized', got {other:?}"
        ))),
    }
}

#[pyclass(name = "Model", module = "pysteerlab", frozen)]
struct PyModel {
    inner: LayeredModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (hidden_dim, vocab_size, num_layers=1, seed=0))]
    fn identity(hidden_dim: usize, vocab_size: usize, num_layers: usize, seed: u64) -> PyResult<Self> {
        let inner = LayeredModel::identity_family(hidden_dim, vocab_size, num_layers, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (hidden_dim, vocab_size, num_layers=1, seed=0))]
    fn mlp(hidden_dim: usize, vocab_size: usize, num_layers: usize, seed: u64) -> PyResult<Self> {
        let inner = LayeredModel::mlp_family(hidden_dim, vocab_size, num_layers, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Margin-constructed model and its planted steering set.
    #[staticmethod]
    #[pyo3(signature = (hidden_dim, vocab_size, delta, lambda_, aligned, misaligned, seed=0))]
    fn margin(
        hidden_dim: usize,
        vocab_size: usize,
        delta: f64,
        lambda_: f64,
        aligned: Vec<usize>,
        misaligned: Vec<usize>,
        seed: u64,
    ) -> PyResult<(Self, PySteering)> {
        let spec = MarginSpec::new(hidden_dim, vocab_size, delta, lambda_, aligned, misaligned, seed);
        let (model, steering) = construct::margin_instance(&spec).map_err(to_py)?;
        Ok((Self { inner: model }, PySteering { inner: steering }))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LayeredModel::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    #[getter]
    fn family(&self) -> String {
        match self.inner.family() {
            steerlab::model::Family::Identity => "identity",
            steerlab::model::Family::Mlp => "mlp",
            steerlab::model::Family::MarginConstructed => "margin-constructed",
        }
        .into()
    }

    /// Next-token probabilities at `context` with `steering` scaled to `r_e`.
    #[pyo3(signature = (context, steering=None, r_e=0.0))]
    fn distribution(&self, context: Vec<f64>, steering: Option<&PySteering>, r_e: f64) -> PyResult<Vec<f64>> {
        let ctx = HiddenState::input(context);
        let s = match steering {
            Some(s) => s.inner.with_coefficient(r_e),
            None => SteeringVectorSet::empty(self.inner.hidden_dim()),
        };
        Ok(self.inner.steered_distribution(&s, &ctx).map_err(to_py)?.probs)
    }

    /// Last-layer change `δr` caused by `steering` at `r_e`.
    fn steering_delta(&self, context: Vec<f64>, steering: &PySteering, r_e: f64) -> PyResult<Vec<f64>> {
        self.inner
            .steering_delta(&steering.inner.with_coefficient(r_e), &HiddenState::input(context))
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(family={:?}, hidden_dim={}, vocab_size={}, num_layers={})",
            self.family(),
            self.inner.hidden_dim(),
            self.inner.vocab_size(),
            self.inner.num_layers()
        )
    }
}

#[pyclass(name = "Steering", module = "pysteerlab", frozen)]
struct PySteering {
    inner: SteeringVectorSet,
}

#[pymethods]
impl PySteering {
    /// One shared direction (normalized) injected at each of `layers`.
    #[staticmethod]
    fn shared(dim: usize, direction: Vec<f64>, layers: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: SteeringVectorSet::shared(dim, &direction, &layers).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SteeringVectorSet::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn with_coefficient(&self, r_e: f64) -> Self {
        Self {
            inner: self.inner.with_coefficient(r_e),
        }
    }

    #[getter]
    fn coefficient(&self) -> f64 {
        self.inner.coefficient()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.active_layers().iter().copied().collect()
    }
}

#[pyclass(name = "Behavior", module = "pysteerlab", frozen)]
struct PyBehavior {
    inner: BehaviorSpec,
}

impl PyBehavior {
    fn finish(spec: BehaviorSpec, correct: Option<usize>, choices: Option<Vec<usize>>) -> Self {
        let spec = match correct {
            Some(c) => spec.with_correct(c),
            None => spec,
        };
        let spec = match choices {
            Some(c) => spec.with_choices(c),
            None => spec,
        };
        Self { inner: spec }
    }
}

#[pymethods]
impl PyBehavior {
    #[staticmethod]
    #[pyo3(signature = (aligned, misaligned, correct=None, choices=None))]
    fn binary(
        aligned: Vec<usize>,
        misaligned: Vec<usize>,
        correct: Option<usize>,
        choices: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let spec = BehaviorSpec::binary(&aligned, &misaligned).map_err(to_py)?;
        Ok(Self::finish(spec, correct, choices))
    }

    #[staticmethod]
    #[pyo3(signature = (aligned, neutral, misaligned, correct=None, choices=None))]
    fn trinary(
        aligned: Vec<usize>,
        neutral: Vec<usize>,
        misaligned: Vec<usize>,
        correct: Option<usize>,
        choices: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let spec = BehaviorSpec::trinary(&aligned, &neutral, &misaligned).map_err(to_py)?;
        Ok(Self::finish(spec, correct, choices))
    }

    #[staticmethod]
    #[pyo3(signature = (scores, b_plus, correct=None, choices=None))]
    fn general(
        scores: BTreeMap<usize, f64>,
        b_plus: f64,
        correct: Option<usize>,
        choices: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let spec = BehaviorSpec::general(scores, b_plus).map_err(to_py)?;
        Ok(Self::finish(spec, correct, choices))
    }

    #[getter]
    fn aligned(&self) -> Vec<usize> {
        self.inner.aligned()
    }

    #[getter]
    fn misaligned(&self) -> Vec<usize> {
        self.inner.misaligned()
    }
}

#[pyfunction]
fn random_context(dim: usize, seed: u64, label: &str) -> Vec<f64> {
    HiddenState::random(dim, seed, label).vector
}

#[pyfunction]
#[pyo3(signature = (model, steering, context, behavior, r_e, mode="renormalized"))]
fn behavior_expectation(
    model: &PyModel,
    steering: &PySteering,
    context: Vec<f64>,
    behavior: &PyBehavior,
    r_e: f64,
    mode: &str,
) -> PyResult<f64> {
    let d = model
        .inner
        .steered_distribution(&steering.inner.with_coefficient(r_e), &HiddenState::input(context))
        .map_err(to_py)?;
    metrics::behavior_expectation(&d, &behavior.inner, self::mode(mode)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (model, steering, context, behavior, r_e, relative=false))]
fn helpfulness(
    model: &PyModel,
    steering: &PySteering,
    context: Vec<f64>,
    behavior: &PyBehavior,
    r_e: f64,
    relative: bool,
) -> PyResult<f64> {
    let d = model
        .inner
        .steered_distribution(&steering.inner.with_coefficient(r_e), &HiddenState::input(context))
        .map_err(to_py)?;
    if relative {
        metrics::helpfulness_relative(&d, &behavior.inner).map_err(to_py)
    } else {
        metrics::helpfulness(&d, &behavior.inner).map_err(to_py)
    }
}

/// Brute-force reference values as a dict.
#[pyfunction]
fn brute_force_behavior<'py>(
    py: Python<'py>,
    model: &PyModel,
    steering: &PySteering,
    context: Vec<f64>,
    behavior: &PyBehavior,
    r_e: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let o = oracle::brute_force_behavior(
        &model.inner,
        &steering.inner,
        &HiddenState::input(context),
        &behavior.inner,
        r_e,
    )
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("raw", o.raw)?;
    d.set_item("renormalized", o.renormalized)?;
    d.set_item("scored_mass", o.scored_mass)?;
    d.set_item("helpfulness", o.helpfulness)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (slope_product, b0, r_e, kappa=0.5))]
fn tanh_lower_bound(slope_product: f64, b0: f64, r_e: f64, kappa: f64) -> PyResult<f64> {
    bounds::tanh_lower_bound(slope_product, self::kappa(kappa)?, b0, r_e).map_err(to_py)
}

#[pyfunction]
fn min_coefficient_for_alignment(eps: f64, gamma: f64, kappa_slope: f64) -> PyResult<f64> {
    bounds::min_coefficient_for_alignment(eps, gamma, kappa_slope).map_err(to_py)
}

#[pyfunction]
fn helpfulness_upper_bound(p0: f64, alpha: f64, eps: f64, lsb: f64, r_e: f64) -> PyResult<f64> {
    bounds::helpfulness_upper_bound(p0, alpha, eps, lsb, r_e).map_err(to_py)
}

#[pyfunction]
fn multi_token_min_coefficient(n: usize, eps: f64, b0: f64, kappa_slope: f64) -> PyResult<f64> {
    bounds::multi_token_min_coefficient(n, eps, b0, kappa_slope).map_err(to_py)
}

/// Returns `(slope, rss, r2)`.
#[pyfunction]
#[pyo3(signature = (points, b0, s_max=20.0))]
fn fit_tanh_slope(points: Vec<(f64, f64)>, b0: f64, s_max: f64) -> PyResult<(f64, f64, f64)> {
    let f = fitting::fit_tanh_slope(&points, b0, s_max).map_err(to_py)?;
    Ok((f.slope, f.report.rss, f.report.r2))
}

/// Returns `(alpha, lambda_sigma_beta, rss, r2)`.
#[pyfunction]
#[pyo3(signature = (points, p0, eps, lsb_cap=5.0))]
fn fit_helpfulness_curve(points: Vec<(f64, f64)>, p0: f64, eps: f64, lsb_cap: f64) -> PyResult<(f64, f64, f64, f64)> {
    let f = fitting::fit_helpfulness_curve(&points, p0, eps, lsb_cap).map_err(to_py)?;
    Ok((f.alpha, f.lsb, f.report.rss, f.report.r2))
}

/// Returns `(lambda_hat, r2)` from the `|δr|`-vs-`r_e` curve.
#[pyfunction]
fn estimate_lambda(
    model: &PyModel,
    steering: &PySteering,
    context: Vec<f64>,
    grid: Vec<f64>,
    window: (f64, f64),
) -> PyResult<(f64, f64)> {
    let c = validators::norm_curve_and_lambda(&model.inner, &steering.inner, &HiddenState::input(context), &grid, window)
        .map_err(to_py)?;
    Ok((c.lambda_hat, c.r2))
}

/// Validates a JSON config and returns it fully defaulted, as canonical JSON.
#[pyfunction]
fn validate_config(document: &str) -> PyResult<String> {
    let cfg = harness::validate_config(document).map_err(to_py)?;
    cfg.canonical_json().map_err(to_py)
}

/// Runs a sweep; writes the report files when `out_dir` is given. Returns
/// `{"rows": [...], "manifest": "<json>", "violation": bool}`.
#[pyfunction]
#[pyo3(signature = (document, out_dir=None))]
fn run_experiment<'py>(py: Python<'py>, document: &str, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = harness::validate_config(document).map_err(to_py)?;
    let result = py.detach(|| experiment::run_experiment(&cfg)).map_err(to_py)?;
    if let Some(dir) = out_dir {
        report::emit_csv_report(&result, &dir).map_err(to_py)?;
    }
    let rows = result
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("r_e", r.r_e)?;
            d.set_item("behavior_raw", r.behavior_raw)?;
            d.set_item("behavior_renorm", r.behavior_renorm)?;
            d.set_item("helpfulness", r.helpfulness)?;
            d.set_item("helpfulness_relative", r.helpfulness_relative)?;
            d.set_item("thm1_bound", r.thm1_bound)?;
            d.set_item("thm2_bound", r.thm2_bound)?;
            d.set_item("verdict", &r.verdict)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = PyDict::new(py);
    out.set_item("rows", rows)?;
    out.set_item("manifest", report::manifest_json(&result.manifest).map_err(to_py)?)?;
    out.set_item("violation", result.has_violation())?;
    Ok(out)
}

#[pymodule]
fn pysteerlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SteerlabError", m.py().get_type::<SteerlabError>())?;
    m.add("OracleDisagreement", m.py().get_type::<OracleDisagreement>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySteering>()?;
    m.add_class::<PyBehavior>()?;
    m.add_function(wrap_pyfunction!(random_context, m)?)?;
    m.add_function(wrap_pyfunction!(behavior_expectation, m)?)?;
    m.add_function(wrap_pyfunction!(helpfulness, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_behavior, m)?)?;
    m.add_function(wrap_pyfunction!(tanh_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(min_coefficient_for_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(helpfulness_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(multi_token_min_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tanh_slope, m)?)?;
    m.add_function(wrap_pyfunction!(fit_helpfulness_curve, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
