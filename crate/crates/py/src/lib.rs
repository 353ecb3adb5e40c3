//! Python bindings for the airvote simulator.

use airvote::bounds::{self, BoundReport, GaussianGradOracle, GlobalSetup, McEstimate, McPlan, RhoMode};
use airvote::config::ConfigFile;
use airvote::rng::StreamKey;
use airvote::{channel, data, server, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn report<'py>(py: Python<'py>, r: &BoundReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", r.name)?;
    d.set_item("value", r.value)?;
    d.set_item("valid", r.valid)?;
    d.set_item("vacuous", r.vacuous)?;
    Ok(d)
}

fn estimate<'py>(py: Python<'py>, e: &McEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("errors", e.errors)?;
    d.set_item("trials", e.trials)?;
    d.set_item("rate", e.rate)?;
    d.set_item("ci_low", e.ci_low)?;
    d.set_item("ci_high", e.ci_high)?;
    d.set_item("se", e.se)?;
    Ok(d)
}

fn plan(trials: u64, seed: u64) -> PyResult<McPlan> {
    McPlan::new(trials, StreamKey::new(seed)).map_err(py_err)
}

fn oracle(j: f64) -> PyResult<GaussianGradOracle> {
    GaussianGradOracle::with_gsnr(j).map_err(py_err)
}

/// Gaussian-blob dataset as `(rows, labels)`.
#[pyfunction]
fn generate_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
    let ds = data::generate_synthetic(classes, per_class, dim, separation, seed).map_err(py_err)?;
    let rows = (0..ds.len()).map(|i| ds.row(i).to_vec()).collect();
    Ok((rows, ds.labels().to_vec()))
}

/// Noise power for a given SNR in dB, per-transmission power and dimension.
#[pyfunction]
fn snr_to_noise(snr_db: f64, max_power: f64, dim: usize) -> f64 {
    channel::snr_to_noise(snr_db, max_power, dim)
}

#[pyfunction]
fn prop1_bound(py: Python<'_>, j: f64, s: usize) -> PyResult<Bound<'_, PyDict>> {
    report(py, &bounds::prop1_bound(j, s))
}

#[pyfunction]
fn thm1_bound(py: Python<'_>, j: f64, k: usize, p: f64) -> PyResult<Bound<'_, PyDict>> {
    report(py, &bounds::thm1_bound(j, k, p).map_err(py_err)?)
}

#[pyfunction]
fn thm2_bound(py: Python<'_>, c: f64, k: usize, noise_power: f64, rho: f64, q: f64) -> PyResult<Bound<'_, PyDict>> {
    report(py, &bounds::thm2_bound(c, k, noise_power, rho, q).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (scheme, k=50, p=0.1, clusters=10, iters=200))]
fn operation_counts<'py>(
    py: Python<'py>,
    scheme: &str,
    k: usize,
    p: f64,
    clusters: usize,
    iters: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let c = server::operation_counts(scheme, k, p, clusters, iters).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("scheme", &c.scheme)?;
    d.set_item("local_sgd_per_worker", c.local_sgd_per_worker)?;
    d.set_item("workers", c.workers)?;
    d.set_item("local_sgd", c.local_sgd)?;
    d.set_item("gm", c.gm)?;
    d.set_item("aircomp", c.aircomp)?;
    d.set_item("digital", c.digital)?;
    d.set_item("expected_local_sgd", c.expected_local_sgd)?;
    Ok(d)
}

/// Local majority-vote error over `s` ballots of a Gaussian oracle with GSNR `j`.
#[pyfunction]
#[pyo3(signature = (j, s, trials=100_000, seed=0))]
fn mc_local_error(py: Python<'_>, j: f64, s: usize, trials: u64, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let e = py.detach(|| bounds::mc_local_error(&oracle(j)?, s, &plan(trials, seed)?).map_err(py_err))?;
    estimate(py, &e)
}

#[pyfunction]
#[pyo3(signature = (j, k, p, trials=100_000, seed=0))]
fn mc_theorem1_error(py: Python<'_>, j: f64, k: usize, p: f64, trials: u64, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let e = py.detach(|| bounds::mc_theorem1_error(&oracle(j)?, k, p, &plan(trials, seed)?).map_err(py_err))?;
    estimate(py, &e)
}

/// Global decoding error under worst-case collusion with Rayleigh fading.
/// `snr_db=None` is the noiseless channel.
#[pyfunction]
#[pyo3(signature = (j, k, c, p, snr_db=None, trials=100_000, seed=0))]
#[allow(clippy::too_many_arguments)]
fn mc_global_error(
    py: Python<'_>,
    j: f64,
    k: usize,
    c: f64,
    p: f64,
    snr_db: Option<f64>,
    trials: u64,
    seed: u64,
) -> PyResult<Bound<'_, PyDict>> {
    let setup = GlobalSetup { k, c, p, snr_db, rho: RhoMode::Fading };
    let g = py.detach(|| bounds::mc_global_error(&oracle(j)?, &setup, &plan(trials, seed)?).map_err(py_err))?;
    let d = estimate(py, &g.estimate)?;
    d.set_item("mean_bound", g.mean_bound)?;
    d.set_item("q", g.q)?;
    Ok(d)
}

/// Runs the `experiment` section of a config document and returns the
/// result (config, per-round metrics, counts) as a JSON string.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ConfigFile::parse(config_json).map_err(py_err)?;
    let exp = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| PyValueError::new_err("config has no experiment section"))?;
    let result = py.detach(|| {
        let (train, test) = exp.dataset.load(exp.seed)?;
        server::run_experiment(exp, &train, &test, cfg.run_options())
    });
    serde_json::to_string(&result.map_err(py_err)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pyairvote(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(snr_to_noise, m)?)?;
    m.add_function(wrap_pyfunction!(prop1_bound, m)?)?;
    m.add_function(wrap_pyfunction!(thm1_bound, m)?)?;
    m.add_function(wrap_pyfunction!(thm2_bound, m)?)?;
    m.add_function(wrap_pyfunction!(operation_counts, m)?)?;
    m.add_function(wrap_pyfunction!(mc_local_error, m)?)?;
    m.add_function(wrap_pyfunction!(mc_theorem1_error, m)?)?;
    m.add_function(wrap_pyfunction!(mc_global_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
