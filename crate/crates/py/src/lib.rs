//! Python bindings for the pieces that are useful from notebooks: the
//! synthetic generator, the trapezoid rollout schedule, verification
//! scores, the WMCE loss, and the learning-rate schedule.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use stormlatent_core::hta::build_hta_schedule;
use stormlatent_core::losses;
use stormlatent_core::metrics;
use stormlatent_core::synth::{self, GeneratorConfig};
use stormlatent_core::tensor::Tensor;
use stormlatent_core::train::{self, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn apply_overrides(cfg: &mut GeneratorConfig, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    let Some(kw) = overrides else { return Ok(()) };
    for (key, value) in kw.iter() {
        let key: String = key.extract()?;
        match key.as_str() {
            "height" => cfg.height = value.extract()?,
            "width" => cfg.width = value.extract()?,
            "coarse_height" => cfg.coarse_height = value.extract()?,
            "coarse_width" => cfg.coarse_width = value.extract()?,
            "steps" => cfg.steps = value.extract()?,
            "with_satellite" => cfg.with_satellite = value.extract()?,
            "intensity_cap" => cfg.intensity_cap = value.extract()?,
            "radar_cap" => cfg.radar_cap = value.extract()?,
            "tau_raw" => cfg.tau_raw = value.extract()?,
            "birth_rate" => cfg.birth_rate = value.extract()?,
            "blob_radius_min" => cfg.blob_radius_min = value.extract()?,
            "blob_radius_max" => cfg.blob_radius_max = value.extract()?,
            "blob_amp_min" => cfg.blob_amp_min = value.extract()?,
            "blob_amp_max" => cfg.blob_amp_max = value.extract()?,
            "decay_half_life" => cfg.decay_half_life = value.extract()?,
            "humidity_threshold" => cfg.humidity_threshold = value.extract()?,
            "wind_scale" => cfg.wind_scale = value.extract()?,
            "initial_blobs" => cfg.initial_blobs = value.extract()?,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown generator option: {other}"
                )))
            }
        }
    }
    Ok(())
}

fn tensor_dict<'py>(py: Python<'py>, t: &Tensor) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("shape", t.shape.clone())?;
    d.set_item("data", t.data.clone())?;
    Ok(d)
}

/// Generate one synthetic multi-source sequence. Keyword arguments override
/// fields of the default generator configuration.
#[pyfunction]
#[pyo3(signature = (seed, **overrides))]
fn generate_sequence<'py>(
    py: Python<'py>,
    seed: u64,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = GeneratorConfig::default();
    apply_overrides(&mut cfg, overrides)?;
    let seq = synth::generate_sequence(seed, &cfg).map_err(err)?;
    let out = PyDict::new_bound(py);
    out.set_item("seed", seq.seed)?;
    let samples = PyList::empty_bound(py);
    for s in &seq.samples {
        let d = PyDict::new_bound(py);
        d.set_item("time_index", s.time_index)?;
        d.set_item("qpe_radar", tensor_dict(py, &s.qpe_radar)?)?;
        d.set_item("reanalysis", tensor_dict(py, &s.reanalysis)?)?;
        d.set_item("target", tensor_dict(py, &s.target)?)?;
        match &s.satellite {
            Some(t) => d.set_item("satellite", tensor_dict(py, t)?)?,
            None => d.set_item("satellite", py.None())?,
        }
        samples.append(d)?;
    }
    out.set_item("samples", samples)?;
    Ok(out)
}

/// Write a train/val/test dataset to `dir`, exactly as the CLI would.
#[pyfunction]
#[pyo3(signature = (dir, seed, sequences, **overrides))]
fn generate_dataset(
    dir: &str,
    seed: u64,
    sequences: usize,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<()> {
    let mut cfg = GeneratorConfig::default();
    apply_overrides(&mut cfg, overrides)?;
    stormlatent_core::dataset::generate_dataset(std::path::Path::new(dir), seed, sequences, &cfg)
        .map_err(err)?;
    Ok(())
}

/// Trapezoid rollout schedule for `horizon` steps: one entry per output
/// step with its two input steps, interval, and dependency depth.
#[pyfunction]
fn hta_schedule(py: Python<'_>, horizon: usize) -> PyResult<Bound<'_, PyList>> {
    let schedule = build_hta_schedule(horizon).map_err(err)?;
    let entries = PyList::empty_bound(py);
    for e in &schedule.entries {
        let d = PyDict::new_bound(py);
        d.set_item("output_step", e.output_step)?;
        d.set_item("inputs", e.inputs)?;
        d.set_item("delta", e.delta)?;
        d.set_item("depth", schedule.depth(e.output_step))?;
        entries.append(d)?;
    }
    Ok(entries)
}

/// Categorical scores of a forecast against truth at a threshold.
/// Returns the contingency counts plus POD, CSI, HSS, and FBI (None where
/// the denominator vanishes).
#[pyfunction]
#[pyo3(signature = (pred, truth, threshold, hss_standard = false))]
fn forecast_scores<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    truth: Vec<f64>,
    threshold: f64,
    hss_standard: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let n = pred.len();
    if truth.len() != n {
        return Err(PyValueError::new_err("pred and truth lengths differ"));
    }
    let pred = Tensor::new(vec![n], pred);
    let truth = Tensor::new(vec![n], truth);
    let table = metrics::contingency(&pred, &truth, threshold).map_err(err)?;
    let (pod, csi, hss, fbi) = metrics::scores(&table, hss_standard);
    let d = PyDict::new_bound(py);
    d.set_item("tp", table.tp)?;
    d.set_item("fp", table.fp)?;
    d.set_item("fn", table.fn_)?;
    d.set_item("tn", table.tn)?;
    d.set_item("pod", pod)?;
    d.set_item("csi", csi)?;
    d.set_item("hss", hss)?;
    d.set_item("fbi", fbi)?;
    Ok(d)
}

/// WMCE loss on flat normalized fields; returns the total and the three
/// terms (weighted MAE, precipitating CE, dry CE).
#[pyfunction]
fn wmce_loss<'py>(
    py: Python<'py>,
    y_norm: Vec<f64>,
    y_hat_norm: Vec<f64>,
    y_raw: Vec<f64>,
    tau: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let n = y_norm.len();
    if y_hat_norm.len() != n || y_raw.len() != n {
        return Err(PyValueError::new_err("field lengths differ"));
    }
    let (total, terms) = losses::wmce_loss(
        &Tensor::new(vec![n], y_norm),
        &Tensor::new(vec![n], y_hat_norm),
        &Tensor::new(vec![n], y_raw),
        tau,
    )
    .map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("total", total)?;
    d.set_item("mae_term", terms.mae_term)?;
    d.set_item("ce_precip_term", terms.ce_precip_term)?;
    d.set_item("ce_dry_term", terms.ce_dry_term)?;
    Ok(d)
}

/// Intensity weight applied to a raw rain rate in the WMCE loss.
#[pyfunction]
fn intensity_weight(y_raw: f64) -> f64 {
    losses::intensity_weight(y_raw)
}

/// Learning rate at a global optimizer step under linear warmup followed
/// by cosine decay.
#[pyfunction]
fn lr_at(
    step: usize,
    steps_per_epoch: usize,
    epochs: usize,
    warmup_epochs: usize,
    base_lr: f64,
) -> f64 {
    let cfg = TrainConfig {
        epochs,
        warmup_epochs,
        base_lr,
        ..TrainConfig::default()
    };
    train::lr_at(step, steps_per_epoch, &cfg)
}

#[pymodule]
fn stormlatent_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(hta_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(forecast_scores, m)?)?;
    m.add_function(wrap_pyfunction!(wmce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(intensity_weight, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
