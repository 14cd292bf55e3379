//! Python module `polyseg_py`: metrics, losses, mask helpers and models.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use polyseg::datapipe;
use polyseg::evaluator::{self, RunReport, TableFormat};
use polyseg::metrics::{self, ConfusionCounts, Mask, MetricSet};
use polyseg::models::{self, Arch, ModelConfig};
use polyseg::{checkpoint, trainer, SegError, Tensor};

fn py_err(e: SegError) -> PyErr {
    match e {
        SegError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn mask_from_rows(rows: Vec<Vec<u8>>) -> PyResult<Mask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows must all have the same length"));
    }
    Mask::new(h, w, rows.concat()).map_err(py_err)
}

fn metric_dict(m: &MetricSet) -> HashMap<String, f64> {
    MetricSet::NAMES.iter().map(|n| n.to_string()).zip(m.to_array()).collect()
}

fn metric_from_dict(d: &HashMap<String, f64>) -> PyResult<MetricSet> {
    let mut a = [0.0; 6];
    for (slot, name) in a.iter_mut().zip(MetricSet::NAMES) {
        *slot = *d.get(name).ok_or_else(|| PyValueError::new_err(format!("missing metric {name}")))?;
    }
    Ok(MetricSet::from_array(a))
}

/// Counts `(tp, fp, fn, tn)` for two equally sized 0/1 masks given as row lists.
#[pyfunction]
fn confusion_counts(pred: Vec<Vec<u8>>, truth: Vec<Vec<u8>>) -> PyResult<(u64, u64, u64, u64)> {
    let c = metrics::confusion_counts(&mask_from_rows(pred)?, &mask_from_rows(truth)?).map_err(py_err)?;
    Ok((c.tp, c.fp, c.fn_, c.tn))
}

#[pyfunction]
#[pyo3(name = "metric_set")]
fn metric_set_py(tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<HashMap<String, f64>> {
    metrics::metric_set(&ConfusionCounts::new(tp, fp, fn_, tn)).map(|m| metric_dict(&m)).map_err(py_err)
}

#[pyfunction]
fn aggregate(per_image: Vec<HashMap<String, f64>>) -> PyResult<HashMap<String, f64>> {
    let sets = per_image.iter().map(metric_from_dict).collect::<PyResult<Vec<_>>>()?;
    metrics::aggregate(&sets).map(|m| metric_dict(&m)).map_err(py_err)
}

#[pyfunction]
fn leaky_relu(values: Vec<f64>, slope: f64) -> PyResult<Vec<f64>> {
    let n = values.len();
    let t = Tensor::new(vec![n], values).map_err(py_err)?;
    Ok(models::leaky_relu(&t, slope).map_err(py_err)?.into_data())
}

fn flat_pair(logits: Vec<f64>, truth: Vec<f64>) -> PyResult<(Tensor, Tensor)> {
    let (n, m) = (logits.len(), truth.len());
    Ok((
        Tensor::new(vec![1, 1, 1, n], logits).map_err(py_err)?,
        Tensor::new(vec![1, 1, 1, m], truth).map_err(py_err)?,
    ))
}

/// Soft Dice loss (smoothing 1) of flat logits against flat 0/1 targets.
#[pyfunction]
fn dice_loss(logits: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    let (z, t) = flat_pair(logits, truth)?;
    trainer::dice_loss(&z, &t).map_err(py_err)
}

#[pyfunction]
fn bce_loss(logits: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    let (z, t) = flat_pair(logits, truth)?;
    trainer::bce_loss(&z, &t).map_err(py_err)
}

/// Renders `(run_id, metrics)` rows as a csv or markdown table.
#[pyfunction]
#[pyo3(signature = (rows, format = "csv"))]
fn format_table(rows: Vec<(String, HashMap<String, f64>)>, format: &str) -> PyResult<String> {
    let fmt = match format {
        "csv" => TableFormat::Csv,
        "markdown" => TableFormat::Markdown,
        other => return Err(PyValueError::new_err(format!("unknown format {other:?}"))),
    };
    let reports = rows
        .iter()
        .map(|(id, m)| {
            let per = [("aggregate".to_string(), metric_from_dict(m)?)].into_iter().collect();
            RunReport::from_per_image(id, evaluator::DEFAULT_THRESHOLD, per).map_err(py_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    evaluator::format_table(&reports, fmt).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (gray, threshold = 127))]
fn binarize_mask(gray: Vec<Vec<u8>>, threshold: i32) -> PyResult<Vec<Vec<u32>>> {
    let h = gray.len();
    let w = gray.first().map_or(0, Vec::len);
    let m = datapipe::binarize_mask(&gray.concat(), h, w, threshold).map_err(py_err)?;
    // u32 rows so Python sees lists of ints rather than bytes.
    Ok(m.data.chunks(w.max(1)).map(|r| r.iter().map(|&v| u32::from(v)).collect()).collect())
}

/// `(x0, y0, width, height)` of the foreground grown by `margin`.
#[pyfunction]
#[pyo3(signature = (mask, margin = 0.1))]
fn mask_bbox(mask: Vec<Vec<u8>>, margin: f64) -> PyResult<(usize, usize, usize, usize)> {
    let b = datapipe::mask_bbox(&mask_from_rows(mask)?, margin).map_err(py_err)?;
    Ok((b.x0, b.y0, b.width, b.height))
}

fn parse_arch(name: &str) -> PyResult<Arch> {
    name.parse::<Arch>().map_err(py_err)
}

#[pyfunction]
fn overfit_sanity(py: Python<'_>, arch: &str, steps: usize) -> PyResult<f64> {
    let arch = parse_arch(arch)?;
    py.detach(|| trainer::overfit_sanity(arch, steps)).map_err(py_err)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: models::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, base_width = 32, depth = 4, seed = 0))]
    fn new(arch: &str, base_width: usize, depth: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(parse_arch(arch)?).with_size(base_width, depth).with_seed(seed);
        Ok(Self { inner: models::build_model(&cfg).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_config_json(text: &str) -> PyResult<Self> {
        let cfg = ModelConfig::from_json(text).map_err(py_err)?;
        Ok(Self { inner: models::build_model(&cfg).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).map_err(py_err)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, None).map_err(py_err)
    }

    fn config_json(&self) -> String {
        self.inner.config().to_json()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().names().to_vec()
    }

    /// Runs the model on a flat row-major `N x C x H x W` buffer and returns
    /// `(main_logits, shape)`.
    fn forward(&self, py: Python<'_>, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let x = Tensor::new(shape, data).map_err(py_err)?;
        let out = py.detach(|| self.inner.forward(&x)).map_err(py_err)?;
        let shape = out.main.shape().to_vec();
        Ok((out.main.into_data(), shape))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(arch={:?}, base_width={}, depth={}, params={})", c.arch.name(), c.base_width, c.depth, self.inner.param_count())
    }
}

#[pymodule]
fn polyseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(confusion_counts, m)?)?;
    m.add_function(wrap_pyfunction!(metric_set_py, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(leaky_relu, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(format_table, m)?)?;
    m.add_function(wrap_pyfunction!(binarize_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mask_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(overfit_sanity, m)?)?;
    m.add_class::<PyModel>()?;
    m.add("ARCHITECTURES", Arch::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    Ok(())
}
