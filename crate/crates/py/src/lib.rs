//! Python module `cdgc`: tensors and CDT1 files, class masks and node sampling,
//! losses, the learning-rate schedule, mIoU, synthetic data, experiments, and the
//! gradient suite.

use std::collections::HashMap;

use cdgc_core::data::{generate_dataset as gen, DatasetSpec, LabelMap, IGNORE_LABEL};
use cdgc_core::experiment::{run_experiment as run, ExperimentConfig};
use cdgc_core::graph::{dynamic_sample as ds, inference_sample as infer, ClassMasks};
use cdgc_core::loss::{cross_entropy as ce, ohem_loss as ohem, OhemConfig};
use cdgc_core::metrics::{confusion, miou as core_miou};
use cdgc_core::optim::{poly_lr as core_poly_lr, OptimState};
use cdgc_core::{cdt, gradsuite, Rng, Tape};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: cdgc_core::Error) -> PyErr {
    match e {
        cdgc_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense row-major `f32` tensor.
#[pyclass(name = "Tensor", module = "cdgc", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: cdgc_core::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: cdgc_core::Tensor::new(shape, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        cdt::write(path, &self.inner).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: cdt::read(path).map_err(to_py)?,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        cdt::encode(&self.inner)
    }

    #[staticmethod]
    fn from_bytes(bytes: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: cdt::decode(&bytes).map_err(PyValueError::new_err)?,
        })
    }
}

fn labels(height: usize, width: usize, data: Vec<u8>) -> PyResult<LabelMap> {
    LabelMap::new(height, width, data).map_err(to_py)
}

/// Per-pixel argmax class of `[M, H, W]` logits (ties go to the lower class).
#[pyfunction]
fn argmax_classes(logits: &PyTensor) -> PyResult<Vec<usize>> {
    Ok(ClassMasks::from_logits(&logits.inner).map_err(to_py)?.to_class_map())
}

/// Training-time node sets from coarse and ground-truth class maps.
#[pyfunction]
#[pyo3(signature = (coarse, truth, num_classes, ratio, seed=0))]
fn dynamic_sample(
    coarse: Vec<u8>,
    truth: Vec<u8>,
    num_classes: usize,
    ratio: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let n = coarse.len();
    let c = ClassMasks::from_labels(&labels(1, n, coarse)?, num_classes).map_err(to_py)?;
    let g = ClassMasks::from_labels(&labels(1, truth.len(), truth)?, num_classes).map_err(to_py)?;
    let sets = ds(&c, &g, ratio, &mut Rng::seed(seed)).map_err(to_py)?;
    Ok(sets.sets().to_vec())
}

/// Inference-time node sets: the coarse-predicted members of each class.
#[pyfunction]
fn inference_sample(coarse: Vec<u8>, num_classes: usize) -> PyResult<Vec<Vec<usize>>> {
    let n = coarse.len();
    let c = ClassMasks::from_labels(&labels(1, n, coarse)?, num_classes).map_err(to_py)?;
    Ok(infer(&c).sets().to_vec())
}

fn loss_value(
    logits: &PyTensor,
    targets: Vec<u8>,
    f: impl FnOnce(&mut Tape<f64>, cdgc_core::Var, &LabelMap) -> cdgc_core::Result<cdgc_core::Var>,
) -> PyResult<f64> {
    let shape = logits.inner.shape();
    if shape.len() != 3 {
        return Err(PyValueError::new_err("logits must be [M, H, W]"));
    }
    let map = labels(shape[1], shape[2], targets)?;
    let mut tape = Tape::new();
    let x = tape.constant(logits.inner.cast::<f64>());
    let loss = f(&mut tape, x, &map).map_err(to_py)?;
    Ok(tape.value(loss).item())
}

/// Mean cross entropy over pixels whose label is not 255.
#[pyfunction]
fn cross_entropy(logits: &PyTensor, labels: Vec<u8>) -> PyResult<f64> {
    loss_value(logits, labels, |t, x, l| ce(t, x, l, IGNORE_LABEL))
}

/// Cross entropy over the hard pixels; `min_kept=None` uses `ceil(valid / 16)`.
#[pyfunction]
#[pyo3(signature = (logits, labels, threshold=0.7, min_kept=None))]
fn ohem_loss(logits: &PyTensor, labels: Vec<u8>, threshold: f64, min_kept: Option<usize>) -> PyResult<f64> {
    let cfg = OhemConfig { threshold, min_kept };
    loss_value(logits, labels, |t, x, l| ohem(t, x, l, &cfg))
}

#[pyfunction]
#[pyo3(signature = (lr_base, iteration, max_iter, power=0.9))]
fn poly_lr(lr_base: f64, iteration: usize, max_iter: usize, power: f64) -> PyResult<f64> {
    if max_iter == 0 || iteration > max_iter {
        return Err(PyValueError::new_err("need 0 <= iteration <= max_iter and max_iter > 0"));
    }
    let mut state = OptimState::<f32>::new(lr_base, max_iter).with_power(power);
    state.iter = iteration;
    Ok(core_poly_lr(&state))
}

/// `(mean IoU, per-class IoU or None)` of flat predicted and true class maps.
#[pyfunction]
fn miou(pred: Vec<usize>, truth: Vec<u8>, num_classes: usize) -> PyResult<(f64, Vec<Option<f64>>)> {
    let n = truth.len();
    let cm = confusion(&pred, &labels(1, n, truth)?, num_classes).map_err(to_py)?;
    core_miou(&cm).map_err(to_py)
}

/// Synthetic samples as `(image, labels)` pairs, labels flattened row-major.
#[pyfunction]
#[pyo3(signature = (n, height, width, num_classes, noise=0.3, seed=0))]
fn generate_dataset(
    n: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    noise: f64,
    seed: u64,
) -> PyResult<Vec<(PyTensor, Vec<u8>)>> {
    let spec = DatasetSpec::new(height, width, num_classes, noise);
    Ok(gen(n, &spec, seed)
        .map_err(to_py)?
        .into_iter()
        .map(|s| (PyTensor { inner: s.image }, s.labels.data().to_vec()))
        .collect())
}

/// Trains one configuration given as `key=value` overrides and returns its results row.
#[pyfunction]
#[pyo3(signature = (out, overrides=None))]
fn run_experiment(out: &str, overrides: Option<HashMap<String, String>>) -> PyResult<HashMap<String, String>> {
    let mut cfg = ExperimentConfig::default();
    let mut overrides: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
    overrides.sort();
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(to_py)?;
    }
    let art = run(&cfg, out).map_err(to_py)?;
    Ok(HashMap::from([
        ("variant".to_string(), art.row.variant.to_string()),
        ("seed".to_string(), art.row.seed.to_string()),
        ("coarse_miou".to_string(), art.row.coarse_miou.to_string()),
        ("refined_miou".to_string(), art.row.refined_miou.to_string()),
        ("run_dir".to_string(), art.run_dir.display().to_string()),
    ]))
}

/// The 64-bit gradient suite as `(name, seed, max_rel_error, passed)` tuples.
#[pyfunction]
#[pyo3(signature = (seeds=3))]
fn gradcheck(seeds: u64) -> PyResult<Vec<(String, u64, f64, bool)>> {
    Ok(gradsuite::run_suite(seeds)
        .map_err(to_py)?
        .into_iter()
        .map(|r| (r.name.to_string(), r.seed, r.max_rel_error, r.passed()))
        .collect())
}

#[pymodule]
fn cdgc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(argmax_classes, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_sample, m)?)?;
    m.add_function(wrap_pyfunction!(inference_sample, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(ohem_loss, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("IGNORE_LABEL", IGNORE_LABEL)?;
    Ok(())
}
