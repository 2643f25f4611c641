//! Python bindings. Arrays cross the boundary as nested lists.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use otseg_core::config::RunConfig;
use otseg_core::data::{self, DomainShift, SceneSpec};
use otseg_core::jdot::{DistGrid, LabelGrid};
use otseg_core::metrics::ConfusionMatrix;
use otseg_core::nn::{SegNet as CoreSegNet, SegNetConfig};
use otseg_core::ot::{self, CostMatrix, DiscreteMeasure, SinkhornConfig};
use otseg_core::{train as core_train, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cost_matrix(rows: Vec<Vec<f64>>) -> PyResult<CostMatrix> {
    CostMatrix::from_rows(&rows).map_err(py_err)
}

fn measure(weights: Option<Vec<f64>>, n: usize) -> PyResult<DiscreteMeasure> {
    match weights {
        Some(w) => DiscreteMeasure::from_weights(w),
        None => DiscreteMeasure::uniform_weights(n),
    }
    .map_err(py_err)
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn grid(values: Vec<Vec<Vec<f64>>>) -> PyResult<DistGrid> {
    let h = values.len();
    let w = values.first().map_or(0, Vec::len);
    let c = values.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if values.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != c)) {
        return Err(PyValueError::new_err("ragged distribution grid"));
    }
    DistGrid::new(h, w, c, values.into_iter().flatten().flatten().collect()).map_err(py_err)
}

fn labels(values: Vec<Vec<usize>>, classes: usize) -> PyResult<LabelGrid> {
    let h = values.len();
    let w = values.first().map_or(0, Vec::len);
    if values.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged label grid"));
    }
    LabelGrid::from_classes(h, w, classes, values.into_iter().flatten().collect()).map_err(py_err)
}

fn image(values: Vec<Vec<Vec<f64>>>) -> PyResult<data::Image> {
    let h = values.len();
    let w = values.first().map_or(0, Vec::len);
    if values.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != 3)) {
        return Err(PyValueError::new_err("images must be height x width x 3 lists"));
    }
    data::Image::new(h, w, values.into_iter().flatten().flatten().collect()).map_err(py_err)
}

fn image_lists(img: &data::Image) -> Vec<Vec<Vec<f64>>> {
    img.data()
        .chunks(img.width() * 3)
        .map(|row| row.chunks(3).map(<[f64]>::to_vec).collect())
        .collect()
}

/// Result of an OT solve.
#[pyclass(name = "TransportPlan", frozen)]
struct PyTransportPlan(ot::TransportPlan);

#[pymethods]
impl PyTransportPlan {
    #[getter]
    fn coupling(&self) -> Vec<Vec<f64>> {
        rows(&self.0.coupling)
    }

    #[getter]
    fn transport_cost(&self) -> f64 {
        self.0.transport_cost
    }

    #[getter]
    fn iterations_used(&self) -> usize {
        self.0.iterations_used
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    fn marginal_violation(&self) -> f64 {
        self.0.marginal_violation()
    }

    fn __repr__(&self) -> String {
        format!(
            "TransportPlan(shape={:?}, transport_cost={}, converged={})",
            self.0.shape(),
            self.0.transport_cost,
            self.0.converged
        )
    }
}

/// Entropic OT; marginals default to uniform.
#[pyfunction]
#[pyo3(signature = (cost, lam, a=None, b=None, max_iterations=10_000, tolerance=1e-9))]
fn sinkhorn(
    cost: Vec<Vec<f64>>,
    lam: f64,
    a: Option<Vec<f64>>,
    b: Option<Vec<f64>>,
    max_iterations: usize,
    tolerance: f64,
) -> PyResult<PyTransportPlan> {
    let c = cost_matrix(cost)?;
    let config = SinkhornConfig::new(lam, max_iterations, tolerance).map_err(py_err)?;
    let plan = ot::sinkhorn(&measure(a, c.n_source())?, &measure(b, c.n_target())?, &c, &config).map_err(py_err)?;
    Ok(PyTransportPlan(plan))
}

#[pyfunction]
#[pyo3(signature = (cost, a=None, b=None))]
fn exact_ot(cost: Vec<Vec<f64>>, a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> PyResult<PyTransportPlan> {
    let c = cost_matrix(cost)?;
    let plan = ot::exact_ot(&measure(a, c.n_source())?, &measure(b, c.n_target())?, &c).map_err(py_err)?;
    Ok(PyTransportPlan(plan))
}

#[pyfunction]
#[pyo3(signature = (cost, a=None, b=None))]
fn wasserstein_distance(cost: Vec<Vec<f64>>, a: Option<Vec<f64>>, b: Option<Vec<f64>>) -> PyResult<f64> {
    let c = cost_matrix(cost)?;
    ot::wasserstein_distance(&measure(a, c.n_source())?, &measure(b, c.n_target())?, &c).map_err(py_err)
}

#[pyfunction]
fn squared_euclidean_cost(xs: Vec<Vec<f64>>, xt: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(ot::squared_euclidean_cost(&xs, &xt).map_err(py_err)?.entries()))
}

/// Pixel-averaged KL(p‖q) between `H × W × C` probability grids.
#[pyfunction]
fn kl_divergence(p: Vec<Vec<Vec<f64>>>, q: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    otseg_core::jdot::kl_divergence(&grid(p)?, &grid(q)?).map_err(py_err)
}

/// Pixel-averaged cross-entropy of `H × W` class ids against `H × W × C` probabilities.
#[pyfunction]
fn cross_entropy(labels_hw: Vec<Vec<usize>>, p: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let p = grid(p)?;
    otseg_core::jdot::cross_entropy(&labels(labels_hw, p.classes())?, &p).map_err(py_err)
}

/// Returns `(image, labels)` as `H × W × 3` and `H × W` lists.
#[pyfunction]
#[pyo3(signature = (index, side=32, num_classes=4, shapes_min=2, shapes_max=5, seed=0))]
fn generate_scene(
    index: u64,
    side: usize,
    num_classes: usize,
    shapes_min: usize,
    shapes_max: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    let spec = SceneSpec {
        side,
        num_classes,
        shapes_min,
        shapes_max,
        seed,
    };
    let scene = data::generate_scene(&spec, index).map_err(py_err)?;
    let lab = scene.labels.labels().chunks(side).map(<[usize]>::to_vec).collect();
    Ok((image_lists(&scene.image), lab))
}

#[pyfunction]
#[pyo3(signature = (image_hwc, gain=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0), noise_sigma=0.0, texture_freq=0.0, seed=0, index=0))]
#[allow(clippy::too_many_arguments)]
fn apply_domain_shift(
    image_hwc: Vec<Vec<Vec<f64>>>,
    gain: (f64, f64, f64),
    bias: (f64, f64, f64),
    noise_sigma: f64,
    texture_freq: f64,
    seed: u64,
    index: u64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let shift = DomainShift {
        channel_gain: [gain.0, gain.1, gain.2],
        channel_bias: [bias.0, bias.1, bias.2],
        noise_sigma,
        texture_freq,
    };
    let out = data::apply_domain_shift(&image(image_hwc)?, &shift, seed, index).map_err(py_err)?;
    Ok(image_lists(&out))
}

/// Returns `(miou, per_class_iou)`; absent classes are `None`.
#[pyfunction]
fn miou(pred: Vec<usize>, gt: Vec<usize>, num_classes: usize) -> PyResult<(f64, Vec<Option<f64>>)> {
    let mut cm = ConfusionMatrix::new(num_classes).map_err(py_err)?;
    cm.accumulate(&pred, &gt).map_err(py_err)?;
    Ok((cm.miou().map_err(py_err)?, cm.iou_per_class()))
}

/// Trains from a run configuration file; returns the final target mIoU if evaluated.
#[pyfunction]
fn train(config_path: PathBuf) -> PyResult<Option<f64>> {
    let cfg = RunConfig::load(&config_path).map_err(py_err)?;
    Ok(core_train::train(&cfg).map_err(py_err)?.final_miou())
}

/// Metrics CSV text for a checkpoint on a labeled dataset directory.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, data_dir: PathBuf) -> PyResult<String> {
    core_train::evaluate(&checkpoint, &data_dir).map_err(py_err)
}

/// The two-level segmentation network.
#[pyclass(name = "SegNet")]
struct PySegNet(CoreSegNet);

#[pymethods]
impl PySegNet {
    #[new]
    #[pyo3(signature = (num_classes=4, widths=(16, 32, 32), seed=0))]
    fn new(num_classes: usize, widths: (usize, usize, usize), seed: u64) -> PyResult<Self> {
        let config = SegNetConfig {
            in_channels: 3,
            num_classes,
            widths: [widths.0, widths.1, widths.2],
        };
        Ok(Self(CoreSegNet::new(config, seed).map_err(py_err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, u32)> {
        let (net, it) = CoreSegNet::load(&path).map_err(py_err)?;
        Ok((Self(net), it))
    }

    #[pyo3(signature = (path, iteration=0))]
    fn save(&self, path: PathBuf, iteration: u32) -> PyResult<()> {
        self.0.save(&path, iteration).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.config().num_classes
    }

    /// Per-pixel class ids (high-level head) for each `H × W × 3` image.
    fn predict(&self, images: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<Vec<Vec<usize>>>> {
        let imgs = images.into_iter().map(image).collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&data::Image> = imgs.iter().collect();
        let preds = core_train::predict(&self.0, &refs).map_err(py_err)?;
        Ok(preds
            .into_iter()
            .zip(&imgs)
            .map(|(p, img)| p.chunks(img.width()).map(<[usize]>::to_vec).collect())
            .collect())
    }
}

#[pymodule]
fn otseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransportPlan>()?;
    m.add_class::<PySegNet>()?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(exact_ot, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein_distance, m)?)?;
    m.add_function(wrap_pyfunction!(squared_euclidean_cost, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(apply_domain_shift, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
