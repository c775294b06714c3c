//! Python bindings for the fundus screening pipeline: images, tensors,
//! networks, preprocessing, training and gradient checking, all delegating
//! to the core crate. The module is importable as `retina_dx_py`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use retina_dx::checkpoint;
use retina_dx::clahe::ClaheParams;
use retina_dx::data::Label;
use retina_dx::gradcheck;
use retina_dx::image;
use retina_dx::layers::{build_network, Mode, Network, NetworkConfig};
use retina_dx::pnm;
use retina_dx::synth;
use retina_dx::tensor::Tensor;
use retina_dx::train::{self, LabeledSet, TrainingConfig};

fn err(e: retina_dx::Error) -> PyErr {
    match &e {
        retina_dx::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_label(token: &str) -> PyResult<Label> {
    Label::parse(token)
        .ok_or_else(|| PyValueError::new_err(format!("unknown label {token:?} (healthy|dr_signs)")))
}

fn clahe_params(tiles_x: usize, tiles_y: usize, clip_limit: f64, bins: usize) -> ClaheParams {
    ClaheParams {
        tiles_x,
        tiles_y,
        clip_limit,
        bins,
    }
}

/// An 8-bit grayscale or RGB raster, row-major, interleaved channels.
#[pyclass(name = "Image")]
pub struct PyImage {
    inner: image::Image8,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: image::Image8::new(width, height, channels, pixels).map_err(err)?,
        })
    }

    /// Decodes a binary PPM (P6) or PGM (P5) file.
    #[staticmethod]
    fn read_pnm(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pnm::read_file(&path).map_err(err)?,
        })
    }

    fn write_pnm(&self, path: PathBuf) -> PyResult<()> {
        pnm::write_file(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels().to_vec()
    }

    /// Integer Rec.601 luma plane.
    fn luma(&self) -> Vec<u8> {
        self.inner.luma()
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}, {} channel{})",
            self.inner.width(),
            self.inner.height(),
            self.inner.channels(),
            if self.inner.channels() == 1 { "" } else { "s" }
        )
    }
}

/// Dense float32 tensor, row-major.
#[pyclass(name = "Tensor")]
pub struct PyTensor {
    inner: Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: Tensor::new(&shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// A convolutional classifier plus its configuration and dropout stream.
#[pyclass(name = "Network")]
pub struct PyNetwork {
    inner: Network<f32>,
}

#[pymethods]
impl PyNetwork {
    /// Builds a preset architecture ("table1" or "text3") for square RGB
    /// inputs of `input_size`, with seeded He-normal initialization.
    #[staticmethod]
    #[pyo3(signature = (preset="table1", input_size=64, seed=42))]
    fn build(preset: &str, input_size: usize, seed: u64) -> PyResult<Self> {
        let mut config = NetworkConfig::preset(preset).map_err(err)?;
        config.input = [3, input_size, input_size];
        Ok(Self {
            inner: build_network(&config, seed).map_err(err)?,
        })
    }

    /// Builds from a full JSON network configuration.
    #[staticmethod]
    #[pyo3(signature = (config_json, seed=42))]
    fn from_config_json(config_json: &str, seed: u64) -> PyResult<Self> {
        let config: NetworkConfig = serde_json::from_str(config_json)
            .map_err(|e| PyValueError::new_err(format!("bad network config: {e}")))?;
        Ok(Self {
            inner: build_network(&config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn input(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.config().input;
        (c, h, w)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config().name.clone()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config())
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner
            .trainable_params()
            .into_iter()
            .map(|(name, _)| name)
            .collect()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        self.inner
            .param(name)
            .map(|t| PyTensor { inner: t.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))
    }

    /// Runs the network on an N×C×H×W batch; `training` selects batch-stat
    /// batchnorm and live dropout. Returns the N×2 class probabilities.
    #[pyo3(signature = (batch, training=false))]
    fn forward(&mut self, batch: &PyTensor, training: bool) -> PyResult<PyTensor> {
        let mode = if training {
            Mode::Training
        } else {
            Mode::Inference
        };
        Ok(PyTensor {
            inner: self.inner.forward(&batch.inner, mode).map_err(err)?,
        })
    }

    /// Classifies one C×H×W tensor; returns (label, p_healthy, p_dr_signs).
    fn predict(&mut self, sample: &PyTensor) -> PyResult<(String, f64, f64)> {
        let mut shape = vec![1usize];
        shape.extend_from_slice(sample.inner.shape());
        let x = Tensor::new(&shape, sample.inner.data().to_vec()).map_err(err)?;
        let probs = self.inner.forward(&x, Mode::Inference).map_err(err)?;
        let row = &probs.data()[..2];
        let label = if row[1] > row[0] {
            Label::DrSigns
        } else {
            Label::Healthy
        };
        Ok((label.token().to_string(), row[0] as f64, row[1] as f64))
    }

    fn __repr__(&self) -> String {
        let [c, h, w] = self.inner.config().input;
        format!("Network({:?}, input {c}x{h}x{w})", self.inner.config().name)
    }
}

/// Renders a deterministic synthetic fundus image for the given class.
#[pyfunction]
#[pyo3(signature = (label, seed, size=64))]
fn synth_fundus(label: &str, seed: u64, size: usize) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: synth::synth_fundus(parse_label(label)?, seed, size).map_err(err)?,
    })
}

/// Finds the retina's bounding box (inclusive corners) by thresholded luma
/// and largest connected component.
#[pyfunction]
#[pyo3(signature = (img, threshold=image::RETINA_LUMA_THRESHOLD))]
fn detect_retina_bbox(img: &PyImage, threshold: u8) -> (usize, usize, usize, usize) {
    let b = image::detect_retina_bbox(&img.inner, threshold);
    (b.x0, b.y0, b.x1, b.y1)
}

/// Bilinearly resizes to `width`×`height`.
#[pyfunction]
fn resize_bilinear(img: &PyImage, width: usize, height: usize) -> PyResult<PyImage> {
    if width == 0 || height == 0 {
        return Err(PyValueError::new_err("output size must be positive"));
    }
    Ok(PyImage {
        inner: image::resize_bilinear(&img.inner, width, height),
    })
}

/// Contrast-limited adaptive histogram equalization of one gray channel.
#[pyfunction]
#[pyo3(signature = (img, tiles_x=8, tiles_y=8, clip_limit=0.01, bins=256))]
fn clahe(img: &PyImage, tiles_x: usize, tiles_y: usize, clip_limit: f64, bins: usize) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: retina_dx::clahe::clahe(&img.inner, &clahe_params(tiles_x, tiles_y, clip_limit, bins))
            .map_err(err)?,
    })
}

/// Per-channel CLAHE over an RGB image.
#[pyfunction]
#[pyo3(signature = (img, tiles_x=8, tiles_y=8, clip_limit=0.01, bins=256))]
fn enhance_color(img: &PyImage, tiles_x: usize, tiles_y: usize, clip_limit: f64, bins: usize) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: retina_dx::clahe::enhance_color(
            &img.inner,
            &clahe_params(tiles_x, tiles_y, clip_limit, bins),
        )
        .map_err(err)?,
    })
}

/// The full input pipeline: RGB → retina crop → per-channel CLAHE →
/// bilinear resize → C×H×W float tensor scaled to [0, 1].
#[pyfunction]
#[pyo3(signature = (img, input_size=64, tiles_x=8, tiles_y=8, clip_limit=0.01, bins=256))]
fn preprocess(
    img: &PyImage,
    input_size: usize,
    tiles_x: usize,
    tiles_y: usize,
    clip_limit: f64,
    bins: usize,
) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: image::preprocess(
            &img.inner,
            &clahe_params(tiles_x, tiles_y, clip_limit, bins),
            input_size,
        )
        .map_err(err)?,
    })
}

/// Seeded 80/20 index split; returns (train_indices, test_indices).
#[pyfunction]
fn split_80_20(n: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let s = retina_dx::data::split_indices(n, seed).map_err(err)?;
    Ok((s.train, s.test))
}

fn build_set(py: Python<'_>, inputs: &[Py<PyTensor>], labels: &[usize]) -> PyResult<LabeledSet> {
    if inputs.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let mut set = LabeledSet::new();
    for (t, &label) in inputs.iter().zip(labels) {
        set.push(t.borrow(py).inner.clone(), label).map_err(err)?;
    }
    Ok(set)
}

/// Trains `net` in place with momentum SGD and the piecewise learning-rate
/// schedule; returns one metrics dict per epoch (epoch, lr, train_loss,
/// train_accuracy, val_accuracy or None).
#[pyfunction]
#[pyo3(signature = (net, inputs, labels, val_inputs=None, val_labels=None, epochs=20,
                    lr=0.01, momentum=0.9, batch_size=32, lr_drop_factor=0.2,
                    lr_drop_period=5, seed=42))]
#[allow(clippy::too_many_arguments)]
fn train_network(
    py: Python<'_>,
    net: &Bound<'_, PyNetwork>,
    inputs: Vec<Py<PyTensor>>,
    labels: Vec<usize>,
    val_inputs: Option<Vec<Py<PyTensor>>>,
    val_labels: Option<Vec<usize>>,
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    lr_drop_factor: f64,
    lr_drop_period: usize,
    seed: u64,
) -> PyResult<Py<PyList>> {
    let train_set = build_set(py, &inputs, &labels)?;
    let val_set = match (&val_inputs, &val_labels) {
        (Some(vi), Some(vl)) => build_set(py, vi, vl)?,
        (None, None) => LabeledSet::new(),
        _ => {
            return Err(PyValueError::new_err(
                "val_inputs and val_labels must be given together",
            ))
        }
    };
    let cfg = TrainingConfig {
        initial_lr: lr,
        lr_drop_factor,
        lr_drop_period_epochs: lr_drop_period,
        max_epochs: epochs,
        momentum,
        batch_size,
        seed,
        shuffle_each_epoch: true,
    };
    let records = train::train(&mut net.borrow_mut().inner, &train_set, &val_set, &cfg)
        .map_err(err)?;

    let out = PyList::empty(py);
    for r in &records {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("lr", r.lr)?;
        d.set_item("train_loss", r.train_loss)?;
        d.set_item("train_accuracy", r.train_accuracy)?;
        d.set_item("val_accuracy", r.val_accuracy)?;
        out.append(d)?;
    }
    Ok(out.unbind())
}

/// Inference-mode accuracy and 2×2 confusion matrix over a labeled set.
#[pyfunction]
fn evaluate(
    py: Python<'_>,
    net: &Bound<'_, PyNetwork>,
    inputs: Vec<Py<PyTensor>>,
    labels: Vec<usize>,
) -> PyResult<(f64, ((usize, usize), (usize, usize)))> {
    let set = build_set(py, &inputs, &labels)?;
    let (acc, c) = train::evaluate(&mut net.borrow_mut().inner, &set).map_err(err)?;
    Ok((acc, ((c[0][0], c[0][1]), (c[1][0], c[1][1]))))
}

/// Full-network finite-difference gradient check on the reduced variant of
/// `preset`; returns (passed, max_rel_err, per-parameter list).
#[pyfunction]
#[pyo3(signature = (preset="table1", tolerance=1e-3, seed=42))]
fn grad_check(preset: &str, tolerance: f64, seed: u64) -> PyResult<(bool, f64, Vec<(String, f64)>)> {
    let config = NetworkConfig::gradcheck_variant(preset).map_err(err)?;
    let report = gradcheck::grad_check(&config, tolerance, seed).map_err(err)?;
    let params = report
        .params
        .iter()
        .map(|p| (p.name.clone(), p.max_rel_err))
        .collect();
    Ok((report.passed(), report.max_rel_err(), params))
}

#[pymodule]
fn retina_dx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(synth_fundus, m)?)?;
    m.add_function(wrap_pyfunction!(detect_retina_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(resize_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(clahe, m)?)?;
    m.add_function(wrap_pyfunction!(enhance_color, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(split_80_20, m)?)?;
    m.add_function(wrap_pyfunction!(train_network, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("RETINA_LUMA_THRESHOLD", image::RETINA_LUMA_THRESHOLD)?;
    m.add("LESION_LUMA_THRESHOLD", synth::LESION_LUMA_THRESHOLD)?;
    Ok(())
}
