//! Python bindings: images, the built-in classifier, configuration,
//! synthesis runs and the per-image metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use impressions::config::CliConfig;
use impressions::diffnet::{gradient_check, load_weights, save_weights, Architecture, Classifier, NetworkWeights};
use impressions::image_core::{init_canvas, load_tensor, read_image, save_tensor, write_image};
use impressions::metrics_report::{measure, softmax as core_softmax};
use impressions::synthesizer::{write_trace, RunResult, Synthesizer};
use impressions::tv_reg::tv_value;
use impressions::{Error, ImageTensor, PixelCoord, Shape};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::CorruptFile { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Intensity image in `[0, 255]`, row-major `(row, col, channel)`.
#[pyclass(name = "Image", module = "impressions_py")]
#[derive(Clone)]
struct PyImage(ImageTensor);

#[pymethods]
impl PyImage {
    /// Values outside `[0, 255]` are clamped.
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        ImageTensor::from_vec(Shape::new(height, width, channels), data).map(PyImage).map_err(py_err)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, channels: usize, value: f64) -> PyResult<Self> {
        ImageTensor::filled(Shape::new(height, width, channels), value).map(PyImage).map_err(py_err)
    }

    #[staticmethod]
    fn read_png(path: PathBuf) -> PyResult<Self> {
        read_image(path).map(PyImage).map_err(py_err)
    }

    /// Lossless tensor file (the `.mean` files written by training).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_tensor(path).map(PyImage).map_err(py_err)
    }

    fn write_png(&self, path: PathBuf) -> PyResult<()> {
        write_image(&self.0, path).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_tensor(&self.0, path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s.height, s.width, s.channels)
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, row: usize, col: usize, channel: usize) -> PyResult<f64> {
        if !self.0.shape().contains(PixelCoord::new(row, col)) || channel >= self.0.channels() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.0.get(row, col, channel))
    }

    /// Anisotropic total variation.
    fn tv(&self) -> f64 {
        tv_value(self.0.shape(), self.0.data())
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.shape();
        format!("Image({h}x{w}x{c})")
    }
}

/// The built-in convolutional classifier.
#[pyclass(name = "Network", module = "impressions_py", frozen)]
struct PyNetwork(NetworkWeights);

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_weights(path).map(PyNetwork).map_err(py_err)
    }

    /// Freshly initialized MNIST-shaped network.
    #[staticmethod]
    fn random(seed: u64) -> PyResult<Self> {
        NetworkWeights::init(Architecture::mnist(), seed).map(PyNetwork).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_weights(&self.0, path).map_err(py_err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        Classifier::fingerprint(&self.0)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        Classifier::num_classes(&self.0)
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.0.input_shape();
        (s.height, s.width, s.channels)
    }

    fn logits(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        Ok(self.0.forward_logits(&image.0).map_err(py_err)?.0)
    }

    /// `(logits, d logit[class] / d input)`, the gradient flattened like `Image.data`.
    fn input_gradient(&self, image: &PyImage, class: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (l, g) = self.0.input_gradient(&image.0, class).map_err(py_err)?;
        Ok((l.0, g.into_vec()))
    }

    /// Largest relative error between analytic and central-difference
    /// gradients over `samples` sampled elements.
    #[pyo3(signature = (image, class, epsilon = 1e-3, samples = 200, seed = 0))]
    fn gradient_check(&self, image: &PyImage, class: usize, epsilon: f64, samples: usize, seed: u64) -> PyResult<f64> {
        let r = gradient_check(&self.0, &image.0.to_field(), class, epsilon, samples, seed).map_err(py_err)?;
        Ok(r.max_rel_error)
    }
}

/// Full configuration: defaults, then an optional TOML file, then
/// `section.key=value` overrides.
#[pyclass(name = "Config", module = "impressions_py")]
#[derive(Clone)]
struct PyConfig {
    cfg: CliConfig,
    path: Option<PathBuf>,
    overrides: Vec<String>,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (overrides = Vec::new(), path = None))]
    fn new(overrides: Vec<String>, path: Option<PathBuf>) -> PyResult<Self> {
        let cfg = CliConfig::load(path.as_deref(), &overrides).map_err(py_err)?;
        Ok(PyConfig { cfg, path, overrides })
    }

    /// A copy with further overrides applied after the existing ones.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let mut all = self.overrides.clone();
        all.extend(overrides);
        Self::new(all, self.path.clone())
    }

    fn to_toml(&self) -> String {
        self.cfg.to_toml()
    }

    fn __repr__(&self) -> String {
        format!("Config(phase_mode={}, seed={})", self.cfg.synthesis.phase_mode.short_name(), self.cfg.synthesis.seed)
    }
}

/// Outcome of one synthesis run.
#[pyclass(name = "Run", module = "impressions_py", frozen)]
struct PyRun(RunResult);

#[pymethods]
impl PyRun {
    #[getter]
    fn image(&self) -> PyImage {
        PyImage(self.0.image.clone())
    }

    /// Image at the end of the unmasked phase, if the run had one.
    #[getter]
    fn pre_image(&self) -> Option<PyImage> {
        self.0.pre_image.clone().map(PyImage)
    }

    #[getter]
    fn target_class(&self) -> usize {
        self.0.target_class()
    }

    #[getter]
    fn initial_logits(&self) -> Vec<f64> {
        self.0.initial_logits.clone()
    }

    #[getter]
    fn final_logits(&self) -> Vec<f64> {
        self.0.final_logits.clone()
    }

    #[getter]
    fn center(&self) -> Option<(usize, usize)> {
        self.0.center.map(|c| (c.row, c.col))
    }

    #[getter]
    fn lambda1(&self) -> Option<f64> {
        self.0.lambda1
    }

    /// One dict per iteration with the scalar trace fields.
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0
            .trace
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("iteration", r.iteration)?;
                d.set_item("phase", format!("{:?}", r.phase).to_lowercase())?;
                d.set_item("class", r.class)?;
                d.set_item("target_logit", r.target_logit)?;
                d.set_item("tv_value", r.tv_value)?;
                d.set_item("radius", r.radius)?;
                d.set_item("tv_applied", r.tv_applied)?;
                Ok(d)
            })
            .collect()
    }

    fn write_trace(&self, path: PathBuf) -> PyResult<()> {
        write_trace(&self.0.trace, path).map_err(py_err)
    }
}

/// Runs the configured phase mode for `target_class`.
#[pyfunction]
fn synthesize(net: &PyNetwork, mean: &PyImage, config: &PyConfig, target_class: usize) -> PyResult<PyRun> {
    let mut cfg = config.cfg.synthesis.clone();
    cfg.target_class = target_class;
    let synth = Synthesizer::new(&net.0, mean.0.clone()).map_err(py_err)?;
    synth.run(&cfg).map(PyRun).map_err(py_err)
}

/// Two classes grown from two seed pixels on one canvas.
#[pyfunction]
fn fuse(
    net: &PyNetwork,
    mean: &PyImage,
    config: &PyConfig,
    class_a: usize,
    class_b: usize,
    seed_a: (usize, usize),
    seed_b: (usize, usize),
) -> PyResult<PyRun> {
    let synth = Synthesizer::new(&net.0, mean.0.clone()).map_err(py_err)?;
    let (a, b) = (PixelCoord::new(seed_a.0, seed_a.1), PixelCoord::new(seed_b.0, seed_b.1));
    synth.fuse(class_a, class_b, a, b, &config.cfg.synthesis).map(PyRun).map_err(py_err)
}

/// The starting canvas: mean plus seeded uniform noise.
#[pyfunction]
fn initial_canvas(mean: &PyImage, noise_amplitude: f64, seed: u64) -> PyResult<PyImage> {
    init_canvas(&mean.0, noise_amplitude, seed).map(PyImage).map_err(py_err)
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    core_softmax(&logits)
}

/// Target logit, softmax confidence, TV energy and salient component count.
#[pyfunction]
#[pyo3(signature = (net, image, class, percentile = 90.0))]
fn metrics<'py>(py: Python<'py>, net: &PyNetwork, image: &PyImage, class: usize, percentile: f64) -> PyResult<Bound<'py, PyDict>> {
    let m = measure(&net.0, &image.0, class, "", "", percentile).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("target_logit", m.target_logit)?;
    d.set_item("softmax_confidence", m.softmax_confidence)?;
    d.set_item("tv_energy", m.tv_energy)?;
    d.set_item("salient_components", m.salient_components)?;
    Ok(d)
}

#[pymodule]
fn impressions_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(initial_canvas, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
