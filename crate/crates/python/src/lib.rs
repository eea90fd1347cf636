//! Python bindings: configs, models, corpus generation, training, evaluation,
//! prediction and the gradient check.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use refseg::checkpoint::{load_checkpoint, save_checkpoint, Progress};
use refseg::cli::encode_expression;
use refseg::decoder::infer_mask as infer;
use refseg::gradcheck::{gradcheck as run_gradcheck, GradcheckOptions};
use refseg::image::{Mask, RgbImage};
use refseg::metrics::EvalAccumulator;
use refseg::model::Example;
use refseg::synthdata::{generate_corpus, load_corpus, save_corpus, GenConfig};
use refseg::tensor::Tensor;
use refseg::train::{evaluate as run_evaluate, TrainOptions, Trainer};

create_exception!(refseg_py, RefsegError, PyException);

fn py_err(e: refseg::Error) -> PyErr {
    RefsegError::new_err(e.to_string())
}

/// Model hyperparameters; `Config()` gives the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: refseg::ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: refseg::ModelConfig::default(),
        }
    }

    /// The tiny configuration used by the gradient check.
    #[staticmethod]
    fn micro() -> Self {
        Self {
            inner: refseg::ModelConfig::micro(),
        }
    }

    /// Parse a flat JSON object; omitted keys take their defaults.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: refseg::ModelConfig =
            serde_json::from_str(text).map_err(|e| RefsegError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn max_tokens(&self) -> usize {
        self.inner.max_tokens
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(image_size={}, text_dim={}, epochs={})",
            self.inner.image_size, self.inner.text_dim, self.inner.epochs
        )
    }
}

/// Binary mask and the two logit maps of one prediction.
#[pyclass(name = "Prediction")]
pub struct PyPrediction {
    #[pyo3(get)]
    width: usize,
    #[pyo3(get)]
    height: usize,
    /// Row-major 0/1 labels, as bytes.
    #[pyo3(get)]
    mask: Vec<u8>,
    #[pyo3(get)]
    fg_logits: Vec<f64>,
    #[pyo3(get)]
    bg_logits: Vec<f64>,
}

#[pymethods]
impl PyPrediction {
    fn foreground_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }

    /// The mask as a binary PGM with values 0 and 255.
    fn to_pgm(&self) -> PyResult<Vec<u8>> {
        let m = Mask::from_labels(self.width, self.height, self.mask.clone()).map_err(py_err)?;
        Ok(m.encode_pgm())
    }
}

/// A segmentation network with its parameters.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: refseg::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters drawn from the config's seed.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map_or_else(refseg::ModelConfig::default, |c| c.inner);
        Ok(Self {
            inner: refseg::Model::new(cfg).map_err(py_err)?,
        })
    }

    /// Load the model stored in a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Write the parameters (without optimizer state) to a checkpoint directory.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, None, &Progress::default()).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner
            .store
            .iter()
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Segment an interleaved RGB byte image for a free-text expression.
    fn predict(
        &self,
        rgb: Vec<u8>,
        width: usize,
        height: usize,
        expression: &str,
    ) -> PyResult<PyPrediction> {
        let size = self.inner.config.image_size;
        if (width, height) != (size, size) || rgb.len() != width * height * 3 {
            return Err(RefsegError::new_err(format!(
                "expected {size}x{size} RGB bytes, got {width}x{height} with {} bytes",
                rgb.len()
            )));
        }
        let image = RgbImage {
            width,
            height,
            data: rgb,
        };
        let (tokens, masked_tokens) =
            encode_expression(expression, self.inner.config.max_tokens).map_err(py_err)?;
        let pred = self
            .inner
            .predict(&Example {
                image: image.to_tensor(),
                tokens,
                masked_tokens,
            })
            .map_err(py_err)?;
        Ok(PyPrediction {
            width,
            height,
            mask: pred.mask.data,
            fg_logits: pred.fg.into_data(),
            bg_logits: pred.bg.into_data(),
        })
    }

    /// Segment a PPM file.
    fn predict_file(&self, path: PathBuf, expression: &str) -> PyResult<PyPrediction> {
        let image = RgbImage::load(&path).map_err(py_err)?;
        self.predict(image.data, image.width, image.height, expression)
    }

    /// Metrics report over a corpus directory, as JSON.
    fn evaluate(&self, data: PathBuf) -> PyResult<String> {
        let corpus = load_corpus(&data).map_err(py_err)?;
        let (report, _) = run_evaluate(&self.inner, &corpus).map_err(py_err)?;
        Ok(report.to_json())
    }
}

/// Write a synthetic corpus of `n` samples to `out`.
#[pyfunction]
#[pyo3(signature = (out, n=32, seed=0, size=64))]
fn gen_data(out: PathBuf, n: usize, seed: u64, size: usize) -> PyResult<usize> {
    let corpus = generate_corpus(&GenConfig {
        image_size: size,
        count: n,
        seed,
        ..GenConfig::default()
    })
    .map_err(py_err)?;
    save_corpus(&out, &corpus).map_err(py_err)?;
    Ok(corpus.len())
}

/// Train on a corpus directory, writing checkpoints and the log to `out`.
/// Returns the per-epoch summaries as JSON.
#[pyfunction]
#[pyo3(signature = (data, out, config=None))]
fn train(data: PathBuf, out: PathBuf, config: Option<PyConfig>) -> PyResult<String> {
    let corpus = load_corpus(&data).map_err(py_err)?;
    let cfg = config.map_or_else(refseg::ModelConfig::default, |c| c.inner);
    let mut trainer = Trainer::new(refseg::Model::new(cfg).map_err(py_err)?);
    let history = trainer
        .train(
            &corpus,
            &TrainOptions {
                out_dir: Some(out),
                ..TrainOptions::default()
            },
        )
        .map_err(py_err)?;
    serde_json::to_string(&history).map_err(|e| RefsegError::new_err(e.to_string()))
}

/// Finite-difference gradient check on the micro config; JSON report.
#[pyfunction]
#[pyo3(signature = (seed=0, samples=256))]
fn gradcheck(seed: u64, samples: usize) -> PyResult<String> {
    let report = run_gradcheck(&GradcheckOptions {
        seed,
        samples,
        ..GradcheckOptions::default()
    })
    .map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| RefsegError::new_err(e.to_string()))
}

/// Foreground where the foreground logit strictly exceeds the background one;
/// row-major 0/1 labels as bytes.
#[pyfunction]
fn infer_mask(fg: Vec<f64>, bg: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<u8>> {
    let fg = Tensor::new([height, width], fg).map_err(py_err)?;
    let bg = Tensor::new([height, width], bg).map_err(py_err)?;
    Ok(infer(&fg, &bg).map_err(py_err)?.data)
}

/// Metrics for `(pred, gt, category)` triples of row-major 0/1 masks, as JSON.
#[pyfunction]
fn metrics(pairs: Vec<(Vec<u8>, Vec<u8>, u8)>, width: usize, height: usize) -> PyResult<String> {
    let mut acc = EvalAccumulator::new();
    for (p, g, c) in pairs {
        let p = Mask::from_labels(width, height, p).map_err(py_err)?;
        let g = Mask::from_labels(width, height, g).map_err(py_err)?;
        acc.add(&p, &g, c).map_err(py_err)?;
    }
    Ok(acc.finalize().map_err(py_err)?.to_json())
}

#[pymodule]
fn refseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RefsegError", m.py().get_type::<RefsegError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrediction>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(infer_mask, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
