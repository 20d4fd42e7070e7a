//! Python bindings: the synthetic corpus, training, detection and the metric helpers.
//!
//! Images cross the boundary as flat `float` lists plus a shape tuple, so the
//! module has no dependency on numpy.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ucf_forge::disentangler;
use ucf_forge::evalkit;
use ucf_forge::model::FeatureKind;
use ucf_forge::nn::Tensor;
use ucf_forge::objectives::{self, LossComponents, LossReport, LossWeights};
use ucf_forge::synthforge::{self, Dataset, Split, SynthSpec};
use ucf_forge::trainer::{self, TrainConfig, TrainState};
use ucf_forge::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Validation { .. } | Error::Parse { .. } | Error::Shape(_) | Error::Config(_) => {
            PyValueError::new_err(err.to_string())
        }
        Error::Io { .. } | Error::NotFound(_) | Error::Image { .. } | Error::Checkpoint(_) => {
            PyIOError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(&shape, data).map_err(to_py)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn report_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ce_common", r.ce_common)?;
    d.set_item("ce_specific", r.ce_specific)?;
    d.set_item("reconstruction", r.reconstruction)?;
    d.set_item("contrastive", r.contrastive)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

/// A labelled image corpus: synthetic or scanned from disk.
#[pyclass(module = "ucf_forge_py")]
struct Corpus {
    inner: Dataset,
}

#[pymethods]
impl Corpus {
    /// Generate the synthetic corpus described by a TOML spec.
    #[staticmethod]
    fn generate(spec_toml: &str) -> PyResult<Self> {
        let spec = SynthSpec::from_toml(spec_toml).map_err(to_py)?;
        Ok(Corpus {
            inner: synthforge::generate_synthetic_corpus(&spec).map_err(to_py)?,
        })
    }

    /// Scan a corpus directory (`real/` plus one directory per method).
    #[staticmethod]
    #[pyo3(signature = (root, resize=None))]
    fn load(root: PathBuf, resize: Option<usize>) -> PyResult<Self> {
        Ok(Corpus {
            inner: Dataset::load(&root, resize).map_err(to_py)?,
        })
    }

    fn write(&self, root: PathBuf) -> PyResult<()> {
        self.inner.write(&root).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Method names; index 0 is always `real`.
    fn vocabulary(&self) -> Vec<String> {
        self.inner.manifest.method_vocabulary.clone()
    }

    fn sample_ids(&self) -> Vec<String> {
        self.inner.manifest.samples.iter().map(|s| s.sample_id.clone()).collect()
    }

    /// Binary labels: 0 real, 1 fake.
    fn labels(&self) -> Vec<usize> {
        self.inner.manifest.samples.iter().map(|s| s.y).collect()
    }

    fn method_labels(&self) -> Vec<usize> {
        self.inner.manifest.samples.iter().map(|s| s.y_prime).collect()
    }

    fn split_indices(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.manifest.split_indices(parse(split)?))
    }

    /// Image `i` as `(flat values in [0, 1], (3, h, w))`.
    fn image(&self, i: usize) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range for {} images", self.inner.len())));
        }
        let t = self.inner.image(i);
        let s = t.shape();
        Ok((t.data().to_vec(), (s[0], s[1], s[2])))
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(n={}, methods={:?})",
            self.inner.len(),
            &self.inner.manifest.method_vocabulary[1..]
        )
    }
}

/// Model, optimizer and sampling state of one training run.
#[pyclass(module = "ucf_forge_py")]
struct Trainer {
    state: TrainState,
}

#[pymethods]
impl Trainer {
    /// Fresh run from a TOML config (defaults when omitted) for a corpus with `n_classes` labels.
    #[new]
    #[pyo3(signature = (n_classes, config_toml=None))]
    fn new(n_classes: usize, config_toml: Option<&str>) -> PyResult<Self> {
        let config = match config_toml {
            Some(text) => TrainConfig::from_toml(text).map_err(to_py)?,
            None => TrainConfig::default(),
        };
        Ok(Trainer {
            state: TrainState::new(config, n_classes).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        Ok(Trainer {
            state: trainer::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.state, &path).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    /// The resolved configuration as TOML.
    fn config_toml(&self) -> String {
        self.state.config.to_toml()
    }

    /// Run `n` more optimization steps; returns one loss dict per step.
    fn train<'py>(&mut self, py: Python<'py>, corpus: &Corpus, n: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.state.config.steps = self.state.step + n;
        let records = trainer::train_from(&mut self.state, &corpus.inner, None).map_err(to_py)?;
        records.iter().map(|r| report_dict(py, &r.report)).collect()
    }

    /// Fake probabilities for the samples at `indices`.
    fn detect(&self, corpus: &Corpus, indices: Vec<usize>) -> PyResult<Vec<f32>> {
        let x = corpus.inner.batch(&indices).map_err(to_py)?;
        self.state.model.detect(&x).map_err(to_py)
    }

    /// AUC of `detect` on a split, optionally restricted to some fake methods.
    #[pyo3(signature = (corpus, split="test", methods=Vec::new()))]
    fn evaluate(&self, corpus: &Corpus, split: &str, methods: Vec<String>) -> PyResult<f64> {
        let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
        let (report, _) = evalkit::evaluate(&self.state.model, &corpus.inner, parse(split)?, &methods, "corpus")
            .map_err(to_py)?;
        Ok(report.auc_common)
    }

    /// Held-out AUC of a logistic probe on frozen pooled features (`specific`, `common`, `whole`, `content`).
    #[pyo3(signature = (corpus, kind, methods=Vec::new()))]
    fn probe(&self, corpus: &Corpus, kind: &str, methods: Vec<String>) -> PyResult<f64> {
        let kind: FeatureKind = parse(kind)?;
        let m = &corpus.inner.manifest;
        let train_idx = m.split_indices(Split::Train);
        let test_idx = if methods.is_empty() {
            m.split_indices(Split::Test)
        } else {
            let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
            m.indices_for_methods(Split::Test, &methods).map_err(to_py)?
        };
        evalkit::probe_features(&self.state.model, &corpus.inner, kind, &train_idx, &test_idx).map_err(to_py)
    }

    /// Write pooled features of a split as TSV; returns the row count.
    #[pyo3(signature = (corpus, path, split="test"))]
    fn export_features(&self, corpus: &Corpus, path: PathBuf, split: &str) -> PyResult<usize> {
        let idx = corpus.inner.manifest.split_indices(parse(split)?);
        evalkit::export_features(&self.state.model, &corpus.inner, &idx, &path).map_err(to_py)
    }
}

/// Rank AUC with tied scores counted as half a win.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<usize>) -> PyResult<f64> {
    evalkit::auc(&scores, &labels).map_err(to_py)
}

/// Adaptive instance normalization of `content` to the channel statistics of `fingerprint`.
#[pyfunction]
fn adain(
    content: Vec<f32>,
    content_shape: Vec<usize>,
    fingerprint: Vec<f32>,
    fingerprint_shape: Vec<usize>,
) -> PyResult<Vec<f32>> {
    let out = disentangler::adain(&tensor(content, content_shape)?, &tensor(fingerprint, fingerprint_shape)?)
        .map_err(to_py)?;
    Ok(out.data().to_vec())
}

/// Weighted sum of the four loss terms; weights default to the training defaults.
#[pyfunction]
#[pyo3(signature = (ce_common, ce_specific, reconstruction, contrastive, lambda_1=0.1, lambda_2=0.3, lambda_3=0.05))]
fn total_loss<'py>(
    py: Python<'py>,
    ce_common: f64,
    ce_specific: f64,
    reconstruction: f64,
    contrastive: f64,
    lambda_1: f64,
    lambda_2: f64,
    lambda_3: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let weights = LossWeights {
        lambda_1,
        lambda_2,
        lambda_3,
        ..LossWeights::default()
    };
    let report = objectives::total_loss(
        LossComponents {
            ce_common,
            ce_specific,
            reconstruction,
            contrastive,
        },
        &weights,
    )
    .map_err(to_py)?;
    report_dict(py, &report)
}

#[pymodule]
fn ucf_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(adain, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add("LABEL_REAL", ucf_forge::LABEL_REAL)?;
    m.add("LABEL_FAKE", ucf_forge::LABEL_FAKE)?;
    Ok(())
}
