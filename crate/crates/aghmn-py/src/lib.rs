//! Python bindings: model training, evaluation, prediction, checkpoint IO,
//! synthetic corpus generation, and the gradient-check harness.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use aghmn::checkpoint::{load_checkpoint, save_checkpoint};
use aghmn::data::{
    build_vocab, generate_synthetic, load_conversations, random_embeddings, save_conversations,
    tokenize, Conversation, Utterance,
};
use aghmn::error::Error;
use aghmn::gradcheck;
use aghmn::model::{ModelConfig, StepTrace};
use aghmn::train::{evaluate, fit, MetricsReport, TrainConfig};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Contract(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn report_dict<'py>(py: Python<'py>, report: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", report.weighted_acc)?;
    d.set_item("weighted_f1", report.weighted_f1)?;
    d.set_item("macro_f1", report.macro_f1)?;
    d.set_item("per_class_acc", report.per_class_acc.clone())?;
    d.set_item("per_class_f1", report.per_class_f1.clone())?;
    d.set_item("support", report.support.clone())?;
    d.set_item("total", report.total)?;
    d.set_item("correct", report.correct)?;
    Ok(d)
}

/// A trained conversation emotion model.
#[pyclass]
struct Model {
    inner: aghmn::model::Model,
    labels: Vec<String>,
}

#[pymethods]
impl Model {
    /// Trains a model on a JSONL corpus and returns it. Without `val_path`,
    /// a seeded 80:20 split of the training conversations is used.
    #[staticmethod]
    #[pyo3(signature = (
        train_path, labels, val_path = None, reader = "bigru", fusion = "unif",
        summarizer = "agru", d_w = 16, d1 = 32, k = 5, dropout = 0.3,
        lr0 = 5e-4, max_epochs = 30, patience = 10, seed = 42
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        train_path: &str,
        labels: Vec<String>,
        val_path: Option<&str>,
        reader: &str,
        fusion: &str,
        summarizer: &str,
        d_w: usize,
        d1: usize,
        k: usize,
        dropout: f64,
        lr0: f64,
        max_epochs: usize,
        patience: usize,
        seed: u64,
    ) -> PyResult<Model> {
        let mut cfg = aghmn::cli::RunConfig::default_long();
        cfg.reader = reader.parse().map_err(to_py_err)?;
        cfg.fusion = fusion.parse().map_err(to_py_err)?;
        cfg.summarizer = summarizer.parse().map_err(to_py_err)?;
        cfg.d_w = d_w;
        cfg.d1 = d1;
        cfg.k = k;
        cfg.dropout = dropout;
        cfg.lr0 = lr0;
        cfg.max_epochs = max_epochs;
        cfg.patience = patience;
        cfg.seed = seed;
        cfg.labels = labels.clone();
        cfg.train_path = Some(PathBuf::from(train_path));
        cfg.val_path = val_path.map(PathBuf::from);

        let train_set = load_conversations(Path::new(train_path), &labels).map_err(to_py_err)?;
        if train_set.is_empty() {
            return Err(PyValueError::new_err("training corpus is empty"));
        }
        let (train_set, val_set) = match val_path {
            Some(path) => {
                let val = load_conversations(Path::new(path), &labels).map_err(to_py_err)?;
                (train_set, val)
            }
            None => {
                let cut = (train_set.len() * 4 / 5).max(1);
                let val = if cut == train_set.len() {
                    train_set.clone()
                } else {
                    train_set[cut..].to_vec()
                };
                (train_set[..cut].to_vec(), val)
            }
        };

        let vocab = build_vocab(&train_set, 1);
        let table = random_embeddings(&vocab, d_w, seed);
        let model_config = ModelConfig {
            d_w,
            d1,
            k,
            n_classes: labels.len(),
            reader: cfg.reader,
            fusion: cfg.fusion,
            summarizer: cfg.summarizer,
            dropout_p: dropout,
        };
        let mut inner =
            aghmn::model::Model::new(model_config, vocab, table.matrix, seed).map_err(to_py_err)?;
        let train_cfg = TrainConfig {
            lr0,
            clip_norm: cfg.clip_norm,
            decay: cfg.decay,
            patience,
            max_epochs,
            seed,
        };
        let result = fit(&mut inner, &train_set, &val_set, &train_cfg).map_err(to_py_err)?;
        inner.params = result.best_params;
        Ok(Model { inner, labels })
    }

    /// Loads a checkpoint written by `save` or the CLI.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let (inner, labels) = load_checkpoint(Path::new(path)).map_err(to_py_err)?;
        Ok(Model { inner, labels })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(Path::new(path), &self.inner, &self.labels).map_err(to_py_err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    /// Evaluates the model on a JSONL corpus, returning the metric suite.
    fn evaluate<'py>(&self, py: Python<'py>, corpus_path: &str) -> PyResult<Bound<'py, PyDict>> {
        let dataset =
            load_conversations(Path::new(corpus_path), &self.labels).map_err(to_py_err)?;
        let report = evaluate(&self.inner, &dataset).map_err(to_py_err)?;
        report_dict(py, &report)
    }

    /// Runs one conversation given as `[(speaker, text), ...]` and returns a
    /// record per utterance with the predicted label, the class
    /// distribution, and the attention weights over the memory bank.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        conversation: Vec<(String, String)>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        if conversation.is_empty() {
            return Err(PyValueError::new_err("conversation is empty"));
        }
        let utterances: Vec<Utterance> = conversation
            .into_iter()
            .map(|(speaker, text)| {
                let tokens = tokenize(&text);
                if tokens.is_empty() {
                    return Err(PyValueError::new_err(format!(
                        "utterance `{text}` is empty after tokenization"
                    )));
                }
                Ok(Utterance { speaker, tokens, label: 0 })
            })
            .collect::<PyResult<_>>()?;
        let conv = Conversation { id: "py".to_string(), utterances };
        let traces: Vec<StepTrace> = self.inner.run_conversation(&conv).map_err(to_py_err)?;
        traces
            .into_iter()
            .map(|trace| {
                let d = PyDict::new(py);
                d.set_item("t", trace.t)?;
                d.set_item("pred", self.labels[trace.pred].clone())?;
                d.set_item("probs", trace.probs)?;
                d.set_item("weights", trace.weights)?;
                Ok(d)
            })
            .collect()
    }
}

/// Worst relative error of analytic vs finite-difference gradients for one
/// variant combination on the built-in tiny fixture.
#[pyfunction]
#[pyo3(signature = (reader = "bigru", fusion = "unif", summarizer = "agru", eps = 1e-5))]
fn grad_check(reader: &str, fusion: &str, summarizer: &str, eps: f64) -> PyResult<f64> {
    let row = gradcheck::check_variant(
        reader.parse().map_err(to_py_err)?,
        fusion.parse().map_err(to_py_err)?,
        summarizer.parse().map_err(to_py_err)?,
        eps,
        0.0,
    )
    .map_err(to_py_err)?;
    Ok(row.worst_rel_err)
}

/// Generates a synthetic contextual-emotion corpus and writes it as JSONL.
/// Returns a summary dict including the label list.
#[pyfunction]
#[pyo3(signature = (path, n = 120, classes = 4, carry = 0.3, min_len = 4, max_len = 10, seed = 7))]
#[allow(clippy::too_many_arguments)]
fn generate_corpus<'py>(
    py: Python<'py>,
    path: &str,
    n: usize,
    classes: usize,
    carry: f64,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let (convs, spec) =
        generate_synthetic(n, (min_len, max_len), classes, carry, seed).map_err(to_py_err)?;
    save_conversations(Path::new(path), &convs, &spec.labels).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("n_conversations", spec.n_conversations)?;
    d.set_item("n_utterances", spec.n_utterances)?;
    d.set_item("carried_count", spec.carried_count)?;
    d.set_item("labels", spec.labels)?;
    Ok(d)
}

#[pymodule]
fn aghmn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    Ok(())
}
