//! Python bindings: vocabulary, training, checkpoints, latent tools, metrics.

use std::path::PathBuf;

use mlvae::corpus::{self, IngestReport, Paragraph, Vocabulary};
use mlvae::latent::{self, GaussianParams};
use mlvae::metrics;
use mlvae::trainer::{self, Example, LoadedModel, ModelConfig, Precision, TrainOptions};
use mlvae::workbench::{self, CodeMode, GenOptions};
use mlvae::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

fn segment_all(lines: &[String]) -> PyResult<Vec<Vec<Vec<String>>>> {
    corpus::parse_corpus(&lines.join("\n"), &mut IngestReport::default()).map_err(py_err)
}

/// Token-to-id table with the reserved `PAD`, `UNK` and `END` entries.
#[pyclass(name = "Vocabulary", from_py_object)]
#[derive(Clone)]
struct PyVocabulary(Vocabulary);

#[pymethods]
impl PyVocabulary {
    /// Builds a vocabulary from raw document lines.
    #[staticmethod]
    #[pyo3(signature = (lines, max_size = 20000, min_freq = 1))]
    fn build(lines: Vec<String>, max_size: usize, min_freq: usize) -> PyResult<Self> {
        let docs = segment_all(&lines)?;
        Vocabulary::from_documents(&docs, max_size, min_freq).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Vocabulary::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    /// Sentence-split ids of one document line.
    fn encode(&self, line: &str) -> PyResult<Vec<Vec<usize>>> {
        let doc = corpus::segment(line).map_err(py_err)?;
        Ok(self.0.encode(&doc).map_err(py_err)?.sentences().to_vec())
    }

    fn render(&self, sentences: Vec<Vec<usize>>) -> String {
        self.0.render(&sentences)
    }

    fn id(&self, token: &str) -> usize {
        self.0.id(token)
    }

    fn token(&self, id: usize) -> PyResult<String> {
        self.0.token(id).map(str::to_string).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A trained model in 64-bit precision.
#[pyclass(name = "Model")]
struct PyModel(LoadedModel);

impl PyModel {
    fn paragraphs(&self, lines: &[String]) -> PyResult<Vec<Paragraph>> {
        let vocab = self.0.vocab().map_err(py_err)?;
        let mut report = IngestReport::default();
        segment_all(lines)?
            .iter()
            .map(|d| Ok(vocab.encode(d)?.truncated(self.0.config.max_sentences, self.0.config.max_words, &mut report)))
            .collect::<mlvae::Result<_>>()
            .map_err(py_err)
    }

    fn paragraph(&self, line: &str) -> PyResult<Paragraph> {
        Ok(self.paragraphs(&[line.to_string()])?.remove(0))
    }

    fn opts(&self, sentences: Option<usize>, max_words: Option<usize>) -> GenOptions {
        let d = GenOptions::for_model(&self.0);
        GenOptions {
            sentences: sentences.unwrap_or(d.sentences),
            max_words: max_words.unwrap_or(d.max_words),
        }
    }

    fn text(&self, p: &mlvae::decoder::DecodedParagraph) -> PyResult<String> {
        self.0.render(p).map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        LoadedModel::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_model(&path, &self.0.store, &self.0.config, self.0.vocab.as_ref()).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.0.model.variant.to_string()
    }

    /// The configuration as `key = value` lines.
    #[getter]
    fn config(&self) -> String {
        self.0.config.to_string()
    }

    #[getter]
    fn vocabulary(&self) -> PyResult<PyVocabulary> {
        self.0.vocab().cloned().map(PyVocabulary).map_err(py_err)
    }

    /// Reconstruction, KL and perplexity (bound) on document lines.
    fn evaluate(&self, lines: Vec<String>) -> PyResult<Vec<(String, f64)>> {
        let docs: Vec<Example> = self.paragraphs(&lines)?.into_iter().map(Example::document).collect();
        let r = trainer::evaluate(&self.0.store, &self.0.config, &self.0.model, &docs, self.0.config.seed).map_err(py_err)?;
        Ok(vec![
            ("nll".to_string(), r.nll),
            ("kl".to_string(), r.kl),
            ("ppl".to_string(), r.ppl),
            ("bound".to_string(), if r.bound { 1.0 } else { 0.0 }),
        ])
    }

    #[pyo3(signature = (count, seed = 0, sentences = None, max_words = None))]
    fn sample(&self, count: usize, seed: u64, sentences: Option<usize>, max_words: Option<usize>) -> PyResult<Vec<String>> {
        let out = workbench::sample_unconditional(&self.0, count, seed, self.opts(sentences, max_words)).map_err(py_err)?;
        out.iter().map(|p| self.text(p)).collect()
    }

    /// `steps + 2` evenly spaced codes between two prior draws, decoded.
    #[pyo3(signature = (seed_a, seed_b, steps, sentences = None, max_words = None))]
    fn interpolate(&self, seed_a: u64, seed_b: u64, steps: usize, sentences: Option<usize>, max_words: Option<usize>) -> PyResult<Vec<(Vec<f64>, String)>> {
        let out = workbench::interpolate(&self.0, seed_a, seed_b, steps, self.opts(sentences, max_words)).map_err(py_err)?;
        out.into_iter().map(|(z, p)| Ok((z, self.text(&p)?))).collect()
    }

    /// Posterior mean of the bottom latent, or one draw when `seed` is given.
    #[pyo3(signature = (line, seed = None))]
    fn code(&self, line: &str, seed: Option<u64>) -> PyResult<Vec<f64>> {
        let mode = seed.map_or(CodeMode::Mean, |seed| CodeMode::Sample { seed });
        self.0.code(&self.paragraph(line)?, mode).map_err(py_err)
    }

    #[pyo3(signature = (z, sentences = None, max_words = None))]
    fn decode(&self, z: Vec<f64>, sentences: Option<usize>, max_words: Option<usize>) -> PyResult<String> {
        let p = self.0.decode(&z, self.opts(sentences, max_words)).map_err(py_err)?;
        self.text(&p)
    }

    #[pyo3(signature = (line, sentences = None, max_words = None))]
    fn reconstruct(&self, line: &str, sentences: Option<usize>, max_words: Option<usize>) -> PyResult<String> {
        let p = workbench::reconstruct(&self.0, &self.paragraph(line)?, self.opts(sentences, max_words)).map_err(py_err)?;
        self.text(&p)
    }

    #[pyo3(signature = (positive, negative, seed = None))]
    fn attribute_vector(&self, positive: Vec<String>, negative: Vec<String>, seed: Option<u64>) -> PyResult<Vec<f64>> {
        let pos = self.paragraphs(&positive)?;
        let neg = self.paragraphs(&negative)?;
        workbench::attribute_vector(&self.0, &pos, &neg, seed).map_err(py_err)
    }

    #[pyo3(signature = (line, attribute, sentences = None, max_words = None))]
    fn transfer(&self, line: &str, attribute: Vec<f64>, sentences: Option<usize>, max_words: Option<usize>) -> PyResult<String> {
        let (_, p) = workbench::attribute_transfer(&self.0, &self.paragraph(line)?, &attribute, self.opts(sentences, max_words)).map_err(py_err)?;
        self.text(&p)
    }

    /// Generation from a title through a paired model's inference network.
    #[pyo3(signature = (title, seed = None, sentences = None, max_words = None))]
    fn generate(&self, title: &str, seed: Option<u64>, sentences: Option<usize>, max_words: Option<usize>) -> PyResult<String> {
        let mode = seed.map_or(CodeMode::Mean, |seed| CodeMode::Sample { seed });
        let p = workbench::conditional_generate(&self.0, &self.paragraph(title)?, mode, self.opts(sentences, max_words)).map_err(py_err)?;
        self.text(&p)
    }

    /// Posterior means as CSV text; `labels` must match `lines` when given.
    #[pyo3(signature = (lines, labels = None))]
    fn latents_csv(&self, lines: Vec<String>, labels: Option<Vec<String>>) -> PyResult<String> {
        let paras = self.paragraphs(&lines)?;
        let labels = match labels {
            Some(l) if l.len() != paras.len() => return Err(PyValueError::new_err("labels and lines differ in length")),
            Some(l) => l.into_iter().map(Some).collect(),
            None => vec![None; paras.len()],
        };
        let docs: Vec<_> = labels.into_iter().zip(paras).collect();
        workbench::latents_csv(&self.0, &docs).map_err(py_err)
    }
}

/// Trains a model on document lines.
///
/// `config` holds `key = value` overrides as strings. Returns the model and
/// the training log lines.
#[pyfunction]
#[pyo3(signature = (lines, config = Vec::new(), checkpoint = None, vocabulary = None))]
fn train(
    py: Python<'_>,
    lines: Vec<String>,
    config: Vec<(String, String)>,
    checkpoint: Option<PathBuf>,
    vocabulary: Option<PyVocabulary>,
) -> PyResult<(PyModel, Vec<String>)> {
    let mut cfg = ModelConfig::default();
    for (k, v) in &config {
        cfg.set(k, v).map_err(py_err)?;
    }
    let docs = segment_all(&lines)?;
    let vocab = match vocabulary {
        Some(v) => v.0,
        None => Vocabulary::from_documents(&docs, cfg.vocab_size, 1).map_err(py_err)?,
    };
    cfg.vocab_size = vocab.len();
    cfg.validate().map_err(py_err)?;
    let mut report = IngestReport::default();
    let examples = docs
        .iter()
        .map(|d| Ok(Example::document(vocab.encode(d)?.truncated(cfg.max_sentences, cfg.max_words, &mut report))))
        .collect::<mlvae::Result<Vec<_>>>()
        .map_err(py_err)?;
    let opts = TrainOptions {
        checkpoint,
        heldout: None,
        vocab: Some(vocab.clone()),
    };
    py.detach(|| {
        let mut log = Vec::new();
        let mut push = |l: &trainer::LogLine| log.push(l.to_string());
        let model = match cfg.precision {
            Precision::F32 => trainer::train::<f32>(cfg, &examples, &opts, &mut push).map(|t| LoadedModel::from_trainer(&t, Some(vocab))),
            Precision::F64 => trainer::train::<f64>(cfg, &examples, &opts, &mut push).map(|t| LoadedModel::from_trainer(&t, Some(vocab))),
        };
        model.map(|m| (PyModel(m), log)).map_err(py_err)
    })
}

fn gaussian(mean: Vec<f64>, log_var: Vec<f64>) -> PyResult<GaussianParams> {
    GaussianParams::new(mean, log_var).map_err(py_err)
}

/// `KL(N(mean, exp(log_var)) || N(0, I))`.
#[pyfunction]
fn kl_standard(mean: Vec<f64>, log_var: Vec<f64>) -> PyResult<f64> {
    Ok(latent::kl_standard(&gaussian(mean, log_var)?))
}

/// `KL(q || p)` for diagonal Gaussians given as `(mean, log_var)` pairs.
#[pyfunction]
fn kl_gaussians(q: (Vec<f64>, Vec<f64>), p: (Vec<f64>, Vec<f64>)) -> PyResult<f64> {
    latent::kl_gaussians(&gaussian(q.0, q.1)?, &gaussian(p.0, p.1)?).map_err(py_err)
}

#[pyfunction]
fn bleu(candidate: String, references: Vec<String>, n: usize) -> PyResult<f64> {
    let c = tokens(&[candidate]).remove(0);
    metrics::bleu_n(&c, &tokens(&references), n).map_err(py_err)
}

#[pyfunction]
fn self_bleu(samples: Vec<String>, n: usize) -> PyResult<f64> {
    metrics::self_bleu(&tokens(&samples), n).map_err(py_err)
}

#[pyfunction]
fn unique_ngrams(samples: Vec<String>, n: usize) -> PyResult<f64> {
    metrics::unique_ngrams(&tokens(&samples), n).map_err(py_err)
}

#[pyfunction]
fn ngram_entropy(samples: Vec<String>, n: usize) -> PyResult<f64> {
    metrics::ngram_entropy(&tokens(&samples), n).map_err(py_err)
}

/// The full metric report as `(name, value)` pairs.
#[pyfunction]
#[pyo3(signature = (samples, references = None))]
fn generation_report(samples: Vec<String>, references: Option<Vec<String>>) -> PyResult<Vec<(String, f64)>> {
    let refs = references.map(|r| tokens(&r));
    let r = metrics::generation_report(&tokens(&samples), refs.as_deref()).map_err(py_err)?;
    Ok(r.entries)
}

#[pymodule(name = "mlvae")]
pub fn mlvae_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(kl_standard, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(unique_ngrams, m)?)?;
    m.add_function(wrap_pyfunction!(ngram_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(generation_report, m)?)?;
    Ok(())
}
