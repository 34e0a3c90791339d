//! Python bindings. Token sequences cross the boundary as lists of token
//! strings (`"Bar"`, `"NoteOnPitch_60"`, ...), scores as `Score` objects.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use fgdisc::metrics;
use fgdisc::midi::{self, NoteEvent};
use fgdisc::model::SamplingConfig;
use fgdisc::positional;
use fgdisc::remi::{self, CodecConfig, Token, TokenSequence, Vocabulary};
use fgdisc::train;
use fgdisc::views;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_tokens(tokens: Vec<String>) -> PyResult<TokenSequence> {
    tokens.iter().map(|t| t.parse::<Token>().map_err(value_err)).collect()
}

fn token_strings(seq: &TokenSequence) -> Vec<String> {
    seq.iter().map(|t| t.to_string()).collect()
}

/// A list of notes with a tick resolution, readable from and writable to MIDI.
#[pyclass(name = "Score", module = "fgdisc", from_py_object)]
#[derive(Clone)]
struct PyScore {
    inner: midi::Score,
}

#[pymethods]
impl PyScore {
    /// Notes are `(onset_ticks, duration_ticks, pitch, velocity)` tuples.
    #[new]
    #[pyo3(signature = (notes, ticks_per_quarter = 480))]
    fn new(notes: Vec<(u64, u64, u8, u8)>, ticks_per_quarter: u16) -> Self {
        let notes = notes.into_iter().map(|(o, d, p, v)| NoteEvent::new(o, d, p, v)).collect();
        Self { inner: midi::Score::with_notes(ticks_per_quarter, notes) }
    }

    #[staticmethod]
    fn from_midi(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: midi::parse_smf(&bytes).map_err(value_err)? })
    }

    fn to_midi(&self, path: PathBuf) -> PyResult<()> {
        let bytes = midi::write_smf(&self.inner).map_err(value_err)?;
        std::fs::write(path, bytes).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn notes(&self) -> Vec<(u64, u64, u8, u8)> {
        self.inner.notes.iter().map(|n| (n.onset_ticks, n.duration_ticks, n.pitch, n.velocity)).collect()
    }

    #[getter]
    fn ticks_per_quarter(&self) -> u16 {
        self.inner.ticks_per_quarter
    }

    /// REMI tokens of the score.
    fn encode(&self) -> PyResult<Vec<String>> {
        Ok(token_strings(&remi::encode(&self.inner, &CodecConfig::default()).map_err(value_err)?))
    }

    #[staticmethod]
    fn decode(tokens: Vec<String>) -> PyResult<Self> {
        let seq = parse_tokens(tokens)?;
        Ok(Self { inner: remi::decode(&seq, &CodecConfig::default()).map_err(value_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.notes.len()
    }
}

/// Token ids under the default vocabulary.
#[pyfunction]
fn tokens_to_ids(tokens: Vec<String>) -> PyResult<Vec<u32>> {
    let vocab = Vocabulary::new(&CodecConfig::default()).map_err(value_err)?;
    vocab.encode_ids(&parse_tokens(tokens)?).map_err(value_err)
}

#[pyfunction]
fn ids_to_tokens(ids: Vec<u32>) -> PyResult<Vec<String>> {
    let vocab = Vocabulary::new(&CodecConfig::default()).map_err(value_err)?;
    Ok(token_strings(&vocab.decode_ids(&ids).map_err(value_err)?))
}

#[pyfunction]
fn vocab_size() -> PyResult<usize> {
    Ok(Vocabulary::new(&CodecConfig::default()).map_err(value_err)?.len())
}

/// Raises `ValueError` if the tokens break the canonical grammar.
#[pyfunction]
fn validate(tokens: Vec<String>) -> PyResult<()> {
    remi::validate(&parse_tokens(tokens)?, &CodecConfig::default()).map_err(value_err)
}

/// `"melody"` masks velocities, `"rhythm"` masks pitches.
#[pyfunction]
fn decouple(tokens: Vec<String>, view: &str) -> PyResult<Vec<String>> {
    let kind: views::ViewKind = view.parse().map_err(PyValueError::new_err)?;
    Ok(token_strings(&views::view(&parse_tokens(tokens)?, kind).seq))
}

#[pyfunction]
fn pitch_augment(tokens: Vec<String>, offset: i32) -> PyResult<Vec<String>> {
    Ok(token_strings(&views::pitch_augment(&parse_tokens(tokens)?, offset).map_err(value_err)?))
}

#[pyfunction]
fn bar_relative_positions(tokens: Vec<String>) -> PyResult<Vec<usize>> {
    Ok(positional::bar_relative_positions(&parse_tokens(tokens)?))
}

#[pyfunction]
fn pitch_class_entropy(score: &PyScore) -> PyResult<f64> {
    metrics::pitch_class_entropy(&score.inner).map_err(value_err)
}

#[pyfunction]
fn scale_consistency(score: &PyScore) -> PyResult<f64> {
    metrics::scale_consistency(&score.inner).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (score, positions_per_bar = 16))]
fn groove_consistency(score: &PyScore, positions_per_bar: usize) -> PyResult<f64> {
    metrics::groove_consistency(&score.inner, positions_per_bar).map_err(value_err)
}

/// `KL(real ‖ gen)` of two smoothed histograms.
#[pyfunction]
fn histogram_divergence(gen: Vec<f64>, real: Vec<f64>) -> PyResult<f64> {
    metrics::histogram_divergence(&gen, &real).map_err(value_err)
}

#[pyfunction]
fn feature_cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    metrics::feature_cosine_similarity(&u, &v).map_err(value_err)
}

/// Full report as a JSON string.
#[pyfunction]
fn evaluate_corpus(generated: Vec<PyScore>, real: Vec<PyScore>) -> PyResult<String> {
    let g: Vec<_> = generated.into_iter().map(|s| s.inner).collect();
    let r: Vec<_> = real.into_iter().map(|s| s.inner).collect();
    Ok(metrics::evaluate_corpus(&g, &r, &metrics::EvalConfig::default()).map_err(value_err)?.to_json())
}

/// Generator, discriminators and optimizer state of a training run.
#[pyclass(name = "Trainer", module = "fgdisc", unsendable)]
struct PyTrainer {
    state: train::TrainState,
    data: Option<train::Dataset>,
}

#[pymethods]
impl PyTrainer {
    /// `config` is a JSON object overriding fields of the named preset.
    #[new]
    #[pyo3(signature = (preset = "toy", config = None))]
    fn new(preset: &str, config: Option<&str>) -> PyResult<Self> {
        let base = train::TrainingConfig::preset(preset).ok_or_else(|| value_err(format!("unknown preset {preset}")))?;
        let cfg = match config {
            Some(json) => {
                let mut value = serde_json::to_value(&base).map_err(value_err)?;
                let patch: serde_json::Value = serde_json::from_str(json).map_err(value_err)?;
                merge(&mut value, &patch);
                serde_json::from_value(value).map_err(value_err)?
            }
            None => base,
        };
        Ok(Self { state: train::TrainState::new(cfg).map_err(value_err)?, data: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { state: train::load_checkpoint(&path).map_err(value_err)?, data: None })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&self.state, &path).map_err(value_err)
    }

    /// Sets the training pieces (lists of token strings).
    fn set_data(&mut self, pieces: Vec<Vec<String>>) -> PyResult<()> {
        let seqs = pieces.into_iter().map(parse_tokens).collect::<PyResult<Vec<_>>>()?;
        let cfg = &self.state.config;
        self.data = Some(train::Dataset::from_sequences(&seqs, cfg.cond_bars, &cfg.codec).map_err(value_err)?);
        Ok(())
    }

    /// Runs `phase` (`"nll"`, `"disc"` or `"adv"`) for at most `steps`
    /// steps; returns the number taken.
    #[pyo3(signature = (phase, steps = None))]
    fn run(&mut self, phase: &str, steps: Option<u64>) -> PyResult<u64> {
        let data = self.data.as_ref().ok_or_else(|| value_err("call set_data first"))?;
        let phase: train::Phase = phase.parse().map_err(PyValueError::new_err)?;
        let done = match phase {
            train::Phase::Nll => train::nll_pretrain(&mut self.state, data, steps),
            train::Phase::Disc => train::disc_pretrain(&mut self.state, data, steps),
            train::Phase::Adv => train::run_adversarial(&mut self.state, data, steps),
        };
        done.map_err(value_err)
    }

    /// Metric log as a list of dicts, one per step.
    fn log(&self) -> PyResult<String> {
        serde_json::to_string(&self.state.log).map_err(value_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[pyo3(signature = (condition, temperature = 1.0, top_k = 0, seed = 0, max_new_tokens = 512))]
    fn generate(&self, condition: Vec<String>, temperature: f64, top_k: usize, seed: u64, max_new_tokens: usize) -> PyResult<Vec<String>> {
        let cond = parse_tokens(condition)?;
        let sampling = SamplingConfig { temperature, top_k, max_new_tokens };
        Ok(token_strings(&self.state.generator.generate(&cond, &sampling, seed).map_err(value_err)?))
    }

    /// Teacher-forced NLL of `target` given `condition`.
    fn nll(&self, condition: Vec<String>, target: Vec<String>) -> PyResult<f64> {
        let loss = self.state.generator.nll(&parse_tokens(condition)?, &parse_tokens(target)?).map_err(value_err)?;
        Ok(loss.item())
    }
}

fn merge(base: &mut serde_json::Value, top: &serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

#[pymodule]
#[pyo3(name = "fgdisc")]
fn fgdisc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScore>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(tokens_to_ids, m)?)?;
    m.add_function(wrap_pyfunction!(ids_to_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(vocab_size, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(decouple, m)?)?;
    m.add_function(wrap_pyfunction!(pitch_augment, m)?)?;
    m.add_function(wrap_pyfunction!(bar_relative_positions, m)?)?;
    m.add_function(wrap_pyfunction!(pitch_class_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(scale_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(groove_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(feature_cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_corpus, m)?)?;
    Ok(())
}
