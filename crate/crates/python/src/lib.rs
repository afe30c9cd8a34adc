use std::collections::BTreeMap;

use ::bachprop as bp;
use bp::checkpoint::{load_checkpoint, save_checkpoint};
use bp::generate::{generate_score, SamplerConfig};
use bp::metrics;
use bp::model::{Architecture, NoteModel, Variant};
use bp::pipeline::{evaluate_corpora, score_from_midi, EvalConfig};
use bp::score::{build_dictionaries_augmented, build_grid, encode, NoteEvent, DEFAULT_GRID_CAP_QUARTERS};
use bp::train::{sequence_nll, train, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A quantized score: `(dT, T, P)` triples, times in 1/48 quarter notes.
#[pyclass(name = "Score", from_py_object)]
#[derive(Clone)]
struct PyScore {
    inner: bp::score::Score,
}

#[pymethods]
impl PyScore {
    #[new]
    #[pyo3(signature = (notes, name = String::new()))]
    fn new(notes: Vec<(u32, u32, u8)>, name: String) -> Self {
        let mut inner = bp::score::Score::from_notes(notes.into_iter().map(|(dt, t, p)| NoteEvent::new(dt, t, p)).collect());
        inner.name = name;
        PyScore { inner }
    }

    #[staticmethod]
    fn from_note_list(text: &str) -> PyResult<Self> {
        Ok(PyScore { inner: bp::score::Score::from_note_list(text).map_err(err)? })
    }

    /// Parses MIDI bytes and quantizes them.
    #[staticmethod]
    #[pyo3(signature = (data, grid_cap_quarters = DEFAULT_GRID_CAP_QUARTERS))]
    fn from_midi(data: &[u8], grid_cap_quarters: u32) -> PyResult<Self> {
        Ok(PyScore { inner: score_from_midi(data, &build_grid(grid_cap_quarters)).map_err(err)? })
    }

    #[pyo3(signature = (division = 48))]
    fn to_midi<'py>(&self, py: Python<'py>, division: u16) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = bp::midi::write_midi(&self.inner, division).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn to_note_list(&self) -> String {
        self.inner.to_note_list()
    }

    #[getter]
    fn notes(&self) -> Vec<(u32, u32, u8)> {
        self.inner.notes.iter().map(|n| (n.dt, n.t, n.p)).collect()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn transposed(&self, offset: i32) -> PyResult<Self> {
        match self.inner.pitch_range() {
            Some((lo, hi)) if i32::from(lo) + offset < 0 || i32::from(hi) + offset > 127 => {
                Err(PyValueError::new_err("transposition leaves the MIDI pitch range"))
            }
            _ => Ok(PyScore { inner: self.inner.transposed(offset) }),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner.notes == other.inner.notes
    }

    fn __repr__(&self) -> String {
        format!("Score(name={:?}, notes={})", self.inner.name, self.inner.len())
    }
}

/// Symbol tables for dT, T and P; the boundary symbol follows each table.
#[pyclass(name = "Dictionaries", from_py_object)]
#[derive(Clone)]
struct PyDictionaries {
    inner: bp::score::Dictionaries,
}

#[pymethods]
impl PyDictionaries {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyDictionaries { inner: bp::score::Dictionaries::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Vocabulary sizes including the boundary symbol.
    #[getter]
    fn sizes(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.sizes();
        (a, b, c)
    }

    /// Index triple of the boundary note that starts every song.
    #[getter]
    fn boundary(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.inner.boundary_note();
        (a, b, c)
    }

    #[getter]
    fn dt(&self) -> Vec<u32> {
        self.inner.dt.clone()
    }

    #[getter]
    fn t(&self) -> Vec<u32> {
        self.inner.t.clone()
    }

    #[getter]
    fn p(&self) -> Vec<u32> {
        self.inner.p.clone()
    }
}

fn scores(list: &[PyScore]) -> Vec<bp::score::Score> {
    list.iter().map(|s| s.inner.clone()).collect()
}

/// Dictionaries covering every song and all its feasible transpositions.
#[pyfunction]
fn build_dictionaries(corpus: Vec<PyScore>) -> PyResult<PyDictionaries> {
    Ok(PyDictionaries { inner: build_dictionaries_augmented(&scores(&corpus)).map_err(err)? })
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: bp::model::Model,
    seed: u64,
}

#[pymethods]
impl PyModel {
    /// `variant` is one of bachprop, indepbp, mlp, polydac. `width` replaces
    /// every layer width (default: the standard sizes).
    #[new]
    #[pyo3(signature = (variant, dictionaries, seed = 0, width = None))]
    fn new(variant: &str, dictionaries: &PyDictionaries, seed: u64, width: Option<usize>) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(err)?;
        let arch = match width {
            Some(w) => Architecture::uniform(variant, w),
            None => Architecture::standard(variant),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = bp::model::Model::with_architecture(arch, &dictionaries.inner, &mut rng).map_err(err)?;
        Ok(PyModel { inner, seed })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let (inner, header) = load_checkpoint(&bytes).map_err(err)?;
        Ok(PyModel { inner, seed: header.seed })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let bytes = save_checkpoint(&self.inner, self.seed, serde_json::Value::Null);
        std::fs::write(path, bytes).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn dictionaries(&self) -> PyDictionaries {
        PyDictionaries { inner: self.inner.dicts.clone() }
    }

    /// Trains in place and returns one dict per epoch.
    #[pyo3(signature = (train_set, valid_set = Vec::new(), epochs = 200, batch_size = 32, trunc_len = 128,
                        learning_rate = 1e-3, augment = true, patience = 10, target_accuracy = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        train_set: Vec<PyScore>,
        valid_set: Vec<PyScore>,
        epochs: usize,
        batch_size: usize,
        trunc_len: usize,
        learning_rate: f64,
        augment: bool,
        patience: usize,
        target_accuracy: Option<f64>,
        seed: u64,
    ) -> PyResult<Vec<BTreeMap<String, Option<f64>>>> {
        let config = TrainConfig {
            batch_size,
            trunc_len,
            max_epochs: epochs,
            patience,
            learning_rate,
            augment,
            target_accuracy,
            seed,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log = train(&mut self.inner, &scores(&train_set), &scores(&valid_set), &config, &mut rng, |_| {})
            .map_err(err)?;
        Ok(log
            .epochs
            .iter()
            .map(|e| {
                let mut row = BTreeMap::new();
                row.insert("epoch".to_string(), Some(e.epoch as f64));
                row.insert("train_nll".to_string(), Some(e.train_nll));
                for (k, name) in ["dt", "t", "p"].iter().enumerate() {
                    row.insert(format!("train_acc_{name}"), Some(e.train_acc[k]));
                    row.insert(format!("val_acc_{name}"), e.val_acc.map(|a| a[k]));
                }
                row.insert("val_nll".to_string(), e.val_nll);
                row
            })
            .collect())
    }

    /// Teacher-forced `(nll, (acc_dt, acc_t, acc_p))` of one song.
    fn sequence_nll(&self, score: &PyScore) -> PyResult<(f64, (f64, f64, f64))> {
        let enc = encode(&score.inner, &self.inner.dicts).map_err(err)?;
        let stats = sequence_nll(&self.inner, &enc).map_err(err)?;
        let [a, b, c] = stats.accuracy();
        Ok((stats.nll(), (a, b, c)))
    }

    /// Next-feature distribution after feeding `history` (index triples,
    /// boundary first) given the known features of the next note.
    fn head_probs(&self, history: Vec<(usize, usize, usize)>, known: Vec<usize>) -> PyResult<Vec<f64>> {
        let mut state = self.inner.initial_state();
        for (a, b, c) in history {
            self.inner.forward_note(&mut state, [a, b, c]).map_err(err)?;
        }
        self.inner.head_probs(&state, &known).map_err(err)
    }

    #[pyo3(signature = (temperature = 1.0, max_notes = 1000, seed = 0))]
    fn generate(&self, temperature: f64, max_notes: usize, seed: u64) -> PyResult<PyScore> {
        let config = SamplerConfig { temperature, max_notes, seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyScore { inner: generate_score(&self.inner, &config, &mut rng).map_err(err)? })
    }
}

#[pyfunction]
fn song_novelty(song: &PyScore, m: usize, reference: Vec<PyScore>) -> PyResult<f64> {
    metrics::song_novelty(&song.inner, m, &scores(&reference)).map_err(err)
}

/// Leave-one-out novelty scores per pattern size.
#[pyfunction]
fn auto_novelty(corpus: Vec<PyScore>, sizes: Vec<usize>) -> PyResult<BTreeMap<usize, Vec<f64>>> {
    let profile = metrics::auto_novelty(&scores(&corpus), &sizes).map_err(err)?;
    Ok(profile.sizes.into_iter().zip(profile.scores).collect())
}

/// Relative frequencies of dT, T, chord intervals and all intervals.
#[pyfunction]
fn local_histograms(corpus: Vec<PyScore>) -> PyResult<BTreeMap<String, BTreeMap<i64, f64>>> {
    let h = metrics::local_histograms(&scores(&corpus)).map_err(err)?;
    Ok(BTreeMap::from([
        ("dt".to_string(), h.dt.frequency),
        ("t".to_string(), h.t.frequency),
        ("intervals_chord".to_string(), h.chord_intervals.frequency),
        ("intervals_all".to_string(), h.all_intervals.frequency),
    ]))
}

/// Total-variation distances between the statistics of two corpora.
#[pyfunction]
#[pyo3(signature = (corpus, reference, pattern_sizes = vec![2, 4, 6], seed = 0))]
fn histogram_distances(
    corpus: Vec<PyScore>,
    reference: Vec<PyScore>,
    pattern_sizes: Vec<usize>,
    seed: u64,
) -> PyResult<BTreeMap<String, f64>> {
    let config = EvalConfig { pattern_sizes, seed, ..EvalConfig::default() };
    let report = evaluate_corpora(&scores(&corpus), &scores(&reference), &config).map_err(err)?;
    Ok(report.distances.into_iter().collect())
}

/// Reproducible four-voice chorale-like songs.
#[pyfunction]
fn synthetic_corpus(count: usize, seed: u64) -> Vec<PyScore> {
    bp::synthetic::chorale_corpus(count, seed).into_iter().map(|inner| PyScore { inner }).collect()
}

#[pymodule]
fn pybachprop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", bp::checkpoint::TOOL_VERSION)?;
    m.add_class::<PyScore>()?;
    m.add_class::<PyDictionaries>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build_dictionaries, m)?)?;
    m.add_function(wrap_pyfunction!(song_novelty, m)?)?;
    m.add_function(wrap_pyfunction!(auto_novelty, m)?)?;
    m.add_function(wrap_pyfunction!(local_histograms, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_distances, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    Ok(())
}
