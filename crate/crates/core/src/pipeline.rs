//! File-level workflow: corpus preprocessing, manifests, evaluation reports.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::TOOL_VERSION;
use crate::metrics::{
    auto_novelty, bootstrap, histogram_distance, local_histograms, novelty_profile, song_lengths, HistogramReport,
    LocalStats, MetricsError, NoveltyProfile, DEFAULT_PATTERN_SIZES,
};
use crate::midi::{extract_notes, parse_midi, ticks_to_quarters, MidiError};
use crate::model::ModelError;
use crate::score::{
    build_dictionaries_augmented, build_grid, score_from_notes, Dictionaries, DurationGrid, NoteEvent, Score,
    ScoreError, DEFAULT_GRID_CAP_QUARTERS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no MIDI files found in {0}")]
    NoInputFiles(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

/// MIDI bytes to a quantized score.
pub fn score_from_midi(bytes: &[u8], grid: &DurationGrid) -> Result<Score, PipelineError> {
    let song = parse_midi(bytes)?;
    let notes = ticks_to_quarters(&extract_notes(&song), song.division);
    Ok(score_from_notes(&notes, grid))
}

pub fn load_midi_file(path: &Path, grid: &DurationGrid) -> Result<Score, PipelineError> {
    let mut score = score_from_midi(&read_file(path)?, grid)?;
    score.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    score.source = path.to_string_lossy().into_owned();
    Ok(score)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSong {
    pub name: String,
    pub source: String,
    /// `[dT, T, P]` per note, times in atoms.
    pub notes: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub grid_cap_quarters: u32,
    pub songs: Vec<ManifestSong>,
}

impl Manifest {
    pub fn from_scores(scores: &[Score], grid_cap_quarters: u32) -> Self {
        Manifest {
            tool_version: TOOL_VERSION.to_string(),
            grid_cap_quarters,
            songs: scores
                .iter()
                .map(|s| ManifestSong {
                    name: s.name.clone(),
                    source: s.source.clone(),
                    notes: s.notes.iter().map(|n| [n.dt, n.t, u32::from(n.p)]).collect(),
                })
                .collect(),
        }
    }

    pub fn scores(&self) -> Result<Vec<Score>, ScoreError> {
        self.songs
            .iter()
            .map(|s| {
                let notes = s
                    .notes
                    .iter()
                    .map(|&[dt, t, p]| {
                        let p = u8::try_from(p).ok().filter(|&p| p < 128).ok_or(ScoreError::UnknownSymbol {
                            feature: crate::score::Feature::P,
                            value: p,
                        })?;
                        Ok(NoteEvent::new(dt, t, p))
                    })
                    .collect::<Result<Vec<_>, ScoreError>>()?;
                Ok(Score { name: s.name.clone(), source: s.source.clone(), notes })
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        serde_json::from_slice(&read_file(path)?).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
    }
}

pub fn load_dictionaries(path: &Path) -> Result<Dictionaries, PipelineError> {
    serde_json::from_slice(&read_file(path)?).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedFile {
    pub source: String,
    pub notes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedFile {
    pub source: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub tool_version: String,
    pub grid_cap_quarters: u32,
    pub converted: Vec<ConvertedFile>,
    pub rejected: Vec<RejectedFile>,
    pub total_notes: usize,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub manifest: Manifest,
    pub dictionaries: Dictionaries,
    pub report: PreprocessReport,
}

/// `.mid` / `.midi` files directly inside `dir`, sorted by name.
pub fn midi_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Converts every MIDI file in `dir`; unreadable files are reported, not fatal.
pub fn preprocess_dir(dir: &Path, grid_cap_quarters: u32) -> Result<Preprocessed, PipelineError> {
    let files = midi_files(dir)?;
    if files.is_empty() {
        return Err(PipelineError::NoInputFiles(dir.to_path_buf()));
    }
    let grid = build_grid(grid_cap_quarters);
    let mut scores = Vec::new();
    let mut converted = Vec::new();
    let mut rejected = Vec::new();
    for path in files {
        match load_midi_file(&path, &grid) {
            Ok(score) => {
                converted.push(ConvertedFile { source: score.source.clone(), notes: score.len() });
                scores.push(score);
            }
            Err(e) => rejected.push(RejectedFile { source: path.to_string_lossy().into_owned(), reason: e.to_string() }),
        }
    }
    let dictionaries = build_dictionaries_augmented(&scores)?;
    let total_notes = scores.iter().map(|s| s.len()).sum();
    Ok(Preprocessed {
        manifest: Manifest::from_scores(&scores, grid_cap_quarters),
        dictionaries,
        report: PreprocessReport {
            tool_version: TOOL_VERSION.to_string(),
            grid_cap_quarters,
            converted,
            rejected,
            total_notes,
        },
    })
}

pub fn default_grid_cap() -> u32 {
    DEFAULT_GRID_CAP_QUARTERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pattern_sizes: Vec<usize>,
    pub bootstrap_fraction: f64,
    pub bootstrap_repetitions: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pattern_sizes: DEFAULT_PATTERN_SIZES.to_vec(),
            bootstrap_fraction: 0.5,
            bootstrap_repetitions: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub local: LocalStats,
    pub lengths: HistogramReport,
    pub novelty: NoveltyProfile,
    pub auto_novelty: NoveltyProfile,
    /// Total-variation distance between corpus and reference, per statistic.
    pub distances: Vec<(String, f64)>,
}

/// Statistics of `corpus` (bootstrapped when it has two or more songs),
/// its novelty against `reference`, the reference's auto-novelty and the
/// histogram distances between the two corpora.
pub fn evaluate_corpora(corpus: &[Score], reference: &[Score], config: &EvalConfig) -> Result<EvaluationReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut local = local_histograms(corpus)?;
    let mut lengths = song_lengths(corpus)?;
    if corpus.len() >= 2 {
        let (f, r) = (config.bootstrap_fraction, config.bootstrap_repetitions);
        local.dt.bootstrap = Some(bootstrap(corpus, |c| Ok(local_histograms(c)?.dt), f, r, &mut rng)?);
        local.t.bootstrap = Some(bootstrap(corpus, |c| Ok(local_histograms(c)?.t), f, r, &mut rng)?);
        local.chord_intervals.bootstrap =
            Some(bootstrap(corpus, |c| Ok(local_histograms(c)?.chord_intervals), f, r, &mut rng)?);
        local.all_intervals.bootstrap = Some(bootstrap(corpus, |c| Ok(local_histograms(c)?.all_intervals), f, r, &mut rng)?);
        lengths.bootstrap = Some(bootstrap(corpus, song_lengths, f, r, &mut rng)?);
    }
    let ref_local = local_histograms(reference)?;
    let ref_lengths = song_lengths(reference)?;
    let distances = vec![
        ("dt".to_string(), histogram_distance(&local.dt, &ref_local.dt)),
        ("t".to_string(), histogram_distance(&local.t, &ref_local.t)),
        ("intervals_chord".to_string(), histogram_distance(&local.chord_intervals, &ref_local.chord_intervals)),
        ("intervals_all".to_string(), histogram_distance(&local.all_intervals, &ref_local.all_intervals)),
        ("lengths".to_string(), histogram_distance(&lengths, &ref_lengths)),
    ];
    Ok(EvaluationReport {
        novelty: novelty_profile(corpus, reference, &config.pattern_sizes)?,
        auto_novelty: auto_novelty(reference, &config.pattern_sizes)?,
        local,
        lengths,
        distances,
    })
}

/// `#` comment lines naming the tool version and the resolved config.
pub fn provenance_header(config: &serde_json::Value) -> String {
    format!("# bachprop {TOOL_VERSION}\n# config {config}\n")
}

impl EvaluationReport {
    pub fn distance(&self, name: &str) -> Option<f64> {
        self.distances.iter().find(|(n, _)| n == name).map(|&(_, d)| d)
    }

    /// File name and contents of every report.
    pub fn files(&self, config: &serde_json::Value) -> Vec<(&'static str, String)> {
        let head = provenance_header(config);
        let with_meta = |body: String| {
            let mut v: serde_json::Value = serde_json::from_str(&body).expect("valid json");
            v["tool_version"] = TOOL_VERSION.into();
            v["config"] = config.clone();
            serde_json::to_string_pretty(&v).expect("json") + "\n"
        };
        let mut distances = head.clone() + "statistic,distance\n";
        for (name, d) in &self.distances {
            distances.push_str(&format!("{name},{d}\n"));
        }
        vec![
            ("dt_hist.csv", head.clone() + &self.local.dt.to_csv()),
            ("t_hist.csv", head.clone() + &self.local.t.to_csv()),
            ("intervals_chord.csv", head.clone() + &self.local.chord_intervals.to_csv()),
            ("intervals_all.csv", head.clone() + &self.local.all_intervals.to_csv()),
            ("lengths.csv", head.clone() + &self.lengths.to_csv()),
            ("novelty.json", with_meta(self.novelty.summary_json())),
            ("auto_novelty.json", with_meta(self.auto_novelty.summary_json())),
            ("distances.csv", distances),
        ]
    }

    pub fn write(&self, dir: &Path, config: &serde_json::Value) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
        for (name, body) in self.files(config) {
            write_file(&dir.join(name), body)?;
        }
        Ok(())
    }
}
