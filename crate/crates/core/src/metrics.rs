//! Novelty profiles and local statistics of score corpora.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{NoteEvent, Score, ATOMS_PER_QUARTER};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("song has {len} notes, fewer than the pattern size {m}")]
    SongTooShort { len: usize, m: usize },
    #[error("corpus needs at least {needed} songs, got {got}")]
    CorpusTooSmall { needed: usize, got: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("pattern sizes must be at least 1")]
    BadPatternSize,
}

pub const DEFAULT_PATTERN_SIZES: [usize; 9] = [2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Every contiguous `m`-note pattern of a corpus, with the number of songs
/// containing it.
#[derive(Debug, Clone)]
pub struct PatternIndex<'a> {
    m: usize,
    counts: HashMap<&'a [NoteEvent], usize>,
}

impl<'a> PatternIndex<'a> {
    pub fn new(corpus: &'a [Score], m: usize) -> Self {
        let mut counts: HashMap<&[NoteEvent], usize> = HashMap::new();
        for song in corpus {
            if m == 0 || song.len() < m {
                continue;
            }
            let unique: HashSet<&[NoteEvent]> = song.notes.windows(m).collect();
            for w in unique {
                *counts.entry(w).or_default() += 1;
            }
        }
        PatternIndex { m, counts }
    }

    /// Number of indexed songs containing `pattern`.
    pub fn songs_containing(&self, pattern: &[NoteEvent]) -> usize {
        self.counts.get(pattern).copied().unwrap_or(0)
    }

    pub fn m(&self) -> usize {
        self.m
    }
}

fn check_length(song: &Score, m: usize) -> Result<(), MetricsError> {
    if m == 0 {
        return Err(MetricsError::BadPatternSize);
    }
    if song.len() < m {
        return Err(MetricsError::SongTooShort { len: song.len(), m });
    }
    Ok(())
}

/// Novelty of a song against a prebuilt index: the fraction of its `m`-note
/// windows occurring in more than `own` indexed songs (`own` is 1 when the
/// song itself is part of the index, 0 otherwise).
fn indexed_novelty(song: &Score, index: &PatternIndex, own: usize) -> f64 {
    let windows = song.notes.windows(index.m);
    let total = windows.len();
    let novel = windows.filter(|w| index.songs_containing(w) <= own).count();
    novel as f64 / total as f64
}

/// Fraction of the song's `m`-note windows that appear nowhere in `reference`.
pub fn song_novelty(song: &Score, m: usize, reference: &[Score]) -> Result<f64, MetricsError> {
    check_length(song, m)?;
    Ok(indexed_novelty(song, &PatternIndex::new(reference, m), 0))
}

/// Per-size novelty scores; songs shorter than `m` contribute nothing at `m`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoveltyProfile {
    pub sizes: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl NoveltyProfile {
    /// JSON summary: per size, the song count, mean and quartiles.
    pub fn summary_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .sizes
            .iter()
            .zip(&self.scores)
            .map(|(&m, s)| {
                let q = quartiles(s);
                serde_json::json!({
                    "m": m,
                    "songs": s.len(),
                    "mean": mean(s),
                    "q1": q.map(|q| q.0),
                    "median": q.map(|q| q.1),
                    "q3": q.map(|q| q.2),
                    "scores": s,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "profile": rows })).expect("json")
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Quartiles by linear interpolation between order statistics.
pub fn quartiles(v: &[f64]) -> Option<(f64, f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    Some((at(0.25), at(0.5), at(0.75)))
}

pub fn novelty_profile(corpus: &[Score], reference: &[Score], sizes: &[usize]) -> Result<NoveltyProfile, MetricsError> {
    if sizes.contains(&0) {
        return Err(MetricsError::BadPatternSize);
    }
    let scores = sizes
        .iter()
        .map(|&m| {
            let index = PatternIndex::new(reference, m);
            corpus.iter().filter(|s| s.len() >= m).map(|s| indexed_novelty(s, &index, 0)).collect()
        })
        .collect();
    Ok(NoveltyProfile { sizes: sizes.to_vec(), scores })
}

/// Leave-one-out novelty of each song against the rest of the corpus.
pub fn auto_novelty(corpus: &[Score], sizes: &[usize]) -> Result<NoveltyProfile, MetricsError> {
    if corpus.len() < 2 {
        return Err(MetricsError::CorpusTooSmall { needed: 2, got: corpus.len() });
    }
    if sizes.contains(&0) {
        return Err(MetricsError::BadPatternSize);
    }
    let scores = sizes
        .iter()
        .map(|&m| {
            let index = PatternIndex::new(corpus, m);
            corpus.iter().filter(|s| s.len() >= m).map(|s| indexed_novelty(s, &index, 1)).collect()
        })
        .collect();
    Ok(NoveltyProfile { sizes: sizes.to_vec(), scores })
}

/// Unit of histogram bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinUnit {
    Atoms,
    Semitones,
    Quarters,
}

/// Relative frequencies over exact bin values, optionally with bootstrap
/// mean and standard deviation per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub unit: BinUnit,
    pub frequency: BTreeMap<i64, f64>,
    pub bootstrap: Option<BTreeMap<i64, (f64, f64)>>,
}

impl HistogramReport {
    pub fn from_values(unit: BinUnit, values: impl IntoIterator<Item = i64>) -> Self {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        let mut total = 0usize;
        for v in values {
            *counts.entry(v).or_default() += 1;
            total += 1;
        }
        let frequency = counts.into_iter().map(|(k, c)| (k, c as f64 / total as f64)).collect();
        HistogramReport { unit, frequency, bootstrap: None }
    }

    pub fn get(&self, bin: i64) -> f64 {
        self.frequency.get(&bin).copied().unwrap_or(0.0)
    }

    /// Rows `value,frequency,bootstrap_mean,bootstrap_std` over the union of
    /// observed and bootstrapped bins.
    pub fn to_csv(&self) -> String {
        let mut bins: Vec<i64> = self.frequency.keys().copied().collect();
        if let Some(b) = &self.bootstrap {
            bins.extend(b.keys().copied());
        }
        bins.sort_unstable();
        bins.dedup();
        let mut out = String::from("value,frequency,bootstrap_mean,bootstrap_std\n");
        for bin in bins {
            let value = match self.unit {
                BinUnit::Atoms => crate::score::atoms_label(bin as u32),
                BinUnit::Semitones | BinUnit::Quarters => bin.to_string(),
            };
            let (m, s) = match self.bootstrap.as_ref().map(|b| b.get(&bin).copied().unwrap_or((0.0, 0.0))) {
                Some((m, s)) => (m.to_string(), s.to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(out, "{value},{},{m},{s}", self.get(bin)).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    pub dt: HistogramReport,
    pub t: HistogramReport,
    pub chord_intervals: HistogramReport,
    pub all_intervals: HistogramReport,
}

pub fn local_histograms(corpus: &[Score]) -> Result<LocalStats, MetricsError> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(MetricsError::EmptyCorpus);
    }
    let notes = || corpus.iter().flat_map(|s| s.notes.iter());
    let pairs = || corpus.iter().flat_map(|s| s.notes.windows(2));
    let interval = |w: &[NoteEvent]| i64::from(w[1].p) - i64::from(w[0].p);
    Ok(LocalStats {
        dt: HistogramReport::from_values(BinUnit::Atoms, notes().map(|n| i64::from(n.dt))),
        t: HistogramReport::from_values(BinUnit::Atoms, notes().map(|n| i64::from(n.t))),
        chord_intervals: HistogramReport::from_values(BinUnit::Semitones, pairs().filter(|w| w[1].dt == 0).map(interval)),
        all_intervals: HistogramReport::from_values(BinUnit::Semitones, pairs().map(interval)),
    })
}

/// End time of the last-sounding note, in atoms.
pub fn song_length_atoms(song: &Score) -> u64 {
    song.onsets().iter().zip(&song.notes).map(|(o, n)| o + u64::from(n.t)).max().unwrap_or(0)
}

/// Song durations binned by whole quarter notes (floor).
pub fn song_lengths(corpus: &[Score]) -> Result<HistogramReport, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let q = ATOMS_PER_QUARTER as u64;
    Ok(HistogramReport::from_values(BinUnit::Quarters, corpus.iter().map(|s| (song_length_atoms(s) / q) as i64)))
}

/// Per-bin mean and population standard deviation of `metric` over
/// `repetitions` subsets of `ceil(fraction * S)` distinct songs.
pub fn bootstrap<R, F>(
    corpus: &[Score],
    metric: F,
    fraction: f64,
    repetitions: usize,
    rng: &mut R,
) -> Result<BTreeMap<i64, (f64, f64)>, MetricsError>
where
    R: Rng + ?Sized,
    F: Fn(&[Score]) -> Result<HistogramReport, MetricsError>,
{
    if corpus.len() < 2 {
        return Err(MetricsError::CorpusTooSmall { needed: 2, got: corpus.len() });
    }
    let k = ((fraction * corpus.len() as f64).ceil() as usize).clamp(1, corpus.len());
    let mut runs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let mut picked: Vec<usize> = sample(rng, corpus.len(), k).into_vec();
        picked.sort_unstable();
        let subset: Vec<Score> = picked.into_iter().map(|i| corpus[i].clone()).collect();
        runs.push(metric(&subset)?);
    }
    let bins: std::collections::BTreeSet<i64> = runs.iter().flat_map(|r| r.frequency.keys().copied()).collect();
    let n = runs.len().max(1) as f64;
    Ok(bins
        .into_iter()
        .map(|bin| {
            let vals: Vec<f64> = runs.iter().map(|r| r.get(bin)).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            (bin, (m, var.sqrt()))
        })
        .collect())
}

/// Total-variation distance over the union of bins.
pub fn histogram_distance(a: &HistogramReport, b: &HistogramReport) -> f64 {
    let bins: std::collections::BTreeSet<i64> = a.frequency.keys().chain(b.frequency.keys()).copied().collect();
    0.5 * bins.into_iter().map(|k| (a.get(k) - b.get(k)).abs()).sum::<f64>()
}
