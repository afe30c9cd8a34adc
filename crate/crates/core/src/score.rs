//! Note-triplet scores, the duration grid they are quantized onto, and the
//! feature dictionaries used to index them.

use std::collections::BTreeSet;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::QuarterNote;

/// One quarter note is 48 atoms: the common refinement of 64th notes
/// (3 atoms) and 32nd-note triplets (4 atoms).
pub const ATOMS_PER_QUARTER: u32 = 48;

pub const DEFAULT_GRID_CAP_QUARTERS: u32 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{feature} value {value} is not in the dictionary")]
    UnknownSymbol { feature: Feature, value: u32 },
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    #[error("no feasible transposition offset")]
    NoFeasibleOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "dT")]
    Dt,
    T,
    P,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Dt, Feature::T, Feature::P];
}

impl std::fmt::Display for Feature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Feature::Dt => "dT",
            Feature::T => "T",
            Feature::P => "P",
        })
    }
}

/// `(dT, T, P)`: onset shift from the previous note and duration, both in
/// atoms, plus MIDI pitch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub dt: u32,
    pub t: u32,
    pub p: u8,
}

impl NoteEvent {
    pub fn new(dt: u32, t: u32, p: u8) -> Self {
        NoteEvent { dt, t, p }
    }

    pub fn get(&self, feature: Feature) -> u32 {
        match feature {
            Feature::Dt => self.dt,
            Feature::T => self.t,
            Feature::P => u32::from(self.p),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub name: String,
    pub source: String,
    pub notes: Vec<NoteEvent>,
}

impl Score {
    pub fn from_notes(notes: Vec<NoteEvent>) -> Self {
        Score { notes, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Onset of every note in atoms.
    pub fn onsets(&self) -> Vec<u64> {
        let mut t = 0u64;
        self.notes
            .iter()
            .map(|n| {
                t += u64::from(n.dt);
                t
            })
            .collect()
    }

    pub fn pitch_range(&self) -> Option<(u8, u8)> {
        let min = self.notes.iter().map(|n| n.p).min()?;
        let max = self.notes.iter().map(|n| n.p).max()?;
        Some((min, max))
    }

    /// Adds `offset` semitones to every pitch. Panics if a pitch leaves 0..=127.
    pub fn transposed(&self, offset: i32) -> Score {
        let notes = self
            .notes
            .iter()
            .map(|n| {
                let p = i32::from(n.p) + offset;
                assert!((0..=127).contains(&p), "transposed pitch {p} out of MIDI range");
                NoteEvent { p: p as u8, ..*n }
            })
            .collect();
        Score { name: self.name.clone(), source: self.source.clone(), notes }
    }

    /// Human-readable dump: one `dT T P` line per note, times in quarter notes.
    /// Lines starting with `#` are skipped when reading back.
    pub fn to_note_list(&self) -> String {
        let mut out = String::new();
        for n in &self.notes {
            out.push_str(&format!("{} {} {}\n", atoms_label(n.dt), atoms_label(n.t), n.p));
        }
        out
    }

    pub fn from_note_list(text: &str) -> Result<Score, ScoreError> {
        let mut notes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || ScoreError::MalformedEncoding(format!("line {}: {line:?}", i + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(bad());
            }
            let dt = parse_atoms(fields[0]).ok_or_else(bad)?;
            let t = parse_atoms(fields[1]).ok_or_else(bad)?;
            let p: u8 = fields[2].parse().map_err(|_| bad())?;
            notes.push(NoteEvent { dt, t, p });
        }
        Ok(Score::from_notes(notes))
    }
}

/// Formats an atom count as a reduced fraction of a quarter note.
pub fn atoms_label(atoms: u32) -> String {
    let r = Ratio::new(atoms, ATOMS_PER_QUARTER);
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

fn parse_atoms(s: &str) -> Option<u32> {
    let r = match s.split_once('/') {
        Some((n, d)) => Ratio::new(n.parse::<u32>().ok()?, d.parse::<u32>().ok().filter(|&d| d > 0)?),
        None => Ratio::from_integer(s.parse::<u32>().ok()?),
    };
    let atoms = r * ATOMS_PER_QUARTER;
    atoms.is_integer().then(|| atoms.to_integer())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationGrid {
    members: Vec<u32>,
    cap: u32,
}

impl DurationGrid {
    pub fn members(&self) -> &[u32] {
        &self.members
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn contains(&self, atoms: u32) -> bool {
        self.members.binary_search(&atoms).is_ok()
    }
}

impl Default for DurationGrid {
    fn default() -> Self {
        build_grid(DEFAULT_GRID_CAP_QUARTERS)
    }
}

/// All atom counts up to the cap that are multiples of 3 (64th notes) or of 4
/// (32nd-note triplets).
pub fn build_grid(cap_quarters: u32) -> DurationGrid {
    assert!(cap_quarters >= 1, "grid cap must be at least one quarter note");
    let cap = cap_quarters * ATOMS_PER_QUARTER;
    let members = (1..=cap).filter(|k| k % 3 == 0 || k % 4 == 0).collect();
    DurationGrid { members, cap }
}

/// Nearest candidate to `x` in a sorted slice; ties go to the smaller one.
fn nearest(candidates: &[u32], x: Ratio<u64>) -> u32 {
    let idx = candidates.partition_point(|&c| Ratio::from_integer(u64::from(c)) < x);
    if idx == 0 {
        return candidates[0];
    }
    if idx == candidates.len() {
        return candidates[idx - 1];
    }
    let lo = candidates[idx - 1];
    let hi = candidates[idx];
    let d_lo = x - Ratio::from_integer(u64::from(lo));
    let d_hi = Ratio::from_integer(u64::from(hi)) - x;
    if d_hi < d_lo {
        hi
    } else {
        lo
    }
}

pub fn quantize_duration(value: Ratio<u64>, grid: &DurationGrid) -> u32 {
    nearest(&grid.members, value * u64::from(ATOMS_PER_QUARTER))
}

pub fn quantize_shift(value: Ratio<u64>, grid: &DurationGrid) -> u32 {
    let x = value * u64::from(ATOMS_PER_QUARTER);
    let first = grid.members[0];
    // 0 competes only with the smallest member
    if x * 2 <= Ratio::from_integer(u64::from(first)) {
        return 0;
    }
    nearest(&grid.members, x)
}

/// Converts notes in quarter-note time to a quantized score. Notes that end up
/// simultaneous are ordered by ascending pitch.
pub fn score_from_notes(notes: &[QuarterNote], grid: &DurationGrid) -> Score {
    let mut sorted = notes.to_vec();
    sorted.sort_by(|a, b| (a.onset, a.pitch, a.duration).cmp(&(b.onset, b.pitch, b.duration)));

    let mut out: Vec<NoteEvent> = Vec::with_capacity(sorted.len());
    let mut group_start = 0;
    for (i, n) in sorted.iter().enumerate() {
        let dt = if i == 0 { 0 } else { quantize_shift(n.onset - sorted[i - 1].onset, grid) };
        let t = quantize_duration(n.duration, grid);
        if dt > 0 {
            canonicalize_group(&mut out[group_start..]);
            group_start = out.len();
        }
        out.push(NoteEvent { dt, t, p: n.pitch });
    }
    canonicalize_group(&mut out[group_start..]);
    Score::from_notes(out)
}

fn canonicalize_group(group: &mut [NoteEvent]) {
    if group.len() < 2 {
        return;
    }
    let lead = group[0].dt;
    for n in group.iter_mut() {
        n.dt = 0;
    }
    group.sort_by_key(|n| (n.p, n.t));
    group[0].dt = lead;
}

/// Ascending symbol tables for the three features. The boundary symbol is
/// implicit and always takes the index one past the last value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dictionaries {
    pub dt: Vec<u32>,
    pub t: Vec<u32>,
    pub p: Vec<u32>,
}

impl Dictionaries {
    pub fn table(&self, feature: Feature) -> &[u32] {
        match feature {
            Feature::Dt => &self.dt,
            Feature::T => &self.t,
            Feature::P => &self.p,
        }
    }

    /// `L_x`: the table length including the boundary symbol.
    pub fn size(&self, feature: Feature) -> usize {
        self.table(feature).len() + 1
    }

    pub fn sizes(&self) -> [usize; 3] {
        Feature::ALL.map(|f| self.size(f))
    }

    pub fn boundary(&self, feature: Feature) -> usize {
        self.table(feature).len()
    }

    pub fn boundary_note(&self) -> [usize; 3] {
        Feature::ALL.map(|f| self.boundary(f))
    }

    pub fn index_of(&self, feature: Feature, value: u32) -> Result<usize, ScoreError> {
        self.table(feature)
            .binary_search(&value)
            .map_err(|_| ScoreError::UnknownSymbol { feature, value })
    }

    pub fn value_of(&self, feature: Feature, index: usize) -> Option<u32> {
        self.table(feature).get(index).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dictionaries serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let d: Dictionaries = serde_json::from_str(text)?;
        Ok(d)
    }

    pub fn pitch_bounds(&self) -> Option<(u32, u32)> {
        Some((*self.p.first()?, *self.p.last()?))
    }
}

pub fn build_dictionaries(corpus: &[Score]) -> Result<Dictionaries, ScoreError> {
    if corpus.is_empty() {
        return Err(ScoreError::EmptyCorpus);
    }
    let mut dt = BTreeSet::from([0u32]);
    let mut t = BTreeSet::new();
    let mut p = BTreeSet::new();
    for n in corpus.iter().flat_map(|s| &s.notes) {
        dt.insert(n.dt);
        t.insert(n.t);
        p.insert(u32::from(n.p));
    }
    Ok(Dictionaries {
        dt: dt.into_iter().collect(),
        t: t.into_iter().collect(),
        p: p.into_iter().collect(),
    })
}

/// Dictionaries for a corpus together with every transposition of each song
/// that stays inside the corpus pitch range, so that transposition during
/// training never produces an unknown pitch.
pub fn build_dictionaries_augmented(corpus: &[Score]) -> Result<Dictionaries, ScoreError> {
    let mut dicts = build_dictionaries(corpus)?;
    let Some((lo, hi)) = dicts.pitch_bounds() else {
        return Ok(dicts);
    };
    let mut pitches: BTreeSet<u32> = dicts.p.iter().copied().collect();
    for score in corpus {
        let Some((s_lo, s_hi)) = score.pitch_range() else { continue };
        let (s_lo, s_hi) = (u32::from(s_lo), u32::from(s_hi));
        let shift_down = s_lo - lo;
        let shift_up = hi - s_hi;
        let distinct: BTreeSet<u32> = score.notes.iter().map(|n| u32::from(n.p)).collect();
        for q in distinct {
            pitches.extend(q - shift_down..=q + shift_up);
        }
    }
    dicts.p = pitches.into_iter().collect();
    Ok(dicts)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedScore {
    pub dt: Vec<usize>,
    pub t: Vec<usize>,
    pub p: Vec<usize>,
}

impl EncodedScore {
    /// Number of positions, boundaries included.
    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    pub fn note(&self, i: usize) -> [usize; 3] {
        [self.dt[i], self.t[i], self.p[i]]
    }
}

pub fn encode(score: &Score, dicts: &Dictionaries) -> Result<EncodedScore, ScoreError> {
    let b = dicts.boundary_note();
    let n = score.notes.len() + 2;
    let mut enc = EncodedScore {
        dt: Vec::with_capacity(n),
        t: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
    };
    enc.dt.push(b[0]);
    enc.t.push(b[1]);
    enc.p.push(b[2]);
    for note in &score.notes {
        enc.dt.push(dicts.index_of(Feature::Dt, note.dt)?);
        enc.t.push(dicts.index_of(Feature::T, note.t)?);
        enc.p.push(dicts.index_of(Feature::P, u32::from(note.p))?);
    }
    enc.dt.push(b[0]);
    enc.t.push(b[1]);
    enc.p.push(b[2]);
    Ok(enc)
}

pub fn decode(enc: &EncodedScore, dicts: &Dictionaries) -> Result<Score, ScoreError> {
    let n = enc.dt.len();
    if enc.t.len() != n || enc.p.len() != n {
        return Err(ScoreError::MalformedEncoding("feature sequences differ in length".into()));
    }
    if n < 2 {
        return Err(ScoreError::MalformedEncoding("missing boundary notes".into()));
    }
    let b = dicts.boundary_note();
    if enc.note(0) != b || enc.note(n - 1) != b {
        return Err(ScoreError::MalformedEncoding("sequence must start and end with the boundary note".into()));
    }
    let mut notes = Vec::with_capacity(n - 2);
    for i in 1..n - 1 {
        let idx = enc.note(i);
        let mut vals = [0u32; 3];
        for (k, f) in Feature::ALL.into_iter().enumerate() {
            vals[k] = dicts.value_of(f, idx[k]).ok_or_else(|| {
                if idx[k] == b[k] {
                    ScoreError::MalformedEncoding(format!("interior boundary at position {i}"))
                } else {
                    ScoreError::MalformedEncoding(format!("{f} index {} out of range at position {i}", idx[k]))
                }
            })?;
        }
        notes.push(NoteEvent { dt: vals[0], t: vals[1], p: vals[2] as u8 });
    }
    Ok(Score::from_notes(notes))
}

/// Every offset that keeps all of the score's pitches inside the pitch table.
pub fn feasible_offsets(score: &Score, dicts: &Dictionaries) -> Vec<i32> {
    let (Some((lo, hi)), Some((s_lo, s_hi))) = (dicts.pitch_bounds(), score.pitch_range()) else {
        return vec![0];
    };
    let from = lo as i32 - i32::from(s_lo);
    let to = hi as i32 - i32::from(s_hi);
    (from..=to)
        .filter(|k| {
            score
                .notes
                .iter()
                .all(|n| dicts.p.binary_search(&((i32::from(n.p) + k) as u32)).is_ok())
        })
        .collect()
}

/// Transposes by an offset drawn uniformly from the feasible offsets.
pub fn transpose_random<R: Rng + ?Sized>(
    score: &Score,
    dicts: &Dictionaries,
    rng: &mut R,
) -> Result<Score, ScoreError> {
    let offsets = feasible_offsets(score, dicts);
    if offsets.is_empty() {
        return Err(ScoreError::NoFeasibleOffset);
    }
    let k = offsets[rng.random_range(0..offsets.len())];
    Ok(score.transposed(k))
}
