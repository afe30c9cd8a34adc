//! Three-stage temperature sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelError, NoteModel};
use crate::nn::{argmax, softmax};
use crate::score::{decode, EncodedScore, Feature, Score};

/// Below this temperature sampling degenerates to argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_notes: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 1.0, max_notes: 1000, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature > 0.0) || self.max_notes < 1 {
            return Err(ModelError::InvalidConfig("temperature must be positive and max_notes at least 1".into()));
        }
        Ok(())
    }
}

/// Draws an index from `softmax(logits / temperature)`.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize, ModelError> {
    if temperature < GREEDY_TEMPERATURE {
        return Ok(argmax(logits));
    }
    let probs = softmax(logits, temperature)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left the cumulative sum just below u
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0))
}

/// Samples `dT`, then `T` given `dT`, then `P` given both, and feeds the
/// resulting triple back into `state`.
pub fn sample_note<M: NoteModel, R: Rng + ?Sized>(
    model: &M,
    state: &mut M::State,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<[usize; 3], ModelError> {
    let mut note = [0usize; 3];
    for k in 0..3 {
        let logits = model.head_logits(state, &note[..k])?;
        note[k] = sample_index(&logits, config.temperature, rng)?;
    }
    model.forward_note(state, note)?;
    Ok(note)
}

/// Generates one song from a fresh state seeded with the boundary note.
/// Stops at the first triple containing a boundary index (which is dropped)
/// or after `max_notes` notes.
pub fn generate_score<M: NoteModel, R: Rng + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Score, ModelError> {
    config.validate()?;
    let dicts = model.dictionaries();
    let boundary = dicts.boundary_note();
    let mut state = model.initial_state();
    model.forward_note(&mut state, boundary)?;
    let mut enc = EncodedScore::default();
    let mut push = |n: [usize; 3]| {
        enc.dt.push(n[0]);
        enc.t.push(n[1]);
        enc.p.push(n[2]);
    };
    push(boundary);
    let mut count = 0;
    while count < config.max_notes {
        let note = sample_note(model, &mut state, config, rng)?;
        if (0..3).any(|k| note[k] == boundary[k]) {
            break;
        }
        push(note);
        count += 1;
    }
    push(boundary);
    Ok(decode(&enc, dicts)?)
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Index of the boundary symbol for `feature` (the last logit).
pub fn boundary_index<M: NoteModel>(model: &M, feature: Feature) -> usize {
    model.dictionaries().boundary(feature)
}
