//! Stateful truncated-BPTT training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelError, PassStats};
use crate::nn::{clip_global_norm, AdamConfig, AdamState};
use crate::score::{encode, transpose_random, EncodedScore, Score, ScoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub trunc_len: usize,
    pub validation_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Random transposition of every training song before each epoch.
    pub augment: bool,
    /// Stop once all three training accuracies reach this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            trunc_len: 128,
            validation_fraction: 0.1,
            max_epochs: 200,
            patience: 10,
            learning_rate: AdamConfig::default().learning_rate,
            clip_norm: 5.0,
            seed: 0,
            augment: true,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if self.trunc_len < 2 {
            return bad("truncation length must be at least 2");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning rate and clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_acc: [f64; 3],
    pub val_nll: Option<f64>,
    pub val_acc: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// CSV body: `epoch,train_nll,val_nll,val_acc_dt,val_acc_t,val_acc_p`.
    /// Missing validation values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_nll,val_nll,val_acc_dt,val_acc_t,val_acc_p\n");
        for e in &self.epochs {
            let val = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            let acc = e.val_acc.map(|a| a.map(Some)).unwrap_or([None; 3]);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch,
                e.train_nll,
                val(e.val_nll),
                val(acc[0]),
                val(acc[1]),
                val(acc[2])
            )
            .unwrap();
        }
        out
    }
}

/// Teacher-forced NLL and accuracies of a single encoded song.
pub fn sequence_nll(model: &Model, song: &EncodedScore) -> Result<PassStats, ModelError> {
    if song.len() < 2 || song.dt.len() != song.t.len() || song.t.len() != song.p.len() {
        return Err(ScoreError::MalformedEncoding(format!("song of {} positions", song.len())).into());
    }
    model.evaluate(std::slice::from_ref(song), 1)
}

/// Splits `corpus` into (train, validation) with a seeded shuffle; the
/// validation set gets `round(fraction * len)` songs, at least one when the
/// fraction is positive and the corpus has two or more songs.
pub fn split_corpus<R: Rng + ?Sized>(corpus: &[Score], fraction: f64, rng: &mut R) -> (Vec<Score>, Vec<Score>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(rng);
    let mut n_val = (fraction * corpus.len() as f64).round() as usize;
    if fraction > 0.0 && corpus.len() >= 2 {
        n_val = n_val.clamp(1, corpus.len() - 1);
    }
    let valid = idx[..n_val].iter().map(|&i| corpus[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| corpus[i].clone()).collect();
    (train, valid)
}

/// One epoch over `songs` in the given order: groups of `batch_size` songs,
/// state reset per group, one Adam step per window.
fn run_epoch(
    model: &mut Model,
    songs: &[EncodedScore],
    config: &TrainConfig,
    adam: &mut AdamState,
    grads: &mut [f64],
) -> Result<PassStats, ModelError> {
    let mut stats = PassStats::default();
    for group in songs.chunks(config.batch_size) {
        let refs: Vec<&EncodedScore> = group.iter().collect();
        let mut state = model.zero_state(refs.len());
        for window in model.windows(&refs, config.trunc_len) {
            grads.fill(0.0);
            let s = model.train_window(&model.params, &mut state, &window, grads)?;
            stats.add(&s);
            if s.positions == 0 {
                continue;
            }
            clip_global_norm(grads, config.clip_norm);
            adam.update(&mut model.params, grads)?;
        }
    }
    Ok(stats)
}

/// Trains on `train_set`, selecting parameters by validation accuracy.
///
/// With an empty `valid_set` the final parameters are kept and early
/// stopping only happens through `target_accuracy`.
pub fn train<R: Rng + ?Sized>(
    model: &mut Model,
    train_set: &[Score],
    valid_set: &[Score],
    config: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog, ModelError> {
    config.validate()?;
    if train_set.iter().all(|s| s.is_empty()) {
        return Err(ModelError::EmptyCorpus);
    }
    let dicts = model.dicts.clone();
    let valid: Vec<EncodedScore> = valid_set.iter().map(|s| encode(s, &dicts)).collect::<Result<_, _>>()?;
    let base: Vec<EncodedScore> = if config.augment {
        Vec::new()
    } else {
        train_set.iter().map(|s| encode(s, &dicts)).collect::<Result<_, _>>()?
    };

    let adam_config = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_config, model.param_count());
    let mut grads = vec![0.0; model.param_count()];
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let mut songs: Vec<EncodedScore> = if config.augment {
            train_set
                .iter()
                .map(|s| encode(&transpose_random(s, &dicts, rng)?, &dicts))
                .collect::<Result<_, ScoreError>>()?
        } else {
            base.clone()
        };
        songs.shuffle(rng);
        let stats = run_epoch(model, &songs, config, &mut adam, &mut grads)?;

        let val = if valid.is_empty() { None } else { Some(model.evaluate(&valid, config.batch_size)?) };
        let entry = EpochLog {
            epoch,
            train_nll: stats.nll(),
            train_acc: stats.accuracy(),
            val_nll: val.map(|v| v.nll()),
            val_acc: val.map(|v| v.accuracy()),
        };
        on_epoch(&entry);

        let reached = config.target_accuracy.is_some_and(|t| entry.train_acc.iter().all(|&a| a >= t));
        if let Some(acc) = entry.val_acc {
            let mean = acc.iter().sum::<f64>() / 3.0;
            if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                best = Some((mean, model.params.clone()));
                log.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
            }
        } else {
            log.best_epoch = epoch;
        }
        log.epochs.push(entry);
        if reached || (!valid.is_empty() && stale >= config.patience) {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Variant};
    use crate::score::{build_dictionaries, NoteEvent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_corpus() -> Vec<Score> {
        let song = |notes: &[(u32, u32, u8)]| {
            Score::from_notes(notes.iter().map(|&(dt, t, p)| NoteEvent::new(dt, t, p)).collect())
        };
        vec![
            song(&[(0, 48, 60), (48, 48, 62), (48, 96, 64), (96, 48, 60)]),
            song(&[(0, 24, 67), (24, 24, 65), (24, 48, 64), (48, 96, 62), (96, 48, 60)]),
            song(&[(0, 48, 60), (0, 48, 64), (48, 48, 62), (0, 48, 65)]),
        ]
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { trunc_len: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { validation_fraction: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn split_sizes() {
        let corpus = vec![Score::default(); 50];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, v) = split_corpus(&corpus, 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (45, 5));
        let (t, v) = split_corpus(&corpus[..3], 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (2, 1));
        let (t, v) = split_corpus(&corpus[..3], 0.0, &mut rng);
        assert_eq!((t.len(), v.len()), (3, 0));
    }

    #[test]
    fn sequence_nll_rejects_short_songs() {
        let corpus = tiny_corpus();
        let d = build_dictionaries(&corpus).unwrap();
        let model = Model::skeleton(Architecture::uniform(Variant::BachProp, 4), &d).unwrap();
        let short = EncodedScore { dt: vec![0], t: vec![0], p: vec![0] };
        assert!(matches!(sequence_nll(&model, &short), Err(ModelError::Score(ScoreError::MalformedEncoding(_)))));
        let ok = encode(&corpus[0], &d).unwrap();
        assert_eq!(sequence_nll(&model, &ok).unwrap().positions, 5);
    }

    #[test]
    fn loss_decreases_and_log_is_deterministic() {
        let corpus = tiny_corpus();
        let d = build_dictionaries(&corpus).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut model = Model::with_architecture(Architecture::uniform(Variant::BachProp, 16), &d, &mut rng).unwrap();
            let config = TrainConfig { max_epochs: 40, augment: false, learning_rate: 1e-2, ..Default::default() };
            let log = train(&mut model, &corpus, &[], &config, &mut rng, |_| {}).unwrap();
            (log, model.params)
        };
        let (log, params) = run();
        assert_eq!(log.epochs.len(), 40);
        assert!(log.last().unwrap().train_nll < 0.5 * log.epochs[0].train_nll);
        let (log2, params2) = run();
        assert_eq!(log.to_csv(), log2.to_csv());
        assert_eq!(params, params2);
    }

    #[test]
    fn keeps_best_validation_checkpoint() {
        let corpus = tiny_corpus();
        let d = crate::score::build_dictionaries_augmented(&corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = Model::with_architecture(Architecture::uniform(Variant::IndepBp, 8), &d, &mut rng).unwrap();
        let config = TrainConfig { max_epochs: 15, patience: 3, learning_rate: 1e-2, ..Default::default() };
        let log = train(&mut model, &corpus[..2], &corpus[2..], &config, &mut rng, |_| {}).unwrap();
        let best = log.best().unwrap();
        let mean = |a: [f64; 3]| a.iter().sum::<f64>() / 3.0;
        assert!(log.epochs.iter().all(|e| mean(e.val_acc.unwrap()) <= mean(best.val_acc.unwrap())));
        let valid = encode(&corpus[2], &d).unwrap();
        let now = model.evaluate(&[valid], 1).unwrap();
        assert_eq!(now.accuracy(), best.val_acc.unwrap());
        assert!(log.epochs.len() >= log.best_epoch && log.epochs.len() <= log.best_epoch + 3);
    }

    #[test]
    fn validation_independent_of_grouping() {
        let corpus = tiny_corpus();
        let d = build_dictionaries(&corpus).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::with_architecture(Architecture::uniform(Variant::PolyDac, 6), &d, &mut rng).unwrap();
        let enc: Vec<EncodedScore> = corpus.iter().map(|s| encode(s, &d).unwrap()).collect();
        let a = model.evaluate(&enc, 1).unwrap();
        let b = model.evaluate(&enc, 3).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.correct, b.correct);
        assert!((a.nll() - b.nll()).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            epochs: vec![
                EpochLog { epoch: 1, train_nll: 1.5, train_acc: [0.5; 3], val_nll: Some(1.25), val_acc: Some([0.5, 0.25, 1.0]) },
                EpochLog { epoch: 2, train_nll: 1.0, train_acc: [0.5; 3], val_nll: None, val_acc: None },
            ],
            best_epoch: 1,
        };
        assert_eq!(
            log.to_csv(),
            "epoch,train_nll,val_nll,val_acc_dt,val_acc_t,val_acc_p\n1,1.5,1.25,0.5,0.25,1\n2,1,,,,\n"
        );
    }
}
