//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Criteria 1, 2, 4, 6, 7 and 10 are exact properties of the implementation
//! and fail the run when violated. Criteria 3, 5, 8 and 9 are measured
//! outcomes; their lines are reported without failing the run.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Instant;

use bachprop::generate::{generate_score, sample_index, SamplerConfig};
use bachprop::metrics::{auto_novelty, histogram_distance, local_histograms, song_novelty, MetricsError};
use bachprop::midi::{extract_notes, parse_midi, ticks_to_quarters, write_midi};
use bachprop::model::{Architecture, HiddenState, Model, NoteModel, Variant};
use bachprop::nn::{grad_check, FD_RESOLUTION};
use bachprop::score::{
    build_dictionaries, build_dictionaries_augmented, build_grid, quantize_duration, quantize_shift,
    score_from_notes, Dictionaries, EncodedScore, NoteEvent, Score, ATOMS_PER_QUARTER,
};
use bachprop::synthetic::chorale_corpus;
use bachprop::train::{split_corpus, train, TrainConfig, TrainLog};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

/// Random canonical score: chords sorted by pitch, no two notes of equal
/// pitch sounding at once.
fn random_score(rng: &mut ChaCha8Rng, len: usize, grid: &[u32]) -> Score {
    let mut notes = Vec::with_capacity(len);
    let mut busy_until: HashMap<u8, u64> = HashMap::new();
    let mut onset = 0u64;
    while notes.len() < len {
        let dt = if notes.is_empty() { 0 } else { grid[rng.random_range(0..grid.len())] };
        onset += u64::from(dt);
        let free: Vec<u8> = (36u8..=84).filter(|p| busy_until.get(p).is_none_or(|&end| end <= onset)).collect();
        let size = rng.random_range(1..=4usize).min(len - notes.len()).min(free.len());
        let mut chord: Vec<(u8, u32)> = Vec::new();
        let mut used = HashSet::new();
        while chord.len() < size {
            let p = free[rng.random_range(0..free.len())];
            if used.insert(p) {
                chord.push((p, grid[rng.random_range(0..grid.len())]));
            }
        }
        chord.sort();
        for (i, &(p, t)) in chord.iter().enumerate() {
            busy_until.insert(p, onset + u64::from(t));
            notes.push(NoteEvent::new(if i == 0 { dt } else { 0 }, t, p));
        }
    }
    Score::from_notes(notes)
}

fn criterion_1() -> Outcome {
    let grid = build_grid(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut failures = 0;
    for i in 0..200 {
        let len = if i == 0 { 0 } else { rng.random_range(0..=300) };
        let score = random_score(&mut rng, len, grid.members());
        let division = [48u16, 96, 480, 960][i % 4];
        let back = write_midi(&score, division)
            .ok()
            .and_then(|bytes| parse_midi(&bytes).ok())
            .map(|song| score_from_notes(&ticks_to_quarters(&extract_notes(&song), song.division), &grid));
        if back.map(|b| b.notes) != Some(score.notes) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{} of 200 scores round-tripped exactly", 200 - failures))
}

// ---------------------------------------------------------------- 2

/// Exhaustive nearest candidate; ties resolve to the smaller value.
fn scan_nearest(candidates: impl Iterator<Item = u32>, x: Ratio<u64>) -> u32 {
    let dist = |c: u32| {
        let c = Ratio::from_integer(u64::from(c));
        if c > x {
            c - x
        } else {
            x - c
        }
    };
    candidates.fold(None, |best: Option<u32>, c| match best {
        Some(b) if dist(b) <= dist(c) => Some(b),
        _ => Some(c),
    })
    .expect("non-empty grid")
}

fn criterion_2() -> Outcome {
    let grid = build_grid(16);
    let members = grid.members().to_vec();
    let atoms = |a: u64| Ratio::new(a, u64::from(ATOMS_PER_QUARTER));
    let mut bad = Vec::new();

    for &m in &members {
        let q = atoms(u64::from(m));
        if quantize_duration(q, &grid) != m || quantize_shift(q, &grid) != m {
            bad.push(format!("idempotence at {m}"));
        }
    }
    if quantize_shift(Ratio::from_integer(0), &grid) != 0 {
        bad.push("idempotence at 0".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    for _ in 0..10_000 {
        let den: u64 = rng.random_range(1..=1000);
        let num: u64 = rng.random_range(1..=16 * den);
        let x = Ratio::new(num, den);
        let xa = x * u64::from(ATOMS_PER_QUARTER);
        let want_t = scan_nearest(members.iter().copied(), xa);
        let want_dt = scan_nearest(std::iter::once(0).chain(members.iter().copied()), xa);
        if quantize_duration(x, &grid) != want_t || quantize_shift(x, &grid) != want_dt {
            bad.push(format!("nearest at {x}"));
        }
    }

    let mut ties = 0;
    let mut lower = vec![0u32];
    lower.extend(&members);
    for w in lower.windows(2) {
        let mid = Ratio::new(u64::from(w[0] + w[1]), 2 * u64::from(ATOMS_PER_QUARTER));
        ties += 1;
        if quantize_shift(mid, &grid) != w[0] {
            bad.push(format!("shift tie between {} and {}", w[0], w[1]));
        }
        if w[0] > 0 && quantize_duration(mid, &grid) != w[0] {
            bad.push(format!("duration tie between {} and {}", w[0], w[1]));
        }
    }
    let detail = format!("{} members, 10000 random rationals, {ties} half-way cases, {} mismatches", members.len(), bad.len());
    outcome(bad.is_empty(), detail)
}

// ---------------------------------------------------------------- 3, 4

fn toy_dictionaries() -> Dictionaries {
    Dictionaries { dt: vec![0, 24], t: vec![24, 48], p: vec![60, 64] }
}

fn random_encoded(rng: &mut ChaCha8Rng, dicts: &Dictionaries, notes: usize) -> EncodedScore {
    let b = dicts.boundary_note();
    let mut e = EncodedScore::default();
    let mut push = |n: [usize; 3]| {
        e.dt.push(n[0]);
        e.t.push(n[1]);
        e.p.push(n[2]);
    };
    push(b);
    for _ in 0..notes {
        push([
            rng.random_range(0..dicts.dt.len()),
            rng.random_range(0..dicts.t.len()),
            rng.random_range(0..dicts.p.len()),
        ]);
    }
    push(b);
    e
}

/// Seeds fixed in advance, one per variant.
const GRAD_SEEDS: [(Variant, u64); 4] =
    [(Variant::BachProp, 21), (Variant::IndepBp, 22), (Variant::Mlp, 23), (Variant::PolyDac, 24)];

fn criterion_3() -> Outcome {
    let d = toy_dictionaries();
    let mut pass = true;
    let mut parts = Vec::new();
    for (variant, seed) in GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::with_architecture(Architecture::uniform(variant, 8), &d, &mut rng).unwrap();
        let songs = [random_encoded(&mut rng, &d, 5), random_encoded(&mut rng, &d, 2)];
        let refs: Vec<&EncodedScore> = songs.iter().collect();
        let state = model.zero_state(2);
        let window = model.window(&refs, 0, 4);
        let mut grads = vec![0.0; model.param_count()];
        model.train_window(&model.params, &mut state.clone(), &window, &mut grads).unwrap();
        let r = grad_check(|p| model.window_loss(p, &state, &window).unwrap(), &model.params, &grads, 1e-4);
        pass &= r.passed;
        parts.push(format!(
            "{variant} rel {:.1e} (|g|>={FD_RESOLUTION:.0e}: {:.1e}, abs {:.1e})",
            r.max_relative_error, r.resolved_relative_error, r.max_absolute_error
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4() -> Outcome {
    const N: usize = 16;
    let d = toy_dictionaries();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + i as u64);
        let model = Model::with_architecture(Architecture::uniform(variant, 8), &d, &mut rng).unwrap();
        // 2N predicted positions: boundary, 2N - 1 notes, boundary
        let song = random_encoded(&mut rng, &d, 2 * N - 1);
        let refs = [&song];
        let whole = model.forward_window(&mut model.zero_state(1), &model.window(&refs, 0, 2 * N)).unwrap();
        let mut state: HiddenState = model.zero_state(1);
        let first = model.forward_window(&mut state, &model.window(&refs, 0, N)).unwrap();
        let second = model.forward_window(&mut state, &model.window(&refs, N, N)).unwrap();
        let diff = (whole.total_ce() - (first.total_ce() + second.total_ce())).abs();
        worst = worst.max(diff);
        parts.push(format!("{variant} {diff:.1e}"));
    }
    outcome(worst <= 1e-12, format!("|NLL(2N) - NLL(N) - NLL(N)|: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 5

struct OverfitRun {
    log: TrainLog,
    params: Vec<f64>,
}

fn overfit_run() -> OverfitRun {
    let songs: Vec<Score> = chorale_corpus(3, 505)
        .into_iter()
        .map(|mut s| {
            s.notes.truncate(60);
            s
        })
        .collect();
    let d = build_dictionaries(&songs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::build(Variant::BachProp, &d, &mut rng).unwrap();
    let config = TrainConfig {
        batch_size: 3,
        max_epochs: 2000,
        augment: false,
        target_accuracy: Some(0.9),
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &songs, &[], &config, &mut rng, |_| {}).unwrap();
    OverfitRun { log, params: model.params }
}

fn criterion_5(run: &OverfitRun, secs: f64) -> Outcome {
    let last = run.log.last().unwrap();
    let acc = last.train_acc;
    let pass = acc.iter().all(|&a| a >= 0.9) && secs < 300.0;
    outcome(
        pass,
        format!(
            "train acc {:.3}/{:.3}/{:.3} after {} epochs, {secs:.0} s",
            acc[0],
            acc[1],
            acc[2],
            run.log.epochs.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Fixed probabilities for every head, regardless of history.
struct FixedHeads {
    dicts: Dictionaries,
    logits: Vec<f64>,
}

impl NoteModel for FixedHeads {
    type State = ();

    fn dictionaries(&self) -> &Dictionaries {
        &self.dicts
    }

    fn initial_state(&self) {}

    fn forward_note(&self, _: &mut (), _: [usize; 3]) -> Result<(), bachprop::model::ModelError> {
        Ok(())
    }

    fn head_logits(&self, _: &(), _: &[usize]) -> Result<Vec<f64>, bachprop::model::ModelError> {
        Ok(self.logits.clone())
    }
}

fn criterion_6() -> Outcome {
    const DRAWS: usize = 10_000;
    let probs = [0.1, 0.2, 0.7];
    let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
    // chi-square with 2 degrees of freedom has survival exp(-x/2)
    let critical = -2.0 * 0.001f64.ln();

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut counts = [0usize; 3];
    for _ in 0..DRAWS {
        counts[sample_index(&logits, 1.0, &mut rng).unwrap()] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, p)| {
            let e = p * DRAWS as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();

    // whole notes through the staged sampler; index 2 is the boundary, so
    // max_notes bounds the song and greedy draws never stop early
    let model = FixedHeads { dicts: Dictionaries { dt: vec![0, 48], t: vec![24, 48], p: vec![60, 62] }, logits };
    let config = SamplerConfig { temperature: 1e-6, max_notes: 100, seed: 0 };
    let greedy = generate_score(&model, &config, &mut rng).unwrap();
    let argmax_ok = greedy.is_empty();
    let mut greedy_draws = 0;
    for _ in 0..DRAWS {
        greedy_draws += usize::from(sample_index(&model.logits, 1e-6, &mut rng).unwrap() == 2);
    }
    let pass = chi2 < critical && argmax_ok && greedy_draws == DRAWS;
    outcome(
        pass,
        format!(
            "counts {counts:?}, chi2 {chi2:.3} < {critical:.4}; tau 1e-6 argmax {greedy_draws}/{DRAWS}, greedy song stops at once: {argmax_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn naive_novelty(song: &Score, m: usize, reference: &[&Score]) -> f64 {
    let windows = song.len() - m + 1;
    let novel = (0..windows)
        .filter(|&i| {
            let pat = &song.notes[i..i + m];
            !reference.iter().any(|r| r.len() >= m && (0..=r.len() - m).any(|j| &r.notes[j..j + m] == pat))
        })
        .count();
    novel as f64 / windows as f64
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut checks = 0usize;
    let mut bad = 0usize;
    for _ in 0..100 {
        let alphabet_size = rng.random_range(1..=4);
        let alphabet: Vec<NoteEvent> =
            (0..alphabet_size).map(|i| NoteEvent::new(24 * (i as u32 % 2), 48, 60 + i as u8)).collect();
        let n_songs = rng.random_range(2..=10);
        let corpus: Vec<Score> = (0..n_songs)
            .map(|_| {
                let len = rng.random_range(0..=30);
                Score::from_notes((0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect())
            })
            .collect();
        let disjoint: Vec<Score> = corpus.iter().map(|s| s.transposed(12)).collect();
        let all: Vec<&Score> = corpus.iter().collect();

        for m in 2..=6 {
            let auto = auto_novelty(&corpus, &[m]).unwrap().scores.remove(0);
            let mut expect_auto = Vec::new();
            for (i, song) in corpus.iter().enumerate() {
                if song.len() < m {
                    checks += 1;
                    bad += usize::from(!matches!(song_novelty(song, m, &corpus), Err(MetricsError::SongTooShort { .. })));
                    continue;
                }
                let others: Vec<&Score> = all.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| *s).collect();
                expect_auto.push(naive_novelty(song, m, &others));
                let indexed = song_novelty(song, m, &corpus).unwrap();
                let against_disjoint = song_novelty(song, m, &disjoint).unwrap();
                checks += 3;
                bad += usize::from(indexed != naive_novelty(song, m, &all));
                bad += usize::from(indexed != 0.0);
                bad += usize::from(against_disjoint != 1.0);
            }
            checks += 1;
            bad += usize::from(auto != expect_auto);
        }
    }
    outcome(bad == 0, format!("{checks} comparisons against the naive scan, {bad} mismatches"))
}

// ---------------------------------------------------------------- 8, 9

const LEARNING_RATES: [f64; 3] = [1e-3, 3e-3, 1e-2];
const COMPARED: [Variant; 3] = [Variant::BachProp, Variant::IndepBp, Variant::Mlp];

struct TableRun {
    train_set: Vec<Score>,
    /// Per variant: (learning rate, validation NLL at the kept epoch).
    grid: Vec<(Variant, Vec<(f64, f64)>)>,
    logs: Vec<String>,
    best_bachprop: Model,
}

fn table_run() -> TableRun {
    let corpus = chorale_corpus(50, 1);
    let dicts = build_dictionaries_augmented(&corpus).unwrap();
    let mut split_rng = ChaCha8Rng::seed_from_u64(0);
    let (train_set, valid_set) = split_corpus(&corpus, 0.1, &mut split_rng);
    let mut grid = Vec::new();
    let mut logs = Vec::new();
    let mut best_bachprop: Option<(f64, Model)> = None;
    for variant in COMPARED {
        let mut row = Vec::new();
        for lr in LEARNING_RATES {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut model = Model::build(variant, &dicts, &mut rng).unwrap();
            let config = TrainConfig {
                batch_size: 4,
                trunc_len: 128,
                max_epochs: 30,
                patience: 30,
                learning_rate: lr,
                ..TrainConfig::default()
            };
            let log = train(&mut model, &train_set, &valid_set, &config, &mut rng, |_| {}).unwrap();
            let nll = log.best().and_then(|e| e.val_nll).unwrap();
            eprintln!("  {variant} lr {lr:e}: val nll {nll:.4} (kept epoch {})", log.best_epoch);
            logs.push(format!("{variant} {lr:e}\n{}", log.to_csv()));
            row.push((lr, nll));
            if variant == Variant::BachProp && best_bachprop.as_ref().is_none_or(|(b, _)| nll < *b) {
                best_bachprop = Some((nll, model));
            }
        }
        grid.push((variant, row));
    }
    TableRun { train_set, grid, logs, best_bachprop: best_bachprop.unwrap().1 }
}

fn best_nll(run: &TableRun, variant: Variant) -> (f64, f64) {
    let row = &run.grid.iter().find(|(v, _)| *v == variant).unwrap().1;
    row.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap()
}

fn criterion_8(run: &TableRun, secs: f64) -> Outcome {
    let [bp, ind, mlp] = COMPARED.map(|v| best_nll(run, v));
    let pass = bp.1 < ind.1 && bp.1 < mlp.1 && secs < 3600.0;
    outcome(
        pass,
        format!(
            "val NLL BachProp {:.4} (lr {:e}), IndepBP {:.4} (lr {:e}), MLP {:.4} (lr {:e}); {secs:.0} s",
            bp.1, bp.0, ind.1, ind.0, mlp.1, mlp.0
        ),
    )
}

struct SampleRun {
    songs: Vec<String>,
    distances: BTreeMap<&'static str, f64>,
}

fn sample_run(table: &TableRun) -> SampleRun {
    let config = SamplerConfig { temperature: 1.0, max_notes: 1000, seed: 9 };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let generated: Vec<Score> = (0..table.train_set.len())
        .map(|_| generate_score(&table.best_bachprop, &config, &mut rng).unwrap())
        .collect();
    let a = local_histograms(&generated).unwrap();
    let b = local_histograms(&table.train_set).unwrap();
    let distances = BTreeMap::from([("dt", histogram_distance(&a.dt, &b.dt)), ("t", histogram_distance(&a.t, &b.t))]);
    SampleRun { songs: generated.iter().map(Score::to_note_list).collect(), distances }
}

fn criterion_9(run: &SampleRun) -> Outcome {
    let worst = run.distances.values().copied().fold(0.0, f64::max);
    let detail = format!(
        "{} generated songs; TV distance dT {:.4}, T {:.4}",
        run.songs.len(),
        run.distances["dt"],
        run.distances["t"]
    );
    if worst < 0.25 {
        outcome(true, detail)
    } else if worst <= 0.4 {
        outcome(false, format!("{detail} (soft band 0.25-0.4, reported only)"))
    } else {
        outcome(false, detail)
    }
}

// ---------------------------------------------------------------- main

fn main() {
    // behave like an ordinary test binary when listed or filtered
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    let mut lines: Vec<(u8, bool, Outcome)> = Vec::new();
    let mut report = |id: u8, gating: bool, o: Outcome| {
        println!("criterion {id:2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((id, gating, o));
    };

    report(1, true, criterion_1());
    report(2, true, criterion_2());
    report(3, false, criterion_3());
    report(4, true, criterion_4());

    let t = Instant::now();
    let overfit = overfit_run();
    let overfit_secs = t.elapsed().as_secs_f64();
    report(5, false, criterion_5(&overfit, overfit_secs));
    report(6, true, criterion_6());
    report(7, true, criterion_7());

    let t = Instant::now();
    let table = table_run();
    let table_secs = t.elapsed().as_secs_f64();
    report(8, false, criterion_8(&table, table_secs));
    let samples = sample_run(&table);
    report(9, false, criterion_9(&samples));

    let overfit_again = overfit_run();
    let table_again = table_run();
    let samples_again = sample_run(&table_again);
    let same_5 = overfit.log.to_csv() == overfit_again.log.to_csv() && overfit.params == overfit_again.params;
    let same_8 = table.logs == table_again.logs && table.best_bachprop.params == table_again.best_bachprop.params;
    let same_9 = samples.songs == samples_again.songs && samples.distances == samples_again.distances;
    report(
        10,
        true,
        outcome(same_5 && same_8 && same_9, format!("identical reruns: 5 {same_5}, 8 {same_8}, 9 {same_9}")),
    );

    let passed = lines.iter().filter(|l| l.2.pass).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
    let broken: Vec<u8> = lines.iter().filter(|l| l.1 && !l.2.pass).map(|l| l.0).collect();
    if !broken.is_empty() {
        eprintln!("exact criteria failed: {broken:?}");
        std::process::exit(1);
    }
}
