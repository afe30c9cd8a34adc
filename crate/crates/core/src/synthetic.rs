//! Seeded four-voice chorale-like scores.
//!
//! Phrases of block chords over I, ii, IV, V, vi in a major key with smooth
//! voice leading, held common tones, eighth-note passing tones and a fermata
//! on every cadence. Used where no real chorale corpus is at hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::score::{NoteEvent, Score};

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const RANGES: [(i32, i32); 4] = [(40, 60), (48, 67), (55, 72), (60, 79)];
const QUARTER: u32 = 48;

#[derive(Debug, Clone, Copy)]
struct Voiced {
    onset: u32,
    duration: u32,
    pitch: i32,
}

fn chord_tones(tonic: i32, degree: usize) -> [i32; 3] {
    let pc = |d: usize| tonic + MAJOR[d % 7] + 12 * (d / 7) as i32;
    [pc(degree), pc(degree + 2), pc(degree + 4)]
}

fn next_degree<R: Rng>(rng: &mut R, from: usize) -> usize {
    let choices: &[usize] = match from {
        0 => &[3, 4, 5, 1, 3, 4],
        1 => &[4],
        3 => &[4, 0, 1, 4],
        4 => &[0, 0, 5],
        5 => &[1, 3, 3],
        _ => &[0],
    };
    choices[rng.random_range(0..choices.len())]
}

/// Pitch of a chord tone (any octave) closest to `prev` within `range` and
/// strictly above `floor`.
fn nearest_tone(tones: &[i32; 3], prev: i32, (lo, hi): (i32, i32), floor: i32) -> i32 {
    (lo.max(floor + 1)..=hi)
        .filter(|p| tones.iter().any(|t| (p - t).rem_euclid(12) == 0))
        .min_by_key(|p| ((p - prev).abs(), *p))
        .unwrap_or(floor + 1)
}

fn in_scale(tonic: i32, p: i32) -> bool {
    MAJOR.contains(&(p - tonic).rem_euclid(12))
}

/// One song of `phrases` phrases.
pub fn chorale<R: Rng>(rng: &mut R, phrases: usize) -> Score {
    let tonic = [0, 2, 5, 7, 9, 10][rng.random_range(0..6)];
    let mut notes: Vec<Voiced> = Vec::new();
    let mut prev = [48 + tonic, 55 + tonic, 64 + tonic, 72 + tonic];
    let mut onset = 0;
    // last sounding note of each voice, for ties and passing tones
    let mut open: [Option<usize>; 4] = [None; 4];
    for phrase in 0..phrases {
        let len = rng.random_range(6..=8);
        let mut degree = 0;
        let mut degrees = vec![0];
        for _ in 1..len - 2 {
            degree = next_degree(rng, degree);
            degrees.push(degree);
        }
        let half_cadence = phrase + 1 < phrases && rng.random_bool(0.3);
        degrees.push(if half_cadence { 1 } else { 4 });
        degrees.push(if half_cadence { 4 } else { 0 });
        for (i, &deg) in degrees.iter().enumerate() {
            let fermata = i + 1 == degrees.len();
            let dur = if fermata { 2 * QUARTER } else { QUARTER };
            let tones = chord_tones(tonic, deg);
            let mut voicing = [0; 4];
            voicing[0] = nearest_tone(&[tones[0]; 3], prev[0], RANGES[0], 0);
            for v in 1..4 {
                voicing[v] = nearest_tone(&tones, prev[v], RANGES[v], voicing[v - 1]);
            }
            for v in 0..4 {
                let held = open[v].filter(|&k| {
                    let n = notes[k];
                    n.pitch == voicing[v] && n.onset + n.duration == onset && rng.random_bool(0.5)
                });
                match held {
                    Some(k) => notes[k].duration += dur,
                    None => {
                        // passing tone filling a third in the previous beat
                        if let Some(k) = open[v] {
                            let n = notes[k];
                            let step = voicing[v] - n.pitch;
                            let mid = n.pitch + step / 2;
                            if n.duration == QUARTER
                                && n.onset + QUARTER == onset
                                && step.abs() >= 3
                                && step.abs() <= 4
                                && in_scale(tonic, mid)
                                && !prev.contains(&mid)
                                && rng.random_bool(0.4)
                            {
                                notes[k].duration = QUARTER / 2;
                                notes.push(Voiced { onset: n.onset + QUARTER / 2, duration: QUARTER / 2, pitch: mid });
                            }
                        }
                        open[v] = Some(notes.len());
                        notes.push(Voiced { onset, duration: dur, pitch: voicing[v] });
                    }
                }
            }
            prev = voicing;
            onset += dur;
        }
    }
    notes.sort_by_key(|n| (n.onset, n.pitch, n.duration));
    let mut last = 0;
    let events = notes
        .iter()
        .map(|n| {
            let e = NoteEvent::new(n.onset - last, n.duration, n.pitch as u8);
            last = n.onset;
            e
        })
        .collect();
    Score::from_notes(events)
}

/// `count` songs of four phrases each, reproducible from `seed`.
pub fn chorale_corpus(count: usize, seed: u64) -> Vec<Score> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut s = chorale(&mut rng, 4);
            s.name = format!("synthetic_{i:03}");
            s
        })
        .collect()
}
