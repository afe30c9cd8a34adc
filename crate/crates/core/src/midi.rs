//! Standard MIDI File decoding and encoding.
//!
//! Only note-on / note-off channel messages carry meaning here; every other
//! event is kept as [`MessageKind::Other`] so that its delta time still
//! advances the track clock.

use num_rational::Ratio;
use thiserror::Error;

use crate::score::{Score, ATOMS_PER_QUARTER};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported MIDI file: {0}")]
    UnsupportedFormat(String),
    #[error("truncated chunk at byte {0}")]
    TruncatedChunk(usize),
    #[error("note duration of {atoms} atoms is not representable with division {division}")]
    NonRepresentableDuration { atoms: u64, division: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    NoteOn,
    NoteOff,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MidiMessage {
    pub delta: u32,
    pub kind: MessageKind,
    pub channel: u8,
    pub pitch: u8,
    pub velocity: u8,
}

impl MidiMessage {
    fn other(delta: u32) -> Self {
        MidiMessage { delta, kind: MessageKind::Other, channel: 0, pitch: 0, velocity: 0 }
    }

    /// Note-on with velocity zero counts as a release.
    pub fn is_release(&self) -> bool {
        self.kind == MessageKind::NoteOff || (self.kind == MessageKind::NoteOn && self.velocity == 0)
    }

    pub fn is_press(&self) -> bool {
        self.kind == MessageKind::NoteOn && self.velocity > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiSong {
    /// Ticks per quarter note.
    pub division: u16,
    pub tracks: Vec<Vec<MidiMessage>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimedNote {
    pub onset: u64,
    pub duration: u64,
    pub pitch: u8,
}

/// A note with onset and duration measured in quarter notes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuarterNote {
    pub onset: Ratio<u64>,
    pub duration: Ratio<u64>,
    pub pitch: u8,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(MidiError::TruncatedChunk(self.pos)),
        }
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        // more than four continuation bytes is not a valid quantity
        Err(MidiError::TruncatedChunk(self.pos))
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

pub fn parse_midi(bytes: &[u8]) -> Result<MidiSong, MidiError> {
    if bytes.len() < 14 || &bytes[0..4] != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd magic"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader("header chunk shorter than 6 bytes"));
    }
    let header = r.take(header_len).map_err(|_| MidiError::MalformedHeader("header chunk truncated"))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("format 2 (independent sequences)".into())),
        other => return Err(MidiError::UnsupportedFormat(format!("format {other}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("division is zero"));
    }

    let mut tracks = Vec::with_capacity(ntracks as usize);
    while tracks.len() < ntracks as usize && !r.done() {
        let start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body = r.take(len).map_err(|_| MidiError::TruncatedChunk(start))?;
        if id == b"MTrk" {
            tracks.push(parse_track(body, start + 8)?);
        }
        // unknown chunk types are skipped
    }
    if tracks.len() < ntracks as usize {
        return Err(MidiError::TruncatedChunk(r.pos));
    }
    Ok(MidiSong { division, tracks })
}

fn parse_track(body: &[u8], base: usize) -> Result<Vec<MidiMessage>, MidiError> {
    let mut r = Reader { bytes: body, pos: 0 };
    let mut out = Vec::new();
    let mut running: Option<u8> = None;
    let offset = |e: MidiError| match e {
        MidiError::TruncatedChunk(p) => MidiError::TruncatedChunk(base + p),
        e => e,
    };
    while !r.done() {
        let delta = r.vlq().map_err(offset)?;
        let first = r.u8().map_err(offset)?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => return Err(MidiError::TruncatedChunk(base + r.pos - 1)),
            }
        };
        match status {
            0xff => {
                let kind = r.u8().map_err(offset)?;
                let len = r.vlq().map_err(offset)? as usize;
                r.take(len).map_err(offset)?;
                out.push(MidiMessage::other(delta));
                if kind == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq().map_err(offset)? as usize;
                r.take(len).map_err(offset)?;
                out.push(MidiMessage::other(delta));
            }
            0x80..=0xef => {
                running = Some(status);
                let n_data = if matches!(status & 0xf0, 0xc0 | 0xd0) { 1 } else { 2 };
                let d0 = match first_data {
                    Some(d) => d,
                    None => r.u8().map_err(offset)?,
                };
                let d1 = if n_data == 2 { r.u8().map_err(offset)? } else { 0 };
                let channel = status & 0x0f;
                let kind = match status & 0xf0 {
                    0x90 => MessageKind::NoteOn,
                    0x80 => MessageKind::NoteOff,
                    _ => MessageKind::Other,
                };
                if kind == MessageKind::Other {
                    out.push(MidiMessage::other(delta));
                } else {
                    out.push(MidiMessage { delta, kind, channel, pitch: d0 & 0x7f, velocity: d1 & 0x7f });
                }
            }
            // system common / realtime bytes inside a file carry no payload we need
            _ => out.push(MidiMessage::other(delta)),
        }
    }
    Ok(out)
}

/// Merges all tracks onto one timeline and pairs each press with the first
/// later release of the same pitch. Open presses are queued per pitch, so the
/// earliest open press is the one a release closes.
pub fn extract_notes(song: &MidiSong) -> Vec<TimedNote> {
    // (tick, 0 = release / 1 = press, pitch)
    let mut events: Vec<(u64, u8, u8)> = Vec::new();
    let mut last_tick = 0u64;
    for track in &song.tracks {
        let mut tick = 0u64;
        for msg in track {
            tick += u64::from(msg.delta);
            if msg.is_release() {
                events.push((tick, 0, msg.pitch));
            } else if msg.is_press() {
                events.push((tick, 1, msg.pitch));
            }
        }
        last_tick = last_tick.max(tick);
    }
    // Releases sort before presses at the same tick: a release never closes a
    // note that starts on the same tick.
    events.sort_unstable();

    let mut open: Vec<std::collections::VecDeque<u64>> = vec![Default::default(); 128];
    let mut notes = Vec::new();
    for (tick, kind, pitch) in events {
        let queue = &mut open[pitch as usize];
        if kind == 1 {
            queue.push_back(tick);
        } else if let Some(onset) = queue.pop_front() {
            notes.push(TimedNote { onset, duration: tick - onset, pitch });
        }
    }
    for (pitch, queue) in open.into_iter().enumerate() {
        for onset in queue {
            if last_tick > onset {
                notes.push(TimedNote { onset, duration: last_tick - onset, pitch: pitch as u8 });
            }
        }
    }
    notes.sort_unstable_by_key(|n| (n.onset, n.pitch, n.duration));
    notes
}

pub fn ticks_to_quarters(notes: &[TimedNote], division: u16) -> Vec<QuarterNote> {
    let div = u64::from(division);
    notes
        .iter()
        .map(|n| QuarterNote {
            onset: Ratio::new(n.onset, div),
            duration: Ratio::new(n.duration, div),
            pitch: n.pitch,
        })
        .collect()
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7f) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn atoms_to_ticks(atoms: u64, division: u16) -> Result<u64, MidiError> {
    let scaled = atoms * u64::from(division);
    if scaled % ATOMS_PER_QUARTER as u64 != 0 {
        return Err(MidiError::NonRepresentableDuration { atoms, division });
    }
    Ok(scaled / ATOMS_PER_QUARTER as u64)
}

/// Writes a format-0 file, one track, velocity 64, no running status.
///
/// Reading the file back reproduces the score exactly provided notes of equal
/// pitch never overlap in time (MIDI cannot tell overlapping same-pitch
/// notes apart).
pub fn write_midi(score: &Score, division: u16) -> Result<Vec<u8>, MidiError> {
    if division == 0 || division & 0x8000 != 0 {
        return Err(MidiError::MalformedHeader("division must be in 1..=32767"));
    }
    let mut events: Vec<(u64, u8, u8)> = Vec::with_capacity(score.notes.len() * 2);
    let mut onset_atoms = 0u64;
    for note in &score.notes {
        onset_atoms += u64::from(note.dt);
        let on = atoms_to_ticks(onset_atoms, division)?;
        let dur = atoms_to_ticks(u64::from(note.t), division)?;
        events.push((on, 1, note.p));
        events.push((on + dur, 0, note.p));
    }
    events.sort_unstable();

    let mut track = Vec::new();
    let mut now = 0u64;
    for (tick, kind, pitch) in events {
        let delta = u32::try_from(tick - now)
            .map_err(|_| MidiError::NonRepresentableDuration { atoms: tick - now, division })?;
        write_vlq(&mut track, delta);
        let status = if kind == 1 { 0x90 } else { 0x80 };
        track.extend_from_slice(&[status, pitch & 0x7f, 64]);
        now = tick;
    }
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&division.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
