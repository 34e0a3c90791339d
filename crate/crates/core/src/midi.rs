//! Standard MIDI File reading and writing.
//!
//! Only the subset the rest of the pipeline needs is modelled: notes, tempo
//! changes and the time signature. Controllers, pitch bend, aftertouch and
//! SysEx are skipped on read and never written.
//!
//! Multi-track files are merged into one note list; every note remembers the
//! index of the `MTrk` chunk it came from in `track_id`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tempo of a MIDI file without a set-tempo event (120 BPM).
pub const DEFAULT_MICROS_PER_QUARTER: u32 = 500_000;

/// Largest value a variable-length quantity can hold (four bytes of seven bits).
pub const MAX_VLQ: u64 = 0x0FFF_FFFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated chunk at byte offset {offset}")]
    TruncatedChunk { offset: usize },
    #[error("note-on without matching note-off: pitch {pitch} at tick {tick}")]
    UnmatchedNoteOn { tick: u64, pitch: u8 },
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("malformed event at byte offset {offset}: {reason}")]
    MalformedEvent { offset: usize, reason: &'static str },
    #[error("delta time {delta} exceeds the variable-length quantity range")]
    TickOverflow { delta: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub pitch: u8,
    pub velocity: u8,
    pub track_id: u16,
}

impl NoteEvent {
    pub fn new(onset_ticks: u64, duration_ticks: u64, pitch: u8, velocity: u8) -> Self {
        Self { onset_ticks, duration_ticks, pitch, velocity, track_id: 0 }
    }

    pub fn offset_ticks(&self) -> u64 {
        self.onset_ticks + self.duration_ticks
    }

    pub fn is_valid(&self) -> bool {
        self.pitch <= 127 && (1..=127).contains(&self.velocity) && self.duration_ticks >= 1
    }

    fn sort_key(&self) -> (u64, u8, u16, u64, u8) {
        (self.onset_ticks, self.pitch, self.track_id, self.duration_ticks, self.velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoEvent {
    pub tick: u64,
    pub micros_per_quarter: u32,
}

impl TempoEvent {
    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.micros_per_quarter as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl Default for TimeSignature {
    fn default() -> Self {
        Self { numerator: 4, denominator: 4 }
    }
}

/// The semantic content of a MIDI file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub ticks_per_quarter: u16,
    pub tempo_events: Vec<TempoEvent>,
    pub time_signature: TimeSignature,
    pub notes: Vec<NoteEvent>,
}

impl Score {
    pub fn new(ticks_per_quarter: u16) -> Self {
        Self {
            ticks_per_quarter,
            tempo_events: Vec::new(),
            time_signature: TimeSignature::default(),
            notes: Vec::new(),
        }
    }

    pub fn with_notes(ticks_per_quarter: u16, notes: Vec<NoteEvent>) -> Self {
        let mut score = Self::new(ticks_per_quarter);
        score.notes = notes;
        score.sort();
        score
    }

    /// Sorts notes by `(onset, pitch)`, breaking the remaining ties on the
    /// other fields so the order is canonical, and tempo events by tick.
    pub fn sort(&mut self) {
        self.notes.sort_by_key(NoteEvent::sort_key);
        self.tempo_events.sort_by_key(|t| t.tick);
    }

    /// Sorted copy with a tempo event at tick 0 (120 BPM if none was present).
    pub fn normalized(&self) -> Score {
        let mut out = self.clone();
        out.sort();
        if out.tempo_events.first().map_or(true, |t| t.tick != 0) {
            out.tempo_events.insert(
                0,
                TempoEvent { tick: 0, micros_per_quarter: DEFAULT_MICROS_PER_QUARTER },
            );
        }
        out
    }

    pub fn ticks_per_bar(&self) -> u64 {
        let ts = self.time_signature;
        4 * self.ticks_per_quarter as u64 * ts.numerator as u64 / ts.denominator.max(1) as u64
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Checks the container invariants: positive resolution, valid notes in
    /// canonical order.
    pub fn is_valid(&self) -> bool {
        self.ticks_per_quarter > 0
            && self.notes.iter().all(NoteEvent::is_valid)
            && self.notes.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(MidiError::TruncatedChunk { offset: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::TruncatedChunk { offset: self.pos });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u64, MidiError> {
        let start = self.pos;
        let mut value = 0u64;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7F) as u64;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedEvent { offset: start, reason: "variable-length quantity longer than 4 bytes" })
    }

    fn data_byte(&mut self) -> Result<u8, MidiError> {
        let offset = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(MidiError::MalformedEvent { offset, reason: "data byte with high bit set" });
        }
        Ok(b)
    }
}

#[derive(Default)]
struct TrackContent {
    notes: Vec<NoteEvent>,
    tempos: Vec<TempoEvent>,
    time_signature: Option<TimeSignature>,
}

fn parse_track(data: &[u8], base: usize, track_id: u16) -> Result<TrackContent, MidiError> {
    let mut r = Reader::new(data);
    let mut out = TrackContent::default();
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    // (channel, pitch) -> (onset, velocity)
    let mut active: HashMap<(u8, u8), (u64, u8)> = HashMap::new();

    let close = |active: &mut HashMap<(u8, u8), (u64, u8)>, notes: &mut Vec<NoteEvent>, key: (u8, u8), tick: u64| {
        if let Some((onset, velocity)) = active.remove(&key) {
            if tick > onset {
                notes.push(NoteEvent {
                    onset_ticks: onset,
                    duration_ticks: tick - onset,
                    pitch: key.1,
                    velocity,
                    track_id,
                });
            }
        }
    };

    while r.remaining() > 0 {
        tick += r.vlq().map_err(|e| shift_offset(e, base))?;
        let offset = r.pos;
        let first = r.u8().map_err(|e| shift_offset(e, base))?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            // running status: `first` is already the first data byte
            r.pos -= 1;
            running.ok_or(MidiError::MalformedEvent { offset: base + offset, reason: "data byte without running status" })?
        };

        match status {
            0xFF => {
                running = None;
                let kind = r.u8().map_err(|e| shift_offset(e, base))?;
                let len = r.vlq().map_err(|e| shift_offset(e, base))? as usize;
                let body = r.take(len).map_err(|e| shift_offset(e, base))?;
                match kind {
                    0x2F => break,
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, body[0], body[1], body[2]]);
                        if us == 0 {
                            return Err(MidiError::MalformedEvent { offset: base + offset, reason: "zero tempo" });
                        }
                        out.tempos.push(TempoEvent { tick, micros_per_quarter: us });
                    }
                    0x58 if len == 4 => {
                        if out.time_signature.is_none() && body[1] < 8 {
                            out.time_signature = Some(TimeSignature { numerator: body[0], denominator: 1u8 << body[1] });
                        }
                    }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq().map_err(|e| shift_offset(e, base))? as usize;
                r.take(len).map_err(|e| shift_offset(e, base))?;
            }
            0xF1..=0xFE => {
                return Err(MidiError::MalformedEvent { offset: base + offset, reason: "system message inside a track" });
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0F;
                let argc = match status & 0xF0 {
                    0xC0 | 0xD0 => 1,
                    _ => 2,
                };
                let a = r.data_byte().map_err(|e| shift_offset(e, base))?;
                let b = if argc == 2 { r.data_byte().map_err(|e| shift_offset(e, base))? } else { 0 };
                match status & 0xF0 {
                    0x90 if b > 0 => {
                        // last-on-wins for overlapping notes of one pitch
                        close(&mut active, &mut out.notes, (channel, a), tick);
                        active.insert((channel, a), (tick, b));
                    }
                    0x80 | 0x90 => close(&mut active, &mut out.notes, (channel, a), tick),
                    _ => {}
                }
            }
        }
    }

    if let Some((&(_, pitch), &(onset, _))) = active.iter().min_by_key(|(k, v)| (v.0, k.1)) {
        return Err(MidiError::UnmatchedNoteOn { tick: onset, pitch });
    }
    Ok(out)
}

fn shift_offset(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::TruncatedChunk { offset } => MidiError::TruncatedChunk { offset: offset + base },
        MidiError::MalformedEvent { offset, reason } => MidiError::MalformedEvent { offset: offset + base, reason },
        other => other,
    }
}

/// Parses a format 0 or format 1 Standard MIDI File.
pub fn parse_smf(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4).map_err(|_| MidiError::MalformedHeader("file shorter than a header".into()))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd magic".into()));
    }
    let len = r.u32().map_err(|_| MidiError::MalformedHeader("truncated header".into()))? as usize;
    if len < 6 {
        return Err(MidiError::MalformedHeader(format!("header length {len} < 6")));
    }
    let header = r.take(len).map_err(|_| MidiError::MalformedHeader("truncated header".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntrks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat(2)),
        f => return Err(MidiError::MalformedHeader(format!("unknown format {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::MalformedHeader("SMPTE time division is not supported".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter".into()));
    }

    let mut score = Score::new(division);
    let mut time_signature = None;
    let mut track_id = 0u16;
    while track_id < ntrks {
        let offset = r.pos;
        if r.remaining() < 8 {
            return Err(MidiError::TruncatedChunk { offset });
        }
        let kind = r.take(4)?;
        let is_track = kind == b"MTrk";
        let len = r.u32()? as usize;
        let body_start = r.pos;
        let body = r.take(len).map_err(|_| MidiError::TruncatedChunk { offset })?;
        if !is_track {
            continue;
        }
        let content = parse_track(body, body_start, track_id)?;
        score.notes.extend(content.notes);
        score.tempo_events.extend(content.tempos);
        if time_signature.is_none() {
            time_signature = content.time_signature;
        }
        track_id += 1;
    }
    score.time_signature = time_signature.unwrap_or_default();
    score.sort();
    Ok(score)
}

fn push_vlq(out: &mut Vec<u8>, value: u64) -> Result<(), MidiError> {
    if value > MAX_VLQ {
        return Err(MidiError::TickOverflow { delta: value });
    }
    let mut groups = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        groups[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { groups[i] | 0x80 } else { groups[i] });
    }
    Ok(())
}

/// Serializes a score as a format-1 SMF.
///
/// Track chunk `k` holds the notes with `track_id == k`; the time signature
/// and tempo map go into chunk 0. Notes sharing a pitch on one track must
/// not overlap, otherwise the file re-parses with last-on-wins semantics.
pub fn write_smf(score: &Score) -> Result<Vec<u8>, MidiError> {
    let ntrks = score.notes.iter().map(|n| n.track_id as usize + 1).max().unwrap_or(1);
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(ntrks as u16).to_be_bytes());
    out.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());

    for track in 0..ntrks {
        // (tick, order, message) with note-offs before metas before note-ons
        let mut events: Vec<(u64, u8, Vec<u8>)> = Vec::new();
        if track == 0 {
            let ts = score.time_signature;
            let dd = ts.denominator.max(1).trailing_zeros() as u8;
            events.push((0, 1, vec![0xFF, 0x58, 4, ts.numerator, dd, 24, 8]));
            for t in &score.tempo_events {
                let us = t.micros_per_quarter.to_be_bytes();
                events.push((t.tick, 1, vec![0xFF, 0x51, 3, us[1], us[2], us[3]]));
            }
        }
        for n in score.notes.iter().filter(|n| n.track_id as usize == track) {
            events.push((n.onset_ticks, 2, vec![0x90, n.pitch, n.velocity]));
            events.push((n.offset_ticks(), 0, vec![0x80, n.pitch, 0]));
        }
        events.sort_by_key(|e| (e.0, e.1));

        let mut body = Vec::new();
        let mut last = 0u64;
        for (tick, _, msg) in &events {
            push_vlq(&mut body, tick - last)?;
            body.extend_from_slice(msg);
            last = *tick;
        }
        body.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn smf(tpq: u16, tracks: &[Vec<u8>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&tpq.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    #[test]
    fn single_hand_built_note() {
        // delta 0 note-on C4 vel 64, delta 480 note-off, end of track
        let track = vec![0x00, 0x90, 60, 64, 0x83, 0x60, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00];
        let score = parse_smf(&smf(480, &[track])).unwrap();
        assert_eq!(score.ticks_per_quarter, 480);
        assert_eq!(score.notes, vec![NoteEvent::new(0, 480, 60, 64)]);
    }

    #[test]
    fn tempo_only_file() {
        let track = vec![0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, 0x00, 0xFF, 0x2F, 0x00];
        let score = parse_smf(&smf(96, &[track])).unwrap();
        assert!(score.notes.is_empty());
        assert_eq!(score.tempo_events, vec![TempoEvent { tick: 0, micros_per_quarter: 500_000 }]);
    }

    #[test]
    fn running_status_matches_explicit_status() {
        let mut explicit = Vec::new();
        let mut running = Vec::new();
        for i in 0..8u8 {
            let pitch = 60 + i;
            explicit.extend_from_slice(&[0x00, 0x90, pitch, 90, 0x60, 0x90, pitch, 0]);
            if i == 0 {
                running.extend_from_slice(&[0x00, 0x90, pitch, 90, 0x60, pitch, 0]);
            } else {
                running.extend_from_slice(&[0x00, pitch, 90, 0x60, pitch, 0]);
            }
        }
        for t in [&mut explicit, &mut running] {
            t.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        }
        assert_ne!(explicit, running);
        let a = parse_smf(&smf(96, &[explicit])).unwrap();
        let b = parse_smf(&smf(96, &[running])).unwrap();
        assert_eq!(a.notes.len(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn velocity_zero_is_note_off_and_overlaps_close_earlier_note() {
        let track = vec![
            0x00, 0x90, 60, 100, // on
            0x10, 0x90, 60, 80, // second on closes the first at 16
            0x10, 0x90, 60, 0, // velocity-0 off closes the second at 32
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let score = parse_smf(&smf(96, &[track])).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(0, 16, 60, 100), NoteEvent::new(16, 16, 60, 80)]);
    }

    #[test]
    fn unmatched_note_on_reports_tick_and_pitch() {
        let track = vec![0x05, 0x90, 61, 100, 0x00, 0xFF, 0x2F, 0x00];
        assert_eq!(parse_smf(&smf(96, &[track])), Err(MidiError::UnmatchedNoteOn { tick: 5, pitch: 61 }));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_smf(b"RIFF"), Err(MidiError::MalformedHeader(_))));
        let mut f2 = smf(96, &[]);
        f2[9] = 2;
        assert_eq!(parse_smf(&f2), Err(MidiError::UnsupportedFormat(2)));
        let mut short = smf(96, &[vec![0x00, 0xFF, 0x2F, 0x00]]);
        short.truncate(short.len() - 2);
        assert!(matches!(parse_smf(&short), Err(MidiError::TruncatedChunk { .. })));
    }

    #[test]
    fn skips_controllers_and_sysex() {
        let track = vec![
            0x00, 0xB0, 7, 100, // volume
            0x00, 0xF0, 0x02, 0x7E, 0xF7, // sysex
            0x00, 0xE0, 0x00, 0x40, // pitch bend
            0x00, 0x90, 64, 70, 0x20, 0x80, 64, 0, 0x00, 0xFF, 0x2F, 0x00,
        ];
        let score = parse_smf(&smf(96, &[track])).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(0, 32, 64, 70)]);
    }

    #[test]
    fn empty_score_writes_header_and_end_of_track() {
        let bytes = write_smf(&Score::new(480)).unwrap();
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0xFF, 0x2F, 0x00]);
        let back = parse_smf(&bytes).unwrap();
        assert!(back.notes.is_empty() && back.tempo_events.is_empty());
    }

    #[test]
    fn vlq_encoding_and_overflow() {
        let mut v = Vec::new();
        push_vlq(&mut v, 0x3FFF).unwrap();
        assert_eq!(v, vec![0xFF, 0x7F]);
        v.clear();
        push_vlq(&mut v, MAX_VLQ).unwrap();
        assert_eq!(v, vec![0xFF, 0xFF, 0xFF, 0x7F]);
        let mut score = Score::new(96);
        score.notes.push(NoteEvent::new(MAX_VLQ + 1, 1, 60, 64));
        assert!(matches!(write_smf(&score), Err(MidiError::TickOverflow { .. })));
    }

    #[test]
    fn one_note_round_trip() {
        let mut score = Score::with_notes(480, vec![NoteEvent::new(0, 480, 60, 64)]);
        score.tempo_events.push(TempoEvent { tick: 0, micros_per_quarter: 600_000 });
        assert_eq!(parse_smf(&write_smf(&score).unwrap()).unwrap(), score);
    }

    #[test]
    fn normalization_inserts_default_tempo() {
        let s = Score::new(96).normalized();
        assert_eq!(s.tempo_events, vec![TempoEvent { tick: 0, micros_per_quarter: DEFAULT_MICROS_PER_QUARTER }]);
    }

    proptest! {
        #[test]
        fn parse_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = parse_smf(&bytes);
            let mut framed = smf(96, &[bytes.clone()]);
            let _ = parse_smf(&framed);
            framed.truncate(framed.len() / 2);
            let _ = parse_smf(&framed);
        }
    }
}
