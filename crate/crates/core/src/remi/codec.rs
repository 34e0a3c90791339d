use super::{validate, CodecConfig, CodecError, Token, TokenSequence};
use crate::midi::{NoteEvent, Score, TempoEvent, TimeSignature};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Notes whose duration exceeded the largest duration bin.
    pub clamped_durations: usize,
}

/// `round(num / den)` with halves rounded up.
fn round_div(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// 1-based bin of a MIDI velocity under uniform binning of `[1, 127]`.
pub fn bin_velocity(velocity: u8, bins: u16) -> u16 {
    let v = velocity.clamp(1, 127) as u32;
    ((v - 1) * bins as u32 / 127) as u16 + 1
}

/// Integer velocity at the middle of a velocity bin.
pub fn velocity_bin_center(bin: u16, bins: u16) -> u8 {
    let members: Vec<u8> = (1..=127u8).filter(|&v| bin_velocity(v, bins) == bin).collect();
    let (lo, hi) = (members[0] as u32, *members.last().unwrap() as u32);
    ((lo + hi) / 2) as u8
}

fn bin_tempo(micros_per_quarter: u32, cfg: &CodecConfig) -> u16 {
    let bpm = 60_000_000.0 / micros_per_quarter as f64;
    let span = cfg.tempo_max_bpm - cfg.tempo_min_bpm;
    let raw = ((bpm - cfg.tempo_min_bpm) * cfg.tempo_bins as f64 / span).floor();
    (raw.max(0.0) as u16).min(cfg.tempo_bins - 1) + 1
}

fn tempo_bin_center(bin: u16, cfg: &CodecConfig) -> u32 {
    let span = cfg.tempo_max_bpm - cfg.tempo_min_bpm;
    let bpm = cfg.tempo_min_bpm + (bin as f64 - 0.5) * span / cfg.tempo_bins as f64;
    (60_000_000.0 / bpm).round() as u32
}

/// Encodes a 4/4 score. Onsets snap to the nearest grid slot, durations to
/// whole grid steps (clamped to the largest bin), velocities to uniform bins.
pub fn encode(score: &Score, cfg: &CodecConfig) -> Result<TokenSequence, CodecError> {
    let (seq, stats) = encode_with_stats(score, cfg)?;
    if stats.clamped_durations > 0 {
        log::warn!("{} note durations clamped to {} grid steps", stats.clamped_durations, cfg.duration_bins);
    }
    Ok(seq)
}

pub fn encode_with_stats(score: &Score, cfg: &CodecConfig) -> Result<(TokenSequence, EncodeStats), CodecError> {
    cfg.validate()?;
    let ts = score.time_signature;
    if ts != TimeSignature::default() {
        return Err(CodecError::UnsupportedTimeSignature(ts.numerator, ts.denominator));
    }
    if score.ticks_per_quarter == 0 {
        return Err(CodecError::InvalidConfig("score has zero ticks per quarter".into()));
    }
    let ppb = cfg.positions_per_bar as u64;
    let tpb = 4 * score.ticks_per_quarter as u64;
    let mut stats = EncodeStats::default();

    // (grid slot, pitch, duration bin, velocity bin)
    let mut notes: Vec<(u64, u16, u16, u16)> = score
        .notes
        .iter()
        .map(|n| {
            let slot = round_div(n.onset_ticks * ppb, tpb);
            let steps = round_div(n.duration_ticks * ppb, tpb).max(1);
            if steps > cfg.duration_bins as u64 {
                stats.clamped_durations += 1;
            }
            let dur = steps.min(cfg.duration_bins as u64) as u16;
            (slot, n.pitch as u16, dur, bin_velocity(n.velocity, cfg.velocity_bins))
        })
        .collect();
    notes.sort_unstable();

    let n_bars = notes.last().map_or(1, |n| n.0 / ppb + 1);
    let mut tempos = score.tempo_events.clone();
    tempos.sort_by_key(|t| t.tick);

    let mut tokens = vec![Token::Bos];
    let mut last_tempo = None;
    let mut next = notes.iter().peekable();
    for bar in 0..n_bars {
        tokens.push(Token::Bar);
        let bar_end = (bar + 1) * tpb;
        if let Some(t) = tempos.iter().take_while(|t| t.tick < bar_end).last() {
            let bin = bin_tempo(t.micros_per_quarter, cfg);
            if last_tempo != Some(bin) {
                tokens.push(Token::Tempo(bin));
                last_tempo = Some(bin);
            }
        }
        let mut current_slot = None;
        while let Some(&&(slot, pitch, dur, vel)) = next.peek() {
            if slot / ppb != bar {
                break;
            }
            next.next();
            if current_slot != Some(slot) {
                tokens.push(Token::Position((slot % ppb) as u16 + 1));
                current_slot = Some(slot);
            }
            tokens.extend([Token::NoteOnPitch(pitch), Token::NoteDuration(dur), Token::NoteVelocity(vel)]);
        }
    }
    tokens.push(Token::Eos);
    Ok((TokenSequence::from(tokens), stats))
}

/// Decodes a grammar-valid sequence using bin centers. The result has
/// `cfg.decode_ticks_per_quarter` resolution and a 4/4 time signature.
pub fn decode(seq: &TokenSequence, cfg: &CodecConfig) -> Result<Score, CodecError> {
    cfg.validate()?;
    validate(seq, cfg)?;
    let tpq = cfg.decode_ticks_per_quarter;
    let tpb = 4 * tpq as u64;
    let step = tpb / cfg.positions_per_bar as u64;
    let mut score = Score::new(tpq);
    let mut bar: Option<u64> = None;
    let mut slot = 0u64;
    let mut note = (0u16, 0u16);
    for &t in seq.iter() {
        let bar_start = bar.map_or(0, |b| b * tpb);
        match t {
            Token::Bar => bar = Some(bar.map_or(0, |b| b + 1)),
            Token::Tempo(v) => score.tempo_events.push(TempoEvent { tick: bar_start, micros_per_quarter: tempo_bin_center(v, cfg) }),
            Token::Position(p) => slot = (p - 1) as u64,
            Token::NoteOnPitch(p) => note.0 = p,
            Token::NoteDuration(d) => note.1 = d,
            Token::NoteVelocity(v) => {
                score.notes.push(NoteEvent {
                    onset_ticks: bar_start + slot * step,
                    duration_ticks: note.1 as u64 * step,
                    pitch: note.0 as u8,
                    velocity: velocity_bin_center(v, cfg.velocity_bins),
                    track_id: 0,
                });
            }
            _ => {}
        }
    }
    score.sort();
    Ok(score)
}
