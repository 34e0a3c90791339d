//! Random pieces for property tests and a small stochastic music grammar
//! for desk-scale training experiments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::midi::{NoteEvent, Score, TempoEvent, TimeSignature};
use crate::remi::{encode, CodecConfig, Token, TokenSequence};

/// A random sequence accepted by [`crate::remi::validate`] under `cfg`.
pub fn random_valid_sequence<R: Rng + ?Sized>(rng: &mut R, cfg: &CodecConfig, max_bars: usize) -> TokenSequence {
    let n_bars = rng.random_range(1..=max_bars.max(1));
    let mut tokens = vec![Token::Bos];
    let mut last_tempo = None;
    for bar in 0..n_bars {
        tokens.push(Token::Bar);
        if rng.random_bool(0.3) {
            let t = rng.random_range(1..=cfg.tempo_bins);
            if last_tempo != Some(t) {
                tokens.push(Token::Tempo(t));
                last_tempo = Some(t);
            }
        }
        let must_have_note = bar == n_bars - 1 && n_bars > 1;
        let density = rng.random_range(0.0..0.5);
        let mut positions: Vec<u16> = (1..=cfg.positions_per_bar).filter(|_| rng.random_bool(density)).collect();
        if positions.is_empty() && must_have_note {
            positions.push(rng.random_range(1..=cfg.positions_per_bar));
        }
        for p in positions {
            tokens.push(Token::Position(p));
            let mut triples: Vec<(u16, u16, u16)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    (
                        rng.random_range(0..=127),
                        rng.random_range(1..=cfg.duration_bins),
                        rng.random_range(1..=cfg.velocity_bins),
                    )
                })
                .collect();
            triples.sort_unstable();
            for (pitch, d, v) in triples {
                tokens.extend([Token::NoteOnPitch(pitch), Token::NoteDuration(d), Token::NoteVelocity(v)]);
            }
        }
    }
    tokens.push(Token::Eos);
    TokenSequence::from(tokens)
}

/// A random multi-track score with no overlapping notes of equal pitch on one
/// track, so it survives a MIDI write/parse round trip exactly.
pub fn random_score<R: Rng + ?Sized>(rng: &mut R, n_notes: usize) -> Score {
    let tpq = [96u16, 384, 480, 960][rng.random_range(0..4)];
    let mut score = Score::new(tpq);
    score.time_signature = [
        TimeSignature::default(),
        TimeSignature { numerator: 3, denominator: 4 },
        TimeSignature { numerator: 6, denominator: 8 },
    ][rng.random_range(0..3)];
    let horizon = tpq as u64 * 4 * 32;
    for _ in 0..rng.random_range(0..4) {
        score.tempo_events.push(TempoEvent {
            tick: rng.random_range(0..horizon),
            micros_per_quarter: rng.random_range(200_000..1_500_000),
        });
    }
    let mut busy: std::collections::HashMap<(u16, u8), Vec<(u64, u64)>> = Default::default();
    while score.notes.len() < n_notes {
        let n = NoteEvent {
            onset_ticks: rng.random_range(0..horizon),
            duration_ticks: rng.random_range(1..tpq as u64 * 4),
            pitch: rng.random_range(0..=127),
            velocity: rng.random_range(1..=127),
            track_id: rng.random_range(0..3),
        };
        let spans = busy.entry((n.track_id, n.pitch)).or_default();
        if spans.iter().all(|&(a, b)| n.offset_ticks() <= a || n.onset_ticks >= b) {
            spans.push((n.onset_ticks, n.offset_ticks()));
            score.notes.push(n);
        }
    }
    score.sort();
    score
}

/// Parameters of the synthetic corpus.
///
/// Every bar picks one of a few rhythm patterns; pitches walk over the C
/// major scale; velocities are bimodal, loud on strong beats and soft
/// elsewhere, with some jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub bars: usize,
    pub ticks_per_quarter: u16,
    pub loud_velocity: (f64, f64),
    pub soft_velocity: (f64, f64),
    /// Probability that a strong-beat note is loud (and a weak-beat note soft).
    pub accent_prob: f64,
    pub lowest_pitch: u8,
    pub scale_degrees: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bars: 3,
            ticks_per_quarter: 96,
            loud_velocity: (100.0, 6.0),
            soft_velocity: (44.0, 6.0),
            accent_prob: 0.85,
            lowest_pitch: 60,
            scale_degrees: 10,
        }
    }
}

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

// onset slots (sixteenths) of each rhythm pattern
const PATTERNS: [&[u64]; 4] = [&[0, 4, 8, 12], &[0, 6, 8, 12], &[0, 4, 10, 12], &[0, 8, 12]];

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn synth_score<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Score {
    let tpq = cfg.ticks_per_quarter as u64;
    let sixteenth = tpq / 4;
    let mut degree = rng.random_range(0..cfg.scale_degrees) as i64;
    let mut notes = Vec::new();
    for bar in 0..cfg.bars as u64 {
        let pattern = PATTERNS[rng.random_range(0..PATTERNS.len())];
        for (i, &slot) in pattern.iter().enumerate() {
            let next = pattern.get(i + 1).copied().unwrap_or(16);
            degree = (degree + rng.random_range(-2..=2)).clamp(0, cfg.scale_degrees as i64 - 1);
            let d = degree as usize;
            let pitch = cfg.lowest_pitch + 12 * (d / 7) as u8 + MAJOR[d % 7];
            let strong = slot % 8 == 0;
            let loud = strong == rng.random_bool(cfg.accent_prob);
            let (mean, sd) = if loud { cfg.loud_velocity } else { cfg.soft_velocity };
            let velocity = normal(rng, mean, sd).round().clamp(1.0, 127.0) as u8;
            notes.push(NoteEvent::new(bar * 16 * sixteenth + slot * sixteenth, (next - slot) * sixteenth, pitch, velocity));
        }
    }
    Score::with_notes(cfg.ticks_per_quarter, notes)
}

/// `n` encoded pieces from the synthetic grammar.
pub fn synth_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize, cfg: &SynthConfig, codec: &CodecConfig) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| encode(&synth_score(rng, cfg), codec).expect("synthetic scores are 4/4"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remi::validate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_produce_valid_data() {
        let cfg = CodecConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            validate(&random_valid_sequence(&mut rng, &cfg, 6), &cfg).unwrap();
            assert!(random_score(&mut rng, 20).is_valid());
        }
        for s in synth_corpus(&mut rng, 50, &SynthConfig::default(), &cfg) {
            validate(&s, &cfg).unwrap();
            assert_eq!(s.count(crate::remi::TokenKind::Bar), 3);
        }
    }
}
