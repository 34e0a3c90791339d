//! Melody/rhythm decoupling and pitch augmentation.
//!
//! The melody view hides dynamics by masking every `NoteVelocity` token; the
//! rhythm view hides the tune by masking every `NoteOnPitch` token. Both keep
//! the sequence length, so token positions line up with the source.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remi::{Token, TokenKind, TokenSequence};

pub const DEFAULT_MAX_SHIFT: i32 = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ViewError {
    #[error("pitch {pitch} shifted by {offset} leaves the MIDI range")]
    PitchOutOfRange { pitch: u16, offset: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Melody,
    Rhythm,
}

impl ViewKind {
    /// The token kind this view replaces with `Mask`.
    pub fn masked_kind(self) -> TokenKind {
        match self {
            ViewKind::Melody => TokenKind::NoteVelocity,
            ViewKind::Rhythm => TokenKind::NoteOnPitch,
        }
    }
}

impl std::str::FromStr for ViewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "melody" => Ok(ViewKind::Melody),
            "rhythm" => Ok(ViewKind::Rhythm),
            other => Err(format!("unknown view `{other}`, expected melody or rhythm")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoupledView {
    pub seq: TokenSequence,
    pub kind: ViewKind,
}

pub fn view(seq: &TokenSequence, kind: ViewKind) -> DecoupledView {
    let masked = kind.masked_kind();
    let seq = seq.iter().map(|&t| if t.kind() == masked { Token::Mask } else { t }).collect();
    DecoupledView { seq, kind }
}

pub fn melody_view(seq: &TokenSequence) -> DecoupledView {
    view(seq, ViewKind::Melody)
}

pub fn rhythm_view(seq: &TokenSequence) -> DecoupledView {
    view(seq, ViewKind::Rhythm)
}

/// Transposes every `NoteOnPitch` by `offset` semitones.
pub fn pitch_augment(seq: &TokenSequence, offset: i32) -> Result<TokenSequence, ViewError> {
    seq.iter()
        .map(|&t| match t {
            Token::NoteOnPitch(p) => {
                let shifted = p as i32 + offset;
                if (0..=127).contains(&shifted) {
                    Ok(Token::NoteOnPitch(shifted as u16))
                } else {
                    Err(ViewError::PitchOutOfRange { pitch: p, offset })
                }
            }
            other => Ok(other),
        })
        .collect()
}

/// Uniform draw from `[-max_shift, max_shift]` without zero.
pub fn sample_offset<R: Rng + ?Sized>(rng: &mut R, max_shift: i32) -> i32 {
    assert!(max_shift >= 1, "max_shift must be at least 1");
    let k = rng.random_range(0..2 * max_shift);
    if k < max_shift {
        k - max_shift
    } else {
        k - max_shift + 1
    }
}

/// Offsets in `[-max_shift, max_shift] \ {0}` that keep every pitch of `seq`
/// inside the MIDI range.
pub fn admissible_offsets(seq: &TokenSequence, max_shift: i32) -> Vec<i32> {
    let pitches = seq.iter().filter_map(|t| match t {
        Token::NoteOnPitch(p) => Some(*p as i32),
        _ => None,
    });
    let (lo, hi) = pitches.fold((i32::MAX, i32::MIN), |(lo, hi), p| (lo.min(p), hi.max(p)));
    (-max_shift..=max_shift)
        .filter(|&k| k != 0 && (lo == i32::MAX || (lo + k >= 0 && hi + k <= 127)))
        .collect()
}

/// Draws offsets until one keeps all pitches in range and applies it.
///
/// Returns `None` when no nonzero shift up to `max_shift` fits. Draws are
/// resampled rather than clamped so edge pitches are not over-represented.
pub fn random_augment<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R, max_shift: i32) -> Option<(TokenSequence, i32)> {
    if admissible_offsets(seq, max_shift).is_empty() {
        return None;
    }
    loop {
        let k = sample_offset(rng, max_shift);
        if let Ok(out) = pitch_augment(seq, k) {
            return Some((out, k));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::remi::CodecConfig;
    use crate::synth::random_valid_sequence;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Token::*;

    fn piece() -> TokenSequence {
        TokenSequence::from(vec![Bos, Bar, Position(1), NoteOnPitch(60), NoteDuration(4), NoteVelocity(16), Eos])
    }

    #[test]
    fn melody_masks_velocity() {
        let v = melody_view(&piece());
        assert_eq!(v.kind, ViewKind::Melody);
        assert_eq!(v.seq.tokens(), &[Bos, Bar, Position(1), NoteOnPitch(60), NoteDuration(4), Mask, Eos]);
    }

    #[test]
    fn rhythm_masks_pitch() {
        let v = rhythm_view(&piece());
        assert_eq!(v.seq.tokens(), &[Bos, Bar, Position(1), Mask, NoteDuration(4), NoteVelocity(16), Eos]);
    }

    #[test]
    fn noteless_sequences_pass_through() {
        let s = TokenSequence::from(vec![Bos, Bar, Eos]);
        assert_eq!(melody_view(&s).seq, s);
        assert_eq!(rhythm_view(&s).seq, s);
        assert_eq!(melody_view(&TokenSequence::new()).seq, TokenSequence::new());
    }

    #[test]
    fn augment_cases() {
        assert!(pitch_augment(&piece(), 2).unwrap().tokens().contains(&NoteOnPitch(62)));
        assert_eq!(pitch_augment(&piece(), 0).unwrap(), piece());
        let top = TokenSequence::from(vec![Bos, Bar, Position(1), NoteOnPitch(127), NoteDuration(1), NoteVelocity(1), Eos]);
        assert_eq!(pitch_augment(&top, 1), Err(ViewError::PitchOutOfRange { pitch: 127, offset: 1 }));
        assert_eq!(admissible_offsets(&top, 2), vec![-2, -1]);
    }

    #[test]
    fn offsets_skip_zero_and_are_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!([-1, 1].contains(&sample_offset(&mut rng, 1)));
        }
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_offset(&mut r, 6)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn offsets_are_uniform_over_twelve_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..n {
            *counts.entry(sample_offset(&mut rng, 6)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 12);
        assert!(!counts.contains_key(&0));
        let p = 1.0 / 12.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (k, c) in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "offset {k}: {c}");
        }
    }

    proptest! {
        #[test]
        fn view_algebra(seed in any::<u64>()) {
            let cfg = CodecConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_valid_sequence(&mut rng, &cfg, 8);
            let m = melody_view(&s);
            let r = rhythm_view(&s);
            prop_assert_eq!(m.seq.len(), s.len());
            prop_assert_eq!(m.seq.count(TokenKind::Mask), s.count(TokenKind::NoteVelocity));
            prop_assert_eq!(m.seq.count(TokenKind::NoteVelocity), 0);
            prop_assert_eq!(r.seq.count(TokenKind::NoteOnPitch), 0);
            prop_assert_eq!(&melody_view(&m.seq).seq, &m.seq);
            prop_assert_eq!(&rhythm_view(&r.seq).seq, &r.seq);
            if let Some((shifted, _)) = random_augment(&s, &mut rng, 6) {
                prop_assert_eq!(&rhythm_view(&shifted).seq, &r.seq);
            }
        }
    }
}
