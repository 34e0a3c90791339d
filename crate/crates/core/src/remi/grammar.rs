//! The canonical token grammar.
//!
//! `validate` accepts exactly the sequences `encode` can produce, which is
//! what makes `encode(decode(seq)) == seq` hold. `repair` maps arbitrary
//! token soup (e.g. sampled model output) onto that language by dropping
//! whatever does not fit.

use super::{CodecConfig, CodecError, Token, TokenSequence};

type Triple = (u16, u16, u16);

fn violation(index: usize, reason: impl Into<String>) -> CodecError {
    CodecError::GrammarViolation { index, reason: reason.into() }
}

/// Checks that `seq` is a canonical piece:
///
/// * starts with `BOS Bar` and ends with a single `EOS`;
/// * `Tempo` only directly after `Bar`, and only when the bin changes;
/// * positions strictly increase within a bar, each followed by at least one
///   `NoteOnPitch NoteDuration NoteVelocity` triple;
/// * triples at one position are ordered by (pitch, duration, velocity);
/// * the last bar holds a note unless it is the only bar;
/// * no `Mask`, `PAD` or stray `BOS`; every value inside the configured bins.
pub fn validate(seq: &TokenSequence, cfg: &CodecConfig) -> Result<(), CodecError> {
    let t = seq.tokens();
    if t.first() != Some(&Token::Bos) {
        return Err(violation(0, "sequence must start with BOS"));
    }
    if t.get(1) != Some(&Token::Bar) {
        return Err(violation(1, "BOS must be followed by Bar"));
    }
    let mut bars = 0usize;
    let mut bar_has_note = false;
    let mut last_pos: Option<u16> = None;
    let mut pos_has_note = true;
    let mut last_triple: Option<Triple> = None;
    let mut last_tempo: Option<u16> = None;
    let mut i = 1;
    while i < t.len() {
        let tok = t[i];
        if !cfg.contains(tok) {
            return Err(violation(i, format!("{tok} outside the configured bins")));
        }
        match tok {
            Token::Bar => {
                if !pos_has_note {
                    return Err(violation(i, "Position without notes"));
                }
                bars += 1;
                bar_has_note = false;
                last_pos = None;
            }
            Token::Tempo(v) => {
                if t[i - 1] != Token::Bar {
                    return Err(violation(i, "Tempo must directly follow Bar"));
                }
                if last_tempo == Some(v) {
                    return Err(violation(i, "Tempo repeats the previous tempo"));
                }
                last_tempo = Some(v);
            }
            Token::Position(p) => {
                if !pos_has_note {
                    return Err(violation(i, "Position without notes"));
                }
                if last_pos.is_some_and(|q| p <= q) {
                    return Err(violation(i, "positions must increase within a bar"));
                }
                last_pos = Some(p);
                pos_has_note = false;
                last_triple = None;
            }
            Token::NoteOnPitch(p) => {
                if last_pos.is_none() {
                    return Err(violation(i, "note outside a Position"));
                }
                let (Some(Token::NoteDuration(d)), Some(Token::NoteVelocity(v))) = (t.get(i + 1), t.get(i + 2)) else {
                    return Err(violation(i, "NoteOnPitch must be followed by NoteDuration and NoteVelocity"));
                };
                for k in [i + 1, i + 2] {
                    if !cfg.contains(t[k]) {
                        return Err(violation(k, format!("{} outside the configured bins", t[k])));
                    }
                }
                let triple = (p, *d, *v);
                if last_triple.is_some_and(|q| triple < q) {
                    return Err(violation(i, "notes at one position must be ordered by pitch"));
                }
                last_triple = Some(triple);
                pos_has_note = true;
                bar_has_note = true;
                i += 3;
                continue;
            }
            Token::NoteDuration(_) | Token::NoteVelocity(_) => {
                return Err(violation(i, format!("orphan {tok}")));
            }
            Token::Eos => {
                if i != t.len() - 1 {
                    return Err(violation(i, "tokens after EOS"));
                }
                if !pos_has_note {
                    return Err(violation(i, "Position without notes"));
                }
                if bars > 1 && !bar_has_note {
                    return Err(violation(i, "trailing empty bar"));
                }
                return Ok(());
            }
            Token::Mask => return Err(violation(i, "Mask tokens are not decodable")),
            Token::Pad | Token::Bos => return Err(violation(i, format!("unexpected {tok}"))),
        }
        i += 1;
    }
    Err(violation(t.len(), "missing EOS"))
}

#[derive(Default)]
struct BarBuild {
    tempo: Option<u16>,
    positions: Vec<(u16, Vec<Triple>)>,
}

impl BarBuild {
    fn drop_empty_position(&mut self) {
        if self.positions.last().is_some_and(|p| p.1.is_empty()) {
            self.positions.pop();
        }
    }
}

/// Drops every token that breaks the canonical grammar and returns the
/// remaining piece. Grammar-valid input is returned unchanged.
///
/// Reading stops at the first `EOS`. Incomplete note triples, positions
/// that do not advance, misplaced or repeated tempos, out-of-order notes,
/// `Mask`/`PAD`/`BOS` tokens, values outside `cfg` and trailing empty bars
/// are removed.
pub fn repair(tokens: &[Token], cfg: &CodecConfig) -> TokenSequence {
    let mut bars: Vec<BarBuild> = Vec::new();
    let mut last_tempo: Option<u16> = None;
    let mut tempo_allowed = false;
    let mut accepting = false;
    let mut partial: (Option<u16>, Option<u16>) = (None, None);

    for &tok in tokens {
        if tok == Token::Eos {
            break;
        }
        if !cfg.contains(tok) {
            partial = (None, None);
            continue;
        }
        let Some(bar) = bars.last_mut() else {
            if tok == Token::Bar {
                bars.push(BarBuild::default());
                tempo_allowed = true;
            }
            continue;
        };
        let after_bar = std::mem::replace(&mut tempo_allowed, false);
        match tok {
            Token::Bar => {
                bar.drop_empty_position();
                bars.push(BarBuild::default());
                tempo_allowed = true;
                accepting = false;
                partial = (None, None);
            }
            Token::Tempo(v) => {
                if after_bar && last_tempo != Some(v) {
                    bar.tempo = Some(v);
                    last_tempo = Some(v);
                }
            }
            Token::Position(p) => {
                partial = (None, None);
                if bar.positions.last().map_or(true, |q| p > q.0) {
                    bar.drop_empty_position();
                    bar.positions.push((p, Vec::new()));
                    accepting = true;
                } else {
                    accepting = false;
                }
            }
            Token::NoteOnPitch(p) => partial = if accepting { (Some(p), None) } else { (None, None) },
            Token::NoteDuration(d) => {
                partial = match partial {
                    (Some(p), None) => (Some(p), Some(d)),
                    _ => (None, None),
                }
            }
            Token::NoteVelocity(v) => {
                if let ((Some(p), Some(d)), Some(slot)) = (partial, bar.positions.last_mut()) {
                    let triple = (p, d, v);
                    if accepting && slot.1.last().map_or(true, |q| triple >= *q) {
                        slot.1.push(triple);
                    }
                }
                partial = (None, None);
            }
            Token::Mask | Token::Pad | Token::Bos | Token::Eos => partial = (None, None),
        }
    }

    if let Some(bar) = bars.last_mut() {
        bar.drop_empty_position();
    }
    while bars.len() > 1 && bars.last().is_some_and(|b| b.positions.is_empty()) {
        bars.pop();
    }
    if bars.is_empty() {
        bars.push(BarBuild::default());
    }

    let mut out = vec![Token::Bos];
    for bar in bars {
        out.push(Token::Bar);
        if let Some(v) = bar.tempo {
            out.push(Token::Tempo(v));
        }
        for (p, notes) in bar.positions {
            out.push(Token::Position(p));
            for (pitch, d, v) in notes {
                out.extend([Token::NoteOnPitch(pitch), Token::NoteDuration(d), Token::NoteVelocity(v)]);
            }
        }
    }
    out.push(Token::Eos);
    TokenSequence::from(out)
}
