//! Lossless text and JSON forms of a token sequence.
//!
//! Text: one token per line, `KIND` or `KIND_<value>`; blank lines ignored.
//! JSON: `[{"kind": "NoteOnPitch", "value": 60}, {"kind": "Bar"}, ...]`.

use serde::{Deserialize, Serialize};

use super::{CodecError, Token, TokenKind, TokenSequence};

pub fn to_text(seq: &TokenSequence) -> String {
    let mut out = String::with_capacity(seq.len() * 12);
    for t in seq {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str) -> Result<TokenSequence, CodecError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::parse::<Token>)
        .collect::<Result<Vec<_>, _>>()
        .map(TokenSequence::from)
}

#[derive(Serialize, Deserialize)]
struct TokenRepr {
    kind: TokenKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<u16>,
}

pub fn to_json(seq: &TokenSequence) -> String {
    let reprs: Vec<TokenRepr> = seq.iter().map(|t| TokenRepr { kind: t.kind(), value: t.value() }).collect();
    serde_json::to_string(&reprs).expect("token reprs always serialize")
}

pub fn from_json(json: &str) -> Result<TokenSequence, CodecError> {
    let reprs: Vec<TokenRepr> = serde_json::from_str(json).map_err(|e| CodecError::UnknownToken(e.to_string()))?;
    reprs
        .into_iter()
        .map(|r| Token::new(r.kind, r.value).ok_or_else(|| CodecError::UnknownToken(format!("{:?} {:?}", r.kind, r.value))))
        .collect::<Result<Vec<_>, _>>()
        .map(TokenSequence::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_json_forms() {
        let seq = TokenSequence::from(vec![Token::Bos, Token::Bar, Token::Position(3), Token::NoteOnPitch(60), Token::Mask]);
        let text = to_text(&seq);
        assert_eq!(text, "BOS\nBar\nPosition_3\nNoteOnPitch_60\nMask\n");
        assert_eq!(from_text(&text).unwrap(), seq);
        let json = to_json(&seq);
        assert_eq!(
            json,
            r#"[{"kind":"BOS"},{"kind":"Bar"},{"kind":"Position","value":3},{"kind":"NoteOnPitch","value":60},{"kind":"Mask"}]"#
        );
        assert_eq!(from_json(&json).unwrap(), seq);
        assert!(from_json(r#"[{"kind":"Bar","value":2}]"#).is_err());
        assert!(from_text("Bar\nWhat_1\n").is_err());
    }
}
