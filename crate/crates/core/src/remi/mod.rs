//! REMI-style tokenization of scores.
//!
//! A piece is written as `BOS`, then for every bar a `Bar` token, an optional
//! `Tempo` token, and groups of `Position` followed by one or more note
//! triples (`NoteOnPitch`, `NoteDuration`, `NoteVelocity`), then `EOS`.
//! `Mask` only appears in the decoupled views built by [`crate::views`].

mod codec;
mod grammar;
mod text;

pub use codec::{bin_velocity, decode, encode, encode_with_stats, velocity_bin_center, EncodeStats};
pub use grammar::{repair, validate};
pub use text::{from_json, from_text, to_json, to_text};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("time signature {0}/{1} is not supported, only 4/4")]
    UnsupportedTimeSignature(u8, u8),
    #[error("grammar violation at token {index}: {reason}")]
    GrammarViolation { index: usize, reason: String },
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("token {0} is outside the configured bins")]
    OutOfVocabulary(Token),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    #[serde(rename = "PAD")]
    Pad,
    #[serde(rename = "BOS")]
    Bos,
    #[serde(rename = "EOS")]
    Eos,
    Mask,
    Bar,
    Tempo,
    Position,
    NoteOnPitch,
    NoteDuration,
    NoteVelocity,
}

impl TokenKind {
    pub const ALL: [TokenKind; 10] = [
        TokenKind::Pad,
        TokenKind::Bos,
        TokenKind::Eos,
        TokenKind::Mask,
        TokenKind::Bar,
        TokenKind::Tempo,
        TokenKind::Position,
        TokenKind::NoteOnPitch,
        TokenKind::NoteDuration,
        TokenKind::NoteVelocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Pad => "PAD",
            TokenKind::Bos => "BOS",
            TokenKind::Eos => "EOS",
            TokenKind::Mask => "Mask",
            TokenKind::Bar => "Bar",
            TokenKind::Tempo => "Tempo",
            TokenKind::Position => "Position",
            TokenKind::NoteOnPitch => "NoteOnPitch",
            TokenKind::NoteDuration => "NoteDuration",
            TokenKind::NoteVelocity => "NoteVelocity",
        }
    }

    pub fn from_name(name: &str) -> Option<TokenKind> {
        TokenKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn has_value(self) -> bool {
        matches!(
            self,
            TokenKind::Tempo | TokenKind::Position | TokenKind::NoteOnPitch | TokenKind::NoteDuration | TokenKind::NoteVelocity
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Mask,
    Bar,
    /// Tempo bin, 1-based.
    Tempo(u16),
    /// Onset slot within the bar, 1-based.
    Position(u16),
    /// MIDI note number.
    NoteOnPitch(u16),
    /// Duration in grid steps, 1-based.
    NoteDuration(u16),
    /// Velocity bin, 1-based.
    NoteVelocity(u16),
}

impl Token {
    pub fn kind(self) -> TokenKind {
        match self {
            Token::Pad => TokenKind::Pad,
            Token::Bos => TokenKind::Bos,
            Token::Eos => TokenKind::Eos,
            Token::Mask => TokenKind::Mask,
            Token::Bar => TokenKind::Bar,
            Token::Tempo(_) => TokenKind::Tempo,
            Token::Position(_) => TokenKind::Position,
            Token::NoteOnPitch(_) => TokenKind::NoteOnPitch,
            Token::NoteDuration(_) => TokenKind::NoteDuration,
            Token::NoteVelocity(_) => TokenKind::NoteVelocity,
        }
    }

    pub fn value(self) -> Option<u16> {
        match self {
            Token::Tempo(v)
            | Token::Position(v)
            | Token::NoteOnPitch(v)
            | Token::NoteDuration(v)
            | Token::NoteVelocity(v) => Some(v),
            _ => None,
        }
    }

    pub fn new(kind: TokenKind, value: Option<u16>) -> Option<Token> {
        Some(match (kind, value) {
            (TokenKind::Pad, None) => Token::Pad,
            (TokenKind::Bos, None) => Token::Bos,
            (TokenKind::Eos, None) => Token::Eos,
            (TokenKind::Mask, None) => Token::Mask,
            (TokenKind::Bar, None) => Token::Bar,
            (TokenKind::Tempo, Some(v)) => Token::Tempo(v),
            (TokenKind::Position, Some(v)) => Token::Position(v),
            (TokenKind::NoteOnPitch, Some(v)) => Token::NoteOnPitch(v),
            (TokenKind::NoteDuration, Some(v)) => Token::NoteDuration(v),
            (TokenKind::NoteVelocity, Some(v)) => Token::NoteVelocity(v),
            _ => return None,
        })
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{}_{}", self.kind().name(), v),
            None => f.write_str(self.kind().name()),
        }
    }
}

impl std::str::FromStr for Token {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || CodecError::UnknownToken(s.to_string());
        let (name, value) = match s.rsplit_once('_') {
            Some((name, v)) => (name, Some(v.parse::<u16>().map_err(|_| unknown())?)),
            None => (s, None),
        };
        let kind = TokenKind::from_name(name).ok_or_else(unknown)?;
        Token::new(kind, value).ok_or_else(unknown)
    }
}

/// Codec settings. The defaults are the REMI conventions used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub positions_per_bar: u16,
    pub velocity_bins: u16,
    pub duration_bins: u16,
    pub tempo_bins: u16,
    pub tempo_min_bpm: f64,
    pub tempo_max_bpm: f64,
    /// Resolution of scores produced by [`decode`].
    pub decode_ticks_per_quarter: u16,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            positions_per_bar: 16,
            velocity_bins: 32,
            duration_bins: 64,
            tempo_bins: 32,
            tempo_min_bpm: 30.0,
            tempo_max_bpm: 240.0,
            decode_ticks_per_quarter: 480,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: &str| Err(CodecError::InvalidConfig(m.to_string()));
        if self.positions_per_bar == 0 || self.velocity_bins == 0 || self.duration_bins == 0 || self.tempo_bins == 0 {
            return bad("all bin counts must be at least 1");
        }
        if self.velocity_bins > 127 {
            return bad("velocity_bins must not exceed 127");
        }
        if !(self.tempo_min_bpm > 0.0 && self.tempo_max_bpm > self.tempo_min_bpm) {
            return bad("tempo range must satisfy 0 < min < max");
        }
        if self.decode_ticks_per_quarter == 0 || (4 * self.decode_ticks_per_quarter as u32) % self.positions_per_bar as u32 != 0 {
            return bad("4 * decode_ticks_per_quarter must be a multiple of positions_per_bar");
        }
        Ok(())
    }

    /// Whether a value-carrying token lies inside the configured bins.
    pub fn contains(&self, token: Token) -> bool {
        match token {
            Token::Tempo(v) => (1..=self.tempo_bins).contains(&v),
            Token::Position(v) => (1..=self.positions_per_bar).contains(&v),
            Token::NoteOnPitch(v) => v <= 127,
            Token::NoteDuration(v) => (1..=self.duration_bins).contains(&v),
            Token::NoteVelocity(v) => (1..=self.velocity_bins).contains(&v),
            _ => true,
        }
    }
}

/// Bijection between tokens and dense integer ids.
///
/// Ids are assigned kind-major, value-minor: `PAD=0, BOS, EOS, Mask, Bar`,
/// then the tempo, position, pitch, duration and velocity blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    cfg: CodecConfig,
    // first id of each kind, indexed like `TokenKind::ALL`
    offsets: [u32; 10],
    size: u32,
}

pub const PAD_ID: u32 = 0;

impl Vocabulary {
    pub fn new(cfg: &CodecConfig) -> Result<Self, CodecError> {
        cfg.validate()?;
        let mut offsets = [0u32; 10];
        let mut next = 0u32;
        for (i, kind) in TokenKind::ALL.into_iter().enumerate() {
            offsets[i] = next;
            next += Self::count_for(cfg, kind);
        }
        Ok(Self { cfg: cfg.clone(), offsets, size: next })
    }

    fn count_for(cfg: &CodecConfig, kind: TokenKind) -> u32 {
        match kind {
            TokenKind::Tempo => cfg.tempo_bins as u32,
            TokenKind::Position => cfg.positions_per_bar as u32,
            TokenKind::NoteOnPitch => 128,
            TokenKind::NoteDuration => cfg.duration_bins as u32,
            TokenKind::NoteVelocity => cfg.velocity_bins as u32,
            _ => 1,
        }
    }

    fn min_value(kind: TokenKind) -> u16 {
        if kind == TokenKind::NoteOnPitch {
            0
        } else {
            1
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        Self::count_for(&self.cfg, kind) as usize
    }

    /// Id range occupied by one kind.
    pub fn range(&self, kind: TokenKind) -> std::ops::Range<u32> {
        let i = kind as usize;
        self.offsets[i]..self.offsets[i] + Self::count_for(&self.cfg, kind)
    }

    pub fn id(&self, token: Token) -> Result<u32, CodecError> {
        if !self.cfg.contains(token) {
            return Err(CodecError::OutOfVocabulary(token));
        }
        let kind = token.kind();
        let within = token.value().map_or(0, |v| (v - Self::min_value(kind)) as u32);
        Ok(self.offsets[kind as usize] + within)
    }

    pub fn token(&self, id: u32) -> Result<Token, CodecError> {
        if id >= self.size {
            return Err(CodecError::UnknownId(id));
        }
        let i = self.offsets.iter().rposition(|&o| o <= id).expect("offset 0 is PAD");
        let kind = TokenKind::ALL[i];
        let value = kind.has_value().then(|| (id - self.offsets[i]) as u16 + Self::min_value(kind));
        Ok(Token::new(kind, value).expect("kind/value agree"))
    }

    pub fn mask_id(&self) -> u32 {
        self.offsets[TokenKind::Mask as usize]
    }

    pub fn bos_id(&self) -> u32 {
        self.offsets[TokenKind::Bos as usize]
    }

    pub fn eos_id(&self) -> u32 {
        self.offsets[TokenKind::Eos as usize]
    }

    pub fn bar_id(&self) -> u32 {
        self.offsets[TokenKind::Bar as usize]
    }

    pub fn encode_ids(&self, seq: &TokenSequence) -> Result<Vec<u32>, CodecError> {
        seq.iter().map(|&t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<TokenSequence, CodecError> {
        ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>, _>>().map(TokenSequence::from)
    }
}

/// Ordered tokens of one piece (or one decoupled view of it).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.tokens.iter()
    }

    pub fn push(&mut self, token: Token) {
        self.tokens.push(token);
    }

    pub fn count(&self, kind: TokenKind) -> usize {
        self.tokens.iter().filter(|t| t.kind() == kind).count()
    }

    /// The first `bars` bars of a grammar-valid piece, closed with `EOS`.
    /// Trailing empty bars are dropped so the prefix is itself grammar-valid.
    pub fn bar_prefix(&self, bars: usize, cfg: &CodecConfig) -> TokenSequence {
        let mut cut = self.tokens.len();
        let mut seen = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if *t == Token::Bar {
                seen += 1;
                if seen > bars {
                    cut = i;
                    break;
                }
            }
        }
        let body: Vec<Token> = self.tokens[..cut].iter().copied().filter(|t| *t != Token::Eos).collect();
        repair(&body, cfg)
    }

    /// The tokens without a trailing `EOS`; the decoder prefix for continuation.
    pub fn without_eos(&self) -> TokenSequence {
        let mut tokens = self.tokens.clone();
        if tokens.last() == Some(&Token::Eos) {
            tokens.pop();
        }
        TokenSequence { tokens }
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }
}

impl FromIterator<Token> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        Self { tokens: iter.into_iter().collect() }
    }
}

impl<'a> IntoIterator for &'a TokenSequence {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.tokens.iter()
    }
}

impl std::ops::Index<usize> for TokenSequence {
    type Output = Token;

    fn index(&self, i: usize) -> &Token {
        &self.tokens[i]
    }
}
