//! Objective evaluation of generated music against a reference corpus.
//!
//! Per-piece statistics (pitch-class entropy, scale consistency, groove
//! consistency) are averaged with 95% normal-approximation intervals;
//! pitch and velocity distributions are pooled per corpus and compared with
//! a smoothed KL divergence.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Score;
use crate::remi::bin_velocity;

/// Additive smoothing applied to normalized histograms before KL.
pub const SMOOTHING: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("score has no notes")]
    EmptyScore,
    #[error("groove needs at least two bars, the score spans {bars}")]
    TooFewBars { bars: usize },
    #[error("histogram has no mass")]
    EmptyHistogram,
    #[error("histograms have {left} and {right} bins")]
    BinMismatch { left: usize, right: usize },
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("vectors have dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn non_empty(score: &Score) -> Result<()> {
    if score.notes.is_empty() {
        Err(MetricsError::EmptyScore)
    } else {
        Ok(())
    }
}

pub fn pitch_class_histogram(score: &Score) -> [f64; 12] {
    let mut h = [0.0; 12];
    for n in &score.notes {
        h[(n.pitch % 12) as usize] += 1.0;
    }
    h
}

/// Shannon entropy in bits of the normalized pitch-class histogram.
pub fn pitch_class_entropy(score: &Score) -> Result<f64> {
    non_empty(score)?;
    let h = pitch_class_histogram(score);
    let total: f64 = h.iter().sum();
    Ok(-h.iter().filter(|&&c| c > 0.0).map(|&c| (c / total) * (c / total).log2()).sum::<f64>())
}

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const NATURAL_MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

/// The 12 major and 12 natural-minor scales as pitch-class masks.
pub fn scales() -> Vec<[bool; 12]> {
    let mut out = Vec::with_capacity(24);
    for steps in [MAJOR, NATURAL_MINOR] {
        for tonic in 0..12 {
            let mut mask = [false; 12];
            for s in steps {
                mask[((tonic + s) % 12) as usize] = true;
            }
            out.push(mask);
        }
    }
    out
}

/// Largest fraction of notes inside a single major or natural-minor scale.
pub fn scale_consistency(score: &Score) -> Result<f64> {
    non_empty(score)?;
    let h = pitch_class_histogram(score);
    let total: f64 = h.iter().sum();
    let best = scales()
        .iter()
        .map(|mask| (0..12).filter(|&c| mask[c]).map(|c| h[c]).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(best / total)
}

/// Binary onset grid of every bar from the first to the last onset's bar.
/// Onsets snap to the nearest of `positions_per_bar` cells.
pub fn onset_grids(score: &Score, positions_per_bar: usize) -> Vec<Vec<bool>> {
    let ppb = positions_per_bar as u64;
    let tpb = score.ticks_per_bar().max(1);
    let slots: Vec<u64> = score.notes.iter().map(|n| (2 * n.onset_ticks * ppb + tpb) / (2 * tpb)).collect();
    let bars = slots.iter().max().map_or(0, |&s| s / ppb + 1) as usize;
    let mut grids = vec![vec![false; positions_per_bar]; bars];
    for s in slots {
        grids[(s / ppb) as usize][(s % ppb) as usize] = true;
    }
    grids
}

/// `1 - mean Hamming distance / positions_per_bar` over neighboring bars.
pub fn groove_consistency(score: &Score, positions_per_bar: usize) -> Result<f64> {
    let grids = onset_grids(score, positions_per_bar);
    if grids.len() < 2 {
        return Err(MetricsError::TooFewBars { bars: grids.len() });
    }
    let total: usize = grids.windows(2).map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count()).sum();
    let pairs = (grids.len() - 1) as f64;
    Ok(1.0 - total as f64 / (pairs * positions_per_bar as f64))
}

pub fn pitch_histogram(score: &Score) -> Vec<f64> {
    let mut h = vec![0.0; 128];
    for n in &score.notes {
        h[n.pitch as usize] += 1.0;
    }
    h
}

/// Counts per velocity bin (`bins` uniform bins over 1..=127).
pub fn velocity_histogram(score: &Score, bins: u16) -> Vec<f64> {
    let mut h = vec![0.0; bins as usize];
    for n in &score.notes {
        h[bin_velocity(n.velocity, bins) as usize - 1] += 1.0;
    }
    h
}

fn smoothed(h: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = h.iter().sum();
    if !(total > 0.0) {
        return Err(MetricsError::EmptyHistogram);
    }
    let z = 1.0 + SMOOTHING * h.len() as f64;
    Ok(h.iter().map(|&c| (c / total + SMOOTHING) / z).collect())
}

/// `KL(real ‖ gen)` in nats after normalizing both histograms and adding
/// [`SMOOTHING`] to every bin.
pub fn histogram_divergence(gen: &[f64], real: &[f64]) -> Result<f64> {
    if gen.len() != real.len() {
        return Err(MetricsError::BinMismatch { left: gen.len(), right: real.len() });
    }
    let (q, p) = (smoothed(gen)?, smoothed(real)?);
    Ok(p.iter().zip(&q).map(|(&p, &q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

pub fn feature_cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MetricsError::DimensionMismatch { left: u.len(), right: v.len() });
    }
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub positions_per_bar: usize,
    pub velocity_bins: u16,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { positions_per_bar: 16, velocity_bins: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceMetrics {
    pub pitch_class_entropy: f64,
    pub scale_consistency: f64,
    /// `None` for pieces shorter than two bars.
    pub groove_consistency: Option<f64>,
}

/// Mean and 95% half-width (`1.96·s/√n`); the half-width is `None` for
/// fewer than two values and the mean is `None` for none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: None, ci95: None, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ci95 = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    });
    Summary { mean: Some(mean), ci95, n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub pieces: Vec<PieceMetrics>,
    pub pitch_class_entropy: Summary,
    pub scale_consistency: Summary,
    pub groove_consistency: Summary,
    pub pitch_histogram: Vec<f64>,
    pub velocity_histogram: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generated: CorpusMetrics,
    pub real: CorpusMetrics,
    pub pitch_divergence: f64,
    pub velocity_divergence: f64,
    pub feature_similarity: Option<f64>,
}

/// Per-piece metrics and pooled histograms. Pieces without notes are
/// skipped for the per-piece values but must not make up the whole corpus.
pub fn corpus_metrics(scores: &[Score], cfg: &EvalConfig) -> Result<CorpusMetrics> {
    if scores.iter().all(|s| s.notes.is_empty()) {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut pieces = Vec::new();
    let mut pitch = vec![0.0; 128];
    let mut velocity = vec![0.0; cfg.velocity_bins as usize];
    for s in scores.iter().filter(|s| !s.notes.is_empty()) {
        pieces.push(PieceMetrics {
            pitch_class_entropy: pitch_class_entropy(s)?,
            scale_consistency: scale_consistency(s)?,
            groove_consistency: groove_consistency(s, cfg.positions_per_bar).ok(),
        });
        for (a, b) in pitch.iter_mut().zip(pitch_histogram(s)) {
            *a += b;
        }
        for (a, b) in velocity.iter_mut().zip(velocity_histogram(s, cfg.velocity_bins)) {
            *a += b;
        }
    }
    let col = |f: fn(&PieceMetrics) -> Option<f64>| summarize(&pieces.iter().filter_map(f).collect::<Vec<_>>());
    Ok(CorpusMetrics {
        pitch_class_entropy: col(|p| Some(p.pitch_class_entropy)),
        scale_consistency: col(|p| Some(p.scale_consistency)),
        groove_consistency: col(|p| p.groove_consistency),
        pieces,
        pitch_histogram: pitch,
        velocity_histogram: velocity,
    })
}

pub fn evaluate_corpus(gen: &[Score], real: &[Score], cfg: &EvalConfig) -> Result<MetricsReport> {
    let generated = corpus_metrics(gen, cfg)?;
    let real = corpus_metrics(real, cfg)?;
    Ok(MetricsReport {
        pitch_divergence: histogram_divergence(&generated.pitch_histogram, &real.pitch_histogram)?,
        velocity_divergence: histogram_divergence(&generated.velocity_histogram, &real.velocity_histogram)?,
        feature_similarity: None,
        generated,
        real,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table with one row per corpus.
    pub fn to_table(&self) -> String {
        let cell = |s: &Summary| match (s.mean, s.ci95) {
            (Some(m), Some(c)) => format!("{m:.4} ± {c:.4}"),
            (Some(m), None) => format!("{m:.4}"),
            _ => "-".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>18} {:>18} {:>18} {:>10} {:>10}", "corpus", "PCE", "GC", "SC", "PD", "VD");
        for (name, c, pd, vd) in [
            ("real", &self.real, "-".to_string(), "-".to_string()),
            ("generated", &self.generated, format!("{:.4}", self.pitch_divergence), format!("{:.4}", self.velocity_divergence)),
        ] {
            let _ = writeln!(
                out,
                "{:<10} {:>18} {:>18} {:>18} {:>10} {:>10}",
                name,
                cell(&c.pitch_class_entropy),
                cell(&c.groove_consistency),
                cell(&c.scale_consistency),
                pd,
                vd
            );
        }
        if let Some(sim) = self.feature_similarity {
            let _ = writeln!(out, "feature similarity: {sim:.4}");
        }
        out
    }

    /// `bin,real_count,gen_count` rows for the pitch or velocity histogram.
    pub fn histogram_csv(&self, which: HistogramKind) -> String {
        let (r, g) = match which {
            HistogramKind::Pitch => (&self.real.pitch_histogram, &self.generated.pitch_histogram),
            HistogramKind::Velocity => (&self.real.velocity_histogram, &self.generated.velocity_histogram),
        };
        let first = match which {
            HistogramKind::Pitch => 0,
            HistogramKind::Velocity => 1,
        };
        let mut out = String::from("bin,real_count,gen_count\n");
        for (i, (a, b)) in r.iter().zip(g).enumerate() {
            let _ = writeln!(out, "{},{a},{b}", i + first);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramKind {
    Pitch,
    Velocity,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::NoteEvent;

    fn score(pitches: &[u8]) -> Score {
        let notes = pitches.iter().enumerate().map(|(i, &p)| NoteEvent::new(i as u64 * 24, 24, p, 80)).collect();
        Score::with_notes(96, notes)
    }

    fn onsets(bars: &[&[u64]]) -> Score {
        let mut notes = Vec::new();
        for (b, cells) in bars.iter().enumerate() {
            for &c in *cells {
                notes.push(NoteEvent::new((b as u64 * 16 + c) * 24, 24, 60, 80));
            }
        }
        Score::with_notes(96, notes)
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(pitch_class_entropy(&score(&[60, 72, 48])).unwrap(), 0.0);
        let chromatic: Vec<u8> = (60..72).collect();
        assert!((pitch_class_entropy(&score(&chromatic)).unwrap() - 12f64.log2()).abs() < 1e-12);
        let c_major = [60, 62, 64, 65, 67, 69, 71];
        assert!((pitch_class_entropy(&score(&c_major)).unwrap() - 2.807354922057604).abs() < 1e-12);
        assert_eq!(pitch_class_entropy(&Score::new(96)), Err(MetricsError::EmptyScore));
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scale_consistency(&score(&[60, 62, 64, 65, 67, 69, 71, 72])).unwrap(), 1.0);
        let chromatic: Vec<u8> = (60..72).collect();
        assert!((scale_consistency(&score(&chromatic)).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(scale_consistency(&score(&[61])).unwrap(), 1.0);
        assert_eq!(scales().len(), 24);
        assert!(scales().iter().all(|m| m.iter().filter(|&&b| b).count() == 7));
    }

    #[test]
    fn groove_examples() {
        let same: &[u64] = &[0, 4, 8, 12];
        assert_eq!(groove_consistency(&onsets(&[same, same, same]), 16).unwrap(), 1.0);
        let a: &[u64] = &[0, 1, 2, 3, 4, 5, 6, 7];
        let b: &[u64] = &[8, 9, 10, 11, 12, 13, 14, 15];
        assert_eq!(groove_consistency(&onsets(&[a, b, a, b]), 16).unwrap(), 0.0);
        assert_eq!(groove_consistency(&onsets(&[&[0, 4], &[0, 4, 9]]), 16).unwrap(), 0.9375);
        assert_eq!(groove_consistency(&onsets(&[same]), 16), Err(MetricsError::TooFewBars { bars: 1 }));
        // an empty bar in between counts as an empty grid
        assert_eq!(groove_consistency(&onsets(&[&[0], &[], &[0]]), 16).unwrap(), 1.0 - 2.0 / 32.0);
    }

    #[test]
    fn divergence_examples() {
        let h = [3.0, 1.0, 0.0, 7.0];
        assert!(histogram_divergence(&h, &h).unwrap() < 1e-9);
        let kl = histogram_divergence(&[0.25; 4], &[0.5, 0.5, 0.0, 0.0]).unwrap();
        // smoothing moves the value by about 2ε·ln ε from ln 2
        let z = 1.0 + 4.0 * SMOOTHING;
        let (p, pz, q) = ((0.5 + SMOOTHING) / z, SMOOTHING / z, (0.25 + SMOOTHING) / z);
        let exact = 2.0 * p * (p / q).ln() + 2.0 * pz * (pz / q).ln();
        assert!((kl - exact).abs() < 1e-14, "{kl} vs {exact}");
        assert!((kl - 2f64.ln()).abs() < 1e-4);
        let far = histogram_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(far.is_finite() && (far - (1.0 / SMOOTHING).ln()).abs() < 0.1, "{far}");
        assert_eq!(histogram_divergence(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricsError::EmptyHistogram));
        assert!(matches!(histogram_divergence(&[1.0], &[1.0, 0.0]), Err(MetricsError::BinMismatch { .. })));
    }

    #[test]
    fn cosine_examples() {
        assert!((feature_cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(feature_cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((feature_cosine_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(feature_cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricsError::ZeroVector));
        assert!(matches!(feature_cosine_similarity(&[1.0], &[1.0, 0.0]), Err(MetricsError::DimensionMismatch { .. })));
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, Some(2.5));
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.ci95.unwrap() - 1.96 * sd / 2.0).abs() < 1e-15);
        assert_eq!(summarize(&[7.0]).ci95, None);
        assert_eq!(summarize(&[]).mean, None);
    }

    #[test]
    fn self_comparison_has_no_divergence() {
        let corpus = vec![score(&[60, 64, 67, 72, 60]), onsets(&[&[0, 4], &[0, 8]])];
        let r = evaluate_corpus(&corpus, &corpus, &EvalConfig::default()).unwrap();
        assert!(r.pitch_divergence < 1e-9 && r.velocity_divergence < 1e-9);
        assert_eq!(r.generated.pitch_class_entropy, r.real.pitch_class_entropy);
        assert_eq!(r.real.groove_consistency.n, 1);
        assert_eq!(r.real.groove_consistency.ci95, None);
        let csv = r.histogram_csv(HistogramKind::Velocity);
        assert_eq!(csv.lines().count(), 33);
        assert!(csv.starts_with("bin,real_count,gen_count\n1,0,0\n"));
        assert!(r.to_table().lines().count() >= 3);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(evaluate_corpus(&[], &corpus, &EvalConfig::default()), Err(MetricsError::EmptyCorpus));
    }
}
