//! Time-domain alignment processing: lags, spike smoothing, silence insertion
//! and the padding penalty used to keep generated speech behind its source.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::align::AlignmentMap;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub text: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimedTranscript {
    pub words: Vec<TimedWord>,
}

impl TimedTranscript {
    pub fn new(words: Vec<TimedWord>) -> Result<Self> {
        let t = Self { words };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for (i, w) in self.words.iter().enumerate() {
            if !(w.start >= 0.0 && w.start < w.end && w.end.is_finite()) {
                return Err(Error::Format(format!("word {} ({:?}): need 0 ≤ start < end", i + 1, w.text)));
            }
            if w.start < prev {
                return Err(Error::Format(format!("word {} ({:?}): starts out of order", i + 1, w.text)));
            }
            prev = w.start;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.words.iter().map(|w| w.text.clone()).collect()
    }

    /// End time of the 1-based word `i`.
    pub fn end_of(&self, i: usize) -> Result<f64> {
        if i == 0 || i > self.words.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.words.len() });
        }
        Ok(self.words[i - 1].end)
    }

    /// One JSON object per line.
    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut words = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                words.push(serde_json::from_str(&line)?);
            }
        }
        Self::new(words)
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for word in &self.words {
            serde_json::to_writer(&mut *w, word)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `delay_j = target.start(j) − source.end(a_j)`; negative means a causality violation.
#[derive(Debug, Clone, PartialEq)]
pub struct LagProfile {
    pub delays: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LagStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Words whose delay is below the required minimum lag.
    pub violations: usize,
}

impl LagProfile {
    pub fn stats(&self, min_lag_s: f64) -> LagStats {
        let n = self.delays.len().max(1) as f64;
        LagStats {
            mean: self.delays.iter().sum::<f64>() / n,
            min: self.delays.iter().copied().fold(f64::INFINITY, f64::min),
            max: self.delays.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            violations: self.delays.iter().filter(|&&d| d < min_lag_s - 1e-9).count(),
        }
    }
}

fn check_alignment(a: &AlignmentMap, source: &TimedTranscript, target_len: usize) -> Result<()> {
    if a.len() != target_len {
        return Err(Error::LengthMismatch { what: "alignment vs target words", left: a.len(), right: target_len });
    }
    for &i in &a.a {
        source.end_of(i)?;
    }
    Ok(())
}

pub fn compute_lags(source: &TimedTranscript, target: &TimedTranscript, a: &AlignmentMap) -> Result<LagProfile> {
    check_alignment(a, source, target.len())?;
    let delays = target.words.iter().zip(&a.a).map(|(w, &i)| w.start - source.words[i - 1].end).collect();
    Ok(LagProfile { delays })
}

/// Mean of `source.end(a_k)` over the centred window around `j`, excluding `j`.
fn window_mean(ends: &[f64], j: usize, window: usize) -> Option<f64> {
    let half = window / 2;
    let lo = j.saturating_sub(half);
    let hi = (j + half).min(ends.len() - 1);
    let (sum, count) = (lo..=hi).filter(|&k| k != j).fold((0.0, 0), |(s, c), k| (s + ends[k], c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Pull back alignment spikes whose source end exceeds `(1 + threshold)` times
/// the windowed mean of their neighbours, repeating until nothing moves.
pub fn smooth_spikes(a: &AlignmentMap, source: &TimedTranscript, window: usize, threshold: f64) -> Result<AlignmentMap> {
    if window == 0 {
        return Err(Error::config("window", "must be at least 1"));
    }
    check_alignment(a, source, a.len())?;
    let src_ends: Vec<f64> = source.words.iter().map(|w| w.end).collect();
    let mut out = a.clone();
    if out.is_empty() {
        return Ok(out);
    }
    loop {
        let ends: Vec<f64> = out.a.iter().map(|&i| src_ends[i - 1]).collect();
        let mut changed = false;
        for j in 0..out.len() {
            let Some(base) = window_mean(&ends, j, window) else { continue };
            let cap = (1.0 + threshold) * base;
            if ends[j] > cap {
                // Largest source index that ends within the cap; index 1 if none does.
                let best = src_ends.iter().rposition(|&e| e <= cap).map_or(1, |p| p + 1);
                if best < out.a[j] {
                    out.a[j] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(out);
        }
    }
}

/// Whether every position respects the smoothing cap (positions already at
/// index 1 cannot move further and are exempt).
pub fn satisfies_spike_cap(a: &AlignmentMap, source: &TimedTranscript, window: usize, threshold: f64) -> bool {
    let ends: Vec<f64> = a.a.iter().map(|&i| source.words[i - 1].end).collect();
    (0..ends.len()).all(|j| match window_mean(&ends, j, window) {
        Some(base) => ends[j] <= (1.0 + threshold) * base || a.a[j] == 1,
        None => true,
    })
}

/// Delay target words so that each starts at least `min_lag_s` after the end
/// of its aligned source word. Words keep their durations and order; a shift
/// carries over to every later word.
pub fn insert_silences(
    target: &TimedTranscript,
    source: &TimedTranscript,
    a: &AlignmentMap,
    min_lag_s: f64,
) -> Result<TimedTranscript> {
    check_alignment(a, source, target.len())?;
    let mut shift: f64 = 0.0;
    let mut prev_end = f64::NEG_INFINITY;
    let mut words = Vec::with_capacity(target.len());
    for (w, &i) in target.words.iter().zip(&a.a) {
        let need = source.words[i - 1].end + min_lag_s;
        let start = prev_end.max(w.start + shift).max(need);
        shift = start - w.start;
        let end = start + (w.end - w.start);
        prev_end = end;
        words.push(TimedWord { text: w.text.clone(), start, end });
    }
    Ok(TimedTranscript { words })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaddingDecision {
    /// Added to the padding-token logit; always ≤ 0.
    pub bias: f64,
    /// The pending word would start before its aligned source word: emit padding.
    pub force_pad: bool,
}

/// Bias is 0 up to 1 s of lag, falls linearly to −2 at 2 s, then stays there.
/// A negative lag forces padding.
pub fn padding_penalty(lag_s: f64) -> PaddingDecision {
    let bias = -2.0 * (lag_s - 1.0).clamp(0.0, 1.0);
    PaddingDecision { bias, force_pad: lag_s < 0.0 }
}

/// Apply [`padding_penalty`] to a row of text logits.
pub fn apply_padding_penalty(logits: &mut [f64], pad_id: usize, lag_s: f64) {
    let d = padding_penalty(lag_s);
    if d.force_pad {
        for (i, l) in logits.iter_mut().enumerate() {
            if i != pad_id {
                *l = f64::NEG_INFINITY;
            }
        }
    } else {
        logits[pad_id] += d.bias;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub before: LagStats,
    pub after: LagStats,
    pub smoothed_changes: usize,
    pub inserted_silence_s: f64,
}

/// compute → smooth → insert, with lag statistics before and after.
pub fn run_pipeline(
    source: &TimedTranscript,
    target: &TimedTranscript,
    a: &AlignmentMap,
    window: usize,
    threshold: f64,
    min_lag_s: f64,
) -> Result<(TimedTranscript, AlignmentMap, PipelineReport)> {
    let before = compute_lags(source, target, a)?.stats(min_lag_s);
    let smoothed = smooth_spikes(a, source, window, threshold)?;
    let shifted = insert_silences(target, source, &smoothed, min_lag_s)?;
    let after = compute_lags(source, &shifted, &smoothed)?.stats(min_lag_s);
    let inserted = match (shifted.words.last(), target.words.last()) {
        (Some(x), Some(y)) => x.end - y.end,
        _ => 0.0,
    };
    let changes = smoothed.a.iter().zip(&a.a).filter(|(x, y)| x != y).count();
    Ok((shifted, smoothed, PipelineReport { before, after, smoothed_changes: changes, inserted_silence_s: inserted }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(spans: &[(f64, f64)]) -> TimedTranscript {
        TimedTranscript::new(
            spans.iter().enumerate().map(|(i, &(s, e))| TimedWord { text: format!("w{i}"), start: s, end: e }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn lag_examples() {
        let src = tr(&[(0.0, 1.0), (2.0, 3.5)]);
        let tgt = tr(&[(1.0, 1.5), (5.5, 6.0)]);
        let lags = compute_lags(&src, &tgt, &AlignmentMap::from_indices(vec![1, 2])).unwrap();
        assert_eq!(lags.delays, vec![0.0, 2.0]);
        assert!(compute_lags(&src, &tgt, &AlignmentMap::from_indices(vec![1, 3])).is_err());
        assert!(compute_lags(&src, &tgt, &AlignmentMap::from_indices(vec![1])).is_err());
    }

    #[test]
    fn planted_spike() {
        let src = tr(&(0..9).map(|i| (i as f64, i as f64 + 1.0)).collect::<Vec<_>>());
        // aligned end-times [2, 2, 9, 2, 2]
        let a = AlignmentMap::from_indices(vec![2, 2, 9, 2, 2]);
        let s = smooth_spikes(&a, &src, 5, 0.25).unwrap();
        assert_eq!(s.a, vec![2, 2, 2, 2, 2]);
        assert!(src.end_of(s.a[2]).unwrap() <= 1.25 * 2.0);
        assert_eq!(smooth_spikes(&s, &src, 5, 0.25).unwrap(), s);
    }

    #[test]
    fn constant_alignment_untouched() {
        let src = tr(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]);
        let a = AlignmentMap::from_indices(vec![2; 6]);
        assert_eq!(smooth_spikes(&a, &src, 5, 0.25).unwrap(), a);
    }

    #[test]
    fn silence_example() {
        let src = tr(&[(0.0, 1.0), (2.0, 3.5)]);
        let tgt = tr(&[(1.0, 1.5), (1.6, 2.0), (8.0, 8.5)]);
        let out = insert_silences(&tgt, &src, &AlignmentMap::from_indices(vec![2, 1, 1]), 2.0).unwrap();
        assert_eq!((out.words[0].start, out.words[0].end), (5.5, 6.0));
        assert!((out.words[1].start - 6.1).abs() < 1e-12);
        assert_eq!(out.words[2].start, 12.5);
    }

    #[test]
    fn causal_input_unchanged() {
        let src = tr(&[(0.0, 1.0), (1.0, 2.0)]);
        let tgt = tr(&[(3.0, 3.5), (4.5, 5.0)]);
        let a = AlignmentMap::from_indices(vec![1, 2]);
        assert_eq!(insert_silences(&tgt, &src, &a, 2.0).unwrap(), tgt);
    }

    #[test]
    fn padding_examples() {
        assert_eq!(padding_penalty(0.5).bias, 0.0);
        assert_eq!(padding_penalty(1.5).bias, -1.0);
        assert_eq!(padding_penalty(3.0).bias, -2.0);
        assert!(padding_penalty(-0.1).force_pad);
        assert!(!padding_penalty(0.0).force_pad);
        let mut l = vec![1.0, 2.0, 3.0];
        apply_padding_penalty(&mut l, 0, 1.5);
        assert_eq!(l, vec![0.0, 2.0, 3.0]);
        apply_padding_penalty(&mut l, 0, -1.0);
        assert_eq!(l, vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
    }

    #[test]
    fn transcript_jsonl() {
        let t = tr(&[(0.0, 0.5), (0.5, 1.25)]);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("{\"text\":\"w0\",\"start\":0.0,\"end\":0.5}"));
        assert_eq!(TimedTranscript::read_jsonl(buf.as_slice()).unwrap(), t);
        assert!(TimedTranscript::read_jsonl("{\"text\":\"x\",\"start\":1.0,\"end\":0.5}".as_bytes()).is_err());
    }
}
