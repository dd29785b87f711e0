//! Translation quality and latency metrics.
//!
//! BLEU here is the usual corpus formula with no smoothing:
//! `BLEU = BP · exp(¼ Σ_{n=1..4} ln p_n)` where `p_n` is the clipped n-gram
//! precision summed over the corpus, `BP = 1` if `c > r` else `exp(1 − r/c)`,
//! `c`/`r` are total hypothesis/reference lengths. Any `p_n = 0` gives 0.
//! Scores are reported on a 0–100 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::ConditionLabel;
use crate::{Error, Result};

pub const BLEU_MAX_N: usize = 4;

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text.chars().filter(|&c| !c.is_ascii_punctuation() && !is_unicode_punct(c)).collect();
    cleaned.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '«' | '»' | '“' | '”' | '‘' | '’' | '…' | '–' | '—' | '¿' | '¡')
}

pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Sufficient statistics for BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_N],
    pub totals: [usize; BLEU_MAX_N],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn from_pair<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut s = Self { hyp_len: hyp.len(), ref_len: reference.len(), ..Default::default() };
        for n in 1..=BLEU_MAX_N {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_N {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..BLEU_MAX_N)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / BLEU_MAX_N as f64;
        let bp = if self.hyp_len > self.ref_len { 1.0 } else { (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp() };
        100.0 * bp * log_p.exp()
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU over already-tokenized input. Errors on an empty reference.
pub fn sentence_bleu<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    Ok(BleuStats::from_pair(hyp, reference).score())
}

/// Corpus BLEU over `(hypothesis, reference)` token pairs.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64> {
    if pairs.is_empty() || pairs.iter().all(|(_, r)| r.is_empty()) {
        return Err(Error::Empty("reference"));
    }
    let mut total = BleuStats::default();
    for (h, r) in pairs {
        total.add(&BleuStats::from_pair(h, r));
    }
    Ok(total.score())
}

/// Inputs to [`laal`]: word emission times, source duration, reference length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyInputs {
    pub emit_times: Vec<f64>,
    pub source_duration: f64,
    pub n_ref: usize,
}

/// Length-adaptive average lagging, in the units of the inputs.
///
/// `δ = Δ / max(n_gen, n_ref)`, `n_max = min{i | d_i ≥ Δ}` (or `n_gen` if no
/// word reaches Δ), `LAAL = (1/n_max) Σ_{i≤n_max} d_i − (i−1)·δ`.
pub fn laal(inputs: &LatencyInputs) -> Result<f64> {
    let d = &inputs.emit_times;
    if d.is_empty() {
        return Err(Error::Empty("emission times"));
    }
    if !(inputs.source_duration > 0.0) {
        return Err(Error::config("source_duration", "must be positive"));
    }
    if inputs.n_ref == 0 {
        return Err(Error::config("n_ref", "must be at least 1"));
    }
    if d.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config("emit_times", "must be non-decreasing"));
    }
    let delta = inputs.source_duration / d.len().max(inputs.n_ref) as f64;
    let n_max = d.iter().position(|&t| t >= inputs.source_duration).map_or(d.len(), |i| i + 1);
    let sum: f64 = d[..n_max].iter().enumerate().map(|(i, &t)| t - i as f64 * delta).sum();
    Ok(sum / n_max as f64)
}

/// Seconds from the end of the last source word to the end of the last output word.
pub fn end_offset(source_last_end: f64, output_last_end: f64) -> f64 {
    output_last_end - source_last_end
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Nearest-rank 20/40/60/80th percentiles.
pub fn quintile_boundaries(scores: &[f64]) -> Result<[f64; 4]> {
    if scores.len() < 5 {
        return Err(Error::TooFewScores(scores.len()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        let rank = ((k + 1) * n).div_ceil(5);
        *o = sorted[rank - 1];
    }
    Ok(out)
}

/// Label every score by its quintile within its own dataset; a score equal to
/// a boundary falls in the lower bucket. A dataset whose scores are all equal
/// is labeled neutral throughout.
pub fn quantile_labels(datasets: &[Vec<f64>]) -> Result<Vec<Vec<ConditionLabel>>> {
    datasets
        .iter()
        .map(|scores| {
            let b = quintile_boundaries(scores)?;
            let first = scores[0];
            if scores.iter().all(|&s| s == first) {
                return Ok(vec![ConditionLabel::Neutral; scores.len()]);
            }
            Ok(scores
                .iter()
                .map(|&s| {
                    let bucket = b.iter().filter(|&&x| s > x).count();
                    ConditionLabel::from_index(bucket).expect("bucket < 5")
                })
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Hello,   World! It's  "), "hello world its");
        assert_eq!(normalize("«Oui» — dit-il…"), "oui ditil");
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let r = toks("the cat sat on the mat today");
        assert!((sentence_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(sentence_bleu(&toks("a b c d e"), &toks("f g h i j")).unwrap(), 0.0);
        assert_eq!(sentence_bleu(&Vec::<String>::new(), &r).unwrap(), 0.0);
        assert!(sentence_bleu(&r, &Vec::<String>::new()).is_err());
    }

    #[test]
    fn bleu_hand_computed() {
        // c=6, r=7; p1=5/6 p2=3/5 p3=2/4 p4=1/3
        let h = toks("the cat sat on a mat");
        let r = toks("the cat sat on the mat today");
        let want = (1.0f64 - 7.0 / 6.0).exp() * ((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0f64 / 3.0)).powf(0.25);
        assert!((sentence_bleu(&h, &r).unwrap() - 100.0 * want).abs() < 1e-9);
    }

    #[test]
    fn bleu_reordering_matters() {
        let r = toks("one two three four five six");
        let h = toks("one two four three five six");
        assert!(sentence_bleu(&h, &r).unwrap() < 100.0);
    }

    #[test]
    fn laal_examples() {
        let li = LatencyInputs { emit_times: vec![3.0, 4.0, 5.0], source_duration: 4.0, n_ref: 3 };
        assert!((laal(&li).unwrap() - 2.833_333_333_333_333).abs() < 1e-9);
        let one = LatencyInputs { emit_times: vec![2.5], source_duration: 2.5, n_ref: 1 };
        assert_eq!(laal(&one).unwrap(), 2.5);
        let early = LatencyInputs { emit_times: vec![0.5, 1.0], source_duration: 4.0, n_ref: 2 };
        assert!((laal(&early).unwrap() - (0.5 + (1.0 - 2.0)) / 2.0).abs() < 1e-12);
        assert!(laal(&LatencyInputs { emit_times: vec![], source_duration: 1.0, n_ref: 1 }).is_err());
    }

    #[test]
    fn offsets_and_cosine() {
        assert!((end_offset(10.0, 12.9) - 2.9).abs() < 1e-12);
        assert_eq!(end_offset(3.0, 3.0), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn quintiles_uniform() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quintile_boundaries(&s).unwrap(), [20.0, 40.0, 60.0, 80.0]);
        let labels = &quantile_labels(&[s]).unwrap()[0];
        for l in ConditionLabel::ALL {
            assert_eq!(labels.iter().filter(|&&x| x == l).count(), 20);
        }
        assert_eq!(labels[19], ConditionLabel::VeryBad);
        assert_eq!(labels[20], ConditionLabel::Bad);
    }

    #[test]
    fn quintile_edge_cases() {
        assert!(matches!(quantile_labels(&[vec![1.0; 4]]), Err(Error::TooFewScores(4))));
        assert!(quantile_labels(&[vec![0.3; 7]]).unwrap()[0].iter().all(|&l| l == ConditionLabel::Neutral));
    }
}
