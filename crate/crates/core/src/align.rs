//! Contextual word alignment: for each target word, the source prefix length
//! at which its conditional log-likelihood jumps the most.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use crate::{Error, Result};

/// Conditional scorer `log P[word | source_prefix, target_prefix]`.
pub trait Scorer: Sync {
    fn score(&self, source_prefix: &[String], target_prefix: &[String], word: &str) -> Result<f64>;

    /// Whether distinct calls may run on different threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Returns the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _: &[String], _: &[String], _: &str) -> Result<f64> {
        Ok(self.0)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Probability jumps from `low` to `high` once the source prefix reaches the
/// planted 1-based index of the current target word.
#[derive(Debug, Clone)]
pub struct PlantedStepScorer {
    pub switch: Vec<usize>,
    pub low: f64,
    pub high: f64,
}

impl PlantedStepScorer {
    pub fn new(switch: Vec<usize>) -> Self {
        Self { switch, low: 0.1f64.ln(), high: 0.9f64.ln() }
    }
}

impl Scorer for PlantedStepScorer {
    fn score(&self, source_prefix: &[String], target_prefix: &[String], _: &str) -> Result<f64> {
        let j = target_prefix.len();
        let at = *self
            .switch
            .get(j)
            .ok_or(Error::IndexOutOfRange { index: j, len: self.switch.len() })?;
        Ok(if source_prefix.len() >= at { self.high } else { self.low })
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Lexical translation table trained with IBM Model 1 EM.
/// Scores `ln(ε + max_{s ∈ prefix} t(word | s))`.
#[derive(Debug, Clone)]
pub struct WordTableScorer {
    table: HashMap<(String, String), f64>,
    pub epsilon: f64,
}

impl WordTableScorer {
    pub fn train(pairs: &[(Vec<String>, Vec<String>)], iterations: usize, epsilon: f64) -> Self {
        let mut table: HashMap<(String, String), f64> = HashMap::new();
        let mut targets = std::collections::HashSet::new();
        for (_, t) in pairs {
            targets.extend(t.iter().cloned());
        }
        let uniform = 1.0 / targets.len().max(1) as f64;
        for (s, t) in pairs {
            for sw in s {
                for tw in t {
                    table.insert((tw.clone(), sw.clone()), uniform);
                }
            }
        }
        for _ in 0..iterations {
            let mut counts: HashMap<(String, String), f64> = HashMap::new();
            let mut totals: HashMap<String, f64> = HashMap::new();
            for (s, t) in pairs {
                for tw in t {
                    let z: f64 = s.iter().map(|sw| table[&(tw.clone(), sw.clone())]).sum();
                    for sw in s {
                        let c = table[&(tw.clone(), sw.clone())] / z;
                        *counts.entry((tw.clone(), sw.clone())).or_default() += c;
                        *totals.entry(sw.clone()).or_default() += c;
                    }
                }
            }
            for (k, v) in table.iter_mut() {
                *v = counts.get(k).copied().unwrap_or(0.0) / totals[&k.1];
            }
        }
        Self { table, epsilon }
    }

    /// `t(target | source)`, zero for unseen pairs.
    pub fn prob(&self, target: &str, source: &str) -> f64 {
        self.table.get(&(target.to_string(), source.to_string())).copied().unwrap_or(0.0)
    }
}

impl Scorer for WordTableScorer {
    fn score(&self, source_prefix: &[String], _: &[String], word: &str) -> Result<f64> {
        let best = source_prefix.iter().map(|s| self.prob(word, s)).fold(0.0, f64::max);
        Ok((self.epsilon + best).ln())
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

type MemoKey = (Vec<String>, Vec<String>, String);

/// Memoizing wrapper; counts the calls that reach the inner scorer.
pub struct CachedScorer<S> {
    inner: S,
    memo: Mutex<HashMap<MemoKey, f64>>,
    misses: Mutex<usize>,
}

impl<S: Scorer> CachedScorer<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, memo: Mutex::new(HashMap::new()), misses: Mutex::new(0) }
    }

    pub fn misses(&self) -> usize {
        *self.misses.lock().expect("memo lock")
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn score(&self, source_prefix: &[String], target_prefix: &[String], word: &str) -> Result<f64> {
        let key = (source_prefix.to_vec(), target_prefix.to_vec(), word.to_string());
        if let Some(v) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(*v);
        }
        let v = self.inner.score(source_prefix, target_prefix, word)?;
        *self.misses.lock().expect("memo lock") += 1;
        self.memo.lock().expect("memo lock").insert(key, v);
        Ok(v)
    }

    fn concurrent_safe(&self) -> bool {
        self.inner.concurrent_safe()
    }
}

/// `m × (n+1)` table of `log p̂_{j,i}`; column 0 is the empty source prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikTable {
    pub m: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl LogLikTable {
    /// `j` is 0-based over target words, `i` in `0..=n` counts source words.
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.data[j * (self.n + 1) + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * (self.n + 1)..(j + 1) * (self.n + 1)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("j");
        for i in 0..=self.n {
            let _ = write!(s, ",i{i}");
        }
        s.push('\n');
        for j in 0..self.m {
            let _ = write!(s, "{}", j + 1);
            for v in self.row(j) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn score_row(scorer: &dyn Scorer, source: &[String], target: &[String], j: usize) -> Result<Vec<f64>> {
    (0..=source.len())
        .map(|i| {
            let v = scorer.score(&source[..i], &target[..j], &target[j]).map_err(|e| Error::Scorer {
                j: j + 1,
                i,
                message: e.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Scorer { j: j + 1, i, message: format!("non-finite score {v}") });
            }
            Ok(v)
        })
        .collect()
}

/// Score every `(j, i)` pair, rows in parallel when the scorer allows it.
pub fn loglik_matrix(scorer: &dyn Scorer, source: &[String], target: &[String]) -> Result<LogLikTable> {
    if source.is_empty() {
        return Err(Error::Empty("source words"));
    }
    if target.is_empty() {
        return Err(Error::Empty("target words"));
    }
    let (m, n) = (target.len(), source.len());
    let threads = if scorer.concurrent_safe() {
        std::thread::available_parallelism().map_or(1, |p| p.get()).min(m)
    } else {
        1
    };
    let rows: Vec<Result<Vec<f64>>> = if threads <= 1 {
        (0..m).map(|j| score_row(scorer, source, target, j)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    scope.spawn(move || {
                        (w..m).step_by(threads).map(|j| (j, score_row(scorer, source, target, j))).collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut rows: Vec<Option<Result<Vec<f64>>>> = (0..m).map(|_| None).collect();
            for h in handles {
                for (j, r) in h.join().expect("scorer thread panicked") {
                    rows[j] = Some(r);
                }
            }
            rows.into_iter().map(|r| r.expect("every row scored")).collect()
        })
    };
    let mut data = Vec::with_capacity(m * (n + 1));
    for r in rows {
        data.extend(r?);
    }
    Ok(LogLikTable { m, n, data })
}

/// Per target word: 1-based source index and the winning log-likelihood jump.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub a: Vec<usize>,
    pub delta: Vec<f64>,
}

impl AlignmentMap {
    pub fn from_indices(a: Vec<usize>) -> Self {
        let delta = vec![0.0; a.len()];
        Self { a, delta }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Lines of `j<TAB>a_j<TAB>delta`, both indices 1-based.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for (j, (a, d)) in self.a.iter().zip(&self.delta).enumerate() {
            writeln!(w, "{}\t{}\t{}", j + 1, a, d)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut a = Vec::new();
        let mut delta = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("alignment line {}: {line:?}", lineno + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let j: usize = cols[0].parse().map_err(|_| bad())?;
            if j != a.len() + 1 {
                return Err(bad());
            }
            let aj: usize = cols[1].parse().map_err(|_| bad())?;
            if aj == 0 {
                return Err(bad());
            }
            a.push(aj);
            delta.push(cols[2].parse().map_err(|_| bad())?);
        }
        Ok(Self { a, delta })
    }
}

/// `a_j = argmax_{1≤i≤n} (log p̂_{j,i} − log p̂_{j,i−1})`, ties to the smallest `i`.
pub fn contextual_align(table: &LogLikTable) -> AlignmentMap {
    let mut a = Vec::with_capacity(table.m);
    let mut delta = Vec::with_capacity(table.m);
    for j in 0..table.m {
        let row = table.row(j);
        let mut best = (1, row[1] - row[0]);
        for i in 2..=table.n {
            let d = row[i] - row[i - 1];
            if d > best.1 {
                best = (i, d);
            }
        }
        a.push(best.0);
        delta.push(best.1);
    }
    AlignmentMap { a, delta }
}
