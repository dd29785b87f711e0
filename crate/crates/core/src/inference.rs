//! Streaming decoding: sampling, classifier-free guidance, sessions and
//! lock-step batched runs.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TokenGrid;
use crate::model::{ConditionLabel, LogitBundle, RqTransformer, TemporalCache};
use crate::streams::{text, MultistreamFrame, DELAY_TOKEN};
use crate::{Error, Result};

/// Extra frames fed after the source ends before a run is cut off (10 s at 12.5 Hz).
pub const DEFAULT_CAP_EXTRA: usize = 125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Low text temperature for single sentences.
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature_audio: f64,
    pub temperature_text: f64,
    pub top_k_audio: usize,
    pub top_k_text: usize,
    /// Guidance strength; `None` runs a single pass conditioned on `label`.
    pub cfg_gamma: Option<f64>,
    pub label: ConditionLabel,
    pub seed: u64,
    pub cap_extra: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::preset(Preset::Long)
    }
}

impl SamplingConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            temperature_audio: 0.8,
            temperature_text: match p {
                Preset::Short => 0.1,
                Preset::Long => 0.8,
            },
            top_k_audio: 250,
            top_k_text: 50,
            cfg_gamma: Some(3.0),
            label: ConditionLabel::VeryGood,
            seed: 0,
            cap_extra: DEFAULT_CAP_EXTRA,
        }
    }

    /// Argmax decoding without guidance.
    pub fn greedy() -> Self {
        Self { temperature_audio: 0.0, temperature_text: 0.0, cfg_gamma: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("temperature_audio", self.temperature_audio), ("temperature_text", self.temperature_text)] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::config(name, "must be a finite value ≥ 0"));
            }
        }
        if self.top_k_audio == 0 || self.top_k_text == 0 {
            return Err(Error::config("top_k", "must be at least 1"));
        }
        if let Some(g) = self.cfg_gamma {
            if !g.is_finite() {
                return Err(Error::config("cfg_gamma", "must be finite"));
            }
        }
        Ok(())
    }
}

/// `γ·good + (1−γ)·bad` on one logit vector.
pub fn cfg_combine_logits(good: &[f64], bad: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if good.len() != bad.len() {
        return Err(Error::DimensionMismatch { expected: good.len(), got: bad.len() });
    }
    Ok(good.iter().zip(bad).map(|(g, b)| gamma * g + (1.0 - gamma) * b).collect())
}

/// [`cfg_combine_logits`] on every vector of a bundle.
pub fn cfg_combine(good: &LogitBundle, bad: &LogitBundle, gamma: f64) -> Result<LogitBundle> {
    if good.audio.len() != bad.audio.len() {
        return Err(Error::DimensionMismatch { expected: good.audio.len(), got: bad.audio.len() });
    }
    Ok(LogitBundle {
        text: cfg_combine_logits(&good.text, &bad.text, gamma)?,
        audio: good.audio.iter().zip(&bad.audio).map(|(g, b)| cfg_combine_logits(g, b, gamma)).collect::<Result<_>>()?,
    })
}

/// Temperature 0 is argmax with ties to the lowest id. Otherwise keep the
/// `top_k` largest logits (ties to the lowest id), softmax at `temperature`, draw.
pub fn sample_token(logits: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    };
    if temperature == 0.0 || top_k <= 1 {
        return argmax();
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(top_k.min(logits.len()));
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding left a sliver past the last bucket
    *order.iter().zip(&weights).rev().find(|(_, w)| **w > 0.0).map(|(i, _)| i).unwrap_or(&order[0])
}

/// RNG for sequence `index` of a run seeded with `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Running,
    SourceEnded,
    Finished,
}

/// One decoded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    pub text: u16,
    pub audio: Vec<u16>,
}

/// A single streaming decode. Guided sessions keep two caches and run both
/// conditionings through each step together.
pub struct Session {
    model: Arc<RqTransformer>,
    config: SamplingConfig,
    rng: ChaCha8Rng,
    caches: Vec<TemporalCache>,
    prev: Option<MultistreamFrame>,
    state: SessionState,
    frames: Vec<MultistreamFrame>,
    source_consumed: usize,
    eos_frame: Option<usize>,
}

impl Session {
    pub fn new(model: Arc<RqTransformer>, config: SamplingConfig, index: u64) -> Result<Self> {
        config.validate()?;
        let caches = match config.cfg_gamma {
            Some(_) => vec![model.temporal_cache(ConditionLabel::VeryGood), model.temporal_cache(ConditionLabel::VeryBad)],
            None => vec![model.temporal_cache(config.label)],
        };
        let rng = sequence_rng(config.seed, index);
        Ok(Self {
            model,
            config,
            rng,
            caches,
            prev: None,
            state: SessionState::Running,
            frames: Vec::new(),
            source_consumed: 0,
            eos_frame: None,
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn frames(&self) -> &[MultistreamFrame] {
        &self.frames
    }

    pub fn eos_frame(&self) -> Option<usize> {
        self.eos_frame
    }

    pub fn source_consumed(&self) -> usize {
        self.source_consumed
    }

    /// No more live source; later steps take input-EOS frames.
    pub fn end_source(&mut self) {
        if self.state == SessionState::Running {
            self.state = SessionState::SourceEnded;
        }
    }

    /// The frame fed once the source has ended.
    pub fn input_eos_frame(&self) -> Vec<u16> {
        vec![self.model.config().audio().input_eos(); self.model.config().levels]
    }

    fn combine(&self, rows: Vec<Vec<f64>>) -> Result<Vec<f64>> {
        match (self.config.cfg_gamma, rows.len()) {
            (Some(g), 2) => cfg_combine_logits(&rows[0], &rows[1], g),
            _ => Ok(rows.into_iter().next().expect("one row per cache")),
        }
    }

    /// Decode one frame given the current source frame.
    pub fn step(&mut self, source_frame: &[u16]) -> Result<StepOutput> {
        if self.state == SessionState::Finished {
            return Err(Error::SessionFinished);
        }
        let cfg = self.model.config().clone();
        if source_frame.len() != cfg.levels {
            return Err(Error::LengthMismatch { what: "source frame levels", left: source_frame.len(), right: cfg.levels });
        }
        let t = self.frames.len();
        let model = Arc::clone(&self.model);
        let zs: Vec<Vec<f64>> =
            self.caches.iter_mut().map(|c| model.temporal_step(c, self.prev.as_ref())).collect::<Result<_>>()?;

        let flushing = self.eos_frame.is_some();
        let text_tok = if flushing {
            text::PAD
        } else {
            let mut logits = self.combine(zs.iter().map(|z| model.text_logits(z)).collect())?;
            if self.state == SessionState::Running {
                logits[usize::from(text::EOS)] = f64::NEG_INFINITY;
            }
            sample_token(&logits, self.config.temperature_text, self.config.top_k_text, &mut self.rng) as u16
        };

        let mut depth: Vec<_> = zs.iter().map(|z| model.depth_begin(z)).collect();
        let bos = usize::from(cfg.audio().bos());
        let mut audio = Vec::with_capacity(cfg.levels);
        let mut prev_tok = text_tok;
        for q in 0..cfg.levels {
            let rows = depth.iter_mut().map(|d| model.depth_step(d, prev_tok)).collect::<Result<Vec<_>>>()?;
            let tok = if q > 0 && t < cfg.delay_steps {
                DELAY_TOKEN
            } else {
                let mut logits = self.combine(rows)?;
                logits[bos] = f64::NEG_INFINITY;
                sample_token(&logits, self.config.temperature_audio, self.config.top_k_audio, &mut self.rng) as u16
            };
            audio.push(tok);
            prev_tok = tok;
        }
        // Input-stream positions are not sampled: the true source frame is used.

        let frame = MultistreamFrame { text: text_tok, target: audio.clone(), source: source_frame.to_vec() };
        self.frames.push(frame.clone());
        self.prev = Some(frame);
        if self.state == SessionState::Running {
            self.source_consumed += 1;
        }
        if self.state == SessionState::SourceEnded {
            if self.eos_frame.is_none() && text_tok == text::EOS {
                self.eos_frame = Some(t);
            }
            if let Some(e) = self.eos_frame {
                if t >= e + cfg.delay_steps {
                    self.state = SessionState::Finished;
                }
            }
        }
        Ok(StepOutput { text: text_tok, audio })
    }
}

/// Result of decoding one source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionOutput {
    #[serde(skip)]
    pub frames: Vec<MultistreamFrame>,
    pub source_frames: usize,
    /// Frame carrying the output text EOS, if sampled.
    pub eos_frame: Option<usize>,
    /// The cap was reached before the model produced EOS.
    pub truncated: bool,
    #[serde(skip)]
    pub frame_seconds: Vec<f64>,
    pub wall_s: f64,
    pub rtf: f64,
}

impl SessionOutput {
    pub fn text_tokens(&self) -> Vec<u16> {
        self.frames.iter().map(|f| f.text).collect()
    }

    /// Output target grid (still acoustically delayed).
    pub fn target_grid(&self, levels: usize) -> TokenGrid {
        let data = self.frames.iter().flat_map(|f| f.target.iter().copied()).collect();
        TokenGrid::new(self.frames.len(), levels, data).expect("frame widths are uniform")
    }

    /// Frames up to and including the text EOS.
    pub fn length_to_eos(&self) -> Option<usize> {
        self.eos_frame.map(|e| e + 1)
    }
}

/// Real-time factor: seconds of stream produced per wall-clock second.
pub fn real_time_factor(frames: usize, frame_rate_hz: f64, wall_s: f64) -> f64 {
    if wall_s <= 0.0 {
        return f64::INFINITY;
    }
    frames as f64 / (frame_rate_hz * wall_s)
}

struct Run {
    session: Session,
    source: TokenGrid,
    limit: usize,
    truncated: bool,
    done: bool,
    times: Vec<f64>,
}

impl Run {
    fn new(model: &Arc<RqTransformer>, source: &TokenGrid, config: &SamplingConfig, index: u64) -> Result<Self> {
        if source.frames == 0 {
            return Err(Error::Empty("source frames"));
        }
        let context = model.config().context_frames;
        let limit = (source.frames + config.cap_extra).min(context);
        Ok(Self {
            session: Session::new(Arc::clone(model), config.clone(), index)?,
            source: source.clone(),
            limit,
            truncated: false,
            done: false,
            times: Vec::new(),
        })
    }

    fn advance(&mut self) -> Result<()> {
        let t = self.session.frames.len();
        if t >= self.limit {
            self.truncated = true;
            self.done = true;
            return Ok(());
        }
        let start = Instant::now();
        if t < self.source.frames {
            let row = self.source.row(t).to_vec();
            self.session.step(&row)?;
            if t + 1 == self.source.frames {
                self.session.end_source();
            }
        } else {
            let eos = self.session.input_eos_frame();
            self.session.step(&eos)?;
        }
        self.times.push(start.elapsed().as_secs_f64());
        if self.session.state() == SessionState::Finished {
            self.done = true;
        }
        Ok(())
    }

    fn finish(self, frame_rate_hz: f64) -> SessionOutput {
        let wall_s: f64 = self.times.iter().sum();
        let frames = self.session.frames.len();
        SessionOutput {
            source_frames: self.source.frames,
            eos_frame: self.session.eos_frame,
            truncated: self.truncated,
            rtf: real_time_factor(frames, frame_rate_hz, wall_s),
            wall_s,
            frame_seconds: self.times,
            frames: self.session.frames,
        }
    }
}

fn frame_rate_of(source: &TokenGrid) -> f64 {
    if source.frame_rate_mhz == 0 {
        crate::codec::DEFAULT_FRAME_RATE_HZ
    } else {
        f64::from(source.frame_rate_mhz) / 1000.0
    }
}

/// Decode one source (already acoustically delayed, `frames × Q`), then keep
/// feeding input-EOS frames until the model's EOS plus the delay flush, or
/// until `source + cap_extra` frames.
pub fn run_session(model: &Arc<RqTransformer>, source: &TokenGrid, config: &SamplingConfig) -> Result<SessionOutput> {
    run_session_indexed(model, source, config, 0)
}

pub fn run_session_indexed(
    model: &Arc<RqTransformer>,
    source: &TokenGrid,
    config: &SamplingConfig,
    index: u64,
) -> Result<SessionOutput> {
    let mut run = Run::new(model, source, config, index)?;
    while !run.done {
        run.advance()?;
    }
    Ok(run.finish(frame_rate_of(source)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchTiming {
    pub batch: usize,
    pub cfg: bool,
    pub frames: usize,
    pub wall_s: f64,
    /// Stream seconds produced across the batch per wall second.
    pub rtf: f64,
    pub per_sequence_rtf: f64,
}

/// Decode every source in lock step; sequence `i` uses RNG stream `i`.
pub fn run_batched(
    model: &Arc<RqTransformer>,
    sources: &[TokenGrid],
    config: &SamplingConfig,
) -> Result<(Vec<SessionOutput>, BatchTiming)> {
    if sources.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut runs: Vec<Run> =
        sources.iter().enumerate().map(|(i, s)| Run::new(model, s, config, i as u64)).collect::<Result<_>>()?;
    let start = Instant::now();
    while runs.iter().any(|r| !r.done) {
        for r in runs.iter_mut().filter(|r| !r.done) {
            r.advance()?;
        }
    }
    let wall_s = start.elapsed().as_secs_f64();
    let fr = frame_rate_of(&sources[0]);
    let outputs: Vec<SessionOutput> = runs.into_iter().map(|r| r.finish(fr)).collect();
    let frames: usize = outputs.iter().map(|o| o.frames.len()).sum();
    let rtf = real_time_factor(frames, fr, wall_s);
    let timing = BatchTiming {
        batch: sources.len(),
        cfg: config.cfg_gamma.is_some(),
        frames,
        wall_s,
        rtf,
        per_sequence_rtf: rtf / sources.len() as f64,
    };
    Ok((outputs, timing))
}

/// Time [`run_batched`] at each batch size, with and without guidance.
/// Batches are filled by cycling through `sources`.
pub fn bench(
    model: &Arc<RqTransformer>,
    sources: &[TokenGrid],
    batch_sizes: &[usize],
    config: &SamplingConfig,
) -> Result<Vec<BatchTiming>> {
    if sources.is_empty() {
        return Err(Error::Empty("bench sources"));
    }
    let mut rows = Vec::new();
    for cfg in [false, true] {
        let c = SamplingConfig { cfg_gamma: if cfg { Some(config.cfg_gamma.unwrap_or(3.0)) } else { None }, ..config.clone() };
        for &b in batch_sizes {
            let batch: Vec<TokenGrid> = sources.iter().cycle().take(b).cloned().collect();
            rows.push(run_batched(model, &batch, &c)?.1);
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BatchTiming]) -> String {
    let mut s = String::from("batch,cfg,frames,wall_s,rtf,per_sequence_rtf\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.3},{:.3}", r.batch, r.cfg, r.frames, r.wall_s, r.rtf, r.per_sequence_rtf);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Arc<RqTransformer> {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            context_frames: 64,
            d_depth: 8,
            depth_layers: 1,
            depth_heads: 2,
            depth_ffn_dim: 8,
            levels: 2,
            text_vocab: 8,
            audio_vocab: 7,
            delay_steps: 1,
            seed: 3,
            ..ModelConfig::default()
        };
        Arc::new(RqTransformer::new(cfg).unwrap())
    }

    fn source(frames: usize, salt: u16) -> TokenGrid {
        TokenGrid::new(frames, 2, (0..frames * 2).map(|i| (i as u16 * 3 + salt) % 4 + 1).collect()).unwrap()
    }

    #[test]
    fn cfg_identities() {
        let g = LogitBundle { text: vec![1.0, -2.0], audio: vec![vec![0.5, 0.25]] };
        let b = LogitBundle { text: vec![0.0, 4.0], audio: vec![vec![-1.0, 3.0]] };
        assert_eq!(cfg_combine(&g, &b, 1.0).unwrap(), g);
        assert_eq!(cfg_combine(&g, &b, 0.0).unwrap(), b);
        assert_eq!(cfg_combine_logits(&[1.0], &[0.0], 3.0).unwrap(), vec![3.0]);
        assert!(cfg_combine_logits(&[1.0], &[0.0, 1.0], 3.0).is_err());
    }

    #[test]
    fn sampling_basics() {
        let mut rng = sequence_rng(1, 0);
        assert_eq!(sample_token(&[0.1, 0.9, 0.9], 0.0, 50, &mut rng), 1);
        let one_hot = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        for _ in 0..100 {
            assert_eq!(sample_token(&one_hot, 0.8, 250, &mut rng), 1);
        }
        for _ in 0..100 {
            assert!(sample_token(&[3.0, 2.0, 1.0, 0.0], 1.0, 2, &mut rng) < 2);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = tiny();
        let s = source(6, 0);
        let a = run_session(&m, &s, &SamplingConfig { cap_extra: 5, ..SamplingConfig::greedy() }).unwrap();
        let b = run_session(&m, &s, &SamplingConfig { cap_extra: 5, ..SamplingConfig::greedy() }).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frames[0].target[1], DELAY_TOKEN);
    }

    #[test]
    fn truncation_flag() {
        let m = tiny();
        let c = SamplingConfig { cap_extra: 3, ..SamplingConfig::greedy() };
        let out = run_session(&m, &source(4, 1), &c).unwrap();
        if out.eos_frame.is_none() {
            assert!(out.truncated);
            assert_eq!(out.frames.len(), 7);
        }
    }

    #[test]
    fn finished_session_rejects_steps() {
        let mut m = (*tiny()).clone();
        // Make EOS dominant so the session ends right after the source.
        let bias = m.params_mut().tensors.iter_mut().find(|t| t.name == "text_head.bias").unwrap();
        bias.data[usize::from(text::EOS)] = 100.0;
        let m = Arc::new(m);
        let mut s = Session::new(Arc::clone(&m), SamplingConfig::greedy(), 0).unwrap();
        let src = source(3, 2);
        for t in 0..3 {
            assert_ne!(s.step(src.row(t)).unwrap().text, text::EOS);
        }
        s.end_source();
        let eos = s.input_eos_frame();
        assert_eq!(s.step(&eos).unwrap().text, text::EOS);
        assert_eq!(s.state(), SessionState::SourceEnded);
        s.step(&eos).unwrap();
        assert_eq!(s.state(), SessionState::Finished);
        assert!(matches!(s.step(&eos), Err(Error::SessionFinished)));
    }

    #[test]
    fn batched_matches_sequential_sampled() {
        let m = tiny();
        let sources: Vec<TokenGrid> = (0..3).map(|i| source(4 + i, i as u16)).collect();
        let c = SamplingConfig { cap_extra: 4, cfg_gamma: Some(2.0), seed: 5, ..SamplingConfig::default() };
        let (batched, timing) = run_batched(&m, &sources, &c).unwrap();
        assert_eq!(timing.batch, 3);
        for (i, s) in sources.iter().enumerate() {
            let solo = run_session_indexed(&m, s, &c, i as u64).unwrap();
            assert_eq!(solo.frames, batched[i].frames);
        }
    }

    #[test]
    fn bench_rows() {
        let m = tiny();
        let rows = bench(&m, &[source(3, 0)], &[1, 2], &SamplingConfig { cap_extra: 2, ..SamplingConfig::greedy() }).unwrap();
        assert_eq!(rows.len(), 4);
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(3).unwrap().starts_with("1,true,"));
    }
}
