//! Planted-ground-truth corpora.
//!
//! A source "language" of `vocab_size` words maps one-to-one onto a target
//! vocabulary. A modifier word followed by a non-modifier swaps places in the
//! target, so some target words depend on the next source word. Every word
//! has a fixed waveform per frame; speakers add a constant signal. Audio goes
//! through the codec, text becomes an inner-monologue stream, and the target
//! timeline follows one of the lag regimes below.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::AlignmentMap;
use crate::codec::{CodebookStack, CodecConfig, EmaOptions, Featurizer, Latents, TokenGrid};
use crate::metrics::{cosine_similarity, laal, quantile_labels, LatencyInputs};
use crate::model::ConditionLabel;
use crate::pipeline::{insert_silences, TimedTranscript, TimedWord};
use crate::streams::{
    apply_acoustic_delay, build_inner_monologue, build_multistream, text, time_to_frame, AudioVocab,
    InnerMonologuePlan, Multistream,
};
use crate::{Error, Result};

/// How target words are placed relative to the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LagRegime {
    /// Target word `j` starts with source word `j`.
    None,
    /// Target word `j` starts `seconds` after source word `j`.
    Constant { seconds: f64 },
    /// Each target sentence starts once its source sentence has ended.
    Sentence,
    /// Silence insertion on the planted alignment with a minimum lag.
    Contextual { min_lag_s: f64 },
}

impl LagRegime {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Constant { .. } => "constant",
            Self::Sentence => "sentence",
            Self::Contextual { .. } => "contextual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    /// Words `0..modifier_words` are modifiers and swap with a following non-modifier.
    pub modifier_words: usize,
    pub reorder: bool,
    /// Draw the words of a sentence without replacement.
    pub distinct_words: bool,
    pub sentences: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub word_frames: usize,
    pub gap_frames: (usize, usize),
    pub sentence_gap_frames: (usize, usize),
    pub lead_frames: usize,
    pub regime: LagRegime,
    pub codec: CodecConfig,
    pub delay_steps: usize,
    pub speakers: usize,
    /// Speaker signal amplitude relative to word signals.
    pub speaker_strength: f64,
    /// Probability of replacing a source audio token by a random entry.
    pub token_dropout: f64,
    /// Fixes the vocabulary mapping, waveforms and speakers.
    pub seed: u64,
    /// Draws the utterances; change it for a held-out split.
    pub example_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            modifier_words: 5,
            reorder: true,
            distinct_words: true,
            sentences: (1, 1),
            words_per_sentence: (5, 8),
            word_frames: 1,
            gap_frames: (1, 2),
            sentence_gap_frames: (3, 4),
            lead_frames: 2,
            regime: LagRegime::Contextual { min_lag_s: 0.32 },
            codec: CodecConfig { latent_dim: 16, num_levels: 2, codebook_size: 64, ..CodecConfig::default() },
            delay_steps: crate::streams::DEFAULT_DELAY_STEPS,
            speakers: 4,
            speaker_strength: 0.3,
            token_dropout: 0.0,
            seed: 1,
            example_seed: 100,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.vocab_size < 2 || self.modifier_words >= self.vocab_size {
            return Err(Error::config("task.vocab_size", "need ≥ 2 words and at least one non-modifier"));
        }
        let ranges = [
            ("task.sentences", self.sentences),
            ("task.words_per_sentence", self.words_per_sentence),
            ("task.gap_frames", self.gap_frames),
            ("task.sentence_gap_frames", self.sentence_gap_frames),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::config(name, "min exceeds max"));
            }
        }
        if self.distinct_words && self.words_per_sentence.1 > self.vocab_size {
            return Err(Error::config("task.words_per_sentence", "distinct words need max ≤ vocab_size"));
        }
        if self.sentences.0 == 0 || self.words_per_sentence.0 == 0 {
            return Err(Error::config("task.sentences", "need at least one sentence of one word"));
        }
        if self.word_frames == 0 || self.gap_frames.0 == 0 {
            return Err(Error::config("task.word_frames", "words and gaps need at least one frame"));
        }
        if self.speakers < 2 {
            return Err(Error::config("task.speakers", "need at least two speakers"));
        }
        if !(0.0..=1.0).contains(&self.token_dropout) {
            return Err(Error::config("task.token_dropout", "must lie in [0, 1]"));
        }
        match self.regime {
            LagRegime::Constant { seconds } if !(seconds >= 0.0) => {
                Err(Error::config("task.regime.seconds", "must be ≥ 0"))
            }
            LagRegime::Contextual { min_lag_s } if !(min_lag_s >= 0.0) => {
                Err(Error::config("task.regime.min_lag_s", "must be ≥ 0"))
            }
            _ => Ok(()),
        }
    }

    /// Silence after the last source word: covers the acoustic delay and is
    /// longer than any pause inside a sentence.
    pub fn trailing_frames(&self) -> usize {
        self.delay_steps.max(self.gap_frames.1 + 1)
    }

    pub fn frame_rate(&self) -> f64 {
        self.codec.frame_rate_hz
    }

    pub fn audio(&self) -> AudioVocab {
        AudioVocab::new(self.codec.codebook_size)
    }

    /// Text ids: reserved specials, then one id per target word.
    pub fn text_vocab(&self) -> usize {
        usize::from(text::FIRST_WORD) + self.vocab_size
    }

    pub fn word_token(&self, target_word: usize) -> u16 {
        text::FIRST_WORD + target_word as u16
    }

    /// Target word index for a text token, if it is a word.
    pub fn token_word(&self, token: u16) -> Option<usize> {
        (text::is_word(token) && usize::from(token - text::FIRST_WORD) < self.vocab_size)
            .then(|| usize::from(token - text::FIRST_WORD))
    }
}

/// The fixed parts of a task: vocabulary mapping, waveforms, speakers.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    /// `mapping[source word] = target word`.
    pub mapping: Vec<usize>,
    featurizer: Featurizer,
    /// `[language][word][frame]` → latent of that frame's waveform.
    word_latents: Vec<Vec<Vec<Vec<f32>>>>,
    speaker_latents: Vec<Vec<f32>>,
    pub codec: CodebookStack,
}

/// One generated utterance pair.
#[derive(Debug, Clone)]
pub struct Example {
    pub source_words: Vec<usize>,
    pub target_words: Vec<usize>,
    pub source: TimedTranscript,
    pub target: TimedTranscript,
    /// 1-based source index each target word depends on.
    pub alignment: AlignmentMap,
    pub source_sentences: Vec<usize>,
    pub target_starts: Vec<usize>,
    /// Frame carrying the input EOS; every later source frame repeats it.
    pub source_end_frame: usize,
    pub eos_frame: usize,
    /// Undelayed source audio tokens, `source_end_frame` frames.
    pub source_tokens: TokenGrid,
    pub stream: Multistream,
    pub similarity: f64,
    /// Share of the source speaker in the target voice.
    pub speaker_fidelity: f64,
    pub label: ConditionLabel,
}

impl Example {
    /// Source frames a live session receives before the input EOS, delayed.
    pub fn live_source(&self) -> TokenGrid {
        let q = self.stream.levels;
        let data = self.stream.frames[..self.source_end_frame].iter().flat_map(|f| f.source.iter().copied()).collect();
        TokenGrid::new(self.source_end_frame, q, data).expect("uniform frames")
    }

    /// Source duration in seconds (end of the last source word).
    pub fn source_duration(&self) -> f64 {
        self.source.words.last().map_or(0.0, |w| w.end)
    }
}

fn word_noise(seed: u64, lang: u64, word: usize, frame: usize, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((lang << 48) | ((word as u64) << 16) | frame as u64);
    let n = Normal::new(0.0f32, 1.0).expect("unit normal");
    (0..len).map(|_| n.sample(&mut rng)).collect()
}

impl Task {
    /// Build mapping, waveforms, speakers, and fit the codec on sample utterances.
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let mut task = Self::unfitted(spec)?;
        task.fit_codec()?;
        Ok(task)
    }

    /// Use a codec trained elsewhere; its config must match `spec.codec`.
    pub fn with_codec(spec: TaskSpec, codec: CodebookStack) -> Result<Self> {
        let mut task = Self::unfitted(spec)?;
        let c = &task.spec.codec;
        if codec.dim() != c.latent_dim || codec.num_levels() != c.num_levels || codec.codebook_size() != c.codebook_size {
            return Err(Error::config("task.codec", "does not match the supplied codebooks"));
        }
        task.codec = codec;
        Ok(task)
    }

    fn unfitted(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut mapping: Vec<usize> = (0..spec.vocab_size).collect();
        mapping.shuffle(&mut rng);
        let featurizer = Featurizer::new(&spec.codec)?;
        let spf = spec.codec.samples_per_frame();
        let mut word_latents = Vec::with_capacity(2);
        for lang in 0..2u64 {
            let mut words = Vec::with_capacity(spec.vocab_size);
            for w in 0..spec.vocab_size {
                let frames = (0..spec.word_frames)
                    .map(|f| featurizer.featurize(&word_noise(spec.seed, lang, w, f, spf)).map(|l| l.data))
                    .collect::<Result<Vec<_>>>()?;
                words.push(frames);
            }
            word_latents.push(words);
        }
        let speaker_latents = (0..spec.speakers)
            .map(|s| {
                let sig: Vec<f32> =
                    word_noise(spec.seed, 2, s, 0, spf).into_iter().map(|x| x * spec.speaker_strength as f32).collect();
                featurizer.featurize(&sig).map(|l| l.data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            codec: CodebookStack::random(spec.codec.clone(), &mut rng)?,
            spec,
            mapping,
            featurizer,
            word_latents,
            speaker_latents,
        })
    }

    /// Speech latents of `utterances` sample utterances (source and target sides).
    pub fn sample_latents(&self, utterances: usize, seed: u64) -> Result<Latents> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for _ in 0..utterances {
            let plan = self.draw_plan(&mut rng);
            let (src, tgt) = self.latent_tracks(&plan)?;
            rows.extend(src.data);
            rows.extend(tgt.data);
        }
        let dim = self.spec.codec.latent_dim;
        Latents::new(rows.len() / dim, dim, rows)
    }

    fn fit_codec(&mut self) -> Result<()> {
        let batch = self.sample_latents(64, self.spec.seed ^ 0xc0dec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0xc0dec);
        self.codec = CodebookStack::init_kmeanspp(self.spec.codec.clone(), &batch, &mut rng)?;
        let opts = EmaOptions::default();
        for _ in 0..20 {
            self.codec.train_step(&batch, &opts, &mut rng)?;
        }
        Ok(())
    }

    pub fn source_name(&self, w: usize) -> String {
        format!("s{w}")
    }

    pub fn target_name(&self, w: usize) -> String {
        format!("t{w}")
    }

    /// Translate a source word sequence; returns target words and the planted alignment.
    pub fn translate(&self, source: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let is_mod = |w: usize| w < self.spec.modifier_words;
        let mut target = Vec::with_capacity(source.len());
        let mut align = Vec::with_capacity(source.len());
        let mut k = 0;
        while k < source.len() {
            if self.spec.reorder && k + 1 < source.len() && is_mod(source[k]) && !is_mod(source[k + 1]) {
                target.push(self.mapping[source[k + 1]]);
                align.push(k + 2);
                target.push(self.mapping[source[k]]);
                align.push(k + 1);
                k += 2;
            } else {
                target.push(self.mapping[source[k]]);
                align.push(k + 1);
                k += 1;
            }
        }
        (target, align)
    }

    fn draw_plan(&self, rng: &mut ChaCha8Rng) -> Plan {
        let s = &self.spec;
        let n_sent = rng.gen_range(s.sentences.0..=s.sentences.1);
        let mut words = Vec::new();
        let mut sentence_of = Vec::new();
        let mut starts = Vec::new();
        let mut t = s.lead_frames;
        for sent in 0..n_sent {
            let n = rng.gen_range(s.words_per_sentence.0..=s.words_per_sentence.1);
            let drawn: Vec<usize> = if s.distinct_words {
                rand::seq::index::sample(rng, s.vocab_size, n).into_vec()
            } else {
                (0..n).map(|_| rng.gen_range(0..s.vocab_size)).collect()
            };
            for (i, w) in drawn.into_iter().enumerate() {
                words.push(w);
                sentence_of.push(sent);
                starts.push(t);
                t += s.word_frames;
                if i + 1 < n {
                    t += rng.gen_range(s.gap_frames.0..=s.gap_frames.1);
                }
            }
            t += rng.gen_range(s.sentence_gap_frames.0..=s.sentence_gap_frames.1);
        }
        let speaker = rng.gen_range(0..s.speakers);
        let mut other = rng.gen_range(0..s.speakers - 1);
        if other >= speaker {
            other += 1;
        }
        let fidelity = rng.gen::<f64>();
        Plan { words, sentence_of, starts, speaker, other, fidelity }
    }

    /// Target start frames under the configured regime.
    fn place_targets(&self, plan: &Plan, source: &TimedTranscript, align: &[usize]) -> Result<Vec<usize>> {
        let s = &self.spec;
        let wf = s.word_frames;
        let fr = self.spec.frame_rate();
        let m = align.len();
        let starts = match s.regime {
            LagRegime::None => plan.starts.clone(),
            LagRegime::Constant { seconds } => {
                let k = time_to_frame(seconds, fr);
                plan.starts.iter().map(|&x| x + k).collect()
            }
            LagRegime::Sentence => {
                let mut out = Vec::with_capacity(m);
                let mut prev_end = 0usize;
                let mut j = 0;
                while j < m {
                    let sent = plan.sentence_of[j];
                    let last = (j..m).take_while(|&k| plan.sentence_of[k] == sent).last().expect("non-empty");
                    let src_end = plan.starts[last] + wf;
                    // Start once the pause is longer than any pause inside a sentence.
                    let offset = (src_end + s.gap_frames.1 + 1).max(prev_end + 1);
                    // The target sentence is spoken at its own steady pace.
                    for k in j..=last {
                        let st = offset + (k - j) * (wf + s.gap_frames.0);
                        out.push(st);
                        prev_end = st + wf;
                    }
                    j = last + 1;
                }
                out
            }
            LagRegime::Contextual { min_lag_s } => {
                let base = TimedTranscript {
                    words: plan
                        .starts
                        .iter()
                        .map(|&st| TimedWord { text: String::new(), start: st as f64 / fr, end: (st + wf) as f64 / fr })
                        .collect(),
                };
                let shifted = insert_silences(&base, source, &AlignmentMap::from_indices(align.to_vec()), min_lag_s)?;
                shifted.words.iter().map(|w| time_to_frame(w.start, fr)).collect()
            }
        };
        Ok(starts)
    }

    /// Source and target latent tracks (source: speech only; target: unplaced words back to back).
    fn latent_tracks(&self, plan: &Plan) -> Result<(Latents, Latents)> {
        let src = self.render(0, &plan.words, &plan.starts, self.source_speaker(plan), None)?;
        let (tw, _) = self.translate(&plan.words);
        let tstarts: Vec<usize> = (0..tw.len()).map(|j| j * (self.spec.word_frames + 1) + 1).collect();
        let tgt = self.render(1, &tw, &tstarts, self.target_speaker(plan), None)?;
        Ok((src, tgt))
    }

    fn source_speaker(&self, plan: &Plan) -> Vec<f32> {
        self.speaker_latents[plan.speaker].clone()
    }

    fn target_speaker(&self, plan: &Plan) -> Vec<f32> {
        let f = plan.fidelity as f32;
        self.speaker_latents[plan.speaker]
            .iter()
            .zip(&self.speaker_latents[plan.other])
            .map(|(a, b)| f * a + (1.0 - f) * b)
            .collect()
    }

    /// Latents of an utterance: word frames plus the speaker latent, silence
    /// (zero) elsewhere. By linearity of the featurizer this equals
    /// featurizing the summed waveforms frame by frame.
    fn render(&self, lang: usize, words: &[usize], starts: &[usize], speaker: Vec<f32>, frames: Option<usize>) -> Result<Latents> {
        let wf = self.spec.word_frames;
        let total = frames.unwrap_or_else(|| starts.last().map_or(1, |s| s + wf));
        let dim = self.spec.codec.latent_dim;
        let mut lat = Latents::zeros(total, dim);
        for (&w, &st) in words.iter().zip(starts) {
            for f in 0..wf {
                if st + f >= total {
                    return Err(Error::FrameOutOfRange { frame: st + f, frames: total });
                }
                let row = lat.row_mut(st + f);
                for ((o, a), b) in row.iter_mut().zip(&self.word_latents[lang][w][f]).zip(&speaker) {
                    *o = a + b;
                }
            }
        }
        Ok(lat)
    }

    /// Mean latent over speech frames; the speaker embedding used for similarity.
    fn embedding(lat: &Latents, starts: &[usize], wf: usize) -> Vec<f64> {
        let mut acc = vec![0.0; lat.dim];
        let mut n = 0.0f64;
        for &st in starts {
            for f in st..(st + wf).min(lat.frames) {
                for (a, v) in acc.iter_mut().zip(lat.row(f)) {
                    *a += f64::from(*v);
                }
                n += 1.0;
            }
        }
        acc.iter().map(|a| a / n.max(1.0)).collect()
    }

    /// Waveform of a word frame for inspection: word noise plus nothing else.
    pub fn word_waveform(&self, lang: u64, word: usize, frame: usize) -> Vec<f32> {
        word_noise(self.spec.seed, lang, word, frame, self.spec.codec.samples_per_frame())
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    fn example(&self, rng: &mut ChaCha8Rng) -> Result<Example> {
        let s = &self.spec;
        let fr = s.frame_rate();
        let wf = s.word_frames;
        let plan = self.draw_plan(rng);
        let source = TimedTranscript {
            words: plan
                .words
                .iter()
                .zip(&plan.starts)
                .map(|(&w, &st)| TimedWord { text: self.source_name(w), start: st as f64 / fr, end: (st + wf) as f64 / fr })
                .collect(),
        };
        let (target_words, align) = self.translate(&plan.words);
        let target_starts = self.place_targets(&plan, &source, &align)?;
        let target = TimedTranscript {
            words: target_words
                .iter()
                .zip(&target_starts)
                .map(|(&w, &st)| TimedWord { text: self.target_name(w), start: st as f64 / fr, end: (st + wf) as f64 / fr })
                .collect(),
        };

        let src_speech_end = plan.starts.last().expect("non-empty") + wf;
        let source_end_frame = src_speech_end + s.trailing_frames();
        let tgt_end = target_starts.last().expect("non-empty") + wf;
        let eos_frame = tgt_end.max(source_end_frame);
        let total = (source_end_frame + 1).max(eos_frame + 1 + s.delay_steps);

        let src_lat = self.render(0, &plan.words, &plan.starts, self.source_speaker(&plan), Some(source_end_frame))?;
        let tgt_lat = self.render(1, &target_words, &target_starts, self.target_speaker(&plan), Some(total))?;
        let similarity = cosine_similarity(
            &Self::embedding(&src_lat, &plan.starts, wf),
            &Self::embedding(&tgt_lat, &target_starts, wf),
        )?;

        let mut source_tokens = self.codec.encode(&src_lat)?;
        if s.token_dropout > 0.0 {
            for tok in source_tokens.tokens.iter_mut() {
                if rng.gen::<f64>() < s.token_dropout {
                    *tok = rng.gen_range(1..=s.codec.codebook_size as u16);
                }
            }
        }
        let target_tokens = self.codec.encode(&tgt_lat)?;

        let audio = self.spec.audio();
        let mut src_grid = TokenGrid::filled(total, s.codec.num_levels, audio.input_eos());
        let delayed_src = apply_acoustic_delay(&source_tokens, s.delay_steps);
        for t in 0..source_end_frame {
            src_grid.row_mut(t).copy_from_slice(delayed_src.row(t));
        }
        let tgt_grid = apply_acoustic_delay(&target_tokens, s.delay_steps);

        let words: Vec<(Vec<u16>, usize)> = target_words
            .iter()
            .zip(&target_starts)
            .map(|(&w, &st)| {
                let mut toks = vec![text::CONT; wf];
                toks[0] = self.spec.word_token(w);
                (toks, st)
            })
            .collect();
        let mut plan_text = build_inner_monologue(&words, total)?;
        plan_text.tokens[eos_frame] = text::EOS;
        let stream = build_multistream(&tgt_grid, &src_grid, &InnerMonologuePlan { tokens: plan_text.tokens })?;

        Ok(Example {
            source_words: plan.words,
            target_words,
            source,
            target,
            alignment: AlignmentMap::from_indices(align),
            source_sentences: plan.sentence_of,
            target_starts,
            source_end_frame,
            eos_frame,
            source_tokens,
            stream,
            similarity,
            speaker_fidelity: plan.fidelity,
            label: ConditionLabel::Neutral,
        })
    }

    /// `count` examples drawn from `spec.example_seed`, labeled by similarity quintile.
    pub fn generate(&self, count: usize) -> Result<Vec<Example>> {
        if count == 0 {
            return Err(Error::Empty("corpus"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.example_seed);
        let mut out = (0..count).map(|_| self.example(&mut rng)).collect::<Result<Vec<_>>>()?;
        if count >= 5 {
            let sims: Vec<f64> = out.iter().map(|e| e.similarity).collect();
            let labels = quantile_labels(&[sims])?.remove(0);
            for (e, l) in out.iter_mut().zip(labels) {
                e.label = l;
            }
        }
        Ok(out)
    }

    /// LAAL of the planned target schedule, in seconds.
    pub fn planned_laal(&self, ex: &Example) -> Result<f64> {
        let fr = self.spec.frame_rate();
        laal(&LatencyInputs {
            emit_times: ex.target_starts.iter().map(|&f| f as f64 / fr).collect(),
            source_duration: ex.source_duration(),
            n_ref: ex.target_words.len(),
        })
    }
}

#[derive(Debug, Clone)]
struct Plan {
    words: Vec<usize>,
    sentence_of: Vec<usize>,
    starts: Vec<usize>,
    speaker: usize,
    other: usize,
    fidelity: f64,
}

/// Build the task for `spec` and draw `count` examples.
pub fn generate_corpus(spec: &TaskSpec, count: usize) -> Result<(Task, Vec<Example>)> {
    let task = Task::new(spec.clone())?;
    let ex = task.generate(count)?;
    Ok((task, ex))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{contextual_align, loglik_matrix, PlantedStepScorer};
    use crate::pipeline::compute_lags;
    use crate::streams::word_starts;

    fn spec(regime: LagRegime) -> TaskSpec {
        TaskSpec { regime, ..TaskSpec::default() }
    }

    #[test]
    fn none_regime_starts_with_source() {
        let (_, ex) = generate_corpus(&spec(LagRegime::None), 10).unwrap();
        for e in &ex {
            for (t, s) in e.target.words.iter().zip(&e.source.words) {
                assert_eq!(t.start, s.start);
            }
        }
    }

    #[test]
    fn constant_regime_offsets() {
        let (_, ex) = generate_corpus(&spec(LagRegime::Constant { seconds: 2.0 }), 10).unwrap();
        for e in &ex {
            for (t, s) in e.target.words.iter().zip(&e.source.words) {
                assert!((t.start - (s.start + 2.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contextual_regime_lags() {
        let (_, ex) = generate_corpus(&spec(LagRegime::Contextual { min_lag_s: 2.0 }), 20).unwrap();
        let mut binding = 0;
        for e in &ex {
            let lags = compute_lags(&e.source, &e.target, &e.alignment).unwrap();
            for d in &lags.delays {
                assert!(*d >= 2.0 - 1e-9);
                if (*d - 2.0).abs() < 1e-9 {
                    binding += 1;
                }
            }
        }
        assert!(binding > 0);
    }

    #[test]
    fn sentence_regime_waits_for_sentence_end() {
        let s = TaskSpec { sentences: (2, 2), ..spec(LagRegime::Sentence) };
        let (_, ex) = generate_corpus(&s, 10).unwrap();
        for e in &ex {
            for (j, t) in e.target.words.iter().enumerate() {
                let sent = e.source_sentences[j];
                let end = e
                    .source
                    .words
                    .iter()
                    .zip(&e.source_sentences)
                    .filter(|(_, &k)| k == sent)
                    .map(|(w, _)| w.end)
                    .fold(0.0, f64::max);
                assert!(t.start > end);
            }
        }
    }

    #[test]
    fn planted_alignment_is_recovered() {
        let (task, ex) = generate_corpus(&spec(LagRegime::Sentence), 30).unwrap();
        let mut swapped = 0;
        for e in &ex {
            let src: Vec<String> = e.source_words.iter().map(|&w| task.source_name(w)).collect();
            let tgt: Vec<String> = e.target_words.iter().map(|&w| task.target_name(w)).collect();
            let table = loglik_matrix(&PlantedStepScorer::new(e.alignment.a.clone()), &src, &tgt).unwrap();
            assert_eq!(contextual_align(&table).a, e.alignment.a);
            swapped += e.alignment.a.iter().enumerate().filter(|(j, &a)| a != j + 1).count();
        }
        assert!(swapped > 0);
    }

    #[test]
    fn stream_layout() {
        let (task, ex) = generate_corpus(&TaskSpec::default(), 8).unwrap();
        let audio = task.spec.audio();
        for e in &ex {
            let s = &e.stream;
            assert_eq!(s.frames[e.eos_frame].text, text::EOS);
            assert_eq!(s.len(), e.eos_frame + 1 + task.spec.delay_steps);
            let starts = word_starts(&s.text_tokens());
            assert_eq!(starts.len(), e.target_words.len());
            for ((tok, f), (&w, &st)) in starts.iter().zip(e.target_words.iter().zip(&e.target_starts)) {
                assert_eq!(*tok, task.spec.word_token(w));
                assert_eq!(*f, st);
            }
            for (t, f) in s.frames.iter().enumerate() {
                if t >= e.source_end_frame {
                    assert!(f.source.iter().all(|&x| x == audio.input_eos()));
                } else {
                    assert!(f.source.iter().all(|&x| x == 0 || audio.is_entry(x)));
                }
                if t < task.spec.delay_steps {
                    assert_eq!(f.target[1], 0);
                }
            }
            assert_eq!(e.live_source().frames, e.source_end_frame);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (_, a) = generate_corpus(&TaskSpec::default(), 5).unwrap();
        let (_, b) = generate_corpus(&TaskSpec::default(), 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.stream, y.stream);
            assert_eq!(x.label, y.label);
        }
        let (_, c) = generate_corpus(&TaskSpec { example_seed: 7, ..TaskSpec::default() }, 5).unwrap();
        assert_ne!(a[0].stream, c[0].stream);
    }

    #[test]
    fn words_are_distinguishable_by_tokens() {
        // The first semantic token of a word should identify it in most cases.
        let (task, ex) = generate_corpus(&TaskSpec::default(), 40).unwrap();
        let mut seen: std::collections::HashMap<u16, std::collections::HashSet<usize>> = Default::default();
        for e in &ex {
            for (&w, &st) in e.source_words.iter().zip(e.source.words.iter().map(|x| &x.start)) {
                let f = time_to_frame(st, task.spec.frame_rate());
                seen.entry(e.source_tokens.get(f, 0)).or_default().insert(w);
            }
        }
        let ambiguous = seen.values().filter(|s| s.len() > 1).count();
        assert!(ambiguous <= 2, "{ambiguous} ambiguous first-frame tokens");
    }

    #[test]
    fn labels_follow_voice_fidelity() {
        let (_, ex) = generate_corpus(&TaskSpec::default(), 200).unwrap();
        let mean = |l: ConditionLabel| {
            let v: Vec<f64> = ex.iter().filter(|e| e.label == l).map(|e| e.speaker_fidelity).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(ConditionLabel::VeryGood) > mean(ConditionLabel::VeryBad) + 0.2);
    }

    #[test]
    fn labels_cover_all_buckets() {
        let (_, ex) = generate_corpus(&TaskSpec::default(), 50).unwrap();
        for l in ConditionLabel::ALL {
            assert_eq!(ex.iter().filter(|e| e.label == l).count(), 10);
        }
    }
}
