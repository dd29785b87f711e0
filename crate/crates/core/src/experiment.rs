//! Train on a synthetic corpus and score decoded output against the planted truth.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::inference::{run_session_indexed, SamplingConfig};
use crate::metrics::{corpus_bleu, end_offset, laal, LatencyInputs};
use crate::model::train::{Losses, LossWeights, OptimConfig, TrainExample, Trainer};
use crate::model::{ModelConfig, RqTransformer};
use crate::streams::word_starts;
use crate::synth::{Example, Task, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 48,
                n_layers: 3,
                n_heads: 4,
                ffn_dim: 96,
                d_depth: 32,
                depth_ffn_dim: 64,
                context_frames: 64,
                ..ModelConfig::default()
            },
            optim: OptimConfig { lr: 2e-3, warmup_steps: 30, total_steps: 3000, ..OptimConfig::default() },
            weights: LossWeights { text: 1.0, audio_out: 0.5, audio_in: 0.1 },
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        self.optim.validate()
    }
}

/// Copy the stream geometry of `task` into a model config.
pub fn fit_model_config(base: &ModelConfig, s: &TaskSpec, longest: usize) -> ModelConfig {
    ModelConfig {
        levels: s.codec.num_levels,
        text_vocab: s.text_vocab(),
        audio_vocab: s.audio().size(),
        delay_steps: s.delay_steps,
        context_frames: base.context_frames.max(longest + 8),
        ..base.clone()
    }
}

pub fn train_examples(examples: &[Example]) -> Vec<TrainExample> {
    examples.iter().map(|e| TrainExample { stream: e.stream.clone(), label: e.label }).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub step: usize,
    pub losses: Losses,
    pub elapsed_s: f64,
}

/// Train from scratch for `settings.optim.total_steps` steps of shuffled minibatches.
pub fn train(
    task: &Task,
    corpus: &[Example],
    settings: &TrainSettings,
    on_log: impl FnMut(&TrainLog),
) -> Result<RqTransformer> {
    train_streams(&task.spec, &train_examples(corpus), settings, on_log)
}

/// [`train`] on already-built streams.
pub fn train_streams(
    spec: &TaskSpec,
    data: &[TrainExample],
    settings: &TrainSettings,
    mut on_log: impl FnMut(&TrainLog),
) -> Result<RqTransformer> {
    settings.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let longest = data.iter().map(|e| e.stream.len()).max().unwrap_or(1);
    let mut config = fit_model_config(&settings.model, spec, longest);
    config.seed = settings.seed;
    let model = RqTransformer::new(config)?;
    let mut trainer = Trainer::new(model, settings.optim.clone(), settings.weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut window = Losses::default();
    let mut seen = 0usize;
    for step in 0..settings.optim.total_steps {
        let mut batch = Vec::with_capacity(settings.batch_size);
        for _ in 0..settings.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let l = trainer.training_step(&batch)?;
        window.text += l.text;
        window.audio_out += l.audio_out;
        window.audio_in += l.audio_in;
        window.total += l.total;
        seen += 1;
        if (step + 1) % 50 == 0 || step + 1 == settings.optim.total_steps {
            let n = seen as f64;
            let losses = Losses {
                text: window.text / n,
                audio_out: window.audio_out / n,
                audio_in: window.audio_in / n,
                total: window.total / n,
            };
            on_log(&TrainLog { step: step + 1, losses, elapsed_s: start.elapsed().as_secs_f64() });
            window = Losses::default();
            seen = 0;
        }
    }
    Ok(trainer.into_model())
}

/// Scores for one decoded example.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub correct: usize,
    /// Frame offsets (emitted − planned) of position-matched correct words.
    pub offsets: Vec<i64>,
    pub laal_s: Option<f64>,
    pub planned_laal_s: f64,
    pub end_offset_s: Option<f64>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    /// Position-matched correct words over `Σ max(|hyp|, |ref|)`.
    pub accuracy: f64,
    /// Mean of (emitted − planned) word start, seconds, over correct words.
    pub mean_offset_s: f64,
    pub mean_abs_offset_s: f64,
    pub laal_s: f64,
    pub planned_laal_s: f64,
    pub end_offset_s: f64,
    pub bleu: f64,
    pub truncated: usize,
    pub no_output: usize,
}

/// Decode one example's live source and compare with its planted target.
pub fn score_example(model: &Arc<RqTransformer>, task: &Task, ex: &Example, config: &SamplingConfig, index: u64) -> Result<ExampleScore> {
    let fr = task.spec.frame_rate();
    let out = run_session_indexed(model, &ex.live_source(), config, index)?;
    let starts = word_starts(&out.text_tokens());
    let eos = out.eos_frame.unwrap_or(usize::MAX);
    let emitted: Vec<(usize, usize)> = starts
        .iter()
        .filter(|(_, f)| *f < eos)
        .map(|&(tok, f)| (task.spec.token_word(tok).unwrap_or(usize::MAX), f))
        .collect();
    let reference: Vec<String> = ex.target_words.iter().map(|&w| task.target_name(w)).collect();
    let hypothesis: Vec<String> =
        emitted.iter().map(|&(w, _)| if w == usize::MAX { "<unk>".into() } else { task.target_name(w) }).collect();
    let mut correct = 0;
    let mut offsets = Vec::new();
    for (j, &(w, f)) in emitted.iter().enumerate() {
        if j < ex.target_words.len() && w == ex.target_words[j] {
            correct += 1;
            offsets.push(f as i64 - ex.target_starts[j] as i64);
        }
    }
    let emit_times: Vec<f64> = emitted.iter().map(|&(_, f)| f as f64 / fr).collect();
    let laal_s = if emit_times.is_empty() {
        None
    } else {
        Some(laal(&LatencyInputs { emit_times, source_duration: ex.source_duration(), n_ref: reference.len() })?)
    };
    let end_offset_s = emitted.last().map(|&(_, f)| end_offset(ex.source_duration(), (f + task.spec.word_frames) as f64 / fr));
    Ok(ExampleScore {
        reference,
        hypothesis,
        correct,
        offsets,
        laal_s,
        planned_laal_s: task.planned_laal(ex)?,
        end_offset_s,
        truncated: out.truncated,
    })
}

pub fn aggregate(scores: &[ExampleScore], frame_rate_hz: f64) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let denom: usize = scores.iter().map(|s| s.hypothesis.len().max(s.reference.len())).sum();
    let correct: usize = scores.iter().map(|s| s.correct).sum();
    let offsets: Vec<f64> = scores.iter().flat_map(|s| s.offsets.iter().map(|&o| o as f64 / frame_rate_hz)).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let laals: Vec<f64> = scores.iter().filter_map(|s| s.laal_s).collect();
    let planned: Vec<f64> = scores.iter().map(|s| s.planned_laal_s).collect();
    let ends: Vec<f64> = scores.iter().filter_map(|s| s.end_offset_s).collect();
    let pairs: Vec<(Vec<String>, Vec<String>)> =
        scores.iter().map(|s| (s.hypothesis.clone(), s.reference.clone())).collect();
    Ok(EvalReport {
        examples: scores.len(),
        accuracy: correct as f64 / denom.max(1) as f64,
        mean_offset_s: mean(&offsets),
        mean_abs_offset_s: mean(&offsets.iter().map(|o| o.abs()).collect::<Vec<_>>()),
        laal_s: mean(&laals),
        planned_laal_s: mean(&planned),
        end_offset_s: mean(&ends),
        bleu: corpus_bleu(&pairs)?,
        truncated: scores.iter().filter(|s| s.truncated).count(),
        no_output: scores.iter().filter(|s| s.hypothesis.is_empty()).count(),
    })
}

/// Decode every example (greedy unless `config` says otherwise) and aggregate.
pub fn evaluate(model: &Arc<RqTransformer>, task: &Task, examples: &[Example], config: &SamplingConfig) -> Result<EvalReport> {
    let scores = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| score_example(model, task, ex, config, i as u64))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&scores, task.spec.frame_rate())
}
