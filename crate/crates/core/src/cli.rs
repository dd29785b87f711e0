//! Command-line pipelines: data → alignment → training → translation → evaluation.
//!
//! Exit codes: 0 success, 2 configuration error (including bad arguments),
//! 3 data error (missing or malformed files), 1 anything else.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{contextual_align, loglik_matrix, AlignmentMap, CachedScorer, PlantedStepScorer, Scorer, WordTableScorer};
use crate::codec::{CodebookStack, EmaOptions, TokenGrid};
use crate::config::RunConfig;
use crate::experiment::{fit_model_config, train_streams, TrainLog};
use crate::inference::{bench, bench_csv, run_session_indexed, SamplingConfig};
use crate::metrics::{corpus_bleu, end_offset, laal, normalize, LatencyInputs};
use crate::model::train::TrainExample;
use crate::model::{ConditionLabel, RqTransformer};
use crate::pipeline::{insert_silences, run_pipeline, TimedTranscript, TimedWord};
use crate::streams::{word_starts, Multistream};
use crate::synth::{LagRegime, Task, TaskSpec};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "simulstream", version, about = "Streaming speech-token translation at desk scale")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    None,
    Constant,
    Sentence,
    Contextual,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScorerArg {
    /// IBM-1 word table trained on the corpus.
    Table,
    /// The planted alignment itself.
    Planted,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit RVQ codebooks on sample speech latents of the task.
    TrainCodec {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a corpus directory with manifest, streams, transcripts and alignments.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        /// Codebooks from `train-codec` instead of the task's own fit.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Contextual alignment of every pair, scored against the planted map.
    Align {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        scorer: ScorerArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Alignment, spike smoothing and silence insertion with the pipeline settings.
    AlignPipeline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        scorer: ScorerArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stream every source of a corpus through a model.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Argmax decoding without guidance.
        #[arg(long)]
        greedy: bool,
    },
    /// BLEU, LAAL, End Offset and speaker similarity of a hypothesis file.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        timing: PathBuf,
    },
    /// Real-time factor against batch size, with and without guidance.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Corpus manifest line; paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub stream: String,
    pub source_tokens: String,
    pub source_transcript: String,
    pub target_transcript: String,
    pub alignment: String,
    pub label: ConditionLabel,
    pub similarity: f64,
    pub source_end_frame: usize,
    pub eos_frame: usize,
}

/// One utterance of a hypothesis or reference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<TimedWord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
}

/// Per-utterance facts needed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub id: String,
    pub source_duration: f64,
    #[serde(default)]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalTable {
    pub utterances: usize,
    pub bleu: f64,
    pub laal_s: f64,
    pub end_offset_s: f64,
    pub similarity: Option<f64>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::Empty(_)
        | Error::LengthMismatch { .. }
        | Error::TokenOutOfRange { .. }
        | Error::WordsOverlap { .. }
        | Error::IndexOutOfRange { .. }
        | Error::FrameOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::SignalTooShort { .. }
        | Error::PrefixTooLong { .. } => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                Error::Config { .. } => eprintln!("config error: {e}"),
                _ => eprintln!("error: {e}"),
            }
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_json(&text)
        }
        None => RunConfig::default_with_env(),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::TrainCodec { out } => train_codec(&config, out),
        Command::MakeData { out, count, split, regime, codec } => {
            make_data(&config, out, *count, *split, *regime, codec.as_deref())
        }
        Command::Align { data, scorer, out } => align(&config, data, *scorer, out.as_deref()),
        Command::AlignPipeline { data, scorer, out } => align_pipeline(&config, data, *scorer, out.as_deref()),
        Command::Train { data, out, steps } => train(&config, data, out, *steps),
        Command::Translate { model, data, out, greedy } => translate(&config, model, data, out, *greedy),
        Command::Eval { hyp, reference, timing } => {
            let table = eval_files(hyp, reference, timing)?;
            print_eval(&table);
            Ok(())
        }
        Command::Bench { model, batch, frames, out } => bench_cmd(&config, model.as_deref(), batch, *frames, out.as_deref()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn train_codec(config: &RunConfig, out: &Path) -> Result<()> {
    let task = Task::new(config.task.clone())?;
    let batch = task.sample_latents(config.codec.utterances, config.seed ^ 0xc0dec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let levels = config.task.codec.num_levels;
    let random = CodebookStack::random(config.task.codec.clone(), &mut rng)?;
    let baseline = random.reconstruction_mse(&batch, levels)?;
    let mut codec = CodebookStack::init_kmeanspp(config.task.codec.clone(), &batch, &mut rng)?;
    let opts = EmaOptions { decay: config.codec.decay, ..EmaOptions::default() };
    for _ in 0..config.codec.steps {
        codec.train_step(&batch, &opts, &mut rng)?;
    }
    let trained = codec.reconstruction_mse(&batch, levels)?;
    let mut w = create(out)?;
    codec.write_to(&mut w)?;
    w.flush()?;
    println!(
        "{}",
        serde_json::json!({"frames": batch.frames, "random_init_mse": baseline, "trained_mse": trained, "out": out})
    );
    Ok(())
}

fn regime_for(arg: RegimeArg, current: LagRegime) -> LagRegime {
    let d = TaskSpec::default();
    match (arg, current) {
        (RegimeArg::None, _) => LagRegime::None,
        (RegimeArg::Constant, c @ LagRegime::Constant { .. }) => c,
        (RegimeArg::Constant, _) => LagRegime::Constant { seconds: 1.6 },
        (RegimeArg::Sentence, _) => LagRegime::Sentence,
        (RegimeArg::Contextual, c @ LagRegime::Contextual { .. }) => c,
        (RegimeArg::Contextual, _) => d.regime,
    }
}

fn make_data(
    config: &RunConfig,
    out: &Path,
    count: Option<usize>,
    split: Split,
    regime: Option<RegimeArg>,
    codec: Option<&Path>,
) -> Result<()> {
    let mut spec = match split {
        Split::Train => config.task.clone(),
        Split::Test => config.test_task(),
    };
    if let Some(r) = regime {
        spec.regime = regime_for(r, spec.regime);
    }
    let count = count.unwrap_or(match split {
        Split::Train => config.data.train_count,
        Split::Test => config.data.test_count,
    });
    let task = match codec {
        Some(p) => Task::with_codec(spec.clone(), CodebookStack::read_from(&mut open(p)?)?)?,
        None => Task::new(spec.clone())?,
    };
    let examples = task.generate(count)?;
    fs::create_dir_all(out.join("streams"))?;
    write_json(&out.join("task.json"), &spec)?;
    let mut w = create(&out.join("codec.rvq"))?;
    task.codec.write_to(&mut w)?;
    w.flush()?;

    let mut manifest = Vec::with_capacity(count);
    let mut refs = Vec::with_capacity(count);
    let mut timing = Vec::with_capacity(count);
    for (i, ex) in examples.iter().enumerate() {
        let id = format!("u{i:05}");
        let rel = |ext: &str| format!("streams/{id}.{ext}");
        let mut w = create(&out.join(rel("msf")))?;
        ex.stream.write_to(&mut w)?;
        w.flush()?;
        let mut w = create(&out.join(rel("src.tgr")))?;
        ex.source_tokens.write_to(&mut w)?;
        w.flush()?;
        let mut w = create(&out.join(rel("src.jsonl")))?;
        ex.source.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = create(&out.join(rel("tgt.jsonl")))?;
        ex.target.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = create(&out.join(rel("align")))?;
        ex.alignment.write_to(&mut w)?;
        w.flush()?;
        manifest.push(ManifestEntry {
            id: id.clone(),
            stream: rel("msf"),
            source_tokens: rel("src.tgr"),
            source_transcript: rel("src.jsonl"),
            target_transcript: rel("tgt.jsonl"),
            alignment: rel("align"),
            label: ex.label,
            similarity: ex.similarity,
            source_end_frame: ex.source_end_frame,
            eos_frame: ex.eos_frame,
        });
        refs.push(Utterance { id: id.clone(), words: ex.target.words.clone(), truncated: None });
        timing.push(TimingEntry { id, source_duration: ex.source_duration(), similarity: Some(ex.similarity) });
    }
    write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
    write_jsonl(&out.join("ref.jsonl"), &refs)?;
    write_json(&out.join("timing.json"), &timing)?;
    println!("{}", serde_json::json!({"examples": count, "regime": spec.regime.name(), "out": out}));
    Ok(())
}

/// A corpus directory as written by `make-data`.
pub struct Corpus {
    pub dir: PathBuf,
    pub spec: TaskSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let spec: TaskSpec = serde_json::from_reader(open(&dir.join("task.json"))?)
            .map_err(|e| Error::Format(format!("task.json: {e}")))?;
        spec.validate()?;
        let entries: Vec<ManifestEntry> = read_jsonl(&dir.join("manifest.jsonl"))?;
        if entries.is_empty() {
            return Err(Error::Empty("manifest"));
        }
        Ok(Self { dir: dir.to_path_buf(), spec, entries })
    }

    pub fn stream(&self, e: &ManifestEntry) -> Result<Multistream> {
        Multistream::read_from(&mut open(&self.dir.join(&e.stream))?)
    }

    pub fn transcripts(&self, e: &ManifestEntry) -> Result<(TimedTranscript, TimedTranscript)> {
        Ok((
            TimedTranscript::read_jsonl(open(&self.dir.join(&e.source_transcript))?)?,
            TimedTranscript::read_jsonl(open(&self.dir.join(&e.target_transcript))?)?,
        ))
    }

    pub fn alignment(&self, e: &ManifestEntry) -> Result<AlignmentMap> {
        AlignmentMap::read_from(open(&self.dir.join(&e.alignment))?)
    }

    /// Source frames a live session receives: the stream's source side up to the input EOS.
    pub fn live_source(&self, e: &ManifestEntry) -> Result<TokenGrid> {
        let s = self.stream(e)?;
        if e.source_end_frame > s.len() {
            return Err(Error::FrameOutOfRange { frame: e.source_end_frame, frames: s.len() });
        }
        let data = s.frames[..e.source_end_frame].iter().flat_map(|f| f.source.iter().copied()).collect();
        TokenGrid::new(e.source_end_frame, s.levels, data)
    }
}

#[derive(Debug, Serialize)]
struct AlignRow {
    id: String,
    alignment: Vec<usize>,
    planted: Vec<usize>,
    exact: bool,
    inserted_silence_s: f64,
}

fn corpus_scorer(config: &RunConfig, corpus: &Corpus, kind: ScorerArg) -> Result<Option<CachedScorer<WordTableScorer>>> {
    Ok(match kind {
        ScorerArg::Planted => None,
        ScorerArg::Table => {
            let mut pairs = Vec::with_capacity(corpus.entries.len());
            for e in &corpus.entries {
                let (s, t) = corpus.transcripts(e)?;
                pairs.push((s.texts(), t.texts()));
            }
            Some(CachedScorer::new(WordTableScorer::train(&pairs, config.pipeline.em_iterations, config.pipeline.epsilon)))
        }
    })
}

fn align_one(table: Option<&CachedScorer<WordTableScorer>>, planted: &AlignmentMap, src: &[String], tgt: &[String]) -> Result<AlignmentMap> {
    let planted_scorer;
    let scorer: &dyn Scorer = match table {
        Some(t) => t,
        None => {
            planted_scorer = PlantedStepScorer::new(planted.a.clone());
            &planted_scorer
        }
    };
    Ok(contextual_align(&loglik_matrix(scorer, src, tgt)?))
}

fn align(config: &RunConfig, data: &Path, scorer: ScorerArg, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::open(data)?;
    let table = corpus_scorer(config, &corpus, scorer)?;
    let mut rows = Vec::with_capacity(corpus.entries.len());
    for e in &corpus.entries {
        let (src, tgt) = corpus.transcripts(e)?;
        let planted = corpus.alignment(e)?;
        let a = align_one(table.as_ref(), &planted, &src.texts(), &tgt.texts())?;
        // Re-time under the corpus's own lag rule; only the contextual regime has one.
        let inserted = match corpus.spec.regime {
            LagRegime::Contextual { min_lag_s } => {
                let shifted = insert_silences(&tgt, &src, &a, min_lag_s)?;
                let s = shifted.words.iter().zip(&tgt.words).map(|(x, y)| x.start - y.start).fold(0.0, f64::max);
                if s < 1e-9 { 0.0 } else { s }
            }
            _ => 0.0,
        };
        rows.push(AlignRow { id: e.id.clone(), exact: a.a == planted.a, alignment: a.a, planted: planted.a, inserted_silence_s: inserted });
    }
    let out = out.map_or_else(|| data.join("alignments.jsonl"), Path::to_path_buf);
    write_jsonl(&out, &rows)?;
    let exact = rows.iter().filter(|r| r.exact).count();
    let silence: f64 = rows.iter().map(|r| r.inserted_silence_s).sum();
    println!(
        "{}",
        serde_json::json!({
            "pairs": rows.len(),
            "exact_match": exact as f64 / rows.len() as f64,
            "inserted_silence_s": silence,
            "out": out,
        })
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct PipelineRow {
    id: String,
    alignment: Vec<usize>,
    words: Vec<TimedWord>,
    mean_lag_before: f64,
    mean_lag_after: f64,
    violations_after: usize,
    smoothed_changes: usize,
    inserted_silence_s: f64,
}

fn align_pipeline(config: &RunConfig, data: &Path, scorer: ScorerArg, out: Option<&Path>) -> Result<()> {
    let corpus = Corpus::open(data)?;
    let table = corpus_scorer(config, &corpus, scorer)?;
    let p = &config.pipeline;
    let mut rows = Vec::with_capacity(corpus.entries.len());
    for e in &corpus.entries {
        let (src, tgt) = corpus.transcripts(e)?;
        let planted = corpus.alignment(e)?;
        let a = align_one(table.as_ref(), &planted, &src.texts(), &tgt.texts())?;
        let (shifted, smoothed, report) = run_pipeline(&src, &tgt, &a, p.window, p.threshold, p.min_lag_s)?;
        rows.push(PipelineRow {
            id: e.id.clone(),
            alignment: smoothed.a,
            words: shifted.words,
            mean_lag_before: report.before.mean,
            mean_lag_after: report.after.mean,
            violations_after: report.after.violations,
            smoothed_changes: report.smoothed_changes,
            inserted_silence_s: report.inserted_silence_s,
        });
    }
    let out = out.map_or_else(|| data.join("pipeline.jsonl"), Path::to_path_buf);
    write_jsonl(&out, &rows)?;
    let n = rows.len() as f64;
    println!(
        "{}",
        serde_json::json!({
            "pairs": rows.len(),
            "min_lag_s": p.min_lag_s,
            "mean_lag_before": rows.iter().map(|r| r.mean_lag_before).sum::<f64>() / n,
            "mean_lag_after": rows.iter().map(|r| r.mean_lag_after).sum::<f64>() / n,
            "violations_after": rows.iter().map(|r| r.violations_after).sum::<usize>(),
            "smoothed_changes": rows.iter().map(|r| r.smoothed_changes).sum::<usize>(),
            "inserted_silence_s": rows.iter().map(|r| r.inserted_silence_s).sum::<f64>(),
            "out": out,
        })
    );
    Ok(())
}

fn train(config: &RunConfig, data: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let corpus = Corpus::open(data)?;
    let mut settings = config.train.clone();
    if let Some(s) = steps {
        settings.optim.total_steps = s;
        settings.optim.warmup_steps = settings.optim.warmup_steps.min(s / 4);
    }
    let examples = corpus
        .entries
        .iter()
        .map(|e| Ok(TrainExample { stream: corpus.stream(e)?, label: e.label }))
        .collect::<Result<Vec<_>>>()?;
    let log = |l: &TrainLog| {
        eprintln!(
            "step {:>5}  text {:.4}  audio_out {:.4}  audio_in {:.4}  total {:.4}  {:.1}s",
            l.step, l.losses.text, l.losses.audio_out, l.losses.audio_in, l.losses.total, l.elapsed_s
        )
    };
    let model = train_streams(&corpus.spec, &examples, &settings, log)?;
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    model.save(out)?;
    println!("{}", serde_json::json!({"parameters": model.num_parameters(), "steps": settings.optim.total_steps, "out": out}));
    Ok(())
}

/// Timed words of a decoded text stream, up to the text EOS.
pub fn decoded_words(spec: &TaskSpec, text_tokens: &[u16], eos_frame: Option<usize>) -> Vec<TimedWord> {
    let fr = spec.frame_rate();
    let eos = eos_frame.unwrap_or(usize::MAX);
    word_starts(text_tokens)
        .into_iter()
        .filter(|&(_, f)| f < eos)
        .map(|(tok, f)| TimedWord {
            text: spec.token_word(tok).map_or_else(|| "<unk>".to_string(), |w| format!("t{w}")),
            start: f as f64 / fr,
            end: (f + spec.word_frames) as f64 / fr,
        })
        .collect()
}

fn translate(config: &RunConfig, model_path: &Path, data: &Path, out: &Path, greedy: bool) -> Result<()> {
    let corpus = Corpus::open(data)?;
    let model = Arc::new(RqTransformer::load(model_path)?);
    let sampling = if greedy { SamplingConfig { seed: config.sampling.seed, ..SamplingConfig::greedy() } } else { config.sampling.clone() };
    let mut rows = Vec::with_capacity(corpus.entries.len());
    let mut frames = 0usize;
    let mut wall = 0.0;
    for (i, e) in corpus.entries.iter().enumerate() {
        let source = corpus.live_source(e)?;
        let o = run_session_indexed(&model, &source, &sampling, i as u64)?;
        frames += o.frames.len();
        wall += o.wall_s;
        rows.push(Utterance {
            id: e.id.clone(),
            words: decoded_words(&corpus.spec, &o.text_tokens(), o.eos_frame),
            truncated: Some(o.truncated),
        });
    }
    write_jsonl(out, &rows)?;
    println!(
        "{}",
        serde_json::json!({
            "utterances": rows.len(),
            "truncated": rows.iter().filter(|r| r.truncated == Some(true)).count(),
            "rtf": crate::inference::real_time_factor(frames, corpus.spec.frame_rate(), wall),
            "out": out,
        })
    );
    Ok(())
}

fn words_text(words: &[TimedWord]) -> Vec<String> {
    words.iter().flat_map(|w| normalize(&w.text).split(' ').filter(|s| !s.is_empty()).map(String::from).collect::<Vec<_>>()).collect()
}

/// Score hypothesis against reference utterances, matched by id.
pub fn eval_files(hyp: &Path, reference: &Path, timing: &Path) -> Result<EvalTable> {
    let hyps: Vec<Utterance> = read_jsonl(hyp)?;
    let refs: Vec<Utterance> = read_jsonl(reference)?;
    let timing: Vec<TimingEntry> = serde_json::from_reader(open(timing)?)
        .map_err(|e| Error::Format(format!("{}: {e}", timing.display())))?;
    let hyp_by_id: HashMap<&str, &Utterance> = hyps.iter().map(|u| (u.id.as_str(), u)).collect();
    let time_by_id: HashMap<&str, &TimingEntry> = timing.iter().map(|t| (t.id.as_str(), t)).collect();
    if refs.is_empty() {
        return Err(Error::Empty("reference file"));
    }
    let mut pairs = Vec::with_capacity(refs.len());
    let mut laals = Vec::new();
    let mut offsets = Vec::new();
    let mut sims = Vec::new();
    for r in &refs {
        let h = hyp_by_id.get(r.id.as_str()).ok_or_else(|| Error::Format(format!("no hypothesis for {}", r.id)))?;
        let t = time_by_id.get(r.id.as_str()).ok_or_else(|| Error::Format(format!("no timing for {}", r.id)))?;
        pairs.push((words_text(&h.words), words_text(&r.words)));
        if !h.words.is_empty() {
            laals.push(laal(&LatencyInputs {
                emit_times: h.words.iter().map(|w| w.start).collect(),
                source_duration: t.source_duration,
                n_ref: r.words.len().max(1),
            })?);
            offsets.push(end_offset(t.source_duration, h.words.last().expect("non-empty").end));
        }
        if let Some(s) = t.similarity {
            sims.push(s);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EvalTable {
        utterances: refs.len(),
        bleu: corpus_bleu(&pairs)?,
        laal_s: mean(&laals),
        end_offset_s: mean(&offsets),
        similarity: (!sims.is_empty()).then(|| mean(&sims)),
    })
}

pub fn print_eval(t: &EvalTable) {
    println!("{:<18}{:>10}", "metric", "value");
    println!("{:<18}{:>10}", "utterances", t.utterances);
    println!("{:<18}{:>10.2}", "BLEU", t.bleu);
    println!("{:<18}{:>10.3}", "LAAL (s)", t.laal_s);
    println!("{:<18}{:>10.3}", "End Offset (s)", t.end_offset_s);
    match t.similarity {
        Some(s) => println!("{:<18}{:>10.3}", "cosine similarity", s),
        None => println!("{:<18}{:>10}", "cosine similarity", "n/a"),
    }
}

fn bench_cmd(config: &RunConfig, model: Option<&Path>, batch: &[usize], frames: usize, out: Option<&Path>) -> Result<()> {
    if batch.is_empty() || batch.contains(&0) {
        return Err(Error::config("--batch", "batch sizes must be positive"));
    }
    if frames == 0 {
        return Err(Error::config("--frames", "must be positive"));
    }
    let model = Arc::new(match model {
        Some(p) => RqTransformer::load(p)?,
        None => {
            let mut c = fit_model_config(&config.train.model, &config.task, frames);
            c.seed = config.seed;
            RqTransformer::new(c)?
        }
    });
    let mc = model.config();
    let entries = mc.audio().size() as u16 - 3;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sources: Vec<TokenGrid> = (0..batch.iter().copied().max().unwrap_or(1))
        .map(|_| {
            let data = (0..frames * mc.levels).map(|_| rng.gen_range(1..=entries)).collect();
            TokenGrid::new(frames, mc.levels, data)
        })
        .collect::<Result<_>>()?;
    let sampling = SamplingConfig { cap_extra: 0, ..config.sampling.clone() };
    let rows = bench(&model, &sources, batch, &sampling)?;
    let csv = bench_csv(&rows);
    match out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(csv.as_bytes())?;
            w.flush()?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
