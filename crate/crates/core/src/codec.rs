//! Toy streaming codec: a seeded linear featurizer over fixed-size sample
//! blocks followed by residual vector quantization (RVQ).
//!
//! Token ids in a [`TokenGrid`] are 1-based codebook entries; id `0` is the
//! special value used by the acoustic delay (see [`crate::streams`]).

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{
    read_f32s, read_magic, read_u16s, read_u32, read_u64, write_f32s, write_magic, write_u16s,
    write_u32, write_u64,
};
use crate::{Error, Result};

pub const DEFAULT_FRAME_RATE_HZ: f64 = 12.5;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 24_000.0;
/// Largest codebook for which every audio id (entries plus specials) fits in a `u16`.
pub const MAX_CODEBOOK_SIZE: usize = u16::MAX as usize - 3;
pub const MAX_LEVELS: usize = 16;

const RVQ_MAGIC: &[u8; 4] = b"RVQ1";
const TGR_MAGIC: &[u8; 4] = b"TGR1";
const RVQ_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub frame_rate_hz: f64,
    pub sample_rate_hz: f64,
    pub latent_dim: usize,
    pub num_levels: usize,
    pub codebook_size: usize,
    pub featurizer_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            latent_dim: 16,
            num_levels: 8,
            codebook_size: 64,
            featurizer_seed: 0x5eed_c0de,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::config("codec.frame_rate_hz", "must be positive"));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::config("codec.sample_rate_hz", "must be positive"));
        }
        let spf = self.sample_rate_hz / self.frame_rate_hz;
        if (spf - spf.round()).abs() > 1e-9 || spf.round() < 1.0 {
            return Err(Error::config(
                "codec.sample_rate_hz",
                format!("{spf} samples per frame is not a positive integer"),
            ));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("codec.latent_dim", "must be at least 1"));
        }
        if !(1..=MAX_LEVELS).contains(&self.num_levels) {
            return Err(Error::config("codec.num_levels", format!("must be in 1..={MAX_LEVELS}")));
        }
        if !(2..=MAX_CODEBOOK_SIZE).contains(&self.codebook_size) {
            return Err(Error::config(
                "codec.codebook_size",
                format!("must be in 2..={MAX_CODEBOOK_SIZE}"),
            ));
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate_hz / self.frame_rate_hz).round() as usize
    }

    /// Frame count for a signal of `duration_s` seconds.
    pub fn frames_for_duration(&self, duration_s: f64) -> usize {
        (self.frame_rate_hz * duration_s + 1e-9).floor() as usize
    }
}

/// A `frames × dim` table of latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Latents {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::LengthMismatch { what: "latent data", left: data.len(), right: frames * dim });
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self { frames, dim, data: vec![0.0; frames * dim] }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &Latents) -> Result<f64> {
        if self.dim != other.dim || self.frames != other.frames {
            return Err(Error::DimensionMismatch { expected: self.data.len(), got: other.data.len() });
        }
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Fixed, seeded windowed projection of each block of `samples_per_frame`
/// samples onto `latent_dim` outputs.
#[derive(Debug, Clone)]
pub struct Featurizer {
    samples_per_frame: usize,
    dim: usize,
    // dim × samples_per_frame, window already folded in
    kernel: Vec<f64>,
}

impl Featurizer {
    pub fn new(config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let spf = config.samples_per_frame();
        let dim = config.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.featurizer_seed);
        // Hann window mean square is 3/8; scale keeps output variance close to input variance.
        let scale = (3.0 / (spf as f64 * 0.375)).sqrt();
        let window: Vec<f64> =
            (0..spf).map(|s| 0.5 - 0.5 * (2.0 * PI * (s as f64 + 0.5) / spf as f64).cos()).collect();
        let mut kernel = Vec::with_capacity(dim * spf);
        for _ in 0..dim {
            for w in &window {
                kernel.push(rng.gen_range(-1.0..1.0) * scale * w);
            }
        }
        Ok(Self { samples_per_frame: spf, dim, kernel })
    }

    pub fn featurize(&self, signal: &[f32]) -> Result<Latents> {
        let spf = self.samples_per_frame;
        if signal.len() < spf {
            return Err(Error::SignalTooShort { len: signal.len(), needed: spf });
        }
        let frames = signal.len() / spf;
        let mut data = Vec::with_capacity(frames * self.dim);
        for block in signal.chunks_exact(spf).take(frames) {
            for c in 0..self.dim {
                let k = &self.kernel[c * spf..(c + 1) * spf];
                let acc: f64 = k.iter().zip(block).map(|(w, x)| w * f64::from(*x)).sum();
                data.push(acc as f32);
            }
        }
        Ok(Latents { frames, dim: self.dim, data })
    }
}

/// Featurize `signal` with a featurizer built from `config`.
pub fn featurize(signal: &[f32], config: &CodecConfig) -> Result<Latents> {
    Featurizer::new(config)?.featurize(signal)
}

/// A `frames × levels` table of audio token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub levels: usize,
    pub tokens: Vec<u16>,
    pub frame_rate_mhz: u32,
}

impl TokenGrid {
    pub fn new(frames: usize, levels: usize, tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() != frames * levels {
            return Err(Error::LengthMismatch { what: "grid tokens", left: tokens.len(), right: frames * levels });
        }
        Ok(Self { frames, levels, tokens, frame_rate_mhz: (DEFAULT_FRAME_RATE_HZ * 1000.0) as u32 })
    }

    pub fn filled(frames: usize, levels: usize, token: u16) -> Self {
        Self::new(frames, levels, vec![token; frames * levels]).expect("sized by construction")
    }

    pub fn frame_rate_hz(&self) -> f64 {
        f64::from(self.frame_rate_mhz) / 1000.0
    }

    #[inline]
    pub fn get(&self, t: usize, q: usize) -> u16 {
        self.tokens[t * self.levels + q]
    }

    #[inline]
    pub fn set(&mut self, t: usize, q: usize, token: u16) {
        self.tokens[t * self.levels + q] = token;
    }

    pub fn row(&self, t: usize) -> &[u16] {
        &self.tokens[t * self.levels..(t + 1) * self.levels]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [u16] {
        &mut self.tokens[t * self.levels..(t + 1) * self.levels]
    }

    /// Writes the `TGR1` layout: magic, `u32` frames, `u32` levels, then `u16` tokens row-major.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_magic(w, TGR_MAGIC)?;
        write_u32(w, self.frames as u32)?;
        write_u32(w, self.levels as u32)?;
        write_u16s(w, &self.tokens)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        read_magic(r, TGR_MAGIC)?;
        let frames = read_u32(r)? as usize;
        let levels = read_u32(r)? as usize;
        if levels == 0 || levels > 2 * MAX_LEVELS || frames > 1 << 24 {
            return Err(Error::Format(format!("implausible grid shape {frames}×{levels}")));
        }
        let tokens = read_u16s(r, frames * levels)?;
        Self::new(frames, levels, tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookLevel {
    /// `codebook_size × latent_dim`
    pub entries: Vec<f32>,
    pub ema_counts: Vec<f32>,
    pub ema_sums: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaOptions {
    pub decay: f64,
    pub commitment_weight: f64,
    /// Entries whose EMA count falls below this are reseeded from the batch.
    pub dead_threshold: f64,
}

impl Default for EmaOptions {
    fn default() -> Self {
        Self { decay: 0.99, commitment_weight: 0.25, dead_threshold: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    /// Mean squared error per element between inputs and their full RVQ reconstruction.
    pub quantization_error: f64,
    /// `commitment_weight × Σ_levels MSE(residual, selected entry)`.
    pub commitment_loss: f64,
    pub revived: usize,
}

/// Residual vector quantizer: `num_levels` codebooks applied to successive residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    pub config: CodecConfig,
    pub levels: Vec<CodebookLevel>,
}

impl CodebookStack {
    /// Build from explicit entry tables (one `codebook_size × latent_dim` table per level).
    pub fn from_entries(config: CodecConfig, entries: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        if entries.len() != config.num_levels {
            return Err(Error::LengthMismatch { what: "codebook levels", left: entries.len(), right: config.num_levels });
        }
        let expected = config.codebook_size * config.latent_dim;
        let mut levels = Vec::with_capacity(entries.len());
        for table in entries {
            if table.len() != expected {
                return Err(Error::DimensionMismatch { expected, got: table.len() });
            }
            if table.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite codebook entry".into()));
            }
            levels.push(CodebookLevel {
                ema_counts: vec![1.0; config.codebook_size],
                ema_sums: table.clone(),
                entries: table,
            });
        }
        Ok(Self { config, levels })
    }

    /// Unit-variance uniform random entries.
    pub fn random(config: CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let n = config.codebook_size * config.latent_dim;
        let a = 3f32.sqrt();
        let tables = (0..config.num_levels)
            .map(|_| (0..n).map(|_| rng.gen_range(-a..a)).collect())
            .collect();
        Self::from_entries(config, tables)
    }

    /// k-means++ seeding level by level from the residuals of `batch`.
    pub fn init_kmeanspp(config: CodecConfig, batch: &Latents, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if batch.dim != config.latent_dim {
            return Err(Error::DimensionMismatch { expected: config.latent_dim, got: batch.dim });
        }
        if batch.frames == 0 {
            return Err(Error::Empty("codebook init batch"));
        }
        let dim = config.latent_dim;
        let size = config.codebook_size;
        let mut residual = batch.clone();
        let mut tables = Vec::with_capacity(config.num_levels);
        for _ in 0..config.num_levels {
            let mut table: Vec<f32> = Vec::with_capacity(size * dim);
            let mut best = vec![f64::INFINITY; residual.frames];
            let first = rng.gen_range(0..residual.frames);
            table.extend_from_slice(residual.row(first));
            while table.len() < size * dim {
                let last = &table[table.len() - dim..];
                for (n, b) in best.iter_mut().enumerate() {
                    *b = b.min(sq_dist(residual.row(n), last));
                }
                let total: f64 = best.iter().sum();
                let pick = if total > 0.0 {
                    let mut u = rng.gen_range(0.0..total);
                    let mut chosen = residual.frames - 1;
                    for (n, b) in best.iter().enumerate() {
                        if u < *b {
                            chosen = n;
                            break;
                        }
                        u -= b;
                    }
                    chosen
                } else {
                    rng.gen_range(0..residual.frames)
                };
                table.extend_from_slice(residual.row(pick));
            }
            for n in 0..residual.frames {
                let (k, _) = nearest_in(&table, dim, residual.row(n));
                let e = &table[k * dim..(k + 1) * dim];
                for (r, v) in residual.row_mut(n).iter_mut().zip(e) {
                    *r -= v;
                }
            }
            tables.push(table);
        }
        Self::from_entries(config, tables)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn entry(&self, level: usize, index: usize) -> &[f32] {
        let d = self.dim();
        &self.levels[level].entries[index * d..(index + 1) * d]
    }

    /// Nearest entry of `level` to `v` (lowest index on ties) and its squared distance.
    pub fn nearest(&self, level: usize, v: &[f32]) -> (usize, f64) {
        nearest_in(&self.levels[level].entries, self.dim(), v)
    }

    /// Tokens for every frame: level `q` codes the residual left by levels `< q`.
    pub fn encode(&self, latents: &Latents) -> Result<TokenGrid> {
        Ok(self.quantize(latents)?.0)
    }

    /// Tokens plus the reconstruction the tokens decode to.
    pub fn quantize(&self, latents: &Latents) -> Result<(TokenGrid, Latents)> {
        self.quantize_levels(latents, self.num_levels())
    }

    /// As [`quantize`](Self::quantize) using only the first `levels` codebooks.
    pub fn quantize_levels(&self, latents: &Latents, levels: usize) -> Result<(TokenGrid, Latents)> {
        let dim = self.dim();
        if latents.dim != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: latents.dim });
        }
        let levels = levels.min(self.num_levels());
        let mut tokens = Vec::with_capacity(latents.frames * levels);
        let mut recon = Latents::zeros(latents.frames, dim);
        let mut residual = vec![0f32; dim];
        for t in 0..latents.frames {
            residual.copy_from_slice(latents.row(t));
            for q in 0..levels {
                let (k, _) = self.nearest(q, &residual);
                tokens.push(k as u16 + 1);
                let e = self.entry(q, k);
                for ((r, out), v) in residual.iter_mut().zip(recon.row_mut(t)).zip(e) {
                    *r -= v;
                    *out += v;
                }
            }
        }
        Ok((TokenGrid::new(latents.frames, levels, tokens)?, recon))
    }

    /// Sum over levels of the indexed entries.
    pub fn decode(&self, grid: &TokenGrid) -> Result<Latents> {
        if grid.levels > self.num_levels() {
            return Err(Error::DimensionMismatch { expected: self.num_levels(), got: grid.levels });
        }
        let dim = self.dim();
        let size = self.codebook_size();
        let mut out = Latents::zeros(grid.frames, dim);
        for t in 0..grid.frames {
            for q in 0..grid.levels {
                let token = grid.get(t, q);
                if token == 0 || usize::from(token) > size {
                    return Err(Error::TokenOutOfRange { frame: t, level: q, token });
                }
                let e = self.entry(q, usize::from(token) - 1);
                for (o, v) in out.row_mut(t).iter_mut().zip(e) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    /// Mean squared reconstruction error per element using the first `levels` codebooks.
    pub fn reconstruction_mse(&self, latents: &Latents, levels: usize) -> Result<f64> {
        let (_, recon) = self.quantize_levels(latents, levels)?;
        latents.mse(&recon)
    }

    /// One EMA codebook update over `batch`.
    ///
    /// Assignments use the entries as they were before the step. Each entry is
    /// then re-estimated as `ema_sum / ema_count`; entries whose count drops
    /// below `dead_threshold` are reseeded to a random residual of the batch.
    pub fn train_step(&mut self, batch: &Latents, opts: &EmaOptions, rng: &mut impl Rng) -> Result<TrainStats> {
        let dim = self.dim();
        if batch.dim != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: batch.dim });
        }
        if batch.frames == 0 {
            return Err(Error::Empty("codebook training batch"));
        }
        let size = self.codebook_size();
        let decay = opts.decay;
        let mut residual = batch.clone();
        let mut recon = Latents::zeros(batch.frames, dim);
        let mut commitment = 0.0;
        let mut revived = 0;
        let mut assign = vec![0usize; batch.frames];
        for q in 0..self.num_levels() {
            let mut counts = vec![0f64; size];
            let mut sums = vec![0f64; size * dim];
            let mut level_err = 0.0;
            for (n, a) in assign.iter_mut().enumerate() {
                let (k, d) = self.nearest(q, residual.row(n));
                *a = k;
                level_err += d;
                counts[k] += 1.0;
                for (s, r) in sums[k * dim..(k + 1) * dim].iter_mut().zip(residual.row(n)) {
                    *s += f64::from(*r);
                }
            }
            commitment += level_err / (batch.frames * dim) as f64;

            let before = residual.clone();
            for (n, &k) in assign.iter().enumerate() {
                let e = self.entry(q, k).to_vec();
                for ((r, o), v) in residual.row_mut(n).iter_mut().zip(recon.row_mut(n)).zip(&e) {
                    *r -= v;
                    *o += v;
                }
            }

            let level = &mut self.levels[q];
            for k in 0..size {
                let count = decay * f64::from(level.ema_counts[k]) + (1.0 - decay) * counts[k];
                level.ema_counts[k] = count as f32;
                for d in 0..dim {
                    let idx = k * dim + d;
                    let s = decay * f64::from(level.ema_sums[idx]) + (1.0 - decay) * sums[idx];
                    level.ema_sums[idx] = s as f32;
                }
                if count < opts.dead_threshold {
                    let pick = rng.gen_range(0..batch.frames);
                    let src = before.row(pick);
                    level.entries[k * dim..(k + 1) * dim].copy_from_slice(src);
                    level.ema_sums[k * dim..(k + 1) * dim].copy_from_slice(src);
                    level.ema_counts[k] = 1.0;
                    revived += 1;
                } else {
                    for d in 0..dim {
                        let idx = k * dim + d;
                        level.entries[idx] = (f64::from(level.ema_sums[idx]) / count) as f32;
                    }
                }
            }
        }
        let quantization_error = batch.mse(&recon)?;
        Ok(TrainStats {
            quantization_error,
            commitment_loss: opts.commitment_weight * commitment,
            revived,
        })
    }

    /// Writes the `RVQ1` layout: magic, version and config integers, then per
    /// level the entries, EMA counts and EMA sums as little-endian `f32`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        write_magic(w, RVQ_MAGIC)?;
        write_u32(w, RVQ_VERSION)?;
        write_u32(w, c.latent_dim as u32)?;
        write_u32(w, c.num_levels as u32)?;
        write_u32(w, c.codebook_size as u32)?;
        write_u32(w, c.sample_rate_hz.round() as u32)?;
        write_u32(w, (c.frame_rate_hz * 1000.0).round() as u32)?;
        write_u64(w, c.featurizer_seed)?;
        for level in &self.levels {
            write_f32s(w, level.entries.iter().copied())?;
            write_f32s(w, level.ema_counts.iter().copied())?;
            write_f32s(w, level.ema_sums.iter().copied())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        read_magic(r, RVQ_MAGIC)?;
        let version = read_u32(r)?;
        if version != RVQ_VERSION {
            return Err(Error::Format(format!("unsupported RVQ version {version}")));
        }
        let latent_dim = read_u32(r)? as usize;
        let num_levels = read_u32(r)? as usize;
        let codebook_size = read_u32(r)? as usize;
        let sample_rate_hz = f64::from(read_u32(r)?);
        let frame_rate_hz = f64::from(read_u32(r)?) / 1000.0;
        let featurizer_seed = read_u64(r)?;
        let config = CodecConfig { frame_rate_hz, sample_rate_hz, latent_dim, num_levels, codebook_size, featurizer_seed };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n = codebook_size * latent_dim;
        let mut levels = Vec::with_capacity(num_levels);
        for _ in 0..num_levels {
            let entries = read_f32s(r, n)?;
            let ema_counts = read_f32s(r, codebook_size)?;
            let ema_sums = read_f32s(r, n)?;
            if entries.iter().chain(&ema_counts).chain(&ema_sums).any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite codebook value".into()));
            }
            levels.push(CodebookLevel { entries, ema_counts, ema_sums });
        }
        Ok(Self { config, levels })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

fn nearest_in(table: &[f32], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, e) in table.chunks_exact(dim).enumerate() {
        let d = sq_dist(v, e);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}
