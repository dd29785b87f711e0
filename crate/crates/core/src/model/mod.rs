//! Temporal + Depth transformer over multistream frames.
//!
//! The Temporal transformer reads the summed embeddings of the previous frame
//! (plus a condition-label embedding) and produces `Z_t`. A linear head maps
//! `Z_t` to text logits; the Depth transformer then walks the `2·Q` audio
//! positions of the frame, first the output stream, then the input stream.

mod kernels;
mod params;
mod tape;
pub mod train;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io::{read_magic, read_string, read_u32, write_magic, write_string, write_u32};
use crate::streams::{text, AudioVocab, Multistream, MultistreamFrame};
use crate::{Error, Result};

use kernels::{add_bias, attention_row, embed_sum_row, linear_row, rmsnorm_row, swiglu_row, Rope};
pub use params::{ParamStore, Tensor};
use tape::{Graph, NodeId};
pub use tape::Grads;

const CKPT_MAGIC: &[u8; 4] = b"RQT1";
const CKPT_VERSION: u32 = 1;

/// Speaker-similarity bucket used as a conditioning label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionLabel {
    VeryBad,
    Bad,
    Neutral,
    Good,
    VeryGood,
}

impl ConditionLabel {
    pub const ALL: [ConditionLabel; 5] = [Self::VeryBad, Self::Bad, Self::Neutral, Self::Good, Self::VeryGood];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::VeryBad => "very_bad",
            Self::Bad => "bad",
            Self::Neutral => "neutral",
            Self::Good => "good",
            Self::VeryGood => "very_good",
        }
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::config("label", format!("unknown condition label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Longest frame prefix the Temporal transformer attends over.
    pub context_frames: usize,
    pub d_depth: usize,
    pub depth_layers: usize,
    pub depth_heads: usize,
    pub depth_ffn_dim: usize,
    /// Q, the number of RVQ levels per audio stream.
    pub levels: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub delay_steps: usize,
    /// Levels from this 1-based index upward share Depth embeddings and heads.
    pub depth_share_from: Option<usize>,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Standard deviation of embedding tables at init.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            context_frames: 256,
            d_depth: 32,
            depth_layers: 1,
            depth_heads: 2,
            depth_ffn_dim: 64,
            levels: 8,
            text_vocab: 64,
            audio_vocab: AudioVocab::new(64).size(),
            delay_steps: crate::streams::DEFAULT_DELAY_STEPS,
            depth_share_from: None,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            init_std: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, f: &str| if v == 0 { Err(Error::config(f, "must be positive")) } else { Ok(()) };
        pos(self.d_model, "d_model")?;
        pos(self.n_layers, "n_layers")?;
        pos(self.n_heads, "n_heads")?;
        pos(self.ffn_dim, "ffn_dim")?;
        pos(self.context_frames, "context_frames")?;
        pos(self.d_depth, "d_depth")?;
        pos(self.depth_heads, "depth_heads")?;
        pos(self.depth_ffn_dim, "depth_ffn_dim")?;
        pos(self.levels, "levels")?;
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model", "must be divisible by n_heads"));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("n_heads", "head dimension must be even for rotary embeddings"));
        }
        if self.d_depth % self.depth_heads != 0 {
            return Err(Error::config("d_depth", "must be divisible by depth_heads"));
        }
        if self.text_vocab <= usize::from(text::FIRST_WORD) || self.text_vocab > usize::from(u16::MAX) {
            return Err(Error::config("text_vocab", "must exceed the reserved ids and fit in u16"));
        }
        if self.audio_vocab < 4 || self.audio_vocab > usize::from(u16::MAX) {
            return Err(Error::config("audio_vocab", "must hold at least one entry plus specials and fit in u16"));
        }
        if let Some(s) = self.depth_share_from {
            if s == 0 || s > self.levels {
                return Err(Error::config("depth_share_from", "must be a level in 1..=levels"));
            }
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 1.0) || !(self.init_std > 0.0) {
            return Err(Error::config("norm_eps/rope_base/init_std", "must be positive (rope_base > 1)"));
        }
        Ok(())
    }

    pub fn audio(&self) -> AudioVocab {
        AudioVocab::new(self.audio_vocab - 3)
    }

    /// Number of Depth positions per frame.
    pub fn depth_positions(&self) -> usize {
        2 * self.levels
    }
}

/// Logits for one frame: text, then `2·Q` audio vectors (output stream first).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle {
    pub text: Vec<f64>,
    pub audio: Vec<Vec<f64>>,
}

impl LogitBundle {
    pub fn is_finite(&self) -> bool {
        self.text.iter().chain(self.audio.iter().flatten()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    text_emb: usize,
    target_emb: Vec<usize>,
    source_emb: Vec<usize>,
    label_emb: usize,
    layers: Vec<LayerIds>,
    final_norm: usize,
    text_head: usize,
    text_bias: usize,
    depth_proj: usize,
    /// Embedding of the previous token at Depth position `k`, indexed `k - 1`.
    depth_tok: Vec<usize>,
    depth_pos: usize,
    depth_layers: Vec<LayerIds>,
    depth_norm: usize,
    depth_head: Vec<usize>,
    depth_bias: Vec<usize>,
}

/// Incremental state of the Temporal transformer for one sequence.
#[derive(Debug, Clone)]
pub struct TemporalCache {
    label: ConditionLabel,
    frames: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl TemporalCache {
    pub fn label(&self) -> ConditionLabel {
        self.label
    }

    /// Number of frames already consumed.
    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }
}

/// Incremental state of the Depth transformer within one frame.
#[derive(Debug, Clone)]
pub struct DepthState {
    z_proj: Vec<f64>,
    position: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DepthState {
    /// Depth positions already computed.
    pub fn position(&self) -> usize {
        self.position
    }
}

/// Outputs of a one-shot teacher-forced pass.
#[derive(Debug, Clone)]
pub struct TeacherPass {
    pub z: Vec<Vec<f64>>,
    pub logits: Vec<LogitBundle>,
}

pub(crate) struct ForwardNodes {
    pub z: NodeId,
    pub text_logits: NodeId,
    /// One node per Depth position, rows = frames.
    pub depth_logits: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct RqTransformer {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    rope: Rope,
}

impl RqTransformer {
    /// Randomly initialised model seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::default();
        let c = &config;
        let (d, dd, q) = (c.d_model, c.d_depth, c.levels);

        let text_emb =
            p.add("temporal.text_emb", &[c.text_vocab, d], normal(&mut rng, c.text_vocab * d, c.init_std), true);
        let stream_tables = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| -> Vec<usize> {
            (0..q)
                .map(|l| {
                    let n = c.audio_vocab * d;
                    p.add(format!("temporal.{name}.{l}"), &[c.audio_vocab, d], normal(rng, n, c.init_std), true)
                })
                .collect()
        };
        let target_emb = stream_tables(&mut p, &mut rng, "target_emb");
        let source_emb = stream_tables(&mut p, &mut rng, "source_emb");
        let label_emb = p.add("temporal.label_emb", &[5, d], normal(&mut rng, 5 * d, c.init_std), true);

        let layers = make_layers(&mut p, &mut rng, "temporal.layer", c.n_layers, d, c.ffn_dim);
        let final_norm = p.add("temporal.final_norm", &[d], vec![1.0; d], false);
        let text_head =
            p.add("text_head.weight", &[d, c.text_vocab], normal(&mut rng, d * c.text_vocab, 1.0 / (d as f64).sqrt()), true);
        let text_bias = p.add("text_head.bias", &[c.text_vocab], vec![0.0; c.text_vocab], false);

        let depth_proj = p.add("depth.proj", &[d, dd], normal(&mut rng, d * dd, 1.0 / (d as f64).sqrt()), true);
        let positions = c.depth_positions();
        let mut depth_tok = Vec::with_capacity(positions);
        let mut depth_head = Vec::with_capacity(positions);
        let mut depth_bias = Vec::with_capacity(positions);
        for k in 1..=positions {
            match c.shared_slot(k) {
                Some(src) => {
                    depth_head.push(depth_head[src - 1]);
                    depth_bias.push(depth_bias[src - 1]);
                }
                None => {
                    depth_head.push(p.add(
                        format!("depth.head.{k}.weight"),
                        &[dd, c.audio_vocab],
                        normal(&mut rng, dd * c.audio_vocab, 1.0 / (dd as f64).sqrt()),
                        true,
                    ));
                    depth_bias.push(p.add(format!("depth.head.{k}.bias"), &[c.audio_vocab], vec![0.0; c.audio_vocab], false));
                }
            }
            // Position 1 reads the text token, so its table never serves audio positions.
            match c.shared_slot(k).map(|src| if src == 1 { 2 } else { src }) {
                Some(src) if src < k => depth_tok.push(depth_tok[src - 1]),
                _ => {
                    let vocab_in = if k == 1 { c.text_vocab } else { c.audio_vocab };
                    depth_tok.push(p.add(
                        format!("depth.tok_emb.{k}"),
                        &[vocab_in, dd],
                        normal(&mut rng, vocab_in * dd, c.init_std),
                        true,
                    ));
                }
            }
        }
        let depth_pos = p.add("depth.pos_emb", &[positions, dd], normal(&mut rng, positions * dd, c.init_std), true);
        let depth_layers = make_layers(&mut p, &mut rng, "depth.layer", c.depth_layers, dd, c.depth_ffn_dim);
        let depth_norm = p.add("depth.final_norm", &[dd], vec![1.0; dd], false);

        let ids = Ids {
            text_emb,
            target_emb,
            source_emb,
            label_emb,
            layers,
            final_norm,
            text_head,
            text_bias,
            depth_proj,
            depth_tok,
            depth_pos,
            depth_layers,
            depth_norm,
            depth_head,
            depth_bias,
        };
        let rope = Rope::new(d / c.n_heads, c.rope_base);
        Ok(Self { config, params: p, ids, rope })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn t(&self, id: usize) -> &[f64] {
        &self.params.tensors[id].data
    }

    fn check_frame(&self, frame: &MultistreamFrame, index: usize) -> Result<()> {
        let q = self.config.levels;
        if frame.target.len() != q || frame.source.len() != q {
            return Err(Error::LengthMismatch {
                what: "frame levels",
                left: frame.target.len().max(frame.source.len()),
                right: q,
            });
        }
        for (level, tok) in frame.tokens().enumerate() {
            let vocab = if level == 0 { self.config.text_vocab } else { self.config.audio_vocab };
            if usize::from(tok) >= vocab {
                return Err(Error::TokenOutOfRange { frame: index, level, token: tok });
            }
        }
        Ok(())
    }

    /// Embedding terms for the Temporal input built from the previous frame.
    fn temporal_terms(&self, prev: Option<&MultistreamFrame>, label: ConditionLabel) -> Vec<(usize, usize)> {
        let ids = &self.ids;
        let mut terms = Vec::with_capacity(2 + 2 * self.config.levels);
        match prev {
            None => {
                let bos = usize::from(self.config.audio().bos());
                terms.push((ids.text_emb, usize::from(text::BOS)));
                terms.extend(ids.target_emb.iter().map(|&p| (p, bos)));
                terms.extend(ids.source_emb.iter().map(|&p| (p, bos)));
            }
            Some(f) => {
                terms.push((ids.text_emb, usize::from(f.text)));
                terms.extend(ids.target_emb.iter().zip(&f.target).map(|(&p, &t)| (p, usize::from(t))));
                terms.extend(ids.source_emb.iter().zip(&f.source).map(|(&p, &t)| (p, usize::from(t))));
            }
        }
        terms.push((ids.label_emb, label.index()));
        terms
    }

    fn depth_terms(&self, k: usize, prev: u16) -> [(usize, usize); 2] {
        [(self.ids.depth_tok[k - 1], usize::from(prev)), (self.ids.depth_pos, k - 1)]
    }

    // ---- incremental path ----

    pub fn temporal_cache(&self, label: ConditionLabel) -> TemporalCache {
        let n = self.config.n_layers;
        TemporalCache { label, frames: 0, keys: vec![Vec::new(); n], values: vec![Vec::new(); n] }
    }

    /// Consume one frame (the previous one, or `None` for the BOS step) and return `Z_t`.
    pub fn temporal_step(&self, cache: &mut TemporalCache, prev: Option<&MultistreamFrame>) -> Result<Vec<f64>> {
        if cache.frames >= self.config.context_frames {
            return Err(Error::PrefixTooLong { len: cache.frames + 1, context: self.config.context_frames });
        }
        if let Some(f) = prev {
            self.check_frame(f, cache.frames.saturating_sub(1))?;
        }
        let d = self.config.d_model;
        let terms = self.temporal_terms(prev, cache.label);
        let refs: Vec<(&[f64], usize)> = terms.iter().map(|&(p, i)| (self.t(p), i)).collect();
        let mut x = vec![0.0; d];
        embed_sum_row(&refs, d, &mut x);
        let pos = cache.frames;
        for (l, layer) in self.ids.layers.iter().enumerate() {
            x = self.layer_row(
                layer,
                &x,
                &mut cache.keys[l],
                &mut cache.values[l],
                self.config.n_heads,
                Some(pos),
            );
        }
        let mut z = vec![0.0; d];
        rmsnorm_row(&x, self.t(self.ids.final_norm), self.config.norm_eps, &mut z);
        cache.frames += 1;
        Ok(z)
    }

    /// Run the Temporal transformer over `prefix` and return `Z_{len+1}`.
    /// Frames already held by `cache` are reused; the rest are appended.
    pub fn temporal_forward(&self, prefix: &[MultistreamFrame], cache: &mut TemporalCache) -> Result<Vec<f64>> {
        if prefix.len() + 1 > self.config.context_frames {
            return Err(Error::PrefixTooLong { len: prefix.len() + 1, context: self.config.context_frames });
        }
        if cache.frames > prefix.len() + 1 {
            return Err(Error::LengthMismatch { what: "cache longer than prefix", left: cache.frames, right: prefix.len() });
        }
        if cache.frames == prefix.len() + 1 {
            // Recompute the last step on a copy: cheap and keeps the cache untouched.
            let mut c = cache.clone();
            c.frames -= 1;
            for l in 0..self.config.n_layers {
                let d = self.config.d_model;
                let n = c.keys[l].len() - d;
                c.keys[l].truncate(n);
                c.values[l].truncate(n);
            }
            let prev = prefix.last();
            return self.temporal_step(&mut c, prev);
        }
        let mut z = Vec::new();
        while cache.frames <= prefix.len() {
            let prev = if cache.frames == 0 { None } else { Some(&prefix[cache.frames - 1]) };
            z = self.temporal_step(cache, prev)?;
        }
        Ok(z)
    }

    pub fn text_logits(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.config.text_vocab];
        linear_row(z, self.t(self.ids.text_head), &mut out);
        add_bias(&mut out, self.t(self.ids.text_bias));
        out
    }

    pub fn depth_begin(&self, z: &[f64]) -> DepthState {
        let mut z_proj = vec![0.0; self.config.d_depth];
        linear_row(z, self.t(self.ids.depth_proj), &mut z_proj);
        let n = self.config.depth_layers;
        DepthState { z_proj, position: 0, keys: vec![Vec::new(); n], values: vec![Vec::new(); n] }
    }

    /// Feed the token at the current position (text token first) and return
    /// the audio logits for the next position.
    pub fn depth_step(&self, state: &mut DepthState, prev: u16) -> Result<Vec<f64>> {
        let k = state.position + 1;
        let max = self.config.depth_positions();
        if k > max {
            return Err(Error::PositionOutOfRange { position: k, max });
        }
        let vocab = if k == 1 { self.config.text_vocab } else { self.config.audio_vocab };
        if usize::from(prev) >= vocab {
            return Err(Error::TokenOutOfRange { frame: 0, level: k - 1, token: prev });
        }
        let dd = self.config.d_depth;
        let terms = self.depth_terms(k, prev);
        let refs: Vec<(&[f64], usize)> = terms.iter().map(|&(p, i)| (self.t(p), i)).collect();
        let mut e = vec![0.0; dd];
        embed_sum_row(&refs, dd, &mut e);
        let mut x: Vec<f64> = state.z_proj.iter().zip(&e).map(|(a, b)| a + b).collect();
        for (l, layer) in self.ids.depth_layers.iter().enumerate() {
            x = self.layer_row(layer, &x, &mut state.keys[l], &mut state.values[l], self.config.depth_heads, None);
        }
        let mut h = vec![0.0; dd];
        rmsnorm_row(&x, self.t(self.ids.depth_norm), self.config.norm_eps, &mut h);
        let mut out = vec![0.0; self.config.audio_vocab];
        linear_row(&h, self.t(self.ids.depth_head[k - 1]), &mut out);
        add_bias(&mut out, self.t(self.ids.depth_bias[k - 1]));
        state.position = k;
        Ok(out)
    }

    /// Next-position logits given `Z_t` and the tokens of the frame so far
    /// (text token first). Position 0 yields text logits.
    pub fn depth_forward(&self, z: &[f64], tokens_so_far: &[u16]) -> Result<Vec<f64>> {
        let p = tokens_so_far.len();
        let max = self.config.depth_positions();
        if p > max {
            return Err(Error::PositionOutOfRange { position: p, max });
        }
        if z.len() != self.config.d_model {
            return Err(Error::DimensionMismatch { expected: self.config.d_model, got: z.len() });
        }
        if p == 0 {
            return Ok(self.text_logits(z));
        }
        let mut st = self.depth_begin(z);
        let mut out = Vec::new();
        for &tok in tokens_so_far {
            out = self.depth_step(&mut st, tok)?;
        }
        Ok(out)
    }

    fn layer_row(
        &self,
        layer: &LayerIds,
        x: &[f64],
        keys: &mut Vec<f64>,
        values: &mut Vec<f64>,
        n_heads: usize,
        rope_pos: Option<usize>,
    ) -> Vec<f64> {
        let dim = x.len();
        let eps = self.config.norm_eps;
        let ffn = self.params.tensors[layer.w_gate].shape[1];
        let mut h = vec![0.0; dim];
        rmsnorm_row(x, self.t(layer.attn_norm), eps, &mut h);
        let mut q = vec![0.0; dim];
        let mut k = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        linear_row(&h, self.t(layer.wq), &mut q);
        linear_row(&h, self.t(layer.wk), &mut k);
        linear_row(&h, self.t(layer.wv), &mut v);
        if let Some(pos) = rope_pos {
            self.rope.rotate(&mut q, pos, 1.0);
            self.rope.rotate(&mut k, pos, 1.0);
        }
        keys.extend_from_slice(&k);
        values.extend_from_slice(&v);
        let n_keys = keys.len() / dim;
        let mut a = vec![0.0; dim];
        let mut scratch = Vec::new();
        attention_row(&q, keys, values, n_keys, n_heads, &mut a, &mut scratch, None);
        let mut o = vec![0.0; dim];
        linear_row(&a, self.t(layer.wo), &mut o);
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let mut h2 = vec![0.0; dim];
        rmsnorm_row(&x1, self.t(layer.ffn_norm), eps, &mut h2);
        let mut g = vec![0.0; ffn];
        let mut u = vec![0.0; ffn];
        linear_row(&h2, self.t(layer.w_gate), &mut g);
        linear_row(&h2, self.t(layer.w_up), &mut u);
        let mut s = vec![0.0; ffn];
        swiglu_row(&g, &u, &mut s);
        let mut f = vec![0.0; dim];
        linear_row(&s, self.t(layer.w_down), &mut f);
        x1.iter().zip(&f).map(|(a, b)| a + b).collect()
    }

    // ---- graph path ----

    fn graph_layer(&self, g: &mut Graph, layer: &LayerIds, x: NodeId, n_heads: usize, block: usize, rope: bool) -> NodeId {
        let h = g.rmsnorm(x, layer.attn_norm);
        let mut q = g.linear(h, layer.wq, None);
        let mut k = g.linear(h, layer.wk, None);
        let v = g.linear(h, layer.wv, None);
        if rope {
            let rows = g.shape(q).0;
            q = g.rope(q, &self.rope, (0..rows).collect());
            k = g.rope(k, &self.rope, (0..rows).collect());
        }
        let a = g.attention(q, k, v, n_heads, block);
        let o = g.linear(a, layer.wo, None);
        let x1 = g.add(x, o);
        let h2 = g.rmsnorm(x1, layer.ffn_norm);
        let gate = g.linear(h2, layer.w_gate, None);
        let up = g.linear(h2, layer.w_up, None);
        let s = g.swiglu(gate, up);
        let f = g.linear(s, layer.w_down, None);
        g.add(x1, f)
    }

    /// Teacher-forced forward over a whole stream.
    pub(crate) fn build_forward(&self, g: &mut Graph, stream: &Multistream, label: ConditionLabel) -> Result<ForwardNodes> {
        let c = &self.config;
        let t_len = stream.len();
        if t_len == 0 {
            return Err(Error::Empty("stream"));
        }
        if t_len > c.context_frames {
            return Err(Error::PrefixTooLong { len: t_len, context: c.context_frames });
        }
        if stream.levels != c.levels {
            return Err(Error::LengthMismatch { what: "stream levels", left: stream.levels, right: c.levels });
        }
        for (i, f) in stream.frames.iter().enumerate() {
            self.check_frame(f, i)?;
        }
        let terms: Vec<Vec<(usize, usize)>> = (0..t_len)
            .map(|t| self.temporal_terms(if t == 0 { None } else { Some(&stream.frames[t - 1]) }, label))
            .collect();
        let mut x = g.embed_sum(terms, c.d_model);
        for layer in &self.ids.layers {
            x = self.graph_layer(g, layer, x, c.n_heads, t_len, true);
        }
        let z = g.rmsnorm(x, self.ids.final_norm);
        let text_logits = g.linear(z, self.ids.text_head, Some(self.ids.text_bias));

        let positions = c.depth_positions();
        let zp = g.linear(z, self.ids.depth_proj, None);
        let zr = g.repeat_rows(zp, positions);
        let mut dterms = Vec::with_capacity(t_len * positions);
        for f in &stream.frames {
            let audio: Vec<u16> = f.target.iter().chain(&f.source).copied().collect();
            for k in 1..=positions {
                let prev = if k == 1 { f.text } else { audio[k - 2] };
                dterms.push(self.depth_terms(k, prev).to_vec());
            }
        }
        let e = g.embed_sum(dterms, c.d_depth);
        let mut h = g.add(zr, e);
        for layer in &self.ids.depth_layers {
            h = self.graph_layer(g, layer, h, c.depth_heads, positions, false);
        }
        let h = g.rmsnorm(h, self.ids.depth_norm);
        let depth_logits = (1..=positions)
            .map(|k| {
                let rows = (0..t_len).map(|t| t * positions + k - 1).collect();
                let sel = g.select_rows(h, rows);
                g.linear(sel, self.ids.depth_head[k - 1], Some(self.ids.depth_bias[k - 1]))
            })
            .collect();
        Ok(ForwardNodes { z, text_logits, depth_logits })
    }

    /// One-shot teacher-forced pass: `Z_t` and every logit of every frame.
    pub fn teacher_forward(&self, stream: &Multistream, label: ConditionLabel) -> Result<TeacherPass> {
        let mut g = Graph::new(&self.params, self.config.norm_eps);
        let nodes = self.build_forward(&mut g, stream, label)?;
        let t_len = stream.len();
        let z = (0..t_len).map(|t| g.row(nodes.z, t).to_vec()).collect();
        let logits = (0..t_len)
            .map(|t| LogitBundle {
                text: g.row(nodes.text_logits, t).to_vec(),
                audio: nodes.depth_logits.iter().map(|&n| g.row(n, t).to_vec()).collect(),
            })
            .collect();
        Ok(TeacherPass { z, logits })
    }

    // ---- checkpoints ----

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_magic(w, CKPT_MAGIC)?;
        write_u32(w, CKPT_VERSION)?;
        write_string(w, &serde_json::to_string(&self.config)?)?;
        self.params.write_table(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, CKPT_MAGIC)?;
        let version = read_u32(r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(&read_string(r)?)?;
        let mut model = Self::new(config)?;
        model.params.read_table(r)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

impl ModelConfig {
    /// The Depth position whose embedding and head position `k` uses.
    fn shared_slot(&self, k: usize) -> Option<usize> {
        let s = self.depth_share_from?;
        let level = (k - 1) % self.levels + 1;
        let stream = (k - 1) / self.levels;
        (level > s).then_some(stream * self.levels + s)
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn make_layers(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, n: usize, dim: usize, ffn: usize) -> Vec<LayerIds> {
    let inv = 1.0 / (dim as f64).sqrt();
    let depth_scale = 1.0 / (2.0 * n as f64).sqrt();
    (0..n)
        .map(|i| {
            let name = |s: &str| format!("{prefix}.{i}.{s}");
            LayerIds {
                attn_norm: p.add(name("attn_norm"), &[dim], vec![1.0; dim], false),
                wq: p.add(name("wq"), &[dim, dim], normal(rng, dim * dim, inv), true),
                wk: p.add(name("wk"), &[dim, dim], normal(rng, dim * dim, inv), true),
                wv: p.add(name("wv"), &[dim, dim], normal(rng, dim * dim, inv), true),
                wo: p.add(name("wo"), &[dim, dim], normal(rng, dim * dim, inv * depth_scale), true),
                ffn_norm: p.add(name("ffn_norm"), &[dim], vec![1.0; dim], false),
                w_gate: p.add(name("w_gate"), &[dim, ffn], normal(rng, dim * ffn, inv), true),
                w_up: p.add(name("w_up"), &[dim, ffn], normal(rng, dim * ffn, inv), true),
                w_down: p.add(
                    name("w_down"),
                    &[ffn, dim],
                    normal(rng, ffn * dim, depth_scale / (ffn as f64).sqrt()),
                    true,
                ),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            context_frames: 16,
            d_depth: 6,
            depth_layers: 2,
            depth_heads: 2,
            depth_ffn_dim: 8,
            levels: 2,
            text_vocab: 9,
            audio_vocab: 7,
            delay_steps: 1,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn stream(t: usize, seed: u64) -> Multistream {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| MultistreamFrame {
                text: rng.gen_range(0..9),
                target: (0..2).map(|_| rng.gen_range(0..7)).collect(),
                source: (0..2).map(|_| rng.gen_range(0..7)).collect(),
            })
            .collect();
        Multistream { levels: 2, frames }
    }

    #[test]
    fn cache_matches_teacher_pass_exactly() {
        let m = RqTransformer::new(micro_config()).unwrap();
        let s = stream(6, 1);
        let tp = m.teacher_forward(&s, ConditionLabel::Good).unwrap();
        let mut cache = m.temporal_cache(ConditionLabel::Good);
        for t in 0..6 {
            let z = m.temporal_step(&mut cache, if t == 0 { None } else { Some(&s.frames[t - 1]) }).unwrap();
            assert_eq!(z, tp.z[t]);
            assert_eq!(m.text_logits(&z), tp.logits[t].text);
            let f = &s.frames[t];
            let toks: Vec<u16> = f.tokens().collect();
            let mut st = m.depth_begin(&z);
            for k in 1..=4 {
                let l = m.depth_step(&mut st, toks[k - 1]).unwrap();
                assert_eq!(l, tp.logits[t].audio[k - 1]);
            }
        }
    }

    #[test]
    fn temporal_forward_reuses_cache() {
        let m = RqTransformer::new(micro_config()).unwrap();
        let s = stream(5, 2);
        let mut a = m.temporal_cache(ConditionLabel::Neutral);
        let full = m.temporal_forward(&s.frames[..4], &mut a).unwrap();
        let again = m.temporal_forward(&s.frames[..4], &mut a).unwrap();
        assert_eq!(full, again);
        let mut b = m.temporal_cache(ConditionLabel::Neutral);
        m.temporal_forward(&s.frames[..2], &mut b).unwrap();
        assert_eq!(m.temporal_forward(&s.frames[..4], &mut b).unwrap(), full);
    }

    #[test]
    fn context_limit() {
        let m = RqTransformer::new(micro_config()).unwrap();
        let s = stream(16, 3);
        let mut c = m.temporal_cache(ConditionLabel::Neutral);
        assert!(matches!(m.temporal_forward(&s.frames, &mut c), Err(Error::PrefixTooLong { .. })));
        assert!(m.temporal_forward(&s.frames[..15], &mut c).is_ok());
    }

    #[test]
    fn depth_position_bounds() {
        let m = RqTransformer::new(micro_config()).unwrap();
        let mut c = m.temporal_cache(ConditionLabel::Neutral);
        let z = m.temporal_step(&mut c, None).unwrap();
        assert_eq!(m.depth_forward(&z, &[]).unwrap(), m.text_logits(&z));
        assert!(m.depth_forward(&z, &[4, 1, 1, 1]).is_ok());
        assert!(matches!(m.depth_forward(&z, &[4, 1, 1, 1, 1]), Err(Error::PositionOutOfRange { .. })));
    }

    #[test]
    fn labels_change_z() {
        let m = RqTransformer::new(micro_config()).unwrap();
        let mut a = m.temporal_cache(ConditionLabel::VeryGood);
        let mut b = m.temporal_cache(ConditionLabel::VeryBad);
        assert_ne!(m.temporal_step(&mut a, None).unwrap(), m.temporal_step(&mut b, None).unwrap());
    }

    #[test]
    fn shared_depth_slots() {
        let cfg = ModelConfig { depth_share_from: Some(1), ..micro_config() };
        let m = RqTransformer::new(cfg).unwrap();
        assert_eq!(m.ids.depth_head[1], m.ids.depth_head[0]);
        assert_eq!(m.ids.depth_head[3], m.ids.depth_head[2]);
        assert_ne!(m.ids.depth_head[2], m.ids.depth_head[0]);
        assert!(m.num_parameters() < RqTransformer::new(micro_config()).unwrap().num_parameters());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = RqTransformer::new(micro_config()).unwrap();
        m.params_mut().quantize_f32();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = RqTransformer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        buf[0] = b'X';
        assert!(RqTransformer::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn label_parse() {
        for l in ConditionLabel::ALL {
            assert_eq!(l.name().parse::<ConditionLabel>().unwrap(), l);
        }
        assert!("great".parse::<ConditionLabel>().is_err());
    }
}
