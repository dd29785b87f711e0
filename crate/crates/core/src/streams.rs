//! Stream arithmetic over token grids: acoustic delay, multistream frames,
//! inner-monologue text plans and EOS markers.

use std::io::{Read, Write};

use crate::codec::{TokenGrid, MAX_LEVELS};
use crate::io::{read_magic, read_u16s, read_u32, write_magic, write_u16s, write_u32};
use crate::{Error, Result};

/// Audio id used before the delayed acoustic levels start.
pub const DELAY_TOKEN: u16 = 0;
pub const DEFAULT_DELAY_STEPS: usize = 2;

const MSF_MAGIC: &[u8; 4] = b"MSF1";

/// Audio id layout for a codebook of `codebook_size` entries:
/// `0` delay special, `1..=N` entries, `N+1` input EOS, `N+2` BOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioVocab {
    pub codebook_size: usize,
}

impl AudioVocab {
    pub fn new(codebook_size: usize) -> Self {
        Self { codebook_size }
    }

    pub fn input_eos(&self) -> u16 {
        (self.codebook_size + 1) as u16
    }

    pub fn bos(&self) -> u16 {
        (self.codebook_size + 2) as u16
    }

    pub fn size(&self) -> usize {
        self.codebook_size + 3
    }

    pub fn is_entry(&self, token: u16) -> bool {
        token >= 1 && usize::from(token) <= self.codebook_size
    }
}

/// Text ids shared by every text vocabulary; word tokens start at [`text::FIRST_WORD`].
pub mod text {
    pub const PAD: u16 = 0;
    pub const BOS: u16 = 1;
    pub const EOS: u16 = 2;
    /// Continuation of the current word over the frames its audio spans.
    pub const CONT: u16 = 3;
    pub const FIRST_WORD: u16 = 4;

    pub fn is_word(token: u16) -> bool {
        token >= FIRST_WORD
    }
}

/// Shift acoustic levels (`q ≥ 1`, 0-based) `delay_steps` frames later.
/// Level 0 is untouched; the first `delay_steps` acoustic positions become [`DELAY_TOKEN`].
pub fn apply_acoustic_delay(grid: &TokenGrid, delay_steps: usize) -> TokenGrid {
    let mut out = grid.clone();
    for t in 0..grid.frames {
        for q in 1..grid.levels {
            let v = if t >= delay_steps { grid.get(t - delay_steps, q) } else { DELAY_TOKEN };
            out.set(t, q, v);
        }
    }
    out
}

/// Inverse of [`apply_acoustic_delay`]. The frame count is kept; the trailing
/// `delay_steps` acoustic positions, which have no source, become [`DELAY_TOKEN`].
pub fn remove_acoustic_delay(grid: &TokenGrid, delay_steps: usize) -> TokenGrid {
    let mut out = grid.clone();
    for t in 0..grid.frames {
        for q in 1..grid.levels {
            let v = if t + delay_steps < grid.frames { grid.get(t + delay_steps, q) } else { DELAY_TOKEN };
            out.set(t, q, v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultistreamFrame {
    pub text: u16,
    pub target: Vec<u16>,
    pub source: Vec<u16>,
}

impl MultistreamFrame {
    /// `text, target_1..Q, source_1..Q`
    pub fn tokens(&self) -> impl Iterator<Item = u16> + '_ {
        std::iter::once(self.text).chain(self.target.iter().copied()).chain(self.source.iter().copied())
    }
}

/// A sequence of frames with a fixed number of levels per audio stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Multistream {
    pub levels: usize,
    pub frames: Vec<MultistreamFrame>,
}

impl Multistream {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Tokens per frame: one text token plus `2·levels` audio tokens.
    pub fn width(&self) -> usize {
        1 + 2 * self.levels
    }

    pub fn text_tokens(&self) -> Vec<u16> {
        self.frames.iter().map(|f| f.text).collect()
    }

    /// Split back into `(target_grid, source_grid, text tokens)`.
    pub fn split(&self) -> (TokenGrid, TokenGrid, Vec<u16>) {
        let t = self.frames.len();
        let q = self.levels;
        let mut target = Vec::with_capacity(t * q);
        let mut source = Vec::with_capacity(t * q);
        let mut text = Vec::with_capacity(t);
        for f in &self.frames {
            text.push(f.text);
            target.extend_from_slice(&f.target);
            source.extend_from_slice(&f.source);
        }
        (
            TokenGrid::new(t, q, target).expect("frames carry q tokens"),
            TokenGrid::new(t, q, source).expect("frames carry q tokens"),
            text,
        )
    }

    /// Writes the `MSF1` layout: magic, `u32` frames, `u32` levels, then per frame
    /// `1 + 2·levels` little-endian `u16` tokens.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_magic(w, MSF_MAGIC)?;
        write_u32(w, self.frames.len() as u32)?;
        write_u32(w, self.levels as u32)?;
        let flat: Vec<u16> = self.frames.iter().flat_map(|f| f.tokens()).collect();
        write_u16s(w, &flat)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        read_magic(r, MSF_MAGIC)?;
        let frames = read_u32(r)? as usize;
        let levels = read_u32(r)? as usize;
        if levels == 0 || levels > MAX_LEVELS || frames > 1 << 24 {
            return Err(Error::Format(format!("implausible multistream shape {frames}×{levels}")));
        }
        let width = 1 + 2 * levels;
        let flat = read_u16s(r, frames * width)?;
        let frames = flat
            .chunks_exact(width)
            .map(|c| MultistreamFrame {
                text: c[0],
                target: c[1..=levels].to_vec(),
                source: c[levels + 1..].to_vec(),
            })
            .collect();
        Ok(Self { levels, frames })
    }
}

/// Interleave already-delayed target and source grids with the text stream.
pub fn build_multistream(target: &TokenGrid, source: &TokenGrid, text: &InnerMonologuePlan) -> Result<Multistream> {
    if target.frames != source.frames {
        return Err(Error::LengthMismatch { what: "target/source frames", left: target.frames, right: source.frames });
    }
    if target.frames != text.tokens.len() {
        return Err(Error::LengthMismatch { what: "audio/text frames", left: target.frames, right: text.tokens.len() });
    }
    if target.levels != source.levels {
        return Err(Error::LengthMismatch { what: "target/source levels", left: target.levels, right: source.levels });
    }
    let frames = (0..target.frames)
        .map(|t| MultistreamFrame { text: text.tokens[t], target: target.row(t).to_vec(), source: source.row(t).to_vec() })
        .collect();
    Ok(Multistream { levels: target.levels, frames })
}

/// Per-frame text tokens: each word's tokens from its start frame, PAD elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InnerMonologuePlan {
    pub tokens: Vec<u16>,
}

impl InnerMonologuePlan {
    /// `(word token, frame)` for every word-start token, in order.
    pub fn word_starts(&self) -> Vec<(u16, usize)> {
        word_starts(&self.tokens)
    }

    pub fn eos_frame(&self) -> Option<usize> {
        self.tokens.iter().position(|&t| t == text::EOS)
    }
}

/// `(word token, frame)` for every word-start token of a text stream.
pub fn word_starts(tokens: &[u16]) -> Vec<(u16, usize)> {
    tokens.iter().enumerate().filter(|(_, t)| text::is_word(**t)).map(|(f, t)| (*t, f)).collect()
}

pub fn build_inner_monologue(words: &[(Vec<u16>, usize)], total_frames: usize) -> Result<InnerMonologuePlan> {
    let mut tokens = vec![text::PAD; total_frames];
    let mut next_free = 0usize;
    for (index, (word, start)) in words.iter().enumerate() {
        if index > 0 && *start < next_free {
            return Err(Error::WordsOverlap { index });
        }
        let end = start + word.len();
        if end > total_frames {
            return Err(Error::FrameOutOfRange { frame: end.saturating_sub(1), frames: total_frames });
        }
        tokens[*start..end].copy_from_slice(word);
        // an empty word still claims its start frame so starts stay strictly increasing
        next_free = end.max(start + 1);
    }
    Ok(InnerMonologuePlan { tokens })
}

/// Mark the end of the source utterance and of the output text.
///
/// Every source level at `source_end_frame` becomes `input_eos`; the text EOS
/// goes on the frame after the last non-PAD, non-EOS text token (frame 0 when
/// the plan has no words). Any earlier text EOS is cleared, so the operation
/// is idempotent.
pub fn insert_eos_markers(
    source: &TokenGrid,
    plan: &InnerMonologuePlan,
    source_end_frame: usize,
    input_eos: u16,
) -> Result<(TokenGrid, InnerMonologuePlan)> {
    if source_end_frame >= source.frames {
        return Err(Error::FrameOutOfRange { frame: source_end_frame, frames: source.frames });
    }
    let mut grid = source.clone();
    grid.row_mut(source_end_frame).fill(input_eos);

    let mut tokens: Vec<u16> =
        plan.tokens.iter().map(|&t| if t == text::EOS { text::PAD } else { t }).collect();
    let eos_frame = tokens.iter().rposition(|&t| t != text::PAD).map_or(0, |k| k + 1);
    if eos_frame >= tokens.len() {
        return Err(Error::FrameOutOfRange { frame: eos_frame, frames: tokens.len() });
    }
    tokens[eos_frame] = text::EOS;
    Ok((grid, InnerMonologuePlan { tokens }))
}

/// Fill every source frame after `source_end_frame` with `input_eos`, matching
/// the repeated-EOS feed used once a live session runs out of source.
pub fn fill_after_eos(source: &mut TokenGrid, source_end_frame: usize, input_eos: u16) {
    for t in source_end_frame + 1..source.frames {
        source.row_mut(t).fill(input_eos);
    }
}

/// Frame index for a time in seconds, never early: `floor(time · frame_rate)`.
pub fn time_to_frame(time_s: f64, frame_rate_hz: f64) -> usize {
    (time_s * frame_rate_hz + 1e-9).floor().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(frames: usize, levels: usize) -> TokenGrid {
        TokenGrid::new(frames, levels, (0..frames * levels).map(|i| i as u16 + 1).collect()).unwrap()
    }

    #[test]
    fn zero_delay_is_identity() {
        let g = grid(5, 3);
        assert_eq!(apply_acoustic_delay(&g, 0), g);
        assert_eq!(remove_acoustic_delay(&g, 0), g);
    }

    #[test]
    fn delay_shift_arithmetic() {
        // 1-based τ(A)_{3,2} = A_{1,2}; τ(A)_{1,2} = τ(A)_{2,2} = 0
        let g = grid(4, 3);
        let d = apply_acoustic_delay(&g, 2);
        assert_eq!(d.get(2, 1), g.get(0, 1));
        assert_eq!(d.get(0, 1), DELAY_TOKEN);
        assert_eq!(d.get(1, 1), DELAY_TOKEN);
        assert_eq!(d.get(3, 2), g.get(1, 2));
        for t in 0..4 {
            assert_eq!(d.get(t, 0), g.get(t, 0));
        }
        let back = remove_acoustic_delay(&d, 2);
        assert_eq!(back.row(0), g.row(0));
        assert_eq!(back.row(1), g.row(1));
        assert_eq!(back.get(2, 1), DELAY_TOKEN);
        assert_eq!(back.get(3, 0), g.get(3, 0));
    }

    #[test]
    fn single_frame_multistream() {
        let g = grid(1, 2);
        let plan = InnerMonologuePlan { tokens: vec![7] };
        let ms = build_multistream(&g, &g, &plan).unwrap();
        assert_eq!(ms.width(), 5);
        assert_eq!(ms.frames[0].tokens().collect::<Vec<_>>(), vec![7, 1, 2, 1, 2]);
        let (t, s, text) = ms.split();
        assert_eq!((t, s, text), (g.clone(), g, vec![7]));
    }

    #[test]
    fn multistream_length_mismatch() {
        let plan = InnerMonologuePlan { tokens: vec![0; 3] };
        assert!(build_multistream(&grid(3, 2), &grid(4, 2), &plan).is_err());
        assert!(build_multistream(&grid(3, 2), &grid(3, 2), &InnerMonologuePlan { tokens: vec![0; 2] }).is_err());
    }

    #[test]
    fn msf_layout() {
        let g = grid(2, 1);
        let ms = build_multistream(&g, &g, &InnerMonologuePlan { tokens: vec![5, 6] }).unwrap();
        let mut buf = Vec::new();
        ms.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MSF1");
        assert_eq!(buf.len(), 12 + 2 * 3 * 2);
        assert_eq!(&buf[12..18], &[5, 0, 1, 0, 1, 0]);
        assert_eq!(Multistream::read_from(&mut buf.as_slice()).unwrap(), ms);
    }

    #[test]
    fn monologue_examples() {
        assert_eq!(build_inner_monologue(&[], 4).unwrap().tokens, vec![text::PAD; 4]);
        let plan = build_inner_monologue(&[(vec![10, 11], 3)], 6).unwrap();
        assert_eq!(plan.tokens, vec![0, 0, 0, 10, 11, 0]);
        let err = build_inner_monologue(&[(vec![10, 11], 1), (vec![12], 2)], 6).unwrap_err();
        assert!(err.to_string().contains("words overlap"));
        assert!(build_inner_monologue(&[(vec![10, 11], 5)], 6).is_err());
    }

    #[test]
    fn eos_markers() {
        let src = grid(6, 2);
        let plan = build_inner_monologue(&[(vec![10], 1), (vec![11, 3], 3)], 6).unwrap();
        let (g, p) = insert_eos_markers(&src, &plan, 5, 99).unwrap();
        assert_eq!(g.row(5), &[99, 99]);
        assert_eq!(&g.tokens[..10], &src.tokens[..10]);
        assert_eq!(p.tokens, vec![0, 10, 0, 11, 3, text::EOS]);
        let (g2, p2) = insert_eos_markers(&g, &p, 5, 99).unwrap();
        assert_eq!((g2, p2), (g, p));
        assert!(insert_eos_markers(&src, &plan, 6, 99).is_err());
    }

    #[test]
    fn eos_on_last_source_frame_only() {
        let src = grid(4, 2);
        let plan = InnerMonologuePlan { tokens: vec![0; 4] };
        let (g, p) = insert_eos_markers(&src, &plan, 3, 50).unwrap();
        assert_eq!(&g.tokens[..6], &src.tokens[..6]);
        assert_eq!(g.row(3), &[50, 50]);
        assert_eq!(p.eos_frame(), Some(0));
    }

    #[test]
    fn eos_needs_room() {
        let plan = build_inner_monologue(&[(vec![10], 2)], 3).unwrap();
        assert!(insert_eos_markers(&grid(3, 1), &plan, 0, 9).is_err());
    }

    #[test]
    fn time_to_frame_is_floor() {
        assert_eq!(time_to_frame(2.0, 12.5), 25);
        assert_eq!(time_to_frame(0.48, 12.5), 6);
        assert_eq!(time_to_frame(0.079, 12.5), 0);
    }
}
