//! Multistream simultaneous translation at desk scale.
//!
//! The crate bundles the pieces needed to build, train and run a small
//! streaming translation model over discrete audio tokens:
//!
//! - [`codec`]: framing of a 1-D signal into latents and residual vector quantization.
//! - [`streams`]: acoustic delay, multistream frames, inner-monologue text, EOS markers.
//! - [`model`]: Temporal + Depth transformer, its autodiff training loop and checkpoints.
//! - [`align`]: contextual word alignment from a conditional scorer.
//! - [`pipeline`]: time-domain lags, spike smoothing, silence insertion, padding penalty.
//! - [`inference`]: sampling, classifier-free guidance, streaming and batched sessions.
//! - [`metrics`]: BLEU, LAAL, End Offset, cosine similarity, quantile labels.
//! - [`synth`]: planted-ground-truth corpora under several lag regimes.
//! - [`config`] / [`cli`]: JSON run configuration and the command-line pipelines.

pub mod align;
pub mod cli;
pub mod codec;
pub mod config;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod streams;
pub mod synth;

pub use error::{Error, Result};
pub use model::ConditionLabel;
