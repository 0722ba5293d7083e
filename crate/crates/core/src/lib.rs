//! Desk-scale reinforcement learning for creative storytelling.
//!
//! The crate trains two m-gram policies end to end:
//!
//! 1. a generative reward model ([`genrm`]) that reads a story context and
//!    two candidate continuations, emits reasoning tokens, a separator and a
//!    verdict; it is trained by supervised fine-tuning on consistency-filtered
//!    demonstrations and then by group-relative policy optimization with
//!    entropy-based reward shaping;
//! 2. a story policy ([`story`]) trained with group-relative policy
//!    optimization, where the frozen reward model converts pairwise
//!    judgments into pointwise rewards through a random pivot.
//!
//! Data construction with simulated judges lives in [`preference`]; the
//! command-line harness and experiment drivers live in [`harness`].

pub mod config;
pub mod error;
pub mod genrm;
pub mod grpo;
pub mod harness;
pub mod pipeline;
pub mod policy;
pub mod preference;
pub mod sft;
pub mod shaping;
pub mod story;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha8 stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
