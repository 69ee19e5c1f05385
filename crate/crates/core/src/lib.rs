//! Patch-level collaborative decoding across a pool of language-model
//! checkpoints.
//!
//! A response is written in fixed-size patches. Before each patch a
//! switching policy picks which pool member writes it; the chosen model
//! continues from the plain concatenation of everything written so far.
//! The crate also builds training data for a learned switcher from random
//! rollouts, scores responses and analyses which model sequences help.

pub mod analysis;
pub mod backends;
pub mod cli;
pub mod datagen;
pub mod domain;
pub mod engine;
pub mod eval;
pub mod jsonl;
pub mod rng;
pub mod switcher;

pub use backends::{Backend, BackendError, GenerationRequest, GenerationResult};
pub use domain::{CandidatePool, GenerationConfig, Query, Segment, Trace};
pub use engine::{batch_generate, switch_generate, GenerationRecord};
pub use rng::SeedStream;
pub use switcher::{SwitchDecision, SwitchDistribution, SwitchPolicy};
