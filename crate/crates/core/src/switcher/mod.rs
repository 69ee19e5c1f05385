//! Switching policies: given the query, the trace so far and the pool,
//! produce a distribution over which model writes the next patch. The
//! engine then draws from it with [`select_top_p`].

mod nucleus;
mod oracle;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use nucleus::{nucleus, select_top_p, SwitchDecision, SwitchDistribution, SUM_TOLERANCE};
pub use oracle::OraclePolicy;

use crate::backends::{self, Backend, BackendError};
use crate::domain::{
    render_switcher_prompt, CandidatePool, CodecError, GenerationConfig, Query, Trace,
};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SwitchError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("fixed sequence entry {entry} is not a model index for a pool of {n}")]
    FixedSequence { entry: usize, n: usize },
    #[error("oracle search failed: {0}")]
    Oracle(String),
}

/// Everything a policy may look at when asked for the next model.
#[derive(Clone, Copy)]
pub struct SwitchContext<'a> {
    pub query: &'a Query,
    pub trace: &'a Trace,
    pub pool: &'a CandidatePool,
    pub config: &'a GenerationConfig,
    /// Per-query seed stream of the generation being decided.
    pub stream: &'a SeedStream,
}

impl SwitchContext<'_> {
    /// Position of the patch about to be generated.
    pub fn patch_index(&self) -> usize {
        self.trace.len()
    }
}

pub trait SwitchPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError>;
}

/// Reads a fine-tuned switcher LM: renders the switcher prompt, takes the
/// scores of the digit labels and applies a softmax over those labels only.
pub struct LmPolicy {
    backend: Arc<dyn Backend>,
}

impl LmPolicy {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend }
    }
}

impl SwitchPolicy for LmPolicy {
    fn name(&self) -> &str {
        "lm"
    }

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError> {
        let n = ctx.pool.len();
        let prompt = render_switcher_prompt(ctx.query, ctx.trace, n)?;
        let scores = backends::next_label_logits(self.backend.as_ref(), &prompt, n)?;
        SwitchDistribution::from_logits(&scores)
    }
}

/// Uniform switching over the pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl SwitchPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError> {
        SwitchDistribution::uniform(ctx.pool.len())
    }
}

/// Plays a fixed model sequence by patch position, cycling when exhausted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedSequencePolicy {
    sequence: Vec<usize>,
}

impl FixedSequencePolicy {
    pub fn new(sequence: Vec<usize>) -> Result<Self, SwitchError> {
        if sequence.is_empty() {
            return Err(SwitchError::InvalidDistribution(
                "empty fixed sequence".into(),
            ));
        }
        Ok(Self { sequence })
    }

    /// Parses digit strings such as `"012"`.
    pub fn parse(digits: &str) -> Result<Self, SwitchError> {
        let sequence = digits
            .chars()
            .map(|c| {
                c.to_digit(10).map(|d| d as usize).ok_or_else(|| {
                    SwitchError::InvalidDistribution(format!(
                        "'{c}' in fixed sequence is not a digit"
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(sequence)
    }

    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    pub fn at(&self, patch_index: usize) -> usize {
        self.sequence[patch_index % self.sequence.len()]
    }
}

impl SwitchPolicy for FixedSequencePolicy {
    fn name(&self) -> &str {
        "fixed"
    }

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError> {
        let n = ctx.pool.len();
        let entry = self.at(ctx.patch_index());
        if entry >= n {
            return Err(SwitchError::FixedSequence { entry, n });
        }
        SwitchDistribution::one_hot(n, entry)
    }
}

/// Enumerates switching paths: continuation `path` picks, at its `d`-th
/// decision, digit `d` of `path` written in base `n` (least significant
/// first). Running paths `0..n^D` visits every `D`-step path exactly once,
/// and paths shorter than `D` are each repeated `n^(D-d)` times, so a plain
/// mean over the runs equals the uniform expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratifiedPolicy {
    path: u64,
    start_patch: usize,
}

impl StratifiedPolicy {
    pub fn new(path: u64, start_patch: usize) -> Self {
        Self { path, start_patch }
    }
}

impl SwitchPolicy for StratifiedPolicy {
    fn name(&self) -> &str {
        "stratified"
    }

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError> {
        let n = ctx.pool.len() as u64;
        let depth = ctx.patch_index().saturating_sub(self.start_patch) as u32;
        let digit = n
            .checked_pow(depth)
            .map_or(0, |scale| (self.path / scale) % n);
        SwitchDistribution::one_hot(n as usize, digit as usize)
    }
}

/// Policy declaration as written in a run config.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// A switcher LM exposed as a pool-independent backend.
    Lm {
        backend: String,
    },
    #[default]
    Random,
    Fixed {
        sequence: String,
    },
    /// Exhaustive look-ahead; only meaningful with deterministic backends.
    Oracle,
}
