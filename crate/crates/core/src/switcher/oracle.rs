use std::sync::Arc;

use super::{SwitchContext, SwitchDistribution, SwitchError, SwitchPolicy};
use crate::domain::Trace;
use crate::engine::{forced_choice, generate_patch};
use crate::eval::ResponseScorer;

/// Look-ahead policy that puts all mass on the model whose best reachable
/// completion scores highest.
///
/// It replays the engine's own patch requests, so it is exact only when
/// every backend is deterministic. Cost grows as `n^depth`; intended for
/// small enumerable environments and tests.
pub struct OraclePolicy {
    scorer: Arc<dyn ResponseScorer>,
}

impl OraclePolicy {
    pub fn new(scorer: Arc<dyn ResponseScorer>) -> Self {
        Self { scorer }
    }

    /// Best score reachable from `trace` following the engine's rules.
    fn best_value(
        &self,
        ctx: &SwitchContext<'_>,
        trace: &Trace,
        finished: bool,
    ) -> Result<f64, SwitchError> {
        let remaining = ctx
            .config
            .budget_for(ctx.query)
            .saturating_sub(trace.total_tokens());
        if finished || remaining == 0 {
            return self
                .scorer
                .score(&trace.text(), &ctx.query.gold)
                .map_err(|e| SwitchError::Oracle(e.to_string()));
        }
        let candidates: Vec<usize> =
            match forced_choice(ctx.pool, ctx.config, trace.len(), remaining) {
                Some(m) => vec![m],
                None => (0..ctx.pool.len()).collect(),
            };
        let mut best = f64::NEG_INFINITY;
        for m in candidates {
            best = best.max(self.value_of_choice(ctx, trace, m)?);
        }
        Ok(best)
    }

    fn value_of_choice(
        &self,
        ctx: &SwitchContext<'_>,
        trace: &Trace,
        model: usize,
    ) -> Result<f64, SwitchError> {
        let outcome = generate_patch(ctx.query, ctx.pool, ctx.config, trace, model, ctx.stream)?;
        if outcome.is_empty() {
            return self.best_value(ctx, trace, true);
        }
        let next = trace.extended(outcome.segment);
        self.best_value(ctx, &next, outcome.finished)
    }
}

impl SwitchPolicy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn distribution(&self, ctx: &SwitchContext<'_>) -> Result<SwitchDistribution, SwitchError> {
        let n = ctx.pool.len();
        let mut best = (0, f64::NEG_INFINITY);
        for m in 0..n {
            let v = self.value_of_choice(ctx, ctx.trace, m)?;
            if v > best.1 {
                best = (m, v);
            }
        }
        SwitchDistribution::one_hot(n, best.0)
    }
}
