use rayon::prelude::*;

use super::{switch_generate, EngineError, GenerationRecord};
use crate::domain::{CandidatePool, GenerationConfig, Query};
use crate::rng::SeedStream;
use crate::switcher::SwitchPolicy;

fn worker_pool(concurrency: usize) -> Result<rayon::ThreadPool, EngineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| {
            EngineError::Config(crate::domain::ConfigError::Invalid(format!(
                "thread pool: {e}"
            )))
        })
}

/// Runs every query and returns records in input order. Each query draws
/// from its own stream `(config.seed, query.id)`, so the output does not
/// depend on `concurrency`.
pub fn batch_generate(
    queries: &[Query],
    pool: &CandidatePool,
    policy: &dyn SwitchPolicy,
    config: &GenerationConfig,
    concurrency: usize,
) -> Result<Vec<GenerationRecord>, EngineError> {
    let mut out = Vec::with_capacity(queries.len());
    batch_generate_each(queries, pool, policy, config, concurrency, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

/// Streaming form of [`batch_generate`]: records are handed to `emit` in
/// input order, a chunk of `concurrency` queries at a time.
pub fn batch_generate_each<F>(
    queries: &[Query],
    pool: &CandidatePool,
    policy: &dyn SwitchPolicy,
    config: &GenerationConfig,
    concurrency: usize,
    mut emit: F,
) -> Result<(), EngineError>
where
    F: FnMut(GenerationRecord) -> Result<(), EngineError>,
{
    config.validate()?;
    for q in queries {
        q.validate()?;
    }
    if queries.is_empty() {
        return Ok(());
    }
    let workers = worker_pool(concurrency)?;
    let chunk = concurrency.max(1);
    for group in queries.chunks(chunk) {
        let records: Vec<Result<GenerationRecord, EngineError>> = workers.install(|| {
            group
                .par_iter()
                .map(|q| {
                    switch_generate(
                        q,
                        pool,
                        policy,
                        config,
                        &SeedStream::for_query(config.seed, &q.id),
                    )
                })
                .collect()
        });
        for r in records {
            emit(r?)?;
        }
    }
    Ok(())
}
