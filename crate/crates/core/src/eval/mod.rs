//! Task scorers, the evaluation harness and relative-performance metrics.

mod scorers;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use scorers::{
    last_choice_letter, last_number, normalize_answer, FnScorer, ResponseScorer, Scorer, ScorerSpec,
};

use crate::engine::GenerationRecord;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("malformed gold: {0}")]
    MalformedGold(String),
    #[error("external judge failed: {0}")]
    External(String),
    #[error("judge returned a non-finite score")]
    NonFinite,
    #[error("scorer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no gold answer for query id(s): {}", .0.join(", "))]
    MissingGold(Vec<String>),
    #[error("scoring query '{query_id}' failed: {source}")]
    Score {
        query_id: String,
        #[source]
        source: ScoreError,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: best individual score {0} is not positive")]
    Undefined(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: String,
    pub score: f64,
    pub failed: bool,
}

/// Aggregate over one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub mean_score: f64,
    pub n: usize,
    /// Records whose generation aborted; they are scored 0 and counted.
    pub failed: usize,
    pub per_query: Vec<QueryScore>,
}

/// Scores each record against its gold, stores the score on the record
/// and returns the aggregate. Failed generations score 0.
pub fn evaluate(
    task: &str,
    records: &mut [GenerationRecord],
    scorer: &dyn ResponseScorer,
    golds: &HashMap<String, Value>,
) -> Result<TaskResult, EvalError> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !golds.contains_key(&r.query_id))
        .map(|r| r.query_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingGold(missing));
    }

    let scores: Vec<Result<f64, EvalError>> = records
        .par_iter()
        .map(|r| {
            if r.failed() {
                return Ok(0.0);
            }
            scorer
                .score(&r.final_text, &golds[&r.query_id])
                .map_err(|source| EvalError::Score {
                    query_id: r.query_id.clone(),
                    source,
                })
        })
        .collect();

    let mut per_query = Vec::with_capacity(records.len());
    for (r, s) in records.iter_mut().zip(scores) {
        let s = s?;
        r.score = Some(s);
        per_query.push(QueryScore {
            query_id: r.query_id.clone(),
            score: s,
            failed: r.failed(),
        });
    }
    let n = per_query.len();
    let mean_score = if n == 0 {
        0.0
    } else {
        per_query.iter().map(|q| q.score).sum::<f64>() / n as f64
    };
    Ok(TaskResult {
        task: task.to_owned(),
        mean_score,
        n,
        failed: per_query.iter().filter(|q| q.failed).count(),
        per_query,
    })
}

fn best_of(p: f64, f: f64, a: f64) -> Result<f64, MetricError> {
    let best = p.max(f).max(a);
    if best > 0.0 {
        Ok(best)
    } else {
        Err(MetricError::Undefined(best))
    }
}

/// Pretrained model's score relative to the best individual model:
/// `(P - max(P, F, A)) / max(P, F, A)`.
pub fn p_performance(pretrained: f64, finetuned: f64, aligned: f64) -> Result<f64, MetricError> {
    let best = best_of(pretrained, finetuned, aligned)?;
    Ok((pretrained - best) / best)
}

/// Collaboration's gain over the best individual model:
/// `(C - max(P, F, A)) / max(P, F, A)`.
pub fn p_helpfulness(
    pretrained: f64,
    finetuned: f64,
    aligned: f64,
    collaboration: f64,
) -> Result<f64, MetricError> {
    let best = best_of(pretrained, finetuned, aligned)?;
    Ok((collaboration - best) / best)
}
