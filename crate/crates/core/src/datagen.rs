//! Switcher training data from rollouts.
//!
//! For one query: sample a partial response with uniform random switching,
//! capped at a random fraction of the token budget; let every candidate
//! write one more patch; complete each branch `k` times with random
//! switching; score the completions; label the instance with the candidate
//! whose mean score is highest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    render_switcher_prompt, CandidatePool, CodecError, GenerationConfig, Query, Trace,
};
use crate::engine::{generate_patch, run_from};
use crate::eval::ResponseScorer;
use crate::jsonl::{self, JsonlError};
use crate::rng::SeedStream;
use crate::switcher::{RandomPolicy, StratifiedPolicy, SwitchPolicy};

pub const DEFAULT_K: usize = 32;
pub const DEFAULT_INSTANCES_PER_TASK: usize = 10_000;

/// How rollout continuations pick models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSampling {
    /// Independent uniform draws per continuation.
    #[default]
    Random,
    /// Continuation `j` follows path `j` in base-`n` digits; with
    /// `k = n^depth` this enumerates every path exactly once.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub k: usize,
    pub instances_per_task: usize,
    pub cap_min: f64,
    pub cap_max: f64,
    pub sampling: RolloutSampling,
    /// Apply first/last-patch forcing while sampling traces and rollouts.
    pub force_final_first_last: bool,
    /// Abort once discards exceed this fraction of attempts.
    pub max_discard_rate: f64,
    /// Attempts to make before the discard rate is checked.
    pub min_attempts_before_abort: usize,
    /// Instances assembled in parallel.
    pub concurrency: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            instances_per_task: DEFAULT_INSTANCES_PER_TASK,
            cap_min: 0.1,
            cap_max: 0.9,
            sampling: RolloutSampling::Random,
            force_final_first_last: false,
            max_discard_rate: 0.5,
            min_attempts_before_abort: 20,
            concurrency: 8,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.k == 0 {
            return Err(DatagenError::Config("k must be >= 1".into()));
        }
        if !(0.0 <= self.cap_min && self.cap_min <= self.cap_max && self.cap_max <= 1.0) {
            return Err(DatagenError::Config(format!(
                "cap range [{}, {}] must lie within [0, 1]",
                self.cap_min, self.cap_max
            )));
        }
        if !(0.0..=1.0).contains(&self.max_discard_rate) {
            return Err(DatagenError::Config(
                "max_discard_rate must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("datagen configuration: {0}")]
    Config(String),
    #[error("instance discarded ({0})")]
    Discarded(DiscardReason),
    #[error("utility {0} is not finite")]
    InvalidInstance(f64),
    #[error("no queries supplied")]
    NoQueries,
    #[error(
        "aborting: {discards} of {attempts} attempts discarded ({reasons}); the environment looks unsuitable"
    )]
    DiscardRate {
        attempts: usize,
        discards: usize,
        reasons: String,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// The sampled response ended before the cap; no next decision exists.
    FinishedBeforeCap,
    /// The sampled trace used the whole budget.
    BudgetExhausted,
    TraceBackendFailure,
    BranchBackendFailure,
    RolloutBackendFailure,
}

impl std::fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DiscardReason::FinishedBeforeCap => "finished_before_cap",
            DiscardReason::BudgetExhausted => "budget_exhausted",
            DiscardReason::TraceBackendFailure => "trace_backend_failure",
            DiscardReason::BranchBackendFailure => "branch_backend_failure",
            DiscardReason::RolloutBackendFailure => "rollout_backend_failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrace {
    pub trace: Trace,
    pub cap_fraction: f64,
    /// A backend ended the response while sampling.
    pub finished: bool,
}

/// One switcher training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftInstance {
    /// Rendered switcher prompt, ending in `"The answer is model "`.
    pub prompt: String,
    /// The label digit.
    pub completion: String,
    pub query_id: String,
    #[serde(default)]
    pub task: String,
    pub label: usize,
    pub utilities: Vec<f64>,
    /// Per-candidate continuation scores, `k` each.
    pub scores: Vec<Vec<f64>>,
    pub k: usize,
    pub cap_fraction: f64,
    pub trace: Trace,
}

/// Counts and diagnostics written next to a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<String>,
    pub target: usize,
    pub written: usize,
    pub attempts: usize,
    pub discards: BTreeMap<String, usize>,
    pub label_histogram: Vec<usize>,
    /// Continuations whose scorer call failed and were scored 0.
    pub scorer_errors: usize,
    pub pool_size: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftDataset {
    pub instances: Vec<SftInstance>,
    pub manifest: DatasetManifest,
}

/// Path of the manifest that accompanies `dataset`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

impl SftDataset {
    /// Writes the JSONL dataset and its manifest.
    pub fn write(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write_jsonl(path, &self.instances)?;
        write_manifest(&manifest_path(path), &self.manifest)
    }
}

fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), JsonlError> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n").map_err(|source| JsonlError::Io {
        path: path.to_owned(),
        source,
    })
}

fn sampling_config(config: &GenerationConfig, force: bool) -> GenerationConfig {
    GenerationConfig {
        top_p: 1.0,
        force_final_first_last: force,
        ..config.clone()
    }
}

/// Runs uniform random switching until the trace holds at least
/// `cap_fraction × budget` tokens, checked at patch boundaries.
pub fn trace_with_cap(
    query: &Query,
    pool: &CandidatePool,
    config: &GenerationConfig,
    cap_fraction: f64,
    force_final_first_last: bool,
    stream: &SeedStream,
) -> Result<SampledTrace, DatagenError> {
    let cfg = sampling_config(config, force_final_first_last);
    let cap_tokens = cap_fraction * cfg.budget_for(query) as f64;
    let stop = move |t: &Trace| t.total_tokens() as f64 >= cap_tokens;
    let (trace, _, finished, failure) = run_from(
        query,
        pool,
        &RandomPolicy,
        &cfg,
        &stream.child("trace", 0),
        Trace::new(),
        &stop,
    );
    if let Some(f) = failure {
        tracing::warn!(query = %query.id, failure = %f, "trace sampling failed");
        return Err(DatagenError::Discarded(DiscardReason::TraceBackendFailure));
    }
    Ok(SampledTrace {
        trace,
        cap_fraction,
        finished,
    })
}

/// Draws a cap fraction uniformly from the configured range and samples a
/// trace up to it.
pub fn sample_random_trace(
    query: &Query,
    pool: &CandidatePool,
    config: &GenerationConfig,
    datagen: &DatagenConfig,
    stream: &SeedStream,
) -> Result<SampledTrace, DatagenError> {
    let mut rng = stream.child("cap", 0).rng();
    let cap = if datagen.cap_max > datagen.cap_min {
        rng.gen_range(datagen.cap_min..=datagen.cap_max)
    } else {
        datagen.cap_min
    };
    trace_with_cap(
        query,
        pool,
        config,
        cap,
        datagen.force_final_first_last,
        stream,
    )
}

/// A trace extended by one candidate's patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub trace: Trace,
    pub finished: bool,
}

/// Lets every candidate continue `trace` by one patch.
pub fn divergent_step(
    query: &Query,
    trace: &Trace,
    pool: &CandidatePool,
    config: &GenerationConfig,
    stream: &SeedStream,
) -> Result<Vec<Branch>, DatagenError> {
    (0..pool.len())
        .map(|i| {
            let outcome = generate_patch(
                query,
                pool,
                config,
                trace,
                i,
                &stream.child("branch", i as u64),
            )
            .map_err(|e| {
                tracing::warn!(query = %query.id, model = i, error = %e, "divergent step failed");
                DatagenError::Discarded(DiscardReason::BranchBackendFailure)
            })?;
            let finished = outcome.finished;
            let trace = if outcome.is_empty() {
                trace.clone()
            } else {
                trace.extended(outcome.segment)
            };
            Ok(Branch { trace, finished })
        })
        .collect()
}

/// Mean score over `k` continuations, with the individual scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Utility {
    pub mean: f64,
    pub scores: Vec<f64>,
    pub scorer_errors: usize,
}

/// Completes `branch` `k` times and averages the scores of the full
/// responses. Scorer failures count as 0 and are tallied.
#[allow(clippy::too_many_arguments)]
pub fn rollout_utility(
    query: &Query,
    branch: &Branch,
    pool: &CandidatePool,
    k: usize,
    scorer: &dyn ResponseScorer,
    config: &GenerationConfig,
    datagen: &DatagenConfig,
    stream: &SeedStream,
) -> Result<Utility, DatagenError> {
    if k == 0 {
        return Err(DatagenError::Config("k must be >= 1".into()));
    }
    let cfg = sampling_config(config, datagen.force_final_first_last);
    let start = branch.trace.len();
    let outcomes: Vec<Result<(f64, bool), DatagenError>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let text = if branch.finished {
                branch.trace.text()
            } else {
                let stratified;
                let policy: &dyn SwitchPolicy = match datagen.sampling {
                    RolloutSampling::Random => &RandomPolicy,
                    RolloutSampling::Stratified => {
                        stratified = StratifiedPolicy::new(j as u64, start);
                        &stratified
                    }
                };
                let (trace, _, _, failure) = run_from(
                    query,
                    pool,
                    policy,
                    &cfg,
                    &stream.child("rollout", j as u64),
                    branch.trace.clone(),
                    &|_| false,
                );
                if let Some(f) = failure {
                    tracing::warn!(query = %query.id, rollout = j, failure = %f, "rollout failed");
                    return Err(DatagenError::Discarded(
                        DiscardReason::RolloutBackendFailure,
                    ));
                }
                trace.text()
            };
            Ok(match scorer.score(&text, &query.gold) {
                Ok(s) if s.is_finite() => (s, false),
                Ok(_) | Err(_) => (0.0, true),
            })
        })
        .collect();

    let mut scores = Vec::with_capacity(k);
    let mut scorer_errors = 0;
    for o in outcomes {
        let (s, failed) = o?;
        scores.push(s);
        scorer_errors += usize::from(failed);
    }
    let mean = scores.iter().sum::<f64>() / k as f64;
    Ok(Utility {
        mean,
        scores,
        scorer_errors,
    })
}

/// Lowest index attaining the maximum utility.
pub fn label_instance(utilities: &[f64]) -> Result<usize, DatagenError> {
    if utilities.is_empty() {
        return Err(DatagenError::Config("no utilities".into()));
    }
    if let Some(&u) = utilities.iter().find(|u| !u.is_finite()) {
        return Err(DatagenError::InvalidInstance(u));
    }
    let mut best = 0;
    for (i, &u) in utilities.iter().enumerate() {
        if u > utilities[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Builds one instance for `query`, or reports why it was discarded.
pub fn build_instance(
    query: &Query,
    pool: &CandidatePool,
    scorer: &dyn ResponseScorer,
    config: &GenerationConfig,
    datagen: &DatagenConfig,
    stream: &SeedStream,
) -> Result<(SftInstance, usize), DatagenError> {
    let sampled = sample_random_trace(query, pool, config, datagen, stream)?;
    instance_from_trace(query, pool, scorer, config, datagen, stream, sampled)
}

/// Diverge, roll out and label from an already sampled trace. Returns the
/// instance and the number of scorer errors met.
pub fn instance_from_trace(
    query: &Query,
    pool: &CandidatePool,
    scorer: &dyn ResponseScorer,
    config: &GenerationConfig,
    datagen: &DatagenConfig,
    stream: &SeedStream,
    sampled: SampledTrace,
) -> Result<(SftInstance, usize), DatagenError> {
    if sampled.finished {
        return Err(DatagenError::Discarded(DiscardReason::FinishedBeforeCap));
    }
    if sampled.trace.total_tokens() >= config.budget_for(query) {
        return Err(DatagenError::Discarded(DiscardReason::BudgetExhausted));
    }
    let rollout_cfg = sampling_config(config, datagen.force_final_first_last);
    let branches = divergent_step(query, &sampled.trace, pool, &rollout_cfg, stream)?;
    let mut utilities = Vec::with_capacity(pool.len());
    let mut scores = Vec::with_capacity(pool.len());
    let mut scorer_errors = 0;
    for (i, branch) in branches.iter().enumerate() {
        let u = rollout_utility(
            query,
            branch,
            pool,
            datagen.k,
            scorer,
            config,
            datagen,
            &stream.child("candidate", i as u64),
        )?;
        utilities.push(u.mean);
        scorer_errors += u.scorer_errors;
        scores.push(u.scores);
    }
    let label = label_instance(&utilities)?;
    let prompt = render_switcher_prompt(query, &sampled.trace, pool.len())?;
    Ok((
        SftInstance {
            prompt,
            completion: label.to_string(),
            query_id: query.id.clone(),
            task: query.task.clone(),
            label,
            utilities,
            scores,
            k: datagen.k,
            cap_fraction: sampled.cap_fraction,
            trace: sampled.trace,
        },
        scorer_errors,
    ))
}

/// Collects `datagen.instances_per_task` instances, cycling over `queries`.
///
/// Attempt `m` uses query `m mod |queries|` and its own seed stream, so the
/// dataset is a deterministic function of the seed. Attempts are assembled
/// in parallel batches but accepted strictly in attempt order.
pub fn collect_sft_dataset(
    queries: &[Query],
    pool: &CandidatePool,
    scorer: &dyn ResponseScorer,
    config: &GenerationConfig,
    datagen: &DatagenConfig,
) -> Result<SftDataset, DatagenError> {
    datagen.validate()?;
    config
        .validate()
        .map_err(|e| DatagenError::Config(e.to_string()))?;
    if queries.is_empty() {
        return Err(DatagenError::NoQueries);
    }
    let target = datagen.instances_per_task;
    let mut tasks: Vec<String> = queries.iter().map(|q| q.task.clone()).collect();
    tasks.sort();
    tasks.dedup();
    let mut manifest = DatasetManifest {
        tasks,
        target,
        label_histogram: vec![0; pool.len()],
        pool_size: pool.len(),
        k: datagen.k,
        seed: config.seed,
        ..DatasetManifest::default()
    };
    let mut instances = Vec::with_capacity(target);
    let chunk = datagen.concurrency.max(1);
    let mut next_attempt = 0usize;

    while instances.len() < target {
        let batch: Vec<_> = (next_attempt..next_attempt + chunk)
            .into_par_iter()
            .map(|m| {
                let q = &queries[m % queries.len()];
                let stream = SeedStream::for_query(config.seed, &q.id).child("attempt", m as u64);
                build_instance(q, pool, scorer, config, datagen, &stream)
            })
            .collect();
        next_attempt += chunk;

        for result in batch {
            if instances.len() == target {
                break;
            }
            manifest.attempts += 1;
            match result {
                Ok((inst, errs)) => {
                    manifest.label_histogram[inst.label] += 1;
                    manifest.scorer_errors += errs;
                    instances.push(inst);
                }
                Err(DatagenError::Discarded(reason)) => {
                    *manifest.discards.entry(reason.to_string()).or_default() += 1;
                }
                Err(e) => return Err(e),
            }
            let discards: usize = manifest.discards.values().sum();
            if manifest.attempts >= datagen.min_attempts_before_abort
                && discards as f64 > datagen.max_discard_rate * manifest.attempts as f64
            {
                let reasons = manifest
                    .discards
                    .iter()
                    .map(|(k, v)| format!("{k}: {v}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(DatagenError::DiscardRate {
                    attempts: manifest.attempts,
                    discards,
                    reasons,
                });
            }
        }
        tracing::info!(
            written = instances.len(),
            target,
            attempts = manifest.attempts,
            "collecting"
        );
    }
    manifest.written = instances.len();
    Ok(SftDataset {
        instances,
        manifest,
    })
}

/// Concatenates per-task datasets into one file (optionally shuffled with
/// a seed) and writes a combined manifest.
pub fn merge_datasets(
    inputs: &[PathBuf],
    output: &Path,
    shuffle_seed: Option<u64>,
) -> Result<DatasetManifest, JsonlError> {
    let mut all: Vec<SftInstance> = Vec::new();
    let mut merged = DatasetManifest::default();
    for path in inputs {
        let part: Vec<SftInstance> = jsonl::read_jsonl(path)?;
        let mpath = manifest_path(path);
        if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|source| JsonlError::Io {
                path: mpath.clone(),
                source,
            })?;
            let m: DatasetManifest = serde_json::from_str(&text)?;
            merged.target += m.target;
            merged.attempts += m.attempts;
            merged.scorer_errors += m.scorer_errors;
            for (k, v) in m.discards {
                *merged.discards.entry(k).or_default() += v;
            }
            merged.k = m.k;
            merged.seed = m.seed;
        }
        for inst in &part {
            if merged.label_histogram.len() <= inst.label {
                merged.label_histogram.resize(inst.label + 1, 0);
            }
            merged.label_histogram[inst.label] += 1;
            merged.pool_size = merged.pool_size.max(inst.utilities.len());
            if !merged.tasks.contains(&inst.task) {
                merged.tasks.push(inst.task.clone());
            }
        }
        all.extend(part);
    }
    if merged.label_histogram.len() < merged.pool_size {
        merged.label_histogram.resize(merged.pool_size, 0);
    }
    merged.tasks.sort();
    if let Some(seed) = shuffle_seed {
        use rand::seq::SliceRandom;
        all.shuffle(&mut SeedStream::from_seed(seed).child("merge", 0).rng());
    }
    merged.written = all.len();
    jsonl::write_jsonl(output, &all)?;
    write_manifest(&manifest_path(output), &merged)?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::{Backend, MockEmission, MockSkillBackend, Pattern};
    use crate::eval::{FnScorer, ScoreError};
    use proptest::prelude::*;

    fn filler_pool(n: usize, tokens: usize) -> CandidatePool {
        CandidatePool::from_backends(
            (0..n).map(|i| {
                (
                    format!("m{i}"),
                    Arc::new(
                        MockSkillBackend::new(format!("m{i}"))
                            .default_emission(MockEmission::text(format!("<{i}>"), tokens)),
                    ) as Arc<dyn Backend>,
                )
            }),
            n - 1,
        )
        .unwrap()
    }

    #[test]
    fn cap_stopping_rule_arithmetic() {
        let pool = filler_pool(3, 50);
        let q = Query::new("q", "Q");
        let cfg = GenerationConfig::default();
        let s = SeedStream::from_seed(1);
        // 0.1 × 512 = 51.2: one 50-token patch is short of it, so two patches.
        let t = trace_with_cap(&q, &pool, &cfg, 0.1, false, &s).unwrap();
        assert_eq!(t.trace.len(), 2);
        assert_eq!(t.trace.total_tokens(), 100);
        // 0.9 × 512 = 460.8: the first boundary at or past it is 500 tokens.
        let t = trace_with_cap(&q, &pool, &cfg, 0.9, false, &s).unwrap();
        assert_eq!(t.trace.len(), 10);
        assert!(!t.finished);
    }

    #[test]
    fn finished_trace_is_discarded() {
        let quick: Arc<dyn Backend> =
            Arc::new(MockSkillBackend::new("q").default_emission(MockEmission::finish("done", 30)));
        let pool = CandidatePool::from_backends([("q", quick)], 0).unwrap();
        let q = Query::new("q", "Q");
        let cfg = GenerationConfig::default();
        let dg = DatagenConfig::default();
        let sampled =
            trace_with_cap(&q, &pool, &cfg, 0.5, false, &SeedStream::from_seed(0)).unwrap();
        assert!(sampled.finished);
        assert_eq!(sampled.trace.total_tokens(), 30);
        let scorer = FnScorer(|_: &str, _: &serde_json::Value| Ok(1.0));
        assert_eq!(
            instance_from_trace(
                &q,
                &pool,
                &scorer,
                &cfg,
                &dg,
                &SeedStream::from_seed(0),
                sampled
            )
            .unwrap_err(),
            DatagenError::Discarded(DiscardReason::FinishedBeforeCap)
        );
    }

    #[test]
    fn sampled_caps_stay_in_range() {
        let pool = filler_pool(2, 10);
        let cfg = GenerationConfig {
            patch_size: 10,
            max_new_tokens: 100,
            ..GenerationConfig::default()
        };
        let dg = DatagenConfig::default();
        for i in 0..50 {
            let q = Query::new(format!("q{i}"), "Q");
            let s = sample_random_trace(&q, &pool, &cfg, &dg, &SeedStream::for_query(3, &q.id))
                .unwrap();
            assert!((0.1..=0.9).contains(&s.cap_fraction));
            assert!(s.trace.total_tokens() as f64 >= s.cap_fraction * 100.0);
        }
    }

    #[test]
    fn divergent_branches_differ_only_in_last_segment() {
        let pool = filler_pool(3, 10);
        let q = Query::new("q", "Q");
        let base = Trace::from_segments(vec![crate::domain::Segment::new(1, "<1>", 10)]);
        let cfg = GenerationConfig {
            patch_size: 10,
            max_new_tokens: 100,
            ..GenerationConfig::default()
        };
        let branches = divergent_step(&q, &base, &pool, &cfg, &SeedStream::from_seed(0)).unwrap();
        assert_eq!(branches.len(), 3);
        for (i, b) in branches.iter().enumerate() {
            assert_eq!(b.trace.len(), 2);
            assert_eq!(&b.trace.segments()[..1], base.segments());
            assert_eq!(b.trace.segments()[1].model_index, i);
        }
        let again = divergent_step(&q, &base, &pool, &cfg, &SeedStream::from_seed(0)).unwrap();
        assert_eq!(branches, again);
    }

    #[test]
    fn failing_branch_discards_instance() {
        let bad: Arc<dyn Backend> = Arc::new(
            MockSkillBackend::new("bad").rule(Pattern::Always, MockEmission::failure("down")),
        );
        let good: Arc<dyn Backend> =
            Arc::new(MockSkillBackend::new("good").default_emission(MockEmission::text("g", 5)));
        let pool = CandidatePool::from_backends([("good", good), ("bad", bad)], 0).unwrap();
        let cfg = GenerationConfig {
            patch_size: 5,
            max_new_tokens: 50,
            ..GenerationConfig::default()
        };
        assert_eq!(
            divergent_step(
                &Query::new("q", "Q"),
                &Trace::new(),
                &pool,
                &cfg,
                &SeedStream::from_seed(0)
            ),
            Err(DatagenError::Discarded(DiscardReason::BranchBackendFailure))
        );
    }

    #[test]
    fn utility_is_exact_mean_and_scorer_errors_count_as_zero() {
        let pool = filler_pool(2, 10);
        let q = Query::new("q", "Q").with_max_new_tokens(40);
        let cfg = GenerationConfig {
            patch_size: 10,
            max_new_tokens: 40,
            ..GenerationConfig::default()
        };
        let branch = Branch {
            trace: Trace::new(),
            finished: false,
        };
        let scorer = FnScorer(|resp: &str, _: &serde_json::Value| {
            if resp.starts_with("<0>") {
                Err(ScoreError::External("judge down".into()))
            } else {
                Ok(resp.matches("<1>").count() as f64 / 4.0)
            }
        });
        let dg = DatagenConfig {
            k: 16,
            ..DatagenConfig::default()
        };
        let u = rollout_utility(
            &q,
            &branch,
            &pool,
            16,
            &scorer,
            &cfg,
            &dg,
            &SeedStream::from_seed(9),
        )
        .unwrap();
        assert_eq!(u.scores.len(), 16);
        let sum: f64 = u.scores.iter().sum();
        assert!((16.0 * u.mean - sum).abs() < 1e-9);
        assert!(u.scorer_errors > 0);
        assert!(u.scores.iter().filter(|s| **s == 0.0).count() >= u.scorer_errors);
    }

    #[test]
    fn k_one_deterministic_completion() {
        let pool = filler_pool(1, 10);
        let q = Query::new("q", "Q").with_max_new_tokens(20);
        let cfg = GenerationConfig {
            patch_size: 10,
            max_new_tokens: 20,
            ..GenerationConfig::default()
        };
        let scorer =
            FnScorer(|r: &str, _: &serde_json::Value| Ok(if r == "<0><0>" { 1.0 } else { 0.0 }));
        let u = rollout_utility(
            &q,
            &Branch {
                trace: Trace::new(),
                finished: false,
            },
            &pool,
            1,
            &scorer,
            &cfg,
            &DatagenConfig::default(),
            &SeedStream::from_seed(0),
        )
        .unwrap();
        assert_eq!(u.mean, 1.0);
    }

    #[test]
    fn label_examples() {
        assert_eq!(label_instance(&[0.2, 0.8, 0.8]).unwrap(), 1);
        assert_eq!(label_instance(&[0.5, 0.5, 0.5]).unwrap(), 0);
        assert!(matches!(
            label_instance(&[0.1, f64::NAN]),
            Err(DatagenError::InvalidInstance(_))
        ));
        assert!(matches!(
            label_instance(&[0.1, f64::INFINITY]),
            Err(DatagenError::InvalidInstance(_))
        ));
    }

    #[test]
    fn manifest_path_naming() {
        assert_eq!(
            manifest_path(Path::new("/x/gsm8k.jsonl")),
            PathBuf::from("/x/gsm8k.manifest.json")
        );
    }

    #[test]
    fn discard_rate_aborts() {
        let quick: Arc<dyn Backend> =
            Arc::new(MockSkillBackend::new("q").default_emission(MockEmission::finish("done", 3)));
        let pool = CandidatePool::from_backends([("q", quick)], 0).unwrap();
        let scorer = FnScorer(|_: &str, _: &serde_json::Value| Ok(1.0));
        let dg = DatagenConfig {
            instances_per_task: 10,
            k: 2,
            ..DatagenConfig::default()
        };
        let err = collect_sft_dataset(
            &[Query::new("q", "Q")],
            &pool,
            &scorer,
            &GenerationConfig::default(),
            &dg,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DatagenError::DiscardRate {
                attempts: 20,
                discards: 20,
                ..
            }
        ));
    }

    proptest! {
        #[test]
        fn label_is_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 1..=10),
            scale in 0.001f64..1000.0,
        ) {
            let scaled: Vec<f64> = u.iter().map(|x| x * scale).collect();
            let a = label_instance(&u).unwrap();
            let b = label_instance(&scaled).unwrap();
            // Scaling can merge near-ties through rounding; compare values.
            prop_assert!((u[a] - u[b]).abs() <= 1e-12 * u[a].abs().max(1.0) || a == b);
            let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(u[a], max);
            prop_assert!(u[..a].iter().all(|x| *x < max));
        }
    }
}
