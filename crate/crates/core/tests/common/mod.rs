#![allow(dead_code)]

use std::sync::Arc;

use serde_json::json;
use switchgen::backends::{Backend, MockEmission, MockSkillBackend, Pattern};
use switchgen::domain::{CandidatePool, GenerationConfig, Query, Segment, Trace};
use switchgen::engine::GenerationRecord;

/// A three-step task: step `s` can only be performed by a model in `steps[s]`.
#[derive(Debug, Clone)]
pub struct SkillTask {
    pub id: String,
    pub steps: [Vec<usize>; 3],
}

impl SkillTask {
    fn marker(&self, step: usize) -> String {
        format!("{}-S{};", self.id, step + 1)
    }

    /// True when `path` (one model per patch) completes every step in order.
    pub fn solved_by(&self, path: &[usize]) -> bool {
        path.len() == 3 && (0..3).all(|s| self.steps[s].contains(&path[s]))
    }

    pub fn query(&self) -> Query {
        Query::new(self.id.clone(), format!("Solve task {}.", self.id))
            .with_task("compose")
            .with_gold(json!(format!("ANSWER {}", self.id)))
            .with_max_new_tokens(30)
    }
}

/// 20 tasks over 3 models. Skill profiles:
/// 8 × ({0},{1},{2}), 8 × ({0,1},{1,2},{0,2}), 2 × ({0,2},{1,2},{2}), 2 × ({1},{1},{1}).
pub fn skill_suite() -> Vec<SkillTask> {
    let profiles: [(usize, [&[usize]; 3]); 4] = [
        (8, [&[0], &[1], &[2]]),
        (8, [&[0, 1], &[1, 2], &[0, 2]]),
        (2, [&[0, 2], &[1, 2], &[2]]),
        (2, [&[1], &[1], &[1]]),
    ];
    let mut tasks = Vec::new();
    for (count, steps) in profiles {
        for _ in 0..count {
            tasks.push(SkillTask {
                id: format!("T{:02}", tasks.len()),
                steps: steps.map(|s| s.to_vec()),
            });
        }
    }
    tasks
}

/// Model `m` performs step `s` of a task when it has that skill and the
/// previous step is visible in its context. Anything else yields filler.
pub fn skill_backend(m: usize, tasks: &[SkillTask]) -> MockSkillBackend {
    let mut b =
        MockSkillBackend::new(format!("skill{m}")).default_emission(MockEmission::text(" ...", 10));
    for t in tasks {
        for s in 0..3 {
            if !t.steps[s].contains(&m) {
                continue;
            }
            let prev = if s == 0 {
                format!("Solve task {}.", t.id)
            } else {
                t.marker(s - 1)
            };
            let text = if s == 2 {
                format!(" {} ANSWER {}.", t.marker(s), t.id)
            } else {
                format!(" {}", t.marker(s))
            };
            b = b.rule(
                Pattern::AllOf(vec![
                    Pattern::Contains(prev),
                    Pattern::NotContains(t.marker(s)),
                ]),
                MockEmission::text(text, 10),
            );
        }
    }
    b
}

pub fn skill_pool(tasks: &[SkillTask]) -> CandidatePool {
    CandidatePool::from_backends(
        (0..3).map(|m| {
            (
                format!("skill{m}"),
                Arc::new(skill_backend(m, tasks)) as Arc<dyn Backend>,
            )
        }),
        2,
    )
    .unwrap()
}

pub fn skill_config(seed: u64) -> GenerationConfig {
    GenerationConfig {
        patch_size: 10,
        max_new_tokens: 30,
        force_final_first_last: false,
        seed,
        ..GenerationConfig::default()
    }
}

/// A scored record with one single-token segment per model index.
pub fn record(id: &str, task: &str, seq: &[usize], score: f64) -> GenerationRecord {
    let trace = Trace::from_segments(
        seq.iter()
            .map(|&m| Segment::new(m, format!("<{m}>"), 1))
            .collect(),
    );
    GenerationRecord {
        query_id: id.into(),
        task: task.into(),
        instruction: format!("question {id}"),
        final_text: trace.text(),
        model_sequence: trace.model_sequence(),
        trace,
        decisions: vec![None; seq.len()],
        score: Some(score),
        failure: None,
        config_snapshot: GenerationConfig::default(),
    }
}

/// Three mock backends with fixed emissions, for determinism runs.
pub fn mock_config_toml(seed: u64) -> String {
    format!(
        r#"seed = {seed}
concurrency = 4

[[backends]]
name = "pretrained"
kind = "mock"
default = {{ text = " p", tokens = 10 }}
rules = [{{ when = {{ contains = "finish" }}, text = " done.", tokens = 3, finished = true }}]

[[backends]]
name = "finetuned"
kind = "mock"
default = {{ text = " f", tokens = 10 }}

[[backends]]
name = "aligned"
kind = "mock"
default = {{ text = " ack", tokens = 10 }}

[pool]
members = ["pretrained", "finetuned", "aligned"]
final_index = 2

[switcher]
kind = "random"

[generation]
patch_size = 10
max_new_tokens = 60

[eval.scorers.arith]
kind = "contains_normalized"
"#
    )
}

/// `n` task lines for the mock config.
pub fn task_lines(n: usize) -> String {
    (0..n)
        .map(|i| {
            let instr = if i % 5 == 4 {
                format!("q{i}: please finish")
            } else {
                format!("q{i}: continue")
            };
            format!(
                "{}\n",
                json!({"id": format!("q{i}"), "task": "arith", "instruction": instr, "gold": "ack"})
            )
        })
        .collect()
}
