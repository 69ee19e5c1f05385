// Three scripted models that each own one skill. No single model solves the
// task; a switching policy that routes each patch to the right model does.

use std::sync::Arc;

use switchgen::backends::{Backend, MockEmission, MockSkillBackend, Pattern};
use switchgen::domain::{CandidatePool, GenerationConfig, Query};
use switchgen::engine::switch_generate;
use switchgen::eval::{ResponseScorer, Scorer};
use switchgen::rng::SeedStream;
use switchgen::switcher::{FixedSequencePolicy, OraclePolicy, RandomPolicy, SwitchPolicy};

fn pool() -> CandidatePool {
    let idle = || MockEmission::text(" ...", 10);
    let planner = MockSkillBackend::new("planner")
        .rule(
            Pattern::NotContains("plan:".into()),
            MockEmission::text(" plan: split the sum", 10),
        )
        .default_emission(idle());
    let solver = MockSkillBackend::new("solver")
        .rule(
            Pattern::AllOf(vec![
                Pattern::Contains("plan:".into()),
                Pattern::NotContains("work:".into()),
            ]),
            MockEmission::text(" work: 20 + 22", 10),
        )
        .default_emission(idle());
    let writer = MockSkillBackend::new("writer")
        .rule(
            Pattern::AllOf(vec![
                Pattern::Contains("work:".into()),
                Pattern::NotContains("ANSWER".into()),
            ]),
            MockEmission::finish(" ANSWER 42", 10),
        )
        .default_emission(idle());
    CandidatePool::from_backends(
        [("planner", planner), ("solver", solver), ("writer", writer)]
            .map(|(n, b)| (n, Arc::new(b) as Arc<dyn Backend>)),
        2,
    )
    .expect("valid pool")
}

fn main() {
    let pool = pool();
    let query = Query::new("sum", "What is 20 + 22?").with_gold(serde_json::json!("ANSWER 42"));
    let config = GenerationConfig {
        patch_size: 10,
        max_new_tokens: 30,
        force_final_first_last: false,
        ..GenerationConfig::default()
    };
    let scorer = Scorer::contains_normalized();
    let policies: Vec<(&str, Box<dyn SwitchPolicy>)> = vec![
        (
            "planner only",
            Box::new(FixedSequencePolicy::parse("000").unwrap()),
        ),
        (
            "writer only",
            Box::new(FixedSequencePolicy::parse("222").unwrap()),
        ),
        (
            "fixed 012",
            Box::new(FixedSequencePolicy::parse("012").unwrap()),
        ),
        ("random", Box::new(RandomPolicy)),
        (
            "oracle",
            Box::new(OraclePolicy::new(Arc::new(Scorer::contains_normalized()))),
        ),
    ];
    for (name, policy) in &policies {
        let rec = switch_generate(
            &query,
            &pool,
            policy.as_ref(),
            &config,
            &SeedStream::for_query(3, &query.id),
        )
        .expect("valid inputs");
        let score = scorer
            .score(&rec.final_text, &query.gold)
            .expect("scorable");
        println!(
            "{name:>12}: models {:?} score {score} text {:?}",
            rec.model_sequence, rec.final_text
        );
    }
}
