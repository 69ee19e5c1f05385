// Generates a batch with a random switcher, scores it and runs the pattern
// analysis: sequence effects, where each model acts and the switching rate.

use std::collections::HashMap;
use std::sync::Arc;

use switchgen::analysis::{analyze, one_tailed_z_test};
use switchgen::backends::{Backend, MockEmission, MockSkillBackend, Pattern};
use switchgen::domain::{CandidatePool, GenerationConfig, Query};
use switchgen::engine::batch_generate;
use switchgen::eval::{evaluate, Scorer};
use switchgen::switcher::RandomPolicy;

fn main() {
    // The answer is written only when "drafter" hands over to "closer".
    let drafter =
        MockSkillBackend::new("drafter").default_emission(MockEmission::text(" draft", 4));
    let closer = MockSkillBackend::new("closer")
        .rule(
            Pattern::EndsWith(" draft".into()),
            MockEmission::text(" yes", 4),
        )
        .default_emission(MockEmission::text(" ok", 4));
    let pool = CandidatePool::from_backends(
        [("drafter", drafter), ("closer", closer)]
            .map(|(n, b)| (n, Arc::new(b) as Arc<dyn Backend>)),
        1,
    )
    .expect("valid pool");

    let queries: Vec<Query> = (0..200)
        .map(|i| Query::new(format!("q{i}"), "Agree?").with_task("agree"))
        .collect();
    let config = GenerationConfig {
        patch_size: 4,
        max_new_tokens: 24,
        force_final_first_last: false,
        ..GenerationConfig::default()
    };
    let mut records =
        batch_generate(&queries, &pool, &RandomPolicy, &config, 8).expect("valid inputs");
    let golds: HashMap<String, serde_json::Value> = queries
        .iter()
        .map(|q| (q.id.clone(), serde_json::json!("yes")))
        .collect();
    let result = evaluate(
        "agree",
        &mut records,
        &Scorer::contains_normalized(),
        &golds,
    )
    .expect("scored");
    println!(
        "mean score {:.3} over {} records\n",
        result.mean_score, result.n
    );

    let report = analyze(&records, None).expect("scored records");
    println!("{}", report.render_table(4));

    // Does "0 then 1" help? Compare success rates with and without it.
    let with: Vec<f64> = records
        .iter()
        .filter(|r| r.model_sequence.windows(2).any(|w| w == [0, 1]))
        .map(|r| r.score.unwrap())
        .collect();
    let without: Vec<f64> = records
        .iter()
        .filter(|r| !r.model_sequence.windows(2).any(|w| w == [0, 1]))
        .map(|r| r.score.unwrap())
        .collect();
    let rate = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let p = one_tailed_z_test(rate(&with), with.len(), rate(&without), without.len());
    println!(
        "success with 0-1: {:.3} (n={}), without: {:.3} (n={}), one-tailed p = {p:.2e}",
        rate(&with),
        with.len(),
        rate(&without),
        without.len()
    );
}
