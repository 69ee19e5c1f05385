// Collects a small switcher training set: random partial traces, one
// divergent step per model, rollouts scored against the gold, argmax label.

use std::sync::Arc;

use switchgen::backends::{Backend, MockEmission, MockSkillBackend, Pattern};
use switchgen::datagen::{collect_sft_dataset, manifest_path, DatagenConfig, RolloutSampling};
use switchgen::domain::{CandidatePool, GenerationConfig, Query};
use switchgen::eval::Scorer;

fn main() {
    // Only "calc" can produce the number, and only after "setup" framed it.
    let setup = MockSkillBackend::new("setup")
        .rule(
            Pattern::NotContains("terms".into()),
            MockEmission::text(" terms 6 and 7", 5),
        )
        .default_emission(MockEmission::text(" so", 5));
    let calc = MockSkillBackend::new("calc")
        .rule(
            Pattern::Contains("terms".into()),
            MockEmission::text(" product 42", 5),
        )
        .default_emission(MockEmission::text(" unsure", 5));
    let pool = CandidatePool::from_backends(
        [("setup", setup), ("calc", calc)].map(|(n, b)| (n, Arc::new(b) as Arc<dyn Backend>)),
        1,
    )
    .expect("valid pool");

    let queries: Vec<Query> = (0..3)
        .map(|i| {
            Query::new(format!("m{i}"), format!("Multiply 6 by 7 ({i})."))
                .with_task("mul")
                .with_gold(serde_json::json!(42))
        })
        .collect();
    let config = GenerationConfig {
        patch_size: 5,
        max_new_tokens: 20,
        seed: 1,
        ..GenerationConfig::default()
    };
    let datagen = DatagenConfig {
        k: 4,
        instances_per_task: 8,
        sampling: RolloutSampling::Stratified,
        ..DatagenConfig::default()
    };
    let dataset = collect_sft_dataset(&queries, &pool, &Scorer::numeric_last(), &config, &datagen)
        .expect("collected");

    for inst in dataset.instances.iter().take(3) {
        println!(
            "trace {:?} -> utilities {:?} label {}",
            inst.trace.model_sequence(),
            inst.utilities,
            inst.label
        );
    }
    let m = &dataset.manifest;
    println!(
        "written {} of {} attempts, labels {:?}, discards {:?}",
        m.written, m.attempts, m.label_histogram, m.discards
    );

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("mul.jsonl");
    dataset.write(&path).expect("written");
    println!(
        "wrote {} and {}",
        path.display(),
        manifest_path(&path).display()
    );
}
