// Turns switcher label logits into a distribution, shows which models the
// nucleus keeps at several top-p values and samples from it.

use switchgen::rng::SeedStream;
use switchgen::switcher::{nucleus, select_top_p, SwitchDistribution};

fn main() {
    let logits = [1.2, 0.4, 2.0];
    let dist = SwitchDistribution::from_logits(&logits).expect("finite logits");
    println!("logits {logits:?}");
    println!(
        "probs  {:?}",
        dist.probs()
            .iter()
            .map(|p| (p * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );

    for p in [0.3, 0.7, 0.9, 1.0] {
        println!(
            "top_p {p:.1}: nucleus {:?}",
            nucleus(&dist, p).expect("valid p")
        );
    }

    let mut rng = SeedStream::from_seed(11).rng();
    let mut counts = [0usize; 3];
    let draws = 10_000;
    for _ in 0..draws {
        counts[select_top_p(&dist, 0.7, &mut rng)
            .expect("valid p")
            .chosen_index] += 1;
    }
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    println!("top_p 0.7 over {draws} draws: {shares:?}");
    assert_eq!(counts[1], 0, "model 1 lies outside the 0.7 nucleus");
}
