use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SwitchError;

/// Tolerance for the "probabilities sum to one" invariant.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Slack applied when comparing a cumulative mass with the threshold, so
/// that e.g. 0.5 + 0.3 counts as reaching 0.8.
const CUMULATIVE_SLACK: f64 = 1e-12;

/// Probability vector over pool members, indexed like the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SwitchDistribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for SwitchDistribution {
    type Error = SwitchError;

    fn try_from(probs: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(probs)
    }
}

impl From<SwitchDistribution> for Vec<f64> {
    fn from(d: SwitchDistribution) -> Self {
        d.probs
    }
}

impl SwitchDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, SwitchError> {
        if probs.is_empty() {
            return Err(SwitchError::InvalidDistribution(
                "empty distribution".into(),
            ));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(SwitchError::InvalidDistribution(format!(
                "probability {p} is negative or non-finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(SwitchError::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self, SwitchError> {
        if n == 0 {
            return Err(SwitchError::InvalidDistribution(
                "empty distribution".into(),
            ));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self, SwitchError> {
        if index >= n {
            return Err(SwitchError::InvalidDistribution(format!(
                "index {index} out of range for {n} models"
            )));
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    /// Softmax over label scores, shifted by the maximum for stability.
    pub fn from_logits(logits: &[f64]) -> Result<Self, SwitchError> {
        if logits.is_empty() {
            return Err(SwitchError::InvalidDistribution("no label scores".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(SwitchError::InvalidDistribution(
                "non-finite label score".into(),
            ));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / z).collect())
    }

    /// Skips validation; callers must uphold the invariants. Used to feed
    /// raw vectors into [`select_top_p`] so it can report bad input itself.
    pub fn from_raw(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Outcome of one switch: the chosen model, the distribution it came from
/// and the nucleus (kept indices, ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub chosen_index: usize,
    pub distribution: SwitchDistribution,
    pub nucleus: Vec<usize>,
}

/// Indices kept by nucleus truncation at threshold `p`, in descending
/// probability order (ties by ascending index).
pub fn nucleus(dist: &SwitchDistribution, p: f64) -> Result<Vec<usize>, SwitchError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(SwitchError::InvalidDistribution(format!(
            "top-p threshold {p} outside (0, 1]"
        )));
    }
    let probs = dist.probs();
    if probs.is_empty() {
        return Err(SwitchError::InvalidDistribution(
            "empty distribution".into(),
        ));
    }
    if probs.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(SwitchError::InvalidDistribution(
            "distribution has negative or non-finite entries".into(),
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut cumulative = 0.0;
    let mut kept = Vec::with_capacity(order.len());
    for i in order {
        kept.push(i);
        cumulative += probs[i];
        if cumulative >= p - CUMULATIVE_SLACK {
            break;
        }
    }
    Ok(kept)
}

/// Nucleus (top-p) selection of one model index.
///
/// Keeps the shortest high-probability prefix whose mass reaches `p`,
/// renormalizes over it and draws one index from `rng`.
pub fn select_top_p<R: Rng + ?Sized>(
    dist: &SwitchDistribution,
    p: f64,
    rng: &mut R,
) -> Result<SwitchDecision, SwitchError> {
    let kept = nucleus(dist, p)?;
    let probs = dist.probs();
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    if mass <= 0.0 {
        return Err(SwitchError::InvalidDistribution(
            "nucleus has zero mass".into(),
        ));
    }

    let chosen = if kept.len() == 1 {
        kept[0]
    } else {
        let u = rng.gen::<f64>() * mass;
        let mut cumulative = 0.0;
        let mut pick = None;
        for &i in &kept {
            cumulative += probs[i];
            if u < cumulative {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave u just above the final cumulative sum.
        pick.unwrap_or_else(|| {
            *kept
                .iter()
                .rev()
                .find(|&&i| probs[i] > 0.0)
                .expect("positive mass")
        })
    };

    let mut nucleus = kept;
    nucleus.sort_unstable();
    Ok(SwitchDecision {
        chosen_index: chosen,
        distribution: dist.clone(),
        nucleus,
    })
}
