//! Post-hoc statistics over generation records: which model sequences show
//! up and how they relate to score, where in a response each model writes,
//! how often the policy switches, distillation export and a significance
//! test for comparing accuracies.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::GenerationRecord;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("record '{0}' has no score; run `eval` first")]
    Unscored(String),
    #[error("sequence length {0} is outside 2..=3")]
    SequenceLength(usize),
    #[error("no records to analyse")]
    Empty,
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check_len(seq: &[usize]) -> Result<(), AnalysisError> {
    if (2..=3).contains(&seq.len()) {
        Ok(())
    } else {
        Err(AnalysisError::SequenceLength(seq.len()))
    }
}

fn score_of(r: &GenerationRecord) -> Result<f64, AnalysisError> {
    r.score
        .ok_or_else(|| AnalysisError::Unscored(r.query_id.clone()))
}

/// Contiguous-subsequence containment.
pub fn contains_sequence(models: &[usize], seq: &[usize]) -> bool {
    !seq.is_empty() && models.windows(seq.len()).any(|w| w == seq)
}

/// Fraction of records whose model sequence contains `seq` at least once.
pub fn sequence_frequency(
    records: &[GenerationRecord],
    seq: &[usize],
) -> Result<f64, AnalysisError> {
    check_len(seq)?;
    if records.is_empty() {
        return Ok(0.0);
    }
    let hits = records
        .iter()
        .filter(|r| contains_sequence(&r.model_sequence, seq))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Mean score with `seq` minus mean score without it; `None` when either
/// group is empty.
pub fn treatment_effect(
    records: &[GenerationRecord],
    seq: &[usize],
) -> Result<Option<f64>, AnalysisError> {
    check_len(seq)?;
    let mut acc = GroupSums::default();
    for r in records {
        acc.add(contains_sequence(&r.model_sequence, seq), score_of(r)?);
    }
    Ok(acc.effect())
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupSums {
    n_with: usize,
    sum_with: f64,
    n_without: usize,
    sum_without: f64,
}

impl GroupSums {
    fn add(&mut self, with: bool, score: f64) {
        if with {
            self.n_with += 1;
            self.sum_with += score;
        } else {
            self.n_without += 1;
            self.sum_without += score;
        }
    }

    fn effect(&self) -> Option<f64> {
        (self.n_with > 0 && self.n_without > 0)
            .then(|| self.sum_with / self.n_with as f64 - self.sum_without / self.n_without as f64)
    }
}

/// Frequency and treatment effect of one sequence within one group of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStat {
    pub sequence: Vec<usize>,
    pub frequency: f64,
    /// Absent when every record, or no record, contains the sequence.
    pub treatment_effect: Option<f64>,
    pub n_with: usize,
    pub n_without: usize,
}

/// Every length-2 and length-3 sequence over `n` models, lexicographic
/// within each length.
pub fn all_sequences(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(n * n + n * n * n);
    for a in 0..n {
        for b in 0..n {
            out.push(vec![a, b]);
        }
    }
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                out.push(vec![a, b, c]);
            }
        }
    }
    out
}

/// Stats for every length-2/3 sequence over `n` models in one pass over
/// `records`.
pub fn sequence_stats(
    records: &[GenerationRecord],
    n: usize,
) -> Result<Vec<SequenceStat>, AnalysisError> {
    let universe = all_sequences(n);
    let mut sums = vec![GroupSums::default(); universe.len()];
    for r in records {
        let score = score_of(r)?;
        let present: HashSet<&[usize]> = r
            .model_sequence
            .windows(2)
            .chain(r.model_sequence.windows(3))
            .collect();
        for (seq, acc) in universe.iter().zip(sums.iter_mut()) {
            acc.add(present.contains(seq.as_slice()), score);
        }
    }
    let total = records.len();
    Ok(universe
        .into_iter()
        .zip(sums)
        .map(|(sequence, acc)| SequenceStat {
            sequence,
            frequency: if total == 0 {
                0.0
            } else {
                acc.n_with as f64 / total as f64
            },
            treatment_effect: acc.effect(),
            n_with: acc.n_with,
            n_without: acc.n_without,
        })
        .collect())
}

pub const REGIONS: [&str; 3] = ["begin", "middle", "end"];

/// Region of patch `i` in a response of `t` patches by its midpoint
/// `(i + 0.5) / t`: 0 below 1/3, 2 at or above 2/3, else 1.
pub fn region_of(i: usize, t: usize) -> usize {
    // (i + 0.5) / t < 1/3  <=>  6i + 3 < 2t, kept in integers.
    let m = 6 * i + 3;
    if m < 2 * t {
        0
    } else if m >= 4 * t {
        2
    } else {
        1
    }
}

/// Patch counts per model and region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationHistogram {
    /// `counts[model][region]`.
    pub counts: Vec<[usize; 3]>,
}

impl LocationHistogram {
    pub fn region_totals(&self) -> [usize; 3] {
        let mut t = [0; 3];
        for c in &self.counts {
            for r in 0..3 {
                t[r] += c[r];
            }
        }
        t
    }

    pub fn total(&self) -> usize {
        self.region_totals().iter().sum()
    }

    /// Share of each region's patches written by `model`; 0 for empty regions.
    pub fn shares(&self, model: usize) -> [f64; 3] {
        let totals = self.region_totals();
        let mut out = [0.0; 3];
        if let Some(c) = self.counts.get(model) {
            for r in 0..3 {
                if totals[r] > 0 {
                    out[r] = c[r] as f64 / totals[r] as f64;
                }
            }
        }
        out
    }
}

pub fn location_histogram(records: &[GenerationRecord], n: usize) -> LocationHistogram {
    let mut counts = vec![[0usize; 3]; n];
    for r in records {
        let t = r.model_sequence.len();
        for (i, &m) in r.model_sequence.iter().enumerate() {
            if m >= counts.len() {
                counts.resize(m + 1, [0; 3]);
            }
            counts[m][region_of(i, t)] += 1;
        }
    }
    LocationHistogram { counts }
}

/// Share of adjacent patch pairs written by different models; 0 for
/// fewer than two patches.
pub fn switching_rate(record: &GenerationRecord) -> f64 {
    let s = &record.model_sequence;
    if s.len() <= 1 {
        return 0.0;
    }
    let changes = s.windows(2).filter(|w| w[0] != w[1]).count();
    changes as f64 / (s.len() - 1) as f64
}

/// Ordinary least-squares line through `(x, y)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// `None` with fewer than two points or when `x` or `y` is constant.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    Some(LinearFit {
        slope,
        intercept,
        r_squared: 1.0 - ss_res / syy,
        points: n,
    })
}

/// Upper-tail p-value of the pooled two-proportion z statistic for
/// `H1: p1 > p2`.
pub fn one_tailed_z_test(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let var = pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f);
    if var <= 0.0 {
        return if p1 <= p2 { 1.0 } else { 0.0 };
    }
    let z = (p1 - p2) / var.sqrt();
    Normal::new(0.0, 1.0).expect("unit normal").sf(z)
}

/// The pooled z statistic itself.
pub fn z_statistic(p1: f64, n1: usize, p2: f64, n2: usize) -> Option<f64> {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let var = pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f);
    (var > 0.0).then(|| (p1 - p2) / var.sqrt())
}

/// One instruction/response pair for fine-tuning a single model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillPair {
    pub instruction: String,
    pub response: String,
}

/// Pairs for every record scoring at least `min_score`.
pub fn distill_pairs(
    records: &[GenerationRecord],
    min_score: f64,
) -> Result<Vec<DistillPair>, AnalysisError> {
    let mut out = Vec::new();
    for r in records {
        if score_of(r)? >= min_score {
            out.push(DistillPair {
                instruction: r.instruction.clone(),
                response: r.final_text.clone(),
            });
        }
    }
    Ok(out)
}

/// Writes [`distill_pairs`] as JSONL and returns how many were written.
pub fn export_distill(
    records: &[GenerationRecord],
    min_score: f64,
    path: &Path,
) -> Result<usize, AnalysisError> {
    let pairs = distill_pairs(records, min_score)?;
    jsonl::write_jsonl(path, &pairs)?;
    Ok(pairs.len())
}

/// Everything computed for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAnalysis {
    pub task: String,
    pub records: usize,
    pub mean_score: f64,
    pub sequences: Vec<SequenceStat>,
    pub locations: LocationHistogram,
    pub mean_switching_rate: f64,
    /// Treatment effect regressed on frequency over sequences where both are defined.
    pub frequency_effect_fit: Option<LinearFit>,
}

/// A sequence's statistics averaged over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub sequence: Vec<usize>,
    pub mean_frequency: f64,
    /// Mean over the tasks where the effect is defined.
    pub mean_treatment_effect: Option<f64>,
    pub tasks_with_effect: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub pool_size: usize,
    pub tasks: Vec<TaskAnalysis>,
    pub averaged: Vec<SequenceSummary>,
    pub frequency_effect_fit: Option<LinearFit>,
}

fn fit_points<'a>(stats: impl Iterator<Item = (f64, Option<f64>)> + 'a) -> Vec<(f64, f64)> {
    stats.filter_map(|(f, e)| e.map(|e| (f, e))).collect()
}

/// Analyses each task separately, then averages sequence statistics across
/// tasks. `n` defaults to one more than the largest model index seen.
pub fn analyze(
    records: &[GenerationRecord],
    n: Option<usize>,
) -> Result<AnalysisReport, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if let Some(r) = records.iter().find(|r| r.score.is_none()) {
        return Err(AnalysisError::Unscored(r.query_id.clone()));
    }
    let n = n.unwrap_or_else(|| {
        records
            .iter()
            .flat_map(|r| r.model_sequence.iter().copied())
            .max()
            .map_or(1, |m| m + 1)
    });
    let mut by_task: BTreeMap<&str, Vec<GenerationRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task.as_str()).or_default().push(r.clone());
    }

    let mut tasks = Vec::with_capacity(by_task.len());
    for (task, recs) in &by_task {
        let sequences = sequence_stats(recs, n)?;
        let fit = linear_fit(&fit_points(
            sequences.iter().map(|s| (s.frequency, s.treatment_effect)),
        ));
        tasks.push(TaskAnalysis {
            task: (*task).to_owned(),
            records: recs.len(),
            mean_score: recs.iter().map(|r| r.score.unwrap_or(0.0)).sum::<f64>()
                / recs.len() as f64,
            locations: location_histogram(recs, n),
            mean_switching_rate: recs.iter().map(switching_rate).sum::<f64>() / recs.len() as f64,
            frequency_effect_fit: fit,
            sequences,
        });
    }

    let universe = all_sequences(n);
    let averaged: Vec<SequenceSummary> = universe
        .into_iter()
        .enumerate()
        .map(|(i, sequence)| {
            let freqs: Vec<f64> = tasks.iter().map(|t| t.sequences[i].frequency).collect();
            let effects: Vec<f64> = tasks
                .iter()
                .filter_map(|t| t.sequences[i].treatment_effect)
                .collect();
            SequenceSummary {
                sequence,
                mean_frequency: freqs.iter().sum::<f64>() / freqs.len() as f64,
                mean_treatment_effect: (!effects.is_empty())
                    .then(|| effects.iter().sum::<f64>() / effects.len() as f64),
                tasks_with_effect: effects.len(),
            }
        })
        .collect();
    let frequency_effect_fit = linear_fit(&fit_points(
        averaged
            .iter()
            .map(|s| (s.mean_frequency, s.mean_treatment_effect)),
    ));
    Ok(AnalysisReport {
        pool_size: n,
        tasks,
        averaged,
        frequency_effect_fit,
    })
}

/// One line of the JSONL report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRow {
    Sequence {
        task: String,
        #[serde(flatten)]
        stat: SequenceStat,
    },
    SequenceAverage {
        #[serde(flatten)]
        summary: SequenceSummary,
    },
    Location {
        task: String,
        model: usize,
        counts: [usize; 3],
        shares: [f64; 3],
    },
    Task {
        task: String,
        records: usize,
        mean_score: f64,
        mean_switching_rate: f64,
        frequency_effect_fit: Option<LinearFit>,
    },
    Fit {
        #[serde(flatten)]
        fit: LinearFit,
    },
}

fn seq_label(seq: &[usize]) -> String {
    seq.iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

impl AnalysisReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for t in &self.tasks {
            rows.push(ReportRow::Task {
                task: t.task.clone(),
                records: t.records,
                mean_score: t.mean_score,
                mean_switching_rate: t.mean_switching_rate,
                frequency_effect_fit: t.frequency_effect_fit,
            });
            for (model, counts) in t.locations.counts.iter().enumerate() {
                rows.push(ReportRow::Location {
                    task: t.task.clone(),
                    model,
                    counts: *counts,
                    shares: t.locations.shares(model),
                });
            }
            for s in &t.sequences {
                rows.push(ReportRow::Sequence {
                    task: t.task.clone(),
                    stat: s.clone(),
                });
            }
        }
        for s in &self.averaged {
            rows.push(ReportRow::SequenceAverage { summary: s.clone() });
        }
        if let Some(fit) = self.frequency_effect_fit {
            rows.push(ReportRow::Fit { fit });
        }
        rows
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), AnalysisError> {
        Ok(jsonl::write_jsonl(path, &self.rows())?)
    }

    /// Per-task and averaged sequence statistics as CSV for plotting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "task",
            "sequence",
            "frequency",
            "treatment_effect",
            "n_with",
            "n_without",
        ])?;
        for t in &self.tasks {
            for s in &t.sequences {
                w.write_record([
                    t.task.clone(),
                    seq_label(&s.sequence),
                    s.frequency.to_string(),
                    s.treatment_effect
                        .map(|e| e.to_string())
                        .unwrap_or_default(),
                    s.n_with.to_string(),
                    s.n_without.to_string(),
                ])?;
            }
        }
        for s in &self.averaged {
            w.write_record([
                "*".to_owned(),
                seq_label(&s.sequence),
                s.mean_frequency.to_string(),
                s.mean_treatment_effect
                    .map(|e| e.to_string())
                    .unwrap_or_default(),
                String::new(),
                String::new(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Human-readable summary: per-task overview, location shares and the
    /// `top` averaged sequences by treatment effect.
    pub fn render_table(&self, top: usize) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>10} {:>10}",
            "task", "records", "score", "switching"
        );
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{:<20} {:>8} {:>10.4} {:>10.4}",
                t.task, t.records, t.mean_score, t.mean_switching_rate
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>8} {:>8} {:>8}",
            "task", "model", "begin", "middle", "end"
        );
        for t in &self.tasks {
            for m in 0..t.locations.counts.len() {
                let sh = t.locations.shares(m);
                let _ = writeln!(
                    s,
                    "{:<20} {:>6} {:>8.3} {:>8.3} {:>8.3}",
                    t.task, m, sh[0], sh[1], sh[2]
                );
            }
        }
        let _ = writeln!(s);
        let mut ranked: Vec<&SequenceSummary> = self
            .averaged
            .iter()
            .filter(|a| a.mean_treatment_effect.is_some())
            .collect();
        ranked.sort_by(|a, b| {
            b.mean_treatment_effect
                .partial_cmp(&a.mean_treatment_effect)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>10} {:>6}",
            "sequence", "frequency", "effect", "tasks"
        );
        for a in ranked.into_iter().take(top) {
            let _ = writeln!(
                s,
                "{:<10} {:>10.4} {:>+10.4} {:>6}",
                seq_label(&a.sequence),
                a.mean_frequency,
                a.mean_treatment_effect.unwrap_or(f64::NAN),
                a.tasks_with_effect
            );
        }
        if let Some(f) = self.frequency_effect_fit {
            let _ = writeln!(
                s,
                "\neffect ~ frequency: slope {:+.4}, R^2 {:.4} over {} sequences",
                f.slope, f.r_squared, f.points
            );
        }
        s
    }
}
