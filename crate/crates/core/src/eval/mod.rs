//! Detection metrics, the experiment runner and report emission.

mod experiment;
mod report;

pub use experiment::{
    prepare_corpus, run_cell, run_experiment, run_experiment_with, CellOutcome, CorpusSource, ExperimentSpec, ResultRow,
    Sweep, SweepParam,
};
pub use report::{emit_report, summarize, SummaryRow};

use crate::data::AnomalyType;
use crate::error::{DpoeError, Result};

/// Area under the ROC curve: the probability that a random anomaly
/// (`label != 0`) scores above a random normal instance, ties counting ½.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DpoeError::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DpoeError::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(DpoeError::Metric("AUC needs both anomalies and normal instances".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, so tied (half-integer) ranks stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean, doubled: i + j + 2.
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        twice_rank_sum += tied_pos * (i + j + 2) as u64;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// AUC of normals against one anomaly type only.
pub fn auc_for_type(scores: &[f64], types: &[AnomalyType], which: AnomalyType) -> Result<f64> {
    let (s, l): (Vec<f64>, Vec<u8>) = scores
        .iter()
        .zip(types)
        .filter(|(_, &t)| t == AnomalyType::None || t == which)
        .map(|(&s, &t)| (s, u8::from(t == which)))
        .unzip();
    compute_auc(&s, &l)
}
