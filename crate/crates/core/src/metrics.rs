//! ROC-AUC and per-task evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC needs at least one positive and one negative label (got {positives} positives of {n})")]
    DegenerateLabels { positives: usize, n: usize },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
}

/// Area under the ROC curve via the Mann-Whitney rank statistic.
/// Tied scores share their mean rank, so each tied positive/negative pair
/// contributes one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let n = scores.len();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(MetricsError::DegenerateLabels { positives, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (positives as f64, (n - positives) as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub task_names: Vec<String>,
    /// `None` for tasks lacking a positive or a negative in the split.
    pub per_task_auc: Vec<Option<f64>>,
    /// Unweighted mean over tasks that have an AUC.
    pub mean_auc: Option<f64>,
    pub skipped_tasks: Vec<String>,
}

/// Scores each task over the instances that carry a label for it.
///
/// `probs[t][i]` is the prediction for task `t` on instance `i`;
/// `labels[i][t]` is the (possibly missing) label.
pub fn evaluate_scores(task_names: &[String], probs: &[Vec<f64>], labels: &[Vec<Option<bool>>]) -> AucResult {
    let mut per_task_auc = Vec::with_capacity(task_names.len());
    let mut skipped_tasks = Vec::new();
    for (t, name) in task_names.iter().enumerate() {
        let (mut s, mut y) = (Vec::new(), Vec::new());
        for (i, row) in labels.iter().enumerate() {
            if let Some(l) = row[t] {
                s.push(probs[t][i]);
                y.push(l);
            }
        }
        match roc_auc(&s, &y) {
            Ok(auc) => per_task_auc.push(Some(auc)),
            Err(_) => {
                per_task_auc.push(None);
                skipped_tasks.push(name.clone());
            }
        }
    }
    let present: Vec<f64> = per_task_auc.iter().flatten().copied().collect();
    let mean_auc = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    AucResult { task_names: task_names.to_vec(), per_task_auc, mean_auc, skipped_tasks }
}

/// Anything that maps token sequences to per-task probabilities.
pub trait Predictor {
    /// Returns `probs[t][i]` for every task `t` and input `i`.
    fn predict_proba(&self, inputs: &[TokenSequence]) -> Result<Vec<Vec<f64>>, crate::model::ModelError>;
}

/// Runs `predictor` over `inputs` and scores it against `labels`.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    task_names: &[String],
    inputs: &[TokenSequence],
    labels: &[Vec<Option<bool>>],
) -> Result<AucResult, crate::model::ModelError> {
    let probs = predictor.predict_proba(inputs)?;
    Ok(evaluate_scores(task_names, &probs, labels))
}
