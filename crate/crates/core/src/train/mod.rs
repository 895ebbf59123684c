//! Training: balancing-weighted multi-task loss, Adam, validation-AUC
//! checkpoint selection, checkpoints on disk, and seed ensembles.

mod checkpoint;
mod ensemble;
mod experiment;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader,
};
pub use ensemble::{ensemble_predict, Ensemble};
pub use experiment::{
    ablation_csv, ablation_variants, degenerate_variant, mean_std, prepare, run_ablation, run_experiment,
    write_metrics_csv, AblationRow, AblationVariant, ExperimentResult, SeedSummary,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate_scores, AucResult};
use crate::model::{
    build_graph, forward_logits, register_params, sigmoid, ModelError, ModelParams, TaskHeadSpec, INFERENCE_CHUNK,
};
use crate::tensor::{Tape, TensorError, Var};
use crate::tokenizer::{TokenSequence, TokenizeError, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no labeled instance in the batch")]
    AllMasked,
    #[error("loss became {loss} at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("no task has both classes in the training split and labels in every split")]
    NoTrainableTasks,
    #[error("ensemble members disagree: {0}")]
    ConfigMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Epochs between validation passes.
    pub eval_every: usize,
    /// Global gradient norm cap; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Stop as soon as the mean validation AUC reaches this value.
    pub target_valid_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 60,
            learning_rate: 5e-5,
            max_epochs: 300,
            patience: 10,
            seeds: vec![0, 1, 2, 3, 4],
            eval_every: 1,
            grad_clip_norm: Some(5.0),
            target_valid_auc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs, patience and eval_every must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.grad_clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("grad_clip_norm must be finite and > 0");
        }
        Ok(())
    }
}

/// Tokenized inputs with record-major labels (`labels[i][t]`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Examples {
    pub inputs: Vec<TokenSequence>,
    pub labels: Vec<Vec<Option<bool>>>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Everything a training run consumes: tokenized splits, the training
/// vocabulary and per-task balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub task_names: Vec<String>,
    pub vocab: Vocabulary,
    /// Negatives per positive on the training split, per task.
    pub heads: Vec<TaskHeadSpec>,
    pub train: Examples,
    pub valid: Examples,
    pub test: Examples,
    /// Tasks that were excluded and why.
    pub warnings: Vec<String>,
}

impl PreparedData {
    /// Positive-class loss weight per task.
    pub fn weights(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.balancing_bias).collect()
    }
}

/// Adam moment buffers for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Moment buffer lengths, one per parameter tensor.
    pub fn buffer_lens(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected update. `grads[k]` is `None` for untouched tensors.
    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &[Option<Vec<f32>>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = (self.learning_rate / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= lr * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flatten().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Sum over tasks of the positive-weighted cross-entropy of each labeled
/// instance, divided by the number of labeled instance-task pairs.
///
/// `labels[t]` and `mask[t]` are per-task vectors aligned with
/// `logits[t]`; `weights[t]` multiplies the positive-class term.
pub fn weighted_multitask_loss(
    tape: &mut Tape<f32>,
    logits: &[Var],
    labels: &[Vec<f32>],
    mask: &[Vec<bool>],
    weights: &[f64],
) -> Result<Var> {
    if logits.len() != labels.len() || logits.len() != mask.len() || logits.len() != weights.len() {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_multitask_loss",
            lhs: vec![logits.len()],
            rhs: vec![labels.len(), mask.len(), weights.len()],
        }
        .into());
    }
    let count: usize = mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    let mut total: Option<Var> = None;
    for t in 0..logits.len() {
        let term = tape.weighted_bce(logits[t], &labels[t], &mask[t], weights[t] as f32)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.mul_scalar(total.expect("at least one task"), 1.0 / count as f32))
}

/// Per-task label and mask vectors for a set of rows.
fn batch_targets(labels: &[Vec<Option<bool>>], rows: &[usize], tasks: usize) -> (Vec<Vec<f32>>, Vec<Vec<bool>>) {
    let mut y = vec![Vec::with_capacity(rows.len()); tasks];
    let mut m = vec![Vec::with_capacity(rows.len()); tasks];
    for &r in rows {
        for t in 0..tasks {
            let l = labels[r][t];
            y[t].push(if l == Some(true) { 1.0 } else { 0.0 });
            m[t].push(l.is_some());
        }
    }
    (y, m)
}

fn weighted_bce_value(z: f64, y: bool, w: f64) -> f64 {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    if y {
        w * softplus(-z)
    } else {
        softplus(z)
    }
}

/// Probabilities, AUCs and losses of a frozen model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScore {
    /// `probs[t][i]`.
    pub probs: Vec<Vec<f64>>,
    pub auc: AucResult,
    /// Mean weighted loss per task over its labeled instances.
    pub task_loss: Vec<Option<f64>>,
    /// Loss over all labeled pairs, normalized as in training.
    pub loss: Option<f64>,
}

/// Scores `params` on `data` in inference mode.
pub fn score_split(
    params: &ModelParams<f32>,
    task_names: &[String],
    data: &Examples,
    weights: &[f64],
) -> Result<SplitScore> {
    let tasks = task_names.len();
    let mut probs = vec![Vec::with_capacity(data.len()); tasks];
    let (mut sums, mut counts) = (vec![0.0; tasks], vec![0usize; tasks]);
    for (c, chunk) in data.inputs.chunks(INFERENCE_CHUNK).enumerate() {
        let logits = forward_logits(params, chunk)?;
        for (t, zs) in logits.iter().enumerate() {
            for (j, &z) in zs.iter().enumerate() {
                let z = f64::from(z);
                probs[t].push(sigmoid(z));
                if let Some(y) = data.labels[c * INFERENCE_CHUNK + j][t] {
                    sums[t] += weighted_bce_value(z, y, weights[t]);
                    counts[t] += 1;
                }
            }
        }
    }
    let task_loss = sums.iter().zip(&counts).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();
    let n: usize = counts.iter().sum();
    let loss = (n > 0).then(|| sums.iter().sum::<f64>() / n as f64);
    let auc = evaluate_scores(task_names, &probs, &data.labels);
    Ok(SplitScore { probs, auc, task_loss, loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on evaluation epochs.
    pub valid_loss: Option<f64>,
    pub valid_task_loss: Option<Vec<Option<f64>>>,
    pub valid: Option<AucResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub task_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: AucResult,
    /// Computed once, on the best checkpoint.
    pub test: AucResult,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

impl RunResult {
    /// Everything except wall-clock time, for reproducibility checks.
    pub fn metrics_eq(&self, other: &RunResult) -> bool {
        RunResult { wall_clock_secs: 0.0, ..self.clone() } == RunResult { wall_clock_secs: 0.0, ..other.clone() }
    }
}

/// Result of one training run plus the selected weights.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub result: RunResult,
    pub best: ModelParams<f32>,
}

/// Stream offset separating shuffling/dropout randomness from init.
const TRAIN_STREAM: u64 = 1;

/// Trains `params` with seeded shuffling and dropout, keeping the
/// checkpoint with the best mean validation AUC, then scores it once on
/// the test split.
pub fn fit(mut params: ModelParams<f32>, data: &PreparedData, cfg: &TrainConfig, seed: u64) -> Result<FitOutput> {
    cfg.validate()?;
    let (task_names, train, valid, test) = (&data.task_names, &data.train, &data.valid, &data.test);
    let weights = &data.weights();
    let tasks = task_names.len();
    if params.config.num_tasks != tasks || weights.len() != tasks {
        return Err(
            ModelError::BadHeadCount { expected: params.config.num_tasks, got: tasks.min(weights.len()) }.into()
        );
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<f32>, AucResult)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TokenSequence> = rows.iter().map(|&r| train.inputs[r].clone()).collect();
            let (y, m) = batch_targets(&train.labels, rows, tasks);
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, &params, true);
            let graph = build_graph(&mut tape, &params, &vars, &batch, Some(&mut rng))?;
            let loss = match weighted_multitask_loss(&mut tape, &graph.logits, &y, &m, weights) {
                Err(TrainError::AllMasked) => continue,
                other => other?,
            };
            let value = f64::from(tape.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, batch: b, loss: value });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();
            if let Some(max) = cfg.grad_clip_norm {
                let norm = clip_global_norm(&mut grads, max);
                if !norm.is_finite() {
                    return Err(TrainError::DivergedLoss { epoch, batch: b, loss: norm });
                }
            }
            adam.update(&mut params, &grads);
            loss_sum += value;
            batches += 1;
        }
        if batches == 0 {
            return Err(TrainError::AllMasked);
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss: None,
            valid_task_loss: None,
            valid: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let s = score_split(&params, task_names, valid, weights)?;
            let mean = s.auc.mean_auc.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, ..)| mean > *b) {
                best = Some((mean, epoch, params.clone(), s.auc.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            record.valid_loss = s.loss;
            record.valid_task_loss = Some(s.task_loss);
            record.valid = Some(s.auc);
            log::debug!("seed {seed} epoch {epoch}: train loss {:.5}, valid mean AUC {mean:.4}", record.train_loss);
            epochs.push(record);
            if cfg.target_valid_auc.is_some_and(|t| mean >= t) || since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        } else {
            epochs.push(record);
        }
    }

    let (_, best_epoch, best_params, best_valid) = best.expect("the final epoch is always evaluated");
    let test = if test.is_empty() {
        evaluate_scores(task_names, &vec![Vec::new(); tasks], &[])
    } else {
        score_split(&best_params, task_names, test, weights)?.auc
    };
    let result = RunResult {
        seed,
        task_names: task_names.to_vec(),
        epochs,
        best_epoch,
        best_valid,
        test,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(FitOutput { result, best: best_params })
}
