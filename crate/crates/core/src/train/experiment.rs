//! Multi-seed runs over prepared splits, the run directory, and the
//! ablation matrix.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    fit, save_checkpoint, Ensemble, Examples, FitOutput, PreparedData, Result, RunResult, TrainConfig, TrainError,
};
use crate::data::{DatasetTable, MoleculeRecord, Split};
use crate::metrics::{evaluate, AucResult};
use crate::model::{init_params, ModelConfig, ModelParams, TaskHeadSpec};
use crate::tokenizer::{tokenize, tokenize_strict, TokenizeMode, Vocabulary};

/// Builds tokenized train/valid/test examples from a split.
///
/// With `external_test`, the split's test rows join training and the
/// external table becomes the test set. With `task`, only that task is
/// kept and rows missing its label are dropped. A task is excluded, with
/// a warning, when training lacks a positive or a negative or when the
/// validation or test split has no label for it. The vocabulary comes
/// from the training SMILES only.
pub fn prepare(
    table: &DatasetTable,
    split: &Split,
    external_test: Option<&DatasetTable>,
    task: Option<usize>,
    mode: TokenizeMode,
    max_seq_len: usize,
) -> Result<PreparedData> {
    if external_test.is_some_and(|ext| ext.task_names != table.task_names) {
        return Err(TrainError::InvalidConfig("external test table has different task columns".into()));
    }
    let mut cols: Vec<usize> = match task {
        Some(t) if t < table.num_tasks() => vec![t],
        Some(t) => return Err(TrainError::InvalidConfig(format!("task {t} out of range"))),
        None => (0..table.num_tasks()).collect(),
    };
    let pick = |records: Vec<&MoleculeRecord>| -> Vec<MoleculeRecord> {
        records.into_iter().filter(|r| task.is_none_or(|t| r.labels[t].is_some())).cloned().collect()
    };
    let rows = |idx: &[usize]| idx.iter().map(|&i| &table.records[i]).collect::<Vec<_>>();
    let (train, test) = match external_test {
        Some(ext) => {
            let mut tr = rows(&split.train);
            tr.extend(rows(&split.test));
            (pick(tr), pick(ext.records.iter().collect()))
        }
        None => (pick(rows(&split.train)), pick(rows(&split.test))),
    };
    let valid = pick(rows(&split.valid));
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }

    let count = |recs: &[MoleculeRecord], t: usize, want: Option<bool>| {
        recs.iter().filter(|r| r.labels[t].is_some() && (want.is_none() || r.labels[t] == want)).count()
    };
    let mut warnings = Vec::new();
    cols.retain(|&t| {
        let name = &table.task_names[t];
        let (pos, neg) = (count(&train, t, Some(true)), count(&train, t, Some(false)));
        let reason = if pos == 0 || neg == 0 {
            Some(format!("training split has {pos} positives and {neg} negatives"))
        } else if count(&valid, t, None) == 0 {
            Some("validation split has no labels".to_string())
        } else if !test.is_empty() && count(&test, t, None) == 0 {
            Some("test split has no labels".to_string())
        } else {
            None
        };
        if let Some(r) = &reason {
            log::warn!("excluding task {name}: {r}");
            warnings.push(format!("excluded task {name}: {r}"));
        }
        reason.is_none()
    });
    if cols.is_empty() {
        return Err(TrainError::NoTrainableTasks);
    }

    let smiles: Vec<&str> = train.iter().map(|r| r.smiles.as_str()).collect();
    let vocab = Vocabulary::build(&smiles, mode)?;
    let examples = |recs: &[MoleculeRecord], strict: bool| -> Result<Examples> {
        let mut ex = Examples::default();
        for r in recs {
            let seq = if strict {
                tokenize_strict(&r.smiles, &vocab, max_seq_len)?
            } else {
                tokenize(&r.smiles, &vocab, max_seq_len)?
            };
            ex.inputs.push(seq);
            ex.labels.push(cols.iter().map(|&t| r.labels[t]).collect());
        }
        Ok(ex)
    };
    let heads = cols
        .iter()
        .enumerate()
        .map(|(k, &t)| TaskHeadSpec::from_counts(k, count(&train, t, Some(true)), count(&train, t, Some(false))))
        .collect();
    Ok(PreparedData {
        task_names: cols.iter().map(|&t| table.task_names[t].clone()).collect(),
        heads,
        train: examples(&train, true)?,
        valid: examples(&valid, false)?,
        test: examples(&test, false)?,
        vocab,
        warnings,
    })
}

/// Per-seed summary written to `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub valid_mean_auc: Option<f64>,
    pub test_mean_auc: Option<f64>,
    pub test_per_task_auc: Vec<Option<f64>>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub notes: String,
    pub task_names: Vec<String>,
    pub param_count: usize,
    pub seeds: Vec<SeedSummary>,
    /// Mean over seeds of each run's mean test AUC.
    pub mean_test_auc: Option<f64>,
    pub std_test_auc: Option<f64>,
    /// Averaged-probability ensemble of every seed's best checkpoint.
    pub ensemble_test: Option<AucResult>,
    /// Seed whose checkpoint had the best validation AUC; copied to `best.samtl`.
    pub best_seed: u64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub runs: Vec<RunResult>,
}

/// Mean and sample standard deviation of the present values.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt());
    (Some(mean), std)
}

fn describe(cfg: &ModelConfig) -> String {
    let mut parts = vec![format!(
        "{} layers, {} heads, hidden {}, ffn {}, {:?} head",
        if cfg.use_self_attention { cfg.num_sa_layers } else { 0 },
        cfg.num_heads,
        cfg.hidden_size,
        cfg.ffn_size,
        cfg.head_kind
    )];
    if cfg.use_rnn_instead_of_cnn {
        parts.push("GRU".into());
    } else if cfg.use_cnn {
        parts.push(format!("conv width {}", cfg.conv_filter_width));
    }
    if cfg.use_position_encoding {
        parts.push("position encoding".into());
    }
    if !cfg.two_char_embedding {
        parts.push("single-character tokens".into());
    }
    parts.join(", ")
}

/// Trains one model per seed (up to `jobs` at a time) and, when
/// `run_dir` is given, writes `config.json`, `vocab.tsv`,
/// `seed<k>.samtl`, `best.samtl`, `metrics.csv` and `result.json`.
///
/// Returns the result and each seed's selected weights, in seed order.
pub fn run_experiment(
    data: &PreparedData,
    model: &ModelConfig,
    train: &TrainConfig,
    jobs: usize,
    run_dir: Option<&Path>,
) -> Result<(ExperimentResult, Vec<ModelParams<f32>>)> {
    train.validate()?;
    let cfg = ModelConfig { num_tasks: data.task_names.len(), ..model.clone() };
    cfg.validate()?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let snapshot = serde_json::json!({
            "model": cfg,
            "train": train,
            "task_names": data.task_names,
            "balancing_bias": data.weights(),
            "vocab_size": data.vocab.len(),
        });
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
        std::fs::write(dir.join("vocab.tsv"), data.vocab.to_tsv())?;
    }

    let run_seed = |seed: u64| -> Result<FitOutput> {
        let params = init_params(&cfg, data.vocab.len(), &data.heads, seed)?;
        log::info!("seed {seed}: training {} parameters on {} molecules", params.param_count(), data.train.len());
        fit(params, data, train, seed)
    };
    let mut outputs = Vec::with_capacity(train.seeds.len());
    for group in train.seeds.chunks(jobs.max(1)) {
        if group.len() == 1 {
            outputs.push(run_seed(group[0])?);
            continue;
        }
        let results: Vec<Result<FitOutput>> = std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for r in results {
            outputs.push(r?);
        }
    }

    let models: Vec<ModelParams<f32>> = outputs.iter().map(|o| o.best.clone()).collect();
    let runs: Vec<RunResult> = outputs.into_iter().map(|o| o.result).collect();
    let seeds: Vec<SeedSummary> = runs
        .iter()
        .map(|r| SeedSummary {
            seed: r.seed,
            best_epoch: r.best_epoch,
            epochs_run: r.epochs.len(),
            valid_mean_auc: r.best_valid.mean_auc,
            test_mean_auc: r.test.mean_auc,
            test_per_task_auc: r.test.per_task_auc.clone(),
            wall_clock_secs: r.wall_clock_secs,
        })
        .collect();
    let (mean_test_auc, std_test_auc) = mean_std(&seeds.iter().map(|s| s.test_mean_auc).collect::<Vec<_>>());
    let ensemble_test = if data.test.is_empty() {
        None
    } else {
        let ens = Ensemble::new(models.clone())?;
        Some(evaluate(&ens, &data.task_names, &data.test.inputs, &data.test.labels)?)
    };
    let best = runs
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let key = |r: &RunResult| r.best_valid.mean_auc.unwrap_or(f64::NEG_INFINITY);
            key(a).total_cmp(&key(b)).then(b.seed.cmp(&a.seed))
        })
        .map(|(i, _)| i)
        .expect("at least one seed");
    let result = ExperimentResult {
        model: "self-attention multi-task".into(),
        notes: describe(&cfg),
        task_names: data.task_names.clone(),
        param_count: models[0].param_count(),
        seeds,
        mean_test_auc,
        std_test_auc,
        ensemble_test,
        best_seed: runs[best].seed,
        warnings: data.warnings.clone(),
        runs,
    };

    if let Some(dir) = run_dir {
        for (r, m) in result.runs.iter().zip(&models) {
            save_checkpoint(&dir.join(format!("seed{}.samtl", r.seed)), m, &data.task_names)?;
        }
        save_checkpoint(&dir.join("best.samtl"), &models[best], &data.task_names)?;
        write_metrics_csv(&dir.join("metrics.csv"), &result.runs)?;
        std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok((result, models))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Rows `seed,epoch,task,split,auc,loss`. Task `mean` carries the
/// averaged AUC and the overall loss; test rows use the best epoch.
pub fn write_metrics_csv(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "epoch", "task", "split", "auc", "loss"])?;
    for r in runs {
        for e in &r.epochs {
            let (seed, epoch) = (r.seed.to_string(), e.epoch.to_string());
            w.write_record([&seed, &epoch, "mean", "train", "", &format!("{:.6}", e.train_loss)])?;
            if let Some(v) = &e.valid {
                let losses = e.valid_task_loss.clone().unwrap_or_default();
                for (t, name) in v.task_names.iter().enumerate() {
                    let loss = losses.get(t).copied().flatten();
                    w.write_record([&seed, &epoch, name, "valid", &fmt_opt(v.per_task_auc[t]), &fmt_opt(loss)])?;
                }
                w.write_record([&seed, &epoch, "mean", "valid", &fmt_opt(v.mean_auc), &fmt_opt(e.valid_loss)])?;
            }
        }
        let (seed, epoch) = (r.seed.to_string(), r.best_epoch.to_string());
        for (t, name) in r.test.task_names.iter().enumerate() {
            w.write_record([&seed, &epoch, name, "test", &fmt_opt(r.test.per_task_auc[t]), ""])?;
        }
        w.write_record([&seed, &epoch, "mean", "test", &fmt_opt(r.test.mean_auc), ""])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub config: ModelConfig,
    /// `false` trains a separate single-task model per task.
    pub multitask: bool,
}

fn variant(name: &str, config: ModelConfig, multitask: bool) -> AblationVariant {
    AblationVariant { name: name.into(), config, multitask }
}

/// The full model and the eight single-change variants.
pub fn ablation_variants(base: &ModelConfig) -> Vec<AblationVariant> {
    let b = || base.clone();
    vec![
        variant("full model", b(), true),
        variant("- Two-Character Embedding", ModelConfig { two_char_embedding: false, ..b() }, true),
        variant("- Multi-task Learning", b(), false),
        variant("- Self Attention Module", ModelConfig { use_self_attention: false, ..b() }, true),
        variant("- CNN", ModelConfig { use_cnn: false, embed_size: base.hidden_size, ..b() }, true),
        variant("CNN<>RNN", ModelConfig { use_cnn: false, use_rnn_instead_of_cnn: true, ..b() }, true),
        variant(
            "Discrete Output Layer<>Max Pooling",
            ModelConfig { head_kind: crate::model::HeadKind::MaxPool, ..b() },
            true,
        ),
        variant("+ Multi-head (5)", ModelConfig { num_heads: 5, ..b() }, true),
        variant("+ Position encoding", ModelConfig { use_position_encoding: true, ..b() }, true),
    ]
}

/// Heads directly on the token embeddings: no convolution, no attention.
pub fn degenerate_variant(base: &ModelConfig) -> AblationVariant {
    variant(
        "- CNN - Self Attention Module",
        ModelConfig { use_cnn: false, use_self_attention: false, embed_size: base.hidden_size, ..base.clone() },
        true,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Mean over seeds of the per-seed mean test AUC.
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    pub per_seed: Vec<Option<f64>>,
    pub diverged: bool,
    pub error: Option<String>,
}

fn slug(name: &str) -> String {
    let s: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Runs every variant on the same split. A variant whose loss diverges
/// is reported in its row instead of aborting the matrix. Each variant
/// gets a subdirectory of `out_dir` when one is given.
pub fn run_ablation(
    table: &DatasetTable,
    split: &Split,
    variants: &[AblationVariant],
    train: &TrainConfig,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        log::info!("ablation: {}", v.name);
        let dir = out_dir.map(|d| d.join(slug(&v.name)));
        let outcome = run_variant(table, split, v, train, jobs, dir.as_deref());
        let row = match outcome {
            Ok(per_seed) => {
                let (mean_auc, std_auc) = mean_std(&per_seed);
                AblationRow { name: v.name.clone(), mean_auc, std_auc, per_seed, diverged: false, error: None }
            }
            Err(e @ TrainError::DivergedLoss { .. }) => AblationRow {
                name: v.name.clone(),
                mean_auc: None,
                std_auc: None,
                per_seed: Vec::new(),
                diverged: true,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("ablation.csv"))?;
        f.write_all(ablation_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// Per-seed mean test AUC of one variant.
fn run_variant(
    table: &DatasetTable,
    split: &Split,
    v: &AblationVariant,
    train: &TrainConfig,
    jobs: usize,
    dir: Option<&Path>,
) -> Result<Vec<Option<f64>>> {
    let mode = v.config.tokenize_mode();
    let max_len = v.config.max_seq_len;
    if v.multitask {
        let data = prepare(table, split, None, None, mode, max_len)?;
        let (res, _) = run_experiment(&data, &v.config, train, jobs, dir)?;
        return Ok(res.seeds.iter().map(|s| s.test_mean_auc).collect());
    }
    let mut per_task: Vec<Vec<Option<f64>>> = Vec::new();
    for t in 0..table.num_tasks() {
        let data = match prepare(table, split, None, Some(t), mode, max_len) {
            Err(TrainError::NoTrainableTasks) => continue,
            other => other?,
        };
        let sub = dir.map(|d| d.join(slug(&table.task_names[t])));
        let (res, _) = run_experiment(&data, &v.config, train, jobs, sub.as_deref())?;
        per_task.push(res.seeds.iter().map(|s| s.test_mean_auc).collect());
    }
    if per_task.is_empty() {
        return Err(TrainError::NoTrainableTasks);
    }
    Ok((0..train.seeds.len()).map(|k| mean_std(&per_task.iter().map(|p| p[k]).collect::<Vec<_>>()).0).collect())
}

/// `config,mean_auc,std_auc,diverged` with one line per row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "mean_auc", "std_auc", "diverged"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.name.as_str(), &fmt_opt(r.mean_auc), &fmt_opt(r.std_auc), &r.diverged.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}
