//! Acceptance criteria, one line per criterion. Runs as a plain binary so
//! the report is always printed; exits non-zero when any criterion fails.
//!
//! Benchmark CSVs are read from `SAMTL_DATA_DIR` (default `<workspace>/data`)
//! and downloaded there when absent.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samtl::data::{
    fetch_dataset, load_csv, load_csv_bytes, split, DatasetTable, Preset, Split, SplitMethod, SplitSpec,
};
use samtl::gradsuite::{end_to_end_check, op_checks, reduced_default_config};
use samtl::metrics::{evaluate, roc_auc};
use samtl::molgraph::smiles_scaffold_key;
use samtl::tokenizer::{detokenize, segment, tokenize, Vocabulary};
use samtl::train::{ablation_variants, degenerate_variant, prepare, run_ablation, run_experiment, Ensemble};
use samtl::{LoadOptions, ModelConfig, TokenizeMode, TrainConfig};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ROUNDTRIP_BUDGET: Duration = Duration::from_secs(30);
const AUC_INSTANCES: usize = 1000;
const AUC_MAX_N: usize = 200;
const AUC_TOLERANCE: f64 = 1e-12;
const SPLIT_SEEDS: u64 = 50;
const STRATIFIED_RATE_SPREAD: f64 = 0.02;
const OVERFIT_MOLECULES: usize = 100;
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_AUC: f64 = 0.99;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const SEEDS: u64 = 5;
const CLINTOX_MIN_AUC: f64 = 0.90;
const CLINTOX_BUDGET: Duration = Duration::from_secs(20 * 60);
const BBBP_MIN_AUC: f64 = 0.80;
const BBBP_BUDGET: Duration = Duration::from_secs(30 * 60);
const ENSEMBLE_SLACK: f64 = 0.01;
const ENSEMBLE_COPY_TOLERANCE: f64 = 1e-7;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn data_dir() -> PathBuf {
    std::env::var_os("SAMTL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn preset_for(dataset: &str) -> &'static Preset {
    let name = match dataset {
        "bbbp" => "bbbp-scaffold",
        "clintox" => "clintox-random",
        "hiv" => "hiv-scaffold",
        "sider" => "sider-random",
        _ => "tox21-phase1",
    };
    Preset::find(name).expect("preset exists")
}

/// Loads a benchmark through its preset, downloading it first if needed.
fn benchmark(dataset: &str, model: &ModelConfig) -> Result<DatasetTable, String> {
    let dir = data_dir();
    std::fs::create_dir_all(&dir).map_err(|e| format!("BLOCKED: {}: {e}", dir.display()))?;
    let fetched = fetch_dataset(dataset, &dir).map_err(|e| format!("BLOCKED: {dataset} unavailable: {e}"))?;
    let opts =
        LoadOptions { tokenize_mode: model.tokenize_mode(), ..preset_for(dataset).load_options(model.max_seq_len) };
    load_csv(&fetched.path, &opts).map_err(|e| format!("{dataset}: {e}"))
}

fn within(start: Instant, budget: Duration) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if start.elapsed() > budget {
        return Err(format!("took {secs:.0} s, budget {} s", budget.as_secs()));
    }
    Ok(secs)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut ops_max: f64 = 0.0;
    let mut count = 0;
    for seed in 0..10 {
        for o in op_checks(seed).map_err(|e| e.to_string())? {
            if !o.passed() {
                return Err(format!("{} seed {}: rel error {:.3e} > {:e}", o.name, seed, o.max_rel_error, o.tolerance));
            }
            ops_max = ops_max.max(o.max_rel_error);
            count += 1;
        }
    }
    let base = reduced_default_config();
    let mut net_max: f64 = 0.0;
    for v in ablation_variants(&base).into_iter().chain([degenerate_variant(&base)]) {
        let cfg = if v.multitask { v.config } else { ModelConfig { num_tasks: 1, ..v.config } };
        let o = end_to_end_check(&v.name, &cfg, 0, samtl::gradsuite::END_TO_END_SAMPLES).map_err(|e| e.to_string())?;
        if !o.passed() {
            return Err(format!("network {}: rel error {:.3e} > {:e}", o.name, o.max_rel_error, o.tolerance));
        }
        net_max = net_max.max(o.max_rel_error);
    }
    let secs = within(start, GRADCHECK_BUDGET)?;
    Ok(format!("{count} op checks max rel {ops_max:.2e}; 10 networks max rel {net_max:.2e}; {secs:.1} s"))
}

fn tokenizer_round_trip() -> Outcome {
    let start = Instant::now();
    let model = ModelConfig::default();
    let mut total = 0;
    for name in samtl::data::DATASET_NAMES {
        let table = benchmark(name, &model)?;
        let smiles = table.smiles();
        let vocab = Vocabulary::build(&smiles, TokenizeMode::TwoCharAtoms).map_err(|e| e.to_string())?;
        for s in smiles {
            let seq = tokenize(s, &vocab, model.max_seq_len).map_err(|e| format!("{name}: {s}: {e}"))?;
            let back = detokenize(&seq, &vocab).map_err(|e| e.to_string())?;
            if back != s {
                return Err(format!("{name}: {s} came back as {back}"));
            }
            let toks = segment(s, TokenizeMode::TwoCharAtoms).map_err(|e| e.to_string())?;
            if toks.iter().any(|t| t.text == "l" || t.text == "r") {
                return Err(format!("{name}: {s} has a split halogen"));
            }
            total += 1;
        }
    }
    let secs = within(start, ROUNDTRIP_BUDGET)?;
    Ok(format!("{total} SMILES round-trip over 5 datasets; {secs:.1} s"))
}

/// Pairwise definition: P(score_pos > score_neg) with ties counted half.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..AUC_INSTANCES {
        let n = rng.gen_range(2..=AUC_MAX_N);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let tied = k % 2 == 0;
        let scores: Vec<f64> =
            (0..n).map(|_| if tied { f64::from(rng.gen_range(0..5u8)) / 4.0 } else { rng.gen::<f64>() }).collect();
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let diff = (got - pairwise_auc(&scores, &labels)).abs();
        if diff > AUC_TOLERANCE {
            return Err(format!("instance {k} (n {n}): off by {diff:e}"));
        }
        worst = worst.max(diff);
    }
    Ok(format!("{AUC_INSTANCES} instances, max deviation {worst:.1e}"))
}

fn check_partition(s: &Split, n: usize, what: &str) -> Result<(), String> {
    let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
    all.sort_unstable();
    if all != (0..n).collect::<Vec<_>>() {
        return Err(format!("{what}: parts are not a disjoint cover of {n} rows"));
    }
    Ok(())
}

fn positive_rate(table: &DatasetTable, rows: &[usize]) -> f64 {
    let c = table.aggregate_counts(Some(rows));
    c.positives as f64 / (c.positives + c.negatives) as f64
}

fn split_correctness() -> Outcome {
    let table = benchmark("bbbp", &ModelConfig::default())?;
    let keys: Vec<String> = table
        .records
        .iter()
        .map(|r| smiles_scaffold_key(&r.smiles).map(|k| k.0).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let mut spread_max: f64 = 0.0;
    for seed in 0..SPLIT_SEEDS {
        for method in [SplitMethod::Random, SplitMethod::Stratified, SplitMethod::Scaffold] {
            let s = split(&table, &SplitSpec::new(method, seed)).map_err(|e| e.to_string())?;
            check_partition(&s, table.len(), &format!("{method:?} seed {seed}"))?;
            match method {
                SplitMethod::Scaffold => {
                    let set = |rows: &[usize]| rows.iter().map(|&i| keys[i].clone()).collect::<HashSet<_>>();
                    let (a, b, c) = (set(&s.train), set(&s.valid), set(&s.test));
                    if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
                        return Err(format!("scaffold seed {seed}: a scaffold spans two parts"));
                    }
                }
                SplitMethod::Stratified => {
                    let rates = [&s.train, &s.valid, &s.test].map(|r| positive_rate(&table, r));
                    let spread =
                        rates.iter().cloned().fold(f64::MIN, f64::max) - rates.iter().cloned().fold(f64::MAX, f64::min);
                    if spread > STRATIFIED_RATE_SPREAD {
                        return Err(format!("stratified seed {seed}: positive rates {rates:?}"));
                    }
                    spread_max = spread_max.max(spread);
                }
                SplitMethod::Random => {}
            }
        }
    }
    Ok(format!("{SPLIT_SEEDS} seeds x 3 methods on {} molecules; stratified spread {spread_max:.4}", table.len()))
}

fn esol_fixture(model: &ModelConfig) -> Result<DatasetTable, String> {
    let opts = LoadOptions {
        smiles_column: "smiles".into(),
        task_columns: Some(vec!["soluble".into(), "polar".into()]),
        max_seq_len: model.max_seq_len,
        tokenize_mode: model.tokenize_mode(),
    };
    load_csv_bytes(include_bytes!("data/esol.csv"), &opts).map_err(|e| e.to_string())
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let model = ModelConfig::default();
    let table = esol_fixture(&model)?.single_task(0);
    let table = table.subset(&(0..OVERFIT_MOLECULES).collect::<Vec<_>>());
    let all: Vec<usize> = (0..table.len()).collect();
    // Every part is the training set, so the monitored AUC is training AUC.
    let parts = Split { train: all.clone(), valid: all.clone(), test: all, scaffold_keys: None, warnings: vec![] };
    let data =
        prepare(&table, &parts, None, None, model.tokenize_mode(), model.max_seq_len).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        max_epochs: OVERFIT_EPOCHS,
        patience: OVERFIT_EPOCHS,
        seeds: vec![0],
        target_valid_auc: Some(0.995),
        ..TrainConfig::default()
    };
    let (res, _) = run_experiment(&data, &model, &train, 1, None).map_err(|e| e.to_string())?;
    let s = &res.seeds[0];
    let auc = s.valid_mean_auc.unwrap_or(0.0);
    let secs = within(start, OVERFIT_BUDGET)?;
    let msg = format!("training AUC {auc:.4} at epoch {} of {OVERFIT_EPOCHS}; {secs:.0} s", s.best_epoch);
    if auc > OVERFIT_AUC {
        Ok(msg)
    } else {
        Err(msg)
    }
}

struct ClintoxRun {
    mean_auc: f64,
    ensemble_auc: f64,
    secs: f64,
}

fn desk_scale(dataset: &str) -> Result<ClintoxRun, String> {
    let start = Instant::now();
    let model = ModelConfig::default();
    let table = benchmark(dataset, &model)?;
    let parts = split(&table, &SplitSpec::new(preset_for(dataset).split, 0)).map_err(|e| e.to_string())?;
    let data =
        prepare(&table, &parts, None, None, model.tokenize_mode(), model.max_seq_len).map_err(|e| e.to_string())?;
    let train = TrainConfig { seeds: (0..SEEDS).collect(), ..TrainConfig::default() };
    let (res, _) = run_experiment(&data, &model, &train, 1, None).map_err(|e| e.to_string())?;
    Ok(ClintoxRun {
        mean_auc: res.mean_test_auc.ok_or("no test AUC")?,
        ensemble_auc: res.ensemble_test.and_then(|e| e.mean_auc).ok_or("no ensemble AUC")?,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn threshold(run: &Result<ClintoxRun, String>, min: f64, budget: Duration) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let msg = format!("mean test AUC {:.4} (need {min}); {:.0} s", r.mean_auc, r.secs);
    if r.mean_auc >= min && r.secs <= budget.as_secs_f64() {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn directional_ablations() -> Outcome {
    let model = ModelConfig::default();
    let table = benchmark("clintox", &model)?;
    let parts = split(&table, &SplitSpec::new(SplitMethod::Random, 0)).map_err(|e| e.to_string())?;
    let mut variants = ablation_variants(&model);
    variants.push(degenerate_variant(&model));
    let train = TrainConfig { seeds: (0..SEEDS).collect(), ..TrainConfig::default() };
    let rows = run_ablation(&table, &parts, &variants, &train, 1, None).map_err(|e| e.to_string())?;
    let auc = |name: &str| rows.iter().find(|r| r.name == name).and_then(|r| r.mean_auc);
    let full = auc("full model").ok_or("full model has no AUC")?;
    let no_sa = auc("- Self Attention Module").ok_or("no-attention variant has no AUC")?;
    let no_mtl = auc("- Multi-task Learning").ok_or("single-task variant has no AUC")?;
    let degenerate = auc(&degenerate_variant(&model).name).ok_or("degenerate variant has no AUC")?;
    let diverged: Vec<&str> =
        rows.iter().filter(|r| r.diverged || r.error.is_some()).map(|r| r.name.as_str()).collect();
    let msg = format!("full {full:.4}, -SA {no_sa:.4}, -MTL {no_mtl:.4}, degenerate {degenerate:.4}");
    if !diverged.is_empty() {
        return Err(format!("{msg}; failed: {}", diverged.join(", ")));
    }
    if no_sa == full || no_mtl == full {
        return Err(format!("{msg}; a toggle had no effect"));
    }
    if full < degenerate {
        return Err(format!("{msg}; full model below degenerate"));
    }
    Ok(msg)
}

fn ensemble_gain(run: &Result<ClintoxRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let msg = format!("ensemble {:.4} vs mean single {:.4}", r.ensemble_auc, r.mean_auc);
    if r.ensemble_auc >= r.mean_auc - ENSEMBLE_SLACK {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ensemble_of_copies() -> Outcome {
    let model = ModelConfig {
        embed_size: 16,
        hidden_size: 16,
        ffn_size: 32,
        num_sa_layers: 1,
        num_heads: 2,
        max_seq_len: 120,
        ..ModelConfig::default()
    };
    let table = esol_fixture(&model)?;
    let parts = split(&table, &SplitSpec::new(SplitMethod::Random, 0)).map_err(|e| e.to_string())?;
    let data =
        prepare(&table, &parts, None, None, model.tokenize_mode(), model.max_seq_len).map_err(|e| e.to_string())?;
    let train = TrainConfig { max_epochs: 3, seeds: vec![1], learning_rate: 1e-3, ..TrainConfig::default() };
    let (_, models) = run_experiment(&data, &model, &train, 1, None).map_err(|e| e.to_string())?;
    let single = &models[0];
    let copies = Ensemble::new(vec![single.clone(); 5]).map_err(|e| e.to_string())?;
    let a = evaluate(single, &data.task_names, &data.test.inputs, &data.test.labels).map_err(|e| e.to_string())?;
    let b = evaluate(&copies, &data.task_names, &data.test.inputs, &data.test.labels).map_err(|e| e.to_string())?;
    let (a, b) = (a.mean_auc.ok_or("no AUC")?, b.mean_auc.ok_or("no AUC")?);
    let msg = format!("single {a:.9}, five copies {b:.9}");
    if (a - b).abs() <= ENSEMBLE_COPY_TOLERANCE {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reproduction_path() -> Outcome {
    let p = Preset::find("tox21-phase1").ok_or("tox21-phase1 preset missing")?;
    let opts = p.load_options(ModelConfig::default().max_seq_len);
    let tasks = opts.task_columns.map_or(0, |t| t.len());
    if p.dataset != "tox21" || tasks != 12 || p.split != SplitMethod::Random {
        return Err(format!("tox21-phase1 resolves to {} with {tasks} tasks", p.dataset));
    }
    Ok("preset tox21-phase1: tox21, 12 tasks, random split (samtl train tox21-phase1)".into())
}

fn main() {
    let clintox = std::cell::OnceCell::new();
    let clintox_run = || clintox.get_or_init(|| desk_scale("clintox"));
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", Box::new(gradient_correctness)),
        ("2 tokenizer round-trip", Box::new(tokenizer_round_trip)),
        ("3 AUC oracle equivalence", Box::new(auc_oracle)),
        ("4 split correctness", Box::new(split_correctness)),
        ("5 overfit sanity", Box::new(overfit_sanity)),
        ("6 desk-scale ClinTox", Box::new(|| threshold(clintox_run(), CLINTOX_MIN_AUC, CLINTOX_BUDGET))),
        ("7 desk-scale BBBP", Box::new(|| threshold(&desk_scale("bbbp"), BBBP_MIN_AUC, BBBP_BUDGET))),
        ("8 directional ablations", Box::new(directional_ablations)),
        ("9a ensemble vs single seeds", Box::new(|| ensemble_gain(clintox_run()))),
        ("9b ensemble of copies", Box::new(ensemble_of_copies)),
        ("10 full reproduction path", Box::new(reproduction_path)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("PASS  {name:<30} {detail}"),
            Err(detail) => {
                println!("FAIL  {name:<30} {detail}");
                failed.push(*name);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
