use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::json;

use samtl::data::{
    dataset_file_name, fetch_dataset_from, load_csv, split, write_split_csvs, DatasetTable, LoadOptions, Preset,
    SplitMethod, SplitSpec, PRESETS,
};
use samtl::gradsuite::{end_to_end_check, op_checks, reduced_default_config, CheckOutcome};
use samtl::metrics::{evaluate, AucResult, Predictor};
use samtl::model::{attention_maps, encode, HeadKind, ModelConfig};
use samtl::molgraph::{parse_smiles, smiles_scaffold_key};
use samtl::tokenizer::{segment, tokenize, TokenizeMode, Vocabulary};
use samtl::train::{
    ablation_csv, ablation_variants, degenerate_variant, load_checkpoint, prepare, run_ablation, run_experiment,
    Checkpoint, Ensemble, TrainConfig,
};

use crate::run_dir::RunDir;
use crate::{
    AblateArgs, Cli, Command, ConfigArgs, DataArgs, EncodeArgs, EvaluateArgs, FetchArgs, GradcheckArgs, HeadArg,
    NumericFailure, PredictArgs, SplitArg, TokenizeArgs, TrainArgs, UsageError,
};

pub fn run(cli: Cli) -> Result<()> {
    let Cli { run_root, data_dir, command, .. } = cli;
    match command {
        Command::Presets => {
            for p in &PRESETS {
                println!("{:<16} {}", p.name, p.description);
            }
            Ok(())
        }
        Command::Fetch(a) => with_run(&run_root, None, "fetch", |rd| fetch(rd, &data_dir, &a)),
        Command::Tokenize(a) => with_run(&run_root, None, "tokenize", |rd| tokenize_csv(rd, &a)),
        Command::Train(a) => with_run(&run_root, a.out.as_deref(), "train", |rd| train(rd, &data_dir, &a)),
        Command::Evaluate(a) => with_run(&run_root, None, "evaluate", |rd| evaluate_run(rd, &a)),
        Command::Predict(a) => with_run(&run_root, None, "predict", |rd| predict(rd, &a)),
        Command::Ablate(a) => with_run(&run_root, a.out.as_deref(), "ablate", |rd| ablate(rd, &data_dir, &a)),
        Command::Gradcheck(a) => with_run(&run_root, None, "gradcheck", |rd| gradcheck(rd, &a)),
        Command::Encode(a) => with_run(&run_root, None, "encode", |rd| encode_smiles(rd, &a)),
    }
}

fn with_run(root: &Path, out: Option<&Path>, name: &str, f: impl FnOnce(&mut RunDir) -> Result<()>) -> Result<()> {
    let mut rd = RunDir::create(root, out, name)?;
    rd.write_manifest()?;
    let outcome = f(&mut rd);
    rd.finish(&outcome)?;
    eprintln!("run directory: {}", rd.path.display());
    outcome
}

/// Writes to stdout; a closed pipe (as with `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn fetch(rd: &mut RunDir, data_dir: &Path, a: &FetchArgs) -> Result<()> {
    rd.manifest.config = json!({ "dataset": a.dataset, "base_url": a.base_url, "data_dir": data_dir });
    rd.write_manifest()?;
    std::fs::create_dir_all(data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    let out = fetch_dataset_from(&a.dataset, data_dir, &a.base_url)?;
    rd.manifest.datasets.insert(out.path.display().to_string(), out.sha256.clone());
    let state = if out.downloaded { "downloaded" } else { "already present" };
    println!("{}\t{}\t{state}", out.path.display(), out.sha256);
    Ok(())
}

fn tokenize_csv(rd: &mut RunDir, a: &TokenizeArgs) -> Result<()> {
    rd.add_dataset(&a.csv)?;
    rd.manifest.config = json!({ "csv": a.csv, "smiles_column": a.smiles_column, "scaffolds": a.scaffolds });
    rd.write_manifest()?;
    let mode = if a.single_char { TokenizeMode::SingleChar } else { TokenizeMode::TwoCharAtoms };
    let mut reader = csv::Reader::from_path(&a.csv).with_context(|| format!("reading {}", a.csv.display()))?;
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == a.smiles_column)
        .ok_or_else(|| anyhow::anyhow!("{} has no column {:?}", a.csv.display(), a.smiles_column))?;
    let mut out = String::new();
    let mut failed = 0;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let smiles = rec.get(col).unwrap_or("").trim();
        let line = if a.scaffolds {
            smiles_scaffold_key(smiles).map(|k| k.0).map_err(|e| e.to_string())
        } else {
            parse_smiles(smiles).map_err(|e| e.to_string()).and_then(|_| {
                segment(smiles, mode)
                    .map(|t| t.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" "))
                    .map_err(|e| e.to_string())
            })
        };
        match line {
            Ok(l) => out.push_str(&format!("{smiles}\t{l}\n")),
            Err(e) => {
                failed += 1;
                eprintln!("row {}: {smiles:?}: {e}", row + 1);
            }
        }
    }
    emit(&out)?;
    let name = if a.scaffolds { "scaffolds.tsv" } else { "tokens.tsv" };
    std::fs::write(rd.path.join(name), out)?;
    if failed > 0 {
        eprintln!("{failed} rows could not be processed");
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

/// Defaults, then the config file, then flags.
fn resolve_config(c: &ConfigArgs) -> Result<(ModelConfig, TrainConfig)> {
    let file: ConfigFile = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let mut m = file.model.unwrap_or_default();
    let mut t = file.train.unwrap_or_default();
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(m.max_seq_len, c.max_seq_len);
    set!(m.num_sa_layers, c.sa_layers);
    set!(m.num_heads, c.heads);
    set!(m.embed_size, c.embed_size);
    set!(m.hidden_size, c.hidden_size);
    set!(m.ffn_size, c.ffn_size);
    set!(m.conv_filter_width, c.filter_width);
    set!(m.dropout_rate, c.dropout);
    set!(
        m.head_kind,
        c.head.map(|h| match h {
            HeadArg::DiscreteOutput => HeadKind::DiscreteOutput,
            HeadArg::MaxPool => HeadKind::MaxPool,
        })
    );
    m.use_position_encoding |= c.position_encoding;
    m.use_self_attention &= !c.no_self_attention;
    m.use_cnn &= !(c.no_cnn || c.rnn);
    m.use_rnn_instead_of_cnn |= c.rnn;
    m.two_char_embedding &= !c.single_char;
    set!(t.max_epochs, c.max_epochs);
    set!(t.patience, c.patience);
    set!(t.batch_size, c.batch_size);
    set!(t.learning_rate, c.learning_rate);
    set!(t.eval_every, c.eval_every);
    if let Some(k) = c.seeds {
        t.seeds = (c.seed_base..c.seed_base + k as u64).collect();
    }
    if c.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    m.validate().map_err(|e| usage(e.to_string()))?;
    t.validate().map_err(|e| usage(e.to_string()))?;
    Ok((m, t))
}

struct Input {
    table: DatasetTable,
    score: Option<DatasetTable>,
    method: SplitMethod,
    preset: Option<&'static Preset>,
    files: Vec<PathBuf>,
}

fn load_input(d: &DataArgs, data_dir: &Path, model: &ModelConfig) -> Result<Input> {
    let mode = model.tokenize_mode();
    let (path, opts, preset) = match Preset::find(&d.input) {
        Some(p) => {
            let path = data_dir.join(dataset_file_name(p.dataset)?);
            if !path.is_file() {
                bail!("{} not found; run `samtl fetch {}` first", path.display(), p.dataset);
            }
            let opts = LoadOptions { tokenize_mode: mode, ..p.load_options(model.max_seq_len) };
            (path, opts, Some(p))
        }
        None => {
            let path = PathBuf::from(&d.input);
            if !path.is_file() {
                bail!("{} is neither a preset nor a readable file", d.input);
            }
            let opts = LoadOptions {
                smiles_column: d.smiles_column.clone(),
                task_columns: d.tasks.clone(),
                max_seq_len: model.max_seq_len,
                tokenize_mode: mode,
            };
            (path, opts, None)
        }
    };
    if preset.is_some_and(|p| p.external_test) && d.score_csv.is_none() {
        return Err(usage(format!("preset {} needs --score-csv", d.input)));
    }
    let table = load_csv(&path, &opts)?;
    if !table.dropped.is_empty() {
        log::warn!("{} rows of {} were not ingested", table.dropped.len(), path.display());
    }
    let mut files = vec![path];
    let score = match &d.score_csv {
        Some(p) => {
            let o = LoadOptions { task_columns: Some(table.task_names.clone()), ..opts };
            files.push(p.clone());
            Some(load_csv(p, &o)?)
        }
        None => None,
    };
    let method = match d.split {
        Some(SplitArg::Random) => SplitMethod::Random,
        Some(SplitArg::Stratified) => SplitMethod::Stratified,
        Some(SplitArg::Scaffold) => SplitMethod::Scaffold,
        None => preset.map_or(SplitMethod::Random, |p| p.split),
    };
    Ok(Input { table, score, method, preset, files })
}

fn split_spec(d: &DataArgs, method: SplitMethod) -> Result<SplitSpec> {
    let spec = SplitSpec { method, fractions: [d.fractions[0], d.fractions[1], d.fractions[2]], seed: d.split_seed };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn train(rd: &mut RunDir, data_dir: &Path, a: &TrainArgs) -> Result<()> {
    let (model, train_cfg) = resolve_config(&a.config)?;
    let input = load_input(&a.data, data_dir, &model)?;
    let spec = split_spec(&a.data, input.method)?;
    for f in &input.files {
        rd.add_dataset(f)?;
    }
    rd.manifest.config = json!({
        "input": a.data.input,
        "preset": input.preset.map(|p| p.name),
        "score_csv": a.data.score_csv,
        "split": spec,
        "model": model,
        "train": train_cfg,
        "jobs": a.config.jobs,
    });
    rd.manifest.seeds = train_cfg.seeds.clone();
    rd.write_manifest()?;

    let parts = split(&input.table, &spec)?;
    for w in &parts.warnings {
        log::warn!("{w}");
    }
    write_split_csvs(&input.table, &parts, &rd.path.join("splits"))?;
    let data = prepare(&input.table, &parts, input.score.as_ref(), None, model.tokenize_mode(), model.max_seq_len)?;
    println!(
        "{} molecules: {} train, {} valid, {} test; tasks: {}",
        input.table.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        data.task_names.join(", ")
    );
    let (res, _) = run_experiment(&data, &model, &train_cfg, a.config.jobs, Some(&rd.path))?;
    for s in &res.seeds {
        println!(
            "seed {}: best epoch {} of {}, valid AUC {}, test AUC {}",
            s.seed,
            s.best_epoch,
            s.epochs_run,
            fmt_auc(s.valid_mean_auc),
            fmt_auc(s.test_mean_auc)
        );
    }
    println!(
        "mean test AUC {} (sd {}) over {} seeds",
        fmt_auc(res.mean_test_auc),
        fmt_auc(res.std_test_auc),
        res.seeds.len()
    );
    if let Some(e) = &res.ensemble_test {
        println!("ensemble test AUC {}", fmt_auc(e.mean_auc));
    }
    Ok(())
}

struct LoadedRun {
    vocab: Vocabulary,
    best: Checkpoint,
    seeds: Vec<Checkpoint>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let best =
        load_checkpoint(&dir.join("best.samtl")).with_context(|| format!("loading {}/best.samtl", dir.display()))?;
    let text = std::fs::read_to_string(dir.join("vocab.tsv")).context("reading vocab.tsv")?;
    let vocab = Vocabulary::from_tsv(&text, best.params.config.tokenize_mode())?;
    if vocab.len() != best.params.vocab_size {
        bail!("vocab.tsv has {} entries but the checkpoint expects {}", vocab.len(), best.params.vocab_size);
    }
    let mut seeds: Vec<(u64, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let stem = p.file_name()?.to_str()?.strip_prefix("seed")?.strip_suffix(".samtl")?.parse().ok()?;
            Some((stem, p))
        })
        .collect();
    seeds.sort();
    let seeds = seeds.iter().map(|(_, p)| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(LoadedRun { vocab, best, seeds })
}

fn ensemble_of(run: &LoadedRun) -> Result<Ensemble> {
    if run.seeds.is_empty() {
        bail!("run directory has no seed checkpoints");
    }
    Ok(Ensemble::new(run.seeds.iter().map(|c| c.params.clone()).collect())?)
}

fn print_auc(label: &str, r: &AucResult) {
    for (name, auc) in r.task_names.iter().zip(&r.per_task_auc) {
        println!("{label}\t{name}\t{}", fmt_auc(*auc));
    }
    println!("{label}\tmean\t{}", fmt_auc(r.mean_auc));
}

fn evaluate_run(rd: &mut RunDir, a: &EvaluateArgs) -> Result<()> {
    rd.add_dataset(&a.csv)?;
    rd.manifest.config = json!({ "run": a.run, "csv": a.csv, "smiles_column": a.smiles_column });
    rd.write_manifest()?;
    let run = load_run(&a.run)?;
    let cfg = &run.best.params.config;
    let opts = LoadOptions {
        smiles_column: a.smiles_column.clone(),
        task_columns: Some(run.best.task_names.clone()),
        max_seq_len: cfg.max_seq_len,
        tokenize_mode: cfg.tokenize_mode(),
    };
    let table = load_csv(&a.csv, &opts)?;
    if table.is_empty() {
        bail!("{} has no usable rows", a.csv.display());
    }
    let inputs = table
        .records
        .iter()
        .map(|r| tokenize(&r.smiles, &run.vocab, cfg.max_seq_len))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<Vec<Option<bool>>> = table.records.iter().map(|r| r.labels.clone()).collect();
    let best = evaluate(&run.best.params, &run.best.task_names, &inputs, &labels)?;
    print_auc("best", &best);
    let ensemble = match ensemble_of(&run) {
        Ok(e) => Some(evaluate(&e, &run.best.task_names, &inputs, &labels)?),
        Err(_) => None,
    };
    if let Some(e) = &ensemble {
        print_auc("ensemble", e);
    }
    let report = json!({ "molecules": table.len(), "best": best, "ensemble": ensemble });
    std::fs::write(rd.path.join("evaluation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn predict(rd: &mut RunDir, a: &PredictArgs) -> Result<()> {
    rd.manifest.config = json!({ "run": a.run, "smiles": a.smiles, "ensemble": a.ensemble });
    rd.write_manifest()?;
    let run = load_run(&a.run)?;
    let max_len = run.best.params.config.max_seq_len;
    let inputs = a.smiles.iter().map(|s| tokenize(s, &run.vocab, max_len)).collect::<Result<Vec<_>, _>>()?;
    let probs =
        if a.ensemble { ensemble_of(&run)?.predict_proba(&inputs)? } else { run.best.params.predict_proba(&inputs)? };
    let mut out = String::new();
    for (i, s) in a.smiles.iter().enumerate() {
        for (t, name) in run.best.task_names.iter().enumerate() {
            out.push_str(&format!("{s}\t{name}\t{:.6}\n", probs[t][i]));
        }
    }
    emit(&out)?;
    std::fs::write(rd.path.join("predictions.tsv"), out)?;
    Ok(())
}

fn encode_smiles(rd: &mut RunDir, a: &EncodeArgs) -> Result<()> {
    rd.manifest.config = json!({ "run": a.run, "smiles": a.smiles, "dump_attention": a.dump_attention });
    rd.write_manifest()?;
    let run = load_run(&a.run)?;
    let params = &run.best.params;
    let max_len = params.config.max_seq_len;
    let batch = a.smiles.iter().map(|s| tokenize(s, &run.vocab, max_len)).collect::<Result<Vec<_>, _>>()?;
    let enc = encode(params, &batch)?;
    let width = enc.shape()[2];
    let mut w = csv::Writer::from_path(rd.path.join("encoding.csv"))?;
    let mut header = vec!["molecule".to_string(), "position".into(), "token".into()];
    header.extend((0..width).map(|f| format!("f{f}")));
    w.write_record(&header)?;
    for (m, seq) in batch.iter().enumerate() {
        for p in 0..seq.true_len {
            let start = (m * max_len + p) * width;
            let token = run.vocab.token(seq.ids[p]).unwrap_or("");
            let mut row = vec![m.to_string(), p.to_string(), token.to_string()];
            row.extend(enc.data()[start..start + width].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    println!("encoded {} molecules: shape {:?}", batch.len(), enc.shape());
    if let Some(path) = &a.dump_attention {
        let maps = attention_maps(params, &batch)?;
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["molecule", "layer", "head", "query_pos", "key_pos", "weight"])?;
        for (m, t) in &maps {
            let n = t.shape()[0];
            for q in 0..n {
                for k in 0..n {
                    let v = t.data()[q * n + k];
                    w.write_record([
                        m.item.to_string(),
                        m.layer.to_string(),
                        m.head.to_string(),
                        q.to_string(),
                        k.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        println!("wrote {} attention maps to {}", maps.len(), path.display());
    }
    Ok(())
}

fn gradcheck(rd: &mut RunDir, a: &GradcheckArgs) -> Result<()> {
    rd.manifest.config = json!({ "seeds": a.seeds, "samples": a.samples, "ops_only": a.ops_only });
    rd.write_manifest()?;
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    let line = |o: &CheckOutcome| {
        println!(
            "{} {:<40} seed {:>2}  max rel error {:.3e}  tol {:e}{}",
            if o.passed() { "PASS" } else { "FAIL" },
            o.name,
            o.seed,
            o.max_rel_error,
            o.tolerance,
            o.worst.as_ref().map(|w| format!("  worst {w}")).unwrap_or_default()
        );
    };
    for seed in 0..a.seeds {
        for o in op_checks(seed)? {
            line(&o);
            outcomes.push(o);
        }
    }
    let ops_max = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    println!("ops: {} checks, max relative error {ops_max:.3e}", outcomes.len());
    if !a.ops_only {
        let base = reduced_default_config();
        let variants = ablation_variants(&base).into_iter().chain([degenerate_variant(&base)]);
        let mut net_max: f64 = 0.0;
        for v in variants {
            let cfg = if v.multitask { v.config } else { ModelConfig { num_tasks: 1, ..v.config } };
            let o = end_to_end_check(&format!("network: {}", v.name), &cfg, 0, a.samples)?;
            line(&o);
            net_max = net_max.max(o.max_rel_error);
            outcomes.push(o);
        }
        println!("network: max relative error {net_max:.3e}");
    }
    std::fs::write(rd.path.join("gradcheck.json"), serde_json::to_string_pretty(&outcomes)?)?;
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    if failed > 0 {
        return Err(NumericFailure(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

fn ablate(rd: &mut RunDir, data_dir: &Path, a: &AblateArgs) -> Result<()> {
    if a.data.score_csv.is_some() {
        return Err(usage("ablate does not take --score-csv"));
    }
    let (model, train_cfg) = resolve_config(&a.config)?;
    let input = load_input(&a.data, data_dir, &model)?;
    let spec = split_spec(&a.data, input.method)?;
    for f in &input.files {
        rd.add_dataset(f)?;
    }
    let mut variants = ablation_variants(&model);
    if a.include_degenerate {
        variants.push(degenerate_variant(&model));
    }
    rd.manifest.config = json!({
        "input": a.data.input,
        "split": spec,
        "model": model,
        "train": train_cfg,
        "variants": variants,
        "jobs": a.config.jobs,
    });
    rd.manifest.seeds = train_cfg.seeds.clone();
    rd.write_manifest()?;
    let parts = split(&input.table, &spec)?;
    let rows = run_ablation(&input.table, &parts, &variants, &train_cfg, a.config.jobs, Some(&rd.path))?;
    let table = ablation_csv(&rows);
    emit(&table)?;
    let diverged: Vec<&str> = rows.iter().filter(|r| r.diverged).map(|r| r.name.as_str()).collect();
    if !diverged.is_empty() {
        return Err(NumericFailure(format!("diverged: {}", diverged.join(", "))).into());
    }
    Ok(())
}
