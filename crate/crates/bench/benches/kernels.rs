use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use samtl::model::{forward_logits, init_params};
use samtl::tokenizer::{tokenize, TokenizeMode};
use samtl::{ModelConfig, Tape, TaskHeadSpec, Tensor, TokenSequence, Vocabulary};

const SMILES: [&str; 6] = [
    "CCC(=O)Nc1ccc(Cl)c(Cl)c1",
    "OC(=O)c1ccccc1Br",
    "CN1CCC[C@H]1c2cccnc2",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "O=C(O)CC(O)(CC(=O)O)C(=O)O",
    "c1ccc2c(c1)[nH]c1ccccc12",
];

fn filled(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 101) as f32 / 101.0 - 0.5)
}

fn matmul(c: &mut Criterion) {
    let a = filled(&[240, 128]);
    let b = filled(&[128, 1024]);
    c.bench_function("matmul 240x128x1024 forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (x, w) = (tape.param(a.clone()), tape.param(b.clone()));
            let y = tape.matmul(x, w).unwrap();
            let s = tape.mean_lastdim(y).unwrap();
            let s = tape.mean_lastdim(s).unwrap();
            tape.backward(s).unwrap();
            black_box(tape.grad(w).map(|g| g[0]))
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = filled(&[240, 128]);
    let w = filled(&[7, 128, 128]);
    let segments = [40, 40, 40, 40, 40, 40];
    c.bench_function("packed conv width 7, 240 tokens, 128 channels", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.param(w.clone()));
            black_box(tape.conv1d_same(xv, wv, Some(&segments)).unwrap())
        })
    });
}

fn forward(c: &mut Criterion) {
    let vocab = Vocabulary::build(&SMILES, TokenizeMode::TwoCharAtoms).unwrap();
    let cfg = ModelConfig { num_tasks: 12, dropout_rate: 0.0, ..ModelConfig::default() };
    let heads: Vec<TaskHeadSpec> =
        (0..cfg.num_tasks).map(|t| TaskHeadSpec { task_index: t, balancing_bias: 13.4 }).collect();
    let params = init_params(&cfg, vocab.len(), &heads, 0).unwrap();
    let batch: Vec<TokenSequence> =
        SMILES.iter().cycle().take(60).map(|s| tokenize(s, &vocab, cfg.max_seq_len).unwrap()).collect();
    let mut group = c.benchmark_group("default network");
    group.sample_size(10);
    group.bench_function("forward, 60 molecules, 12 tasks", |bench| {
        bench.iter(|| black_box(forward_logits(&params, &batch).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, conv, forward);
criterion_main!(benches);
