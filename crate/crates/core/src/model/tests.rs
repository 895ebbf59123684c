use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, grad_check_sampled, Tape};
use crate::tokenizer::{tokenize, TokenizeMode, Vocabulary};

/// Whole-network checks use a smaller step than single ops: with 1e-4 a
/// perturbation occasionally carries a relu input across zero.
const END_TO_END_STEP: f64 = 1e-6;

const SMILES: [&str; 4] = ["CCC(=O)Nc1ccc(Cl)c(Cl)c1", "c1ccccc1O", "CC(C)Br", "N#CC[nH]1cccc1"];

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_size: 8,
        hidden_size: 6,
        ffn_size: 10,
        conv_filter_width: 3,
        num_sa_layers: 2,
        dropout_rate: 0.0,
        max_seq_len: 30,
        num_tasks: 2,
        ..Default::default()
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::build(&SMILES, TokenizeMode::TwoCharAtoms).unwrap()
}

fn batch(v: &Vocabulary, smiles: &[&str], max_len: usize) -> Vec<TokenSequence> {
    smiles.iter().map(|s| tokenize(s, v, max_len).unwrap()).collect()
}

fn heads(n: usize) -> Vec<TaskHeadSpec> {
    (0..n).map(|t| TaskHeadSpec { task_index: t, balancing_bias: 1.0 + t as f64 }).collect()
}

fn init(cfg: &ModelConfig, seed: u64) -> ModelParams<f32> {
    init_params(cfg, vocab().len(), &heads(cfg.num_tasks), seed).unwrap()
}

/// Perturbs every parameter so zero-initialised biases take part too.
fn jitter<T: Scalar>(p: &mut ModelParams<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in p.names.clone().iter().zip(p.tensors_mut()) {
        for v in t.data_mut() {
            *v += T::from_f64(rng.gen_range(-0.1..0.1));
        }
        if name == "embedding" {
            let w = t.shape()[1];
            t.data_mut()[..w].fill(T::ZERO);
        }
    }
}

#[test]
fn final_bias_matches_class_ratio() {
    let cfg = ModelConfig { num_tasks: 2, ..small_config() };
    let specs =
        [TaskHeadSpec { task_index: 0, balancing_bias: 13.4 }, TaskHeadSpec { task_index: 1, balancing_bias: 1.0 }];
    let p = init_params(&cfg, 10, &specs, 0).unwrap();
    let b0 = p.get("head0.fc2.b").unwrap().data()[0];
    assert!((f64::from(b0) + 13.4f64.ln()).abs() < 1e-6);
    assert!((b0 + 2.595).abs() < 1e-3);
    assert_eq!(p.get("head1.fc2.b").unwrap().data()[0], 0.0);
    let mp = init_params(&ModelConfig { head_kind: HeadKind::MaxPool, ..cfg }, 10, &specs, 0).unwrap();
    assert_eq!(mp.get("head0.fc1.b").unwrap().data()[0], b0);
}

#[test]
fn init_is_deterministic_and_shaped() {
    let cfg = ModelConfig::default();
    let a = init_params(&cfg, 40, &heads(1), 5).unwrap();
    let b = init_params(&cfg, 40, &heads(1), 5).unwrap();
    assert!(a.tensors().iter().zip(b.tensors()).all(|(x, y)| x
        .data()
        .iter()
        .zip(y.data())
        .all(|(p, q)| p.to_bits() == q.to_bits())));
    assert_ne!(a, init_params(&cfg, 40, &heads(1), 6).unwrap());
    let expected: usize = param_layout(&cfg, 40).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(a.param_count(), expected);
    assert!(a.get("embedding").unwrap().data()[..128].iter().all(|&v| v == 0.0));
    let limit = (6.0f64 / (128.0 + 1024.0)).sqrt() as f32;
    assert!(a.get("sa0.ffn1.w").unwrap().data().iter().all(|v| v.abs() <= limit));
}

#[test]
fn init_errors() {
    let cfg = small_config();
    assert_eq!(init_params(&cfg, 10, &heads(1), 0), Err(ModelError::BadHeadCount { expected: 2, got: 1 }));
    assert_eq!(init_params(&cfg, 1, &heads(2), 0), Err(ModelError::VocabTooSmall(1)));
    let bad =
        [TaskHeadSpec { task_index: 0, balancing_bias: 0.0 }, TaskHeadSpec { task_index: 1, balancing_bias: 1.0 }];
    assert!(matches!(init_params(&cfg, 10, &bad, 0), Err(ModelError::BadBalancingBias { task: 0, .. })));
}

#[test]
fn config_validation() {
    let both = ModelConfig { use_rnn_instead_of_cnn: true, ..small_config() };
    assert!(matches!(both.validate(), Err(ModelError::ConfigConflict(_))));
    let bare = ModelConfig { use_cnn: false, ..small_config() };
    assert!(matches!(bare.validate(), Err(ModelError::ConfigShapeMismatch(_))));
    let odd = ModelConfig { embed_size: 7, use_position_encoding: true, ..small_config() };
    assert_eq!(odd.validate(), Err(ModelError::OddHidden(7)));
    let drop = ModelConfig { dropout_rate: 1.0, ..small_config() };
    assert!(matches!(drop.validate(), Err(ModelError::InvalidConfig(_))));
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn config_defaults_round_trip_json() {
    let cfg = ModelConfig::default();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
    let partial: ModelConfig = serde_json::from_str(r#"{"num_sa_layers": 7}"#).unwrap();
    assert_eq!(partial, ModelConfig { num_sa_layers: 7, ..ModelConfig::default() });
    assert_ne!(cfg.hash(), partial.hash());
}

#[test]
fn head_ranges_cover_hidden() {
    let cfg = ModelConfig { num_heads: 5, ..ModelConfig::default() };
    let r = cfg.head_ranges();
    assert_eq!(r, vec![(0, 26), (26, 26), (52, 26), (78, 25), (103, 25)]);
}

#[test]
fn tox21_shaped_batch() {
    let cfg = ModelConfig { num_tasks: 12, max_seq_len: 40, ..ModelConfig::default() };
    let v = vocab();
    let p = init_params(&cfg, v.len(), &heads(12), 1).unwrap();
    let logits = forward_logits(&p, &batch(&v, &SMILES[..3], 40)).unwrap();
    assert_eq!(logits.len(), 12);
    assert!(logits.iter().all(|l| l.len() == 3 && l.iter().all(|z| z.is_finite())));
}

#[test]
fn all_padding_gives_head_bias() {
    let v = vocab();
    for head_kind in [HeadKind::DiscreteOutput, HeadKind::MaxPool] {
        let cfg = ModelConfig { head_kind, ..small_config() };
        let mut p = init(&cfg, 2);
        jitter(&mut p, 3);
        let mut b = batch(&v, &SMILES[..2], 30);
        b.push(TokenSequence::from_ids(&[], 30));
        let logits = forward_logits(&p, &b).unwrap();
        for (t, task_logits) in logits.iter().enumerate() {
            let bias = p.get(&final_bias_name(&cfg, t)).unwrap().data()[0];
            assert_eq!(task_logits[2], bias, "{head_kind:?} task {t}");
        }
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let v = vocab();
    let mut p = init(&small_config(), 4);
    jitter(&mut p, 4);
    let fwd = forward_logits(&p, &batch(&v, &SMILES, 30)).unwrap();
    let rev: Vec<&str> = SMILES.iter().rev().copied().collect();
    let back = forward_logits(&p, &batch(&v, &rev, 30)).unwrap();
    for t in 0..2 {
        for i in 0..4 {
            assert_eq!(fwd[t][i], back[t][3 - i]);
        }
    }
}

#[test]
fn padding_and_batch_mates_do_not_change_logits() {
    let v = vocab();
    for cfg in [small_config(), ModelConfig { use_cnn: false, use_rnn_instead_of_cnn: true, ..small_config() }] {
        let mut p = init(&cfg, 6);
        jitter(&mut p, 6);
        let alone = forward_logits(&p, &batch(&v, &SMILES[1..2], 12)).unwrap();
        let padded = forward_logits(&p, &batch(&v, &SMILES[1..2], 30)).unwrap();
        let mixed = forward_logits(&p, &batch(&v, &[SMILES[0], SMILES[1]], 30)).unwrap();
        for t in 0..2 {
            assert!((alone[t][0] - padded[t][0]).abs() <= 1e-5);
            assert!((alone[t][0] - mixed[t][1]).abs() <= 1e-5);
        }
    }
}

#[test]
fn head_parameters_are_isolated() {
    let v = vocab();
    let b = batch(&v, &SMILES, 30);
    let mut p = init(&small_config(), 7);
    let before = forward_logits(&p, &b).unwrap();
    for name in ["head1.fc1.w", "head1.fc1.b", "head1.fc2.w", "head1.fc2.b"] {
        p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x += 0.5);
    }
    let after = forward_logits(&p, &b).unwrap();
    assert!(before[0].iter().zip(&after[0]).all(|(a, c)| a.to_bits() == c.to_bits()));
    assert_ne!(before[1], after[1]);
}

#[test]
fn rejects_bad_batches() {
    let v = vocab();
    let p = init(&small_config(), 0);
    assert_eq!(forward_logits(&p, &[]), Err(ModelError::EmptyBatch));
    let big = TokenSequence::from_ids(&[2, 99], 30);
    assert!(matches!(forward_logits(&p, &[big]), Err(ModelError::IdOutOfRange { id: 99, .. })));
    let long = tokenize(&"C".repeat(31), &v, 40).unwrap();
    assert!(matches!(forward_logits(&p, &[long]), Err(ModelError::SequenceTooLong { len: 31, max: 30 })));
}

#[test]
fn encode_shape_and_zero_padding() {
    let v = vocab();
    let cfg = ModelConfig { max_seq_len: 40, ..ModelConfig::default() };
    let p = init_params(&cfg, v.len(), &heads(1), 0).unwrap();
    let b = batch(&v, &SMILES[..2], 40);
    let enc = encode(&p, &b).unwrap();
    assert_eq!(enc.shape(), &[2, 40, 128]);
    let row = |i: usize, pos: usize| &enc.data()[(i * 40 + pos) * 128..(i * 40 + pos + 1) * 128];
    assert!(row(1, b[1].true_len).iter().all(|&x| x == 0.0));
    assert!(row(1, b[1].true_len - 1).iter().any(|&x| x != 0.0));
}

#[test]
fn encode_without_attention_is_the_convolution() {
    let v = vocab();
    let cfg = ModelConfig { use_self_attention: false, ..small_config() };
    let p = init(&cfg, 9);
    let b = batch(&v, &SMILES[..1], 30);
    let enc = encode(&p, &b).unwrap();
    let mut tape = Tape::<f32>::new();
    let table = tape.constant(p.get("embedding").unwrap().clone());
    let x = tape.embedding(table, b[0].tokens(), None).unwrap();
    let w = tape.constant(p.get("conv.weight").unwrap().clone());
    let bias = tape.constant(p.get("conv.bias").unwrap().clone());
    let y = tape.conv1d_same(x, w, None).unwrap();
    let y = tape.add_bias(y, bias).unwrap();
    let y = tape.relu(y);
    let n = b[0].true_len * cfg.hidden_size;
    assert_eq!(&enc.data()[..n], tape.value(y).data());
}

#[test]
fn attention_rows_are_distributions() {
    let v = vocab();
    let cfg = ModelConfig { num_heads: 3, ..small_config() };
    let p = init(&cfg, 1);
    let b = batch(&v, &SMILES, 30);
    let maps = attention_maps(&p, &b).unwrap();
    assert_eq!(maps.len(), cfg.num_sa_layers * 3 * 4);
    for (m, w) in &maps {
        let len = b[m.item].true_len;
        assert_eq!(w.shape(), &[len, len]);
        for row in w.data().chunks(len) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn positional_table() {
    let pe = positional_encoding::<f64>(50, 8).unwrap();
    assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!((pe.data()[8] - 1f64.sin()).abs() < 1e-15);
    assert_eq!(positional_encoding::<f64>(5, 7).unwrap_err(), ModelError::OddHidden(7));

    let v = vocab();
    let b = batch(&v, &SMILES[..2], 30);
    let p = init(&small_config(), 3);
    let mut with_pe = p.clone();
    with_pe.config.use_position_encoding = true;
    let (a, c) = (forward_logits(&p, &b).unwrap(), forward_logits(&with_pe, &b).unwrap());
    assert!(a[0].iter().zip(&c[0]).any(|(x, y)| (x - y).abs() > 0.0));
}

#[test]
fn gru_zero_fixpoint_and_shape() {
    let cfg = ModelConfig {
        use_cnn: false,
        use_rnn_instead_of_cnn: true,
        use_self_attention: false,
        embed_size: 128,
        max_seq_len: 30,
        ..ModelConfig::default()
    };
    let v = vocab();
    let mut p = init_params(&cfg, v.len(), &heads(1), 0).unwrap();
    p.get_mut("embedding").unwrap().data_mut().fill(0.0);
    let b = batch(&v, &SMILES[..3], 30);
    let enc = encode(&p, &b).unwrap();
    assert_eq!(enc.shape(), &[3, 30, 128]);
    assert!(enc.data().iter().all(|&x| x == 0.0));
}

#[test]
fn gru_gradient_check() {
    let cfg = ModelConfig {
        use_cnn: false,
        use_rnn_instead_of_cnn: true,
        use_self_attention: false,
        embed_size: 5,
        hidden_size: 4,
        num_tasks: 1,
        dropout_rate: 0.0,
        max_seq_len: 30,
        ..ModelConfig::default()
    };
    let v = vocab();
    let b = batch(&v, &["CCO", "c1ccccc1", "C"], 30);
    for seed in 0..3 {
        let mut p = init_params(&cfg, v.len(), &heads(1), seed).unwrap().cast::<f64>();
        jitter(&mut p, seed);
        let inputs: Vec<Tensor<f64>> = p.tensors().to_vec();
        let report = grad_check(
            |tape, vars| {
                let g = build_graph(tape, &p, vars, &b, None)?;
                Ok::<_, ModelError>(g.features)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}

#[test]
fn end_to_end_gradient_check_small() {
    let v = vocab();
    let b = batch(&v, &SMILES[..2], 30);
    for cfg in [small_config(), ModelConfig { num_heads: 2, use_position_encoding: true, ..small_config() }] {
        let mut p = init(&cfg, 11).cast::<f64>();
        jitter(&mut p, 12);
        let inputs = p.tensors().to_vec();
        let report = grad_check_sampled(
            |tape, vars| {
                let g = build_graph(tape, &p, vars, &b, None)?;
                let both = tape.concat(&g.logits, 0)?;
                Ok::<_, ModelError>(tape.weighted_bce(both, &[1.0, 0.0, 0.0, 1.0], &[true; 4], 3.0)?)
            },
            &inputs,
            END_TO_END_STEP,
            60,
            5,
        )
        .unwrap();
        let worst = report.worst.map(|(i, _)| p.names()[i].clone());
        assert!(report.passed(1e-3), "{cfg:?} {worst:?} {report:?}");
    }
}

#[test]
fn multi_head_five_shapes() {
    let v = vocab();
    let cfg = ModelConfig { num_heads: 5, max_seq_len: 30, ..ModelConfig::default() };
    let p = init_params(&cfg, v.len(), &heads(1), 0).unwrap();
    let enc = encode(&p, &batch(&v, &SMILES[..2], 30)).unwrap();
    assert_eq!(enc.shape(), &[2, 30, 128]);
    assert!(enc.all_finite());
}

#[test]
fn dropout_only_in_training() {
    let v = vocab();
    let cfg = ModelConfig { dropout_rate: 0.5, ..small_config() };
    let p = init(&cfg, 0);
    let b = batch(&v, &SMILES, 30);
    let eval = forward_logits(&p, &b).unwrap();
    assert_eq!(eval, forward_logits(&p, &b).unwrap());
    let mut tape = Tape::<f32>::new();
    let vars = register_params(&mut tape, &p, true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = build_graph(&mut tape, &p, &vars, &b, Some(&mut rng)).unwrap();
    assert_ne!(tape.value(g.logits[0]).data(), eval[0].as_slice());
}

#[test]
fn default_depth_head_separates_molecules_at_init() {
    // Five post-norm layers pull every position toward a shared direction;
    // a rectifier after the first head layer would then zero the head.
    let cfg = ModelConfig { max_seq_len: 30, num_tasks: 2, dropout_rate: 0.0, ..Default::default() };
    let v = vocab();
    let b = batch(&v, &SMILES, cfg.max_seq_len);
    for seed in 0..4 {
        let p = init(&cfg, seed);
        for task in forward_logits(&p, &b).unwrap() {
            let spread = task.iter().cloned().fold(f32::MIN, f32::max) - task.iter().cloned().fold(f32::MAX, f32::min);
            assert!(spread > 1e-3, "seed {seed}: logits {task:?}");
        }
    }
}
