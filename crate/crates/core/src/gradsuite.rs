//! The 64-bit finite-difference suite: every differentiable op on random
//! inputs and the whole network on a two-molecule batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{build_graph, init_params, ModelConfig, ModelError, TaskHeadSpec};
use crate::tensor::{grad_check, grad_check_sampled, GradCheckReport, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{tokenize, Vocabulary};

pub const OP_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
/// Whole-network step. At 1e-4 a perturbation can carry a relu or max
/// input across its kink, which no step size fixes in general but a
/// smaller one makes improbable.
pub const END_TO_END_STEP: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const END_TO_END_SAMPLES: usize = 25;

const SUITE_SMILES: [&str; 2] = ["CCC(=O)Nc1ccc(Cl)c(Cl)c1", "OC(=O)c1ccccc1Br"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate, for whole-network checks.
    pub worst: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    fn new(name: &str, seed: u64, tolerance: f64, r: &GradCheckReport, worst: Option<String>) -> Self {
        Self { name: name.into(), seed, tolerance, checked: r.checked, max_rel_error: r.max_rel_error, worst }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Magnitudes in [0.1, 1) so no input sits near the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;
type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

fn shapes(list: &'static [&'static [usize]]) -> InputFn {
    Box::new(move |r| list.iter().map(|s| uniform(r, s)).collect())
}

fn op_cases() -> Vec<(&'static str, InputFn, OpFn)> {
    let keep: Vec<bool> = (0..18).map(|i| i % 6 < 4 && i < 12).collect();
    vec![
        ("matmul", shapes(&[&[2, 3, 4], &[4, 5]]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("batched matmul", shapes(&[&[2, 3, 4], &[2, 4, 2]]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", shapes(&[&[2, 3, 4], &[4]]), Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("mul_scalar", shapes(&[&[5]]), Box::new(|t, v| Ok(t.mul_scalar(v[0], -2.5)))),
        ("embedding_lookup", shapes(&[&[4, 3]]), Box::new(|t, v| t.embedding(v[0], &[2, 0, 3, 2, 1], None))),
        ("conv1d_same", shapes(&[&[2, 9, 3], &[7, 3, 2]]), Box::new(|t, v| t.conv1d_same(v[0], v[1], None))),
        (
            "conv1d_same packed",
            shapes(&[&[15, 2], &[3, 2, 3]]),
            Box::new(|t, v| t.conv1d_same(v[0], v[1], Some(&[5, 0, 2, 8]))),
        ),
        ("relu", Box::new(|r| vec![off_kink(r, &[4, 5])]), Box::new(|t, v| Ok(t.relu(v[0])))),
        ("sigmoid", shapes(&[&[4, 5]]), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", shapes(&[&[4, 5]]), Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("softmax_lastdim", shapes(&[&[3, 6]]), Box::new(|t, v| t.softmax_lastdim(v[0], None))),
        ("softmax_lastdim masked", shapes(&[&[3, 6]]), Box::new(move |t, v| t.softmax_lastdim(v[0], Some(&keep)))),
        ("layer_norm", shapes(&[&[3, 6], &[6], &[6]]), Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]))),
        (
            "dropout",
            shapes(&[&[4, 5]]),
            Box::new(|t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                t.dropout(v[0], 0.3, true, &mut rng)
            }),
        ),
        ("mean_lastdim", shapes(&[&[3, 4]]), Box::new(|t, v| t.mean_lastdim(v[0]))),
        ("transpose_last2", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.transpose_last2(v[0]))),
        ("concat", shapes(&[&[2, 3], &[2, 1]]), Box::new(|t, v| t.concat(&[v[0], v[1], v[0]], 1))),
        ("slice", shapes(&[&[3, 5, 2]]), Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        ("gather_rows", shapes(&[&[4, 3]]), Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1]))),
        ("segment_sum", shapes(&[&[6, 2]]), Box::new(|t, v| t.segment_sum(v[0], &[2, 0, 4]))),
        ("segment_max", shapes(&[&[6, 2]]), Box::new(|t, v| t.segment_max(v[0], &[2, 0, 4]))),
        (
            "weighted_bce",
            shapes(&[&[4]]),
            Box::new(|t, v| t.weighted_bce(v[0], &[1.0, 0.0, 1.0, 0.0], &[true, true, false, true], 3.0)),
        ),
    ]
}

/// Checks every op once with inputs drawn from `seed`.
pub fn op_checks(seed: u64) -> Result<Vec<CheckOutcome>, TensorError> {
    let mut out = Vec::new();
    for (k, (name, inputs, f)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(k as u64));
        let x = inputs(&mut rng);
        let report = grad_check(|t: &mut Tape<f64>, v: &[Var]| f(t, v), &x, OP_STEP)?;
        out.push(CheckOutcome::new(name, seed, OP_TOLERANCE, &report, None));
    }
    Ok(out)
}

/// Loss gradient of the whole network for `config` (its `max_seq_len`
/// and `num_tasks` are used as given) on a fixed two-molecule batch,
/// compared at `samples` randomly chosen parameter coordinates.
pub fn end_to_end_check(
    name: &str,
    config: &ModelConfig,
    seed: u64,
    samples: usize,
) -> Result<CheckOutcome, ModelError> {
    let mode = config.tokenize_mode();
    let vocab = Vocabulary::build(&SUITE_SMILES, mode).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let batch: Vec<_> = SUITE_SMILES
        .iter()
        .map(|s| tokenize(s, &vocab, config.max_seq_len))
        .collect::<Result<_, _>>()
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let heads: Vec<TaskHeadSpec> =
        (0..config.num_tasks).map(|t| TaskHeadSpec { task_index: t, balancing_bias: 1.0 + t as f64 }).collect();
    let params = init_params(config, vocab.len(), &heads, seed)?.cast::<f64>();
    let labels: Vec<f64> = (0..config.num_tasks * batch.len()).map(|i| (i % 2) as f64).collect();
    let inputs = params.tensors().to_vec();
    let report = grad_check_sampled(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let g = build_graph(tape, &params, vars, &batch, None)?;
            let all = tape.concat(&g.logits, 0)?;
            Ok::<_, ModelError>(tape.weighted_bce(all, &labels, &vec![true; labels.len()], 2.0)?)
        },
        &inputs,
        END_TO_END_STEP,
        samples,
        seed,
    )?;
    let worst = report.worst.map(|(i, _)| params.names()[i].clone());
    Ok(CheckOutcome::new(name, seed, END_TO_END_TOLERANCE, &report, worst))
}

/// Default-size network shortened for finite differences.
pub fn reduced_default_config() -> ModelConfig {
    ModelConfig { max_seq_len: 30, num_tasks: 2, ..ModelConfig::default() }
}
