//! The self-attention multi-task network: token embedding, a shared
//! convolution (or GRU), a stack of post-norm encoder layers and one
//! prediction head per task.

mod forward;

pub use forward::{
    attention_maps, build_graph, encode, forward_logits, positional_encoding, register_params, AttentionMap, Graph,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenizer::{TokenSequence, TokenizeMode, DEFAULT_MAX_SEQ_LEN, PAD_ID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("config shape mismatch: {0}")]
    ConfigShapeMismatch(String),
    #[error("config conflict: {0}")]
    ConfigConflict(String),
    #[error("position encoding needs an even width, got {0}")]
    OddHidden(usize),
    #[error("expected {expected} task heads, got {got}")]
    BadHeadCount { expected: usize, got: usize },
    #[error("balancing bias for task {task} must be finite and > 0, got {value}")]
    BadBalancingBias { task: usize, value: f64 },
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds the model's max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter {0:?} missing or misshapen")]
    BadParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-position score followed by a learned weighting over positions.
    #[default]
    DiscreteOutput,
    /// Per-position score followed by a max over positions.
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_size: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub conv_filter_width: usize,
    pub num_sa_layers: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
    pub num_tasks: usize,
    pub use_position_encoding: bool,
    pub use_self_attention: bool,
    pub use_cnn: bool,
    pub use_rnn_instead_of_cnn: bool,
    pub head_kind: HeadKind,
    pub two_char_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_size: 128,
            hidden_size: 128,
            ffn_size: 1024,
            conv_filter_width: 7,
            num_sa_layers: 5,
            num_heads: 1,
            dropout_rate: 0.1,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            num_tasks: 1,
            use_position_encoding: false,
            use_self_attention: true,
            use_cnn: true,
            use_rnn_instead_of_cnn: false,
            head_kind: HeadKind::DiscreteOutput,
            two_char_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("embed_size", self.embed_size),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("conv_filter_width", self.conv_filter_width),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
            ("num_tasks", self.num_tasks),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.num_heads > self.hidden_size {
            return Err(ModelError::InvalidConfig(format!(
                "num_heads {} exceeds hidden_size {}",
                self.num_heads, self.hidden_size
            )));
        }
        if self.use_cnn && self.use_rnn_instead_of_cnn {
            return Err(ModelError::ConfigConflict("use_cnn and use_rnn_instead_of_cnn are both set".into()));
        }
        if !self.use_cnn && !self.use_rnn_instead_of_cnn && self.embed_size != self.hidden_size {
            return Err(ModelError::ConfigShapeMismatch(format!(
                "without a convolution or GRU the embedding width {} must equal hidden_size {}",
                self.embed_size, self.hidden_size
            )));
        }
        if self.use_position_encoding && self.embed_size % 2 == 1 {
            return Err(ModelError::OddHidden(self.embed_size));
        }
        Ok(())
    }

    /// Feature ranges `(start, len)` of each attention head. When the
    /// width does not divide evenly the first heads get one extra feature.
    pub fn head_ranges(&self) -> Vec<(usize, usize)> {
        let (base, extra) = (self.hidden_size / self.num_heads, self.hidden_size % self.num_heads);
        let mut start = 0;
        (0..self.num_heads)
            .map(|h| {
                let len = base + usize::from(h < extra);
                let r = (start, len);
                start += len;
                r
            })
            .collect()
    }

    /// Tokenization matching `two_char_embedding`.
    pub fn tokenize_mode(&self) -> TokenizeMode {
        if self.two_char_embedding {
            TokenizeMode::TwoCharAtoms
        } else {
            TokenizeMode::SingleChar
        }
    }

    /// SHA-256 of the canonical JSON form, used to tie checkpoints to configs.
    pub fn hash(&self) -> String {
        crate::data::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Per-task balancing information from the training labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskHeadSpec {
    pub task_index: usize,
    /// Negatives per positive in the training split.
    pub balancing_bias: f64,
}

impl TaskHeadSpec {
    pub fn from_counts(task_index: usize, positives: usize, negatives: usize) -> Self {
        Self { task_index, balancing_bias: negatives as f64 / positives as f64 }
    }
}

/// Parameter names and shapes for a config, in a fixed order.
pub fn param_layout(config: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    let (e, h, f) = (config.embed_size, config.hidden_size, config.ffn_size);
    let mut out: Vec<(String, Vec<usize>)> = vec![("embedding".into(), vec![vocab_size, e])];
    if config.use_cnn {
        out.push(("conv.weight".into(), vec![config.conv_filter_width, e, h]));
        out.push(("conv.bias".into(), vec![h]));
    }
    if config.use_rnn_instead_of_cnn {
        for gate in ["z", "r", "h"] {
            out.push((format!("gru.w{gate}"), vec![e, h]));
            out.push((format!("gru.u{gate}"), vec![h, h]));
            out.push((format!("gru.b{gate}"), vec![h]));
        }
    }
    if config.use_self_attention {
        for l in 0..config.num_sa_layers {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("sa{l}.w{p}"), vec![h, h]));
                out.push((format!("sa{l}.b{p}"), vec![h]));
            }
            out.push((format!("sa{l}.ln1.gamma"), vec![h]));
            out.push((format!("sa{l}.ln1.beta"), vec![h]));
            out.push((format!("sa{l}.ffn1.w"), vec![h, f]));
            out.push((format!("sa{l}.ffn1.b"), vec![f]));
            out.push((format!("sa{l}.ffn2.w"), vec![f, h]));
            out.push((format!("sa{l}.ffn2.b"), vec![h]));
            out.push((format!("sa{l}.ln2.gamma"), vec![h]));
            out.push((format!("sa{l}.ln2.beta"), vec![h]));
        }
    }
    for t in 0..config.num_tasks {
        out.push((format!("head{t}.fc1.w"), vec![h, 1]));
        out.push((format!("head{t}.fc1.b"), vec![1]));
        if config.head_kind == HeadKind::DiscreteOutput {
            out.push((format!("head{t}.fc2.w"), vec![config.max_seq_len, 1]));
            out.push((format!("head{t}.fc2.b"), vec![1]));
        }
    }
    out
}

/// Name of the bias that produces the final logit of task `t`.
pub fn final_bias_name(config: &ModelConfig, t: usize) -> String {
    match config.head_kind {
        HeadKind::DiscreteOutput => format!("head{t}.fc2.b"),
        HeadKind::MaxPool => format!("head{t}.fc1.b"),
    }
}

/// All learnable tensors of one network, with the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Assembles parameters, checking names and shapes against the layout.
    pub fn from_parts(config: ModelConfig, vocab_size: usize, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config, vocab_size);
        if layout.len() != entries.len() {
            return Err(ModelError::BadParam(format!("expected {} tensors, got {}", layout.len(), entries.len())));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::BadParam(got_name.clone()));
            }
        }
        let (names, tensors) = entries.into_iter().unzip();
        Ok(Self { config, vocab_size, names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Checks ids and lengths of a batch against this model.
    pub fn check_batch(&self, batch: &[TokenSequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for seq in batch {
            if seq.true_len > self.config.max_seq_len {
                return Err(ModelError::SequenceTooLong { len: seq.true_len, max: self.config.max_seq_len });
            }
            if let Some(&id) = seq.tokens().iter().find(|&&id| id as usize >= self.vocab_size) {
                return Err(ModelError::IdOutOfRange { id, vocab_size: self.vocab_size });
            }
        }
        Ok(())
    }
}

/// Molecules per inference pass, bounding tape memory.
pub const INFERENCE_CHUNK: usize = 64;

impl crate::metrics::Predictor for ModelParams<f32> {
    fn predict_proba(&self, inputs: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::with_capacity(inputs.len()); self.config.num_tasks];
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            for (t, logits) in forward_logits(self, chunk)?.into_iter().enumerate() {
                out[t].extend(logits.into_iter().map(|z| sigmoid(f64::from(z))));
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn glorot_limit(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [a, b] => (*a, *b),
        [w, cin, cout] => (w * cin, w * cout),
        _ => (shape.iter().product(), 1),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases, unit layer-norm scales, a zero
/// padding embedding row, and each task's final bias at
/// `-ln(negatives / positives)`.
pub fn init_params(
    config: &ModelConfig,
    vocab_size: usize,
    heads: &[TaskHeadSpec],
    seed: u64,
) -> Result<ModelParams<f32>> {
    config.validate()?;
    if vocab_size < 2 {
        return Err(ModelError::VocabTooSmall(vocab_size));
    }
    if heads.len() != config.num_tasks {
        return Err(ModelError::BadHeadCount { expected: config.num_tasks, got: heads.len() });
    }
    for (t, spec) in heads.iter().enumerate() {
        if !(spec.balancing_bias.is_finite() && spec.balancing_bias > 0.0) {
            return Err(ModelError::BadBalancingBias { task: t, value: spec.balancing_bias });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in param_layout(config, vocab_size) {
        let tensor = if name.ends_with("gamma") {
            Tensor::from_fn(&shape, |_| 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let limit = glorot_limit(&shape);
            Tensor::from_fn(&shape, |_| rng.gen_range(-limit..limit) as f32)
        };
        entries.push((name, tensor));
    }
    let mut params = ModelParams::from_parts(config.clone(), vocab_size, entries)?;
    let emb = params.get_mut("embedding").expect("layout has an embedding");
    let e = config.embed_size;
    emb.data_mut()[PAD_ID as usize * e..(PAD_ID as usize + 1) * e].fill(0.0);
    for (t, spec) in heads.iter().enumerate() {
        let b = params.get_mut(&final_bias_name(config, t)).expect("layout has head biases");
        b.data_mut()[0] = -spec.balancing_bias.ln() as f32;
    }
    log::info!("initialized {} parameters in {} tensors", params.param_count(), params.len());
    Ok(params)
}

#[cfg(test)]
mod tests;
