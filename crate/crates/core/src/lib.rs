//! Multi-task molecular property classification from SMILES with a
//! convolution plus self-attention encoder and per-task output heads.
//!
//! The crate carries its own tokenizer, SMILES graph parser, autodiff
//! tensor library, training loop, dataset handling and ROC-AUC metrics.

pub mod data;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod molgraph;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use data::{DatasetTable, LoadOptions, Preset, Split, SplitMethod, SplitSpec};
pub use metrics::{roc_auc, AucResult, Predictor};
pub use model::{HeadKind, ModelConfig, ModelError, ModelParams, TaskHeadSpec};
pub use tensor::{Tape, Tensor, Var};
pub use tokenizer::{TokenSequence, TokenizeMode, Vocabulary};
pub use train::{Ensemble, ExperimentResult, PreparedData, RunResult, TrainConfig, TrainError};
