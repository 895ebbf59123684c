use super::{Result, TrainError};
use crate::metrics::Predictor;
use crate::model::{ModelError, ModelParams};
use crate::tokenizer::TokenSequence;

/// Models sharing one config and vocabulary whose probabilities are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<ModelParams<f32>>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelParams<f32>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| TrainError::ConfigMismatch("no members".into()))?;
        for (k, m) in members.iter().enumerate().skip(1) {
            if m.config != first.config {
                return Err(TrainError::ConfigMismatch(format!("member {k} has a different model config")));
            }
            if m.vocab_size != first.vocab_size {
                return Err(TrainError::ConfigMismatch(format!(
                    "member {k} has vocabulary size {}, expected {}",
                    m.vocab_size, first.vocab_size
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[ModelParams<f32>] {
        &self.members
    }
}

impl Predictor for Ensemble {
    fn predict_proba(&self, inputs: &[TokenSequence]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for m in &self.members {
            let p = m.predict_proba(inputs)?;
            sum = Some(match sum {
                None => p,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&p) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let k = self.members.len() as f64;
        let mut out = sum.expect("ensembles are non-empty");
        out.iter_mut().flatten().for_each(|x| *x /= k);
        Ok(out)
    }
}

/// Mean of the members' sigmoid outputs, `probs[t][i]`.
pub fn ensemble_predict(members: &[ModelParams<f32>], batch: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
    Ok(Ensemble::new(members.to_vec())?.predict_proba(batch)?)
}
