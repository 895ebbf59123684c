//! Graph construction over a packed batch.
//!
//! The non-padding tokens of every molecule are concatenated into one
//! `[total_tokens, width]` matrix with per-molecule segment lengths.
//! Attention, convolution and the recurrent layer operate per segment, so
//! padding never enters the computation and padded positions behave as
//! exact zeros.

use rand::RngCore;

use super::{HeadKind, ModelError, ModelParams, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, PAD_ID};

/// Attention weights of one head for one molecule: `[len, len]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub item: usize,
    pub var: Var,
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Graph {
    /// Per-task logits, each `[batch]`.
    pub logits: Vec<Var>,
    /// Packed `[total_tokens, hidden]` features entering the heads.
    pub features: Var,
    pub segments: Vec<usize>,
    pub attention: Vec<AttentionMap>,
}

/// Puts every parameter on the tape, as trainable leaves or constants.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, trainable: bool) -> Vec<Var> {
    params.tensors().iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect()
}

struct Ctx<'a, 'r, T: Scalar> {
    params: &'a ModelParams<T>,
    vars: &'a [Var],
    rng: Option<&'r mut dyn RngCore>,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.index_of(name).map(|i| self.vars[i]).ok_or_else(|| ModelError::BadParam(name.to_string()))
    }

    fn dropout(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let rate = self.params.config.dropout_rate;
        Ok(match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, rate, true, rng)?,
            None => x,
        })
    }

    fn dense(&self, tape: &mut Tape<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p(w)?)?;
        Ok(tape.add_bias(y, self.p(b)?)?)
    }
}

/// Records the network on `tape` for `batch`.
///
/// `vars` are the parameter handles from [`register_params`]. Dropout is
/// active only when `train_rng` is given.
pub fn build_graph<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    vars: &[Var],
    batch: &[TokenSequence],
    train_rng: Option<&mut dyn RngCore>,
) -> Result<Graph> {
    params.check_batch(batch)?;
    let cfg = &params.config;
    let mut cx = Ctx { params, vars, rng: train_rng };
    let segments: Vec<usize> = batch.iter().map(|s| s.true_len).collect();
    let ids: Vec<u32> = batch.iter().flat_map(|s| s.tokens().iter().copied()).collect();
    let positions: Vec<usize> = segments.iter().flat_map(|&l| 0..l).collect();

    let mut x = tape.embedding(cx.p("embedding")?, &ids, Some(PAD_ID))?;
    if cfg.use_position_encoding {
        let table = positional_encoding::<T>(cfg.max_seq_len, cfg.embed_size)?;
        let e = cfg.embed_size;
        let mut rows = Vec::with_capacity(positions.len() * e);
        for &p in &positions {
            rows.extend_from_slice(&table.data()[p * e..(p + 1) * e]);
        }
        let pe = tape.constant(Tensor::new(vec![positions.len(), e], rows)?);
        x = tape.add(x, pe)?;
    }
    x = cx.dropout(tape, x)?;

    if cfg.use_cnn {
        x = tape.conv1d_same(x, cx.p("conv.weight")?, Some(&segments))?;
        x = tape.add_bias(x, cx.p("conv.bias")?)?;
        x = tape.relu(x);
    }
    if cfg.use_rnn_instead_of_cnn {
        x = gru(tape, &cx, x, &segments)?;
    }

    let mut attention = Vec::new();
    if cfg.use_self_attention {
        for layer in 0..cfg.num_sa_layers {
            x = encoder_layer(tape, &mut cx, x, &segments, layer, &mut attention)?;
        }
    }

    let mut logits = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let score = tape.matmul(x, cx.p(&format!("head{t}.fc1.w"))?)?;
        let pooled = match cfg.head_kind {
            HeadKind::DiscreteOutput => {
                let score = tape.add_bias(score, cx.p(&format!("head{t}.fc1.b"))?)?;
                let w = tape.gather_rows(cx.p(&format!("head{t}.fc2.w"))?, &positions)?;
                let weighted = tape.mul(score, w)?;
                let summed = tape.segment_sum(weighted, &segments)?;
                tape.add_bias(summed, cx.p(&format!("head{t}.fc2.b"))?)?
            }
            HeadKind::MaxPool => {
                let pooled = tape.segment_max(score, &segments)?;
                tape.add_bias(pooled, cx.p(&format!("head{t}.fc1.b"))?)?
            }
        };
        logits.push(tape.reshape(pooled, &[batch.len()])?);
    }
    Ok(Graph { logits, features: x, segments, attention })
}

fn encoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    cx: &mut Ctx<'_, '_, T>,
    x: Var,
    segments: &[usize],
    layer: usize,
    attention: &mut Vec<AttentionMap>,
) -> Result<Var> {
    let name = |p: &str| format!("sa{layer}.{p}");
    let q = cx.dense(tape, x, &name("wq"), &name("bq"))?;
    let k = cx.dense(tape, x, &name("wk"), &name("bk"))?;
    let v = cx.dense(tape, x, &name("wv"), &name("bv"))?;
    let heads = cx.params.config.head_ranges();
    let hidden = cx.params.config.hidden_size;

    let mut per_item = Vec::with_capacity(segments.len());
    let mut offset = 0;
    for (item, &len) in segments.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let (qs, ks, vs) =
            (tape.slice(q, 0, offset, len)?, tape.slice(k, 0, offset, len)?, tape.slice(v, 0, offset, len)?);
        let mut per_head = Vec::with_capacity(heads.len());
        for (head, &(start, width)) in heads.iter().enumerate() {
            let (qh, kh, vh) = if heads.len() == 1 {
                (qs, ks, vs)
            } else {
                (tape.slice(qs, 1, start, width)?, tape.slice(ks, 1, start, width)?, tape.slice(vs, 1, start, width)?)
            };
            let kt = tape.transpose_last2(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.mul_scalar(scores, T::ONE / T::from_f64(width as f64).sqrt());
            let weights = tape.softmax_lastdim(scores, None)?;
            attention.push(AttentionMap { layer, head, item, var: weights });
            per_head.push(tape.matmul(weights, vh)?);
        }
        per_item.push(if per_head.len() == 1 { per_head[0] } else { tape.concat(&per_head, 1)? });
        offset += len;
    }
    let context = match per_item.len() {
        0 => tape.constant(Tensor::zeros(&[0, hidden])),
        1 => per_item[0],
        _ => tape.concat(&per_item, 0)?,
    };

    let out = cx.dense(tape, context, &name("wo"), &name("bo"))?;
    let out = cx.dropout(tape, out)?;
    let res = tape.add(x, out)?;
    let x = tape.layer_norm(res, cx.p(&name("ln1.gamma"))?, cx.p(&name("ln1.beta"))?)?;

    let f = cx.dense(tape, x, &name("ffn1.w"), &name("ffn1.b"))?;
    let f = tape.relu(f);
    let f = cx.dense(tape, f, &name("ffn2.w"), &name("ffn2.b"))?;
    let f = cx.dropout(tape, f)?;
    let res = tape.add(x, f)?;
    Ok(tape.layer_norm(res, cx.p(&name("ln2.gamma"))?, cx.p(&name("ln2.beta"))?)?)
}

/// Unidirectional GRU over each segment, starting from a zero state.
///
/// Segments are processed together step by step, longest first, so the
/// molecules still running at step `t` are always a prefix of that order.
fn gru<T: Scalar>(tape: &mut Tape<T>, cx: &Ctx<'_, '_, T>, x: Var, segments: &[usize]) -> Result<Var> {
    let hidden = cx.params.config.hidden_size;
    let total: usize = segments.iter().sum();
    if total == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, hidden])));
    }
    let mut offsets = Vec::with_capacity(segments.len());
    let mut acc = 0;
    for &l in segments {
        offsets.push(acc);
        acc += l;
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| segments[b].cmp(&segments[a]));

    let xz = cx.dense(tape, x, "gru.wz", "gru.bz")?;
    let xr = cx.dense(tape, x, "gru.wr", "gru.br")?;
    let xh = cx.dense(tape, x, "gru.wh", "gru.bh")?;
    let (uz, ur, uh) = (cx.p("gru.uz")?, cx.p("gru.ur")?, cx.p("gru.uh")?);

    let mut h: Option<Var> = None;
    let mut outputs = Vec::new();
    // Row of the step-major output holding packed row r.
    let mut placement = vec![0usize; total];
    let mut produced = 0;
    for t in 0..segments[order[0]] {
        let active = order.iter().take_while(|&&b| segments[b] > t).count();
        let rows: Vec<usize> = order[..active].iter().map(|&b| offsets[b] + t).collect();
        for (k, &r) in rows.iter().enumerate() {
            placement[r] = produced + k;
        }
        produced += active;
        let prev = match h {
            None => tape.constant(Tensor::zeros(&[active, hidden])),
            Some(h) if tape.shape(h)[0] == active => h,
            Some(h) => tape.slice(h, 0, 0, active)?,
        };
        let gate = |tape: &mut Tape<T>, xg: Var, u: Var, state: Var| -> Result<Var> {
            let a = tape.gather_rows(xg, &rows)?;
            let b = tape.matmul(state, u)?;
            Ok(tape.add(a, b)?)
        };
        let z = gate(tape, xz, uz, prev)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, xr, ur, prev)?;
        let r = tape.sigmoid(r);
        let gated = tape.mul(r, prev)?;
        let cand = gate(tape, xh, uh, gated)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, prev)?;
        let step = tape.mul(z, delta)?;
        let next = tape.add(prev, step)?;
        outputs.push(next);
        h = Some(next);
    }
    let stacked = if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs, 0)? };
    Ok(tape.gather_rows(stacked, &placement)?)
}

/// Sinusoidal table `[max_seq_len, width]`: even columns `sin`, odd `cos`.
pub fn positional_encoding<T: Scalar>(max_seq_len: usize, width: usize) -> Result<Tensor<T>> {
    if width % 2 == 1 {
        return Err(ModelError::OddHidden(width));
    }
    Ok(Tensor::from_fn(&[max_seq_len, width], |idx| {
        let (p, c) = (idx / width, idx % width);
        let angle = p as f64 / 10000f64.powf((c - c % 2) as f64 / width as f64);
        T::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Inference-mode logits, `[task][item]`.
pub fn forward_logits<T: Scalar>(params: &ModelParams<T>, batch: &[TokenSequence]) -> Result<Vec<Vec<T>>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let g = build_graph(&mut tape, params, &vars, batch, None)?;
    Ok(g.logits.iter().map(|&v| tape.value(v).data().to_vec()).collect())
}

/// Inference-mode features before the heads, unpacked to
/// `[batch, max_seq_len, hidden]` with zero rows at padded positions.
pub fn encode<T: Scalar>(params: &ModelParams<T>, batch: &[TokenSequence]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let g = build_graph(&mut tape, params, &vars, batch, None)?;
    let packed = tape.value(g.features);
    let width = packed.last_dim();
    let max_len = params.config.max_seq_len;
    let mut out = Tensor::zeros(&[batch.len(), max_len, width]);
    let mut offset = 0;
    for (b, &len) in g.segments.iter().enumerate() {
        let dst = b * max_len * width;
        out.data_mut()[dst..dst + len * width].copy_from_slice(&packed.data()[offset * width..(offset + len) * width]);
        offset += len;
    }
    Ok(out)
}

/// Inference-mode attention weights: `(map, len x len weights)` per
/// layer, head and molecule.
pub fn attention_maps<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[TokenSequence],
) -> Result<Vec<(AttentionMap, Tensor<T>)>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let g = build_graph(&mut tape, params, &vars, batch, None)?;
    Ok(g.attention.iter().map(|m| (*m, tape.value(m.var).clone())).collect())
}
