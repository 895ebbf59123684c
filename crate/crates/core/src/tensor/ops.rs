use rand::Rng;

use super::tape::{Op, Tape, Var};
use super::{Result, Scalar, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, reason: reason.into() }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::ZERO) + (T::ONE + (-z.abs()).exp()).ln()
}

/// Splits a shape into (outer, axis, inner) extents around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<T: Scalar> Tape<T> {
    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    /// `a [.., M, K] x b [K, N] -> [.., M, N]`, or batched when `b` is
    /// `[.., K, N]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batched = sb.len() > 2;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if batched {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let batches: usize = sa[..sa.len() - 2].iter().product();
            for i in 0..batches {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    T::ZERO,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        } else {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            T::gemm(rows, k, n, av, false, bv, false, T::ZERO, &mut out);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::MatMul { a, b, batched }))
    }

    fn elementwise(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op_name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    /// Adds a `[N]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rank() != 1 || vx.last_dim() != vb.len() || vx.rank() == 0 {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let n = vb.len();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(v, rg, Op::AddBias { x, bias }))
    }

    /// `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&d| d * scale + shift).collect()).unwrap();
        self.unary(x, v, Op::Affine { x, scale })
    }

    pub fn mul_scalar(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::ZERO)
    }

    /// Rows of `table [V, D]` selected by `ids`, giving `[ids.len(), D]`.
    /// The `padding_idx` row never receives gradient.
    pub fn embedding(&mut self, table: Var, ids: &[u32], padding_idx: Option<u32>) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(invalid("embedding", format!("table must be rank 2, got {:?}", vt.shape())));
        }
        let (vocab, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(invalid("embedding", format!("id {id} out of range for vocabulary of {vocab}")));
            }
            data.extend_from_slice(&vt.data()[id as usize * dim..(id as usize + 1) * dim]);
        }
        let v = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.unary(table, v, Op::Embedding { table, ids: ids.to_vec(), padding_idx }))
    }

    /// Convolution along the sequence axis with "same" zero padding.
    ///
    /// `x` is `[rows, C_in]` (packed sequences described by `segments`) or
    /// `[B, L, C_in]` (each batch row is one sequence). `w` is
    /// `[width, C_in, C_out]`; the kernel covers every input channel.
    pub fn conv1d_same(&mut self, x: Var, w: Var, segments: Option<&[usize]>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 3 || sx.len() < 2 || sx[sx.len() - 1] != sw[1] {
            return Err(mismatch("conv1d_same", &sx, &sw));
        }
        let (width, cin, cout) = (sw[0], sw[1], sw[2]);
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let segs: Vec<usize> = match segments {
            Some(s) => s.to_vec(),
            None if sx.len() == 3 => vec![sx[1]; sx[0]],
            None => vec![rows],
        };
        if segs.iter().sum::<usize>() != rows {
            return Err(invalid(
                "conv1d_same",
                format!("segments sum to {} but input has {rows} rows", segs.iter().sum::<usize>()),
            ));
        }
        let cols = im2col(self.value(x).data(), &segs, width, cin);
        let mut out = vec![T::ZERO; rows * cout];
        T::gemm(rows, width * cin, cout, &cols, false, self.value(w).data(), false, T::ZERO, &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Conv1d { x, w, segs, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&d| d.max(T::ZERO)).collect()).unwrap();
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&d| sigmoid(d)).collect()).unwrap();
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let v = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&d| d.tanh()).collect()).unwrap();
        self.unary(x, v, Op::Tanh(x))
    }

    /// Softmax over the last axis. Entries where `keep` is false get an
    /// additive -inf before normalization; rows with nothing kept are zero.
    pub fn softmax_lastdim(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(k) = keep {
            if k.len() != vx.len() {
                return Err(mismatch("softmax_lastdim", vx.shape(), &[k.len()]));
            }
        }
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        if n > 0 {
            for (r, row) in data.chunks_mut(n).enumerate() {
                if let Some(k) = keep {
                    for (j, d) in row.iter_mut().enumerate() {
                        if !k[r * n + j] {
                            *d = T::NEG_INFINITY;
                        }
                    }
                }
                let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
                if max == T::NEG_INFINITY {
                    row.iter_mut().for_each(|d| *d = T::ZERO);
                    continue;
                }
                let mut total = T::ZERO;
                for d in row.iter_mut() {
                    *d = (*d - max).exp();
                    total += *d;
                }
                for d in row.iter_mut() {
                    *d = *d / total;
                }
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::Softmax(x)))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta` (`[D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch("layer_norm", vx.shape(), vg.shape()));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let rows = vx.len() / d.max(1);
        let mut xhat = vec![T::ZERO; vx.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(v, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Inverted dropout; identity when not training or when `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len()).map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { scale }).collect();
        let data = vx.data().iter().zip(&mask).map(|(&d, &m)| d * m).collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::Dropout { x, mask }))
    }

    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || vx.last_dim() == 0 {
            return Err(invalid("mean_lastdim", "needs a non-empty last axis"));
        }
        let d = vx.last_dim();
        let inv = T::ONE / T::from_f64(d as f64);
        let data = vx.data().chunks(d).map(|row| row.iter().copied().sum::<T>() * inv).collect();
        let v = Tensor::new(vx.shape()[..vx.rank() - 1].to_vec(), data)?;
        Ok(self.unary(x, v, Op::MeanLastDim(x)))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() < 2 {
            return Err(invalid("transpose_last2", format!("needs rank >= 2, got {:?}", vx.shape())));
        }
        let r = vx.rank();
        let (m, n) = (vx.shape()[r - 2], vx.shape()[r - 1]);
        let data = transpose_blocks(vx.data(), m, n);
        let mut shape = vx.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(x, v, Op::TransposeLast2(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let vp = self.value(p);
                let span = vp.shape()[axis] * inner;
                data.extend_from_slice(&vp.data()[o * span..(o + 1) * span]);
            }
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || start + len > vx.shape()[axis] {
            return Err(invalid("slice", format!("{start}..{} on axis {axis} of {:?}", start + len, vx.shape())));
        }
        let (outer, ext, inner) = around(vx.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(x, v, Op::Slice { x, axis, start }))
    }

    /// Rows of `x` (first axis) picked by `idx`, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 {
            return Err(invalid("gather_rows", "needs rank >= 1"));
        }
        let rows = vx.shape()[0];
        let width = vx.len() / rows.max(1);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(invalid("gather_rows", format!("row {i} out of range for {rows}")));
            }
            data.extend_from_slice(&vx.data()[i * width..(i + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(x, v, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Sums consecutive row groups of `x` (lengths in `segments`).
    pub fn segment_sum(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (shape, width) = self.segment_shape("segment_sum", x, segments)?;
        let vx = self.value(x);
        let mut data = vec![T::ZERO; segments.len() * width];
        let mut off = 0;
        for (s, &len) in segments.iter().enumerate() {
            for r in off..off + len {
                for j in 0..width {
                    data[s * width + j] += vx.data()[r * width + j];
                }
            }
            off += len;
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(x, v, Op::SegmentSum { x, segs: segments.to_vec() }))
    }

    /// Column-wise max over consecutive row groups; empty groups give 0.
    pub fn segment_max(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (shape, width) = self.segment_shape("segment_max", x, segments)?;
        let vx = self.value(x);
        let mut data = vec![T::ZERO; segments.len() * width];
        let mut argmax = vec![None; segments.len() * width];
        let mut off = 0;
        for (s, &len) in segments.iter().enumerate() {
            for j in 0..width {
                let mut best: Option<usize> = None;
                for r in off..off + len {
                    let v = vx.data()[r * width + j];
                    if best.is_none_or(|b| v > vx.data()[b * width + j]) {
                        best = Some(r);
                    }
                }
                if let Some(b) = best {
                    data[s * width + j] = vx.data()[b * width + j];
                }
                argmax[s * width + j] = best;
            }
            off += len;
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(x, v, Op::SegmentMax { x, argmax }))
    }

    fn segment_shape(&self, op: &'static str, x: Var, segments: &[usize]) -> Result<(Vec<usize>, usize)> {
        let vx = self.value(x);
        if vx.rank() == 0 || segments.iter().sum::<usize>() != vx.shape()[0] {
            return Err(mismatch(op, vx.shape(), segments));
        }
        let width = vx.shape()[1..].iter().product();
        let mut shape = vx.shape().to_vec();
        shape[0] = segments.len();
        Ok((shape, width))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.unary(x, Tensor::scalar(total), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Sum over items of `mask * [w * y * -ln s(z) + (1 - y) * -ln(1 - s(z))]`
    /// for logits `z` of shape `[n]`.
    pub fn weighted_bce(&mut self, logits: Var, labels: &[T], mask: &[bool], weight: T) -> Result<Var> {
        let vz = self.value(logits);
        if vz.len() != labels.len() || vz.len() != mask.len() {
            return Err(mismatch("weighted_bce", vz.shape(), &[labels.len(), mask.len()]));
        }
        if weight.partial_cmp(&T::ZERO) != Some(std::cmp::Ordering::Greater) {
            return Err(invalid("weighted_bce", format!("positive-class weight must be > 0, got {weight}")));
        }
        let mut total = T::ZERO;
        for ((&z, &y), &m) in vz.data().iter().zip(labels).zip(mask) {
            if m {
                total += weight * y * softplus(-z) + (T::ONE - y) * softplus(z);
            }
        }
        let op = Op::WeightedBce { logits, labels: labels.to_vec(), mask: mask.to_vec(), weight };
        Ok(self.unary(logits, Tensor::scalar(total), op))
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let k = sa[sa.len() - 1];
                let n = *vb.shape().last().unwrap();
                if *batched {
                    let m = sa[sa.len() - 2];
                    let batches: usize = sa[..sa.len() - 2].iter().product();
                    self.accumulate_with(grads, *a, |ga| {
                        for bi in 0..batches {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                false,
                                &vb.data()[bi * k * n..],
                                true,
                                T::ONE,
                                &mut ga[bi * m * k..],
                            );
                        }
                    });
                    self.accumulate_with(grads, *b, |gb| {
                        for bi in 0..batches {
                            T::gemm(
                                k,
                                m,
                                n,
                                &va.data()[bi * m * k..],
                                true,
                                &g[bi * m * n..],
                                false,
                                T::ONE,
                                &mut gb[bi * k * n..],
                            );
                        }
                    });
                } else {
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    self.accumulate_with(grads, *a, |ga| T::gemm(rows, n, k, g, false, vb.data(), true, T::ONE, ga));
                    self.accumulate_with(grads, *b, |gb| T::gemm(k, rows, n, va.data(), true, g, false, T::ONE, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.to_vec());
                let n = self.value(*bias).len();
                self.accumulate_with(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        for (acc, &d) in gb.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.iter().map(|&d| d * *scale).collect());
            }
            Op::Embedding { table, ids, padding_idx } => {
                let dim = self.value(*table).shape()[1];
                self.accumulate_with(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *padding_idx {
                            continue;
                        }
                        let dst = &mut gt[id as usize * dim..(id as usize + 1) * dim];
                        for (acc, &d) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *acc += d;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, segs, cols } => {
                let sw = self.value(*w).shape();
                let (width, cin, cout) = (sw[0], sw[1], sw[2]);
                let rows = node.value.len() / cout.max(1);
                self.accumulate_with(grads, *w, |gw| {
                    T::gemm(width * cin, rows, cout, cols, true, g, false, T::ONE, gw)
                });
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::ZERO; rows * width * cin];
                    T::gemm(rows, cout, width * cin, g, false, self.value(*w).data(), true, T::ZERO, &mut dcols);
                    self.accumulate_with(grads, *x, |gx| col2im(&dcols, segs, width, cin, gx));
                }
            }
            Op::Relu(x) => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(out).map(|(&d, &y)| if y > T::ZERO { d } else { T::ZERO }).collect(),
                );
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.iter().zip(out).map(|(&d, &y)| d * y * (T::ONE - y)).collect());
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, g.iter().zip(out).map(|(&d, &y)| d * (T::ONE - y * y)).collect());
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut dx = vec![T::ZERO; out.len()];
                if n > 0 {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dd, &gg), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd = yy * (gg - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let vg = self.value(*gamma).data();
                let d = vg.len();
                let inv_d = T::ONE / T::from_f64(d as f64);
                self.accumulate_with(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |gb| {
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                });
                if self.requires_grad(*x) {
                    let mut dx = vec![T::ZERO; g.len()];
                    let mut dh = vec![T::ZERO; d];
                    for (r, ((grow, hrow), dxrow)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = grow[j] * vg[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dxrow[j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::MeanLastDim(x) => {
                let d = self.value(*x).last_dim();
                let inv = T::ONE / T::from_f64(d as f64);
                self.accumulate(grads, *x, g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, d)).collect());
            }
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                let r = s.len();
                self.accumulate(grads, *x, transpose_blocks(g, s[r - 2], s[r - 1]));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = around(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.value(p).shape()[*axis];
                    if self.requires_grad(p) {
                        let mut part = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            part.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = around(self.value(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                self.accumulate_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        for (acc, &d) in
                            gx[dst..dst + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *acc += d;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let width = vx.len() / vx.shape()[0].max(1);
                self.accumulate_with(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &d) in gx[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *acc += d;
                        }
                    }
                });
            }
            Op::SegmentSum { x, segs } => {
                let width = node.value.len() / segs.len().max(1);
                self.accumulate_with(grads, *x, |gx| {
                    let mut off = 0;
                    for (s, &len) in segs.iter().enumerate() {
                        for r in off..off + len {
                            for j in 0..width {
                                gx[r * width + j] += g[s * width + j];
                            }
                        }
                        off += len;
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let width = node.value.len() / node.value.shape()[0].max(1);
                self.accumulate_with(grads, *x, |gx| {
                    for (o, src) in argmax.iter().enumerate() {
                        if let Some(r) = src {
                            gx[r * width + o % width] += g[o];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::WeightedBce { logits, labels, mask, weight } => {
                let vz = self.value(*logits).data();
                let dz = vz
                    .iter()
                    .zip(labels)
                    .zip(mask)
                    .map(|((&z, &y), &m)| {
                        if m {
                            let s = sigmoid(z);
                            g[0] * (*weight * y * (s - T::ONE) + (T::ONE - y) * s)
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}

fn transpose_blocks<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; src.len()];
    let block = m * n;
    if block == 0 {
        return out;
    }
    for (sb, ob) in src.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..m {
            for j in 0..n {
                ob[j * m + i] = sb[i * n + j];
            }
        }
    }
    out
}

/// Left zero-padding so that output position `t` sees inputs
/// `t - left ..= t + width - 1 - left`.
fn left_pad(width: usize) -> usize {
    (width - 1) / 2
}

fn im2col<T: Scalar>(x: &[T], segs: &[usize], width: usize, cin: usize) -> Vec<T> {
    let rows: usize = segs.iter().sum();
    let left = left_pad(width);
    let mut cols = vec![T::ZERO; rows * width * cin];
    let mut off = 0;
    for &len in segs {
        for t in 0..len {
            let row = &mut cols[(off + t) * width * cin..(off + t + 1) * width * cin];
            for k in 0..width {
                let s = t as isize + k as isize - left as isize;
                if s >= 0 && (s as usize) < len {
                    let src = (off + s as usize) * cin;
                    row[k * cin..(k + 1) * cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
        off += len;
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], segs: &[usize], width: usize, cin: usize, dx: &mut [T]) {
    let left = left_pad(width);
    let mut off = 0;
    for &len in segs {
        for t in 0..len {
            let row = &dcols[(off + t) * width * cin..(off + t + 1) * width * cin];
            for k in 0..width {
                let s = t as isize + k as isize - left as isize;
                if s >= 0 && (s as usize) < len {
                    let dst = (off + s as usize) * cin;
                    for (acc, &d) in dx[dst..dst + cin].iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                        *acc += d;
                    }
                }
            }
        }
        off += len;
    }
}
