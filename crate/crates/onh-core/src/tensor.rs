//! Minimal dense 2D tensors with reverse-mode differentiation: exactly
//! the primitives a PointNet needs (matrix multiply, bias add, ReLU,
//! batch normalization, dropout, blockwise max pooling with argmax
//! tracking, softmax cross-entropy, and an orthogonality penalty for the
//! feature transform). 64-bit floats throughout; verifiability over
//! speed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("max over an empty set")]
    EmptySet,
    #[error("backward requires a scalar (1x1) loss")]
    NotScalarLoss,
}

/// Row-major 2D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Training vs inference behavior for dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Per-block matrix multiply: x has B blocks of `block` rows times
    /// `d` columns; t has B rows of d*d entries, each reshaped to d x d.
    BlockMatMul { x: Var, t: Var, block: usize, d: usize },
    BiasAdd(Var, Var),
    Relu(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    MaxOverBlocks { x: Var, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols(Var, Var),
    OrthoPenalty { f: Var, d: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape; nodes are recorded in topological order so one reverse
/// sweep produces every gradient.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to node v.
    pub fn grad(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; n.value.data.len()]);
        Tensor::new(n.value.rows, n.value.cols, data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols != tb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            });
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::new(m, n, out), Op::MatMul(a, b)))
    }

    /// x: (B*block) x d, t: B x (d*d); block b of the output is
    /// x_b (block x d) times T_b (d x d).
    pub fn block_matmul(&mut self, x: Var, t: Var, block: usize, d: usize) -> Result<Var, TensorError> {
        let (tx, tt) = (&self.nodes[x.0].value, &self.nodes[t.0].value);
        if tx.cols != d || tt.cols != d * d || block == 0 || tx.rows % block != 0
            || tx.rows / block != tt.rows
        {
            return Err(TensorError::ShapeMismatch {
                op: "block_matmul",
                detail: format!(
                    "x {}x{}, t {}x{}, block {block}, d {d}",
                    tx.rows, tx.cols, tt.rows, tt.cols
                ),
            });
        }
        let b_count = tt.rows;
        let mut out = vec![0.0; tx.rows * d];
        for b in 0..b_count {
            let tmat = &tt.data[b * d * d..(b + 1) * d * d];
            for r in 0..block {
                let row = b * block + r;
                let xr = &tx.data[row * d..(row + 1) * d];
                let or = &mut out[row * d..(row + 1) * d];
                for p in 0..d {
                    let xv = xr[p];
                    for j in 0..d {
                        or[j] += xv * tmat[p * d + j];
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(tx.rows, d, out), Op::BlockMatMul { x, t, block, d }))
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if tb.rows != 1 || tb.cols != tx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                detail: format!("x {}x{}, b {}x{}", tx.rows, tx.cols, tb.rows, tb.cols),
            });
        }
        let mut out = tx.data.clone();
        for r in 0..tx.rows {
            for c in 0..tx.cols {
                out[r * tx.cols + c] += tb.data[c];
            }
        }
        Ok(self.push(Tensor::new(tx.rows, tx.cols, out), Op::BiasAdd(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let out = tx.data.iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.rows, tx.cols, out);
        self.push(t, Op::Relu(x))
    }

    /// Batch normalization over rows, per column. In training mode the
    /// batch statistics are used and returned (for the caller's running
    /// averages); in inference mode the provided running statistics are
    /// used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        eps: f64,
        mode: Mode,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), TensorError> {
        let tx = &self.nodes[x.0].value;
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = tx.cols;
        if tg.cols != d || tb.cols != d || tg.rows != 1 || tb.rows != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("x cols {d}, gamma {}x{}, beta {}x{}", tg.rows, tg.cols, tb.rows, tb.cols),
            });
        }
        let n = tx.rows as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for r in 0..tx.rows {
                    for c in 0..d {
                        mean[c] += tx.data[r * d + c];
                    }
                }
                for m in &mut mean {
                    *m /= n;
                }
                for r in 0..tx.rows {
                    for c in 0..d {
                        let dx = tx.data[r * d + c] - mean[c];
                        var[c] += dx * dx;
                    }
                }
                for v in &mut var {
                    *v /= n;
                }
                (mean, var)
            }
            Mode::Infer => (running.0.to_vec(), running.1.to_vec()),
        };
        let mut out = vec![0.0; tx.rows * d];
        for r in 0..tx.rows {
            for c in 0..d {
                let xhat = (tx.data[r * d + c] - mean[c]) / (var[c] + eps).sqrt();
                out[r * d + c] = tg.data[c] * xhat + tb.data[c];
            }
        }
        let t = Tensor::new(tx.rows, d, out);
        let op = match mode {
            Mode::Train => Op::BatchNormTrain { x, gamma, beta, eps, mean: mean.clone(), var: var.clone() },
            Mode::Infer => Op::BatchNormInfer { x, gamma, beta, eps, mean: mean.clone(), var: var.clone() },
        };
        let v = self.push(t, op);
        Ok((v, mean, var))
    }

    /// Inverted dropout: in training mode zeroes each entry with
    /// probability p and rescales survivors by 1/(1-p); identity in
    /// inference mode. Deterministic per seed.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, mode: Mode) -> Var {
        let tx = &self.nodes[x.0].value;
        if mode == Mode::Infer || p <= 0.0 {
            let t = tx.clone();
            let mask = vec![1.0; t.data.len()];
            return self.push(t, Op::Dropout { x, mask });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..tx.data.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = tx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.rows, tx.cols, out);
        self.push(t, Op::Dropout { x, mask })
    }

    /// Columnwise max over each block of `block` consecutive rows,
    /// recording the smallest winning row index per (block, column).
    /// Returns the pooled (B x D) value and the global row indices of the
    /// winners (length B*D).
    pub fn max_over_blocks(&mut self, x: Var, block: usize) -> Result<(Var, Vec<usize>), TensorError> {
        let tx = &self.nodes[x.0].value;
        if block == 0 || tx.rows == 0 || tx.rows % block != 0 {
            return Err(TensorError::EmptySet);
        }
        let d = tx.cols;
        let b_count = tx.rows / block;
        let mut out = vec![0.0; b_count * d];
        let mut argmax = vec![0usize; b_count * d];
        for b in 0..b_count {
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = b * block;
                for r in 0..block {
                    let row = b * block + r;
                    let v = tx.data[row * d + c];
                    if v > best {
                        best = v;
                        best_row = row;
                    }
                }
                out[b * d + c] = best;
                argmax[b * d + c] = best_row;
            }
        }
        let t = Tensor::new(b_count, d, out);
        let v = self.push(t, Op::MaxOverBlocks { x, argmax: argmax.clone() });
        Ok((v, argmax))
    }

    /// Single-set max pool: N x D in, 1 x D out with argmax row indices.
    pub fn max_over_set(&mut self, x: Var) -> Result<(Var, Vec<usize>), TensorError> {
        let n = self.nodes[x.0].value.rows;
        if n == 0 {
            return Err(TensorError::EmptySet);
        }
        self.max_over_blocks(x, n)
    }

    /// Mean softmax cross-entropy over rows against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = &self.nodes[logits.0].value;
        if targets.len() != tl.rows || targets.iter().any(|&t| t >= tl.cols) {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for {} rows of {} classes", targets.len(), tl.rows, tl.cols),
            });
        }
        let d = tl.cols;
        let mut probs = vec![0.0; tl.rows * d];
        let mut loss = 0.0;
        for r in 0..tl.rows {
            let row = &tl.data[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                probs[r * d + c] = exps[c] / z;
            }
            loss -= (probs[r * d + targets[r]]).ln();
        }
        loss /= tl.rows as f64;
        let t = Tensor::scalar(loss);
        Ok(self.push(t, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows != tb.rows || ta.cols != tb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{}x{} + {}x{}", ta.rows, ta.cols, tb.rows, tb.cols),
            });
        }
        let out: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let out = ta.data.iter().map(|&v| v * s).collect();
        let t = Tensor::new(ta.rows, ta.cols, out);
        self.push(t, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Columns [start, end) of x.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if start >= end || end > tx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{start}, {end}) of {} cols", tx.cols),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(tx.rows * w);
        for r in 0..tx.rows {
            out.extend_from_slice(&tx.data[r * tx.cols + start..r * tx.cols + end]);
        }
        let t = Tensor::new(tx.rows, w, out);
        Ok(self.push(t, Op::SliceCols { x, start, end }))
    }

    /// Horizontal concatenation [a | b].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rows != tb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{} vs {} rows", ta.rows, tb.rows),
            });
        }
        let w = ta.cols + tb.cols;
        let mut out = Vec::with_capacity(ta.rows * w);
        for r in 0..ta.rows {
            out.extend_from_slice(&ta.data[r * ta.cols..(r + 1) * ta.cols]);
            out.extend_from_slice(&tb.data[r * tb.cols..(r + 1) * tb.cols]);
        }
        let t = Tensor::new(ta.rows, w, out);
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Mean over blocks of ||I - F F^T||^2. f is either a single d x d
    /// matrix or B rows each holding a flattened d x d matrix.
    pub fn ortho_penalty(&mut self, f: Var, d: usize) -> Result<Var, TensorError> {
        let tf = &self.nodes[f.0].value;
        let blocks = ortho_blocks(tf, d).ok_or_else(|| TensorError::ShapeMismatch {
            op: "ortho_penalty",
            detail: format!("f {}x{} vs d = {d}", tf.rows, tf.cols),
        })?;
        let mut total = 0.0;
        for b in 0..blocks {
            let fm = &tf.data[b * d * d..(b + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut ffij = 0.0;
                    for k in 0..d {
                        ffij += fm[i * d + k] * fm[j * d + k];
                    }
                    let p = if i == j { 1.0 - ffij } else { -ffij };
                    total += p * p;
                }
            }
        }
        total /= blocks as f64;
        Ok(self.push(Tensor::scalar(total), Op::OrthoPenalty { f, d }))
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, &di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse sweep from a scalar loss; gradients are then readable via
    /// `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let tl = &self.nodes[loss.0].value;
        if tl.rows != 1 || tl.cols != 1 {
            return Err(TensorError::NotScalarLoss);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].clone() else {
                continue;
            };
            // reborrow pattern: collect input updates first, then apply
            let mut updates: Vec<(Var, Vec<f64>)> = Vec::new();
            {
                let node = &self.nodes[id];
                match &node.op {
                    Op::Leaf => {}
                    Op::MatMul(a, b) => {
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for j in 0..n {
                                let g = gout[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += g * tb.data[p * n + j];
                                    db[p * n + j] += g * ta.data[i * k + p];
                                }
                            }
                        }
                        updates.push((*a, da));
                        updates.push((*b, db));
                    }
                    Op::BlockMatMul { x, t, block, d } => {
                        let (tx, tt) = (&self.nodes[x.0].value, &self.nodes[t.0].value);
                        let (block, d) = (*block, *d);
                        let b_count = tt.rows;
                        let mut dx = vec![0.0; tx.data.len()];
                        let mut dt = vec![0.0; tt.data.len()];
                        for b in 0..b_count {
                            let tmat = &tt.data[b * d * d..(b + 1) * d * d];
                            for r in 0..block {
                                let row = b * block + r;
                                let go = &gout[row * d..(row + 1) * d];
                                let xr = &tx.data[row * d..(row + 1) * d];
                                for p in 0..d {
                                    let mut acc = 0.0;
                                    for j in 0..d {
                                        acc += go[j] * tmat[p * d + j];
                                        dt[b * d * d + p * d + j] += xr[p] * go[j];
                                    }
                                    dx[row * d + p] += acc;
                                }
                            }
                        }
                        updates.push((*x, dx));
                        updates.push((*t, dt));
                    }
                    Op::BiasAdd(x, bias) => {
                        let tx = &self.nodes[x.0].value;
                        let mut db = vec![0.0; tx.cols];
                        for r in 0..tx.rows {
                            for c in 0..tx.cols {
                                db[c] += gout[r * tx.cols + c];
                            }
                        }
                        updates.push((*x, gout.clone()));
                        updates.push((*bias, db));
                    }
                    Op::Relu(x) => {
                        let tx = &self.nodes[x.0].value;
                        let dx: Vec<f64> = tx
                            .data
                            .iter()
                            .zip(&gout)
                            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                            .collect();
                        updates.push((*x, dx));
                    }
                    Op::BatchNormTrain { x, gamma, beta, eps, mean, var } => {
                        let tx = &self.nodes[x.0].value;
                        let tg = &self.nodes[gamma.0].value;
                        let d = tx.cols;
                        let n = tx.rows as f64;
                        let mut dgamma = vec![0.0; d];
                        let mut dbeta = vec![0.0; d];
                        let mut dx = vec![0.0; tx.data.len()];
                        for c in 0..d {
                            let inv = 1.0 / (var[c] + eps).sqrt();
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for r in 0..tx.rows {
                                let xhat = (tx.data[r * d + c] - mean[c]) * inv;
                                let g = gout[r * d + c];
                                dgamma[c] += g * xhat;
                                dbeta[c] += g;
                                let dxhat = g * tg.data[c];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            for r in 0..tx.rows {
                                let xhat = (tx.data[r * d + c] - mean[c]) * inv;
                                let dxhat = gout[r * d + c] * tg.data[c];
                                dx[r * d + c] =
                                    inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                            }
                        }
                        updates.push((*x, dx));
                        updates.push((*gamma, dgamma));
                        updates.push((*beta, dbeta));
                    }
                    Op::BatchNormInfer { x, gamma, beta, eps, mean, var } => {
                        let tx = &self.nodes[x.0].value;
                        let tg = &self.nodes[gamma.0].value;
                        let d = tx.cols;
                        let mut dgamma = vec![0.0; d];
                        let mut dbeta = vec![0.0; d];
                        let mut dx = vec![0.0; tx.data.len()];
                        for c in 0..d {
                            let inv = 1.0 / (var[c] + eps).sqrt();
                            for r in 0..tx.rows {
                                let g = gout[r * d + c];
                                let xhat = (tx.data[r * d + c] - mean[c]) * inv;
                                dgamma[c] += g * xhat;
                                dbeta[c] += g;
                                dx[r * d + c] = g * tg.data[c] * inv;
                            }
                        }
                        updates.push((*x, dx));
                        updates.push((*gamma, dgamma));
                        updates.push((*beta, dbeta));
                    }
                    Op::Dropout { x, mask } => {
                        let dx: Vec<f64> = gout.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                        updates.push((*x, dx));
                    }
                    Op::MaxOverBlocks { x, argmax } => {
                        let tx = &self.nodes[x.0].value;
                        let d = tx.cols;
                        let mut dx = vec![0.0; tx.data.len()];
                        for (out_idx, &row) in argmax.iter().enumerate() {
                            let c = out_idx % d;
                            dx[row * d + c] += gout[out_idx];
                        }
                        updates.push((*x, dx));
                    }
                    Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                        let tl = &self.nodes[logits.0].value;
                        let d = tl.cols;
                        let g = gout[0] / tl.rows as f64;
                        let mut dl = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            dl[r * d + t] -= 1.0;
                        }
                        for v in &mut dl {
                            *v *= g;
                        }
                        updates.push((*logits, dl));
                    }
                    Op::Add(a, b) => {
                        updates.push((*a, gout.clone()));
                        updates.push((*b, gout.clone()));
                    }
                    Op::Scale(a, s) => {
                        let da: Vec<f64> = gout.iter().map(|&g| g * s).collect();
                        updates.push((*a, da));
                    }
                    Op::Sum(a) => {
                        let ta = &self.nodes[a.0].value;
                        updates.push((*a, vec![gout[0]; ta.data.len()]));
                    }
                    Op::SliceCols { x, start, end } => {
                        let tx = &self.nodes[x.0].value;
                        let w = end - start;
                        let mut dx = vec![0.0; tx.data.len()];
                        for r in 0..tx.rows {
                            dx[r * tx.cols + start..r * tx.cols + end]
                                .copy_from_slice(&gout[r * w..(r + 1) * w]);
                        }
                        updates.push((*x, dx));
                    }
                    Op::ConcatCols(a, b) => {
                        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                        let w = ta.cols + tb.cols;
                        let mut da = vec![0.0; ta.data.len()];
                        let mut db = vec![0.0; tb.data.len()];
                        for r in 0..ta.rows {
                            da[r * ta.cols..(r + 1) * ta.cols]
                                .copy_from_slice(&gout[r * w..r * w + ta.cols]);
                            db[r * tb.cols..(r + 1) * tb.cols]
                                .copy_from_slice(&gout[r * w + ta.cols..(r + 1) * w]);
                        }
                        updates.push((*a, da));
                        updates.push((*b, db));
                    }
                    Op::OrthoPenalty { f, d } => {
                        let tf = &self.nodes[f.0].value;
                        let d = *d;
                        let blocks = ortho_blocks(tf, d).expect("validated in forward");
                        let g = gout[0] / blocks as f64;
                        let mut df = vec![0.0; tf.data.len()];
                        for b in 0..blocks {
                            let fm = &tf.data[b * d * d..(b + 1) * d * d];
                            // P = I - F F^T; dL/dF = -4 P F (P symmetric)
                            let mut p = vec![0.0; d * d];
                            for i in 0..d {
                                for j in 0..d {
                                    let mut ffij = 0.0;
                                    for k in 0..d {
                                        ffij += fm[i * d + k] * fm[j * d + k];
                                    }
                                    p[i * d + j] = if i == j { 1.0 - ffij } else { -ffij };
                                }
                            }
                            for i in 0..d {
                                for j in 0..d {
                                    let mut acc = 0.0;
                                    for k in 0..d {
                                        acc += p[i * d + k] * fm[k * d + j];
                                    }
                                    df[b * d * d + i * d + j] = -4.0 * g * acc;
                                }
                            }
                        }
                        updates.push((*f, df));
                    }
                }
            }
            for (v, delta) in updates {
                self.add_grad(v, &delta);
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Number of d x d blocks an ortho-penalty operand holds: a single d x d
/// matrix, or rows of flattened d x d matrices.
fn ortho_blocks(t: &Tensor, d: usize) -> Option<usize> {
    if t.rows == d && t.cols == d {
        Some(1)
    } else if t.cols == d * d {
        Some(t.rows)
    } else {
        None
    }
}
