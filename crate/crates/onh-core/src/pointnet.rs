//! Point-cloud classifier in the PointNet family: per-point shared MLPs,
//! a learned 3x3 spatial transform and a learned 64x64 feature transform
//! (both input-independent so that the critical-subset property is exact;
//! identity-initialized and orthogonality-regularized), a 256-dim global
//! max pool with argmax tracking, and a small classification head.
//! Training is deterministic per seed with stratified splits, five-fold
//! cross validation and AUC evaluation.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{augment, sample, AugmentConfig, PointCloud};
use crate::tensor::{Mode, Tape, Tensor, TensorError, Var};
use crate::volume::SeverityGroup;

pub const MODEL_MAGIC: &[u8; 4] = b"ONHP";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum PointNetError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("dataset contains a single class")]
    SingleClass,
    #[error("too few eyes in class {class}: {n} < 10")]
    TooFewEyes { class: usize, n: usize },
    #[error("cloud without a severity label")]
    UnlabeledCloud,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serialization(#[from] serde_json::Error),
}

/// Layer widths. The last stage-2 width is the global feature dimension
/// (256 in the full model) and must equal the first head width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    /// Per-point MLP from the 4 input channels, e.g. [4, 64, 64].
    pub stage1: Vec<usize>,
    /// Per-point MLP up to the global feature, e.g. [64, 64, 128, 256].
    pub stage2: Vec<usize>,
    /// Classification head down to 2 logits, e.g. [256, 128, 64, 2].
    pub head: Vec<usize>,
}

impl Default for NetDims {
    fn default() -> Self {
        NetDims {
            stage1: vec![4, 64, 64],
            stage2: vec![64, 64, 128, 256],
            head: vec![256, 128, 64, 2],
        }
    }
}

impl NetDims {
    /// Tiny variant (a few hundred parameters) for finite-difference
    /// gradient checks.
    pub fn tiny() -> Self {
        NetDims {
            stage1: vec![4, 6],
            stage2: vec![6, 8],
            head: vec![8, 6, 2],
        }
    }

    pub fn global_dim(&self) -> usize {
        *self.stage2.last().expect("stage2 nonempty")
    }

    fn validate(&self) -> Result<(), PointNetError> {
        let ok = self.stage1.len() >= 2
            && self.stage2.len() >= 2
            && self.head.len() >= 2
            && self.stage1[0] == 4
            && self.stage1.last() == Some(&self.stage2[0])
            && self.stage2.last() == Some(&self.head[0])
            && self.head.last() == Some(&2);
        if ok {
            Ok(())
        } else {
            Err(PointNetError::MalformedModel(format!("inconsistent dims {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnLayer {
    fn new(d: usize) -> BnLayer {
        BnLayer {
            gamma: Tensor::new(1, d, vec![1.0; d]),
            beta: Tensor::zeros(1, d),
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointNetModel {
    pub dims: NetDims,
    /// Learned constant 3x3 transform of the spatial channels.
    pub spatial_transform: Tensor,
    /// Learned constant feature transform (stage-1 output width squared).
    pub feature_transform: Tensor,
    pub stage1: Vec<(Linear, BnLayer)>,
    pub stage2: Vec<(Linear, BnLayer)>,
    /// Hidden head layers carry batchnorm; the output layer does not.
    pub head: Vec<(Linear, Option<BnLayer>)>,
    pub dropout_p: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Input unit scaling: micrometers are multiplied by this before the
    /// network (1e-3, i.e. millimeters).
    pub unit_scale: f64,
}

fn he_linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Linear {
    let sd = (2.0 / d_in as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("positive sd");
    Linear {
        w: Tensor::new(d_in, d_out, (0..d_in * d_out).map(|_| normal.sample(rng)).collect()),
        b: Tensor::zeros(1, d_out),
    }
}

impl PointNetModel {
    pub fn init(dims: &NetDims, seed: u64) -> Result<PointNetModel, PointNetError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk_stage = |rng: &mut ChaCha8Rng, widths: &[usize]| -> Vec<(Linear, BnLayer)> {
            widths
                .windows(2)
                .map(|w| (he_linear(rng, w[0], w[1]), BnLayer::new(w[1])))
                .collect()
        };
        let stage1 = mk_stage(&mut rng, &dims.stage1);
        let stage2 = mk_stage(&mut rng, &dims.stage2);
        let mut head = Vec::new();
        for (i, w) in dims.head.windows(2).enumerate() {
            let last = i == dims.head.len() - 2;
            let bn = if last { None } else { Some(BnLayer::new(w[1])) };
            head.push((he_linear(&mut rng, w[0], w[1]), bn));
        }
        let d_feat = dims.stage2[0];
        Ok(PointNetModel {
            dims: dims.clone(),
            spatial_transform: Tensor::identity(3),
            feature_transform: Tensor::identity(d_feat),
            stage1,
            stage2,
            head,
            dropout_p: 0.3,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            unit_scale: 1e-3,
        })
    }

    /// All trainable tensors in a fixed enumeration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.spatial_transform, &self.feature_transform];
        for (lin, bn) in self.stage1.iter().chain(&self.stage2) {
            out.extend([&lin.w, &lin.b, &bn.gamma, &bn.beta]);
        }
        for (lin, bn) in &self.head {
            out.extend([&lin.w, &lin.b]);
            if let Some(bn) = bn {
                out.extend([&bn.gamma, &bn.beta]);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.spatial_transform, &mut self.feature_transform];
        for (lin, bn) in self.stage1.iter_mut().chain(self.stage2.iter_mut()) {
            out.push(&mut lin.w);
            out.push(&mut lin.b);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        for (lin, bn) in &mut self.head {
            out.push(&mut lin.w);
            out.push(&mut lin.b);
            if let Some(bn) = bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.data.len()).sum()
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer> {
        let mut out: Vec<&mut BnLayer> = Vec::new();
        for (_, bn) in self.stage1.iter_mut().chain(self.stage2.iter_mut()) {
            out.push(bn);
        }
        for (_, bn) in &mut self.head {
            if let Some(bn) = bn {
                out.push(bn);
            }
        }
        out
    }

    fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut out: Vec<&BnLayer> = Vec::new();
        for (_, bn) in self.stage1.iter().chain(self.stage2.iter()) {
            out.push(bn);
        }
        for (_, bn) in &self.head {
            if let Some(bn) = bn {
                out.push(bn);
            }
        }
        out
    }
}

// ---- tape-based forward (training and reference inference) ---------------

struct BoundModel {
    vars: Vec<Var>,
}

fn bind_params(tape: &mut Tape, model: &PointNetModel) -> BoundModel {
    let vars = model.params().iter().map(|t| tape.leaf((*t).clone())).collect();
    BoundModel { vars }
}

struct ForwardOut {
    logits: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    pool_argmax: Vec<usize>,
    /// Batch statistics of every batchnorm layer, in `bn_layers` order
    /// (training mode only).
    bn_batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Forward pass on the tape. `x` is (B*block) x 4 input rows (already
/// unit-scaled), `block` the points per cloud.
fn forward_tape(
    tape: &mut Tape,
    model: &PointNetModel,
    bound: &BoundModel,
    x: Var,
    block: usize,
    mode: Mode,
    dropout_seed: u64,
) -> Result<ForwardOut, PointNetError> {
    let mut next = 0usize;
    let mut take = || {
        let v = bound.vars[next];
        next += 1;
        v
    };
    let spatial = take();
    let feature = take();
    let mut bn_batch_stats = Vec::new();
    let bn_iter = |tape: &mut Tape,
                   h: Var,
                   gamma: Var,
                   beta: Var,
                   bn: &BnLayer,
                   stats: &mut Vec<(Vec<f64>, Vec<f64>)>|
     -> Result<Var, PointNetError> {
        let (out, mean, var) = tape.batchnorm(
            h,
            gamma,
            beta,
            (&bn.running_mean, &bn.running_var),
            model.bn_eps,
            mode,
        )?;
        if mode == Mode::Train {
            stats.push((mean, var));
        }
        Ok(out)
    };

    // spatial transform on the 3 coordinate channels
    let xyz = tape.slice_cols(x, 0, 3)?;
    let th = tape.slice_cols(x, 3, 4)?;
    let xyz = tape.matmul(xyz, spatial)?;
    let mut h = tape.concat_cols(xyz, th)?;

    for (lin, bn) in &model.stage1 {
        let (w, b, gamma, beta) = (take(), take(), take(), take());
        let _ = &lin.w;
        h = tape.matmul(h, w)?;
        h = tape.bias_add(h, b)?;
        h = bn_iter(tape, h, gamma, beta, bn, &mut bn_batch_stats)?;
        h = tape.relu(h);
    }
    h = tape.matmul(h, feature)?;
    for (_, bn) in &model.stage2 {
        let (w, b, gamma, beta) = (take(), take(), take(), take());
        h = tape.matmul(h, w)?;
        h = tape.bias_add(h, b)?;
        h = bn_iter(tape, h, gamma, beta, bn, &mut bn_batch_stats)?;
        h = tape.relu(h);
    }
    let (mut g, pool_argmax) = tape.max_over_blocks(h, block)?;
    let n_head = model.head.len();
    for (i, (_, bn)) in model.head.iter().enumerate() {
        let last = i == n_head - 1;
        if last {
            g = tape.dropout(g, model.dropout_p, dropout_seed, mode);
        }
        let (w, b) = (take(), take());
        g = tape.matmul(g, w)?;
        g = tape.bias_add(g, b)?;
        if let Some(bn) = bn {
            let (gamma, beta) = (take(), take());
            g = bn_iter(tape, g, gamma, beta, bn, &mut bn_batch_stats)?;
            g = tape.relu(g);
        }
    }
    Ok(ForwardOut { logits: g, pool_argmax, bn_batch_stats })
}

// ---- plain inference ------------------------------------------------------

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(m, n, out)
}

fn layer_infer(h: &Tensor, lin: &Linear, bn: Option<&BnLayer>, eps: f64, relu: bool) -> Tensor {
    let mut out = mm(h, &lin.w);
    let d = out.cols;
    for r in 0..out.rows {
        for c in 0..d {
            let mut v = out.data[r * d + c] + lin.b.data[c];
            if let Some(bn) = bn {
                let xhat = (v - bn.running_mean[c]) / (bn.running_var[c] + eps).sqrt();
                v = bn.gamma.data[c] * xhat + bn.beta.data[c];
            }
            if relu {
                v = v.max(0.0);
            }
            out.data[r * d + c] = v;
        }
    }
    out
}

/// Deterministic inference on one cloud: logits and, per global feature
/// dimension, the index of the input point that won the max pool
/// (smallest index on ties).
pub fn forward(model: &PointNetModel, cloud: &PointCloud) -> Result<([f64; 2], Vec<usize>), PointNetError> {
    let rows = cloud.feature_rows();
    if rows.is_empty() {
        return Err(PointNetError::EmptyCloud);
    }
    // feature_rows already converts micrometers to millimeters; the
    // model's unit_scale documents that constant (row values are um *
    // unit_scale)
    let n = rows.len();
    let x = Tensor::new(n, 4, rows.into_iter().flatten().collect());

    // spatial transform on coordinates
    let mut h = Tensor::zeros(n, 4);
    for r in 0..n {
        for j in 0..3 {
            let mut v = 0.0;
            for p in 0..3 {
                v += x.at(r, p) * model.spatial_transform.at(p, j);
            }
            h.data[r * 4 + j] = v;
        }
        h.data[r * 4 + 3] = x.at(r, 3);
    }
    for (lin, bn) in &model.stage1 {
        h = layer_infer(&h, lin, Some(bn), model.bn_eps, true);
    }
    h = mm(&h, &model.feature_transform);
    for (lin, bn) in &model.stage2 {
        h = layer_infer(&h, lin, Some(bn), model.bn_eps, true);
    }
    // global max pool with smallest-index argmax
    let d = h.cols;
    let mut pooled = Tensor::zeros(1, d);
    let mut argmax = vec![0usize; d];
    for c in 0..d {
        let mut best = f64::NEG_INFINITY;
        let mut best_r = 0usize;
        for r in 0..n {
            let v = h.at(r, c);
            if v > best {
                best = v;
                best_r = r;
            }
        }
        pooled.data[c] = best;
        argmax[c] = best_r;
    }
    let mut g = pooled;
    for (i, (lin, bn)) in model.head.iter().enumerate() {
        let relu = i != model.head.len() - 1;
        g = layer_infer(&g, lin, bn.as_ref(), model.bn_eps, relu);
    }
    Ok(([g.data[0], g.data[1]], argmax))
}

/// Classification score: logit difference in favor of class 1.
pub fn predict_score(model: &PointNetModel, cloud: &PointCloud) -> Result<f64, PointNetError> {
    let (logits, _) = forward(model, cloud)?;
    Ok(logits[1] - logits[0])
}

/// Training-mode loss (cross entropy + orthogonality penalty) and its
/// gradient with respect to every parameter, in `params()` order. All
/// clouds must have the same number of points. Deterministic in
/// `dropout_seed`; the entry point for external gradient verification.
pub fn batch_loss_and_grad(
    model: &PointNetModel,
    clouds: &[PointCloud],
    targets: &[usize],
    ortho_weight: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>), PointNetError> {
    if clouds.is_empty() || clouds.len() != targets.len() {
        return Err(PointNetError::MalformedModel(
            "need one target per cloud".into(),
        ));
    }
    let block = clouds[0].points.len();
    if clouds.iter().any(|c| c.points.len() != block) {
        return Err(PointNetError::MalformedModel(
            "all clouds in a batch must have the same size".into(),
        ));
    }
    let mut rows = Vec::with_capacity(clouds.len() * block * 4);
    for c in clouds {
        for r in c.feature_rows() {
            rows.extend_from_slice(&r);
        }
    }
    let x = Tensor::new(clouds.len() * block, 4, rows);
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, model);
    let xv = tape.leaf(x);
    let out = forward_tape(&mut tape, model, &bound, xv, block, Mode::Train, dropout_seed)?;
    let ce = tape.softmax_cross_entropy(out.logits, targets)?;
    let reg = tape.ortho_penalty(bound.vars[1], model.dims.stage2[0])?;
    let reg = tape.scale(reg, ortho_weight);
    let loss = tape.add(ce, reg)?;
    tape.backward(loss)?;
    let grads = bound.vars.iter().map(|&v| tape.grad(v)).collect();
    Ok((tape.value(loss).data[0], grads))
}

// ---- AUC ------------------------------------------------------------------

/// Area under the ROC curve via the Mann-Whitney statistic; ties count
/// one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, PointNetError> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(PointNetError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over ties
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            rank[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

// ---- training -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub split: (f64, f64, f64),
    pub folds: usize,
    pub ortho_weight: f64,
    pub dims: NetDims,
    /// Keep the best-validation-AUC epoch as the final model (default).
    /// Off, the final model is the last epoch's: on cleanly separable
    /// data validation saturates immediately and the earliest-tie rule
    /// would freeze a nearly untrained snapshot, which is useless for
    /// critical-point analysis.
    #[serde(default = "default_true")]
    pub snapshot_selection: bool,
    /// Channel-sparsity pressure on the global features, in the spirit of
    /// network slimming (Liu et al. 2017): each optimizer step multiplies
    /// the batch-norm scales of the last shared layer by
    /// `1 - feature_sparsity`, and scales that fall below twice the step
    /// size snap to exactly zero. A zero scale makes that pooled feature
    /// constant over points, so its argmax collapses to index 0 and the
    /// critical set concentrates on the features the task actually uses.
    /// Zero (the default) disables the mechanism.
    #[serde(default)]
    pub feature_sparsity: f64,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            epochs: 60,
            seed: 0,
            augment: AugmentConfig::default(),
            split: (0.70, 0.15, 0.15),
            folds: 5,
            ortho_weight: 1e-3,
            dims: NetDims::default(),
            snapshot_selection: true,
            feature_sparsity: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub fold_aucs: Vec<f64>,
    pub test_auc: f64,
    /// confusion[truth][prediction] at the 0.5 probability threshold
    pub confusion: [[usize; 2]; 2],
    pub train_loss_per_epoch: Vec<f64>,
    pub best_epoch: usize,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(shapes: &[usize]) -> Adam {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i].data;
            for k in 0..p.data.len() {
                self.m[i][k] = cfg.beta1 * self.m[i][k] + (1.0 - cfg.beta1) * g[k];
                self.v[i][k] = cfg.beta2 * self.v[i][k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mhat = self.m[i][k] / bc1;
                let vhat = self.v[i][k] / bc2;
                p.data[k] -= cfg.step_size * mhat / (vhat.sqrt() + 1e-8);
            }
        }
    }
}

fn class_rank(g: SeverityGroup) -> usize {
    match g {
        SeverityGroup::Normal => 0,
        SeverityGroup::Mild => 1,
        SeverityGroup::Moderate => 2,
        SeverityGroup::Advanced => 3,
    }
}

/// Binary targets from the clouds' severity labels: the less severe of
/// the two groups present is class 0.
fn binary_targets(dataset: &[PointCloud]) -> Result<Vec<u8>, PointNetError> {
    let mut groups: Vec<SeverityGroup> = Vec::new();
    for c in dataset {
        let g = c.label.ok_or(PointNetError::UnlabeledCloud)?;
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    if groups.len() < 2 {
        return Err(PointNetError::SingleClass);
    }
    if groups.len() > 2 {
        return Err(PointNetError::MalformedModel(format!(
            "binary task requires 2 groups, got {}",
            groups.len()
        )));
    }
    groups.sort_by_key(|&g| class_rank(g));
    Ok(dataset
        .iter()
        .map(|c| if c.label.expect("checked") == groups[1] { 1 } else { 0 })
        .collect())
}

/// Cycle-pad a cloud to exactly n points (duplicates do not change the
/// max pool) or subsample it to n.
fn fix_size(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    if cloud.points.len() >= n {
        return sample(cloud, n, seed);
    }
    let mut out = cloud.clone();
    let mut i = 0;
    while out.points.len() < n {
        out.points.push(cloud.points[i % cloud.points.len()].clone());
        i += 1;
    }
    out
}

/// Balance classes by duplicating minority eyes (fresh augmentation seeds
/// come from the duplicate's position).
fn oversample(indices: &[usize], targets: &[u8]) -> Vec<usize> {
    let ones: Vec<usize> = indices.iter().cloned().filter(|&i| targets[i] == 1).collect();
    let zeros: Vec<usize> = indices.iter().cloned().filter(|&i| targets[i] == 0).collect();
    if ones.is_empty() || zeros.is_empty() {
        return indices.to_vec();
    }
    let (minor, n_major) = if ones.len() < zeros.len() {
        (&ones, zeros.len())
    } else {
        (&zeros, ones.len())
    };
    let mut out = indices.to_vec();
    let mut k = 0;
    while out.len() < n_major * 2 {
        out.push(minor[k % minor.len()]);
        k += 1;
    }
    out
}

struct EpochResult {
    model: PointNetModel,
    losses: Vec<f64>,
    best_epoch: usize,
}

/// Core loop: train on `train_idx` for cfg.epochs. When `val_idx` is
/// given, snapshot the model at the epoch with the best validation AUC
/// (earliest on ties); otherwise return the final model.
fn train_loop(
    dataset: &[PointCloud],
    targets: &[u8],
    train_idx: &[usize],
    val_idx: Option<&[usize]>,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<EpochResult, PointNetError> {
    let mut model = PointNetModel::init(&cfg.dims, mix_seed(run_seed, 1))?;
    if cfg.augment.oversample {
        // caller passes the raw split; duplication happens here so the
        // same eye never crosses splits
    }
    let val_idx = if cfg.snapshot_selection { val_idx } else { None };
    let train_pool = if cfg.augment.oversample {
        oversample(train_idx, targets)
    } else {
        train_idx.to_vec()
    };
    let shapes: Vec<usize> = model.params().iter().map(|t| t.data.len()).collect();
    let mut adam = Adam::new(&shapes);
    let n_pts = cfg.augment.sample_n;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, PointNetModel)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(run_seed, 100 + epoch as u64));
        // Fisher-Yates with the epoch stream
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rows: Vec<f64> = Vec::with_capacity(chunk.len() * n_pts * 4);
            let mut batch_targets = Vec::with_capacity(chunk.len());
            for (slot, &eye) in chunk.iter().enumerate() {
                let aug_seed = mix_seed(run_seed, ((epoch * 10_000 + batch_no * 100 + slot) as u64) << 8);
                let (aug, _) = augment(&dataset[eye], &cfg.augment, aug_seed);
                let fixed = fix_size(&aug, n_pts, aug_seed ^ 0x5bd1);
                for r in fixed.feature_rows() {
                    rows.extend_from_slice(&r);
                }
                batch_targets.push(targets[eye] as usize);
            }
            let x = Tensor::new(chunk.len() * n_pts, 4, rows);
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &model);
            let xv = tape.leaf(x);
            let dropout_seed = mix_seed(run_seed, (epoch * 7919 + batch_no) as u64);
            let out = forward_tape(&mut tape, &model, &bound, xv, n_pts, Mode::Train, dropout_seed)?;
            let ce = tape.softmax_cross_entropy(out.logits, &batch_targets)?;
            let reg = tape.ortho_penalty(bound.vars[1], model.dims.stage2[0])?;
            let reg = tape.scale(reg, cfg.ortho_weight);
            let loss = tape.add(ce, reg)?;
            tape.backward(loss)?;
            epoch_loss += tape.value(ce).data[0];
            n_batches += 1;
            let grads: Vec<Tensor> = bound.vars.iter().map(|&v| tape.grad(v)).collect();
            // batchnorm running averages from the batch statistics
            let momentum = model.bn_momentum;
            for (bn, (mean, var)) in model.bn_layers_mut().into_iter().zip(&out.bn_batch_stats) {
                for c in 0..bn.running_mean.len() {
                    bn.running_mean[c] = momentum * bn.running_mean[c] + (1.0 - momentum) * mean[c];
                    bn.running_var[c] = momentum * bn.running_var[c] + (1.0 - momentum) * var[c];
                }
            }
            let mut params = model.params_mut();
            adam.step(&mut params, &grads, cfg);
            if cfg.feature_sparsity > 0.0 {
                // decay the global-feature BN scales; a scale stuck below
                // the reach of a single Adam step is dead and snaps to 0,
                // which makes its pooled feature constant over points
                let snap = 2.0 * cfg.step_size;
                let bn = &mut model.stage2.last_mut().expect("stage2 nonempty").1;
                for g in bn.gamma.data.iter_mut() {
                    *g *= 1.0 - cfg.feature_sparsity;
                    if g.abs() < snap {
                        *g = 0.0;
                    }
                }
            }
        }
        losses.push(epoch_loss / n_batches.max(1) as f64);

        if let Some(val) = val_idx {
            // full clouds so that epoch selection sees the same input
            // distribution as the test evaluation
            let auc_v = eval_auc(&model, dataset, targets, val, None)?;
            let better = match &best {
                None => true,
                Some((b, _, _)) => auc_v > *b,
            };
            if better {
                best = Some((auc_v, epoch, model.clone()));
            }
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs.saturating_sub(1), model),
    };
    Ok(EpochResult { model, losses, best_epoch })
}

/// AUC of the model on the given eyes; clouds are deterministically
/// subsampled when `subsample` is set (full clouds otherwise).
fn eval_auc(
    model: &PointNetModel,
    dataset: &[PointCloud],
    targets: &[u8],
    idx: &[usize],
    subsample: Option<(usize, u64)>,
) -> Result<f64, PointNetError> {
    let mut scores = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let score = match subsample {
            Some((n, seed)) => {
                let cl = sample(&dataset[i], n, mix_seed(seed, 7_000_000 + i as u64));
                predict_score(model, &cl)?
            }
            None => predict_score(model, &dataset[i])?,
        };
        scores.push(score);
        labels.push(targets[i]);
    }
    auc(&scores, &labels)
}

/// Stratified shuffle-split of per-class index lists.
fn stratified_split(
    targets: &[u8],
    split: (f64, f64, f64),
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == class).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 500 + class as u64));
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len();
        let n_test = ((split.2 * n as f64).round() as usize).max(1);
        let n_val = ((split.1 * n as f64).round() as usize).max(1);
        let n_train = n - n_val - n_test;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    (train, val, test)
}

/// Train the classifier: stratified 70/15/15 split by eye, k-fold cross
/// validation over train+val for the reported mean and sd, and a final
/// model selected at the best validation-AUC epoch.
pub fn train(dataset: &[PointCloud], cfg: &TrainConfig) -> Result<(PointNetModel, EvalReport), PointNetError> {
    cfg.dims.validate()?;
    cfg.augment.validate().map_err(|e| PointNetError::MalformedModel(e.to_string()))?;
    let targets = binary_targets(dataset)?;
    for class in [0u8, 1u8] {
        let n = targets.iter().filter(|&&t| t == class).count();
        if n < 10 {
            return Err(PointNetError::TooFewEyes { class: class as usize, n });
        }
    }
    let (train_idx, val_idx, test_idx) = stratified_split(&targets, cfg.split, cfg.seed);

    // cross-validation folds over train+val, stratified
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); cfg.folds];
    for class in [0u8, 1u8] {
        let mut pool: Vec<usize> = train_idx
            .iter()
            .chain(val_idx.iter())
            .cloned()
            .filter(|&i| targets[i] == class)
            .collect();
        pool.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 900 + class as u64));
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        for (i, &eye) in pool.iter().enumerate() {
            folds[i % cfg.folds].push(eye);
        }
    }

    let run_fold = |k: usize| -> Result<f64, PointNetError> {
        let eval: &[usize] = &folds[k];
        let fit: Vec<usize> = (0..cfg.folds)
            .filter(|&j| j != k)
            .flat_map(|j| folds[j].iter().cloned())
            .collect();
        let res = train_loop(dataset, &targets, &fit, None, cfg, mix_seed(cfg.seed, 3000 + k as u64))?;
        eval_auc(&res.model, dataset, &targets, eval, Some((cfg.augment.sample_n, cfg.seed)))
    };

    #[cfg(feature = "parallel")]
    let fold_aucs: Vec<f64> = {
        use rayon::prelude::*;
        (0..cfg.folds)
            .into_par_iter()
            .map(run_fold)
            .collect::<Result<Vec<_>, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let fold_aucs: Vec<f64> = (0..cfg.folds).map(run_fold).collect::<Result<Vec<_>, _>>()?;

    let auc_mean = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
    let auc_sd = if fold_aucs.len() > 1 {
        (fold_aucs.iter().map(|a| (a - auc_mean).powi(2)).sum::<f64>() / (fold_aucs.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };

    // final model: train split with validation-based epoch selection
    let res = train_loop(dataset, &targets, &train_idx, Some(&val_idx), cfg, mix_seed(cfg.seed, 4242))?;
    let model = res.model;

    // test evaluation on full clouds
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut confusion = [[0usize; 2]; 2];
    for &i in &test_idx {
        let s = predict_score(&model, &dataset[i])?;
        let pred = usize::from(s > 0.0);
        confusion[targets[i] as usize][pred] += 1;
        scores.push(s);
        labels.push(targets[i]);
    }
    let test_auc = auc(&scores, &labels)?;
    let report = EvalReport {
        auc_mean,
        auc_sd,
        fold_aucs,
        test_auc,
        confusion,
        train_loss_per_epoch: res.losses,
        best_epoch: res.best_epoch,
    };
    Ok((model, report))
}

// ---- model file -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    dims: NetDims,
    dropout_p: f64,
    bn_momentum: f64,
    bn_eps: f64,
    unit_scale: f64,
    bn_stats: Vec<BnStats>,
    tensors: Vec<TensorMeta>,
}

fn param_names(model: &PointNetModel) -> Vec<String> {
    let mut names = vec!["spatial_transform".to_string(), "feature_transform".to_string()];
    for (si, stage) in [&model.stage1, &model.stage2].iter().enumerate() {
        for li in 0..stage.len() {
            for part in ["w", "b", "gamma", "beta"] {
                names.push(format!("stage{}.{li}.{part}", si + 1));
            }
        }
    }
    for (li, (_, bn)) in model.head.iter().enumerate() {
        names.push(format!("head.{li}.w"));
        names.push(format!("head.{li}.b"));
        if bn.is_some() {
            names.push(format!("head.{li}.gamma"));
            names.push(format!("head.{li}.beta"));
        }
    }
    names
}

pub fn save_model(model: &PointNetModel, path: &Path) -> Result<(), PointNetError> {
    let params = model.params();
    let names = param_names(model);
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (t, name) in params.iter().zip(names) {
        tensors.push(TensorMeta { name, rows: t.rows, cols: t.cols, offset });
        offset += t.data.len();
    }
    let manifest = ModelManifest {
        dims: model.dims.clone(),
        dropout_p: model.dropout_p,
        bn_momentum: model.bn_momentum,
        bn_eps: model.bn_eps,
        unit_scale: model.unit_scale,
        bn_stats: model
            .bn_layers()
            .iter()
            .map(|bn| BnStats { mean: bn.running_mean.clone(), var: bn.running_var.clone() })
            .collect(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for t in params {
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PointNetModel, PointNetError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(PointNetError::MalformedModel("bad magic".into()));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    if u16::from_le_bytes(buf2) != MODEL_VERSION {
        return Err(PointNetError::MalformedModel("unsupported version".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let json_len = u32::from_le_bytes(buf4) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let manifest: ModelManifest = serde_json::from_slice(&json)?;
    let mut model = PointNetModel::init(&manifest.dims, 0)?;
    model.dropout_p = manifest.dropout_p;
    model.bn_momentum = manifest.bn_momentum;
    model.bn_eps = manifest.bn_eps;
    model.unit_scale = manifest.unit_scale;
    {
        let mut params = model.params_mut();
        if params.len() != manifest.tensors.len() {
            return Err(PointNetError::MalformedModel("tensor count mismatch".into()));
        }
        for (p, meta) in params.iter_mut().zip(&manifest.tensors) {
            if p.rows != meta.rows || p.cols != meta.cols {
                return Err(PointNetError::MalformedModel(format!(
                    "shape mismatch for {}",
                    meta.name
                )));
            }
            let mut data = vec![0.0f64; meta.rows * meta.cols];
            let mut buf8 = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            p.data = data;
        }
    }
    let n_bn = model.bn_layers().len();
    if manifest.bn_stats.len() != n_bn {
        return Err(PointNetError::MalformedModel("batchnorm stats count mismatch".into()));
    }
    for (bn, stats) in model.bn_layers_mut().into_iter().zip(&manifest.bn_stats) {
        if stats.mean.len() != bn.running_mean.len() || stats.var.len() != bn.running_var.len() {
            return Err(PointNetError::MalformedModel("batchnorm stats width mismatch".into()));
        }
        bn.running_mean = stats.mean.clone();
        bn.running_var = stats.var.clone();
    }
    Ok(model)
}
