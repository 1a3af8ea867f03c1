//! Feed-forward classification head over fixed embeddings.
//!
//! Each block is `linear -> batch norm -> activation -> dropout`, with every
//! block halving the width of the previous one; a final linear layer maps the
//! last block to class logits. Training is plain mini-batch gradient descent
//! on mean cross-entropy, with the epoch's sample order coming either from a
//! uniform shuffle or from the F1-regulated dynamic sampler.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{class_counts, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sampler::{draw_epoch_indices, update_sampler, SamplerConfig, SamplerState};
use crate::seed;

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub n_blocks: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub activation: Activation,
    pub n_classes: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, n_blocks: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            n_blocks,
            dropout_rate: 0.3,
            activation: Activation::Relu,
            n_classes,
        }
    }

    /// Layer widths from the input through every block, followed by the
    /// class count.
    pub fn widths(&self) -> Result<Vec<usize>> {
        if self.input_dim == 0 || self.n_classes == 0 || self.n_blocks == 0 {
            return Err(Error::config("input_dim, n_blocks and n_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        let mut widths = vec![self.input_dim];
        for b in 0..self.n_blocks {
            let w = self.input_dim >> (b + 1).min(63);
            if w == 0 {
                return Err(Error::config(format!(
                    "width underflow at block {}: input_dim {} cannot be halved {} times",
                    b + 1,
                    self.input_dim,
                    b + 1
                )));
            }
            widths.push(w);
        }
        widths.push(self.n_classes);
        Ok(widths)
    }
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self::new(2048, 6, 8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// `in x out`, applied as `x * weight + bias`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: MlpArchitecture,
    pub blocks: Vec<Block>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

/// Gradients of the trainable parameters, laid out like [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrad>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub shift: Vec<f64>,
}

impl MlpParams {
    /// Trainable parameter groups as `(name, values)`, in a fixed order shared
    /// with [`Gradients::groups`]. Running statistics are not included.
    pub fn trainable_groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{b}.weight"), block.weight.as_mut_slice()));
            out.push((format!("block{b}.bias"), &mut block.bias));
            out.push((format!("block{b}.gamma"), &mut block.gamma));
            out.push((format!("block{b}.shift"), &mut block.shift));
        }
        out.push(("head.weight".into(), self.head_weight.as_mut_slice()));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn n_trainable(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| b.weight.as_slice().len() + b.bias.len() + b.gamma.len() + b.shift.len())
            .sum();
        blocks + self.head_weight.as_slice().len() + self.head_bias.len()
    }

    fn all_finite(&self) -> bool {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.blocks.iter().all(|b| {
            b.weight.all_finite()
                && finite(&b.bias)
                && finite(&b.gamma)
                && finite(&b.shift)
                && finite(&b.running_mean)
                && finite(&b.running_var)
        }) && self.head_weight.all_finite()
            && finite(&self.head_bias)
    }
}

impl Gradients {
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (b, g) in self.blocks.iter().enumerate() {
            out.push((format!("block{b}.weight"), g.weight.as_slice()));
            out.push((format!("block{b}.bias"), &g.bias));
            out.push((format!("block{b}.gamma"), &g.gamma));
            out.push((format!("block{b}.shift"), &g.shift));
        }
        out.push(("head.weight".into(), self.head_weight.as_slice()));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// He-uniform weights for the blocks, LeCun-uniform for the head, zero
/// biases, identity batch norm.
pub fn init_mlp(arch: &MlpArchitecture, seed: u64) -> Result<MlpParams> {
    let widths = arch.widths()?;
    let mut rng = seed::rng(seed);
    let mut blocks = Vec::with_capacity(arch.n_blocks);
    for b in 0..arch.n_blocks {
        let (fan_in, fan_out) = (widths[b], widths[b + 1]);
        blocks.push(Block {
            weight: uniform_matrix(fan_in, fan_out, (6.0 / fan_in as f64).sqrt(), &mut rng),
            bias: vec![0.0; fan_out],
            gamma: vec![1.0; fan_out],
            shift: vec![0.0; fan_out],
            running_mean: vec![0.0; fan_out],
            running_var: vec![1.0; fan_out],
        });
    }
    let last = widths[arch.n_blocks];
    let head_weight = uniform_matrix(last, arch.n_classes, (3.0 / last as f64).sqrt(), &mut rng);
    Ok(MlpParams {
        arch: arch.clone(),
        blocks,
        head_weight,
        head_bias: vec![0.0; arch.n_classes],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct BlockCache {
    input: Matrix,
    normalized: Matrix,
    inv_std: Vec<f64>,
    pre_activation: Matrix,
    /// Per-element dropout multiplier: 0 or `1 / (1 - p)`; empty in eval mode.
    mask: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Intermediate activations from [`forward`], consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: Mode,
    blocks: Vec<BlockCache>,
    head_input: Matrix,
}

impl ForwardCache {
    /// Batch-normalized, pre-activation values of each block.
    pub fn pre_activations(&self) -> Vec<&Matrix> {
        self.blocks.iter().map(|b| &b.pre_activation).collect()
    }
}

/// Runs the network on a batch (one row per sample). Train mode normalizes
/// with batch statistics and applies inverted dropout drawn from `rng_seed`;
/// eval mode uses the running statistics and no dropout.
pub fn forward(params: &MlpParams, batch: &Matrix, mode: Mode, rng_seed: u64) -> Result<(Matrix, ForwardCache)> {
    let arch = &params.arch;
    if batch.cols() != arch.input_dim {
        return Err(Error::data(format!(
            "batch width {} does not match input_dim {}",
            batch.cols(),
            arch.input_dim
        )));
    }
    if mode == Mode::Train && batch.rows() < 2 {
        return Err(Error::data("train-mode forward needs at least 2 samples for batch statistics"));
    }
    if !batch.all_finite() {
        return Err(Error::numeric("non-finite value in input batch"));
    }

    let n = batch.rows();
    let keep = 1.0 - arch.dropout_rate;
    let mut rng = seed::rng(rng_seed);
    let mut x = batch.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let mut z = x.matmul(&block.weight);
        z.add_row_vector(&block.bias);
        let width = z.cols();

        let (mean, var) = match mode {
            Mode::Train => {
                let mean: Vec<f64> = z.column_sums().iter().map(|s| s / n as f64).collect();
                let mut var = vec![0.0; width];
                for i in 0..n {
                    for (j, v) in var.iter_mut().enumerate() {
                        *v += (z.get(i, j) - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Eval => (block.running_mean.clone(), block.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

        let mut normalized = z;
        let mut pre = Matrix::zeros(n, width);
        for i in 0..n {
            let row = normalized.row_mut(i);
            for j in 0..width {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
            let pre_row = pre.row_mut(i);
            for j in 0..width {
                pre_row[j] = block.gamma[j] * row[j] + block.shift[j];
            }
        }

        let mut out = Matrix::zeros(n, width);
        let mut mask = Vec::new();
        if mode == Mode::Train && arch.dropout_rate > 0.0 {
            mask = (0..n * width)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
        }
        for (k, (o, &p)) in out.as_mut_slice().iter_mut().zip(pre.as_slice()).enumerate() {
            let a = arch.activation.apply(p);
            *o = if mask.is_empty() { a } else { a * mask[k] };
        }

        caches.push(BlockCache {
            input: x,
            normalized,
            inv_std,
            pre_activation: pre,
            mask,
            batch_mean: mean,
            batch_var: var,
        });
        x = out;
    }
    let mut logits = x.matmul(&params.head_weight);
    logits.add_row_vector(&params.head_bias);
    if !logits.all_finite() {
        return Err(Error::numeric("non-finite logits"));
    }
    Ok((
        logits,
        ForwardCache {
            mode,
            blocks: caches,
            head_input: x,
        },
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probs(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

fn check_labels(labels: &[usize], rows: usize, n_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::data(format!("{} labels for {rows} samples", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::data(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient with respect to every trainable
/// parameter, plus the forward cache (for running-statistic updates).
pub fn loss_and_gradients(
    params: &MlpParams,
    batch: &Matrix,
    labels: &[usize],
    mode: Mode,
    rng_seed: u64,
) -> Result<(f64, Gradients, ForwardCache)> {
    check_labels(labels, batch.rows(), params.arch.n_classes)?;
    let (logits, cache) = forward(params, batch, mode, rng_seed)?;
    let loss = cross_entropy(&logits, labels);
    let n = batch.rows() as f64;

    let mut delta = softmax_probs(&logits);
    for (i, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }

    let head_weight = cache.head_input.t_matmul(&delta);
    let head_bias = delta.column_sums();
    let mut upstream = delta.matmul_t(&params.head_weight);

    let activation = params.arch.activation;
    let mut block_grads = Vec::with_capacity(params.blocks.len());
    for (block, bc) in params.blocks.iter().zip(&cache.blocks).rev() {
        let width = block.gamma.len();
        let rows = upstream.rows();
        // through dropout and activation
        let mut d_pre = upstream;
        for (k, (g, &p)) in d_pre.as_mut_slice().iter_mut().zip(bc.pre_activation.as_slice()).enumerate() {
            if !bc.mask.is_empty() {
                *g *= bc.mask[k];
            }
            *g *= activation.derivative(p);
        }
        let mut d_gamma = vec![0.0; width];
        let mut d_shift = vec![0.0; width];
        for i in 0..rows {
            for j in 0..width {
                let g = d_pre.get(i, j);
                d_gamma[j] += g * bc.normalized.get(i, j);
                d_shift[j] += g;
            }
        }
        // through batch norm
        let mut d_z = Matrix::zeros(rows, width);
        match cache.mode {
            Mode::Train => {
                let m = rows as f64;
                for j in 0..width {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in 0..rows {
                        let dxhat = d_pre.get(i, j) * block.gamma[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * bc.normalized.get(i, j);
                    }
                    for i in 0..rows {
                        let dxhat = d_pre.get(i, j) * block.gamma[j];
                        d_z.row_mut(i)[j] =
                            bc.inv_std[j] / m * (m * dxhat - sum_dxhat - bc.normalized.get(i, j) * sum_dxhat_xhat);
                    }
                }
            }
            Mode::Eval => {
                for i in 0..rows {
                    for j in 0..width {
                        d_z.row_mut(i)[j] = d_pre.get(i, j) * block.gamma[j] * bc.inv_std[j];
                    }
                }
            }
        }
        let weight = bc.input.t_matmul(&d_z);
        let bias = d_z.column_sums();
        upstream = d_z.matmul_t(&block.weight);
        block_grads.push(BlockGrad {
            weight,
            bias,
            gamma: d_gamma,
            shift: d_shift,
        });
    }
    block_grads.reverse();
    Ok((
        loss,
        Gradients {
            blocks: block_grads,
            head_weight,
            head_bias,
        },
        cache,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub bn_momentum: f64,
    /// `None` trains on uniformly shuffled epochs.
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.05,
            seed: 0,
            bn_momentum: 0.1,
            sampler: Some(SamplerConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::config("epochs must be positive and batch_size at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::config("bn_momentum must be in (0, 1)"));
        }
        if let Some(s) = &self.sampler {
            s.validate()?;
        }
        Ok(())
    }
}

/// One gradient-descent step on a batch. Running batch-norm statistics move
/// toward the batch statistics by `bn_momentum` (unbiased variance).
pub fn backward_step(
    params: &MlpParams,
    batch: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<(MlpParams, f64)> {
    let (loss, grads, cache) = loss_and_gradients(params, batch, labels, Mode::Train, rng_seed)?;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite training loss"));
    }
    for (name, g) in grads.groups() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in layer {name}")));
        }
    }
    let mut next = params.clone();
    let lr = config.learning_rate;
    for ((_, p), (_, g)) in next.trainable_groups_mut().into_iter().zip(grads.groups()) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    }
    let n = batch.rows() as f64;
    let m = config.bn_momentum;
    for (block, bc) in next.blocks.iter_mut().zip(&cache.blocks) {
        for j in 0..block.running_mean.len() {
            block.running_mean[j] = (1.0 - m) * block.running_mean[j] + m * bc.batch_mean[j];
            let unbiased = bc.batch_var[j] * n / (n - 1.0);
            block.running_var[j] = (1.0 - m) * block.running_var[j] + m * unbiased;
        }
    }
    if !next.all_finite() {
        return Err(Error::numeric("non-finite parameters after update"));
    }
    Ok((next, loss))
}

/// Eval-mode class probabilities.
pub fn predict_proba(params: &MlpParams, samples: &Matrix) -> Result<Matrix> {
    let (logits, _) = forward(params, samples, Mode::Eval, 0)?;
    Ok(softmax_probs(&logits))
}

/// Index of the largest entry in each row; ties go to the lower index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-class F1; 0 when precision + recall has a zero denominator.
pub fn classwise_f1(predictions: &[usize], truths: &[usize], n_classes: usize) -> Vec<f64> {
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut true_count = vec![0usize; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    (0..n_classes)
        .map(|c| {
            // 2PR/(P+R) = 2tp / (predicted + actual)
            let denom = pred_count[c] + true_count[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect()
}

/// Classwise F1 averaged over `folds` stratified slices of the evaluation
/// set. Samples of each class are dealt round-robin to the folds. A class
/// contributes to a fold's average only when it is present in that fold's
/// truths or predictions; a class never present anywhere gets 0.
pub fn fold_averaged_f1(predictions: &[usize], truths: &[usize], n_classes: usize, folds: usize) -> Vec<f64> {
    let folds = folds.max(1);
    let mut next_fold = vec![0usize; n_classes];
    let mut fold_of = Vec::with_capacity(truths.len());
    for &t in truths {
        fold_of.push(next_fold[t] % folds);
        next_fold[t] += 1;
    }
    let mut sums = vec![0.0; n_classes];
    let mut used = vec![0usize; n_classes];
    for f in 0..folds {
        let members: Vec<usize> = (0..truths.len()).filter(|&i| fold_of[i] == f).collect();
        if members.is_empty() {
            continue;
        }
        let p: Vec<usize> = members.iter().map(|&i| predictions[i]).collect();
        let t: Vec<usize> = members.iter().map(|&i| truths[i]).collect();
        let f1 = classwise_f1(&p, &t, n_classes);
        for c in 0..n_classes {
            if p.contains(&c) || t.contains(&c) {
                sums[c] += f1[c];
                used[c] += 1;
            }
        }
    }
    sums.iter()
        .zip(&used)
        .map(|(&s, &u)| if u == 0 { 0.0 } else { s / u as f64 })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    /// Classwise F1 on the whole validation set after each epoch; empty
    /// vectors when there is no validation set.
    pub validation_f1: Vec<Vec<f64>>,
    /// Sampler class weights used for each epoch; `None` when unsampled.
    pub sampler_weights: Vec<Option<Vec<f64>>>,
}

/// All embeddings of `dataset` as one matrix, in sample order.
pub fn embedding_matrix(dataset: &Dataset) -> Matrix {
    let rows: Vec<&[f64]> = dataset.samples().iter().map(|s| s.embedding.as_slice()).collect();
    Matrix::from_rows(&rows)
}

fn predict_labels(params: &MlpParams, x: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_proba(params, x)?))
}

/// Trains a fresh network on `split.train`.
///
/// With a sampler configured, weights start from training-set class
/// frequencies and are refreshed from fold-averaged validation F1 whenever
/// `update_period` epochs have elapsed; each epoch then draws `|train|`
/// indices with replacement. Without one, each epoch is a seeded shuffle of
/// the training indices. A trailing batch of one sample is dropped.
pub fn train(
    dataset: &Dataset,
    split: &DatasetSplit,
    arch: &MlpArchitecture,
    config: &TrainConfig,
) -> Result<(MlpParams, TrainHistory)> {
    config.validate()?;
    split.validate(dataset.len())?;
    if arch.input_dim != dataset.embedding_dim() {
        return Err(Error::config(format!(
            "input_dim {} does not match embedding dimension {}",
            arch.input_dim,
            dataset.embedding_dim()
        )));
    }
    if arch.n_classes != dataset.n_classes() {
        return Err(Error::config(format!(
            "architecture has {} classes, dataset has {}",
            arch.n_classes,
            dataset.n_classes()
        )));
    }
    if split.train.len() < 2 {
        return Err(Error::data("training split needs at least 2 samples"));
    }
    if config.sampler.is_some() && split.validation.is_empty() {
        return Err(Error::data("the dynamic sampler needs a non-empty validation split"));
    }

    let all_x = embedding_matrix(dataset);
    let labels = dataset.labels();
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let val_x = all_x.select_rows(&split.validation);
    let val_y: Vec<usize> = split.validation.iter().map(|&i| labels[i]).collect();

    let init_seed = seed::stream_seed(config.seed, seed::INIT);
    let dropout_seed = seed::stream_seed(config.seed, seed::DROPOUT);
    let order_seed = seed::stream_seed(config.seed, seed::SAMPLER);

    let mut params = init_mlp(arch, init_seed)?;
    let mut state = match &config.sampler {
        Some(s) => Some(SamplerState::from_counts(&class_counts(dataset, &split.train)?, s)?),
        None => None,
    };
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        if let (Some(sc), Some(st)) = (&config.sampler, state.as_ref()) {
            if epoch >= st.last_update_epoch() + sc.update_period {
                let preds = predict_labels(&params, &val_x)?;
                let f1 = fold_averaged_f1(&preds, &val_y, arch.n_classes, sc.cv_folds);
                state = Some(update_sampler(st, &f1, sc, epoch)?);
            }
        }

        let epoch_seed = seed::child_seed(order_seed, epoch as u64);
        let order: Vec<usize> = match &state {
            Some(st) => draw_epoch_indices(st, &train_labels, split.train.len(), epoch_seed)?
                .into_iter()
                .map(|k| split.train[k])
                .collect(),
            None => {
                let mut o = split.train.clone();
                o.shuffle(&mut seed::rng(epoch_seed));
                o
            }
        };

        let epoch_dropout = seed::child_seed(dropout_seed, epoch as u64);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = all_x.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (next, loss) = backward_step(&params, &x, &y, config, seed::child_seed(epoch_dropout, b as u64))?;
            params = next;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        history.epoch_loss.push(loss_sum / seen.max(1) as f64);
        history.validation_f1.push(if val_y.is_empty() {
            Vec::new()
        } else {
            classwise_f1(&predict_labels(&params, &val_x)?, &val_y, arch.n_classes)
        });
        history
            .sampler_weights
            .push(state.as_ref().map(|s| s.class_weights().to_vec()));
    }
    Ok((params, history))
}

const CHECKPOINT_FORMAT: &str = "fairconf-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: MlpParams,
}

/// JSON checkpoint; floats are written in shortest round-trip form, so a
/// reload is bit-exact.
pub fn checkpoint_to_string(params: &MlpParams) -> Result<String> {
    serde_json::to_string(&Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    })
    .map_err(|e| Error::data(format!("serializing checkpoint: {e}")))
}

pub fn checkpoint_from_str(s: &str) -> Result<MlpParams> {
    let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::data(format!("parsing checkpoint: {e}")))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let widths = ck.params.arch.widths()?;
    let p = &ck.params;
    let shapes_ok = p.blocks.len() == p.arch.n_blocks
        && p.blocks.iter().enumerate().all(|(b, blk)| {
            let w = widths[b + 1];
            blk.weight.rows() == widths[b]
                && blk.weight.cols() == w
                && [&blk.bias, &blk.gamma, &blk.shift, &blk.running_mean, &blk.running_var]
                    .iter()
                    .all(|v| v.len() == w)
        })
        && p.head_weight.rows() == widths[p.arch.n_blocks]
        && p.head_weight.cols() == p.arch.n_classes
        && p.head_bias.len() == p.arch.n_classes;
    if !shapes_ok {
        return Err(Error::data("checkpoint parameter shapes do not match its architecture"));
    }
    Ok(ck.params)
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    checkpoint_from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
