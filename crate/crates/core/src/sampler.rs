//! Challenge-regulated F1-score dynamic sampling.
//!
//! Class weights start from inverse class frequencies. Every `update_period`
//! epochs they are replaced by normalized inverse validation F1 scores; any
//! class whose F1-weight falls below the threshold `lambda` is sampled at the
//! baseline weight `beta` instead, and the vector is renormalized. Training
//! indices are then drawn with replacement so that each class is drawn in
//! proportion to its weight.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// How a threshold or baseline value is obtained from a weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// `mean(weights) + k * stddev(weights)`, population standard deviation.
    MeanPlusSigma(f64),
}

impl ThresholdPolicy {
    pub fn resolve(&self, weights: &[f64]) -> f64 {
        match *self {
            ThresholdPolicy::Fixed(v) => v,
            ThresholdPolicy::MeanPlusSigma(k) => {
                let (mean, sd) = mean_std(weights);
                mean + k * sd
            }
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub lambda_policy: ThresholdPolicy,
    pub beta_policy: ThresholdPolicy,
    /// Epochs between weight refreshes.
    pub update_period: usize,
    /// Number of validation folds the classwise F1 is averaged over.
    pub cv_folds: usize,
    pub f1_epsilon: f64,
    /// Resolve `lambda`/`beta` once from the initial frequency weights instead
    /// of from each new F1-weight vector.
    #[serde(default)]
    pub freeze_policies: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lambda_policy: ThresholdPolicy::MeanPlusSigma(1.0),
            beta_policy: ThresholdPolicy::MeanPlusSigma(2.0),
            update_period: 4,
            cv_folds: 10,
            f1_epsilon: 1e-3,
            freeze_policies: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_period == 0 {
            return Err(Error::config("update_period must be positive"));
        }
        if self.cv_folds == 0 {
            return Err(Error::config("cv_folds must be positive"));
        }
        if !(self.f1_epsilon > 0.0 && self.f1_epsilon <= 1.0) {
            return Err(Error::config("f1_epsilon must be in (0, 1]"));
        }
        for p in [self.lambda_policy, self.beta_policy] {
            let v = match p {
                ThresholdPolicy::Fixed(v) | ThresholdPolicy::MeanPlusSigma(v) => v,
            };
            if !v.is_finite() {
                return Err(Error::config("sampler policy parameters must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    class_weights: Vec<f64>,
    last_update_epoch: usize,
    frozen_policies: Option<(f64, f64)>,
}

impl SamplerState {
    /// Frequency-initialized state at epoch 0.
    pub fn from_counts(counts: &[usize], config: &SamplerConfig) -> Result<Self> {
        let class_weights = init_frequency_weights(counts)?;
        let frozen_policies = if config.freeze_policies {
            Some(resolve_policies(&class_weights, config)?)
        } else {
            None
        };
        Ok(Self {
            class_weights,
            last_update_epoch: 0,
            frozen_policies,
        })
    }

    pub fn with_weights(class_weights: Vec<f64>, last_update_epoch: usize) -> Result<Self> {
        check_normalized(&class_weights)?;
        Ok(Self {
            class_weights,
            last_update_epoch,
            frozen_policies: None,
        })
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn last_update_epoch(&self) -> usize {
        self.last_update_epoch
    }
}

fn check_normalized(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(Error::numeric("class weights must be finite and strictly positive"));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::numeric(format!("class weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let sum: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= sum;
    }
    w
}

/// `w_i = (1/n_i) / sum_j (1/n_j)`.
pub fn init_frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::data("no classes to weight"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::data(format!("class {c} has zero samples; cannot form frequency weights")));
    }
    Ok(normalize(counts.iter().map(|&n| 1.0 / n as f64).collect()))
}

/// Inverse F1 scores, floored at `epsilon` before inversion, normalized to sum 1.
pub fn f1_to_weights(f1_scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if f1_scores.is_empty() {
        return Err(Error::data("no F1 scores given"));
    }
    if let Some(bad) = f1_scores.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::numeric(format!("F1 score {bad} outside [0, 1]")));
    }
    Ok(normalize(f1_scores.iter().map(|&f| 1.0 / f.max(epsilon)).collect()))
}

/// Replaces every weight below `lambda` by `beta`, keeps the rest, and
/// renormalizes.
pub fn apply_threshold(weights: &[f64], lambda: f64, beta: f64) -> Result<Vec<f64>> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::config(format!("baseline weight beta must be non-negative, got {beta}")));
    }
    if beta > lambda {
        return Err(Error::config(format!(
            "baseline weight beta ({beta}) exceeds threshold lambda ({lambda})"
        )));
    }
    let replaced = weights.iter().any(|&w| w < lambda);
    if replaced && beta == 0.0 {
        return Err(Error::config("baseline weight beta is zero but some weights fall below lambda"));
    }
    let raw = weights.iter().map(|&w| if w < lambda { beta } else { w }).collect();
    Ok(normalize(raw))
}

/// Resolves `(lambda, beta)` against `weights`, clamping `beta` to at most `lambda`.
pub fn resolve_policies(weights: &[f64], config: &SamplerConfig) -> Result<(f64, f64)> {
    if weights.len() < 2 {
        return Err(Error::config("threshold policies need at least two classes"));
    }
    let lambda = config.lambda_policy.resolve(weights);
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::config(format!("resolved threshold lambda = {lambda} is not positive")));
    }
    let beta = config.beta_policy.resolve(weights).min(lambda);
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::config(format!("resolved baseline beta = {beta} is not positive")));
    }
    Ok((lambda, beta))
}

/// Refreshes the weights from classwise F1 scores if at least `update_period`
/// epochs have passed since the last refresh; otherwise returns `state` as is.
pub fn update_sampler(state: &SamplerState, f1_scores: &[f64], config: &SamplerConfig, epoch: usize) -> Result<SamplerState> {
    if epoch < state.last_update_epoch + config.update_period {
        return Ok(state.clone());
    }
    if f1_scores.len() != state.class_weights.len() {
        return Err(Error::data(format!(
            "{} F1 scores for {} classes",
            f1_scores.len(),
            state.class_weights.len()
        )));
    }
    let f1_weights = f1_to_weights(f1_scores, config.f1_epsilon)?;
    let (lambda, beta) = match state.frozen_policies {
        Some(p) => p,
        None => resolve_policies(&f1_weights, config)?,
    };
    let class_weights = apply_threshold(&f1_weights, lambda, beta)?;
    check_normalized(&class_weights)?;
    Ok(SamplerState {
        class_weights,
        last_update_epoch: epoch,
        frozen_policies: state.frozen_policies,
    })
}

/// Draws `n_draws` sample indices with replacement. Sample `j` has probability
/// `class_weights[label_j] / count(label_j)`.
pub fn draw_epoch_indices(state: &SamplerState, labels: &[usize], n_draws: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let k = state.class_weights.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::data(format!("label {l} out of range for {k} classes")));
        }
        members[l].push(j);
    }
    let mut weights = state.class_weights.clone();
    for (c, w) in weights.iter_mut().enumerate() {
        if members[c].is_empty() {
            if *w > 0.0 {
                return Err(Error::data(format!("class {c} has positive weight but no samples")));
            }
            *w = 0.0;
        }
    }
    let class_dist = WeightedIndex::new(&weights).map_err(|e| Error::numeric(format!("sampler weights: {e}")))?;
    let mut rng = seed::rng(rng_seed);
    Ok((0..n_draws)
        .map(|_| {
            let pool = &members[class_dist.sample(&mut rng)];
            pool[rng.random_range(0..pool.len())]
        })
        .collect())
}
