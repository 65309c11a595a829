//! Monte-Carlo policy-gradient estimators.
//!
//! Rollout `i` draws its selection and its reward from substream `i` of the master
//! seed, and results are reduced in index order, so estimates do not depend on the
//! number of worker threads.

use crate::error::{invalid, Result};
use crate::policy::{score_with, GroundingSample, LogLinearGroundingPolicy};
use crate::rng::{self, Rng};

/// Numerical guard added to the group standard deviation.
pub const STD_EPS: f64 = 1e-8;

/// Baseline subtracted from the reward in REINFORCE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    None,
    Constant(f64),
    /// Mean reward of the other rollouts in the batch (leave-one-out).
    BatchMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_rollouts: usize,
}

impl GradientEstimate {
    /// Mean and standard error of per-unit contributions.
    fn from_units(units: &[Vec<f64>], n_rollouts: usize) -> Self {
        let m = units.len() as f64;
        let n = units[0].len();
        let mut mean = vec![0.0; n];
        for u in units {
            for (a, x) in mean.iter_mut().zip(u) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; n];
        for u in units {
            for ((v, x), mu) in var.iter_mut().zip(u).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        let std_error = var.iter().map(|v| (v / (m - 1.0) / m).sqrt()).collect();
        Self { mean, std_error, n_rollouts }
    }

    /// Largest `|mean_j - target_j| / se_j`; coordinates with zero error must match exactly.
    pub fn max_z_score(&self, target: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.std_error)
            .zip(target)
            .map(|((m, se), t)| {
                if *se > 0.0 {
                    (m - t).abs() / se
                } else if (m - t).abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Sampled selections with their rewards and the policy that produced them.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub samples: Vec<(GroundingSample, f64)>,
    pub policy_snapshot: LogLinearGroundingPolicy,
}

impl RolloutBatch {
    /// Draws `n` rollouts; `reward` may use the rollout's rng for stochastic rewards.
    pub fn collect<F>(policy: &LogLinearGroundingPolicy, reward: F, n: usize, seed: u64) -> Result<Self>
    where
        F: Fn(&[bool], &mut Rng) -> f64 + Sync,
    {
        if n == 0 {
            return invalid("batch must contain at least one rollout");
        }
        let sampler = policy.sampler()?;
        let one = |i: usize| {
            let mut r = rng::substream(seed, i as u64);
            let s = sampler.sample(&mut r);
            let v = reward(&s.z, &mut r);
            (s, v)
        };
        #[cfg(feature = "parallel")]
        let samples = {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(one).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let samples = (0..n).map(one).collect();
        Ok(Self { samples, policy_snapshot: policy.clone() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|(_, r)| *r).collect()
    }
}

/// Score-function estimate `(1/n) Σ (r_i - b_i)(z_i - p)`.
pub fn reinforce_estimate<F>(
    policy: &LogLinearGroundingPolicy,
    reward: F,
    n: usize,
    baseline: Baseline,
    seed: u64,
) -> Result<GradientEstimate>
where
    F: Fn(&[bool], &mut Rng) -> f64 + Sync,
{
    if n < 2 {
        return invalid("REINFORCE needs at least 2 rollouts");
    }
    let batch = RolloutBatch::collect(policy, reward, n, seed)?;
    reinforce_from_batch(&batch, baseline)
}

pub fn reinforce_from_batch(batch: &RolloutBatch, baseline: Baseline) -> Result<GradientEstimate> {
    let n = batch.len();
    if n < 2 {
        return invalid("REINFORCE needs at least 2 rollouts");
    }
    let p = batch.policy_snapshot.marginals()?;
    let total: f64 = batch.samples.iter().map(|(_, r)| r).sum();
    let units: Vec<Vec<f64>> = batch
        .samples
        .iter()
        .map(|(s, r)| {
            let b = match baseline {
                Baseline::None => 0.0,
                Baseline::Constant(b) => b,
                Baseline::BatchMean => (total - r) / (n - 1) as f64,
            };
            score_with(&s.z, &p).into_iter().map(|x| (r - b) * x).collect()
        })
        .collect();
    Ok(GradientEstimate::from_units(&units, n))
}

/// Group-relative advantages `r_i - mean(r)`, optionally divided by the sample standard
/// deviation plus [`STD_EPS`].
pub fn group_advantages(rewards: &[f64], normalize_std: bool) -> Vec<f64> {
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !normalize_std || rewards.len() < 2 {
        return adv;
    }
    let sd = (adv.iter().map(|a| a * a).sum::<f64>() / (k - 1.0)).sqrt();
    adv.iter().map(|a| a / (sd + STD_EPS)).collect()
}

/// Per-group GRPO contributions `(1/K) Σ_i A_i (z_i - p)`; rollouts are grouped in
/// consecutive runs of `k`.
pub fn grpo_units(samples: &[(GroundingSample, f64)], p: &[f64], k: usize, normalize_std: bool) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return invalid("GRPO group size must be at least 2");
    }
    if samples.is_empty() || samples.len() % k != 0 {
        return invalid(format!("{} rollouts do not form groups of {k}", samples.len()));
    }
    Ok(samples
        .chunks(k)
        .map(|group| {
            let rewards: Vec<f64> = group.iter().map(|(_, r)| *r).collect();
            let adv = group_advantages(&rewards, normalize_std);
            let mut u = vec![0.0; p.len()];
            for ((s, _), a) in group.iter().zip(&adv) {
                if *a == 0.0 {
                    continue;
                }
                for (x, sc) in u.iter_mut().zip(score_with(&s.z, p)) {
                    *x += a * sc;
                }
            }
            u.iter_mut().for_each(|x| *x /= k as f64);
            u
        })
        .collect())
}

/// Mean GRPO ascent direction over all groups of a batch.
pub fn grpo_direction(batch: &RolloutBatch, k: usize, normalize_std: bool) -> Result<Vec<f64>> {
    let p = batch.policy_snapshot.marginals()?;
    let units = grpo_units(&batch.samples, &p, k, normalize_std)?;
    let m = units.len() as f64;
    let mut d = vec![0.0; p.len()];
    for u in &units {
        for (a, x) in d.iter_mut().zip(u) {
            *a += x;
        }
    }
    d.iter_mut().for_each(|a| *a /= m);
    Ok(d)
}

/// GRPO surrogate gradient at `theta = theta_old`; with `normalize_std = false` its
/// expectation is `(K - 1) / K` times the exact gradient.
pub fn grpo_estimate<F>(
    policy: &LogLinearGroundingPolicy,
    reward: F,
    groups: usize,
    k: usize,
    normalize_std: bool,
    seed: u64,
) -> Result<GradientEstimate>
where
    F: Fn(&[bool], &mut Rng) -> f64 + Sync,
{
    if k < 2 {
        return invalid("GRPO group size must be at least 2");
    }
    if groups < 2 {
        return invalid("GRPO estimate needs at least 2 groups");
    }
    let batch = RolloutBatch::collect(policy, reward, groups * k, seed)?;
    let p = policy.marginals()?;
    let units = grpo_units(&batch.samples, &p, k, normalize_std)?;
    Ok(GradientEstimate::from_units(&units, groups * k))
}
