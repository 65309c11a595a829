//! Log-linear grounding distribution over chunk subsets.
//!
//! `pi(z) ∝ exp(Σ_j s_j z_j + Σ_{i<j} W_ij z_i z_j)`. Without coupling the distribution
//! factorises into independent Bernoulli selections with `p_j = sigmoid(s_j)`; with
//! coupling every quantity is computed by enumerating all `2^N` subsets, so `N` is
//! capped at [`MAX_ENUM_CHUNKS`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest chunk count handled by exact enumeration.
pub const MAX_ENUM_CHUNKS: usize = 20;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A selection vector `z` with `z[j] = 1` iff chunk `j + 1` is selected.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroundingSample {
    pub z: Vec<bool>,
}

impl GroundingSample {
    pub fn from_mask(mask: u64, n: usize) -> Self {
        Self { z: (0..n).map(|j| mask >> j & 1 == 1).collect() }
    }

    /// Bitmask form; only meaningful for `n <= 64`.
    pub fn mask(&self) -> u64 {
        self.z.iter().enumerate().filter(|(_, b)| **b).fold(0, |m, (j, _)| m | 1 << j)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn count(&self) -> usize {
        self.z.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyRecord {
    n_chunks: usize,
    logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupling: Option<Vec<Vec<f64>>>,
}

/// Grounding policy with per-chunk logits and optional symmetric pairwise coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRecord", into = "PolicyRecord")]
pub struct LogLinearGroundingPolicy {
    logits: Vec<f64>,
    coupling: Option<Vec<Vec<f64>>>,
}

impl TryFrom<PolicyRecord> for LogLinearGroundingPolicy {
    type Error = Error;
    fn try_from(r: PolicyRecord) -> Result<Self> {
        if r.logits.len() != r.n_chunks {
            return invalid(format!("n_chunks {} but {} logits", r.n_chunks, r.logits.len()));
        }
        match r.coupling {
            Some(w) => Self::coupled(r.logits, w),
            None => Self::independent(r.logits),
        }
    }
}

impl From<LogLinearGroundingPolicy> for PolicyRecord {
    fn from(p: LogLinearGroundingPolicy) -> Self {
        Self { n_chunks: p.logits.len(), logits: p.logits, coupling: p.coupling }
    }
}

impl LogLinearGroundingPolicy {
    pub fn independent(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return invalid("policy needs at least one chunk");
        }
        if logits.iter().any(|s| !s.is_finite()) {
            return invalid("logits must be finite");
        }
        Ok(Self { logits, coupling: None })
    }

    /// Independent policy with the given selection probabilities.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return invalid(format!("probabilities must lie in (0, 1), got {p}"));
        }
        Self::independent(probs.iter().map(|&p| logit(p)).collect())
    }

    /// Coupled policy; `coupling` must be an `N×N` symmetric matrix with zero diagonal.
    pub fn coupled(logits: Vec<f64>, coupling: Vec<Vec<f64>>) -> Result<Self> {
        let mut p = Self::independent(logits)?;
        let n = p.logits.len();
        if coupling.len() != n || coupling.iter().any(|row| row.len() != n) {
            return invalid(format!("coupling must be {n}x{n}"));
        }
        for i in 0..n {
            if coupling[i][i] != 0.0 {
                return invalid("coupling diagonal must be zero");
            }
            for j in 0..i {
                if coupling[i][j] != coupling[j][i] || !coupling[i][j].is_finite() {
                    return invalid(format!("coupling not symmetric/finite at ({i}, {j})"));
                }
            }
        }
        p.coupling = Some(coupling);
        Ok(p)
    }

    pub fn n_chunks(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn coupling(&self) -> Option<&[Vec<f64>]> {
        self.coupling.as_deref()
    }

    pub fn is_independent(&self) -> bool {
        self.coupling.is_none()
    }

    /// Adds `step` to the logits.
    pub fn ascend(&mut self, step: &[f64]) {
        for (s, d) in self.logits.iter_mut().zip(step) {
            *s += d;
        }
    }

    /// Returns a copy with logit `j` shifted by `h`.
    pub fn shifted(&self, j: usize, h: f64) -> Self {
        let mut p = self.clone();
        p.logits[j] += h;
        p
    }

    fn check_len(&self, z: &[bool]) -> Result<()> {
        if z.len() != self.n_chunks() {
            return invalid(format!("selection of length {} for {} chunks", z.len(), self.n_chunks()));
        }
        Ok(())
    }

    /// Unnormalised log-weight `Σ s_j z_j + ψ(z)` of a bitmask.
    pub fn energy(&self, mask: u64) -> f64 {
        let n = self.n_chunks();
        let mut e = 0.0;
        for j in 0..n {
            if mask >> j & 1 == 1 {
                e += self.logits[j];
            }
        }
        if let Some(w) = &self.coupling {
            for i in 0..n {
                if mask >> i & 1 == 0 {
                    continue;
                }
                for j in (i + 1)..n {
                    if mask >> j & 1 == 1 {
                        e += w[i][j];
                    }
                }
            }
        }
        e
    }

    /// Full probability table over all `2^N` subsets.
    pub fn exact(&self) -> Result<ExactDistribution> {
        let n = self.n_chunks();
        if n > MAX_ENUM_CHUNKS {
            return Err(Error::UnsupportedSize { n, max: MAX_ENUM_CHUNKS });
        }
        let energies: Vec<f64> = (0..1u64 << n).map(|m| self.energy(m)).collect();
        let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Ok(ExactDistribution {
            n,
            log_normalizer: max + total.ln(),
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn log_prob(&self, z: &[bool]) -> Result<f64> {
        self.check_len(z)?;
        if self.is_independent() {
            return Ok(self
                .logits
                .iter()
                .zip(z)
                .map(|(&s, &b)| if b { -softplus(-s) } else { -softplus(s) })
                .sum());
        }
        let d = self.exact()?;
        Ok(self.energy(GroundingSample { z: z.to_vec() }.mask()) - d.log_normalizer)
    }

    /// Selection marginals `p_j = E[z_j]`.
    pub fn marginals(&self) -> Result<Vec<f64>> {
        if self.is_independent() {
            return Ok(self.logits.iter().map(|&s| sigmoid(s)).collect());
        }
        Ok(self.exact()?.marginals())
    }

    /// Score function `∇_s log pi(z) = z - p`.
    pub fn score(&self, z: &[bool]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        let p = self.marginals()?;
        Ok(score_with(z, &p))
    }

    /// Prepares a reusable sampler.
    pub fn sampler(&self) -> Result<Sampler> {
        if self.is_independent() {
            return Ok(Sampler::Independent(self.marginals()?));
        }
        let d = self.exact()?;
        let mut acc = 0.0;
        let cdf = d
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Sampler::Table { n: d.n, cdf })
    }

    pub fn sample(&self, rng: &mut crate::rng::Rng) -> Result<GroundingSample> {
        Ok(self.sampler()?.sample(rng))
    }
}

pub(crate) fn score_with(z: &[bool], p: &[f64]) -> Vec<f64> {
    z.iter().zip(p).map(|(&b, &pj)| f64::from(u8::from(b)) - pj).collect()
}

/// Exact sampler, either per-coordinate Bernoulli or inverse-CDF over the subset table.
#[derive(Debug, Clone)]
pub enum Sampler {
    Independent(Vec<f64>),
    Table { n: usize, cdf: Vec<f64> },
}

impl Sampler {
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> GroundingSample {
        match self {
            Sampler::Independent(p) => {
                GroundingSample { z: p.iter().map(|&pj| rng.random::<f64>() < pj).collect() }
            }
            Sampler::Table { n, cdf } => {
                let u = rng.random::<f64>() * cdf[cdf.len() - 1];
                let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                GroundingSample::from_mask(idx as u64, *n)
            }
        }
    }
}

/// Probability of every subset, indexed by bitmask.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    pub n: usize,
    pub log_normalizer: f64,
    pub probs: Vec<f64>,
}

impl ExactDistribution {
    pub fn prob(&self, mask: u64) -> f64 {
        self.probs[mask as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.probs.iter().enumerate().map(|(m, &p)| (m as u64, p))
    }

    pub fn expectation(&self, mut f: impl FnMut(u64) -> f64) -> f64 {
        self.iter().map(|(m, p)| p * f(m)).sum()
    }

    pub fn marginals(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n];
        for (m, pm) in self.iter() {
            for (j, pj) in p.iter_mut().enumerate() {
                if m >> j & 1 == 1 {
                    *pj += pm;
                }
            }
        }
        p
    }

    /// `E[z_i z_j]` for all pairs.
    pub fn second_moments(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (m, pm) in self.iter() {
            for i in 0..self.n {
                if m >> i & 1 == 0 {
                    continue;
                }
                for j in 0..self.n {
                    if m >> j & 1 == 1 {
                        out[i][j] += pm;
                    }
                }
            }
        }
        out
    }
}
