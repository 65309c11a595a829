//! Synthetic sparse-answer environment.
//!
//! The expected answer reward given a selection `Z` depends only on `Z ∩ G` through a
//! monotone set function `f` with `f(∅) = 0`:
//! `E[r_ans | Z] = mu0 + sigmoid(a) * f(Z ∩ G)`, where `a` is the learnable competence
//! logit of the answer head (`a = +inf` freezes competence at 1).
//!
//! Subsets of `G` are bitmasks over the positions of the sorted evidence list.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::ChunkId;
use crate::error::{invalid, Error, Result};
use crate::oracle::EvidenceLaw;
use crate::policy::{sigmoid, LogLinearGroundingPolicy};

/// Largest evidence set whose set function is validated by enumeration.
pub const MAX_ENUM_EVIDENCE: usize = 16;

/// Bitmask over evidence positions.
pub type EvidenceMask = u64;

/// Shape of the evidence set function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetFunctionKind {
    /// `delta * 1{T = G}`.
    AllOrNothing { delta: f64 },
    /// `Σ_{k in T} alpha_k`, weights in evidence order.
    WeightedCoverage { alphas: Vec<f64> },
    /// `delta * 1{|T| >= t}`.
    Threshold { t: usize, delta: f64 },
    /// Explicit value for each of the `2^|G|` subsets, indexed by evidence mask.
    Tabulated { values: Vec<f64> },
}

/// Monotone, non-negative set function over subsets of the gold evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSetFunction {
    kind: SetFunctionKind,
    evidence: Vec<ChunkId>,
}

impl EvidenceSetFunction {
    pub fn new(kind: SetFunctionKind, evidence: &BTreeSet<ChunkId>) -> Result<Self> {
        let f = Self::new_unchecked(kind, evidence)?;
        f.validate()?;
        Ok(f)
    }

    /// Builds the function without the monotonicity check. Shape errors are still
    /// reported. Used to plant counterexamples.
    pub fn new_unchecked(kind: SetFunctionKind, evidence: &BTreeSet<ChunkId>) -> Result<Self> {
        let g = evidence.len();
        if g == 0 {
            return invalid("evidence set must be non-empty");
        }
        if g > 64 {
            return invalid("evidence sets are limited to 64 chunks");
        }
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                invalid(format!("{what} must be positive, got {x}"))
            }
        };
        match &kind {
            SetFunctionKind::AllOrNothing { delta } => positive(*delta, "delta")?,
            SetFunctionKind::WeightedCoverage { alphas } => {
                if alphas.len() != g {
                    return invalid(format!("{} alphas for {g} evidence chunks", alphas.len()));
                }
                for a in alphas {
                    positive(*a, "alpha")?;
                }
            }
            SetFunctionKind::Threshold { t, delta } => {
                positive(*delta, "delta")?;
                if *t == 0 || *t > g {
                    return invalid(format!("threshold {t} outside 1..={g}"));
                }
            }
            SetFunctionKind::Tabulated { values } => {
                if g > MAX_ENUM_EVIDENCE || values.len() != 1 << g {
                    return invalid(format!("tabulated function needs 2^{g} values"));
                }
            }
        }
        if g > MAX_ENUM_EVIDENCE && !matches!(kind, SetFunctionKind::WeightedCoverage { .. }) {
            return invalid(format!(
                "evidence sets above {MAX_ENUM_EVIDENCE} chunks require weighted coverage"
            ));
        }
        Ok(Self { kind, evidence: evidence.iter().copied().collect() })
    }

    /// Checks `f(∅) = 0`, non-negativity and monotonicity by enumeration.
    pub fn validate(&self) -> Result<()> {
        if self.value(0) != 0.0 {
            return Err(Error::Invariant("f(empty set) must be 0".into()));
        }
        let g = self.g();
        if g > MAX_ENUM_EVIDENCE {
            // only weighted coverage reaches here; modular with positive weights
            return Ok(());
        }
        for t in 0..1u64 << g {
            let v = self.value(t);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invariant(format!("f({t:#b}) = {v} is not a finite non-negative value")));
            }
            for k in 0..g {
                if t >> k & 1 == 0 && self.value(t | 1 << k) < v {
                    return Err(Error::Invariant(format!(
                        "f is not monotone: adding evidence {} to {t:#b} lowers it",
                        self.evidence[k]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &SetFunctionKind {
        &self.kind
    }

    pub fn evidence(&self) -> &[ChunkId] {
        &self.evidence
    }

    pub fn evidence_set(&self) -> BTreeSet<ChunkId> {
        self.evidence.iter().copied().collect()
    }

    pub fn g(&self) -> usize {
        self.evidence.len()
    }

    pub fn full_mask(&self) -> EvidenceMask {
        if self.g() == 64 {
            u64::MAX
        } else {
            (1u64 << self.g()) - 1
        }
    }

    /// Evidence position of chunk `id`.
    pub fn position(&self, id: ChunkId) -> Option<usize> {
        self.evidence.binary_search(&id).ok()
    }

    /// `f` on an evidence mask.
    pub fn value(&self, t: EvidenceMask) -> f64 {
        match &self.kind {
            SetFunctionKind::AllOrNothing { delta } => {
                if t == self.full_mask() {
                    *delta
                } else {
                    0.0
                }
            }
            SetFunctionKind::WeightedCoverage { alphas } => {
                let mut s = 0.0;
                for (k, a) in alphas.iter().enumerate() {
                    if t >> k & 1 == 1 {
                        s += a;
                    }
                }
                s
            }
            SetFunctionKind::Threshold { t: th, delta } => {
                if t.count_ones() as usize >= *th {
                    *delta
                } else {
                    0.0
                }
            }
            SetFunctionKind::Tabulated { values } => values[t as usize],
        }
    }

    fn mask_of(&self, t: &BTreeSet<ChunkId>) -> Result<EvidenceMask> {
        let mut m = 0;
        for id in t {
            match self.position(*id) {
                Some(k) => m |= 1 << k,
                None => return invalid(format!("{id} is not gold evidence")),
            }
        }
        Ok(m)
    }

    /// `f(T)` for `T ⊆ G`.
    pub fn f_value(&self, t: &BTreeSet<ChunkId>) -> Result<f64> {
        Ok(self.value(self.mask_of(t)?))
    }

    /// Evidence mask of `Z ∩ G` for a selection vector.
    pub fn selected_mask(&self, z: &[bool]) -> EvidenceMask {
        self.evidence
            .iter()
            .enumerate()
            .filter(|(_, id)| z.get(id.position()).copied().unwrap_or(false))
            .fold(0, |m, (k, _)| m | 1 << k)
    }

    /// `Δ_j(T) = f(T ∪ {j}) - f(T)` on masks; `k` is the evidence position of `j`.
    pub fn gain(&self, k: usize, t: EvidenceMask) -> f64 {
        let without = t & !(1 << k);
        self.value(without | 1 << k) - self.value(without)
    }

    pub fn marginal_gain(&self, j: ChunkId, t: &BTreeSet<ChunkId>) -> Result<f64> {
        let k = self.position(j).ok_or_else(|| Error::InvalidInput(format!("{j} is not gold evidence")))?;
        if t.contains(&j) {
            return invalid(format!("T must not contain {j}"));
        }
        Ok(self.gain(k, self.mask_of(t)?))
    }

    /// `max_T Δ_j(T)` over `T ⊆ G \ {j}`.
    pub fn gain_bound(&self, j: ChunkId) -> Result<f64> {
        let k = self.position(j).ok_or_else(|| Error::InvalidInput(format!("{j} is not gold evidence")))?;
        if let SetFunctionKind::WeightedCoverage { alphas } = &self.kind {
            return Ok(alphas[k]);
        }
        Ok((0..1u64 << self.g())
            .filter(|t| t >> k & 1 == 0)
            .map(|t| self.gain(k, t))
            .fold(0.0, f64::max))
    }

    /// `f(G)`, the largest value of a monotone function.
    pub fn max_value(&self) -> f64 {
        self.value(self.full_mask())
    }
}

/// Serializable description of an evidence set function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub n_chunks: usize,
    pub evidence: Vec<u32>,
    pub f: SetFunctionKind,
    #[serde(default)]
    pub mu0: f64,
    #[serde(default)]
    pub guess_rate: f64,
    /// Initial answer-head logit; `inf` freezes competence at 1.
    #[serde(default = "frozen")]
    pub competence_init: f64,
}

fn frozen() -> f64 {
    f64::INFINITY
}

/// Environment whose answer reward satisfies the sparse-reward structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAnswerEnv {
    f: EvidenceSetFunction,
    n_chunks: usize,
    mu0: f64,
    answer_logit: f64,
    guess_rate: f64,
}

impl SparseAnswerEnv {
    pub fn new(
        f: EvidenceSetFunction,
        n_chunks: usize,
        mu0: f64,
        answer_logit: f64,
        guess_rate: f64,
    ) -> Result<Self> {
        if let Some(id) = f.evidence().iter().find(|id| id.position() >= n_chunks) {
            return invalid(format!("evidence {id} outside {n_chunks} chunks"));
        }
        if !(mu0 >= 0.0) {
            return invalid("mu0 must be non-negative");
        }
        if !(0.0..1.0).contains(&guess_rate) {
            return invalid("guess_rate must lie in [0, 1)");
        }
        if answer_logit.is_nan() || answer_logit == f64::NEG_INFINITY {
            return invalid("answer logit must be a number or +inf");
        }
        if mu0 + f.max_value() > 1.0 + 1e-12 {
            return Err(Error::Invariant(format!(
                "mu0 + max f = {} exceeds 1",
                mu0 + f.max_value()
            )));
        }
        Ok(Self { f, n_chunks, mu0, answer_logit, guess_rate })
    }

    pub fn from_spec(spec: &EnvSpec) -> Result<Self> {
        let evidence = crate::data::chunk_set(spec.evidence.iter().copied())?;
        let f = EvidenceSetFunction::new(spec.f.clone(), &evidence)?;
        Self::new(f, spec.n_chunks, spec.mu0, spec.competence_init, spec.guess_rate)
    }

    pub fn f(&self) -> &EvidenceSetFunction {
        &self.f
    }

    pub fn n_chunks(&self) -> usize {
        self.n_chunks
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn guess_rate(&self) -> f64 {
        self.guess_rate
    }

    pub fn answer_logit(&self) -> f64 {
        self.answer_logit
    }

    pub fn set_answer_logit(&mut self, a: f64) {
        self.answer_logit = a;
    }

    /// `sigmoid(a)`, or 1 when competence is frozen.
    pub fn competence(&self) -> f64 {
        if self.answer_logit == f64::INFINITY {
            1.0
        } else {
            sigmoid(self.answer_logit)
        }
    }

    /// `d competence / d a`.
    pub fn competence_slope(&self) -> f64 {
        if self.answer_logit == f64::INFINITY {
            0.0
        } else {
            let c = sigmoid(self.answer_logit);
            c * (1.0 - c)
        }
    }

    /// Conditional mean answer reward for an evidence mask.
    pub fn mean_for_mask(&self, t: EvidenceMask) -> f64 {
        self.mu0 + self.competence() * self.f.value(t)
    }

    pub fn expected_answer_reward(&self, z: &[bool]) -> Result<f64> {
        if z.len() != self.n_chunks {
            return invalid(format!("selection of length {} for {} chunks", z.len(), self.n_chunks));
        }
        let m = self.mean_for_mask(self.f.selected_mask(z));
        if m > 1.0 + 1e-12 {
            return Err(Error::Invariant(format!("conditional answer mean {m} exceeds 1")));
        }
        Ok(m)
    }

    /// Bernoulli draw with mean `expected_answer_reward(z)`.
    pub fn sample_answer_reward<R: rand::Rng + ?Sized>(&self, z: &[bool], rng: &mut R) -> Result<f64> {
        let m = self.expected_answer_reward(z)?;
        Ok(bernoulli(m, rng))
    }

    /// `Pr(E_j)`: probability that `j` has positive marginal gain given the other
    /// selected evidence.
    pub fn activation_prob(&self, policy: &LogLinearGroundingPolicy, j: ChunkId) -> Result<f64> {
        let k = self
            .f
            .position(j)
            .ok_or_else(|| Error::InvalidInput(format!("{j} is not gold evidence")))?;
        let law = EvidenceLaw::new(policy, self.f.evidence())?;
        Ok(law.expect_t(|t| if self.f.gain(k, t) > 0.0 { 1.0 } else { 0.0 }))
    }
}

pub(crate) fn bernoulli<R: rand::Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// `q = Pr(Z ⊇ G)`.
pub fn success_prob(policy: &LogLinearGroundingPolicy, evidence: &BTreeSet<ChunkId>) -> Result<f64> {
    let ids: Vec<ChunkId> = evidence.iter().copied().collect();
    let law = EvidenceLaw::new(policy, &ids)?;
    Ok(law.prob_t(law.full_mask()))
}
