//! Exact expectations and gradients by enumeration.
//!
//! Value functions take a selection bitmask (`bit j` set iff chunk `j + 1` is selected).
//! For the log-linear family `∇_{s_j} E[v] = Cov(v, z_j)`, which is what
//! [`exact_gradient`] computes; [`finite_difference_gradient`] is the independent check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ChunkId;
use crate::env::{EvidenceMask, SparseAnswerEnv, MAX_ENUM_EVIDENCE};
use crate::error::{invalid, Error, Result};
use crate::policy::{LogLinearGroundingPolicy, MAX_ENUM_CHUNKS};

/// `Σ_z pi(z) v(z)`.
pub fn exact_expectation(policy: &LogLinearGroundingPolicy, value: impl Fn(u64) -> f64) -> Result<f64> {
    Ok(policy.exact()?.expectation(value))
}

/// `Cov(v, z_j)` for every chunk.
pub fn exact_gradient(policy: &LogLinearGroundingPolicy, value: impl Fn(u64) -> f64) -> Result<Vec<f64>> {
    let d = policy.exact()?;
    let p = d.marginals();
    let vals: Vec<f64> = (0..d.probs.len() as u64).map(&value).collect();
    let mean: f64 = d.probs.iter().zip(&vals).map(|(pi, v)| pi * v).sum();
    let mut g = vec![0.0; d.n];
    for (m, (pi, v)) in d.probs.iter().zip(&vals).enumerate() {
        let w = pi * (v - mean);
        for (j, gj) in g.iter_mut().enumerate() {
            let zj = if m >> j & 1 == 1 { 1.0 } else { 0.0 };
            *gj += w * (zj - p[j]);
        }
    }
    Ok(g)
}

/// Central differences of [`exact_expectation`] in each logit.
pub fn finite_difference_gradient(
    policy: &LogLinearGroundingPolicy,
    value: impl Fn(u64) -> f64,
    h: f64,
) -> Result<Vec<f64>> {
    (0..policy.n_chunks())
        .map(|j| {
            let up = exact_expectation(&policy.shifted(j, h), &value)?;
            let down = exact_expectation(&policy.shifted(j, -h), &value)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Selection mask restricted to evidence positions.
pub fn evidence_mask(z: u64, evidence: &[ChunkId]) -> EvidenceMask {
    evidence
        .iter()
        .enumerate()
        .filter(|(_, id)| z >> id.position() & 1 == 1)
        .fold(0, |t, (k, _)| t | 1 << k)
}

/// Joint law of `T = Z ∩ G` (as an evidence mask) and `b`, the number of selected
/// chunks outside `G`.
///
/// Independent policies factorise into a product over `G` and a Poisson-binomial count
/// over the remaining chunks, so any `N` works as long as `|G| <= 16`. Coupled
/// policies are enumerated.
#[derive(Debug, Clone)]
pub struct EvidenceLaw {
    g: usize,
    width: usize,
    joint: Vec<f64>,
}

impl EvidenceLaw {
    pub fn new(policy: &LogLinearGroundingPolicy, evidence: &[ChunkId]) -> Result<Self> {
        let n = policy.n_chunks();
        let g = evidence.len();
        if g == 0 {
            return invalid("evidence set must be non-empty");
        }
        if g > MAX_ENUM_EVIDENCE {
            return Err(Error::UnsupportedSize { n: g, max: MAX_ENUM_EVIDENCE });
        }
        if let Some(id) = evidence.iter().find(|id| id.position() >= n) {
            return invalid(format!("evidence {id} outside {n} chunks"));
        }
        let width = n - g + 1;
        let mut joint = vec![0.0; (1 << g) * width];
        if policy.is_independent() {
            let p = policy.marginals()?;
            let gold: Vec<usize> = evidence.iter().map(|id| id.position()).collect();
            let mut counts = vec![0.0; width];
            counts[0] = 1.0;
            let mut seen = 0;
            for (j, &pj) in p.iter().enumerate() {
                if gold.contains(&j) {
                    continue;
                }
                seen += 1;
                for c in (0..=seen).rev() {
                    let stay = counts[c] * (1.0 - pj);
                    let grow = if c > 0 { counts[c - 1] * pj } else { 0.0 };
                    counts[c] = stay + grow;
                }
            }
            for t in 0..1usize << g {
                let pt: f64 = gold
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| if t >> k & 1 == 1 { p[j] } else { 1.0 - p[j] })
                    .product();
                for (b, pb) in counts.iter().enumerate() {
                    joint[t * width + b] = pt * pb;
                }
            }
        } else {
            if n > MAX_ENUM_CHUNKS {
                return Err(Error::UnsupportedSize { n, max: MAX_ENUM_CHUNKS });
            }
            let d = policy.exact()?;
            for (z, pz) in d.iter() {
                let t = evidence_mask(z, evidence);
                let b = z.count_ones() as usize - t.count_ones() as usize;
                joint[t as usize * width + b] += pz;
            }
        }
        Ok(Self { g, width, joint })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn full_mask(&self) -> EvidenceMask {
        (1u64 << self.g) - 1
    }

    /// Number of chunks outside `G`.
    pub fn n_other(&self) -> usize {
        self.width - 1
    }

    pub fn prob(&self, t: EvidenceMask, b: usize) -> f64 {
        self.joint[t as usize * self.width + b]
    }

    /// `Pr(Z ∩ G = T)`.
    pub fn prob_t(&self, t: EvidenceMask) -> f64 {
        let row = t as usize * self.width;
        self.joint[row..row + self.width].iter().sum()
    }

    /// `E[h(T, b)]`.
    pub fn expect(&self, h: impl Fn(EvidenceMask, usize) -> f64) -> f64 {
        let mut s = 0.0;
        for t in 0..1u64 << self.g {
            for b in 0..self.width {
                let p = self.prob(t, b);
                if p > 0.0 {
                    s += p * h(t, b);
                }
            }
        }
        s
    }

    /// `E[h(T)]`.
    pub fn expect_t(&self, h: impl Fn(EvidenceMask) -> f64) -> f64 {
        (0..1u64 << self.g).map(|t| self.prob_t(t) * h(t)).sum()
    }

    /// Selection marginals of the evidence chunks, in evidence order.
    pub fn gold_marginals(&self) -> Vec<f64> {
        (0..self.g)
            .map(|k| (0..1u64 << self.g).filter(|t| t >> k & 1 == 1).map(|t| self.prob_t(t)).sum())
            .collect()
    }

    /// `Cov(h(T, b), z_k)` for every evidence position `k`: the exact logit gradient of
    /// `E[h]` on the evidence chunks.
    pub fn gold_gradient(&self, h: impl Fn(EvidenceMask, usize) -> f64) -> Vec<f64> {
        let p = self.gold_marginals();
        let mean = self.expect(&h);
        let mut g = vec![0.0; self.g];
        for t in 0..1u64 << self.g {
            for b in 0..self.width {
                let pr = self.prob(t, b);
                if pr == 0.0 {
                    continue;
                }
                let w = pr * (h(t, b) - mean);
                for (k, gk) in g.iter_mut().enumerate() {
                    let zk = if t >> k & 1 == 1 { 1.0 } else { 0.0 };
                    *gk += w * (zk - p[k]);
                }
            }
        }
        g
    }
}

fn evidence_position(env: &SparseAnswerEnv, j: ChunkId) -> Result<usize> {
    env.f()
        .position(j)
        .ok_or_else(|| Error::InvalidInput(format!("{j} is not gold evidence")))
}

fn check_policy(policy: &LogLinearGroundingPolicy, env: &SparseAnswerEnv) -> Result<()> {
    if policy.n_chunks() != env.n_chunks() {
        return invalid(format!("policy has {} chunks, env has {}", policy.n_chunks(), env.n_chunks()));
    }
    Ok(())
}

/// Gradient of the expected answer reward on one evidence logit, with the quantities
/// bounding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub chunk: u32,
    pub grad: f64,
    pub cov_form: f64,
    pub conditional_gap: f64,
    pub p_j: f64,
    /// `max_T Δ_j(T)` scaled by the answer-head competence.
    pub gain_bound: f64,
    pub activation_prob: f64,
    pub bound: f64,
}

impl GapReport {
    /// `grad` agrees with the covariance and with `p_j (1 - p_j) * gap`.
    pub fn identities_hold(&self, tol: f64) -> bool {
        (self.grad - self.cov_form).abs() <= tol
            && (self.grad - self.p_j * (1.0 - self.p_j) * self.conditional_gap).abs() <= tol
    }

    pub fn lower_bound_holds(&self, tol: f64) -> bool {
        self.grad >= -tol
    }

    pub fn upper_bound_holds(&self, tol: f64) -> bool {
        self.grad <= self.bound + tol
    }
}

pub fn gap_report(policy: &LogLinearGroundingPolicy, env: &SparseAnswerEnv, j: ChunkId) -> Result<GapReport> {
    check_policy(policy, env)?;
    let k = evidence_position(env, j)?;
    let f = env.f();
    let evidence = f.evidence();
    let value = |z: u64| env.mean_for_mask(evidence_mask(z, evidence));
    let d = policy.exact()?;
    let pos = j.position();
    let vals: Vec<f64> = (0..d.probs.len() as u64).map(value).collect();
    let (mut e_v, mut e_vz, mut p_j, mut act) = (0.0, 0.0, 0.0, 0.0);
    for (z, pz) in d.iter() {
        let v = vals[z as usize];
        e_v += pz * v;
        if z >> pos & 1 == 1 {
            e_vz += pz * v;
            p_j += pz;
        }
        if f.gain(k, evidence_mask(z, evidence)) > 0.0 {
            act += pz;
        }
    }
    let grad = exact_gradient(policy, value)?[pos];
    let gap = e_vz / p_j - (e_v - e_vz) / (1.0 - p_j);
    let gain_bound = env.competence() * f.gain_bound(j)?;
    Ok(GapReport {
        chunk: j.get(),
        grad,
        cov_form: e_vz - e_v * p_j,
        conditional_gap: gap,
        p_j,
        gain_bound,
        activation_prob: act,
        bound: p_j * (1.0 - p_j) * gain_bound * act,
    })
}

/// Decomposition of the total-reward gradient under the additive context reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub chunk: u32,
    pub answer_term: f64,
    pub dense_term: f64,
    pub cross_cov_sum: f64,
    pub total_grad: f64,
    pub p_j: f64,
    pub alpha_j: f64,
}

impl DecompositionReport {
    pub fn decomposition_error(&self) -> f64 {
        (self.total_grad - (self.answer_term + self.dense_term + self.cross_cov_sum)).abs()
    }

    pub fn dense_error(&self) -> f64 {
        (self.dense_term - self.alpha_j * self.p_j * (1.0 - self.p_j)).abs()
    }
}

pub fn decomposition_report(
    policy: &LogLinearGroundingPolicy,
    env: &SparseAnswerEnv,
    alphas: &BTreeMap<ChunkId, f64>,
    j: ChunkId,
) -> Result<DecompositionReport> {
    check_policy(policy, env)?;
    evidence_position(env, j)?;
    let evidence = env.f().evidence();
    if alphas.len() != evidence.len() || !evidence.iter().all(|id| alphas.contains_key(id)) {
        return invalid("alphas must cover exactly the gold evidence");
    }
    let d = policy.exact()?;
    let p = d.marginals();
    let m2 = d.second_moments();
    let pos = j.position();
    let answer = |z: u64| env.mean_for_mask(evidence_mask(z, evidence));
    let answer_term = exact_gradient(policy, answer)?[pos];
    let alpha_j = alphas[&j];
    let dense_term = alpha_j * (m2[pos][pos] - p[pos] * p[pos]);
    let cross_cov_sum = alphas
        .iter()
        .filter(|(id, _)| **id != j)
        .map(|(id, a)| {
            let q = id.position();
            a * (m2[q][pos] - p[q] * p[pos])
        })
        .sum();
    let total = |z: u64| {
        answer(z)
            + alphas
                .iter()
                .filter(|(id, _)| z >> id.position() & 1 == 1)
                .map(|(_, a)| a)
                .sum::<f64>()
    };
    let total_grad = exact_gradient(policy, total)?[pos];
    Ok(DecompositionReport { chunk: j.get(), answer_term, dense_term, cross_cov_sum, total_grad, p_j: p[pos], alpha_j })
}

/// `delta * q * (1 - p_j) + alpha * p_j * (1 - p_j)` with `q = Π_{k in G} p_k`, the total
/// gradient for an independent policy, all-or-nothing `f` and equal additive weights.
pub fn closed_form_special_case(p: &[f64], gold: &[ChunkId], delta: f64, alpha: f64, j: ChunkId) -> Result<f64> {
    if !gold.contains(&j) {
        return invalid(format!("{j} is not gold evidence"));
    }
    if let Some(id) = gold.iter().find(|id| id.position() >= p.len()) {
        return invalid(format!("{id} outside {} chunks", p.len()));
    }
    let q: f64 = gold.iter().map(|id| p[id.position()]).product();
    let pj = p[j.position()];
    Ok(delta * q * (1.0 - pj) + alpha * pj * (1.0 - pj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::chunk_set;
    use crate::env::{EvidenceSetFunction, SetFunctionKind};
    use proptest::prelude::*;

    fn id(k: u32) -> ChunkId {
        ChunkId::new(k).unwrap()
    }

    fn env(kind: SetFunctionKind, gold: &[u32], n: usize) -> SparseAnswerEnv {
        let f = EvidenceSetFunction::new(kind, &chunk_set(gold.iter().copied()).unwrap()).unwrap();
        SparseAnswerEnv::new(f, n, 0.0, f64::INFINITY, 0.0).unwrap()
    }

    fn half(n: usize) -> LogLinearGroundingPolicy {
        LogLinearGroundingPolicy::independent(vec![0.0; n]).unwrap()
    }

    fn coupled_pair() -> LogLinearGroundingPolicy {
        LogLinearGroundingPolicy::coupled(vec![0.0, 0.0], vec![vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap()
    }

    #[test]
    fn expectation_examples() {
        let pol = LogLinearGroundingPolicy::independent(vec![0.3, -1.0, 2.0]).unwrap();
        assert!((exact_expectation(&pol, |_| 2.5).unwrap() - 2.5).abs() < 1e-14);
        let p = pol.marginals().unwrap();
        for (j, pj) in p.iter().enumerate() {
            assert!((exact_expectation(&pol, |z| (z >> j & 1) as f64).unwrap() - pj).abs() < 1e-14);
        }
        let e = env(SetFunctionKind::AllOrNothing { delta: 1.0 }, &[1, 2], 3);
        let v = exact_expectation(&half(3), |z| e.mean_for_mask(e.f().selected_mask(&bits(z, 3)))).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    fn bits(z: u64, n: usize) -> Vec<bool> {
        (0..n).map(|j| z >> j & 1 == 1).collect()
    }

    #[test]
    fn gradient_examples() {
        let pol = half(3);
        assert!(exact_gradient(&pol, |_| 7.0).unwrap().iter().all(|g| g.abs() < 1e-15));
        let e = env(SetFunctionKind::AllOrNothing { delta: 1.0 }, &[1, 2], 3);
        let g = exact_gradient(&pol, |z| e.mean_for_mask(evidence_mask(z, e.f().evidence()))).unwrap();
        assert!((g[0] - 0.125).abs() < 1e-15);
        assert!((g[1] - 0.125).abs() < 1e-15);
        assert!(g[2].abs() < 1e-15);
        let ctx = |z: u64| if z & 1 == 1 { 0.5 } else { 0.0 };
        assert!((exact_gradient(&pol, ctx).unwrap()[0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = vec![
            vec![0.0, 0.7, -0.4, 0.0],
            vec![0.7, 0.0, 0.2, 1.1],
            vec![-0.4, 0.2, 0.0, -0.9],
            vec![0.0, 1.1, -0.9, 0.0],
        ];
        let pol = LogLinearGroundingPolicy::coupled(vec![0.4, -1.3, 0.9, 0.1], w).unwrap();
        let v = |z: u64| (z.count_ones() as f64).sqrt() + if z & 0b1010 == 0b1010 { 0.6 } else { 0.0 };
        let g = exact_gradient(&pol, v).unwrap();
        let fd = finite_difference_gradient(&pol, v, 1e-6).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn gap_examples() {
        let e = env(SetFunctionKind::AllOrNothing { delta: 1.0 }, &[1, 2], 3);
        let r = gap_report(&half(3), &e, id(1)).unwrap();
        assert!((r.grad - 0.125).abs() < 1e-15);
        assert!((r.bound - 0.125).abs() < 1e-15);
        assert!((r.activation_prob - 0.5).abs() < 1e-15);
        assert!(r.identities_hold(1e-12) && r.lower_bound_holds(1e-12) && r.upper_bound_holds(1e-12));

        let sparse = LogLinearGroundingPolicy::from_probs(&[0.05; 8]).unwrap();
        let e = env(SetFunctionKind::AllOrNothing { delta: 1.0 }, &[1, 2, 3, 4, 5, 6], 8);
        let r = gap_report(&sparse, &e, id(1)).unwrap();
        assert!((r.grad - 1.484_375e-8).abs() < 1e-20, "{}", r.grad);
        assert!((r.bound - r.grad).abs() < 1e-20);

        let e = env(SetFunctionKind::WeightedCoverage { alphas: vec![0.3, 0.6] }, &[2, 3], 4);
        let pol = LogLinearGroundingPolicy::independent(vec![0.5, -1.0, 1.5, 0.0]).unwrap();
        let r = gap_report(&pol, &e, id(3)).unwrap();
        assert!((r.activation_prob - 1.0).abs() < 1e-15);
        assert!((r.grad - 0.6 * r.p_j * (1.0 - r.p_j)).abs() < 1e-15);
        assert!(gap_report(&pol, &e, id(1)).is_err());
    }

    #[test]
    fn gap_scales_with_competence() {
        let f = EvidenceSetFunction::new(SetFunctionKind::AllOrNothing { delta: 0.8 }, &chunk_set([1, 2]).unwrap()).unwrap();
        let e = SparseAnswerEnv::new(f, 2, 0.1, 0.0, 0.1).unwrap();
        let r = gap_report(&half(2), &e, id(2)).unwrap();
        // 0.5 * 0.8 * Cov(z1 z2, z2) = 0.4 * 0.125
        assert!((r.grad - 0.05).abs() < 1e-15);
        assert!((r.bound - 0.05).abs() < 1e-15);
    }

    #[test]
    fn coupled_bound_can_fail() {
        // positive coupling adds co-selection credit that the activation bound ignores
        let e = env(SetFunctionKind::WeightedCoverage { alphas: vec![0.5, 0.5] }, &[1, 2], 2);
        let r = gap_report(&coupled_pair(), &e, id(1)).unwrap();
        assert!(r.identities_hold(1e-12) && r.lower_bound_holds(0.0));
        assert!(!r.upper_bound_holds(1e-12));
    }

    #[test]
    fn decomposition_examples() {
        let e = env(SetFunctionKind::AllOrNothing { delta: 1.0 }, &[1, 2], 3);
        let alphas: BTreeMap<_, _> = [(id(1), 0.5), (id(2), 0.5)].into();
        let r = decomposition_report(&half(3), &e, &alphas, id(1)).unwrap();
        assert!(r.cross_cov_sum.abs() < 1e-15);
        assert!((r.total_grad - 0.25).abs() < 1e-15);
        assert!((r.answer_term - 0.125).abs() < 1e-15 && (r.dense_term - 0.125).abs() < 1e-15);

        let e = env(SetFunctionKind::AllOrNothing { delta: 1.0 }, &[1, 2], 2);
        let r = decomposition_report(&coupled_pair(), &e, &alphas, id(1)).unwrap();
        assert!((r.cross_cov_sum - 0.029_597_465_501_867_15).abs() < 1e-14);
        assert!((r.answer_term - 0.136_919_964_134_335_83).abs() < 1e-14);
        assert!((r.dense_term - 0.077_725_033_130_601_51).abs() < 1e-14);
        assert!((r.total_grad - 0.244_242_462_766_804_5).abs() < 1e-14);
        assert!(r.decomposition_error() < 1e-12 && r.dense_error() < 1e-12);

        let bad: BTreeMap<_, _> = [(id(1), 0.5)].into();
        assert!(decomposition_report(&coupled_pair(), &e, &bad, id(1)).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let g = [id(1), id(2)];
        let p = [0.5, 0.5, 0.5];
        assert!((closed_form_special_case(&p, &g, 1.0, 0.5, id(1)).unwrap() - 0.25).abs() < 1e-15);
        assert!((closed_form_special_case(&p, &g, 1.0, 0.0, id(1)).unwrap() - 0.125).abs() < 1e-15);
        assert!((closed_form_special_case(&p, &g, 0.0, 1.0, id(1)).unwrap() - 0.25).abs() < 1e-15);
        assert!(closed_form_special_case(&p, &g, 1.0, 0.5, id(3)).is_err());
    }

    #[test]
    fn evidence_law_matches_enumeration() {
        let gold = [id(2), id(4), id(5)];
        let policies = [
            LogLinearGroundingPolicy::independent(vec![0.3, -0.8, 1.2, 0.0, -2.0, 0.6]).unwrap(),
            LogLinearGroundingPolicy::coupled(
                vec![0.3, -0.8, 1.2, 0.0, -2.0, 0.6],
                (0..6).map(|i| (0..6).map(|j| if i == j { 0.0 } else { 0.1 * (i + j) as f64 - 0.4 }).collect()).collect(),
            )
            .unwrap(),
        ];
        for pol in &policies {
            let law = EvidenceLaw::new(pol, &gold).unwrap();
            let h = |t: u64, b: usize| (t as f64 + 1.0).ln() * (b as f64 + 0.5);
            let brute = exact_expectation(pol, |z| {
                let t = evidence_mask(z, &gold);
                h(t, (z.count_ones() - t.count_ones()) as usize)
            })
            .unwrap();
            assert!((law.expect(h) - brute).abs() < 1e-13);
            let full = exact_gradient(pol, |z| {
                let t = evidence_mask(z, &gold);
                h(t, (z.count_ones() - t.count_ones()) as usize)
            })
            .unwrap();
            for (k, g) in law.gold_gradient(h).iter().enumerate() {
                assert!((g - full[gold[k].position()]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn evidence_law_scales_past_enumeration() {
        let pol = LogLinearGroundingPolicy::from_probs(&[0.05; 64]).unwrap();
        let gold: Vec<ChunkId> = (1..=6).map(id).collect();
        let law = EvidenceLaw::new(&pol, &gold).unwrap();
        assert!((law.prob_t(law.full_mask()) - 1.5625e-8).abs() < 1e-20);
        assert!((law.expect(|_, b| b as f64) - 58.0 * 0.05).abs() < 1e-12);
        assert!((law.expect(|_, _| 1.0) - 1.0).abs() < 1e-12);
        let coupled = LogLinearGroundingPolicy::coupled(vec![0.0; 21], vec![vec![0.0; 21]; 21]);
        let coupled = coupled.unwrap();
        assert!(matches!(EvidenceLaw::new(&coupled, &gold), Err(Error::UnsupportedSize { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mean_zero_score_and_fd_agreement(s in prop::collection::vec(-3.0f64..3.0, 1..6), w in -1.0f64..1.0) {
            let n = s.len();
            let coupling: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { w / (1 + i + j) as f64 }).collect()).collect();
            let pol = LogLinearGroundingPolicy::coupled(s, coupling).unwrap();
            let v = |z: u64| ((z * 2654435761) % 97) as f64 / 97.0;
            let g = exact_gradient(&pol, v).unwrap();
            let fd = finite_difference_gradient(&pol, v, 1e-6).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn independent_closed_form(p in prop::collection::vec(0.01f64..0.99, 2..7), delta in 0.01f64..1.0, alpha in 0.0f64..1.0, g in 1usize..4) {
            let n = p.len();
            let g = g.min(n);
            let gold: Vec<ChunkId> = (1..=g as u32).map(id).collect();
            let pol = LogLinearGroundingPolicy::from_probs(&p).unwrap();
            let pm = pol.marginals().unwrap();
            let gset = chunk_set(1..=g as u32).unwrap();
            let f = EvidenceSetFunction::new(SetFunctionKind::AllOrNothing { delta }, &gset).unwrap();
            let e = SparseAnswerEnv::new(f, n, 0.0, f64::INFINITY, 0.0).unwrap();
            let total = |z: u64| {
                e.mean_for_mask(evidence_mask(z, &gold)) + alpha * evidence_mask(z, &gold).count_ones() as f64
            };
            let grad = exact_gradient(&pol, total).unwrap();
            for j in &gold {
                let cf = closed_form_special_case(&pm, &gold, delta, alpha, *j).unwrap();
                prop_assert!((cf - grad[j.position()]).abs() < 1e-12);
            }
        }
    }
}
