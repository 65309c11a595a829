//! Randomized certification of the gradient bounds and decompositions.
//!
//! Each trial draws a random instance (chunk count, gold set, monotone set function,
//! logits and optionally a pairwise coupling) and checks every gold chunk's
//! [`GapReport`] and [`DecompositionReport`]. Which inequalities count as violations depends
//! on the coupling regime:
//!
//! | regime        | identities | `grad >= 0` | `grad <= bound` | cross-cov `>= 0` |
//! |---------------|------------|-------------|-----------------|------------------|
//! | independent   | checked    | checked     | checked         | checked          |
//! | non-negative  | checked    | checked     | reported        | checked          |
//! | mixed-sign    | checked    | reported    | reported        | reported         |
//!
//! "Reported" inequalities are counted as exceedances in the summary but do not fail
//! the suite: with coupled selections the conditional law of the other gold chunks
//! moves with `z_j`, and the upper bound (and, for negative couplings, the sign) is
//! not implied.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ChunkId;
use crate::env::{EvidenceSetFunction, SetFunctionKind, SparseAnswerEnv};
use crate::error::{invalid, Result};
use crate::oracle::{closed_form_special_case, gap_report, decomposition_report, GapReport, DecompositionReport};
use crate::policy::LogLinearGroundingPolicy;
use crate::rng::{self, Rng};

pub const IDENTITY_TOL: f64 = 1e-12;
pub const BOUND_TOL: f64 = 1e-12;
pub const DECOMPOSITION_TOL: f64 = 1e-10;
pub const DENSE_TOL: f64 = 1e-12;
pub const CLOSED_FORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingRegime {
    Independent,
    /// Couplings drawn from `[0, 1]`.
    NonNegative,
    /// Couplings drawn from `[-1, 1]`.
    Mixed,
}

impl CouplingRegime {
    pub const ALL: [CouplingRegime; 3] = [CouplingRegime::Independent, CouplingRegime::NonNegative, CouplingRegime::Mixed];

    fn range(self) -> Option<(f64, f64)> {
        match self {
            CouplingRegime::Independent => None,
            CouplingRegime::NonNegative => Some((0.0, 1.0)),
            CouplingRegime::Mixed => Some((-1.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub trials: usize,
    pub max_chunks: usize,
    pub max_gold: usize,
    pub seed: u64,
    /// Regimes cycled over trials.
    pub regimes: Vec<CouplingRegime>,
    /// Replace the first trial with a planted non-monotone set function.
    pub inject_nonmonotone: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 1200,
            max_chunks: 10,
            max_gold: 6,
            seed: 0,
            regimes: CouplingRegime::ALL.to_vec(),
            inject_nonmonotone: false,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return invalid("trials must be at least 1");
        }
        if !(2..=20).contains(&self.max_chunks) {
            return invalid(format!("max_chunks must lie in 2..=20, got {}", self.max_chunks));
        }
        if self.max_gold == 0 {
            return invalid("max_gold must be at least 1");
        }
        if self.regimes.is_empty() {
            return invalid("at least one coupling regime is required");
        }
        Ok(())
    }
}

/// A random instance in serialisable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub n_chunks: usize,
    pub gold: Vec<u32>,
    /// Set function table indexed by evidence mask.
    pub f_values: Vec<f64>,
    pub mu0: f64,
    pub answer_logit: f64,
    pub logits: Vec<f64>,
    pub coupling: Option<Vec<Vec<f64>>>,
    /// Additive context weights in gold order.
    pub alphas: Vec<f64>,
    pub regime: CouplingRegime,
}

impl Instance {
    pub fn gold_set(&self) -> BTreeSet<ChunkId> {
        self.gold.iter().map(|&k| ChunkId::new(k).expect("gold ids are 1-based")).collect()
    }

    pub fn policy(&self) -> Result<LogLinearGroundingPolicy> {
        match &self.coupling {
            None => LogLinearGroundingPolicy::independent(self.logits.clone()),
            Some(w) => LogLinearGroundingPolicy::coupled(self.logits.clone(), w.clone()),
        }
    }

    /// Builds the environment. Monotonicity is only enforced when `checked`.
    pub fn env(&self, checked: bool) -> Result<SparseAnswerEnv> {
        let kind = SetFunctionKind::Tabulated { values: self.f_values.clone() };
        let f = if checked {
            EvidenceSetFunction::new(kind, &self.gold_set())?
        } else {
            EvidenceSetFunction::new_unchecked(kind, &self.gold_set())?
        };
        SparseAnswerEnv::new(f, self.n_chunks, self.mu0, self.answer_logit, 0.0)
    }

    pub fn alpha_map(&self) -> BTreeMap<ChunkId, f64> {
        self.gold_set().into_iter().zip(self.alphas.iter().copied()).collect()
    }
}

/// Weighted coverage (some weights zero) plus threshold bonuses on random gold subsets,
/// normalised into `[0, 1 - mu0]`.
fn random_set_function(rng: &mut Rng, g: usize, mu0: f64) -> Vec<f64> {
    let alphas: Vec<f64> = (0..g).map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random() }).collect();
    let bonuses: Vec<(u64, f64)> = (0..rng.random_range(0..=3))
        .map(|_| (rng.random_range(1..1u64 << g), rng.random::<f64>()))
        .collect();
    let mut values: Vec<f64> = (0..1u64 << g)
        .map(|t| {
            let cover: f64 = (0..g).filter(|k| t >> k & 1 == 1).map(|k| alphas[k]).sum();
            let bonus: f64 = bonuses.iter().filter(|(s, _)| t & s == *s).map(|(_, b)| b).sum();
            cover + bonus
        })
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { (1.0 - mu0) * rng.random_range(0.5..=1.0) / max } else { 0.0 };
    for v in &mut values {
        *v *= scale;
    }
    values
}

pub fn random_instance(rng: &mut Rng, max_chunks: usize, max_gold: usize, regime: CouplingRegime) -> Instance {
    let n = rng.random_range(2..=max_chunks);
    let g = rng.random_range(1..=max_gold.min(n));
    let mut gold: Vec<u32> = sample(rng, n, g).into_iter().map(|p| p as u32 + 1).collect();
    gold.sort_unstable();
    let mu0 = rng.random_range(0.0..0.2);
    let f_values = random_set_function(rng, g, mu0);
    let answer_logit = if rng.random_bool(0.5) { f64::INFINITY } else { rng.random_range(-2.0..2.0) };
    let logits = (0..n).map(|_| rng.random_range(-3.0..=3.0)).collect();
    let coupling = regime.range().map(|(lo, hi)| {
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let x = rng.random_range(lo..=hi);
                w[i][j] = x;
                w[j][i] = x;
            }
        }
        w
    });
    let alphas = (0..g).map(|_| rng.random()).collect();
    Instance { n_chunks: n, gold, f_values, mu0, answer_logit, logits, coupling, alphas, regime }
}

/// An independent instance whose set function rewards dropping the first gold chunk
/// once the rest are present.
pub fn planted_nonmonotone(rng: &mut Rng, max_chunks: usize) -> Instance {
    let mut inst = random_instance(rng, max_chunks, 2, CouplingRegime::Independent);
    let n = inst.n_chunks.max(2);
    inst.n_chunks = n;
    inst.logits.resize(n, 0.0);
    inst.gold = vec![1, 2];
    inst.alphas = vec![0.5, 0.5];
    inst.mu0 = 0.0;
    inst.answer_logit = f64::INFINITY;
    inst.f_values = vec![0.0, 0.0, 1.0, 0.0];
    inst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    CovarianceIdentity,
    GapIdentity,
    LowerBound,
    UpperBound,
    Decomposition,
    DenseTerm,
    CrossCovSign,
}

fn enforced(regime: CouplingRegime, check: Check) -> bool {
    match check {
        Check::CovarianceIdentity | Check::GapIdentity | Check::Decomposition | Check::DenseTerm => true,
        Check::LowerBound | Check::CrossCovSign => regime != CouplingRegime::Mixed,
        Check::UpperBound => regime == CouplingRegime::Independent,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Gap { trial: usize, regime: CouplingRegime, report: GapReport, failed: Vec<Check> },
    Decomposition { trial: usize, regime: CouplingRegime, report: DecompositionReport, failed: Vec<Check> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub trial: usize,
    pub chunk: u32,
    pub check: Check,
    pub instance: Instance,
    pub gap: GapReport,
    pub decomposition: DecompositionReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegimeStats {
    pub trials: usize,
    pub reports: usize,
    /// Failed inequalities per check, including ones the regime does not enforce.
    pub failures: BTreeMap<Check, usize>,
    pub max_identity_error: f64,
    pub max_decomposition_error: f64,
    pub max_dense_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub trials: usize,
    pub reports: usize,
    /// Failures of enforced checks.
    pub violations: usize,
    pub regimes: BTreeMap<CouplingRegime, RegimeStats>,
    pub first_counterexample: Option<Counterexample>,
    pub elapsed_secs: f64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Failures of `check` in `regime`, enforced or not.
    pub fn failures(&self, regime: CouplingRegime, check: Check) -> usize {
        self.regimes.get(&regime).and_then(|s| s.failures.get(&check)).copied().unwrap_or(0)
    }
}

fn failed_gap(r: &GapReport) -> Vec<Check> {
    let mut out = Vec::new();
    if (r.grad - r.cov_form).abs() > IDENTITY_TOL {
        out.push(Check::CovarianceIdentity);
    }
    if (r.grad - r.p_j * (1.0 - r.p_j) * r.conditional_gap).abs() > IDENTITY_TOL {
        out.push(Check::GapIdentity);
    }
    if !r.lower_bound_holds(BOUND_TOL) {
        out.push(Check::LowerBound);
    }
    if !r.upper_bound_holds(BOUND_TOL) {
        out.push(Check::UpperBound);
    }
    out
}

fn failed_decomposition(r: &DecompositionReport) -> Vec<Check> {
    let mut out = Vec::new();
    if r.decomposition_error() > DECOMPOSITION_TOL {
        out.push(Check::Decomposition);
    }
    if r.dense_error() > DENSE_TOL {
        out.push(Check::DenseTerm);
    }
    if r.cross_cov_sum < -BOUND_TOL {
        out.push(Check::CrossCovSign);
    }
    out
}

/// Runs the suite, passing every report record to `sink` in trial order.
pub fn run_suite(config: &SuiteConfig, mut sink: impl FnMut(&Record) -> Result<()>) -> Result<SuiteSummary> {
    config.validate()?;
    let start = Instant::now();
    let mut summary = SuiteSummary {
        trials: config.trials,
        reports: 0,
        violations: 0,
        regimes: BTreeMap::new(),
        first_counterexample: None,
        elapsed_secs: 0.0,
    };
    for trial in 0..config.trials {
        let mut rng = rng::substream(config.seed, trial as u64);
        let planted = config.inject_nonmonotone && trial == 0;
        let inst = if planted {
            planted_nonmonotone(&mut rng, config.max_chunks)
        } else {
            let regime = config.regimes[trial % config.regimes.len()];
            random_instance(&mut rng, config.max_chunks, config.max_gold, regime)
        };
        let policy = inst.policy()?;
        let env = inst.env(!planted)?;
        let alphas = inst.alpha_map();
        let stats = summary.regimes.entry(inst.regime).or_default();
        stats.trials += 1;
        for j in inst.gold_set() {
            let p1 = gap_report(&policy, &env, j)?;
            let p2 = decomposition_report(&policy, &env, &alphas, j)?;
            stats.reports += 1;
            summary.reports += 1;
            stats.max_identity_error = stats
                .max_identity_error
                .max((p1.grad - p1.cov_form).abs())
                .max((p1.grad - p1.p_j * (1.0 - p1.p_j) * p1.conditional_gap).abs());
            stats.max_decomposition_error = stats.max_decomposition_error.max(p2.decomposition_error());
            stats.max_dense_error = stats.max_dense_error.max(p2.dense_error());
            let f1 = failed_gap(&p1);
            let f2 = failed_decomposition(&p2);
            for &c in f1.iter().chain(&f2) {
                *stats.failures.entry(c).or_default() += 1;
                if enforced(inst.regime, c) {
                    summary.violations += 1;
                    if summary.first_counterexample.is_none() {
                        summary.first_counterexample = Some(Counterexample {
                            trial,
                            chunk: j.get(),
                            check: c,
                            instance: inst.clone(),
                            gap: p1.clone(),
                            decomposition: p2.clone(),
                        });
                    }
                }
            }
            sink(&Record::Gap { trial, regime: inst.regime, report: p1, failed: f1 })?;
            sink(&Record::Decomposition { trial, regime: inst.regime, report: p2, failed: f2 })?;
        }
    }
    summary.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormSummary {
    pub instances: usize,
    pub max_error: f64,
}

impl ClosedFormSummary {
    pub fn passed(&self) -> bool {
        self.max_error <= CLOSED_FORM_TOL
    }
}

/// Compares the independent, all-or-nothing, equal-weight closed form with the
/// enumerated total gradient on `instances` random draws.
pub fn closed_form_suite(instances: usize, max_chunks: usize, seed: u64) -> Result<ClosedFormSummary> {
    let mut max_error = 0.0f64;
    for i in 0..instances {
        let mut rng = rng::substream(seed, i as u64);
        let n = rng.random_range(2..=max_chunks);
        let g = rng.random_range(1..=n.min(6));
        let gold: BTreeSet<ChunkId> = sample(&mut rng, n, g).into_iter().map(ChunkId::from_position).collect();
        let delta = rng.random::<f64>();
        let alpha = rng.random::<f64>();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let policy = LogLinearGroundingPolicy::from_probs(&p)?;
        let f = EvidenceSetFunction::new(SetFunctionKind::AllOrNothing { delta }, &gold)?;
        let env = SparseAnswerEnv::new(f, n, 0.0, f64::INFINITY, 0.0)?;
        let alphas: BTreeMap<ChunkId, f64> = gold.iter().map(|&id| (id, alpha)).collect();
        let gold_vec: Vec<ChunkId> = gold.iter().copied().collect();
        let marginals = policy.marginals()?;
        for &j in &gold {
            let exact = decomposition_report(&policy, &env, &alphas, j)?.total_grad;
            let formula = closed_form_special_case(&marginals, &gold_vec, delta, alpha, j)?;
            max_error = max_error.max((exact - formula).abs());
        }
    }
    Ok(ClosedFormSummary { instances, max_error })
}
