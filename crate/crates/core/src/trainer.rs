//! Toy gradient-ascent loop on grounding logits and the answer-head competence.
//!
//! Logits follow the GRPO direction estimated from sampled groups. The answer head
//! follows the exact derivative of the expected reward through `sigmoid(a)`, and only
//! the answer-reward component feeds it. Logged metrics are exact expectations under the
//! current policy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChunkId;
use crate::env::{bernoulli, EnvSpec, EvidenceMask, SparseAnswerEnv};
use crate::error::{invalid, Error, Result};
use crate::estimators::{grpo_direction, RolloutBatch};
use crate::oracle::EvidenceLaw;
use crate::policy::LogLinearGroundingPolicy;
use crate::reward::{f_beta_counts, gated_context_reward};
use crate::rng::{derive_seed, Rng};

/// Which reward drives the grounding logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    AnswerOnly,
    ContextOnly,
    Total,
}

impl RewardMode {
    pub const ALL: [RewardMode; 3] = [RewardMode::AnswerOnly, RewardMode::ContextOnly, RewardMode::Total];

    pub fn name(self) -> &'static str {
        match self {
            RewardMode::AnswerOnly => "answer_only",
            RewardMode::ContextOnly => "context_only",
            RewardMode::Total => "total",
        }
    }
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "answer_only" => Ok(RewardMode::AnswerOnly),
            "context_only" => Ok(RewardMode::ContextOnly),
            "total" => Ok(RewardMode::Total),
            _ => invalid(format!("unknown reward mode {s:?}")),
        }
    }
}

/// Context reward used by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextReward {
    /// `eta * F + (1 - eta) * r_ans * F` in total mode and plain `F` in context-only mode.
    FBeta { eta: f64, beta: f64 },
    /// `Σ_{k in G} alpha_k z_k`, weights in evidence order.
    Additive { alphas: Vec<f64> },
}

impl Default for ContextReward {
    fn default() -> Self {
        ContextReward::FBeta { eta: 0.1, beta: 2.0 }
    }
}

/// Initial grounding policy. Explicit logits win over `init_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default)]
    pub init_prob: Option<f64>,
    #[serde(default)]
    pub logits: Option<Vec<f64>>,
    #[serde(default)]
    pub coupling: Option<Vec<Vec<f64>>>,
}

impl PolicySpec {
    pub fn uniform(p: f64) -> Self {
        Self { init_prob: Some(p), logits: None, coupling: None }
    }

    pub fn build(&self, n: usize) -> Result<LogLinearGroundingPolicy> {
        let logits = match (&self.logits, self.init_prob) {
            (Some(l), _) => {
                if l.len() != n {
                    return invalid(format!("{} logits for {n} chunks", l.len()));
                }
                l.clone()
            }
            (None, Some(p)) => LogLinearGroundingPolicy::from_probs(&vec![p; n])?.logits().to_vec(),
            (None, None) => vec![0.0; n],
        };
        match &self.coupling {
            Some(w) => LogLinearGroundingPolicy::coupled(logits, w.clone()),
            None => LogLinearGroundingPolicy::independent(logits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub mode: RewardMode,
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr_logits: f64,
    #[serde(default = "default_lr")]
    pub lr_answer_head: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_groups")]
    pub groups_per_step: usize,
    #[serde(default)]
    pub normalize_std: bool,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.5
}
fn default_k() -> usize {
    8
}
fn default_groups() -> usize {
    8
}
fn default_eval_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainParams,
    pub env: EnvSpec,
    pub policy: PolicySpec,
    #[serde(default)]
    pub reward: ContextReward,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 {
            return invalid("steps must be at least 1");
        }
        if !(t.lr_logits >= 0.0 && t.lr_answer_head >= 0.0) || !t.lr_logits.is_finite() || !t.lr_answer_head.is_finite() {
            return invalid("learning rates must be finite and non-negative");
        }
        if t.k < 2 {
            return invalid("group size k must be at least 2");
        }
        if t.groups_per_step == 0 || t.eval_every == 0 {
            return invalid("groups_per_step and eval_every must be positive");
        }
        match &self.reward {
            ContextReward::FBeta { eta, beta } => {
                if !(0.0..=1.0).contains(eta) || !(*beta > 0.0) {
                    return invalid("context reward needs eta in [0, 1] and beta > 0");
                }
            }
            ContextReward::Additive { alphas } => {
                if alphas.len() != self.env.evidence.len() || alphas.iter().any(|a| !(*a > 0.0)) {
                    return invalid("additive context reward needs one positive alpha per evidence chunk");
                }
            }
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: RewardMode) -> Self {
        let mut c = self.clone();
        c.train.mode = mode;
        c
    }
}

/// Exact metrics under the current policy at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub mean_recall: f64,
    pub mean_answer_reward: f64,
    pub mean_context_reward: f64,
    pub mean_total_reward: f64,
    pub answer_logit: f64,
    pub marginals: Vec<f64>,
}

/// Reward structure of one training arm.
#[derive(Debug, Clone)]
pub struct Objective {
    pub env: SparseAnswerEnv,
    pub mode: RewardMode,
    pub reward: ContextReward,
}

impl Objective {
    fn gold(&self) -> &[ChunkId] {
        self.env.f().evidence()
    }

    fn context_value(&self, t: EvidenceMask, b: usize, r_ans: f64, gated: bool) -> f64 {
        let g = self.gold().len();
        let hits = t.count_ones() as usize;
        match &self.reward {
            ContextReward::FBeta { eta, beta } => {
                let f = f_beta_counts(hits, hits + b, g, *beta);
                if gated {
                    gated_context_reward(r_ans, f, *eta)
                } else {
                    f
                }
            }
            ContextReward::Additive { alphas } => {
                (0..g).filter(|k| t >> k & 1 == 1).map(|k| alphas[k]).sum()
            }
        }
    }

    /// Mode-selected reward of one sampled rollout.
    pub fn sample_reward(&self, z: &[bool], rng: &mut Rng) -> f64 {
        let t = self.env.f().selected_mask(z);
        let selected = z.iter().filter(|b| **b).count();
        let b = selected - t.count_ones() as usize;
        match self.mode {
            RewardMode::AnswerOnly => bernoulli(self.env.mean_for_mask(t), rng),
            RewardMode::ContextOnly => self.context_value(t, b, 0.0, false),
            RewardMode::Total => {
                let r_ans = bernoulli(self.env.mean_for_mask(t), rng);
                r_ans + self.context_value(t, b, r_ans, true)
            }
        }
    }

    /// Expected answer, context and total reward plus recall. The context column is
    /// always the gated reward so that arms are comparable.
    pub fn metrics(&self, law: &EvidenceLaw) -> (f64, f64, f64, f64) {
        let g = self.gold().len() as f64;
        let recall = law.expect_t(|t| t.count_ones() as f64) / g;
        let r_ans = law.expect_t(|t| self.env.mean_for_mask(t));
        let r_ctx = law.expect(|t, b| self.context_value(t, b, self.env.mean_for_mask(t), true));
        (recall, r_ans, r_ctx, r_ans + r_ctx)
    }

    /// `d E[reward] / d a` through the answer-reward component only.
    pub fn head_gradient(&self, law: &EvidenceLaw) -> f64 {
        let slope = self.env.competence_slope();
        if slope == 0.0 {
            return 0.0;
        }
        let f = self.env.f();
        match (self.mode, &self.reward) {
            (RewardMode::ContextOnly, _) => 0.0,
            (RewardMode::AnswerOnly, _) | (RewardMode::Total, ContextReward::Additive { .. }) => {
                slope * law.expect_t(|t| f.value(t))
            }
            (RewardMode::Total, ContextReward::FBeta { eta, beta }) => {
                let g = self.gold().len();
                slope
                    * law.expect(|t, b| {
                        let hits = t.count_ones() as usize;
                        f.value(t) * (1.0 + (1.0 - eta) * f_beta_counts(hits, hits + b, g, *beta))
                    })
            }
        }
    }

    /// Exact gradient of the expected mode reward on the evidence logits.
    pub fn gold_gradient(&self, law: &EvidenceLaw) -> Vec<f64> {
        law.gold_gradient(|t, b| {
            let m = self.env.mean_for_mask(t);
            match self.mode {
                RewardMode::AnswerOnly => m,
                RewardMode::ContextOnly => self.context_value(t, b, 0.0, false),
                RewardMode::Total => m + self.context_value(t, b, m, true),
            }
        })
    }
}

/// Environment, initial policy and objective described by a config.
pub fn setup(config: &TrainConfig) -> Result<(Objective, LogLinearGroundingPolicy)> {
    config.validate()?;
    let env = SparseAnswerEnv::from_spec(&config.env)?;
    let policy = config.policy.build(env.n_chunks())?;
    Ok((Objective { env, mode: config.train.mode, reward: config.reward.clone() }, policy))
}

fn record(step: usize, obj: &Objective, policy: &LogLinearGroundingPolicy, law: &EvidenceLaw) -> Result<TrainLogRecord> {
    let (recall, r_ans, r_ctx, r_total) = obj.metrics(law);
    Ok(TrainLogRecord {
        step,
        mean_recall: recall,
        mean_answer_reward: r_ans,
        mean_context_reward: r_ctx,
        mean_total_reward: r_total,
        answer_logit: obj.env.answer_logit(),
        marginals: policy.marginals()?,
    })
}

/// Runs the configured arm. The log holds the initial state (step 0), every
/// `eval_every`-th step and the final step.
pub fn train(config: &TrainConfig) -> Result<Vec<TrainLogRecord>> {
    let (mut obj, mut policy) = setup(config)?;
    let t = &config.train;
    let gold = obj.gold().to_vec();
    let mut law = EvidenceLaw::new(&policy, &gold)?;
    let mut log = vec![record(0, &obj, &policy, &law)?];
    for step in 1..=t.steps {
        let seed = derive_seed(t.seed, step as u64);
        let batch = RolloutBatch::collect(&policy, |z, r| obj.sample_reward(z, r), t.groups_per_step * t.k, seed)?;
        let dir = grpo_direction(&batch, t.k, t.normalize_std)?;
        let head = obj.head_gradient(&law);
        let delta: Vec<f64> = dir.iter().map(|d| t.lr_logits * d).collect();
        policy.ascend(&delta);
        if head != 0.0 {
            let a = obj.env.answer_logit() + t.lr_answer_head * head;
            obj.env.set_answer_logit(a);
        }
        guard(step, &policy, obj.env.answer_logit())?;
        law = EvidenceLaw::new(&policy, &gold)?;
        if step % t.eval_every == 0 || step == t.steps {
            log.push(record(step, &obj, &policy, &law)?);
        }
    }
    Ok(log)
}

fn guard(step: usize, policy: &LogLinearGroundingPolicy, answer_logit: f64) -> Result<()> {
    if let Some(j) = policy.logits().iter().position(|s| !s.is_finite()) {
        return Err(Error::Divergence { step, message: format!("logit of chunk {} is {}", j + 1, policy.logits()[j]) });
    }
    if answer_logit.is_nan() || answer_logit == f64::NEG_INFINITY {
        return Err(Error::Divergence { step, message: format!("answer-head logit is {answer_logit}") });
    }
    Ok(())
}

pub const CURVE_HEADER: &str = "step,recall,r_ans,r_ctx,r_total";

/// One row of a curve file.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub recall: f64,
    pub r_ans: f64,
    pub r_ctx: f64,
    pub r_total: f64,
}

pub fn curves_to_string(log: &[TrainLogRecord]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.mean_recall, r.mean_answer_reward, r.mean_context_reward, r.mean_total_reward
        );
    }
    s
}

pub fn emit_curves(log: &[TrainLogRecord], path: &Path) -> Result<()> {
    if log.is_empty() {
        return invalid("cannot write an empty training log");
    }
    std::fs::write(path, curves_to_string(log))?;
    Ok(())
}

pub fn load_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVE_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: format!("expected header {CURVE_HEADER}") }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |m: String| Error::Parse { line: i + 1, message: m };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 columns, got {}", cols.len())));
        }
        let num = |c: &str| c.parse::<f64>().map_err(|e| bad(format!("{c:?}: {e}")));
        rows.push(CurveRow {
            step: cols[0].parse().map_err(|e| bad(format!("step {:?}: {e}", cols[0])))?,
            recall: num(cols[1])?,
            r_ans: num(cols[2])?,
            r_ctx: num(cols[3])?,
            r_total: num(cols[4])?,
        });
    }
    Ok(rows)
}

/// Final metrics of one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub mode: RewardMode,
    pub initial_recall: f64,
    pub final_recall: f64,
    pub final_answer_reward: f64,
    pub answer_logit_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeComparison {
    pub arms: Vec<ArmSummary>,
    pub checks: Vec<(String, bool)>,
}

impl ModeComparison {
    pub fn arm(&self, mode: RewardMode) -> &ArmSummary {
        self.arms.iter().find(|a| a.mode == mode).expect("all modes are run")
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

/// Runs all three arms from the same environment, initial policy and seed.
pub fn compare_modes(base: &TrainConfig) -> Result<(ModeComparison, Vec<(RewardMode, Vec<TrainLogRecord>)>)> {
    let mut arms = Vec::new();
    let mut logs = Vec::new();
    for mode in RewardMode::ALL {
        let log = train(&base.with_mode(mode))?;
        let (first, last) = (&log[0], &log[log.len() - 1]);
        arms.push(ArmSummary {
            mode,
            initial_recall: first.mean_recall,
            final_recall: last.mean_recall,
            final_answer_reward: last.mean_answer_reward,
            answer_logit_unchanged: first.answer_logit.to_bits() == last.answer_logit.to_bits(),
        });
        logs.push((mode, log));
    }
    let by = |m| arms.iter().find(|a: &&ArmSummary| a.mode == m).unwrap().clone();
    let (ans, ctx, tot) = (by(RewardMode::AnswerOnly), by(RewardMode::ContextOnly), by(RewardMode::Total));
    let checks = vec![
        ("recall: total >= context_only".to_string(), tot.final_recall >= ctx.final_recall),
        ("recall: context_only >= answer_only".to_string(), ctx.final_recall >= ans.final_recall),
        ("answer reward: total > context_only".to_string(), tot.final_answer_reward > ctx.final_answer_reward),
    ];
    Ok((ModeComparison { arms, checks }, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SetFunctionKind;

    pub(crate) fn small_config(mode: RewardMode) -> TrainConfig {
        TrainConfig {
            train: TrainParams {
                mode,
                steps: 40,
                lr_logits: 1.0,
                lr_answer_head: 1.0,
                k: 4,
                groups_per_step: 4,
                normalize_std: false,
                eval_every: 10,
                seed: 5,
            },
            env: EnvSpec {
                n_chunks: 6,
                evidence: vec![2, 5],
                f: SetFunctionKind::AllOrNothing { delta: 0.8 },
                mu0: 0.1,
                guess_rate: 0.1,
                competence_init: 0.0,
            },
            policy: PolicySpec::uniform(0.3),
            reward: ContextReward::default(),
        }
    }

    #[test]
    fn log_layout_and_determinism() {
        let c = small_config(RewardMode::Total);
        let a = train(&c).unwrap();
        assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40]);
        assert_eq!(a, train(&c).unwrap());
        for r in &a {
            assert!((0.0..=1.0).contains(&r.mean_recall));
            assert!((r.mean_total_reward - r.mean_answer_reward - r.mean_context_reward).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_metrics_are_exact() {
        let c = small_config(RewardMode::AnswerOnly);
        let log = train(&TrainConfig { train: TrainParams { steps: 1, ..c.train.clone() }, ..c }).unwrap();
        // recall = p = 0.3; r_ans = 0.1 + 0.5 * 0.8 * 0.09
        assert!((log[0].mean_recall - 0.3).abs() < 1e-12);
        assert!((log[0].mean_answer_reward - 0.136).abs() < 1e-12);
    }

    #[test]
    fn context_only_leaves_answer_head_alone() {
        let log = train(&small_config(RewardMode::ContextOnly)).unwrap();
        let a0 = log[0].answer_logit.to_bits();
        assert!(log.iter().all(|r| r.answer_logit.to_bits() == a0));
        let log = train(&small_config(RewardMode::Total)).unwrap();
        assert!(log.last().unwrap().answer_logit > log[0].answer_logit);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut c = small_config(RewardMode::Total);
        c.train.steps = 1;
        c.train.lr_logits = 0.0;
        c.train.lr_answer_head = 0.0;
        let (cmp, logs) = compare_modes(&c).unwrap();
        let first = &logs[0].1;
        for (_, log) in &logs {
            assert_eq!(log, first);
        }
        assert!(cmp.arms.iter().all(|a| a.answer_logit_unchanged));
    }

    #[test]
    fn head_gradient_cases() {
        let c = small_config(RewardMode::AnswerOnly);
        let (obj, policy) = setup(&c).unwrap();
        let law = EvidenceLaw::new(&policy, obj.env.f().evidence()).unwrap();
        // sigmoid'(0) * 0.8 * 0.3^2
        assert!((obj.head_gradient(&law) - 0.25 * 0.8 * 0.09).abs() < 1e-15);
        let ctx = Objective { mode: RewardMode::ContextOnly, ..obj.clone() };
        assert_eq!(ctx.head_gradient(&law), 0.0);
        let add = Objective {
            mode: RewardMode::Total,
            reward: ContextReward::Additive { alphas: vec![0.5, 0.5] },
            ..obj.clone()
        };
        assert!((add.head_gradient(&law) - 0.25 * 0.8 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn additive_context_pressure_is_positive() {
        let mut c = small_config(RewardMode::ContextOnly);
        c.reward = ContextReward::Additive { alphas: vec![0.3, 0.6] };
        let (obj, policy) = setup(&c).unwrap();
        let law = EvidenceLaw::new(&policy, obj.env.f().evidence()).unwrap();
        let g = obj.gold_gradient(&law);
        assert!((g[0] - 0.3 * 0.21).abs() < 1e-14);
        assert!((g[1] - 0.6 * 0.21).abs() < 1e-14);
    }

    #[test]
    fn curves_round_trip() {
        let log = train(&small_config(RewardMode::Total)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        emit_curves(&log[..3], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        let rows = load_curves(&path).unwrap();
        for (r, l) in rows.iter().zip(&log) {
            assert_eq!(r.step, l.step);
            assert!((r.recall - l.mean_recall).abs() < 1e-9);
            assert!((r.r_total - l.mean_total_reward).abs() < 1e-9);
        }
        assert!(emit_curves(&[], &path).is_err());
        std::fs::write(&path, "step,recall\n").unwrap();
        assert!(load_curves(&path).is_err());
    }

    #[test]
    fn config_errors() {
        let mut c = small_config(RewardMode::Total);
        c.train.k = 1;
        assert!(train(&c).is_err());
        let mut c = small_config(RewardMode::Total);
        c.reward = ContextReward::Additive { alphas: vec![0.5] };
        assert!(train(&c).is_err());
        let mut p = LogLinearGroundingPolicy::independent(vec![0.0; 2]).unwrap();
        assert!(guard(3, &p, f64::INFINITY).is_ok());
        assert!(matches!(guard(3, &p, f64::NAN), Err(Error::Divergence { step: 3, .. })));
        p.ascend(&[0.0, f64::INFINITY]);
        assert!(matches!(guard(4, &p, 0.0), Err(Error::Divergence { step: 4, .. })));
    }

    #[test]
    fn mode_names_parse() {
        for m in RewardMode::ALL {
            assert_eq!(m.name().parse::<RewardMode>().unwrap(), m);
        }
        assert_eq!("answer-only".parse::<RewardMode>().unwrap(), RewardMode::AnswerOnly);
        assert!("both".parse::<RewardMode>().is_err());
    }
}
