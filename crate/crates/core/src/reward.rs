//! Verifiable rewards: answer correctness, set precision/recall, F-beta and the gated
//! context reward `eta * F + (1 - eta) * r_ans * F`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{ChunkId, GroundedExample, Rollout};
use crate::error::{invalid, Result};

/// How a predicted answer is compared with the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerMatcher {
    /// Lowercase, drop punctuation, collapse whitespace, compare.
    #[default]
    ExactNormalized,
    /// Compare the first standalone option letter (A-J).
    MultipleChoice,
    /// Compare the first number with relative tolerance 1e-6.
    Numeric,
}

impl std::str::FromStr for AnswerMatcher {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact-normalized" => Ok(Self::ExactNormalized),
            "multiple-choice" => Ok(Self::MultipleChoice),
            "numeric" => Ok(Self::Numeric),
            other => Err(format!("unknown matcher `{other}`")),
        }
    }
}

/// The `[reward]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Weight of the unconditional grounding term.
    pub eta: f64,
    /// Recall weight of the F-score.
    pub beta: f64,
    pub matcher: AnswerMatcher,
    /// Value given to every reward component of a malformed rollout.
    pub malformed_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { eta: 0.1, beta: 2.0, matcher: AnswerMatcher::ExactNormalized, malformed_reward: 0.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return invalid(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return invalid(format!("beta must be positive, got {}", self.beta));
        }
        if !self.malformed_reward.is_finite() {
            return invalid("malformed_reward must be finite");
        }
        Ok(())
    }
}

/// Per-rollout reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ans: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub r_ctx: f64,
    pub r_total: f64,
}

impl RewardBreakdown {
    fn constant(v: f64) -> Self {
        Self { r_ans: v, precision: v, recall: v, f_beta: v, r_ctx: v, r_total: v }
    }
}

/// `(precision, recall)` of `selected` against `gold`. Precision of an empty selection
/// is 0; every selected id outside `gold` is a false positive, including ids that do not
/// exist in the document.
pub fn set_metrics(selected: &BTreeSet<ChunkId>, gold: &BTreeSet<ChunkId>) -> Result<(f64, f64)> {
    if gold.is_empty() {
        return invalid("gold evidence set must be non-empty");
    }
    let hits = selected.intersection(gold).count();
    Ok((counts_precision(hits, selected.len()), hits as f64 / gold.len() as f64))
}

fn counts_precision(hits: usize, selected: usize) -> f64 {
    if selected == 0 {
        0.0
    } else {
        hits as f64 / selected as f64
    }
}

/// F-beta from precision and recall, 0 when both are 0.
pub fn f_beta_from(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// F-beta from counts: `hits` correct ids among `selected` selections, `gold` gold ids.
pub fn f_beta_counts(hits: usize, selected: usize, gold: usize, beta: f64) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    f_beta_from(counts_precision(hits, selected), hits as f64 / gold as f64, beta)
}

/// Weighted harmonic mean of precision and recall with recall weighted `beta²:1`.
pub fn f_beta(selected: &BTreeSet<ChunkId>, gold: &BTreeSet<ChunkId>, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return invalid("beta must be positive");
    }
    let (p, r) = set_metrics(selected, gold)?;
    Ok(f_beta_from(p, r, beta))
}

fn normalize_text(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn option_letter(s: &str) -> Option<char> {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    let (paren, bare) = RE.get_or_init(|| {
        (Regex::new(r"\(([A-J])\)").unwrap(), Regex::new(r"\b([A-J])\b").unwrap())
    });
    paren
        .captures(s)
        .or_else(|| bare.captures(s))
        .and_then(|c| c[1].chars().next())
}

fn first_number(s: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?").unwrap());
    let cleaned = s.replace(',', "");
    re.find(&cleaned).and_then(|m| m.as_str().parse().ok())
}

/// 1 if `predicted` matches `gold` under `matcher`, else 0.
pub fn answer_reward(predicted: &str, gold: &str, matcher: AnswerMatcher) -> f64 {
    if predicted.trim().is_empty() {
        return 0.0;
    }
    let ok = match matcher {
        AnswerMatcher::ExactNormalized => {
            let p = normalize_text(predicted);
            !p.is_empty() && p == normalize_text(gold)
        }
        AnswerMatcher::MultipleChoice => match (option_letter(predicted), option_letter(gold)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        },
        AnswerMatcher::Numeric => match (first_number(predicted), first_number(gold)) {
            (Some(a), Some(b)) => a == b || (a - b).abs() <= 1e-6 * a.abs().max(b.abs()),
            _ => false,
        },
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

/// `eta * F + (1 - eta) * r_ans * F` given an already computed F-score.
pub fn gated_context_reward(r_ans: f64, f_beta: f64, eta: f64) -> f64 {
    f_beta * (1.0 - (1.0 - eta) * (1.0 - r_ans))
}

/// Context reward of a selection, gated by the answer reward.
pub fn context_reward(
    r_ans: f64,
    selected: &BTreeSet<ChunkId>,
    gold: &BTreeSet<ChunkId>,
    config: &RewardConfig,
) -> Result<f64> {
    config.validate()?;
    let f = f_beta(selected, gold, config.beta)?;
    Ok(gated_context_reward(r_ans, f, config.eta))
}

/// Full reward breakdown of a parsed rollout against an example.
pub fn total_reward(rollout: &Rollout, example: &GroundedExample, config: &RewardConfig) -> RewardBreakdown {
    if !rollout.well_formed {
        return RewardBreakdown::constant(config.malformed_reward);
    }
    let r_ans = answer_reward(&rollout.answer, &example.gold_answer, config.matcher);
    let gold = &example.gold_evidence;
    let hits = rollout.selected.intersection(gold).count();
    let precision = counts_precision(hits, rollout.selected.len());
    let recall = hits as f64 / gold.len() as f64;
    let f = f_beta_from(precision, recall, config.beta);
    let r_ctx = gated_context_reward(r_ans, f, config.eta);
    RewardBreakdown { r_ans, precision, recall, f_beta: f, r_ctx, r_total: r_ans + r_ctx }
}

/// Additive context reward `sum_{k in G} alpha_k 1{k in Z}`; `alphas` must cover
/// exactly the gold set with positive weights.
pub fn additive_context_reward(
    selected: &BTreeSet<ChunkId>,
    gold: &BTreeSet<ChunkId>,
    alphas: &BTreeMap<ChunkId, f64>,
) -> Result<f64> {
    if !alphas.keys().eq(gold.iter()) {
        return invalid("alpha weights must cover exactly the gold evidence set");
    }
    if let Some((id, a)) = alphas.iter().find(|(_, a)| !(**a > 0.0)) {
        return invalid(format!("alpha for {id} must be positive, got {a}"));
    }
    Ok(alphas.iter().filter(|(id, _)| selected.contains(id)).map(|(_, a)| a).sum())
}

/// One model output to score, keyed by the example's doc id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub id: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRollout {
    pub id: String,
    pub well_formed: bool,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

/// Per-rollout rows and their means. `mean.recall` is the contextual recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoredRollout>,
    pub mean: RewardBreakdown,
    pub malformed: usize,
}

/// Scores every rollout against the example with the same doc id.
pub fn score_rollouts(
    examples: &[GroundedExample],
    rollouts: &[RolloutRecord],
    config: &RewardConfig,
) -> Result<ScoreReport> {
    config.validate()?;
    if rollouts.is_empty() {
        return invalid("no rollouts to score");
    }
    let by_id: BTreeMap<&str, &GroundedExample> = examples.iter().map(|e| (e.document.doc_id(), e)).collect();
    let mut rows = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let Some(ex) = by_id.get(r.id.as_str()) else {
            return invalid(format!("rollout id {:?} matches no example", r.id));
        };
        let parsed = crate::data::parse_rollout(&r.output);
        rows.push(ScoredRollout {
            id: r.id.clone(),
            well_formed: parsed.well_formed,
            reward: total_reward(&parsed, ex, config),
        });
    }
    let n = rows.len() as f64;
    let mean_of = |g: fn(&RewardBreakdown) -> f64| rows.iter().map(|r| g(&r.reward)).sum::<f64>() / n;
    let mean = RewardBreakdown {
        r_ans: mean_of(|b| b.r_ans),
        precision: mean_of(|b| b.precision),
        recall: mean_of(|b| b.recall),
        f_beta: mean_of(|b| b.f_beta),
        r_ctx: mean_of(|b| b.r_ctx),
        r_total: mean_of(|b| b.r_total),
    };
    let malformed = rows.iter().filter(|r| !r.well_formed).count();
    Ok(ScoreReport { rows, mean, malformed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chunk_set, ChunkedDocument};
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> BTreeSet<ChunkId> {
        chunk_set(v.iter().copied()).unwrap()
    }

    #[test]
    fn precision_recall_examples() {
        assert_eq!(set_metrics(&ids(&[1, 5]), &ids(&[1, 5])).unwrap(), (1.0, 1.0));
        assert_eq!(set_metrics(&ids(&[1, 2, 3, 4]), &ids(&[1, 2])).unwrap(), (0.5, 1.0));
        assert_eq!(set_metrics(&ids(&[]), &ids(&[1])).unwrap(), (0.0, 0.0));
        assert!(set_metrics(&ids(&[1]), &ids(&[])).is_err());
    }

    #[test]
    fn out_of_range_ids_are_false_positives() {
        assert_eq!(set_metrics(&ids(&[1, 999]), &ids(&[1])).unwrap(), (0.5, 1.0));
    }

    #[test]
    fn f_beta_examples() {
        // 5 * 0.5 * 1 / (4 * 0.5 + 1)
        let f = f_beta(&ids(&[1, 2, 3, 4]), &ids(&[1, 2]), 2.0).unwrap();
        assert!((f - 2.5 / 3.0).abs() < 1e-12);
        assert_eq!(f_beta(&ids(&[3, 7]), &ids(&[3, 7]), 2.0).unwrap(), 1.0);
        assert_eq!(f_beta(&ids(&[4]), &ids(&[3, 7]), 2.0).unwrap(), 0.0);
        assert!(f_beta(&ids(&[4]), &ids(&[3]), 0.0).is_err());
    }

    #[test]
    fn matcher_examples() {
        assert_eq!(answer_reward("Radium.", "radium", AnswerMatcher::ExactNormalized), 1.0);
        for m in [AnswerMatcher::ExactNormalized, AnswerMatcher::MultipleChoice, AnswerMatcher::Numeric] {
            assert_eq!(answer_reward("", "radium", m), 0.0);
        }
        assert_eq!(answer_reward("(B)", "B", AnswerMatcher::MultipleChoice), 1.0);
        assert_eq!(answer_reward("The answer is (C).", "B", AnswerMatcher::MultipleChoice), 0.0);
        assert_eq!(answer_reward("about 1,000.0000001 units", "1000", AnswerMatcher::Numeric), 1.0);
        assert_eq!(answer_reward("1001", "1000", AnswerMatcher::Numeric), 0.0);
        assert_eq!(answer_reward("n/a", "1000", AnswerMatcher::Numeric), 0.0);
        assert_eq!(answer_reward("Warsaw,  Poland", "warsaw poland", AnswerMatcher::ExactNormalized), 1.0);
    }

    #[test]
    fn gated_context_examples() {
        let f = 2.5 / 3.0;
        assert!((gated_context_reward(1.0, f, 0.1) - f).abs() < 1e-15);
        assert!((gated_context_reward(0.0, f, 0.1) - 0.1 * f).abs() < 1e-15);
        assert_eq!(gated_context_reward(0.7, 0.0, 0.3), 0.0);
        let cfg = RewardConfig::default();
        let r = context_reward(0.0, &ids(&[1, 2, 3, 4]), &ids(&[1, 2]), &cfg).unwrap();
        assert!((r - 0.083_333_333_333).abs() < 1e-9);
        assert!(context_reward(1.0, &ids(&[1]), &ids(&[1]), &RewardConfig { eta: 1.5, ..cfg }).is_err());
    }

    fn example(evidence: &[u32]) -> GroundedExample {
        let doc = ChunkedDocument::new("d", (0..8).map(|i| format!("c{i}")).collect()).unwrap();
        GroundedExample::new(doc, "q", "radium", ids(evidence), None).unwrap()
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RewardConfig::default();
        let ex = example(&[1, 2]);
        let perfect = Rollout { think: String::new(), selected: ids(&[1, 2]), answer: "Radium".into(), well_formed: true };
        assert_eq!(total_reward(&perfect, &ex, &cfg).r_total, 2.0);

        let malformed = Rollout { well_formed: false, ..perfect.clone() };
        assert_eq!(total_reward(&malformed, &ex, &cfg), RewardBreakdown::constant(0.0));

        let wide = Rollout { selected: ids(&[1, 2, 3, 4]), ..perfect };
        let b = total_reward(&wide, &ex, &cfg);
        assert!((b.r_ctx - 0.833_333).abs() < 1e-6);
        assert!((b.r_total - 1.833_333).abs() < 1e-6);
    }

    #[test]
    fn additive_examples() {
        let g = ids(&[1, 2]);
        let half: BTreeMap<_, _> = g.iter().map(|&id| (id, 0.5)).collect();
        assert_eq!(additive_context_reward(&ids(&[1, 2, 5]), &g, &half).unwrap(), 1.0);
        assert_eq!(additive_context_reward(&ids(&[5]), &g, &half).unwrap(), 0.0);
        let uneven: BTreeMap<_, _> = [(ChunkId::new(1).unwrap(), 0.3), (ChunkId::new(2).unwrap(), 0.7)].into();
        assert_eq!(additive_context_reward(&ids(&[1]), &g, &uneven).unwrap(), 0.3);
        let partial: BTreeMap<_, _> = [(ChunkId::new(1).unwrap(), 0.3)].into();
        assert!(additive_context_reward(&ids(&[1]), &g, &partial).is_err());
    }

    fn id_sets() -> impl Strategy<Value = (BTreeSet<ChunkId>, BTreeSet<ChunkId>)> {
        (prop::collection::btree_set(1u32..16, 0..10), prop::collection::btree_set(1u32..16, 1..8))
            .prop_map(|(z, g)| (ids(&z.into_iter().collect::<Vec<_>>()), ids(&g.into_iter().collect::<Vec<_>>())))
    }

    proptest! {
        #[test]
        fn f_beta_bounds_and_zero_set((z, g) in id_sets(), beta in 0.1f64..8.0) {
            let f = f_beta(&z, &g, beta).unwrap();
            prop_assert!((0.0..=1.0 + 1e-15).contains(&f));
            prop_assert_eq!(f == 0.0, z.is_disjoint(&g));
            prop_assert_eq!((f - 1.0).abs() < 1e-12, z == g);
        }

        #[test]
        fn adding_gold_never_hurts((z, g) in id_sets(), beta in 0.1f64..8.0, pick in 0usize..8) {
            let missing: Vec<_> = g.difference(&z).copied().collect();
            prop_assume!(!missing.is_empty());
            let mut z2 = z.clone();
            z2.insert(missing[pick % missing.len()]);
            prop_assert!(f_beta(&z2, &g, beta).unwrap() >= f_beta(&z, &g, beta).unwrap() - 1e-15);
        }

        #[test]
        fn adding_distractor_never_raises_precision((z, g) in id_sets(), extra in 16u32..40) {
            let mut z2 = z.clone();
            z2.insert(ChunkId::new(extra).unwrap());
            prop_assert!(set_metrics(&z2, &g).unwrap().0 <= set_metrics(&z, &g).unwrap().0);
        }

        #[test]
        fn gate_monotone_in_answer((z, g) in id_sets(), eta in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let cfg = RewardConfig { eta, ..Default::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(context_reward(lo, &z, &g, &cfg).unwrap() <= context_reward(hi, &z, &g, &cfg).unwrap() + 1e-15);
            prop_assert_eq!(context_reward(1.0, &z, &g, &cfg).unwrap(), f_beta(&z, &g, 2.0).unwrap());
        }

        #[test]
        fn large_beta_approaches_recall((z, g) in id_sets()) {
            let (_, r) = set_metrics(&z, &g).unwrap();
            prop_assert!((f_beta(&z, &g, 1e6).unwrap() - r).abs() < 1e-4);
        }

        #[test]
        fn additive_is_modular((z, g) in id_sets(), c in 1u32..16) {
            let alphas: BTreeMap<_, _> = g.iter().map(|&id| (id, 0.1 + id.get() as f64 / 16.0)).collect();
            let c = ChunkId::new(c).unwrap();
            let mut z2 = z.clone();
            z2.insert(c);
            let gain = additive_context_reward(&z2, &g, &alphas).unwrap() - additive_context_reward(&z, &g, &alphas).unwrap();
            let expected = if g.contains(&c) && !z.contains(&c) { alphas[&c] } else { 0.0 };
            prop_assert!((gain - expected).abs() < 1e-12);
        }

        #[test]
        fn breakdown_invariants((z, g) in id_sets(), correct in any::<bool>(), eta in 0.0f64..=1.0) {
            let doc = ChunkedDocument::new("d", (0..16).map(|i| format!("c{i}")).collect()).unwrap();
            let ex = GroundedExample::new(doc, "q", "yes", g, None).unwrap();
            let rollout = Rollout { think: String::new(), selected: z, answer: if correct { "yes".into() } else { "no".into() }, well_formed: true };
            let cfg = RewardConfig { eta, ..Default::default() };
            let b = total_reward(&rollout, &ex, &cfg);
            prop_assert!((b.r_total - (b.r_ans + b.r_ctx)).abs() < 1e-12);
            prop_assert!((b.r_ctx - (eta * b.f_beta + (1.0 - eta) * b.r_ans * b.f_beta)).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&b.r_total));
        }

        #[test]
        fn selecting_everything_is_dominated(
            c in prop::collection::btree_set(1u32..32, 2..24),
            keep in prop::collection::vec(any::<bool>(), 24),
            beta in 0.1f64..8.0,
        ) {
            let all: Vec<u32> = c.iter().copied().collect();
            let mut g: Vec<u32> = all.iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect();
            if g.is_empty() {
                g.push(all[0]);
            }
            if g.len() == all.len() {
                g.pop();
            }
            let f = f_beta(&ids(&all), &ids(&g), beta).unwrap();
            prop_assert!(f < 1.0);
            prop_assert_eq!(f_beta(&ids(&g), &ids(&g), beta).unwrap(), 1.0);
        }
    }

    #[test]
    fn scoring_a_batch() {
        let ex = example(&[3, 5]);
        let good = crate::data::render_rollout("t", &ids(&[3, 5]), "radium");
        let rollouts = vec![
            RolloutRecord { id: "d".into(), output: good },
            RolloutRecord { id: "d".into(), output: "no tags at all".into() },
        ];
        let r = score_rollouts(std::slice::from_ref(&ex), &rollouts, &RewardConfig::default()).unwrap();
        assert_eq!(r.rows[0].reward.r_total, 2.0);
        assert!(!r.rows[1].well_formed);
        assert_eq!(r.rows[1].reward, RewardBreakdown::constant(0.0));
        assert_eq!((r.mean.recall, r.malformed), (0.5, 1));
        let stray = vec![RolloutRecord { id: "other".into(), output: String::new() }];
        let err = score_rollouts(&[ex], &stray, &RewardConfig::default()).unwrap_err();
        assert!(err.to_string().contains("other"));
    }
}
