//! Browser bindings for three small views of the reward stack. Every export
//! returns a JSON string; errors come back as `{"error": "..."}`.

use groundrl::config::ExperimentConfig;
use groundrl::data::ChunkId;
use groundrl::oracle::{closed_form_special_case, exact_gradient};
use groundrl::policy::LogLinearGroundingPolicy;
use groundrl::reward::{f_beta_counts, gated_context_reward};
use groundrl::trainer::compare_modes;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

const SMALL_CONFIG: &str = include_str!("../../../configs/small.toml");
const MAX_ENUMERATED: usize = 12;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Debug, Serialize)]
pub struct ContextScore {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    pub r_ctx: f64,
    pub r_total: f64,
    /// F-score for every selection size at the same hit count, from `hits` up to `max_selected`.
    pub by_size: Vec<(usize, f64)>,
}

pub fn context_score(
    hits: usize,
    selected: usize,
    gold: usize,
    beta: f64,
    eta: f64,
    r_ans: f64,
    max_selected: usize,
) -> Result<ContextScore, String> {
    if gold == 0 || hits > gold || hits > selected {
        return Err(format!("need 0 < gold and hits <= min(selected, gold), got {hits}/{selected}/{gold}"));
    }
    if !(beta > 0.0) || !(0.0..=1.0).contains(&eta) || !(0.0..=1.0).contains(&r_ans) {
        return Err("beta must be positive, eta and r_ans in [0, 1]".into());
    }
    let f = f_beta_counts(hits, selected, gold, beta);
    let r_ctx = gated_context_reward(r_ans, f, eta);
    Ok(ContextScore {
        precision: if selected == 0 { 0.0 } else { hits as f64 / selected as f64 },
        recall: hits as f64 / gold as f64,
        f_beta: f,
        r_ctx,
        r_total: r_ans + r_ctx,
        by_size: (hits.max(1)..=max_selected.max(selected)).map(|s| (s, f_beta_counts(hits, s, gold, beta))).collect(),
    })
}

#[wasm_bindgen]
pub fn score_context(hits: usize, selected: usize, gold: usize, beta: f64, eta: f64, r_ans: f64, max_selected: usize) -> String {
    respond(context_score(hits, selected, gold, beta, eta, r_ans, max_selected))
}

#[derive(Debug, Serialize)]
pub struct GradientPoint {
    pub p: f64,
    pub answer_only: f64,
    pub total: f64,
}

#[derive(Debug, Serialize)]
pub struct GradientSweep {
    pub points: Vec<GradientPoint>,
    /// Largest gap between the closed form and full enumeration, when `n` is small enough to enumerate.
    pub enumeration_error: Option<f64>,
}

/// Gradient on one gold logit for a uniform independent policy, with an
/// all-or-nothing answer reward of size `delta` and context weight `alpha`.
pub fn gradient_sweep(n: usize, g: usize, delta: f64, alpha: f64, points: usize) -> Result<GradientSweep, String> {
    if g == 0 || g > n || points < 2 {
        return Err(format!("need 1 <= g <= n and at least 2 points, got g={g} n={n} points={points}"));
    }
    let gold: Vec<ChunkId> = (1..=g as u32).map(|k| ChunkId::new(k).unwrap()).collect();
    let j = gold[0];
    let mut out = Vec::with_capacity(points);
    let mut worst: Option<f64> = None;
    for i in 0..points {
        let p = 0.01 + 0.98 * i as f64 / (points - 1) as f64;
        let probs = vec![p; n];
        let answer_only = closed_form_special_case(&probs, &gold, delta, 0.0, j).map_err(|e| e.to_string())?;
        let total = closed_form_special_case(&probs, &gold, delta, alpha, j).map_err(|e| e.to_string())?;
        if n <= MAX_ENUMERATED {
            let policy = LogLinearGroundingPolicy::from_probs(&probs).map_err(|e| e.to_string())?;
            let full = (1u64 << g) - 1;
            let grad = exact_gradient(&policy, |z| {
                let t = z & full;
                delta * f64::from(t == full) + alpha * t.count_ones() as f64
            })
            .map_err(|e| e.to_string())?;
            let err = (grad[j.position()] - total).abs();
            worst = Some(worst.map_or(err, |w| w.max(err)));
        }
        out.push(GradientPoint { p, answer_only, total });
    }
    Ok(GradientSweep { points: out, enumeration_error: worst })
}

#[wasm_bindgen]
pub fn sweep_gradient(n: usize, g: usize, delta: f64, alpha: f64, points: usize) -> String {
    respond(gradient_sweep(n, g, delta, alpha, points))
}

#[derive(Debug, Serialize)]
pub struct ArmCurve {
    pub mode: &'static str,
    pub step: Vec<usize>,
    pub recall: Vec<f64>,
    pub r_ans: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct TrainingRun {
    pub arms: Vec<ArmCurve>,
    pub checks: Vec<(String, bool)>,
}

/// Trains all three reward modes on the bundled toy environment.
pub fn train_arms(steps: usize, init_prob: f64, eta: f64, seed: u64) -> Result<TrainingRun, String> {
    if !(init_prob > 0.0 && init_prob < 1.0) {
        return Err(format!("init_prob must be in (0, 1), got {init_prob}"));
    }
    let mut exp = ExperimentConfig::from_toml(SMALL_CONFIG).map_err(|e| e.to_string())?;
    exp.reward.eta = eta;
    if let Some(p) = exp.policy.as_mut() {
        p.init_prob = Some(init_prob);
    }
    if let Some(t) = exp.train.as_mut() {
        t.steps = steps;
        t.seed = seed;
    }
    let config = exp.train_config().map_err(|e| e.to_string())?;
    let (cmp, logs) = compare_modes(&config).map_err(|e| e.to_string())?;
    let arms = logs
        .into_iter()
        .map(|(mode, log)| ArmCurve {
            mode: mode.name(),
            step: log.iter().map(|r| r.step).collect(),
            recall: log.iter().map(|r| r.mean_recall).collect(),
            r_ans: log.iter().map(|r| r.mean_answer_reward).collect(),
        })
        .collect();
    Ok(TrainingRun { arms, checks: cmp.checks })
}

#[wasm_bindgen]
pub fn train_modes(steps: usize, init_prob: f64, eta: f64, seed: u64) -> String {
    respond(train_arms(steps, init_prob, eta, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_scores() {
        let s = context_score(3, 4, 4, 2.0, 0.1, 1.0, 8).unwrap();
        assert!((s.recall - 0.75).abs() < 1e-12);
        assert!((s.r_total - 1.0 - s.f_beta).abs() < 1e-12);
        let wrong = context_score(3, 4, 4, 2.0, 0.1, 0.0, 8).unwrap();
        assert!((wrong.r_ctx - 0.1 * wrong.f_beta).abs() < 1e-12);
        assert_eq!(s.by_size.first().unwrap().0, 3);
        assert!(s.by_size.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(context_score(5, 4, 4, 2.0, 0.1, 1.0, 8).is_err());
    }

    #[test]
    fn sweep_agrees_with_enumeration() {
        let s = gradient_sweep(8, 3, 0.8, 0.3, 21).unwrap();
        assert!(s.enumeration_error.unwrap() < 1e-12);
        assert!(s.points.iter().all(|pt| pt.total >= pt.answer_only));
        assert!(s.points[0].answer_only < 1e-4);
        assert!(gradient_sweep(30, 3, 0.8, 0.3, 5).unwrap().enumeration_error.is_none());
    }

    #[test]
    fn short_training_run() {
        let run = train_arms(40, 0.1, 0.1, 7).unwrap();
        assert_eq!(run.arms.len(), 3);
        assert!(run.arms.iter().all(|a| a.step.len() == a.recall.len()));
        let total = run.arms.iter().find(|a| a.mode == "total").unwrap();
        assert!(total.recall.last().unwrap() > total.recall.first().unwrap());
        assert!(train_arms(10, 1.5, 0.1, 7).is_err());
    }

    #[test]
    fn errors_are_json() {
        let v: serde_json::Value = serde_json::from_str(&sweep_gradient(2, 3, 0.8, 0.3, 5)).unwrap();
        assert!(v["error"].as_str().unwrap().contains("g=3"));
    }
}
