//! Experiment config files.
//!
//! TOML with optional sections `[env]`, `[policy]`, `[train]`, `[reward]` and
//! `[datagen]`. Unknown keys are rejected.
//!
//! ```toml
//! [env]
//! n_chunks = 16
//! evidence = [2, 7, 13]
//! f = { variant = "all_or_nothing", delta = 0.8 }
//! mu0 = 0.1
//! guess_rate = 0.1
//! competence_init = -5.0
//!
//! [policy]
//! init_prob = 0.1
//!
//! [train]
//! mode = "total"
//! steps = 500
//!
//! [reward]
//! eta = 0.1
//! beta = 2.0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::PipelineConfig;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::reward::{AnswerMatcher, RewardConfig};
use crate::trainer::{ContextReward, PolicySpec, TrainConfig, TrainParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    #[default]
    FBeta,
    Additive,
}

/// The `[reward]` section: the text reward settings plus the trainer's context reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub eta: f64,
    pub beta: f64,
    pub matcher: AnswerMatcher,
    pub malformed_reward: f64,
    pub context: ContextKind,
    /// Additive weights in evidence order.
    pub alphas: Option<Vec<f64>>,
}

impl Default for RewardSection {
    fn default() -> Self {
        let r = RewardConfig::default();
        Self {
            eta: r.eta,
            beta: r.beta,
            matcher: r.matcher,
            malformed_reward: r.malformed_reward,
            context: ContextKind::FBeta,
            alphas: None,
        }
    }
}

impl RewardSection {
    pub fn reward_config(&self) -> Result<RewardConfig> {
        let c = RewardConfig {
            eta: self.eta,
            beta: self.beta,
            matcher: self.matcher,
            malformed_reward: self.malformed_reward,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn context_reward(&self) -> Result<ContextReward> {
        match (self.context, &self.alphas) {
            (ContextKind::FBeta, _) => Ok(ContextReward::FBeta { eta: self.eta, beta: self.beta }),
            (ContextKind::Additive, Some(a)) => Ok(ContextReward::Additive { alphas: a.clone() }),
            (ContextKind::Additive, None) => Err(Error::Config("additive context reward needs `alphas`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: Option<EnvSpec>,
    pub policy: Option<PolicySpec>,
    pub train: Option<TrainParams>,
    #[serde(default)]
    pub reward: RewardSection,
    pub datagen: Option<PipelineConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let missing = |s: &str| Error::Config(format!("missing [{s}] section"));
        let c = TrainConfig {
            train: self.train.clone().ok_or_else(|| missing("train"))?,
            env: self.env.clone().ok_or_else(|| missing("env"))?,
            policy: self.policy.clone().unwrap_or(PolicySpec { init_prob: None, logits: None, coupling: None }),
            reward: self.reward.context_reward()?,
        };
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let c = self.datagen.clone().unwrap_or_default();
        c.validate()?;
        Ok(c)
    }
}
