use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LrSchedule, OptimizerConfig};
use crate::pgpr::{RefinementSteps, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Labeled source and target samples only.
    SPlusT,
    /// Argmax pseudo-labels of the semi-supervised head, fixed threshold `tau`.
    NaivePseudoLabel,
    /// Prior-guided refinement with the adaptive threshold.
    Pgpr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SPlusT, Method::NaivePseudoLabel, Method::Pgpr];

    pub fn name(self) -> &'static str {
        match self {
            Method::SPlusT => "s_plus_t",
            Method::NaivePseudoLabel => "naive_pseudo_label",
            Method::Pgpr => "pgpr",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_rate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_noise_sigma: 0.1,
            strong_noise_sigma: 0.5,
            strong_dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    Identity,
    Tanh { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub tau: f64,
    /// Warmup length `T` of the unlabeled-loss weight.
    pub warmup_t: u64,
    pub head_optimizer: OptimizerConfig,
    pub prior_optimizer: OptimizerConfig,
    /// Only used by a learnable extractor.
    pub extractor_optimizer: OptimizerConfig,
    pub extractor: ExtractorConfig,
    pub temperature: f64,
    pub cosine_mode: bool,
    pub augmentation: AugmentConfig,
    pub logit_interpolation: bool,
    /// PGPR ablation switches.
    pub refinement: RefinementSteps,
    /// EMA decay for the threshold expectation; per-batch mean when unset.
    pub threshold_ema: Option<f64>,
    /// Probability that a labeled draw comes from the target; uniform over the
    /// pooled labeled set when unset.
    pub labeled_target_fraction: Option<f64>,
    /// History is logged every `log_interval` iterations and at the last one; 0 disables it.
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let head = OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Constant,
        };
        TrainConfig {
            method: Method::Pgpr,
            iterations: 1500,
            batch_labeled: 24,
            batch_unlabeled: 24,
            tau: DEFAULT_TAU,
            warmup_t: 500,
            head_optimizer: head,
            prior_optimizer: head,
            extractor_optimizer: OptimizerConfig {
                learning_rate: 0.001,
                ..head
            },
            extractor: ExtractorConfig::Identity,
            temperature: 1.0,
            cosine_mode: false,
            augmentation: AugmentConfig::default(),
            logit_interpolation: false,
            refinement: RefinementSteps::default(),
            threshold_ema: None,
            labeled_target_fraction: None,
            log_interval: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.batch_labeled == 0 {
            return fail("batch_labeled must be positive".into());
        }
        if self.method != Method::SPlusT && self.batch_unlabeled == 0 {
            return fail("batch_unlabeled must be positive".into());
        }
        if self.warmup_t == 0 {
            return fail("warmup_t must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        let a = &self.augmentation;
        if !(a.weak_noise_sigma >= 0.0) || !(a.strong_noise_sigma >= a.weak_noise_sigma) {
            return fail("augmentation needs 0 <= weak_noise_sigma <= strong_noise_sigma".into());
        }
        if !(0.0..1.0).contains(&a.strong_dropout_rate) {
            return fail("strong_dropout_rate must lie in [0, 1)".into());
        }
        for (name, o) in [
            ("head_optimizer", &self.head_optimizer),
            ("prior_optimizer", &self.prior_optimizer),
            ("extractor_optimizer", &self.extractor_optimizer),
        ] {
            if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
                return fail(format!("{name}: need lr > 0, momentum in [0, 1), weight_decay >= 0"));
            }
        }
        if let Some(f) = self.labeled_target_fraction {
            if !(0.0..=1.0).contains(&f) {
                return fail("labeled_target_fraction must lie in [0, 1]".into());
            }
        }
        if let ExtractorConfig::Tanh { width: 0 } = self.extractor {
            return fail("tanh extractor width must be positive".into());
        }
        Ok(())
    }
}
