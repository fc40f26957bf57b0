//! Test-time adaptation of the text encoder's layer norms on negated captions.

mod engine;
mod losses;

pub use engine::{
    adapt, adapt_offline, adapt_online, batch_loss_and_gradient, batch_ranges, prepare_items,
    AdaptItem, AdaptOutcome, BatchPrediction, StepRecord,
};
pub use losses::{
    hardest_negatives, negation_separated_similarity, plain_entropy_loss, refined_entropy_loss,
    select_candidates, semantics_reversion_loss, textual_debias_loss, total_loss, BatchGrad,
    BatchState, LossBreakdown,
};

use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    /// Update on each batch, then predict it with the updated model.
    Online,
    /// Update on every batch for several epochs before predicting anything.
    #[default]
    Offline,
}

/// Which end of the similarity ranking supplies the hardest negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardestRule {
    #[default]
    MinSimilarity,
    MaxSimilarity,
}

/// Loss terms switched on for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossFlags {
    pub ent: bool,
    pub sr: bool,
    pub tri: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags::ALL
    }
}

impl LossFlags {
    pub const NONE: LossFlags = LossFlags {
        ent: false,
        sr: false,
        tri: false,
    };
    pub const ENT_ONLY: LossFlags = LossFlags {
        ent: true,
        sr: false,
        tri: false,
    };
    pub const ALL: LossFlags = LossFlags {
        ent: true,
        sr: true,
        tri: true,
    };

    /// Frozen, ent, sr+tri, ent+tri, ent+sr, ent+sr+tri.
    pub const ABLATION_GRID: [LossFlags; 6] = [
        LossFlags::NONE,
        LossFlags::ENT_ONLY,
        LossFlags {
            ent: false,
            sr: true,
            tri: true,
        },
        LossFlags {
            ent: true,
            sr: false,
            tri: true,
        },
        LossFlags {
            ent: true,
            sr: true,
            tri: false,
        },
        LossFlags::ALL,
    ];

    pub fn any(self) -> bool {
        self.ent || self.sr || self.tri
    }

    /// All terms except those named in a comma-separated list such as `sr,tri`.
    pub fn all_except(disabled: &str) -> Result<LossFlags> {
        let mut flags = LossFlags::ALL;
        for name in disabled.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "ent" => flags.ent = false,
                "sr" => flags.sr = false,
                "tri" => flags.tri = false,
                other => {
                    return Err(NeatError::invalid(format!(
                        "unknown loss term {other:?} (expected ent, sr or tri)"
                    )))
                }
            }
        }
        Ok(flags)
    }

    /// Short label such as `ent+sr+tri`, or `frozen` when nothing is enabled.
    pub fn label(self) -> String {
        let names: Vec<&str> = [(self.ent, "ent"), (self.sr, "sr"), (self.tri, "tri")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            "frozen".to_string()
        } else {
            names.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub mode: AdaptMode,
    pub offline_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hardest: HardestRule,
    pub losses: LossFlags,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig::image()
    }
}

impl AdaptationConfig {
    /// Temperatures used for image-text data.
    pub fn image() -> Self {
        AdaptationConfig {
            tau1: 0.03,
            tau2: 0.07,
            alpha: 1.0,
            lambda: 5.0,
            batch_size: 256,
            mode: AdaptMode::Offline,
            offline_epochs: 5,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            hardest: HardestRule::MinSimilarity,
            losses: LossFlags::ALL,
        }
    }

    /// Temperatures used for video-text data.
    pub fn video() -> Self {
        AdaptationConfig {
            tau1: 0.07,
            tau2: 1.0,
            ..AdaptationConfig::image()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(NeatError::invalid(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("tau1", self.tau1)?;
        positive("tau2", self.tau2)?;
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NeatError::invalid(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.batch_size < 2 {
            return Err(NeatError::invalid("batch_size must be at least 2"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        let img = AdaptationConfig::image();
        assert_eq!(
            (img.tau1, img.tau2, img.alpha, img.lambda, img.batch_size),
            (0.03, 0.07, 1.0, 5.0, 256)
        );
        let vid = AdaptationConfig::video();
        assert_eq!((vid.tau1, vid.tau2), (0.07, 1.0));
        assert!(AdaptationConfig {
            tau2: 0.0,
            ..img.clone()
        }
        .validate()
        .is_err());
        assert!(AdaptationConfig {
            batch_size: 1,
            ..img
        }
        .validate()
        .is_err());
    }

    #[test]
    fn disable_list() {
        assert_eq!(
            LossFlags::all_except("sr,tri").unwrap(),
            LossFlags::ENT_ONLY
        );
        assert_eq!(LossFlags::all_except("").unwrap(), LossFlags::ALL);
        assert!(LossFlags::all_except("foo").is_err());
        assert_eq!(LossFlags::ABLATION_GRID[2].label(), "sr+tri");
        assert_eq!(LossFlags::NONE.label(), "frozen");
    }

    #[test]
    fn partial_config_json_fills_defaults() {
        let c: AdaptationConfig =
            serde_json::from_str(r#"{"tau1": 0.07, "mode": "online"}"#).unwrap();
        assert_eq!(c.tau1, 0.07);
        assert_eq!(c.mode, AdaptMode::Online);
        assert_eq!(c.lambda, 5.0);
    }
}
