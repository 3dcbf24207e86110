use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{ContextMode, CosinePlacement, RewardKind};
use crate::error::{Error, Result};
use crate::net::{NetworkShape, Regularizer};
use crate::policy::PolicyKind;
use crate::uncertainty::{ConfidenceConfig, NuMode, PrecisionBackend};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "NDB_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "ndb-output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionName {
    #[default]
    Square,
    Cosine,
    Linear,
}

impl std::str::FromStr for FunctionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" => Ok(FunctionName::Square),
            "cosine" => Ok(FunctionName::Cosine),
            "linear" => Ok(FunctionName::Linear),
            other => Err(Error::Config(format!(
                "unknown function '{other}' (expected square, cosine or linear)"
            ))),
        }
    }
}

/// Which parameters the gradient features are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureAnchor {
    /// Current parameters; all stored features are recomputed at every
    /// retrain.
    #[default]
    ThetaT,
    /// Initial parameters; the precision state is only ever updated
    /// incrementally.
    #[serde(rename = "theta_0")]
    Theta0,
}

/// Multiplier applied to gradient features before they enter `V_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScale {
    /// `g(x; θ)` as is.
    #[default]
    Unit,
    /// `g(x; θ) / √m`.
    InvSqrtWidth,
}

/// Everything that determines one experiment. Serialises as a flat JSON
/// object; every field is optional in the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicyKind,
    pub function: FunctionName,
    /// `a` for square, `b` for cosine; `None` picks 10 and 3 respectively.
    pub function_scale: Option<f64>,
    pub cosine_placement: CosinePlacement,
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "K")]
    pub arms: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub reps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub kappa_mu: f64,
    pub nu_mode: NuMode,
    pub nu: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub delta: f64,
    #[serde(alias = "m")]
    pub width: usize,
    #[serde(alias = "L")]
    pub depth: usize,
    pub learning_rate: f64,
    pub grad_steps: usize,
    pub retrain_every: usize,
    pub regularizer: Regularizer,
    pub feature_anchor: FeatureAnchor,
    pub feature_scale: FeatureScale,
    pub context_mode: ContextMode,
    pub precision_backend: PrecisionBackend,
    /// Emit per-round diagnostics (log-det, effective dimension, coverage).
    pub diagnostics: bool,
    pub output_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::NdbUcb,
            function: FunctionName::Square,
            function_scale: None,
            cosine_placement: CosinePlacement::Inner,
            rounds: 2000,
            arms: 5,
            dim: 5,
            reps: 20,
            seed: 0,
            lambda: 1.0,
            kappa_mu: 1.0,
            nu_mode: NuMode::Fixed,
            nu: 1.0,
            b: 1.0,
            delta: 0.05,
            width: 50,
            depth: 3,
            learning_rate: 1e-3,
            grad_steps: 50,
            retrain_every: 20,
            regularizer: Regularizer::Practical,
            feature_anchor: FeatureAnchor::ThetaT,
            feature_scale: FeatureScale::Unit,
            context_mode: ContextMode::Raw,
            precision_backend: PrecisionBackend::Auto,
            diagnostics: false,
            output_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn reward_kind(&self) -> RewardKind {
        match self.function {
            FunctionName::Square => RewardKind::Square {
                scale: self.function_scale.unwrap_or(10.0),
            },
            FunctionName::Cosine => RewardKind::Cosine {
                scale: self.function_scale.unwrap_or(3.0),
                placement: self.cosine_placement,
            },
            FunctionName::Linear => RewardKind::Linear,
        }
    }

    /// Dimension of the vectors the learner sees.
    pub fn feature_dim(&self) -> usize {
        self.context_mode.feature_dim(self.dim)
    }

    pub fn network_shape(&self) -> Result<NetworkShape> {
        NetworkShape::new(self.depth, self.width, self.feature_dim())
    }

    pub fn confidence(&self) -> ConfidenceConfig {
        ConfidenceConfig {
            nu_mode: self.nu_mode,
            nu: self.nu,
            b: self.b,
            delta: self.delta,
            lambda: self.lambda,
            kappa: self.kappa_mu,
        }
    }

    /// Output directory: the configured path, else `$NDB_OUTPUT_DIR`, else
    /// `./ndb-output`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(p) = &self.output_path {
            return p.clone();
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUTPUT_DIR),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.rounds < 1 {
            return fail("T must be at least 1".into());
        }
        let min_arms = if self.policy.is_duel() { 2 } else { 1 };
        if self.arms < min_arms {
            return fail(format!(
                "{} needs K >= {min_arms}, got {}",
                self.policy, self.arms
            ));
        }
        if self.dim < 1 {
            return fail("d must be at least 1".into());
        }
        if self.reps < 1 {
            return fail("reps must be at least 1".into());
        }
        if self.retrain_every < 1 {
            return fail("retrain_every must be at least 1".into());
        }
        if let Some(s) = self.function_scale {
            if !s.is_finite() {
                return fail(format!("function_scale must be finite, got {s}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.policy.is_neural() {
            self.network_shape()?;
        }
        self.confidence().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_flat_json() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.network_shape().unwrap().num_params(), 2800);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);

        let cfg = ExperimentConfig::from_json(
            r#"{"policy": "ncbf-ts", "function": "cosine", "T": 30, "K": 1, "m": 8, "L": 2}"#,
        )
        .unwrap();
        assert_eq!(cfg.policy, PolicyKind::NcbfTs);
        assert_eq!((cfg.rounds, cfg.arms, cfg.width, cfg.depth), (30, 1, 8, 2));
        assert_eq!(cfg.dim, 5);
        cfg.validate().unwrap();
        assert!(matches!(
            cfg.reward_kind(),
            RewardKind::Cosine { scale, .. } if scale == 3.0
        ));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"policy": "nosuch"}"#).is_err());
        assert!(ExperimentConfig::from_json("[").is_err());
        let cfg = ExperimentConfig {
            arms: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            width: 7,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            nu_mode: NuMode::Theoretical,
            delta: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn explicit_output_path_wins() {
        let cfg = ExperimentConfig {
            output_path: Some("x/y".into()),
            ..Default::default()
        };
        assert_eq!(cfg.output_dir(), PathBuf::from("x/y"));
    }
}
