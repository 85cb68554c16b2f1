//! Training configuration. Every field has a default so a partial (or empty)
//! JSON object is a valid config.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsic::HsicConfig;
use crate::moe::RoutingMode;

/// How the single-codebook comparison model is sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One stack with the same `L` and `T` as a single expert.
    #[default]
    CapacityMatched,
    /// One stack whose levels hold as many codes as all expert stacks
    /// (domain experts plus shared) together: `T' = (K + 1)·T`.
    ParameterMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_rq: f64,
    pub lambda_mi: f64,
    /// Commitment weight in the RQ loss.
    pub alpha: f64,
    /// Weight of the mean-HSIC term in the calibration loss.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Autoencoder-only epochs before the codebooks are initialised.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub min_per_domain: usize,
    /// Number of domain experts selected per item.
    pub top_n: usize,
    /// Domain experts; defaults to the dataset's domain count.
    pub num_experts: Option<usize>,
    pub seed: u64,
    pub hsic: HsicConfig,
    pub levels: usize,
    pub codes: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub kmeans_iters: usize,
    pub reset_dead_codes: bool,
    pub dead_code_threshold: u64,
    pub routing: RoutingMode,
    pub baseline: BaselineKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rq: 1.0,
            lambda_mi: 0.03,
            alpha: 0.25,
            beta: 1.0,
            lr: 1e-3,
            epochs: 200,
            warmup_epochs: 20,
            batch_size: 256,
            min_per_domain: 16,
            top_n: 1,
            num_experts: None,
            seed: 42,
            hsic: HsicConfig::default(),
            levels: 4,
            codes: 256,
            latent_dim: 32,
            hidden: vec![256, 96],
            kmeans_iters: 20,
            reset_dead_codes: true,
            dead_code_threshold: 1,
            routing: RoutingMode::Learned,
            baseline: BaselineKind::CapacityMatched,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("lambda_rq", self.lambda_rq),
            ("lambda_mi", self.lambda_mi),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.top_n == 0 {
            return bad("top_n must be >= 1".into());
        }
        if self.num_experts == Some(0) {
            return bad("num_experts must be >= 1".into());
        }
        if self.levels == 0 || self.codes == 0 || self.latent_dim == 0 {
            return bad("levels, codes and latent_dim must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        self.hsic.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_override() {
        let c = TrainConfig::from_json(r#"{"lambda_mi": 0.3, "hsic": {"bandwidth": {"fixed": 0.5}}}"#).unwrap();
        assert_eq!(c.lambda_mi, 0.3);
        assert_eq!(c.hsic.bandwidth, crate::hsic::Bandwidth::Fixed(0.5));
        assert_eq!(c.hsic.max_points_per_domain, 256);
        assert_eq!(c.lambda_rq, 1.0);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(TrainConfig::from_json(r#"{"lambda_mi": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"top_n": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"not_a_key": 1}"#).is_err());
        assert!(TrainConfig::from_json("{").is_err());
    }
}
