use serde::{Deserialize, Serialize};

use crate::dynamics::{IdmInput, ModelConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;
use crate::objective::{ObjectiveConfig, ObjectiveKind, VicregWeights};

/// Pre-training hyperparameters, including architecture widths and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Frame interval between the two states of a pair.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pairs drawn from each trajectory per epoch.
    pub pairs_per_trajectory: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_m0: f64,
    pub diffusion_steps: usize,
    pub dim: usize,
    pub tokens: usize,
    pub group_size: usize,
    pub encoder_hidden: usize,
    pub d_act: usize,
    pub idm_hidden: usize,
    pub cond_width: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    pub lambda_inv: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    pub var_threshold: f64,
    pub seed: u64,
    pub idm_input: IdmInput,
    pub no_history: bool,
    pub objective: ObjectiveKind,
    pub token_level_inv: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = VicregWeights::default();
        let o = AdamWConfig::default();
        Self {
            k: 4,
            epochs: 300,
            batch_size: 32,
            pairs_per_trajectory: 1,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            weight_decay: o.weight_decay,
            ema_m0: 0.996,
            diffusion_steps: m.diffusion_steps,
            dim: m.encoder.dim,
            tokens: m.encoder.tokens,
            group_size: m.encoder.group_size,
            encoder_hidden: m.encoder.hidden,
            d_act: m.d_act,
            idm_hidden: m.idm_hidden,
            cond_width: m.cond_width,
            ffn_hidden: m.ffn_hidden,
            blocks: m.blocks,
            lambda_inv: w.inv,
            lambda_var: w.var,
            lambda_cov: w.cov,
            var_threshold: w.var_threshold,
            seed: 0,
            idm_input: IdmInput::Diff,
            no_history: false,
            objective: ObjectiveKind::Vicreg,
            token_level_inv: false,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    /// The desk-scale preset: 50 epochs of 8 pairs per trajectory.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            pairs_per_trajectory: 8,
            ..Self::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                tokens: self.tokens,
                group_size: self.group_size,
                dim: self.dim,
                hidden: self.encoder_hidden,
            },
            d_act: self.d_act,
            idm_hidden: self.idm_hidden,
            idm_input: self.idm_input,
            cond_width: self.cond_width,
            time_dim: ModelConfig::default().time_dim,
            blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
            diffusion_steps: self.diffusion_steps,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.objective,
            weights: VicregWeights {
                inv: self.lambda_inv,
                var: self.lambda_var,
                cov: self.lambda_cov,
                var_threshold: self.var_threshold,
            },
            no_history: self.no_history,
            token_level_inv: self.token_level_inv,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: AdamWConfig::default().eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 1 {
            return bad("k must be at least 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.pairs_per_trajectory < 1 {
            return bad("pairs_per_trajectory must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_m0) {
            return bad(format!("ema_m0 must lie in [0, 1], got {}", self.ema_m0));
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1".into());
        }
        self.objective_config().weights.validate()?;
        self.model().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.k, c.epochs, c.d_act, c.dim, c.tokens), (4, 300, 16, 64, 8));
        assert_eq!(c.lr, 1e-4);
        assert_eq!((c.lambda_inv, c.lambda_var, c.lambda_cov), (25.0, 25.0, 1.0));
        assert_eq!(TrainConfig::desk().epochs, 50);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = TrainConfig {
            idm_input: IdmInput::Concat,
            objective: ObjectiveKind::Mse,
            ..TrainConfig::desk()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"idm_input\":\"concat\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>("{\"leanring_rate\": 1}").is_err());
    }

    #[test]
    fn invalid_values() {
        for c in [
            TrainConfig { k: 0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { ema_m0: 1.5, ..Default::default() },
            TrainConfig { lambda_var: -1.0, ..Default::default() },
            TrainConfig { dim: 0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
