//! Model hyperparameters and the component toggles used by the ablation
//! runner: text pooling mode, visual channel, positional embeddings, and
//! the message formulation inside propagation.

use crate::encoders::{TextEncoderConfig, TextPool, VisualEncoderConfig};
use serde::{Deserialize, Serialize};

/// What flows through attention-weighted aggregation: the per-head edge
/// vectors, or the per-head scalar scores themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageMode {
    Vector,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Node feature width.
    pub node_dim: usize,
    /// Edge embedding width.
    pub edge_dim: usize,
    /// Positional embedding width (four sub-table lookups concatenated).
    pub pos_dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Propagation steps.
    pub steps: usize,
    /// Positional grid extent (grid_k x grid_k cells per page).
    pub grid_k: usize,
    /// Label smoothing mass spread uniformly over all classes.
    pub label_smoothing: f64,
    pub text: TextEncoderConfig,
    pub visual: VisualEncoderConfig,
    pub text_pool: TextPool,
    pub use_visual: bool,
    pub use_positional: bool,
    pub message_mode: MessageMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            node_dim: 64,
            edge_dim: 64,
            pos_dim: 64,
            heads: 4,
            steps: 2,
            grid_k: 25,
            label_smoothing: 0.1,
            text: TextEncoderConfig::default(),
            visual: VisualEncoderConfig::default(),
            text_pool: TextPool::Mean,
            use_visual: true,
            use_positional: true,
            message_mode: MessageMode::Vector,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.pos_dim.is_multiple_of(4) {
            return Err(format!("pos_dim {} must be divisible by 4", self.pos_dim));
        }
        if self.steps < 1 {
            return Err("steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.node_dim == 0 || self.edge_dim == 0 || self.heads == 0 || self.grid_k == 0 {
            return Err("dimensions must be positive".into());
        }
        if self.text.raw_dim == 0 || self.text.text_dim == 0 || self.visual.channels == 0 {
            return Err("encoder dimensions must be positive".into());
        }
        Ok(())
    }

    /// Visual embedding width (equal to the final conv channel count).
    pub fn visual_dim(&self) -> usize {
        self.visual.channels
    }

    /// Width of the concatenated pair input [n_i | p_i | e_ij | n_j | p_j].
    pub fn pair_input_dim(&self) -> usize {
        2 * self.node_dim + 2 * self.pos_dim + self.edge_dim
    }

    /// Width of the concatenated-over-heads message entering the update MLP.
    pub fn update_input_dim(&self) -> usize {
        match self.message_mode {
            MessageMode::Vector => self.heads * self.node_dim,
            MessageMode::Scalar => self.heads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_with_expected_dims() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pair_input_dim(), 320);
        assert_eq!(cfg.update_input_dim(), 256);
        assert_eq!(cfg.text.text_dim * cfg.visual_dim(), 512);
    }

    #[test]
    fn scalar_mode_shrinks_update_input() {
        let cfg = ModelConfig { message_mode: MessageMode::Scalar, ..Default::default() };
        assert_eq!(cfg.update_input_dim(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = ModelConfig { pos_dim: 63, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { label_smoothing: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
