use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::Protocol;

/// Architecture hyper-parameters. Every parameter name and shape is derived
/// from this struct alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarcNetConfig {
    /// Square model input side in pixels.
    pub input_size: usize,
    /// Channel widths of the four residual stages.
    pub stage_widths: [usize; 4],
    /// Width `E` at which the image and feature branches meet.
    pub embed_dim: usize,
    pub protocol: Protocol,
    /// Hidden widths of the feature branch (`F → h0 → h1 → E`).
    pub feature_hidden: [usize; 2],
    /// Output widths of the four fusion-head layers; the last must be 1.
    pub head_widths: [usize; 4],
    pub seed: u64,
}

impl Default for SarcNetConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stage_widths: [64, 128, 256, 512],
            embed_dim: 32,
            protocol: Protocol::P2,
            feature_hidden: [64, 64],
            head_widths: [32, 16, 8, 1],
            seed: 0,
        }
    }
}

impl SarcNetConfig {
    /// Desk-scale variant: 64×64 input, stage widths [8, 16, 32, 64].
    pub fn scaled() -> Self {
        Self {
            input_size: 64,
            stage_widths: [8, 16, 32, 64],
            ..Self::default()
        }
    }

    pub fn with_protocol(mut self, protocol: Protocol) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.protocol.dim()
    }

    /// Widths of the three backbone linear layers:
    /// `w3 → w3/2 → 2E → E`.
    pub fn backbone_linear_widths(&self) -> [usize; 4] {
        let w3 = self.stage_widths[3];
        [w3, (w3 / 2).max(1), 2 * self.embed_dim, self.embed_dim]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.stage_widths.contains(&0) {
            return bad("stage widths must be positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.head_widths[3] != 1 {
            return bad(format!("last head width must be 1, got {}", self.head_widths[3]));
        }
        if self.head_widths.contains(&0) || self.feature_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        // stem /4 then three stride-2 stages: the last stage needs >= 1 pixel
        if self.input_size < 32 {
            return bad(format!("input_size {} below 32", self.input_size));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
