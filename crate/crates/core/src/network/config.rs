use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::error::{config_err, Result};

/// Shape and width hyperparameters of the denoising network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub image_channels: usize,
    /// Label channels, background included.
    pub num_classes: usize,
    pub patch_size: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub num_heads: [usize; 4],
    /// Attention window side in tokens. Stages whose token grid is smaller
    /// attend over the whole grid instead.
    pub window_size: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
    /// Channel width of the full-resolution decoder path.
    pub stem_dim: usize,
    /// Route the decoder output through the reverse-boundary attention cascade.
    pub rba: bool,
    /// Weight of the boundary term in the attention modulation.
    pub boundary_weight: f64,
    /// Noise schedule the step indices refer to.
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 1,
            num_classes: 4,
            patch_size: 4,
            stage_dims: [32, 64, 128, 256],
            stage_depths: [2, 2, 2, 2],
            num_heads: [2, 4, 8, 8],
            window_size: 4,
            time_dim: 64,
            mlp_ratio: 2,
            stem_dim: 16,
            rba: true,
            boundary_weight: 1.0,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Channels entering the diffusion encoder: noisy label plus image.
    pub fn in_channels(&self) -> usize {
        self.image_channels + self.num_classes
    }

    /// Token-grid side of encoder stage `i`.
    pub fn level_side(&self, i: usize) -> usize {
        self.image_size / (self.patch_size << i)
    }

    /// Attention window actually used at stage `i`.
    pub fn effective_window(&self, i: usize) -> usize {
        self.window_size.min(self.level_side(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.window_size == 0 {
            return Err(config_err!(
                "image, patch and window sizes must be positive"
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size * 8) {
            return Err(config_err!(
                "image size {} not divisible by patch {} x 8",
                self.image_size,
                self.patch_size
            ));
        }
        if self.num_classes < 2 {
            return Err(config_err!(
                "need at least two classes, got {}",
                self.num_classes
            ));
        }
        if self.image_channels == 0 {
            return Err(config_err!("image needs at least one channel"));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(config_err!(
                "time dimension must be even and positive, got {}",
                self.time_dim
            ));
        }
        if self.mlp_ratio == 0 || self.stem_dim == 0 {
            return Err(config_err!("mlp ratio and stem width must be positive"));
        }
        for i in 0..4 {
            let (d, h) = (self.stage_dims[i], self.num_heads[i]);
            if d == 0 || h == 0 || d % h != 0 {
                return Err(config_err!("stage {i}: {h} heads do not divide width {d}"));
            }
            if self.stage_depths[i] == 0 {
                return Err(config_err!("stage {i} has no blocks"));
            }
            let side = self.level_side(i);
            if !side.is_multiple_of(self.effective_window(i)) {
                return Err(config_err!(
                    "stage {i}: grid side {side} not divisible by window {}",
                    self.window_size
                ));
            }
        }
        if !self.boundary_weight.is_finite() || self.boundary_weight < 0.0 {
            return Err(config_err!(
                "boundary weight must be finite and non-negative"
            ));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Tiny configuration used for gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            image_channels: 1,
            num_classes: 2,
            patch_size: 2,
            stage_dims: [4, 8, 8, 8],
            stage_depths: [1, 2, 1, 1],
            num_heads: [1, 2, 2, 2],
            window_size: 2,
            time_dim: 8,
            mlp_ratio: 2,
            stem_dim: 4,
            rba: true,
            boundary_weight: 1.0,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(
            (0..4).map(|i| c.level_side(i)).collect::<Vec<_>>(),
            vec![16, 8, 4, 2]
        );
        assert_eq!(c.effective_window(3), 2);
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = ModelConfig {
            image_size: 60,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            num_heads: [3, 4, 8, 8],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            window_size: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            time_dim: 7,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
