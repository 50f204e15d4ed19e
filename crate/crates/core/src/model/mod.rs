//! Flow-matching trace generator.
//!
//! Increments are standardized, cut into 2 x 2 keypoint patch tokens and
//! modeled with the linear interpolant between Gaussian noise (`tau = 0`)
//! and data (`tau = 1`). A compact mixer network predicts the velocity
//! `x1 - noise`; sampling integrates it with explicit Euler steps and
//! optional classifier-free guidance.

mod checkpoint;
mod net;
mod patch;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{Net, ParamGroup, PooledCond};
pub use patch::{
    check_even, patchify, patchify_values, token_index, unpatchify, unpatchify_values, PatchGrid, PATCH, TOKEN_DIM,
};
pub use sample::{initial_grid, ode_integrate, Model};
pub use schedule::{interpolate, target_velocity, InterpolantSchedule};
pub use train::{
    flow_matching_loss, si_loss, train, train_typed, Optimizer, Precision, TrainAbort, TrainConfig, TrainItem,
    TrainRun, TrainSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature provider name.
    pub provider: String,
    /// Side of the provider's patch grid (`N = patch_grid^2` visual tokens).
    pub patch_grid: usize,
    /// Conditioning width `D`.
    pub d_model: usize,
    /// Text length `M`.
    pub text_len: usize,
    /// Velocity-network token width; must be even.
    pub width: usize,
    /// Number of mixer blocks.
    pub depth: usize,
    /// Hidden width of the channel MLP as a multiple of `width`.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            provider: crate::fusion::STUB_V1.into(),
            patch_grid: 12,
            d_model: 128,
            text_len: crate::fusion::DEFAULT_TEXT_LEN,
            width: 64,
            depth: 2,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("width {} must be even and positive", self.width)));
        }
        if self.d_model == 0 || self.depth == 0 || self.mlp_ratio == 0 || self.text_len == 0 || self.patch_grid == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Trace dimensions a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceShape {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub horizon: usize,
}

impl TraceShape {
    pub fn num_keypoints(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn spatial_tokens(&self) -> usize {
        (self.grid_rows / PATCH) * (self.grid_cols / PATCH)
    }

    pub fn num_values(&self) -> usize {
        self.num_keypoints() * self.horizon * 3
    }
}
