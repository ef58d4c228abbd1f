//! Toy decoder-only transformer with separate projections for bookmark tokens.

mod checkpoint;
mod config;
mod forward;
mod gradcheck;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use forward::{
    bind_params, forward, forward_tape, lm_loss, lm_targets, ForwardOutput, LayerActivations,
    ParamVars, SelectionPlan, TapeForward,
};
pub use gradcheck::{grad_check, gradients, GradCheckReport, Gradients};
pub use layers::{
    attend_selected, embed_rows, ffn_residual, final_logits, project_qkv, Qkv, WindowQkv,
};
pub use params::{FreezeMask, LayerParams, ModelParams, ParamKind, ParamTensor};

use crate::error::Result;

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Seeded random initialization, see [`ModelParams::init`].
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn layer(&self, l: usize) -> LayerParams<'_> {
        self.params.layer(l)
    }
}
