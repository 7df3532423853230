//! Parameter-update engines: a conventional adaptive-moment optimizer
//! (the default) and a learned-optimizer controller/predictor stack whose
//! only training knob is the total step count.

mod adam;
mod learned;

pub use adam::{adam_step, AdamState};
pub use learned::{
    load_learned_weights, loss_features, progress_features, save_learned_weights, tensor_features,
    LearnedOptState, LearnedOptWeights, CONTROLLER_WIDTH, FALLBACK_SEED, FEATURES, HEAD_CLR,
    HEAD_D, HEAD_OUT, PRED_WEIGHTS, PROGRESS_THRESHOLDS,
};

use crate::error::Result;
use crate::siren::{Gradients, SirenParams};

/// A parameter-update engine applied once per training step.
pub enum Optimizer {
    Adam(AdamState),
    Learned(LearnedOptState),
}

impl Optimizer {
    pub fn step(
        &mut self,
        params: &mut SirenParams,
        grads: &Gradients,
        loss: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(state, params, grads),
            Optimizer::Learned(state) => state.step(params, grads, loss),
        }
    }

    pub fn id(&self) -> u32 {
        match self {
            Optimizer::Adam(_) => 0,
            Optimizer::Learned(_) => 1,
        }
    }
}
