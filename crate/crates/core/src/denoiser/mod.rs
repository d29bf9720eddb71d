//! Conditional noise predictors and their attention taps.

mod analytic;
mod toy;

pub use analytic::{
    analytic_eps, analytic_posterior, ConditionMap, FactorPosterior, GaussianFactorConfig,
    GaussianFactorModel, PromptCondition,
};
pub use toy::{
    ConditioningMode, DenoisingExample, ToyAttentionModel, ToyConfig, ToyForward, ToyModelMeta,
    PATCH_FEATURES,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentImage;
use crate::error::{Error, Result};
use crate::text::{TextEmbedding, TokenId};

/// Conditional epsilon-predictor. Implementations are immutable during
/// evaluation and deterministic given their inputs.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &LatentImage, cond: &TextEmbedding) -> Result<Array2<f64>>;

    /// Shape of the image latent the model consumes.
    fn latent_shape(&self) -> (usize, usize);

    fn predict_with_taps(
        &self,
        z_t: &LatentImage,
        cond: &TextEmbedding,
    ) -> Result<(Array2<f64>, Option<AttentionTaps>)> {
        Ok((self.predict(z_t, cond)?, None))
    }
}

/// Post-softmax attention probabilities captured during one forward pass.
///
/// Joint mode stores the full `(v + l) x (v + l)` self-attention per head
/// (image tokens first); cross mode stores the `v x l` cross-attention.
#[derive(Debug, Clone)]
pub struct AttentionTaps {
    pub mode: ConditioningMode,
    pub image_tokens: usize,
    pub text_ids: Vec<TokenId>,
    /// `layers[layer][head]`
    pub layers: Vec<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub token: TokenId,
    pub values: Vec<f64>,
}

/// Head-averaged attention mass from every image token toward `token`,
/// one map per layer.
pub fn extract_attention_maps(taps: &AttentionTaps, token: TokenId) -> Result<Vec<AttentionMap>> {
    let pos = taps
        .text_ids
        .iter()
        .position(|t| *t == token)
        .ok_or_else(|| Error::InvalidParameter(format!("token {} not in the prompt", token.0)))?;
    let column = match taps.mode {
        ConditioningMode::Joint => taps.image_tokens + pos,
        ConditioningMode::Cross => pos,
    };
    Ok(taps
        .layers
        .iter()
        .enumerate()
        .map(|(layer, heads)| {
            let h = heads.len() as f64;
            let values = (0..taps.image_tokens)
                .map(|i| heads.iter().map(|a| a[[i, column]]).sum::<f64>() / h)
                .collect();
            AttentionMap {
                layer,
                token,
                values,
            }
        })
        .collect())
}
