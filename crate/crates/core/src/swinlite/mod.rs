//! Scaled-down shifted-window transformer: MAE-style encoder with a shared
//! mask token, a mirrored decoder with a pixel prediction layer, and the
//! projection and classifier heads.

mod geometry;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{relative_position_index, WindowLayout, SHIFT_MASK_PENALTY};
pub use model::SwinLite;

use crate::microtensor::{Graph, ModelParams, Tensor, TensorError};
use crate::patching::{reassemble, MaskPlan, PatchError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("projection output has zero norm")]
    Normalization,
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::ZeroNorm => ModelError::Normalization,
            TensorError::ShapeMismatch { op, detail } => ModelError::Shape(format!("{op}: {detail}")),
            other => ModelError::Tensor(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub blocks_per_stage: usize,
    /// Heads per decoder stage, indexed like the encoder stages.
    pub heads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    /// Window side; clamped to the grid side on stages smaller than it.
    pub window: usize,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    /// Replace masked patches by a learned vector (otherwise their pixels
    /// are zeroed and embedded like visible patches).
    pub mask_token: bool,
    pub decoder: DecoderConfig,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub classifier_hidden: usize,
    pub num_classes: usize,
}

/// Desk geometry: 8×8×16 tokens shrinking to 2×2×64.
impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: 1,
            patch: 4,
            embed_dim: 16,
            stages: 3,
            blocks_per_stage: 1,
            window: 4,
            heads: vec![2, 2, 2],
            mlp_ratio: 2,
            mask_token: true,
            decoder: DecoderConfig { blocks_per_stage: 1, heads: vec![2, 2, 2] },
            proj_hidden: 32,
            proj_dim: 16,
            classifier_hidden: 32,
            num_classes: 2,
        }
    }
}

impl ArchConfig {
    /// The 256×256×3 geometry with 4-pixel patches: 64×64×96 tokens shrinking
    /// to 8×8×768 over four stages.
    pub fn full_scale() -> Self {
        Self {
            image_side: 256,
            channels: 3,
            patch: 4,
            embed_dim: 96,
            stages: 4,
            blocks_per_stage: 1,
            window: 8,
            heads: vec![3, 6, 12, 24],
            mlp_ratio: 4,
            mask_token: true,
            decoder: DecoderConfig { blocks_per_stage: 1, heads: vec![3, 6, 12, 24] },
            proj_hidden: 2048,
            proj_dim: 256,
            classifier_hidden: 512,
            num_classes: 2,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || !self.image_side.is_multiple_of(self.patch) {
            return bad(format!("patch {} does not divide image side {}", self.patch, self.image_side));
        }
        if self.stages == 0 || self.embed_dim == 0 || self.channels == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("stages, embed_dim, channels, window and mlp_ratio must be positive".into());
        }
        if self.heads.len() != self.stages || self.decoder.heads.len() != self.stages {
            return bad(format!("need {} head counts for encoder and decoder", self.stages));
        }
        let g0 = self.grid_side();
        for s in 0..self.stages {
            let grid = g0 >> s;
            if grid == 0 || !g0.is_multiple_of(1 << s) {
                return bad(format!("grid {g0} cannot be halved {s} times"));
            }
            let w = self.window.min(grid);
            if !grid.is_multiple_of(w) {
                return bad(format!("window {w} does not divide stage-{s} grid {grid}"));
            }
            let dim = self.embed_dim << s;
            if !dim.is_multiple_of(self.heads[s]) || !dim.is_multiple_of(self.decoder.heads[s]) {
                return bad(format!("stage-{s} width {dim} not divisible by its head count"));
            }
        }
        if self.num_classes < 2 || self.proj_dim == 0 || self.proj_hidden == 0 || self.classifier_hidden == 0 {
            return bad("head sizes must be positive and num_classes >= 2".into());
        }
        Ok(())
    }
}

/// Tokens of a single image on its grid, with the visibility of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub grid: usize,
    pub dim: usize,
    /// `[grid², dim]`.
    pub tokens: Tensor,
    pub visible: Vec<bool>,
}

/// Binds every weight as a constant; these wrappers are inference-only.
fn frozen(g: &mut Graph, weights: &ModelParams) -> crate::microtensor::Binding {
    let mut frozen = ModelParams::new();
    for (n, t) in weights.iter() {
        frozen.insert_frozen(n, t.clone());
    }
    frozen.bind(g)
}

/// Token embedding of one image's `R × V²C` patches under `plan`.
pub fn embed_patches(model: &SwinLite, patches: &Tensor, plan: &MaskPlan, weights: &ModelParams) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let p = frozen(&mut g, weights);
    let x = g.input(patches.clone());
    let t = model.embed(&mut g, &p, x, &[plan])?;
    let grid = model.patch_grid().rows();
    let dim = model.config().embed_dim;
    Ok(TokenSequence {
        grid,
        dim,
        tokens: g.value(t).reshaped(&[grid * grid, dim])?,
        visible: plan.mask_flags().iter().map(|m| !m).collect(),
    })
}

/// Runs the encoder stack on stage-0 tokens.
pub fn encode(model: &SwinLite, tokens: &TokenSequence, weights: &ModelParams) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let p = frozen(&mut g, weights);
    let n = tokens.grid * tokens.grid;
    let x = g.input(tokens.tokens.reshaped(&[1, n, tokens.dim])?);
    let y = model.encode(&mut g, &p, x)?;
    let (grid, dim) = *model.encoder_stage_shapes().last().unwrap();
    let factor = tokens.grid / grid;
    let visible = (0..grid * grid)
        .map(|t| {
            let (r, c) = (t / grid * factor, t % grid * factor);
            (0..factor).any(|dy| (0..factor).any(|dx| tokens.visible[(r + dy) * tokens.grid + c + dx]))
        })
        .collect();
    Ok(TokenSequence { grid, dim, tokens: g.value(y).reshaped(&[grid * grid, dim])?, visible })
}

/// Reconstructs an `H×W×C` image from encoder output.
pub fn decode(model: &SwinLite, encoded: &TokenSequence, weights: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = frozen(&mut g, weights);
    let x = g.input(encoded.tokens.reshaped(&[1, encoded.grid * encoded.grid, encoded.dim])?);
    let y = model.decode(&mut g, &p, x)?;
    let grid = model.patch_grid();
    let patches = g.value(y).reshaped(&[grid.count(), grid.patch_len()])?;
    Ok(reassemble(&patches, grid)?)
}

/// Projection embedding of pooled features `[B, C]`.
pub fn project_head(model: &SwinLite, features: &Tensor, weights: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = frozen(&mut g, weights);
    let x = g.input(features.clone());
    let z = model.project(&mut g, &p, x)?;
    Ok(g.value(z).clone())
}

/// Classifier logits for pooled features `[B, C]`.
pub fn classify(model: &SwinLite, features: &Tensor, weights: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = frozen(&mut g, weights);
    let x = g.input(features.clone());
    let z = model.classify(&mut g, &p, x)?;
    Ok(g.value(z).clone())
}
