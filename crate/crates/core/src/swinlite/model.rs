use rand::Rng;

use super::geometry::{self, WindowLayout};
use super::{ArchConfig, ModelError, Result};
use crate::microtensor::{Binding, Graph, ModelParams, NodeId, Tensor};
use crate::patching::{MaskPlan, PatchGrid};

const POS_STD: f64 = 0.02;
const MASK_TOKEN_STD: f64 = 0.02;

/// One transformer block's static layout.
#[derive(Debug, Clone)]
struct BlockPlan {
    prefix: String,
    layout: WindowLayout,
    heads: usize,
    mask: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct StagePlan {
    grid: usize,
    dim: usize,
    blocks: Vec<BlockPlan>,
}

/// Stateless executor for an [`ArchConfig`]; weights live in [`ModelParams`].
#[derive(Debug, Clone)]
pub struct SwinLite {
    cfg: ArchConfig,
    grid: PatchGrid,
    encoder: Vec<StagePlan>,
    /// Decoder stages in execution order (coarse to fine).
    decoder: Vec<StagePlan>,
    rel_index: Vec<Vec<usize>>,
}

fn block_plans(prefix: &str, grid: usize, window: usize, heads: usize, blocks: usize) -> Vec<BlockPlan> {
    let w = window.min(grid);
    (0..blocks)
        .map(|b| {
            let shift = if b % 2 == 1 && grid > w { w / 2 } else { 0 };
            let layout = WindowLayout::new(grid, w, shift);
            let mask = layout.mask_tensor(heads);
            BlockPlan { prefix: format!("{prefix}.b{b}"), layout, heads, mask }
        })
        .collect()
}

impl SwinLite {
    pub fn new(cfg: ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = PatchGrid::square(cfg.image_side, cfg.channels, cfg.patch)?;
        let g0 = grid.rows();
        let encoder = (0..cfg.stages)
            .map(|s| StagePlan {
                grid: g0 >> s,
                dim: cfg.embed_dim << s,
                blocks: block_plans(&format!("enc.s{s}"), g0 >> s, cfg.window, cfg.heads[s], cfg.blocks_per_stage),
            })
            .collect();
        let decoder = (0..cfg.stages.saturating_sub(1))
            .rev()
            .map(|s| StagePlan {
                grid: g0 >> s,
                dim: cfg.embed_dim << s,
                blocks: block_plans(&format!("dec.s{s}"), g0 >> s, cfg.window, cfg.decoder.heads[s], cfg.decoder.blocks_per_stage),
            })
            .collect();
        let mut rel_index = vec![];
        for w in 1..=cfg.window {
            rel_index.push(geometry::relative_position_index(w));
        }
        Ok(Self { cfg, grid, encoder, decoder, rel_index })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn patch_grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// `(grid side, channels)` after each encoder stage.
    pub fn encoder_stage_shapes(&self) -> Vec<(usize, usize)> {
        self.encoder.iter().map(|s| (s.grid, s.dim)).collect()
    }

    /// `(grid side, channels)` after each decoder stage, then the pixel output
    /// `(grid side, V²·C)` of the prediction layer.
    pub fn decoder_stage_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<(usize, usize)> = self.decoder.iter().map(|s| (s.grid, s.dim)).collect();
        shapes.push((self.grid.rows(), self.grid.patch_len()));
        shapes
    }

    /// Feature width of pooled encoder output.
    pub fn feature_dim(&self) -> usize {
        self.encoder.last().unwrap().dim
    }

    // ---- initialization -------------------------------------------------

    fn init_linear<R: Rng + ?Sized>(p: &mut ModelParams, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) {
        p.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng));
        if bias {
            p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        }
    }

    fn init_norm(p: &mut ModelParams, name: &str, dim: usize) {
        p.insert(format!("{name}.g"), Tensor::full(&[dim], 1.0));
        p.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    fn init_blocks<R: Rng + ?Sized>(&self, p: &mut ModelParams, stage: &StagePlan, rng: &mut R) {
        let c = stage.dim;
        let hidden = c * self.cfg.mlp_ratio;
        for b in &stage.blocks {
            let w = b.layout.window;
            Self::init_norm(p, &format!("{}.ln1", b.prefix), c);
            for part in ["q", "k", "v", "o"] {
                Self::init_linear(p, &format!("{}.attn.{part}", b.prefix), c, c, true, rng);
            }
            p.insert(format!("{}.attn.rel_bias", b.prefix), Tensor::zeros(&[(2 * w - 1) * (2 * w - 1), b.heads]));
            Self::init_norm(p, &format!("{}.ln2", b.prefix), c);
            Self::init_linear(p, &format!("{}.mlp.fc1", b.prefix), c, hidden, true, rng);
            Self::init_linear(p, &format!("{}.mlp.fc2", b.prefix), hidden, c, true, rng);
        }
    }

    /// Parameters under `enc.`.
    pub fn init_encoder<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut p = ModelParams::new();
        let e = self.cfg.embed_dim;
        Self::init_linear(&mut p, "enc.embed", self.grid.patch_len(), e, true, rng);
        p.insert("enc.pos", Tensor::randn(&[self.grid.count(), e], POS_STD, rng));
        p.insert("enc.mask_token", Tensor::randn(&[e], MASK_TOKEN_STD, rng));
        for (s, stage) in self.encoder.iter().enumerate() {
            self.init_blocks(&mut p, stage, rng);
            if s + 1 < self.encoder.len() {
                let c = stage.dim;
                Self::init_norm(&mut p, &format!("enc.s{s}.merge.ln"), 4 * c);
                Self::init_linear(&mut p, &format!("enc.s{s}.merge"), 4 * c, 2 * c, false, rng);
            }
        }
        Self::init_norm(&mut p, "enc.norm", self.feature_dim());
        p
    }

    /// Parameters under `dec.`.
    pub fn init_decoder<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut p = ModelParams::new();
        for stage in &self.decoder {
            let s = self.stage_index(stage);
            let coarse = stage.dim * 2;
            Self::init_linear(&mut p, &format!("dec.s{s}.expand"), coarse, 2 * coarse, false, rng);
            Self::init_norm(&mut p, &format!("dec.s{s}.expand.ln"), stage.dim);
            self.init_blocks(&mut p, stage, rng);
        }
        let e = self.cfg.embed_dim;
        Self::init_norm(&mut p, "dec.norm", e);
        Self::init_linear(&mut p, "dec.pred", e, self.grid.patch_len(), true, rng);
        p
    }

    fn stage_index(&self, stage: &StagePlan) -> usize {
        (self.grid.rows() / stage.grid).trailing_zeros() as usize
    }

    /// Projection head `proj.` (two linear layers with a ReLU) and the
    /// online-only predictor `pred.`.
    pub fn init_projection<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut p = ModelParams::new();
        Self::init_linear(&mut p, "proj.fc1", self.feature_dim(), self.cfg.proj_hidden, true, rng);
        Self::init_linear(&mut p, "proj.fc2", self.cfg.proj_hidden, self.cfg.proj_dim, true, rng);
        Self::init_linear(&mut p, "pred.fc", self.cfg.proj_dim, self.cfg.proj_dim, true, rng);
        p
    }

    /// Classifier MLP `cls.`.
    pub fn init_classifier<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let mut p = ModelParams::new();
        Self::init_linear(&mut p, "cls.fc1", self.feature_dim(), self.cfg.classifier_hidden, true, rng);
        Self::init_linear(&mut p, "cls.fc2", self.cfg.classifier_hidden, self.cfg.num_classes, true, rng);
        p
    }

    // ---- graph building -------------------------------------------------

    fn affine_norm(g: &mut Graph, p: &Binding, name: &str, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x)?;
        let s = g.mul(n, p.id(&format!("{name}.g"))?)?;
        Ok(g.add(s, p.id(&format!("{name}.b"))?)?)
    }

    fn dense(g: &mut Graph, p: &Binding, name: &str, x: NodeId) -> Result<NodeId> {
        let w = p.id(&format!("{name}.w"))?;
        let b = p.try_id(&format!("{name}.b"));
        Ok(g.linear(x, w, b)?)
    }

    /// Visible patches become `W·x + b + pos`; masked positions become the
    /// shared mask token with no position code. Returns `[B, R, E]`.
    pub fn embed(&self, g: &mut Graph, p: &Binding, patches: NodeId, plans: &[&MaskPlan]) -> Result<NodeId> {
        let (r, e, pl) = (self.grid.count(), self.cfg.embed_dim, self.grid.patch_len());
        let batch = plans.len();
        if g.shape(patches) != [batch * r, pl] {
            return Err(ModelError::Shape(format!("patches {:?}, expected [{}, {pl}]", g.shape(patches), batch * r)));
        }
        if let Some(bad) = plans.iter().find(|m| m.patch_count() != r) {
            return Err(ModelError::Shape(format!("mask plan over {} patches, grid has {r}", bad.patch_count())));
        }
        let flags: Vec<bool> = plans.iter().flat_map(|m| m.mask_flags()).collect();
        let input = if self.cfg.mask_token {
            patches
        } else {
            let keep: Vec<f64> = flags.iter().flat_map(|&m| std::iter::repeat_n(if m { 0.0 } else { 1.0 }, pl)).collect();
            let keep = g.input(Tensor::new(vec![batch * r, pl], keep)?);
            g.mul(patches, keep)?
        };
        let x = Self::dense(g, p, "enc.embed", input)?;
        let x = g.reshape(x, &[batch, r, e])?;
        let x = g.add(x, p.id("enc.pos")?)?;
        if !self.cfg.mask_token || !flags.iter().any(|&m| m) {
            return Ok(x);
        }
        let keep: Vec<f64> = flags.iter().flat_map(|&m| std::iter::repeat_n(if m { 0.0 } else { 1.0 }, e)).collect();
        let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let keep = g.input(Tensor::new(vec![batch, r, e], keep)?);
        let drop = g.input(Tensor::new(vec![batch, r, e], drop)?);
        let visible = g.mul(x, keep)?;
        let tokens = g.mul(drop, p.id("enc.mask_token")?)?;
        Ok(g.add(visible, tokens)?)
    }

    fn window_attention(&self, g: &mut Graph, p: &Binding, blk: &BlockPlan, x: NodeId, batch: usize, dim: usize) -> Result<NodeId> {
        let l = &blk.layout;
        let (n, a, nw, h) = (l.grid * l.grid, l.area(), l.n_windows(), blk.heads);
        let d = dim / h;
        let flat = g.reshape(x, &[batch * n, dim])?;
        let xw = g.gather(flat, &geometry::batched(&l.order, batch))?;
        let xw = g.reshape(xw, &[batch * nw, a, dim])?;
        let heads = |g: &mut Graph, part: &str| -> Result<NodeId> {
            let y = Self::dense(g, p, &format!("{}.attn.{part}", blk.prefix), xw)?;
            let y = g.reshape(y, &[batch * nw, a, h, d])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[batch * nw * h, a, d])?)
        };
        let q = heads(g, "q")?;
        let k = heads(g, "k")?;
        let v = heads(g, "v")?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let bias = g.gather(p.id(&format!("{}.attn.rel_bias", blk.prefix))?, &self.rel_index[l.window - 1])?;
        let bias = g.permute(bias, &[1, 0])?;
        let bias = g.reshape(bias, &[h, a, a])?;
        let scores = g.reshape(scores, &[batch * nw, h, a, a])?;
        let mut scores = g.add(scores, bias)?;
        if let Some(mask) = &blk.mask {
            let m = g.input(mask.clone());
            let s5 = g.reshape(scores, &[batch, nw, h, a, a])?;
            scores = g.add(s5, m)?;
        }
        let attn = g.softmax(scores)?;
        let attn = g.reshape(attn, &[batch * nw * h, a, a])?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[batch * nw, h, a, d])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[batch * nw * a, dim])?;
        let out = Self::dense(g, p, &format!("{}.attn.o", blk.prefix), out)?;
        let out = g.gather(out, &geometry::batched(&l.inverse, batch))?;
        Ok(g.reshape(out, &[batch, n, dim])?)
    }

    fn block(&self, g: &mut Graph, p: &Binding, blk: &BlockPlan, x: NodeId, batch: usize, dim: usize) -> Result<NodeId> {
        let h = Self::affine_norm(g, p, &format!("{}.ln1", blk.prefix), x)?;
        let h = self.window_attention(g, p, blk, h, batch, dim)?;
        let x = g.add(x, h)?;
        let h = Self::affine_norm(g, p, &format!("{}.ln2", blk.prefix), x)?;
        let h = Self::dense(g, p, &format!("{}.mlp.fc1", blk.prefix), h)?;
        let h = g.gelu(h)?;
        let h = Self::dense(g, p, &format!("{}.mlp.fc2", blk.prefix), h)?;
        Ok(g.add(x, h)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn merge(&self, g: &mut Graph, p: &Binding, s: usize, x: NodeId, batch: usize, grid: usize, dim: usize) -> Result<NodeId> {
        let flat = g.reshape(x, &[batch * grid * grid, dim])?;
        let y = g.gather(flat, &geometry::batched(&geometry::merge_order(grid), batch))?;
        let quarter = grid * grid / 4;
        let y = g.reshape(y, &[batch * quarter, 4 * dim])?;
        let y = Self::affine_norm(g, p, &format!("enc.s{s}.merge.ln"), y)?;
        let y = Self::dense(g, p, &format!("enc.s{s}.merge"), y)?;
        Ok(g.reshape(y, &[batch, quarter, 2 * dim])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn expand(&self, g: &mut Graph, p: &Binding, s: usize, x: NodeId, batch: usize, coarse_grid: usize, coarse_dim: usize) -> Result<NodeId> {
        let y = Self::dense(g, p, &format!("dec.s{s}.expand"), x)?;
        let fine = coarse_dim / 2;
        let y = g.reshape(y, &[batch * coarse_grid * coarse_grid * 4, fine])?;
        let y = g.gather(y, &geometry::batched(&geometry::expand_order(coarse_grid), batch))?;
        let y = Self::affine_norm(g, p, &format!("dec.s{s}.expand.ln"), y)?;
        Ok(g.reshape(y, &[batch, 4 * coarse_grid * coarse_grid, fine])?)
    }

    /// Runs all encoder stages on `[B, R, E]` tokens; returns the final-stage
    /// tokens after the closing layer norm, `[B, N_L, C_L]`.
    pub fn encode(&self, g: &mut Graph, p: &Binding, tokens: NodeId) -> Result<NodeId> {
        let batch = g.shape(tokens)[0];
        let mut x = tokens;
        for (s, stage) in self.encoder.iter().enumerate() {
            for blk in &stage.blocks {
                x = self.block(g, p, blk, x, batch, stage.dim)?;
            }
            if s + 1 < self.encoder.len() {
                x = self.merge(g, p, s, x, batch, stage.grid, stage.dim)?;
            }
        }
        Self::affine_norm(g, p, "enc.norm", x)
    }

    /// Mirrors the encoder back to the patch grid and predicts pixels for
    /// every patch, `[B, R, V²C]`. No encoder activations are reused.
    pub fn decode(&self, g: &mut Graph, p: &Binding, encoded: NodeId) -> Result<NodeId> {
        let batch = g.shape(encoded)[0];
        let last = self.encoder.last().unwrap();
        let (mut grid, mut dim) = (last.grid, last.dim);
        let mut x = encoded;
        for stage in &self.decoder {
            let s = self.stage_index(stage);
            x = self.expand(g, p, s, x, batch, grid, dim)?;
            grid = stage.grid;
            dim = stage.dim;
            for blk in &stage.blocks {
                x = self.block(g, p, blk, x, batch, dim)?;
            }
        }
        let x = Self::affine_norm(g, p, "dec.norm", x)?;
        Self::dense(g, p, "dec.pred", x)
    }

    /// Mean over tokens, `[B, N, C] -> [B, C]`.
    pub fn pool(&self, g: &mut Graph, encoded: NodeId) -> Result<NodeId> {
        Ok(g.mean_axis(encoded, 1)?)
    }

    /// Linear, ReLU, linear, before normalization.
    pub fn project_raw(&self, g: &mut Graph, p: &Binding, features: NodeId) -> Result<NodeId> {
        let h = Self::dense(g, p, "proj.fc1", features)?;
        let h = g.relu(h)?;
        Self::dense(g, p, "proj.fc2", h)
    }

    /// [`Self::project_raw`] followed by L2 normalization of each row.
    pub fn project(&self, g: &mut Graph, p: &Binding, features: NodeId) -> Result<NodeId> {
        let z = self.project_raw(g, p, features)?;
        g.normalize(z).map_err(ModelError::from)
    }

    /// The online branch's extra fully-connected layer, re-normalized.
    pub fn predict(&self, g: &mut Graph, p: &Binding, z: NodeId) -> Result<NodeId> {
        let y = Self::dense(g, p, "pred.fc", z)?;
        g.normalize(y).map_err(ModelError::from)
    }

    /// Raw logits, `[B, Ω]`.
    pub fn classify(&self, g: &mut Graph, p: &Binding, features: NodeId) -> Result<NodeId> {
        let h = Self::dense(g, p, "cls.fc1", features)?;
        let h = g.relu(h)?;
        Self::dense(g, p, "cls.fc2", h)
    }

    /// Embed + encode + pool for a batch of images.
    pub fn features(&self, g: &mut Graph, p: &Binding, patches: NodeId, plans: &[&MaskPlan]) -> Result<NodeId> {
        let t = self.embed(g, p, patches, plans)?;
        let e = self.encode(g, p, t)?;
        self.pool(g, e)
    }
}
