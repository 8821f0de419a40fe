//! Patch partitioning, random masking, and image augmentation.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microtensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    IndivisibleImage { height: usize, width: usize, patch: usize },
    #[error("expected {expected} patches, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("crop size {crop} exceeds image side {side}")]
    CropTooLarge { crop: usize, side: usize },
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("masking ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("expected an image of shape {expected:?}, got {got:?}")]
    BadImage { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PatchError>;

/// Geometry of an `H×W×C` image cut into `V×V` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || channels == 0 {
            return Err(PatchError::IndivisibleImage { height, width, patch });
        }
        Ok(Self { height, width, channels, patch })
    }

    pub fn square(side: usize, channels: usize, patch: usize) -> Result<Self> {
        Self::new(side, side, channels, patch)
    }

    /// R = HW / V².
    pub fn count(&self) -> usize {
        self.height * self.width / (self.patch * self.patch)
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// Pixels per patch, V²·C.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// `map[patch_row * patch_len + k]` is the flat image offset of that pixel.
    fn pixel_map(&self) -> Vec<usize> {
        let (v, c) = (self.patch, self.channels);
        let mut map = Vec::with_capacity(self.height * self.width * c);
        for pr in 0..self.rows() {
            for pc in 0..self.cols() {
                for y in 0..v {
                    for x in 0..v {
                        let base = ((pr * v + y) * self.width + pc * v + x) * c;
                        map.extend(base..base + c);
                    }
                }
            }
        }
        map
    }
}

fn check_image(image: &Tensor, grid: &PatchGrid) -> Result<()> {
    if image.shape() != grid.image_shape() {
        return Err(PatchError::BadImage { expected: grid.image_shape().to_vec(), got: image.shape().to_vec() });
    }
    Ok(())
}

/// Cuts an `H×W×C` image into `R × V²C` patches in row-major patch order.
/// Pixels inside a patch are ordered row, column, channel.
pub fn partition_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[h, w, c] = image.shape() else {
        return Err(PatchError::BadImage { expected: vec![0, 0, 0], got: image.shape().to_vec() });
    };
    let grid = PatchGrid::new(h, w, c, patch)?;
    let data: Vec<f64> = grid.pixel_map().iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::new(vec![grid.count(), grid.patch_len()], data)?)
}

/// Inverse of [`partition_patches`].
pub fn reassemble(patches: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let rows = patches.shape()[0];
    if rows != grid.count() || patches.numel() != grid.count() * grid.patch_len() {
        return Err(PatchError::CountMismatch { expected: grid.count(), got: rows });
    }
    let mut data = vec![0.0; patches.numel()];
    for (src, &dst) in grid.pixel_map().iter().enumerate() {
        data[dst] = patches.data()[src];
    }
    Ok(Tensor::new(grid.image_shape().to_vec(), data)?)
}

/// Stacks the patches of several images into one `(B·R) × V²C` tensor.
pub fn partition_batch(images: &[&Tensor], grid: &PatchGrid) -> Result<Tensor> {
    let map = grid.pixel_map();
    let mut data = Vec::with_capacity(images.len() * map.len());
    for img in images {
        check_image(img, grid)?;
        data.extend(map.iter().map(|&i| img.data()[i]));
    }
    Ok(Tensor::new(vec![images.len() * grid.count(), grid.patch_len()], data)?)
}

/// Unmasked/masked split of an image's patch indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Sorted unmasked patch indices (ζ).
    pub visible: Vec<usize>,
    /// Sorted masked patch indices (ϑ).
    pub masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from any listing of the masked set; order and
    /// duplicates in `masked` are irrelevant.
    pub fn from_masked(patch_count: usize, ratio: f64, masked: &[usize]) -> Self {
        let mut flags = vec![false; patch_count];
        for &j in masked {
            flags[j] = true;
        }
        let masked = (0..patch_count).filter(|&j| flags[j]).collect();
        let visible = (0..patch_count).filter(|&j| !flags[j]).collect();
        Self { ratio, visible, masked }
    }

    pub fn patch_count(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Per-patch flags, `true` where masked.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.patch_count()];
        for &j in &self.masked {
            flags[j] = true;
        }
        flags
    }

    /// Set when the plan leaves nothing visible to the encoder.
    pub fn warning(&self) -> Option<&'static str> {
        (self.visible.is_empty() && !self.masked.is_empty()).then_some("every patch is masked; the encoder sees only mask tokens")
    }
}

/// Number of masked patches for ratio ψ over R patches: ⌊ψR⌋.
pub fn masked_count(patch_count: usize, ratio: f64) -> usize {
    // The epsilon keeps e.g. 0.6 * 10 from landing just below 6.
    ((ratio * patch_count as f64) + 1e-9).floor() as usize
}

/// Uniformly random ⌊ψR⌋-subset of the patches.
pub fn sample_mask<R: Rng + ?Sized>(patch_count: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PatchError::BadRatio(ratio));
    }
    let k = masked_count(patch_count, ratio).min(patch_count);
    let picked = index::sample(rng, patch_count, k).into_vec();
    Ok(MaskPlan::from_masked(patch_count, ratio, &picked))
}

/// Masking stratified over `window × window` blocks of a square patch grid:
/// every window gets ⌊k/nW⌋ masked patches and the remainder goes to
/// randomly chosen windows, so the total is still ⌊ψR⌋.
pub fn sample_mask_windowed<R: Rng + ?Sized>(grid_side: usize, window: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PatchError::BadRatio(ratio));
    }
    let window = window.min(grid_side);
    if window == 0 || !grid_side.is_multiple_of(window) {
        return Err(PatchError::IndivisibleImage { height: grid_side, width: grid_side, patch: window });
    }
    let r = grid_side * grid_side;
    let per_side = grid_side / window;
    let n_windows = per_side * per_side;
    let k = masked_count(r, ratio).min(r);
    let mut quota = vec![k / n_windows; n_windows];
    for w in index::sample(rng, n_windows, k % n_windows) {
        quota[w] += 1;
    }
    let mut masked = Vec::with_capacity(k);
    for (w, &q) in quota.iter().enumerate() {
        let (wr, wc) = (w / per_side, w % per_side);
        for cell in index::sample(rng, window * window, q) {
            let (y, x) = (cell / window, cell % window);
            masked.push((wr * window + y) * grid_side + wc * window + x);
        }
    }
    Ok(MaskPlan::from_masked(r, ratio, &masked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub phase: Phase,
    pub flip_prob: f64,
    /// Output side; must not exceed the input side.
    pub crop_size: usize,
    /// Area fraction of the source region, sampled uniformly.
    pub scale: [f64; 2],
    /// Color jitter strength (pre-training only).
    pub jitter: f64,
    /// Maximum absolute rotation in degrees (fine-tuning only).
    pub rotation_deg: f64,
    #[serde(default)]
    pub resample: Resample,
}

impl AugmentSpec {
    pub fn identity(phase: Phase, side: usize) -> Self {
        Self { phase, flip_prob: 0.0, crop_size: side, scale: [1.0, 1.0], jitter: 0.0, rotation_deg: 0.0, resample: Resample::Nearest }
    }

    /// Pre-training recipe for `side`-pixel images.
    pub fn pretrain_default(side: usize) -> Self {
        Self { phase: Phase::Pretrain, flip_prob: 0.5, crop_size: side, scale: [0.2, 1.0], jitter: 0.2, rotation_deg: 0.0, resample: Resample::Nearest }
    }

    /// Fine-tuning recipe for `side`-pixel images.
    pub fn finetune_default(side: usize) -> Self {
        Self { phase: Phase::Finetune, flip_prob: 0.5, crop_size: side, scale: [0.8, 1.2], jitter: 0.0, rotation_deg: 10.0, resample: Resample::Nearest }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(PatchError::InvalidSpec(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(PatchError::InvalidSpec(format!("scale range [{lo}, {hi}]")));
        }
        if self.crop_size == 0 {
            return Err(PatchError::InvalidSpec("crop_size must be positive".into()));
        }
        if self.jitter < 0.0 || self.rotation_deg < 0.0 {
            return Err(PatchError::InvalidSpec("jitter and rotation must be non-negative".into()));
        }
        if self.phase == Phase::Finetune && self.jitter > 0.0 {
            return Err(PatchError::InvalidSpec("color jitter applies to the pretrain phase only".into()));
        }
        if self.phase == Phase::Pretrain && self.rotation_deg > 0.0 {
            return Err(PatchError::InvalidSpec("rotation applies to the finetune phase only".into()));
        }
        Ok(())
    }
}

fn dims3(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(PatchError::BadImage { expected: vec![0, 0, 0], got: image.shape().to_vec() }),
    }
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(image)?;
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let o = (y * w + x) * c;
            data.extend_from_slice(&src[o..o + c]);
        }
    }
    Ok(Tensor::new(vec![h, w, c], data)?)
}

fn sample_at(image: &Tensor, y: f64, x: f64, mode: Resample, out: &mut Vec<f64>) {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let clampi = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    match mode {
        Resample::Nearest => {
            let yi = clampi(y.round(), h) as usize;
            let xi = clampi(x.round(), w) as usize;
            let o = (yi * w + xi) * c;
            out.extend_from_slice(&src[o..o + c]);
        }
        Resample::Bilinear => {
            let (y, x) = (clampi(y, h), clampi(x, w));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
}

/// Resamples the square region with top-left `(y0, x0)` and side `region`
/// (in source pixels) onto an `out × out` grid. Out-of-image samples
/// replicate the border.
pub fn crop_resize(image: &Tensor, y0: f64, x0: f64, region_h: f64, region_w: f64, out: usize, mode: Resample) -> Result<Tensor> {
    let (_, _, c) = dims3(image)?;
    let mut data = Vec::with_capacity(out * out * c);
    let (sy, sx) = (region_h / out as f64, region_w / out as f64);
    for i in 0..out {
        for j in 0..out {
            let y = y0 + (i as f64 + 0.5) * sy - 0.5;
            let x = x0 + (j as f64 + 0.5) * sx - 0.5;
            sample_at(image, y, x, mode, &mut data);
        }
    }
    Ok(Tensor::new(vec![out, out, c], data)?)
}

/// Rotates about the image centre by `degrees` (counter-clockwise).
pub fn rotate(image: &Tensor, degrees: f64, mode: Resample) -> Result<Tensor> {
    let (h, w, c) = dims3(image)?;
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            // Inverse mapping: source = R(-θ)·(p - c) + c.
            let sy = co * dy - s * dx + cy;
            let sx = s * dy + co * dx + cx;
            sample_at(image, sy, sx, mode, &mut data);
        }
    }
    Ok(Tensor::new(vec![h, w, c], data)?)
}

/// Per-channel affine `gain·x + bias`, gain in [1-s, 1+s], bias in [-s, s].
pub fn color_jitter<R: Rng + ?Sized>(image: &Tensor, strength: f64, rng: &mut R) -> Result<Tensor> {
    let (_, _, c) = dims3(image)?;
    let params: Vec<(f64, f64)> = (0..c)
        .map(|_| {
            if strength == 0.0 {
                (1.0, 0.0)
            } else {
                (rng.random_range(1.0 - strength..=1.0 + strength), rng.random_range(-strength..=strength))
            }
        })
        .collect();
    let mut out = image.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let (g, b) = params[k % c];
        *v = g * *v + b;
    }
    Ok(out)
}

fn value_range(image: &Tensor) -> (f64, f64) {
    image.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Random flip, random-scale crop, then jitter (pre-train) or rotation
/// (fine-tune). Output values are clamped to the input's value range.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let (h, w, _) = dims3(image)?;
    let side = h.min(w);
    if spec.crop_size > side {
        return Err(PatchError::CropTooLarge { crop: spec.crop_size, side });
    }
    let (lo, hi) = value_range(image);

    let mut x = if rng.random::<f64>() < spec.flip_prob { flip_horizontal(image)? } else { image.clone() };

    let [s_lo, s_hi] = spec.scale;
    let s = if s_lo == s_hi { s_lo } else { rng.random_range(s_lo..=s_hi) };
    let (rh, rw) = (s.sqrt() * h as f64, s.sqrt() * w as f64);
    let pick = |rng: &mut R, extent: f64, region: f64| {
        let slack = extent - region;
        if slack == 0.0 {
            0.0
        } else if slack > 0.0 {
            rng.random_range(0.0..=slack)
        } else {
            rng.random_range(slack..=0.0)
        }
    };
    let y0 = pick(rng, h as f64, rh);
    let x0 = pick(rng, w as f64, rw);
    x = crop_resize(&x, y0, x0, rh, rw, spec.crop_size, spec.resample)?;

    match spec.phase {
        Phase::Pretrain => {
            if spec.jitter > 0.0 {
                x = color_jitter(&x, spec.jitter, rng)?;
            }
        }
        Phase::Finetune => {
            if spec.rotation_deg > 0.0 {
                let angle = rng.random_range(-spec.rotation_deg..=spec.rotation_deg);
                x = rotate(&x, angle, spec.resample)?;
            }
        }
    }
    for v in x.data_mut() {
        *v = v.clamp(lo, hi);
    }
    Ok(x)
}
