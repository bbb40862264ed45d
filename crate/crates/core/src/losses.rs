//! Self-supervised objective: SSIM + L1 photometric error, view synthesis,
//! per-pixel minimum reprojection with auto-masking, and edge-aware
//! smoothness.
//!
//! Every loss has a differentiable form over [`Var`] and a plain form over
//! [`Tensor`] that evaluates the same graph without recording gradients.
//! Images are `[n, c, h, w]`, disparity and error maps are `[n, 1, h, w]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    backproject, bilinear_sample, grid_sample, project, reprojection_grid, Intrinsics,
    RigidTransform,
};
use crate::tensor::{Shape, Tensor};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// SSIM weight in the photometric error.
    pub alpha: f64,
    /// Smoothness weight.
    pub lambda: f64,
    /// Adds tiny noise to the identity error before the mask comparison so
    /// exact ties resolve randomly instead of always masking.
    pub identity_tiebreak_noise: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            lambda: 1e-3,
            identity_tiebreak_noise: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub lambda: f64,
    pub per_scale_photometric: Vec<f64>,
    pub mask_density: Vec<f64>,
}

fn same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

/// Local SSIM map over 3×3 reflect-padded windows, clipped to `[-1, 1]`.
pub fn ssim_var<'g>(x: Var<'g>, y: Var<'g>) -> Var<'g> {
    let mu_x = x.avg_pool3_reflect();
    let mu_y = y.avg_pool3_reflect();
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(mu_y);
    let sigma_x = x.square().avg_pool3_reflect().sub(mu_xx);
    let sigma_y = y.square().avg_pool3_reflect().sub(mu_yy);
    let sigma_xy = x.mul(y).avg_pool3_reflect().sub(mu_xy);
    let num = mu_xy
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(sigma_xy.scale(2.0).add_scalar(SSIM_C2));
    let den = mu_xx
        .add(mu_yy)
        .add_scalar(SSIM_C1)
        .mul(sigma_x.add(sigma_y).add_scalar(SSIM_C2));
    num.div(den).clamp(-1.0, 1.0)
}

/// Channel-averaged `(α/2)(1 − SSIM) + (1 − α)|target − synthesized|`.
pub fn photometric_error_var<'g>(target: Var<'g>, synthesized: Var<'g>, alpha: f64) -> Var<'g> {
    let dssim = ssim_var(target, synthesized).neg().add_scalar(1.0).scale(alpha / 2.0);
    let l1 = target.sub(synthesized).abs().scale(1.0 - alpha);
    dssim.add(l1).mean_channels()
}

/// Warps `source` into the target view given target depth and the pose
/// mapping target-camera points into the source camera.
pub fn warp_var<'g>(source: Var<'g>, depth: Var<'g>, pose: Var<'g>, k: &Intrinsics) -> Var<'g> {
    grid_sample(source, reprojection_grid(depth, pose, k))
}

/// Edge-aware smoothness of mean-normalized disparity. The x and y terms are
/// averaged separately over their valid difference positions; a term with no
/// positions contributes zero.
pub fn smoothness_var<'g>(disparity: Var<'g>, image: Var<'g>) -> Var<'g> {
    let d = disparity.value();
    let [_, _, h, w] = d.dims();
    let normalized = disparity.div(disparity.mean_spatial());
    let graph = disparity.graph();
    let mut total = graph.constant(Tensor::scalar(0.0));
    if w > 1 {
        let edge = image.diff_x().abs().mean_channels().neg().exp();
        total = total.add(normalized.diff_x().abs().mul(edge).mean());
    }
    if h > 1 {
        let edge = image.diff_y().abs().mean_channels().neg().exp();
        total = total.add(normalized.diff_y().abs().mul(edge).mean());
    }
    total
}

fn eval_plain(f: impl for<'g> FnOnce(&'g Graph) -> Var<'g>) -> Tensor {
    let graph = Graph::new();
    let out = f(&graph);
    let value = out.value();
    (*value).clone()
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x.shape(), y.shape(), "ssim")?;
    Ok(eval_plain(|g| ssim_var(g.constant(x.clone()), g.constant(y.clone()))))
}

pub fn photometric_error(target: &Tensor, synthesized: &Tensor, alpha: f64) -> Result<Tensor> {
    same_shape(target.shape(), synthesized.shape(), "photometric_error")?;
    Ok(eval_plain(|g| {
        photometric_error_var(g.constant(target.clone()), g.constant(synthesized.clone()), alpha)
    }))
}

/// Reconstructs the target view from a single `[1, c, h, w]` source image.
pub fn synthesize_view(
    source: &Tensor,
    depth: &Tensor,
    t: &RigidTransform,
    k: &Intrinsics,
) -> Result<Tensor> {
    let points = backproject(depth, k)?;
    let grid = project(&points, k, t);
    bilinear_sample(source, &grid)
}

pub fn smoothness_loss(disparity: &Tensor, image: &Tensor) -> Result<f64> {
    let [n, c, h, w] = disparity.dims();
    if c != 1 {
        return Err(Error::invalid("smoothness_loss: disparity must have one channel"));
    }
    let [ni, _, hi, wi] = image.dims();
    if (n, h, w) != (ni, hi, wi) {
        return Err(Error::invalid(format!(
            "smoothness_loss: disparity {} and image {} differ in lattice",
            disparity.shape(),
            image.shape()
        )));
    }
    for b in 0..n {
        let item = disparity.item_at(b);
        if !(item.mean() > 0.0) {
            return Err(Error::invalid(format!(
                "smoothness_loss: mean disparity of item {b} is not positive"
            )));
        }
    }
    Ok(eval_plain(|g| smoothness_var(g.constant(disparity.clone()), g.constant(image.clone()))).item())
}

/// Per-pixel minimum over a non-empty list of `[n, 1, h, w]` maps.
pub fn min_over(maps: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::invalid("min_over: no maps"))?;
    let mut out = first.clone();
    for m in rest {
        same_shape(out.shape(), m.shape(), "min_over")?;
        out = out.zip_map(m, f64::min);
    }
    Ok(out)
}

/// Binary mask from precomputed error maps: 1 where the best warped error is
/// strictly below the best un-warped error.
pub fn automask_from_errors(warped: &[Tensor], identity: &[Tensor]) -> Result<Tensor> {
    let w = min_over(warped)?;
    let i = min_over(identity)?;
    same_shape(w.shape(), i.shape(), "automask")?;
    Ok(w.zip_map(&i, |a, b| if a < b { 1.0 } else { 0.0 }))
}

pub fn automask(
    target: &Tensor,
    sources: &[Tensor],
    synthesized: &[Tensor],
    alpha: f64,
) -> Result<Tensor> {
    if sources.is_empty() || sources.len() != synthesized.len() {
        return Err(Error::invalid(format!(
            "automask: need matching non-empty source lists, got {} and {}",
            sources.len(),
            synthesized.len()
        )));
    }
    let warped = synthesized
        .iter()
        .map(|s| photometric_error(target, s, alpha))
        .collect::<Result<Vec<_>>>()?;
    let identity = sources
        .iter()
        .map(|s| photometric_error(target, s, alpha))
        .collect::<Result<Vec<_>>>()?;
    automask_from_errors(&warped, &identity)
}

/// `ℓ_p` from error maps: `errors[s][j]` is the map of source `j` at scale
/// `s`, `masks[s]` the scale's mask. Masked pixels count as zero in a mean
/// over all pixels. Returns the average and the per-scale terms.
pub fn min_reprojection_loss(errors: &[Vec<Tensor>], masks: &[Tensor]) -> Result<(f64, Vec<f64>)> {
    if errors.is_empty() {
        return Err(Error::invalid("min_reprojection_loss: empty scale set"));
    }
    if errors.len() != masks.len() {
        return Err(Error::invalid("min_reprojection_loss: one mask per scale required"));
    }
    let mut per_scale = Vec::with_capacity(errors.len());
    for (maps, mask) in errors.iter().zip(masks) {
        let best = min_over(maps)?;
        same_shape(best.shape(), mask.shape(), "min_reprojection_loss")?;
        per_scale.push(best.zip_map(mask, |e, m| e * m).mean());
    }
    let mean = per_scale.iter().sum::<f64>() / per_scale.len() as f64;
    Ok((mean, per_scale))
}

pub fn total_loss(photometric: f64, smoothness: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        total: photometric + lambda * smoothness,
        photometric,
        smoothness,
        lambda,
        per_scale_photometric: Vec::new(),
        mask_density: Vec::new(),
    }
}

/// Inputs of the assembled multi-scale objective for one batch.
pub struct ObjectiveInputs<'a, 'g> {
    pub target: &'a Tensor,
    pub sources: &'a [Tensor],
    /// One `[n, 6, 1, 1]` pose per source.
    pub poses: &'a [Var<'g>],
    /// One input-resolution `[n, 1, h, w]` disparity per scale.
    pub disparities: &'a [Var<'g>],
    pub intrinsics: &'a Intrinsics,
    /// Optional additive noise on the identity error, one map per source.
    pub identity_noise: Option<&'a [Tensor]>,
    /// Replaces the computed masks with all ones.
    pub disable_automask: bool,
}

/// Full objective `ℓ_p + λ ℓ_s` as a differentiable scalar with its
/// breakdown.
pub fn objective<'g>(inputs: &ObjectiveInputs<'_, 'g>, cfg: &LossConfig) -> Result<(Var<'g>, LossBreakdown)> {
    let ObjectiveInputs {
        target,
        sources,
        poses,
        disparities,
        intrinsics,
        identity_noise,
        disable_automask,
    } = *inputs;
    if disparities.is_empty() {
        return Err(Error::invalid("objective: empty scale set"));
    }
    if sources.is_empty() || sources.len() != poses.len() {
        return Err(Error::invalid("objective: one pose per source required"));
    }
    let graph = disparities[0].graph();
    let [n, _, h, w] = target.dims();
    let map_shape = Shape::new(n, 1, h, w);
    for s in sources.iter() {
        same_shape(target.shape(), s.shape(), "objective source")?;
    }
    for d in disparities.iter() {
        same_shape(map_shape, d.shape(), "objective disparity")?;
    }

    let mut identity = sources
        .iter()
        .map(|s| photometric_error(target, s, cfg.alpha))
        .collect::<Result<Vec<_>>>()?;
    if let Some(noise) = identity_noise {
        for (e, z) in identity.iter_mut().zip(noise) {
            same_shape(e.shape(), z.shape(), "identity noise")?;
            e.add_assign(z);
        }
    }
    let identity_min = min_over(&identity)?;

    let target_var = graph.constant(target.clone());
    let source_vars: Vec<Var<'g>> = sources.iter().map(|s| graph.constant(s.clone())).collect();
    let mut photometric_terms = Vec::with_capacity(disparities.len());
    let mut smooth_terms = Vec::with_capacity(disparities.len());
    let mut per_scale = Vec::with_capacity(disparities.len());
    let mut density = Vec::with_capacity(disparities.len());
    for &disp in disparities {
        let depth = disp.recip();
        let mut best: Option<Var<'g>> = None;
        for (&src, &pose) in source_vars.iter().zip(poses) {
            let warped = warp_var(src, depth, pose, intrinsics);
            let pe = photometric_error_var(target_var, warped, cfg.alpha);
            best = Some(match best {
                None => pe,
                Some(b) => b.minimum(pe),
            });
        }
        let best = best.expect("at least one source");
        let mask = if disable_automask {
            Tensor::full(map_shape, 1.0)
        } else {
            best.value()
                .zip_map(&identity_min, |a, b| if a < b { 1.0 } else { 0.0 })
        };
        density.push(mask.mean());
        let term = best.mul(graph.constant(mask)).mean();
        per_scale.push(term.value().item());
        photometric_terms.push(term);
        smooth_terms.push(smoothness_var(disp, target_var));
    }
    let inv_scales = 1.0 / disparities.len() as f64;
    let sum_all = |terms: Vec<Var<'g>>| {
        terms
            .into_iter()
            .reduce(|a, b| a.add(b))
            .expect("non-empty")
            .scale(inv_scales)
    };
    let photometric = sum_all(photometric_terms);
    let smoothness = sum_all(smooth_terms);
    let total = photometric.add(smoothness.scale(cfg.lambda));
    let breakdown = LossBreakdown {
        total: total.value().item(),
        photometric: photometric.value().item(),
        smoothness: smoothness.value().item(),
        lambda: cfg.lambda,
        per_scale_photometric: per_scale,
        mask_density: density,
    };
    Ok((total, breakdown))
}
