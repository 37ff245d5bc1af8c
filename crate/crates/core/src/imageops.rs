//! Image operators used inside the recurrent model: backward warping,
//! space-to-depth and Laplacian detail enhancement.
//!
//! Each operator exists twice: a frame-level function for direct use, and a
//! graph-level builder (`*_var`) that the model uses so gradients flow
//! through it. Both share the kernels in [`crate::graph`] and
//! [`crate::tensor`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FlowField, Frame};
use crate::graph::{self, Graph, Var};
use crate::tensor::{blur_separable, default_radius, gaussian_kernel_1d, Real};

/// Width of the enhancement blur.
pub const ENHANCE_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    /// Weight of the Laplacian residual.
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            alpha: 1.0,
            sigma: ENHANCE_SIGMA,
        }
    }
}

impl EnhanceConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        EnhanceConfig {
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("enhance.sigma", "must be > 0"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("enhance.alpha", "must be finite"));
        }
        Ok(())
    }

    /// Normalized blur kernel truncated at `ceil(4σ)`.
    pub fn kernel<T: Real>(&self) -> Vec<T> {
        gaussian_kernel_1d(self.sigma, default_radius(self.sigma))
            .into_iter()
            .map(T::lit)
            .collect()
    }
}

/// Resamples `frame` at `p + flow(p)` with bilinear interpolation; sample
/// coordinates are clamped to the border.
pub fn backward_warp(frame: &Frame, flow: &FlowField) -> Result<Frame> {
    if (frame.height(), frame.width()) != (flow.height(), flow.width()) {
        return Err(Error::shape(format!(
            "warp: frame {}x{} vs flow {}x{}",
            frame.height(),
            frame.width(),
            flow.height(),
            flow.width()
        )));
    }
    Ok(Frame::from_tensor(graph::warp_forward(frame.tensor(), flow.tensor())).with_color_space(frame.color_space()))
}

/// Moves each `block×block` spatial cell into channels. Output channel
/// `c·block² + dy·block + dx` holds input channel `c` at offset `(dy, dx)`
/// inside the cell.
pub fn space_to_depth(frame: &Frame, block: usize) -> Result<Frame> {
    if block == 0 || !frame.height().is_multiple_of(block) || !frame.width().is_multiple_of(block) {
        return Err(Error::shape(format!(
            "space_to_depth: {}x{} not divisible by block {block}",
            frame.height(),
            frame.width()
        )));
    }
    Ok(Frame::from_tensor(graph::space_to_depth_forward(frame.tensor(), block)))
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(frame: &Frame, block: usize) -> Result<Frame> {
    if block == 0 || !frame.channels().is_multiple_of(block * block) {
        return Err(Error::shape(format!(
            "depth_to_space: {} channels not divisible by {}",
            frame.channels(),
            block * block
        )));
    }
    Ok(Frame::from_tensor(graph::depth_to_space_forward(frame.tensor(), block)))
}

/// `frame + α·(frame − G_σ(frame))`. The result is not clipped.
pub fn laplacian_enhance(frame: &Frame, cfg: &EnhanceConfig) -> Result<Frame> {
    cfg.validate()?;
    let blurred = blur_separable(frame.tensor(), &cfg.kernel::<f32>());
    let a = cfg.alpha as f32;
    let data = frame
        .as_slice()
        .iter()
        .zip(blurred.data())
        .map(|(&x, &b)| x + a * (x - b))
        .collect();
    let (h, w, c) = frame.dims();
    Ok(Frame::from_tensor(crate::tensor::Tensor::from_vec(c, h, w, data)).with_color_space(frame.color_space()))
}

/// Graph form of [`laplacian_enhance`]. With `alpha == 0` the input is
/// returned untouched.
pub fn laplacian_enhance_var<T: Real>(g: &mut Graph<T>, x: Var, cfg: &EnhanceConfig) -> Var {
    if cfg.alpha == 0.0 {
        return x;
    }
    let blurred = g.blur(x, Arc::new(cfg.kernel::<T>()));
    g.lin_comb(&[(x, T::lit(1.0 + cfg.alpha)), (blurred, T::lit(-cfg.alpha))])
}
