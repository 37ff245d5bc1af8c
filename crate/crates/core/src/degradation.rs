//! HR → LR degradation: Gaussian blur followed by point sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};
use crate::tensor::{blur_separable, default_radius, gaussian_kernel_1d, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub blur_sigma: f64,
    pub scale: usize,
    /// Kernel truncation radius; `None` means `ceil(4σ)`.
    pub kernel_radius: Option<usize>,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            blur_sigma: 1.5,
            scale: 4,
            kernel_radius: None,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::config("degradation.blur_sigma", "must be > 0"));
        }
        if self.scale < 1 {
            return Err(Error::config("degradation.scale", "must be >= 1"));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.kernel_radius.unwrap_or_else(|| default_radius(self.blur_sigma))
    }

    /// The normalized 1-D kernel (the 2-D kernel is its outer product).
    pub fn kernel(&self) -> Vec<f64> {
        gaussian_kernel_1d(self.blur_sigma, self.radius())
    }
}

fn blur_with(frame: &Frame, kernel: &[f64]) -> Frame {
    let k: Vec<f32> = kernel.iter().map(|&v| v as f32).collect();
    Frame::from_tensor(blur_separable(frame.tensor(), &k)).with_color_space(frame.color_space())
}

/// Separable Gaussian blur, radius `ceil(4σ)`, reflect-padded borders.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Result<Frame> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("gaussian_blur: sigma must be > 0, got {sigma}")));
    }
    Ok(blur_with(frame, &gaussian_kernel_1d(sigma, default_radius(sigma))))
}

/// Keeps every `scale`-th pixel starting at the origin. Dimensions that
/// are not multiples of `scale` are cropped down to one first.
pub fn downsample(frame: &Frame, scale: usize) -> Result<Frame> {
    if scale < 1 {
        return Err(Error::invalid("downsample: scale must be >= 1"));
    }
    let (h, w, c) = frame.dims();
    let (oh, ow) = (h / scale, w / scale);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("downsample: {h}x{w} smaller than scale {scale}")));
    }
    let t = Tensor::from_fn(c, oh, ow, |ci, y, x| frame.get(y * scale, x * scale, ci));
    Ok(Frame::from_tensor(t).with_color_space(frame.color_space()))
}

/// Blur then point-sample every frame.
pub fn degrade_frame(frame: &Frame, cfg: &DegradationConfig) -> Result<Frame> {
    cfg.validate()?;
    downsample(&blur_with(frame, &cfg.kernel()), cfg.scale)
}

pub fn degrade_clip(hr: &Clip, cfg: &DegradationConfig) -> Result<Clip> {
    cfg.validate()?;
    let kernel = cfg.kernel();
    hr.try_map(|f| downsample(&blur_with(f, &kernel), cfg.scale))
}
