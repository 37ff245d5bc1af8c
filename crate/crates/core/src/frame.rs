//! Frames, clips and flow fields plus PNG directory I/O.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// BT.601 luma weights (full range).
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    Y,
    /// Any other channel layout (rearranged or intermediate data).
    Raw,
}

impl ColorSpace {
    fn for_channels(c: usize) -> Self {
        match c {
            3 => ColorSpace::Rgb,
            1 => ColorSpace::Y,
            _ => ColorSpace::Raw,
        }
    }
}

/// An image of `height × width × channels` samples.
///
/// Storage is planar (one contiguous plane per channel) so frames convert
/// to graph tensors without copying layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    tensor: Tensor<f32>,
    color_space: ColorSpace,
}

impl Frame {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Frame {
            tensor: Tensor::zeros(channels, height, width),
            color_space: ColorSpace::for_channels(channels),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f32) -> Self {
        Frame {
            tensor: Tensor::full(channels, height, width, v),
            color_space: ColorSpace::for_channels(channels),
        }
    }

    /// Builds a frame from `f(y, x, c)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        Frame {
            tensor: Tensor::from_fn(channels, height, width, |c, y, x| f(y, x, c)),
            color_space: ColorSpace::for_channels(channels),
        }
    }

    pub fn from_tensor(tensor: Tensor<f32>) -> Self {
        let cs = ColorSpace::for_channels(tensor.channels());
        Frame {
            tensor,
            color_space: cs,
        }
    }

    pub fn from_real<T: Real>(t: &Tensor<T>) -> Self {
        Self::from_tensor(t.cast())
    }

    pub fn with_color_space(mut self, cs: ColorSpace) -> Self {
        self.color_space = cs;
        self
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }
    pub fn width(&self) -> usize {
        self.tensor.width()
    }
    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }
    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }
    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.tensor.at(c, y, x)
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.tensor.set(c, y, x, v)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        self.tensor.cast()
    }

    /// Planar samples, channel-major.
    pub fn as_slice(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Frame {
        Frame {
            tensor: self.tensor.map(f),
            color_space: self.color_space,
        }
    }

    pub fn clamp01(&self) -> Frame {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f32 {
        let s: f64 = self.as_slice().iter().map(|&v| v as f64).sum();
        (s / self.as_slice().len().max(1) as f64) as f32
    }

    pub fn is_finite(&self) -> bool {
        self.tensor.is_finite()
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        self.tensor.max_abs_diff(&other.tensor)
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> f64 {
        assert_eq!(self.dims(), other.dims(), "mean_abs_diff dims");
        let s: f64 = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        s / self.as_slice().len().max(1) as f64
    }

    /// Sub-window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Frame> {
        if y0 + height > self.height() || x0 + width > self.width() {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{y0}+{x0} exceeds frame {}x{}",
                self.height(),
                self.width()
            )));
        }
        let t = Tensor::from_fn(self.channels(), height, width, |c, y, x| self.tensor.at(c, y + y0, x + x0));
        Ok(Frame {
            tensor: t,
            color_space: self.color_space,
        })
    }

    pub fn flip_horizontal(&self) -> Frame {
        let w = self.width();
        let t = Tensor::from_fn(self.channels(), self.height(), w, |c, y, x| self.tensor.at(c, y, w - 1 - x));
        Frame {
            tensor: t,
            color_space: self.color_space,
        }
    }
}

/// Luma of an RGB frame, BT.601 full range (`Y = 0.299 R + 0.587 G + 0.114 B`).
pub fn rgb_to_y(frame: &Frame) -> Result<Frame> {
    if frame.channels() != 3 {
        return Err(Error::shape(format!("rgb_to_y expects 3 channels, got {}", frame.channels())));
    }
    let (h, w) = (frame.height(), frame.width());
    let n = h * w;
    let src = frame.as_slice();
    let data = (0..n)
        .map(|i| {
            let y = LUMA_WEIGHTS[0] * src[i] + LUMA_WEIGHTS[1] * src[n + i] + LUMA_WEIGHTS[2] * src[2 * n + i];
            y.clamp(0.0, 1.0)
        })
        .collect();
    Ok(Frame::from_tensor(Tensor::from_vec(1, h, w, data)).with_color_space(ColorSpace::Y))
}

/// Optional `clip.json` sidecar next to the frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    #[serde(default = "default_fps")]
    pub fps: u32,
    pub source_id: String,
}

fn default_fps() -> u32 {
    25
}

pub const CLIP_MANIFEST: &str = "clip.json";

/// An ordered run of same-shaped frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
    source_id: String,
    fps: u32,
}

impl Clip {
    /// Fails on an empty sequence or mixed frame shapes.
    pub fn new(frames: Vec<Frame>, source_id: impl Into<String>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::invalid("clip has no frames"));
        };
        let dims = first.dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::shape(format!(
                "frame {i} has dims {:?}, expected {:?}",
                f.dims(),
                dims
            )));
        }
        Ok(Clip {
            frames,
            source_id: source_id.into(),
            fps: default_fps(),
        })
    }

    pub fn with_fps(mut self, fps: u32) -> Self {
        self.fps = fps;
        self
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn source_id(&self) -> &str {
        &self.source_id
    }
    pub fn fps(&self) -> u32 {
        self.fps
    }
    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
    pub fn channels(&self) -> usize {
        self.frames[0].channels()
    }

    /// Applies `f` to every frame, keeping id and fps.
    pub fn try_map(&self, f: impl Fn(&Frame) -> Result<Frame>) -> Result<Clip> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Clip::new(frames, self.source_id.clone())?.with_fps(self.fps))
    }

    /// Frames `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Clip> {
        if start + len > self.len() || len == 0 {
            return Err(Error::invalid(format!(
                "slice {start}..{} of a {}-frame clip",
                start + len,
                self.len()
            )));
        }
        Ok(Clip::new(self.frames[start..start + len].to_vec(), self.source_id.clone())?.with_fps(self.fps))
    }

    pub fn reversed(&self) -> Clip {
        let mut frames = self.frames.clone();
        frames.reverse();
        Clip {
            frames,
            source_id: self.source_id.clone(),
            fps: self.fps,
        }
    }
}

/// Which grid a flow field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowScale {
    Lr,
    Hr,
}

/// Per-pixel `(dx, dy)` displacement, in pixels of its own grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    tensor: Tensor<f32>,
    scale: FlowScale,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize, scale: FlowScale) -> Self {
        FlowField {
            tensor: Tensor::zeros(2, height, width),
            scale,
        }
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32, scale: FlowScale) -> Self {
        FlowField {
            tensor: Tensor::from_fn(2, height, width, |c, _, _| if c == 0 { dx } else { dy }),
            scale,
        }
    }

    /// `tensor` must be `[2, h, w]`.
    pub fn from_tensor(tensor: Tensor<f32>, scale: FlowScale) -> Result<Self> {
        if tensor.channels() != 2 {
            return Err(Error::shape(format!("flow needs 2 channels, got {}", tensor.channels())));
        }
        Ok(FlowField { tensor, scale })
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }
    pub fn width(&self) -> usize {
        self.tensor.width()
    }
    pub fn scale(&self) -> FlowScale {
        self.scale
    }
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }
    /// `(dx, dy)` at a pixel.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        (self.tensor.at(0, y, x), self.tensor.at(1, y, x))
    }
    pub fn max_abs(&self) -> f32 {
        self.tensor.data().iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
    pub fn mean_abs(&self) -> f32 {
        let s: f64 = self.tensor.data().iter().map(|v| v.abs() as f64).sum();
        (s / self.tensor.len().max(1) as f64) as f32
    }
    pub fn is_finite(&self) -> bool {
        self.tensor.is_finite()
    }
}

/// Which temporal order a recurrent pass walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// What one recurrent direction carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub prev_lr: Frame,
    pub prev_hr_pred: Frame,
    pub direction: Direction,
}

impl RecurrentState {
    /// Cold start: the first frame stands in as its own predecessor and the
    /// previous prediction is black.
    pub fn cold_start(first_lr: &Frame, scale: usize, direction: Direction) -> Self {
        RecurrentState {
            prev_lr: first_lr.clone(),
            prev_hr_pred: Frame::zeros(first_lr.height() * scale, first_lr.width() * scale, first_lr.channels()),
            direction,
        }
    }
}

/// Bit depth for [`save_clip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn frame_index(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn clip_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Clip {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Numbered PNG files in `dir`, sorted by their numeric index.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(clip_err(dir, "not a directory"));
    }
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .filter_map(|p| frame_index(&p).map(|i| (i, p)))
        .collect();
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    Ok(Frame::from_fn(h, w, 3, |y, x, c| raw[(y * w + x) * 3 + c].clamp(0.0, 1.0)))
}

/// Loads every numbered PNG in `dir` as an RGB clip with values in `[0,1]`.
pub fn load_clip(dir: &Path) -> Result<Clip> {
    let files = list_frame_files(dir)?;
    if files.len() < 2 {
        return Err(clip_err(dir, format!("need at least 2 numbered frames, found {}", files.len())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let frame = load_frame(f)?;
        if let Some(first) = frames.first().map(Frame::dims) {
            if frame.dims() != first {
                return Err(clip_err(
                    dir,
                    format!("{} is {:?}, expected {:?}", f.display(), frame.dims(), first),
                ));
            }
        }
        frames.push(frame);
    }
    let manifest = dir.join(CLIP_MANIFEST);
    let (source_id, fps) = if manifest.is_file() {
        let m: ClipManifest = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
        (m.source_id, m.fps)
    } else {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("clip")
            .to_string();
        (id, default_fps())
    };
    Ok(Clip::new(frames, source_id)?.with_fps(fps))
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

pub fn save_frame(frame: &Frame, path: &Path, depth: BitDepth) -> Result<()> {
    let (h, w, c) = frame.dims();
    let img_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match (c, depth) {
        (3, BitDepth::Eight) => {
            let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|ch| quantize(frame.get(y as usize, x as usize, ch), 255.0) as u8))
            });
            img.save(path).map_err(img_err)
        }
        (3, BitDepth::Sixteen) => {
            let img = ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|ch| quantize(frame.get(y as usize, x as usize, ch), 65535.0) as u16))
            });
            img.save(path).map_err(img_err)
        }
        (1, BitDepth::Eight) => {
            let img = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
                Luma([quantize(frame.get(y as usize, x as usize, 0), 255.0) as u8])
            });
            img.save(path).map_err(img_err)
        }
        (1, BitDepth::Sixteen) => {
            let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
                Luma([quantize(frame.get(y as usize, x as usize, 0), 65535.0) as u16])
            });
            img.save(path).map_err(img_err)
        }
        _ => Err(Error::shape(format!("cannot save a {c}-channel frame as PNG"))),
    }
}

/// File name of frame `i` in a clip of `n` frames.
pub fn frame_file_name(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(3);
    format!("{i:0width$}.png")
}

/// Writes frames as zero-padded numbered PNGs plus a `clip.json` sidecar.
pub fn save_clip(clip: &Clip, dir: &Path, depth: BitDepth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| clip_err(dir, format!("cannot create: {e}")))?;
    for (i, f) in clip.frames().iter().enumerate() {
        save_frame(f, &dir.join(frame_file_name(i, clip.len())), depth)?;
    }
    let manifest = ClipManifest {
        fps: clip.fps(),
        source_id: clip.source_id().to_string(),
    };
    fs::write(dir.join(CLIP_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
