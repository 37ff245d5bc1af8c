//! Procedural HR clips for tests, examples and desk-scale experiments.
//!
//! Scenes are continuous functions of the plane (oriented sinusoids plus
//! soft-edged discs), so moving clips are sampled analytically at shifted
//! coordinates instead of being resampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frame::{Clip, Frame};

#[derive(Debug, Clone)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Debug, Clone)]
struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

/// A random scene.
#[derive(Debug, Clone)]
pub struct Scene {
    base: [f64; 3],
    waves: Vec<Wave>,
    discs: Vec<Disc>,
}

/// Controls scene statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStyle {
    pub waves: usize,
    /// Range of sinusoid periods in pixels.
    pub period: (f64, f64),
    pub discs: usize,
    /// Edge softness of discs in pixels.
    pub softness: f64,
}

impl SceneStyle {
    /// Detailed content with edges; the regime where compression hurts.
    pub fn textured() -> Self {
        SceneStyle {
            waves: 6,
            period: (8.0, 40.0),
            discs: 5,
            softness: 1.0,
        }
    }

    /// Low-frequency content that survives the blur almost untouched.
    pub fn smooth() -> Self {
        SceneStyle {
            waves: 3,
            period: (48.0, 128.0),
            discs: 0,
            softness: 8.0,
        }
    }
}

impl Scene {
    pub fn random(style: SceneStyle, extent: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = std::array::from_fn(|_| rng.random_range(0.35..0.65));
        let waves = (0..style.waves)
            .map(|_| {
                let period = rng.random_range(style.period.0..=style.period.1);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                let a: f64 = rng.random_range(0.04..0.12);
                Wave {
                    kx: k * theta.cos(),
                    ky: k * theta.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: std::array::from_fn(|_| a * rng.random_range(0.5..1.0)),
                }
            })
            .collect();
        let discs = (0..style.discs)
            .map(|_| Disc {
                cx: rng.random_range(0.0..extent),
                cy: rng.random_range(0.0..extent),
                r: rng.random_range(extent * 0.05..extent * 0.2),
                color: std::array::from_fn(|_| rng.random_range(-0.25..0.25)),
            })
            .collect();
        Scene { base, waves, discs }
    }

    /// Colour at a continuous position, clamped to `[0,1]`.
    pub fn sample(&self, x: f64, y: f64, softness: f64) -> [f32; 3] {
        let mut v = self.base;
        for w in &self.waves {
            let s = (w.kx * x + w.ky * y + w.phase).sin();
            for c in 0..3 {
                v[c] += w.amp[c] * s;
            }
        }
        for d in &self.discs {
            let dist = ((x - d.cx).powi(2) + (y - d.cy).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + ((dist - d.r) / softness.max(1e-3)).exp());
            for c in 0..3 {
                v[c] += d.color[c] * inside;
            }
        }
        v.map(|c| c.clamp(0.0, 1.0) as f32)
    }
}

/// Parameters of a generated clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Global motion per frame in pixels `(dx, dy)`.
    pub velocity: (f64, f64),
    pub style: SceneStyle,
}

impl ClipSpec {
    pub fn textured(height: usize, width: usize, frames: usize) -> Self {
        ClipSpec {
            height,
            width,
            frames,
            velocity: (1.3, 0.7),
            style: SceneStyle::textured(),
        }
    }

    pub fn smooth_static(height: usize, width: usize, frames: usize) -> Self {
        ClipSpec {
            height,
            width,
            frames,
            velocity: (0.0, 0.0),
            style: SceneStyle::smooth(),
        }
    }
}

/// Renders a clip of `spec` from the scene drawn with `seed`.
pub fn render_clip(spec: &ClipSpec, seed: u64, source_id: impl Into<String>) -> Clip {
    let extent = spec.height.max(spec.width) as f64;
    let scene = Scene::random(spec.style, extent, seed);
    let frames = (0..spec.frames)
        .map(|t| {
            let (ox, oy) = (spec.velocity.0 * t as f64, spec.velocity.1 * t as f64);
            let mut f = Frame::zeros(spec.height, spec.width, 3);
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let v = scene.sample(x as f64 - ox, y as f64 - oy, spec.style.softness);
                    for (c, &cv) in v.iter().enumerate() {
                        f.set(y, x, c, cv);
                    }
                }
            }
            f
        })
        .collect();
    Clip::new(frames, source_id).expect("generated frames share a shape")
}

/// `count` textured clips with varied motion, seeded from `seed`.
pub fn textured_corpus(count: usize, height: usize, width: usize, frames: usize, seed: u64) -> Vec<Clip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut spec = ClipSpec::textured(height, width, frames);
            spec.velocity = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            render_clip(&spec, rng.random(), format!("synthetic_{seed}_{i:02}"))
        })
        .collect()
}
