//! Learnable components: the LR flow estimator, the detail-preserving flow
//! upscaler and the HR frame generator.
//!
//! Every layer is a 3×3 convolution or a 3×3 stride-2 transpose convolution.
//! Layers are described once by [`LayerSpec`] lists; initialization, binding
//! into a [`Graph`] and checkpoint layout all walk the same lists, so the
//! parameter order is fixed by the architecture and the config alone.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{FlowField, FlowScale, Frame};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Upscaling factor; the architecture is built for 4.
    pub scale: usize,
    /// Flow encoder widths followed by the bottleneck width. The number of
    /// stride-2 stages is `flow_channels.len() - 1`.
    pub flow_channels: Vec<usize>,
    /// Hidden width of the flow upscaler's residual branch.
    pub flow_upscale_channels: usize,
    pub gen_channels: usize,
    pub num_res_blocks: usize,
    /// Saturation bound of the LR flow, in LR pixels.
    pub max_displacement: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            flow_channels: vec![32, 64, 128, 256],
            flow_upscale_channels: 16,
            gen_channels: 64,
            num_res_blocks: 10,
            max_displacement: 10.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            scale: 4,
            flow_channels: vec![8, 8, 16, 16],
            flow_upscale_channels: 4,
            gen_channels: 8,
            num_res_blocks: 2,
            max_displacement: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 4 {
            return Err(Error::config("model.scale", "only 4 is supported (two 2x upscaling stages)"));
        }
        if self.flow_channels.len() < 2 || self.flow_channels.contains(&0) {
            return Err(Error::config("model.flow_channels", "need >= 2 positive widths"));
        }
        if self.num_res_blocks < 1 {
            return Err(Error::config("model.num_res_blocks", "must be >= 1"));
        }
        if self.gen_channels == 0 || self.flow_upscale_channels == 0 {
            return Err(Error::config("model.gen_channels", "widths must be positive"));
        }
        if !(self.max_displacement > 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::config("model.max_displacement", "must be > 0"));
        }
        Ok(())
    }

    /// LR dims are padded up to a multiple of this before flow estimation.
    pub fn flow_alignment(&self) -> usize {
        1 << (self.flow_channels.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, stride: usize },
    /// 2× upscaling transpose convolution.
    ConvTranspose { cin: usize, cout: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    He,
    Small,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    init: Init,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { cin, cout, stride },
            init: Init::He,
        }
    }

    fn up(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::ConvTranspose { cin, cout },
            init: Init::He,
        }
    }

    fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    fn weight_shape(&self) -> [usize; 3] {
        match self.kind {
            LayerKind::Conv { cin, cout, .. } => [cout, cin, 9],
            LayerKind::ConvTranspose { cin, cout } => [cin, cout, 9],
        }
    }

    fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cout, .. } | LayerKind::ConvTranspose { cout, .. } => cout,
        }
    }

    fn fan_in(&self) -> f64 {
        match self.kind {
            LayerKind::Conv { cin, .. } => (cin * 9) as f64,
            // each output pixel of a stride-2 3×3 transpose conv sees ~9/4 taps per input channel
            LayerKind::ConvTranspose { cin, .. } => (cin * 9) as f64 / 4.0,
        }
    }
}

pub fn flow_net_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let c = &cfg.flow_channels;
    let levels = c.len() - 1;
    let mut layers = Vec::new();
    let mut cin = 6;
    for (i, &w) in c[..levels].iter().enumerate() {
        layers.push(LayerSpec::conv(format!("flow.enc{i}.a"), cin, w, 1));
        layers.push(LayerSpec::conv(format!("flow.enc{i}.down"), w, w, 2));
        cin = w;
    }
    layers.push(LayerSpec::conv("flow.mid.a", cin, c[levels], 1));
    layers.push(LayerSpec::conv("flow.mid.b", c[levels], c[levels], 1));
    cin = c[levels];
    for j in (1..levels).rev() {
        layers.push(LayerSpec::conv(format!("flow.dec{j}.a"), cin, c[j], 1));
        layers.push(LayerSpec::conv(format!("flow.dec{j}.b"), c[j], c[j], 1));
        cin = c[j];
    }
    layers.push(LayerSpec::conv("flow.head.a", cin, c[0], 1));
    layers.push(LayerSpec::conv("flow.head.out", c[0], 2, 1).init(Init::Small));
    layers
}

pub fn flow_upscaler_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    vec![
        LayerSpec::up("upflow.a", 2, cfg.flow_upscale_channels),
        LayerSpec::up("upflow.b", cfg.flow_upscale_channels, 2).init(Init::Zero),
    ]
}

pub fn generator_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let g = cfg.gen_channels;
    let s2d = 3 * cfg.scale * cfg.scale;
    let mut layers = vec![LayerSpec::conv("gen.entry", s2d + 3, g, 1)];
    for k in 0..cfg.num_res_blocks {
        layers.push(LayerSpec::conv(format!("gen.res{k}.a"), g, g, 1));
        layers.push(LayerSpec::conv(format!("gen.res{k}.b"), g, g, 1).init(Init::Small));
    }
    layers.push(LayerSpec::up("gen.up.a", g, g));
    layers.push(LayerSpec::up("gen.up.b", g, g));
    layers.push(LayerSpec::conv("gen.out", g, 3, 1).init(Init::Small));
    layers
}

/// One named weight tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

/// Parameters of one component, weight then bias for each layer.
#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    layers: Vec<LayerSpec>,
    params: Vec<Param<T>>,
}

impl<T: Real> ParamGroup<T> {
    fn init(layers: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::with_capacity(layers.len() * 2);
        for l in &layers {
            let [a, b, k] = l.weight_shape();
            let bound = match l.init {
                Init::He => (6.0 / l.fan_in()).sqrt(),
                Init::Small => 0.1 * (6.0 / l.fan_in()).sqrt(),
                Init::Zero => 0.0,
            };
            let w = match l.init {
                Init::Zero => Tensor::zeros(a, b, k),
                _ => Tensor::from_fn(a, b, k, |_, _, _| {
                    let u: f64 = rng.random_range(-1.0..1.0);
                    T::lit(u * bound)
                }),
            };
            params.push(Param {
                name: format!("{}.weight", l.name),
                value: Arc::new(w),
            });
            params.push(Param {
                name: format!("{}.bias", l.name),
                value: Arc::new(Tensor::zeros(l.out_channels(), 1, 1)),
            });
        }
        ParamGroup { layers, params }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Layer> {
        self.params
            .chunks(2)
            .map(|wb| {
                let mut leaf = |p: &Param<T>| {
                    if trainable {
                        g.parameter(p.value.clone())
                    } else {
                        g.constant_shared(p.value.clone())
                    }
                };
                Layer {
                    w: leaf(&wb[0]),
                    b: leaf(&wb[1]),
                }
            })
            .collect()
    }
}

/// A layer's weight and bias inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct Layer {
    pub w: Var,
    pub b: Var,
}

/// All learnable weights.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    config: ModelConfig,
    pub flow_net: ParamGroup<T>,
    pub flow_upscaler: ParamGroup<T>,
    pub generator: ParamGroup<T>,
}

/// Model parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub flow_net: Vec<Layer>,
    pub flow_upscaler: Vec<Layer>,
    pub generator: Vec<Layer>,
}

impl ModelVars {
    /// Parameter vars in [`ModelParams::iter`] order.
    pub fn flat(&self) -> Vec<Var> {
        self.flow_net
            .iter()
            .chain(&self.flow_upscaler)
            .chain(&self.generator)
            .flat_map(|l| [l.w, l.b])
            .collect()
    }
}

impl<T: Real> ModelParams<T> {
    /// Seeded fan-in scaled uniform initialization; the upscaler's last
    /// layer starts at zero so the HR flow begins as pure bilinear upscaling.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            config: config.clone(),
            flow_net: ParamGroup::init(flow_net_layers(config), &mut rng),
            flow_upscaler: ParamGroup::init(flow_upscaler_layers(config), &mut rng),
            generator: ParamGroup::init(generator_layers(config), &mut rng),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn count_params(&self) -> usize {
        self.flow_net.count() + self.flow_upscaler.count() + self.generator.count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.flow_net
            .params
            .iter()
            .chain(&self.flow_upscaler.params)
            .chain(&self.generator.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.flow_net
            .params
            .iter_mut()
            .chain(self.flow_upscaler.params.iter_mut())
            .chain(self.generator.params.iter_mut())
    }

    pub fn num_tensors(&self) -> usize {
        self.iter().count()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        self.bind_with(g, true)
    }

    /// Binds parameters as constants (no gradient bookkeeping).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> ModelVars {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        ModelVars {
            flow_net: self.flow_net.bind(g, trainable),
            flow_upscaler: self.flow_upscaler.bind(g, trainable),
            generator: self.generator.bind(g, trainable),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cast_group = |grp: &ParamGroup<T>| ParamGroup {
            layers: grp.layers.clone(),
            params: grp
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        };
        ModelParams {
            config: self.config.clone(),
            flow_net: cast_group(&self.flow_net),
            flow_upscaler: cast_group(&self.flow_upscaler),
            generator: cast_group(&self.generator),
        }
    }

    /// All values in [`Self::iter`] order, flattened.
    pub fn to_flat(&self) -> Vec<T> {
        self.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Inverse of [`Self::to_flat`].
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.iter().map(|p| p.value.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!("expected {total} parameter values, got {}", flat.len())));
        }
        let mut off = 0;
        for p in self.iter_mut() {
            let n = p.value.len();
            Arc::make_mut(&mut p.value).data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian `f64` image of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.iter() {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|p| p.value.is_finite())
    }
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, l: Layer, stride: usize) -> Var {
    g.conv3x3(x, l.w, l.b, stride)
}

fn conv_relu<T: Real>(g: &mut Graph<T>, x: Var, l: Layer, stride: usize) -> Var {
    let y = g.conv3x3(x, l.w, l.b, stride);
    g.relu(y)
}

/// LR flow from `prev` to `cur` (both `[3,h,w]`), saturated to
/// `±max_displacement`.
pub fn lr_flow_var<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, vars: &ModelVars, prev: Var, cur: Var) -> Var {
    let [_, h, w] = g.value(cur).shape();
    let align = cfg.flow_alignment();
    let (ph, pw) = (h.div_ceil(align) * align, w.div_ceil(align) * align);
    let x = g.concat(&[prev, cur]);
    let mut x = g.pad_replicate(x, ph, pw);
    let levels = cfg.flow_channels.len() - 1;
    let mut layers = vars.flow_net.iter().copied();
    let mut next = || layers.next().expect("flow layer list matches config");
    for _ in 0..levels {
        x = conv_relu(g, x, next(), 1);
        x = conv_relu(g, x, next(), 2);
    }
    x = conv_relu(g, x, next(), 1);
    x = conv_relu(g, x, next(), 1);
    x = g.upsample_bilinear(x, 2);
    for _ in 1..levels {
        x = conv_relu(g, x, next(), 1);
        x = conv_relu(g, x, next(), 1);
        x = g.upsample_bilinear(x, 2);
    }
    x = conv_relu(g, x, next(), 1);
    x = conv(g, x, next(), 1);
    x = g.tanh(x);
    x = g.scale(x, T::lit(cfg.max_displacement));
    g.crop(x, 0, 0, h, w)
}

/// HR flow: `scale · bilinear_up(lr_flow) + residual(lr_flow)`.
pub fn upscale_flow_var<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, vars: &ModelVars, lr_flow: Var) -> Var {
    let up = g.upsample_bilinear(lr_flow, cfg.scale);
    let base = g.scale(up, T::from_usize(cfg.scale).unwrap());
    let [a, b] = [vars.flow_upscaler[0], vars.flow_upscaler[1]];
    let r = g.conv_transpose3x3(lr_flow, a.w, a.b);
    let r = g.relu(r);
    let r = g.conv_transpose3x3(r, b.w, b.b);
    g.add(base, r)
}

/// HR prediction from the enhanced warped HR frame and the current LR frame.
pub fn generate_hr_var<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    enhanced_hr: Var,
    lr: Var,
) -> Var {
    let packed = g.space_to_depth(enhanced_hr, cfg.scale);
    let x = g.concat(&[packed, lr]);
    let layers = &vars.generator;
    let mut x = conv_relu(g, x, layers[0], 1);
    for k in 0..cfg.num_res_blocks {
        let r = conv_relu(g, x, layers[1 + 2 * k], 1);
        let r = conv(g, r, layers[2 + 2 * k], 1);
        x = g.add(x, r);
    }
    let n = layers.len();
    for l in &layers[n - 3..n - 1] {
        x = g.conv_transpose3x3(x, l.w, l.b);
        x = g.relu(x);
    }
    conv(g, x, layers[n - 1], 1)
}

fn check_rgb(f: &Frame, what: &str) -> Result<()> {
    if f.channels() != 3 {
        return Err(Error::shape(format!("{what}: expected 3 channels, got {}", f.channels())));
    }
    Ok(())
}

/// Frame-level LR flow estimate.
pub fn estimate_lr_flow(params: &ModelParams<f32>, frame_a: &Frame, frame_b: &Frame) -> Result<FlowField> {
    check_rgb(frame_a, "estimate_lr_flow")?;
    check_rgb(frame_b, "estimate_lr_flow")?;
    if frame_a.dims() != frame_b.dims() {
        return Err(Error::shape(format!("flow inputs {:?} vs {:?}", frame_a.dims(), frame_b.dims())));
    }
    let mut g = Graph::inference();
    let vars = params.bind_frozen(&mut g);
    let a = g.constant(frame_a.tensor().clone());
    let b = g.constant(frame_b.tensor().clone());
    let f = lr_flow_var(&mut g, params.config(), &vars, a, b);
    FlowField::from_tensor(g.value(f).clone(), FlowScale::Lr)
}

/// Frame-level flow upscaling.
pub fn upscale_flow(params: &ModelParams<f32>, lr_flow: &FlowField) -> Result<FlowField> {
    let mut g = Graph::inference();
    let vars = params.bind_frozen(&mut g);
    let f = g.constant(lr_flow.tensor().clone());
    let up = upscale_flow_var(&mut g, params.config(), &vars, f);
    FlowField::from_tensor(g.value(up).clone(), FlowScale::Hr)
}

/// Frame-level HR generation.
pub fn generate_hr(params: &ModelParams<f32>, enhanced_warped_hr: &Frame, lr_frame: &Frame) -> Result<Frame> {
    check_rgb(enhanced_warped_hr, "generate_hr")?;
    check_rgb(lr_frame, "generate_hr")?;
    let s = params.config().scale;
    if enhanced_warped_hr.height() != lr_frame.height() * s || enhanced_warped_hr.width() != lr_frame.width() * s {
        return Err(Error::shape(format!(
            "generate_hr: HR {}x{} is not {s}x LR {}x{}",
            enhanced_warped_hr.height(),
            enhanced_warped_hr.width(),
            lr_frame.height(),
            lr_frame.width()
        )));
    }
    let mut g = Graph::inference();
    let vars = params.bind_frozen(&mut g);
    let hr = g.constant(enhanced_warped_hr.tensor().clone());
    let lr = g.constant(lr_frame.tensor().clone());
    let out = generate_hr_var(&mut g, params.config(), &vars, hr, lr);
    Ok(Frame::from_tensor(g.value(out).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(h, w, 3, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn shapes_of_each_component() {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        let (a, b) = (noise(32, 32, 1), noise(32, 32, 2));
        let flow = estimate_lr_flow(&p, &a, &b).unwrap();
        assert_eq!((flow.height(), flow.width()), (32, 32));
        assert!(flow.is_finite() && flow.max_abs() <= 10.0);
        let hr = upscale_flow(&p, &flow).unwrap();
        assert_eq!((hr.height(), hr.width(), hr.scale()), (128, 128, FlowScale::Hr));
        let out = generate_hr(&p, &noise(128, 128, 3), &a).unwrap();
        assert_eq!(out.dims(), (128, 128, 3));
        assert!(out.is_finite());
    }

    #[test]
    fn flow_handles_unaligned_dims() {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        let flow = estimate_lr_flow(&p, &noise(18, 13, 1), &noise(18, 13, 2)).unwrap();
        assert_eq!((flow.height(), flow.width()), (18, 13));
    }

    #[test]
    fn zeroed_residual_is_pure_bilinear() {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), 3).unwrap();
        // the residual's last layer is zero at init
        let hr = upscale_flow(&p, &FlowField::constant(8, 8, 1.0, 0.0, FlowScale::Lr)).unwrap();
        assert!((0..32).all(|y| (0..32).all(|x| hr.at(y, x) == (4.0, 0.0))));
        let z = upscale_flow(&p, &FlowField::zeros(8, 8, FlowScale::Lr)).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        assert!(estimate_lr_flow(&p, &noise(8, 8, 1), &noise(8, 16, 1)).is_err());
        assert!(generate_hr(&p, &noise(30, 32, 1), &noise(8, 8, 1)).is_err());
    }

    #[test]
    fn full_size_budget() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
        let n = p.count_params();
        assert!((2_100_000..=3_200_000).contains(&n), "{n}");
    }

    #[test]
    fn flat_round_trip_and_checksum() {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), 5).unwrap();
        let mut q = ModelParams::<f32>::init(&ModelConfig::tiny(), 6).unwrap();
        assert_ne!(p.checksum(), q.checksum());
        q.load_flat(&p.to_flat()).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert!(q.load_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.scale = 2;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.num_res_blocks = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.flow_channels = vec![8];
        assert!(c.validate().is_err());
    }
}
