//! Optimization loop: sample preparation with the compression-augmentation
//! schedule, Adam updates and the training driver.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{CompressionConfig, Ffmpeg};
use crate::degradation::{degrade_clip, DegradationConfig};
use crate::error::{Error, Result};
use crate::frame::Clip;
use crate::imageops::EnhanceConfig;
use crate::networks::{ModelConfig, ModelParams};
use crate::recurrence::{build_clip_graph, LossBundle, LossWeights};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// HR crop edge in pixels.
    pub crop: usize,
    pub batch: usize,
    pub lr_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    /// Fraction of `total_steps` after which compressed inputs may appear.
    pub aug_start_frac: f64,
    pub aug_prob: f64,
    /// Inclusive CRF range for augmentation.
    pub aug_crf_range: [u8; 2],
    pub clip_len: usize,
    pub seed: u64,
    /// Global-norm gradient clipping; `null` disables it.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub degradation: DegradationConfig,
    pub compression: CompressionConfig,
    pub loss: LossWeights,
    pub enhance: EnhanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop: 128,
            batch: 16,
            lr_rate: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 1000,
            aug_start_frac: 0.8,
            aug_prob: 0.5,
            aug_crf_range: [15, 25],
            clip_len: 7,
            seed: 0,
            grad_clip: Some(10.0),
            checkpoint_every: 0,
            model: ModelConfig::default(),
            degradation: DegradationConfig::default(),
            compression: CompressionConfig::default(),
            loss: LossWeights::default(),
            enhance: EnhanceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let scale = self.model.scale;
        if self.crop == 0 || !self.crop.is_multiple_of(scale) {
            return Err(Error::config("crop", format!("{} is not a positive multiple of {scale}", self.crop)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be >= 1"));
        }
        if !(self.lr_rate >= 0.0 && self.lr_rate.is_finite()) {
            return Err(Error::config("lr_rate", "must be finite and >= 0"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.aug_start_frac) {
            return Err(Error::config("aug_start_frac", format!("{} outside [0, 1]", self.aug_start_frac)));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::config("aug_prob", format!("{} outside [0, 1]", self.aug_prob)));
        }
        let [lo, hi] = self.aug_crf_range;
        if lo > hi || hi > 51 {
            return Err(Error::config("aug_crf_range", format!("[{lo}, {hi}] is not a range inside 0..=51")));
        }
        if self.clip_len < 2 {
            return Err(Error::config("clip_len", "must be >= 2"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", "must be > 0 or null"));
            }
        }
        if self.degradation.scale != scale {
            return Err(Error::config(
                "degradation.scale",
                format!("{} differs from model.scale {scale}", self.degradation.scale),
            ));
        }
        self.model.validate()?;
        self.degradation.validate()?;
        self.loss.validate()?;
        self.enhance.validate()?;
        self.compression.validate()?;
        Ok(())
    }

    /// First step at which augmentation may fire.
    pub fn aug_start_step(&self) -> u64 {
        (self.aug_start_frac * self.total_steps as f64).ceil() as u64
    }

    pub fn augmentation_active(&self, step: u64) -> bool {
        step >= self.aug_start_step()
    }

    /// Deterministic generator for the samples of `step`.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }
}

/// Augmentation decision for one sample: the CRF to compress with, if any.
pub fn draw_augmentation(cfg: &TrainConfig, step: u64, rng: &mut impl Rng) -> Option<u8> {
    if !cfg.augmentation_active(step) {
        return None;
    }
    if !rng.random_bool(cfg.aug_prob) {
        return None;
    }
    let [lo, hi] = cfg.aug_crf_range;
    Some(rng.random_range(lo..=hi))
}

/// Random choices behind one sample; realizing it needs no randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub clip: usize,
    pub t0: usize,
    pub y0: usize,
    pub x0: usize,
    pub crf: Option<u8>,
}

/// Draws a spatiotemporal crop of `source` plus the augmentation decision.
pub fn plan_sample(source: &Clip, clip_index: usize, cfg: &TrainConfig, step: u64, rng: &mut impl Rng) -> Result<SamplePlan> {
    if source.height() < cfg.crop || source.width() < cfg.crop {
        return Err(Error::invalid(format!(
            "clip `{}` is {}x{}, smaller than crop {}",
            source.source_id(),
            source.height(),
            source.width(),
            cfg.crop
        )));
    }
    if source.len() < cfg.clip_len {
        return Err(Error::invalid(format!(
            "clip `{}` has {} frames, fewer than clip_len {}",
            source.source_id(),
            source.len(),
            cfg.clip_len
        )));
    }
    let t0 = rng.random_range(0..=source.len() - cfg.clip_len);
    let y0 = rng.random_range(0..=source.height() - cfg.crop);
    let x0 = rng.random_range(0..=source.width() - cfg.crop);
    let crf = draw_augmentation(cfg, step, rng);
    Ok(SamplePlan {
        clip: clip_index,
        t0,
        y0,
        x0,
        crf,
    })
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub hr_clip: Clip,
    /// Model input; compressed when `compressed` is set.
    pub lr_clip: Clip,
    pub compressed: bool,
    pub crf_used: Option<u8>,
}

/// Cuts, degrades and (if planned) compresses one sample.
pub fn realize_sample(
    source: &Clip,
    plan: &SamplePlan,
    cfg: &TrainConfig,
    codec: &Ffmpeg,
    workdir: &Path,
) -> Result<TrainSample> {
    let frames = source.slice(plan.t0, cfg.clip_len)?;
    let hr = frames.try_map(|f| f.crop(plan.y0, plan.x0, cfg.crop, cfg.crop))?;
    let lr = degrade_clip(&hr, &cfg.degradation)?;
    let lr = match plan.crf {
        Some(crf) => {
            std::fs::create_dir_all(workdir)?;
            let dir = tempfile::Builder::new().prefix("sample-").tempdir_in(workdir)?;
            let ccfg = CompressionConfig {
                crf,
                ..cfg.compression.clone()
            };
            codec.compress_clip(&lr, &ccfg, dir.path())?
        }
        None => lr,
    };
    Ok(TrainSample {
        hr_clip: hr,
        lr_clip: lr,
        compressed: plan.crf.is_some(),
        crf_used: plan.crf,
    })
}

/// [`plan_sample`] followed by [`realize_sample`].
pub fn make_sample(
    source: &Clip,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut impl Rng,
    codec: &Ffmpeg,
    workdir: &Path,
) -> Result<TrainSample> {
    let plan = plan_sample(source, 0, cfg, step, rng)?;
    realize_sample(source, &plan, cfg, codec, workdir)
}

/// Plans a whole batch for `step` from the step's own random stream.
pub fn plan_batch(data: &[Clip], cfg: &TrainConfig, step: u64) -> Result<Vec<SamplePlan>> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = cfg.step_rng(step);
    (0..cfg.batch)
        .map(|_| {
            let i = rng.random_range(0..data.len());
            plan_sample(&data[i], i, cfg, step, &mut rng)
        })
        .collect()
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Optimizer hyperparameters for [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub lr_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl From<&TrainConfig> for OptimSettings {
    fn from(c: &TrainConfig) -> Self {
        OptimSettings {
            lr_rate: c.lr_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            grad_clip: c.grad_clip,
        }
    }
}

/// Applies one Adam update with precomputed gradients.
pub fn adam_update(params: &mut ModelParams<f32>, opt: &mut AdamState, grads: &[Tensor<f32>], s: &OptimSettings) {
    opt.t += 1;
    let t = opt.t as i32;
    let bc1 = 1.0 - s.beta1.powi(t);
    let bc2 = 1.0 - s.beta2.powi(t);
    let (b1, b2) = (s.beta1 as f32, s.beta2 as f32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut opt.m).zip(&mut opt.v) {
        let value = std::sync::Arc::make_mut(&mut p.value);
        for (((x, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi as f64 / bc1;
            let vhat = *vi as f64 / bc2;
            let delta = s.lr_rate * mhat / (vhat.sqrt() + s.eps);
            *x -= delta as f32;
        }
    }
}

/// Loss and parameter gradients for one clip, any precision.
pub fn clip_gradients<T: Real>(
    params: &ModelParams<T>,
    lr_input: &[Tensor<T>],
    lr_target: &[Tensor<T>],
    hr_target: &[Tensor<T>],
    w: &LossWeights,
    enhance: &EnhanceConfig,
) -> Result<(LossBundle, Vec<Tensor<T>>)> {
    let cg = build_clip_graph(params, lr_input, lr_target, hr_target, w, enhance)?;
    let bundle = cg.bundle(w);
    let mut grads = cg.graph.backward(cg.loss.total);
    let flat = cg
        .vars
        .flat()
        .into_iter()
        .zip(params.iter())
        .map(|(v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.channels(), p.value.height(), p.value.width()))
        })
        .collect();
    Ok((bundle, flat))
}

fn sample_tensors(s: &TrainSample) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let t = |c: &Clip| c.frames().iter().map(|f| f.tensor().clone()).collect();
    (t(&s.lr_clip), t(&s.hr_clip))
}

/// Both recurrent directions on every sample, batch-averaged loss, one Adam
/// update. Returns the loss measured before the update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    opt: &mut AdamState,
    batch: &[TrainSample],
    w: &LossWeights,
    enhance: &EnhanceConfig,
    settings: &OptimSettings,
    step: u64,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step: empty batch"));
    }
    let shape = (batch[0].lr_clip.len(), batch[0].lr_clip.height(), batch[0].lr_clip.width());
    if batch
        .iter()
        .any(|s| (s.lr_clip.len(), s.lr_clip.height(), s.lr_clip.width()) != shape)
    {
        return Err(Error::shape("train_step: batch samples differ in shape"));
    }
    let p: &ModelParams<f32> = params;
    let results: Vec<Result<(LossBundle, Vec<Tensor<f32>>)>> = batch
        .par_iter()
        .map(|s| {
            let (lr, hr) = sample_tensors(s);
            clip_gradients(p, &lr, &lr, &hr, w, enhance)
        })
        .collect();
    let mut total = LossBundle::default();
    let mut acc: Option<Vec<Tensor<f32>>> = None;
    for (s, r) in batch.iter().zip(results) {
        let (loss, grads) = r?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                sample: s.hr_clip.source_id().to_string(),
            });
        }
        total.hr_content += loss.hr_content;
        total.lr_warp += loss.lr_warp;
        match &mut acc {
            Some(a) => a.iter_mut().zip(&grads).for_each(|(x, g)| x.add_assign(g)),
            None => acc = Some(grads),
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.expect("nonempty batch");
    let inv = (1.0 / n) as f32;
    grads.iter_mut().for_each(|g| g.scale_assign(inv));
    if let Some(clip) = settings.grad_clip {
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                sample: "gradient".into(),
            });
        }
        if norm > clip {
            let k = (clip / norm) as f32;
            grads.iter_mut().for_each(|g| g.scale_assign(k));
        }
    }
    adam_update(params, opt, &grads, settings);
    Ok(w.bundle(total.hr_content / n, total.lr_warp / n))
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub hr_content: f64,
    pub lr_warp: f64,
    pub total: f64,
    pub compressed_fraction: f64,
    pub wall_time: f64,
}

/// Owns everything a training run mutates.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: AdamState,
    /// Steps completed.
    pub step: u64,
    data: Vec<Clip>,
    codec: Ffmpeg,
    workdir: PathBuf,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Vec<Clip>) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model, cfg.seed)?;
        let opt = AdamState::new(&params);
        Self::from_state(cfg, params, opt, 0, data)
    }

    /// Continues from saved state.
    pub fn from_state(cfg: TrainConfig, params: ModelParams<f32>, opt: AdamState, step: u64, data: Vec<Clip>) -> Result<Self> {
        cfg.validate()?;
        if params.config() != &cfg.model {
            return Err(Error::config("model", "checkpoint model config differs from the training config"));
        }
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        Ok(Trainer {
            cfg,
            params,
            opt,
            step,
            data,
            codec: Ffmpeg::from_env(),
            workdir: std::env::temp_dir().join("vsr-train"),
            started: Instant::now(),
        })
    }

    pub fn with_codec(mut self, codec: Ffmpeg) -> Self {
        self.codec = codec;
        self
    }

    /// Directory for codec scratch files (one private subdirectory per sample).
    pub fn with_workdir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.workdir = dir.into();
        self
    }

    pub fn data(&self) -> &[Clip] {
        &self.data
    }

    /// The batch for the current step.
    pub fn next_batch(&self) -> Result<Vec<TrainSample>> {
        let plans = plan_batch(&self.data, &self.cfg, self.step)?;
        plans
            .par_iter()
            .map(|p| realize_sample(&self.data[p.clip], p, &self.cfg, &self.codec, &self.workdir))
            .collect()
    }

    /// Runs one optimizer step.
    pub fn train_one(&mut self) -> Result<StepLog> {
        let batch = self.next_batch()?;
        let compressed = batch.iter().filter(|s| s.compressed).count() as f64 / batch.len() as f64;
        let settings = OptimSettings::from(&self.cfg);
        let loss = train_step(
            &mut self.params,
            &mut self.opt,
            &batch,
            &self.cfg.loss,
            &self.cfg.enhance,
            &settings,
            self.step,
        )?;
        let log = StepLog {
            step: self.step,
            hr_content: loss.hr_content,
            lr_warp: loss.lr_warp,
            total: loss.total,
            compressed_fraction: compressed,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(log)
    }

    /// Trains until `total_steps`, writing one JSON line per step to `log`
    /// and calling `on_checkpoint` at every checkpoint boundary.
    pub fn run(
        &mut self,
        mut log: impl Write,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut history = Vec::new();
        while self.step < self.cfg.total_steps {
            let entry = self.train_one()?;
            writeln!(log, "{}", serde_json::to_string(&entry)?)?;
            history.push(entry);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) && self.step < self.cfg.total_steps {
                on_checkpoint(self)?;
            }
        }
        log.flush()?;
        on_checkpoint(self)?;
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{render_clip, ClipSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            crop: 32,
            batch: 2,
            lr_rate: 1e-3,
            total_steps: 10,
            clip_len: 2,
            model: ModelConfig::tiny(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.crop = 130;
        assert!(c.validate().is_err());
        c.crop = 128;
        c.aug_prob = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn no_augmentation_before_threshold() {
        let cfg = TrainConfig {
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.aug_start_step(), 80);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in 0..80 {
            for _ in 0..50 {
                assert_eq!(draw_augmentation(&cfg, step, &mut rng), None);
            }
        }
        assert!((80..100).any(|s| draw_augmentation(&cfg, s, &mut rng).is_some()));
    }

    #[test]
    fn plan_stream_is_reproducible() {
        let data = vec![render_clip(&ClipSpec::textured(40, 48, 4), 1, "a")];
        let cfg = small_cfg();
        for step in [0, 3, 9] {
            assert_eq!(plan_batch(&data, &cfg, step).unwrap(), plan_batch(&data, &cfg, step).unwrap());
        }
        assert_ne!(plan_batch(&data, &cfg, 1).unwrap(), plan_batch(&data, &cfg, 2).unwrap());
    }

    #[test]
    fn undersized_source_rejected() {
        let clip = render_clip(&ClipSpec::textured(16, 16, 3), 1, "s");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(plan_sample(&clip, 0, &small_cfg(), 0, &mut rng).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = vec![render_clip(&ClipSpec::textured(32, 32, 3), 2, "z")];
        let mut cfg = small_cfg();
        cfg.lr_rate = 0.0;
        let mut tr = Trainer::new(cfg, data).unwrap();
        let before = tr.params.to_flat();
        let log = tr.train_one().unwrap();
        assert!(log.total > 0.0);
        assert_eq!(tr.params.to_flat(), before);
    }

    #[test]
    fn zero_gradient_adam_is_noop() {
        let mut p = ModelParams::<f32>::init(&ModelConfig::tiny(), 0).unwrap();
        let mut opt = AdamState::new(&p);
        let grads: Vec<Tensor<f32>> = p
            .iter()
            .map(|q| Tensor::zeros(q.value.channels(), q.value.height(), q.value.width()))
            .collect();
        let before = p.checksum();
        adam_update(&mut p, &mut opt, &grads, &OptimSettings::from(&TrainConfig::default()));
        assert_eq!(p.checksum(), before);
    }
}
