//! The bi-directional recurrent engine.
//!
//! One step estimates the LR flow between the previous and current LR
//! frames, upscales it, warps the previous LR frame and the previous HR
//! prediction, sharpens the warped HR frame and feeds it with the current LR
//! frame to the generator. Both temporal directions run the same weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Clip, Direction, FlowField, FlowScale, Frame, RecurrentState};
use crate::graph::{Graph, Var};
use crate::imageops::{laplacian_enhance_var, EnhanceConfig};
use crate::networks::{generate_hr_var, lr_flow_var, upscale_flow_var, ModelConfig, ModelParams, ModelVars};
use crate::tensor::{Real, Tensor};

/// Everything one step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub hr_pred: Frame,
    pub lr_warped: Frame,
    pub lr_flow: FlowField,
    pub hr_flow: FlowField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// HR content weight.
    pub beta: f64,
    /// LR warp weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 20.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::config("loss", "beta and gamma must be nonnegative"));
        }
        Ok(())
    }

    /// `beta·hr_content + gamma·lr_warp`.
    pub fn bundle(&self, hr_content: f64, lr_warp: f64) -> LossBundle {
        LossBundle {
            hr_content,
            lr_warp,
            total: self.beta * hr_content + self.gamma * lr_warp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub hr_content: f64,
    pub lr_warp: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        self.hr_content.is_finite() && self.lr_warp.is_finite() && self.total.is_finite()
    }
}

/// How inference combines the two directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    ForwardOnly,
    /// Mean of the forward and backward predictions.
    BidirectionalAverage,
}

/// Graph nodes of one step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub hr_pred: Var,
    pub lr_warped: Var,
    pub lr_flow: Var,
    pub hr_flow: Var,
}

/// One recurrent step inside a graph.
#[allow(clippy::too_many_arguments)]
pub fn step_var<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    prev_lr: Var,
    prev_hr: Var,
    lr_cur: Var,
    enhance: &EnhanceConfig,
) -> StepVars {
    let lr_flow = lr_flow_var(g, cfg, vars, prev_lr, lr_cur);
    let hr_flow = upscale_flow_var(g, cfg, vars, lr_flow);
    let lr_warped = g.warp(prev_lr, lr_flow);
    let hr_warped = g.warp(prev_hr, hr_flow);
    let hr_enhanced = laplacian_enhance_var(g, hr_warped, enhance);
    let hr_pred = generate_hr_var(g, cfg, vars, hr_enhanced, lr_cur);
    StepVars {
        hr_pred,
        lr_warped,
        lr_flow,
        hr_flow,
    }
}

/// Unrolls one direction over `lr` (clip time order); the result is in clip
/// time order as well.
pub fn unroll_var<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    lr: &[Var],
    direction: Direction,
    enhance: &EnhanceConfig,
) -> Vec<StepVars> {
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..lr.len()).collect(),
        Direction::Backward => (0..lr.len()).rev().collect(),
    };
    let [c, h, w] = g.value(lr[order[0]]).shape();
    let mut prev_lr = lr[order[0]];
    let mut prev_hr = g.constant(Tensor::zeros(c, h * cfg.scale, w * cfg.scale));
    let mut out: Vec<Option<StepVars>> = vec![None; lr.len()];
    for t in order {
        let s = step_var(g, cfg, vars, prev_lr, prev_hr, lr[t], enhance);
        prev_lr = lr[t];
        prev_hr = s.hr_pred;
        out[t] = Some(s);
    }
    out.into_iter().map(|s| s.expect("every index visited")).collect()
}

/// Loss nodes for one clip.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub hr_content: Var,
    pub lr_warp: Var,
    pub total: Var,
}

/// Builds the two-direction loss: the mean over `2N` per-frame MSE terms for
/// the HR predictions and for the warped LR frames, then the weighted total.
pub fn loss_var<T: Real>(
    g: &mut Graph<T>,
    fwd: &[StepVars],
    bwd: &[StepVars],
    hr_gt: &[Var],
    lr_gt: &[Var],
    w: &LossWeights,
) -> LossVars {
    let n = fwd.len();
    assert!(n > 0 && bwd.len() == n && hr_gt.len() == n && lr_gt.len() == n, "loss inputs must share length");
    let norm = T::lit(1.0 / (2 * n) as f64);
    let mut hr_terms = Vec::with_capacity(2 * n);
    let mut lr_terms = Vec::with_capacity(2 * n);
    for stream in [fwd, bwd] {
        for (t, s) in stream.iter().enumerate() {
            let hr = g.mse(s.hr_pred, hr_gt[t]);
            hr_terms.push((hr, norm));
            let lr = g.mse(s.lr_warped, lr_gt[t]);
            lr_terms.push((lr, norm));
        }
    }
    let hr_content = g.lin_comb(&hr_terms);
    let lr_warp = g.lin_comb(&lr_terms);
    let total = g.lin_comb(&[(hr_content, T::lit(w.beta)), (lr_warp, T::lit(w.gamma))]);
    LossVars {
        hr_content,
        lr_warp,
        total,
    }
}

/// A full two-direction graph for one training clip.
pub struct ClipGraph<T> {
    pub graph: Graph<T>,
    pub vars: ModelVars,
    pub forward: Vec<StepVars>,
    pub backward: Vec<StepVars>,
    pub loss: LossVars,
}

impl<T: Real> ClipGraph<T> {
    pub fn bundle(&self, w: &LossWeights) -> LossBundle {
        let v = |x: Var| self.graph.value(x).item().to_f64().unwrap_or(f64::NAN);
        w.bundle(v(self.loss.hr_content), v(self.loss.lr_warp))
    }
}

/// Builds the differentiable two-direction graph for one clip. `lr_input`
/// feeds the model; `lr_target` and `hr_target` are the loss targets.
pub fn build_clip_graph<T: Real>(
    params: &ModelParams<T>,
    lr_input: &[Tensor<T>],
    lr_target: &[Tensor<T>],
    hr_target: &[Tensor<T>],
    w: &LossWeights,
    enhance: &EnhanceConfig,
) -> Result<ClipGraph<T>> {
    let n = lr_input.len();
    if n == 0 || lr_target.len() != n || hr_target.len() != n {
        return Err(Error::shape(format!(
            "clip lengths differ: input {n}, lr target {}, hr target {}",
            lr_target.len(),
            hr_target.len()
        )));
    }
    let s = params.config().scale;
    let [_, h, wd] = lr_input[0].shape();
    for (i, t) in hr_target.iter().enumerate() {
        if t.shape() != [3, h * s, wd * s] || lr_input[i].shape() != [3, h, wd] || lr_target[i].shape() != [3, h, wd] {
            return Err(Error::shape(format!("frame {i}: inconsistent LR/HR shapes")));
        }
    }
    let mut graph = Graph::new();
    let vars = params.bind(&mut graph);
    let lr: Vec<Var> = lr_input.iter().map(|t| graph.constant(t.clone())).collect();
    let lr_gt: Vec<Var> = lr_target.iter().map(|t| graph.constant(t.clone())).collect();
    let hr_gt: Vec<Var> = hr_target.iter().map(|t| graph.constant(t.clone())).collect();
    let cfg = params.config().clone();
    let forward = unroll_var(&mut graph, &cfg, &vars, &lr, Direction::Forward, enhance);
    let backward = unroll_var(&mut graph, &cfg, &vars, &lr, Direction::Backward, enhance);
    let loss = loss_var(&mut graph, &forward, &backward, &hr_gt, &lr_gt, w);
    Ok(ClipGraph {
        graph,
        vars,
        forward,
        backward,
        loss,
    })
}

/// One inference step on frames.
pub fn step(
    params: &ModelParams<f32>,
    state: &RecurrentState,
    lr_cur: &Frame,
    enhance: &EnhanceConfig,
) -> Result<(RecurrentState, StepOutput)> {
    let s = params.config().scale;
    if state.prev_lr.dims() != lr_cur.dims() {
        return Err(Error::shape(format!(
            "step: previous LR {:?} vs current {:?}",
            state.prev_lr.dims(),
            lr_cur.dims()
        )));
    }
    if lr_cur.channels() != 3 {
        return Err(Error::shape("step: LR frames must be RGB"));
    }
    let (h, w, c) = lr_cur.dims();
    if state.prev_hr_pred.dims() != (h * s, w * s, c) {
        return Err(Error::shape(format!(
            "step: previous HR {:?} is not {s}x the LR frame",
            state.prev_hr_pred.dims()
        )));
    }
    enhance.validate()?;
    let mut g = Graph::<f32>::inference();
    let vars = params.bind_frozen(&mut g);
    let prev_lr = g.constant(state.prev_lr.tensor().clone());
    let prev_hr = g.constant(state.prev_hr_pred.tensor().clone());
    let cur = g.constant(lr_cur.tensor().clone());
    let sv = step_var(&mut g, params.config(), &vars, prev_lr, prev_hr, cur, enhance);
    let out = StepOutput {
        hr_pred: Frame::from_tensor(g.value(sv.hr_pred).clone()),
        lr_warped: Frame::from_tensor(g.value(sv.lr_warped).clone()),
        lr_flow: FlowField::from_tensor(g.value(sv.lr_flow).clone(), FlowScale::Lr)?,
        hr_flow: FlowField::from_tensor(g.value(sv.hr_flow).clone(), FlowScale::Hr)?,
    };
    let next = RecurrentState {
        prev_lr: lr_cur.clone(),
        prev_hr_pred: out.hr_pred.clone(),
        direction: state.direction,
    };
    Ok((next, out))
}

/// Runs one direction over a clip, returning outputs in clip time order.
pub fn run_direction(
    params: &ModelParams<f32>,
    clip: &Clip,
    direction: Direction,
    enhance: &EnhanceConfig,
) -> Result<Vec<StepOutput>> {
    if clip.is_empty() {
        return Err(Error::invalid("run_direction: empty clip"));
    }
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..clip.len()).collect(),
        Direction::Backward => (0..clip.len()).rev().collect(),
    };
    let frames = clip.frames();
    let mut state = RecurrentState::cold_start(&frames[order[0]], params.config().scale, direction);
    let mut out: Vec<Option<StepOutput>> = vec![None; clip.len()];
    for t in order {
        let (next, s) = step(params, &state, &frames[t], enhance)?;
        state = next;
        out[t] = Some(s);
    }
    Ok(out.into_iter().map(|s| s.expect("every index visited")).collect())
}

/// Frame-level loss assembly, evaluated in double precision.
pub fn compute_losses(
    fwd: &[StepOutput],
    bwd: &[StepOutput],
    hr_gt: &Clip,
    lr_gt: &Clip,
    w: &LossWeights,
) -> Result<LossBundle> {
    let n = fwd.len();
    if n == 0 || bwd.len() != n || hr_gt.len() != n || lr_gt.len() != n {
        return Err(Error::shape(format!(
            "compute_losses: lengths fwd {n}, bwd {}, hr {}, lr {}",
            bwd.len(),
            hr_gt.len(),
            lr_gt.len()
        )));
    }
    let mse = |a: &Frame, b: &Frame| -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("loss term dims {:?} vs {:?}", a.dims(), b.dims())));
        }
        let s: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        Ok(s / a.as_slice().len() as f64)
    };
    let (mut hr, mut lr) = (0.0, 0.0);
    for stream in [fwd, bwd] {
        for (t, s) in stream.iter().enumerate() {
            hr += mse(&s.hr_pred, &hr_gt.frames()[t])?;
            lr += mse(&s.lr_warped, &lr_gt.frames()[t])?;
        }
    }
    let norm = 1.0 / (2 * n) as f64;
    Ok(w.bundle(hr * norm, lr * norm))
}

/// Super-resolves an LR clip; predictions are clipped to `[0,1]`.
pub fn super_resolve(
    params: &ModelParams<f32>,
    lr: &Clip,
    enhance: &EnhanceConfig,
    mode: InferenceMode,
) -> Result<Clip> {
    let fwd = run_direction(params, lr, Direction::Forward, enhance)?;
    let frames: Vec<Frame> = match mode {
        InferenceMode::ForwardOnly => fwd.into_iter().map(|s| s.hr_pred.clamp01()).collect(),
        InferenceMode::BidirectionalAverage => {
            let bwd = run_direction(params, lr, Direction::Backward, enhance)?;
            fwd.iter()
                .zip(&bwd)
                .map(|(a, b)| {
                    let (h, w, c) = a.hr_pred.dims();
                    Frame::from_fn(h, w, c, |y, x, ch| {
                        (0.5 * (a.hr_pred.get(y, x, ch) + b.hr_pred.get(y, x, ch))).clamp(0.0, 1.0)
                    })
                })
                .collect()
        }
    };
    Ok(Clip::new(frames, lr.source_id())?.with_fps(lr.fps()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(n: usize, h: usize, w: usize, seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n).map(|_| Frame::from_fn(h, w, 3, |_, _, _| rng.random::<f32>())).collect();
        Clip::new(frames, "rand").unwrap()
    }

    fn tiny() -> ModelParams<f32> {
        ModelParams::init(&ModelConfig::tiny(), 11).unwrap()
    }

    #[test]
    fn cold_start_step_shapes() {
        let p = tiny();
        let lr = random_clip(1, 32, 32, 1).frames()[0].clone();
        let state = RecurrentState::cold_start(&lr, 4, Direction::Forward);
        let (next, out) = step(&p, &state, &lr, &EnhanceConfig::default()).unwrap();
        assert_eq!(out.hr_pred.dims(), (128, 128, 3));
        assert!(out.hr_pred.is_finite());
        assert_eq!(next.prev_hr_pred, out.hr_pred);
        assert_eq!(next.prev_lr, lr);
    }

    #[test]
    fn step_rejects_mismatch() {
        let p = tiny();
        let a = random_clip(1, 16, 16, 1).frames()[0].clone();
        let b = random_clip(1, 16, 24, 2).frames()[0].clone();
        let state = RecurrentState::cold_start(&a, 4, Direction::Forward);
        assert!(step(&p, &state, &b, &EnhanceConfig::default()).is_err());
    }

    #[test]
    fn direction_counts_and_palindrome() {
        let p = tiny();
        let base = random_clip(4, 16, 16, 3);
        let mut frames = base.frames().to_vec();
        frames.extend(base.frames()[..3].iter().rev().cloned());
        let clip = Clip::new(frames, "pal").unwrap();
        assert_eq!(clip.len(), 7);
        let e = EnhanceConfig::default();
        let fwd = run_direction(&p, &clip, Direction::Forward, &e).unwrap();
        let bwd = run_direction(&p, &clip, Direction::Backward, &e).unwrap();
        assert_eq!((fwd.len(), bwd.len()), (7, 7));
        for t in 0..7 {
            assert!(bwd[t].hr_pred.max_abs_diff(&fwd[6 - t].hr_pred) < 1e-5);
        }
    }

    #[test]
    fn graph_unroll_matches_frame_steps() {
        let p = tiny();
        let clip = random_clip(3, 16, 16, 4);
        let e = EnhanceConfig::default();
        let fwd = run_direction(&p, &clip, Direction::Backward, &e).unwrap();
        let mut g = Graph::<f32>::new();
        let vars = p.bind(&mut g);
        let lr: Vec<Var> = clip.frames().iter().map(|f| g.constant(f.tensor().clone())).collect();
        let steps = unroll_var(&mut g, p.config(), &vars, &lr, Direction::Backward, &e);
        for (s, o) in steps.iter().zip(&fwd) {
            assert!(g.value(s.hr_pred).max_abs_diff(o.hr_pred.tensor()) < 1e-6);
        }
    }

    #[test]
    fn loss_examples() {
        let w = LossWeights::default();
        let b = w.bundle(0.01, 0.002);
        assert!((b.total - 0.202).abs() < 1e-15);

        // constant 0.5 prediction vs zero ground truth, single step each way
        let hr_pred = Frame::filled(8, 8, 3, 0.5);
        let lr = Frame::zeros(2, 2, 3);
        let s = StepOutput {
            hr_pred,
            lr_warped: lr.clone(),
            lr_flow: FlowField::zeros(2, 2, FlowScale::Lr),
            hr_flow: FlowField::zeros(8, 8, FlowScale::Hr),
        };
        let hr_gt = Clip::new(vec![Frame::zeros(8, 8, 3)], "z").unwrap();
        let lr_gt = Clip::new(vec![lr], "z").unwrap();
        let l = compute_losses(std::slice::from_ref(&s), std::slice::from_ref(&s), &hr_gt, &lr_gt, &w).unwrap();
        assert_eq!(l.hr_content, 0.25);
        assert_eq!(l.lr_warp, 0.0);
        assert!(compute_losses(std::slice::from_ref(&s), &[], &hr_gt, &lr_gt, &w).is_err());
    }

    #[test]
    fn graph_and_frame_losses_agree() {
        let p = tiny();
        let lr = random_clip(3, 16, 16, 5);
        let hr = random_clip(3, 64, 64, 6);
        let (w, e) = (LossWeights::default(), EnhanceConfig::default());
        let fwd = run_direction(&p, &lr, Direction::Forward, &e).unwrap();
        let bwd = run_direction(&p, &lr, Direction::Backward, &e).unwrap();
        let frame_level = compute_losses(&fwd, &bwd, &hr, &lr, &w).unwrap();
        let t = |c: &Clip| c.frames().iter().map(|f| f.to_real::<f32>()).collect::<Vec<_>>();
        let cg = build_clip_graph(&p, &t(&lr), &t(&lr), &t(&hr), &w, &e).unwrap();
        let graph_level = cg.bundle(&w);
        // f32 sums in the graph, f64 sums at frame level
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(1.0);
        assert!(close(frame_level.hr_content, graph_level.hr_content));
        assert!(close(frame_level.lr_warp, graph_level.lr_warp));
        // symmetric in the stream order
        let swapped = compute_losses(&bwd, &fwd, &hr, &lr, &w).unwrap();
        assert!((swapped.total - frame_level.total).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_matches_no_enhancement() {
        // with alpha = 0 the enhancement node is skipped entirely; compare to
        // a hand-built step with no enhancement
        let p = tiny();
        let clip = random_clip(2, 16, 16, 7);
        let e0 = EnhanceConfig::with_alpha(0.0);
        let outs = run_direction(&p, &clip, Direction::Forward, &e0).unwrap();
        let mut g = Graph::<f32>::inference();
        let vars = p.bind_frozen(&mut g);
        let prev_lr = g.constant(clip.frames()[0].tensor().clone());
        let prev_hr = g.constant(outs[0].hr_pred.tensor().clone());
        let cur = g.constant(clip.frames()[1].tensor().clone());
        let cfg = p.config().clone();
        let lf = lr_flow_var(&mut g, &cfg, &vars, prev_lr, cur);
        let hf = upscale_flow_var(&mut g, &cfg, &vars, lf);
        let hw = g.warp(prev_hr, hf);
        let out = generate_hr_var(&mut g, &cfg, &vars, hw, cur);
        assert_eq!(g.value(out), outs[1].hr_pred.tensor());
    }

    #[test]
    fn bidirectional_average_mode() {
        let p = tiny();
        let clip = random_clip(3, 16, 16, 8);
        let e = EnhanceConfig::default();
        let a = super_resolve(&p, &clip, &e, InferenceMode::ForwardOnly).unwrap();
        let b = super_resolve(&p, &clip, &e, InferenceMode::BidirectionalAverage).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(b.frames()[0].dims(), (64, 64, 3));
        assert!(a.frames().iter().all(|f| f.as_slice().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
