//! Compares backpropagated gradients of the full bidirectional clip loss
//! with central differences, one coordinate per parameter tensor.
//!
//! cargo run --release --example gradient_check -- [h]

use std::sync::Arc;

use vsr::degradation::{degrade_clip, DegradationConfig};
use vsr::imageops::EnhanceConfig;
use vsr::networks::{ModelConfig, ModelParams};
use vsr::recurrence::{build_clip_graph, LossWeights};
use vsr::synthetic::{render_clip, ClipSpec};
use vsr::tensor::Tensor;
use vsr::training::clip_gradients;
use vsr::Clip;

fn main() -> vsr::Result<()> {
    let h: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-5);
    let params = ModelParams::<f64>::init(&ModelConfig::tiny(), 7)?;
    let hr = render_clip(&ClipSpec::textured(32, 32, 3), 4, "grad");
    let lr = degrade_clip(&hr, &DegradationConfig::default())?;
    let t = |c: &Clip| c.frames().iter().map(|f| f.to_real::<f64>()).collect::<Vec<Tensor<f64>>>();
    let (lr_t, hr_t) = (t(&lr), t(&hr));
    let (w, e) = (LossWeights::default(), EnhanceConfig::default());
    let (loss, grads) = clip_gradients(&params, &lr_t, &lr_t, &hr_t, &w, &e)?;
    println!("loss {:.6} (hr {:.6}, lr warp {:.6})", loss.total, loss.hr_content, loss.lr_warp);

    let eval = |ti: usize, ci: usize, d: f64| -> vsr::Result<f64> {
        let mut q = params.clone();
        let p = q.iter_mut().nth(ti).expect("tensor index");
        Arc::make_mut(&mut p.value).data_mut()[ci] += d;
        Ok(build_clip_graph(&q, &lr_t, &lr_t, &hr_t, &w, &e)?.bundle(&w).total)
    };
    for (ti, (p, g)) in params.iter().zip(&grads).enumerate() {
        let ci = (0..g.len()).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap_or(0);
        let analytic = g.data()[ci];
        let numeric = (eval(ti, ci, h)? - eval(ti, ci, -h)?) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        println!("{:<24} [{ci:>5}] analytic {analytic:+.6e} numeric {numeric:+.6e} rel {rel:.1e}", p.name);
    }
    Ok(())
}
