//! Overfits the tiny model on one static clip and reports reconstruction PSNR.
//!
//! cargo run --release --example train_tiny -- [steps] [lr]

use std::time::Instant;

use vsr::degradation::{degrade_clip, DegradationConfig};
use vsr::imageops::EnhanceConfig;
use vsr::metrics::psnr;
use vsr::networks::{ModelConfig, ModelParams};
use vsr::recurrence::{super_resolve, InferenceMode, LossWeights};
use vsr::synthetic::{render_clip, ClipSpec};
use vsr::training::{train_step, AdamState, OptimSettings, TrainConfig, TrainSample};

fn main() -> vsr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr_rate: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let hr = render_clip(&ClipSpec::smooth_static(64, 64, 7), 3, "static");
    let lr = degrade_clip(&hr, &DegradationConfig::default())?;
    let sample = TrainSample {
        hr_clip: hr.clone(),
        lr_clip: lr.clone(),
        compressed: false,
        crf_used: None,
    };
    let cfg = TrainConfig {
        lr_rate,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let mut params = ModelParams::<f32>::init(&cfg.model, 0)?;
    let mut opt = AdamState::new(&params);
    let settings = OptimSettings::from(&cfg);
    let (w, e) = (LossWeights::default(), EnhanceConfig::default());
    let start = Instant::now();
    for step in 0..steps {
        let loss = train_step(&mut params, &mut opt, std::slice::from_ref(&sample), &w, &e, &settings, step)?;
        if step % 100 == 0 || step + 1 == steps {
            println!("step {step:>5}  total {:.6}  hr {:.6}  lr {:.6}  {:.1}s", loss.total, loss.hr_content, loss.lr_warp, start.elapsed().as_secs_f64());
        }
    }
    let sr = super_resolve(&params, &lr, &e, InferenceMode::ForwardOnly)?;
    let mean: f64 = sr.frames().iter().zip(hr.frames()).map(|(p, g)| psnr(p, g).unwrap()).sum::<f64>() / hr.len() as f64;
    println!("reconstruction PSNR {mean:.2} dB after {steps} steps");
    Ok(())
}
