//! Trains the tiny model for a few steps, saves a checkpoint, reloads it and
//! super-resolves a clip in forward-only and bidirectional modes.
//!
//! cargo run --release --example infer -- [steps]

use vsr::checkpoint;
use vsr::degradation::{degrade_clip, DegradationConfig};
use vsr::imageops::EnhanceConfig;
use vsr::metrics::psnr;
use vsr::networks::{ModelConfig, ModelParams};
use vsr::recurrence::{super_resolve, InferenceMode, LossWeights};
use vsr::synthetic::{render_clip, ClipSpec};
use vsr::training::{train_step, AdamState, OptimSettings, TrainConfig, TrainSample};

fn main() -> vsr::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let hr = render_clip(&ClipSpec::textured(64, 64, 5), 9, "demo");
    let lr = degrade_clip(&hr, &DegradationConfig::default())?;
    let cfg = TrainConfig {
        lr_rate: 1e-3,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let mut params = ModelParams::<f32>::init(&cfg.model, 1)?;
    let mut opt = AdamState::new(&params);
    let sample = TrainSample {
        hr_clip: hr.clone(),
        lr_clip: lr.clone(),
        compressed: false,
        crf_used: None,
    };
    let (w, e) = (LossWeights::default(), EnhanceConfig::default());
    for step in 0..steps {
        train_step(&mut params, &mut opt, std::slice::from_ref(&sample), &w, &e, &OptimSettings::from(&cfg), step)?;
    }

    let dir = tempfile::tempdir()?;
    let hash = checkpoint::save(dir.path(), &params, None, steps, Some(&cfg))?;
    let ck = checkpoint::load(dir.path())?;
    println!("checkpoint {} ({} parameters)", &hash[..16], ck.params.count_params());

    for mode in [InferenceMode::ForwardOnly, InferenceMode::BidirectionalAverage] {
        let sr = super_resolve(&ck.params, &lr, &e, mode)?;
        let per: Vec<String> = sr.frames().iter().zip(hr.frames()).map(|(p, g)| format!("{:.2}", psnr(p, g).unwrap())).collect();
        println!("{mode:?}: per-frame PSNR [{}]", per.join(", "));
    }
    Ok(())
}
