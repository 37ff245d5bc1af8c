//! Trains two tiny models that differ only in the compression-augmentation
//! schedule and compares them on CRF 25 inputs.
//!
//! cargo run --release --example compression_awareness -- [steps] [seeds]

use std::time::Instant;

use vsr::evaluation::{evaluate, EvalOptions};
use vsr::networks::ModelConfig;
use vsr::synthetic::textured_corpus;
use vsr::training::{TrainConfig, Trainer};

fn main() -> vsr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5000);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    let train = textured_corpus(5, 96, 96, 10, 100);
    let test = textured_corpus(4, 64, 64, 6, 200);
    let mut gains = Vec::new();
    for seed in 0..seeds {
        let mut psnr = [0.0; 2];
        for (i, aug_prob) in [0.5, 0.0].into_iter().enumerate() {
            let cfg = TrainConfig {
                crop: 64,
                batch: 2,
                clip_len: 5,
                lr_rate: 1e-3,
                total_steps: steps,
                aug_prob,
                seed,
                model: ModelConfig::tiny(),
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let mut trainer = Trainer::new(cfg, train.clone())?;
            let log = trainer.run(std::io::sink(), |_| Ok(()))?;
            let report = evaluate(&trainer.params, &test, &[25], &EvalOptions::default())?;
            psnr[i] = report.aggregate[&25].psnr_y;
            println!(
                "seed {seed} aug_prob {aug_prob}: final loss {:.5}, CRF25 Y-PSNR {:.3} dB ({:.0}s)",
                log.last().map_or(f64::NAN, |l| l.total),
                psnr[i],
                t0.elapsed().as_secs_f64()
            );
        }
        gains.push(psnr[0] - psnr[1]);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    println!("per-seed gains {gains:.3?}, mean {mean:.3} dB");
    Ok(())
}
