//! Runs the evaluation harness on two reference predictors: nearest
//! upsampling of the LR input, and the ground truth itself.
//!
//! cargo run --release --example evaluate

use vsr::evaluation::{evaluate_with, EvalOptions};
use vsr::synthetic::textured_corpus;
use vsr::{Clip, Frame};

fn nearest(lr: &Clip) -> vsr::Result<Clip> {
    lr.try_map(|f| {
        let (h, w, c) = f.dims();
        Ok(Frame::from_fn(4 * h, 4 * w, c, |y, x, k| f.get(y / 4, x / 4, k)))
    })
}

fn main() -> vsr::Result<()> {
    let data = textured_corpus(3, 64, 64, 4, 42);
    let opts = EvalOptions::default();
    let crfs = [0u8, 25, 35];

    let upsampled = evaluate_with(&data, &crfs, &opts, |lr, _| nearest(lr))?;
    println!("nearest upsampling:");
    print!("{}", upsampled.to_csv());

    let oracle = evaluate_with(&data, &crfs, &opts, |_, hr| Ok(hr.clone()))?;
    let r = &oracle.aggregate[&0];
    println!("ground truth: Y {:.1} dB, SSIM {:.4}", r.psnr_y, r.ssim_y);
    Ok(())
}
