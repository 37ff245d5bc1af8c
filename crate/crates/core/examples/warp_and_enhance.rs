//! Backward warping with a known translation, then Laplacian enhancement at
//! a few strengths.
//!
//! cargo run --release --example warp_and_enhance

use vsr::imageops::{backward_warp, laplacian_enhance, EnhanceConfig};
use vsr::synthetic::{render_clip, ClipSpec};
use vsr::{FlowField, FlowScale};

fn main() -> vsr::Result<()> {
    let clip = render_clip(&ClipSpec::textured(64, 64, 2), 5, "warp");
    let f = &clip.frames()[0];

    // sampling at (x + 2, y) pulls the frame two pixels to the left
    let flow = FlowField::constant(64, 64, 2.0, 0.0, FlowScale::Lr);
    let warped = backward_warp(f, &flow)?;
    let mut worst = 0.0f32;
    for y in 0..64 {
        for x in 0..62 {
            for c in 0..3 {
                worst = worst.max((warped.get(y, x, c) - f.get(y, x + 2, c)).abs());
            }
        }
    }
    println!("integer shift: max deviation from a pixel copy {worst:.2e}");

    let half = backward_warp(f, &FlowField::constant(64, 64, 0.5, 0.0, FlowScale::Lr))?;
    let mid = 0.5 * (f.get(10, 10, 0) + f.get(10, 11, 0));
    println!("half-pixel shift at (10,10): {:.5}, neighbour average {mid:.5}", half.get(10, 10, 0));

    for alpha in [0.0, 0.5, 1.0, 2.0] {
        let e = laplacian_enhance(f, &EnhanceConfig::with_alpha(alpha))?;
        let energy = |g: &vsr::Frame| {
            let mut s = 0.0f64;
            for y in 0..64 {
                for x in 0..63 {
                    s += ((g.get(y, x + 1, 0) - g.get(y, x, 0)) as f64).powi(2);
                }
            }
            s
        };
        println!(
            "alpha {alpha:.1}: gradient energy x{:.3}, mean shift {:+.2e}",
            energy(&e) / energy(f),
            e.mean() - f.mean()
        );
    }
    Ok(())
}
