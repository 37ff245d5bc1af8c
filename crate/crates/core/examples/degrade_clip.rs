//! Renders a textured clip, degrades it and compresses it at several CRF
//! values, printing the distortion each step adds.
//!
//! cargo run --release --example degrade_clip -- [out_dir]

use std::path::PathBuf;

use vsr::codec::{CompressionConfig, Ffmpeg};
use vsr::degradation::{degrade_clip, DegradationConfig};
use vsr::frame::{save_clip, BitDepth};
use vsr::metrics::psnr;
use vsr::synthetic::{render_clip, ClipSpec};
use vsr::Clip;

fn mean_abs(a: &Clip, b: &Clip) -> f64 {
    let n: usize = a.frames().iter().map(|f| f.as_slice().len()).sum();
    let s: f64 = a
        .frames()
        .iter()
        .zip(b.frames())
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| (p - q).abs() as f64))
        .sum();
    s / n as f64
}

fn main() -> vsr::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let hr = render_clip(&ClipSpec::textured(128, 128, 6), 11, "demo");
    let lr = degrade_clip(&hr, &DegradationConfig::default())?;
    println!("HR {}x{} -> LR {}x{}, {} frames", hr.width(), hr.height(), lr.width(), lr.height(), lr.len());

    let codec = Ffmpeg::from_env();
    println!("encoder: {}", codec.version()?);
    let work = tempfile::tempdir()?;
    for crf in [0u8, 15, 25, 35] {
        let c = codec.compress_clip(&lr, &CompressionConfig::with_crf(crf), &work.path().join(crf.to_string()))?;
        let p: f64 = c.frames().iter().zip(lr.frames()).map(|(a, b)| psnr(a, b).unwrap()).sum::<f64>() / c.len() as f64;
        println!("crf {crf:>2}: mean abs error {:.4}, PSNR vs clean LR {p:.2} dB", mean_abs(&c, &lr));
        if let Some(dir) = &out {
            save_clip(&c, &dir.join(format!("crf{crf}")), BitDepth::Eight)?;
        }
    }
    if let Some(dir) = &out {
        save_clip(&hr, &dir.join("hr"), BitDepth::Eight)?;
        save_clip(&lr, &dir.join("lr"), BitDepth::Eight)?;
        println!("frames written under {}", dir.display());
    }
    Ok(())
}
