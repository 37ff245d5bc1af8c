//! H.264 CRF round-trips through an external `ffmpeg` binary.
//!
//! Frames are streamed to the encoder as raw `rgb24` on stdin, encoded into
//! `<workdir>/clip.mp4`, then decoded back to raw `rgb24` on stdout.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Clip, Frame};

/// Environment variable overriding the encoder binary.
pub const FFMPEG_ENV: &str = "VSR_FFMPEG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub crf: u8,
    pub codec: String,
    pub preset: String,
    pub pixel_format: String,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            crf: 23,
            codec: "h264".into(),
            preset: "medium".into(),
            pixel_format: "yuv420p".into(),
        }
    }
}

impl CompressionConfig {
    pub fn with_crf(crf: u8) -> Self {
        CompressionConfig {
            crf,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crf > 51 {
            return Err(Error::config("compression.crf", format!("{} outside 0..=51", self.crf)));
        }
        self.encoder_name()?;
        Ok(())
    }

    fn encoder_name(&self) -> Result<&'static str> {
        match self.codec.as_str() {
            "h264" | "libx264" => Ok("libx264"),
            other => Err(Error::config("compression.codec", format!("unsupported codec `{other}` (only h264)"))),
        }
    }
}

/// Handle on the encoder binary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ffmpeg {
    binary: PathBuf,
}

impl Default for Ffmpeg {
    fn default() -> Self {
        Self::from_env()
    }
}

impl Ffmpeg {
    pub fn new(binary: impl Into<PathBuf>) -> Self {
        Ffmpeg { binary: binary.into() }
    }

    /// `$VSR_FFMPEG`, falling back to `ffmpeg` on `PATH`.
    pub fn from_env() -> Self {
        match std::env::var_os(FFMPEG_ENV) {
            Some(p) if !p.is_empty() => Ffmpeg::new(p),
            _ => Ffmpeg::new("ffmpeg"),
        }
    }

    pub fn binary(&self) -> &Path {
        &self.binary
    }

    fn missing(&self, e: std::io::Error) -> Error {
        Error::EncoderMissing {
            binary: self.binary.display().to_string(),
            reason: e.to_string(),
        }
    }

    fn command(&self) -> Command {
        let mut c = Command::new(&self.binary);
        c.args(["-hide_banner", "-nostdin", "-loglevel", "error", "-y"]);
        c
    }

    /// First line of `ffmpeg -version`.
    pub fn version(&self) -> Result<String> {
        let out = Command::new(&self.binary)
            .arg("-version")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| self.missing(e))?;
        let text = String::from_utf8_lossy(&out.stdout);
        Ok(text.lines().next().unwrap_or("unknown").trim().to_string())
    }

    pub fn is_available(&self) -> bool {
        self.version().is_ok()
    }

    /// Encoder arguments after the raw-video input spec.
    pub fn encode_args(cfg: &CompressionConfig) -> Result<Vec<String>> {
        Ok(vec![
            "-c:v".into(),
            cfg.encoder_name()?.into(),
            "-preset".into(),
            cfg.preset.clone(),
            "-crf".into(),
            cfg.crf.to_string(),
            "-pix_fmt".into(),
            cfg.pixel_format.clone(),
            "-threads".into(),
            "1".into(),
        ])
    }

    fn encode(&self, rgb: Vec<u8>, w: usize, h: usize, fps: u32, cfg: &CompressionConfig, out: &Path) -> Result<()> {
        let mut cmd = self.command();
        cmd.args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-s"])
            .arg(format!("{w}x{h}"))
            .arg("-r")
            .arg(fps.max(1).to_string())
            .args(["-i", "-"])
            .args(Self::encode_args(cfg)?)
            .arg(out)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        let mut child = cmd.spawn().map_err(|e| self.missing(e))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&rgb));
        let output = child.wait_with_output()?;
        let write_res = writer.join().expect("encoder stdin writer panicked");
        self.check_status(&output)?;
        write_res?;
        Ok(())
    }

    fn decode(&self, input: &Path) -> Result<Vec<u8>> {
        let mut cmd = self.command();
        cmd.arg("-i")
            .arg(input)
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = cmd.spawn().map_err(|e| self.missing(e))?;
        let mut data = Vec::new();
        child.stdout.take().expect("piped stdout").read_to_end(&mut data)?;
        let output = child.wait_with_output()?;
        self.check_status(&output)?;
        Ok(data)
    }

    fn check_status(&self, output: &std::process::Output) -> Result<()> {
        if output.status.success() {
            return Ok(());
        }
        Err(Error::EncoderFailed {
            binary: self.binary.display().to_string(),
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        })
    }

    /// Encodes `clip` at the configured CRF and decodes it back.
    ///
    /// Odd dimensions are edge-padded to even for the 4:2:0 pixel format and
    /// cropped again afterwards. `workdir` must be private to the caller.
    pub fn compress_clip(&self, clip: &Clip, cfg: &CompressionConfig, workdir: &Path) -> Result<Clip> {
        cfg.validate()?;
        if clip.channels() != 3 {
            return Err(Error::shape(format!("compress_clip needs RGB frames, got {} channels", clip.channels())));
        }
        std::fs::create_dir_all(workdir)?;
        let (h, w) = (clip.height(), clip.width());
        let (ph, pw) = (h + h % 2, w + w % 2);
        let mut rgb = Vec::with_capacity(clip.len() * ph * pw * 3);
        for f in clip.frames() {
            for y in 0..ph {
                for x in 0..pw {
                    for c in 0..3 {
                        let v = f.get(y.min(h - 1), x.min(w - 1), c);
                        rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
        }
        let video = workdir.join("clip.mp4");
        self.encode(rgb, pw, ph, clip.fps(), cfg, &video)?;
        let decoded = self.decode(&video)?;
        let frame_bytes = ph * pw * 3;
        let got = decoded.len() / frame_bytes;
        if got != clip.len() || decoded.len() % frame_bytes != 0 {
            return Err(Error::FrameCount {
                expected: clip.len(),
                got,
            });
        }
        let frames = decoded
            .chunks_exact(frame_bytes)
            .map(|buf| Frame::from_fn(h, w, 3, |y, x, c| buf[(y * pw + x) * 3 + c] as f32 / 255.0))
            .collect();
        Ok(Clip::new(frames, clip.source_id())?.with_fps(clip.fps()))
    }
}

/// [`Ffmpeg::compress_clip`] with the binary from the environment.
pub fn compress_clip(lr: &Clip, cfg: &CompressionConfig, workdir: &Path) -> Result<Clip> {
    Ffmpeg::from_env().compress_clip(lr, cfg, workdir)
}
