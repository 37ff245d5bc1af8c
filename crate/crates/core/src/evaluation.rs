//! Benchmark runner: degrade, optionally compress, super-resolve and score
//! every clip at every CRF.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{CompressionConfig, Ffmpeg};
use crate::degradation::{degrade_clip, DegradationConfig};
use crate::error::{Error, Result};
use crate::frame::{list_frame_files, load_clip, Clip};
use crate::imageops::EnhanceConfig;
use crate::metrics::{frame_metrics, MetricRecord};
use crate::networks::ModelParams;
use crate::recurrence::{super_resolve, InferenceMode};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BORDER: usize = 8;

/// Knobs of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub border_crop: usize,
    /// Leading frames excluded from scoring.
    pub frames_skipped: usize,
    pub degradation: DegradationConfig,
    /// Template for compressed runs; its `crf` is replaced per run.
    pub compression: CompressionConfig,
    pub enhance: EnhanceConfig,
    pub mode: InferenceMode,
    pub codec: Ffmpeg,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            border_crop: DEFAULT_BORDER,
            frames_skipped: 0,
            degradation: DegradationConfig::default(),
            compression: CompressionConfig::default(),
            enhance: EnhanceConfig::default(),
            mode: InferenceMode::ForwardOnly,
            codec: Ffmpeg::from_env(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// clip id → CRF (0: uncompressed) → metrics averaged over scored frames.
    pub per_clip: BTreeMap<String, BTreeMap<u8, MetricRecord>>,
    /// CRF → mean over clips.
    pub aggregate: BTreeMap<u8, MetricRecord>,
    pub border_crop: usize,
    pub frames_skipped: usize,
}

impl EvalReport {
    /// Assembles a report, deriving the aggregate from `per_clip`.
    pub fn from_per_clip(
        per_clip: BTreeMap<String, BTreeMap<u8, MetricRecord>>,
        border_crop: usize,
        frames_skipped: usize,
    ) -> Self {
        let crfs: Vec<u8> = per_clip
            .values()
            .flat_map(|m| m.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let aggregate = crfs
            .into_iter()
            .map(|crf| (crf, MetricRecord::mean(per_clip.values().filter_map(|m| m.get(&crf)))))
            .collect();
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            per_clip,
            aggregate,
            border_crop,
            frames_skipped,
        }
    }

    pub fn num_records(&self) -> usize {
        self.per_clip.values().map(|m| m.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One block per CRF with a Y row and an RGB row; each cell is
    /// `psnr/ssim`, clips as columns and the average last.
    pub fn to_csv(&self) -> String {
        let clips: Vec<&String> = self.per_clip.keys().collect();
        let mut out = String::from("crf,channel");
        for c in &clips {
            write!(out, ",{c}").unwrap();
        }
        out.push_str(",average\n");
        for (crf, agg) in &self.aggregate {
            for channel in ["y", "rgb"] {
                let cell = |r: &MetricRecord| match channel {
                    "y" => format!("{:.2}/{:.4}", r.psnr_y, r.ssim_y),
                    _ => format!("{:.2}/{:.4}", r.psnr_rgb, r.ssim_rgb),
                };
                write!(out, "{crf},{channel}").unwrap();
                for c in &clips {
                    match self.per_clip[*c].get(crf) {
                        Some(r) => write!(out, ",{}", cell(r)).unwrap(),
                        None => out.push(','),
                    }
                }
                writeln!(out, ",{}", cell(agg)).unwrap();
            }
        }
        out
    }
}

/// Mean metrics of `pred` against `gt`, skipping the first `skip` frames.
pub fn score_clip(pred: &Clip, gt: &Clip, border: usize, skip: usize) -> Result<MetricRecord> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("prediction has {} frames, ground truth {}", pred.len(), gt.len())));
    }
    if skip >= gt.len() {
        return Err(Error::invalid(format!("skipping {skip} of {} frames leaves none", gt.len())));
    }
    let records = pred.frames()[skip..]
        .iter()
        .zip(&gt.frames()[skip..])
        .map(|(p, g)| frame_metrics(p, g, border))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricRecord::mean(&records))
}

/// Model input for `hr` at `crf` (0: uncompressed).
pub fn prepare_input(hr: &Clip, crf: u8, opts: &EvalOptions) -> Result<Clip> {
    let lr = degrade_clip(hr, &opts.degradation)?;
    if crf == 0 {
        return Ok(lr);
    }
    let cfg = CompressionConfig {
        crf,
        ..opts.compression.clone()
    };
    let dir = tempfile::Builder::new().prefix("vsr-eval-").tempdir()?;
    opts.codec.compress_clip(&lr, &cfg, dir.path())
}

/// Runs the protocol with an arbitrary super-resolver `infer`.
pub fn evaluate_with<F>(dataset: &[Clip], crf_list: &[u8], opts: &EvalOptions, infer: F) -> Result<EvalReport>
where
    F: Fn(&Clip, &Clip) -> Result<Clip> + Sync,
{
    if crf_list.is_empty() {
        return Err(Error::invalid("empty CRF list"));
    }
    let scale = opts.degradation.scale;
    for clip in dataset {
        if clip.height() % scale != 0 || clip.width() % scale != 0 {
            return Err(Error::shape(format!(
                "clip `{}` is {}x{}, not divisible by scale {scale}",
                clip.source_id(),
                clip.height(),
                clip.width()
            )));
        }
    }
    let rows = dataset
        .par_iter()
        .map(|hr| {
            let mut per_crf = BTreeMap::new();
            for &crf in crf_list {
                let lr = prepare_input(hr, crf, opts)?;
                let pred = infer(&lr, hr)?;
                per_crf.insert(crf, score_clip(&pred, hr, opts.border_crop, opts.frames_skipped)?);
            }
            Ok((hr.source_id().to_string(), per_crf))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_clip = BTreeMap::new();
    for (id, m) in rows {
        if per_clip.insert(id.clone(), m).is_some() {
            return Err(Error::invalid(format!("duplicate clip id `{id}`")));
        }
    }
    Ok(EvalReport::from_per_clip(per_clip, opts.border_crop, opts.frames_skipped))
}

/// Scores `params` on `dataset` at every CRF in `crf_list`.
pub fn evaluate(params: &ModelParams<f32>, dataset: &[Clip], crf_list: &[u8], opts: &EvalOptions) -> Result<EvalReport> {
    if params.config().scale != opts.degradation.scale {
        return Err(Error::config(
            "degradation.scale",
            format!(
                "checkpoint scale {} differs from degradation scale {}",
                params.config().scale,
                opts.degradation.scale
            ),
        ));
    }
    evaluate_with(dataset, crf_list, opts, |lr, _| super_resolve(params, lr, &opts.enhance, opts.mode))
}

/// Loads HR clips from `dir`: either `dir` itself is a frame directory, or
/// each subdirectory holding frames is one clip named after it.
pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>> {
    if !dir.is_dir() {
        return Err(Error::Clip {
            path: dir.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    if !list_frame_files(dir)?.is_empty() {
        return Ok(vec![load_clip(dir)?]);
    }
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let clips = subdirs
        .iter()
        .filter(|d| list_frame_files(d).map(|f| !f.is_empty()).unwrap_or(false))
        .map(|d| load_clip(d))
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        return Err(Error::Clip {
            path: dir.to_path_buf(),
            reason: "no frame directories found".into(),
        });
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{render_clip, ClipSpec};

    fn dataset() -> Vec<Clip> {
        (0..4)
            .map(|i| render_clip(&ClipSpec::textured(32, 32, 2), i, format!("clip{i}")))
            .collect()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let data = dataset();
        let report = evaluate_with(&data, &[0], &EvalOptions::default(), |_, hr| Ok(hr.clone())).unwrap();
        assert_eq!(report.num_records(), 4);
        for r in report.per_clip.values().flat_map(|m| m.values()) {
            assert_eq!(r.psnr_y, 99.0);
            assert_eq!(r.psnr_rgb, 99.0);
            assert!((r.ssim_y - 1.0).abs() < 1e-12 && (r.ssim_rgb - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_mean_of_clips() {
        let data = dataset();
        let report = evaluate_with(&data, &[0], &EvalOptions::default(), |lr, _| {
            let up = lr.try_map(|f| {
                Ok(crate::frame::Frame::from_fn(f.height() * 4, f.width() * 4, 3, |y, x, c| f.get(y / 4, x / 4, c)))
            })?;
            Ok(up)
        })
        .unwrap();
        let want = MetricRecord::mean(report.per_clip.values().map(|m| &m[&0]));
        assert_eq!(report.aggregate[&0], want);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("crf,channel,clip0,clip1,clip2,clip3,average"));
    }

    #[test]
    fn indivisible_clip_rejected() {
        let clip = render_clip(&ClipSpec::textured(30, 32, 2), 0, "odd");
        assert!(evaluate_with(&[clip], &[0], &EvalOptions::default(), |_, hr| Ok(hr.clone())).is_err());
    }
}
