//! Run directories, per-phase summaries and the phase-wise PSNR plot.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml                      configuration snapshot
//! metrics.csv                      periodic training metrics
//! report.csv                       one summary row per phase
//! psnr.png                         train and holdout PSNR over all steps
//! checkpoints/phase_K.ckpt         Gaussian set at the end of phase K
//! masks/phase_K/train_NNN.png      masks supervising phase K (255 = kept)
//! renders/phase_K/train_NNN.png    training views rendered after phase K
//! final.ply                        last phase as a point cloud
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{image_ssim, psnr, MaskCounts};
use crate::io::{
    export_ply, load_checkpoint, read_mask_png, save_checkpoint, write_mask_png, write_png,
    CheckpointMeta,
};
use crate::pipeline::{metrics_csv, MetricsRow, PipelineResult, METRICS_HEADER};
use crate::render::render;
use crate::types::{BinaryMask, GaussianSet, ImageBuffer};

pub const REPORT_HEADER: &str =
    "phase,num_gaussians,holdout_psnr,holdout_ssim,lpips,mask_precision,mask_recall,mask_iou,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: usize,
    pub num_gaussians: usize,
    pub holdout_psnr: Option<f64>,
    pub holdout_ssim: Option<f64>,
    /// Always empty: LPIPS needs a pretrained network.
    pub lpips: Option<f64>,
    /// Pooled over all training views; needs ground-truth masks.
    pub mask: Option<MaskCounts>,
    pub seconds: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl PhaseSummary {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.phase,
            self.num_gaussians,
            opt(self.holdout_psnr),
            opt(self.holdout_ssim),
            opt(self.lpips),
            opt(self.mask.map(|m| m.precision())),
            opt(self.mask.map(|m| m.recall())),
            opt(self.mask.map(|m| m.iou())),
            opt(self.seconds)
        )
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub rows: Vec<MetricsRow>,
    pub phases: Vec<PhaseSummary>,
}

impl RunReport {
    pub fn final_phase(&self) -> &PhaseSummary {
        self.phases.last().expect("report has phases")
    }

    pub fn final_holdout_psnr(&self) -> Option<f64> {
        self.final_phase().holdout_psnr
    }

    pub fn final_holdout_ssim(&self) -> Option<f64> {
        self.final_phase().holdout_ssim
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for p in &self.phases {
            s.push_str(&p.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&self.rows))?;
        std::fs::write(dir.join("report.csv"), self.summary_csv())?;
        write_png(
            &plot_psnr(&self.rows, self.config.phases.steps_per_phase),
            &dir.join("psnr.png"),
        )
    }
}

/// Holdout quality of `set` and agreement of `masks` with ground truth.
pub fn summarize_phase(
    phase: usize,
    set: &GaussianSet,
    masks: Option<&[BinaryMask]>,
    data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PhaseSummary> {
    let ctx = cfg.render_context(data.background);
    let scores: Vec<(f64, f64)> = data
        .holdout
        .par_iter()
        .map(|v| {
            let img = render(set, &v.camera, &ctx).0;
            Ok((psnr(&img, &v.image)?, image_ssim(&img, &v.image)?))
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let mean = |f: fn(&(f64, f64)) -> f64| {
        (!scores.is_empty()).then(|| scores.iter().map(f).sum::<f64>() / n)
    };
    let mask = match masks {
        Some(m) if data.has_ground_truth() => {
            let mut c = MaskCounts::default();
            for (p, v) in m.iter().zip(&data.train) {
                c.add(MaskCounts::of(
                    p,
                    v.distractor_mask.as_ref().expect("ground truth"),
                ));
            }
            Some(c)
        }
        _ => None,
    };
    Ok(PhaseSummary {
        phase,
        num_gaussians: set.len(),
        holdout_psnr: mean(|s| s.0),
        holdout_ssim: mean(|s| s.1),
        lpips: None,
        mask,
        seconds: None,
    })
}

pub fn build_report(
    result: &PipelineResult,
    data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<RunReport> {
    let phases = result
        .phases
        .iter()
        .map(|p| {
            let mut s = summarize_phase(p.phase, &p.set, p.masks.as_deref(), data, cfg)?;
            s.seconds = Some(p.seconds);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(RunReport {
        config: cfg.clone(),
        rows: result.metrics.clone(),
        phases,
    })
}

pub fn checkpoint_path(run: &Path, phase: usize) -> PathBuf {
    run.join("checkpoints").join(format!("phase_{phase}.ckpt"))
}

fn view_name(i: usize) -> String {
    format!("train_{i:03}.png")
}

fn phase_dir(run: &Path, kind: &str, phase: usize) -> PathBuf {
    run.join(kind).join(format!("phase_{phase}"))
}

/// Writes every artifact of a finished run and returns its report.
pub fn write_run(
    dir: &Path,
    result: &PipelineResult,
    data: &Dataset,
    cfg: &PipelineConfig,
) -> Result<RunReport> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    cfg.save(&dir.join("config.toml"))?;
    let ctx = cfg.render_context(data.background);
    let hash = cfg.hash();
    for p in &result.phases {
        let meta = CheckpointMeta {
            phase: p.phase as u32,
            step: p.steps as u32,
            config_hash: hash,
        };
        save_checkpoint(&p.set, meta, &checkpoint_path(dir, p.phase))?;
        if let Some(masks) = &p.masks {
            let md = phase_dir(dir, "masks", p.phase);
            std::fs::create_dir_all(&md)?;
            for (i, m) in masks.iter().enumerate() {
                write_mask_png(m, &md.join(view_name(i)))?;
            }
        }
        let rd = phase_dir(dir, "renders", p.phase);
        std::fs::create_dir_all(&rd)?;
        let renders: Vec<ImageBuffer> = data
            .train
            .par_iter()
            .map(|v| render(&p.set, &v.camera, &ctx).0)
            .collect();
        for (i, img) in renders.iter().enumerate() {
            write_png(img, &rd.join(view_name(i)))?;
        }
    }
    export_ply(result.final_set(), &dir.join("final.ply"))?;
    let report = build_report(result, data, cfg)?;
    report.write(dir)?;
    Ok(report)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics.csv header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Format(format!("metrics row has {} fields", f.len())));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Format(format!("metrics row {l:?}: {e}"));
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e));
            let opt = |s: &str| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s).map(Some)
                }
            };
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(&e));
            Ok(MetricsRow {
                phase: int(f[0])?,
                step: int(f[1])?,
                train_psnr: num(f[2])?,
                train_ssim: num(f[3])?,
                holdout_psnr: opt(f[4])?,
                holdout_ssim: opt(f[5])?,
                mask_iou: opt(f[6])?,
                num_gaussians: int(f[7])?,
                mean_disc_static: opt(f[8])?,
                mean_disc_distractor: opt(f[9])?,
            })
        })
        .collect()
}

/// Re-evaluates a run directory against `data` from its checkpoints and masks.
pub fn evaluate_run(dir: &Path, data: &Dataset) -> Result<RunReport> {
    let cfg = PipelineConfig::load(&dir.join("config.toml"))?;
    let rows = parse_metrics_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?;
    let mut phases = Vec::new();
    for phase in 1..=cfg.phases.count {
        let ckpt = load_checkpoint(&checkpoint_path(dir, phase))?;
        let masks = if phase > 1 {
            let md = phase_dir(dir, "masks", phase);
            Some(
                (0..data.train.len())
                    .map(|i| read_mask_png(&md.join(view_name(i))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        phases.push(summarize_phase(
            phase,
            &ckpt.set,
            masks.as_deref(),
            data,
            &cfg,
        )?);
    }
    Ok(RunReport {
        config: cfg,
        rows,
        phases,
    })
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 270;
const MARGIN: usize = 20;

fn draw_line(img: &mut ImageBuffer, a: (f64, f64), b: (f64, f64), color: [f32; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a.0 + (b.0 - a.0) * t).round();
        let y = (a.1 + (b.1 - a.1) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(x as usize, y as usize, color);
        }
    }
}

/// Line chart of train (blue) and holdout (orange) PSNR against the global
/// step, with gray phase boundaries. The y range spans the data.
pub fn plot_psnr(rows: &[MetricsRow], steps_per_phase: usize) -> ImageBuffer {
    let mut img = ImageBuffer::filled(PLOT_W, PLOT_H, [1.0f32; 3]);
    let x_of = |r: &MetricsRow| ((r.phase - 1) * steps_per_phase + r.step) as f64;
    let max_x = rows.iter().map(x_of).fold(1.0, f64::max);
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| std::iter::once(r.train_psnr).chain(r.holdout_psnr))
        .filter(|v| v.is_finite())
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let (x0, x1) = (MARGIN as f64, (PLOT_W - MARGIN) as f64);
    let (y0, y1) = ((PLOT_H - MARGIN) as f64, MARGIN as f64);
    let px = |x: f64, y: f64| {
        (
            x0 + (x1 - x0) * x / max_x,
            y0 + (y1 - y0) * (y - lo) / (hi - lo),
        )
    };
    let gray = [0.75f32; 3];
    let mut k = 1;
    while ((k * steps_per_phase) as f64) < max_x && steps_per_phase > 0 {
        let x = px((k * steps_per_phase) as f64, lo).0;
        draw_line(&mut img, (x, y0), (x, y1), gray);
        k += 1;
    }
    draw_line(&mut img, (x0, y0), (x1, y0), [0.0; 3]);
    draw_line(&mut img, (x0, y0), (x0, y1), [0.0; 3]);
    let series: [(fn(&MetricsRow) -> Option<f64>, [f32; 3]); 2] = [
        (|r| Some(r.train_psnr), [0.12, 0.35, 0.75]),
        (|r| r.holdout_psnr, [0.9, 0.45, 0.1]),
    ];
    for (get, color) in series {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| get(r).map(|v| px(x_of(r), v)))
            .collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        for &(x, y) in &pts {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    draw_line(
                        &mut img,
                        (x + dx as f64, y + dy as f64),
                        (x + dx as f64, y + dy as f64),
                        color,
                    );
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(phase: usize, step: usize, psnr: f64) -> MetricsRow {
        MetricsRow {
            phase,
            step,
            train_psnr: psnr,
            train_ssim: 0.9,
            holdout_psnr: Some(psnr - 1.0),
            holdout_ssim: Some(0.8),
            mask_iou: (phase > 1).then_some(0.5),
            num_gaussians: 100,
            mean_disc_static: Some(0.01),
            mean_disc_distractor: None,
        }
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let rows = vec![row(1, 100, 20.5), row(2, 100, 22.25)];
        let back = parse_metrics_csv(&metrics_csv(&rows)).unwrap();
        assert_eq!(back, rows);
        assert!(parse_metrics_csv("phase,step\n").is_err());
    }

    #[test]
    fn plot_draws_series_in_bounds() {
        let rows: Vec<_> = (1..=3)
            .flat_map(|p| [row(p, 50, 20.0 + p as f64), row(p, 100, 21.0 + p as f64)])
            .collect();
        let img = plot_psnr(&rows, 100);
        assert_eq!((img.width, img.height), (PLOT_W, PLOT_H));
        let orange = img.rgb.chunks(3).filter(|c| c == &[0.9, 0.45, 0.1]).count();
        let blue = img
            .rgb
            .chunks(3)
            .filter(|c| c == &[0.12, 0.35, 0.75])
            .count();
        assert!(orange > 100 && blue > 100);
        assert!(img.in_unit_range());
    }

    #[test]
    fn summary_leaves_lpips_empty() {
        let s = PhaseSummary {
            phase: 2,
            num_gaussians: 10,
            holdout_psnr: Some(30.0),
            holdout_ssim: Some(0.9),
            lpips: None,
            mask: Some(MaskCounts {
                true_pos: 1,
                false_pos: 1,
                false_neg: 2,
            }),
            seconds: None,
        };
        assert_eq!(
            s.to_csv(),
            "2,10,30.000000,0.900000,,0.500000,0.333333,0.250000,"
        );
        assert_eq!(
            REPORT_HEADER.split(',').count(),
            s.to_csv().split(',').count()
        );
    }
}
