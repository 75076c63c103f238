//! Configuration sweeps over one axis of the method, each run written to its
//! own run directory with a shared summary table.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::config::{PipelineConfig, ReinitMode};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::filtering::TransformKind;
use crate::pipeline::{run_pipeline, NoObserver};
use crate::report::{write_run, RunReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Phase count from 2 to 6 at a fixed per-phase budget.
    Phases,
    /// Structure loss and sparse color updates toggled independently.
    Components,
    Reinit,
    Threshold,
    Metric,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Phases,
        AblationAxis::Components,
        AblationAxis::Reinit,
        AblationAxis::Threshold,
        AblationAxis::Metric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Phases => "phases",
            AblationAxis::Components => "components",
            AblationAxis::Reinit => "reinit",
            AblationAxis::Threshold => "threshold",
            AblationAxis::Metric => "metric",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub name: String,
    pub config: PipelineConfig,
}

fn run(name: &str, config: PipelineConfig) -> AblationRun {
    AblationRun {
        name: name.into(),
        config,
    }
}

/// Configurations swept along `axis`, starting from `base`.
pub fn ablation_grid(base: &PipelineConfig, axis: AblationAxis) -> Vec<AblationRun> {
    match axis {
        AblationAxis::Phases => (2..=6)
            .map(|k| run(&format!("k{k}"), base.with_phase_count(k)))
            .collect(),
        AblationAxis::Components => [
            ("structure_and_sparse", true, true),
            ("structure_only", true, false),
            ("sparse_only", false, true),
            ("neither", false, false),
        ]
        .into_iter()
        .map(|(name, structure, sparse)| {
            let mut c = base.clone();
            c.filtering.structure_loss = structure;
            c.filtering.sparse_color = sparse;
            run(name, c)
        })
        .collect(),
        AblationAxis::Reinit => [
            ("between_filtering", ReinitMode::BetweenFiltering),
            ("always", ReinitMode::Always),
            ("never", ReinitMode::Never),
        ]
        .into_iter()
        .map(|(name, mode)| {
            let mut c = base.clone();
            c.phases.reinit = mode;
            run(name, c)
        })
        .collect(),
        AblationAxis::Threshold => {
            let mut decreasing = base.clone();
            if decreasing.filtering.schedule == crate::filtering::ScheduleMode::Static {
                decreasing = decreasing.with_phase_count(base.phases.count);
            }
            let stat = decreasing.static_threshold();
            vec![run("decreasing", decreasing), run("static", stat)]
        }
        AblationAxis::Metric => [
            ("identity_rgb", TransformKind::IdentityRgb),
            ("patch_psnr", TransformKind::PatchPsnr),
            ("patch_ssim", TransformKind::PatchSsim),
        ]
        .into_iter()
        .map(|(name, kind)| {
            let mut c = base.clone();
            c.filtering.metric = kind;
            run(name, c)
        })
        .collect(),
    }
}

pub const ABLATION_HEADER: &str =
    "axis,run,phases,final_holdout_psnr,final_holdout_ssim,lpips,final_mask_iou,num_gaussians,seconds";

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub name: String,
    pub report: RunReport,
    pub seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn ablation_csv(axis: AblationAxis, outcomes: &[AblationOutcome]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for o in outcomes {
        let f = o.report.final_phase();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3}\n",
            axis.name(),
            o.name,
            o.report.config.phases.count,
            opt(f.holdout_psnr),
            opt(f.holdout_ssim),
            opt(f.lpips),
            opt(f.mask.map(|m| m.iou())),
            f.num_gaussians,
            o.seconds
        ));
    }
    s
}

/// Runs every configuration of the sweep in order, writing `out/<run>/` and
/// `out/ablation.csv`.
pub fn run_ablation(
    base: &PipelineConfig,
    data: &Dataset,
    axis: AblationAxis,
    out: &Path,
) -> Result<Vec<AblationOutcome>> {
    std::fs::create_dir_all(out)?;
    let mut outcomes = Vec::new();
    for r in ablation_grid(base, axis) {
        let start = Instant::now();
        let result = run_pipeline(&r.config, data, &mut NoObserver)?;
        let report = write_run(&out.join(&r.name), &result, data, &r.config)?;
        outcomes.push(AblationOutcome {
            name: r.name,
            report,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    std::fs::write(out.join("ablation.csv"), ablation_csv(axis, &outcomes))?;
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_runs() {
        let base = PipelineConfig::default();
        let names = |a| {
            ablation_grid(&base, a)
                .into_iter()
                .map(|r| r.name)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            names(AblationAxis::Reinit),
            ["between_filtering", "always", "never"]
        );
        assert_eq!(names(AblationAxis::Threshold), ["decreasing", "static"]);
        assert_eq!(
            names(AblationAxis::Metric),
            ["identity_rgb", "patch_psnr", "patch_ssim"]
        );
        assert_eq!(names(AblationAxis::Components).len(), 4);
        assert_eq!(names(AblationAxis::Phases), ["k2", "k3", "k4", "k5", "k6"]);
        for axis in AblationAxis::ALL {
            for r in ablation_grid(&base, axis) {
                r.config.validate().unwrap();
            }
            assert_eq!(axis.name().parse::<AblationAxis>().unwrap(), axis);
        }
        assert!("bogus".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn grid_members_differ_only_on_their_axis() {
        let base = PipelineConfig::default();
        let reinit = ablation_grid(&base, AblationAxis::Reinit);
        let modes: Vec<_> = reinit.iter().map(|r| r.config.phases.reinit).collect();
        assert_eq!(
            modes,
            [
                ReinitMode::BetweenFiltering,
                ReinitMode::Always,
                ReinitMode::Never
            ]
        );
        for r in &reinit {
            let mut c = r.config.clone();
            c.phases.reinit = base.phases.reinit;
            assert_eq!(c, base);
        }
        let th = ablation_grid(&base, AblationAxis::Threshold);
        assert_eq!(th[0].config, base);
        let q = &th[1].config.filtering.quantiles;
        assert!(q.windows(2).all(|w| w[0] == w[1]));
    }
}
