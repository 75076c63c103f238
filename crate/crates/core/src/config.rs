//! Versioned TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filtering::{DiscrepancyTransform, ScheduleMode, ThresholdSchedule, TransformKind};
use crate::objectives::LossConfig;
use crate::render::RenderContext;
use crate::types::MAX_SH_DEGREE;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitMode {
    /// Fresh Gaussians from the SfM points at the start of every filtering phase.
    BetweenFiltering,
    /// Fresh Gaussians at the start of every phase, reconstruction included.
    Always,
    /// Every phase continues from the previous phase's output.
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub phases: PhaseConfig,
    #[serde(default)]
    pub filtering: FilteringConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub densify: DensifyConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub log: LogConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    /// Total phase count K; phases 1..K−1 filter, phase K reconstructs.
    pub count: usize,
    pub steps_per_phase: usize,
    pub reinit: ReinitMode,
    pub sh_degree: usize,
    /// Zero SH orders above the DC term when entering the reconstruction phase.
    pub sh_reset: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilteringConfig {
    /// When false every mask is all ones.
    pub masking: bool,
    pub metric: TransformKind,
    pub patch_size: usize,
    /// Directory of `<view>_gt.feat` / `<view>_render_p<phase>.feat` rasters for `external_features`.
    pub feature_dir: Option<PathBuf>,
    pub schedule: ScheduleMode,
    /// Kept-pixel quantile for the mask used in phase k is entry k−2. When
    /// omitted from a file, the default schedule for `phases.count` is used.
    pub quantiles: Vec<f64>,
    pub dilation_radius: usize,
    /// SSIM-only loss in the first phase.
    pub structure_loss: bool,
    /// Update colors every `color_period` steps during filtering phases.
    pub sparse_color: bool,
    pub color_period: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Position rates are multiplied by the scene extent.
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub start_step: usize,
    /// Densification stops after this fraction of each phase.
    pub end_fraction: f64,
    pub interval: usize,
    /// Mean screen-space gradient norm (per pixel) above which a Gaussian is densified.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Clone instead of split when the largest scale is at most this fraction of the extent.
    pub clone_scale_fraction: f64,
    pub split_divisor: f64,
    pub max_gaussians: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub tile_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Metrics row every this many steps (and at each phase end).
    pub interval: usize,
    /// Evaluate on at most this many train views per metrics row; 0 = all.
    pub train_eval_views: usize,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            count: 4,
            steps_per_phase: 2000,
            reinit: ReinitMode::BetweenFiltering,
            sh_degree: 1,
            sh_reset: true,
        }
    }
}

impl Default for FilteringConfig {
    fn default() -> Self {
        Self {
            masking: true,
            metric: TransformKind::IdentityRgb,
            patch_size: 8,
            feature_dir: None,
            schedule: ScheduleMode::Decreasing,
            quantiles: Vec::new(),
            dilation_radius: 0,
            structure_loss: true,
            sparse_color: true,
            color_period: 10,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start_step: 200,
            end_fraction: 0.7,
            interval: 100,
            grad_threshold: 2e-5,
            prune_opacity: 0.005,
            clone_scale_fraction: 0.01,
            split_divisor: 1.6,
            max_gaussians: 20_000,
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        let ctx = RenderContext::default();
        Self {
            alpha_min: ctx.alpha_min,
            transmittance_min: ctx.transmittance_min,
            tile_size: ctx.tile_size,
        }
    }
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            interval: 250,
            train_eval_views: 0,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            phases: PhaseConfig::default(),
            filtering: FilteringConfig {
                quantiles: default_quantiles(PhaseConfig::default().count),
                ..FilteringConfig::default()
            },
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            densify: DensifyConfig::default(),
            render: RenderConfig::default(),
            log: LogConfig::default(),
        }
    }
}

/// Linearly spaced kept-quantiles from 0.98 down to 0.86 for `k` phases.
pub fn default_quantiles(phase_count: usize) -> Vec<f64> {
    let n = phase_count.saturating_sub(1);
    match n {
        0 => vec![],
        1 => vec![0.86],
        _ => (0..n)
            .map(|i| ((0.98 - 0.12 * i as f64 / (n - 1) as f64) * 1e6).round() / 1e6)
            .collect(),
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.filtering.quantiles.is_empty() {
            cfg.filtering.quantiles = default_quantiles(cfg.phases.count);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// First 8 bytes of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn schedule(&self) -> ThresholdSchedule {
        ThresholdSchedule {
            mode: self.filtering.schedule,
            quantiles: self.filtering.quantiles.clone(),
        }
    }

    /// Render settings for a scene with the given background color.
    pub fn render_context(&self, background: [f64; 3]) -> RenderContext {
        RenderContext {
            background,
            alpha_min: self.render.alpha_min,
            transmittance_min: self.render.transmittance_min,
            tile_size: self.render.tile_size,
        }
    }

    /// Transform for the masks entering `phase`; feature paths depend on view and phase.
    pub fn transform(&self, view: usize, phase: usize) -> Result<DiscrepancyTransform> {
        let patch = self.filtering.patch_size;
        Ok(match self.filtering.metric {
            TransformKind::IdentityRgb => DiscrepancyTransform::IdentityRgb,
            TransformKind::PatchPsnr => DiscrepancyTransform::PatchPsnr { patch },
            TransformKind::PatchSsim => DiscrepancyTransform::PatchSsim { patch },
            TransformKind::ExternalFeatures => {
                let dir = self.filtering.feature_dir.as_ref().ok_or_else(|| {
                    Error::Config("external_features needs filtering.feature_dir".into())
                })?;
                DiscrepancyTransform::ExternalFeatures {
                    gt: dir.join(format!("{view:03}_gt.feat")),
                    rendered: dir.join(format!("{view:03}_render_p{phase}.feat")),
                }
            }
        })
    }

    pub fn total_steps(&self) -> usize {
        self.phases.count * self.phases.steps_per_phase
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let p = &self.phases;
        if p.count < 2 {
            return bad("phases.count must be at least 2");
        }
        if p.sh_degree > MAX_SH_DEGREE {
            return bad("phases.sh_degree must be in 0..=3");
        }
        let f = &self.filtering;
        if f.quantiles.len() != p.count - 1 {
            return Err(Error::Config(format!(
                "filtering.quantiles needs {} entries for {} phases, found {}",
                p.count - 1,
                p.count,
                f.quantiles.len()
            )));
        }
        self.schedule().validate(p.count - 1)?;
        if f.color_period == 0 {
            return bad("filtering.color_period must be at least 1");
        }
        if f.patch_size == 0 {
            return bad("filtering.patch_size must be positive");
        }
        self.loss.validate()?;
        let o = &self.optim;
        let rates = [
            o.lr_position_init,
            o.lr_position_final,
            o.lr_scale,
            o.lr_rotation,
            o.lr_opacity,
            o.lr_sh,
        ];
        if rates.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer betas must lie in [0,1) and eps must be positive");
        }
        let d = &self.densify;
        if d.interval == 0 || !(0.0..=1.0).contains(&d.end_fraction) || d.split_divisor <= 1.0 {
            return bad("densify.interval > 0, end_fraction in [0,1], split_divisor > 1 required");
        }
        self.render_context([0.0; 3]).validate()?;
        if self.log.interval == 0 {
            return bad("log.interval must be positive");
        }
        Ok(())
    }

    /// Single-pass 3DGS training with the same total step budget.
    pub fn vanilla_baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.phases.steps_per_phase = self.total_steps() / 2;
        cfg.phases.count = 2;
        cfg.phases.reinit = ReinitMode::Never;
        cfg.phases.sh_reset = false;
        cfg.filtering.masking = false;
        cfg.filtering.structure_loss = false;
        cfg.filtering.sparse_color = false;
        cfg.filtering.schedule = ScheduleMode::Decreasing;
        cfg.filtering.quantiles = default_quantiles(2);
        cfg
    }

    /// Same run with every filtering phase using one constant quantile, the
    /// mean of the decreasing schedule.
    pub fn static_threshold(&self) -> Self {
        let mut cfg = self.clone();
        let q = &self.filtering.quantiles;
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        cfg.filtering.schedule = ScheduleMode::Static;
        cfg.filtering.quantiles = vec![mean; q.len()];
        cfg
    }

    /// Same run with `k` phases and a rescaled default schedule.
    pub fn with_phase_count(&self, k: usize) -> Self {
        let mut cfg = self.clone();
        cfg.phases.count = k;
        cfg.filtering.quantiles = default_quantiles(k);
        cfg.filtering.schedule = ScheduleMode::Decreasing;
        cfg
    }
}
