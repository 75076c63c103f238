//! Multi-phase training: a structure-supervised first phase, progressive
//! filtering phases that mask high-discrepancy pixels, and a final
//! reconstruction phase under the last masks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{PipelineConfig, ReinitMode};
use crate::dataset::Dataset;
use crate::densify::{densify_and_prune, densify_due, DensifyStats};
use crate::error::{Error, Result};
use crate::eval::{image_ssim, mean_mask_iou, psnr};
use crate::filtering::{
    dilate_excluded, discrepancy, make_mask, DiscrepancyTransform, TransformKind,
};
use crate::objectives::{loss_3dgs, loss_structure, masked_loss, LossConfig, LossKind};
use crate::optim::{color_update_due, Adam, StepRates};
use crate::render::sh::rgb_to_dc;
use crate::render::{backward, render, RenderContext};
use crate::types::{logit, BinaryMask, DiscrepancyMap, GaussianSet, ImageBuffer, SfmPoints};

pub const INIT_OPACITY: f64 = 0.1;
/// Scale used when a point has no neighbors.
const LONE_POINT_SCALE: f64 = 0.01;

/// One Gaussian per point: isotropic scale from the mean distance to the
/// three nearest neighbors, identity rotation, low opacity and DC color from
/// the point color.
pub fn init_from_sfm(pts: &SfmPoints, sh_degree: usize) -> Result<GaussianSet> {
    pts.validate()?;
    let n = pts.len();
    let k = 3.min(n - 1);
    let scales: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            if k == 0 {
                return LONE_POINT_SCALE;
            }
            let p = pts.positions[i];
            let mut best = [f64::INFINITY; 3];
            for (j, q) in pts.positions.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d2: f64 = (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum();
                if d2 < best[k - 1] {
                    let mut s = k - 1;
                    while s > 0 && best[s - 1] > d2 {
                        best[s] = best[s - 1];
                        s -= 1;
                    }
                    best[s] = d2;
                }
            }
            let mean = best[..k].iter().map(|d| d.sqrt()).sum::<f64>() / k as f64;
            mean.max(1e-7)
        })
        .collect();
    let mut set = GaussianSet::empty(sh_degree);
    let ncoef = set.coeffs_per_gaussian();
    let op = logit(INIT_OPACITY) as f32;
    for i in 0..n {
        let mut sh = vec![[0.0f32; 3]; ncoef];
        sh[0] = pts.colors[i].map(|c| rgb_to_dc(c as f64) as f32);
        set.push(
            pts.positions[i],
            [scales[i].ln() as f32; 3],
            [1.0, 0.0, 0.0, 0.0],
            op,
            &sh,
        );
    }
    Ok(set)
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: usize,
    pub step: usize,
    pub train_psnr: f64,
    pub train_ssim: f64,
    pub holdout_psnr: Option<f64>,
    pub holdout_ssim: Option<f64>,
    pub mask_iou: Option<f64>,
    pub num_gaussians: usize,
    pub mean_disc_static: Option<f64>,
    pub mean_disc_distractor: Option<f64>,
}

pub const METRICS_HEADER: &str = "phase,step,train_psnr,train_ssim,holdout_psnr,holdout_ssim,mask_iou,num_gaussians,mean_disc_static,mean_disc_distractor";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{},{},{},{}",
            self.phase,
            self.step,
            self.train_psnr,
            self.train_ssim,
            opt(self.holdout_psnr),
            opt(self.holdout_ssim),
            opt(self.mask_iou),
            self.num_gaussians,
            opt(self.mean_disc_static),
            opt(self.mean_disc_distractor)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Output of one phase.
#[derive(Clone, Debug)]
pub struct PhaseRecord {
    pub phase: usize,
    pub set: GaussianSet,
    /// Masks supervising this phase (`None` in phase 1).
    pub masks: Option<Vec<BinaryMask>>,
    /// Discrepancy maps the masks were derived from.
    pub discrepancy: Option<Vec<DiscrepancyMap>>,
    pub steps: usize,
    pub color_updates: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub phases: Vec<PhaseRecord>,
    pub metrics: Vec<MetricsRow>,
    pub total_steps: usize,
}

impl PipelineResult {
    pub fn final_set(&self) -> &GaussianSet {
        &self.phases.last().expect("at least one phase").set
    }

    /// Last metrics row of `phase`.
    pub fn phase_end(&self, phase: usize) -> Option<&MetricsRow> {
        self.metrics.iter().rev().find(|r| r.phase == phase)
    }
}

/// Hooks for inspecting training as it runs.
pub trait Observer {
    fn phase_start(&mut self, _phase: usize, _set: &GaussianSet, _masks: Option<&[BinaryMask]>) {}

    /// Called after the optimizer update (and any densification) of 1-based step `t`.
    fn step(
        &mut self,
        _phase: usize,
        _t: usize,
        _set: &GaussianSet,
        _masks: Option<&[BinaryMask]>,
        _color_updated: bool,
        _densified: bool,
    ) {
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Shared state of one run.
pub struct Trainer<'a> {
    pub cfg: &'a PipelineConfig,
    pub data: &'a Dataset,
    ctx: RenderContext,
    loss: LossConfig,
    pub metrics: Vec<MetricsRow>,
    pub steps_taken: usize,
    adam: Option<Adam>,
}

fn with_context<T>(phase: usize, step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Pipeline {
        phase,
        step,
        source: Box::new(e),
    })
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a PipelineConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        Ok(Self {
            cfg,
            data,
            ctx: cfg.render_context(data.background),
            loss: cfg.loss.clone(),
            metrics: Vec::new(),
            steps_taken: 0,
            adam: None,
        })
    }

    /// Drops optimizer moments; the next phase starts with fresh ones.
    pub fn reset_optimizer(&mut self) {
        self.adam = None;
    }

    pub fn render_context(&self) -> &RenderContext {
        &self.ctx
    }

    pub fn render_train(&self, set: &GaussianSet) -> Vec<ImageBuffer> {
        self.data
            .train
            .par_iter()
            .map(|v| render(set, &v.camera, &self.ctx).0)
            .collect()
    }

    /// Discrepancy maps between training images and renders of `set`, for the
    /// masks entering `phase`.
    pub fn discrepancy_maps(&self, set: &GaussianSet, phase: usize) -> Result<Vec<DiscrepancyMap>> {
        let renders = self.render_train(set);
        self.data
            .train
            .par_iter()
            .zip(renders.par_iter())
            .enumerate()
            .map(|(v, (view, img))| discrepancy(&view.image, img, &self.cfg.transform(v, phase)?))
            .collect()
    }

    /// Masks `M^(k−1)` for `phase` k ≥ 2, computed from `prev` = Θ^(k−1).
    pub fn compute_masks(
        &self,
        prev: &GaussianSet,
        phase: usize,
    ) -> Result<(Vec<BinaryMask>, Option<Vec<DiscrepancyMap>>)> {
        let f = &self.cfg.filtering;
        if !f.masking {
            let masks = self
                .data
                .train
                .iter()
                .map(|v| BinaryMask::filled(v.camera.width, v.camera.height, true))
                .collect();
            return Ok((masks, None));
        }
        let q = *f
            .quantiles
            .get(phase - 2)
            .ok_or_else(|| Error::Config(format!("no threshold for phase {phase}")))?;
        let maps = self.discrepancy_maps(prev, phase)?;
        let masks = maps
            .par_iter()
            .map(|d| dilate_excluded(&make_mask(d, q), f.dilation_radius))
            .collect();
        Ok((masks, Some(maps)))
    }

    fn log_transform(&self) -> DiscrepancyTransform {
        let patch = self.cfg.filtering.patch_size;
        match self.cfg.filtering.metric {
            TransformKind::PatchPsnr => DiscrepancyTransform::PatchPsnr { patch },
            TransformKind::PatchSsim => DiscrepancyTransform::PatchSsim { patch },
            _ => DiscrepancyTransform::IdentityRgb,
        }
    }

    /// Evaluates `set` on every view. Train metrics compare against clean
    /// views when available; discrepancy columns use the training inputs.
    pub fn evaluate(
        &self,
        phase: usize,
        step: usize,
        set: &GaussianSet,
        masks: Option<&[BinaryMask]>,
    ) -> Result<MetricsRow> {
        let renders = self.render_train(set);
        let views = &self.data.train;
        let n_eval = match self.cfg.log.train_eval_views {
            0 => views.len(),
            k => k.min(views.len()),
        };
        let per_view: Vec<(f64, f64)> = (0..n_eval)
            .into_par_iter()
            .map(|v| {
                let target = views[v].clean.as_ref().unwrap_or(&views[v].image);
                Ok((psnr(&renders[v], target)?, image_ssim(&renders[v], target)?))
            })
            .collect::<Result<_>>()?;
        let train_psnr = per_view.iter().map(|p| p.0).sum::<f64>() / n_eval as f64;
        let train_ssim = per_view.iter().map(|p| p.1).sum::<f64>() / n_eval as f64;

        let holdout: Vec<(f64, f64)> = self
            .data
            .holdout
            .par_iter()
            .map(|v| {
                let (img, _) = render(set, &v.camera, &self.ctx);
                Ok((psnr(&img, &v.image)?, image_ssim(&img, &v.image)?))
            })
            .collect::<Result<_>>()?;
        let nh = holdout.len() as f64;
        let (holdout_psnr, holdout_ssim) = if holdout.is_empty() {
            (None, None)
        } else {
            (
                Some(holdout.iter().map(|p| p.0).sum::<f64>() / nh),
                Some(holdout.iter().map(|p| p.1).sum::<f64>() / nh),
            )
        };

        let gt: Option<Vec<&BinaryMask>> =
            views.iter().map(|v| v.distractor_mask.as_ref()).collect();
        let mask_iou = match (&gt, masks) {
            (Some(gt), Some(m)) => Some(mean_mask_iou(m, gt)),
            _ => None,
        };
        let (mut mean_disc_static, mut mean_disc_distractor) = (None, None);
        if let Some(gt) = &gt {
            let f = self.log_transform();
            let sums: Vec<[f64; 4]> = views
                .par_iter()
                .zip(renders.par_iter())
                .zip(gt.par_iter())
                .map(|((view, img), g)| {
                    let d = discrepancy(&view.image, img, &f)?;
                    let mut s = [0.0; 4];
                    for (&val, &dist) in d.values.iter().zip(&g.bits) {
                        let k = if dist { 2 } else { 0 };
                        s[k] += val as f64;
                        s[k + 1] += 1.0;
                    }
                    Ok(s)
                })
                .collect::<Result<_>>()?;
            let t = sums
                .iter()
                .fold([0.0; 4], |a, s| std::array::from_fn(|i| a[i] + s[i]));
            mean_disc_static = (t[1] > 0.0).then(|| t[0] / t[1]);
            mean_disc_distractor = (t[3] > 0.0).then(|| t[2] / t[3]);
        }
        Ok(MetricsRow {
            phase,
            step,
            train_psnr,
            train_ssim,
            holdout_psnr,
            holdout_ssim,
            mask_iou,
            num_gaussians: set.len(),
            mean_disc_static,
            mean_disc_distractor,
        })
    }

    /// Sets the structure-loss multiplier so the structure loss equals the
    /// combined loss, both averaged over all training views at `set`.
    fn auto_rescale(&mut self, set: &GaussianSet) -> Result<()> {
        let renders = self.render_train(set);
        let mut comb = 0.0;
        let mut structure = 0.0;
        let unit = LossConfig {
            structure_rescale: 1.0,
            ..self.loss.clone()
        };
        for (v, img) in self.data.train.iter().zip(&renders) {
            comb += loss_3dgs(img, &v.image, &unit)?.0 as f64;
            structure += loss_structure(img, &v.image, &unit)?.0 as f64;
        }
        if structure > 0.0 && comb > 0.0 {
            self.loss.structure_rescale = comb / structure;
        }
        Ok(())
    }

    /// Runs `steps_per_phase` optimization steps on `set`.
    #[allow(clippy::too_many_arguments)]
    fn optimize(
        &mut self,
        phase: usize,
        set: &mut GaussianSet,
        adam: &mut Adam,
        masks: Option<&[BinaryMask]>,
        kind: LossKind,
        sparse_color: bool,
        obs: &mut dyn Observer,
    ) -> Result<usize> {
        let total = self.cfg.phases.steps_per_phase;
        let period = if sparse_color {
            self.cfg.filtering.color_period
        } else {
            1
        };
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ (phase as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let mut order: Vec<usize> = Vec::new();
        let mut stats = DensifyStats::new(set.len());
        let color_before = adam.color_updates;
        let views = &self.data.train;
        for t in 1..=total {
            if order.is_empty() {
                order = (0..views.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let v = order.pop().expect("non-empty view order");
            let mut step = || -> Result<bool> {
                let (img, cache) = render(set, &views[v].camera, &self.ctx);
                let (_, dl) = masked_loss(
                    kind,
                    &img,
                    &views[v].image,
                    masks.map(|m| &m[v]),
                    &self.loss,
                )?;
                let grads = backward(&cache, &dl)?;
                stats.accumulate(&grads);
                let update_color = color_update_due(t, period);
                let rates = StepRates::at(&self.cfg.optim, self.data.extent, t - 1, total);
                adam.step(set, &grads, &rates, update_color);
                Ok(update_color)
            };
            let color_updated = with_context(phase, t, step())?;
            let mut densified = false;
            if densify_due(&self.cfg.densify, t, total) {
                let (next, origin, _) =
                    densify_and_prune(set, &stats, &self.cfg.densify, self.data.extent, &mut rng);
                *set = next;
                adam.remap(&origin);
                stats = DensifyStats::new(set.len());
                densified = true;
            }
            with_context(phase, t, set.validate())?;
            self.steps_taken += 1;
            obs.step(phase, t, set, masks, color_updated, densified);
            if t % self.cfg.log.interval == 0 || t == total {
                let row = with_context(phase, t, self.evaluate(phase, t, set, masks))?;
                self.metrics.push(row);
            }
        }
        if total == 0 {
            let row = with_context(phase, 0, self.evaluate(phase, 0, set, masks))?;
            self.metrics.push(row);
        }
        Ok(adam.color_updates - color_before)
    }

    /// Phase 1: unmasked training from the SfM points, SSIM-only when the
    /// structure loss is enabled.
    pub fn run_phase_1(&mut self, obs: &mut dyn Observer) -> Result<PhaseRecord> {
        let start = Instant::now();
        let mut set = with_context(
            1,
            0,
            init_from_sfm(&self.data.sfm, self.cfg.phases.sh_degree),
        )?;
        let f = &self.cfg.filtering;
        let kind = if f.structure_loss {
            LossKind::Structure
        } else {
            LossKind::Combined
        };
        if f.structure_loss && self.cfg.loss.auto_rescale {
            with_context(1, 0, self.auto_rescale(&set))?;
        }
        let mut adam = Adam::new(&self.cfg.optim, &set);
        obs.phase_start(1, &set, None);
        let sparse = self.cfg.filtering.sparse_color && self.cfg.phases.count > 1;
        let color_updates = self.optimize(1, &mut set, &mut adam, None, kind, sparse, obs)?;
        self.adam = Some(adam);
        Ok(PhaseRecord {
            phase: 1,
            set,
            masks: None,
            discrepancy: None,
            steps: self.cfg.phases.steps_per_phase,
            color_updates,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn start_set(&mut self, phase: usize, prev: &GaussianSet, reinit: bool) -> Result<GaussianSet> {
        if reinit {
            let set = with_context(
                phase,
                0,
                init_from_sfm(&self.data.sfm, self.cfg.phases.sh_degree),
            )?;
            self.adam = Some(Adam::new(&self.cfg.optim, &set));
            Ok(set)
        } else {
            if self.adam.is_none() {
                self.adam = Some(Adam::new(&self.cfg.optim, prev));
            }
            Ok(prev.clone())
        }
    }

    /// Filtering phase `k` (2 ≤ k < K): masks from Θ^(k−1), masked training of
    /// the combined loss, sparse color updates when enabled.
    pub fn run_filtering_phase(
        &mut self,
        phase: usize,
        prev: &GaussianSet,
        obs: &mut dyn Observer,
    ) -> Result<PhaseRecord> {
        let k_total = self.cfg.phases.count;
        if phase < 2 || phase >= k_total {
            return Err(Error::Contract(format!(
                "phase {phase} is not a filtering phase of {k_total}"
            )));
        }
        self.masked_phase(phase, prev, obs)
    }

    /// Final phase: masks from Θ^(K−1) held fixed, dense color updates.
    pub fn run_reconstruction_phase(
        &mut self,
        prev: &GaussianSet,
        obs: &mut dyn Observer,
    ) -> Result<PhaseRecord> {
        self.masked_phase(self.cfg.phases.count, prev, obs)
    }

    fn masked_phase(
        &mut self,
        phase: usize,
        prev: &GaussianSet,
        obs: &mut dyn Observer,
    ) -> Result<PhaseRecord> {
        let start = Instant::now();
        let last = phase == self.cfg.phases.count;
        let (masks, maps) = with_context(phase, 0, self.compute_masks(prev, phase))?;
        let reinit = match self.cfg.phases.reinit {
            ReinitMode::Always => true,
            ReinitMode::BetweenFiltering => !last,
            ReinitMode::Never => false,
        };
        let mut set = self.start_set(phase, prev, reinit)?;
        if last && self.cfg.phases.sh_reset {
            set.reset_higher_sh();
        }
        let sparse = !last && self.cfg.filtering.sparse_color;
        obs.phase_start(phase, &set, Some(&masks));
        let mut adam = self.adam.take().expect("optimizer state");
        let color_updates = self.optimize(
            phase,
            &mut set,
            &mut adam,
            Some(&masks),
            LossKind::Combined,
            sparse,
            obs,
        )?;
        self.adam = Some(adam);
        Ok(PhaseRecord {
            phase,
            set,
            masks: Some(masks),
            discrepancy: maps,
            steps: self.cfg.phases.steps_per_phase,
            color_updates,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn run(mut self, obs: &mut dyn Observer) -> Result<PipelineResult> {
        let k = self.cfg.phases.count;
        let mut phases = vec![self.run_phase_1(obs)?];
        for phase in 2..k {
            let rec = self.run_filtering_phase(phase, &phases.last().unwrap().set, obs)?;
            phases.push(rec);
        }
        let rec = self.run_reconstruction_phase(&phases.last().unwrap().set, obs)?;
        phases.push(rec);
        Ok(PipelineResult {
            phases,
            metrics: self.metrics,
            total_steps: self.steps_taken,
        })
    }
}

/// Runs every phase of `cfg` on `data`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    data: &Dataset,
    obs: &mut dyn Observer,
) -> Result<PipelineResult> {
    Trainer::new(cfg, data)?.run(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::sh::dc_to_rgb;
    use proptest::prelude::*;

    fn points(p: &[[f32; 3]]) -> SfmPoints {
        SfmPoints {
            positions: p.to_vec(),
            colors: vec![[0.5; 3]; p.len()],
        }
    }

    /// Mean distance to the min(3, M−1) nearest other points by full sort.
    fn brute_force_scale(p: &[[f32; 3]], i: usize) -> f64 {
        let mut d: Vec<f64> = (0..p.len())
            .filter(|&j| j != i)
            .map(|j| {
                (0..3)
                    .map(|a| (p[i][a] as f64 - p[j][a] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let k = 3.min(d.len());
        d[..k].iter().sum::<f64>() / k as f64
    }

    #[test]
    fn single_point() {
        let set = init_from_sfm(&points(&[[1.0, 2.0, 3.0]]), 1).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.positions[0], [1.0, 2.0, 3.0]);
        assert_eq!(set.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert!((crate::types::sigmoid(set.opacity_logits[0] as f64) - 0.1).abs() < 1e-6);
        assert!((set.log_scales[0][0] as f64 - LONE_POINT_SCALE.ln()).abs() < 1e-6);
    }

    #[test]
    fn gray_point_has_zero_dc() {
        let set = init_from_sfm(&points(&[[0.0; 3], [1.0, 0.0, 0.0]]), 2).unwrap();
        assert!(set.sh.iter().all(|c| *c == [0.0; 3]));
        let colored = SfmPoints {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            colors: vec![[0.9, 0.2, 0.4]; 2],
        };
        let set = init_from_sfm(&colored, 2).unwrap();
        for (c, want) in set.sh[0].iter().zip([0.9, 0.2, 0.4]) {
            assert!((dc_to_rgb(*c as f64) - want).abs() < 1e-6);
        }
        assert!(set.sh[1..9].iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn collinear_points_match_brute_force() {
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let set = init_from_sfm(&points(&p), 0).unwrap();
        for i in 0..3 {
            let want = brute_force_scale(&p, i).ln();
            assert!(set.log_scales[i]
                .iter()
                .all(|&s| (s as f64 - want).abs() < 1e-6));
        }
        assert!((set.log_scales[0][0] as f64 - 1.5f64.ln()).abs() < 1e-6);
        assert!(set.log_scales[1][0].abs() < 1e-6);
    }

    #[test]
    fn empty_points_rejected() {
        assert!(init_from_sfm(&points(&[]), 0).is_err());
    }

    proptest! {
        #[test]
        fn scales_match_brute_force(
            p in prop::collection::vec(prop::array::uniform3(-5.0f32..5.0), 2..40)
        ) {
            let set = init_from_sfm(&points(&p), 0).unwrap();
            for i in 0..p.len() {
                let want = brute_force_scale(&p, i).max(1e-7).ln();
                prop_assert!((set.log_scales[i][0] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn metrics_row_csv_leaves_missing_values_empty() {
        let row = MetricsRow {
            phase: 1,
            step: 10,
            train_psnr: 20.0,
            train_ssim: 0.5,
            holdout_psnr: None,
            holdout_ssim: Some(0.25),
            mask_iou: None,
            num_gaussians: 7,
            mean_disc_static: None,
            mean_disc_distractor: None,
        };
        assert_eq!(row.to_csv(), "1,10,20.000000,0.500000,,0.250000,,7,,");
        assert_eq!(
            METRICS_HEADER.split(',').count(),
            row.to_csv().split(',').count()
        );
    }
}
