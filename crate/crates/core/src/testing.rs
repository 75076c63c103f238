//! Helpers shared by unit, integration and acceptance tests: small random
//! scenes and a central finite-difference gradient oracle that only calls the
//! forward renderer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, ReinitMode};
use crate::pipeline::Observer;
use crate::render::{render, RenderContext};
use crate::types::{
    sh_coeff_count, BinaryMask, Camera, GaussianSet, GradientBuffer, ImageBuffer, SfmPoints,
};

/// Camera at the origin looking down +z with an identity transform.
pub fn identity_camera(width: usize, height: usize, focal: f64) -> Camera {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    Camera {
        world_to_camera: m,
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        near: 0.1,
        far: 100.0,
    }
}

/// A few random Gaussians in front of [`identity_camera`], with colors kept
/// away from the clamp limits and depths well separated.
pub fn random_scene(seed: u64, count: usize, sh_degree: usize) -> GaussianSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::empty(sh_degree);
    let ncoef = sh_coeff_count(sh_degree);
    for i in 0..count {
        let z = 3.0 + 0.45 * i as f64 + rng.gen_range(0.0..0.2);
        let pos = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), z];
        let ls = [
            rng.gen_range(0.12f64..0.35).ln(),
            rng.gen_range(0.12f64..0.35).ln(),
            rng.gen_range(0.12f64..0.35).ln(),
        ];
        let mut q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.iter_mut().for_each(|v| *v /= n);
        let opacity: f64 = rng.gen_range(0.3..0.85);
        let mut sh = vec![[0.0; 3]; ncoef];
        sh[0] = std::array::from_fn(|_| rng.gen_range(-0.8..0.8));
        for c in sh.iter_mut().skip(1) {
            *c = std::array::from_fn(|_| rng.gen_range(-0.12..0.12));
        }
        set.push(pos, ls, q, (opacity / (1.0 - opacity)).ln(), &sh);
    }
    set
}

/// Render context whose cutoffs are small enough that the image is smooth in
/// every parameter at finite-difference scale.
pub fn smooth_context() -> RenderContext {
    RenderContext {
        background: [0.3, 0.5, 0.7],
        alpha_min: 1e-9,
        transmittance_min: 1e-9,
        tile_size: 8,
    }
}

pub fn random_weights(seed: u64, width: usize, height: usize) -> ImageBuffer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ImageBuffer {
        width,
        height,
        rgb: (0..width * height * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    }
}

fn weighted_sum(img: &ImageBuffer<f64>, w: &ImageBuffer<f64>) -> f64 {
    img.rgb.iter().zip(&w.rgb).map(|(a, b)| a * b).sum()
}

/// Visits every scalar parameter of `set` in [`GradientBuffer::flatten_params`] order.
pub fn for_each_param(
    set: &mut GaussianSet<f64>,
    mut f: impl FnMut(&mut GaussianSet<f64>, usize, ParamRef),
) {
    let n = set.len();
    let mut flat = 0;
    for i in 0..n {
        for a in 0..3 {
            f(set, flat, ParamRef::Position(i, a));
            flat += 1;
        }
    }
    for i in 0..n {
        for a in 0..3 {
            f(set, flat, ParamRef::LogScale(i, a));
            flat += 1;
        }
    }
    for i in 0..n {
        for a in 0..4 {
            f(set, flat, ParamRef::Rotation(i, a));
            flat += 1;
        }
    }
    for i in 0..n {
        f(set, flat, ParamRef::Opacity(i));
        flat += 1;
    }
    for j in 0..set.sh.len() {
        for a in 0..3 {
            f(set, flat, ParamRef::Sh(j, a));
            flat += 1;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ParamRef {
    Position(usize, usize),
    LogScale(usize, usize),
    Rotation(usize, usize),
    Opacity(usize),
    Sh(usize, usize),
}

impl ParamRef {
    pub fn get_mut(self, set: &mut GaussianSet<f64>) -> &mut f64 {
        match self {
            ParamRef::Position(i, a) => &mut set.positions[i][a],
            ParamRef::LogScale(i, a) => &mut set.log_scales[i][a],
            ParamRef::Rotation(i, a) => &mut set.rotations[i][a],
            ParamRef::Opacity(i) => &mut set.opacity_logits[i],
            ParamRef::Sh(j, a) => &mut set.sh[j][a],
        }
    }
}

/// Central finite differences of `sum(weights ⊙ render(set))` for every parameter.
pub fn finite_difference_gradient(
    set: &GaussianSet<f64>,
    cam: &Camera,
    ctx: &RenderContext,
    weights: &ImageBuffer<f64>,
    h: f64,
) -> Vec<f64> {
    let mut work = set.clone();
    let mut out = Vec::new();
    for_each_param(&mut work, |s, _, p| {
        let orig = *p.get_mut(s);
        *p.get_mut(s) = orig + h;
        let plus = weighted_sum(&render(s, cam, ctx).0, weights);
        *p.get_mut(s) = orig - h;
        let minus = weighted_sum(&render(s, cam, ctx).0, weights);
        *p.get_mut(s) = orig;
        out.push((plus - minus) / (2.0 * h));
    });
    out
}

/// Absolute floor in the relative-error denominator; gradients below it are
/// compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Largest relative error between the renderer's analytic backward pass and
/// finite differences on one random scene.
pub fn render_gradcheck(seed: u64, count: usize, sh_degree: usize, size: usize) -> f64 {
    let set = random_scene(seed, count, sh_degree);
    let cam = identity_camera(size, size, size as f64);
    let ctx = smooth_context();
    let weights = random_weights(seed, size, size);
    let (_, cache) = render(&set, &cam, &ctx);
    let grads: GradientBuffer<f64> = crate::render::backward(&cache, &weights).unwrap();
    let analytic = grads.flatten_params();
    let numeric = finite_difference_gradient(&set, &cam, &ctx, &weights, 1e-5);
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// 32×32 version of the benchmark scene: 8 ring cameras, 6 training views.
pub fn tiny_spec(seed: u64) -> crate::synthscene::SceneSpec {
    let mut s = crate::synthscene::base_spec(seed);
    s.width = 32;
    s.height = 32;
    s.ring.count = 8;
    s.holdout = vec![3, 7];
    s.distractors = vec![Vec::new(); 6];
    s.sfm_points = 200;
    s
}

pub fn tiny_dataset(coverage: f64) -> crate::dataset::Dataset {
    let mut spec = tiny_spec(3);
    if coverage > 0.0 {
        crate::synthscene::place_distractors(&mut spec, coverage, 11);
    }
    crate::synthscene::generate(&spec).expect("tiny scene generates")
}

/// Short K-phase run with densification early enough to fire.
pub fn tiny_config(phases: usize, steps: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_phase_count(phases);
    cfg.phases.steps_per_phase = steps;
    cfg.log.interval = steps.max(1);
    cfg.densify.start_step = 10;
    cfg.densify.interval = 10;
    cfg
}

fn mask_digest(masks: &[BinaryMask]) -> u64 {
    let mut h = DefaultHasher::new();
    for m in masks {
        m.width.hash(&mut h);
        m.bits.hash(&mut h);
    }
    h.finish()
}

/// Records every violation of the color-freeze, mask-fixity and re-init
/// invariants seen during a run.
pub struct InvariantObserver {
    pub phases: usize,
    pub period: usize,
    pub reinit: ReinitMode,
    pub sfm_positions: Vec<[f32; 3]>,
    pub violations: Vec<String>,
    /// Steps at which sh coefficients were compared bitwise to the snapshot.
    pub frozen_checks: usize,
    pub fixity_checks: usize,
    pub reinit_checks: usize,
    snapshot: Vec<[f32; 3]>,
    digest: Option<u64>,
}

impl InvariantObserver {
    pub fn new(cfg: &PipelineConfig, sfm: &SfmPoints) -> Self {
        Self {
            phases: cfg.phases.count,
            period: cfg.filtering.color_period,
            reinit: cfg.phases.reinit,
            sfm_positions: sfm.positions.clone(),
            violations: Vec::new(),
            frozen_checks: 0,
            fixity_checks: 0,
            reinit_checks: 0,
            snapshot: Vec::new(),
            digest: None,
        }
    }
}

impl Observer for InvariantObserver {
    fn phase_start(&mut self, phase: usize, set: &GaussianSet, masks: Option<&[BinaryMask]>) {
        self.snapshot = set.sh.clone();
        self.digest = masks.map(mask_digest);
        if phase > 1 && masks.is_none() {
            self.violations
                .push(format!("phase {phase} started without masks"));
        }
        if phase > 1 && phase < self.phases && self.reinit == ReinitMode::BetweenFiltering {
            self.reinit_checks += 1;
            if set.positions != self.sfm_positions {
                self.violations
                    .push(format!("phase {phase} did not start from the SfM points"));
            }
        }
    }

    fn step(
        &mut self,
        phase: usize,
        t: usize,
        set: &GaussianSet,
        masks: Option<&[BinaryMask]>,
        color_updated: bool,
        densified: bool,
    ) {
        if phase < self.phases {
            let due = t.is_multiple_of(self.period);
            if color_updated != due {
                self.violations.push(format!(
                    "phase {phase} step {t}: color update flag {color_updated}"
                ));
            }
            if !due {
                self.frozen_checks += 1;
                let frozen = if densified {
                    // Densified rows must copy some pre-existing row verbatim.
                    set.sh.chunks(set.coeffs_per_gaussian()).all(|row| {
                        self.snapshot
                            .chunks(set.coeffs_per_gaussian())
                            .any(|s| s == row)
                    })
                } else {
                    set.sh == self.snapshot
                };
                if !frozen {
                    self.violations
                        .push(format!("phase {phase} step {t}: colors moved off schedule"));
                }
            }
            self.snapshot = set.sh.clone();
        } else {
            self.fixity_checks += 1;
            if masks.map(mask_digest) != self.digest {
                self.violations
                    .push(format!("reconstruction step {t}: masks changed"));
            }
        }
    }
}

/// Dilation oracle: a pixel stays kept only if no excluded pixel lies within
/// the (2r+1)² square around it.
pub fn dilate_brute(m: &BinaryMask, r: usize) -> BinaryMask {
    let mut out = m.clone();
    let r = r as isize;
    for y in 0..m.height as isize {
        for x in 0..m.width as isize {
            let mut any_zero = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < m.width as isize && yy < m.height as isize {
                        any_zero |= !m.get(xx as usize, yy as usize);
                    }
                }
            }
            out.set(x as usize, y as usize, !any_zero);
        }
    }
    out
}

pub fn random_image(seed: u64, w: usize, h: usize) -> ImageBuffer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer {
        width: w,
        height: h,
        rgb: (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

/// Largest relative error between `analytic` and central differences of a
/// scalar image function `f` at `x`.
pub fn fd_check(
    f: impl Fn(&ImageBuffer<f64>) -> f64,
    x: &ImageBuffer<f64>,
    analytic: &ImageBuffer<f64>,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut work = x.clone();
    for i in 0..x.rgb.len() {
        let orig = work.rgb[i];
        work.rgb[i] = orig + h;
        let p = f(&work);
        work.rgb[i] = orig - h;
        let m = f(&work);
        work.rgb[i] = orig;
        let num = (p - m) / (2.0 * h);
        let a = analytic.rgb[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
    }
    worst
}

/// Finite-difference errors of the combined and structure losses on one
/// random 16×16 pair.
pub fn loss_gradcheck(seed: u64) -> (f64, f64) {
    use crate::objectives::{loss_3dgs, loss_structure, LossConfig};
    let cfg = LossConfig::default();
    let r = random_image(2 * seed, 16, 16);
    let gt = random_image(2 * seed + 1, 16, 16);
    let (_, g) = loss_3dgs(&r, &gt, &cfg).unwrap();
    let combined = fd_check(|x| loss_3dgs(x, &gt, &cfg).unwrap().0, &r, &g);
    let (_, g) = loss_structure(&r, &gt, &cfg).unwrap();
    let structure = fd_check(|x| loss_structure(x, &gt, &cfg).unwrap().0, &r, &g);
    (combined, structure)
}
