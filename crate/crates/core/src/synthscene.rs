//! Synthetic benchmark scenes: a static Gaussian scene seen from a camera ring,
//! with per-view transient distractors, exact distractor masks and SfM-like
//! seed points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::{Dataset, HoldoutView, TrainView};
use crate::error::{Error, Result};
use crate::io::quantize;
use crate::render::sh::rgb_to_dc;
use crate::render::{render, RenderContext};
use crate::types::{logit, BinaryMask, Camera, GaussianSet, ImageBuffer, SfmPoints};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub target: [f64; 3],
    pub fov_x_deg: f64,
}

/// Static geometry, expanded into surface Gaussians spaced `spacing` apart.
#[derive(Clone, Debug, PartialEq)]
pub enum StaticPrimitive {
    /// Horizontal checkerboard at height `center[2]`.
    Plane {
        center: [f64; 3],
        half_size: f64,
        spacing: f64,
        tile: f64,
        colors: [[f64; 3]; 2],
    },
    /// Sphere with `bands` alternating latitude stripes.
    Sphere {
        center: [f64; 3],
        radius: f64,
        spacing: f64,
        bands: usize,
        colors: [[f64; 3]; 2],
    },
    /// Axis-aligned box with one color per face (−x, +x, −y, +y, −z, +z).
    Cuboid {
        center: [f64; 3],
        half: [f64; 3],
        spacing: f64,
        face_colors: [[f64; 3]; 6],
    },
}

/// A transient object present in exactly one training view.
#[derive(Clone, Debug, PartialEq)]
pub struct Distractor {
    pub center: [f64; 3],
    /// Ellipsoid semi-axes along the world axes.
    pub radii: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    /// Number of Gaussians filling the ellipsoid; 1 gives a single isotropic
    /// Gaussian with standard deviation `radii[0]`.
    pub parts: usize,
    pub layout_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub ring: CameraRing,
    /// Ring indices used for evaluation only; the rest are training views in ring order.
    pub holdout: Vec<usize>,
    pub statics: Vec<StaticPrimitive>,
    /// One list per training view.
    pub distractors: Vec<Vec<Distractor>>,
    pub background: [f64; 3],
    pub sfm_points: usize,
    /// Standard deviation of SfM position noise as a fraction of the extent.
    pub sfm_noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Occlusion {
    Low,
    Medium,
    High,
}

impl Occlusion {
    pub const ALL: [Occlusion; 3] = [Occlusion::Low, Occlusion::Medium, Occlusion::High];

    /// Target mean fraction of occluded pixels per training view.
    pub fn target_coverage(self) -> f64 {
        match self {
            Occlusion::Low => 0.05,
            Occlusion::Medium => 0.15,
            Occlusion::High => 0.25,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Occlusion::Low => "low",
            Occlusion::Medium => "med",
            Occlusion::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Occlusion::Low),
            "med" | "medium" => Ok(Occlusion::Medium),
            "high" => Ok(Occlusion::High),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

const MIN_COVERAGE: f64 = 0.01;
const MAX_COVERAGE: f64 = 0.30;

impl SceneSpec {
    pub fn cameras(&self) -> Vec<Camera> {
        let r = &self.ring;
        let el = r.elevation_deg.to_radians();
        (0..r.count)
            .map(|i| {
                let az = std::f64::consts::TAU * i as f64 / r.count as f64;
                let eye = [
                    r.target[0] + r.radius * el.cos() * az.cos(),
                    r.target[1] + r.radius * el.cos() * az.sin(),
                    r.target[2] + r.radius * el.sin(),
                ];
                Camera::look_at(
                    eye,
                    r.target,
                    [0.0, 0.0, 1.0],
                    r.fov_x_deg,
                    self.width,
                    self.height,
                )
            })
            .collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.ring.count)
            .filter(|i| !self.holdout.contains(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Invariant("image must be at least 16×16".into()));
        }
        if self.holdout.iter().any(|&i| i >= self.ring.count) {
            return Err(Error::Invariant(
                "holdout index outside the camera ring".into(),
            ));
        }
        let n_train = self.train_indices().len();
        if n_train < 2 {
            return Err(Error::Invariant("need at least two training views".into()));
        }
        if self.distractors.len() != n_train {
            return Err(Error::Invariant(format!(
                "{} distractor lists for {n_train} training views",
                self.distractors.len()
            )));
        }
        if self.sfm_points == 0 {
            return Err(Error::Invariant("sfm_points must be positive".into()));
        }
        for d in self.distractors.iter().flatten() {
            if d.parts == 0
                || !(d.opacity > 0.0 && d.opacity < 1.0)
                || d.radii.iter().any(|&r| r <= 0.0)
            {
                return Err(Error::Invariant("malformed distractor".into()));
            }
        }
        Ok(())
    }
}

fn push_flat(
    set: &mut GaussianSet,
    pos: [f64; 3],
    sigma: [f64; 3],
    normal: [f64; 3],
    rgb: [f64; 3],
) {
    let q = quat_from_z_to(normal);
    set.push(
        pos.map(|v| v as f32),
        sigma.map(|s| s.ln() as f32),
        q.map(|v| v as f32),
        logit(0.98) as f32,
        &[rgb.map(|c| rgb_to_dc(c) as f32)],
    );
}

/// Unit quaternion (w, x, y, z) rotating +z onto `n`.
fn quat_from_z_to(n: [f64; 3]) -> [f64; 4] {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    let n = n.map(|v| v / len);
    let w = 1.0 + n[2];
    if w < 1e-9 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let q = [w, -n[1], n[0], 0.0];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / norm)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|i| a[i] * (1.0 - t) + b[i] * t)
}

impl StaticPrimitive {
    fn emit(&self, set: &mut GaussianSet) {
        match *self {
            StaticPrimitive::Plane {
                center,
                half_size,
                spacing,
                tile,
                colors,
            } => {
                let n = (2.0 * half_size / spacing).round() as i64;
                for iy in 0..n {
                    for ix in 0..n {
                        let x = center[0] - half_size + (ix as f64 + 0.5) * spacing;
                        let y = center[1] - half_size + (iy as f64 + 0.5) * spacing;
                        let parity = ((x / tile).floor() + (y / tile).floor()) as i64 & 1;
                        let shade = 0.85 + 0.15 * (1.7 * x).sin() * (1.3 * y).cos();
                        let rgb = colors[parity as usize].map(|c| (c * shade).clamp(0.0, 1.0));
                        push_flat(
                            set,
                            [x, y, center[2]],
                            [0.6 * spacing, 0.6 * spacing, 0.1 * spacing],
                            [0.0, 0.0, 1.0],
                            rgb,
                        );
                    }
                }
            }
            StaticPrimitive::Sphere {
                center,
                radius,
                spacing,
                bands,
                colors,
            } => {
                let count = (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing))
                    .ceil() as usize;
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                for i in 0..count {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    let n = [r * th.cos(), r * th.sin(), z];
                    let band =
                        (((z + 1.0) / 2.0 * bands as f64).floor() as usize).min(bands - 1) % 2;
                    let rgb = lerp3(colors[band], [1.0; 3], 0.1 * (0.5 + 0.5 * (3.0 * th).sin()));
                    let pos = std::array::from_fn(|a| center[a] + radius * n[a]);
                    push_flat(
                        set,
                        pos,
                        [0.6 * spacing, 0.6 * spacing, 0.1 * spacing],
                        n,
                        rgb,
                    );
                }
            }
            StaticPrimitive::Cuboid {
                center,
                half,
                spacing,
                face_colors,
            } => {
                for (face, rgb) in face_colors.iter().enumerate() {
                    let axis = face / 2;
                    let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    let nu = (2.0 * half[u] / spacing).round().max(1.0) as usize;
                    let nv = (2.0 * half[v] / spacing).round().max(1.0) as usize;
                    let mut normal = [0.0; 3];
                    normal[axis] = sign;
                    for iu in 0..nu {
                        for iv in 0..nv {
                            let mut p = center;
                            p[axis] += sign * half[axis];
                            p[u] += -half[u] + (iu as f64 + 0.5) * 2.0 * half[u] / nu as f64;
                            p[v] += -half[v] + (iv as f64 + 0.5) * 2.0 * half[v] / nv as f64;
                            let edge = ((iu == 0 || iu + 1 == nu) || (iv == 0 || iv + 1 == nv))
                                as u8 as f64;
                            let c = lerp3(*rgb, [0.05; 3], 0.5 * edge);
                            push_flat(
                                set,
                                p,
                                [0.6 * spacing, 0.6 * spacing, 0.1 * spacing],
                                normal,
                                c,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Ground-truth Gaussians of the static scene (SH degree 0).
pub fn static_gaussians(spec: &SceneSpec) -> GaussianSet {
    let mut set = GaussianSet::empty(0);
    for p in &spec.statics {
        p.emit(&mut set);
    }
    set
}

impl Distractor {
    pub fn gaussians(&self) -> GaussianSet {
        let mut set = GaussianSet::empty(0);
        let op = logit(self.opacity) as f32;
        if self.parts == 1 {
            set.push(
                self.center.map(|v| v as f32),
                [self.radii[0].ln() as f32; 3],
                [1.0, 0.0, 0.0, 0.0],
                op,
                &[self.color.map(|c| rgb_to_dc(c) as f32)],
            );
            return set;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed);
        let rmin = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let sigma = 0.15 * rmin;
        for _ in 0..self.parts {
            let p = loop {
                let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break u;
                }
            };
            let pos: [f64; 3] =
                std::array::from_fn(|a| self.center[a] + 0.85 * self.radii[a] * p[a]);
            let tint: f64 = rng.gen_range(-0.08..0.08);
            let rgb = self.color.map(|c| (c + tint).clamp(0.0, 1.0));
            set.push(
                pos.map(|v| v as f32),
                [sigma.ln() as f32; 3],
                [1.0, 0.0, 0.0, 0.0],
                op,
                &[rgb.map(|c| rgb_to_dc(c) as f32)],
            );
        }
        set
    }
}

fn gt_context(spec: &SceneSpec) -> RenderContext {
    RenderContext {
        background: spec.background,
        ..RenderContext::default()
    }
}

/// Pixels touched by at least one splat of `set`.
fn support(set: &GaussianSet, cam: &Camera, ctx: &RenderContext) -> BinaryMask {
    let (_, cache) = render(set, cam, ctx);
    let mut m = BinaryMask::filled(cam.width, cam.height, false);
    for y in 0..cam.height {
        for x in 0..cam.width {
            if !cache.pixel_weights(x, y).0.is_empty() {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn distractor_set(list: &[Distractor]) -> GaussianSet {
    let mut set = GaussianSet::empty(0);
    for d in list {
        set.extend_from(&d.gaussians());
    }
    set
}

/// Renders every view and derives masks and seed points.
pub fn generate(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let gt = static_gaussians(spec);
    let cams = spec.cameras();
    let ctx = gt_context(spec);
    let train_idx = spec.train_indices();

    let train: Vec<TrainView> = train_idx
        .par_iter()
        .enumerate()
        .map(|(v, &ci)| -> Result<TrainView> {
            let cam = &cams[ci];
            let (clean, _) = render(&gt, cam, &ctx);
            let mut scene = gt.clone();
            for d in &spec.distractors[v] {
                let own = support(&d.gaussians(), cam, &ctx);
                let frac = own.count_ones() as f64 / (cam.width * cam.height) as f64;
                if !(MIN_COVERAGE..=MAX_COVERAGE).contains(&frac) {
                    return Err(Error::Invariant(format!(
                        "distractor in view {v} covers {:.1}% of pixels",
                        100.0 * frac
                    )));
                }
            }
            scene.extend_from(&distractor_set(&spec.distractors[v]));
            let (corrupted, _) = render(&scene, cam, &ctx);
            let mut mask = BinaryMask::filled(cam.width, cam.height, false);
            for (i, (a, b)) in clean
                .rgb
                .chunks_exact(3)
                .zip(corrupted.rgb.chunks_exact(3))
                .enumerate()
            {
                mask.bits[i] = a != b;
            }
            let (mut clean, mut image) = (clean, corrupted);
            quantize(&mut clean);
            quantize(&mut image);
            Ok(TrainView {
                camera: cam.clone(),
                image,
                clean: Some(clean),
                distractor_mask: Some(mask),
            })
        })
        .collect::<Result<_>>()?;

    let holdout: Vec<HoldoutView> = spec
        .holdout
        .par_iter()
        .map(|&ci| {
            let (mut image, _) = render(&gt, &cams[ci], &ctx);
            quantize(&mut image);
            HoldoutView {
                camera: cams[ci].clone(),
                image,
            }
        })
        .collect();

    let (lo, hi) = bounds(&gt);
    let extent = 0.5 * (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt();
    let clean_views: Vec<(&Camera, &ImageBuffer)> = train
        .iter()
        .map(|v| (&v.camera, v.clean.as_ref().unwrap()))
        .collect();
    let sfm = sample_sfm(spec, &gt, extent, &clean_views);
    let ds = Dataset {
        name: spec.name.clone(),
        train,
        holdout,
        sfm,
        background: spec.background,
        extent,
    };
    ds.validate()?;
    Ok(ds)
}

/// Axis-aligned bounds of the Gaussian centers.
pub fn bounds(set: &GaussianSet) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &set.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] as f64);
            hi[a] = hi[a].max(p[a] as f64);
        }
    }
    (lo, hi)
}

/// Samples ground-truth centers with truncated Gaussian noise and colors each
/// point by averaging the clean views in which it passes a z-buffer test.
fn sample_sfm(
    spec: &SceneSpec,
    gt: &GaussianSet,
    extent: f64,
    views: &[(&Camera, &ImageBuffer)],
) -> SfmPoints {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5f3d_0000);
    let sigma = spec.sfm_noise * extent;
    let n = spec.sfm_points.min(gt.len());
    let picks = rand::seq::index::sample(&mut rng, gt.len(), n).into_vec();
    let mut picks = picks;
    picks.sort_unstable();
    let positions: Vec<[f32; 3]> = picks
        .iter()
        .map(|&i| {
            std::array::from_fn(|a| {
                let z: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
                (gt.positions[i][a] as f64 + sigma * z) as f32
            })
        })
        .collect();

    let zbufs: Vec<Vec<f64>> = views
        .par_iter()
        .map(|(cam, _)| {
            let mut z = vec![f64::INFINITY; cam.width * cam.height];
            for p in &gt.positions {
                if let Some((px, d)) = cam.project_point(p.map(|v| v as f64)) {
                    let (x, y) = (px[0].round() as i64, px[1].round() as i64);
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx >= 0
                                && yy >= 0
                                && (xx as usize) < cam.width
                                && (yy as usize) < cam.height
                            {
                                let k = yy as usize * cam.width + xx as usize;
                                z[k] = z[k].min(d);
                            }
                        }
                    }
                }
            }
            z
        })
        .collect();

    let tol = 0.04 * extent;
    let colors = positions
        .iter()
        .map(|p| {
            let mut sum = [0.0f64; 3];
            let mut n = 0usize;
            for ((cam, img), z) in views.iter().zip(&zbufs) {
                if let Some((px, d)) = cam.project_point(p.map(|v| v as f64)) {
                    let (x, y) = (px[0].round() as i64, px[1].round() as i64);
                    if x < 0 || y < 0 || x as usize >= cam.width || y as usize >= cam.height {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    if d <= z[y * cam.width + x] + tol {
                        let c = img.get(x, y);
                        for a in 0..3 {
                            sum[a] += c[a] as f64;
                        }
                        n += 1;
                    }
                }
            }
            if n == 0 {
                [0.5; 3]
            } else {
                sum.map(|s| (s / n as f64) as f32)
            }
        })
        .collect();
    SfmPoints { positions, colors }
}

/// The shared static scene and camera ring used by every preset.
pub fn base_spec(seed: u64) -> SceneSpec {
    let spacing = 0.05;
    let ring = CameraRing {
        count: 32,
        radius: 4.0,
        elevation_deg: 30.0,
        target: [0.0, 0.0, 0.3],
        fov_x_deg: 55.0,
    };
    let holdout: Vec<usize> = (0..ring.count).filter(|i| i % 4 == 2).collect();
    let n_train = ring.count - holdout.len();
    SceneSpec {
        name: "base".into(),
        seed,
        width: 64,
        height: 64,
        ring,
        holdout,
        statics: vec![
            StaticPrimitive::Plane {
                center: [0.0, 0.0, 0.0],
                half_size: 1.6,
                spacing,
                tile: 0.4,
                colors: [[0.78, 0.72, 0.6], [0.32, 0.38, 0.48]],
            },
            StaticPrimitive::Sphere {
                center: [-0.55, 0.35, 0.45],
                radius: 0.45,
                spacing,
                bands: 6,
                colors: [[0.85, 0.3, 0.2], [0.92, 0.82, 0.35]],
            },
            StaticPrimitive::Cuboid {
                center: [0.6, -0.45, 0.35],
                half: [0.3, 0.3, 0.35],
                spacing,
                face_colors: [
                    [0.2, 0.5, 0.8],
                    [0.25, 0.65, 0.35],
                    [0.7, 0.7, 0.75],
                    [0.55, 0.3, 0.6],
                    [0.3, 0.3, 0.3],
                    [0.9, 0.9, 0.85],
                ],
            },
            StaticPrimitive::Sphere {
                center: [0.35, 0.75, 0.25],
                radius: 0.25,
                spacing,
                bands: 3,
                colors: [[0.35, 0.2, 0.55], [0.4, 0.75, 0.8]],
            },
        ],
        distractors: vec![Vec::new(); n_train],
        background: [0.0; 3],
        sfm_points: 1500,
        sfm_noise: 0.005,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Places one or two distractors per training view and rescales them until
/// each view's occluded fraction matches its target.
pub fn place_distractors(spec: &mut SceneSpec, coverage: f64, seed: u64) {
    let cams = spec.cameras();
    let train = spec.train_indices();
    let ctx = gt_context(spec);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(usize, f64, Vec<Distractor>)> = train
        .iter()
        .map(|&ci| {
            let cam = &cams[ci];
            let target = (coverage * rng.gen_range(0.8..1.2)).clamp(0.02, 0.29);
            let count = if target / 2.0 >= 0.015 && rng.gen_bool(0.5) {
                2
            } else {
                1
            };
            let dist_to_target = {
                let c = cam.center();
                (0..3)
                    .map(|a| (c[a] - spec.ring.target[a]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let list = (0..count)
                .map(|_| {
                    let u = rng.gen_range(0.2 * w..0.8 * w);
                    let vv = rng.gen_range(0.25 * h..0.8 * h);
                    let depth = dist_to_target * rng.gen_range(0.45..0.7);
                    let center = unproject(cam, [u, vv], depth);
                    let r_px = (target / count as f64 * w * h / std::f64::consts::PI).sqrt();
                    let r = r_px * depth / cam.fx;
                    let hue = rng.gen_range(0.0..1.0);
                    Distractor {
                        center,
                        radii: [
                            r,
                            r * rng.gen_range(0.75..1.25),
                            r * rng.gen_range(0.75..1.25),
                        ],
                        color: hsv(hue, 0.85, 0.95),
                        opacity: 0.97,
                        parts: 64,
                        layout_seed: rng.gen(),
                    }
                })
                .collect();
            (ci, target, list)
        })
        .collect();

    spec.distractors = plans
        .into_par_iter()
        .map(|(ci, target, mut list)| {
            let cam = &cams[ci];
            let total = (cam.width * cam.height) as f64;
            for _ in 0..6 {
                let measured =
                    support(&distractor_set(&list), cam, &ctx).count_ones() as f64 / total;
                let s = (target / measured.max(1e-4)).sqrt().clamp(0.5, 2.0);
                if (measured - target).abs() < 0.002 {
                    break;
                }
                for d in list.iter_mut() {
                    d.radii = d.radii.map(|r| r * s);
                }
            }
            list
        })
        .collect();
}

/// World point at camera depth `depth` along the ray through pixel `px`.
pub fn unproject(cam: &Camera, px: [f64; 2], depth: f64) -> [f64; 3] {
    let pc = [
        (px[0] - cam.cx) / cam.fx * depth,
        (px[1] - cam.cy) / cam.fy * depth,
        depth,
    ];
    let r = cam.rotation();
    let t = cam.translation();
    let d = [pc[0] - t[0], pc[1] - t[1], pc[2] - t[2]];
    std::array::from_fn(|a| r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2])
}

pub fn preset(level: Occlusion) -> SceneSpec {
    let mut spec = base_spec(7);
    spec.name = level.name().into();
    let seed = 1000 + level as u64;
    place_distractors(&mut spec, level.target_coverage(), seed);
    spec
}

/// Low, medium and high occlusion presets over the same static scene.
pub fn benchmark_presets() -> Vec<SceneSpec> {
    Occlusion::ALL.iter().map(|&l| preset(l)).collect()
}

/// Mean fraction of distractor pixels over training views.
pub fn mean_coverage(ds: &Dataset) -> f64 {
    let fr: Vec<f64> = ds
        .train
        .iter()
        .filter_map(|v| v.distractor_mask.as_ref())
        .map(|m| m.count_ones() as f64 / m.bits.len() as f64)
        .collect();
    fr.iter().sum::<f64>() / fr.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SceneSpec {
        crate::testing::tiny_spec(3)
    }

    #[test]
    fn zero_distractors_give_clean_views() {
        let ds = generate(&tiny_spec()).unwrap();
        for v in &ds.train {
            assert_eq!(&v.image, v.clean.as_ref().unwrap());
            assert_eq!(v.distractor_mask.as_ref().unwrap().count_ones(), 0);
        }
        assert_eq!(ds.holdout.len(), 2);
    }

    #[test]
    fn quaternion_maps_z_to_normal() {
        for n in [
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.3, 0.4, -0.5],
            [0.0, 0.0, -1.0],
        ] {
            let q = quat_from_z_to(n);
            let r = crate::render::project::quat_to_rot(q);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            for a in 0..3 {
                assert!((r[a][2] - n[a] / len).abs() < 1e-12, "{n:?}");
            }
        }
    }

    #[test]
    fn unproject_inverts_projection() {
        let spec = tiny_spec();
        let cam = &spec.cameras()[1];
        let p = unproject(cam, [10.5, 20.25], 2.5);
        let (px, d) = cam.project_point(p).unwrap();
        assert!((px[0] - 10.5).abs() < 1e-9 && (px[1] - 20.25).abs() < 1e-9);
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = tiny_spec();
        place_distractors(&mut spec, 0.1, 5);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }
}
