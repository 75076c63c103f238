//! Differentiable CPU rasterizer for Gaussian sets.
//!
//! Forward: project, globally depth-sort (ties broken by Gaussian index), bin
//! into tiles and alpha-composite front to back. The forward pass records the
//! per-pixel blend state so [`backward`] can replay it exactly.

pub(crate) mod project;
pub mod sh;

use rayon::prelude::*;

use project::{mat3_mul, Mat3};
pub use project::{project, Projected, SCREEN_BLUR};

use crate::error::{Error, Result};
use crate::types::{Camera, GaussianSet, GradientBuffer, ImageBuffer, Real};

/// Upper clamp on per-splat alpha.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderContext {
    pub background: [f64; 3],
    /// Contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Compositing stops before transmittance would drop below this.
    pub transmittance_min: f64,
    /// Tile edge in pixels; 0 renders the whole frame as one tile.
    pub tile_size: usize,
}

impl Default for RenderContext {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            tile_size: 16,
        }
    }
}

impl RenderContext {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min > 0.0 && self.alpha_min < 0.5) {
            return Err(Error::Config("alpha_min must lie in (0, 0.5)".into()));
        }
        if !(self.transmittance_min > 0.0 && self.transmittance_min < 0.1) {
            return Err(Error::Config(
                "transmittance_min must lie in (0, 0.1)".into(),
            ));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Contribution<T> {
    /// Index into the owning tile's splat list.
    slot: u32,
    alpha: T,
    /// Transmittance in front of this splat.
    trans: T,
    /// Unclamped Gaussian falloff `exp(power)`.
    falloff: T,
}

#[derive(Clone, Debug)]
struct Tile<T> {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Indices into the sorted projection list, front to back.
    splats: Vec<u32>,
    /// Per-pixel ranges into `contribs`, row-major within the tile.
    offsets: Vec<u32>,
    contribs: Vec<Contribution<T>>,
    final_trans: Vec<T>,
}

/// Everything [`backward`] needs to replay a [`render`] call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    pub width: usize,
    pub height: usize,
    pub num_gaussians: usize,
    pub sh_degree: usize,
    background: [T; 3],
    fx: T,
    fy: T,
    cam_rot: Mat3<T>,
    /// Visible projections in front-to-back order.
    pub projections: Vec<Projected<T>>,
    tiles: Vec<Tile<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Total number of stored per-pixel contributions.
    pub fn contribution_count(&self) -> usize {
        self.tiles.iter().map(|t| t.contribs.len()).sum()
    }

    /// Blend weights of pixel `(x, y)`: `(gaussian id, weight)` per splat and the
    /// background weight.
    pub fn pixel_weights(&self, x: usize, y: usize) -> (Vec<(usize, T)>, T) {
        for tile in &self.tiles {
            if x >= tile.x0 && x < tile.x1 && y >= tile.y0 && y < tile.y1 {
                let local = (y - tile.y0) * (tile.x1 - tile.x0) + (x - tile.x0);
                let (a, b) = (
                    tile.offsets[local] as usize,
                    tile.offsets[local + 1] as usize,
                );
                let w = tile.contribs[a..b]
                    .iter()
                    .map(|c| {
                        let p = &self.projections[tile.splats[c.slot as usize] as usize];
                        (p.id, c.alpha * c.trans)
                    })
                    .collect();
                return (w, tile.final_trans[local]);
            }
        }
        panic!("pixel ({x}, {y}) outside image");
    }
}

/// Pixel-space bounding box of the region where a splat can reach `alpha_min`.
fn splat_bounds<T: Real>(
    p: &Projected<T>,
    alpha_min: f64,
    w: usize,
    h: usize,
) -> Option<[usize; 4]> {
    let o = p.opacity.to_f64().unwrap();
    if o < alpha_min {
        return None;
    }
    // alpha >= alpha_min  <=>  dᵀ Σ⁻¹ d <= 2 ln(o / alpha_min)
    let r2 = 2.0 * (o / alpha_min).ln();
    let ex = (r2 * p.cov2d[0].to_f64().unwrap()).sqrt() + 1.0;
    let ey = (r2 * p.cov2d[2].to_f64().unwrap()).sqrt() + 1.0;
    let mx = p.mean2d[0].to_f64().unwrap();
    let my = p.mean2d[1].to_f64().unwrap();
    let x0 = (mx - ex).ceil().max(0.0);
    let y0 = (my - ey).ceil().max(0.0);
    let x1 = (mx + ex).floor().min(w as f64 - 1.0);
    let y1 = (my + ey).floor().min(h as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, y0 as usize, x1 as usize + 1, y1 as usize + 1])
}

fn sort_front_to_back<T: Real>(proj: &mut [Projected<T>]) {
    proj.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
}

fn build_tiles<T: Real>(
    proj: &[Projected<T>],
    ctx: &RenderContext,
    w: usize,
    h: usize,
) -> Vec<Tile<T>> {
    let ts = ctx.tile_size;
    let (tw, th) = if ts == 0 { (w, h) } else { (ts, ts) };
    let nx = w.div_ceil(tw);
    let ny = h.div_ceil(th);
    let mut tiles: Vec<Tile<T>> = (0..nx * ny)
        .map(|t| {
            let (tx, ty) = (t % nx, t / nx);
            Tile {
                x0: tx * tw,
                y0: ty * th,
                x1: ((tx + 1) * tw).min(w),
                y1: ((ty + 1) * th).min(h),
                splats: Vec::new(),
                offsets: Vec::new(),
                contribs: Vec::new(),
                final_trans: Vec::new(),
            }
        })
        .collect();
    for (k, p) in proj.iter().enumerate() {
        let Some([x0, y0, x1, y1]) = splat_bounds(p, ctx.alpha_min, w, h) else {
            continue;
        };
        for ty in y0 / th..=(y1 - 1) / th {
            for tx in x0 / tw..=(x1 - 1) / tw {
                tiles[ty * nx + tx].splats.push(k as u32);
            }
        }
    }
    tiles
}

fn composite_tile<T: Real>(
    tile: &mut Tile<T>,
    proj: &[Projected<T>],
    ctx: &RenderContext,
    bg: [T; 3],
) -> Vec<T> {
    let half = T::lit(0.5);
    let alpha_max = T::lit(ALPHA_MAX);
    let alpha_min = T::lit(ctx.alpha_min);
    let t_min = T::lit(ctx.transmittance_min);
    let npix = (tile.x1 - tile.x0) * (tile.y1 - tile.y0);
    let mut colors = Vec::with_capacity(npix * 3);
    tile.offsets.clear();
    tile.offsets.reserve(npix + 1);
    tile.offsets.push(0);
    tile.final_trans.clear();
    tile.contribs.clear();
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let (px, py) = (T::lit(x as f64), T::lit(y as f64));
            let mut trans = T::one();
            let mut c = [T::zero(); 3];
            for (slot, &k) in tile.splats.iter().enumerate() {
                let p = &proj[k as usize];
                let dx = px - p.mean2d[0];
                let dy = py - p.mean2d[1];
                let power =
                    -half * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
                if power > T::zero() {
                    continue;
                }
                let falloff = power.exp();
                let alpha = (p.opacity * falloff).min(alpha_max);
                if alpha < alpha_min {
                    continue;
                }
                let next = trans * (T::one() - alpha);
                if next < t_min {
                    break;
                }
                let wgt = alpha * trans;
                for ch in 0..3 {
                    c[ch] = c[ch] + p.color[ch] * wgt;
                }
                tile.contribs.push(Contribution {
                    slot: slot as u32,
                    alpha,
                    trans,
                    falloff,
                });
                trans = next;
            }
            for ch in 0..3 {
                colors.push(c[ch] + trans * bg[ch]);
            }
            tile.final_trans.push(trans);
            tile.offsets.push(tile.contribs.len() as u32);
        }
    }
    colors
}

/// Renders `set` from `cam`. Deterministic: repeated calls are bit-identical and
/// the tiled path matches the untiled one up to summation reassociation.
pub fn render<T: Real>(
    set: &GaussianSet<T>,
    cam: &Camera,
    ctx: &RenderContext,
) -> (ImageBuffer<T>, ForwardCache<T>) {
    let (w, h) = (cam.width, cam.height);
    let mut proj = project(set, cam);
    sort_front_to_back(&mut proj);
    let mut tiles = build_tiles(&proj, ctx, w, h);
    let bg = ctx.background.map(T::lit);
    let tile_colors: Vec<Vec<T>> = tiles
        .par_iter_mut()
        .map(|tile| composite_tile(tile, &proj, ctx, bg))
        .collect();

    let mut image = ImageBuffer::new(w, h);
    for (tile, colors) in tiles.iter().zip(&tile_colors) {
        let tw = tile.x1 - tile.x0;
        for y in tile.y0..tile.y1 {
            let src = (y - tile.y0) * tw * 3;
            let dst = (y * w + tile.x0) * 3;
            image.rgb[dst..dst + tw * 3].copy_from_slice(&colors[src..src + tw * 3]);
        }
    }
    let cache = ForwardCache {
        width: w,
        height: h,
        num_gaussians: set.len(),
        sh_degree: set.sh_degree,
        background: bg,
        fx: T::lit(cam.fx),
        fy: T::lit(cam.fy),
        cam_rot: project::camera_rotation(cam),
        projections: proj,
        tiles,
    };
    (image, cache)
}

/// Image-space gradients gathered per projection during the pixel sweep.
#[derive(Clone, Copy, Default)]
struct SplatGrad<T> {
    mean: [T; 2],
    conic: [T; 3],
    color: [T; 3],
    opacity: T,
}

impl<T: Real> SplatGrad<T> {
    fn zero() -> Self {
        Self {
            mean: [T::zero(); 2],
            conic: [T::zero(); 3],
            color: [T::zero(); 3],
            opacity: T::zero(),
        }
    }

    fn add(&mut self, o: &Self) {
        for i in 0..2 {
            self.mean[i] = self.mean[i] + o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] = self.conic[i] + o.conic[i];
            self.color[i] = self.color[i] + o.color[i];
        }
        self.opacity = self.opacity + o.opacity;
    }
}

fn backward_tile<T: Real>(
    tile: &Tile<T>,
    proj: &[Projected<T>],
    bg: [T; 3],
    dl_dimage: &[T],
    width: usize,
) -> Vec<SplatGrad<T>> {
    let half = T::lit(0.5);
    let alpha_max = T::lit(ALPHA_MAX);
    let mut acc = vec![SplatGrad::zero(); tile.splats.len()];
    let tw = tile.x1 - tile.x0;
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let local = (y - tile.y0) * tw + (x - tile.x0);
            let base = (y * width + x) * 3;
            let g = [dl_dimage[base], dl_dimage[base + 1], dl_dimage[base + 2]];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let (a, b) = (
                tile.offsets[local] as usize,
                tile.offsets[local + 1] as usize,
            );
            // Normalized color of everything behind the current splat.
            let mut behind = bg;
            let (px, py) = (T::lit(x as f64), T::lit(y as f64));
            for c in tile.contribs[a..b].iter().rev() {
                let slot = c.slot as usize;
                let p = &proj[tile.splats[slot] as usize];
                let sg = &mut acc[slot];
                let wgt = c.alpha * c.trans;
                let mut dl_dalpha = T::zero();
                for ch in 0..3 {
                    sg.color[ch] = sg.color[ch] + wgt * g[ch];
                    dl_dalpha = dl_dalpha + c.trans * (p.color[ch] - behind[ch]) * g[ch];
                    behind[ch] = c.alpha * p.color[ch] + (T::one() - c.alpha) * behind[ch];
                }
                if p.opacity * c.falloff > alpha_max {
                    continue;
                }
                sg.opacity = sg.opacity + dl_dalpha * c.falloff;
                let dl_dpower = dl_dalpha * c.alpha;
                let dx = px - p.mean2d[0];
                let dy = py - p.mean2d[1];
                let [qa, qb, qc] = p.conic;
                sg.mean[0] = sg.mean[0] + dl_dpower * (qa * dx + qb * dy);
                sg.mean[1] = sg.mean[1] + dl_dpower * (qb * dx + qc * dy);
                sg.conic[0] = sg.conic[0] - half * dx * dx * dl_dpower;
                sg.conic[1] = sg.conic[1] - dx * dy * dl_dpower;
                sg.conic[2] = sg.conic[2] - half * dy * dy * dl_dpower;
            }
        }
    }
    acc
}

/// Exact gradients of `sum(dl_dimage ⊙ image)` w.r.t. every Gaussian parameter.
///
/// The returned buffer's `screen_grad_accum` holds `|dL/dmean2d|` and
/// `update_count` is 1 for every Gaussian that touched at least one pixel.
pub fn backward<T: Real>(
    cache: &ForwardCache<T>,
    dl_dimage: &ImageBuffer<T>,
) -> Result<GradientBuffer<T>> {
    if dl_dimage.width != cache.width || dl_dimage.height != cache.height {
        return Err(Error::Contract(format!(
            "gradient image is {}x{} but render was {}x{}",
            dl_dimage.width, dl_dimage.height, cache.width, cache.height
        )));
    }
    let proj = &cache.projections;
    let partials: Vec<Vec<SplatGrad<T>>> = cache
        .tiles
        .par_iter()
        .map(|tile| backward_tile(tile, proj, cache.background, &dl_dimage.rgb, cache.width))
        .collect();

    let mut per_splat = vec![SplatGrad::zero(); proj.len()];
    let mut touched = vec![false; proj.len()];
    for (tile, part) in cache.tiles.iter().zip(&partials) {
        for (slot, g) in part.iter().enumerate() {
            let k = tile.splats[slot] as usize;
            per_splat[k].add(g);
            touched[k] = true;
        }
    }

    let mut grads = GradientBuffer::zeros(cache.num_gaussians, cache.sh_degree);
    let ncoef = crate::types::sh_coeff_count(cache.sh_degree);
    for (k, p) in proj.iter().enumerate() {
        if !touched[k] {
            continue;
        }
        let sg = &per_splat[k];
        let id = p.id;
        let one = T::one();
        let two = T::lit(2.0);

        grads.opacity_logits[id] = sg.opacity * p.opacity * (one - p.opacity);

        // Color -> SH coefficients and view direction.
        let gcol: [T; 3] = std::array::from_fn(|ch| {
            if p.color_active[ch] {
                sg.color[ch]
            } else {
                T::zero()
            }
        });
        for j in 0..ncoef {
            let dst = &mut grads.sh[id * ncoef + j];
            for ch in 0..3 {
                dst[ch] = p.sh_basis[j] * gcol[ch];
            }
        }
        let mut dpos = [T::zero(); 3];
        for ch in 0..3 {
            for a in 0..3 {
                dpos[a] = dpos[a] + gcol[ch] * p.dcolor_dpos[ch][a];
            }
        }

        // Conic -> 2D covariance: dΣ2 = -Q G Q.
        let q = [[p.conic[0], p.conic[1]], [p.conic[1], p.conic[2]]];
        let gq = [
            [sg.conic[0], sg.conic[1] / two],
            [sg.conic[1] / two, sg.conic[2]],
        ];
        let mut qg = [[T::zero(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                qg[i][j] = q[i][0] * gq[0][j] + q[i][1] * gq[1][j];
            }
        }
        let mut g2 = [[T::zero(); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                g2[i][j] = -(qg[i][0] * q[0][j] + qg[i][1] * q[1][j]);
            }
        }

        // Σ2 = M Σ3 Mᵀ with M = J W.
        let wr = &cache.cam_rot;
        let mut m = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = p.jac[r][0] * wr[0][c] + p.jac[r][1] * wr[1][c] + p.jac[r][2] * wr[2][c];
            }
        }
        // dΣ3 = Mᵀ G2 M
        let mut g2m = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                g2m[r][c] = g2[r][0] * m[0][c] + g2[r][1] * m[1][c];
            }
        }
        let mut g3 = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g3[i][j] = m[0][i] * g2m[0][j] + m[1][i] * g2m[1][j];
            }
        }
        // dM = 2 G2 M Σ3
        let mut dm = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut s = T::zero();
                for k2 in 0..3 {
                    s = s + g2m[r][k2] * p.cov3d[k2][c];
                }
                dm[r][c] = two * s;
            }
        }
        // dJ = dM Wᵀ
        let mut dj = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                dj[r][c] = dm[r][0] * wr[c][0] + dm[r][1] * wr[c][1] + dm[r][2] * wr[c][2];
            }
        }

        let [x, y, z] = p.p_cam;
        let (fx, fy) = (cache.fx, cache.fy);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut dpc = [T::zero(); 3];
        dpc[0] = dj[0][2] * (-fx / z2) + sg.mean[0] * fx / z;
        dpc[1] = dj[1][2] * (-fy / z2) + sg.mean[1] * fy / z;
        dpc[2] = dj[0][0] * (-fx / z2)
            + dj[0][2] * (two * fx * x / z3)
            + dj[1][1] * (-fy / z2)
            + dj[1][2] * (two * fy * y / z3)
            - sg.mean[0] * fx * x / z2
            - sg.mean[1] * fy * y / z2;
        for a in 0..3 {
            dpos[a] = dpos[a] + wr[0][a] * dpc[0] + wr[1][a] * dpc[1] + wr[2][a] * dpc[2];
        }
        grads.positions[id] = dpos;

        // Σ3 = (R S)(R S)ᵀ
        let mut m3 = p.rot;
        for row in m3.iter_mut() {
            for c in 0..3 {
                row[c] = row[c] * p.scale[c];
            }
        }
        let g3m3 = mat3_mul(&g3, &m3);
        let dm3: Mat3<T> = g3m3.map(|row| row.map(|v| two * v));
        let mut dls = [T::zero(); 3];
        let mut drot = [[T::zero(); 3]; 3];
        for c in 0..3 {
            let mut s = T::zero();
            for i in 0..3 {
                s = s + dm3[i][c] * p.rot[i][c];
                drot[i][c] = dm3[i][c] * p.scale[c];
            }
            dls[c] = s * p.scale[c];
        }
        grads.log_scales[id] = dls;
        grads.rotations[id] = rot_grad_to_quat(&drot, p.quat_unit, p.quat_norm);

        let sn = (sg.mean[0] * sg.mean[0] + sg.mean[1] * sg.mean[1]).sqrt();
        grads.screen_grad_accum[id] = sn;
        grads.update_count[id] = 1;
    }
    Ok(grads)
}

fn rot_grad_to_quat<T: Real>(dr: &Mat3<T>, qu: [T; 4], qnorm: T) -> [T; 4] {
    let [w, x, y, z] = qu;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let zero = T::zero();
    let dw = [
        [zero, -two * z, two * y],
        [two * z, zero, -two * x],
        [-two * y, two * x, zero],
    ];
    let dx = [
        [zero, two * y, two * z],
        [two * y, -four * x, -two * w],
        [two * z, two * w, -four * x],
    ];
    let dy = [
        [-four * y, two * x, two * w],
        [two * x, zero, two * z],
        [-two * w, two * z, -four * y],
    ];
    let dz = [
        [-four * z, -two * w, two * x],
        [two * w, -four * z, two * y],
        [two * x, two * y, zero],
    ];
    let contract = |d: &Mat3<T>| {
        let mut s = zero;
        for i in 0..3 {
            for j in 0..3 {
                s = s + d[i][j] * dr[i][j];
            }
        }
        s
    };
    let gu = [contract(&dw), contract(&dx), contract(&dy), contract(&dz)];
    let dot = gu[0] * w + gu[1] * x + gu[2] * y + gu[3] * z;
    [
        (gu[0] - w * dot) / qnorm,
        (gu[1] - x * dot) / qnorm,
        (gu[2] - y * dot) / qnorm,
        (gu[3] - z * dot) / qnorm,
    ]
}
