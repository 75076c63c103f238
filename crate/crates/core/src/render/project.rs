//! EWA projection of 3D Gaussians into screen-space ellipses.

use crate::render::sh;
use crate::types::{Camera, GaussianSet, Real};

/// Screen-space blur added to every projected covariance, in px².
pub const SCREEN_BLUR: f64 = 0.3;

pub(crate) type Mat3<T> = [[T; 3]; 3];

/// A Gaussian that survived near/far culling, with everything the backward
/// pass needs to chain gradients back to the 3D parameters.
#[derive(Clone, Debug)]
pub struct Projected<T: Real> {
    pub id: usize,
    pub mean2d: [T; 2],
    /// Symmetric 2×2 covariance packed as (xx, xy, yy), blur included.
    pub cov2d: [T; 3],
    /// Inverse of `cov2d`, packed the same way.
    pub conic: [T; 3],
    pub depth: T,
    /// Unit direction from the camera center to the Gaussian, world frame.
    pub view_dir: [T; 3],
    pub opacity: T,
    /// Clamped display color.
    pub color: [T; 3],
    pub(crate) color_active: [bool; 3],
    pub(crate) p_cam: [T; 3],
    pub(crate) rot: Mat3<T>,
    pub(crate) scale: [T; 3],
    pub(crate) quat_norm: T,
    pub(crate) quat_unit: [T; 4],
    pub(crate) cov3d: Mat3<T>,
    pub(crate) jac: [[T; 3]; 2],
    pub(crate) sh_basis: [T; 16],
    /// d(raw color)/d(world position), rows = channels.
    pub(crate) dcolor_dpos: Mat3<T>,
}

pub(crate) fn quat_to_rot<T: Real>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

pub(crate) fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn mat3_transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub(crate) fn camera_rotation<T: Real>(cam: &Camera) -> Mat3<T> {
    cam.rotation().map(|r| r.map(T::lit))
}

/// Projects every Gaussian in front of the near plane (and before the far plane).
///
/// Culled Gaussians are simply absent from the output; `id` refers back to
/// the index in `set`.
pub fn project<T: Real>(set: &GaussianSet<T>, cam: &Camera) -> Vec<Projected<T>> {
    let w = camera_rotation::<T>(cam);
    let t = cam.translation().map(T::lit);
    let center = cam.center().map(T::lit);
    let (fx, fy) = (T::lit(cam.fx), T::lit(cam.fy));
    let (cx, cy) = (T::lit(cam.cx), T::lit(cam.cy));
    let near = T::lit(cam.near);
    let far = T::lit(cam.far);
    let blur = T::lit(SCREEN_BLUR);
    let ncoef = set.coeffs_per_gaussian();
    let half = T::lit(0.5);

    let mut out = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let p = set.positions[i];
        let pc = [
            w[0][0] * p[0] + w[0][1] * p[1] + w[0][2] * p[2] + t[0],
            w[1][0] * p[0] + w[1][1] * p[1] + w[1][2] * p[2] + t[1],
            w[2][0] * p[0] + w[2][1] * p[1] + w[2][2] * p[2] + t[2],
        ];
        let z = pc[2];
        if z < near || z > far {
            continue;
        }
        let mean2d = [fx * pc[0] / z + cx, fy * pc[1] / z + cy];

        let q = set.rotations[i];
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let qu = [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn];
        let rot = quat_to_rot(qu);
        let scale = set.log_scales[i].map(|v| v.exp());
        // M3 = R S, Σ = M3 M3ᵀ
        let mut m3 = rot;
        for row in m3.iter_mut() {
            for k in 0..3 {
                row[k] = row[k] * scale[k];
            }
        }
        let cov3d = mat3_mul(&m3, &mat3_transpose(&m3));

        let jac = [
            [fx / z, T::zero(), -fx * pc[0] / (z * z)],
            [T::zero(), fy / z, -fy * pc[1] / (z * z)],
        ];
        // M = J W (2×3)
        let mut m = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = jac[r][0] * w[0][c] + jac[r][1] * w[1][c] + jac[r][2] * w[2][c];
            }
        }
        // Σ2 = M Σ Mᵀ
        let mut ms = [[T::zero(); 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                ms[r][c] = m[r][0] * cov3d[0][c] + m[r][1] * cov3d[1][c] + m[r][2] * cov3d[2][c];
            }
        }
        let sxx = ms[0][0] * m[0][0] + ms[0][1] * m[0][1] + ms[0][2] * m[0][2] + blur;
        let sxy = ms[0][0] * m[1][0] + ms[0][1] * m[1][1] + ms[0][2] * m[1][2];
        let syy = ms[1][0] * m[1][0] + ms[1][1] * m[1][1] + ms[1][2] * m[1][2] + blur;
        let det = sxx * syy - sxy * sxy;
        if !(det > T::zero()) {
            continue;
        }
        let conic = [syy / det, -sxy / det, sxx / det];

        // View-dependent color.
        let v = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let vlen = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let dir = [v[0] / vlen, v[1] / vlen, v[2] / vlen];
        let (basis, dbasis) = sh::basis_with_grad(dir, ncoef);
        let coeffs = set.sh_of(i);
        let mut raw = [half; 3];
        let mut dcol_ddir = [[T::zero(); 3]; 3];
        for (k, c) in coeffs.iter().enumerate() {
            for ch in 0..3 {
                raw[ch] = raw[ch] + c[ch] * basis[k];
                for a in 0..3 {
                    dcol_ddir[ch][a] = dcol_ddir[ch][a] + c[ch] * dbasis[k][a];
                }
            }
        }
        // d dir / d v = (I - dir dirᵀ) / |v|
        let mut dcolor_dpos = [[T::zero(); 3]; 3];
        for ch in 0..3 {
            let g = dcol_ddir[ch];
            let proj = g[0] * dir[0] + g[1] * dir[1] + g[2] * dir[2];
            for a in 0..3 {
                dcolor_dpos[ch][a] = (g[a] - dir[a] * proj) / vlen;
            }
        }
        let color_active = raw.map(|c| c >= T::zero() && c <= T::one());
        let color = raw.map(|c| c.max(T::zero()).min(T::one()));

        out.push(Projected {
            id: i,
            mean2d,
            cov2d: [sxx, sxy, syy],
            conic,
            depth: z,
            view_dir: dir,
            opacity: crate::types::sigmoid(set.opacity_logits[i]),
            color,
            color_active,
            p_cam: pc,
            rot,
            scale,
            quat_norm: qn,
            quat_unit: qu,
            cov3d,
            jac,
            sh_basis: basis,
            dcolor_dpos,
        });
    }
    out
}
