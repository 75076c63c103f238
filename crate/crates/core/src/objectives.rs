//! Photometric losses and their gradients w.r.t. the rendered image.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03² and
//! reflect padding at the borders. The combined loss uses DSSIM = (1 − SSIM)/2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageBuffer, Real};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the DSSIM term in the combined loss.
    pub lambda_dssim: f64,
    /// Multiplier on the structure-only loss.
    pub structure_rescale: f64,
    /// Recompute `structure_rescale` at phase start so both losses have equal magnitude.
    pub auto_rescale: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            structure_rescale: 1.0,
            auto_rescale: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::Config("lambda_dssim must lie in [0,1]".into()));
        }
        if !(self.structure_rescale > 0.0) {
            return Err(Error::Config("structure_rescale must be positive".into()));
        }
        Ok(())
    }
}

fn window_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Reflect-101 indexing (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Single-channel plane used by the windowed statistics.
struct Plane<T> {
    w: usize,
    h: usize,
    v: Vec<T>,
}

impl<T: Real> Plane<T> {
    fn from_channel(img: &ImageBuffer<T>, ch: usize) -> Self {
        Self {
            w: img.width,
            h: img.height,
            v: img.rgb.iter().skip(ch).step_by(3).copied().collect(),
        }
    }

    fn map2(&self, o: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn blur(&self, taps: &[T]) -> Self {
        let tmp = self.pass(taps, true, false);
        tmp.pass(taps, false, false)
    }

    /// Adjoint of [`Plane::blur`].
    fn blur_adjoint(&self, taps: &[T]) -> Self {
        let tmp = self.pass(taps, false, true);
        tmp.pass(taps, true, true)
    }

    fn pass(&self, taps: &[T], horizontal: bool, adjoint: bool) -> Self {
        let r = (taps.len() / 2) as isize;
        let mut out = vec![T::zero(); self.v.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let src = self.v[y * self.w + x];
                let mut acc = T::zero();
                for (k, &t) in taps.iter().enumerate() {
                    let off = k as isize - r;
                    let idx = if horizontal {
                        y * self.w + reflect(x as isize + off, self.w)
                    } else {
                        reflect(y as isize + off, self.h) * self.w + x
                    };
                    if adjoint {
                        out[idx] = out[idx] + t * src;
                    } else {
                        acc = acc + t * self.v[idx];
                    }
                }
                if !adjoint {
                    out[y * self.w + x] = acc;
                }
            }
        }
        Self {
            w: self.w,
            h: self.h,
            v: out,
        }
    }
}

fn check_shapes<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<()> {
    a.check_same_shape(b)
}

/// Windowed SSIM and, optionally, its gradient w.r.t. `a`.
fn ssim_impl<T: Real>(
    a: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
    want_grad: bool,
) -> Result<(T, Option<ImageBuffer<T>>)> {
    check_shapes(a, b)?;
    let taps: Vec<T> = window_taps().iter().map(|&t| T::lit(t)).collect();
    let c1 = T::lit(SSIM_C1);
    let c2 = T::lit(SSIM_C2);
    let two = T::lit(2.0);
    let n = a.pixel_count();
    let norm = T::lit((3 * n) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| ImageBuffer::new(a.width, a.height));
    for ch in 0..3 {
        let pa = Plane::from_channel(a, ch);
        let pb = Plane::from_channel(b, ch);
        let mu_a = pa.blur(&taps);
        let mu_b = pb.blur(&taps);
        let e_aa = pa.map2(&pa, |x, y| x * y).blur(&taps);
        let e_bb = pb.map2(&pb, |x, y| x * y).blur(&taps);
        let e_ab = pa.map2(&pb, |x, y| x * y).blur(&taps);
        let mut d_mu = Vec::with_capacity(if want_grad { n } else { 0 });
        let mut d_eaa = Vec::with_capacity(d_mu.capacity());
        let mut d_eab = Vec::with_capacity(d_mu.capacity());
        for i in 0..n {
            let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
            let a1 = two * ma * mb + c1;
            let a2 = two * (e_ab.v[i] - ma * mb) + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = (e_aa.v[i] - ma * ma) + (e_bb.v[i] - mb * mb) + c2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            total = total + s;
            if want_grad {
                let ds_dmu = (two * mb * a2 - two * mb * a1) / d
                    - a1 * a2 * (two * ma * b2 - two * ma * b1) / (d * d);
                d_mu.push(ds_dmu);
                d_eaa.push(-s / b2);
                d_eab.push(two * a1 / d);
            }
        }
        if let Some(g) = grad.as_mut() {
            let wrap = |v| Plane {
                w: a.width,
                h: a.height,
                v,
            };
            let g_mu = wrap(d_mu).blur_adjoint(&taps);
            let g_eaa = wrap(d_eaa).blur_adjoint(&taps);
            let g_eab = wrap(d_eab).blur_adjoint(&taps);
            for i in 0..n {
                g.rgb[i * 3 + ch] =
                    (g_mu.v[i] + two * pa.v[i] * g_eaa.v[i] + pb.v[i] * g_eab.v[i]) / norm;
            }
        }
    }
    Ok((total / norm, grad))
}

/// Mean windowed SSIM over all pixels and channels.
pub fn ssim<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<T> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM together with its gradient w.r.t. `a`.
pub fn ssim_with_grad<T: Real>(
    a: &ImageBuffer<T>,
    b: &ImageBuffer<T>,
) -> Result<(T, ImageBuffer<T>)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Mean absolute difference over pixels and channels.
pub fn loss_l1<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<T> {
    check_shapes(a, b)?;
    let s: T = a.rgb.iter().zip(&b.rgb).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(s / T::lit(a.rgb.len() as f64))
}

fn l1_with_grad<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<(T, ImageBuffer<T>)> {
    let loss = loss_l1(a, b)?;
    let inv = T::one() / T::lit(a.rgb.len() as f64);
    let rgb = a
        .rgb
        .iter()
        .zip(&b.rgb)
        .map(|(&x, &y)| {
            if x > y {
                inv
            } else if x < y {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((
        loss,
        ImageBuffer {
            width: a.width,
            height: a.height,
            rgb,
        },
    ))
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)/2` and its gradient w.r.t. `render`.
pub fn loss_3dgs<T: Real>(
    render: &ImageBuffer<T>,
    gt: &ImageBuffer<T>,
    cfg: &LossConfig,
) -> Result<(T, ImageBuffer<T>)> {
    let lambda = T::lit(cfg.lambda_dssim);
    let one = T::one();
    let half = T::lit(0.5);
    let (l1, mut grad) = l1_with_grad(render, gt)?;
    if cfg.lambda_dssim == 0.0 {
        return Ok((l1, grad));
    }
    let (s, gs) = ssim_with_grad(render, gt)?;
    for (g, d) in grad.rgb.iter_mut().zip(&gs.rgb) {
        *g = (one - lambda) * *g - lambda * half * *d;
    }
    Ok(((one - lambda) * l1 + lambda * (one - s) * half, grad))
}

/// `c·(1 − SSIM)/2` and its gradient w.r.t. `render`.
pub fn loss_structure<T: Real>(
    render: &ImageBuffer<T>,
    gt: &ImageBuffer<T>,
    cfg: &LossConfig,
) -> Result<(T, ImageBuffer<T>)> {
    let c = T::lit(cfg.structure_rescale);
    let half = T::lit(0.5);
    let (s, mut g) = ssim_with_grad(render, gt)?;
    for v in g.rgb.iter_mut() {
        *v = -c * half * *v;
    }
    Ok((c * (T::one() - s) * half, g))
}

/// Pointwise product of an image with a mask; excluded pixels become exact zeros.
pub fn apply_mask<T: Real>(img: &ImageBuffer<T>, m: &BinaryMask) -> Result<ImageBuffer<T>> {
    if img.width != m.width || img.height != m.height {
        return Err(Error::ShapeMismatch {
            expected: (img.width, img.height),
            found: (m.width, m.height),
        });
    }
    let mut out = img.clone();
    for (i, &keep) in m.bits.iter().enumerate() {
        if !keep {
            out.rgb[i * 3..i * 3 + 3].fill(T::zero());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Combined,
    Structure,
}

/// Evaluates a loss on masked images. The gradient is w.r.t. the unmasked
/// render, so excluded pixels receive exactly zero.
pub fn masked_loss<T: Real>(
    kind: LossKind,
    render: &ImageBuffer<T>,
    gt: &ImageBuffer<T>,
    mask: Option<&BinaryMask>,
    cfg: &LossConfig,
) -> Result<(T, ImageBuffer<T>)> {
    let Some(mask) = mask else {
        return match kind {
            LossKind::Combined => loss_3dgs(render, gt, cfg),
            LossKind::Structure => loss_structure(render, gt, cfg),
        };
    };
    let r = apply_mask(render, mask)?;
    let g = apply_mask(gt, mask)?;
    let (loss, grad) = match kind {
        LossKind::Combined => loss_3dgs(&r, &g, cfg)?,
        LossKind::Structure => loss_structure(&r, &g, cfg)?,
    };
    Ok((loss, apply_mask(&grad, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{fd_check, random_image};

    /// Naive SSIM: explicit 2D window sums per pixel with reflect padding.
    fn ssim_naive(a: &ImageBuffer<f64>, b: &ImageBuffer<f64>) -> f64 {
        let taps = window_taps();
        let r = (SSIM_WINDOW / 2) as isize;
        let (w, h) = (a.width, a.height);
        let mut total = 0.0;
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let yy = reflect(y as isize + ky as isize - r, h);
                            let xx = reflect(x as isize + kx as isize - r, w);
                            let wt = taps[ky] * taps[kx];
                            let va = a.get(xx, yy)[ch];
                            let vb = b.get(xx, yy)[ch];
                            ma += wt * va;
                            mb += wt * vb;
                            aa += wt * va * va;
                            bb += wt * vb * vb;
                            ab += wt * va * vb;
                        }
                    }
                    let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * (ab - ma * mb) + SSIM_C2);
                    let den =
                        (ma * ma + mb * mb + SSIM_C1) * ((aa - ma * ma) + (bb - mb * mb) + SSIM_C2);
                    total += num / den;
                }
            }
        }
        total / (3 * w * h) as f64
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 3), 1);
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random_image(1, 20, 17);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_zero_vs_one() {
        let a = ImageBuffer::filled(16, 16, [0.0f64; 3]);
        let b = ImageBuffer::filled(16, 16, [1.0f64; 3]);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn ssim_symmetric_and_matches_naive() {
        for seed in 0..3 {
            let a = random_image(seed, 18, 16);
            let b = random_image(seed + 100, 18, 16);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((ab - ssim_naive(&a, &b)).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = random_image(0, 16, 16);
        let b = random_image(0, 17, 16);
        assert!(matches!(ssim(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(loss_l1(&a, &b).is_err());
    }

    #[test]
    fn l1_cases() {
        let a = random_image(3, 16, 16);
        assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
        let z = ImageBuffer::filled(16, 16, [0.0f64; 3]);
        let o = ImageBuffer::filled(16, 16, [1.0f64; 3]);
        assert_eq!(loss_l1(&z, &o).unwrap(), 1.0);
        let b = random_image(4, 16, 16);
        let mut naive = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                for ch in 0..3 {
                    naive += (a.get(x, y)[ch] - b.get(x, y)[ch]).abs();
                }
            }
        }
        naive /= (16 * 16 * 3) as f64;
        assert!((loss_l1(&a, &b).unwrap() - naive).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_identical_images_is_zero() {
        let a = random_image(5, 16, 16);
        let (l, g) = loss_3dgs(&a, &a, &LossConfig::default()).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.rgb.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let r = random_image(6, 16, 16);
        let gt = random_image(7, 16, 16);
        let (_, g) = loss_3dgs(&r, &gt, &cfg).unwrap();
        let err = fd_check(|x| loss_3dgs(x, &gt, &cfg).unwrap().0, &r, &g);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn structure_loss_gradient_and_linearity() {
        let mut cfg = LossConfig::default();
        let r = random_image(8, 16, 16);
        let gt = random_image(9, 16, 16);
        let (l1, g1) = loss_structure(&r, &gt, &cfg).unwrap();
        let err = fd_check(|x| loss_structure(x, &gt, &cfg).unwrap().0, &r, &g1);
        assert!(err < 1e-4, "{err}");
        cfg.structure_rescale = 2.0;
        let (l2, g2) = loss_structure(&r, &gt, &cfg).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-14);
        for (a, b) in g1.rgb.iter().zip(&g2.rgb) {
            assert!((b - 2.0 * a).abs() < 1e-16);
        }
        assert_eq!(loss_structure(&r, &r, &cfg).unwrap().0, 0.0);
    }

    #[test]
    fn zero_lambda_reduces_to_l1() {
        let cfg = LossConfig {
            lambda_dssim: 0.0,
            ..Default::default()
        };
        let r = random_image(10, 16, 16);
        let gt = random_image(11, 16, 16);
        assert_eq!(
            loss_3dgs(&r, &gt, &cfg).unwrap().0,
            loss_l1(&r, &gt).unwrap()
        );
    }

    #[test]
    fn mask_application() {
        let img = ImageBuffer::filled(16, 16, [0.7f64; 3]);
        let ones = BinaryMask::filled(16, 16, true);
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        let zeros = BinaryMask::filled(16, 16, false);
        assert!(apply_mask(&img, &zeros)
            .unwrap()
            .rgb
            .iter()
            .all(|&v| v == 0.0));
        let mut checker = ones.clone();
        for y in 0..16 {
            for x in 0..16 {
                checker.set(x, y, (x + y) % 2 == 0);
            }
        }
        let out = apply_mask(&img, &checker).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let expect = if (x + y) % 2 == 0 { 0.7 } else { 0.0 };
                assert_eq!(out.get(x, y), [expect; 3]);
            }
        }
        assert!(apply_mask(&img, &BinaryMask::filled(8, 16, true)).is_err());
    }

    #[test]
    fn all_ones_mask_equals_unmasked_loss() {
        let cfg = LossConfig::default();
        let r = random_image(12, 16, 16);
        let gt = random_image(13, 16, 16);
        let ones = BinaryMask::filled(16, 16, true);
        for kind in [LossKind::Combined, LossKind::Structure] {
            let (a, ga) = masked_loss(kind, &r, &gt, Some(&ones), &cfg).unwrap();
            let (b, gb) = masked_loss(kind, &r, &gt, None, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn masked_out_pixels_get_zero_gradient() {
        let cfg = LossConfig::default();
        let r = random_image(14, 32, 32);
        let gt = random_image(15, 32, 32);
        let mut mask = BinaryMask::filled(32, 32, true);
        for y in 2..30 {
            for x in 2..30 {
                mask.set(x, y, false);
            }
        }
        let (_, g) = masked_loss(LossKind::Combined, &r, &gt, Some(&mask), &cfg).unwrap();
        for (i, &keep) in mask.bits.iter().enumerate() {
            if !keep {
                assert_eq!(&g.rgb[i * 3..i * 3 + 3], &[0.0; 3]);
            }
        }
        // Windows that lie entirely in the excluded block compare two zero
        // patches: SSIM = 1 there, so the unmasked-gradient of the SSIM term
        // vanishes at the block's interior.
        let rm = apply_mask(&r, &mask).unwrap();
        let gm = apply_mask(&gt, &mask).unwrap();
        let (_, gs) = ssim_with_grad(&rm, &gm).unwrap();
        for y in 12..20 {
            for x in 12..20 {
                let i = (y * 32 + x) * 3;
                assert!(gs.rgb[i..i + 3].iter().all(|v| v.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn l1_gradient_zero_where_both_masked() {
        let cfg = LossConfig {
            lambda_dssim: 0.0,
            ..Default::default()
        };
        let r = random_image(16, 16, 16);
        let gt = random_image(17, 16, 16);
        let mut mask = BinaryMask::filled(16, 16, true);
        mask.set(3, 3, false);
        let rm = apply_mask(&r, &mask).unwrap();
        let gm = apply_mask(&gt, &mask).unwrap();
        let (_, g) = loss_3dgs(&rm, &gm, &cfg).unwrap();
        assert_eq!(g.get(3, 3), [0.0; 3]);
    }
}
