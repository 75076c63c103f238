//! Shared domain types: the Gaussian scene, gradients, cameras, images and masks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point scalar used by the renderer and the losses.
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Real: Float + FromPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of SH coefficients per color channel for a given degree.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub const MAX_SH_DEGREE: usize = 3;

/// Optimizable scene parameters in structure-of-arrays layout.
///
/// `sh` holds `sh_coeff_count(sh_degree)` RGB triples per Gaussian, contiguous
/// per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T: Real = f32> {
    pub positions: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    /// Unit quaternions (w, x, y, z).
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub sh: Vec<[T; 3]>,
    pub sh_degree: usize,
}

impl<T: Real> GaussianSet<T> {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[[T; 3]] {
        let n = self.coeffs_per_gaussian();
        &self.sh[i * n..(i + 1) * n]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [[T; 3]] {
        let n = self.coeffs_per_gaussian();
        &mut self.sh[i * n..(i + 1) * n]
    }

    /// Appends one Gaussian. `sh` must hold exactly `coeffs_per_gaussian()` entries.
    pub fn push(
        &mut self,
        position: [T; 3],
        log_scale: [T; 3],
        rotation: [T; 4],
        opacity_logit: T,
        sh: &[[T; 3]],
    ) {
        assert_eq!(sh.len(), self.coeffs_per_gaussian());
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
    }

    /// Keeps only the Gaussians listed in `indices`, in that order (duplicates allowed).
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.sh_degree);
        for &i in indices {
            out.push(
                self.positions[i],
                self.log_scales[i],
                self.rotations[i],
                self.opacity_logits[i],
                self.sh_of(i),
            );
        }
        out
    }

    pub fn extend_from(&mut self, other: &Self) {
        assert_eq!(self.sh_degree, other.sh_degree);
        self.positions.extend_from_slice(&other.positions);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.sh.extend_from_slice(&other.sh);
    }

    /// Zeroes every SH coefficient above the constant band.
    pub fn reset_higher_sh(&mut self) {
        let n = self.coeffs_per_gaussian();
        for (j, c) in self.sh.iter_mut().enumerate() {
            if j % n != 0 {
                *c = [T::zero(); 3];
            }
        }
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > T::zero() {
                for c in q.iter_mut() {
                    *c = *c / n;
                }
            } else {
                *q = [T::one(), T::zero(), T::zero(), T::zero()];
            }
        }
    }

    /// Checks the structural invariants: congruent field lengths, unit
    /// quaternions, finite values and a supported SH degree.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Invariant(format!(
                "sh degree {} > 3",
                self.sh_degree
            )));
        }
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n * self.coeffs_per_gaussian()
        {
            return Err(Error::Invariant("gaussian field lengths disagree".into()));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (norm - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::Invariant(format!(
                    "quaternion {i} has norm {norm:?}"
                )));
            }
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invariant("non-finite gaussian parameter".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        let c = |v: T| U::lit(v.to_f64().unwrap());
        GaussianSet {
            positions: self.positions.iter().map(|p| p.map(c)).collect(),
            log_scales: self.log_scales.iter().map(|p| p.map(c)).collect(),
            rotations: self.rotations.iter().map(|p| p.map(c)).collect(),
            opacity_logits: self.opacity_logits.iter().map(|&v| c(v)).collect(),
            sh: self.sh.iter().map(|p| p.map(c)).collect(),
            sh_degree: self.sh_degree,
        }
    }
}

/// Gradients with the same shapes as a [`GaussianSet`], plus the per-Gaussian
/// screen-space gradient statistics used by densification.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer<T: Real = f32> {
    pub positions: Vec<[T; 3]>,
    pub log_scales: Vec<[T; 3]>,
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub sh: Vec<[T; 3]>,
    pub sh_degree: usize,
    /// Sum of `|dL/dmean2d|` over the renders this buffer has absorbed.
    pub screen_grad_accum: Vec<T>,
    /// Number of renders in which each Gaussian was visible.
    pub update_count: Vec<u32>,
}

impl<T: Real> GradientBuffer<T> {
    pub fn zeros(count: usize, sh_degree: usize) -> Self {
        let z3 = [T::zero(); 3];
        Self {
            positions: vec![z3; count],
            log_scales: vec![z3; count],
            rotations: vec![[T::zero(); 4]; count],
            opacity_logits: vec![T::zero(); count],
            sh: vec![z3; count * sh_coeff_count(sh_degree)],
            sh_degree,
            screen_grad_accum: vec![T::zero(); count],
            update_count: vec![0; count],
        }
    }

    pub fn zeros_like(set: &GaussianSet<T>) -> Self {
        Self::zeros(set.len(), set.sh_degree)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_congruent(&self, set: &GaussianSet<T>) -> bool {
        let n = set.len();
        self.sh_degree == set.sh_degree
            && self.positions.len() == n
            && self.log_scales.len() == n
            && self.rotations.len() == n
            && self.opacity_logits.len() == n
            && self.sh.len() == set.sh.len()
            && self.screen_grad_accum.len() == n
            && self.update_count.len() == n
    }

    /// Flattens every parameter gradient into one vector in field order.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        out.extend(self.positions.iter().flatten());
        out.extend(self.log_scales.iter().flatten());
        out.extend(self.rotations.iter().flatten());
        out.extend(self.opacity_logits.iter());
        out.extend(self.sh.iter().flatten());
        out
    }
}

/// Pinhole camera. Camera space is x right, y down, z forward; pixel `(i, j)`
/// samples the image plane at `(i, j)` in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub world_to_camera: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Builds a camera at `eye` looking at `target`, with `up` roughly up in the image.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_x_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = normalize3(sub3(target, eye));
        // Image y points down, so the camera "down" axis is -up projected.
        let right = normalize3(cross3(forward, up));
        let down = cross3(forward, right);
        let rot = [right, down, forward];
        let t = [-dot3(rot[0], eye), -dot3(rot[1], eye), -dot3(rot[2], eye)];
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&rot[r]);
            m[r][3] = t[r];
        }
        m[3][3] = 1.0;
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            world_to_camera: m,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 0.05,
            far: 100.0,
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn world_to_cam_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [
            dot3(r[0], p) + t[0],
            dot3(r[1], p) + t[1],
            dot3(r[2], p) + t[2],
        ]
    }

    /// Projects a world point; `None` when it is not in front of the near plane.
    pub fn project_point(&self, p: [f64; 3]) -> Option<([f64; 2], f64)> {
        let c = self.world_to_cam_point(p);
        if c[2] < self.near {
            return None;
        }
        Some((
            [
                self.fx * c[0] / c[2] + self.cx,
                self.fy * c[1] / c[2] + self.cy,
            ],
            c[2],
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot3(r[i], r[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-6 {
                    return Err(Error::Invariant("camera rotation not orthonormal".into()));
                }
            }
        }
        let m = &self.world_to_camera;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Invariant(
                "camera transform bottom row must be 0 0 0 1".into(),
            ));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Invariant("camera requires 0 < near < far".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Invariant(
                "camera resolution must be at least 16x16".into(),
            ));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invariant("focal lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major H×W×3 image with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T: Real = f32> {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![T::zero(); width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, color: [T; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Self { width, height, rgb }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [T; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn same_shape<U: Real>(&self, other: &ImageBuffer<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape<U: Real>(&self, other: &ImageBuffer<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: (self.width, self.height),
                found: (other.width, other.height),
            })
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.rgb.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            width: self.width,
            height: self.height,
            rgb: self
                .rgb
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

/// Per-pixel non-negative discrepancy between a training image and a render.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepancyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DiscrepancyMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Mean value over pixels where `select(pixel index)` holds; `None` if none do.
    pub fn mean_where(&self, select: impl Fn(usize) -> bool) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, &v) in self.values.iter().enumerate() {
            if select(i) {
                sum += v as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Per-pixel supervision mask: `true` (1) keeps the pixel, `false` (0) excludes it.
///
/// Ground-truth distractor masks reuse this type with the opposite reading
/// (`true` marks a distractor pixel); see `synthscene`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_zeros(&self) -> usize {
        self.bits.len() - self.count_ones()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Sparse reconstruction points used to seed Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmPoints {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
}

impl SfmPoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Invariant("point set is empty".into()));
        }
        if self.colors.len() != self.positions.len() {
            return Err(Error::Invariant(
                "point colors and positions differ in length".into(),
            ));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite point coordinate".into()));
        }
        Ok(())
    }
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_gaussian(degree: usize) -> GaussianSet<f32> {
        let mut set = GaussianSet::empty(degree);
        let sh = vec![[0.1, 0.2, 0.3]; sh_coeff_count(degree)];
        set.push([0.0, 1.0, 2.0], [-1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, &sh);
        set
    }

    #[test]
    fn sh_lengths_follow_degree() {
        for d in 0..=3 {
            let set = one_gaussian(d);
            assert_eq!(set.sh.len(), (d + 1) * (d + 1));
            set.validate().unwrap();
        }
    }

    #[test]
    fn validate_rejects_non_unit_quaternion() {
        let mut set = one_gaussian(1);
        set.rotations[0] = [2.0, 0.0, 0.0, 0.0];
        assert!(set.validate().is_err());
        set.normalize_rotations();
        set.validate().unwrap();
    }

    #[test]
    fn reset_higher_sh_keeps_dc() {
        let mut set = one_gaussian(2);
        set.reset_higher_sh();
        assert_eq!(set.sh[0], [0.1, 0.2, 0.3]);
        assert!(set.sh[1..].iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn look_at_camera_is_valid_and_centered() {
        let cam = Camera::look_at([0.0, -1.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 60.0, 32, 32);
        cam.validate().unwrap();
        let c = cam.center();
        for (a, b) in c.iter().zip([0.0, -1.0, -4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let (px, depth) = cam.project_point([0.0; 3]).unwrap();
        assert!((px[0] - 16.0).abs() < 1e-9 && (px[1] - 16.0).abs() < 1e-9);
        assert!((depth - 17f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn camera_validation_rejects_small_or_inverted() {
        let mut cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 60.0, 32, 32);
        cam.near = 200.0;
        assert!(cam.validate().is_err());
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 60.0, 8, 32);
        assert!(cam.validate().is_err());
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        for x in [-10.0f64, -1.0, 0.0, 3.0, 10.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
        }
        assert!((sigmoid(logit(0.1)) - 0.1).abs() < 1e-12);
    }
}
