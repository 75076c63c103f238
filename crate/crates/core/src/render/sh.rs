//! Real spherical harmonics up to degree 3 with the sign conventions used by
//! common splat viewers, plus derivatives with respect to the (unnormalized
//! inside the polynomial) direction components.

use crate::types::Real;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values `Y_k(dir)` for the first `count` coefficients (1, 4, 9 or 16).
pub fn basis<T: Real>(dir: [T; 3], count: usize) -> [T; 16] {
    basis_with_grad(dir, count).0
}

/// Basis values and their partial derivatives w.r.t. x, y and z, treating
/// the components as independent polynomial variables.
pub fn basis_with_grad<T: Real>(dir: [T; 3], count: usize) -> ([T; 16], [[T; 3]; 16]) {
    let l = T::lit;
    let [x, y, z] = dir;
    let zero = T::zero();
    let mut b = [zero; 16];
    let mut g = [[zero; 3]; 16];
    b[0] = l(C0);
    if count > 1 {
        b[1] = -l(C1) * y;
        g[1] = [zero, -l(C1), zero];
        b[2] = l(C1) * z;
        g[2] = [zero, zero, l(C1)];
        b[3] = -l(C1) * x;
        g[3] = [-l(C1), zero, zero];
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let two = l(2.0);
        b[4] = l(C2[0]) * x * y;
        g[4] = [l(C2[0]) * y, l(C2[0]) * x, zero];
        b[5] = l(C2[1]) * y * z;
        g[5] = [zero, l(C2[1]) * z, l(C2[1]) * y];
        b[6] = l(C2[2]) * (two * zz - xx - yy);
        g[6] = [
            -two * l(C2[2]) * x,
            -two * l(C2[2]) * y,
            l(4.0) * l(C2[2]) * z,
        ];
        b[7] = l(C2[3]) * x * z;
        g[7] = [l(C2[3]) * z, zero, l(C2[3]) * x];
        b[8] = l(C2[4]) * (xx - yy);
        g[8] = [two * l(C2[4]) * x, -two * l(C2[4]) * y, zero];
        if count > 9 {
            let three = l(3.0);
            let four = l(4.0);
            b[9] = l(C3[0]) * y * (three * xx - yy);
            g[9] = [
                l(C3[0]) * l(6.0) * x * y,
                l(C3[0]) * (three * xx - three * yy),
                zero,
            ];
            b[10] = l(C3[1]) * x * y * z;
            g[10] = [l(C3[1]) * y * z, l(C3[1]) * x * z, l(C3[1]) * x * y];
            b[11] = l(C3[2]) * y * (four * zz - xx - yy);
            g[11] = [
                -two * l(C3[2]) * x * y,
                l(C3[2]) * (four * zz - xx - three * yy),
                l(8.0) * l(C3[2]) * y * z,
            ];
            b[12] = l(C3[3]) * z * (two * zz - three * xx - three * yy);
            g[12] = [
                -l(6.0) * l(C3[3]) * x * z,
                -l(6.0) * l(C3[3]) * y * z,
                l(C3[3]) * (l(6.0) * zz - three * xx - three * yy),
            ];
            b[13] = l(C3[4]) * x * (four * zz - xx - yy);
            g[13] = [
                l(C3[4]) * (four * zz - three * xx - yy),
                -two * l(C3[4]) * x * y,
                l(8.0) * l(C3[4]) * x * z,
            ];
            b[14] = l(C3[5]) * z * (xx - yy);
            g[14] = [
                two * l(C3[5]) * x * z,
                -two * l(C3[5]) * y * z,
                l(C3[5]) * (xx - yy),
            ];
            b[15] = l(C3[6]) * x * (xx - three * yy);
            g[15] = [
                l(C3[6]) * (three * xx - three * yy),
                -l(6.0) * l(C3[6]) * x * y,
                zero,
            ];
        }
    }
    (b, g)
}

/// Converts a display color in [0,1] to the constant-band coefficient, inverting
/// the +0.5 offset applied at render time.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * C0 + 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_roundtrip() {
        assert_eq!(rgb_to_dc(0.5), 0.0);
        assert!((dc_to_rgb(rgb_to_dc(0.8)) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn basis_derivatives_match_finite_differences() {
        let dir = [0.3f64, -0.5, 0.81];
        let (_, g) = basis_with_grad(dir, 16);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = dir;
            let mut m = dir;
            p[axis] += h;
            m[axis] -= h;
            let bp = basis(p, 16);
            let bm = basis(m, 16);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn basis_orthonormal_on_sphere() {
        // Monte Carlo-free check: Fibonacci sphere quadrature of Y_i Y_j.
        let n = 20000;
        let mut gram = [[0.0f64; 16]; 16];
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let b = basis([r * phi.cos(), r * phi.sin(), z], 16);
            for a in 0..16 {
                for c in 0..16 {
                    gram[a][c] += b[a] * b[c];
                }
            }
        }
        let w = 4.0 * std::f64::consts::PI / n as f64;
        for a in 0..16 {
            for c in 0..16 {
                let expect = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a][c] * w - expect).abs() < 1e-3, "{a},{c}");
            }
        }
    }
}
