//! Distractor identification: discrepancy maps between training images and
//! renders, quantile-thresholded masks and dilation of the excluded region.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{SSIM_C1, SSIM_C2};
use crate::types::{BinaryMask, DiscrepancyMap, ImageBuffer};

/// PSNR assigned to a patch with zero error.
pub const PSNR_CAP: f64 = 100.0;
pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    IdentityRgb,
    PatchPsnr,
    PatchSsim,
    ExternalFeatures,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity_rgb" => Ok(Self::IdentityRgb),
            "patch_psnr" => Ok(Self::PatchPsnr),
            "patch_ssim" => Ok(Self::PatchSsim),
            "external_features" => Ok(Self::ExternalFeatures),
            other => Err(Error::Config(format!(
                "unknown discrepancy metric {other:?}"
            ))),
        }
    }
}

/// The transform `F` applied to both images before comparing them.
#[derive(Clone, Debug, PartialEq)]
pub enum DiscrepancyTransform {
    IdentityRgb,
    PatchPsnr {
        patch: usize,
    },
    PatchSsim {
        patch: usize,
    },
    /// Precomputed feature rasters for the training image and the render.
    ExternalFeatures {
        gt: PathBuf,
        rendered: PathBuf,
    },
}

/// Per-phase kept-pixel quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub mode: ScheduleMode,
    pub quantiles: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Decreasing,
    Static,
}

impl ThresholdSchedule {
    pub fn validate(&self, filtering_phases: usize) -> Result<()> {
        if self.quantiles.len() < filtering_phases {
            return Err(Error::Config(format!(
                "threshold schedule has {} entries, need {filtering_phases}",
                self.quantiles.len()
            )));
        }
        if self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Config("quantiles must lie in (0,1)".into()));
        }
        match self.mode {
            ScheduleMode::Decreasing => {
                if self.quantiles.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::Config(
                        "decreasing schedule must be strictly decreasing".into(),
                    ));
                }
            }
            ScheduleMode::Static => {
                if self.quantiles.windows(2).any(|w| w[1] != w[0]) {
                    return Err(Error::Config(
                        "static schedule must repeat one quantile".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Computes the discrepancy map `|F(gt) − F(rendered)|₂` per pixel.
pub fn discrepancy(
    gt: &ImageBuffer<f32>,
    rendered: &ImageBuffer<f32>,
    f: &DiscrepancyTransform,
) -> Result<DiscrepancyMap> {
    gt.check_same_shape(rendered)?;
    let (w, h) = (gt.width, gt.height);
    let values = match f {
        DiscrepancyTransform::IdentityRgb => gt
            .rgb
            .chunks_exact(3)
            .zip(rendered.rgb.chunks_exact(3))
            .map(|(a, b)| {
                let d: f32 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                d.sqrt()
            })
            .collect(),
        DiscrepancyTransform::PatchPsnr { patch } => per_patch(gt, rendered, *patch, |a, b| {
            let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
            PSNR_CAP - psnr_from_mse(mse)
        })?,
        DiscrepancyTransform::PatchSsim { patch } => {
            per_patch(gt, rendered, *patch, |a, b| (1.0 - patch_ssim(a, b)) / 2.0)?
        }
        DiscrepancyTransform::ExternalFeatures {
            gt: gp,
            rendered: rp,
        } => {
            let fa = FeatureRaster::read(gp)?;
            let fb = FeatureRaster::read(rp)?;
            if (fa.width, fa.height, fa.channels) != (fb.width, fb.height, fb.channels) {
                return Err(Error::ShapeMismatch {
                    expected: (fa.width, fa.height),
                    found: (fb.width, fb.height),
                });
            }
            let mut out = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let fx = x * fa.width / w;
                    let fy = y * fa.height / h;
                    let a = fa.pixel(fx, fy);
                    let b = fb.pixel(fx, fy);
                    let d: f32 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                    out.push(d.sqrt());
                }
            }
            out
        }
    };
    Ok(DiscrepancyMap {
        width: w,
        height: h,
        values,
    })
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Evaluates `metric` on every `patch`×`patch` block (edge blocks may be
/// smaller) and paints the value over the block's pixels.
fn per_patch(
    gt: &ImageBuffer<f32>,
    rendered: &ImageBuffer<f32>,
    patch: usize,
    metric: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<Vec<f32>> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (w, h) = (gt.width, gt.height);
    let mut out = vec![0.0f32; w * h];
    let mut a = Vec::with_capacity(patch * patch * 3);
    let mut b = Vec::with_capacity(patch * patch * 3);
    for py in (0..h).step_by(patch) {
        for px in (0..w).step_by(patch) {
            let (x1, y1) = ((px + patch).min(w), (py + patch).min(h));
            a.clear();
            b.clear();
            for y in py..y1 {
                for x in px..x1 {
                    let i = (y * w + x) * 3;
                    a.extend(gt.rgb[i..i + 3].iter().map(|&v| v as f64));
                    b.extend(rendered.rgb[i..i + 3].iter().map(|&v| v as f64));
                }
            }
            let v = metric(&a, &b).max(0.0) as f32;
            for y in py..y1 {
                out[y * w + px..y * w + x1].fill(v);
            }
        }
    }
    Ok(out)
}

/// Single-window SSIM of two interleaved RGB patches, averaged over channels.
pub fn patch_ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = (a.len() / 3) as f64;
    let mut total = 0.0;
    for ch in 0..3 {
        let xs = a.iter().skip(ch).step_by(3);
        let ys = b.iter().skip(ch).step_by(3);
        let ma = xs.clone().sum::<f64>() / n;
        let mb = ys.clone().sum::<f64>() / n;
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for (x, y) in xs.zip(ys) {
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
            cov += (x - ma) * (y - mb);
        }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / 3.0
}

/// Nearest-rank `q`-quantile threshold: the `ceil(q·n)`-th smallest value.
pub fn quantile_threshold(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Keeps pixels whose discrepancy is at most this view's `q`-quantile.
pub fn make_mask(d: &DiscrepancyMap, q: f64) -> BinaryMask {
    let tau = quantile_threshold(&d.values, q);
    BinaryMask {
        width: d.width,
        height: d.height,
        bits: d.values.iter().map(|&v| v <= tau).collect(),
    }
}

/// Grows the excluded (0) region by `radius` pixels with a square structuring
/// element: an output pixel is 0 iff an input 0 lies within Chebyshev distance `radius`.
pub fn dilate_excluded(m: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return m.clone();
    }
    let (w, h) = (m.width, m.height);
    let horiz = sweep(&m.bits, w, h, radius, true);
    let bits = sweep(&horiz, w, h, radius, false);
    BinaryMask {
        width: w,
        height: h,
        bits,
    }
}

/// One separable pass: a pixel stays 1 only if every pixel within `radius`
/// along the axis is 1. Uses a running count of zeros.
fn sweep(bits: &[bool], w: usize, h: usize, radius: usize, horizontal: bool) -> Vec<bool> {
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    let at = |line: usize, i: usize| {
        if horizontal {
            line * w + i
        } else {
            i * w + line
        }
    };
    let mut out = vec![true; bits.len()];
    for line in 0..lines {
        let mut zeros = 0usize;
        for i in 0..radius.min(len) {
            zeros += usize::from(!bits[at(line, i)]);
        }
        for i in 0..len {
            let add = i + radius;
            if add < len {
                zeros += usize::from(!bits[at(line, add)]);
            }
            if i > radius {
                zeros -= usize::from(!bits[at(line, i - radius - 1)]);
            }
            out[at(line, i)] = zeros == 0;
        }
    }
    out
}

/// Externally computed feature raster: magic `FEAT`, then u32 height, width and
/// channel count, then `H·W·C` little-endian f32 values in row-major,
/// channel-last order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureRaster {
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(FEATURE_MAGIC)?;
        for v in [self.height, self.width, self.channels] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFeatureFile(path.to_path_buf())
            } else {
                Error::Io(e)
            }
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a feature raster",
                path.display()
            )));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [height, width, channels] = dims;
        let mut bytes = vec![0u8; height * width * channels * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::dilate_brute;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> ImageBuffer<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer {
            width: w,
            height: h,
            rgb: (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    const BUILTINS: [DiscrepancyTransform; 3] = [
        DiscrepancyTransform::IdentityRgb,
        DiscrepancyTransform::PatchPsnr { patch: 8 },
        DiscrepancyTransform::PatchSsim { patch: 8 },
    ];

    #[test]
    fn identical_images_give_zero_map() {
        for seed in 0..4 {
            let img = random_image(seed, 24, 20);
            for f in &BUILTINS {
                let d = discrepancy(&img, &img, f).unwrap();
                assert!(d.values.iter().all(|&v| v == 0.0), "{f:?}");
            }
        }
    }

    #[test]
    fn identity_rgb_is_pixel_l2() {
        let mut gt = ImageBuffer::filled(16, 16, [0.0f32; 3]);
        let rendered = gt.clone();
        gt.set(5, 7, [1.0, 1.0, 1.0]);
        let d = discrepancy(&gt, &rendered, &DiscrepancyTransform::IdentityRgb).unwrap();
        assert!((d.get(5, 7) - 3f32.sqrt()).abs() < 1e-7);
        assert_eq!(d.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn patch_ssim_localizes_one_block() {
        let gt = random_image(1, 32, 32);
        let mut rendered = gt.clone();
        let other = random_image(2, 32, 32);
        for y in 8..16 {
            for x in 16..24 {
                rendered.set(x, y, other.get(x, y));
            }
        }
        let d = discrepancy(
            &gt,
            &rendered,
            &DiscrepancyTransform::PatchSsim { patch: 8 },
        )
        .unwrap();
        // Oracle: classic single-window SSIM written out per channel.
        let mut ssim_sum = 0.0;
        for ch in 0..3 {
            let xs: Vec<f64> = (8..16)
                .flat_map(|y| (16..24).map(move |x| (x, y)))
                .map(|(x, y)| gt.get(x, y)[ch] as f64)
                .collect();
            let ys: Vec<f64> = (8..16)
                .flat_map(|y| (16..24).map(move |x| (x, y)))
                .map(|(x, y)| rendered.get(x, y)[ch] as f64)
                .collect();
            let n = 64.0;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let c = xs
                .iter()
                .zip(&ys)
                .map(|(a, b)| (a - mx) * (b - my))
                .sum::<f64>()
                / n;
            ssim_sum += (2.0 * mx * my + SSIM_C1) * (2.0 * c + SSIM_C2)
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        let expect = ((1.0 - ssim_sum / 3.0) / 2.0) as f32;
        for y in 0..32 {
            for x in 0..32 {
                let inside = (16..24).contains(&x) && (8..16).contains(&y);
                if inside {
                    assert!((d.get(x, y) - expect).abs() < 1e-6);
                } else {
                    assert_eq!(d.get(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn patch_psnr_orders_by_error() {
        let gt = ImageBuffer::filled(16, 16, [0.5f32; 3]);
        let mut rendered = gt.clone();
        for y in 0..8 {
            for x in 0..8 {
                rendered.set(x, y, [0.6; 3]);
            }
        }
        for y in 8..16 {
            for x in 8..16 {
                rendered.set(x, y, [0.9; 3]);
            }
        }
        let d = discrepancy(
            &gt,
            &rendered,
            &DiscrepancyTransform::PatchPsnr { patch: 8 },
        )
        .unwrap();
        assert!(d.get(12, 12) > d.get(2, 2));
        assert!((d.get(2, 2) as f64 - (PSNR_CAP - 20.0)).abs() < 1e-3);
        assert_eq!(d.get(12, 2), 0.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = random_image(0, 16, 16);
        let b = random_image(0, 16, 17);
        assert!(discrepancy(&a, &b, &DiscrepancyTransform::IdentityRgb).is_err());
    }

    #[test]
    fn external_features_roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let fa = FeatureRaster {
            width: 4,
            height: 4,
            channels: 2,
            data: (0..32).map(|i| i as f32).collect(),
        };
        let mut fb = fa.clone();
        fb.data[0] += 3.0;
        fb.data[1] += 4.0;
        let (pa, pb) = (dir.path().join("a.feat"), dir.path().join("b.feat"));
        fa.write(&pa).unwrap();
        fb.write(&pb).unwrap();
        assert_eq!(FeatureRaster::read(&pa).unwrap(), fa);
        let img = ImageBuffer::filled(16, 16, [0.0f32; 3]);
        let f = DiscrepancyTransform::ExternalFeatures {
            gt: pa.clone(),
            rendered: pb,
        };
        let d = discrepancy(&img, &img, &f).unwrap();
        // Feature cell (0,0) covers the top-left 4×4 pixels.
        assert_eq!(d.get(0, 0), 5.0);
        assert_eq!(d.get(3, 3), 5.0);
        assert_eq!(d.get(4, 0), 0.0);
        let missing = DiscrepancyTransform::ExternalFeatures {
            gt: pa,
            rendered: dir.path().join("nope.feat"),
        };
        assert!(matches!(
            discrepancy(&img, &img, &missing),
            Err(Error::MissingFeatureFile(_))
        ));
    }

    #[test]
    fn quantile_on_one_to_hundred() {
        let d = DiscrepancyMap {
            width: 10,
            height: 10,
            values: (1..=100).rev().map(|v| v as f32).collect(),
        };
        assert_eq!(quantile_threshold(&d.values, 0.9), 90.0);
        let m = make_mask(&d, 0.9);
        assert_eq!(m.count_ones(), 90);
        // Sort-based oracle: the kept set is exactly the 90 smallest.
        for (i, &v) in d.values.iter().enumerate() {
            assert_eq!(m.bits[i], v <= 90.0);
        }
    }

    #[test]
    fn all_zero_map_keeps_everything() {
        let d = DiscrepancyMap {
            width: 16,
            height: 16,
            values: vec![0.0; 256],
        };
        for q in [0.1, 0.5, 0.99] {
            assert_eq!(make_mask(&d, q).count_ones(), 256);
        }
    }

    #[test]
    fn dilation_cases() {
        let mut m = BinaryMask::filled(9, 9, true);
        m.set(4, 4, false);
        let d = dilate_excluded(&m, 1);
        assert_eq!(d.count_zeros(), 9);
        for y in 3..=5 {
            for x in 3..=5 {
                assert!(!d.get(x, y));
            }
        }
        let ones = BinaryMask::filled(12, 10, true);
        assert_eq!(dilate_excluded(&ones, 5), ones);
        assert_eq!(dilate_excluded(&m, 0), m);

        let mut two = BinaryMask::filled(40, 40, true);
        two.set(18, 20, false);
        two.set(21, 20, false);
        let d = dilate_excluded(&two, 7);
        let oracle = dilate_brute(&two, 7);
        assert_eq!(d, oracle);
        assert_eq!(d.count_zeros(), 18 * 15);
    }

    proptest! {
        #[test]
        fn dilation_matches_brute_force_and_composes(
            w in 1usize..24, h in 1usize..24, seed in any::<u64>(), r1 in 0usize..5, r2 in 0usize..5
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask { width: w, height: h, bits: (0..w * h).map(|_| rng.gen_bool(0.9)).collect() };
            let d = dilate_excluded(&m, r1);
            prop_assert_eq!(&d, &dilate_brute(&m, r1));
            prop_assert_eq!(&dilate_excluded(&d, 0), &d);
            prop_assert_eq!(dilate_excluded(&m, r1 + r2), dilate_excluded(&d, r2));
        }

        #[test]
        fn lower_quantile_keeps_subset(seed in any::<u64>(), qa in 0.05f64..0.95, dq in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DiscrepancyMap { width: 16, height: 16, values: (0..256).map(|_| rng.gen_range(0.0..4.0f32).floor()).collect() };
            let qb = (qa - dq).max(0.01);
            let hi = make_mask(&d, qa);
            let lo = make_mask(&d, qb);
            prop_assert!(lo.is_subset_of(&hi));
            let kept = hi.count_ones() as f64 / 256.0;
            prop_assert!(kept >= qa - 1e-12);
        }

        #[test]
        fn discrepancy_of_identical_images_is_zero(seed in any::<u64>()) {
            let img = random_image(seed, 17, 19);
            for f in &BUILTINS {
                let d = discrepancy(&img, &img, f).unwrap();
                prop_assert!(d.values.iter().all(|&v| v == 0.0));
            }
        }
    }
}
