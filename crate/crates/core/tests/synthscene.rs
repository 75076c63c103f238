use splatfilter::error::Error;
use splatfilter::io::quantize;
use splatfilter::render::{render, RenderContext, SCREEN_BLUR};
use splatfilter::synthscene::*;
use splatfilter::testing::tiny_spec;

/// One isotropic Gaussian on the optical axis projects to a circular splat;
/// its visible support is the disk where opacity·exp(−d²/2c) ≥ 1/255.
#[test]
fn single_gaussian_mask_matches_rasterized_disk() {
    let mut spec = base_spec(7);
    let cam = spec.cameras()[spec.train_indices()[0]].clone();
    let depth = 2.0;
    let sigma = 0.1064;
    let opacity = 0.97;
    spec.distractors[0] = vec![Distractor {
        center: unproject(&cam, [cam.cx, cam.cy], depth),
        radii: [sigma; 3],
        color: [0.1, 0.9, 0.2],
        opacity,
        parts: 1,
        layout_seed: 0,
    }];
    let ds = generate(&spec).unwrap();
    let mask = ds.train[0].distractor_mask.as_ref().unwrap();

    let c = (cam.fx * sigma / depth).powi(2) + SCREEN_BLUR;
    let alpha_min = RenderContext::default().alpha_min;
    let r2 = 2.0 * c * (opacity / alpha_min).ln();
    let mut disk = 0usize;
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (dx, dy) = (x as f64 - cam.cx, y as f64 - cam.cy);
            if dx * dx + dy * dy <= r2 {
                disk += 1;
            }
        }
    }
    let got = mask.count_ones();
    let tol = 0.01 * disk as f64;
    assert!(
        disk > 200,
        "disk of {disk} pixels is too small to resolve 1%"
    );
    assert!(
        (got as f64 - disk as f64).abs() <= tol,
        "mask {got} vs disk {disk}"
    );
    for v in &ds.train[1..] {
        assert_eq!(v.distractor_mask.as_ref().unwrap().count_ones(), 0);
    }
}

#[test]
fn presets_satisfy_dataset_invariants() {
    let presets = benchmark_presets();
    assert_eq!(presets.len(), 3);
    let statics = static_gaussians(&presets[0]);
    for spec in &presets {
        assert_eq!(static_gaussians(spec), statics);
        let ds = generate(spec).unwrap();
        assert_eq!(ds.train.len(), 24);
        assert_eq!(ds.holdout.len(), 8);

        // Holdout views are clean renders of the static scene alone.
        let ctx = RenderContext {
            background: spec.background,
            ..RenderContext::default()
        };
        for (v, &ci) in ds.holdout.iter().zip(&spec.holdout) {
            let mut img = render(&statics, &spec.cameras()[ci], &ctx).0;
            quantize(&mut img);
            assert_eq!(v.image, img);
        }

        for v in &ds.train {
            let mask = v.distractor_mask.as_ref().unwrap();
            let clean = v.clean.as_ref().unwrap();
            for i in 0..mask.bits.len() {
                if !mask.bits[i] {
                    assert_eq!(v.image.rgb[3 * i..3 * i + 3], clean.rgb[3 * i..3 * i + 3]);
                }
            }
            let frac = mask.count_ones() as f64 / mask.bits.len() as f64;
            assert!(
                (0.01..=0.30).contains(&frac),
                "{}: coverage {frac}",
                spec.name
            );
        }

        let (lo, hi) = bounds(&statics);
        let pad = 3.0 * spec.sfm_noise * ds.extent;
        assert_eq!(ds.sfm.len(), spec.sfm_points);
        for p in &ds.sfm.positions {
            for a in 0..3 {
                let x = p[a] as f64;
                assert!(x >= lo[a] - pad - 1e-6 && x <= hi[a] + pad + 1e-6, "{p:?}");
            }
        }
        for c in ds.sfm.colors.iter().flatten() {
            assert!((0.0..=1.0).contains(c));
        }

        let cov = mean_coverage(&ds);
        let (lo_t, hi_t) = match spec.name.as_str() {
            "low" => (0.03, 0.07),
            "med" => (0.12, 0.18),
            _ => (0.20, 0.30),
        };
        assert!((lo_t..=hi_t).contains(&cov), "{} coverage {cov}", spec.name);
    }
}

#[test]
fn oversized_or_tiny_distractors_are_rejected() {
    for radius in [2.0, 0.002] {
        let mut spec = tiny_spec(3);
        let cam = spec.cameras()[0].clone();
        spec.distractors[0] = vec![Distractor {
            center: unproject(&cam, [cam.cx, cam.cy], 2.0),
            radii: [radius; 3],
            color: [1.0, 0.0, 0.0],
            opacity: 0.97,
            parts: 1,
            layout_seed: 0,
        }];
        assert!(
            matches!(generate(&spec), Err(Error::Invariant(_))),
            "radius {radius}"
        );
    }
}

#[test]
fn save_and_load_roundtrip() {
    let mut spec = tiny_spec(5);
    place_distractors(&mut spec, 0.15, 2);
    let ds = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = splatfilter::dataset::Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
}
