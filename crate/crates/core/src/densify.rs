//! Adaptive density control: clone or split Gaussians with large screen-space
//! gradients and prune nearly transparent ones.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::DensifyConfig;
use crate::render::project::quat_to_rot;
use crate::types::{sigmoid, GaussianSet, GradientBuffer};

/// Screen-gradient statistics accumulated between densification calls.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn accumulate(&mut self, grads: &GradientBuffer) {
        for i in 0..self.grad_sum.len() {
            if grads.update_count[i] > 0 {
                self.grad_sum[i] += grads.screen_grad_accum[i] as f64;
                self.count[i] += grads.update_count[i];
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Whether densification runs after 1-based step `t` of a phase of `total` steps.
pub fn densify_due(cfg: &DensifyConfig, t: usize, total: usize) -> bool {
    cfg.enabled
        && t >= cfg.start_step
        && (t as f64) <= cfg.end_fraction * total as f64
        && t.is_multiple_of(cfg.interval)
}

/// Returns the new set and, for each new Gaussian, the old index it continues
/// (`None` for clones and split children, which start with fresh optimizer state).
/// New Gaussians are appended after the survivors in candidate order.
pub fn densify_and_prune(
    set: &GaussianSet,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    extent: f64,
    rng: &mut impl Rng,
) -> (GaussianSet, Vec<Option<usize>>, DensifyReport) {
    let n = set.len();
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| stats.mean(i) > cfg.grad_threshold)
        .collect();
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));

    let mut budget = cfg.max_gaussians.saturating_sub(n);
    let mut removed = vec![false; n];
    let mut additions = GaussianSet::empty(set.sh_degree);
    let mut report = DensifyReport::default();
    let clone_limit = cfg.clone_scale_fraction * extent;
    for &i in &candidates {
        if budget == 0 {
            break;
        }
        let scale = set.log_scales[i].map(|v| v.exp());
        let max_scale = scale.iter().cloned().fold(0.0f32, f32::max) as f64;
        let sh = set.sh_of(i).to_vec();
        if max_scale < clone_limit {
            additions.push(
                set.positions[i],
                set.log_scales[i],
                set.rotations[i],
                set.opacity_logits[i],
                &sh,
            );
            report.cloned += 1;
            budget -= 1;
        } else {
            let rot = quat_to_rot(set.rotations[i].map(|v| v as f64));
            let child_scale = set.log_scales[i].map(|v| v - cfg.split_divisor.ln() as f32);
            for _ in 0..2 {
                let z: [f64; 3] =
                    std::array::from_fn(|a| rng.sample::<f64, _>(StandardNormal) * scale[a] as f64);
                let offset: [f64; 3] =
                    std::array::from_fn(|r| (0..3).map(|c| rot[r][c] * z[c]).sum());
                let pos = std::array::from_fn(|a| set.positions[i][a] + offset[a] as f32);
                additions.push(
                    pos,
                    child_scale,
                    set.rotations[i],
                    set.opacity_logits[i],
                    &sh,
                );
            }
            removed[i] = true;
            report.split += 1;
            budget -= 1;
        }
    }

    let prune = |logit: f32| (sigmoid(logit) as f64) < cfg.prune_opacity;
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        if removed[i] {
            continue;
        }
        if prune(set.opacity_logits[i]) {
            report.pruned += 1;
        } else {
            keep.push(i);
        }
    }
    let mut out = set.gather(&keep);
    let mut origin: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
    let new_keep: Vec<usize> = (0..additions.len())
        .filter(|&j| !prune(additions.opacity_logits[j]))
        .collect();
    out.extend_from(&additions.gather(&new_keep));
    origin.extend(new_keep.iter().map(|_| None));
    (out, origin, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::logit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_of(specs: &[(f32, f32)]) -> GaussianSet {
        let mut set = GaussianSet::empty(0);
        for (i, &(scale, opacity)) in specs.iter().enumerate() {
            set.push(
                [i as f32, 0.0, 5.0],
                [scale.ln(), (scale * 0.5).ln(), (scale * 0.25).ln()],
                [1.0, 0.0, 0.0, 0.0],
                logit(opacity as f64) as f32,
                &[[0.1, 0.2, 0.3]],
            );
        }
        set
    }

    fn stats(grads: &[f64]) -> DensifyStats {
        DensifyStats {
            grad_sum: grads.to_vec(),
            count: vec![1; grads.len()],
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn below_thresholds_is_noop() {
        let set = set_of(&[(0.1, 0.5), (0.5, 0.9)]);
        let cfg = DensifyConfig::default();
        let (out, origin, rep) =
            densify_and_prune(&set, &stats(&[0.0, 1e-6]), &cfg, 1.0, &mut rng());
        assert_eq!(out, set);
        assert_eq!(origin, vec![Some(0), Some(1)]);
        assert_eq!(rep, DensifyReport::default());
    }

    #[test]
    fn low_opacity_is_pruned() {
        let set = set_of(&[(0.1, 0.5), (0.1, 0.001), (0.1, 0.7)]);
        let (out, origin, rep) = densify_and_prune(
            &set,
            &stats(&[0.0; 3]),
            &DensifyConfig::default(),
            1.0,
            &mut rng(),
        );
        assert_eq!(out.len(), 2);
        assert_eq!(origin, vec![Some(0), Some(2)]);
        assert_eq!(rep.pruned, 1);
    }

    #[test]
    fn large_high_gradient_gaussian_splits() {
        let set = set_of(&[(0.5, 0.6)]);
        let cfg = DensifyConfig::default();
        let (out, origin, rep) = densify_and_prune(&set, &stats(&[1.0]), &cfg, 1.0, &mut rng());
        assert_eq!(out.len(), set.len() + 1);
        assert_eq!(origin, vec![None, None]);
        assert_eq!(rep.split, 1);
        for c in 0..2 {
            for a in 0..3 {
                let parent = set.log_scales[0][a].exp();
                let child = out.log_scales[c][a].exp();
                assert!((child - parent / 1.6).abs() < 1e-6 * parent);
            }
            assert_eq!(out.rotations[c], set.rotations[0]);
            assert_eq!(out.sh_of(c), set.sh_of(0));
            assert_ne!(out.positions[c], set.positions[0]);
        }
    }

    #[test]
    fn small_high_gradient_gaussian_clones() {
        let set = set_of(&[(0.005, 0.6), (0.3, 0.6)]);
        let (out, origin, rep) = densify_and_prune(
            &set,
            &stats(&[1.0, 0.0]),
            &DensifyConfig::default(),
            1.0,
            &mut rng(),
        );
        assert_eq!(rep.cloned, 1);
        assert_eq!(out.len(), 3);
        assert_eq!(origin, vec![Some(0), Some(1), None]);
        assert_eq!(out.positions[2], set.positions[0]);
        assert_eq!(out.log_scales[2], set.log_scales[0]);
    }

    #[test]
    fn cap_limits_growth() {
        let set = set_of(&[(0.005, 0.6), (0.005, 0.6), (0.005, 0.6)]);
        let cfg = DensifyConfig {
            max_gaussians: 4,
            ..Default::default()
        };
        let (out, _, rep) =
            densify_and_prune(&set, &stats(&[1.0, 3.0, 2.0]), &cfg, 1.0, &mut rng());
        assert_eq!(out.len(), 4);
        assert_eq!(rep.cloned, 1);
        assert_eq!(out.positions[3], set.positions[1]);
    }

    #[test]
    fn schedule_window() {
        let cfg = DensifyConfig::default();
        assert!(!densify_due(&cfg, 100, 2000));
        assert!(densify_due(&cfg, 200, 2000));
        assert!(!densify_due(&cfg, 250, 2000));
        assert!(densify_due(&cfg, 1400, 2000));
        assert!(!densify_due(&cfg, 1500, 2000));
    }
}
