//! Adam with per-group learning rates, optional sparse color updates and
//! moment bookkeeping across densification.

use crate::config::OptimConfig;
use crate::types::{GaussianSet, GradientBuffer};

/// One parameter group's first and second moments, flattened row-major with
/// `width` scalars per Gaussian.
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    width: usize,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Moments {
    fn new(width: usize, count: usize) -> Self {
        Self {
            width,
            m: vec![0.0; width * count],
            v: vec![0.0; width * count],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (cfg.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }

    fn remap(&mut self, origin: &[Option<usize>]) {
        let w = self.width;
        let mut m = vec![0.0; w * origin.len()];
        let mut v = vec![0.0; w * origin.len()];
        for (new, src) in origin.iter().enumerate() {
            if let Some(old) = *src {
                m[new * w..(new + 1) * w].copy_from_slice(&self.m[old * w..(old + 1) * w]);
                v[new * w..(new + 1) * w].copy_from_slice(&self.v[old * w..(old + 1) * w]);
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Learning rates for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl StepRates {
    /// Rates at `step` of a phase lasting `total` steps. The position rate
    /// decays log-linearly from its initial to final value, both scaled by `extent`.
    pub fn at(cfg: &OptimConfig, extent: f64, step: usize, total: usize) -> Self {
        let frac = if total <= 1 {
            0.0
        } else {
            (step as f64 / (total - 1) as f64).clamp(0.0, 1.0)
        };
        let (a, b) = (cfg.lr_position_init, cfg.lr_position_final);
        let position = if a > 0.0 && b > 0.0 {
            (a.ln() * (1.0 - frac) + b.ln() * frac).exp()
        } else {
            a * (1.0 - frac) + b * frac
        };
        Self {
            position: position * extent,
            scale: cfg.lr_scale,
            rotation: cfg.lr_rotation,
            opacity: cfg.lr_opacity,
            sh: cfg.lr_sh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    cfg: OptimConfig,
    position: Moments,
    scale: Moments,
    rotation: Moments,
    opacity: Moments,
    sh: Moments,
    /// Number of steps that updated the color group.
    pub color_updates: usize,
}

fn flat3(v: &mut [[f32; 3]]) -> &mut [f32] {
    v.as_flattened_mut()
}

impl Adam {
    pub fn new(cfg: &OptimConfig, set: &GaussianSet) -> Self {
        let n = set.len();
        Self {
            cfg: cfg.clone(),
            position: Moments::new(3, n),
            scale: Moments::new(3, n),
            rotation: Moments::new(4, n),
            opacity: Moments::new(1, n),
            sh: Moments::new(3 * set.coeffs_per_gaussian(), n),
            color_updates: 0,
        }
    }

    /// Applies one update. Geometry and opacity always move; SH coefficients
    /// and their moments only when `update_color` is set. Quaternions are
    /// renormalized afterwards.
    pub fn step(
        &mut self,
        set: &mut GaussianSet,
        grads: &GradientBuffer,
        rates: &StepRates,
        update_color: bool,
    ) {
        debug_assert!(grads.is_congruent(set));
        let cfg = &self.cfg;
        self.position.step(
            flat3(&mut set.positions),
            grads.positions.as_flattened(),
            rates.position,
            cfg,
        );
        self.scale.step(
            flat3(&mut set.log_scales),
            grads.log_scales.as_flattened(),
            rates.scale,
            cfg,
        );
        self.rotation.step(
            set.rotations.as_flattened_mut(),
            grads.rotations.as_flattened(),
            rates.rotation,
            cfg,
        );
        self.opacity.step(
            &mut set.opacity_logits,
            &grads.opacity_logits,
            rates.opacity,
            cfg,
        );
        if update_color {
            self.sh
                .step(flat3(&mut set.sh), grads.sh.as_flattened(), rates.sh, cfg);
            self.color_updates += 1;
        }
        set.normalize_rotations();
    }

    /// Carries moments across a change of Gaussian set: new Gaussian `i`
    /// inherits the moments of old Gaussian `origin[i]`, or zeros.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        for g in [
            &mut self.position,
            &mut self.scale,
            &mut self.rotation,
            &mut self.opacity,
            &mut self.sh,
        ] {
            g.remap(origin);
        }
    }

    pub fn color_step_count(&self) -> u64 {
        self.sh.t
    }
}

/// Whether colors update at 1-based step `t` with period `n`.
pub fn color_update_due(t: usize, n: usize) -> bool {
    t.is_multiple_of(n)
}
