use splatfilter::config::ReinitMode;
use splatfilter::dataset::Dataset;
use splatfilter::error::Error;
use splatfilter::filtering::TransformKind;
use splatfilter::pipeline::*;
use splatfilter::render::render;
use splatfilter::testing::{tiny_config, tiny_dataset, InvariantObserver};
use splatfilter::{BinaryMask, GaussianSet};

/// Keeps the set seen at each phase start.
#[derive(Default)]
struct StartSets(Vec<(usize, GaussianSet)>);

impl Observer for StartSets {
    fn phase_start(&mut self, phase: usize, set: &GaussianSet, _masks: Option<&[BinaryMask]>) {
        self.0.push((phase, set.clone()));
    }
}

#[test]
fn zero_steps_returns_initialization() {
    let ds = tiny_dataset(0.1);
    let cfg = tiny_config(2, 0);
    let r = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
    let init = init_from_sfm(&ds.sfm, cfg.phases.sh_degree).unwrap();
    assert_eq!(r.phases[0].set, init);
    assert_eq!(r.total_steps, 0);
}

#[test]
fn runs_are_deterministic() {
    let ds = tiny_dataset(0.1);
    let cfg = tiny_config(3, 40);
    let a = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
    let b = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.final_set(), b.final_set());
    for (p, q) in a.phases.iter().zip(&b.phases) {
        assert_eq!(p.masks, q.masks);
    }
}

#[test]
fn step_count_and_phase_structure() {
    let ds = tiny_dataset(0.1);
    for k in [2, 4] {
        let cfg = tiny_config(k, 25);
        let r = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
        assert_eq!(r.total_steps, k * 25);
        assert_eq!(r.phases.len(), k);
        assert!(r.phases[0].masks.is_none());
        for p in &r.phases[1..] {
            assert_eq!(p.masks.as_ref().unwrap().len(), ds.train.len());
        }
        assert_eq!(r.metrics.iter().filter(|m| m.step == 25).count(), k);
    }
}

#[test]
fn invariants_hold_during_training() {
    let ds = tiny_dataset(0.15);
    let cfg = tiny_config(4, 60);
    let mut obs = InvariantObserver::new(&cfg, &ds.sfm);
    run_pipeline(&cfg, &ds, &mut obs).unwrap();
    assert!(obs.violations.is_empty(), "{:?}", obs.violations);
    assert!(obs.frozen_checks > 100);
    assert_eq!(obs.fixity_checks, 60);
    assert_eq!(obs.reinit_checks, 2);
}

#[test]
fn sparse_color_counts_updates() {
    let ds = tiny_dataset(0.1);
    let mut cfg = tiny_config(2, 100);
    cfg.filtering.color_period = 10;
    let r = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
    assert_eq!(r.phases[0].color_updates, 10);
    assert_eq!(r.phases[1].color_updates, 100);
}

#[test]
fn final_masks_come_from_last_filtering_phase() {
    let ds = tiny_dataset(0.15);
    let cfg = tiny_config(3, 30);
    let r = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
    let trainer = Trainer::new(&cfg, &ds).unwrap();
    let (expected, _) = trainer.compute_masks(&r.phases[1].set, 3).unwrap();
    assert_eq!(r.phases[2].masks.as_ref().unwrap(), &expected);
}

#[test]
fn never_mode_continues_previous_set() {
    let ds = tiny_dataset(0.1);
    let mut cfg = tiny_config(3, 30);
    cfg.phases.reinit = ReinitMode::Never;
    let mut starts = StartSets::default();
    let r = run_pipeline(&cfg, &ds, &mut starts).unwrap();
    assert_eq!(starts.0[1].1, r.phases[0].set);
}

#[test]
fn reconstruction_starts_from_truncated_previous_set() {
    let ds = tiny_dataset(0.1);
    let cfg = tiny_config(3, 30);
    assert!(cfg.phases.sh_reset && cfg.phases.sh_degree >= 1);
    let mut starts = StartSets::default();
    let r = run_pipeline(&cfg, &ds, &mut starts).unwrap();
    let mut truncated = r.phases[1].set.clone();
    truncated.reset_higher_sh();
    let (phase, start) = &starts.0[2];
    assert_eq!(*phase, 3);
    assert_eq!(start, &truncated);
    let ctx = cfg.render_context(ds.background);
    let cam = &ds.holdout[0].camera;
    assert_eq!(render(start, cam, &ctx).0, render(&truncated, cam, &ctx).0);
}

#[test]
fn always_mode_reinitializes_reconstruction() {
    let ds = tiny_dataset(0.1);
    let mut cfg = tiny_config(3, 20);
    cfg.phases.reinit = ReinitMode::Always;
    let mut starts = StartSets::default();
    run_pipeline(&cfg, &ds, &mut starts).unwrap();
    for (_, set) in &starts.0 {
        assert_eq!(set.positions, ds.sfm.positions);
    }
}

#[test]
fn perfect_fit_gives_all_ones_masks() {
    let ds = tiny_dataset(0.1);
    let cfg = tiny_config(3, 0);
    let set = init_from_sfm(&ds.sfm, 1).unwrap();
    let ctx = cfg.render_context(ds.background);
    let mut fitted: Dataset = ds.clone();
    for v in &mut fitted.train {
        v.image = render(&set, &v.camera, &ctx).0;
    }
    let trainer = Trainer::new(&cfg, &fitted).unwrap();
    let (masks, _) = trainer.compute_masks(&set, 2).unwrap();
    assert!(masks.iter().all(|m| m.count_zeros() == 0));
}

#[test]
fn disabled_masking_gives_all_ones() {
    let ds = tiny_dataset(0.15);
    let mut cfg = tiny_config(2, 10);
    cfg.filtering.masking = false;
    let r = run_pipeline(&cfg, &ds, &mut NoObserver).unwrap();
    assert!(r.phases[1]
        .masks
        .as_ref()
        .unwrap()
        .iter()
        .all(|m| m.count_zeros() == 0));
}

#[test]
fn errors_carry_phase_context() {
    let ds = tiny_dataset(0.1);
    let mut cfg = tiny_config(2, 5);
    cfg.filtering.metric = TransformKind::ExternalFeatures;
    cfg.filtering.feature_dir = Some(std::env::temp_dir().join("splatfilter-no-such-dir"));
    match run_pipeline(&cfg, &ds, &mut NoObserver) {
        Err(Error::Pipeline {
            phase: 2,
            step: 0,
            source,
        }) => {
            assert!(matches!(*source, Error::MissingFeatureFile(_)), "{source}");
        }
        other => panic!("expected phase context, got {other:?}"),
    }
}

#[test]
fn distractor_free_phase_one_reaches_high_ssim() {
    let spec = splatfilter::synthscene::base_spec(21);
    assert!(spec.sfm_points >= 500);
    let ds = splatfilter::synthscene::generate(&spec).unwrap();
    let mut cfg = splatfilter::config::PipelineConfig::default();
    cfg.phases.steps_per_phase = 2000;
    cfg.log.interval = 2000;
    let mut trainer = Trainer::new(&cfg, &ds).unwrap();
    trainer.run_phase_1(&mut NoObserver).unwrap();
    let ssim = trainer.metrics.last().unwrap().train_ssim;
    assert!(ssim >= 0.9, "train SSIM {ssim}");
}
