use splatfilter::ablation::{run_ablation, AblationAxis, ABLATION_HEADER};
use splatfilter::testing::{tiny_config, tiny_dataset};

#[test]
fn reinit_and_threshold_sweeps_write_runs() {
    let ds = tiny_dataset(0.15);
    let cfg = tiny_config(3, 10);
    let dir = tempfile::tempdir().unwrap();
    for (axis, runs) in [(AblationAxis::Reinit, 3), (AblationAxis::Threshold, 2)] {
        let out = dir.path().join(axis.name());
        let outcomes = run_ablation(&cfg, &ds, axis, &out).unwrap();
        assert_eq!(outcomes.len(), runs);
        let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(ABLATION_HEADER));
        assert_eq!(lines.count(), runs);
        for o in &outcomes {
            assert!(out.join(&o.name).join("checkpoints/phase_3.ckpt").exists());
            assert!(o.report.final_holdout_psnr().unwrap() > 0.0);
            assert_eq!(o.report.phases.len(), 3);
        }
    }
}
