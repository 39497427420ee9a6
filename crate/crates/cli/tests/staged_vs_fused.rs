//! The two ways of producing recordings — exporting raw sessions to JSON
//! first and recording from those files, versus generating and recording in
//! one pass — must yield byte-identical containers.

use erp_cli::{paths, stage_record, stage_record_from_raw, stage_synth_raw, ExperimentConfig};

#[test]
fn recordings_from_raw_files_match_fused_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::default();
    config.subjects = Some(vec!["s003".to_string()]);
    config.car_runs_per_session = 2;

    let staged_root = dir.path().join("staged");
    let fused_root = dir.path().join("fused");

    let mut staged = config.clone();
    staged.output_dir = staged_root.clone();
    let roster = staged.resolve_roster().unwrap();
    stage_synth_raw(&staged, &roster).unwrap();
    stage_record_from_raw(&staged, &roster).unwrap();

    let mut fused = config.clone();
    fused.output_dir = fused_root.clone();
    stage_record(&fused, &roster).unwrap();

    let mut n_checked = 0;
    for (session_id, _) in config.session_ids() {
        let rel = paths::recording("s003", &session_id);
        let a = std::fs::read(staged_root.join(&rel)).unwrap();
        let b = std::fs::read(fused_root.join(&rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between staged and fused runs");
        n_checked += 1;
    }
    assert_eq!(n_checked, 9, "six lab and three car sessions");

    // The staged run must leave the raw sessions behind; the fused one not.
    assert!(staged_root.join(paths::raw("s003", "lab-01")).exists());
    assert!(!fused_root.join(paths::raw("s003", "lab-01")).exists());
}
