use servobot::bench::*;

fn small(protocol: Protocol) -> RunReport {
    let mut cfg = ScenarioConfig::new(protocol);
    cfg.trials = Some(2);
    cfg.seed = 5;
    run_protocol(&cfg, &RunOptions::default()).unwrap()
}

#[test]
fn json_round_trip_is_lossless() {
    let r = small(Protocol::VosvsBench);
    let back = RunReport::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_json(), r.to_json());
}

#[test]
fn csv_layout() {
    let r = small(Protocol::VosvsBench);
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(TRIAL_CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    // two trials plus the mean row
    assert_eq!(rows.len(), 3);
    let cols = TRIAL_CSV_HEADER.split(',').count();
    for row in &rows {
        assert_eq!(row.split(',').count(), cols, "{row}");
    }
    assert!(rows[2].starts_with("vosvs_bench,mean,"));
}

#[test]
fn emitted_files_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = emit_report(&small(Protocol::VosvsBench), a.path(), &[Format::Json, Format::Csv]).unwrap();
    let fb = emit_report(&small(Protocol::VosvsBench), b.path(), &[Format::Json, Format::Csv]).unwrap();
    assert_eq!(fa.len(), fb.len());
    assert!(fa.iter().any(|p| p.to_string_lossy().contains("depth_series")));
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn picks_per_hour_formula() {
    assert_eq!(picks_per_hour(9, 260.0), 3600.0 * 9.0 / 260.0);
    assert!((picks_per_hour(9, 260.0) - 124.6).abs() < 0.05);
    assert_eq!(picks_per_hour(3, 0.0), 0.0);
}

#[test]
fn learning_report_uses_comparison_layout() {
    let r = small(Protocol::VsLearning);
    let csv = r.to_csv();
    assert!(csv.starts_with("formulation,mean_updates"));
    assert_eq!(csv.lines().count(), 5);
    let l = r.learning.as_ref().unwrap();
    assert_eq!(l.ledger.clicks, 1);
    assert_eq!(l.ledger.counters.find, 1);
    assert_eq!(l.ledger.counters.servo, 0);
}
