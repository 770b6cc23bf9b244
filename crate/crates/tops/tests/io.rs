use std::fs;
use std::path::PathBuf;

use tops::config::{RunConfig, SmootherSpec};
use tops::error::{ToolError, EXIT_CONFIG, EXIT_DATA};
use tops::formats::{read_published, write_published};
use tops::io::{load_stream, write_lines, ColumnSelector, StreamFormat};
use tops_core::pipeline::{Composition, Mode};
use tops_core::smoother::SmootherKind;

fn file(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn single_value_profile() {
    let dir = tempfile::tempdir().unwrap();
    let path = file(&dir, "one.txt", "7\n");
    let loaded = load_stream(&path, &StreamFormat::Lines).unwrap();
    assert_eq!(loaded.values, vec![7.0]);
    let p = loaded.profile;
    assert_eq!((p.n, p.max, p.mean, p.p85, p.p95, p.p995), (1, 7.0, 7.0, 7.0, 7.0, 7.0));
}

#[test]
fn blank_lines_are_skipped_and_line_numbers_kept() {
    let dir = tempfile::tempdir().unwrap();
    let path = file(&dir, "s.txt", "1\n\n2.5\n  \n3\n");
    assert_eq!(load_stream(&path, &StreamFormat::Lines).unwrap().values, vec![1.0, 2.5, 3.0]);

    let bad = file(&dir, "bad.txt", "1\n\n2\nabc\n");
    let err = load_stream(&bad, &StreamFormat::Lines).unwrap_err();
    assert!(matches!(err, ToolError::BadRow { line: 4, .. }), "{err}");
    assert_eq!(err.exit_code(), EXIT_DATA);
}

#[test]
fn rejects_negative_and_non_finite() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text, line) in [("neg.txt", "1\n-2\n", 2), ("nan.txt", "NaN\n", 1), ("inf.txt", "3\n4\ninf\n", 3)] {
        let err = load_stream(&file(&dir, name, text), &StreamFormat::Lines).unwrap_err();
        match err {
            ToolError::BadRow { line: got, .. } => assert_eq!(got, line, "{name}"),
            other => panic!("{name}: {other}"),
        }
    }
}

#[test]
fn empty_and_missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_stream(&file(&dir, "empty.txt", "\n\n"), &StreamFormat::Lines).unwrap_err();
    assert!(matches!(err, ToolError::Empty { .. }));
    let err = load_stream(&dir.path().join("absent.txt"), &StreamFormat::Lines).unwrap_err();
    assert!(matches!(err, ToolError::Unreadable { .. }));
    assert_eq!(err.exit_code(), EXIT_DATA);
}

#[test]
fn csv_columns_by_name_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let named = file(&dir, "named.csv", "time,value\n1,4.5\n2,6\n");
    let by_name = load_stream(&named, &StreamFormat::Csv(ColumnSelector::parse("value"))).unwrap();
    assert_eq!(by_name.values, vec![4.5, 6.0]);

    let plain = file(&dir, "plain.csv", "1,4.5\n2,6\n");
    let by_index = load_stream(&plain, &StreamFormat::Csv(ColumnSelector::parse("1"))).unwrap();
    assert_eq!(by_index.values, vec![4.5, 6.0]);

    let err = load_stream(&named, &StreamFormat::Csv(ColumnSelector::parse("missing"))).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);

    let bad = file(&dir, "bad.csv", "time,value\n1,4.5\n2,x\n");
    let err = load_stream(&bad, &StreamFormat::Csv(ColumnSelector::parse("value"))).unwrap_err();
    assert!(matches!(err, ToolError::BadRow { line: 3, .. }), "{err}");
}

#[test]
fn lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    let values = vec![0.0, 1.25, 1e-7, 123456.789];
    write_lines(&path, &values).unwrap();
    assert_eq!(load_stream(&path, &StreamFormat::Lines).unwrap().values, values);
}

#[test]
fn published_round_trip_keeps_holdout_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pub.csv");
    let published = vec![None, None, Some(1.5), Some(-0.25)];
    write_published(Some(&path), &published).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "index,value\n1,\n2,\n3,1.5\n4,-0.25\n");
    assert_eq!(read_published(&path).unwrap(), published);

    let skipped = file(&dir, "gap.csv", "index,value\n1,2\n3,4\n");
    assert!(matches!(read_published(&skipped).unwrap_err(), ToolError::BadRow { line: 3, .. }));
}

#[test]
fn run_config_layers_flags_over_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = file(
        &dir,
        "run.json",
        r#"{"mode": "topl", "B": 50, "epsilon": 1.0, "m": 100, "r": 4096, "smoother": {"kind": "moving_average", "w": 3}}"#,
    );
    let base = RunConfig::load(&path).unwrap();
    let flags = RunConfig {
        epsilon: Some(2.0),
        sequential_share: Some(0.25),
        ..RunConfig::default()
    };
    let config = base.overlay(flags).pipeline_config().unwrap();
    assert_eq!(config.mode, Mode::Topl);
    assert_eq!(config.stream.epsilon, 2.0);
    assert_eq!(config.stream.range, 4096);
    assert_eq!(config.stream.holdout, 100);
    assert_eq!(config.smoother, SmootherKind::MovingAverage { window: 3 });
    assert_eq!(config.composition, Composition::Sequential { threshold_share: 0.25 });
}

#[test]
fn run_config_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = file(&dir, "unknown.json", r#"{"B": 1, "bogus": 2}"#);
    assert_eq!(RunConfig::load(&unknown).unwrap_err().exit_code(), EXIT_CONFIG);

    let missing = RunConfig {
        epsilon: Some(1.0),
        m: Some(10),
        ..RunConfig::default()
    };
    assert!(missing.pipeline_config().is_err());

    let spec = SmootherSpec {
        kind: "spline".into(),
        w: None,
        alpha: None,
    };
    assert!(spec.to_kind().is_err());
    let bad_mode = RunConfig {
        mode: Some("central".into()),
        ..RunConfig::default()
    };
    assert!(bad_mode.mode().is_err());
}
