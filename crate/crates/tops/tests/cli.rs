use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tops(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tops")).args(args).output().expect("spawn tops")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("json output")
}

fn synth_uniform(dir: &Path, n: usize) -> std::path::PathBuf {
    let out = dir.join("stream.txt");
    let status = tops(&["synth", "--kind", "uniform", "-n", &n.to_string(), "--high", "50", "--seed", "3", "--output", path(&out)]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    out
}

#[test]
fn synth_is_seeded() {
    let a = tops(&["synth", "--kind", "heavy-tail", "-n", "50", "--seed", "1"]);
    let b = tops(&["synth", "--kind", "heavy-tail", "-n", "50", "--seed", "1"]);
    let c = tops(&["synth", "--kind", "heavy-tail", "-n", "50", "--seed", "2"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().lines().count(), 50);
}

#[test]
fn threshold_writes_record_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth_uniform(dir.path(), 500);
    let trace = dir.path().join("trace.csv");
    let out = tops(&["threshold", "--input", path(&input), "-B", "50", "--epsilon", "1", "-r", "1024", "--trace", path(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record = json(&out.stdout);
    assert_eq!(record["method"], "EM-E");
    assert_eq!(record["m"], 500);
    let theta = record["theta"].as_f64().unwrap();
    assert!(theta > 0.0 && theta <= 50.0);
    let trace_text = fs::read_to_string(&trace).unwrap();
    assert!(trace_text.starts_with("candidate,score\n"));
    assert_eq!(trace_text.lines().count(), 51);

    let oracle = tops(&["threshold", "--input", path(&input), "-B", "50", "--epsilon", "1", "--method", "oracle"]);
    assert!(oracle.status.success());
    assert_eq!(json(&oracle.stdout)["method"], "oracle");
}

#[test]
fn run_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth_uniform(dir.path(), 3000);
    let published = dir.path().join("pub.csv");
    let aggregates = dir.path().join("agg.csv");
    let out = tops(&[
        "run", "--seed", "5", "--input", path(&input), "-B", "50", "--epsilon", "1", "-m", "500", "-r", "1024",
        "--output", path(&published), "--aggregates", path(&aggregates),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&fs::read(dir.path().join("pub.csv.manifest.json")).unwrap());
    assert_eq!(manifest["mode"], "tops");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["readings"], 3000);
    assert_eq!(manifest["published"], 2500);
    let text = fs::read_to_string(&published).unwrap();
    assert_eq!(text.lines().count(), 3001);
    assert!(text.lines().nth(1).unwrap().ends_with(','));
    assert!(fs::read_to_string(&aggregates).unwrap().starts_with("chunk_index,group_index,value\n"));

    let again = dir.path().join("again.csv");
    let rerun = tops(&[
        "run", "--seed", "5", "--input", path(&input), "-B", "50", "--epsilon", "1", "-m", "500", "-r", "1024",
        "--output", path(&again),
    ]);
    assert!(rerun.status.success());
    assert_eq!(fs::read(&published).unwrap(), fs::read(&again).unwrap());

    let eval = tops(&["eval", "--truth", path(&input), "--published", path(&published), "-r", "1024", "--queries", "20"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let record = json(&eval.stdout);
    assert_eq!(record["skipped"], 500);
    assert_eq!(record["queries"], 20);
    assert!(record["mse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn run_from_config_file_in_local_mode() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth_uniform(dir.path(), 2000);
    let config = dir.path().join("run.json");
    let output = dir.path().join("out.csv");
    fs::write(
        &config,
        serde_json::json!({
            "mode": "topl", "B": 50, "epsilon": 2.0, "m": 1000, "r": 1024,
            "input_path": input, "output_path": output
        })
        .to_string(),
    )
    .unwrap();
    let density = dir.path().join("density.csv");
    let reports = dir.path().join("reports.csv");
    let out = tops(&[
        "run", "--config", path(&config), "--seed", "1", "--density", path(&density), "--reports", path(&reports),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&density).unwrap().starts_with("bin_value,frequency\n"));
    let report_text = fs::read_to_string(&reports).unwrap();
    assert!(report_text.starts_with("user_id,phase,report\n"));
    assert_eq!(report_text.lines().count(), 2001);
    let manifest = json(&fs::read(dir.path().join("out.csv.manifest.json")).unwrap());
    assert_eq!(manifest["mode"], "topl");
}

#[test]
fn bench_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bench.json");
    fs::write(
        &config,
        r#"{"data": {"synthetic": {"spec": {"kind": "uniform", "low": 0, "high": 10}, "n": 600}},
            "m": 100, "r": 256, "epsilons": [1.0], "methods": ["ToPS", "PAK", "Base"], "repetitions": 3, "queries": 20}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = tops(&["bench", "--config", path(&config), "--seed", "4", "--threads", threads]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(String::from_utf8(outputs[0].clone()).unwrap().lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth_uniform(dir.path(), 100);

    let no_seed = tops(&["run", "--input", path(&input), "-B", "50", "--epsilon", "1", "-m", "10"]);
    assert_eq!(no_seed.status.code(), Some(2));

    let missing_bound = tops(&["run", "--seed", "1", "--input", path(&input), "--epsilon", "1", "-m", "10"]);
    assert_eq!(missing_bound.status.code(), Some(2));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1\n2\nnope\n").unwrap();
    let bad_row = tops(&["run", "--seed", "1", "--input", path(&bad), "-B", "5", "--epsilon", "1", "-m", "1"]);
    assert_eq!(bad_row.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad_row.stderr).contains(":3:"));

    let above = dir.path().join("above.txt");
    fs::write(&above, "1\n2\n9\n").unwrap();
    let out_of_range = tops(&["run", "--seed", "1", "--input", path(&above), "-B", "5", "--epsilon", "1", "-m", "1"]);
    assert_eq!(out_of_range.status.code(), Some(3));

    let absent = tops(&["threshold", "--input", path(&dir.path().join("absent")), "-B", "5", "--epsilon", "1"]);
    assert_eq!(absent.status.code(), Some(3));

    let short = dir.path().join("short.csv");
    fs::write(&short, "index,value\n1,0.5\n").unwrap();
    let mismatch = tops(&["eval", "--truth", path(&input), "--published", path(&short)]);
    assert_eq!(mismatch.status.code(), Some(3));

    let bench = dir.path().join("bench.json");
    fs::write(&bench, r#"{"data": {"synthetic": {"spec": {"kind": "constant", "value": 1}, "n": 10}}, "epsilons": [], "methods": ["Base"]}"#)
        .unwrap();
    assert_eq!(tops(&["bench", "--config", path(&bench), "--seed", "1"]).status.code(), Some(2));
    assert_eq!(tops(&["bench", "--config", path(&bench)]).status.code(), Some(2));
}
