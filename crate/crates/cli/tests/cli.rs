use std::path::Path;
use std::process::{Command, Output};

fn ver(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ver")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn small_maze(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("maze.json");
    std::fs::write(&p, r#"{"kind":"maze","flavor":"soft_q","beta":0.5,"total_steps":500,"seeds":[1,2]}"#).unwrap();
    p
}

#[test]
fn linear_compare_prints_table() {
    let o = ver(&["linear-compare", "--n", "3,5", "--strategies", "oracle_td,oracle_evb", "--seeds-per-point", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.contains("oracle_evb") && l.trim_start().starts_with('5') && l.contains("5.000")));
    assert!(text.lines().any(|l| l.contains("oracle_td") && l.trim_start().starts_with('3') && l.contains("12.000")));
}

#[test]
fn unknown_strategy_is_config_error() {
    let o = ver(&["linear-compare", "--n", "3", "--strategies", "bogus", "--seeds-per-point", "1"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn run_verify_summarize_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_maze(dir.path());
    let out = dir.path().join("out");
    let o = ver(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("trace_seed1.csv").exists() && out.join("trace_seed2.csv").exists());
    assert!(out.join("episodes_seed1.csv").exists());

    let o = ver(&["verify-bounds", "--in", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("records 2000"));

    let o = ver(&["summarize", "--in", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let scatter = std::fs::read_to_string(out.join("summary/scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 2001);

    // inflate one evb tenfold
    let trace = out.join("trace_seed1.csv");
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let idx = 1 + lines[1..]
        .iter()
        .position(|l| l.split(',').nth(6).is_some_and(|v| v.parse::<f64>().unwrap().abs() > 1e-3))
        .expect("a record with visible evb");
    let mut fields: Vec<String> = lines[idx].split(',').map(String::from).collect();
    fields[6] = (fields[6].parse::<f64>().unwrap() * 10.0).to_string();
    lines[idx] = fields.join(",");
    std::fs::write(&trace, lines.join("\n") + "\n").unwrap();
    let o = ver(&["verify-bounds", "--in", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = ver(&["verify-bounds", "--in", out.to_str().unwrap(), "--tolerance", "1e6"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn seeds_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_maze(dir.path());
    let out = dir.path().join("out");
    let o = ver(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "7"]);
    assert_eq!(code(&o), 0);
    assert!(out.join("trace_seed7.csv").exists());
    assert!(!out.join("trace_seed1.csv").exists());
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"kind":"maze","flavor":"q","total_steps":10,"seeds":[0],"learning_rate":1}"#).unwrap();
    let o = ver(&["run", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = ver(&["run", "--config", dir.path().join("missing.json").to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("diverge.json");
    std::fs::write(
        &p,
        r#"{"kind":"cartpole","agent":"dqn","replay":"uniform","seeds":[0],
            "learner":{"learning_rate":1e200,"gamma":0.99,"batch":4,"buffer_capacity":50,"total_steps":200,
                       "beta":0.5,"target_sync_period":10,"hidden":[8]}}"#,
    )
    .unwrap();
    let o = ver(&["run", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_trace_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("trace_x.csv"), "not,a,trace\n").unwrap();
    let o = ver(&["verify-bounds", "--in", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed"));
}

#[test]
fn shipped_presets_parse() {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut count = 0;
    for entry in std::fs::read_dir(presets).unwrap() {
        let p = entry.unwrap().path();
        ver_core::experiment::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        count += 1;
    }
    assert_eq!(count, 7);
}
