use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

fn pipemorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipemorph"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pipemorph(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = pipemorph(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Plans the small sample into `dir` and returns the written run file.
fn planned(dir: &Path) -> PathBuf {
    let run = dir.join("run.toml");
    ok(&["plan", "--spec", s(&sample("small.toml")), "--out", s(&run)]);
    run
}

#[test]
fn version() {
    assert!(ok(&["--version"]).starts_with("pipemorph "));
}

#[test]
fn plan_prints_every_depth_and_marks_one() {
    let out = ok(&["plan", "--spec", s(&sample("small.toml")), "--gpus", "6"]);
    let rows: Vec<&str> = out.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 6, "{out}");
    assert_eq!(rows.iter().filter(|r| r.contains('*')).count(), 1);
    assert!(out.contains("chosen "));
}

#[test]
fn plan_without_gpus_is_infeasible() {
    let err = fails(&["plan", "--spec", s(&sample("small.toml")), "--gpus", "0"], 1);
    assert!(err.contains("no feasible configuration"), "{err}");
}

#[test]
fn plan_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let text = std::fs::read_to_string(&run).unwrap();
    assert!(text.contains("[parallel]"));
    assert!(text.contains("[model.block]"), "block models round-trip in block form");
    let cfg = pipemorph::config::RunConfig::load(&run).unwrap();
    let p = cfg.parallel.unwrap();
    assert_eq!(p.stage_map.len(), 12);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let a = ok(&["simulate", "--config", s(&run), "--seed", "7"]);
    let b = ok(&["simulate", "--config", s(&run), "--seed", "7"]);
    assert_eq!(a, b);
    assert!(a.contains("mini-batch"));
    let c = ok(&["simulate", "--config", s(&run), "--seed", "7", "--schedule", "gpipe", "--static"]);
    assert!(c.contains("gpipe, static order"), "{c}");
}

#[test]
fn simulate_writes_gantt_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let svg = dir.path().join("g.svg");
    let events = dir.path().join("events.csv");
    ok(&["simulate", "--config", s(&run), "--gantt", s(&svg), "--events", s(&events)]);
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
    let log = std::fs::read_to_string(&events).unwrap();
    assert_eq!(log.lines().next(), Some("time_us,stage,replica,event,detail"));
}

#[test]
fn simulate_needs_a_parallel_table() {
    let err = fails(&["simulate", "--config", s(&sample("small.toml"))], 2);
    assert!(err.contains("[parallel]"), "{err}");
}

#[test]
fn simulate_refuses_configs_over_memory() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let text = std::fs::read_to_string(&run).unwrap().replace(
        "hardware_preset = \"commodity\"",
        "[hardware]\ngpu_memory_bytes = 100_000_000\ngpus_per_node = 1\nintra_node_bandwidth = 1e11\n\
         inter_node_bandwidth = 225e6\ninter_node_latency_s = 0.001\ninter_node_jitter_s = 0.0002\n\
         intra_node_latency_s = 0.00001\n",
    );
    // Root keys must precede tables.
    let (hw, rest) = text.split_at(text.find("[model]").unwrap());
    let tiny = dir.path().join("tiny.toml");
    std::fs::write(&tiny, format!("{rest}\n{hw}")).unwrap();
    let err = fails(&["simulate", "--config", s(&tiny)], 1);
    assert!(err.contains("over GPU memory"), "{err}");
    ok(&["simulate", "--config", s(&tiny), "--ignore-memory"]);
}

#[test]
fn gantt_csv_and_replica_range() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let csv = dir.path().join("g.csv");
    ok(&["gantt", "--config", s(&run), "--out", s(&csv), "--replica", "1"]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("stage,kind,microbatch,start_us,end_us"));
    assert!(text.lines().count() > 1);
    let err = fails(&["gantt", "--config", s(&run), "--out", s(&csv), "--replica", "9"], 2);
    assert!(err.contains("out of range"), "{err}");
}

#[test]
fn compare_gap_widens_as_bandwidth_shrinks() {
    let out = ok(&[
        "--json",
        "compare",
        "--config",
        s(&sample("gpt2-8.3b.toml")),
        "--depth",
        "18",
        "--replicas",
        "3",
        "--bandwidth-scale",
        "0.5,0.67,1.0",
    ]);
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let gaps: Vec<f64> = rows.iter().map(|r| r["gap"].as_f64().unwrap()).collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert_eq!(rows[2]["varuna_change"].as_f64(), Some(0.0));
}

#[test]
fn compare_table_has_a_row_per_scale() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let out = ok(&["compare", "--config", s(&run), "--bandwidth-scale", "0.5,1"]);
    assert_eq!(out.lines().count(), 3, "{out}");
    fails(&["compare", "--config", s(&run), "--bandwidth-scale", "-1"], 2);
}

#[test]
fn replay_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let trace = sample("trace.txt");
    let csv = ok(&["replay", "--config", s(&run), "--trace", s(&trace)]);
    assert_eq!(csv.lines().next(), Some("start,end,P,D,ex_per_s,ex_per_s_per_gpu,event"));
    assert!(csv.lines().any(|l| l.ends_with(",p")), "pass-through segments are marked p:\n{csv}");
    let again = ok(&["replay", "--config", s(&run), "--trace", s(&trace)]);
    assert_eq!(csv, again);

    let svg = dir.path().join("r.svg");
    let file = dir.path().join("r.csv");
    let summary = ok(&["replay", "--config", s(&run), "--trace", s(&trace), "--csv", s(&file), "--svg", s(&svg)]);
    assert!(summary.contains("reconfigurations"));
    assert_eq!(std::fs::read_to_string(&file).unwrap(), csv);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn replay_reports_bad_trace_lines() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let trace = dir.path().join("bad.txt");
    std::fs::write(&trace, "0 add 1 1 1\n5 explode 1 1 1\n").unwrap();
    let err = fails(&["replay", "--config", s(&run), "--trace", s(&trace)], 2);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn partition_respects_tolerance() {
    let ops = sample("ops.toml");
    let tight = ok(&["--json", "partition", "--ops", s(&ops), "-K", "8", "-P", "4"]);
    let loose = ok(&["--json", "partition", "--ops", s(&ops), "-K", "8", "-P", "4", "--tolerance", "0.25"]);
    let max_cut = |text: &str| {
        let v: serde_json::Value = serde_json::from_str(text).unwrap();
        let stages = v["stages"].as_array().unwrap().clone();
        assert_eq!(stages.len(), 4);
        stages.iter().skip(1).map(|st| st["input_activation_bytes"].as_u64().unwrap()).max().unwrap()
    };
    assert!(max_cut(&loose) < max_cut(&tight));
    let text = ok(&["partition", "--ops", s(&ops), "-K", "8", "-P", "4"]);
    assert!(text.contains("shared group `embedding`"));
}

#[test]
fn calibrate_synth_writes_a_profile_plan_can_use() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.toml");
    ok(&["calibrate-synth", "--config", s(&sample("small.toml")), "--out", s(&profile)]);
    let spec = std::fs::read_to_string(sample("small.toml")).unwrap();
    let spec = spec.replace("[calibration]\n", "[calibration]\nprofile = \"profile.toml\"\n");
    let with_profile = dir.path().join("measured.toml");
    std::fs::write(&with_profile, spec).unwrap();
    let a = ok(&["plan", "--spec", s(&with_profile)]);
    let b = ok(&["plan", "--spec", s(&sample("small.toml"))]);
    assert_eq!(a, b);
}

#[test]
fn parse_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "model_preset = \"gpt2-2.5b\"\nhardware_preset = \"commodity\"\n[job]\nmini_batch = \"many\"\n\
         target_iterations = 1\ncheckpoint_interval = 1\n",
    )
    .unwrap();
    let err = fails(&["plan", "--spec", s(&bad)], 2);
    assert!(err.contains("job.mini_batch"), "{err}");
}

#[test]
fn missing_files_and_usage_errors_exit_2() {
    let err = fails(&["plan", "--spec", "/nonexistent/job.toml"], 2);
    assert!(err.contains("/nonexistent/job.toml"), "{err}");
    fails(&["plan"], 2);
    fails(&["simulate", "--config", "x.toml", "--schedule", "zigzag"], 2);
}

#[test]
fn json_output_parses() {
    let dir = tempfile::tempdir().unwrap();
    let run = planned(dir.path());
    let plan: serde_json::Value = serde_json::from_str(&ok(&["--json", "plan", "--spec", s(&sample("small.toml"))])).unwrap();
    assert!(plan["chosen"]["pipeline_depth"].as_u64().unwrap() >= 1);
    let sim: serde_json::Value = serde_json::from_str(&ok(&["--json", "simulate", "--config", s(&run)])).unwrap();
    let stages = sim["stages"].as_array().unwrap();
    assert_eq!(stages.len() as u64, sim["config"]["pipeline_depth"].as_u64().unwrap());
    let replay: serde_json::Value =
        serde_json::from_str(&ok(&["--json", "replay", "--config", s(&run), "--trace", s(&sample("trace.txt"))])).unwrap();
    assert!(replay["segments"].as_array().unwrap().len() > 1);
}
