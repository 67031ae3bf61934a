use pipemorph::calibration::CalibrationProfile;
use pipemorph::config::{uniform_stage_map, ModelSpec, ParallelConfig, RepeatedBlock};
use pipemorph::gantt::{gantt_csv, gantt_svg, render_gantt, GanttFormat};
use pipemorph::schedule::{generate_varuna_schedule, UniformTimes};
use pipemorph::sim::{simulate_minibatch, Placement, SimOptions, SimulationResult};
use pipemorph::Micros;

fn four_by_five() -> SimulationResult {
    let (p, n) = (4, 5);
    let model = ModelSpec::repeated("u", 1, RepeatedBlock { params: 10, activation_bytes: 8, flops: None, repeat: p }).unwrap();
    let profile = CalibrationProfile::uniform(p, Micros::from_secs(1), Micros::from_secs(2));
    let config = ParallelConfig { pipeline_depth: p, data_parallel: 1, micro_batch: 1, num_micro_batches: n, stage_map: uniform_stage_map(p, p) };
    let s = generate_varuna_schedule(p, n, UniformTimes::new(Micros::from_secs(1), Micros::from_secs(2))).unwrap();
    let opts = SimOptions { record: true, ..SimOptions::default() };
    simulate_minibatch(&s, &config, &model, &profile, &Placement::scattered(p, 1), 0, &opts).unwrap()
}

#[test]
fn one_row_per_interval() {
    let r = four_by_five();
    let csv = gantt_csv(&r, 0);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // 4 stages x 5 forwards and backwards, no recompute on the last stage,
    // one allreduce per stage.
    assert_eq!(rows.len(), 4 * 5 + 4 * 5 + 3 * 5 + 4);
    let count = |kind: &str| rows.iter().filter(|l| l.split(',').nth(1) == Some(kind)).count();
    assert_eq!((count("F"), count("B"), count("R")), (20, 20, 15));
    assert!(rows.iter().all(|l| !l.starts_with("4,R,")));
    assert_eq!(gantt_svg(&r, 0).matches(r#"class="task""#).count(), rows.len());
}

#[test]
fn kinds_have_distinct_colors() {
    let svg = gantt_svg(&four_by_five(), 0);
    let fill = |label: &str| {
        let at = svg.find(&format!("<title>{label} ")).unwrap();
        let rect = &svg[svg[..at].rfind("<rect").unwrap()..at];
        rect.split("fill=\"").nth(1).unwrap().split('"').next().unwrap().to_string()
    };
    let colors = [fill("F1"), fill("B1"), fill("R1")];
    assert!(colors[0] != colors[1] && colors[1] != colors[2] && colors[0] != colors[2], "{colors:?}");
}

#[test]
fn format_follows_the_extension() {
    let dir = tempfile::tempdir().unwrap();
    let r = four_by_five();
    for name in ["g.csv", "g.svg"] {
        let path = dir.path().join(name);
        render_gantt(&r, &path, GanttFormat::from_path(&path), 0).unwrap();
    }
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(csv, gantt_csv(&r, 0));
    assert!(std::fs::read_to_string(dir.path().join("g.svg")).unwrap().starts_with("<svg"));
}
