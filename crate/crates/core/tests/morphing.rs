use pipemorph::calibration::{synthesize_profile, SynthOptions};
use pipemorph::config::{CutPoint, JobSpec, ModelSpec};
use pipemorph::morphing::{replay, MorphEventKind, MorphPolicy, MorphTimeline, PreemptionTrace, SegmentKind};
use pipemorph::{presets, Micros};

fn run(trace: &str) -> MorphTimeline {
    let model = ModelSpec::new(
        "toy",
        256,
        vec![CutPoint { params: 10_000_000, activation_bytes: 1 << 20, flops: None }; 8],
    )
    .unwrap();
    let hw = presets::commodity();
    let rings: Vec<u32> = (1..=8).collect();
    let profile = synthesize_profile(&model, &hw, &[1, 2, 4], &rings, &SynthOptions::default()).unwrap();
    let job = JobSpec { mini_batch: 128, target_iterations: 100, checkpoint_interval: 10 };
    let policy = MorphPolicy { horizon_s: Some(4000.0), ..MorphPolicy::default() };
    replay(&PreemptionTrace::parse(trace).unwrap(), &model, &job, &profile, &hw, &policy).unwrap()
}

const FOUR: &str = "0 add 1 1 1\n0 add 2 1 2\n0 add 3 1 3\n0 add 4 1 4\n";

fn training_at(t: &MorphTimeline, at_s: u64) -> &pipemorph::morphing::Segment {
    let at = Micros::from_secs(at_s);
    t.segments
        .iter()
        .find(|s| s.kind == SegmentKind::Training && s.start <= at && at < s.end)
        .unwrap_or_else(|| panic!("no training segment at {at_s} s"))
}

#[test]
fn slowdown_applies_only_after_its_event() {
    let t = run(&format!("{FOUR}1000 slow 2 1 2 2.0\n1005 heal 2 1 2\n"));
    let before = training_at(&t, 999).minibatch_time.unwrap();
    let during = training_at(&t, 1002).minibatch_time.unwrap();
    let after = training_at(&t, 1010).minibatch_time.unwrap();
    assert_eq!(during, before.scale(2.0));
    assert_eq!(after, before);
    assert_eq!(training_at(&t, 999).end, Micros::from_secs(1000));
}

#[test]
fn persistent_straggler_is_flagged_and_excluded() {
    let t = run(&format!("{FOUR}1000 slow 2 1 2 2.0\n"));
    assert!(t.events.iter().any(|e| e.kind == MorphEventKind::Flag && e.vms == [2]));
    let late = training_at(&t, 3000);
    assert!(!late.vms.contains(&2));
    assert!(late.minibatch_time.unwrap() < training_at(&t, 1002).minibatch_time.unwrap());
}

#[test]
fn losses_stay_within_a_checkpoint_interval() {
    let t = run(&format!("{FOUR}333 remove 3 1 3\n777 add 5 1 5\n1234 remove 1 1 1\n"));
    assert_eq!(t.lost_per_preemption.len(), 2);
    assert!(t.lost_per_preemption.iter().all(|&l| l < 10));
    let done: u64 = t.segments.iter().map(|s| s.iterations).sum();
    let lost: u64 = t.lost_per_preemption.iter().sum();
    assert_eq!(t.committed_iterations, done - lost);
    assert_eq!(t.cumulative_examples, done * 128);
}

#[test]
fn downtime_terms_add_up() {
    let t = run(&format!("{FOUR}500 remove 4 1 4\n"));
    let ev = t.events.iter().find(|e| matches!(e.kind, MorphEventKind::Reconfigure | MorphEventKind::PassThrough)).unwrap();
    assert_eq!(ev.downtime(), ev.restart + ev.planning + ev.checkpoint + ev.replay);
    assert!(ev.restart > Micros::ZERO && ev.planning > Micros::ZERO);
}

#[test]
fn replay_is_deterministic() {
    let trace = format!("{FOUR}100 remove 2 1 2\n400 add 6 1 6\n900 slow 1 1 1\n");
    assert_eq!(run(&trace), run(&trace));
}
