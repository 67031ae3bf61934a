//! Static micro-batch schedules.
//!
//! A schedule is an ordered task list per stage; it carries no timestamps.
//! [`zero_delay_timeline`] replays one under the uniform time model with
//! instantaneous transfers, which is how schedules are compared and checked.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::Micros;

/// Ordered so that backward sorts before recompute before forward, which is
/// the tie-break used by the simulator's event queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Backward,
    Recompute,
    Forward,
}

impl TaskKind {
    pub fn letter(self) -> char {
        match self {
            TaskKind::Forward => 'F',
            TaskKind::Backward => 'B',
            TaskKind::Recompute => 'R',
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" | "forward" => Ok(TaskKind::Forward),
            "B" | "backward" => Ok(TaskKind::Backward),
            "R" | "recompute" => Ok(TaskKind::Recompute),
            other => Err(Error::invalid("kind", format!("unknown task kind `{other}`"))),
        }
    }
}

/// One unit of work on a stage. `micro_batch` is 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub micro_batch: usize,
}

impl Task {
    pub fn forward(micro_batch: usize) -> Self {
        Task { kind: TaskKind::Forward, micro_batch }
    }
    pub fn backward(micro_batch: usize) -> Self {
        Task { kind: TaskKind::Backward, micro_batch }
    }
    pub fn recompute(micro_batch: usize) -> Self {
        Task { kind: TaskKind::Recompute, micro_batch }
    }
}

/// Displayed 1-based, as in `F3`.
impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.micro_batch + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Varuna,
    GPipe,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "varuna" => Ok(Policy::Varuna),
            "gpipe" => Ok(Policy::GPipe),
            other => Err(Error::invalid("schedule", format!("unknown policy `{other}` (expected varuna or gpipe)"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Varuna => "varuna",
            Policy::GPipe => "gpipe",
        })
    }
}

/// Per-stage task durations assumed identical on every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniformTimes {
    pub forward: Micros,
    pub backward: Micros,
    pub recompute: Micros,
}

impl UniformTimes {
    /// Recompute re-runs the forward pass.
    pub fn new(forward: Micros, backward: Micros) -> Self {
        UniformTimes { forward, backward, recompute: forward }
    }

    pub fn of(&self, kind: TaskKind) -> Micros {
        match kind {
            TaskKind::Forward => self.forward,
            TaskKind::Backward => self.backward,
            TaskKind::Recompute => self.recompute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub policy: Policy,
    pub num_micro_batches: usize,
    pub times: UniformTimes,
    /// `stages[k]` is the execution order on stage `k`.
    pub stages: Vec<Vec<Task>>,
}

impl Schedule {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Checks task counts and the recompute pairing. Rule-level problems are
    /// reported by [`validate_schedule`] instead.
    pub fn check_structure(&self) -> Result<()> {
        let p = self.num_stages();
        let n = self.num_micro_batches;
        if p == 0 || n == 0 {
            return Err(Error::ScheduleMismatch("schedule has no stages or no micro-batches".into()));
        }
        for (k, list) in self.stages.iter().enumerate() {
            let mut seen = vec![[false; 3]; n];
            for t in list {
                if t.micro_batch >= n {
                    return Err(Error::ScheduleMismatch(format!(
                        "stage {} references micro-batch {} of {n}",
                        k + 1,
                        t.micro_batch + 1
                    )));
                }
                let slot = &mut seen[t.micro_batch][t.kind as usize];
                if *slot {
                    return Err(Error::ScheduleMismatch(format!("stage {} runs {t} twice", k + 1)));
                }
                *slot = true;
            }
            for (j, s) in seen.iter().enumerate() {
                if !s[TaskKind::Forward as usize] || !s[TaskKind::Backward as usize] {
                    return Err(Error::ScheduleMismatch(format!(
                        "stage {} is missing a forward or backward for micro-batch {}",
                        k + 1,
                        j + 1
                    )));
                }
            }
            if self.policy == Policy::Varuna {
                let recomputes = seen.iter().filter(|s| s[TaskKind::Recompute as usize]).count();
                let want = if k + 1 == p { 0 } else { n };
                if recomputes != want {
                    return Err(Error::ScheduleMismatch(format!(
                        "stage {} has {recomputes} recomputes, expected {want}",
                        k + 1
                    )));
                }
            }
            for j in 0..n {
                let pos = |kind| list.iter().position(|t| *t == Task { kind, micro_batch: j });
                let f = pos(TaskKind::Forward).unwrap_or(usize::MAX);
                let b = pos(TaskKind::Backward).unwrap_or(0);
                if f > b {
                    return Err(Error::ScheduleMismatch(format!(
                        "stage {} runs B{} before F{}",
                        k + 1,
                        j + 1,
                        j + 1
                    )));
                }
                if let Some(r) = pos(TaskKind::Recompute) {
                    if r < f || r > b {
                        return Err(Error::ScheduleMismatch(format!(
                            "stage {} runs R{} outside its forward/backward window",
                            k + 1,
                            j + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest number of micro-batches whose forward has run but whose
    /// backward has not, over the list order, per stage.
    pub fn peak_in_flight(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|list| {
                let mut live = 0usize;
                let mut peak = 0;
                for t in list {
                    match t.kind {
                        TaskKind::Forward => {
                            live += 1;
                            peak = peak.max(live);
                        }
                        TaskKind::Backward => live -= 1,
                        TaskKind::Recompute => {}
                    }
                }
                peak
            })
            .collect()
    }

    /// `stage,seq,kind,microbatch` with 1-based stage, seq and micro-batch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,seq,kind,microbatch\n");
        for (k, list) in self.stages.iter().enumerate() {
            for (seq, t) in list.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", k + 1, seq + 1, t.kind.letter(), t.micro_batch + 1));
            }
        }
        out
    }

    /// Parses the CSV written by [`Schedule::to_csv`].
    pub fn from_csv(text: &str, policy: Policy, times: UniformTimes) -> Result<Schedule> {
        let mut rows: Vec<(usize, usize, Task)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("stage")) {
                continue;
            }
            let field = |name: &str| format!("line {}: {name}", lineno + 1);
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(Error::invalid(field("row"), "expected 4 columns"));
            }
            let num = |i: usize, name: &str| -> Result<usize> {
                cols[i]
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::invalid(field(name), format!("expected a positive integer, got `{}`", cols[i])))
            };
            let stage = num(0, "stage")?;
            let seq = num(1, "seq")?;
            let kind: TaskKind = cols[2].parse().map_err(|_| Error::invalid(field("kind"), format!("`{}`", cols[2])))?;
            let mb = num(3, "microbatch")?;
            rows.push((stage - 1, seq, Task { kind, micro_batch: mb - 1 }));
        }
        rows.sort_by_key(|&(s, seq, _)| (s, seq));
        let p = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n = rows.iter().map(|r| r.2.micro_batch + 1).max().unwrap_or(0);
        let mut stages = vec![Vec::new(); p];
        for (s, _, t) in rows {
            stages[s].push(t);
        }
        let schedule = Schedule { policy, num_micro_batches: n, times, stages };
        schedule.check_structure()?;
        Ok(schedule)
    }
}

fn check_args(p: usize, n: usize, times: &UniformTimes) -> Result<()> {
    if p == 0 || n == 0 {
        return Err(Error::invalid("schedule", "need at least one stage and one micro-batch"));
    }
    if times.forward.is_zero() || times.backward.is_zero() || times.recompute.is_zero() {
        return Err(Error::invalid("schedule", "task times must be positive"));
    }
    Ok(())
}

/// All forwards first, then recompute and backward in reverse micro-batch
/// order. Only the final micro-batch skips recompute on the last stage.
pub fn generate_gpipe_schedule(p: usize, n: usize, times: UniformTimes) -> Result<Schedule> {
    check_args(p, n, &times)?;
    let stages = (0..p)
        .map(|k| {
            let mut list: Vec<Task> = (0..n).map(Task::forward).collect();
            for j in (0..n).rev() {
                if !(k + 1 == p && j + 1 == n) {
                    list.push(Task::recompute(j));
                }
                list.push(Task::backward(j));
            }
            list
        })
        .collect();
    Ok(Schedule { policy: Policy::GPipe, num_micro_batches: n, times, stages })
}

struct GenState {
    p: usize,
    n: usize,
    times: UniformTimes,
    free_at: Vec<Micros>,
    f_end: Vec<Vec<Option<Micros>>>,
    b_end: Vec<Vec<Option<Micros>>>,
    next_f: Vec<usize>,
    next_b: Vec<usize>,
    wakeups: BinaryHeap<Reverse<Micros>>,
    open_recompute: Vec<Option<usize>>,
    stages: Vec<Vec<Task>>,
}

impl GenState {
    fn done(t: Option<Micros>, now: Micros) -> bool {
        t.is_some_and(|e| e <= now)
    }

    fn decide(&self, k: usize, now: Micros) -> Option<Task> {
        let last = k + 1 == self.p;
        if let Some(j) = self.open_recompute[k] {
            // Having recomputed, wait for the matching gradient.
            return Self::done(self.b_end[k + 1][j], now).then(|| Task::backward(j));
        }
        let fj = self.next_f[k];
        let f_ready = fj < self.n && (k == 0 || Self::done(self.f_end[k - 1][fj], now));
        let bj = self.next_b[k];
        if bj < self.n && Self::done(self.f_end[k][bj], now) {
            if last {
                return Some(Task::backward(bj));
            }
            if let Some(arrival) = self.b_end[k + 1][bj] {
                // The next stage has begun this backward, so the gradient
                // lands at `arrival`; a forward still fits if it ends before
                // the recompute must start.
                let due = arrival.saturating_sub(self.times.recompute);
                if f_ready && now + self.times.forward <= due {
                    return Some(Task::forward(fj));
                }
                return Some(Task::recompute(bj));
            }
        }
        f_ready.then(|| Task::forward(fj))
    }

    fn start(&mut self, k: usize, now: Micros, task: Task) {
        let end = now + self.times.of(task.kind);
        self.free_at[k] = end;
        self.wakeups.push(Reverse(end));
        match task.kind {
            TaskKind::Forward => {
                self.f_end[k][task.micro_batch] = Some(end);
                self.next_f[k] += 1;
            }
            TaskKind::Recompute => self.open_recompute[k] = Some(task.micro_batch),
            TaskKind::Backward => {
                self.b_end[k][task.micro_batch] = Some(end);
                self.next_b[k] += 1;
                self.open_recompute[k] = None;
                self.wakeups.push(Reverse(end.saturating_sub(self.times.recompute)));
            }
        }
        self.stages[k].push(task);
    }
}

/// Derives an order by running the three rules under the uniform time model
/// with zero network delay.
///
/// * A stage prefers a ready backward over a forward.
/// * Once the next stage starts the backward of micro-batch `j`, the gradient
///   arrival time is known; the stage keeps running forwards only while the
///   recompute of `j` can still start by `arrival - T_r`.
/// * After a recompute the stage idles until the matching backward runs.
/// * The last stage never recomputes.
///
/// Ties between ready forwards go to the lowest micro-batch.
pub fn generate_varuna_schedule(p: usize, n: usize, times: UniformTimes) -> Result<Schedule> {
    check_args(p, n, &times)?;
    let mut st = GenState {
        p,
        n,
        times,
        free_at: vec![Micros::ZERO; p],
        f_end: vec![vec![None; n]; p],
        b_end: vec![vec![None; n]; p],
        next_f: vec![0; p],
        next_b: vec![0; p],
        wakeups: BinaryHeap::new(),
        open_recompute: vec![None; p],
        stages: vec![Vec::new(); p],
    };
    let total = 2 * p * n + (p - 1) * n;
    let mut scheduled = 0;
    let mut now = Micros::ZERO;
    while scheduled < total {
        // Later stages decide first so their backward starts are visible to
        // earlier stages at the same instant.
        let mut changed = true;
        while changed {
            changed = false;
            for k in (0..p).rev() {
                if st.free_at[k] > now {
                    continue;
                }
                if let Some(task) = st.decide(k, now) {
                    st.start(k, now, task);
                    scheduled += 1;
                    changed = true;
                }
            }
        }
        if scheduled == total {
            break;
        }
        loop {
            let Reverse(t) = st.wakeups.pop().expect("generator stalled with work remaining");
            if t > now {
                now = t;
                break;
            }
        }
    }
    Ok(Schedule { policy: Policy::Varuna, num_micro_batches: n, times, stages: st.stages })
}

pub fn generate_schedule(policy: Policy, p: usize, n: usize, times: UniformTimes) -> Result<Schedule> {
    match policy {
        Policy::Varuna => generate_varuna_schedule(p, n, times),
        Policy::GPipe => generate_gpipe_schedule(p, n, times),
    }
}

/// A task with its start and end under some time model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TimedTask {
    pub task: Task,
    pub start: Micros,
    pub end: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Timeline {
    pub stages: Vec<Vec<TimedTask>>,
    pub makespan: Micros,
}

impl Timeline {
    pub fn find(&self, stage: usize, task: Task) -> Option<&TimedTask> {
        self.stages[stage].iter().find(|t| t.task == task)
    }

    /// Idle time per stage between time zero and the makespan.
    pub fn idle(&self) -> Vec<Micros> {
        self.stages
            .iter()
            .map(|list| self.makespan - list.iter().map(|t| t.end - t.start).sum::<Micros>())
            .collect()
    }

    /// Idle gaps per stage within `[0, makespan]`, in time order.
    pub fn idle_gaps(&self) -> Vec<Vec<Micros>> {
        self.stages
            .iter()
            .map(|list| {
                let mut gaps = Vec::new();
                let mut cursor = Micros::ZERO;
                for t in list {
                    if t.start > cursor {
                        gaps.push(t.start - cursor);
                    }
                    cursor = t.end;
                }
                if self.makespan > cursor {
                    gaps.push(self.makespan - cursor);
                }
                gaps
            })
            .collect()
    }
}

/// Runs each stage's list in order as early as dependencies allow, with
/// instantaneous transfers: `F(j)` on stage `k` waits for `F(j)` on `k-1`,
/// and `B(j)` on stage `k` waits for `B(j)` on `k+1`.
pub fn zero_delay_timeline(s: &Schedule) -> Result<Timeline> {
    s.check_structure()?;
    let p = s.num_stages();
    let n = s.num_micro_batches;
    let mut f_end = vec![vec![None::<Micros>; n]; p];
    let mut b_end = vec![vec![None::<Micros>; n]; p];
    let mut cursor = vec![0usize; p];
    let mut free_at = vec![Micros::ZERO; p];
    let mut out: Vec<Vec<TimedTask>> = s.stages.iter().map(|l| Vec::with_capacity(l.len())).collect();
    let total: usize = s.stages.iter().map(Vec::len).sum();
    let mut placed = 0;
    while placed < total {
        let mut progress = false;
        for k in 0..p {
            while let Some(&task) = s.stages[k].get(cursor[k]) {
                let dep = match task.kind {
                    TaskKind::Forward if k > 0 => f_end[k - 1][task.micro_batch],
                    TaskKind::Backward if k + 1 < p => b_end[k + 1][task.micro_batch],
                    _ => Some(Micros::ZERO),
                };
                let Some(dep) = dep else { break };
                let start = free_at[k].max(dep);
                let end = start + s.times.of(task.kind);
                match task.kind {
                    TaskKind::Forward => f_end[k][task.micro_batch] = Some(end),
                    TaskKind::Backward => b_end[k][task.micro_batch] = Some(end),
                    TaskKind::Recompute => {}
                }
                free_at[k] = end;
                out[k].push(TimedTask { task, start, end });
                cursor[k] += 1;
                placed += 1;
                progress = true;
            }
        }
        if !progress {
            return Err(Error::ScheduleMismatch("schedule deadlocks: circular wait between stages".into()));
        }
    }
    let makespan = free_at.into_iter().max().unwrap_or(Micros::ZERO);
    Ok(Timeline { stages: out, makespan })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Rule {
    /// Recompute left too late because a forward ran first.
    RecomputeLead,
    /// Something ran between a recompute and its backward.
    WaitForBackward,
    /// A forward ran while a backward was ready.
    PreferBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RuleViolation {
    /// 0-based stage.
    pub stage: usize,
    /// 0-based micro-batch the violation concerns.
    pub micro_batch: usize,
    pub rule: Rule,
}

impl fmt::Display for RuleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.rule {
            Rule::RecomputeLead => "recompute scheduled after a forward delayed it past the gradient arrival",
            Rule::WaitForBackward => "recompute not immediately followed by its backward",
            Rule::PreferBackward => "forward chosen while a backward was ready",
        };
        write!(f, "stage {} micro-batch {}: {what}", self.stage + 1, self.micro_batch + 1)
    }
}

/// Reports every rule instance the schedule breaks, judged on its
/// zero-delay replay.
pub fn validate_schedule(s: &Schedule) -> Result<Vec<RuleViolation>> {
    let tl = zero_delay_timeline(s)?;
    let p = s.num_stages();
    let n = s.num_micro_batches;
    let mut b_end = vec![vec![Micros::ZERO; n]; p];
    for (k, list) in tl.stages.iter().enumerate() {
        for t in list.iter().filter(|t| t.task.kind == TaskKind::Backward) {
            b_end[k][t.task.micro_batch] = t.end;
        }
    }
    let mut out = Vec::new();
    for (k, list) in s.stages.iter().enumerate() {
        let last = k + 1 == p;
        let timed = &tl.stages[k];
        // Earliest gradient arrival among backwards at or after each position.
        let mut first_gradient = vec![Micros::MAX; list.len() + 1];
        if !last {
            for i in (0..list.len()).rev() {
                first_gradient[i] = first_gradient[i + 1];
                if list[i].kind == TaskKind::Backward {
                    first_gradient[i] = first_gradient[i].min(b_end[k + 1][list[i].micro_batch]);
                }
            }
        }
        let mut live = 0usize;
        for (i, task) in list.iter().enumerate() {
            let j = task.micro_batch;
            match task.kind {
                TaskKind::Recompute => {
                    if list.get(i + 1) != Some(&Task::backward(j)) {
                        out.push(RuleViolation { stage: k, micro_batch: j, rule: Rule::WaitForBackward });
                    }
                    if !last
                        && i > 0
                        && list[i - 1].kind == TaskKind::Forward
                        && timed[i].start + s.times.recompute > b_end[k + 1][j]
                    {
                        out.push(RuleViolation { stage: k, micro_batch: j, rule: Rule::RecomputeLead });
                    }
                }
                TaskKind::Forward => {
                    let now = timed[i].start;
                    // On the last stage every stashed micro-batch can run its
                    // backward at once; elsewhere the gradient must be in.
                    let ready = if last { live > 0 } else { first_gradient[i] <= now };
                    if ready {
                        let b = list[i..]
                            .iter()
                            .find(|t| t.kind == TaskKind::Backward && (last || b_end[k + 1][t.micro_batch] <= now))
                            .expect("a ready backward exists");
                        out.push(RuleViolation { stage: k, micro_batch: b.micro_batch, rule: Rule::PreferBackward });
                    }
                    live += 1;
                }
                TaskKind::Backward => live -= 1,
            }
        }
    }
    Ok(out)
}
