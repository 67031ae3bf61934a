//! Event loop for one replica's pipeline.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use super::jitter::{sample, stream_id, Direction};
use super::{EventRecord, LinkModel, MessageRecord, RecordKind, TaskRecord, WaitRecord};
use crate::calibration::TransferTime;
use crate::schedule::{Task, TaskKind};
use crate::units::Micros;

/// Everything the loop needs about one stage.
#[derive(Clone, Debug)]
pub(crate) struct StageSpec {
    pub forward: Micros,
    pub backward: Micros,
    pub recompute: Micros,
    /// Time to ship an activation to the next stage.
    pub act_link: TransferTime,
    /// Time to ship a gradient from the next stage back to this one.
    pub grad_link: TransferTime,
}

impl StageSpec {
    fn duration(&self, kind: TaskKind) -> Micros {
        match kind {
            TaskKind::Forward => self.forward,
            TaskKind::Backward => self.backward,
            TaskKind::Recompute => self.recompute,
        }
    }
}

pub(crate) struct ReplicaInput<'a> {
    pub replica: usize,
    pub seed: u64,
    pub stages: &'a [StageSpec],
    pub lists: &'a [Vec<Task>],
    pub num_micro_batches: usize,
    pub opportunistic: bool,
    pub links: LinkModel,
    pub in_flight_cap: Option<&'a [usize]>,
    pub record: bool,
    pub log: bool,
}

#[derive(Debug, Default)]
pub(crate) struct ReplicaOutput {
    pub last_backward: Vec<Micros>,
    pub busy: Vec<Micros>,
    pub end: Micros,
    pub peak_in_flight: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
    pub messages: Vec<MessageRecord>,
    pub events: Vec<EventRecord>,
    pub waits: Vec<WaitRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    TaskDone { stage: usize },
    Deliver { link: usize, micro_batch: usize },
}

#[derive(Default)]
struct Link {
    queue: VecDeque<(usize, Micros)>,
    busy: bool,
}

const DONE_F: u8 = 1;
const DONE_R: u8 = 2;
const DONE_B: u8 = 4;
const STARTED_R: u8 = 8;
const STARTED_B: u8 = 16;
const STARTED_F: u8 = 32;

struct StageState {
    has_recompute: Vec<bool>,
    /// Position of each micro-batch's F, R and B in the stage's list.
    pos: Vec<[usize; 3]>,
    /// Forwards not yet started whose input is here, by list position.
    ready_forward: BTreeSet<(usize, usize)>,
    /// Forwards and backwards not yet started, by list position.
    unstarted: [BTreeSet<(usize, usize)>; 2],
    /// Micro-batches whose forward started and backward has not.
    live: BTreeSet<usize>,
    flags: Vec<u8>,
    act_at: Vec<Option<Micros>>,
    grad_at: Vec<Option<Micros>>,
    /// When the next stage started this micro-batch's backward.
    announced: Vec<Option<Micros>>,
    forward_started: Vec<Option<Micros>>,
    /// When the activation or gradient headed here left the sender.
    act_departed: Vec<Option<Micros>>,
    grad_departed: Vec<Option<Micros>>,
    cursor: usize,
    running: Option<(Task, Micros)>,
    open_pair: Option<usize>,
    stash: usize,
    peak: usize,
    busy: Micros,
    last_backward: Micros,
}

pub(crate) struct ReplicaSim<'a> {
    inp: ReplicaInput<'a>,
    now: Micros,
    seq: u64,
    heap: BinaryHeap<Reverse<(Micros, u64, Event)>>,
    st: Vec<StageState>,
    /// Link `2k` carries activations k -> k+1, `2k + 1` gradients k+1 -> k.
    links: Vec<Link>,
    /// Stages whose choice may have changed since they were last asked.
    dirty: Vec<bool>,
    out: ReplicaOutput,
}

impl<'a> ReplicaSim<'a> {
    pub fn new(inp: ReplicaInput<'a>) -> Self {
        let n = inp.num_micro_batches;
        let st = inp
            .lists
            .iter()
            .enumerate()
            .map(|(k, list)| {
                let mut has_recompute = vec![false; n];
                let mut pos = vec![[usize::MAX; 3]; n];
                let mut ready_forward = BTreeSet::new();
                let mut unstarted = [BTreeSet::new(), BTreeSet::new()];
                for (i, t) in list.iter().enumerate() {
                    pos[t.micro_batch][t.kind as usize] = i;
                    match t.kind {
                        TaskKind::Forward => unstarted[0].insert((i, t.micro_batch)),
                        TaskKind::Backward => unstarted[1].insert((i, t.micro_batch)),
                        TaskKind::Recompute => false,
                    };
                    match t.kind {
                        TaskKind::Recompute => has_recompute[t.micro_batch] = true,
                        TaskKind::Forward if k == 0 => {
                            ready_forward.insert((i, t.micro_batch));
                        }
                        _ => {}
                    }
                }
                StageState {
                    has_recompute,
                    pos,
                    ready_forward,
                    unstarted,
                    live: BTreeSet::new(),
                    flags: vec![0; n],
                    act_at: vec![None; n],
                    grad_at: vec![None; n],
                    announced: vec![None; n],
                    forward_started: vec![None; n],
                    act_departed: vec![None; n],
                    grad_departed: vec![None; n],
                    cursor: 0,
                    running: None,
                    open_pair: None,
                    stash: 0,
                    peak: 0,
                    busy: Micros::ZERO,
                    last_backward: Micros::ZERO,
                }
            })
            .collect();
        let p = inp.stages.len();
        ReplicaSim {
            links: (0..2 * p).map(|_| Link::default()).collect(),
            inp,
            now: Micros::ZERO,
            seq: 0,
            heap: BinaryHeap::new(),
            dirty: vec![true; p],
            st,
            out: ReplicaOutput::default(),
        }
    }

    fn push(&mut self, at: Micros, ev: Event) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn log(&mut self, stage: usize, event: &'static str, detail: String) {
        if self.inp.log {
            self.out.events.push(EventRecord {
                time: self.now,
                stage,
                replica: self.inp.replica,
                event,
                detail,
            });
        }
    }

    pub fn run(mut self) -> ReplicaOutput {
        let p = self.inp.stages.len();
        self.dispatch();
        while let Some(Reverse((t, _, _))) = self.heap.peek().copied() {
            self.now = t;
            while let Some(Reverse((t2, _, ev))) = self.heap.peek().copied() {
                if t2 != t {
                    break;
                }
                self.heap.pop();
                self.apply(ev);
            }
            self.dispatch();
        }
        let total: usize = self.inp.lists.iter().map(Vec::len).sum();
        let done: usize = self
            .st
            .iter()
            .map(|s| s.flags.iter().map(|f| (f & (DONE_F | DONE_R | DONE_B)).count_ones() as usize).sum::<usize>())
            .sum();
        assert_eq!(done, total, "simulation ended with tasks outstanding");
        self.out.last_backward = self.st.iter().map(|s| s.last_backward).collect();
        self.out.busy = self.st.iter().map(|s| s.busy).collect();
        self.out.peak_in_flight = self.st.iter().map(|s| s.peak).collect();
        self.out.end = self.out.last_backward.iter().copied().max().unwrap_or(Micros::ZERO);
        debug_assert_eq!(self.out.busy.len(), p);
        self.out
    }

    fn apply(&mut self, ev: Event) {
        match ev {
            Event::TaskDone { stage } => self.finish(stage),
            Event::Deliver { link, micro_batch } => self.deliver(link, micro_batch),
        }
    }

    fn finish(&mut self, k: usize) {
        let p = self.inp.stages.len();
        let (task, start) = self.st[k].running.take().expect("a task was running");
        self.dirty[k] = true;
        let j = task.micro_batch;
        let s = &mut self.st[k];
        match task.kind {
            TaskKind::Forward => {
                s.flags[j] |= DONE_F;
            }
            TaskKind::Recompute => {
                s.flags[j] |= DONE_R;
                s.open_pair = Some(j);
            }
            TaskKind::Backward => {
                s.flags[j] |= DONE_B;
                s.open_pair = None;
                s.stash -= 1;
                s.last_backward = self.now;
            }
        }
        if self.inp.record {
            self.out.tasks.push(TaskRecord {
                stage: k,
                replica: self.inp.replica,
                kind: RecordKind::from(task.kind),
                micro_batch: Some(j),
                start,
                end: self.now,
            });
        }
        self.log(k, "end", task.to_string());
        match task.kind {
            TaskKind::Forward if k + 1 < p => self.send(2 * k, j),
            TaskKind::Backward if k > 0 => self.send(2 * (k - 1) + 1, j),
            _ => {}
        }
    }

    fn transfer_time(&self, link: usize, j: usize) -> Micros {
        let stage = link / 2;
        let (t, dir) = if link.is_multiple_of(2) {
            (self.inp.stages[stage].act_link, Direction::Activation)
        } else {
            (self.inp.stages[stage].grad_link, Direction::Gradient)
        };
        sample(self.inp.seed, stream_id(self.inp.replica, stage, dir, j), t)
    }

    fn send(&mut self, link: usize, j: usize) {
        let sent = self.now;
        match self.inp.links {
            LinkModel::Unbounded => {
                let d = self.transfer_time(link, j);
                self.start_transfer(link, j, sent, d);
            }
            LinkModel::Serialized => {
                if self.links[link].busy {
                    self.links[link].queue.push_back((j, sent));
                } else {
                    let d = self.transfer_time(link, j);
                    self.links[link].busy = true;
                    self.start_transfer(link, j, sent, d);
                }
            }
        }
    }

    fn start_transfer(&mut self, link: usize, j: usize, sent: Micros, d: Micros) {
        let at = self.now + d;
        if link.is_multiple_of(2) {
            self.st[link / 2 + 1].act_departed[j] = Some(self.now);
        } else {
            self.st[link / 2].grad_departed[j] = Some(self.now);
        }
        if self.inp.record {
            let stage = link / 2;
            let (from, to) = if link.is_multiple_of(2) { (stage, stage + 1) } else { (stage + 1, stage) };
            self.out.messages.push(MessageRecord {
                replica: self.inp.replica,
                from_stage: from,
                to_stage: to,
                gradient: link % 2 == 1,
                micro_batch: j,
                sent,
                departed: self.now,
                delivered: at,
            });
        }
        self.push(at, Event::Deliver { link, micro_batch: j });
    }

    fn deliver(&mut self, link: usize, j: usize) {
        let stage = link / 2;
        self.dirty[if link.is_multiple_of(2) { stage + 1 } else { stage }] = true;
        if link.is_multiple_of(2) {
            let s = &mut self.st[stage + 1];
            s.act_at[j] = Some(self.now);
            if s.flags[j] & STARTED_F == 0 {
                s.ready_forward.insert((s.pos[j][TaskKind::Forward as usize], j));
            }
            self.log(stage + 1, "recv", format!("act{}", j + 1));
        } else {
            self.st[stage].grad_at[j] = Some(self.now);
            self.log(stage, "recv", format!("grad{}", j + 1));
        }
        if self.inp.links == LinkModel::Serialized {
            if let Some((next, sent)) = self.links[link].queue.pop_front() {
                let d = self.transfer_time(link, next);
                self.start_transfer(link, next, sent, d);
            } else {
                self.links[link].busy = false;
            }
        }
    }

    /// Starts work on idle stages, latest stage first, until nothing changes.
    fn dispatch(&mut self) {
        while let Some(k) = self.dirty.iter().rposition(|&d| d) {
            self.dirty[k] = false;
            if self.st[k].running.is_some() {
                continue;
            }
            if let Some(task) = self.choose(k) {
                self.start(k, task);
            } else if self.inp.record && self.inp.opportunistic && self.st[k].open_pair.is_none() {
                if let Some(&x) = self.inp.lists[k].get(self.st[k].cursor) {
                    self.out.waits.push(WaitRecord {
                        replica: self.inp.replica,
                        stage: k,
                        at: self.now,
                        task: x,
                        ready_bound: self.earliest_ready(k, x),
                    });
                }
            }
        }
    }

    fn start(&mut self, k: usize, task: Task) {
        let dur = self.inp.stages[k].duration(task.kind);
        let j = task.micro_batch;
        let s = &mut self.st[k];
        s.running = Some((task, self.now));
        s.busy += dur;
        match task.kind {
            TaskKind::Forward => {
                s.flags[j] |= STARTED_F;
                s.forward_started[j] = Some(self.now);
                s.unstarted[0].remove(&(s.pos[j][TaskKind::Forward as usize], j));
                s.ready_forward.remove(&(s.pos[j][TaskKind::Forward as usize], j));
                s.live.insert(j);
                s.stash += 1;
                s.peak = s.peak.max(s.stash);
            }
            TaskKind::Recompute => s.flags[j] |= STARTED_R,
            TaskKind::Backward => {
                s.flags[j] |= STARTED_B;
                s.unstarted[1].remove(&(s.pos[j][TaskKind::Backward as usize], j));
                s.live.remove(&j);
            }
        }
        while s.cursor < self.inp.lists[k].len() {
            let t = self.inp.lists[k][s.cursor];
            if s.flags[t.micro_batch] & started_bit(t.kind) == 0 {
                break;
            }
            s.cursor += 1;
        }
        if task.kind == TaskKind::Backward && k > 0 {
            self.st[k - 1].announced[j] = Some(self.now);
            self.dirty[k - 1] = true;
        }
        self.log(k, "start", task.to_string());
        self.push(self.now + dur, Event::TaskDone { stage: k });
    }

    fn is_last(&self, k: usize) -> bool {
        k + 1 == self.inp.stages.len()
    }

    fn arrived(&self, at: Option<Micros>) -> bool {
        at.is_some_and(|t| t <= self.now)
    }

    fn forward_ready(&self, k: usize, j: usize) -> bool {
        k == 0 || self.arrived(self.st[k].act_at[j])
    }

    fn backward_ready(&self, k: usize, j: usize) -> bool {
        let s = &self.st[k];
        let computed = s.flags[j] & DONE_F != 0 && (!s.has_recompute[j] || s.flags[j] & DONE_R != 0);
        computed && (self.is_last(k) || self.arrived(s.grad_at[j]))
    }

    fn static_ready(&self, k: usize, t: Task) -> bool {
        match t.kind {
            TaskKind::Forward => self.forward_ready(k, t.micro_batch),
            TaskKind::Recompute => self.st[k].flags[t.micro_batch] & DONE_F != 0,
            TaskKind::Backward => self.backward_ready(k, t.micro_batch),
        }
    }

    fn under_cap(&self, k: usize) -> bool {
        self.inp.in_flight_cap.is_none_or(|cap| self.st[k].stash < cap[k])
    }

    /// Picks the next task for an idle stage.
    ///
    /// Without the opportunistic flag this is the next listed task once it
    /// is ready. With it, a stage waiting on its listed task may run other
    /// ready work that finishes before the listed task could possibly be
    /// ready, and a recompute yields to forwards until it is due.
    fn choose(&self, k: usize) -> Option<Task> {
        let s = &self.st[k];
        if let Some(j) = s.open_pair {
            // A recomputed micro-batch holds the stage until its backward runs.
            return self.backward_ready(k, j).then(|| Task::backward(j));
        }
        let &x = self.inp.lists[k].get(s.cursor)?;
        if self.static_ready(k, x) {
            if self.inp.opportunistic && x.kind == TaskKind::Recompute && !self.backward_inputs_here(k, x.micro_batch) {
                // The recompute only has to be done when the gradient shows
                // up; until its latest start a forward may go ahead of it.
                let deadline = self.recompute_deadline(k, x.micro_batch);
                if deadline.is_none_or(|d| self.now < d) {
                    if let Some(f) = self.next_forward_ready(k) {
                        return Some(f);
                    }
                }
            }
            return Some(x);
        }
        if !self.inp.opportunistic {
            return None;
        }
        self.fill(k, self.earliest_ready(k, x))
    }

    fn backward_inputs_here(&self, k: usize, j: usize) -> bool {
        self.is_last(k) || self.arrived(self.st[k].grad_at[j])
    }

    /// Shortest time a transfer can take under the jitter model.
    fn floor(t: TransferTime) -> Micros {
        super::jitter::floor(t)
    }

    /// Earliest time the input of forward `j` can be on stage `k`.
    fn earliest_input(&self, k: usize, j: usize) -> Micros {
        if self.forward_ready(k, j) {
            return self.now;
        }
        let up = &self.st[k - 1];
        let link = Self::floor(self.inp.stages[k - 1].act_link);
        let at = if let Some(d) = self.st[k].act_departed[j] {
            d + link
        } else if up.flags[j] & DONE_F != 0 {
            self.now + link
        } else if let Some(s) = up.forward_started[j] {
            s + self.inp.stages[k - 1].forward + link
        } else {
            self.now + self.inp.stages[k - 1].forward + link
        };
        at.max(self.now)
    }

    /// Earliest time the gradient of `j` can reach stage `k`.
    fn earliest_gradient(&self, k: usize, j: usize) -> Micros {
        if self.backward_inputs_here(k, j) {
            return self.now;
        }
        let s = &self.st[k];
        let link = Self::floor(self.inp.stages[k].grad_link);
        let at = if let Some(d) = s.grad_departed[j] {
            d + link
        } else if self.st[k + 1].flags[j] & DONE_B != 0 {
            self.now + link
        } else if let Some(a) = s.announced[j] {
            a + self.inp.stages[k + 1].backward + link
        } else {
            self.now + self.inp.stages[k + 1].backward + link
        };
        at.max(self.now)
    }

    /// Earliest time the listed task `x` can become ready.
    fn earliest_ready(&self, k: usize, x: Task) -> Micros {
        match x.kind {
            TaskKind::Forward => self.earliest_input(k, x.micro_batch),
            TaskKind::Recompute => self.now,
            TaskKind::Backward => self.earliest_gradient(k, x.micro_batch),
        }
    }

    /// Latest start for the recompute of `j` that still ends when its
    /// gradient is expected, once the stage below has started that backward.
    fn recompute_deadline(&self, k: usize, j: usize) -> Option<Micros> {
        let announced = self.st[k].announced[j]?;
        let expected = announced + self.inp.stages[k + 1].backward + self.inp.stages[k].grad_link.mean;
        Some(expected.saturating_sub(self.inp.stages[k].recompute))
    }

    /// The next listed forward, if its input has arrived and the stash has
    /// room.
    fn next_forward_ready(&self, k: usize) -> Option<Task> {
        let &(_, j) = self.st[k].unstarted[0].first()?;
        (self.under_cap(k) && self.forward_ready(k, j)).then(|| Task::forward(j))
    }

    /// The next listed forward, if it is ready and ends by `until`.
    fn ready_forward_within(&self, k: usize, until: Micros) -> Option<Task> {
        if self.now + self.inp.stages[k].forward > until {
            return None;
        }
        self.next_forward_ready(k)
    }

    /// Work that ends by `until`: the next listed backward if its inputs are
    /// here (its recompute first, since the pair then holds the stage), else
    /// the next listed forward. Taking each kind in list order keeps every
    /// link's message order unchanged.
    fn fill(&self, k: usize, until: Micros) -> Option<Task> {
        let s = &self.st[k];
        let spec = &self.inp.stages[k];
        if let Some(&(_, j)) = s.unstarted[1].first() {
            if s.flags[j] & DONE_F != 0 && self.backward_inputs_here(k, j) {
                let (task, cost) = if s.has_recompute[j] && s.flags[j] & STARTED_R == 0 {
                    (Task::recompute(j), spec.recompute + spec.backward)
                } else {
                    (Task::backward(j), spec.backward)
                };
                if self.now + cost <= until {
                    return Some(task);
                }
            }
        }
        self.ready_forward_within(k, until)
    }
}

fn started_bit(kind: TaskKind) -> u8 {
    match kind {
        TaskKind::Forward => STARTED_F,
        TaskKind::Recompute => STARTED_R,
        TaskKind::Backward => STARTED_B,
    }
}
