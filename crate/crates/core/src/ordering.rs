//! Static stage-launch schedule: branches interleaved under dependency
//! deferral, cycles wrapped into repeat-until-empty entries, and runs of
//! sequential-bin stages folded into depth-first traversal groups.

use crate::graph::{BinId, DepRef, IndexedPipeline, ScheduleKind};
use crate::skeleton::PipelineSkeleton;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug)]
pub enum OrderError {
    /// Explicit dependencies and data edges form a circular wait; the
    /// chain lists (waiting stage, awaited stage) pairs around the loop.
    UnsatisfiableConstraints(Vec<(String, String)>),
}

impl fmt::Display for OrderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderError::UnsatisfiableConstraints(chain) => {
                write!(f, "circular stage ordering constraints: ")?;
                for (i, (from, to)) in chain.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{from} waits on {to}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for OrderError {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ScheduleEntry {
    /// Run one stage over all its bins to completion.
    Launch(usize),
    /// Relaunch the member stages, kept in launch order, until every
    /// member's bins drain. Members are exactly one detected cycle set.
    LoopUntilEmpty(Vec<usize>),
    /// Stages traversed bin by bin: the whole chain finishes one leader
    /// bin before the next leader bin starts.
    DepthFirstGroup(Vec<usize>),
}

impl ScheduleEntry {
    pub fn stages(&self) -> &[usize] {
        match self {
            ScheduleEntry::Launch(s) => std::slice::from_ref(s),
            ScheduleEntry::LoopUntilEmpty(v) => v,
            ScheduleEntry::DepthFirstGroup(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl StageSchedule {
    /// Index of the entry holding the stage.
    pub fn entry_of(&self, stage: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.stages().contains(&stage))
    }

    /// Stages in launch order with loop and group entries expanded.
    pub fn flat_stages(&self) -> Vec<usize> {
        self.entries.iter().flat_map(|e| e.stages().iter().copied()).collect()
    }

    pub fn render(&self, p: &IndexedPipeline) -> String {
        let mut out = String::new();
        let list = |v: &[usize]| {
            v.iter().map(|&s| p.names[s].as_str()).collect::<Vec<_>>().join(", ")
        };
        for (i, e) in self.entries.iter().enumerate() {
            let line = match e {
                ScheduleEntry::Launch(s) => format!("{}. launch {}", i + 1, p.names[*s]),
                ScheduleEntry::LoopUntilEmpty(v) => {
                    format!("{}. loop-until-empty [{}]", i + 1, list(v))
                }
                ScheduleEntry::DepthFirstGroup(v) => {
                    format!("{}. depth-first [{}]", i + 1, list(v))
                }
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Orders stages for launch. Within a branch stages keep their chain
/// order (descending drain distance); branches are taken in partition
/// order but deferred while any producer or end-stage target of theirs
/// is still unscheduled. Cycle sets become one repeat entry apiece,
/// emitted once their last member branch is reached. Afterwards a run of
/// launches led by a sequential-bin stage folds into a depth-first
/// group as long as bin sizes never grow along the run.
pub fn order_stages(
    p: &IndexedPipeline,
    sk: &PipelineSkeleton,
) -> Result<StageSchedule, OrderError> {
    let n = p.len();
    let nb = sk.branches.len();
    let mut emitted = vec![false; n];
    let mut branch_done = vec![false; nb];
    let mut pending: Vec<Vec<usize>> = vec![Vec::new(); sk.cycle_sets.len()];
    let mut slots: Vec<ScheduleEntry> = Vec::new();

    let same_cycle = |a: usize, b: usize| -> bool {
        matches!((sk.cycle_of[a], sk.cycle_of[b]), (Some(x), Some(y)) if x == y)
    };

    // A constraint is met once the awaited stage sits in a pushed slot,
    // earlier in the same branch, or in the same cycle set (the loop
    // entry holds the whole set at once).
    let satisfied = |br: &[usize], pos: usize, s: usize, t: usize, emitted: &[bool]| {
        emitted[t] || br[..pos].contains(&t) || same_cycle(s, t)
    };

    let first_unmet = |b: usize, emitted: &[bool]| -> Option<(usize, usize)> {
        let br = &sk.branches[b].stages;
        for (pos, &s) in br.iter().enumerate() {
            for d in &p.deps[s] {
                if let DepRef::EndStage(t) = *d {
                    if !satisfied(br, pos, s, t, emitted) {
                        return Some((s, t));
                    }
                }
            }
            for &(prod, ch) in &p.in_edges[s] {
                if sk.back_edges.contains(&(prod, ch, s)) {
                    continue;
                }
                if !satisfied(br, pos, s, prod, emitted) {
                    return Some((s, prod));
                }
            }
        }
        None
    };

    while branch_done.iter().any(|d| !d) {
        let mut progress = false;
        for b in 0..nb {
            if branch_done[b] || first_unmet(b, &emitted).is_some() {
                continue;
            }
            branch_done[b] = true;
            progress = true;
            for &s in &sk.branches[b].stages {
                if let Some(k) = sk.cycle_of[s] {
                    pending[k].push(s);
                    if pending[k].len() == sk.cycle_sets[k].len() {
                        for &m in &pending[k] {
                            emitted[m] = true;
                        }
                        slots.push(ScheduleEntry::LoopUntilEmpty(std::mem::take(
                            &mut pending[k],
                        )));
                    }
                } else {
                    emitted[s] = true;
                    slots.push(ScheduleEntry::Launch(s));
                }
            }
        }
        if !progress {
            return Err(constraint_cycle(p, sk, &branch_done, &emitted, first_unmet));
        }
    }

    Ok(StageSchedule { entries: group_runs(p, sk, slots) })
}

/// Walks the blocked-waits-on-blocked relation among the remaining
/// branches until a branch repeats, then reports the closed chain.
fn constraint_cycle(
    p: &IndexedPipeline,
    sk: &PipelineSkeleton,
    branch_done: &[bool],
    emitted: &[bool],
    first_unmet: impl Fn(usize, &[bool]) -> Option<(usize, usize)>,
) -> OrderError {
    let start = (0..branch_done.len()).find(|&b| !branch_done[b]).unwrap();
    let mut seen: Vec<usize> = Vec::new();
    let mut waits: Vec<(usize, usize)> = Vec::new();
    let mut b = start;
    let cycle_from = loop {
        if let Some(at) = seen.iter().position(|&x| x == b) {
            break at;
        }
        seen.push(b);
        let (s, t) = first_unmet(b, emitted).expect("blocked branch has an unmet constraint");
        waits.push((s, t));
        b = sk.branch_of[t];
        debug_assert!(!branch_done[b], "wait target sits in a finished branch");
    };
    let chain = waits[cycle_from..]
        .iter()
        .map(|&(s, t)| (p.names[s].clone(), p.names[t].clone()))
        .collect();
    OrderError::UnsatisfiableConstraints(chain)
}

/// Folds maximal runs of launches into depth-first groups. A run starts
/// at a stage scheduled with the all-bins-in-sequence directive and
/// extends while each next launch's bin size stays componentwise no
/// larger than its predecessor's. Lone leaders stay plain launches.
fn group_runs(
    p: &IndexedPipeline,
    sk: &PipelineSkeleton,
    slots: Vec<ScheduleEntry>,
) -> Vec<ScheduleEntry> {
    let mut out: Vec<ScheduleEntry> = Vec::new();
    let mut i = 0;
    while i < slots.len() {
        let lead = match slots[i] {
            ScheduleEntry::Launch(s)
                if p.decls[s].schedule.kind == ScheduleKind::All
                    && sk.cycle_of[s].is_none() =>
            {
                s
            }
            _ => {
                out.push(slots[i].clone());
                i += 1;
                continue;
            }
        };
        let mut group = vec![lead];
        let mut prev = p.grids[lead].size();
        let mut j = i + 1;
        while j < slots.len() {
            let ScheduleEntry::Launch(next) = slots[j] else { break };
            let size = p.grids[next].size();
            if size.0 > prev.0 || size.1 > prev.1 {
                break;
            }
            group.push(next);
            prev = size;
            j += 1;
        }
        if group.len() > 1 {
            out.push(ScheduleEntry::DepthFirstGroup(group));
        } else {
            out.push(ScheduleEntry::Launch(lead));
        }
        i = j;
    }
    out
}

/// Per-bin launch sequence for one depth-first group, as sweeps of
/// (stage, bin of that stage's grid) pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthFirstPlan {
    pub sweeps: Vec<Vec<(usize, BinId)>>,
}

impl DepthFirstPlan {
    pub fn flat(&self) -> Vec<(usize, BinId)> {
        self.sweeps.iter().flatten().copied().collect()
    }
}

/// Expands a group into its traversal: outer loop over the first
/// stage's bins in row-major order, inner loop down the stage chain.
/// Later stages with finer grids run every bin whose top-left pixel
/// falls inside the current leader bin. A chain stalls at a stage whose
/// end-stage target inside the group has bins outstanding at the start
/// of the sweep, and resumes in a later sweep once the target drains.
pub fn depth_first_plan(p: &IndexedPipeline, group: &[usize]) -> DepthFirstPlan {
    assert!(!group.is_empty(), "empty depth-first group");
    let lead_grid = &p.grids[group[0]];
    let nbins = lead_grid.len() as usize;

    // owned[i][l] = bins of group[i]'s grid claimed by leader bin l.
    let mut owned: Vec<Vec<Vec<BinId>>> = Vec::with_capacity(group.len());
    for &s in group {
        let g = &p.grids[s];
        let mut per: Vec<Vec<BinId>> = vec![Vec::new(); nbins];
        for f in 0..g.len() {
            let r = g.rect(f);
            per[lead_grid.bin_of_pixel(r.x0, r.y0) as usize].push(f);
        }
        owned.push(per);
    }

    // In-group end-stage targets per chain position.
    let gates: Vec<Vec<usize>> = group
        .iter()
        .map(|&s| {
            p.deps[s]
                .iter()
                .filter_map(|d| match *d {
                    DepRef::EndStage(t) => group.iter().position(|&m| m == t),
                    DepRef::EndBin => None,
                })
                .collect()
        })
        .collect();

    let mut next_stage = vec![0usize; nbins];
    let mut finished_bins = vec![0usize; group.len()];
    let mut sweeps: Vec<Vec<(usize, BinId)>> = Vec::new();
    while next_stage.iter().any(|&i| i < group.len()) {
        let done_at_start: Vec<bool> = (0..group.len())
            .map(|i| finished_bins[i] == p.grids[group[i]].len() as usize)
            .collect();
        let mut sweep: Vec<(usize, BinId)> = Vec::new();
        for l in 0..nbins {
            while next_stage[l] < group.len() {
                let i = next_stage[l];
                if gates[i].iter().any(|&t| !done_at_start[t]) {
                    break;
                }
                for &f in &owned[i][l] {
                    sweep.push((group[i], f));
                }
                finished_bins[i] += owned[i][l].len();
                next_stage[l] += 1;
            }
        }
        if sweep.is_empty() {
            // A gate target later in the chain can never drain; leave
            // the stalled tails unexpanded rather than spin.
            break;
        }
        sweeps.push(sweep);
    }
    DepthFirstPlan { sweeps }
}

/// When a stage may first run, split by producer role: producers outside
/// any cycle shared with the stage must fully complete beforehand, while
/// producers inside the shared cycle feed later iterations and are the
/// portion of the pipeline that repeats.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadinessRule {
    pub stage: usize,
    /// Must run to completion before the stage's first launch.
    pub barrier_producers: Vec<usize>,
    /// Feed iterations of the shared cycle instead of gating the start.
    pub loop_producers: Vec<usize>,
    /// Cycle set the stage repeats with, when it is in one.
    pub repeats_with: Option<BTreeSet<usize>>,
}

pub fn multi_cycle_gate(
    p: &IndexedPipeline,
    sk: &PipelineSkeleton,
    stage: usize,
) -> ReadinessRule {
    let mut barrier = Vec::new();
    let mut looped = Vec::new();
    for pr in p.predecessors(stage) {
        let shared = matches!(
            (sk.cycle_of[pr], sk.cycle_of[stage]),
            (Some(a), Some(b)) if a == b
        );
        if shared {
            looped.push(pr);
        } else {
            barrier.push(pr);
        }
    }
    ReadinessRule {
        stage,
        barrier_producers: barrier,
        loop_producers: looped,
        repeats_with: sk.cycle_of[stage].map(|k| sk.cycle_sets[k].clone()),
    }
}
