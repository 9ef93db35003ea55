//! Compiles an ordered stage schedule into a kernel mapping: a baseline
//! one-kernel-per-stage split followed by schedule hoisting, schedule
//! elimination, static synchronization resolution and kernel fusion.

use crate::graph::{
    BinAssign, ChannelId, DepRef, GraphError, IndexedPipeline, PipelineGraph, ScheduleKind,
};
use crate::ordering::{order_stages, OrderError, ScheduleEntry, StageSchedule};
use crate::skeleton::{build_skeleton, PipelineSkeleton, SkeletonError};
use std::collections::BTreeSet;
use std::fmt;

/// Core-assignment function the static round-robin map compiles to.
pub const DIRECT_MAP_FN: &str = "bin-mod-workers";

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Order(#[from] OrderError),
    #[error("internal ordering bug: {0}")]
    Internal(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum Phase {
    AssignBin,
    Schedule,
    Process,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct KernelPhase {
    pub stage: usize,
    pub phase: Phase,
}

impl KernelPhase {
    fn new(stage: usize, phase: Phase) -> KernelPhase {
        KernelPhase { stage, phase }
    }
}

/// How a kernel's bins reach workers.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub enum Dispatch {
    /// Interpret the stage's schedule directive at launch time. Only
    /// mappings taken from before the schedule passes carry this.
    FromSchedule,
    /// Bins offered to the dynamic claim queue as independent units.
    HardwareLoadBalance,
    /// Worker chosen per bin by the named precomputed map.
    PreScheduledMap(String),
    /// Every bin on worker zero in ascending bin order.
    SerializeToOne,
    /// Bins in sequence; each bin chunked across all workers. Zero
    /// chunk length means the whole bin is one chunk.
    SplitAll(u32),
}

/// Synchronization level ordered by strength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum EntrySync {
    None,
    /// The producing stage's matching bin must be complete.
    LocalPerBinBarrier,
    /// Every prior kernel must be complete.
    GlobalBarrier,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Kernel {
    pub phases: Vec<KernelPhase>,
    pub dispatch: Dispatch,
    pub entry_sync: EntrySync,
    /// Cycle set index when the kernel relaunches until its work drains.
    pub looped: Option<usize>,
    /// Stages fused behind a per-bin wait: their process starts on a bin
    /// only after the in-kernel producer finished that bin.
    pub bin_sync_before: BTreeSet<usize>,
}

impl Kernel {
    /// Stages whose Process phase runs here, in phase order.
    pub fn process_stages(&self) -> Vec<usize> {
        self.phases
            .iter()
            .filter(|ph| ph.phase == Phase::Process)
            .map(|ph| ph.stage)
            .collect()
    }

    pub fn lead_stage(&self) -> usize {
        self.process_stages()[0]
    }
}

/// One pipeline edge and how the mapping routes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Wire {
    pub from: usize,
    pub channel: ChannelId,
    pub to: usize,
    /// Fused boundaries hand primitives straight to the consumer's
    /// process and never touch the bin store.
    pub fused: bool,
}

/// Executable product of synthesis: ordered kernels plus everything the
/// runtime needs to run them.
#[derive(Clone)]
pub struct KernelMapping {
    pub pipeline: IndexedPipeline,
    pub skeleton: PipelineSkeleton,
    pub schedule: StageSchedule,
    pub kernels: Vec<Kernel>,
    pub wiring: Vec<Wire>,
    /// Kernel index holding each stage's Process phase.
    pub kernel_of: Vec<usize>,
    /// Phases run while feeding external input to source stages.
    pub injection: Vec<KernelPhase>,
}

impl KernelMapping {
    pub fn wire(&self, from: usize, channel: ChannelId) -> Option<&Wire> {
        self.wiring.iter().find(|w| w.from == from && w.channel == channel)
    }
}

/// One kernel per stage in launch order: the stage's own schedule and
/// process plus one bin-assignment phase per distinct successor. Source
/// stages bin their input at injection instead.
pub fn baseline_mapping(
    p: &IndexedPipeline,
    sk: &PipelineSkeleton,
    schedule: StageSchedule,
) -> KernelMapping {
    let flat = schedule.flat_stages();
    let mut kernel_of = vec![usize::MAX; p.len()];
    let mut kernels = Vec::with_capacity(flat.len());
    for (i, &s) in flat.iter().enumerate() {
        kernel_of[s] = i;
        let mut phases = vec![
            KernelPhase::new(s, Phase::Schedule),
            KernelPhase::new(s, Phase::Process),
        ];
        let mut seen = Vec::new();
        for t in p.out_edges[s].iter().flatten() {
            if !seen.contains(t) {
                seen.push(*t);
                phases.push(KernelPhase::new(*t, Phase::AssignBin));
            }
        }
        kernels.push(Kernel {
            phases,
            dispatch: Dispatch::FromSchedule,
            entry_sync: EntrySync::None,
            looped: sk.cycle_of[s],
            bin_sync_before: BTreeSet::new(),
        });
    }
    let injection =
        p.sources.iter().map(|&s| KernelPhase::new(s, Phase::AssignBin)).collect();
    let mut wiring = Vec::new();
    for from in 0..p.len() {
        for (ch, t) in p.out_edges[from].iter().enumerate() {
            if let Some(to) = *t {
                wiring.push(Wire { from, channel: ch as ChannelId, to, fused: false });
            }
        }
    }
    KernelMapping {
        pipeline: p.clone(),
        skeleton: sk.clone(),
        schedule,
        kernels,
        wiring,
        kernel_of,
        injection,
    }
}

/// Hoists statically resolvable schedules next to the matching
/// bin-assignment phase and records the resolved dispatch: a fixed
/// round-robin worker map, single-worker serialization, or sequential
/// bins chunked machine-wide.
pub fn preschedule(mut m: KernelMapping) -> KernelMapping {
    for s in 0..m.pipeline.len() {
        let kind = m.pipeline.decls[s].schedule.kind;
        let dispatch = match kind {
            ScheduleKind::DirectMap => Dispatch::PreScheduledMap(DIRECT_MAP_FN.to_string()),
            ScheduleKind::Serialize => Dispatch::SerializeToOne,
            ScheduleKind::All => {
                Dispatch::SplitAll(m.pipeline.decls[s].schedule.tile_split_size.unwrap_or(0))
            }
            ScheduleKind::LoadBalance => continue,
        };
        let sched = KernelPhase::new(s, Phase::Schedule);
        let assign = KernelPhase::new(s, Phase::AssignBin);
        for k in &mut m.kernels {
            k.phases.retain(|ph| *ph != sched);
        }
        m.injection.retain(|ph| *ph != sched);
        for k in &mut m.kernels {
            if let Some(at) = k.phases.iter().position(|ph| *ph == assign) {
                k.phases.insert(at + 1, sched);
            }
        }
        if let Some(at) = m.injection.iter().position(|ph| *ph == assign) {
            m.injection.insert(at + 1, sched);
        }
        m.kernels[m.kernel_of[s]].dispatch = dispatch;
    }
    m
}

/// Drops the schedule phase of load-balanced stages; their bins go to
/// the runtime's dynamic claim queue as independent units of work.
pub fn eliminate_schedule(mut m: KernelMapping) -> KernelMapping {
    for s in 0..m.pipeline.len() {
        if m.pipeline.decls[s].schedule.kind != ScheduleKind::LoadBalance {
            continue;
        }
        let sched = KernelPhase::new(s, Phase::Schedule);
        for k in &mut m.kernels {
            k.phases.retain(|ph| *ph != sched);
        }
        m.injection.retain(|ph| *ph != sched);
        m.kernels[m.kernel_of[s]].dispatch = Dispatch::HardwareLoadBalance;
    }
    m
}

/// Stamps every kernel with its entry synchronization: whole-stage
/// waits become global barriers, per-bin waits stay local unless the
/// consumer splits bins across workers, which forces the global
/// fallback.
pub fn resolve_dependencies(mut m: KernelMapping) -> Result<KernelMapping, SynthesisError> {
    for s in 0..m.pipeline.len() {
        let k = m.kernel_of[s];
        let mut sync = EntrySync::None;
        for d in &m.pipeline.deps[s] {
            match *d {
                DepRef::EndStage(t) => {
                    if m.kernel_of[t] >= k {
                        return Err(SynthesisError::Internal(format!(
                            "{} must finish before {} but its kernel is not earlier",
                            m.pipeline.names[t], m.pipeline.names[s]
                        )));
                    }
                    sync = sync.max(EntrySync::GlobalBarrier);
                }
                DepRef::EndBin => {
                    let split = match m.kernels[k].dispatch {
                        Dispatch::SplitAll(_) => true,
                        Dispatch::FromSchedule => {
                            m.pipeline.decls[s].schedule.kind == ScheduleKind::All
                        }
                        _ => false,
                    };
                    sync = sync.max(if split {
                        EntrySync::GlobalBarrier
                    } else {
                        EntrySync::LocalPerBinBarrier
                    });
                }
            }
        }
        m.kernels[k].entry_sync = sync;
    }
    Ok(m)
}

/// Merges adjacent kernels when the producer's tail stage feeds only
/// the consumer's head stage and the pair shares bin size, bin mapping
/// and resolved worker assignment, with no whole-stage wait between
/// them. A per-bin wait survives fusion as an in-kernel barrier when
/// bins stay unsplit. The producer then hands primitives straight to
/// the consumer's process phase. Applied until no pair is left.
pub fn fuse(mut m: KernelMapping) -> (KernelMapping, Vec<(String, String)>) {
    let mut pairs = Vec::new();
    loop {
        let Some(i) = (0..m.kernels.len().saturating_sub(1)).find(|&i| fusible(&m, i)) else {
            break;
        };
        let b_kernel = m.kernels.remove(i + 1);
        let tail = *m.kernels[i].process_stages().last().unwrap();
        let head = b_kernel.lead_stage();
        let consumer_waits_per_bin = m.pipeline.deps[head]
            .iter()
            .any(|d| matches!(d, DepRef::EndBin));

        let a = &mut m.kernels[i];
        a.phases.retain(|ph| {
            !(ph.stage == head && matches!(ph.phase, Phase::AssignBin | Phase::Schedule))
        });
        a.phases.extend(b_kernel.phases.iter().copied());
        a.bin_sync_before.extend(b_kernel.bin_sync_before.iter().copied());
        if consumer_waits_per_bin {
            a.bin_sync_before.insert(head);
        }
        for w in &mut m.wiring {
            if w.from == tail && w.to == head {
                w.fused = true;
            }
        }
        for s in b_kernel.process_stages() {
            m.kernel_of[s] = i;
        }
        for k in m.kernel_of.iter_mut() {
            if *k > i && *k != usize::MAX {
                *k -= 1;
            }
        }
        pairs.push((m.pipeline.names[tail].clone(), m.pipeline.names[head].clone()));
    }
    (m, pairs)
}

fn fusible(m: &KernelMapping, i: usize) -> bool {
    let (a_k, b_k) = (&m.kernels[i], &m.kernels[i + 1]);
    let a = *a_k.process_stages().last().unwrap();
    let b = b_k.lead_stage();
    let p = &m.pipeline;

    // List-at-a-time process phases read whole bins and cannot accept
    // primitives one by one.
    let chain = a_k.process_stages().into_iter().chain(b_k.process_stages());
    if chain.into_iter().any(|s| !m.skeleton.fusable[s]) {
        return false;
    }

    // Merging may not move a stage across a repeat boundary or between
    // plain launches and a bin-interleaved traversal.
    let (ea, eb) = (m.schedule.entry_of(a).unwrap(), m.schedule.entry_of(b).unwrap());
    if ea != eb {
        let plain = |e: usize| matches!(m.schedule.entries[e], ScheduleEntry::Launch(_));
        if !(plain(ea) && plain(eb)) {
            return false;
        }
    }
    if a_k.looped != b_k.looped {
        return false;
    }

    // Exclusive one-to-one linkage.
    if p.successors(a) != [b] || p.predecessors(b) != [a] {
        return false;
    }

    // Equal bin footprint.
    if p.grids[a].size() != p.grids[b].size() {
        return false;
    }

    // Same primitive-to-bin mapping: the consumer keeps the producer's
    // bins, or both run the same built-in assignment over equal grids.
    let same_bins = matches!(p.decls[b].assign, BinAssign::PreviousBins)
        || p.decls[a].assign.same_builtin(&p.decls[b].assign);
    if !same_bins {
        return false;
    }

    // A whole-stage wait needs the kernel break; a per-bin wait fuses
    // only when it resolved to a local barrier.
    for d in &p.deps[b] {
        match d {
            DepRef::EndStage(_) => return false,
            DepRef::EndBin => {
                if b_k.entry_sync != EntrySync::LocalPerBinBarrier {
                    return false;
                }
            }
        }
    }

    // Identical resolved worker assignment.
    match (&a_k.dispatch, &b_k.dispatch) {
        (Dispatch::PreScheduledMap(x), Dispatch::PreScheduledMap(y)) => x == y,
        (Dispatch::SerializeToOne, Dispatch::SerializeToOne) => true,
        _ => false,
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct KernelSummary {
    pub stages: Vec<String>,
    pub dispatch: String,
    pub entry_sync: String,
    pub looped: bool,
    pub phases: Vec<String>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SynthesisReport {
    pub kernel_count: usize,
    pub kernels: Vec<KernelSummary>,
    pub fused_pairs: Vec<(String, String)>,
    pub prescheduled: Vec<String>,
    pub eliminated_schedules: Vec<String>,
    pub injection_phases: Vec<String>,
}

impl fmt::Display for SynthesisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kernels: {}", self.kernel_count)?;
        for (i, k) in self.kernels.iter().enumerate() {
            let looped = if k.looped { " loop" } else { "" };
            writeln!(
                f,
                "  {}. [{}] dispatch={} sync={}{}",
                i + 1,
                k.stages.join(" + "),
                k.dispatch,
                k.entry_sync,
                looped
            )?;
            writeln!(f, "     phases: {}", k.phases.join(" -> "))?;
        }
        if !self.injection_phases.is_empty() {
            writeln!(f, "injection: {}", self.injection_phases.join(" -> "))?;
        }
        if !self.fused_pairs.is_empty() {
            let list: Vec<String> =
                self.fused_pairs.iter().map(|(a, b)| format!("{a}+{b}")).collect();
            writeln!(f, "fused: {}", list.join(", "))?;
        }
        if !self.prescheduled.is_empty() {
            writeln!(f, "prescheduled: {}", self.prescheduled.join(", "))?;
        }
        if !self.eliminated_schedules.is_empty() {
            writeln!(f, "eliminated schedules: {}", self.eliminated_schedules.join(", "))?;
        }
        Ok(())
    }
}

fn phase_label(p: &IndexedPipeline, ph: &KernelPhase) -> String {
    let what = match ph.phase {
        Phase::AssignBin => "assign",
        Phase::Schedule => "schedule",
        Phase::Process => "process",
    };
    format!("{}.{}", p.names[ph.stage], what)
}

pub fn report(m: &KernelMapping, fused_pairs: &[(String, String)]) -> SynthesisReport {
    let p = &m.pipeline;
    let kernels = m
        .kernels
        .iter()
        .map(|k| KernelSummary {
            stages: k.process_stages().iter().map(|&s| p.names[s].clone()).collect(),
            dispatch: match &k.dispatch {
                Dispatch::FromSchedule => "from-schedule".to_string(),
                Dispatch::HardwareLoadBalance => "load-balance".to_string(),
                Dispatch::PreScheduledMap(f) => format!("pre-scheduled({f})"),
                Dispatch::SerializeToOne => "serialize".to_string(),
                Dispatch::SplitAll(s) => format!("split-all({s})"),
            },
            entry_sync: match k.entry_sync {
                EntrySync::None => "none".to_string(),
                EntrySync::LocalPerBinBarrier => "local-per-bin".to_string(),
                EntrySync::GlobalBarrier => "global".to_string(),
            },
            looped: k.looped.is_some(),
            phases: k.phases.iter().map(|ph| phase_label(p, ph)).collect(),
        })
        .collect();
    let by_kind = |kinds: &[ScheduleKind]| -> Vec<String> {
        (0..p.len())
            .filter(|&s| kinds.contains(&p.decls[s].schedule.kind))
            .map(|s| p.names[s].clone())
            .collect()
    };
    SynthesisReport {
        kernel_count: m.kernels.len(),
        kernels,
        fused_pairs: fused_pairs.to_vec(),
        prescheduled: by_kind(&[ScheduleKind::DirectMap, ScheduleKind::Serialize, ScheduleKind::All]),
        eliminated_schedules: by_kind(&[ScheduleKind::LoadBalance]),
        injection_phases: m.injection.iter().map(|ph| phase_label(p, ph)).collect(),
    }
}

/// Full compilation: bin normalization, structural analysis, launch
/// ordering, then the optimization passes with fusion last so it can
/// compare resolved dispatches.
pub fn synthesize(
    g: &PipelineGraph,
) -> Result<(KernelMapping, SynthesisReport), SynthesisError> {
    let g = g.normalize_bins();
    let p = g.index()?;
    let sk = build_skeleton(&p)?;
    let schedule = order_stages(&p, &sk)?;
    let m = baseline_mapping(&p, &sk, schedule);
    let m = preschedule(m);
    let m = eliminate_schedule(m);
    let m = resolve_dependencies(m)?;
    let (m, pairs) = fuse(m);
    let rep = report(&m, &pairs);
    Ok((m, rep))
}
