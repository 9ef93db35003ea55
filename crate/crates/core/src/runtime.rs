//! Executes a kernel mapping on a worker pool: per-stage bin stores,
//! the dispatch modes, loop and bucketed-traversal entries, and run
//! statistics. The orchestrator is single threaded; each kernel launch
//! fans work units out to a scoped pool and joins it, so one kernel
//! finishes before the next begins and whole-stage waits hold by
//! construction. Per-bin waits only matter inside fused kernels, where
//! the consumer's work is buffered until the producer finished the bin.

use crate::graph::{
    AssignCtx, BinAssign, BinId, ChannelId, IndexedPipeline, PhaseCtx, PhaseError, ProcessBody,
    ScheduleKind,
};
use crate::env::RunEnv;
use crate::ordering::{depth_first_plan, ScheduleEntry};
use crate::prim::Primitive;
use crate::synthesis::{Dispatch, KernelMapping};
use parking_lot::Mutex;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct ExecConfig {
    pub workers: usize,
    /// Upper bound on sweeps of a cycle entry before giving up.
    pub cycle_cap: u32,
    /// Input primitives are injected and run through the whole schedule
    /// in batches of this size, bounding bin-store growth.
    pub strip_mine: usize,
}

impl Default for ExecConfig {
    fn default() -> ExecConfig {
        ExecConfig { workers: 1, cycle_cap: 32, strip_mine: 1 << 16 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("cycle over [{}] still has work after {cap} iterations", stages.join(", "))]
    CycleCapExceeded { stages: Vec<String>, cap: u32 },
    #[error("{0}")]
    Phase(String),
    #[error("input injection: {0}")]
    Injection(String),
    #[error("internal: {0}")]
    Internal(String),
}

/// One claimable piece of kernel work: a bin, or a chunk of one when
/// the dispatch splits bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkUnit {
    pub bin: BinId,
    /// Half-open primitive range within the bin's list.
    pub chunk: Option<(usize, usize)>,
}

/// Per-stage spatial bins of pending primitives. Appends from any
/// worker are linearizable; a take empties a bin and accounts for the
/// drained count.
pub struct BinStore {
    bins: Vec<Vec<Mutex<Vec<Primitive>>>>,
}

impl BinStore {
    pub fn new(p: &IndexedPipeline) -> BinStore {
        BinStore {
            bins: (0..p.len())
                .map(|s| (0..p.grids[s].len()).map(|_| Mutex::new(Vec::new())).collect())
                .collect(),
        }
    }

    pub fn append(&self, stage: usize, bin: BinId, prim: Primitive) {
        self.bins[stage][bin as usize].lock().push(prim);
    }

    pub fn take(&self, stage: usize, bin: BinId) -> Vec<Primitive> {
        std::mem::take(&mut *self.bins[stage][bin as usize].lock())
    }

    pub fn nonempty_bins(&self, stage: usize) -> Vec<BinId> {
        (0..self.bins[stage].len() as u32)
            .filter(|&b| !self.bins[stage][b as usize].lock().is_empty())
            .collect()
    }

    pub fn stage_pending(&self, stage: usize) -> u64 {
        self.bins[stage].iter().map(|b| b.lock().len() as u64).sum()
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct KernelStats {
    pub stages: Vec<String>,
    pub dispatch: String,
    pub wall_ms: f64,
    pub launches: u64,
    pub units_generated: u64,
    pub units_completed: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct StageStats {
    pub name: String,
    /// Primitives appended to this stage's bin store.
    pub appended: u64,
    /// Primitives taken from the bin store and processed.
    pub consumed_store: u64,
    /// Primitives handed over directly inside a fused kernel.
    pub consumed_fused: u64,
    pub emitted: u64,
    pub bins_used: u64,
    pub max_bin_load: u64,
    /// Bucket i counts bins whose total load has bit length i.
    pub occupancy_log2: Vec<u64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct WireStats {
    pub from: String,
    pub to: String,
    pub channel: ChannelId,
    pub fused: bool,
    pub primitives: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct LoopStats {
    pub stages: Vec<String>,
    pub iterations: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct RunStats {
    pub workers: usize,
    pub strip_batches: u64,
    pub injected: u64,
    pub kernels: Vec<KernelStats>,
    pub stages: Vec<StageStats>,
    pub wires: Vec<WireStats>,
    pub loops: Vec<LoopStats>,
    pub total_wall_ms: f64,
}

impl RunStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

struct Counters {
    appended: Vec<AtomicU64>,
    per_bin: Vec<Vec<AtomicU64>>,
    consumed_store: Vec<AtomicU64>,
    consumed_fused: Vec<AtomicU64>,
    emitted: Vec<AtomicU64>,
    traffic: Vec<AtomicU64>,
    units_generated: Vec<AtomicU64>,
    units_completed: Vec<AtomicU64>,
    injected: AtomicU64,
}

impl Counters {
    fn new(m: &KernelMapping) -> Counters {
        let n = m.pipeline.len();
        let zeros = |k: usize| (0..k).map(|_| AtomicU64::new(0)).collect::<Vec<_>>();
        Counters {
            appended: zeros(n),
            per_bin: (0..n).map(|s| zeros(m.pipeline.grids[s].len() as usize)).collect(),
            consumed_store: zeros(n),
            consumed_fused: zeros(n),
            emitted: zeros(n),
            traffic: zeros(m.wiring.len()),
            units_generated: zeros(m.kernels.len()),
            units_completed: zeros(m.kernels.len()),
            injected: AtomicU64::new(0),
        }
    }
}

/// Orchestrator-side mutable accounting.
struct OrchState {
    wall: Vec<f64>,
    launches: Vec<u64>,
    loops: Vec<(Vec<usize>, u64)>,
    batches: u64,
}

struct Exec<'a> {
    m: &'a KernelMapping,
    env: &'a RunEnv,
    store: &'a BinStore,
    ctr: &'a Counters,
    cfg: &'a ExecConfig,
    /// Per-stage monotone counters for geometry-free assignment
    /// policies; reset every run.
    tickets: Vec<AtomicU64>,
}

/// Runs the mapping over the input on `cfg.workers` threads and
/// returns the render environment (targets included) plus statistics.
/// Output is bit-identical for any worker count provided every target
/// merge the pipeline performs is commutative.
pub fn execute(
    m: &KernelMapping,
    input: &[Primitive],
    env: &RunEnv,
    cfg: &ExecConfig,
) -> Result<RunStats, RuntimeError> {
    if cfg.workers == 0 {
        return Err(RuntimeError::Internal("worker count must be at least 1".into()));
    }
    let store = BinStore::new(&m.pipeline);
    let ctr = Counters::new(m);
    let tickets = (0..m.pipeline.len()).map(|_| AtomicU64::new(0)).collect();
    let exec = Exec { m, env, store: &store, ctr: &ctr, cfg, tickets };
    let mut orch = OrchState {
        wall: vec![0.0; m.kernels.len()],
        launches: vec![0; m.kernels.len()],
        loops: Vec::new(),
        batches: 0,
    };
    let total = Instant::now();
    let strip = cfg.strip_mine.max(1);
    let mut batches: Vec<&[Primitive]> = input.chunks(strip).collect();
    if batches.is_empty() {
        batches.push(&[]);
    }
    for batch in batches {
        orch.batches += 1;
        exec.inject(batch)?;
        exec.run_schedule(&mut orch)?;
    }
    Ok(build_stats(m, &ctr, &orch, cfg, total.elapsed().as_secs_f64() * 1e3))
}

impl<'a> Exec<'a> {
    /// Source-stage AssignBin over the external batch. Any hoisted
    /// Schedule phases in the injection list are compile-time records;
    /// their dispatch is already on the kernels.
    fn inject(&self, batch: &[Primitive]) -> Result<(), RuntimeError> {
        let p = &self.m.pipeline;
        for &src in &p.sources {
            for prim in batch {
                if prim.kind() != p.decls[src].input {
                    return Err(RuntimeError::Injection(format!(
                        "stage `{}` takes {:?}, input is {:?}",
                        p.names[src],
                        p.decls[src].input,
                        prim.kind()
                    )));
                }
                self.assign_append(src, prim.clone(), None, None)
                    .map_err(|e| RuntimeError::Injection(e.to_string()))?;
                self.ctr.injected.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    fn run_schedule(&self, orch: &mut OrchState) -> Result<(), RuntimeError> {
        let mut done = vec![false; self.m.kernels.len()];
        for entry in &self.m.schedule.entries {
            match entry {
                ScheduleEntry::Launch(s) => {
                    let k = self.m.kernel_of[*s];
                    if !done[k] {
                        done[k] = true;
                        let bins = self.store.nonempty_bins(self.m.kernels[k].lead_stage());
                        self.timed_launch(k, &bins, orch)?;
                    }
                }
                ScheduleEntry::LoopUntilEmpty(stages) => {
                    self.run_loop(stages, orch)?;
                    for &s in stages {
                        done[self.m.kernel_of[s]] = true;
                    }
                }
                ScheduleEntry::DepthFirstGroup(stages) => {
                    self.run_group(stages, orch)?;
                    for &s in stages {
                        done[self.m.kernel_of[s]] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// Relaunches the cycle's kernels, in entry order, until none of
    /// the member stages has pending bins.
    fn run_loop(&self, stages: &[usize], orch: &mut OrchState) -> Result<(), RuntimeError> {
        let mut kernels: Vec<usize> = Vec::new();
        for &s in stages {
            let k = self.m.kernel_of[s];
            if !kernels.contains(&k) {
                kernels.push(k);
            }
        }
        let mut iterations = 0u64;
        while stages.iter().any(|&s| self.store.stage_pending(s) > 0) {
            if iterations >= self.cfg.cycle_cap as u64 {
                return Err(RuntimeError::CycleCapExceeded {
                    stages: stages.iter().map(|&s| self.m.pipeline.names[s].clone()).collect(),
                    cap: self.cfg.cycle_cap,
                });
            }
            iterations += 1;
            for &k in &kernels {
                let bins = self.store.nonempty_bins(self.m.kernels[k].lead_stage());
                self.timed_launch(k, &bins, orch)?;
            }
        }
        orch.loops.push((stages.to_vec(), iterations));
        Ok(())
    }

    /// Bucketed traversal: follows the static per-bin plan, batching
    /// consecutive same-stage slots of a sweep so each batch still runs
    /// under the stage's own dispatch. A final drain pass catches work
    /// that crossed leader-bin boundaries between misaligned grids.
    fn run_group(&self, stages: &[usize], orch: &mut OrchState) -> Result<(), RuntimeError> {
        let plan = depth_first_plan(&self.m.pipeline, stages);
        for sweep in &plan.sweeps {
            let mut i = 0;
            while i < sweep.len() {
                let s = sweep[i].0;
                let mut bins: Vec<BinId> = Vec::new();
                while i < sweep.len() && sweep[i].0 == s {
                    bins.push(sweep[i].1);
                    i += 1;
                }
                let k = self.m.kernel_of[s];
                if self.m.kernels[k].lead_stage() != s {
                    continue;
                }
                bins.retain(|&b| !self.store.bins[s][b as usize].lock().is_empty());
                if !bins.is_empty() {
                    self.timed_launch(k, &bins, orch)?;
                }
            }
        }
        let mut guard = 0u32;
        loop {
            let mut any = false;
            for &s in stages {
                let k = self.m.kernel_of[s];
                if self.m.kernels[k].lead_stage() != s {
                    continue;
                }
                let bins = self.store.nonempty_bins(s);
                if !bins.is_empty() {
                    any = true;
                    self.timed_launch(k, &bins, orch)?;
                }
            }
            if !any {
                return Ok(());
            }
            guard += 1;
            if guard > self.cfg.cycle_cap {
                return Err(RuntimeError::Internal(
                    "bucketed traversal failed to drain its stages".into(),
                ));
            }
        }
    }

    fn timed_launch(
        &self,
        k: usize,
        bins: &[BinId],
        orch: &mut OrchState,
    ) -> Result<(), RuntimeError> {
        let t = Instant::now();
        orch.launches[k] += 1;
        let r = self.launch(k, bins);
        orch.wall[k] += t.elapsed().as_secs_f64() * 1e3;
        r
    }

    /// Runs one kernel over the given bins with its dispatch mode.
    fn launch(&self, k: usize, bins: &[BinId]) -> Result<(), RuntimeError> {
        let kernel = &self.m.kernels[k];
        let lead = kernel.lead_stage();
        let w = self.cfg.workers;
        let kind = match &kernel.dispatch {
            Dispatch::FromSchedule => self.m.pipeline.decls[lead].schedule.kind,
            Dispatch::HardwareLoadBalance => ScheduleKind::LoadBalance,
            Dispatch::PreScheduledMap(_) => ScheduleKind::DirectMap,
            Dispatch::SerializeToOne => ScheduleKind::Serialize,
            Dispatch::SplitAll(_) => ScheduleKind::All,
        };
        match kind {
            ScheduleKind::LoadBalance => self.launch_claim(k, bins, w),
            ScheduleKind::DirectMap => self.launch_mapped(k, bins, w),
            ScheduleKind::Serialize => self.launch_mapped(k, bins, 1),
            ScheduleKind::All => {
                let split = match kernel.dispatch {
                    Dispatch::SplitAll(s) => s,
                    _ => self.m.pipeline.decls[lead].schedule.tile_split_size.unwrap_or(0),
                };
                self.launch_split(k, bins, split, w)
            }
        }
    }

    fn parallel(
        &self,
        workers: usize,
        body: impl Fn(usize) -> Result<(), RuntimeError> + Sync,
    ) -> Result<(), RuntimeError> {
        let first_err: Mutex<Option<RuntimeError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for wi in 0..workers {
                let body = &body;
                let first_err = &first_err;
                scope.spawn(move || {
                    if let Err(e) = body(wi) {
                        first_err.lock().get_or_insert(e);
                    }
                });
            }
        });
        match first_err.into_inner() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Non-empty bins on a shared claim queue; each unit claimed by
    /// exactly one worker. Bins are never split in this mode.
    fn launch_claim(&self, k: usize, bins: &[BinId], w: usize) -> Result<(), RuntimeError> {
        let units: Vec<WorkUnit> = bins.iter().map(|&bin| WorkUnit { bin, chunk: None }).collect();
        self.ctr.units_generated[k].fetch_add(units.len() as u64, Ordering::Relaxed);
        let next = AtomicUsize::new(0);
        self.parallel(w, |_| loop {
            let i = next.fetch_add(1, Ordering::Relaxed);
            let Some(u) = units.get(i) else { return Ok(()) };
            let prims = self.store.take(self.kernel_lead(k), u.bin);
            self.run_unit(k, u.bin, &prims)?;
            self.ctr.units_completed[k].fetch_add(1, Ordering::Relaxed);
        })
    }

    /// Each worker walks the bins whose precomputed assignment equals
    /// its index, ascending; within a worker processing is sequential.
    fn launch_mapped(&self, k: usize, bins: &[BinId], w: usize) -> Result<(), RuntimeError> {
        self.ctr.units_generated[k].fetch_add(bins.len() as u64, Ordering::Relaxed);
        self.parallel(w, |wi| {
            for &bin in bins.iter().filter(|&&b| b as usize % w == wi) {
                let prims = self.store.take(self.kernel_lead(k), bin);
                self.run_unit(k, bin, &prims)?;
                self.ctr.units_completed[k].fetch_add(1, Ordering::Relaxed);
            }
            Ok(())
        })
    }

    /// Bins one at a time in ascending order; each bin's list cut into
    /// chunks of at most `split` primitives claimed across the pool,
    /// with a join between bins. Zero means whole-bin chunks.
    fn launch_split(
        &self,
        k: usize,
        bins: &[BinId],
        split: u32,
        w: usize,
    ) -> Result<(), RuntimeError> {
        for &bin in bins {
            let prims = self.store.take(self.kernel_lead(k), bin);
            let len = prims.len();
            let chunk = if split == 0 { len.max(1) } else { split as usize };
            let mut units: Vec<WorkUnit> = (0..len)
                .step_by(chunk)
                .map(|a| WorkUnit { bin, chunk: Some((a, (a + chunk).min(len))) })
                .collect();
            if units.is_empty() {
                units.push(WorkUnit { bin, chunk: Some((0, 0)) });
            }
            self.ctr.units_generated[k].fetch_add(units.len() as u64, Ordering::Relaxed);
            let next = AtomicUsize::new(0);
            self.parallel(w, |_| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(u) = units.get(i) else { return Ok(()) };
                let (a, b) = u.chunk.unwrap();
                self.run_unit(k, bin, &prims[a..b])?;
                self.ctr.units_completed[k].fetch_add(1, Ordering::Relaxed);
            })?;
        }
        Ok(())
    }

    fn kernel_lead(&self, k: usize) -> usize {
        self.m.kernels[k].lead_stage()
    }

    /// Runs one work unit: the kernel's process chain over a bin's
    /// primitives. Fused successors run per primitive in place, except
    /// stages behind a per-bin wait, whose input is buffered until the
    /// producer finished the whole unit.
    fn run_unit(&self, k: usize, bin: BinId, prims: &[Primitive]) -> Result<(), RuntimeError> {
        let kernel = &self.m.kernels[k];
        let chain = kernel.process_stages();
        let lead = chain[0];
        let mut bufs: Vec<Vec<Primitive>> = vec![Vec::new(); self.m.pipeline.len()];
        let result: Result<(), PhaseError> = (|| {
            self.ctr.consumed_store[lead].fetch_add(prims.len() as u64, Ordering::Relaxed);
            match &self.m.pipeline.decls[lead].process.body {
                ProcessBody::PerPrimitive(_) => {
                    for p in prims {
                        self.feed(kernel, lead, p, bin, &mut bufs)?;
                    }
                }
                ProcessBody::PerBinList(f) => {
                    let ctx = PhaseCtx {
                        env: self.env,
                        bin,
                        rect: self.m.pipeline.grids[lead].rect(bin),
                    };
                    let mut emit = |ch: ChannelId, p: Primitive| {
                        self.route(kernel, lead, ch, p, bin, &mut bufs)
                    };
                    f(prims, &ctx, &mut emit).map_err(|e| {
                        PhaseError::Other(format!(
                            "stage `{}` bin {}: {}",
                            self.m.pipeline.names[lead], bin, e
                        ))
                    })?;
                }
            }
            for &s in &chain[1..] {
                if bufs[s].is_empty() {
                    continue;
                }
                let list = std::mem::take(&mut bufs[s]);
                for p in &list {
                    self.feed(kernel, s, p, bin, &mut bufs)?;
                }
            }
            Ok(())
        })();
        result.map_err(|e| RuntimeError::Phase(e.to_string()))
    }

    fn feed(
        &self,
        kernel: &crate::synthesis::Kernel,
        stage: usize,
        prim: &Primitive,
        bin: BinId,
        bufs: &mut Vec<Vec<Primitive>>,
    ) -> Result<(), PhaseError> {
        let p = &self.m.pipeline;
        let ProcessBody::PerPrimitive(f) = &p.decls[stage].process.body else {
            return Err(PhaseError::Other(format!(
                "stage `{}` processes whole bins and cannot be fed one primitive",
                p.names[stage]
            )));
        };
        let ctx = PhaseCtx { env: self.env, bin, rect: p.grids[stage].rect(bin) };
        let mut emit =
            |ch: ChannelId, out: Primitive| self.route(kernel, stage, ch, out, bin, bufs);
        f(prim, &ctx, &mut emit).map_err(|e| {
            PhaseError::Other(format!("stage `{}` bin {}: {}", p.names[stage], bin, e))
        })
    }

    fn route(
        &self,
        kernel: &crate::synthesis::Kernel,
        from: usize,
        ch: ChannelId,
        prim: Primitive,
        bin: BinId,
        bufs: &mut Vec<Vec<Primitive>>,
    ) -> Result<(), PhaseError> {
        let p = &self.m.pipeline;
        self.ctr.emitted[from].fetch_add(1, Ordering::Relaxed);
        let wi = self
            .m
            .wiring
            .iter()
            .position(|w| w.from == from && w.channel == ch)
            .ok_or(PhaseError::UnconnectedChannel { channel: ch })?;
        let wire = &self.m.wiring[wi];
        let to = wire.to;
        if prim.kind() != p.decls[to].input {
            return Err(PhaseError::WrongKind {
                channel: ch,
                got: prim.kind(),
                want: p.decls[to].input,
            });
        }
        if wire.fused {
            self.ctr.consumed_fused[to].fetch_add(1, Ordering::Relaxed);
            if kernel.bin_sync_before.contains(&to) {
                bufs[to].push(prim);
                Ok(())
            } else {
                self.feed(kernel, to, &prim, bin, bufs)
            }
        } else {
            self.assign_append(to, prim, Some((from, bin)), Some(wi))
        }
    }

    /// Runs the consumer's bin assignment and appends one copy of the
    /// primitive per assigned bin.
    fn assign_append(
        &self,
        to: usize,
        prim: Primitive,
        from: Option<(usize, BinId)>,
        wire: Option<usize>,
    ) -> Result<(), PhaseError> {
        let p = &self.m.pipeline;
        let grid = &p.grids[to];
        let mut targets: Vec<BinId> = Vec::new();
        match &p.decls[to].assign {
            BinAssign::PreviousBins => match from {
                Some((fs, fb)) => targets.push(self.previous_bin(fs, fb, to)),
                None if grid.len() == 1 => targets.push(0),
                None => {
                    return Err(PhaseError::Other(format!(
                        "source stage `{}` keeps previous bins but has no producer",
                        p.names[to]
                    )))
                }
            },
            BinAssign::BoundingBox => {
                let bbox = prim.screen_bbox().ok_or(PhaseError::NoExtent { kind: prim.kind() })?;
                grid.bins_for_bbox(&bbox, &mut targets);
            }
            BinAssign::All => targets.extend(0..grid.len()),
            BinAssign::Custom(c) => {
                let ctx = AssignCtx { grid, env: self.env, ticket: &self.tickets[to] };
                (c.f)(&prim, &ctx, &mut targets)?;
            }
        }
        for &b in &targets {
            if b >= grid.len() {
                return Err(PhaseError::BinOutOfRange { bin: b, len: grid.len() });
            }
        }
        for &b in &targets {
            self.store.append(to, b, prim.clone());
            self.ctr.appended[to].fetch_add(1, Ordering::Relaxed);
            self.ctr.per_bin[to][b as usize].fetch_add(1, Ordering::Relaxed);
            if let Some(wi) = wire {
                self.ctr.traffic[wi].fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Maps a producer's bin onto the consumer grid. Equal grids keep
    /// the id; otherwise the consumer bin containing the producer
    /// rect's top-left pixel owns the primitive.
    fn previous_bin(&self, from_stage: usize, from_bin: BinId, to: usize) -> BinId {
        let fg = &self.m.pipeline.grids[from_stage];
        let tg = &self.m.pipeline.grids[to];
        if fg.nx == tg.nx && fg.ny == tg.ny {
            return from_bin;
        }
        if tg.len() == 1 {
            return 0;
        }
        let r = fg.rect(from_bin);
        tg.bin_of_pixel(r.x0.min(tg.screen.0 - 1), r.y0.min(tg.screen.1 - 1))
    }
}

fn build_stats(
    m: &KernelMapping,
    ctr: &Counters,
    orch: &OrchState,
    cfg: &ExecConfig,
    total_wall_ms: f64,
) -> RunStats {
    let p = &m.pipeline;
    let kernels = m
        .kernels
        .iter()
        .enumerate()
        .map(|(k, kernel)| KernelStats {
            stages: kernel.process_stages().iter().map(|&s| p.names[s].clone()).collect(),
            dispatch: format!("{:?}", kernel.dispatch),
            wall_ms: orch.wall[k],
            launches: orch.launches[k],
            units_generated: ctr.units_generated[k].load(Ordering::Relaxed),
            units_completed: ctr.units_completed[k].load(Ordering::Relaxed),
        })
        .collect();
    let stages = (0..p.len())
        .map(|s| {
            let loads: Vec<u64> =
                ctr.per_bin[s].iter().map(|c| c.load(Ordering::Relaxed)).collect();
            let mut occupancy = vec![0u64; 0];
            for &l in loads.iter().filter(|&&l| l > 0) {
                let bucket = (64 - l.leading_zeros()) as usize;
                if occupancy.len() <= bucket {
                    occupancy.resize(bucket + 1, 0);
                }
                occupancy[bucket] += 1;
            }
            StageStats {
                name: p.names[s].clone(),
                appended: ctr.appended[s].load(Ordering::Relaxed),
                consumed_store: ctr.consumed_store[s].load(Ordering::Relaxed),
                consumed_fused: ctr.consumed_fused[s].load(Ordering::Relaxed),
                emitted: ctr.emitted[s].load(Ordering::Relaxed),
                bins_used: loads.iter().filter(|&&l| l > 0).count() as u64,
                max_bin_load: loads.iter().copied().max().unwrap_or(0),
                occupancy_log2: occupancy,
            }
        })
        .collect();
    let wires = m
        .wiring
        .iter()
        .enumerate()
        .map(|(i, w)| WireStats {
            from: p.names[w.from].clone(),
            to: p.names[w.to].clone(),
            channel: w.channel,
            fused: w.fused,
            primitives: ctr.traffic[i].load(Ordering::Relaxed),
        })
        .collect();
    let loops = orch
        .loops
        .iter()
        .map(|(stages, iters)| LoopStats {
            stages: stages.iter().map(|&s| p.names[s].clone()).collect(),
            iterations: *iters,
        })
        .collect();
    RunStats {
        workers: cfg.workers,
        strip_batches: orch.batches,
        injected: ctr.injected.load(Ordering::Relaxed),
        kernels,
        stages,
        wires,
        loops,
        total_wall_ms,
    }
}
