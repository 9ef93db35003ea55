//! Pipeline declaration: stages, directives, channels and validation.
//!
//! A pipeline is a directed graph of stages. Each stage owns three
//! phases: AssignBin places incoming primitives into spatial bins,
//! Schedule states how bins map onto cores, Process runs the stage body
//! and emits primitives into numbered output channels. Stage storage is
//! canonical (name ordered), so two graphs assembled in different
//! orders are the same pipeline.

use crate::env::RunEnv;
use crate::math::{Bbox, PixelRect};
use crate::prim::{Primitive, PrimitiveKind};
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

pub type ChannelId = u32;
pub type BinId = u32;

/// Spatial bin size in pixels. Zero extents mean one full-screen bin.
/// threads_per_bin is an advisory occupancy hint, not a contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinConfig {
    pub bin_width: u32,
    pub bin_height: u32,
    pub threads_per_bin: u32,
}

impl BinConfig {
    pub fn full_screen() -> BinConfig {
        BinConfig { bin_width: 0, bin_height: 0, threads_per_bin: 1 }
    }

    pub fn tiles(w: u32, h: u32) -> BinConfig {
        BinConfig { bin_width: w, bin_height: h, threads_per_bin: 1 }
    }

    pub fn is_full_screen(&self) -> bool {
        self.bin_width == 0 && self.bin_height == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum ScheduleKind {
    /// Bin id modulo worker count, fixed at synthesis time.
    DirectMap,
    /// Dynamic claiming of whole bins from a shared queue.
    LoadBalance,
    /// Every bin on worker zero in bin order.
    Serialize,
    /// Each bin split into chunks claimed by all workers together.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleDirective {
    pub kind: ScheduleKind,
    /// Chunk length for All; invalid with the other kinds.
    pub tile_split_size: Option<u32>,
}

impl ScheduleDirective {
    pub fn of(kind: ScheduleKind) -> ScheduleDirective {
        ScheduleDirective { kind, tile_split_size: None }
    }

    pub fn all_split(split: u32) -> ScheduleDirective {
        ScheduleDirective { kind: ScheduleKind::All, tile_split_size: Some(split) }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PhaseError {
    #[error("emit on unconnected channel {channel}")]
    UnconnectedChannel { channel: ChannelId },
    #[error("emitted {got:?} on channel {channel}, channel carries {want:?}")]
    WrongKind { channel: ChannelId, got: PrimitiveKind, want: PrimitiveKind },
    #[error("bounding-box assignment needs screen extent, {kind:?} has none")]
    NoExtent { kind: PrimitiveKind },
    #[error("assigned bin {bin} outside grid of {len} bins")]
    BinOutOfRange { bin: BinId, len: u32 },
    #[error("{0}")]
    Other(String),
}

/// Context handed to process phase functions.
pub struct PhaseCtx<'a> {
    pub env: &'a RunEnv,
    pub bin: BinId,
    pub rect: PixelRect,
}

pub type EmitFn<'a> = dyn FnMut(ChannelId, Primitive) -> Result<(), PhaseError> + 'a;

pub type ProcessFn =
    Arc<dyn Fn(&Primitive, &PhaseCtx<'_>, &mut EmitFn<'_>) -> Result<(), PhaseError> + Send + Sync>;

pub type BinListFn = Arc<
    dyn Fn(&[Primitive], &PhaseCtx<'_>, &mut EmitFn<'_>) -> Result<(), PhaseError> + Send + Sync,
>;

#[derive(Clone)]
pub enum ProcessBody {
    /// Called once per primitive; the only mode kernel fusion accepts.
    PerPrimitive(ProcessFn),
    /// Called once per bin with the complete bin contents.
    PerBinList(BinListFn),
}

#[derive(Clone)]
pub struct ProcessDecl {
    pub name: String,
    pub body: ProcessBody,
}

impl ProcessDecl {
    pub fn per_primitive(name: &str, f: ProcessFn) -> ProcessDecl {
        ProcessDecl { name: name.to_string(), body: ProcessBody::PerPrimitive(f) }
    }

    pub fn per_bin_list(name: &str, f: BinListFn) -> ProcessDecl {
        ProcessDecl { name: name.to_string(), body: ProcessBody::PerBinList(f) }
    }

    pub fn mode(&self) -> ProcessMode {
        match self.body {
            ProcessBody::PerPrimitive(_) => ProcessMode::PerPrimitive,
            ProcessBody::PerBinList(_) => ProcessMode::PerBinList,
        }
    }
}

impl std::fmt::Debug for ProcessDecl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ProcessDecl({})", self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum ProcessMode {
    PerPrimitive,
    PerBinList,
}

pub struct AssignCtx<'a> {
    pub grid: &'a BinGrid,
    pub env: &'a RunEnv,
    /// Monotone per-stage counter for distribution policies that do not
    /// depend on geometry.
    pub ticket: &'a AtomicU64,
}

pub type AssignFn = Arc<
    dyn Fn(&Primitive, &AssignCtx<'_>, &mut Vec<BinId>) -> Result<(), PhaseError> + Send + Sync,
>;

#[derive(Clone)]
pub struct CustomAssign {
    pub name: String,
    pub f: AssignFn,
}

#[derive(Clone)]
pub enum BinAssign {
    /// Keep the bins assigned by the producing stage.
    PreviousBins,
    /// Every bin whose closed rectangle intersects the primitive's
    /// screen bbox.
    BoundingBox,
    /// Every bin.
    All,
    Custom(CustomAssign),
}

impl BinAssign {
    pub fn label(&self) -> String {
        match self {
            BinAssign::PreviousBins => "previous-bins".into(),
            BinAssign::BoundingBox => "bounding-box".into(),
            BinAssign::All => "all".into(),
            BinAssign::Custom(c) => format!("custom:{}", c.name),
        }
    }

    /// Built-in directives of the same variant are interchangeable;
    /// custom functions are never assumed equal.
    pub fn same_builtin(&self, other: &BinAssign) -> bool {
        matches!(
            (self, other),
            (BinAssign::PreviousBins, BinAssign::PreviousBins)
                | (BinAssign::BoundingBox, BinAssign::BoundingBox)
                | (BinAssign::All, BinAssign::All)
        )
    }
}

impl std::fmt::Debug for BinAssign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dependency {
    /// The named stage must have fully finished before this stage runs.
    EndStage(String),
    /// This stage's bin b waits for the producing stage's bin b only.
    EndBin,
}

#[derive(Clone, Debug)]
pub struct StageDecl {
    pub name: String,
    pub input: PrimitiveKind,
    /// Primitive kind per output channel.
    pub outputs: Vec<PrimitiveKind>,
    pub bin: BinConfig,
    pub assign: BinAssign,
    pub schedule: ScheduleDirective,
    pub process: ProcessDecl,
    pub deps: Vec<Dependency>,
}

impl StageDecl {
    pub fn new(
        name: &str,
        input: PrimitiveKind,
        outputs: Vec<PrimitiveKind>,
        process: ProcessDecl,
    ) -> StageDecl {
        StageDecl {
            name: name.to_string(),
            input,
            outputs,
            bin: BinConfig::full_screen(),
            assign: BinAssign::PreviousBins,
            schedule: ScheduleDirective::of(ScheduleKind::LoadBalance),
            process,
            deps: Vec::new(),
        }
    }

    pub fn bins(mut self, w: u32, h: u32) -> Self {
        self.bin = BinConfig::tiles(w, h);
        self
    }

    pub fn threads_per_bin(mut self, t: u32) -> Self {
        self.bin.threads_per_bin = t;
        self
    }

    pub fn assign(mut self, a: BinAssign) -> Self {
        self.assign = a;
        self
    }

    pub fn schedule(mut self, s: ScheduleDirective) -> Self {
        self.schedule = s;
        self
    }

    pub fn dep(mut self, d: Dependency) -> Self {
        self.deps.push(d);
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("stage {0:?} already declared")]
    DuplicateStage(String),
    #[error("unknown stage {0:?}")]
    UnknownStage(String),
    #[error("stage {stage:?} has no output channel {channel}")]
    ChannelOutOfRange { stage: String, channel: ChannelId },
    #[error("channel {channel} of {from:?} already feeds {existing:?}")]
    ChannelInUse { from: String, channel: ChannelId, existing: String },
    #[error("{from:?} channel {channel} carries {got:?}, {to:?} consumes {want:?}")]
    TypeMismatch {
        from: String,
        channel: ChannelId,
        to: String,
        got: PrimitiveKind,
        want: PrimitiveKind,
    },
    #[error("pipeline invalid: {0:?}")]
    Invalid(Vec<Diagnostic>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    NoSource,
    NoDrain,
    EdgeTypeMismatch { from: String, channel: ChannelId, to: String },
    UnknownDependencyTarget { stage: String, target: String },
    DependencyOnSelf { stage: String },
    BadBinConfig { stage: String },
    TileSplitWithoutAll { stage: String },
    UnconnectedOutputChannel { stage: String, channel: ChannelId },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: String,
    pub channel: ChannelId,
    pub to: String,
}

#[derive(Clone, Debug)]
pub struct PipelineGraph {
    pub screen: (u32, u32),
    stages: BTreeMap<String, StageDecl>,
    edges: BTreeSet<Edge>,
}

impl PipelineGraph {
    pub fn new(screen: (u32, u32)) -> PipelineGraph {
        PipelineGraph { screen, stages: BTreeMap::new(), edges: BTreeSet::new() }
    }

    pub fn add_stage(&mut self, decl: StageDecl) -> Result<(), GraphError> {
        if self.stages.contains_key(&decl.name) {
            return Err(GraphError::DuplicateStage(decl.name));
        }
        self.stages.insert(decl.name.clone(), decl);
        Ok(())
    }

    pub fn connect(&mut self, from: &str, channel: ChannelId, to: &str) -> Result<(), GraphError> {
        let producer = self
            .stages
            .get(from)
            .ok_or_else(|| GraphError::UnknownStage(from.to_string()))?;
        let consumer = self
            .stages
            .get(to)
            .ok_or_else(|| GraphError::UnknownStage(to.to_string()))?;
        let got = *producer.outputs.get(channel as usize).ok_or_else(|| {
            GraphError::ChannelOutOfRange { stage: from.to_string(), channel }
        })?;
        if let Some(e) = self.edges.iter().find(|e| e.from == from && e.channel == channel) {
            return Err(GraphError::ChannelInUse {
                from: from.to_string(),
                channel,
                existing: e.to.clone(),
            });
        }
        if got != consumer.input {
            return Err(GraphError::TypeMismatch {
                from: from.to_string(),
                channel,
                to: to.to_string(),
                got,
                want: consumer.input,
            });
        }
        self.edges.insert(Edge { from: from.to_string(), channel, to: to.to_string() });
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageDecl> {
        self.stages.get(name)
    }

    pub fn stage_mut(&mut self, name: &str) -> Option<&mut StageDecl> {
        self.stages.get_mut(name)
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageDecl> {
        self.stages.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter()
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Structural hash over canonical storage. Assembly order cannot
    /// affect it.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.screen.hash(&mut h);
        for (name, s) in &self.stages {
            name.hash(&mut h);
            format!("{:?}", s.input).hash(&mut h);
            format!("{:?}", s.outputs).hash(&mut h);
            (s.bin.bin_width, s.bin.bin_height, s.bin.threads_per_bin).hash(&mut h);
            s.assign.label().hash(&mut h);
            format!("{:?}", s.schedule).hash(&mut h);
            s.process.name.hash(&mut h);
            format!("{:?}", s.deps).hash(&mut h);
        }
        for e in &self.edges {
            e.hash(&mut h);
        }
        h.finish()
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut has_source = false;
        let mut has_drain = false;
        for (name, s) in &self.stages {
            let external_in = self.edges.iter().any(|e| &e.to == name && &e.from != name);
            let external_out = self.edges.iter().any(|e| &e.from == name && &e.to != name);
            has_source |= !external_in;
            has_drain |= !external_out;

            if (s.bin.bin_width == 0) != (s.bin.bin_height == 0) || s.bin.threads_per_bin == 0 {
                out.push(Diagnostic::BadBinConfig { stage: name.clone() });
            }
            if s.schedule.tile_split_size.is_some() && s.schedule.kind != ScheduleKind::All {
                out.push(Diagnostic::TileSplitWithoutAll { stage: name.clone() });
            }
            if matches!(s.schedule.tile_split_size, Some(0)) {
                out.push(Diagnostic::BadBinConfig { stage: name.clone() });
            }
            for d in &s.deps {
                if let Dependency::EndStage(t) = d {
                    if t == name {
                        out.push(Diagnostic::DependencyOnSelf { stage: name.clone() });
                    } else if !self.stages.contains_key(t) {
                        out.push(Diagnostic::UnknownDependencyTarget {
                            stage: name.clone(),
                            target: t.clone(),
                        });
                    }
                }
            }
            for ch in 0..s.outputs.len() as ChannelId {
                if !self.edges.iter().any(|e| &e.from == name && e.channel == ch) {
                    out.push(Diagnostic::UnconnectedOutputChannel {
                        stage: name.clone(),
                        channel: ch,
                    });
                }
            }
        }
        for e in &self.edges {
            let got = self.stages[&e.from].outputs[e.channel as usize];
            let want = self.stages[&e.to].input;
            if got != want {
                out.push(Diagnostic::EdgeTypeMismatch {
                    from: e.from.clone(),
                    channel: e.channel,
                    to: e.to.clone(),
                });
            }
        }
        if !self.stages.is_empty() {
            if !has_source {
                out.push(Diagnostic::NoSource);
            }
            if !has_drain {
                out.push(Diagnostic::NoDrain);
            }
        }
        out
    }

    /// Replaces every full-screen (0 by 0) bin config with the concrete
    /// screen dimensions. Other configs pass through untouched.
    pub fn normalize_bins(&self) -> PipelineGraph {
        let mut g = self.clone();
        for s in g.stages.values_mut() {
            if s.bin.is_full_screen() {
                s.bin.bin_width = g.screen.0;
                s.bin.bin_height = g.screen.1;
            }
        }
        g
    }

    /// Freeze into dense indices in canonical name order, with concrete
    /// bin grids. Fails on any validation diagnostic.
    pub fn index(&self) -> Result<IndexedPipeline, GraphError> {
        let diags = self.validate();
        if !diags.is_empty() {
            return Err(GraphError::Invalid(diags));
        }
        let names: Vec<String> = self.stages.keys().cloned().collect();
        let id_of: BTreeMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let decls: Vec<StageDecl> = self.stages.values().cloned().collect();
        let grids: Vec<BinGrid> =
            decls.iter().map(|d| BinGrid::new(&d.bin, self.screen)).collect();

        let mut out_edges: Vec<Vec<Option<usize>>> =
            decls.iter().map(|d| vec![None; d.outputs.len()]).collect();
        let mut in_edges: Vec<Vec<(usize, ChannelId)>> = vec![Vec::new(); decls.len()];
        for e in &self.edges {
            let f = id_of[e.from.as_str()];
            let t = id_of[e.to.as_str()];
            out_edges[f][e.channel as usize] = Some(t);
            in_edges[t].push((f, e.channel));
        }
        for v in &mut in_edges {
            v.sort_unstable();
        }

        let deps: Vec<Vec<DepRef>> = decls
            .iter()
            .map(|d| {
                d.deps
                    .iter()
                    .map(|dep| match dep {
                        Dependency::EndStage(t) => DepRef::EndStage(id_of[t.as_str()]),
                        Dependency::EndBin => DepRef::EndBin,
                    })
                    .collect()
            })
            .collect();

        let mut sources = Vec::new();
        let mut drains = Vec::new();
        for i in 0..decls.len() {
            if !in_edges[i].iter().any(|(p, _)| *p != i) {
                sources.push(i);
            }
            if !out_edges[i].iter().flatten().any(|t| *t != i) {
                drains.push(i);
            }
        }

        Ok(IndexedPipeline {
            screen: self.screen,
            names,
            decls,
            grids,
            out_edges,
            in_edges,
            deps,
            sources,
            drains,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepRef {
    EndStage(usize),
    EndBin,
}

/// Validated pipeline with dense stage ids in canonical name order.
#[derive(Clone)]
pub struct IndexedPipeline {
    pub screen: (u32, u32),
    pub names: Vec<String>,
    pub decls: Vec<StageDecl>,
    pub grids: Vec<BinGrid>,
    /// Consumer per output channel.
    pub out_edges: Vec<Vec<Option<usize>>>,
    /// Sorted (producer, channel) pairs per stage.
    pub in_edges: Vec<Vec<(usize, ChannelId)>>,
    pub deps: Vec<Vec<DepRef>>,
    /// Stages with no in-edges from other stages; they receive the
    /// external input stream.
    pub sources: Vec<usize>,
    /// Stages with no out-edges to other stages.
    pub drains: Vec<usize>,
}

impl IndexedPipeline {
    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Successors over all channels, self loops included, deduplicated,
    /// ascending.
    pub fn successors(&self, stage: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.out_edges[stage].iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Predecessors over all channels, self loops included,
    /// deduplicated, ascending.
    pub fn predecessors(&self, stage: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.in_edges[stage].iter().map(|(p, _)| *p).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Concrete bin grid over a screen, bins in row-major order, edge bins
/// clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinGrid {
    pub screen: (u32, u32),
    pub bin_w: u32,
    pub bin_h: u32,
    pub nx: u32,
    pub ny: u32,
    pub threads_per_bin: u32,
}

impl BinGrid {
    pub fn new(cfg: &BinConfig, screen: (u32, u32)) -> BinGrid {
        let bin_w = if cfg.bin_width == 0 { screen.0 } else { cfg.bin_width };
        let bin_h = if cfg.bin_height == 0 { screen.1 } else { cfg.bin_height };
        BinGrid {
            screen,
            bin_w,
            bin_h,
            nx: screen.0.div_ceil(bin_w),
            ny: screen.1.div_ceil(bin_h),
            threads_per_bin: cfg.threads_per_bin.max(1),
        }
    }

    pub fn len(&self) -> u32 {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (u32, u32) {
        (self.bin_w, self.bin_h)
    }

    pub fn rect(&self, id: BinId) -> PixelRect {
        let bx = id % self.nx;
        let by = id / self.nx;
        let x0 = bx * self.bin_w;
        let y0 = by * self.bin_h;
        PixelRect {
            x0,
            y0,
            x1: (x0 + self.bin_w).min(self.screen.0),
            y1: (y0 + self.bin_h).min(self.screen.1),
        }
    }

    pub fn bin_of_pixel(&self, x: u32, y: u32) -> BinId {
        (y / self.bin_h) * self.nx + x / self.bin_w
    }

    /// All bins whose closed pixel rectangle intersects the closed bbox.
    /// A bbox edge exactly on a shared bin boundary lands in both bins.
    pub fn bins_for_bbox(&self, b: &Bbox, out: &mut Vec<BinId>) {
        out.clear();
        let (sw, sh) = (self.screen.0 as f32, self.screen.1 as f32);
        if b.min[0] > sw || b.max[0] < 0.0 || b.min[1] > sh || b.max[1] < 0.0 {
            return;
        }
        let bw = self.bin_w as f32;
        let bh = self.bin_h as f32;
        let kx0 = ((b.min[0] / bw).ceil() as i64 - 1).max(0) as u32;
        let kx1 = ((b.max[0] / bw).floor() as i64).min(self.nx as i64 - 1) as u32;
        let ky0 = ((b.min[1] / bh).ceil() as i64 - 1).max(0) as u32;
        let ky1 = ((b.max[1] / bh).floor() as i64).min(self.ny as i64 - 1) as u32;
        for by in ky0..=ky1 {
            for bx in kx0..=kx1 {
                out.push(by * self.nx + bx);
            }
        }
    }
}
