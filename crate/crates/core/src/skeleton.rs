//! Static pipeline analysis: drain distances, cycle detection, loop
//! back-edges and the partition into linear branches.

use crate::graph::{ChannelId, IndexedPipeline, ProcessMode};
use std::collections::{BTreeSet, VecDeque};

#[derive(Debug, thiserror::Error)]
pub enum SkeletonError {
    #[error("stages cannot reach any drain: {0:?}")]
    NoPathToDrain(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum CutReason {
    Convergence,
    Divergence,
    ExplicitDependency,
    Terminal,
}

/// Maximal linear chain of stages. Interior stages have exactly one
/// predecessor and one successor in the full graph and no explicit
/// dependencies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Branch {
    pub stages: Vec<usize>,
    pub start_distance: u32,
    pub entry: CutReason,
    pub exit: CutReason,
}

#[derive(Clone, Debug)]
pub struct PipelineSkeleton {
    /// Shortest hop count to the nearest drain. Loop back-edges cannot
    /// shorten it, so the plain reverse BFS already equals the distance
    /// on the back-edge-free graph.
    pub distance: Vec<u32>,
    /// Strongly connected components holding a cycle: more than one
    /// stage, or a single stage with a self-loop. Ordered by smallest
    /// member.
    pub cycle_sets: Vec<BTreeSet<usize>>,
    pub cycle_of: Vec<Option<usize>>,
    /// Intra-component edges whose target sits at greater or equal
    /// distance than the source. Removing them leaves the graph acyclic.
    pub back_edges: BTreeSet<(usize, ChannelId, usize)>,
    /// Branches sorted by descending start distance, names breaking
    /// ties.
    pub branches: Vec<Branch>,
    pub branch_of: Vec<usize>,
    /// Per-primitive process phases may fuse; bin-list phases may not.
    pub fusable: Vec<bool>,
}

pub fn build_skeleton(p: &IndexedPipeline) -> Result<PipelineSkeleton, SkeletonError> {
    let n = p.len();

    let mut distance = vec![u32::MAX; n];
    let mut queue = VecDeque::new();
    for &d in &p.drains {
        distance[d] = 0;
        queue.push_back(d);
    }
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &p.in_edges[u] {
            if distance[v] == u32::MAX {
                distance[v] = distance[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let stranded: Vec<String> = (0..n)
        .filter(|&i| distance[i] == u32::MAX)
        .map(|i| p.names[i].clone())
        .collect();
    if !stranded.is_empty() {
        return Err(SkeletonError::NoPathToDrain(stranded));
    }

    let comp = tarjan_components(p);
    let mut cycle_sets: Vec<BTreeSet<usize>> = Vec::new();
    {
        let mut by_comp: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
        for (stage, &c) in comp.iter().enumerate() {
            by_comp.entry(c).or_default().insert(stage);
        }
        for (_, set) in by_comp {
            let cyclic = set.len() > 1
                || set.iter().any(|&s| p.successors(s).contains(&s));
            if cyclic {
                cycle_sets.push(set);
            }
        }
        cycle_sets.sort_by_key(|s| *s.iter().next().unwrap());
    }
    let mut cycle_of = vec![None; n];
    for (i, set) in cycle_sets.iter().enumerate() {
        for &s in set {
            cycle_of[s] = Some(i);
        }
    }

    let mut back_edges = BTreeSet::new();
    for u in 0..n {
        for (ch, tgt) in p.out_edges[u].iter().enumerate() {
            if let Some(v) = *tgt {
                if comp[u] == comp[v] && cycle_of[u].is_some() && distance[v] >= distance[u] {
                    back_edges.insert((u, ch as ChannelId, v));
                }
            }
        }
    }

    let is_source: Vec<bool> = (0..n).map(|i| p.sources.contains(&i)).collect();
    let preds: Vec<Vec<usize>> = (0..n).map(|i| p.predecessors(i)).collect();
    let succs: Vec<Vec<usize>> = (0..n).map(|i| p.successors(i)).collect();

    let cut_start = |s: usize| -> bool {
        if is_source[s] || !p.deps[s].is_empty() || preds[s].len() != 1 {
            return true;
        }
        let producer = preds[s][0];
        producer == s || succs[producer].len() > 1
    };

    let mut branches = Vec::new();
    let mut claimed = vec![false; n];
    for start in 0..n {
        if !cut_start(start) {
            continue;
        }
        let mut stages = vec![start];
        claimed[start] = true;
        let mut end = start;
        loop {
            if succs[end].len() != 1 {
                break;
            }
            let next = succs[end][0];
            if next == end || cut_start(next) {
                break;
            }
            stages.push(next);
            claimed[next] = true;
            end = next;
        }
        let entry = if is_source[start] {
            CutReason::Terminal
        } else if !p.deps[start].is_empty() {
            CutReason::ExplicitDependency
        } else if preds[start].len() > 1 {
            CutReason::Convergence
        } else {
            CutReason::Divergence
        };
        let exit = if succs[end].iter().all(|&t| t == end) {
            CutReason::Terminal
        } else if succs[end].len() > 1 {
            CutReason::Divergence
        } else {
            let next = succs[end][0];
            if !p.deps[next].is_empty() {
                CutReason::ExplicitDependency
            } else {
                CutReason::Convergence
            }
        };
        branches.push(Branch {
            start_distance: distance[start],
            stages,
            entry,
            exit,
        });
    }
    debug_assert!(claimed.iter().all(|&c| c), "branch partition missed a stage");

    branches.sort_by(|a, b| {
        b.start_distance
            .cmp(&a.start_distance)
            .then_with(|| p.names[a.stages[0]].cmp(&p.names[b.stages[0]]))
    });
    let mut branch_of = vec![usize::MAX; n];
    for (i, b) in branches.iter().enumerate() {
        for &s in &b.stages {
            branch_of[s] = i;
        }
    }

    let fusable = p
        .decls
        .iter()
        .map(|d| d.process.mode() == ProcessMode::PerPrimitive)
        .collect();

    Ok(PipelineSkeleton {
        distance,
        cycle_sets,
        cycle_of,
        back_edges,
        branches,
        branch_of,
        fusable,
    })
}

impl PipelineSkeleton {
    /// True for edges surviving back-edge removal.
    pub fn residual_edge(&self, from: usize, channel: ChannelId, to: usize) -> bool {
        !self.back_edges.contains(&(from, channel, to))
    }

    /// Producers of a stage over residual edges only, deduplicated.
    pub fn residual_producers(&self, p: &IndexedPipeline, stage: usize) -> Vec<usize> {
        let mut v: Vec<usize> = p.in_edges[stage]
            .iter()
            .filter(|(prod, ch)| self.residual_edge(*prod, *ch, stage))
            .map(|(prod, _)| *prod)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Human-readable analysis dump.
    pub fn report(&self, p: &IndexedPipeline) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "stages:").unwrap();
        for i in 0..p.len() {
            let d = &p.decls[i];
            let grid = &p.grids[i];
            let cyc = match self.cycle_of[i] {
                Some(c) => format!(" cycle#{c}"),
                None => String::new(),
            };
            let deps = if d.deps.is_empty() {
                String::new()
            } else {
                format!(" deps={:?}", d.deps)
            };
            writeln!(
                out,
                "  {:<16} dist={} bins={}x{} grid={}x{} schedule={:?} assign={} process={} ({:?}){}{}",
                p.names[i],
                self.distance[i],
                grid.bin_w,
                grid.bin_h,
                grid.nx,
                grid.ny,
                d.schedule.kind,
                d.assign.label(),
                d.process.name,
                d.process.mode(),
                deps,
                cyc,
            )
            .unwrap();
        }
        writeln!(out, "branches:").unwrap();
        for (i, b) in self.branches.iter().enumerate() {
            let names: Vec<&str> = b.stages.iter().map(|&s| p.names[s].as_str()).collect();
            writeln!(
                out,
                "  #{i} start_distance={} entry={:?} exit={:?}: {}",
                b.start_distance,
                b.entry,
                b.exit,
                names.join(" -> ")
            )
            .unwrap();
        }
        if !self.cycle_sets.is_empty() {
            writeln!(out, "cycles:").unwrap();
            for (i, set) in self.cycle_sets.iter().enumerate() {
                let names: Vec<&str> = set.iter().map(|&s| p.names[s].as_str()).collect();
                writeln!(out, "  #{i}: {{{}}}", names.join(", ")).unwrap();
            }
            writeln!(out, "loop back-edges:").unwrap();
            for (f, ch, t) in &self.back_edges {
                writeln!(out, "  {}[{}] -> {}", p.names[*f], ch, p.names[*t]).unwrap();
            }
        }
        out
    }
}

/// Strongly connected components, Tarjan's algorithm. Returns a
/// component id per stage; ids have no ordering meaning.
fn tarjan_components(p: &IndexedPipeline) -> Vec<usize> {
    struct State<'a> {
        p: &'a IndexedPipeline,
        index: Vec<Option<u32>>,
        low: Vec<u32>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: u32,
        comp: Vec<usize>,
        comp_count: usize,
    }

    fn visit(st: &mut State<'_>, v: usize) {
        st.index[v] = Some(st.next);
        st.low[v] = st.next;
        st.next += 1;
        st.stack.push(v);
        st.on_stack[v] = true;
        for w in st.p.successors(v) {
            match st.index[w] {
                None => {
                    visit(st, w);
                    st.low[v] = st.low[v].min(st.low[w]);
                }
                Some(wi) if st.on_stack[w] => {
                    st.low[v] = st.low[v].min(wi);
                }
                _ => {}
            }
        }
        if st.low[v] == st.index[v].unwrap() {
            loop {
                let w = st.stack.pop().unwrap();
                st.on_stack[w] = false;
                st.comp[w] = st.comp_count;
                if w == v {
                    break;
                }
            }
            st.comp_count += 1;
        }
    }

    let n = p.len();
    let mut st = State {
        p,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        comp: vec![0; n],
        comp_count: 0,
    };
    for v in 0..n {
        if st.index[v].is_none() {
            visit(&mut st, v);
        }
    }
    st.comp
}
