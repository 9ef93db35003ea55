//! Stage graphs assembled from text descriptions. A description names
//! stages, binds each to one of the built-in process bodies, and wires
//! channels; directives default exactly like the programmatic builders.

use anyhow::{anyhow, bail, Context, Result};
use binflow::graph::{
    BinAssign, Dependency, PipelineGraph, ProcessDecl, ScheduleDirective, ScheduleKind, StageDecl,
};
use binflow::pipelines as stage_lib;
use binflow::prim::PrimitiveKind;
use serde::Deserialize;
use std::path::Path;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFile {
    #[serde(default)]
    stage: Vec<StageEntry>,
    #[serde(default)]
    edge: Vec<EdgeEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct StageEntry {
    name: String,
    process: String,
    /// Tile size in pixels; omitted or [0, 0] means one screen-sized bin.
    bin: Option<[u32; 2]>,
    threads_per_bin: Option<u32>,
    assign: Option<String>,
    schedule: Option<String>,
    #[serde(default)]
    deps: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeEntry {
    from: String,
    to: String,
    #[serde(default)]
    channel: u32,
}

/// Process bodies addressable from descriptions, with the primitive
/// kinds their input and output channels carry.
fn process_registry(name: &str) -> Option<(PrimitiveKind, Vec<PrimitiveKind>, ProcessDecl)> {
    use PrimitiveKind::*;
    Some(match name {
        "vertex-shade" => (Triangle, vec![ScreenTriangle], stage_lib::vertex_shade_process()),
        "rasterize" => (ScreenTriangle, vec![Fragment], stage_lib::rasterize_process()),
        "fragment-shade" => (Fragment, vec![Fragment], stage_lib::fragment_shade_process()),
        "depth-test" => (Fragment, vec![Fragment], stage_lib::depth_test_process()),
        "composite" => (Fragment, vec![], stage_lib::composite_process()),
        "deferred-composite" => (Fragment, vec![], stage_lib::deferred_composite_process()),
        "split-patch" => (Patch, vec![Patch, Patch], stage_lib::split_process()),
        "dice-patch" => (Patch, vec![Micropolygon], stage_lib::dice_process()),
        "sample-quad" => (Micropolygon, vec![Fragment], stage_lib::sample_process()),
        "bin-shade" => (Fragment, vec![], stage_lib::bin_shade_process()),
        _ => return None,
    })
}

fn parse_assign(s: &str) -> Result<BinAssign> {
    Ok(match s {
        "previous-bins" => BinAssign::PreviousBins,
        "bounding-box" => BinAssign::BoundingBox,
        "all" => BinAssign::All,
        "round-robin" => stage_lib::round_robin_assign(),
        other => bail!(
            "unknown bin assignment {other:?} \
             (previous-bins, bounding-box, all, round-robin)"
        ),
    })
}

/// `KIND` or `KIND:split` where split is a tile chunk size in bins.
pub fn parse_schedule(s: &str) -> Result<ScheduleDirective> {
    let (kind, split) = match s.split_once(':') {
        Some((k, n)) => {
            let n: u32 = n.parse().with_context(|| format!("tile split in {s:?}"))?;
            (k, Some(n))
        }
        None => (s, None),
    };
    let kind = match kind {
        "direct-map" => ScheduleKind::DirectMap,
        "load-balance" => ScheduleKind::LoadBalance,
        "serialize" => ScheduleKind::Serialize,
        "all" => ScheduleKind::All,
        other => bail!("unknown schedule {other:?} (direct-map, load-balance, serialize, all)"),
    };
    Ok(ScheduleDirective { kind, tile_split_size: split })
}

fn parse_dep(s: &str) -> Result<Dependency> {
    if s == "end-bin" {
        return Ok(Dependency::EndBin);
    }
    if let Some(target) = s.strip_prefix("end-stage:") {
        return Ok(Dependency::EndStage(target.to_string()));
    }
    bail!("unknown dependency {s:?} (end-bin, end-stage:<stage>)")
}

pub fn parse_pipeline(text: &str, screen: (u32, u32)) -> Result<PipelineGraph> {
    let file: PipelineFile = toml::from_str(text).context("pipeline description syntax")?;
    if file.stage.is_empty() {
        bail!("pipeline description declares no stages");
    }
    let mut g = PipelineGraph::new(screen);
    for e in &file.stage {
        let (input, outputs, process) = process_registry(&e.process)
            .ok_or_else(|| anyhow!("stage {:?}: unknown process {:?}", e.name, e.process))?;
        let mut s = StageDecl::new(&e.name, input, outputs, process);
        if let Some([w, h]) = e.bin {
            s = s.bins(w, h);
        }
        if let Some(t) = e.threads_per_bin {
            s = s.threads_per_bin(t);
        }
        if let Some(a) = &e.assign {
            s = s.assign(parse_assign(a).with_context(|| format!("stage {:?}", e.name))?);
        }
        if let Some(d) = &e.schedule {
            s = s.schedule(parse_schedule(d).with_context(|| format!("stage {:?}", e.name))?);
        }
        for d in &e.deps {
            s = s.dep(parse_dep(d).with_context(|| format!("stage {:?}", e.name))?);
        }
        g.add_stage(s)?;
    }
    for e in &file.edge {
        g.connect(&e.from, e.channel, &e.to)
            .with_context(|| format!("edge {} -> {}", e.from, e.to))?;
    }
    Ok(g)
}

pub fn load_pipeline_file(path: &Path, screen: (u32, u32)) -> Result<PipelineGraph> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    parse_pipeline(&text, screen).with_context(|| format!("in {}", path.display()))
}
