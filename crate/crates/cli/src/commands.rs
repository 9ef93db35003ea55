//! Subcommand bodies. Each returns its result as data; printing and
//! process exit codes stay in the binary.

use crate::config::{inject_depth_skew, PipelineSource, RunConfig};
use anyhow::{bail, Result};
use binflow::oracle::{compare_images, reference_render, reference_reyes, ImageDiff};
use binflow::pipelines::{render, RenderOutput};
use binflow::prim::PrimitiveKind;
use binflow::runtime::RunStats;
use binflow::scene::Scene;
use binflow::synthesis::synthesize;
use serde::Serialize;
use std::fmt;

fn scene_kind(scene: &Scene) -> PrimitiveKind {
    match scene {
        Scene::Tris(_) => PrimitiveKind::Triangle,
        Scene::Patches(_) => PrimitiveKind::Patch,
    }
}

/// The scene's primitives must feed at least one source stage.
fn check_input_kind(g: &binflow::graph::PipelineGraph, scene: &Scene) -> Result<()> {
    let kind = scene_kind(scene);
    let idx = g.index()?;
    let consumed: Vec<PrimitiveKind> =
        idx.sources.iter().map(|&s| idx.decls[s].input).collect();
    if consumed.contains(&kind) {
        return Ok(());
    }
    bail!("scene provides {kind:?} primitives but the pipeline sources consume {consumed:?}")
}

/// Structure report: skeleton analysis, stage order, kernel plan.
pub fn cmd_inspect(cfg: &RunConfig) -> Result<String> {
    use std::fmt::Write;
    let g = cfg.validated_graph()?;
    let (m, rep) = synthesize(&g)?;
    let mut out = String::new();
    writeln!(out, "pipeline {} over {}x{}", cfg.source.label(), g.screen.0, g.screen.1)?;
    out.push_str(&m.skeleton.report(&m.pipeline));
    writeln!(out, "stage order:")?;
    out.push_str(&m.schedule.render(&m.pipeline));
    out.push_str(&rep.to_string());
    Ok(out)
}

pub struct RenderResult {
    pub label: String,
    pub out: RenderOutput,
}

pub fn cmd_render(cfg: &RunConfig) -> Result<RenderResult> {
    let g = cfg.validated_graph()?;
    let scene = cfg.load_scene()?;
    check_input_kind(&g, &scene)?;
    let out = render(&g, &scene.primitives(), cfg.params(), &cfg.exec())?;
    Ok(RenderResult { label: cfg.source.label(), out })
}

#[derive(Debug)]
pub struct VerifyReport {
    pub label: String,
    pub pixels: ImageDiff,
    pub stats: RunStats,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.pixels.identical()
    }

    pub fn summary(&self) -> String {
        if self.passed() {
            format!("{}: output identical to reference", self.label)
        } else {
            let (x, y) = self.pixels.first_diff.unwrap_or((0, 0));
            format!(
                "{}: {} differing pixels, first at ({x}, {y}), max channel error {:e}",
                self.label, self.pixels.differing, self.pixels.max_channel_error
            )
        }
    }
}

/// Renders through the pipeline machinery and through the matching
/// single-threaded reference, then compares pixel for pixel.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let mut g = cfg.validated_graph()?;
    if cfg.skew_depth {
        inject_depth_skew(&mut g)?;
    }
    let scene = cfg.load_scene()?;
    check_input_kind(&g, &scene)?;
    let params = cfg.params();
    let out = render(&g, &scene.primitives(), params, &cfg.exec())?;
    let expect = match &scene {
        Scene::Tris(s) => reference_render(&s.tris, &params),
        Scene::Patches(s) => reference_reyes(&s.patches, &params),
    };
    let diff = compare_images(&out.image(), &expect);
    Ok(VerifyReport { label: cfg.source.label(), pixels: diff, stats: out.stats })
}

#[derive(Debug, Serialize)]
pub struct KernelTiming {
    pub stages: Vec<String>,
    pub dispatch: String,
    pub median_wall_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub pipeline: String,
    pub repeats: usize,
    pub workers: usize,
    pub shader_cost: u32,
    pub median_total_ms: f64,
    pub kernels: Vec<KernelTiming>,
    /// Primitives that crossed a stage boundary through a bin store.
    /// Fused wires never touch the store, so they count nothing here.
    pub store_traffic: u64,
    /// Primitives consumed straight from a producer inside fused
    /// kernels.
    pub fused_traffic: u64,
    /// Counters of the first run; they are identical on every run.
    pub stats: RunStats,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub scene: String,
    pub screen: (u32, u32),
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serialize")
    }

    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.pipeline == label)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scene {} at {}x{}", self.scene, self.screen.0, self.screen.1)?;
        for r in &self.rows {
            writeln!(
                f,
                "{}: median total {:.3} ms over {} runs, {} workers",
                r.pipeline, r.median_total_ms, r.repeats, r.workers
            )?;
            for k in &r.kernels {
                writeln!(
                    f,
                    "  {:>9.3} ms  [{}] {}",
                    k.median_wall_ms,
                    k.stages.join(" + "),
                    k.dispatch
                )?;
            }
            writeln!(
                f,
                "  traffic: {} through bin stores, {} fused handoffs",
                r.store_traffic, r.fused_traffic
            )?;
            let bins: Vec<String> = r
                .stats
                .stages
                .iter()
                .map(|s| format!("{} {}/{}", s.name, s.bins_used, s.max_bin_load))
                .collect();
            writeln!(f, "  bins used/max load: {}", bins.join(", "))?;
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Renders each configuration `repeats` times over the same scene and
/// reports per-kernel and total wall medians plus the deterministic
/// traffic and occupancy counters.
pub fn cmd_bench(
    cfg: &RunConfig,
    sources: &[PipelineSource],
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        bail!("bench needs at least one run");
    }
    let scene = cfg.load_scene()?;
    let prims = scene.primitives();
    let params = cfg.params();
    let mut rows = Vec::new();
    for src in sources {
        let sub = RunConfig { source: src.clone(), ..cfg.clone() };
        let g = sub.validated_graph()?;
        check_input_kind(&g, &scene)?;
        let mut runs = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            runs.push(render(&g, &prims, params, &sub.exec())?);
        }
        let stats = runs[0].stats.clone();
        let kernels = (0..stats.kernels.len())
            .map(|k| KernelTiming {
                stages: stats.kernels[k].stages.clone(),
                dispatch: stats.kernels[k].dispatch.clone(),
                median_wall_ms: median(
                    runs.iter().map(|r| r.stats.kernels[k].wall_ms).collect(),
                ),
            })
            .collect();
        let store_traffic =
            stats.wires.iter().filter(|w| !w.fused).map(|w| w.primitives).sum();
        let fused_traffic = stats.stages.iter().map(|s| s.consumed_fused).sum();
        rows.push(BenchRow {
            pipeline: src.label(),
            repeats,
            workers: sub.workers,
            shader_cost: sub.shader_cost,
            median_total_ms: median(runs.iter().map(|r| r.stats.total_wall_ms).collect()),
            kernels,
            store_traffic,
            fused_traffic,
            stats,
        });
    }
    Ok(BenchReport {
        scene: cfg.scene.as_ref().map(|s| s.label()).unwrap_or_default(),
        screen: cfg.screen,
        rows,
    })
}
