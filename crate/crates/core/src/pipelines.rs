//! The shipped render stages and pipeline variants: a five-stage
//! forward rasterizer in several scheduling flavors, a deferred-shading
//! rasterizer, a split/dice/sample/shade subdivision renderer, and the
//! synthetic token graphs that exercise structural features the render
//! variants never reach.
//!
//! Color is only ever written by a stage that has confirmed its
//! fragment still owns the pixel's depth record, so color stores need
//! no atomicity of their own: the final color at a pixel is the final
//! depth winner's color under every execution order.

use crate::bezier::{
    chord_extents, dice_extent, dice_grid_size, eval_patch, patch_normal, quad_mean,
    quad_mean_vec3,
    split_patch_u, split_patch_v,
};
use crate::env::{PipeParams, RunEnv};
use crate::graph::{
    AssignCtx, BinAssign, BinConfig, ChannelId, CustomAssign, Dependency, GraphError, PhaseError,
    PipelineGraph, ProcessDecl, ScheduleDirective, ScheduleKind, StageDecl,
};
use crate::math::{
    bary_interp, bary_interp_vec3, corrected_bary, depth_key, diffuse_shade, micropolygon_id,
    pixel_center, shader_cost_spin, snap, Bbox, PixelRect, PreparedTri,
};
use crate::prim::{Fragment, Micropolygon, PatchPrim, Primitive, PrimitiveKind, Token};
use crate::runtime::{execute, ExecConfig, RunStats, RuntimeError};
use crate::scene::{project_triangle, project_vertex};
use crate::synthesis::{synthesize, SynthesisError, SynthesisReport};
use glam::Vec3;
use std::sync::atomic::Ordering;
use std::sync::Arc;

/// Chunk length for the geometry stage's machine-wide bin walk in the
/// binned variants.
pub const GEOMETRY_CHUNK: u32 = 4096;

/// Work-bucket bin extent for the subdivision stages; buckets carry no
/// spatial meaning, they only spread patches for load balance.
pub const BUCKET_BIN: (u32, u32) = (256, 192);

/// Screen tile extent for micropolygon sampling and shading.
pub const SAMPLE_BIN: (u32, u32) = (32, 32);

fn expect_fragment(p: &Primitive) -> Result<&Fragment, PhaseError> {
    match p {
        Primitive::Fragment(f) => Ok(f),
        other => Err(PhaseError::Other(format!("expected a fragment, got {:?}", other.kind()))),
    }
}

// ---------------------------------------------------------------------------
// Forward raster stages
// ---------------------------------------------------------------------------

/// Camera transform, perspective divide, viewport map. Triangles
/// touching the eye plane are culled whole.
pub fn vertex_shade_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "vertex-shade",
        Arc::new(|p, ctx, emit| {
            let Primitive::Triangle(t) = p else {
                return Err(PhaseError::Other(format!("expected a triangle, got {:?}", p.kind())));
            };
            match project_triangle(&ctx.env.params.camera, ctx.env.params.screen, t) {
                Some(st) => emit(0, Primitive::ScreenTriangle(st)),
                None => {
                    ctx.env.marks.culled.fetch_add(1, Ordering::Relaxed);
                    Ok(())
                }
            }
        }),
    )
}

fn emit_covered_pixels(
    tri: &PreparedTri,
    rect: PixelRect,
    mut sink: impl FnMut(u32, u32, [i64; 3]) -> Result<(), PhaseError>,
) -> Result<(), PhaseError> {
    let r = rect.clip_bbox(&tri.bbox());
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            if let Some(w) = tri.coverage([pixel_center(x), pixel_center(y)]) {
                sink(x, y, w)?;
            }
        }
    }
    Ok(())
}

/// Edge-function coverage at pixel centers inside the stage's bin
/// rectangle. Bin rectangles partition the screen, so a triangle
/// assigned to several bins still covers each pixel exactly once.
pub fn rasterize_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "rasterize",
        Arc::new(|p, ctx, emit| {
            let Primitive::ScreenTriangle(t) = p else {
                return Err(PhaseError::Other(format!(
                    "expected a screen triangle, got {:?}",
                    p.kind()
                )));
            };
            let Some(tri) = PreparedTri::new(t.pos) else {
                return Ok(());
            };
            let o = tri.order;
            let depth = [t.depth[o[0]], t.depth[o[1]], t.depth[o[2]]];
            let inv_w = [t.inv_w[o[0]], t.inv_w[o[1]], t.inv_w[o[2]]];
            let normal = [t.normal[o[0]], t.normal[o[1]], t.normal[o[2]]];
            emit_covered_pixels(&tri, ctx.rect, |x, y, w| {
                let c = corrected_bary(w, inv_w);
                let d = bary_interp(&c, depth);
                if !(0.0..=1.0).contains(&d) {
                    return Ok(());
                }
                emit(
                    0,
                    Primitive::Fragment(Fragment {
                        x,
                        y,
                        depth: d,
                        normal: bary_interp_vec3(&c, normal),
                        color: [0.0; 3],
                        prim: t.prim,
                    }),
                )
            })
        }),
    )
}

fn shaded_color(env: &RunEnv, f: &Fragment) -> [f32; 3] {
    let spin = shader_cost_spin(env.params.shader_cost, f.depth);
    let mut c = diffuse_shade(f.normal);
    if spin {
        c[0] += 1.0;
    }
    c
}

/// Diffuse lighting from the interpolated normal, plus the configurable
/// busywork knob.
pub fn fragment_shade_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "fragment-shade",
        Arc::new(|p, ctx, emit| {
            let f = expect_fragment(p)?;
            let mut out = f.clone();
            out.color = shaded_color(ctx.env, f);
            emit(0, Primitive::Fragment(out))
        }),
    )
}

/// Merges the fragment into the per-pixel depth record and forwards it
/// only when the merge won. Losers are finished fragments.
pub fn depth_test_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "depth-test",
        Arc::new(|p, ctx, emit| {
            let f = expect_fragment(p)?;
            if ctx.env.targets.merge_depth(f.x, f.y, depth_key(f.depth, f.prim)) {
                emit(0, p.clone())
            } else {
                Ok(())
            }
        }),
    )
}

/// Stores the fragment's color iff the fragment still owns the pixel's
/// depth record. Runs behind a per-bin wait on the depth test, so every
/// merge for this pixel has already happened.
pub fn composite_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "composite",
        Arc::new(|p, ctx, _emit| {
            let f = expect_fragment(p)?;
            let t = &ctx.env.targets;
            if t.depth_key_at(f.x, f.y) == depth_key(f.depth, f.prim) {
                t.store_color(f.x, f.y, f.color);
            }
            Ok(())
        }),
    )
}

/// Composite that shades on the spot from the surviving fragment's
/// normal. Upstream never shaded, so only pixel owners pay the shading
/// cost; the color matches the forward path bit for bit because the
/// same function runs on the same normal.
pub fn deferred_composite_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "deferred-composite",
        Arc::new(|p, ctx, _emit| {
            let f = expect_fragment(p)?;
            let t = &ctx.env.targets;
            if t.depth_key_at(f.x, f.y) == depth_key(f.depth, f.prim) {
                t.store_color(f.x, f.y, shaded_color(ctx.env, f));
            }
            Ok(())
        }),
    )
}

// ---------------------------------------------------------------------------
// Subdivision (patch) stages
// ---------------------------------------------------------------------------

const SPLIT_SELF: ChannelId = 0;
const SPLIT_EXIT: ChannelId = 1;

fn project_ctrl(env: &RunEnv, p: &PatchPrim) -> Option<[[f32; 2]; 16]> {
    crate::scene::project_control_net(&env.params.camera, env.params.screen, &p.ctrl)
}

/// Bisects patches whose projected control net exceeds the split
/// threshold, recycling children onto its own input channel. The
/// subdivision depth cap forces oversize patches out after enough
/// rounds, which bounds the feedback loop.
pub fn split_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "split-patch",
        Arc::new(|p, ctx, emit| {
            let Primitive::Patch(patch) = p else {
                return Err(PhaseError::Other(format!("expected a patch, got {:?}", p.kind())));
            };
            let params = &ctx.env.params;
            let Some(pts) = project_ctrl(ctx.env, patch) else {
                ctx.env.marks.culled.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            };
            let side = Bbox::of_points(pts).unwrap().longer_side();
            if side > params.split_threshold_px && patch.depth < params.split_depth_cap {
                let (u_ext, v_ext) = chord_extents(&pts);
                let (lo_ctrl, hi_ctrl, lo_uv, hi_uv) = if u_ext >= v_ext {
                    let (a, b) = split_patch_u(&patch.ctrl);
                    let mid = (patch.uv_min[0] + patch.uv_max[0]) * 0.5;
                    (
                        a,
                        b,
                        (patch.uv_min, [mid, patch.uv_max[1]]),
                        ([mid, patch.uv_min[1]], patch.uv_max),
                    )
                } else {
                    let (a, b) = split_patch_v(&patch.ctrl);
                    let mid = (patch.uv_min[1] + patch.uv_max[1]) * 0.5;
                    (
                        a,
                        b,
                        (patch.uv_min, [patch.uv_max[0], mid]),
                        ([patch.uv_min[0], mid], patch.uv_max),
                    )
                };
                for (ctrl, (uv_min, uv_max)) in [(lo_ctrl, lo_uv), (hi_ctrl, hi_uv)] {
                    emit(
                        SPLIT_SELF,
                        Primitive::Patch(PatchPrim {
                            ctrl: Box::new(ctrl),
                            uv_min,
                            uv_max,
                            depth: patch.depth + 1,
                            prim: patch.prim,
                        }),
                    )?;
                }
                Ok(())
            } else {
                if side > params.split_threshold_px {
                    ctx.env.marks.forced_dice.fetch_add(1, Ordering::Relaxed);
                }
                emit(SPLIT_EXIT, p.clone())
            }
        }),
    )
}

/// Evaluates the patch on a square parameter grid sized to the target
/// cell extent and emits one quad per cell. Cell labels are a pure
/// function of cell identity, so depth keys do not depend on execution
/// order.
pub fn dice_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "dice-patch",
        Arc::new(|p, ctx, emit| {
            let Primitive::Patch(patch) = p else {
                return Err(PhaseError::Other(format!("expected a patch, got {:?}", p.kind())));
            };
            let params = &ctx.env.params;
            let Some(pts) = project_ctrl(ctx.env, patch) else {
                ctx.env.marks.culled.fetch_add(1, Ordering::Relaxed);
                return Ok(());
            };
            let n = dice_grid_size(dice_extent(&pts), params.dice_rate_px) as usize;

            let side = n + 1;
            let mut grid_px = vec![[0.0f32; 2]; side * side];
            let mut grid_depth = vec![0.0f32; side * side];
            let mut grid_normal = vec![Vec3::ZERO; side * side];
            for j in 0..side {
                let v = j as f64 / n as f64;
                for i in 0..side {
                    let u = i as f64 / n as f64;
                    let pos = eval_patch(&patch.ctrl, u, v);
                    let Some(sv) =
                        project_vertex(&params.camera, params.screen, pos.as_vec3())
                    else {
                        ctx.env.marks.culled.fetch_add(1, Ordering::Relaxed);
                        return Ok(());
                    };
                    grid_px[j * side + i] = [sv.x, sv.y];
                    grid_depth[j * side + i] = sv.depth;
                    grid_normal[j * side + i] = patch_normal(&patch.ctrl, u, v).as_vec3();
                }
            }
            for j in 0..n {
                for i in 0..n {
                    let c00 = j * side + i;
                    let c10 = c00 + 1;
                    let c01 = c00 + side;
                    let c11 = c01 + 1;
                    emit(
                        0,
                        Primitive::Micropolygon(Micropolygon {
                            corner: [grid_px[c00], grid_px[c10], grid_px[c11], grid_px[c01]],
                            depth: quad_mean([
                                grid_depth[c00],
                                grid_depth[c10],
                                grid_depth[c11],
                                grid_depth[c01],
                            ]),
                            normal: quad_mean_vec3([
                                grid_normal[c00],
                                grid_normal[c10],
                                grid_normal[c11],
                                grid_normal[c01],
                            ]),
                            prim: micropolygon_id(
                                patch.prim,
                                patch.uv_min,
                                patch.uv_max,
                                j as u32,
                                i as u32,
                            ),
                        }),
                    )?;
                }
            }
            Ok(())
        }),
    )
}

/// Pixel-center coverage of the quad as two triangles under the same
/// fill rule as triangle rasterization; the shared diagonal is covered
/// exactly once. Fragments carry the quad's flat depth and normal.
pub fn sample_process() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "sample-quad",
        Arc::new(|p, ctx, emit| {
            let Primitive::Micropolygon(m) = p else {
                return Err(PhaseError::Other(format!(
                    "expected a micropolygon, got {:?}",
                    p.kind()
                )));
            };
            let q: Vec<[i64; 2]> =
                m.corner.iter().map(|c| [snap(c[0]), snap(c[1])]).collect();
            for idx in [[0usize, 1, 2], [0, 2, 3]] {
                let Some(tri) = PreparedTri::new([q[idx[0]], q[idx[1]], q[idx[2]]]) else {
                    continue;
                };
                emit_covered_pixels(&tri, ctx.rect, |x, y, _w| {
                    emit(
                        0,
                        Primitive::Fragment(Fragment {
                            x,
                            y,
                            depth: m.depth,
                            normal: m.normal,
                            color: [0.0; 3],
                            prim: m.prim,
                        }),
                    )
                })?;
            }
            Ok(())
        }),
    )
}

/// Whole-bin resolve for the subdivision renderer: first merge every
/// fragment into the depth records, then write color for the fragments
/// that own their pixel. Needs the complete bin at once, so it runs as
/// a bin-list body and never fuses.
pub fn bin_shade_process() -> ProcessDecl {
    ProcessDecl::per_bin_list(
        "bin-shade",
        Arc::new(|list, ctx, _emit| {
            let t = &ctx.env.targets;
            for p in list {
                let f = expect_fragment(p)?;
                t.merge_depth(f.x, f.y, depth_key(f.depth, f.prim));
            }
            for p in list {
                let f = expect_fragment(p)?;
                if t.depth_key_at(f.x, f.y) == depth_key(f.depth, f.prim) {
                    t.store_color(f.x, f.y, shaded_color(ctx.env, f));
                }
            }
            Ok(())
        }),
    )
}

/// Ticket-counter distribution: the k-th primitive assigned to this
/// stage lands in bin k mod bins. Bin POPULATION COUNTS are
/// deterministic (they differ by at most one); membership is not, and
/// nothing downstream may depend on it.
pub fn round_robin_assign() -> BinAssign {
    BinAssign::Custom(CustomAssign {
        name: "round-robin".into(),
        f: Arc::new(|_p, ctx: &AssignCtx<'_>, out| {
            let k = ctx.ticket.fetch_add(1, Ordering::Relaxed);
            out.push((k % ctx.grid.len() as u64) as u32);
            Ok(())
        }),
    })
}

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    Baseline,
    Freepipe,
    Binned,
    BinnedFused,
    Deferred,
    Reyes,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Freepipe,
        Variant::Binned,
        Variant::BinnedFused,
        Variant::Deferred,
        Variant::Reyes,
    ];

    /// Variants that render triangle scenes through the raster stage
    /// set; they all produce identical images.
    pub const RASTER: [Variant; 5] = [
        Variant::Baseline,
        Variant::Freepipe,
        Variant::Binned,
        Variant::BinnedFused,
        Variant::Deferred,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Freepipe => "freepipe",
            Variant::Binned => "binned",
            Variant::BinnedFused => "binned-fused",
            Variant::Deferred => "deferred",
            Variant::Reyes => "reyes",
        }
    }

    pub fn input_kind(self) -> PrimitiveKind {
        match self {
            Variant::Reyes => PrimitiveKind::Patch,
            _ => PrimitiveKind::Triangle,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = BuildError;

    fn from_str(s: &str) -> Result<Variant, BuildError> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "freepipe" => Ok(Variant::Freepipe),
            "binned" => Ok(Variant::Binned),
            "binned-fused" | "binned_fused" => Ok(Variant::BinnedFused),
            "deferred" => Ok(Variant::Deferred),
            "reyes" => Ok(Variant::Reyes),
            other => Err(BuildError::UnknownVariant(other.to_string())),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("unknown pipeline variant {0:?}")]
    UnknownVariant(String),
    #[error("override targets unknown stage {0:?}")]
    UnknownStage(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-stage tweaks applied after a variant is assembled. A (0, 0) bin
/// size means one full-screen bin.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub bins: Vec<(String, (u32, u32))>,
    pub schedules: Vec<(String, ScheduleDirective)>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.bins.is_empty() && self.schedules.is_empty()
    }

    pub fn apply(&self, g: &mut PipelineGraph) -> Result<(), BuildError> {
        for (name, (w, h)) in &self.bins {
            let s = g
                .stage_mut(name)
                .ok_or_else(|| BuildError::UnknownStage(name.clone()))?;
            s.bin = if *w == 0 && *h == 0 {
                BinConfig::full_screen()
            } else {
                BinConfig::tiles(*w, *h)
            };
        }
        for (name, d) in &self.schedules {
            let s = g
                .stage_mut(name)
                .ok_or_else(|| BuildError::UnknownStage(name.clone()))?;
            s.schedule = *d;
        }
        Ok(())
    }
}

fn raster_graph(
    screen: (u32, u32),
    with_fragment_shade: bool,
    drain: ProcessDecl,
) -> Result<PipelineGraph, GraphError> {
    use PrimitiveKind::*;
    let mut g = PipelineGraph::new(screen);
    g.add_stage(StageDecl::new(
        "VertexShade",
        Triangle,
        vec![ScreenTriangle],
        vertex_shade_process(),
    ))?;
    g.add_stage(StageDecl::new(
        "Rasterize",
        ScreenTriangle,
        vec![Fragment],
        rasterize_process(),
    ))?;
    if with_fragment_shade {
        g.add_stage(StageDecl::new(
            "FragmentShade",
            Fragment,
            vec![Fragment],
            fragment_shade_process(),
        ))?;
    }
    g.add_stage(StageDecl::new("DepthTest", Fragment, vec![Fragment], depth_test_process()))?;
    g.add_stage(StageDecl::new("Composite", Fragment, vec![], drain).dep(Dependency::EndBin))?;
    g.connect("VertexShade", 0, "Rasterize")?;
    if with_fragment_shade {
        g.connect("Rasterize", 0, "FragmentShade")?;
        g.connect("FragmentShade", 0, "DepthTest")?;
    } else {
        g.connect("Rasterize", 0, "DepthTest")?;
    }
    g.connect("DepthTest", 0, "Composite")?;
    Ok(g)
}

fn set_all_schedules(g: &mut PipelineGraph, kind: ScheduleKind) {
    let names: Vec<String> = g.stages().map(|s| s.name.clone()).collect();
    for n in names {
        g.stage_mut(&n).unwrap().schedule = ScheduleDirective::of(kind);
    }
}

fn bin_raster_tail(g: &mut PipelineGraph, names: &[&str]) {
    for n in names {
        let s = g.stage_mut(n).unwrap();
        s.bin = BinConfig::tiles(8, 8);
    }
    g.stage_mut("Rasterize").unwrap().assign = BinAssign::BoundingBox;
    g.stage_mut("VertexShade").unwrap().schedule = ScheduleDirective::all_split(GEOMETRY_CHUNK);
}

fn reyes_graph(screen: (u32, u32)) -> Result<PipelineGraph, GraphError> {
    use PrimitiveKind::*;
    let mut g = PipelineGraph::new(screen);
    g.add_stage(
        StageDecl::new("Split", Patch, vec![Patch, Patch], split_process())
            .bins(BUCKET_BIN.0, BUCKET_BIN.1)
            .assign(round_robin_assign()),
    )?;
    g.add_stage(
        StageDecl::new("Dice", Patch, vec![Micropolygon], dice_process())
            .bins(BUCKET_BIN.0, BUCKET_BIN.1)
            .assign(round_robin_assign()),
    )?;
    g.add_stage(
        StageDecl::new("Sample", Micropolygon, vec![Fragment], sample_process())
            .bins(SAMPLE_BIN.0, SAMPLE_BIN.1)
            .assign(BinAssign::BoundingBox),
    )?;
    g.add_stage(
        StageDecl::new("Shade", Fragment, vec![], bin_shade_process())
            .bins(SAMPLE_BIN.0, SAMPLE_BIN.1)
            .schedule(ScheduleDirective::of(ScheduleKind::DirectMap)),
    )?;
    g.connect("Split", SPLIT_SELF, "Split")?;
    g.connect("Split", SPLIT_EXIT, "Dice")?;
    g.connect("Dice", 0, "Sample")?;
    g.connect("Sample", 0, "Shade")?;
    Ok(g)
}

/// Assembles one of the named pipeline configurations over the given
/// screen, then applies the overrides.
pub fn build_variant(
    v: Variant,
    screen: (u32, u32),
    overrides: &Overrides,
) -> Result<PipelineGraph, BuildError> {
    let mut g = match v {
        Variant::Baseline => raster_graph(screen, true, composite_process())?,
        Variant::Freepipe => {
            let mut g = raster_graph(screen, true, composite_process())?;
            set_all_schedules(&mut g, ScheduleKind::DirectMap);
            g
        }
        Variant::Binned => {
            let mut g = raster_graph(screen, true, composite_process())?;
            bin_raster_tail(&mut g, &["Rasterize", "FragmentShade", "DepthTest", "Composite"]);
            g
        }
        Variant::BinnedFused => {
            let mut g = raster_graph(screen, true, composite_process())?;
            bin_raster_tail(&mut g, &["Rasterize", "FragmentShade", "DepthTest", "Composite"]);
            g.stage_mut("Rasterize").unwrap().schedule =
                ScheduleDirective::of(ScheduleKind::DirectMap);
            g.stage_mut("FragmentShade").unwrap().schedule =
                ScheduleDirective::of(ScheduleKind::DirectMap);
            g
        }
        Variant::Deferred => {
            let mut g = raster_graph(screen, false, deferred_composite_process())?;
            bin_raster_tail(&mut g, &["Rasterize", "DepthTest", "Composite"]);
            g
        }
        Variant::Reyes => reyes_graph(screen)?,
    };
    overrides.apply(&mut g)?;
    Ok(g)
}

// ---------------------------------------------------------------------------
// One-call render
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("pipeline screen {pipeline:?} differs from render screen {params:?}")]
    ScreenMismatch { pipeline: (u32, u32), params: (u32, u32) },
}

pub struct RenderOutput {
    pub env: RunEnv,
    pub stats: RunStats,
    pub report: SynthesisReport,
}

impl RenderOutput {
    pub fn image(&self) -> crate::env::Framebuffer {
        self.env.targets.snapshot(self.env.params.background)
    }
}

/// Synthesizes the graph and executes it over the input under fresh
/// render targets.
pub fn render(
    g: &PipelineGraph,
    input: &[Primitive],
    params: PipeParams,
    cfg: &ExecConfig,
) -> Result<RenderOutput, PipelineError> {
    if g.screen != params.screen {
        return Err(PipelineError::ScreenMismatch { pipeline: g.screen, params: params.screen });
    }
    let (mapping, report) = synthesize(g)?;
    let env = RunEnv::new(params);
    let stats = execute(&mapping, input, &env, cfg)?;
    Ok(RenderOutput { env, stats, report })
}

// ---------------------------------------------------------------------------
// Synthetic structure graphs
// ---------------------------------------------------------------------------

/// Token pipelines exercising scheduling and synthesis structure that
/// the render variants never produce: explicit dependencies between
/// branches, per-bin waits under different dispatches, bucketed
/// traversal over nested grids, cycles, and randomized DAGs.
pub mod synthetic {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fork(outputs: usize) -> ProcessDecl {
        ProcessDecl::per_primitive(
            "token-fork",
            Arc::new(move |p, _ctx, emit| {
                let Primitive::Token(t) = p else {
                    return Err(PhaseError::Other("expected a token".into()));
                };
                let next = Token { id: t.id, payload: t.payload, hops: t.hops + 1 };
                for ch in 0..outputs as ChannelId {
                    emit(ch, Primitive::Token(next.clone()))?;
                }
                Ok(())
            }),
        )
    }

    fn sink() -> ProcessDecl {
        ProcessDecl::per_primitive("token-sink", Arc::new(|_p, _ctx, _emit| Ok(())))
    }

    /// Splits tokens back onto channel 0 until their hop budget runs
    /// out, then forwards them on channel 1.
    fn split_until(budget: u32) -> ProcessDecl {
        ProcessDecl::per_primitive(
            "token-split",
            Arc::new(move |p, _ctx, emit| {
                let Primitive::Token(t) = p else {
                    return Err(PhaseError::Other("expected a token".into()));
                };
                if t.hops < budget {
                    for _ in 0..2 {
                        emit(
                            0,
                            Primitive::Token(Token {
                                id: t.id,
                                payload: t.payload,
                                hops: t.hops + 1,
                            }),
                        )?;
                    }
                    Ok(())
                } else {
                    emit(1, p.clone())
                }
            }),
        )
    }

    /// Deterministic spatial spread for tokens, which have no screen
    /// extent: token id modulo the bin count.
    fn id_mod_assign() -> BinAssign {
        BinAssign::Custom(CustomAssign {
            name: "id-mod".into(),
            f: Arc::new(|p, ctx: &AssignCtx<'_>, out| {
                out.push(p.prim_id() % ctx.grid.len());
                Ok(())
            }),
        })
    }

    fn token_stage(name: &str, outputs: usize) -> StageDecl {
        let process = if outputs == 0 { sink() } else { fork(outputs) };
        StageDecl::new(name, PrimitiveKind::Token, vec![PrimitiveKind::Token; outputs], process)
    }

    /// Two converging render passes where the gated branch's shading
    /// stage must wait for the other branch's drain to finish whole.
    pub fn shadow_graph(screen: (u32, u32)) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        g.add_stage(token_stage("ShadowGeom", 1)).unwrap();
        g.add_stage(token_stage("ShadowMap", 0)).unwrap();
        g.add_stage(token_stage("MainGeom", 1)).unwrap();
        g.add_stage(token_stage("MainRaster", 1)).unwrap();
        g.add_stage(
            token_stage("MainShade", 1).dep(Dependency::EndStage("ShadowMap".into())),
        )
        .unwrap();
        g.add_stage(token_stage("MainOut", 0)).unwrap();
        g.connect("ShadowGeom", 0, "ShadowMap").unwrap();
        g.connect("MainGeom", 0, "MainRaster").unwrap();
        g.connect("MainRaster", 0, "MainShade").unwrap();
        g.connect("MainShade", 0, "MainOut").unwrap();
        g
    }

    /// Producer and consumer that would fuse, except the consumer
    /// demands the producer finish every bin first.
    pub fn whole_stage_wait_pair(screen: (u32, u32)) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        g.add_stage(
            token_stage("Gen", 1)
                .bins(64, 64)
                .assign(id_mod_assign())
                .schedule(ScheduleDirective::of(ScheduleKind::DirectMap)),
        )
        .unwrap();
        g.add_stage(
            token_stage("Sink", 0)
                .bins(64, 64)
                .schedule(ScheduleDirective::of(ScheduleKind::DirectMap))
                .dep(Dependency::EndStage("Gen".into())),
        )
        .unwrap();
        g.connect("Gen", 0, "Sink").unwrap();
        g
    }

    /// Producer and consumer that fuse with a per-bin wait buffered
    /// inside the shared kernel.
    pub fn per_bin_wait_pair(screen: (u32, u32)) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        g.add_stage(
            token_stage("Gen", 1)
                .bins(64, 64)
                .assign(id_mod_assign())
                .schedule(ScheduleDirective::of(ScheduleKind::DirectMap)),
        )
        .unwrap();
        g.add_stage(
            token_stage("Seal", 0)
                .bins(64, 64)
                .schedule(ScheduleDirective::of(ScheduleKind::DirectMap))
                .dep(Dependency::EndBin),
        )
        .unwrap();
        g.connect("Gen", 0, "Seal").unwrap();
        g
    }

    /// A per-bin wait whose consumer walks split bin chunks, which
    /// breaks the per-bin barrier and falls back to a whole-machine
    /// one.
    pub fn per_bin_wait_split_consumer(screen: (u32, u32)) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        g.add_stage(
            token_stage("Gen", 1)
                .bins(64, 64)
                .assign(id_mod_assign())
                .schedule(ScheduleDirective::of(ScheduleKind::DirectMap)),
        )
        .unwrap();
        g.add_stage(
            token_stage("Sweep", 0)
                .bins(64, 64)
                .schedule(ScheduleDirective::all_split(4))
                .dep(Dependency::EndBin),
        )
        .unwrap();
        g.connect("Gen", 0, "Sweep").unwrap();
        g
    }

    /// Chain whose leading stage walks coarse bins machine-wide while
    /// later stages run finer grids, triggering bucketed traversal.
    pub fn bucket_chain(screen: (u32, u32)) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        let (w, h) = (screen.0 / 2, screen.1);
        g.add_stage(
            token_stage("Chunk", 1)
                .bins(w, h)
                .assign(id_mod_assign())
                .schedule(ScheduleDirective::of(ScheduleKind::All)),
        )
        .unwrap();
        g.add_stage(token_stage("Tile", 0).bins(w / 2, h / 2)).unwrap();
        g.connect("Chunk", 0, "Tile").unwrap();
        g
    }

    /// Source feeding a two-stage cycle that drains into a sink once
    /// hop budgets run out.
    pub fn two_stage_cycle(screen: (u32, u32), budget: u32) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        g.add_stage(token_stage("Seed", 1)).unwrap();
        g.add_stage(token_stage("Ping", 1)).unwrap();
        g.add_stage({
            let mut s = token_stage("Pong", 2);
            s.process = split_until(budget);
            s
        })
        .unwrap();
        g.add_stage(token_stage("Out", 0)).unwrap();
        g.connect("Seed", 0, "Ping").unwrap();
        g.connect("Ping", 0, "Pong").unwrap();
        g.connect("Pong", 0, "Ping").unwrap();
        g.connect("Pong", 1, "Out").unwrap();
        g
    }

    /// Self-loop that re-emits every token forever; exists to trip the
    /// runtime's iteration cap.
    pub fn runaway_loop(screen: (u32, u32)) -> PipelineGraph {
        let mut g = PipelineGraph::new(screen);
        g.add_stage({
            let mut s = token_stage("Forever", 1);
            s.process = ProcessDecl::per_primitive(
                "token-echo",
                Arc::new(|p, _ctx, emit| emit(0, p.clone())),
            );
            s
        })
        .unwrap();
        g.connect("Forever", 0, "Forever").unwrap();
        g
    }

    /// Seeded random DAG of up to 12 stages. Edges only run from lower
    /// to higher stage numbers and explicit waits only target lower
    /// numbers, so a valid order always exists; schedules and bin
    /// grids vary freely.
    pub fn random_dag(seed: u64) -> PipelineGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let screen = (64u32, 64u32);
        let n = rng.random_range(2..=12usize);

        let mut targets: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 1..n {
            let indeg = rng.random_range(1..=j.min(3));
            let mut picks: Vec<usize> = (0..j).collect();
            for _ in 0..indeg {
                let k = rng.random_range(0..picks.len());
                let from = picks.swap_remove(k);
                targets[from].push(j);
            }
        }

        let mut g = PipelineGraph::new(screen);
        for (i, outs) in targets.iter().enumerate() {
            let mut s = token_stage(&format!("S{i:02}"), outs.len());
            match rng.random_range(0..4) {
                0 => s.schedule = ScheduleDirective::of(ScheduleKind::DirectMap),
                1 => s.schedule = ScheduleDirective::of(ScheduleKind::Serialize),
                2 => s.schedule = ScheduleDirective::of(ScheduleKind::All),
                _ => {}
            }
            if rng.random_range(0..3) == 0 {
                s = s.bins(32, 32).assign(id_mod_assign());
            }
            if i > 0 && rng.random_range(0..10) < 3 {
                let t = rng.random_range(0..i);
                s = s.dep(Dependency::EndStage(format!("S{t:02}")));
            }
            g.add_stage(s).unwrap();
        }
        for (i, outs) in targets.iter().enumerate() {
            for (ch, j) in outs.iter().enumerate() {
                g.connect(&format!("S{i:02}"), ch as ChannelId, &format!("S{j:02}")).unwrap();
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{PhaseCtx, ProcessBody};
    use crate::ordering::ScheduleEntry;
    use crate::prim::{InputTri, ScreenTri};
    use glam::DVec3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_env(screen: (u32, u32)) -> RunEnv {
        RunEnv::new(PipeParams::new(screen))
    }

    fn full_rect(screen: (u32, u32)) -> PixelRect {
        PixelRect { x0: 0, y0: 0, x1: screen.0, y1: screen.1 }
    }

    fn run_stage(
        decl: &ProcessDecl,
        prim: &Primitive,
        env: &RunEnv,
        rect: PixelRect,
    ) -> Vec<(ChannelId, Primitive)> {
        let ctx = PhaseCtx { env, bin: 0, rect };
        let mut out = Vec::new();
        let mut emit = |ch: ChannelId, p: Primitive| {
            out.push((ch, p));
            Ok(())
        };
        match &decl.body {
            ProcessBody::PerPrimitive(f) => f(prim, &ctx, &mut emit).unwrap(),
            ProcessBody::PerBinList(f) => {
                f(std::slice::from_ref(prim), &ctx, &mut emit).unwrap()
            }
        }
        out
    }

    fn flat_screen_tri(px: [[f32; 2]; 3], depth: f32, prim: u32) -> ScreenTri {
        ScreenTri {
            pos: [
                [snap(px[0][0]), snap(px[0][1])],
                [snap(px[1][0]), snap(px[1][1])],
                [snap(px[2][0]), snap(px[2][1])],
            ],
            depth: [depth; 3],
            inv_w: [1.0; 3],
            normal: [Vec3::Z; 3],
            prim,
        }
    }

    fn frag(x: u32, y: u32, depth: f32, prim: u32) -> Fragment {
        Fragment { x, y, depth, normal: Vec3::Z, color: [0.0; 3], prim }
    }

    fn fragment_pixels(out: &[(ChannelId, Primitive)]) -> Vec<(u32, u32)> {
        out.iter()
            .map(|(_, p)| match p {
                Primitive::Fragment(f) => (f.x, f.y),
                other => panic!("expected fragment, got {:?}", other.kind()),
            })
            .collect()
    }

    #[test]
    fn vertex_stage_projects_and_culls() {
        let screen = (256u32, 256u32);
        let env = test_env(screen);
        let tri = InputTri {
            pos: [
                Vec3::new(-0.5, -0.5, 0.0),
                Vec3::new(0.5, -0.5, 0.0),
                Vec3::new(0.0, 0.5, 0.0),
            ],
            normal: [Vec3::Z; 3],
            prim: 4,
        };
        let out = run_stage(
            &vertex_shade_process(),
            &Primitive::Triangle(tri.clone()),
            &env,
            full_rect(screen),
        );
        assert_eq!(out.len(), 1);
        let Primitive::ScreenTriangle(st) = &out[0].1 else { panic!() };
        let expect = project_triangle(&env.params.camera, screen, &tri).unwrap();
        assert_eq!(st.pos, expect.pos);
        assert_eq!(st.prim, 4);

        // A vertex at the eye plane kills the whole triangle.
        let behind = InputTri {
            pos: [Vec3::new(0.0, 0.0, 3.2), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            normal: [Vec3::Z; 3],
            prim: 5,
        };
        let out = run_stage(
            &vertex_shade_process(),
            &Primitive::Triangle(behind),
            &env,
            full_rect(screen),
        );
        assert!(out.is_empty());
        assert_eq!(env.marks.culled.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn raster_stage_covers_interior_centers_once() {
        let screen = (16u32, 16u32);
        let env = test_env(screen);
        let tri = flat_screen_tri([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]], 0.5, 9);
        let out = run_stage(
            &rasterize_process(),
            &Primitive::ScreenTriangle(tri),
            &env,
            full_rect(screen),
        );
        let mut got = fragment_pixels(&out);
        got.sort_unstable();
        assert_eq!(got, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)]);
        for (_, p) in &out {
            let Primitive::Fragment(f) = p else { panic!() };
            assert_eq!(f.depth, 0.5);
            assert_eq!(f.prim, 9);
            assert_eq!(f.color, [0.0; 3]);
        }
    }

    #[test]
    fn raster_stage_clips_to_its_bin_rect() {
        let screen = (16u32, 16u32);
        let env = test_env(screen);
        let tri = Primitive::ScreenTriangle(flat_screen_tri(
            [[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]],
            0.5,
            0,
        ));
        let far = run_stage(
            &rasterize_process(),
            &tri,
            &env,
            PixelRect { x0: 8, y0: 8, x1: 16, y1: 16 },
        );
        assert!(far.is_empty());

        let full: Vec<_> = fragment_pixels(&run_stage(
            &rasterize_process(),
            &tri,
            &env,
            full_rect(screen),
        ));
        let left = fragment_pixels(&run_stage(
            &rasterize_process(),
            &tri,
            &env,
            PixelRect { x0: 0, y0: 0, x1: 4, y1: 16 },
        ));
        let right = fragment_pixels(&run_stage(
            &rasterize_process(),
            &tri,
            &env,
            PixelRect { x0: 4, y0: 0, x1: 16, y1: 16 },
        ));
        // The two bin rects partition the screen, so together they
        // reproduce the full-screen set with no pixel twice.
        let mut union = left.clone();
        union.extend(right.iter().copied());
        let mut full_sorted = full.clone();
        full_sorted.sort_unstable();
        union.sort_unstable();
        assert_eq!(union, full_sorted);
        for p in &left {
            assert!(!right.contains(p));
        }
    }

    #[test]
    fn shared_edges_never_double_cover() {
        let screen = (64u32, 64u32);
        let env = test_env(screen);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..1000 {
            let mut p = || {
                [rng.random_range(0.0..60.0f32), rng.random_range(0.0..60.0f32)]
            };
            let (a, b, c, d) = (p(), p(), p(), p());
            // Triangles (a, b, c) and (b, a, d) share the edge a-b.
            let t1 = flat_screen_tri([a, b, c], 0.5, 1);
            let t2 = flat_screen_tri([b, a, d], 0.5, 2);
            let f1 = fragment_pixels(&run_stage(
                &rasterize_process(),
                &Primitive::ScreenTriangle(t1),
                &env,
                full_rect(screen),
            ));
            let f2 = fragment_pixels(&run_stage(
                &rasterize_process(),
                &Primitive::ScreenTriangle(t2),
                &env,
                full_rect(screen),
            ));
            // Opposite windings across the shared edge cover each edge
            // pixel at most once, whichever side is degenerate.
            let s1: std::collections::HashSet<_> = f1.iter().collect();
            let s2: std::collections::HashSet<_> = f2.iter().collect();
            let both: Vec<_> = s1.intersection(&s2).collect();
            let o1 = crate::math::orient2d(
                [snap(a[0]), snap(a[1])],
                [snap(b[0]), snap(b[1])],
                [snap(c[0]), snap(c[1])],
            );
            let o2 = crate::math::orient2d(
                [snap(b[0]), snap(b[1])],
                [snap(a[0]), snap(a[1])],
                [snap(d[0]), snap(d[1])],
            );
            // Only opposite-side pairs make the claim; same-side pairs
            // legitimately overlap.
            if o1.signum() == o2.signum() {
                assert!(
                    both.is_empty(),
                    "case {case}: {both:?} covered by both halves of a shared edge"
                );
            }
        }
    }

    #[test]
    fn shading_matches_the_lambert_construction() {
        let env = test_env((8, 8));
        let n = Vec3::new(1.0, 1.0, 1.0).normalize();
        let mut f = frag(0, 0, 0.5, 0);
        f.normal = n;
        let out = run_stage(&fragment_shade_process(), &Primitive::Fragment(f), &env, full_rect((8, 8)));
        let Primitive::Fragment(shaded) = &out[0].1 else { panic!() };
        assert!((shaded.color[0] - 0.80).abs() < 1e-6);
        assert!((shaded.color[1] - 0.75).abs() < 1e-6);
        assert!((shaded.color[2] - 0.65).abs() < 1e-6);

        let mut f = frag(0, 0, 0.5, 0);
        f.normal = Vec3::Z;
        let out = run_stage(&fragment_shade_process(), &Primitive::Fragment(f), &env, full_rect((8, 8)));
        let Primitive::Fragment(shaded) = &out[0].1 else { panic!() };
        assert!((shaded.color[0] - 0.4619).abs() < 1e-4);
        assert!((shaded.color[1] - 0.4330).abs() < 1e-4);
        assert!((shaded.color[2] - 0.3753).abs() < 1e-4);

        let mut f = frag(0, 0, 0.5, 0);
        f.normal = -n;
        let out = run_stage(&fragment_shade_process(), &Primitive::Fragment(f), &env, full_rect((8, 8)));
        let Primitive::Fragment(shaded) = &out[0].1 else { panic!() };
        assert_eq!(shaded.color, [0.0; 3]);
    }

    #[test]
    fn busywork_iterations_never_change_the_color() {
        let screen = (8u32, 8u32);
        let mut cheap = PipeParams::new(screen);
        cheap.shader_cost = 0;
        let mut dear = PipeParams::new(screen);
        dear.shader_cost = 512;
        let f = Primitive::Fragment(frag(1, 1, 0.25, 3));
        let a = run_stage(&fragment_shade_process(), &f, &RunEnv::new(cheap), full_rect(screen));
        let b = run_stage(&fragment_shade_process(), &f, &RunEnv::new(dear), full_rect(screen));
        let (Primitive::Fragment(fa), Primitive::Fragment(fb)) = (&a[0].1, &b[0].1) else {
            panic!()
        };
        assert_eq!(fa.color, fb.color);
    }

    #[test]
    fn depth_stage_forwards_only_improvements() {
        let screen = (8u32, 8u32);
        let env = test_env(screen);
        let dt = depth_test_process();
        let first = run_stage(&dt, &Primitive::Fragment(frag(2, 2, 0.5, 1)), &env, full_rect(screen));
        assert_eq!(first.len(), 1);
        let worse = run_stage(&dt, &Primitive::Fragment(frag(2, 2, 0.7, 2)), &env, full_rect(screen));
        assert!(worse.is_empty());
        let better = run_stage(&dt, &Primitive::Fragment(frag(2, 2, 0.3, 3)), &env, full_rect(screen));
        assert_eq!(better.len(), 1);
        assert_eq!(env.targets.depth_key_at(2, 2), depth_key(0.3, 3));
    }

    #[test]
    fn composite_stage_writes_only_the_current_winner() {
        let screen = (8u32, 8u32);
        let env = test_env(screen);
        env.targets.merge_depth(3, 3, depth_key(0.4, 7));
        let mut winner = frag(3, 3, 0.4, 7);
        winner.color = [0.1, 0.2, 0.3];
        let mut loser = frag(3, 3, 0.6, 8);
        loser.color = [0.9, 0.9, 0.9];
        let comp = composite_process();
        run_stage(&comp, &Primitive::Fragment(loser), &env, full_rect(screen));
        run_stage(&comp, &Primitive::Fragment(winner), &env, full_rect(screen));
        let fb = env.targets.snapshot([0.0; 3]);
        assert_eq!(fb.pixel(3, 3), [0.1, 0.2, 0.3]);
    }

    #[test]
    fn deferred_composite_equals_forward_shading() {
        let screen = (8u32, 8u32);
        let n = Vec3::new(0.3, -0.2, 0.93).normalize();
        let mut raw = frag(5, 1, 0.5, 2);
        raw.normal = n;

        let forward = test_env(screen);
        forward.targets.merge_depth(5, 1, depth_key(0.5, 2));
        let shaded = run_stage(
            &fragment_shade_process(),
            &Primitive::Fragment(raw.clone()),
            &forward,
            full_rect(screen),
        );
        run_stage(&composite_process(), &shaded[0].1, &forward, full_rect(screen));

        let deferred = test_env(screen);
        deferred.targets.merge_depth(5, 1, depth_key(0.5, 2));
        run_stage(
            &deferred_composite_process(),
            &Primitive::Fragment(raw),
            &deferred,
            full_rect(screen),
        );

        assert_eq!(
            forward.targets.snapshot([0.0; 3]).pixel(5, 1),
            deferred.targets.snapshot([0.0; 3]).pixel(5, 1)
        );
    }

    /// Flat patch on the focal plane spanning roughly the requested
    /// screen width in pixels.
    fn flat_patch(px_wide: f32, px_tall: f32, screen: (u32, u32)) -> PatchPrim {
        let px_per_unit = screen.1 as f32 / (2.0 * (30.0f32).to_radians().tan() * 3.2);
        let w = (px_wide / px_per_unit) as f64;
        let h = (px_tall / px_per_unit) as f64;
        let mut ctrl = [DVec3::ZERO; 16];
        for r in 0..4 {
            for k in 0..4 {
                ctrl[r * 4 + k] = DVec3::new(
                    -w / 2.0 + w * k as f64 / 3.0,
                    -h / 2.0 + h * r as f64 / 3.0,
                    0.0,
                );
            }
        }
        PatchPrim { ctrl: Box::new(ctrl), uv_min: [0.0, 0.0], uv_max: [1.0, 1.0], depth: 0, prim: 6 }
    }

    #[test]
    fn split_stage_bisects_oversize_patches() {
        let screen = (256u32, 256u32);
        let env = test_env(screen);
        let patch = flat_patch(100.0, 20.0, screen);
        let out = run_stage(&split_process(), &Primitive::Patch(patch), &env, full_rect(screen));
        assert_eq!(out.len(), 2);
        for (ch, p) in &out {
            assert_eq!(*ch, 0);
            let Primitive::Patch(c) = p else { panic!() };
            assert_eq!(c.depth, 1);
            assert_eq!(c.prim, 6);
        }
        // Wide and shallow means the u direction is cut; children
        // partition the parameter rectangle exactly at one half.
        let (Primitive::Patch(a), Primitive::Patch(b)) = (&out[0].1, &out[1].1) else { panic!() };
        assert_eq!(a.uv_min, [0.0, 0.0]);
        assert_eq!(a.uv_max, [0.5, 1.0]);
        assert_eq!(b.uv_min, [0.5, 0.0]);
        assert_eq!(b.uv_max, [1.0, 1.0]);

        let small = flat_patch(8.0, 8.0, screen);
        let out = run_stage(&split_process(), &Primitive::Patch(small), &env, full_rect(screen));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 1);
        assert_eq!(env.marks.forced_dice.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn split_stage_forces_out_at_the_depth_cap() {
        let screen = (256u32, 256u32);
        let env = test_env(screen);
        let mut patch = flat_patch(100.0, 100.0, screen);
        patch.depth = env.params.split_depth_cap;
        let out = run_stage(&split_process(), &Primitive::Patch(patch), &env, full_rect(screen));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 1);
        assert_eq!(env.marks.forced_dice.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn dice_stage_grids_to_the_rate() {
        let screen = (256u32, 256u32);
        let env = test_env(screen);
        let patch = flat_patch(15.8, 15.8, screen);
        // The construction above aims below 16 px; pin the band so the
        // expected grid is unambiguous.
        let pts = project_ctrl(&env, &patch).unwrap();
        let (ue, ve) = chord_extents(&pts);
        let ext = ue.max(ve);
        assert!(ext > 15.0 && ext <= 16.0, "patch spans {ext} px");

        let out = run_stage(&dice_process(), &Primitive::Patch(patch), &env, full_rect(screen));
        assert_eq!(out.len(), 256);
        // A flat patch parallel to the screen has one depth everywhere.
        let Primitive::Micropolygon(first) = &out[0].1 else { panic!() };
        for (_, p) in &out {
            let Primitive::Micropolygon(m) = p else { panic!() };
            for d in [m.depth] {
                assert!((d - first.depth).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dice_stage_handles_degenerate_patches() {
        let screen = (64u32, 64u32);
        let env = test_env(screen);
        let point = PatchPrim {
            ctrl: Box::new([DVec3::new(0.1, 0.1, 0.0); 16]),
            uv_min: [0.0, 0.0],
            uv_max: [1.0, 1.0],
            depth: 0,
            prim: 0,
        };
        let out = run_stage(&dice_process(), &Primitive::Patch(point), &env, full_rect(screen));
        assert!(out.len() <= 1);
        for (_, p) in &out {
            let frags = run_stage(&sample_process(), p, &env, full_rect(screen));
            assert!(frags.is_empty());
        }
    }

    #[test]
    fn diced_cells_stay_under_the_rate_bound() {
        let screen = (512u32, 384u32);
        let env = test_env(screen);
        // A curved cell: one patch out of the procedural array, small
        // enough to skip splitting.
        let source = crate::scene::gen_patch_array(8, 8).patches[27];
        let patch = PatchPrim {
            ctrl: Box::new(source),
            uv_min: [0.0, 0.0],
            uv_max: [1.0, 1.0],
            depth: 0,
            prim: 3,
        };
        let pts = project_ctrl(&env, &patch).unwrap();
        let (ue, ve) = chord_extents(&pts);
        assert!(ue.max(ve) < 80.0, "test patch unexpectedly large: {}", ue.max(ve));
        let out = run_stage(&dice_process(), &Primitive::Patch(patch), &env, full_rect(screen));
        assert!(!out.is_empty());
        for (_, p) in &out {
            let Primitive::Micropolygon(m) = p else { panic!() };
            let ext = Bbox::of_points(m.corner.iter().copied()).unwrap().longer_side();
            assert!(
                ext <= env.params.dice_rate_px * 1.5,
                "cell spans {ext} px against rate {}",
                env.params.dice_rate_px
            );
        }
    }

    #[test]
    fn sample_stage_equals_its_two_triangle_halves() {
        let screen = (64u32, 64u32);
        let env = test_env(screen);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let cx = rng.random_range(4.0..56.0f32);
            let cy = rng.random_range(4.0..56.0f32);
            // One radius per quad keeps the corners on a circle, so the
            // quad is convex and the diagonal split is a clean tiling.
            let r = rng.random_range(1.0..6.0f32);
            let mut corner = [[0.0f32; 2]; 4];
            for (k, c) in corner.iter_mut().enumerate() {
                let ang = std::f32::consts::FRAC_PI_2 * k as f32
                    + rng.random_range(-0.3..0.3f32);
                *c = [cx + r * ang.cos(), cy + r * ang.sin()];
            }
            let m = Micropolygon { corner, depth: 0.5, normal: Vec3::Z, prim: 1 };
            let quad = fragment_pixels(&run_stage(
                &sample_process(),
                &Primitive::Micropolygon(m),
                &env,
                full_rect(screen),
            ));
            // Same two halves rasterized as triangles.
            let t1 = flat_screen_tri([corner[0], corner[1], corner[2]], 0.5, 1);
            let t2 = flat_screen_tri([corner[0], corner[2], corner[3]], 0.5, 1);
            let mut tris = fragment_pixels(&run_stage(
                &rasterize_process(),
                &Primitive::ScreenTriangle(t1),
                &env,
                full_rect(screen),
            ));
            tris.extend(fragment_pixels(&run_stage(
                &rasterize_process(),
                &Primitive::ScreenTriangle(t2),
                &env,
                full_rect(screen),
            )));
            let mut quad_sorted = quad.clone();
            quad_sorted.sort_unstable();
            quad_sorted.dedup();
            tris.sort_unstable();
            tris.dedup();
            assert_eq!(quad_sorted, tris);
            // The diagonal is interior: no pixel sampled twice.
            let mut counts = std::collections::HashMap::new();
            for p in &quad {
                *counts.entry(*p).or_insert(0u32) += 1;
            }
            assert!(counts.values().all(|&c| c == 1), "a pixel was sampled twice");
        }
    }

    #[test]
    fn bin_shade_resolves_depth_then_writes_winners() {
        let screen = (8u32, 8u32);
        let near = {
            let mut f = frag(2, 2, 0.3, 1);
            f.normal = Vec3::Z;
            f
        };
        let far = {
            let mut f = frag(2, 2, 0.8, 2);
            f.normal = Vec3::X;
            f
        };
        let shade = bin_shade_process();
        let ProcessBody::PerBinList(f) = &shade.body else { panic!() };
        let mut snapshots = Vec::new();
        for list in [
            vec![Primitive::Fragment(near.clone()), Primitive::Fragment(far.clone())],
            vec![Primitive::Fragment(far), Primitive::Fragment(near)],
        ] {
            let env = test_env(screen);
            let ctx = PhaseCtx { env: &env, bin: 0, rect: full_rect(screen) };
            let mut emit = |_ch: ChannelId, _p: Primitive| Ok(());
            f(&list, &ctx, &mut emit).unwrap();
            snapshots.push(env.targets.snapshot([0.0; 3]));
        }
        assert_eq!(snapshots[0], snapshots[1]);
        let expect = diffuse_shade(Vec3::Z);
        assert_eq!(snapshots[0].pixel(2, 2), expect);
    }

    #[test]
    fn round_robin_spreads_counts_within_one() {
        let env = test_env((256, 192));
        let grid = crate::graph::BinGrid::new(&BinConfig::tiles(64, 64), (256, 192));
        assert_eq!(grid.len(), 12);
        let BinAssign::Custom(c) = round_robin_assign() else { panic!() };
        let ticket = std::sync::atomic::AtomicU64::new(0);
        let mut counts = vec![0u32; grid.len() as usize];
        let mut bins = Vec::new();
        for id in 0..103u32 {
            let ctx = AssignCtx { grid: &grid, env: &env, ticket: &ticket };
            (c.f)(
                &Primitive::Token(Token { id, payload: 0, hops: 0 }),
                &ctx,
                &mut bins,
            )
            .unwrap();
            counts[*bins.last().unwrap() as usize] += 1;
        }
        let lo = counts.iter().min().unwrap();
        let hi = counts.iter().max().unwrap();
        assert!(hi - lo <= 1, "counts {counts:?}");
        assert_eq!(counts.iter().sum::<u32>(), 103);
    }

    #[test]
    fn variant_graphs_validate_and_take_overrides() {
        for v in Variant::ALL {
            let g = build_variant(v, (1024, 768), &Overrides::default()).unwrap();
            assert!(g.validate().is_empty(), "{v} has diagnostics {:?}", g.validate());
        }

        let ov = Overrides {
            bins: vec![("FragmentShade".into(), (16, 16))],
            schedules: vec![(
                "FragmentShade".into(),
                ScheduleDirective::of(ScheduleKind::Serialize),
            )],
        };
        let g = build_variant(Variant::Binned, (1024, 768), &ov).unwrap();
        let s = g.stage("FragmentShade").unwrap();
        assert_eq!(s.bin, BinConfig::tiles(16, 16));
        assert_eq!(s.schedule.kind, ScheduleKind::Serialize);

        let missing = Overrides { bins: vec![("Nope".into(), (8, 8))], ..Default::default() };
        assert!(matches!(
            build_variant(Variant::Binned, (64, 64), &missing),
            Err(BuildError::UnknownStage(n)) if n == "Nope"
        ));

        assert!(matches!("cube".parse::<Variant>(), Err(BuildError::UnknownVariant(_))));
        assert_eq!("binned_fused".parse::<Variant>().unwrap(), Variant::BinnedFused);
        assert_eq!("binned-fused".parse::<Variant>().unwrap(), Variant::BinnedFused);
    }

    #[test]
    fn schedule_collapse_depends_on_the_variant() {
        let g = build_variant(Variant::Freepipe, (256, 192), &Overrides::default()).unwrap();
        let (m, _) = synthesize(&g).unwrap();
        assert_eq!(m.kernels.len(), 1);
        assert!(m.wiring.iter().all(|w| w.fused));

        let g = build_variant(Variant::Baseline, (256, 192), &Overrides::default()).unwrap();
        let (m, _) = synthesize(&g).unwrap();
        assert_eq!(m.kernels.len(), 5);
        assert!(m.wiring.iter().all(|w| !w.fused));
    }

    #[test]
    fn the_fused_variant_merges_raster_and_shading() {
        let g = build_variant(Variant::BinnedFused, (256, 192), &Overrides::default()).unwrap();
        let (m, _) = synthesize(&g).unwrap();
        assert_eq!(m.kernels.len(), 4);
        let rast = m.pipeline.id_of("Rasterize").unwrap();
        let shade = m.pipeline.id_of("FragmentShade").unwrap();
        assert_eq!(m.kernel_of[rast], m.kernel_of[shade]);

        let g = build_variant(Variant::Binned, (256, 192), &Overrides::default()).unwrap();
        let (m, _) = synthesize(&g).unwrap();
        assert_eq!(m.kernels.len(), 5);
        assert!(m.kernels.iter().all(|k| k.process_stages().len() == 1));
    }

    #[test]
    fn subdivision_variant_loops_on_its_feedback_stage() {
        let g = build_variant(Variant::Reyes, (1024, 768), &Overrides::default()).unwrap();
        let (m, _) = synthesize(&g).unwrap();
        let split = m.pipeline.id_of("Split").unwrap();
        let looped: Vec<_> = m
            .schedule
            .entries
            .iter()
            .filter_map(|e| match e {
                ScheduleEntry::LoopUntilEmpty(stages) => Some(stages.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(looped, vec![vec![split]]);
        assert_eq!(m.kernels.len(), 4);
    }

    #[test]
    fn small_end_to_end_images_agree_across_raster_variants() {
        let screen = (128u32, 96u32);
        let scene = crate::scene::gen_soup(60, 3.0, 30.0, 5, screen);
        let input: Vec<Primitive> =
            scene.tris.iter().cloned().map(Primitive::Triangle).collect();
        let params = PipeParams::new(screen);
        let cfg = ExecConfig { workers: 2, ..ExecConfig::default() };
        let mut images = Vec::new();
        for v in Variant::RASTER {
            let g = build_variant(v, screen, &Overrides::default()).unwrap();
            let out = render(&g, &input, params, &cfg).unwrap();
            images.push((v, out.image()));
        }
        let (_, first) = &images[0];
        assert!(
            first.pixels.iter().any(|p| *p != params.background),
            "nothing was drawn"
        );
        for (v, img) in &images[1..] {
            assert_eq!(img, first, "{v} diverged");
        }
    }

    #[test]
    fn render_rejects_mismatched_screens() {
        let g = build_variant(Variant::Baseline, (64, 64), &Overrides::default()).unwrap();
        let err = render(&g, &[], PipeParams::new((128, 128)), &ExecConfig::default());
        assert!(matches!(err, Err(PipelineError::ScreenMismatch { .. })));
    }

    #[test]
    fn shadow_work_precedes_the_gated_main_stage() {
        let g = synthetic::shadow_graph((64, 64));
        let (m, _) = synthesize(&g).unwrap();
        let pos = |name: &str| {
            let id = m.pipeline.id_of(name).unwrap();
            m.schedule
                .entries
                .iter()
                .position(|e| match e {
                    ScheduleEntry::Launch(s) => *s == id,
                    ScheduleEntry::LoopUntilEmpty(v) => v.contains(&id),
                    ScheduleEntry::DepthFirstGroup(v) => v.contains(&id),
                })
                .unwrap()
        };
        let gate = pos("MainShade");
        for shadow in ["ShadowGeom", "ShadowMap"] {
            assert!(pos(shadow) < gate, "{shadow} scheduled after the gated stage");
        }
        // The gated stage keeps a whole-machine wait.
        let id = m.pipeline.id_of("MainShade").unwrap();
        assert_eq!(
            m.kernels[m.kernel_of[id]].entry_sync,
            crate::synthesis::EntrySync::GlobalBarrier
        );
    }

    #[test]
    fn random_graphs_build_and_synthesize_cleanly() {
        for seed in 0..60 {
            let g = synthetic::random_dag(seed);
            assert!(g.validate().is_empty(), "seed {seed}: {:?}", g.validate());
            synthesize(&g).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }
}
