//! Sequential reference renderers and a brute-force bin checker, for
//! validating pipeline output pixel for pixel.
//!
//! These share the scalar math with the pipeline stages (projection,
//! fill rule, interpolation, shading) so that agreement is exact, but
//! none of the machinery: no bins, no stages, no kernels, no atomics.
//! Work is a plain loop over flat arrays, so any divergence points at
//! the pipeline's data movement rather than at arithmetic.

use crate::bezier::{
    chord_extents, dice_extent, dice_grid_size, eval_patch, patch_normal, quad_mean,
    quad_mean_vec3,
    split_patch_u, split_patch_v,
};
use crate::env::{Framebuffer, PipeParams};
use crate::graph::{BinGrid, BinId};
use crate::math::{
    bary_interp, bary_interp_vec3, corrected_bary, depth_key, diffuse_shade, micropolygon_id,
    pixel_center, shader_cost_spin, snap, Bbox, PixelRect, PreparedTri, DEPTH_KEY_EMPTY,
};
use crate::prim::{InputTri, Micropolygon, PatchPrim};
use crate::scene::{project_control_net, project_triangle, project_vertex};
use glam::{DVec3, Vec3};

/// Plain single-threaded depth and color planes.
struct Canvas {
    width: u32,
    height: u32,
    depth: Vec<u64>,
    color: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(screen: (u32, u32), background: [f32; 3]) -> Canvas {
        let n = (screen.0 * screen.1) as usize;
        Canvas {
            width: screen.0,
            height: screen.1,
            depth: vec![DEPTH_KEY_EMPTY; n],
            color: vec![background; n],
        }
    }

    fn merge(&mut self, x: u32, y: u32, key: u64, color: [f32; 3]) {
        let i = (y * self.width + x) as usize;
        if key < self.depth[i] {
            self.depth[i] = key;
            self.color[i] = color;
        }
    }

    fn into_framebuffer(self) -> Framebuffer {
        Framebuffer { width: self.width, height: self.height, pixels: self.color }
    }
}

fn full_rect(screen: (u32, u32)) -> PixelRect {
    PixelRect { x0: 0, y0: 0, x1: screen.0, y1: screen.1 }
}

fn lit_color(params: &PipeParams, normal: Vec3, depth: f32) -> [f32; 3] {
    let spin = shader_cost_spin(params.shader_cost, depth);
    let mut c = diffuse_shade(normal);
    if spin {
        c[0] += 1.0;
    }
    c
}

/// Renders the triangle list exactly as the raster pipelines must:
/// projection, fill-rule coverage over the whole screen, depth keys
/// resolved to the minimum, winner colors kept. One pass, input order,
/// no binning.
pub fn reference_render(tris: &[InputTri], params: &PipeParams) -> Framebuffer {
    let mut canvas = Canvas::new(params.screen, params.background);
    let rect = full_rect(params.screen);
    for t in tris {
        let Some(st) = project_triangle(&params.camera, params.screen, t) else {
            continue;
        };
        let Some(tri) = PreparedTri::new(st.pos) else {
            continue;
        };
        let o = tri.order;
        let depth = [st.depth[o[0]], st.depth[o[1]], st.depth[o[2]]];
        let inv_w = [st.inv_w[o[0]], st.inv_w[o[1]], st.inv_w[o[2]]];
        let normal = [st.normal[o[0]], st.normal[o[1]], st.normal[o[2]]];
        let r = rect.clip_bbox(&tri.bbox());
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let Some(w) = tri.coverage([pixel_center(x), pixel_center(y)]) else {
                    continue;
                };
                let c = corrected_bary(w, inv_w);
                let d = bary_interp(&c, depth);
                if !(0.0..=1.0).contains(&d) {
                    continue;
                }
                let n = bary_interp_vec3(&c, normal);
                canvas.merge(x, y, depth_key(d, st.prim), lit_color(params, n, d));
            }
        }
    }
    canvas.into_framebuffer()
}

/// Dices one patch into flat-shaded quads, or nothing when any grid
/// point fails projection. Identical math to the pipeline's dicing
/// stage, driven here from a plain work list.
fn dice_patch(params: &PipeParams, p: &PatchPrim, out: &mut Vec<Micropolygon>) {
    let Some(pts) = project_control_net(&params.camera, params.screen, &p.ctrl) else {
        return;
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
            let pos = eval_patch(&p.ctrl, u, v);
            let Some(sv) = project_vertex(&params.camera, params.screen, pos.as_vec3()) else {
                return;
            };
            grid_px[j * side + i] = [sv.x, sv.y];
            grid_depth[j * side + i] = sv.depth;
            grid_normal[j * side + i] = patch_normal(&p.ctrl, u, v).as_vec3();
        }
    }
    for j in 0..n {
        for i in 0..n {
            let c00 = j * side + i;
            let c10 = c00 + 1;
            let c01 = c00 + side;
            let c11 = c01 + 1;
            out.push(Micropolygon {
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
                prim: micropolygon_id(p.prim, p.uv_min, p.uv_max, j as u32, i as u32),
            });
        }
    }
}

/// Splits and dices the patch list from an explicit work stack, then
/// samples every quad over the whole screen and resolves depth
/// sequentially. Same split threshold, direction rule, depth cap and
/// cell labels as the subdivision pipeline.
pub fn reference_reyes(patches: &[[DVec3; 16]], params: &PipeParams) -> Framebuffer {
    let mut work: Vec<PatchPrim> = patches
        .iter()
        .enumerate()
        .map(|(i, c)| PatchPrim {
            ctrl: Box::new(*c),
            uv_min: [0.0, 0.0],
            uv_max: [1.0, 1.0],
            depth: 0,
            prim: i as u32,
        })
        .collect();
    let mut quads = Vec::new();
    while let Some(p) = work.pop() {
        let Some(pts) = project_control_net(&params.camera, params.screen, &p.ctrl) else {
            continue;
        };
        let side = Bbox::of_points(pts).unwrap().longer_side();
        if side > params.split_threshold_px && p.depth < params.split_depth_cap {
            let (u_ext, v_ext) = chord_extents(&pts);
            let (lo, hi, lo_uv, hi_uv) = if u_ext >= v_ext {
                let (a, b) = split_patch_u(&p.ctrl);
                let mid = (p.uv_min[0] + p.uv_max[0]) * 0.5;
                (a, b, (p.uv_min, [mid, p.uv_max[1]]), ([mid, p.uv_min[1]], p.uv_max))
            } else {
                let (a, b) = split_patch_v(&p.ctrl);
                let mid = (p.uv_min[1] + p.uv_max[1]) * 0.5;
                (a, b, (p.uv_min, [p.uv_max[0], mid]), ([p.uv_min[0], mid], p.uv_max))
            };
            for (ctrl, (uv_min, uv_max)) in [(lo, lo_uv), (hi, hi_uv)] {
                work.push(PatchPrim {
                    ctrl: Box::new(ctrl),
                    uv_min,
                    uv_max,
                    depth: p.depth + 1,
                    prim: p.prim,
                });
            }
        } else {
            dice_patch(params, &p, &mut quads);
        }
    }

    let mut canvas = Canvas::new(params.screen, params.background);
    let rect = full_rect(params.screen);
    for m in &quads {
        let q: Vec<[i64; 2]> = m.corner.iter().map(|c| [snap(c[0]), snap(c[1])]).collect();
        let color = lit_color(params, m.normal, m.depth);
        let key = depth_key(m.depth, m.prim);
        for idx in [[0usize, 1, 2], [0, 2, 3]] {
            let Some(tri) = PreparedTri::new([q[idx[0]], q[idx[1]], q[idx[2]]]) else {
                continue;
            };
            let r = rect.clip_bbox(&tri.bbox());
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    if tri.coverage([pixel_center(x), pixel_center(y)]).is_some() {
                        canvas.merge(x, y, key, color);
                    }
                }
            }
        }
    }
    canvas.into_framebuffer()
}

/// Every bin whose closed, screen-clipped pixel rectangle meets the
/// closed bbox, found by testing each bin in turn. The checkable
/// restatement of spatial binning.
pub fn brute_bin_assign(b: &Bbox, grid: &BinGrid) -> Vec<BinId> {
    let mut out = Vec::new();
    for id in 0..grid.len() {
        let r = grid.rect(id);
        if b.min[0] <= r.x1 as f32
            && b.max[0] >= r.x0 as f32
            && b.min[1] <= r.y1 as f32
            && b.max[1] >= r.y0 as f32
        {
            out.push(id);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDiff {
    pub differing: usize,
    pub max_channel_error: f32,
    /// Row-major first mismatch.
    pub first_diff: Option<(u32, u32)>,
}

impl ImageDiff {
    pub fn identical(&self) -> bool {
        self.differing == 0
    }
}

/// Exact per-pixel comparison; any bit difference in any channel counts
/// the pixel as differing.
pub fn compare_images(a: &Framebuffer, b: &Framebuffer) -> ImageDiff {
    assert_eq!(
        (a.width, a.height),
        (b.width, b.height),
        "comparing images of different sizes"
    );
    let mut diff = ImageDiff { differing: 0, max_channel_error: 0.0, first_diff: None };
    for y in 0..a.height {
        for x in 0..a.width {
            let pa = a.pixel(x, y);
            let pb = b.pixel(x, y);
            if pa != pb {
                diff.differing += 1;
                if diff.first_diff.is_none() {
                    diff.first_diff = Some((x, y));
                }
                for ch in 0..3 {
                    diff.max_channel_error = diff.max_channel_error.max((pa[ch] - pb[ch]).abs());
                }
            }
        }
    }
    diff
}
