//! Bicubic Bezier patch evaluation, subdivision and screen-extent
//! measures. Evaluation runs in f64 so split and dice agree with the
//! reference renderer to well below raster precision.
//!
//! Control points are stored row major: index = row * 4 + col, u runs
//! along columns, v along rows.

use glam::DVec3;

pub fn eval_curve(c: [DVec3; 4], t: f64) -> DVec3 {
    let a = c[0].lerp(c[1], t);
    let b = c[1].lerp(c[2], t);
    let d = c[2].lerp(c[3], t);
    let ab = a.lerp(b, t);
    let bd = b.lerp(d, t);
    ab.lerp(bd, t)
}

pub fn split_curve(c: [DVec3; 4], t: f64) -> ([DVec3; 4], [DVec3; 4]) {
    let a = c[0].lerp(c[1], t);
    let b = c[1].lerp(c[2], t);
    let d = c[2].lerp(c[3], t);
    let ab = a.lerp(b, t);
    let bd = b.lerp(d, t);
    let m = ab.lerp(bd, t);
    ([c[0], a, ab, m], [m, bd, d, c[3]])
}

fn curve_deriv(c: [DVec3; 4], t: f64) -> DVec3 {
    let d0 = (c[1] - c[0]) * 3.0;
    let d1 = (c[2] - c[1]) * 3.0;
    let d2 = (c[3] - c[2]) * 3.0;
    let a = d0.lerp(d1, t);
    let b = d1.lerp(d2, t);
    a.lerp(b, t)
}

fn row(c: &[DVec3; 16], r: usize) -> [DVec3; 4] {
    [c[r * 4], c[r * 4 + 1], c[r * 4 + 2], c[r * 4 + 3]]
}

fn col(c: &[DVec3; 16], k: usize) -> [DVec3; 4] {
    [c[k], c[4 + k], c[8 + k], c[12 + k]]
}

pub fn eval_patch(c: &[DVec3; 16], u: f64, v: f64) -> DVec3 {
    let curve = [
        eval_curve(row(c, 0), u),
        eval_curve(row(c, 1), u),
        eval_curve(row(c, 2), u),
        eval_curve(row(c, 3), u),
    ];
    eval_curve(curve, v)
}

pub fn patch_partials(c: &[DVec3; 16], u: f64, v: f64) -> (DVec3, DVec3) {
    let u_curve = [
        eval_curve(col(c, 0), v),
        eval_curve(col(c, 1), v),
        eval_curve(col(c, 2), v),
        eval_curve(col(c, 3), v),
    ];
    let du = curve_deriv(u_curve, u);
    let v_curve = [
        eval_curve(row(c, 0), u),
        eval_curve(row(c, 1), u),
        eval_curve(row(c, 2), u),
        eval_curve(row(c, 3), u),
    ];
    let dv = curve_deriv(v_curve, v);
    (du, dv)
}

/// Surface normal from the cross of the parametric tangents. Degenerate
/// spots (collapsed patch edges at poles) retry slightly inside the
/// parameter square before giving up on a fixed axis.
pub fn patch_normal(c: &[DVec3; 16], u: f64, v: f64) -> DVec3 {
    const EPS: f64 = 1e-12;
    let (du, dv) = patch_partials(c, u, v);
    let n = du.cross(dv);
    if n.length_squared() > EPS {
        return n.normalize();
    }
    let ui = u * 0.998 + 0.001;
    let vi = v * 0.998 + 0.001;
    let (du, dv) = patch_partials(c, ui, vi);
    let n = du.cross(dv);
    if n.length_squared() > EPS {
        n.normalize()
    } else {
        DVec3::Z
    }
}

pub fn split_patch_u(c: &[DVec3; 16]) -> ([DVec3; 16], [DVec3; 16]) {
    let mut lo = [DVec3::ZERO; 16];
    let mut hi = [DVec3::ZERO; 16];
    for r in 0..4 {
        let (a, b) = split_curve(row(c, r), 0.5);
        for k in 0..4 {
            lo[r * 4 + k] = a[k];
            hi[r * 4 + k] = b[k];
        }
    }
    (lo, hi)
}

pub fn split_patch_v(c: &[DVec3; 16]) -> ([DVec3; 16], [DVec3; 16]) {
    let mut lo = [DVec3::ZERO; 16];
    let mut hi = [DVec3::ZERO; 16];
    for k in 0..4 {
        let (a, b) = split_curve(col(c, k), 0.5);
        for r in 0..4 {
            lo[r * 4 + k] = a[r];
            hi[r * 4 + k] = b[r];
        }
    }
    (lo, hi)
}

/// Control-polygon chord lengths of projected control points, the
/// longest row chord (u direction) and column chord (v direction) in
/// pixels. Chord length bounds arc length, so these drive the
/// split-axis choice.
pub fn chord_extents(p: &[[f32; 2]; 16]) -> (f32, f32) {
    let dist = |a: [f32; 2], b: [f32; 2]| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let mut u_ext = 0.0f32;
    for r in 0..4 {
        let mut len = 0.0;
        for k in 0..3 {
            len += dist(p[r * 4 + k], p[r * 4 + k + 1]);
        }
        u_ext = u_ext.max(len);
    }
    let mut v_ext = 0.0f32;
    for k in 0..4 {
        let mut len = 0.0;
        for r in 0..3 {
            len += dist(p[r * 4 + k], p[(r + 1) * 4 + k]);
        }
        v_ext = v_ext.max(len);
    }
    (u_ext, v_ext)
}

/// Screen extent that sizes the dicing grid: the largest per-axis
/// control-polygon travel, accumulated over both parameter directions.
/// A uniform n-grid sized by this keeps every cell's screen bounding
/// box near extent/n even when the projected u and v directions shear
/// toward each other, where the dominant chord length alone
/// underestimates cell bounding boxes by up to 2x. For an axis-aligned
/// patch the off-axis travel is zero and this reduces to the dominant
/// chord length.
pub fn dice_extent(p: &[[f32; 2]; 16]) -> f32 {
    let mut axis = [0.0f32; 2];
    for (c, ext) in axis.iter_mut().enumerate() {
        let mut along_u = 0.0f32;
        for r in 0..4 {
            let mut sum = 0.0;
            for k in 0..3 {
                sum += (p[r * 4 + k + 1][c] - p[r * 4 + k][c]).abs();
            }
            along_u = along_u.max(sum);
        }
        let mut along_v = 0.0f32;
        for k in 0..4 {
            let mut sum = 0.0;
            for r in 0..3 {
                sum += (p[(r + 1) * 4 + k][c] - p[r * 4 + k][c]).abs();
            }
            along_v = along_v.max(sum);
        }
        *ext = along_u + along_v;
    }
    axis[0].max(axis[1])
}

/// Tessellation resolution for a patch of the given screen extent:
/// grid cells of at most `rate` pixels along the dominant direction,
/// at least one cell.
pub fn dice_grid_size(extent: f32, rate: f32) -> u32 {
    (extent / rate).ceil().max(1.0) as u32
}

/// Fixed association mean of a quad cell's corner depths.
pub fn quad_mean(d: [f32; 4]) -> f32 {
    ((d[0] + d[1]) + (d[2] + d[3])) * 0.25
}

pub fn quad_mean_vec3(n: [glam::Vec3; 4]) -> glam::Vec3 {
    ((n[0] + n[1]) + (n[2] + n[3])) * 0.25
}
