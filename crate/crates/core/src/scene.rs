//! Cameras, scene containers, file loaders and procedural generators.

use crate::math::snap;
use crate::prim::{InputTri, PatchPrim, Primitive, ScreenTri};
use glam::{DVec3, Mat4, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("patch file holds {0} coordinates, expected a multiple of 48")]
    PatchCount(usize),
    #[error("unknown scene spec {0:?}")]
    BadSpec(String),
}

/// Homogeneous clip transforms below this w are cut at the eye plane.
pub const MIN_W: f32 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub view_proj: Mat4,
}

impl Camera {
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y_deg: f32,
        aspect: f32,
        near: f32,
        far: f32,
    ) -> Camera {
        let proj = Mat4::perspective_rh_gl(fov_y_deg.to_radians(), aspect, near, far);
        let view = Mat4::look_at_rh(eye, target, up);
        Camera { view_proj: proj * view }
    }

    /// Fixed framing shared by every shipped scene: eye on +z looking at
    /// the origin, 60 degree vertical field of view.
    pub fn default_for(screen: (u32, u32)) -> Camera {
        let aspect = screen.0 as f32 / screen.1 as f32;
        Camera::look_at(
            Vec3::new(0.0, 0.0, 3.2),
            Vec3::ZERO,
            Vec3::Y,
            60.0,
            aspect,
            0.1,
            100.0,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScreenVertex {
    pub x: f32,
    pub y: f32,
    pub depth: f32,
    pub inv_w: f32,
}

/// World position to screen pixels, depth mapped to [0, 1]. None when
/// the point is at or behind the eye plane.
pub fn project_vertex(cam: &Camera, screen: (u32, u32), p: Vec3) -> Option<ScreenVertex> {
    let clip = cam.view_proj * p.extend(1.0);
    if !(clip.w > MIN_W) {
        return None;
    }
    let inv_w = 1.0 / clip.w;
    let x = (clip.x * inv_w + 1.0) * 0.5 * screen.0 as f32;
    let y = (1.0 - clip.y * inv_w) * 0.5 * screen.1 as f32;
    let depth = clip.z * inv_w * 0.5 + 0.5;
    if !x.is_finite() || !y.is_finite() || !depth.is_finite() {
        return None;
    }
    Some(ScreenVertex { x, y, depth, inv_w })
}

/// Whole-triangle projection with subpixel snapping. The triangle is
/// culled when any vertex fails the eye-plane test; there is no
/// clipping stage.
pub fn project_triangle(cam: &Camera, screen: (u32, u32), t: &InputTri) -> Option<ScreenTri> {
    let a = project_vertex(cam, screen, t.pos[0])?;
    let b = project_vertex(cam, screen, t.pos[1])?;
    let c = project_vertex(cam, screen, t.pos[2])?;
    Some(ScreenTri {
        pos: [
            [snap(a.x), snap(a.y)],
            [snap(b.x), snap(b.y)],
            [snap(c.x), snap(c.y)],
        ],
        depth: [a.depth, b.depth, c.depth],
        inv_w: [a.inv_w, b.inv_w, c.inv_w],
        normal: t.normal,
        prim: t.prim,
    })
}

/// Projects all sixteen control points of a patch; None when any point
/// fails the eye-plane test.
pub fn project_control_net(
    cam: &Camera,
    screen: (u32, u32),
    ctrl: &[DVec3; 16],
) -> Option<[[f32; 2]; 16]> {
    let mut pts = [[0.0f32; 2]; 16];
    for (i, c) in ctrl.iter().enumerate() {
        let v = project_vertex(cam, screen, c.as_vec3())?;
        pts[i] = [v.x, v.y];
    }
    Some(pts)
}

#[derive(Clone, Debug, Default)]
pub struct TriScene {
    pub tris: Vec<InputTri>,
}

#[derive(Clone, Debug, Default)]
pub struct PatchScene {
    pub patches: Vec<[DVec3; 16]>,
}

#[derive(Clone, Debug)]
pub enum Scene {
    Tris(TriScene),
    Patches(PatchScene),
}

impl Scene {
    pub fn len(&self) -> usize {
        match self {
            Scene::Tris(s) => s.tris.len(),
            Scene::Patches(s) => s.patches.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn primitives(&self) -> Vec<Primitive> {
        match self {
            Scene::Tris(s) => s
                .tris
                .iter()
                .cloned()
                .map(Primitive::Triangle)
                .collect(),
            Scene::Patches(s) => s
                .patches
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    Primitive::Patch(PatchPrim {
                        ctrl: Box::new(*c),
                        uv_min: [0.0, 0.0],
                        uv_max: [1.0, 1.0],
                        depth: 0,
                        prim: i as u32,
                    })
                })
                .collect(),
        }
    }
}

/// Wavefront OBJ subset: v, vn, f with triangulating fans, 1-based or
/// negative indices, v//vn and v/vt/vn references. Faces without vertex
/// normals get their face normal.
pub fn load_obj(text: &str) -> Result<TriScene, SceneError> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut normals: Vec<Vec3> = Vec::new();
    let mut tris = Vec::new();

    let parse_f32 = |tok: &str, line: usize| -> Result<f32, SceneError> {
        tok.parse::<f32>().map_err(|_| SceneError::Parse {
            line,
            msg: format!("bad number {tok:?}"),
        })
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next().unwrap() {
            "v" => {
                let mut c = [0.0f32; 3];
                for v in c.iter_mut() {
                    *v = parse_f32(
                        it.next().ok_or(SceneError::Parse {
                            line: line_no,
                            msg: "vertex needs 3 coordinates".into(),
                        })?,
                        line_no,
                    )?;
                }
                positions.push(Vec3::from_array(c));
            }
            "vn" => {
                let mut c = [0.0f32; 3];
                for v in c.iter_mut() {
                    *v = parse_f32(
                        it.next().ok_or(SceneError::Parse {
                            line: line_no,
                            msg: "normal needs 3 coordinates".into(),
                        })?,
                        line_no,
                    )?;
                }
                normals.push(Vec3::from_array(c));
            }
            "f" => {
                let mut verts: Vec<(Vec3, Option<Vec3>)> = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let vi = parts.next().unwrap_or("");
                    let _vt = parts.next();
                    let ni = parts.next();
                    let resolve = |s: &str, len: usize| -> Result<usize, SceneError> {
                        let i: i64 = s.parse().map_err(|_| SceneError::Parse {
                            line: line_no,
                            msg: format!("bad index {s:?}"),
                        })?;
                        let r = if i < 0 { len as i64 + i } else { i - 1 };
                        if r < 0 || r as usize >= len {
                            return Err(SceneError::Parse {
                                line: line_no,
                                msg: format!("index {i} out of range"),
                            });
                        }
                        Ok(r as usize)
                    };
                    let p = positions[resolve(vi, positions.len())?];
                    let n = match ni {
                        Some(s) if !s.is_empty() => Some(normals[resolve(s, normals.len())?]),
                        _ => None,
                    };
                    verts.push((p, n));
                }
                if verts.len() < 3 {
                    return Err(SceneError::Parse {
                        line: line_no,
                        msg: "face needs at least 3 vertices".into(),
                    });
                }
                for k in 1..verts.len() - 1 {
                    let tri = [verts[0].clone(), verts[k].clone(), verts[k + 1].clone()];
                    let face_n = {
                        let e1 = tri[1].0 - tri[0].0;
                        let e2 = tri[2].0 - tri[0].0;
                        let n = e1.cross(e2);
                        if n.length_squared() > 0.0 { n.normalize() } else { Vec3::Z }
                    };
                    let prim = tris.len() as u32;
                    tris.push(InputTri {
                        pos: [tri[0].0, tri[1].0, tri[2].0],
                        normal: [
                            tri[0].1.unwrap_or(face_n),
                            tri[1].1.unwrap_or(face_n),
                            tri[2].1.unwrap_or(face_n),
                        ],
                        prim,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(TriScene { tris })
}

/// Patch files are whitespace separated coordinate streams, 48 numbers
/// (16 control points) per patch, # comments to end of line.
pub fn load_patches(text: &str) -> Result<PatchScene, SceneError> {
    let mut nums = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            nums.push(tok.parse::<f64>().map_err(|_| SceneError::Parse {
                line: idx + 1,
                msg: format!("bad number {tok:?}"),
            })?);
        }
    }
    if nums.len() % 48 != 0 {
        return Err(SceneError::PatchCount(nums.len()));
    }
    let mut patches = Vec::new();
    for chunk in nums.chunks_exact(48) {
        let mut ctrl = [DVec3::ZERO; 16];
        for (i, p) in chunk.chunks_exact(3).enumerate() {
            ctrl[i] = DVec3::new(p[0], p[1], p[2]);
        }
        patches.push(ctrl);
    }
    Ok(PatchScene { patches })
}

pub fn write_patches(scene: &PatchScene) -> String {
    let mut out = String::new();
    for (i, p) in scene.patches.iter().enumerate() {
        out.push_str(&format!("# patch {i}\n"));
        for row in 0..4 {
            for col in 0..4 {
                let c = p[row * 4 + col];
                out.push_str(&format!("{} {} {}\n", c.x, c.y, c.z));
            }
        }
        out.push('\n');
    }
    out
}

pub fn load_scene_file(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("patch") => Ok(Scene::Patches(load_patches(&text)?)),
        _ => Ok(Scene::Tris(load_obj(&text)?)),
    }
}

/// Two triangles covering a large camera-facing square.
pub fn gen_quad() -> TriScene {
    let h = 1.3f32;
    let p = [
        Vec3::new(-h, -h, 0.0),
        Vec3::new(h, -h, 0.0),
        Vec3::new(h, h, 0.0),
        Vec3::new(-h, h, 0.0),
    ];
    let n = [Vec3::Z; 3];
    TriScene {
        tris: vec![
            InputTri { pos: [p[0], p[1], p[2]], normal: n, prim: 0 },
            InputTri { pos: [p[0], p[2], p[3]], normal: n, prim: 1 },
        ],
    }
}

/// Random triangle soup in a slab around the focal plane. Sizes are
/// requested in approximate on-screen pixels and converted through the
/// default camera's scale at the focal plane.
pub fn gen_soup(n: usize, min_px: f32, max_px: f32, seed: u64, screen: (u32, u32)) -> TriScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px_per_unit = screen.1 as f32 / (2.0 * (30.0f32).to_radians().tan() * 3.2);
    let half_h = 1.7f32;
    let half_w = half_h * screen.0 as f32 / screen.1 as f32;
    let mut tris = Vec::with_capacity(n);
    for i in 0..n {
        let cx = rng.random_range(-half_w..half_w);
        let cy = rng.random_range(-half_h..half_h);
        let cz = rng.random_range(-0.4..0.4f32);
        let size_px = rng.random_range(min_px..=max_px);
        let r = size_px / px_per_unit * 0.5;
        let base = rng.random_range(0.0..std::f32::consts::TAU);
        let mut pos = [Vec3::ZERO; 3];
        for (k, p) in pos.iter_mut().enumerate() {
            let ang = base
                + k as f32 * std::f32::consts::TAU / 3.0
                + rng.random_range(-0.35..0.35f32);
            let rr = r * rng.random_range(0.6..1.0f32);
            *p = Vec3::new(cx + rr * ang.cos(), cy + rr * ang.sin(), cz);
        }
        let normal = Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.3..1.0),
        )
        .normalize();
        tris.push(InputTri { pos, normal: [normal; 3], prim: i as u32 });
    }
    TriScene { tris }
}

/// Grid of gently curved patches tiling the view.
pub fn gen_patch_array(rows: u32, cols: u32) -> PatchScene {
    let half_w = 1.4f64;
    let half_h = 1.05f64;
    let mut patches = Vec::new();
    for gy in 0..rows {
        for gx in 0..cols {
            let mut ctrl = [DVec3::ZERO; 16];
            for r in 0..4 {
                for k in 0..4 {
                    let fx = (gx as f64 + k as f64 / 3.0) / cols as f64;
                    let fy = (gy as f64 + r as f64 / 3.0) / rows as f64;
                    let x = -half_w + 2.0 * half_w * fx;
                    let y = -half_h + 2.0 * half_h * fy;
                    let z = 0.22
                        * (std::f64::consts::PI * 2.0 * fx).sin()
                        * (std::f64::consts::PI * 2.0 * fy).sin();
                    ctrl[r * 4 + k] = DVec3::new(x, y, z);
                }
            }
            patches.push(ctrl);
        }
    }
    PatchScene { patches }
}

/// Body of revolution built from a bezier profile swept through four
/// quarter arcs, k = 0.5522847498 circle approximation. 4 profile
/// segments x 4 arcs = 16 patches.
pub fn gen_teapot() -> PatchScene {
    const K: f64 = 0.552_284_749_8;
    // Profile control points (radius, height), bottom to top, four
    // cubic segments sharing endpoints: foot, belly, shoulder, lid.
    let profile: [[(f64, f64); 4]; 4] = [
        [(0.01, -1.10), (0.45, -1.10), (0.80, -0.95), (0.95, -0.65)],
        [(0.95, -0.65), (1.15, -0.25), (1.15, 0.15), (0.95, 0.45)],
        [(0.95, 0.45), (0.80, 0.62), (0.72, 0.70), (0.70, 0.82)],
        [(0.70, 0.82), (0.45, 0.88), (0.28, 0.92), (0.00, 1.02)],
    ];
    let mut patches = Vec::new();
    for seg in &profile {
        for q in 0..4 {
            let a0 = q as f64 * std::f64::consts::FRAC_PI_2;
            // Quarter arc control points on (cos, sin), z negated so
            // front-facing normals point toward the camera.
            let (c0, s0) = (a0.cos(), a0.sin());
            let (c1, s1) = ((a0 + std::f64::consts::FRAC_PI_2).cos(),
                            (a0 + std::f64::consts::FRAC_PI_2).sin());
            let arc = [
                (c0, s0),
                (c0 - K * s0, s0 + K * c0),
                (c1 + K * s1, s1 - K * c1),
                (c1, s1),
            ];
            let mut ctrl = [DVec3::ZERO; 16];
            for (r, &(rad, y)) in seg.iter().enumerate() {
                for (k, &(ax, az)) in arc.iter().enumerate() {
                    ctrl[r * 4 + k] = DVec3::new(rad * ax, y, -(rad * az));
                }
            }
            patches.push(ctrl);
        }
    }
    PatchScene { patches }
}

/// Grammar: quad | soup:<n>[:<min>..<max>|mixed|small][:<seed>] |
/// patch-array:<r>x<c> | teapot
pub fn gen_from_spec(spec: &str, screen: (u32, u32)) -> Result<Scene, SceneError> {
    let bad = || SceneError::BadSpec(spec.to_string());
    let parts: Vec<&str> = spec.split(':').collect();
    match parts[0] {
        "quad" if parts.len() == 1 => Ok(Scene::Tris(gen_quad())),
        "teapot" if parts.len() == 1 => Ok(Scene::Patches(gen_teapot())),
        "patch-array" if parts.len() == 2 => {
            let (r, c) = parts[1].split_once('x').ok_or_else(bad)?;
            let r: u32 = r.parse().map_err(|_| bad())?;
            let c: u32 = c.parse().map_err(|_| bad())?;
            if r == 0 || c == 0 {
                return Err(bad());
            }
            Ok(Scene::Patches(gen_patch_array(r, c)))
        }
        "soup" if parts.len() >= 2 && parts.len() <= 4 => {
            let n: usize = parts[1].parse().map_err(|_| bad())?;
            let (min_px, max_px) = match parts.get(2).copied().unwrap_or("mixed") {
                "mixed" => (2.0, 260.0),
                "small" => (1.0, 6.0),
                range => {
                    let (a, b) = range.split_once("..").ok_or_else(bad)?;
                    let a: f32 = a.parse().map_err(|_| bad())?;
                    let b: f32 = b.parse().map_err(|_| bad())?;
                    if !(a > 0.0 && b >= a) {
                        return Err(bad());
                    }
                    (a, b)
                }
            };
            let seed: u64 = match parts.get(3) {
                Some(s) => s.parse().map_err(|_| bad())?,
                None => 7,
            };
            Ok(Scene::Tris(gen_soup(n, min_px, max_px, seed, screen)))
        }
        _ => Err(bad()),
    }
}
