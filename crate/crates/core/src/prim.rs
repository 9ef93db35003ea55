//! Work items flowing between pipeline stages.

use crate::math::{Bbox, SUBPIXEL_ONE};
use glam::{DVec3, Vec3};

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize)]
pub enum PrimitiveKind {
    Triangle,
    ScreenTriangle,
    Fragment,
    Patch,
    Micropolygon,
    Token,
}

/// World-space triangle with per-vertex normals.
#[derive(Clone, Debug)]
pub struct InputTri {
    pub pos: [Vec3; 3],
    pub normal: [Vec3; 3],
    pub prim: u32,
}

/// Projected triangle, positions in subpixel fixed point.
#[derive(Clone, Debug)]
pub struct ScreenTri {
    pub pos: [[i64; 2]; 3],
    pub depth: [f32; 3],
    pub inv_w: [f32; 3],
    pub normal: [Vec3; 3],
    pub prim: u32,
}

#[derive(Clone, Debug)]
pub struct Fragment {
    pub x: u32,
    pub y: u32,
    pub depth: f32,
    pub normal: Vec3,
    pub color: [f32; 3],
    pub prim: u32,
}

/// Bicubic patch over a parameter subrectangle of its source patch.
/// Control points stay in f64 so repeated subdivision is stable.
#[derive(Clone, Debug)]
pub struct PatchPrim {
    pub ctrl: Box<[DVec3; 16]>,
    pub uv_min: [f64; 2],
    pub uv_max: [f64; 2],
    pub depth: u32,
    pub prim: u32,
}

/// Quad cell of a diced grid. Corners in perimeter order
/// c00, c10, c11, c01, screen pixels.
#[derive(Clone, Debug)]
pub struct Micropolygon {
    pub corner: [[f32; 2]; 4],
    pub depth: f32,
    pub normal: Vec3,
    pub prim: u32,
}

/// Synthetic payload for structural test pipelines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub payload: u64,
    pub hops: u32,
}

#[derive(Clone, Debug)]
pub enum Primitive {
    Triangle(InputTri),
    ScreenTriangle(ScreenTri),
    Fragment(Fragment),
    Patch(PatchPrim),
    Micropolygon(Micropolygon),
    Token(Token),
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Triangle(_) => PrimitiveKind::Triangle,
            Primitive::ScreenTriangle(_) => PrimitiveKind::ScreenTriangle,
            Primitive::Fragment(_) => PrimitiveKind::Fragment,
            Primitive::Patch(_) => PrimitiveKind::Patch,
            Primitive::Micropolygon(_) => PrimitiveKind::Micropolygon,
            Primitive::Token(_) => PrimitiveKind::Token,
        }
    }

    /// Screen-space bbox for spatial bin assignment. Fragments assign by
    /// their pixel center so each lands in exactly one bin. Primitives
    /// without intrinsic screen geometry have none.
    pub fn screen_bbox(&self) -> Option<Bbox> {
        match self {
            Primitive::ScreenTriangle(t) => {
                let inv = 1.0 / SUBPIXEL_ONE as f32;
                Bbox::of_points(t.pos.iter().map(|p| [p[0] as f32 * inv, p[1] as f32 * inv]))
            }
            Primitive::Fragment(f) => {
                Some(Bbox::point(f.x as f32 + 0.5, f.y as f32 + 0.5))
            }
            Primitive::Micropolygon(m) => Bbox::of_points(m.corner.iter().copied()),
            _ => None,
        }
    }

    pub fn prim_id(&self) -> u32 {
        match self {
            Primitive::Triangle(t) => t.prim,
            Primitive::ScreenTriangle(t) => t.prim,
            Primitive::Fragment(f) => f.prim,
            Primitive::Patch(p) => p.prim,
            Primitive::Micropolygon(m) => m.prim,
            Primitive::Token(t) => t.id,
        }
    }
}
