//! Shared state a running pipeline reads and writes: fixed parameters,
//! atomic render targets and event counters.

use crate::math::{depth_key_prim, DEPTH_KEY_EMPTY};
use crate::scene::Camera;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

#[derive(Clone, Copy, Debug)]
pub struct PipeParams {
    pub screen: (u32, u32),
    pub camera: Camera,
    pub background: [f32; 3],
    /// Patches whose projected control net exceeds this get split.
    pub split_threshold_px: f32,
    /// Target micropolygon extent in pixels.
    pub dice_rate_px: f32,
    /// Forced dice below this subdivision depth.
    pub split_depth_cap: u32,
    /// Extra transcendental iterations per shaded fragment.
    pub shader_cost: u32,
}

impl PipeParams {
    pub fn new(screen: (u32, u32)) -> PipeParams {
        PipeParams {
            screen,
            camera: Camera::default_for(screen),
            background: [0.08, 0.09, 0.11],
            split_threshold_px: 16.0,
            dice_rate_px: 1.0,
            split_depth_cap: 32,
            shader_cost: 0,
        }
    }
}

/// Depth is one packed (depth, prim) key per pixel resolved by compare
/// and swap min, color is three planes of f32 bits. Writers only store
/// a color after winning the depth resolve, so the final color at a
/// pixel belongs to its final depth key.
pub struct Targets {
    pub width: u32,
    pub height: u32,
    depth: Vec<AtomicU64>,
    color: Vec<[AtomicU32; 3]>,
}

impl Targets {
    pub fn new(screen: (u32, u32)) -> Targets {
        let n = (screen.0 * screen.1) as usize;
        Targets {
            width: screen.0,
            height: screen.1,
            depth: (0..n).map(|_| AtomicU64::new(DEPTH_KEY_EMPTY)).collect(),
            color: (0..n).map(|_| [AtomicU32::new(0), AtomicU32::new(0), AtomicU32::new(0)]).collect(),
        }
    }

    fn slot(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) as usize
    }

    /// Monotone min merge. True iff the key took the pixel.
    pub fn merge_depth(&self, x: u32, y: u32, key: u64) -> bool {
        let slot = &self.depth[self.slot(x, y)];
        let mut cur = slot.load(Ordering::Acquire);
        while key < cur {
            match slot.compare_exchange_weak(cur, key, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return true,
                Err(seen) => cur = seen,
            }
        }
        false
    }

    pub fn depth_key_at(&self, x: u32, y: u32) -> u64 {
        self.depth[self.slot(x, y)].load(Ordering::Acquire)
    }

    pub fn store_color(&self, x: u32, y: u32, c: [f32; 3]) {
        let px = &self.color[self.slot(x, y)];
        px[0].store(c[0].to_bits(), Ordering::Relaxed);
        px[1].store(c[1].to_bits(), Ordering::Relaxed);
        px[2].store(c[2].to_bits(), Ordering::Relaxed);
    }

    pub fn snapshot(&self, background: [f32; 3]) -> Framebuffer {
        let mut pixels = Vec::with_capacity(self.depth.len());
        for i in 0..self.depth.len() {
            if self.depth[i].load(Ordering::Acquire) == DEPTH_KEY_EMPTY {
                pixels.push(background);
            } else {
                let px = &self.color[i];
                pixels.push([
                    f32::from_bits(px[0].load(Ordering::Relaxed)),
                    f32::from_bits(px[1].load(Ordering::Relaxed)),
                    f32::from_bits(px[2].load(Ordering::Relaxed)),
                ]);
            }
        }
        Framebuffer { width: self.width, height: self.height, pixels }
    }

    /// Ids of the primitives currently winning each pixel, empty pixels
    /// excluded. Diagnostic helper.
    pub fn winner_histogram(&self) -> std::collections::BTreeMap<u32, u64> {
        let mut h = std::collections::BTreeMap::new();
        for d in &self.depth {
            let k = d.load(Ordering::Relaxed);
            if k != DEPTH_KEY_EMPTY {
                *h.entry(depth_key_prim(k)).or_insert(0) += 1;
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Framebuffer {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 3]>,
}

impl Framebuffer {
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        self.pixels[(y * self.width + x) as usize]
    }
}

#[derive(Default)]
pub struct PipeMarks {
    /// Patches diced at the subdivision depth cap while still over the
    /// split threshold.
    pub forced_dice: AtomicU64,
    /// Primitives dropped at the eye plane.
    pub culled: AtomicU64,
}

pub struct RunEnv {
    pub params: PipeParams,
    pub targets: Targets,
    pub marks: PipeMarks,
}

impl RunEnv {
    pub fn new(params: PipeParams) -> RunEnv {
        RunEnv {
            targets: Targets::new(params.screen),
            marks: PipeMarks::default(),
            params,
        }
    }
}
