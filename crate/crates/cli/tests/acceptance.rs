//! Release gates for the complete system, one test per gate so the
//! harness prints one pass/fail line each. The tests hold the build to
//! exact pixel equality against the sequential references, to the
//! required kernel structures, and to the directional performance
//! properties of the design alternatives.
//!
//! Timing-based gates only run on machines with at least 4 hardware
//! threads; elsewhere they state what they skipped and pass vacuously.
//! When timing gates are active, run this target with --test-threads=1
//! so concurrent tests cannot pollute the medians.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use binflow::graph::{DepRef, PhaseError, ProcessDecl, ScheduleDirective};
use binflow::math::Bbox;
use binflow::oracle::brute_bin_assign;
use binflow::pipelines::{dice_process, round_robin_assign, split_process, synthetic};
use binflow::prim::Micropolygon;
use binflow::runtime::{ExecConfig, RunStats};
use binflow::scene::gen_from_spec;
use binflow::synthesis::{synthesize, EntrySync, KernelMapping};
use binflow::{
    build_variant, render, BinConfig, BinGrid, Overrides, PipelineGraph, PipeParams, Primitive,
    PrimitiveKind, ScheduleKind, StageDecl, Variant,
};
use binflow_cli::{cmd_verify, RunConfig, SceneSource};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hw_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Full-resolution raster scene set with strip-mine bounds sized so the
/// widest intermediate (fragments of the 10k mixed soup) stays within a
/// few hundred megabytes.
const RASTER_SCENES: [(&str, usize); 3] =
    [("quad", 1 << 16), ("soup:10000:mixed", 1024), ("soup:100000:small", 8192)];

fn verify_proc(v: Variant, scene: &str, screen: (u32, u32), strip: usize) -> binflow_cli::commands::VerifyReport {
    let mut cfg = RunConfig::for_variant(v, screen);
    cfg.scene = Some(SceneSource::Proc(scene.to_string()));
    cfg.strip_mine = strip;
    cmd_verify(&cfg).expect("verification run failed")
}

#[test]
fn c1_raster_variants_match_the_reference_on_every_scene() {
    let start = Instant::now();
    for v in Variant::RASTER {
        for (scene, strip) in RASTER_SCENES {
            let r = verify_proc(v, scene, (1024, 768), strip);
            assert_eq!(r.pixels.differing, 0, "{} on {scene}: {}", v.name(), r.summary());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("15 verifications at 1024x768, all identical, {elapsed:.1}s");
    // The ten-minute budget presumes 8 hardware threads; below that the
    // wall time is reported but not enforced.
    if hw_threads() >= 8 {
        assert!(elapsed < 600.0, "suite took {elapsed:.0}s, budget is 600s");
    } else {
        println!("wall budget not enforced: {} hardware thread(s), budget assumes 8", hw_threads());
    }
}

#[test]
fn c2_subdivision_renderer_is_bit_exact_and_the_split_loop_terminates() {
    for scene in ["teapot", "patch-array:4x4"] {
        let r = verify_proc(Variant::Reyes, scene, (1024, 768), 1 << 16);
        assert_eq!(r.pixels.differing, 0, "{scene}: {}", r.summary());
        assert!(!r.stats.loops.is_empty(), "{scene}: no loop ran");
        for l in &r.stats.loops {
            assert!(
                (1..=32).contains(&l.iterations),
                "{scene}: loop {:?} ran {} rounds",
                l.stages,
                l.iterations
            );
        }
        println!("{scene}: identical, split loop closed in {} rounds", r.stats.loops[0].iterations);
    }
}

fn mapping_of(v: Variant) -> KernelMapping {
    let g = build_variant(v, (1024, 768), &Overrides::default()).unwrap();
    synthesize(&g).unwrap().0
}

#[test]
fn c3_synthesis_produces_the_required_kernel_structures() {
    assert_eq!(mapping_of(Variant::Freepipe).kernels.len(), 1, "freepipe kernel count");
    assert_eq!(mapping_of(Variant::Baseline).kernels.len(), 5, "baseline kernel count");

    let fused = mapping_of(Variant::BinnedFused);
    let rast = fused.pipeline.id_of("Rasterize").unwrap();
    let fs = fused.pipeline.id_of("FragmentShade").unwrap();
    assert_eq!(fused.kernel_of[rast], fused.kernel_of[fs], "rasterize and fragment-shade kernels");
    assert!(fused.wire(rast, 0).unwrap().fused, "rasterize wire must bypass the store");

    // A whole-stage wait forces a machine-wide barrier and keeps the
    // pair in separate kernels.
    let stall = synthesize(&synthetic::whole_stage_wait_pair((64, 64))).unwrap().0;
    let gen = stall.pipeline.id_of("Gen").unwrap();
    let sink = stall.pipeline.id_of("Sink").unwrap();
    assert_ne!(stall.kernel_of[gen], stall.kernel_of[sink], "whole-stage wait must block fusion");
    assert_eq!(stall.kernels[stall.kernel_of[sink]].entry_sync, EntrySync::GlobalBarrier);

    // A per-bin wait on unsplit bins fuses, carrying the wait inside
    // the shared kernel.
    let sealed = synthesize(&synthetic::per_bin_wait_pair((64, 64))).unwrap().0;
    let gen = sealed.pipeline.id_of("Gen").unwrap();
    let seal = sealed.pipeline.id_of("Seal").unwrap();
    assert_eq!(sealed.kernel_of[gen], sealed.kernel_of[seal], "per-bin wait must fuse");
    assert!(
        sealed.kernels[sealed.kernel_of[seal]].bin_sync_before.contains(&seal),
        "fused kernel must keep the per-bin wait"
    );
    println!("freepipe 1 kernel, baseline 5, fusion and barriers placed as required");
}

#[test]
fn c4_stage_ordering_is_topologically_sound() {
    // The gated branch's shading stage runs strictly after the whole
    // branch it waits on.
    let m = synthesize(&synthetic::shadow_graph((256, 256))).unwrap().0;
    let entry = |n: &str| m.schedule.entry_of(m.pipeline.id_of(n).unwrap()).unwrap();
    for n in ["ShadowGeom", "ShadowMap"] {
        assert!(entry(n) < entry("MainShade"), "{n} scheduled at or after MainShade");
    }

    for seed in 0..1000u64 {
        let m = synthesize(&synthetic::random_dag(seed)).unwrap().0;
        let (p, s) = (&m.pipeline, &m.schedule);
        let mut seen = vec![0usize; p.len()];
        for e in &s.entries {
            for &st in e.stages() {
                seen[st] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "seed {seed}: stages scheduled {seen:?} times");
        for u in 0..p.len() {
            for &t in p.out_edges[u].iter().flatten() {
                assert!(
                    s.entry_of(u).unwrap() <= s.entry_of(t).unwrap(),
                    "seed {seed}: edge {u}->{t} runs backwards"
                );
            }
        }
        for j in 0..p.len() {
            for d in &p.deps[j] {
                if let DepRef::EndStage(t) = *d {
                    assert!(
                        s.entry_of(t).unwrap() <= s.entry_of(j).unwrap(),
                        "seed {seed}: wait target {t} ordered after {j}"
                    );
                }
            }
        }
    }
    println!("shadow branch ordered first; 1000 random graphs sound");
}

/// Every counter pair that must balance when nothing is lost and
/// nothing runs twice.
fn assert_conservation(label: &str, workers: usize, stats: &RunStats) {
    for k in &stats.kernels {
        assert_eq!(
            k.units_generated, k.units_completed,
            "{label} w{workers}: kernel {:?} lost work units",
            k.stages
        );
    }
    for s in &stats.stages {
        assert_eq!(
            s.consumed_store, s.appended,
            "{label} w{workers}: stage {} stored {} but processed {}",
            s.name, s.appended, s.consumed_store
        );
    }

    let idx = |name: &str| stats.stages.iter().position(|s| s.name == name).unwrap();
    let n = stats.stages.len();
    let mut inflow_store = vec![0u64; n];
    let mut in_wires = vec![0usize; n];
    let mut out_wires = vec![0usize; n];
    let mut fused_in: Vec<Option<usize>> = vec![None; n];
    for w in &stats.wires {
        let (from, to) = (idx(&w.from), idx(&w.to));
        in_wires[to] += 1;
        out_wires[from] += 1;
        if w.fused {
            fused_in[to] = Some(from);
        } else {
            inflow_store[to] += w.primitives;
        }
    }
    for (i, s) in stats.stages.iter().enumerate() {
        if in_wires[i] == 0 {
            // Sources are fed by injection, one append per input
            // primitive into the stage's own store.
            assert_eq!(
                s.appended, stats.injected,
                "{label} w{workers}: source {} dropped injected primitives",
                s.name
            );
        } else if fused_in[i].is_none() {
            assert_eq!(
                s.appended, inflow_store[i],
                "{label} w{workers}: stage {} lost store crossings",
                s.name
            );
        } else if let Some(from) = fused_in[i] {
            // Single-channel producers hand every emit straight to the
            // fused consumer.
            if in_wires[i] == 1 && out_wires[from] == 1 {
                assert_eq!(
                    s.consumed_fused, stats.stages[from].emitted,
                    "{label} w{workers}: fused handoff {} -> {} lost primitives",
                    stats.stages[from].name, s.name
                );
            }
        }
    }
}

#[test]
fn c5_worker_count_never_changes_the_image_and_counters_balance() {
    let screen = (512, 384);
    let scene = gen_from_spec("soup:1000:mixed", screen).unwrap();
    let input = scene.primitives();
    let params = PipeParams::new(screen);
    for v in Variant::RASTER {
        let g = build_variant(v, screen, &Overrides::default()).unwrap();
        let mut first: Option<Vec<[u32; 3]>> = None;
        for workers in [1usize, 2, 4, 8] {
            let cfg = ExecConfig { workers, strip_mine: 1024, ..ExecConfig::default() };
            let out = render(&g, &input, params, &cfg).unwrap();
            let bits: Vec<[u32; 3]> =
                out.image().pixels.iter().map(|p| p.map(f32::to_bits)).collect();
            match &first {
                None => first = Some(bits),
                Some(want) => {
                    assert_eq!(want, &bits, "{}: workers={workers} changed the image", v.name())
                }
            }
            assert_conservation(v.name(), workers, &out.stats);
        }
        println!("{}: workers 1/2/4/8 byte-identical, counters balanced", v.name());
    }
}

fn random_box(rng: &mut ChaCha8Rng, screen: (u32, u32)) -> Bbox {
    let w = screen.0 as f32;
    let h = screen.1 as f32;
    // Boxes overhang every screen edge and often land exactly on bin
    // boundaries, where closed-interval overlap is easiest to get
    // wrong.
    let x0 = (rng.random_range(-1.2..1.2f32) * w * 0.5 + w * 0.5).round()
        + rng.random_range(-0.5..0.5f32);
    let y0 = (rng.random_range(-1.2..1.2f32) * h * 0.5 + h * 0.5).round()
        + rng.random_range(-0.5..0.5f32);
    Bbox {
        min: [x0, y0],
        max: [x0 + rng.random_range(0.0..w * 0.4), y0 + rng.random_range(0.0..h * 0.4)],
    }
}

#[test]
fn c6_bounding_box_bin_assignment_matches_brute_force() {
    let screen = (1024u32, 768u32);
    let mut rng = ChaCha8Rng::seed_from_u64(0xb1b0);
    for (gx, gy) in [(1u32, 1u32), (8, 8), (32, 32), (128, 96)] {
        let cfg = if (gx, gy) == (1, 1) {
            BinConfig::full_screen()
        } else {
            BinConfig::tiles(screen.0 / gx, screen.1 / gy)
        };
        let grid = BinGrid::new(&cfg, screen);
        assert_eq!((grid.nx, grid.ny), (gx, gy));
        let mut fast = Vec::new();
        for _ in 0..1000 {
            let b = random_box(&mut rng, screen);
            grid.bins_for_bbox(&b, &mut fast);
            assert_eq!(fast, brute_bin_assign(&b, &grid), "box {b:?} on {gx}x{gy} grid");
        }
        println!("{gx}x{gy} grid: 1000 boxes, 0 mismatches");
    }
}

fn traffic_of(v: Variant) -> (u64, u64) {
    let screen = (512, 384);
    let scene = gen_from_spec("soup:2000:mixed", screen).unwrap();
    let g = build_variant(v, screen, &Overrides::default()).unwrap();
    let cfg = ExecConfig { strip_mine: 1024, ..ExecConfig::default() };
    let out = render(&g, &scene.primitives(), PipeParams::new(screen), &cfg).unwrap();
    let store: u64 =
        out.stats.wires.iter().filter(|w| !w.fused).map(|w| w.primitives).sum();
    let fused: u64 = out.stats.stages.iter().map(|s| s.consumed_fused).sum();
    (store, fused)
}

#[test]
fn c7_fused_pipeline_moves_data_without_the_bin_store() {
    let (base_store, _) = traffic_of(Variant::Baseline);
    let (free_store, free_fused) = traffic_of(Variant::Freepipe);
    assert!(base_store > 0, "unfused pipeline crossed no stores");
    assert_eq!(free_store, 0, "fully fused pipeline touched a bin store");
    assert!(free_fused > 0, "fully fused pipeline handed nothing over");
    println!("store crossings: baseline {base_store}, freepipe {free_store} ({free_fused} fused handoffs)");
}

fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

fn timed_render(g: &PipelineGraph, input: &[Primitive], params: PipeParams, cfg: &ExecConfig) -> f64 {
    let t = Instant::now();
    render(g, input, params, cfg).unwrap();
    t.elapsed().as_secs_f64() * 1e3
}

/// Timing comparisons are only meaningful with real hardware
/// parallelism; below 4 threads this gate reports the skip and holds
/// vacuously.
#[test]
fn c7_parallel_timing_follows_the_design_tradeoffs() {
    let hw = hw_threads();
    if hw < 4 {
        println!("skipped timing comparisons: {hw} hardware thread(s) available, need 4");
        return;
    }
    let screen = (1024, 768);
    let scene = gen_from_spec("soup:10000:mixed", screen).unwrap();
    let input = scene.primitives();
    let workers = hw.min(8);
    let cfg = ExecConfig { workers, strip_mine: 1024, ..ExecConfig::default() };
    let reps = 3;

    // Load-balanced tiles against everything serialized through one
    // full-screen bin.
    let binned = build_variant(Variant::Binned, screen, &Overrides::default()).unwrap();
    let serial_overrides = Overrides {
        bins: Vec::new(),
        schedules: ["VertexShade", "Rasterize", "FragmentShade", "DepthTest", "Composite"]
            .iter()
            .map(|n| (n.to_string(), ScheduleDirective::of(ScheduleKind::Serialize)))
            .collect(),
    };
    let serial = build_variant(Variant::Baseline, screen, &serial_overrides).unwrap();
    let params = PipeParams::new(screen);
    let mut tb: Vec<f64> = (0..reps).map(|_| timed_render(&binned, &input, params, &cfg)).collect();
    let mut ts: Vec<f64> = (0..reps).map(|_| timed_render(&serial, &input, params, &cfg)).collect();
    let speedup = median_ms(&mut ts) / median_ms(&mut tb);
    println!("load-balanced tiles vs serialized full-screen bin: {speedup:.2}x on {workers} workers");
    assert!(speedup >= 1.2, "expected at least 1.2x, measured {speedup:.2}x");

    // Raising per-fragment shading cost must flip which organization is
    // fastest somewhere in the sweep.
    let free = build_variant(Variant::Freepipe, screen, &Overrides::default()).unwrap();
    let mut fastest = Vec::new();
    for k in [0u32, 64, 512] {
        let mut params = PipeParams::new(screen);
        params.shader_cost = k;
        let mut tf: Vec<f64> =
            (0..reps).map(|_| timed_render(&free, &input, params, &cfg)).collect();
        let mut tb: Vec<f64> =
            (0..reps).map(|_| timed_render(&binned, &input, params, &cfg)).collect();
        let f = median_ms(&mut tf);
        let b = median_ms(&mut tb);
        fastest.push(if f <= b { "freepipe" } else { "binned" });
        println!("shader cost {k}: freepipe {f:.0} ms, binned {b:.0} ms");
    }
    assert!(
        fastest.windows(2).any(|w| w[0] != w[1]),
        "fastest organization never changed across the cost sweep: {fastest:?}"
    );
}

#[test]
fn c8_diced_micropolygons_stay_subpixel_scale() {
    let screen = (1024, 768);
    let captured: Arc<Mutex<Vec<Micropolygon>>> = Arc::default();
    let sink = captured.clone();
    let collect = ProcessDecl::per_primitive(
        "collect-quads",
        Arc::new(move |p, _ctx, _emit| {
            let Primitive::Micropolygon(m) = p else {
                return Err(PhaseError::Other(format!(
                    "expected a micropolygon, got {:?}",
                    p.kind()
                )));
            };
            sink.lock().unwrap().push(m.clone());
            Ok(())
        }),
    );

    // The production split and dice stages, drained into the collector
    // instead of the sampler.
    let mut g = PipelineGraph::new(screen);
    g.add_stage(
        StageDecl::new(
            "Split",
            PrimitiveKind::Patch,
            vec![PrimitiveKind::Patch, PrimitiveKind::Patch],
            split_process(),
        )
        .assign(round_robin_assign()),
    )
    .unwrap();
    g.add_stage(
        StageDecl::new("Dice", PrimitiveKind::Patch, vec![PrimitiveKind::Micropolygon], dice_process())
            .assign(round_robin_assign()),
    )
    .unwrap();
    g.add_stage(StageDecl::new("Collect", PrimitiveKind::Micropolygon, vec![], collect)).unwrap();
    g.connect("Split", 0, "Split").unwrap();
    g.connect("Split", 1, "Dice").unwrap();
    g.connect("Dice", 0, "Collect").unwrap();

    let scene = gen_from_spec("teapot", screen).unwrap();
    let params = PipeParams::new(screen);
    assert_eq!(params.dice_rate_px, 1.0);
    render(&g, &scene.primitives(), params, &ExecConfig::default()).unwrap();

    let quads = captured.lock().unwrap();
    assert!(!quads.is_empty(), "dicing produced nothing");
    let mut max_extent = 0.0f32;
    for m in quads.iter() {
        max_extent = max_extent.max(Bbox::of_points(m.corner).unwrap().longer_side());
    }
    assert!(
        max_extent <= 1.5,
        "largest of {} micropolygons spans {max_extent:.3} px",
        quads.len()
    );
    println!("{} micropolygons, max extent {max_extent:.3} px", quads.len());
}
