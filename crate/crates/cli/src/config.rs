//! Run configuration shared by every subcommand: which pipeline, which
//! scene, execution knobs, and the verification fault hook.

use anyhow::{anyhow, bail, Context, Result};
use binflow::env::PipeParams;
use binflow::graph::{Diagnostic, PhaseError, PipelineGraph, ProcessDecl};
use binflow::math::{depth_key, diffuse_shade, shader_cost_spin};
use binflow::prim::{Fragment, Primitive};
use binflow::runtime::ExecConfig;
use binflow::scene::{gen_from_spec, load_scene_file, Scene};
use binflow::{build_variant, Overrides, Variant};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Clone, Debug)]
pub enum PipelineSource {
    Variant(Variant),
    File(PathBuf),
}

impl PipelineSource {
    pub fn label(&self) -> String {
        match self {
            PipelineSource::Variant(v) => v.name().to_string(),
            PipelineSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum SceneSource {
    File(PathBuf),
    Proc(String),
}

impl SceneSource {
    pub fn label(&self) -> String {
        match self {
            SceneSource::File(p) => p.display().to_string(),
            SceneSource::Proc(s) => s.clone(),
        }
    }

    pub fn load(&self, screen: (u32, u32)) -> Result<Scene> {
        match self {
            SceneSource::File(p) => {
                load_scene_file(p).with_context(|| format!("loading {}", p.display()))
            }
            SceneSource::Proc(spec) => Ok(gen_from_spec(spec, screen)?),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub source: PipelineSource,
    pub scene: Option<SceneSource>,
    pub screen: (u32, u32),
    pub workers: usize,
    pub overrides: Overrides,
    pub shader_cost: u32,
    pub cycle_cap: u32,
    pub strip_mine: usize,
    /// Negative control: corrupt the depth resolve so verification has
    /// a mismatch to catch.
    pub skew_depth: bool,
}

impl RunConfig {
    pub fn new(source: PipelineSource, screen: (u32, u32)) -> RunConfig {
        RunConfig {
            source,
            scene: None,
            screen,
            workers: 1,
            overrides: Overrides::default(),
            shader_cost: 0,
            cycle_cap: 32,
            strip_mine: 1 << 16,
            skew_depth: false,
        }
    }

    pub fn for_variant(v: Variant, screen: (u32, u32)) -> RunConfig {
        RunConfig::new(PipelineSource::Variant(v), screen)
    }

    /// Builds the stage graph without validating it, so inspection can
    /// report diagnostics instead of failing outright.
    pub fn graph(&self) -> Result<PipelineGraph> {
        if self.screen.0 == 0 || self.screen.1 == 0 {
            bail!("screen {}x{} has a zero extent", self.screen.0, self.screen.1);
        }
        match &self.source {
            PipelineSource::Variant(v) => Ok(build_variant(*v, self.screen, &self.overrides)?),
            PipelineSource::File(p) => {
                let mut g = crate::pipeline_file::load_pipeline_file(p, self.screen)?;
                self.overrides.apply(&mut g)?;
                Ok(g)
            }
        }
    }

    /// Graph with structural diagnostics turned into one error.
    pub fn validated_graph(&self) -> Result<PipelineGraph> {
        let g = self.graph()?;
        let diags = g.validate();
        if !diags.is_empty() {
            let lines: Vec<String> = diags.iter().map(describe_diagnostic).collect();
            bail!("invalid pipeline {}:\n  {}", self.source.label(), lines.join("\n  "));
        }
        Ok(g)
    }

    pub fn load_scene(&self) -> Result<Scene> {
        self.scene
            .as_ref()
            .ok_or_else(|| anyhow!("no scene given (--scene or --proc-scene)"))?
            .load(self.screen)
    }

    pub fn params(&self) -> PipeParams {
        let mut p = PipeParams::new(self.screen);
        p.shader_cost = self.shader_cost;
        p
    }

    pub fn exec(&self) -> ExecConfig {
        ExecConfig {
            workers: self.workers,
            cycle_cap: self.cycle_cap,
            strip_mine: self.strip_mine,
        }
    }
}

pub fn describe_diagnostic(d: &Diagnostic) -> String {
    match d {
        Diagnostic::NoSource => {
            "no source stage: every stage consumes some other stage's output".into()
        }
        Diagnostic::NoDrain => "no drain stage: every stage feeds another stage".into(),
        Diagnostic::EdgeTypeMismatch { from, channel, to } => {
            format!("edge {from}[{channel}] -> {to} carries the wrong primitive kind")
        }
        Diagnostic::UnknownDependencyTarget { stage, target } => {
            format!("stage {stage} waits on unknown stage {target}")
        }
        Diagnostic::DependencyOnSelf { stage } => format!("stage {stage} waits on itself"),
        Diagnostic::BadBinConfig { stage } => {
            format!("stage {stage} has an unusable bin configuration")
        }
        Diagnostic::TileSplitWithoutAll { stage } => {
            format!("stage {stage} sets a tile split without an all-bins schedule")
        }
        Diagnostic::UnconnectedOutputChannel { stage, channel } => {
            format!("stage {stage} output channel {channel} feeds nothing")
        }
    }
}

/// `WxH`, both positive.
pub fn parse_screen(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s.split_once('x').ok_or_else(|| anyhow!("screen {s:?} is not WxH"))?;
    let w: u32 = w.parse().with_context(|| format!("screen width in {s:?}"))?;
    let h: u32 = h.parse().with_context(|| format!("screen height in {s:?}"))?;
    if w == 0 || h == 0 {
        bail!("screen {s:?} has a zero extent");
    }
    Ok((w, h))
}

/// `stage.bin=WxH` (or `stage.bin=full`) and
/// `stage.schedule=KIND[:split]` forms.
pub fn parse_override(s: &str, out: &mut Overrides) -> Result<()> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
    let (stage, field) = key
        .rsplit_once('.')
        .ok_or_else(|| anyhow!("override key {key:?} is not stage.field"))?;
    match field {
        "bin" => {
            let wh = if value == "full" {
                (0, 0)
            } else {
                let (w, h) = value
                    .split_once('x')
                    .ok_or_else(|| anyhow!("bin size {value:?} is not WxH"))?;
                (
                    w.parse().with_context(|| format!("bin width in {value:?}"))?,
                    h.parse().with_context(|| format!("bin height in {value:?}"))?,
                )
            };
            out.bins.push((stage.to_string(), wh));
        }
        "schedule" => {
            let d = crate::pipeline_file::parse_schedule(value)?;
            out.schedules.push((stage.to_string(), d));
        }
        other => bail!("unknown override field {other:?} (bin, schedule)"),
    }
    Ok(())
}

pub fn parse_overrides(list: &[String]) -> Result<Overrides> {
    let mut out = Overrides::default();
    for s in list {
        parse_override(s, &mut out)?;
    }
    Ok(out)
}

fn fragment_of(p: &Primitive) -> Result<&Fragment, PhaseError> {
    match p {
        Primitive::Fragment(f) => Ok(f),
        other => Err(PhaseError::Other(format!("expected fragment, got {:?}", other.kind()))),
    }
}

/// Depth test whose merge key carries a halved depth. The color resolve
/// behind it still looks for the true key, so it can never find its own
/// record and the output visibly rots. Keeps the production process
/// name: the corruption must be invisible to structural reports.
fn skewed_depth_test() -> ProcessDecl {
    ProcessDecl::per_primitive(
        "depth-test",
        Arc::new(|p, ctx, emit| {
            let f = fragment_of(p)?;
            if ctx.env.targets.merge_depth(f.x, f.y, depth_key(f.depth * 0.5, f.prim)) {
                emit(0, p.clone())
            } else {
                Ok(())
            }
        }),
    )
}

/// Whole-bin twin of the skewed depth test for pipelines that resolve
/// depth inside a bin-list pass.
fn skewed_bin_shade() -> ProcessDecl {
    ProcessDecl::per_bin_list(
        "bin-shade",
        Arc::new(|list, ctx, _emit| {
            let t = &ctx.env.targets;
            for p in list {
                let f = fragment_of(p)?;
                t.merge_depth(f.x, f.y, depth_key(f.depth * 0.5, f.prim));
            }
            for p in list {
                let f = fragment_of(p)?;
                if t.depth_key_at(f.x, f.y) == depth_key(f.depth, f.prim) {
                    let spin = shader_cost_spin(ctx.env.params.shader_cost, f.depth);
                    let mut c = diffuse_shade(f.normal);
                    if spin {
                        c[0] += 1.0;
                    }
                    t.store_color(f.x, f.y, c);
                }
            }
            Ok(())
        }),
    )
}

/// Swaps the depth-resolving stage's body for a skewed twin. The stage
/// keeps its name, directives and wiring; only the merge key changes.
pub fn inject_depth_skew(g: &mut PipelineGraph) -> Result<()> {
    let target = g
        .stages()
        .find(|s| s.process.name == "depth-test")
        .map(|s| (s.name.clone(), true))
        .or_else(|| {
            g.stages()
                .find(|s| s.process.name == "bin-shade")
                .map(|s| (s.name.clone(), false))
        });
    let Some((name, per_primitive)) = target else {
        bail!("pipeline has no depth-resolving stage to skew");
    };
    g.stage_mut(&name).unwrap().process =
        if per_primitive { skewed_depth_test() } else { skewed_bin_shade() };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use binflow::graph::ScheduleKind;

    #[test]
    fn screen_strings_parse_and_reject_degenerate_sizes() {
        assert_eq!(parse_screen("1024x768").unwrap(), (1024, 768));
        assert_eq!(parse_screen("1x1").unwrap(), (1, 1));
        assert!(parse_screen("0x5").is_err());
        assert!(parse_screen("axb").is_err());
        assert!(parse_screen("1024").is_err());
    }

    #[test]
    fn override_strings_build_the_stage_tweaks() {
        let o = parse_overrides(&[
            "Rasterize.bin=16x16".to_string(),
            "DepthTest.bin=full".to_string(),
            "VertexShade.schedule=all:512".to_string(),
            "Composite.schedule=serialize".to_string(),
        ])
        .unwrap();
        assert_eq!(o.bins, vec![
            ("Rasterize".to_string(), (16, 16)),
            ("DepthTest".to_string(), (0, 0)),
        ]);
        assert_eq!(o.schedules.len(), 2);
        assert_eq!(o.schedules[0].0, "VertexShade");
        assert_eq!(o.schedules[0].1.kind, ScheduleKind::All);
        assert_eq!(o.schedules[0].1.tile_split_size, Some(512));
        assert_eq!(o.schedules[1].1.kind, ScheduleKind::Serialize);

        assert!(parse_overrides(&["Rasterize.bin".to_string()]).is_err());
        assert!(parse_overrides(&["Rasterize.color=red".to_string()]).is_err());
        assert!(parse_overrides(&["bin=8x8".to_string()]).is_err());
    }

    #[test]
    fn unknown_override_stages_fail_at_graph_build() {
        let mut cfg = RunConfig::for_variant(Variant::Baseline, (64, 64));
        cfg.overrides = parse_overrides(&["Ghost.bin=8x8".to_string()]).unwrap();
        let err = cfg.graph().unwrap_err();
        assert!(format!("{err:#}").contains("Ghost"));
    }

    #[test]
    fn skew_targets_the_depth_test_or_the_bin_shade() {
        let mut g = RunConfig::for_variant(Variant::Baseline, (64, 64)).graph().unwrap();
        inject_depth_skew(&mut g).unwrap();
        assert_eq!(g.stage("DepthTest").unwrap().process.name, "depth-test");

        let mut g = RunConfig::for_variant(Variant::Reyes, (64, 64)).graph().unwrap();
        inject_depth_skew(&mut g).unwrap();
        assert_eq!(g.stage("Shade").unwrap().process.name, "bin-shade");
    }
}
