//! Command line front end over the pipeline framework: inspect stage
//! graphs, render scenes, check output against the reference renderers,
//! and time the shipped configurations.

pub mod commands;
pub mod config;
pub mod pipeline_file;
pub mod ppm;

pub use commands::{cmd_bench, cmd_inspect, cmd_render, cmd_verify};
pub use config::{
    parse_overrides, parse_screen, PipelineSource, RunConfig, SceneSource,
};

use anyhow::{bail, Context, Result};
use binflow::scene::Scene;
use binflow::Variant;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "binflow", version, about = "Programmable binned rendering pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug)]
pub struct SourceArgs {
    /// Built-in pipeline: baseline, freepipe, binned, binned-fused,
    /// deferred, reyes.
    #[arg(long)]
    pub variant: Option<String>,
    /// Pipeline description file instead of a built-in variant.
    #[arg(long, conflicts_with = "variant")]
    pub pipeline_file: Option<PathBuf>,
}

impl SourceArgs {
    pub fn resolve(&self) -> Result<PipelineSource> {
        match (&self.variant, &self.pipeline_file) {
            (Some(v), None) => Ok(PipelineSource::Variant(v.parse::<Variant>()?)),
            (None, Some(p)) => Ok(PipelineSource::File(p.clone())),
            _ => bail!("exactly one of --variant or --pipeline-file is required"),
        }
    }
}

#[derive(Args, Debug)]
pub struct BenchSourceArgs {
    /// Built-in pipeline to time; repeatable.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Pipeline description file to time alongside the variants.
    #[arg(long)]
    pub pipeline_file: Option<PathBuf>,
}

impl BenchSourceArgs {
    /// Explicit requests, or the full matching variant set for the
    /// scene's primitive kind.
    pub fn resolve(&self, scene: &Scene) -> Result<Vec<PipelineSource>> {
        let mut out = Vec::new();
        for v in &self.variants {
            out.push(PipelineSource::Variant(v.parse::<Variant>()?));
        }
        if let Some(p) = &self.pipeline_file {
            out.push(PipelineSource::File(p.clone()));
        }
        if out.is_empty() {
            out = match scene {
                Scene::Tris(_) => {
                    Variant::RASTER.iter().map(|&v| PipelineSource::Variant(v)).collect()
                }
                Scene::Patches(_) => vec![PipelineSource::Variant(Variant::Reyes)],
            };
        }
        Ok(out)
    }
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    /// Scene file: .obj triangles or .patch control meshes.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Procedural scene: quad, soup:<n>[:mixed|small|MIN..MAX][:seed],
    /// patch-array:RxC, teapot.
    #[arg(long, conflicts_with = "scene")]
    pub proc_scene: Option<String>,
}

impl SceneArgs {
    pub fn resolve(&self) -> Option<SceneSource> {
        match (&self.scene, &self.proc_scene) {
            (Some(p), None) => Some(SceneSource::File(p.clone())),
            (None, Some(s)) => Some(SceneSource::Proc(s.clone())),
            _ => None,
        }
    }
}

#[derive(Args, Debug)]
pub struct ExecArgs {
    /// Render target size, WxH pixels.
    #[arg(long, default_value = "1024x768")]
    pub screen: String,
    /// Worker threads for pipeline execution.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Stage directive override: stage.bin=WxH or
    /// stage.schedule=KIND[:split]. Repeatable.
    #[arg(long = "override", value_name = "STAGE.FIELD=VALUE")]
    pub overrides: Vec<String>,
    /// Extra shading iterations per fragment.
    #[arg(long, default_value_t = 0)]
    pub shader_cost: u32,
    /// Sweep limit for feedback loops.
    #[arg(long, default_value_t = 32)]
    pub cycle_cap: u32,
    /// Input injection batch size.
    #[arg(long, default_value_t = 65536)]
    pub strip_mine: usize,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Print the analyzed structure and kernel plan of a pipeline.
    Inspect {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Render a scene to a binary pixmap plus a stats document.
    Render {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        exec: ExecArgs,
        /// Image output path.
        #[arg(long, default_value = "render.ppm")]
        out: PathBuf,
        /// Machine-readable run statistics path.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Render and compare against the matching reference renderer.
    Verify {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        exec: ExecArgs,
        #[arg(long, hide = true)]
        skew_depth: bool,
    },
    /// Time pipeline configurations over one scene.
    Bench {
        #[command(flatten)]
        source: BenchSourceArgs,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        exec: ExecArgs,
        /// Runs per configuration; medians are reported.
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        /// Machine-readable report path; defaults to stdout.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
}

fn make_config(
    source: PipelineSource,
    scene: Option<SceneSource>,
    exec: &ExecArgs,
) -> Result<RunConfig> {
    Ok(RunConfig {
        source,
        scene,
        screen: parse_screen(&exec.screen)?,
        workers: exec.workers,
        overrides: parse_overrides(&exec.overrides)?,
        shader_cost: exec.shader_cost,
        cycle_cap: exec.cycle_cap,
        strip_mine: exec.strip_mine,
        skew_depth: false,
    })
}

/// Returns the process exit code. Zero on success; verification
/// mismatches exit nonzero without being an error.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Inspect { source, exec } => {
            let cfg = make_config(source.resolve()?, None, &exec)?;
            print!("{}", cmd_inspect(&cfg)?);
            Ok(0)
        }
        Cmd::Render { source, scene, exec, out, stats } => {
            let cfg = make_config(source.resolve()?, scene.resolve(), &exec)?;
            let res = cmd_render(&cfg)?;
            let image = res.out.image();
            ppm::write(&out, &image)?;
            if let Some(path) = &stats {
                std::fs::write(path, res.out.stats.to_json())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "{}: {}x{} -> {} ({} kernels, {:.3} ms)",
                res.label,
                image.width,
                image.height,
                out.display(),
                res.out.stats.kernels.len(),
                res.out.stats.total_wall_ms
            );
            Ok(0)
        }
        Cmd::Verify { source, scene, exec, skew_depth } => {
            let mut cfg = make_config(source.resolve()?, scene.resolve(), &exec)?;
            cfg.skew_depth = skew_depth;
            let rep = cmd_verify(&cfg)?;
            println!("{}", rep.summary());
            Ok(if rep.passed() { 0 } else { 1 })
        }
        Cmd::Bench { source, scene, exec, repeat, stats } => {
            let scene_src = scene.resolve();
            let screen = parse_screen(&exec.screen)?;
            let loaded = match &scene_src {
                Some(s) => s.load(screen)?,
                None => bail!("no scene given (--scene or --proc-scene)"),
            };
            let sources = source.resolve(&loaded)?;
            let cfg = make_config(sources[0].clone(), scene_src, &exec)?;
            let rep = cmd_bench(&cfg, &sources, repeat)?;
            print!("{rep}");
            match &stats {
                Some(path) => std::fs::write(path, rep.to_json())
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{}", rep.to_json()),
            }
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_into_a_run_config() {
        let cli = Cli::try_parse_from([
            "binflow",
            "verify",
            "--variant",
            "binned",
            "--proc-scene",
            "soup:100:mixed:3",
            "--screen",
            "640x480",
            "--workers",
            "4",
            "--override",
            "Rasterize.bin=16x16",
            "--override",
            "VertexShade.schedule=all:512",
            "--shader-cost",
            "64",
            "--cycle-cap",
            "12",
            "--strip-mine",
            "1024",
        ])
        .unwrap();
        let Cmd::Verify { source, scene, exec, skew_depth } = cli.cmd else {
            panic!("wrong subcommand");
        };
        assert!(!skew_depth);
        let cfg = make_config(source.resolve().unwrap(), scene.resolve(), &exec).unwrap();
        assert_eq!(cfg.screen, (640, 480));
        assert_eq!(cfg.workers, 4);
        assert_eq!(cfg.shader_cost, 64);
        assert_eq!(cfg.cycle_cap, 12);
        assert_eq!(cfg.strip_mine, 1024);
        assert_eq!(cfg.overrides.bins.len(), 1);
        assert_eq!(cfg.overrides.schedules.len(), 1);
        assert!(matches!(cfg.source, PipelineSource::Variant(Variant::Binned)));
        assert!(matches!(cfg.scene, Some(SceneSource::Proc(_))));
    }

    #[test]
    fn variant_and_pipeline_file_conflict() {
        assert!(Cli::try_parse_from([
            "binflow",
            "inspect",
            "--variant",
            "baseline",
            "--pipeline-file",
            "p.toml",
        ])
        .is_err());
        let cli = Cli::try_parse_from(["binflow", "inspect", "--variant", "baseline"]).unwrap();
        let Cmd::Inspect { source, .. } = cli.cmd else { panic!() };
        assert!(source.resolve().is_ok());
    }

    #[test]
    fn the_negative_control_flag_is_accepted() {
        let cli = Cli::try_parse_from([
            "binflow",
            "verify",
            "--variant",
            "baseline",
            "--proc-scene",
            "quad",
            "--skew-depth",
        ])
        .unwrap();
        let Cmd::Verify { skew_depth, .. } = cli.cmd else { panic!() };
        assert!(skew_depth);
    }

    #[test]
    fn bench_accepts_repeated_variants() {
        let cli = Cli::try_parse_from([
            "binflow",
            "bench",
            "--variant",
            "baseline",
            "--variant",
            "freepipe",
            "--proc-scene",
            "quad",
            "--repeat",
            "3",
        ])
        .unwrap();
        let Cmd::Bench { source, repeat, .. } = cli.cmd else { panic!() };
        assert_eq!(source.variants, vec!["baseline", "freepipe"]);
        assert_eq!(repeat, 3);
    }

    #[test]
    fn missing_source_is_a_clear_error() {
        let cli = Cli::try_parse_from(["binflow", "inspect"]).unwrap();
        let Cmd::Inspect { source, .. } = cli.cmd else { panic!() };
        let err = source.resolve().unwrap_err();
        assert!(err.to_string().contains("--variant"));
    }
}
