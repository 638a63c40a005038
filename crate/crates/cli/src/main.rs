mod config;
mod model_io;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gs4c::codec::{read_container, unpack, write_container};
use gs4c::frames::{CamerasFile, FrameSet, CAMERAS_FILE};
use gs4c::model::{load_ply, save_ply, CameraFrame, GaussianCloud};
use gs4c::pipeline::{run, PipelineOutput, Preset, StageReport};
use gs4c::splat::{psnr, render, render_view, save_png, save_raw, RenderOptions};
use gs4c::synth::{generate, MotionPreset};
use gs4c::{Error, Result};
use serde::Serialize;

use model_io::{load_model, mlp_sidecar};

#[derive(Parser)]
#[command(name = "gs4c", version, about = "Compress 4D Gaussian splatting scenes")]
struct Cli {
    /// Pipeline or scene configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model size: L, M, S or T.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Inputs {
    /// Pretrained model (PLY). Defaults to the synthetic ground truth.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Frames directory with cameras.json.
    #[arg(long, conflicts_with = "synth")]
    frames: Option<PathBuf>,
    /// Synthetic scene spec (TOML) used instead of a frames directory.
    #[arg(long)]
    synth: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write a container.
    Compress {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, short)]
        out: PathBuf,
        /// Write a PLY and JSON sidecar after every milestone.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Decode a container into a PLY (plus `.mlp` when colors are predicted).
    Decompress { input: PathBuf, out: PathBuf },
    /// Render a model from every camera and timestamp of a frames directory.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Also dump planar f32 images.
        #[arg(long)]
        raw: bool,
    },
    /// PSNR of a model against a frames directory, as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene: frames plus `truth.ply`.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        motion: Option<MotionPreset>,
        #[arg(long)]
        gaussians: Option<usize>,
        #[arg(long = "frame-count")]
        frame_count: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compress under several presets and emit size/quality CSV.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', default_value = "L,M,S,T")]
        presets: Vec<Preset>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Render { source, .. } => exit_code(source),
        Error::Config(_) => 2,
        Error::Io { .. } | Error::InvalidFrame(_) | Error::Format(_) | Error::MissingProperty(_) => 3,
        Error::Divergence { .. } => 4,
        e if e.is_container_damage() => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Compress {
            inputs,
            out,
            checkpoints,
        } => {
            let mut cfg = config::pipeline_config(cli.config.as_deref(), cli.preset, cli.seed)?;
            if checkpoints.is_some() {
                cfg.checkpoint_dir.clone_from(checkpoints);
            }
            let (cloud, frames) = load_inputs(cli, inputs)?;
            for p in [inputs.input.as_deref(), cli.config.as_deref()].into_iter().flatten() {
                if same_file(p, out) {
                    return Err(Error::Config(format!("refusing to overwrite input {}", p.display())));
                }
            }
            let stdout = std::io::stdout();
            let result = run(&cloud, &frames, &cfg, &mut |r: &StageReport| {
                let mut lock = stdout.lock();
                let _ = writeln!(lock, "{}", serde_json::to_string(r).unwrap_or_default());
            })?;
            write_container(out, &result.model)?;
            let end = final_report(&result);
            println!(
                "PSNR {:.3} dB  Gaussians {}  Storage {:.6} MB",
                end.psnr,
                end.gaussians,
                end.size_mb.unwrap_or(0.0)
            );
            Ok(())
        }
        Command::Decompress { input, out } => {
            let parts = unpack(&read_container(input)?)?;
            let cloud: GaussianCloud<f64> = parts.to_cloud()?;
            save_ply(&cloud, out)?;
            if let Some(app) = &parts.appearance {
                let path = mlp_sidecar(out);
                std::fs::write(&path, app.to_bytes()).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Render { model, frames, out, raw } => {
            let m = load_model(model)?;
            let meta = read_cameras(frames)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (f, &t) in meta.timestamps.iter().enumerate() {
                for (c, cam) in meta.cameras.iter().enumerate() {
                    let img = render_view(&m.cloud, cam, t, m.appearance.as_ref(), &RenderOptions::default())?.image;
                    let stem = format!("f{f:04}_c{c:02}");
                    save_png(&img, &out.join(format!("{stem}.png")))?;
                    if *raw {
                        save_raw(&img, &out.join(format!("{stem}.f32")))?;
                    }
                }
            }
            Ok(())
        }
        Command::Eval { model, frames, out } => {
            let m = load_model(model)?;
            let set = FrameSet::<f64>::load(frames)?;
            let report = evaluate(&m.cloud, m.appearance.as_ref(), &set)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
            match out {
                Some(p) => std::fs::write(p, json).map_err(|e| Error::io(p, e))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Synth {
            out,
            motion,
            gaussians,
            frame_count,
            cameras,
            size,
        } => {
            let mut spec = config::synth_spec(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            if let Some(m) = motion {
                spec.motion = *m;
            }
            if let Some(n) = gaussians {
                spec.gaussian_count = *n;
            }
            if let Some(n) = frame_count {
                spec.frame_count = *n;
            }
            if let Some(n) = cameras {
                spec.camera_count = *n;
            }
            if let Some(n) = size {
                (spec.width, spec.height) = (*n, *n);
            }
            let scene = generate(&spec)?;
            scene.frames.save(out)?;
            save_ply(&scene.truth, out.join("truth.ply"))?;
            Ok(())
        }
        Command::Sweep { inputs, presets, out } => {
            let (cloud, frames) = load_inputs(cli, inputs)?;
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
                None => Box::new(std::io::stdout()),
            };
            let mut w = csv::Writer::from_writer(sink);
            let io = |e: csv::Error| Error::io(out.clone().unwrap_or_else(|| "stdout".into()), e.into());
            w.write_record(["preset", "size_mb", "psnr", "count"]).map_err(io)?;
            for &p in presets {
                let cfg = config::pipeline_config(cli.config.as_deref(), Some(p), cli.seed)?;
                let result = run(&cloud, &frames, &cfg, &mut |_| {})?;
                let end = final_report(&result);
                w.serialize((
                    format!("{p:?}"),
                    end.size_mb.unwrap_or(0.0),
                    end.psnr,
                    end.gaussians,
                ))
                .map_err(io)?;
                w.flush().map_err(|e| Error::io("stdout", e))?;
            }
            Ok(())
        }
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn final_report(out: &PipelineOutput<f64>) -> &StageReport {
    out.reports.last().expect("pipeline always reports its end")
}

fn read_cameras(dir: &Path) -> Result<CamerasFile> {
    let path = dir.join(CAMERAS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_inputs(cli: &Cli, inputs: &Inputs) -> Result<(GaussianCloud<f64>, Vec<CameraFrame<f64>>)> {
    let (truth, frames) = match (&inputs.frames, &inputs.synth) {
        (Some(dir), None) => (None, FrameSet::<f64>::load(dir)?.frames),
        (None, Some(spec)) => {
            let mut spec = config::synth_spec(Some(spec))?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let scene = generate(&spec)?;
            (Some(scene.truth), scene.frames.frames)
        }
        _ => return Err(Error::Config("pass either --frames or --synth".into())),
    };
    let cloud = match (&inputs.input, truth) {
        (Some(p), _) => load_ply(p)?,
        (None, Some(t)) => t,
        (None, None) => return Err(Error::Config("--input is required with --frames".into())),
    };
    Ok((cloud, frames))
}

#[derive(Serialize)]
struct FramePsnr {
    frame: usize,
    camera: usize,
    timestamp: f64,
    psnr: f64,
}

#[derive(Serialize)]
struct EvalReport {
    gaussians: usize,
    mean_psnr: f64,
    frames: Vec<FramePsnr>,
}

fn evaluate(
    cloud: &GaussianCloud<f64>,
    app: Option<&gs4c::appearance::AppearanceModel<f64>>,
    set: &FrameSet<f64>,
) -> Result<EvalReport> {
    let nc = set.cameras.len();
    let mut frames = Vec::with_capacity(set.frames.len());
    for (i, fr) in set.frames.iter().enumerate() {
        let img = render(cloud, fr, app)
            .map_err(|e| Error::Render {
                frame: i,
                source: Box::new(e),
            })?
            .image;
        frames.push(FramePsnr {
            frame: i / nc,
            camera: i % nc,
            timestamp: fr.timestamp,
            psnr: psnr(&img, &fr.image),
        });
    }
    let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / frames.len().max(1) as f64;
    Ok(EvalReport {
        gaussians: cloud.len(),
        mean_psnr,
        frames,
    })
}
