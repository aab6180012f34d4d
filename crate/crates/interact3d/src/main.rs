use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use interact3d::checkpoint::load_network;
use interact3d::io::{load_split, read_depth, read_image, serialize_sample, write_png};
use interact3d::network::{Network, NetworkConfig};
use interact3d::predict::{predict, render_interaction, DepthSource, RenderParams};
use interact3d::service::{serve, AppState, Model};
use interact3d::trainer::{evaluate_split, train, RunConfig};
use interact3d_core::datamodel::QueryPoint;
use interact3d_core::renderer::MotionKind;
use interact3d_core::synthgen::generate_split;

/// Environment variable naming the checkpoint, overriding `--checkpoint`.
const CHECKPOINT_ENV: &str = "I3D_CHECKPOINT";

#[derive(Parser)]
#[command(name = "interact3d", version, about = "Predict how objects at query points can be moved")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Rotation,
    Translation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic annotated scenes into OUT/SPLIT.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Defaults to 0, 1 and 2 for train, val and test so splits differ.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train on DATA/train, validating on DATA/val when present.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON run config with optional `train`, `loss` and `network` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from OUT/last.safetensors.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split directory; prints a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict for query points on an image; prints the response JSON.
    Predict {
        #[arg(long)]
        image: PathBuf,
        /// Normalized `x,y`; repeat for more points.
        #[arg(long = "point", required = true, value_parser = parse_point)]
        points: Vec<QueryPoint>,
        /// Without one (and without I3D_CHECKPOINT) an untrained model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        include_depth: bool,
    },
    /// Animate the part under a point into numbered PNG frames and a manifest.
    RenderInteraction {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = parse_point)]
        point: QueryPoint,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metric depth as a float `.npy` at image resolution.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 45.0)]
        max_angle: f64,
        #[arg(long, default_value_t = 0.3)]
        max_offset: f64,
        /// Comma-separated angles in degrees, replacing the sweep.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        angles: Option<Vec<f64>>,
        /// Render this motion instead of the predicted one.
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_point(s: &str) -> Result<QueryPoint, String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = QueryPoint::new(
        x.trim().parse().map_err(|e| format!("x: {e}"))?,
        y.trim().parse().map_err(|e| format!("y: {e}"))?,
    );
    p.validate("point").map_err(|e| e.to_string())?;
    Ok(p)
}

fn checkpoint_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from).or(flag)
}

/// The checkpointed network, or an untrained default one.
fn network(flag: Option<PathBuf>) -> Result<(Network, String)> {
    match checkpoint_path(flag) {
        Some(p) => load_network(&p).with_context(|| format!("loading {}", p.display())),
        None => {
            log::warn!("no checkpoint given; using an untrained model");
            Ok((Network::new(&NetworkConfig::default())?, "untrained".to_string()))
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, n, seed, split } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            let seed = seed.unwrap_or(split as u64);
            let dir = out.join(split.name());
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for g in generate_split(n, seed)? {
                serialize_sample(&dir, &g.sample)?;
            }
            eprintln!("wrote {n} samples to {}", dir.display());
        }
        Command::Train { data, out, config, epochs, resume } => {
            let mut run = match config {
                Some(p) => RunConfig::from_file(&p)?,
                None => RunConfig::default(),
            };
            if let Some(e) = epochs {
                run.train.epochs = e;
            }
            run.validate()?;
            let trainer = train(&data, &out, &run, resume)?;
            eprintln!("trained {} epochs; checkpoints in {}", trainer.epoch, out.display());
        }
        Command::Eval { data, checkpoint } => {
            let (net, _) = network(checkpoint)?;
            let report = evaluate_split(&net, load_split(&data)?, 2)?;
            eprintln!("{}", report.table());
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict { image, points, checkpoint, include_depth } => {
            let (net, id) = network(checkpoint)?;
            let img = read_image(&image)?;
            let response = predict(&net, &img, &points, &id, include_depth)?;
            println!("{}", serde_json::to_string(&response)?);
        }
        Command::RenderInteraction { image, point, checkpoint, out, depth, frames, max_angle, max_offset, angles, kind } => {
            let (net, _) = network(checkpoint)?;
            let img = read_image(&image)?;
            let depth = match depth {
                Some(p) => DepthSource::Metric(read_depth(&p, img.width(), img.height())?.map(|&d| d as f64)),
                None => DepthSource::Predicted,
            };
            let params = RenderParams {
                frames,
                max_angle_deg: max_angle,
                max_offset,
                angles_deg: angles,
                offsets: None,
                kind: kind.map(|k| match k {
                    Kind::Rotation => MotionKind::Rotation,
                    Kind::Translation => MotionKind::Translation,
                }),
            };
            let clip = render_interaction(&net, &img, point, depth, &params, |i| format!("frame_{i:03}.png"))?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (entry, frame) in clip.manifest.frames.iter().zip(&clip.frames) {
                write_png(&out.join(&entry.file), frame)?;
            }
            write_json(&out.join("manifest.json"), &clip.manifest)?;
            eprintln!("wrote {} frames to {}", clip.frames.len(), out.display());
        }
        Command::Serve { port, host, checkpoint } => {
            let model = match checkpoint_path(checkpoint) {
                Some(p) => Some(Model::load(&p).with_context(|| format!("loading {}", p.display()))?),
                None => {
                    log::warn!("no checkpoint given; serving in degraded mode");
                    None
                }
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(AppState::new(model), SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
