use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use lcec::geometry::{rotation_error, translation_error, Frame, RigidTransform};
use lcec::io::dataset::{read_extrinsics, read_intrinsics, Manifest, ManifestEntry, MANIFEST_FILE};
use lcec::io::synthetic::{write_synthetic_scene, RandomSceneConfig};
use lcec::io::{generate_synthetic, load_dataset, read_pcd, SceneSpec};
use lcec::pipeline::{calibrate, evaluate_scenes, CalibConfig, EvaluationReport, SceneOutcome};
use lcec::pnp::PnpConfig;

use crate::provider::ProviderSettings;
use crate::server::{self, ServerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lcec", version, about = "Target-free LiDAR-camera extrinsic calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate one cloud/image pair.
    Calibrate(CalibrateArgs),
    /// Calibrate every scene of a dataset and summarize the errors.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service for the calibration UI.
    Serve(ServeArgs),
    /// Write a synthetic dataset with exact ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[command(flatten)]
    pub provider: ProviderSettings,
    #[arg(long, default_value_t = 1)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ground-truth extrinsics (4x4 row-major) for error metrics.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Initial virtual camera pose (4x4 row-major) instead of the canonical one.
    #[arg(long)]
    pub initial_pose: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[command(flatten)]
    pub provider: ProviderSettings,
    #[arg(long, default_value_t = 1)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Segmentation service used by sessions that bring no masks.
    #[arg(long)]
    pub remote_url: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    pub remote_timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 12)]
    pub max_objects: usize,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let out = match cli.command {
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Serve(a) => cmd_serve(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match out {
        Ok(()) => EXIT_OK,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            code
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn failed(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FAILED,
        message: message.into(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn config(iterations: usize, seed: u64) -> Result<CalibConfig, Failure> {
    if iterations == 0 {
        return Err(usage("--iterations must be at least 1"));
    }
    Ok(CalibConfig {
        max_iters: iterations,
        pnp: PnpConfig {
            seed,
            ..PnpConfig::default()
        },
        ..CalibConfig::default()
    })
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), Failure> {
    require_file(&a.cloud, "point cloud")?;
    require_file(&a.image, "image")?;
    require_file(&a.intrinsics, "intrinsics")?;
    let image = image::open(&a.image)
        .map_err(|e| usage(format!("{}: {e}", a.image.display())))?
        .to_rgb8();
    let k = read_intrinsics(&a.intrinsics, image.width(), image.height()).map_err(|e| usage(e.to_string()))?;
    let cloud = read_pcd(&a.cloud).map_err(|e| usage(format!("{}: {e}", a.cloud.display())))?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| read_extrinsics(p).map_err(|e| usage(e.to_string())))
        .transpose()?;
    let mut cfg = config(a.iterations, a.seed)?;
    if let Some(p) = &a.initial_pose {
        let pose = read_extrinsics(p).map_err(|e| usage(e.to_string()))?;
        cfg.initial_pose = Some(pose.relabel(Frame::Lidar, Frame::Virtual));
    }
    let scene_dir = a.cloud.parent().unwrap_or(Path::new("."));
    let provider = a
        .provider
        .build(scene_dir)
        .map_err(|e| usage(format!("cannot set up the mask provider: {e}")))?;

    let result = calibrate(&cloud, &image, &k, provider.as_ref(), &cfg)
        .map_err(|e| failed(format!("{}: {e}", e.kind())))?;
    let mut report = result.report();
    if let Some(t) = &truth {
        report = report.with_truth(&result.final_pose, t);
    }
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()).map_err(|e| failed(format!("{}: {e}", out.display())))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let dataset = load_dataset(&a.root).map_err(|e| failed(format!("LayoutError: {e}")))?;
    let cfg = config(a.iterations, a.seed)?;
    let root = dataset.root.clone();
    let mut report = evaluate_scenes(&dataset.scenes, |s| a.provider.build(&root.join(&s.scene_id)), &cfg);
    if !dataset.warnings.is_empty() {
        let mut outcomes = report.outcomes;
        outcomes.extend(dataset.warnings.iter().map(|w| SceneOutcome {
            scene_id: w.scene_id.clone(),
            subset: "unreadable".into(),
            rotation_error_deg: None,
            translation_error_m: None,
            epsilon: None,
            iterations: None,
            error: Some(w.reason.clone()),
        }));
        report = EvaluationReport::from_outcomes(outcomes);
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()).map_err(|e| failed(format!("{}: {e}", out.display())))?;
    }
    for f in report.failures() {
        eprintln!("failed: {} ({})", f.scene_id, f.error.as_deref().unwrap_or(""));
    }
    if report.aggregate.scenes == report.aggregate.failures {
        return Err(failed("no scene calibrated successfully"));
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), Failure> {
    if a.scenes == 0 || a.min_objects < 3 || a.min_objects > a.max_objects {
        return Err(usage("need --scenes >= 1 and 3 <= --min-objects <= --max-objects"));
    }
    let cfg = RandomSceneConfig {
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        ..RandomSceneConfig::default()
    };
    fs::create_dir_all(&a.out).map_err(|e| failed(format!("{}: {e}", a.out.display())))?;
    let mut manifest = Manifest::default();
    for i in 0..a.scenes {
        let seed = a.seed + i as u64;
        let spec = SceneSpec::random_with(seed, &cfg);
        let mut scene = generate_synthetic(&spec, seed).map_err(|e| failed(e.to_string()))?;
        scene.pair.scene_id = format!("scene_{i:03}");
        write_synthetic_scene(&a.out, &scene).map_err(|e| failed(e.to_string()))?;
        manifest.scenes.push(ManifestEntry {
            id: scene.pair.scene_id.clone(),
            subset: Some("synthetic".into()),
        });
    }
    manifest
        .write(&a.out.join(MANIFEST_FILE))
        .map_err(|e| failed(e.to_string()))?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), Failure> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad address: {e}")))?;
    let cfg = ServerConfig {
        default_remote: a
            .remote_url
            .clone()
            .map(|u| ProviderSettings::remote(u, Duration::from_millis(a.remote_timeout_ms))),
        ..ServerConfig::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| failed(e.to_string()))?;
    rt.block_on(server::serve(addr, cfg)).map_err(|e| failed(e.to_string()))
}

/// e_r in degrees and e_t in metres.
pub fn errors(estimated: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    (
        rotation_error(estimated, truth).to_degrees(),
        translation_error(estimated, truth),
    )
}
