use std::fs;
use std::io::{BufReader, BufWriter};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use voxavatar::config::{parse_override, BodyConfig, RunConfig};
use voxavatar::gradcheck::run_suite;
use voxavatar::guidance::wire::{echo_target_handler, serve};
use voxavatar::guidance::{point_mass_eps, sample_noise, ExternalOracle, GuidanceOracle, NoiseQuery};
use voxavatar::image_io::{save_gray8_png, save_rgb8_png, ImageRgb};
use voxavatar::mesh_export::{bake_colors, export, marching_cubes, MeshFormat, DEFAULT_ISO};
use voxavatar::optimize::{framing_radius, train_coarse, turntable_cameras, Guidance};
use voxavatar::raster::{rasterize_condition, Camera};
use voxavatar::renderer::{render, RenderSettings};
use voxavatar::schedule::FocusTargets;
use voxavatar::voxel_field::VoxelField;
use voxavatar::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DEGRADED: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

/// Pose-conditioned avatar generation on voxel radiance fields.
///
/// Exit codes: 0 ok, 1 usage or input error, 2 degraded run, 3 internal error.
#[derive(Parser, Debug)]
#[command(name = "voxavatar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the coarse optimization and write snapshots, report and final field.
    Generate {
        /// TOML run configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted-key overrides such as `--smooth.lambda=0` or `--plan.none`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Render evenly spaced azimuths of a saved field to PNG frames.
    Turntable {
        field: PathBuf,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 15.0)]
        elevation: f64,
        /// Camera distance; framed to the field bounds when omitted.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 45.0)]
        fov: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract an iso-surface with baked vertex colors (.obj or .ply).
    ExportMesh {
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Activated density level of the surface.
        #[arg(long, default_value_t = DEFAULT_ISO)]
        iso: f64,
    },
    /// Rasterize the part-label condition image of a posed body.
    RenderCondition {
        /// JSON pose file; the default A-pose when omitted.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Body template JSON; the built-in template when omitted.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 40.0)]
        a_pose_deg: f64,
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        #[arg(long, default_value_t = 0.0)]
        elevation: f64,
        /// Camera distance; 2 for the full body, the middle of the region's
        /// close-up range with `--focus`.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 45.0)]
        fov: f64,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        /// Aim at a focus region (head, left_hand, torso, ...) instead of the body center.
        #[arg(long)]
        focus: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of the renderer and smoothness adjoints and the
    /// brute-force rasterizer comparison.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Round-trip the external-oracle wire protocol against an in-process server.
    ServeSelftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::GuidanceUnavailable(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<u8, Failure>;

fn generate(config: Option<PathBuf>, out: Option<PathBuf>, overrides: Vec<String>) -> CmdResult {
    let pairs: Vec<(String, Option<String>)> = overrides
        .iter()
        .map(|a| {
            if !a.starts_with("--") {
                return Err(Failure::Usage(format!("override `{a}` must look like --key=value")));
            }
            Ok(parse_override(a))
        })
        .collect::<Result<_, _>>()?;
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path, &pairs)?,
        None => RunConfig::from_toml_str("", &pairs)?,
    };
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let guidance = Guidance::from_config(&cfg.guidance)?;
    let (field, report) = train_coarse(cfg, guidance, Some(&dir))?;
    field.save(&dir.join("final.vxf"))?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    println!(
        "{} iterations, {} skipped, {} rejected, final grid {:?}; wrote {}",
        report.iterations,
        report.skipped,
        report.rejected,
        report.final_dims,
        dir.join("final.vxf").display()
    );
    if report.degraded {
        eprintln!("degraded run: guidance was skipped on more than 10% of iterations");
        return Ok(EXIT_DEGRADED);
    }
    Ok(0)
}

fn turntable(field: &Path, views: usize, resolution: usize, elevation: f64, radius: Option<f64>, fov: f64, out: &Path) -> CmdResult {
    if views == 0 || resolution == 0 {
        return Err(Failure::Usage("views and resolution must be positive".into()));
    }
    let field = VoxelField::load(field)?;
    let radius = radius.unwrap_or_else(|| framing_radius(&field.bounds, fov));
    fs::create_dir_all(out)?;
    let settings = RenderSettings::default();
    for (i, cam) in turntable_cameras(views, radius, elevation, field.bounds.center(), resolution, fov).iter().enumerate() {
        render(&field, cam, &settings)?.rgb.save_png(&out.join(format!("frame_{i:03}.png")))?;
    }
    println!("wrote {views} frames to {}", out.display());
    Ok(0)
}

fn export_mesh(field: &Path, out: &Path, iso: f64) -> CmdResult {
    let format = MeshFormat::from_path(out)?;
    let field = VoxelField::load(field)?;
    let mut mesh = marching_cubes(&field, iso)?;
    bake_colors(&mut mesh, &field);
    export(&mesh, out, format)?;
    println!("{} vertices, {} faces -> {}", mesh.vertices.len(), mesh.faces.len(), out.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn render_condition(
    pose: Option<PathBuf>,
    template: Option<PathBuf>,
    a_pose_deg: f64,
    camera: (f64, f64, Option<f64>, f64, usize),
    focus: Option<String>,
    out: &Path,
) -> CmdResult {
    let body_cfg = BodyConfig { template, pose_file: pose, a_pose_deg, ..Default::default() };
    let tpl = body_cfg.template()?;
    let (beta, xi) = body_cfg.params()?;
    let body = tpl.pose(&beta, &xi)?;
    let (target, distance) = match focus {
        None => {
            let (lo, hi) = body.bbox().ok_or_else(|| Failure::Usage("empty body".into()))?;
            ((lo + hi) / 2.0, 2.0)
        }
        Some(name) => {
            let targets = FocusTargets::default();
            let region = targets
                .regions
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| Failure::Usage(format!("unknown focus region `{name}`")))?;
            let (near, far) = targets.regions[region].distance;
            (targets.centroid(region, &body.joints), (near + far) / 2.0)
        }
    };
    let (azimuth, elevation, radius, fov_y, res) = camera;
    let radius = radius.unwrap_or(distance);
    let cam = Camera { radius, azimuth, elevation, target, fov_y, width: res, height: res };
    let img = rasterize_condition(&body, &tpl.face_part_labels, &cam)?;
    fs::create_dir_all(out)?;
    save_gray8_png(&out.join("labels.png"), img.width, img.height, &img.labels)?;
    save_rgb8_png(&out.join("condition.png"), img.width, img.height, &img.rgb)?;
    let covered = img.labels.iter().filter(|&&l| l != 0).count();
    println!("{covered} labeled pixels; wrote {}", out.display());
    Ok(0)
}

fn gradcheck(seed: u64, json: bool) -> CmdResult {
    let reports = run_suite(seed)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&reports).map_err(|e| Failure::Internal(e.to_string()))?);
    } else {
        for r in &reports {
            println!("{}", r.summary());
        }
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", reports.len());
        return Ok(EXIT_INTERNAL);
    }
    if !json {
        println!("all {} checks passed", reports.len());
    }
    Ok(0)
}

fn serve_selftest(seed: u64) -> CmdResult {
    use rand::SeedableRng;
    let (w, h) = (8, 6);
    let target = ImageRgb::from_data(w, h, (0..w * h).map(|i| [i as f64 / 48.0, 0.5, 1.0 - i as f64 / 48.0]).collect())?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let server_target = target.clone();
    let server = std::thread::spawn(move || -> std::io::Result<usize> {
        let (stream, _) = listener.accept()?;
        serve(BufReader::new(stream.try_clone()?), BufWriter::new(stream), echo_target_handler(server_target))
    });
    let mut oracle = ExternalOracle::connect(&format!("tcp://{addr}"), Duration::from_secs(10))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let rounds = 5;
    for r in 0..rounds {
        let z_t = sample_noise(w, h, &mut rng);
        let alpha_bar = 0.1 + 0.8 * r as f64 / rounds as f64;
        let query = NoiseQuery { z_t: &z_t, t: 100 * (r + 1), alpha_bar, condition: None, prompt: "selftest", cfg_scale: 7.5 };
        let got = oracle.predict_noise(&query)?;
        let want = point_mass_eps(&z_t, &target, alpha_bar)?;
        for (a, b) in got.data.iter().flatten().zip(want.data.iter().flatten()) {
            // the wire carries f32
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    drop(oracle);
    let served = server.join().map_err(|_| Failure::Internal("server thread panicked".into()))??;
    let ok = served == rounds && worst < 1e-6;
    println!("{served} requests served, max relative deviation {worst:.3e}: {}", if ok { "pass" } else { "FAIL" });
    Ok(if ok { 0 } else { EXIT_INTERNAL })
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Generate { config, out, overrides } => generate(config, out, overrides),
        Command::Turntable { field, views, resolution, elevation, radius, fov, out } => {
            turntable(&field, views, resolution, elevation, radius, fov, &out)
        }
        Command::ExportMesh { field, out, iso } => export_mesh(&field, &out, iso),
        Command::RenderCondition { pose, template, a_pose_deg, azimuth, elevation, radius, fov, resolution, focus, out } => {
            render_condition(pose, template, a_pose_deg, (azimuth, elevation, radius, fov, resolution), focus, &out)
        }
        Command::Gradcheck { seed, json } => gradcheck(seed, json),
        Command::ServeSelftest { seed } => serve_selftest(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
