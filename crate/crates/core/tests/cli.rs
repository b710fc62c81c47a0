use std::path::Path;
use std::process::{Command, Output};

use voxavatar::body_model::part;
use voxavatar::image_io::load_rgb8_png;
use voxavatar::mesh_export;
use voxavatar::optimize::RunReport;
use voxavatar::raster::palette_label;
use voxavatar::voxel_field::VoxelField;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxavatar")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY: [&str; 5] =
    ["--plan.none", "--plan.coarse_iters=4", "--plan.final_n_v=4096", "--plan.resolution=16", "--output.turntable_views=0"];

fn generate(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["generate", "--out", out];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&cli(&[])), 1);
    assert_eq!(code(&cli(&["frobnicate"])), 1);
    assert_eq!(code(&cli(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path(), &["--bogus.key=1"])), 1);
    assert_eq!(code(&generate(dir.path(), &["--smooth.k_g=4"])), 1);
    let missing = dir.path().join("missing.vxf");
    assert_eq!(code(&cli(&["export-mesh", missing.to_str().unwrap(), "--out", "x.ply"])), 1);
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&generate(&a, &[])), 0);
    assert_eq!(code(&generate(&b, &[])), 0);
    let fa = std::fs::read(a.join("final.vxf")).unwrap();
    let fb = std::fs::read(b.join("final.vxf")).unwrap();
    assert_eq!(fa, fb);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"], 4);
    assert_eq!(report["degraded"], false);
    assert!(a.join("config.toml").exists());
    let field = VoxelField::load(&a.join("final.vxf")).unwrap();
    assert_eq!(field.dims, [16, 16, 16]);
}

#[test]
fn different_seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&generate(&a, &["--seed=1"])), 0);
    assert_eq!(code(&generate(&b, &["--seed=2"])), 0);
    assert_ne!(std::fs::read(a.join("final.vxf")).unwrap(), std::fs::read(b.join("final.vxf")).unwrap());
}

#[test]
fn silent_oracle_marks_run_degraded() {
    // `true` exits at once, so every guidance query fails
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), &["--guidance.oracle=external", "--guidance.endpoint=stdio:true"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report: RunReport = serde_json::from_str(&text).unwrap();
    assert!(report.degraded);
    assert_eq!(report.skipped, 4);
}

#[test]
fn unreachable_oracle_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), &["--guidance.oracle=external", "--guidance.endpoint=tcp://127.0.0.1:1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("guidance unavailable"));
}

#[test]
fn turntable_and_mesh_from_a_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path(), &["--plan.coarse_iters=2"])), 0);
    let field = dir.path().join("final.vxf");
    let frames = dir.path().join("frames");
    let out = cli(&["turntable", field.to_str().unwrap(), "--views", "3", "--resolution", "24", "--out", frames.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    for i in 0..3 {
        let (w, h, _) = load_rgb8_png(&frames.join(format!("frame_{i:03}.png"))).unwrap();
        assert_eq!((w, h), (24, 24));
    }
    for ext in ["ply", "obj"] {
        let mesh = dir.path().join(format!("blob.{ext}"));
        let out = cli(&["export-mesh", field.to_str().unwrap(), "--out", mesh.to_str().unwrap(), "--iso", "0.5"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let m = mesh_export::load(&mesh).unwrap();
        assert!(!m.faces.is_empty());
        m.validate().unwrap();
    }
    let bad = dir.path().join("blob.stl");
    assert_eq!(code(&cli(&["export-mesh", field.to_str().unwrap(), "--out", bad.to_str().unwrap()])), 1);
}

fn label_counts(path: &Path) -> [usize; 25] {
    let (_, _, rgb) = load_rgb8_png(path).unwrap();
    let mut counts = [0; 25];
    for px in rgb {
        counts[palette_label(px).expect("palette color") as usize] += 1;
    }
    counts
}

#[test]
fn focus_zooms_in_on_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let (full, head) = (dir.path().join("full"), dir.path().join("head"));
    let common = ["render-condition", "--resolution", "64", "--azimuth", "90"];
    let mut a = common.to_vec();
    a.extend(["--out", full.to_str().unwrap()]);
    let mut b = common.to_vec();
    b.extend(["--focus", "head", "--out", head.to_str().unwrap()]);
    assert_eq!(code(&cli(&a)), 0);
    assert_eq!(code(&cli(&b)), 0);
    let (cf, ch) = (label_counts(&full.join("condition.png")), label_counts(&head.join("condition.png")));
    let head_px = |c: &[usize; 25]| c[part::HEAD_RIGHT as usize] + c[part::HEAD_LEFT as usize];
    assert!(head_px(&ch) > 4 * head_px(&cf), "head pixels {} vs {}", head_px(&ch), head_px(&cf));
    assert!(head_px(&ch) > 64 * 64 / 8);

    let mut bad = common.to_vec();
    bad.extend(["--focus", "tail", "--out", head.to_str().unwrap()]);
    assert_eq!(code(&cli(&bad)), 1);
}

#[test]
fn protocol_selftest_passes() {
    let out = cli(&["serve-selftest", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn gradcheck_command_passes() {
    let out = cli(&["gradcheck", "--seed", "1", "--json"]);
    assert_eq!(code(&out), 0);
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 30);
    assert!(reports.iter().all(|r| r["passed"] == true));
}
