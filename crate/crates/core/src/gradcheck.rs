//! Finite-difference and brute-force checks of the differentiable pieces.
//!
//! Each check returns a [`CheckReport`] with the worst offending location so a
//! failing adjoint can be tracked down without a debugger.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::body_model::PosedBody;
use crate::error::Result;
use crate::image_io::ImageRgb;
use crate::raster::{rasterize_condition, Camera};
use crate::regularize::{field_smoothness, field_smoothness_with_grad, SmoothConfig};
use crate::renderer::{render, render_backward, Background, FieldGrad, RenderSettings};
use crate::voxel_field::{Bounds, VoxelField};
use crate::Vec3;

/// Relative error `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    /// What was perturbed, e.g. `density[412]` or `pixel(3, 17)`.
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub failures: usize,
    pub tolerance: f64,
    pub worst: Option<Worst>,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, seed: u64, tolerance: f64) -> Self {
        CheckReport { name: name.into(), seed, checked: 0, failures: 0, tolerance, worst: None, passed: true }
    }

    fn record(&mut self, location: impl FnOnce() -> String, analytic: f64, numeric: f64, error: f64) {
        self.checked += 1;
        if error > self.tolerance {
            self.failures += 1;
            self.passed = false;
        }
        if self.worst.as_ref().is_none_or(|w| error > w.error) {
            self.worst = Some(Worst { location: location(), analytic, numeric, error });
        }
    }

    pub fn summary(&self) -> String {
        let worst = match &self.worst {
            Some(w) => format!("worst {:.3e} at {} (analytic {:.6e}, numeric {:.6e})", w.error, w.location, w.analytic, w.numeric),
            None => "nothing checked".into(),
        };
        format!(
            "{} seed {}: {} ({} checked, {} over {}); {}",
            self.name,
            self.seed,
            if self.passed { "pass" } else { "FAIL" },
            self.checked,
            self.failures,
            self.tolerance,
            worst
        )
    }
}

/// Signature of a renderer adjoint, so a deliberately broken one can be checked.
pub type Adjoint = dyn Fn(&VoxelField, &Camera, &RenderSettings, &ImageRgb) -> Result<FieldGrad>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RendererCheck {
    pub grid: usize,
    pub image: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this (in both estimates) are not compared.
    pub floor: f64,
}

impl Default for RendererCheck {
    fn default() -> Self {
        RendererCheck { grid: 16, image: 8, step: 1e-3, tolerance: 1e-3, floor: 1e-6 }
    }
}

/// Random raw densities over `[-4, 6)` and colors over the unit cube.
pub fn random_field(seed: u64, n: usize) -> VoxelField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 0.5).expect("unit cube"), [n; 3], 0.0, [0.5; 3]).expect("valid grid");
    for r in f.density_raw.iter_mut() {
        *r = rng.random_range(-4.0..6.0);
    }
    for c in f.color.iter_mut() {
        *c = [rng.random(), rng.random(), rng.random()];
    }
    f
}

fn check_camera(seed: u64, image: usize) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Camera {
        radius: 1.6,
        azimuth: rng.random_range(0.0..360.0),
        elevation: rng.random_range(-30.0..60.0),
        target: Vec3::zeros(),
        fov_y: 45.0,
        width: image,
        height: image,
    }
}

/// Central differences of `<pixel_grad, render(field)>` against the adjoint,
/// for every density and color parameter.
pub fn renderer_gradcheck_with(seed: u64, opts: &RendererCheck, adjoint: &Adjoint) -> Result<CheckReport> {
    let field = random_field(seed, opts.grid);
    let camera = check_camera(seed, opts.image);
    // no early termination: it would make the loss piecewise
    let settings = RenderSettings { background: Background::Color([0.3, 0.6, 0.9]), early_stop_transmittance: 0.0, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let n_pix = opts.image * opts.image;
    let pixel_grad = ImageRgb::from_data(
        opts.image,
        opts.image,
        (0..n_pix).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
    )?;
    let loss = |f: &VoxelField| -> Result<f64> {
        let out = render(f, &camera, &settings)?;
        Ok(out.rgb.data.iter().zip(&pixel_grad.data).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum())
    };
    let grad = adjoint(&field, &camera, &settings, &pixel_grad)?;
    let mut report = CheckReport::new("renderer", seed, opts.tolerance);
    let mut probe = field.clone();
    let h = opts.step;
    for idx in 0..field.len() {
        let base = probe.density_raw[idx];
        probe.density_raw[idx] = base + h;
        let up = loss(&probe)?;
        probe.density_raw[idx] = base - h;
        let down = loss(&probe)?;
        probe.density_raw[idx] = base;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.density_raw[idx];
        if analytic.abs().max(numeric.abs()) > opts.floor {
            report.record(|| format!("density[{idx}]"), analytic, numeric, relative_error(analytic, numeric));
        }
        for ch in 0..3 {
            let base = probe.color[idx][ch];
            probe.color[idx][ch] = base + h;
            let up = loss(&probe)?;
            probe.color[idx][ch] = base - h;
            let down = loss(&probe)?;
            probe.color[idx][ch] = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.color[idx][ch];
            if analytic.abs().max(numeric.abs()) > opts.floor {
                report.record(|| format!("color[{idx}][{ch}]"), analytic, numeric, relative_error(analytic, numeric));
            }
        }
    }
    Ok(report)
}

pub fn renderer_gradcheck(seed: u64, opts: &RendererCheck) -> Result<CheckReport> {
    renderer_gradcheck_with(seed, opts, &render_backward)
}

/// Central differences of the smoothness loss on a random `n^3` grid.
pub fn smoothness_gradcheck(seed: u64, n: usize, tolerance: f64) -> Result<CheckReport> {
    let field = random_field(seed, n);
    let config = SmoothConfig::default();
    let (_, grad) = field_smoothness_with_grad(&field, &config)?;
    let mut report = CheckReport::new("smoothness", seed, tolerance);
    let mut probe = field.clone();
    let h = 1e-3;
    for idx in 0..field.len() {
        let base = probe.density_raw[idx];
        probe.density_raw[idx] = base + h;
        let up = field_smoothness(&probe, &config)?;
        probe.density_raw[idx] = base - h;
        let down = field_smoothness(&probe, &config)?;
        probe.density_raw[idx] = base;
        let numeric = (up - down) / (2.0 * h);
        if grad[idx].abs().max(numeric.abs()) > 1e-9 {
            report.record(|| format!("density[{idx}]"), grad[idx], numeric, relative_error(grad[idx], numeric));
        }
    }
    Ok(report)
}

/// Random soup of up to `max_tris` triangles around the origin.
pub fn random_mesh(seed: u64, max_tris: usize) -> (PosedBody, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_tris);
    let mut vertices = Vec::with_capacity(3 * n);
    let mut faces = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for t in 0..n {
        let c = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        for _ in 0..3 {
            vertices.push(c + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)));
        }
        faces.push([3 * t, 3 * t + 1, 3 * t + 2]);
        labels.push(rng.random_range(1..=24u8));
    }
    let body = PosedBody { vertices, faces, joints: Vec::new(), per_joint_transforms: Vec::new() };
    (body, labels)
}

/// Nearest-hit label per pixel by intersecting every pixel ray with every triangle.
pub fn brute_force_labels(body: &PosedBody, labels: &[u8], camera: &Camera) -> Result<Vec<u8>> {
    let frame = camera.frame()?;
    let (w, h) = (camera.width, camera.height);
    let mut out = vec![0u8; w * h];
    for py in 0..h {
        for px in 0..w {
            let dir = frame.ray_dir(px, py, w, h);
            let mut best = f64::INFINITY;
            for (f, &label) in body.faces.iter().zip(labels) {
                let [a, b, c] = f.map(|i| body.vertices[i]);
                if let Some(t) = ray_triangle(&frame.position, &dir, &a, &b, &c) {
                    if t < best {
                        best = t;
                        out[py * w + px] = label;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Two-sided ray/triangle intersection distance.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let (e1, e2) = (b - a, c - a);
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-15 {
        return None;
    }
    let s = origin - a;
    let u = s.dot(&p) / det;
    let q = s.cross(&e1);
    let v = dir.dot(&q) / det;
    let t = e2.dot(&q) / det;
    (u >= 0.0 && v >= 0.0 && u + v <= 1.0 && t > 0.0).then_some(t)
}

/// Fraction of pixels where the z-buffer agrees with brute-force ray casting
/// on a random triangle soup, reported as a check with tolerance on disagreement.
pub fn raster_check(seed: u64, max_tris: usize, size: usize, min_agreement: f64) -> Result<CheckReport> {
    let (body, labels) = random_mesh(seed, max_tris);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca3e);
    let camera = Camera {
        radius: rng.random_range(1.5..3.0),
        azimuth: rng.random_range(0.0..360.0),
        elevation: rng.random_range(-60.0..60.0),
        target: Vec3::zeros(),
        fov_y: 45.0,
        width: size,
        height: size,
    };
    let zbuf = rasterize_condition(&body, &labels, &camera)?;
    let brute = brute_force_labels(&body, &labels, &camera)?;
    let disagree = zbuf.labels.iter().zip(&brute).filter(|(a, b)| a != b).count();
    let total = size * size;
    let mut report = CheckReport::new("raster", seed, 1.0 - min_agreement);
    let frac = disagree as f64 / total as f64;
    report.record(|| format!("{disagree} of {total} pixels"), 1.0 - frac, 1.0, frac);
    report.checked = total;
    report.failures = if report.passed { 0 } else { disagree };
    Ok(report)
}

/// The numeric suites behind the `gradcheck` command.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for s in 0..5 {
        reports.push(renderer_gradcheck(seed.wrapping_add(s), &RendererCheck::default())?);
    }
    for s in 0..5 {
        reports.push(smoothness_gradcheck(seed.wrapping_add(s), 8, 1e-3)?);
    }
    for s in 0..20 {
        reports.push(raster_check(seed.wrapping_add(s), 200, 32, 0.99)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 0.9) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn small_renderer_check_passes() {
        let opts = RendererCheck { grid: 5, image: 4, ..Default::default() };
        let r = renderer_gradcheck(3, &opts).unwrap();
        assert!(r.passed, "{}", r.summary());
        assert!(r.checked > 20);
    }

    #[test]
    fn perturbed_adjoint_fails_with_location() {
        let opts = RendererCheck { grid: 5, image: 4, ..Default::default() };
        let broken = |f: &VoxelField, c: &Camera, s: &RenderSettings, g: &ImageRgb| {
            let mut out = render_backward(f, c, s, g)?;
            let worst = (0..out.density_raw.len()).max_by(|&a, &b| out.density_raw[a].abs().total_cmp(&out.density_raw[b].abs())).unwrap();
            out.density_raw[worst] *= 1.01;
            Ok(out)
        };
        let r = renderer_gradcheck_with(3, &opts, &broken).unwrap();
        assert!(!r.passed);
        let w = r.worst.unwrap();
        assert!(w.location.starts_with("density["), "{}", w.location);
        assert!((w.error - 0.01 / 1.01).abs() < 1e-4);
    }

    #[test]
    fn smoothness_check_passes() {
        let r = smoothness_gradcheck(1, 6, 1e-3).unwrap();
        assert!(r.passed, "{}", r.summary());
    }

    #[test]
    fn ray_triangle_oracle() {
        let (a, b, c) = (Vec3::new(-1.0, -1.0, 2.0), Vec3::new(1.0, -1.0, 2.0), Vec3::new(0.0, 1.0, 2.0));
        assert_eq!(ray_triangle(&Vec3::zeros(), &Vec3::z(), &a, &b, &c), Some(2.0));
        assert_eq!(ray_triangle(&Vec3::zeros(), &-Vec3::z(), &a, &b, &c), None);
        assert_eq!(ray_triangle(&Vec3::new(5.0, 0.0, 0.0), &Vec3::z(), &a, &b, &c), None);
    }

    #[test]
    fn raster_matches_brute_force() {
        for seed in 0..3 {
            let r = raster_check(seed, 60, 24, 0.99).unwrap();
            assert!(r.passed, "{}", r.summary());
        }
    }
}
