//! Differentiable ray marching through a [`VoxelField`].
//!
//! Each ray is clipped to the field bounds and `[near, far]`, then sampled at
//! the midpoints of `n = ceil(len / step)` equal segments, where
//! `step = step_fraction * min(cell size)`. Compositing follows
//! `C = sum_i T_i (1 - exp(-sigma_i delta)) c_i + T_end * background` with
//! `T_i = exp(-sum_{j<i} sigma_j delta)`; marching stops once the
//! transmittance drops below `early_stop_transmittance`.
//!
//! [`render_backward`] is the exact adjoint of that forward pass, including
//! the early stop and the density activation. Gradients are scattered into the
//! grids in row-major pixel order, so results do not depend on thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::image_io::ImageRgb;
use crate::raster::{Camera, CameraFrame};
use crate::voxel_field::{activate_density, activate_density_grad, Stencil, VoxelField};
use crate::Vec3;

/// Background behind the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Color([f64; 3]),
    /// One uniformly random color per image, drawn from `seed`.
    RandomPerImage { seed: u64 },
}

impl Background {
    pub fn resolve(&self) -> [f64; 3] {
        match *self {
            Background::Color(c) => c,
            Background::RandomPerImage { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                [rng.random(), rng.random(), rng.random()]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub step_fraction: f64,
    pub near: f64,
    pub far: f64,
    pub background: Background,
    pub early_stop_transmittance: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            step_fraction: 0.5,
            near: 0.01,
            far: 100.0,
            background: Background::Color([1.0; 3]),
            early_stop_transmittance: 1e-4,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return invalid(format!("step_fraction must lie in (0, 1], got {}", self.step_fraction));
        }
        if !(self.near < self.far) {
            return invalid(format!("near ({}) must be less than far ({})", self.near, self.far));
        }
        if !(self.early_stop_transmittance >= 0.0) {
            return invalid("early_stop_transmittance must be non-negative");
        }
        Ok(())
    }
}

/// Per-pixel render products.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: ImageRgb,
    pub alpha: Vec<f64>,
    /// Expected depth along the ray, `sum w_i t_i / max(alpha, 1e-6)`.
    pub depth: Vec<f64>,
    /// Unit normals from the density gradient at the expected depth; zero where undefined.
    pub normal: Vec<[f64; 3]>,
}

/// Gradients with respect to the field parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub density_raw: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl FieldGrad {
    pub fn zeros(n: usize) -> Self {
        FieldGrad { density_raw: vec![0.0; n], color: vec![[0.0; 3]; n] }
    }

    pub fn is_finite(&self) -> bool {
        self.density_raw.iter().all(|v| v.is_finite()) && self.color.iter().flatten().all(|v| v.is_finite())
    }
}

struct Ray {
    origin: Vec3,
    dir: Vec3,
    t0: f64,
    delta: f64,
    n: usize,
}

struct Sample {
    stencil: Stencil,
    raw: f64,
    color: [f64; 3],
    transmittance: f64,
    alpha: f64,
}

struct RayResult {
    rgb: [f64; 3],
    alpha: f64,
    depth: f64,
}

fn setup_ray(field: &VoxelField, frame: &CameraFrame, cam: &Camera, px: usize, py: usize, s: &RenderSettings) -> Option<Ray> {
    let dir = frame.ray_dir(px, py, cam.width, cam.height);
    let origin = frame.position;
    let (t0, t1) = field.bounds.intersect_ray(&origin, &dir)?;
    let (t0, t1) = (t0.max(s.near), t1.min(s.far));
    if t1 <= t0 {
        return None;
    }
    let cell = field.cell_size();
    let step = s.step_fraction * cell.x.min(cell.y).min(cell.z);
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    Some(Ray { origin, dir, t0, delta: (t1 - t0) / n as f64, n })
}

/// Marches one ray; samples are pushed to `samples` when provided.
fn march(field: &VoxelField, ray: &Ray, s: &RenderSettings, bg: [f64; 3], mut samples: Option<&mut Vec<Sample>>) -> RayResult {
    let geom = field.geometry();
    let mut t_acc = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..ray.n {
        let t = ray.t0 + (i as f64 + 0.5) * ray.delta;
        let p = ray.origin + ray.dir * t;
        let stencil = geom.stencil(&p, true).expect("clamped stencil");
        let mut raw = 0.0;
        let mut color = [0.0; 3];
        for (idx, w) in stencil.index.iter().zip(stencil.weight) {
            raw += w * field.density_raw[*idx];
            let c = field.color[*idx];
            color[0] += w * c[0];
            color[1] += w * c[1];
            color[2] += w * c[2];
        }
        let sigma = activate_density(raw, field.shift);
        let alpha = 1.0 - (-sigma * ray.delta).exp();
        let weight = t_acc * alpha;
        for ch in 0..3 {
            rgb[ch] += weight * color[ch];
        }
        depth += weight * t;
        if let Some(buf) = samples.as_deref_mut() {
            buf.push(Sample { stencil, raw, color, transmittance: t_acc, alpha });
        }
        t_acc *= 1.0 - alpha;
        if t_acc < s.early_stop_transmittance {
            break;
        }
    }
    let opacity = 1.0 - t_acc;
    for ch in 0..3 {
        rgb[ch] += t_acc * bg[ch];
    }
    RayResult { rgb, alpha: opacity, depth: depth / opacity.max(1e-6) }
}

fn normal_at(field: &VoxelField, p: &Vec3) -> [f64; 3] {
    let cell = field.cell_size();
    let mut g = Vec3::zeros();
    for a in 0..3 {
        let mut e = Vec3::zeros();
        e[a] = cell[a];
        g[a] = (field.sigma_at(&(p + e)) - field.sigma_at(&(p - e))) / (2.0 * cell[a]);
    }
    let norm = g.norm();
    if norm < 1e-8 {
        [0.0; 3]
    } else {
        let n = -g / norm;
        [n.x, n.y, n.z]
    }
}

/// Volume-renders `field` from `camera`.
pub fn render(field: &VoxelField, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    settings.validate()?;
    let frame = camera.frame()?;
    let bg = settings.background.resolve();
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(RayResult, [f64; 3])> = (0..w * h)
        .into_par_iter()
        .map(|pix| {
            let (px, py) = (pix % w, pix / w);
            match setup_ray(field, &frame, camera, px, py, settings) {
                None => (RayResult { rgb: bg, alpha: 0.0, depth: 0.0 }, [0.0; 3]),
                Some(ray) => {
                    let r = march(field, &ray, settings, bg, None);
                    let n = if r.alpha > 1e-6 { normal_at(field, &(ray.origin + ray.dir * r.depth)) } else { [0.0; 3] };
                    (r, n)
                }
            }
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut normal = Vec::with_capacity(w * h);
    for (r, n) in pixels {
        rgb.push(r.rgb);
        alpha.push(r.alpha);
        depth.push(r.depth);
        normal.push(n);
    }
    Ok(RenderOutput { rgb: ImageRgb { width: w, height: h, data: rgb }, alpha, depth, normal })
}

struct SampleGrad {
    stencil: Stencil,
    d_raw: f64,
    d_color: [f64; 3],
}

/// Rows processed per parallel batch before their gradients are scattered.
const BACKWARD_ROW_BATCH: usize = 16;

/// Adjoint of [`render`] for the loss `sum_pixels <pixel_grad, rgb>`.
pub fn render_backward(
    field: &VoxelField,
    camera: &Camera,
    settings: &RenderSettings,
    pixel_grad: &ImageRgb,
) -> Result<FieldGrad> {
    settings.validate()?;
    if pixel_grad.width != camera.width || pixel_grad.height != camera.height {
        return invalid(format!(
            "pixel gradient is {}x{} but the camera renders {}x{}",
            pixel_grad.width, pixel_grad.height, camera.width, camera.height
        ));
    }
    if !pixel_grad.is_finite() {
        return invalid("pixel gradient contains non-finite values");
    }
    let frame = camera.frame()?;
    let bg = settings.background.resolve();
    let (w, h) = (camera.width, camera.height);
    let mut grad = FieldGrad::zeros(field.len());

    let row_grads = |py: usize| -> Vec<SampleGrad> {
        let mut out = Vec::new();
        let mut samples = Vec::new();
        for px in 0..w {
            let g = pixel_grad.data[py * w + px];
            if g == [0.0; 3] {
                continue;
            }
            let Some(ray) = setup_ray(field, &frame, camera, px, py, settings) else { continue };
            samples.clear();
            let r = march(field, &ray, settings, bg, Some(&mut samples));
            let t_end = 1.0 - r.alpha;
            // g . (sum_{k>i} w_k c_k + T_end bg), accumulated back to front.
            let mut suffix = t_end * (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
            let first = out.len();
            for smp in samples.iter().rev() {
                let weight = smp.transmittance * smp.alpha;
                let g_dot_c = g[0] * smp.color[0] + g[1] * smp.color[1] + g[2] * smp.color[2];
                let t_next = smp.transmittance * (1.0 - smp.alpha);
                let d_sigma = ray.delta * (t_next * g_dot_c - suffix);
                suffix += weight * g_dot_c;
                out.push(SampleGrad {
                    stencil: smp.stencil,
                    d_raw: d_sigma * activate_density_grad(smp.raw, field.shift),
                    d_color: [weight * g[0], weight * g[1], weight * g[2]],
                });
            }
            out[first..].reverse();
        }
        out
    };

    for start in (0..h).step_by(BACKWARD_ROW_BATCH) {
        let end = (start + BACKWARD_ROW_BATCH).min(h);
        let batch: Vec<Vec<SampleGrad>> = (start..end).into_par_iter().map(row_grads).collect();
        for rec in batch.iter().flatten() {
            for (idx, wt) in rec.stencil.index.iter().zip(rec.stencil.weight) {
                if wt == 0.0 {
                    continue;
                }
                grad.density_raw[*idx] += wt * rec.d_raw;
                let c = &mut grad.color[*idx];
                c[0] += wt * rec.d_color[0];
                c[1] += wt * rec.d_color[1];
                c[2] += wt * rec.d_color[2];
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_field::{raw_for_density, Bounds};

    fn cam(az: f64, size: usize) -> Camera {
        Camera::from_spherical(2.5, az, 10.0, Vec3::zeros(), 40.0, size, size).unwrap()
    }

    fn random_field(seed: u64, n: usize) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 0.5).unwrap(), [n; 3], 0.0, [0.0; 3]).unwrap();
        for v in f.density_raw.iter_mut() {
            *v = rng.random_range(-1.0..4.0);
        }
        for c in f.color.iter_mut() {
            *c = [rng.random(), rng.random(), rng.random()];
        }
        f
    }

    #[test]
    fn empty_scene_shows_background() {
        let f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 0.5).unwrap(), [4; 3], f64::MIN / 2.0, [1.0, 0.0, 0.0])
            .unwrap();
        let s = RenderSettings { background: Background::Color([0.2, 0.3, 0.4]), ..Default::default() };
        let out = render(&f, &cam(30.0, 8), &s).unwrap();
        assert!(out.rgb.data.iter().all(|p| *p == [0.2, 0.3, 0.4]));
        assert!(out.alpha.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn near_not_before_far_is_rejected() {
        let f = random_field(0, 4);
        let s = RenderSettings { near: 2.0, far: 1.0, ..Default::default() };
        assert!(render(&f, &cam(0.0, 4), &s).is_err());
    }

    #[test]
    fn opaque_red_slab() {
        // Slab 0.2 thick with sigma = 60: transmittance exp(-12) behind it.
        let bounds = Bounds::new(Vec3::new(-1.0, -1.0, -0.1), Vec3::new(1.0, 1.0, 0.1)).unwrap();
        let f = VoxelField {
            shift: -2.0,
            ..VoxelField::filled(bounds, [8, 8, 8], raw_for_density(60.0, -2.0), [1.0, 0.0, 0.0]).unwrap()
        };
        let c = Camera::from_spherical(2.0, 90.0, 0.0, Vec3::zeros(), 30.0, 9, 9).unwrap();
        let s = RenderSettings {
            step_fraction: 0.25,
            background: Background::Color([1.0; 3]),
            early_stop_transmittance: 0.0,
            ..Default::default()
        };
        let out = render(&f, &c, &s).unwrap();
        let center = out.rgb.data[4 * 9 + 4];
        let closed_form_t = (-60.0f64 * 0.2).exp();
        assert!((out.alpha[40] - (1.0 - closed_form_t)).abs() < 1e-9);
        assert!(out.alpha[40] > 0.999);
        assert!((center[0] - 1.0).abs() < 1e-3 && center[1] < 1e-3 && center[2] < 1e-3);
        assert!((out.depth[40] - 1.9).abs() < 0.02);
        assert!((out.normal[40][2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn step_refinement_converges() {
        let mut f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 0.5).unwrap(), [16; 3], 0.0, [0.5; 3]).unwrap();
        let g = f.geometry();
        for idx in 0..f.len() {
            let [i, j, k] = g.coords(idx);
            let p = g.cell_center(i, j, k);
            f.density_raw[idx] = 3.0 - 8.0 * p.norm_squared();
            f.color[idx] = [0.5 + 0.4 * p.x, 0.5 + 0.4 * p.y, 0.5];
        }
        let coarse = RenderSettings { step_fraction: 0.5, early_stop_transmittance: 0.0, ..Default::default() };
        let fine = RenderSettings { step_fraction: 0.25, ..coarse };
        let a = render(&f, &cam(45.0, 16), &coarse).unwrap();
        let b = render(&f, &cam(45.0, 16), &fine).unwrap();
        assert!(a.rgb.rms_diff(&b.rgb) < 1e-3, "{}", a.rgb.rms_diff(&b.rgb));
    }

    #[test]
    fn alpha_in_range_and_monotone_in_density() {
        let f = random_field(4, 8);
        let c = cam(20.0, 8);
        let s = RenderSettings::default();
        let base = render(&f, &c, &s).unwrap();
        assert!(base.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
        let mut denser = f.clone();
        denser.density_raw[200] += 3.0;
        let more = render(&denser, &c, &s).unwrap();
        for (a, b) in base.alpha.iter().zip(&more.alpha) {
            assert!(b >= a);
        }
    }

    #[test]
    fn early_stop_error_is_bounded() {
        let mut f = random_field(9, 8);
        f.density_raw.iter_mut().for_each(|v| *v += 6.0);
        let c = cam(70.0, 8);
        let stop = RenderSettings { background: Background::Color([0.3, 0.9, 0.1]), ..Default::default() };
        let full = RenderSettings { early_stop_transmittance: 0.0, ..stop };
        let a = render(&f, &c, &stop).unwrap();
        let b = render(&f, &c, &full).unwrap();
        for (p, q) in a.rgb.data.iter().zip(&b.rgb.data) {
            for ch in 0..3 {
                assert!((p[ch] - q[ch]).abs() < stop.early_stop_transmittance);
            }
        }
    }

    #[test]
    fn random_background_is_seeded() {
        let f = random_field(1, 4);
        let s = RenderSettings { background: Background::RandomPerImage { seed: 42 }, ..Default::default() };
        let a = render(&f, &cam(0.0, 6), &s).unwrap();
        let b = render(&f, &cam(0.0, 6), &s).unwrap();
        assert_eq!(a, b);
        let other = RenderSettings { background: Background::RandomPerImage { seed: 43 }, ..s };
        assert_ne!(render(&f, &cam(0.0, 6), &other).unwrap().rgb, a.rgb);
    }

    #[test]
    fn zero_pixel_grad_gives_zero_field_grad() {
        let f = random_field(2, 8);
        let c = cam(10.0, 8);
        let g = render_backward(&f, &c, &RenderSettings::default(), &ImageRgb::zeros(8, 8)).unwrap();
        assert!(g.density_raw.iter().all(|v| *v == 0.0));
        assert!(g.color.iter().flatten().all(|v| *v == 0.0));
        assert!(render_backward(&f, &c, &RenderSettings::default(), &ImageRgb::zeros(7, 8)).is_err());
    }

    #[test]
    fn occluded_cells_get_no_color_gradient() {
        // Dense front half of a slab hides the back half from a camera on +z.
        let bounds = Bounds::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5)).unwrap();
        let mut f = VoxelField::filled(bounds, [4, 4, 4], raw_for_density(80.0, -2.0), [0.5; 3]).unwrap();
        let geom = f.geometry();
        for idx in 0..f.len() {
            let [_, _, k] = geom.coords(idx);
            if k < 2 {
                f.color[idx] = [0.1, 0.2, 0.3];
            }
        }
        let c = Camera::from_spherical(3.0, 90.0, 0.0, Vec3::zeros(), 15.0, 6, 6).unwrap();
        let stop = RenderSettings::default();
        let full = RenderSettings { early_stop_transmittance: 0.0, ..stop };
        let pg = ImageRgb::filled(6, 6, [1.0, -0.5, 0.25]);
        let g_stop = render_backward(&f, &c, &stop, &pg).unwrap();
        let g_full = render_backward(&f, &c, &full, &pg).unwrap();
        let back = geom.index(1, 1, 0);
        assert_eq!(g_stop.color[back], [0.0; 3]);
        assert!(g_full.color[back][0].abs() > 0.0);
        assert!(g_full.color[back][0].abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = random_field(7, 6);
        let c = cam(35.0, 6);
        let s = RenderSettings { background: Background::Color([0.2, 0.7, 0.4]), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pg = ImageRgb::from_data(6, 6, (0..36).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).unwrap();
        let loss = |field: &VoxelField| -> f64 {
            let out = render(field, &c, &s).unwrap();
            out.rgb.data.iter().zip(&pg.data).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum()
        };
        let g = render_backward(&f, &c, &s, &pg).unwrap();
        let h = 1e-3;
        for idx in (0..f.len()).step_by(7) {
            let mut fp = f.clone();
            fp.density_raw[idx] += h;
            let mut fm = f.clone();
            fm.density_raw[idx] -= h;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
            let an = g.density_raw[idx];
            if an.abs().max(fd.abs()) > 1e-6 {
                assert!((an - fd).abs() / an.abs().max(fd.abs()) < 1e-3, "cell {idx}: {an} vs {fd}");
            }
            // Color enters linearly, so a unit perturbation recovers the gradient up to rounding.
            let mut fc = f.clone();
            fc.color[idx][1] += 1.0;
            let dc = loss(&fc) - loss(&f);
            assert!((dc - g.color[idx][1]).abs() < 1e-9, "color cell {idx}: {} vs {dc}", g.color[idx][1]);
        }
    }
}
