//! Spherical pinhole camera and the part-label rasterizer that produces
//! DensePose-style condition images from a posed body.

use rayon::prelude::*;

use crate::body_model::{PosedBody, NUM_PARTS};
use crate::error::{invalid, Result};
use crate::Vec3;

/// Label-to-color table. Entry 0 is the background; entry `i` in `1..=24`
/// is the HSV color with hue `(i - 1) / 24 * 360` degrees, full saturation
/// and value, rounded to 8 bits. Published as `docs/palette.csv`.
pub const PALETTE: [[u8; 3]; NUM_PARTS + 1] = [
    [0, 0, 0],
    [255, 0, 0],
    [255, 64, 0],
    [255, 128, 0],
    [255, 191, 0],
    [255, 255, 0],
    [191, 255, 0],
    [128, 255, 0],
    [64, 255, 0],
    [0, 255, 0],
    [0, 255, 64],
    [0, 255, 128],
    [0, 255, 191],
    [0, 255, 255],
    [0, 191, 255],
    [0, 128, 255],
    [0, 64, 255],
    [0, 0, 255],
    [64, 0, 255],
    [128, 0, 255],
    [191, 0, 255],
    [255, 0, 255],
    [255, 0, 191],
    [255, 0, 128],
    [255, 0, 64],
];

/// Inverse of [`PALETTE`]; `None` for colors outside the table.
pub fn palette_label(rgb: [u8; 3]) -> Option<u8> {
    PALETTE.iter().position(|c| *c == rgb).map(|i| i as u8)
}

/// Pinhole camera on a sphere around `target`.
///
/// Position is `target + radius * (cos(el) cos(az), sin(el), cos(el) sin(az))`
/// with angles in degrees, so azimuth 0 sits on +x and azimuth 90 on +z (the
/// body's front). The camera looks at `target` with world-up +y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub radius: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub target: Vec3,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    /// Focal length in pixels.
    pub focal: f64,
}

impl Camera {
    pub fn from_spherical(
        radius: f64,
        azimuth: f64,
        elevation: f64,
        target: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera { radius, azimuth: azimuth.rem_euclid(360.0), elevation, target, fov_y, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return invalid(format!("camera radius must be positive, got {}", self.radius));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) {
            return invalid(format!("fov_y must lie in (0, 180), got {}", self.fov_y));
        }
        if self.width == 0 || self.height == 0 {
            return invalid("camera resolution must be at least 1x1");
        }
        if !self.azimuth.is_finite() || !self.elevation.is_finite() || self.target.iter().any(|c| !c.is_finite()) {
            return invalid("camera angles and target must be finite");
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.target + Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * self.radius
    }

    /// Same camera at a different resolution.
    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Camera { width, height, ..*self }
    }

    pub fn frame(&self) -> Result<CameraFrame> {
        self.validate()?;
        let position = self.position();
        let view = self.target - position;
        let dist = view.norm();
        if !(dist > 1e-12) {
            return invalid("degenerate camera: target coincides with position");
        }
        let forward = view / dist;
        let mut right = forward.cross(&Vec3::y());
        if right.norm() < 1e-9 {
            // Looking straight up or down.
            right = forward.cross(&Vec3::z());
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let focal = 0.5 * self.height as f64 / (0.5 * self.fov_y.to_radians()).tan();
        Ok(CameraFrame { position, forward, right, up, focal })
    }
}

impl CameraFrame {
    /// Unit ray direction through the center of pixel `(px, py)`; `py` grows downwards.
    pub fn ray_dir(&self, px: usize, py: usize, width: usize, height: usize) -> Vec3 {
        let sx = (px as f64 + 0.5 - 0.5 * width as f64) / self.focal;
        let sy = (0.5 * height as f64 - (py as f64 + 0.5)) / self.focal;
        (self.forward + self.right * sx + self.up * sy).normalize()
    }

    /// Screen position (pixels, y down) and view-space depth of a world point.
    pub fn project(&self, p: &Vec3, width: usize, height: usize) -> (f64, f64, f64) {
        let d = p - self.position;
        let z = d.dot(&self.forward);
        let x = d.dot(&self.right);
        let y = d.dot(&self.up);
        (0.5 * width as f64 + self.focal * x / z, 0.5 * height as f64 - self.focal * y / z, z)
    }
}

/// Part-label condition image rendered from a posed body.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub width: usize,
    pub height: usize,
    /// Row-major labels, 0 = background.
    pub labels: Vec<u8>,
    /// Row-major palette colors of `labels`.
    pub rgb: Vec<[u8; 3]>,
    /// View-space depth; `+inf` on background.
    pub depth: Vec<f64>,
    /// The camera this image was rendered from.
    pub camera: Camera,
}

impl ConditionImage {
    /// Rebuilds an image from labels alone (depth unknown, set to +inf on background and NaN-free 0 elsewhere).
    pub fn from_labels(width: usize, height: usize, labels: Vec<u8>, camera: Camera) -> Result<Self> {
        if labels.len() != width * height {
            return invalid("label buffer does not match image dimensions");
        }
        if labels.iter().any(|&l| l as usize > NUM_PARTS) {
            return invalid("label outside 0..=24");
        }
        let rgb = labels.iter().map(|&l| PALETTE[l as usize]).collect();
        let depth = labels.iter().map(|&l| if l == 0 { f64::INFINITY } else { 0.0 }).collect();
        Ok(ConditionImage { width, height, labels, rgb, depth, camera })
    }
}

/// Near-plane distance; triangles with a vertex closer than this are skipped.
pub const NEAR_PLANE: f64 = 1e-3;

struct ScreenTri {
    p: [(f64, f64); 3],
    inv_z: [f64; 3],
    area: f64,
    label: u8,
    y_min: f64,
    y_max: f64,
    x_min: f64,
    x_max: f64,
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Top-left ownership: the edge `a -> b` owns pixels lying exactly on it when
/// the interior is to its right (a left edge) or below a horizontal edge (a top edge).
fn owns_boundary(a: (f64, f64), b: (f64, f64)) -> bool {
    let nx = -(b.1 - a.1);
    let ny = b.0 - a.0;
    nx > 0.0 || (nx == 0.0 && ny > 0.0)
}

/// Rasterizes part labels of `body` as seen from `camera` with a z-buffer.
///
/// Pixel centers are sampled, shared edges follow the top-left rule, both
/// windings are drawn and depth ties keep the lower-indexed triangle.
pub fn rasterize_condition(body: &PosedBody, labels: &[u8], camera: &Camera) -> Result<ConditionImage> {
    if labels.len() != body.faces.len() {
        return invalid("label count differs from face count");
    }
    let frame = camera.frame()?;
    let (w, h) = (camera.width, camera.height);
    let projected: Vec<(f64, f64, f64)> = body.vertices.iter().map(|v| frame.project(v, w, h)).collect();

    let mut tris = Vec::with_capacity(body.faces.len());
    for (face, &label) in body.faces.iter().zip(labels) {
        let mut v = face.map(|i| projected[i]);
        if v.iter().any(|p| !(p.2 > NEAR_PLANE)) {
            continue;
        }
        let mut area = edge((v[0].0, v[0].1), (v[1].0, v[1].1), (v[2].0, v[2].1));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            v.swap(1, 2);
            area = -area;
        }
        let xs = [v[0].0, v[1].0, v[2].0];
        let ys = [v[0].1, v[1].1, v[2].1];
        tris.push(ScreenTri {
            p: [(v[0].0, v[0].1), (v[1].0, v[1].1), (v[2].0, v[2].1)],
            inv_z: [1.0 / v[0].2, 1.0 / v[1].2, 1.0 / v[2].2],
            area,
            label,
            x_min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            x_max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            y_min: ys.iter().copied().fold(f64::INFINITY, f64::min),
            y_max: ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }

    let mut out_labels = vec![0u8; w * h];
    let mut out_depth = vec![f64::INFINITY; w * h];
    out_labels.par_chunks_mut(w).zip(out_depth.par_chunks_mut(w)).enumerate().for_each(|(py, (lrow, drow))| {
        let cy = py as f64 + 0.5;
        for tri in &tris {
            if cy < tri.y_min || cy > tri.y_max {
                continue;
            }
            let x0 = (tri.x_min - 0.5).ceil().max(0.0) as usize;
            let x1 = ((tri.x_max - 0.5).floor()).min(w as f64 - 1.0);
            if x1 < 0.0 {
                continue;
            }
            for px in x0..=(x1 as usize) {
                let p = (px as f64 + 0.5, cy);
                let [a, b, c] = tri.p;
                let w0 = edge(b, c, p);
                let w1 = edge(c, a, p);
                let w2 = edge(a, b, p);
                let inside = (w0 > 0.0 || (w0 == 0.0 && owns_boundary(b, c)))
                    && (w1 > 0.0 || (w1 == 0.0 && owns_boundary(c, a)))
                    && (w2 > 0.0 || (w2 == 0.0 && owns_boundary(a, b)));
                if !inside {
                    continue;
                }
                let inv_z = (w0 * tri.inv_z[0] + w1 * tri.inv_z[1] + w2 * tri.inv_z[2]) / tri.area;
                let z = 1.0 / inv_z;
                if z < drow[px] {
                    drow[px] = z;
                    lrow[px] = tri.label;
                }
            }
        }
    });

    let rgb = out_labels.iter().map(|&l| PALETTE[l as usize]).collect();
    Ok(ConditionImage { width: w, height: h, labels: out_labels, rgb, depth: out_depth, camera: *camera })
}

/// Pixel counts per label `0..=24`.
pub fn label_histogram(image: &ConditionImage) -> [u64; NUM_PARTS + 1] {
    let mut counts = [0u64; NUM_PARTS + 1];
    for &l in &image.labels {
        counts[l as usize] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{default_template, PoseParams, ShapeParams};

    #[test]
    fn published_palette_matches_table() {
        let csv = include_str!("../../../docs/palette.csv");
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), NUM_PARTS + 1);
        for (i, row) in rows.iter().enumerate() {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[0].parse::<usize>().unwrap(), i);
            let rgb = [2, 3, 4].map(|c| cols[c].parse::<u8>().unwrap());
            assert_eq!(rgb, PALETTE[i], "row {i}");
        }
    }

    fn hsv_to_rgb8(h: f64) -> [u8; 3] {
        let sector = (h / 60.0).floor();
        let f = h / 60.0 - sector;
        let (v, q, t) = (1.0, 1.0 - f, f);
        let (r, g, b) = match sector as i32 {
            0 => (v, t, 0.0),
            1 => (q, v, 0.0),
            2 => (0.0, v, t),
            3 => (0.0, q, v),
            4 => (t, 0.0, v),
            _ => (v, 0.0, q),
        };
        [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
    }

    #[test]
    fn palette_matches_hsv_definition() {
        assert_eq!(PALETTE[0], [0, 0, 0]);
        for i in 1..=NUM_PARTS {
            assert_eq!(PALETTE[i], hsv_to_rgb8((i - 1) as f64 / 24.0 * 360.0), "label {i}");
        }
        for i in 0..=NUM_PARTS {
            assert_eq!(palette_label(PALETTE[i]), Some(i as u8));
        }
    }

    #[test]
    fn spherical_camera_conventions() {
        let c = Camera::from_spherical(2.0, 0.0, 0.0, Vec3::zeros(), 45.0, 8, 8).unwrap();
        assert!((c.position() - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        let f = c.frame().unwrap();
        assert!((f.forward - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let c = Camera::from_spherical(2.0, 180.0, 0.0, Vec3::zeros(), 45.0, 8, 8).unwrap();
        assert!((c.position() - Vec3::new(-2.0, 0.0, 0.0)).norm() < 1e-12);
        let c = Camera::from_spherical(1.4, 37.0, 20.0, Vec3::zeros(), 45.0, 8, 8).unwrap();
        assert!((c.position().norm() - 1.4).abs() < 1e-9);
        assert!(Camera::from_spherical(0.0, 0.0, 0.0, Vec3::zeros(), 45.0, 8, 8).is_err());
        assert!(Camera::from_spherical(1.0, 0.0, 0.0, Vec3::zeros(), 180.0, 8, 8).is_err());
    }

    #[test]
    fn straight_down_camera_has_valid_frame() {
        let c = Camera::from_spherical(2.0, 0.0, 90.0, Vec3::zeros(), 45.0, 8, 8).unwrap();
        let f = c.frame().unwrap();
        assert!((f.right.norm() - 1.0).abs() < 1e-12);
        assert!(f.right.dot(&f.forward).abs() < 1e-12);
    }

    #[test]
    fn projection_and_rays_agree() {
        let c = Camera::from_spherical(2.0, 30.0, 15.0, Vec3::new(0.1, 0.0, 0.0), 50.0, 16, 12).unwrap();
        let f = c.frame().unwrap();
        let d = f.ray_dir(3, 7, 16, 12);
        let p = f.position + d * 1.7;
        let (sx, sy, _) = f.project(&p, 16, 12);
        assert!((sx - 3.5).abs() < 1e-9 && (sy - 7.5).abs() < 1e-9);
    }

    #[test]
    fn empty_mesh_is_background() {
        let body = PosedBody { vertices: vec![], faces: vec![], joints: vec![], per_joint_transforms: vec![] };
        let c = Camera::from_spherical(2.0, 90.0, 0.0, Vec3::zeros(), 45.0, 8, 8).unwrap();
        let img = rasterize_condition(&body, &[], &c).unwrap();
        assert!(img.labels.iter().all(|&l| l == 0));
        assert_eq!(label_histogram(&img)[0], 64);
        assert!(img.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn center_triangle_label() {
        // Camera at +z looking at the origin; a triangle around the origin in the z=0 plane.
        let body = PosedBody {
            vertices: vec![Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, -0.5, 0.0), Vec3::new(0.0, 0.5, 0.0)],
            faces: vec![[0, 1, 2]],
            joints: vec![],
            per_joint_transforms: vec![],
        };
        let c = Camera::from_spherical(2.0, 90.0, 0.0, Vec3::zeros(), 45.0, 9, 9).unwrap();
        let img = rasterize_condition(&body, &[7], &c).unwrap();
        assert_eq!(img.labels[4 * 9 + 4], 7);
        assert_eq!(img.rgb[4 * 9 + 4], PALETTE[7]);
        assert!((img.depth[4 * 9 + 4] - 2.0).abs() < 1e-12);
        assert_eq!(img.labels[0], 0);
    }

    #[test]
    fn nearer_triangle_wins() {
        let tri = |z: f64| [Vec3::new(-1.0, -1.0, z), Vec3::new(1.0, -1.0, z), Vec3::new(0.0, 1.0, z)];
        let mut vertices = tri(0.3).to_vec();
        vertices.extend(tri(-0.3));
        let body = PosedBody { vertices, faces: vec![[3, 4, 5], [0, 2, 1]], joints: vec![], per_joint_transforms: vec![] };
        let c = Camera::from_spherical(3.0, 90.0, 0.0, Vec3::zeros(), 45.0, 16, 16).unwrap();
        let img = rasterize_condition(&body, &[9, 3], &c).unwrap();
        let hist = label_histogram(&img);
        assert!(hist[3] > 0);
        assert_eq!(img.labels[8 * 16 + 8], 3);
    }

    #[test]
    fn front_and_back_views_differ() {
        let t = default_template();
        let body = t.pose(&ShapeParams::zeros(), &PoseParams::a_pose(40.0)).unwrap();
        let target = body.centroid();
        let front = Camera::from_spherical(2.0, 90.0, 0.0, target, 45.0, 64, 64).unwrap();
        let back = Camera::from_spherical(2.0, 270.0, 0.0, target, 45.0, 64, 64).unwrap();
        let hf = label_histogram(&rasterize_condition(&body, &t.face_part_labels, &front).unwrap());
        let hb = label_histogram(&rasterize_condition(&body, &t.face_part_labels, &back).unwrap());
        assert_ne!(hf, hb);
        assert!(hf[crate::body_model::part::TORSO_FRONT as usize] > hb[crate::body_model::part::TORSO_FRONT as usize]);
        assert!(hb[crate::body_model::part::TORSO_BACK as usize] > hf[crate::body_model::part::TORSO_BACK as usize]);
        assert_eq!(hf.iter().sum::<u64>(), 64 * 64);
    }

    #[test]
    fn rendering_is_deterministic_and_depth_bounded() {
        let t = default_template();
        let body = t.pose(&ShapeParams::zeros(), &PoseParams::a_pose(40.0)).unwrap();
        let c = Camera::from_spherical(1.8, 33.0, 12.0, body.centroid(), 50.0, 48, 40).unwrap();
        let a = rasterize_condition(&body, &t.face_part_labels, &c).unwrap();
        let b = rasterize_condition(&body, &t.face_part_labels, &c).unwrap();
        assert_eq!(a, b);
        let (lo, hi) = body.bbox().unwrap();
        let diameter = (hi - lo).norm();
        for (l, d) in a.labels.iter().zip(&a.depth) {
            assert_eq!(*l != 0, d.is_finite());
            if *l != 0 {
                assert!(*d >= 1.8 - diameter && *d <= 1.8 + diameter);
            }
        }
        let rebuilt = ConditionImage::from_labels(a.width, a.height, a.labels.clone(), c).unwrap();
        assert_eq!(rebuilt.rgb, a.rgb);
    }

    #[test]
    fn histogram_survives_palette_round_trip() {
        let t = default_template();
        let body = t.pose(&ShapeParams::zeros(), &PoseParams::a_pose(40.0)).unwrap();
        let c = Camera::from_spherical(2.0, 60.0, 10.0, body.centroid(), 45.0, 32, 32).unwrap();
        let img = rasterize_condition(&body, &t.face_part_labels, &c).unwrap();
        let decoded: Vec<u8> = img.rgb.iter().map(|&c| palette_label(c).unwrap()).collect();
        let round = ConditionImage::from_labels(32, 32, decoded, c).unwrap();
        assert_eq!(label_histogram(&round), label_histogram(&img));
    }
}
