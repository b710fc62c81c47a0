//! Parametric articulated body: shape blendshapes, joint regression and
//! linear blend skinning, with a 24-part label per face.
//!
//! The default template is a procedurally generated humanoid (one closed
//! sub-mesh per body segment) about one unit tall, standing in a T-pose with
//! +y up, +x towards the body's left and +z towards the front. Joint order and
//! parents follow the usual 24-joint SMPL layout; part labels follow the
//! DensePose 24-part convention.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{Mat3, Vec3};

/// Number of joints of the default skeleton.
pub const NUM_JOINTS: usize = 24;
/// Number of DensePose body-part labels (labels are `1..=24`).
pub const NUM_PARTS: usize = 24;
/// Number of shape coefficients.
pub const NUM_BETAS: usize = 10;

/// Parent of each joint in the default skeleton; `-1` marks the root.
pub const SMPL_PARENTS: [i32; NUM_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

/// DensePose part labels.
pub mod part {
    pub const TORSO_BACK: u8 = 1;
    pub const TORSO_FRONT: u8 = 2;
    pub const RIGHT_HAND: u8 = 3;
    pub const LEFT_HAND: u8 = 4;
    pub const LEFT_FOOT: u8 = 5;
    pub const RIGHT_FOOT: u8 = 6;
    pub const UPPER_LEG_RIGHT_BACK: u8 = 7;
    pub const UPPER_LEG_LEFT_BACK: u8 = 8;
    pub const UPPER_LEG_RIGHT_FRONT: u8 = 9;
    pub const UPPER_LEG_LEFT_FRONT: u8 = 10;
    pub const LOWER_LEG_RIGHT_BACK: u8 = 11;
    pub const LOWER_LEG_LEFT_BACK: u8 = 12;
    pub const LOWER_LEG_RIGHT_FRONT: u8 = 13;
    pub const LOWER_LEG_LEFT_FRONT: u8 = 14;
    pub const UPPER_ARM_LEFT_INSIDE: u8 = 15;
    pub const UPPER_ARM_RIGHT_INSIDE: u8 = 16;
    pub const UPPER_ARM_LEFT_OUTSIDE: u8 = 17;
    pub const UPPER_ARM_RIGHT_OUTSIDE: u8 = 18;
    pub const LOWER_ARM_LEFT_INSIDE: u8 = 19;
    pub const LOWER_ARM_RIGHT_INSIDE: u8 = 20;
    pub const LOWER_ARM_LEFT_OUTSIDE: u8 = 21;
    pub const LOWER_ARM_RIGHT_OUTSIDE: u8 = 22;
    pub const HEAD_RIGHT: u8 = 23;
    pub const HEAD_LEFT: u8 = 24;
}

/// Canonical (rest-pose) body mesh with blendshapes, skinning weights and skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub face_part_labels: Vec<u8>,
    /// `NUM_BETAS` per-vertex displacement fields.
    pub shape_basis: Vec<Vec<Vec3>>,
    /// Optional pose-corrective fields, `9 * (K - 1)` of them when present.
    pub pose_basis: Option<Vec<Vec<Vec3>>>,
    /// Per-vertex weights over the `K` joints.
    pub skin_weights: Vec<Vec<f64>>,
    pub canonical_joints: Vec<Vec3>,
    pub parents: Vec<i32>,
    /// Per-beta joint displacements. When absent, joints follow the
    /// skinning-weighted mean of the vertex displacement fields.
    pub joint_shape_basis: Option<Vec<Vec<Vec3>>>,
}

/// Shape coefficients `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros() -> Self {
        Self { beta: vec![0.0; NUM_BETAS] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != NUM_BETAS {
            return invalid(format!("beta must have {NUM_BETAS} entries, got {}", self.beta.len()));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return invalid("beta contains non-finite values");
        }
        Ok(())
    }
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self::zeros()
    }
}

/// Per-joint axis-angle rotations `xi` (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub xi: Vec<[f64; 3]>,
}

impl PoseParams {
    pub fn identity(num_joints: usize) -> Self {
        Self { xi: vec![[0.0; 3]; num_joints] }
    }

    /// Canonical A-pose: both shoulders lowered by `arm_drop_deg` from the T-pose.
    pub fn a_pose(arm_drop_deg: f64) -> Self {
        let mut pose = Self::identity(NUM_JOINTS);
        let a = arm_drop_deg.to_radians();
        pose.xi[16] = [0.0, 0.0, -a];
        pose.xi[17] = [0.0, 0.0, a];
        pose
    }

    pub fn validate(&self, num_joints: usize) -> Result<()> {
        if self.xi.len() != num_joints {
            return invalid(format!("pose must have {num_joints} rotations, got {}", self.xi.len()));
        }
        if self.xi.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("pose contains non-finite values");
        }
        Ok(())
    }
}

/// Rigid per-joint transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl JointTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Output of skinning.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub joints: Vec<Vec3>,
    /// Skinning transforms `G_k`, already relative to the rest pose.
    pub per_joint_transforms: Vec<JointTransform>,
}

impl PosedBody {
    /// Axis-aligned bounding box of the posed vertices.
    pub fn bbox(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    pub fn centroid(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Writes the posed mesh as ASCII OBJ.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Axis-angle to rotation matrix (Rodrigues). The zero vector maps to the exact identity.
pub fn rodrigues(axis_angle: &[f64; 3]) -> Mat3 {
    let w = Vec3::new(axis_angle[0], axis_angle[1], axis_angle[2]);
    let theta = w.norm();
    if theta == 0.0 {
        return Mat3::identity();
    }
    let k = w / theta;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

impl BodyTemplate {
    pub fn num_joints(&self) -> usize {
        self.canonical_joints.len()
    }

    /// Checks every structural invariant of the template.
    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        let k = self.canonical_joints.len();
        if k == 0 {
            return invalid("template has no joints");
        }
        if self.faces.len() != self.face_part_labels.len() {
            return invalid("face_part_labels length differs from face count");
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= nv)) {
            return invalid(format!("face {f:?} references a vertex beyond {nv}"));
        }
        if let Some(l) = self.face_part_labels.iter().find(|&&l| l == 0 || l as usize > NUM_PARTS) {
            return invalid(format!("part label {l} outside 1..={NUM_PARTS}"));
        }
        if self.shape_basis.len() != NUM_BETAS || self.shape_basis.iter().any(|b| b.len() != nv) {
            return invalid(format!("shape basis must be {NUM_BETAS} fields of {nv} vertices"));
        }
        if let Some(pb) = &self.pose_basis {
            if pb.len() != 9 * (k - 1) || pb.iter().any(|b| b.len() != nv) {
                return invalid(format!("pose basis must be {} fields of {nv} vertices", 9 * (k - 1)));
            }
        }
        if let Some(jb) = &self.joint_shape_basis {
            if jb.len() != NUM_BETAS || jb.iter().any(|b| b.len() != k) {
                return invalid("joint shape basis has wrong dimensions");
            }
        }
        if self.skin_weights.len() != nv {
            return invalid("skin weight row count differs from vertex count");
        }
        check_weights(&self.skin_weights, k)?;
        validate_parents(&self.parents, k)?;
        Ok(())
    }

    /// `T + B_S(beta) + B_P(xi)` per vertex.
    pub fn shape_deform(&self, beta: &ShapeParams, xi: &PoseParams) -> Result<Vec<Vec3>> {
        beta.validate()?;
        if self.shape_basis.len() != beta.beta.len() {
            return invalid("beta length does not match the shape basis");
        }
        xi.validate(self.num_joints())?;
        let mut out = self.vertices.clone();
        for (coef, field) in beta.beta.iter().zip(&self.shape_basis) {
            if *coef == 0.0 {
                continue;
            }
            for (v, d) in out.iter_mut().zip(field) {
                *v += d * *coef;
            }
        }
        if let Some(pose_basis) = &self.pose_basis {
            let features = pose_features(xi);
            for (coef, field) in features.iter().zip(pose_basis) {
                if *coef == 0.0 {
                    continue;
                }
                for (v, d) in out.iter_mut().zip(field) {
                    *v += d * *coef;
                }
            }
        }
        Ok(out)
    }

    /// Joint positions `J(beta)` for the shaped rest pose.
    pub fn pose_joints(&self, beta: &ShapeParams) -> Result<Vec<Vec3>> {
        beta.validate()?;
        let mut joints = self.canonical_joints.clone();
        let derived;
        let basis = match &self.joint_shape_basis {
            Some(b) => b,
            None => {
                derived = self.derived_joint_shape_basis();
                &derived
            }
        };
        for (coef, field) in beta.beta.iter().zip(basis) {
            if *coef == 0.0 {
                continue;
            }
            for (j, d) in joints.iter_mut().zip(field) {
                *j += d * *coef;
            }
        }
        Ok(joints)
    }

    /// Skinning-weighted mean of each shape field, per joint.
    fn derived_joint_shape_basis(&self) -> Vec<Vec<Vec3>> {
        let k = self.num_joints();
        let mut mass = vec![0.0; k];
        for row in &self.skin_weights {
            for (m, w) in mass.iter_mut().zip(row) {
                *m += w;
            }
        }
        self.shape_basis
            .iter()
            .map(|field| {
                let mut acc = vec![Vec3::zeros(); k];
                for (row, d) in self.skin_weights.iter().zip(field) {
                    for (a, w) in acc.iter_mut().zip(row) {
                        *a += d * *w;
                    }
                }
                acc.iter().zip(&mass).map(|(a, m)| if *m > 0.0 { a / *m } else { Vec3::zeros() }).collect()
            })
            .collect()
    }

    /// Full forward model: shape, joints, then skinning.
    pub fn pose(&self, beta: &ShapeParams, xi: &PoseParams) -> Result<PosedBody> {
        let verts = self.shape_deform(beta, xi)?;
        let joints = self.pose_joints(beta)?;
        let mut posed = lbs(&verts, &joints, &self.parents, xi, &self.skin_weights)?;
        posed.faces = self.faces.clone();
        Ok(posed)
    }

    /// Loads a template from the JSON mesh format documented in `docs/formats.md`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: TemplateJson =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("template json: {e}")))?;
        let to_vecs = |v: Vec<[f64; 3]>| v.into_iter().map(Vec3::from).collect::<Vec<_>>();
        let k = raw.joints.len();
        let template = BodyTemplate {
            vertices: to_vecs(raw.vertices),
            faces: raw.faces,
            face_part_labels: raw.face_part_labels,
            shape_basis: raw.shape_basis.into_iter().map(to_vecs).collect(),
            pose_basis: raw.pose_basis.map(|pb| pb.into_iter().map(to_vecs).collect()),
            skin_weights: raw.skin_weights,
            canonical_joints: to_vecs(raw.joints),
            parents: raw.parents.unwrap_or_else(|| SMPL_PARENTS.iter().take(k).copied().collect()),
            joint_shape_basis: raw.joint_shape_basis.map(|jb| jb.into_iter().map(to_vecs).collect()),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let from_vecs = |v: &[Vec3]| v.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        let raw = TemplateJson {
            vertices: from_vecs(&self.vertices),
            faces: self.faces.clone(),
            face_part_labels: self.face_part_labels.clone(),
            shape_basis: self.shape_basis.iter().map(|f| from_vecs(f)).collect(),
            pose_basis: self.pose_basis.as_ref().map(|pb| pb.iter().map(|f| from_vecs(f)).collect()),
            skin_weights: self.skin_weights.clone(),
            joints: from_vecs(&self.canonical_joints),
            parents: Some(self.parents.clone()),
            joint_shape_basis: self
                .joint_shape_basis
                .as_ref()
                .map(|jb| jb.iter().map(|f| from_vecs(f)).collect()),
        };
        serde_json::to_string(&raw).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct TemplateJson {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    face_part_labels: Vec<u8>,
    shape_basis: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose_basis: Option<Vec<Vec<[f64; 3]>>>,
    skin_weights: Vec<Vec<f64>>,
    joints: Vec<[f64; 3]>,
    #[serde(default)]
    parents: Option<Vec<i32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_shape_basis: Option<Vec<Vec<[f64; 3]>>>,
}

/// Flattened `(R_k - I)` entries for joints `1..K`.
fn pose_features(xi: &PoseParams) -> Vec<f64> {
    let mut feats = Vec::with_capacity(9 * xi.xi.len().saturating_sub(1));
    for aa in xi.xi.iter().skip(1) {
        let r = rodrigues(aa) - Mat3::identity();
        for row in 0..3 {
            for col in 0..3 {
                feats.push(r[(row, col)]);
            }
        }
    }
    feats
}

fn check_weights(weights: &[Vec<f64>], k: usize) -> Result<()> {
    for (i, row) in weights.iter().enumerate() {
        if row.len() != k {
            return invalid(format!("skin weight row {i} has {} entries, expected {k}", row.len()));
        }
        if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid(format!("skin weight row {i} has negative or non-finite entries"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return invalid(format!("skin weight row {i} sums to {sum}, not 1"));
        }
    }
    Ok(())
}

fn validate_parents(parents: &[i32], k: usize) -> Result<()> {
    if parents.len() != k {
        return invalid("parent list length differs from joint count");
    }
    if parents.iter().filter(|&&p| p < 0).count() != 1 || parents[0] >= 0 {
        return invalid("skeleton must have exactly one root, at joint 0");
    }
    for (i, &p) in parents.iter().enumerate().skip(1) {
        // Parents preceding children rules out cycles and makes a single
        // root-to-leaf pass sufficient.
        if p < 0 || p as usize >= i {
            return invalid(format!("joint {i} has parent {p}; parents must precede children"));
        }
    }
    Ok(())
}

/// Linear blend skinning.
///
/// Computes `v_o = sum_k w_k G_k(xi, J) v` in displacement form,
/// `v_o = v + sum_k w_k ((R_k - I)(v - j_k) + (p_k - j_k))`, which is
/// algebraically identical for normalized weights and makes the identity
/// pose reproduce its input bit for bit.
pub fn lbs(
    canonical_vertices: &[Vec3],
    joints: &[Vec3],
    parents: &[i32],
    xi: &PoseParams,
    weights: &[Vec<f64>],
) -> Result<PosedBody> {
    let k = joints.len();
    xi.validate(k)?;
    validate_parents(parents, k)?;
    if weights.len() != canonical_vertices.len() {
        return invalid("skin weight row count differs from vertex count");
    }
    check_weights(weights, k)?;

    let mut rot = Vec::with_capacity(k);
    let mut offset = Vec::with_capacity(k); // p_k - j_k
    for j in 0..k {
        let local = rodrigues(&xi.xi[j]);
        if parents[j] < 0 {
            rot.push(local);
            offset.push(Vec3::zeros());
        } else {
            let p = parents[j] as usize;
            let global = rot[p] * local;
            let delta = offset[p] + (rot[p] - Mat3::identity()) * (joints[j] - joints[p]);
            rot.push(global);
            offset.push(delta);
        }
    }

    let posed_joints: Vec<Vec3> = joints.iter().zip(&offset).map(|(j, d)| j + d).collect();
    let transforms: Vec<JointTransform> = (0..k)
        .map(|j| JointTransform { rotation: rot[j], translation: posed_joints[j] - rot[j] * joints[j] })
        .collect();
    let rot_minus_i: Vec<Mat3> = rot.iter().map(|r| r - Mat3::identity()).collect();

    let vertices = canonical_vertices
        .iter()
        .zip(weights)
        .map(|(v, row)| {
            let mut disp = Vec3::zeros();
            for (j, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                disp += (rot_minus_i[j] * (v - joints[j]) + offset[j]) * w;
            }
            v + disp
        })
        .collect();

    Ok(PosedBody { vertices, faces: Vec::new(), joints: posed_joints, per_joint_transforms: transforms })
}

// ---------------------------------------------------------------------------
// Procedural template
// ---------------------------------------------------------------------------

/// Rest-pose joint positions of the procedural humanoid (T-pose, ~1 unit tall).
fn default_joints() -> Vec<Vec3> {
    let j = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    vec![
        j(0.0, 0.0, 0.0),
        j(0.06, -0.05, 0.0),
        j(-0.06, -0.05, 0.0),
        j(0.0, 0.07, 0.0),
        j(0.065, -0.26, 0.0),
        j(-0.065, -0.26, 0.0),
        j(0.0, 0.15, 0.0),
        j(0.065, -0.45, 0.0),
        j(-0.065, -0.45, 0.0),
        j(0.0, 0.22, 0.0),
        j(0.065, -0.48, 0.07),
        j(-0.065, -0.48, 0.07),
        j(0.0, 0.31, 0.0),
        j(0.04, 0.28, 0.0),
        j(-0.04, 0.28, 0.0),
        j(0.0, 0.38, 0.0),
        j(0.11, 0.28, 0.0),
        j(-0.11, 0.28, 0.0),
        j(0.26, 0.28, 0.0),
        j(-0.26, 0.28, 0.0),
        j(0.40, 0.28, 0.0),
        j(-0.40, 0.28, 0.0),
        j(0.46, 0.28, 0.0),
        j(-0.46, 0.28, 0.0),
    ]
}

enum Shape {
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    Ellipsoid { center: Vec3, radii: Vec3 },
}

#[derive(Clone, Copy)]
enum Labeling {
    /// Front label when the outward normal faces +z.
    FrontBack { front: u8, back: u8 },
    /// Inside label when the T-pose normal faces -y (towards the torso in an A-pose).
    InsideOutside { inside: u8, outside: u8 },
    /// Left label when the face lies on the +x side.
    LeftRight { left: u8, right: u8 },
    Single(u8),
}

struct Segment {
    shape: Shape,
    labeling: Labeling,
    /// Joint whose bone dominates the skinning of this segment.
    joint: usize,
}

const RING_SEGMENTS: usize = 14;
const LAT_RINGS: usize = 10;

fn default_segments(joints: &[Vec3]) -> Vec<Segment> {
    use part::*;
    let j = |i: usize| joints[i];
    let cap = |a: Vec3, b: Vec3, radius: f64| Shape::Capsule { a, b, radius };
    let ell = |c: Vec3, r: Vec3| Shape::Ellipsoid { center: c, radii: r };
    let fb = |front, back| Labeling::FrontBack { front, back };
    let io = |inside, outside| Labeling::InsideOutside { inside, outside };
    let down = Vec3::new(0.0, -0.015, 0.0);
    vec![
        Segment { shape: ell(Vec3::new(0.0, 0.15, 0.0), Vec3::new(0.12, 0.17, 0.075)), labeling: fb(TORSO_FRONT, TORSO_BACK), joint: 6 },
        Segment { shape: ell(Vec3::new(0.0, -0.02, 0.0), Vec3::new(0.11, 0.08, 0.07)), labeling: fb(TORSO_FRONT, TORSO_BACK), joint: 0 },
        Segment { shape: cap(j(12) - Vec3::new(0.0, 0.03, 0.0), j(15), 0.03), labeling: Labeling::LeftRight { left: HEAD_LEFT, right: HEAD_RIGHT }, joint: 12 },
        Segment { shape: ell(Vec3::new(0.0, 0.42, 0.01), Vec3::new(0.065, 0.08, 0.075)), labeling: Labeling::LeftRight { left: HEAD_LEFT, right: HEAD_RIGHT }, joint: 15 },
        Segment { shape: cap(j(1), j(4), 0.05), labeling: fb(UPPER_LEG_LEFT_FRONT, UPPER_LEG_LEFT_BACK), joint: 1 },
        Segment { shape: cap(j(2), j(5), 0.05), labeling: fb(UPPER_LEG_RIGHT_FRONT, UPPER_LEG_RIGHT_BACK), joint: 2 },
        Segment { shape: cap(j(4), j(7), 0.04), labeling: fb(LOWER_LEG_LEFT_FRONT, LOWER_LEG_LEFT_BACK), joint: 4 },
        Segment { shape: cap(j(5), j(8), 0.04), labeling: fb(LOWER_LEG_RIGHT_FRONT, LOWER_LEG_RIGHT_BACK), joint: 5 },
        Segment { shape: cap(j(7) + down, j(10), 0.03), labeling: Labeling::Single(LEFT_FOOT), joint: 7 },
        Segment { shape: cap(j(8) + down, j(11), 0.03), labeling: Labeling::Single(RIGHT_FOOT), joint: 8 },
        Segment { shape: cap(j(16), j(18), 0.035), labeling: io(UPPER_ARM_LEFT_INSIDE, UPPER_ARM_LEFT_OUTSIDE), joint: 16 },
        Segment { shape: cap(j(17), j(19), 0.035), labeling: io(UPPER_ARM_RIGHT_INSIDE, UPPER_ARM_RIGHT_OUTSIDE), joint: 17 },
        Segment { shape: cap(j(18), j(20), 0.03), labeling: io(LOWER_ARM_LEFT_INSIDE, LOWER_ARM_LEFT_OUTSIDE), joint: 18 },
        Segment { shape: cap(j(19), j(21), 0.03), labeling: io(LOWER_ARM_RIGHT_INSIDE, LOWER_ARM_RIGHT_OUTSIDE), joint: 19 },
        Segment { shape: ell((j(20) + j(22)) * 0.5, Vec3::new(0.045, 0.02, 0.035)), labeling: Labeling::Single(LEFT_HAND), joint: 20 },
        Segment { shape: ell((j(21) + j(23)) * 0.5, Vec3::new(0.045, 0.02, 0.035)), labeling: Labeling::Single(RIGHT_HAND), joint: 21 },
    ]
}

/// Closed latitude/longitude mesh for one segment.
fn segment_mesh(shape: &Shape) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let (axis, u, v) = match shape {
        Shape::Capsule { a, b, .. } => {
            let axis = (b - a).normalize();
            let helper = if axis.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
            let u = axis.cross(&helper).normalize();
            (axis, u, axis.cross(&u))
        }
        Shape::Ellipsoid { .. } => (Vec3::y(), Vec3::z(), Vec3::x()),
    };
    let point = |phi: f64, lambda: f64, upper: bool| -> Vec3 {
        let dir = axis * phi.cos() + (u * lambda.cos() + v * lambda.sin()) * phi.sin();
        match shape {
            Shape::Capsule { a, b, radius } => (if upper { b } else { a }) + dir * *radius,
            Shape::Ellipsoid { center, radii } => center + dir.component_mul(radii),
        }
    };
    let mut verts = Vec::new();
    let mut rings: Vec<usize> = Vec::new();
    verts.push(point(0.0, 0.0, true));
    let half = LAT_RINGS / 2;
    let capsule = matches!(shape, Shape::Capsule { .. });
    for i in 1..LAT_RINGS {
        let phi = std::f64::consts::PI * i as f64 / LAT_RINGS as f64;
        let passes: &[bool] = if capsule && i == half { &[true, false] } else if i <= half { &[true] } else { &[false] };
        for &upper in passes {
            rings.push(verts.len());
            for s in 0..RING_SEGMENTS {
                let lambda = 2.0 * std::f64::consts::PI * s as f64 / RING_SEGMENTS as f64;
                verts.push(point(phi, lambda, upper || !capsule));
            }
        }
    }
    let bottom = verts.len();
    verts.push(point(std::f64::consts::PI, 0.0, false));

    let n = RING_SEGMENTS;
    let mut faces = Vec::new();
    for s in 0..n {
        faces.push([0, rings[0] + s, rings[0] + (s + 1) % n]);
    }
    for w in rings.windows(2) {
        for s in 0..n {
            let (a0, a1) = (w[0] + s, w[0] + (s + 1) % n);
            let (b0, b1) = (w[1] + s, w[1] + (s + 1) % n);
            faces.push([a0, b0, b1]);
            faces.push([a0, b1, a1]);
        }
    }
    let last = *rings.last().expect("at least one ring");
    for s in 0..n {
        faces.push([bottom, last + (s + 1) % n, last + s]);
    }
    if signed_volume(&verts, &faces) < 0.0 {
        for f in &mut faces {
            f.swap(1, 2);
        }
    }
    (verts, faces)
}

pub(crate) fn signed_volume(verts: &[Vec3], faces: &[[usize; 3]]) -> f64 {
    faces.iter().map(|f| verts[f[0]].dot(&verts[f[1]].cross(&verts[f[2]]))).sum::<f64>() / 6.0
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

/// Bone segment for joint `j`: towards the mean of its children, or a point for leaves.
fn bone(joints: &[Vec3], parents: &[i32], j: usize) -> (Vec3, Vec3) {
    let children: Vec<usize> = (0..joints.len()).filter(|&c| parents[c] == j as i32).collect();
    let end = match j {
        0 => joints[3],
        9 => joints[12],
        _ if children.is_empty() => joints[j],
        _ => children.iter().map(|&c| joints[c]).sum::<Vec3>() / children.len() as f64,
    };
    (joints[j], end)
}

/// Procedural shape fields: global scale, per-axis widths, limb lengths and smooth bumps.
fn shape_field(index: usize, p: &Vec3) -> Vec3 {
    match index {
        0 => p * 0.05,
        1 => Vec3::new(p.x * 0.08, 0.0, 0.0),
        2 => Vec3::new(0.0, 0.0, p.z * 0.1),
        3 => Vec3::new(0.0, p.y * 0.06, 0.0),
        4 => Vec3::new(0.0, (p.y.min(-0.05) + 0.05) * 0.1, 0.0),
        5 => Vec3::new(p.x.signum() * (p.x.abs() - 0.11).max(0.0) * 0.1, 0.0, 0.0),
        6 => Vec3::new(p.x * 0.05 * (1.0 - (p.y - 0.15).powi(2) / 0.1).max(0.0), 0.0, 0.0),
        7 => Vec3::new(0.0, 0.0, p.z * 0.08 * (1.0 - (p.y - 0.15).powi(2) / 0.1).max(0.0)),
        8 => Vec3::new(p.x * 0.04 * (p.y < -0.05) as u8 as f64, 0.0, p.z * 0.04 * (p.y < -0.05) as u8 as f64),
        _ => Vec3::new(0.0, 0.02 * (p.y * 6.0).sin(), 0.0),
    }
}

/// The default procedurally generated humanoid template.
pub fn default_template() -> BodyTemplate {
    let joints = default_joints();
    let parents: Vec<i32> = SMPL_PARENTS.to_vec();
    let segments = default_segments(&joints);

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut labels = Vec::new();
    let mut owner = Vec::new();
    for seg in &segments {
        let (verts, fs) = segment_mesh(&seg.shape);
        let base = vertices.len();
        for f in &fs {
            let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
            let normal = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            let label = match seg.labeling {
                Labeling::FrontBack { front, back } => {
                    if normal.z >= 0.0 {
                        front
                    } else {
                        back
                    }
                }
                Labeling::InsideOutside { inside, outside } => {
                    if normal.y < 0.0 {
                        inside
                    } else {
                        outside
                    }
                }
                Labeling::LeftRight { left, right } => {
                    if centroid.x >= 0.0 {
                        left
                    } else {
                        right
                    }
                }
                Labeling::Single(l) => l,
            };
            faces.push([f[0] + base, f[1] + base, f[2] + base]);
            labels.push(label);
        }
        owner.extend(std::iter::repeat_n(seg.joint, verts.len()));
        vertices.extend(verts);
    }

    let k = joints.len();
    let bones: Vec<(Vec3, Vec3)> = (0..k).map(|j| bone(&joints, &parents, j)).collect();
    let skin_weights = vertices
        .iter()
        .zip(&owner)
        .map(|(p, &own)| {
            let mut candidates = vec![own];
            if parents[own] >= 0 {
                candidates.push(parents[own] as usize);
            }
            candidates.extend((0..k).filter(|&c| parents[c] == own as i32));
            let mut row = vec![0.0; k];
            for &c in &candidates {
                let d = segment_distance(p, &bones[c].0, &bones[c].1);
                let w = 1.0 / (d + 1e-3).powi(4);
                row[c] += if c == own { 2.0 * w } else { w };
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= sum);
            row
        })
        .collect();

    let shape_basis = (0..NUM_BETAS).map(|i| vertices.iter().map(|p| shape_field(i, p)).collect()).collect();
    let joint_shape_basis = (0..NUM_BETAS).map(|i| joints.iter().map(|p| shape_field(i, p)).collect()).collect();

    BodyTemplate {
        vertices,
        faces,
        face_part_labels: labels,
        shape_basis,
        pose_basis: None,
        skin_weights,
        canonical_joints: joints,
        parents,
        joint_shape_basis: Some(joint_shape_basis),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_template() -> BodyTemplate {
        // Two joints on the x axis and a three-vertex mesh.
        let vertices = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), Vec3::new(2.0, 1.0, 0.0)];
        BodyTemplate {
            shape_basis: (0..NUM_BETAS).map(|_| vec![Vec3::zeros(); 3]).collect(),
            vertices,
            faces: vec![[0, 1, 2]],
            face_part_labels: vec![7],
            pose_basis: None,
            skin_weights: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            canonical_joints: vec![Vec3::zeros(), Vec3::new(1.5, 0.0, 0.0)],
            parents: vec![-1, 0],
            joint_shape_basis: None,
        }
    }

    #[test]
    fn default_template_is_valid() {
        let t = default_template();
        t.validate().unwrap();
        assert_eq!(t.num_joints(), 24);
        assert!(t.vertices.len() > 1500 && t.vertices.len() < 3000, "{}", t.vertices.len());
        let mut seen = [false; NUM_PARTS + 1];
        for &l in &t.face_part_labels {
            seen[l as usize] = true;
        }
        assert!(seen[1..].iter().all(|&s| s), "every part label is used");
        // outward winding
        assert!(signed_volume(&t.vertices, &t.faces) > 0.0);
    }

    #[test]
    fn zero_params_reproduce_template() {
        let t = default_template();
        let v = t.shape_deform(&ShapeParams::zeros(), &PoseParams::identity(24)).unwrap();
        assert_eq!(v, t.vertices);
        assert_eq!(t.pose_joints(&ShapeParams::zeros()).unwrap(), t.canonical_joints);
    }

    #[test]
    fn single_shape_component_shifts_vertices() {
        let mut t = tiny_template();
        t.shape_basis[0] = vec![Vec3::new(0.1, 0.0, 0.0); 3];
        let mut beta = ShapeParams::zeros();
        beta.beta[0] = 1.0;
        let v = t.shape_deform(&beta, &PoseParams::identity(2)).unwrap();
        for (a, b) in v.iter().zip(&t.vertices) {
            assert!((a - b - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn wrong_beta_length_is_rejected() {
        let t = default_template();
        let beta = ShapeParams { beta: vec![0.0; 9] };
        assert!(matches!(t.shape_deform(&beta, &PoseParams::identity(24)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn shape_deform_is_linear() {
        let t = default_template();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b1 = ShapeParams { beta: (0..10).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let b2 = ShapeParams { beta: (0..10).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (a, b) = (0.7, -1.3);
        let mix = ShapeParams { beta: b1.beta.iter().zip(&b2.beta).map(|(x, y)| a * x + b * y).collect() };
        let xi = PoseParams::identity(24);
        let f1 = t.shape_deform(&b1, &xi).unwrap();
        let f2 = t.shape_deform(&b2, &xi).unwrap();
        let fm = t.shape_deform(&mix, &xi).unwrap();
        for i in 0..t.vertices.len() {
            let expect = f1[i] * a + f2[i] * b - t.vertices[i] * (a + b - 1.0);
            assert!((fm[i] - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn joints_finite_for_random_betas() {
        let t = default_template();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let beta = ShapeParams { beta: (0..10).map(|_| rng.random_range(-2.0..=2.0)).collect() };
            let j = t.pose_joints(&beta).unwrap();
            assert_eq!(j.len(), 24);
            assert!(j.iter().all(|p| p.iter().all(|c| c.is_finite())));
        }
    }

    #[test]
    fn derived_joint_basis_matches_identity_case() {
        let mut t = default_template();
        t.joint_shape_basis = None;
        assert_eq!(t.pose_joints(&ShapeParams::zeros()).unwrap(), t.canonical_joints);
        let mut beta = ShapeParams::zeros();
        beta.beta[0] = 1.0;
        let j = t.pose_joints(&beta).unwrap();
        assert!(j.iter().zip(&t.canonical_joints).any(|(a, b)| a != b));
    }

    #[test]
    fn identity_pose_is_exact_identity() {
        let t = default_template();
        let posed = lbs(&t.vertices, &t.canonical_joints, &t.parents, &PoseParams::identity(24), &t.skin_weights)
            .unwrap();
        assert_eq!(posed.vertices, t.vertices);
        assert_eq!(posed.joints, t.canonical_joints);
    }

    #[test]
    fn quarter_turn_about_z() {
        let verts = [Vec3::new(1.0, 0.0, 0.0)];
        let mut xi = PoseParams::identity(1);
        xi.xi[0] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let posed = lbs(&verts, &[Vec3::zeros()], &[-1], &xi, &[vec![1.0]]).unwrap();
        assert!((posed.vertices[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-6);
        assert!((posed.per_joint_transforms[0].rotation.determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn child_rotation_leaves_ancestor_vertices() {
        let t = tiny_template();
        let mut xi = PoseParams::identity(2);
        xi.xi[1] = [0.3, -1.1, 0.7];
        let posed = lbs(&t.vertices, &t.canonical_joints, &t.parents, &xi, &t.skin_weights).unwrap();
        assert_eq!(posed.vertices[0], t.vertices[0]);
        assert_ne!(posed.vertices[1], t.vertices[1]);
        // brute force: vertex 1 is rigidly rotated about joint 1
        let r = rodrigues(&xi.xi[1]);
        let expect = r * (t.vertices[1] - t.canonical_joints[1]) + t.canonical_joints[1];
        assert!((posed.vertices[1] - expect).norm() < 1e-12);
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let t = tiny_template();
        let mut w = t.skin_weights.clone();
        w[2] = vec![0.5, 0.6];
        assert!(lbs(&t.vertices, &t.canonical_joints, &t.parents, &PoseParams::identity(2), &w).is_err());
    }

    #[test]
    fn root_rotation_is_equivariant() {
        let t = default_template();
        let base = PoseParams::a_pose(40.0);
        let rest = t.pose(&ShapeParams::zeros(), &base).unwrap();
        let r_aa = [0.2, 0.9, -0.4];
        let r = rodrigues(&r_aa);
        let mut rotated = base.clone();
        rotated.xi[0] = r_aa;
        let moved = t.pose(&ShapeParams::zeros(), &rotated).unwrap();
        let root = t.canonical_joints[0];
        for (a, b) in moved.vertices.iter().zip(&rest.vertices) {
            assert!((a - (r * (b - root) + root)).norm() < 1e-5);
        }
        assert_eq!(moved.faces, rest.faces);
        for g in &moved.per_joint_transforms {
            assert!((g.rotation.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pose_basis_is_applied() {
        let mut t = tiny_template();
        let mut pb = vec![vec![Vec3::zeros(); 3]; 9];
        pb[0] = vec![Vec3::new(0.0, 0.0, 1.0); 3]; // responds to (R_1 - I)[0][0]
        t.pose_basis = Some(pb);
        t.validate().unwrap();
        let mut xi = PoseParams::identity(2);
        assert_eq!(t.shape_deform(&ShapeParams::zeros(), &xi).unwrap(), t.vertices);
        xi.xi[1] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let v = t.shape_deform(&ShapeParams::zeros(), &xi).unwrap();
        assert!((v[0].z + 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let t = default_template();
        let back = BodyTemplate::from_json_str(&t.to_json_string().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn invalid_templates_rejected() {
        let mut t = tiny_template();
        t.face_part_labels[0] = 25;
        assert!(t.validate().is_err());
        let mut t = tiny_template();
        t.faces[0] = [0, 1, 3];
        assert!(t.validate().is_err());
        let mut t = tiny_template();
        t.parents = vec![-1, -1];
        assert!(t.validate().is_err());
    }
}
