//! Progressive generation plan: voxel-count doubling, bounding-box shrink,
//! staged camera radii and close-up "focus" cameras on body regions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Camera;
use crate::Vec3;

/// How camera radius ranges evolve across stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RadiusMode {
    /// Use `radius_stages` verbatim.
    Explicit,
    /// Scale the first stage by `(1 - fraction)^stage`.
    Shrink { fraction: f64 },
}

/// Every progressive-schedule checkpoint and range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub grid_double_steps: Vec<usize>,
    pub bbox_shrink_step: Option<usize>,
    pub bbox_threshold: f64,
    pub radius_stages: Vec<(f64, f64)>,
    pub radius_stage_steps: Vec<usize>,
    pub radius_mode: RadiusMode,
    pub focus_start_step: Option<usize>,
    pub focus_probability: f64,
    pub final_n_v: usize,
    pub coarse_iters: usize,
    /// Elevation band of regular cameras, degrees.
    pub elevation_range: (f64, f64),
    pub fov_y: f64,
    /// Side length of regular renders, pixels.
    pub resolution: usize,
    /// Side length of focus-mode renders, pixels.
    pub focus_resolution: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            grid_double_steps: vec![500, 1500, 2000],
            bbox_shrink_step: Some(3000),
            bbox_threshold: 0.1,
            radius_stages: vec![(1.4, 2.1), (1.0, 1.5), (0.8, 1.2)],
            radius_stage_steps: vec![1000, 2000],
            radius_mode: RadiusMode::Explicit,
            focus_start_step: Some(1000),
            focus_probability: 0.3,
            final_n_v: 160 * 160 * 160,
            coarse_iters: 5000,
            elevation_range: (-10.0, 60.0),
            fov_y: 45.0,
            resolution: 64,
            focus_resolution: 512,
        }
    }
}

impl StagePlan {
    /// No progressive strategy: constant grid, no shrink, single radius stage, no focus mode.
    pub fn none(final_n_v: usize, coarse_iters: usize) -> Self {
        let d = StagePlan::default();
        StagePlan {
            grid_double_steps: Vec::new(),
            bbox_shrink_step: None,
            radius_stages: vec![d.radius_stages[0]],
            radius_stage_steps: Vec::new(),
            focus_start_step: None,
            focus_probability: 0.0,
            final_n_v,
            coarse_iters,
            ..d
        }
    }

    /// Divides every checkpoint (and the iteration count) by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor.max(1);
        StagePlan {
            grid_double_steps: self.grid_double_steps.iter().map(|s| s / f).collect(),
            bbox_shrink_step: self.bbox_shrink_step.map(|s| s / f),
            radius_stage_steps: self.radius_stage_steps.iter().map(|s| s / f).collect(),
            focus_start_step: self.focus_start_step.map(|s| s / f),
            coarse_iters: self.coarse_iters / f,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.grid_double_steps) {
            return Err(Error::Config("grid_double_steps must be strictly increasing".into()));
        }
        if !increasing(&self.radius_stage_steps) {
            return Err(Error::Config("radius_stage_steps must be strictly increasing".into()));
        }
        if self.radius_stages.is_empty() {
            return Err(Error::Config("at least one radius stage is required".into()));
        }
        if self.radius_stages.iter().any(|(lo, hi)| !(*lo > 0.0 && lo < hi)) {
            return Err(Error::Config("radius stages need 0 < r_min < r_max".into()));
        }
        if self.radius_stages.windows(2).any(|w| w[1].0 > w[0].0 || w[1].1 > w[0].1) {
            return Err(Error::Config("radius stages must not grow".into()));
        }
        match self.radius_mode {
            RadiusMode::Explicit if self.radius_stage_steps.len() + 1 != self.radius_stages.len() => {
                return Err(Error::Config(format!(
                    "{} radius stages need {} transition steps, got {}",
                    self.radius_stages.len(),
                    self.radius_stages.len() - 1,
                    self.radius_stage_steps.len()
                )));
            }
            RadiusMode::Shrink { fraction } if !(0.0..1.0).contains(&fraction) => {
                return Err(Error::Config("radius shrink fraction must lie in [0, 1)".into()));
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.focus_probability) {
            return Err(Error::Config("focus_probability must lie in [0, 1]".into()));
        }
        if !(self.bbox_threshold > 0.0) {
            return Err(Error::Config("bbox_threshold must be positive".into()));
        }
        if self.final_n_v < 8 {
            return Err(Error::Config("final_n_v must be at least 8".into()));
        }
        if self.elevation_range.0 > self.elevation_range.1 {
            return Err(Error::Config("elevation_range must be ordered".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < 180.0) || self.resolution == 0 || self.focus_resolution == 0 {
            return Err(Error::Config("camera fov and resolutions must be valid".into()));
        }
        Ok(())
    }

    /// Number of voxel doublings still ahead at `step`.
    pub fn pending_doublings(&self, step: usize) -> usize {
        self.grid_double_steps.iter().filter(|&&s| s > step).count()
    }
}

/// Target voxel count at `step`: `final_n_v / 2^(doublings still pending)`.
pub fn grid_plan(step: usize, plan: &StagePlan) -> usize {
    (plan.final_n_v >> plan.pending_doublings(step)).max(8)
}

/// Index of the radius stage active at `step`.
pub fn radius_stage(step: usize, plan: &StagePlan) -> usize {
    plan.radius_stage_steps.iter().filter(|&&s| s <= step).count()
}

/// Camera-radius range active at `step`.
pub fn radius_range(step: usize, plan: &StagePlan) -> (f64, f64) {
    let stage = radius_stage(step, plan);
    match plan.radius_mode {
        RadiusMode::Explicit => plan.radius_stages[stage.min(plan.radius_stages.len() - 1)],
        RadiusMode::Shrink { fraction } => {
            let k = (1.0 - fraction).powi(stage as i32);
            let (lo, hi) = plan.radius_stages[0];
            (lo * k, hi * k)
        }
    }
}

/// Regular training camera around `target`.
pub fn sample_camera(step: usize, plan: &StagePlan, target: Vec3, rng: &mut impl Rng) -> Camera {
    let (r_lo, r_hi) = radius_range(step, plan);
    let radius = rng.random_range(r_lo..=r_hi);
    let azimuth = rng.random_range(0.0..360.0);
    let (e_lo, e_hi) = plan.elevation_range;
    let elevation = if e_hi > e_lo { rng.random_range(e_lo..=e_hi) } else { e_lo };
    Camera {
        radius,
        azimuth,
        elevation,
        target,
        fov_y: plan.fov_y,
        width: plan.resolution,
        height: plan.resolution,
    }
}

/// A named body region for close-up cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusRegion {
    pub name: String,
    pub joints: Vec<usize>,
    /// Camera distance range to the region centroid.
    pub distance: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusTargets {
    pub regions: Vec<FocusRegion>,
}

impl Default for FocusTargets {
    fn default() -> Self {
        let r = |name: &str, joints: &[usize], distance: (f64, f64)| FocusRegion {
            name: name.into(),
            joints: joints.to_vec(),
            distance,
        };
        FocusTargets {
            regions: vec![
                r("head", &[15], (0.35, 0.5)),
                r("left_hand", &[20, 22], (0.25, 0.4)),
                r("right_hand", &[21, 23], (0.25, 0.4)),
                r("torso", &[3, 6, 9], (0.5, 0.8)),
                r("left_foot", &[7, 10], (0.25, 0.4)),
                r("right_foot", &[8, 11], (0.25, 0.4)),
            ],
        }
    }
}

impl FocusTargets {
    pub fn validate(&self, num_joints: usize) -> Result<()> {
        for region in &self.regions {
            if region.joints.is_empty() || region.joints.iter().any(|&j| j >= num_joints) {
                return Err(Error::Config(format!("focus region {:?} has no valid joints", region.name)));
            }
            let (lo, hi) = region.distance;
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("focus region {:?} needs 0 < min <= max distance", region.name)));
            }
        }
        Ok(())
    }

    pub fn centroid(&self, region: usize, joints: &[Vec3]) -> Vec3 {
        let r = &self.regions[region];
        r.joints.iter().map(|&j| joints[j]).sum::<Vec3>() / r.joints.len() as f64
    }
}

/// A focus camera and the region it frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusPick {
    pub camera: Camera,
    pub region: usize,
}

/// Close-up camera on a random body region with probability
/// `focus_probability` once focus mode is active; `None` otherwise.
pub fn focus_camera(
    step: usize,
    plan: &StagePlan,
    targets: &FocusTargets,
    joints: &[Vec3],
    rng: &mut impl Rng,
) -> Option<FocusPick> {
    let start = plan.focus_start_step?;
    if step < start || targets.regions.is_empty() {
        return None;
    }
    if rng.random::<f64>() >= plan.focus_probability {
        return None;
    }
    let region = rng.random_range(0..targets.regions.len());
    let (d_lo, d_hi) = targets.regions[region].distance;
    let radius = if d_hi > d_lo { rng.random_range(d_lo..=d_hi) } else { d_lo };
    let azimuth = rng.random_range(0.0..360.0);
    let (e_lo, e_hi) = plan.elevation_range;
    let elevation = if e_hi > e_lo { rng.random_range(e_lo..=e_hi) } else { e_lo };
    Some(FocusPick {
        camera: Camera {
            radius,
            azimuth,
            elevation,
            target: targets.centroid(region, joints),
            fov_y: plan.fov_y,
            width: plan.focus_resolution,
            height: plan.focus_resolution,
        },
        region,
    })
}
