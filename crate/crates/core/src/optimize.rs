//! Initialization, Adam updates and the coarse score-distillation loop.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::PosedBody;
use crate::config::{GuidanceConfig, OracleKind, RunConfig, ViewMode};
use crate::error::{invalid, Error, Result};
use crate::guidance::{
    sample_noise, sds_pixel_grad, ExternalOracle, GuidanceOracle, GuidanceRequest, NoiseSchedule, SilhouetteOracle,
    TargetImageOracle,
};
use crate::image_io::ImageRgb;
use crate::raster::{rasterize_condition, Camera};
use crate::regularize::{add_smoothness_grad, field_smoothness};
use crate::renderer::{render, render_backward, Background, FieldGrad, RenderSettings};
use crate::schedule::{focus_camera, grid_plan, radius_range, radius_stage, sample_camera};
use crate::voxel_field::{dims_for, raw_for_density, voxel_size, Bounds, VoxelField};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_density: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate factor reached at the last coarse iteration; the decay
    /// is exponential in between. 1 keeps the rates constant.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr_density: 0.1, lr_color: 0.05, beta1: 0.9, beta2: 0.99, eps: 1e-8, lr_decay: 1.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_density >= 0.0 && self.lr_color >= 0.0) {
            return invalid("learning rates must be >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return invalid("moment decay rates must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return invalid("adam epsilon must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return invalid("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }

    /// Rates for iteration `step` of `total`.
    pub fn at_step(&self, step: usize, total: usize) -> AdamConfig {
        let k = self.lr_decay.powf(step as f64 / total.max(1) as f64);
        AdamConfig { lr_density: self.lr_density * k, lr_color: self.lr_color * k, ..self.clone() }
    }
}

/// Field plus first/second moments, always on the field's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub field: VoxelField,
    pub m_density: Vec<f64>,
    pub v_density: Vec<f64>,
    pub m_color: Vec<[f64; 3]>,
    pub v_color: Vec<[f64; 3]>,
    /// Accepted updates (drives bias correction).
    pub steps: u64,
    pub rejected: usize,
}

impl OptimState {
    pub fn new(field: VoxelField) -> Self {
        let n = field.len();
        OptimState {
            field,
            m_density: vec![0.0; n],
            v_density: vec![0.0; n],
            m_color: vec![[0.0; 3]; n],
            v_color: vec![[0.0; 3]; n],
            steps: 0,
            rejected: 0,
        }
    }

    /// Resamples the field and both moment grids onto a new grid.
    pub fn resample_to(&mut self, bounds: Bounds, dims: [usize; 3]) -> Result<()> {
        let old = self.field.geometry();
        let field = self.field.resample_to(bounds, dims)?;
        let new = field.geometry();
        let resample_rgb = |values: &[[f64; 3]]| -> Vec<[f64; 3]> {
            let ch: Vec<Vec<f64>> = (0..3)
                .map(|c| old.resample_scalar(&values.iter().map(|v| v[c]).collect::<Vec<_>>(), &new))
                .collect();
            (0..new.len()).map(|i| [ch[0][i], ch[1][i], ch[2][i]]).collect()
        };
        self.m_density = old.resample_scalar(&self.m_density, &new);
        self.v_density = old.resample_scalar(&self.v_density, &new);
        self.m_color = resample_rgb(&self.m_color);
        self.v_color = resample_rgb(&self.v_color);
        self.field = field;
        Ok(())
    }
}

/// One Adam update with bias correction. Moments decay everywhere; a
/// parameter moves only where its gradient is nonzero, so cells no ray
/// reached keep their values. Returns `false` (state untouched) for
/// non-finite gradients.
pub fn adaptive_step(state: &mut OptimState, grad: &FieldGrad, cfg: &AdamConfig) -> Result<bool> {
    let n = state.field.len();
    if grad.density_raw.len() != n || grad.color.len() != n {
        return invalid(format!("gradient has {} cells, field has {n}", grad.density_raw.len()));
    }
    if !grad.is_finite() {
        state.rejected += 1;
        return Ok(false);
    }
    state.steps += 1;
    let t = state.steps as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        if g != 0.0 {
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    };
    let f = &mut state.field;
    for i in 0..n {
        update(&mut f.density_raw[i], &mut state.m_density[i], &mut state.v_density[i], grad.density_raw[i], cfg.lr_density);
        for c in 0..3 {
            update(&mut f.color[i][c], &mut state.m_color[i][c], &mut state.v_color[i][c], grad.color[i][c], cfg.lr_color);
        }
        f.color[i] = f.color[i].map(|c| c.clamp(0.0, 1.0));
    }
    Ok(true)
}

/// Ellipsoidal density blob: raw `peak * max(0, 1 - |(p - c) / r|^2)` with
/// `c`, `r` the center and half-extents of the posed body's bounding box and
/// `peak` chosen so the activated center density is 1. Colors are mid-gray.
pub fn init_blob(bounds: Bounds, dims: [usize; 3], body: &PosedBody, shift: f64) -> Result<VoxelField> {
    let Some((lo, hi)) = body.bbox() else {
        return invalid("cannot build a blob around an empty body");
    };
    let r = (hi - lo) / 2.0;
    if r.iter().any(|&v| !(v > 1e-9)) {
        return invalid(format!("degenerate body extent {:?}", [r.x, r.y, r.z]));
    }
    let c = (lo + hi) / 2.0;
    let peak = raw_for_density(1.0, shift);
    let mut field = VoxelField::filled(bounds, dims, 0.0, [0.5; 3])?;
    field.shift = shift;
    let g = field.geometry();
    for (idx, raw) in field.density_raw.iter_mut().enumerate() {
        let [i, j, k] = g.coords(idx);
        let q = (g.cell_center(i, j, k) - c).component_div(&r);
        *raw = peak * (1.0 - q.norm_squared()).max(0.0);
    }
    Ok(field)
}

/// Neighborhood radius of the bias, in voxel sizes; beyond it the Gaussian is below 4e-6.
const BIAS_CUTOFF: f64 = 5.0;

/// Adds `strength * exp(-d^2 / (2 s^2))` to the raw density, `d` the distance
/// from a cell center to the nearest body vertex and `s` one voxel size.
/// Distances are resolved exactly within `5 s` by splatting each vertex's
/// neighborhood onto the grid.
pub fn add_body_density_bias(field: &mut VoxelField, vertices: &[Vec3], strength: f64) -> Result<()> {
    if !(strength >= 0.0) {
        return invalid("bias strength must be >= 0");
    }
    if strength == 0.0 || vertices.is_empty() {
        return Ok(());
    }
    let g = field.geometry();
    let cell = g.cell_size();
    let s = cell.min();
    let reach = BIAS_CUTOFF * s;
    let mut best = vec![f64::INFINITY; g.len()];
    for v in vertices {
        let lo = (v.add_scalar(-reach) - g.bounds.min).component_div(&cell);
        let hi = (v.add_scalar(reach) - g.bounds.min).component_div(&cell);
        let range = |a: usize| {
            let first = (lo[a] - 0.5).ceil().max(0.0) as usize;
            let last = ((hi[a] - 0.5).floor()).min(g.dims[a] as f64 - 1.0);
            if last < 0.0 {
                first..0
            } else {
                first..(last as usize + 1)
            }
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    let idx = g.index(i, j, k);
                    let d2 = (g.cell_center(i, j, k) - v).norm_squared();
                    if d2 < best[idx] {
                        best[idx] = d2;
                    }
                }
            }
        }
    }
    for (raw, d2) in field.density_raw.iter_mut().zip(best) {
        if d2.is_finite() {
            *raw += strength * (-d2 / (2.0 * s * s)).exp();
        }
    }
    Ok(())
}

/// Where the per-iteration noise prediction comes from.
pub enum Guidance {
    /// Palette rendering of each iteration's condition image over that image's background.
    Silhouette,
    /// Renders of a reference field from each training camera and background.
    TargetField(Box<VoxelField>),
    /// Any other oracle, queried with the condition image.
    Oracle(Box<dyn GuidanceOracle + Send>),
}

impl std::fmt::Debug for Guidance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Guidance::Silhouette => f.write_str("Silhouette"),
            Guidance::TargetField(r) => write!(f, "TargetField({:?})", r.dims),
            Guidance::Oracle(_) => f.write_str("Oracle(..)"),
        }
    }
}

impl Guidance {
    pub fn from_config(cfg: &GuidanceConfig) -> Result<Self> {
        match cfg.oracle {
            OracleKind::Silhouette => Ok(Guidance::Silhouette),
            OracleKind::Target => {
                let path = cfg.reference.as_ref().ok_or_else(|| Error::Config("missing guidance.reference".into()))?;
                Ok(Guidance::TargetField(Box::new(VoxelField::load(path)?)))
            }
            OracleKind::External => {
                let endpoint = cfg.endpoint.as_ref().ok_or_else(|| Error::Config("missing guidance.endpoint".into()))?;
                let oracle = ExternalOracle::connect(endpoint, Duration::from_secs_f64(cfg.timeout_secs))?;
                Ok(Guidance::Oracle(Box::new(oracle)))
            }
        }
    }
}

/// One entry of the schedule event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    Init { n_v: usize, dims: [usize; 3], bounds: [f64; 6] },
    GridResample { n_v: usize, dims: [usize; 3] },
    BboxShrink { threshold: f64, bounds: [f64; 6], dims: [usize; 3], retained: usize, lost: usize },
    RadiusStage { stage: usize, r_min: f64, r_max: f64 },
    FocusStart { region: String },
    GuidanceSkipped { reason: String },
    StepRejected,
    Snapshot { file: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub step: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// RMS of the SDS pixel factor `w(t) (eps_hat - eps)`.
    pub sds_grad_rms: f64,
    /// Unscaled smoothness loss.
    pub smooth: f64,
    /// Mean squared difference to the oracle's target image, when it has one.
    pub target_mse: Option<f64>,
    pub camera_radius: f64,
    pub focus: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub prompt: String,
    pub seed: u64,
    /// Sub-stream ids of the camera, noise and background generators.
    pub rng_streams: [u64; 3],
    pub iterations: usize,
    pub skipped: usize,
    pub rejected: usize,
    pub degraded: bool,
    pub events: Vec<ScheduleEvent>,
    pub losses: Vec<LossRecord>,
    pub final_dims: [usize; 3],
    pub final_bounds: [f64; 6],
    pub final_smoothness: f64,
    pub elapsed_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn bounds_array(b: &Bounds) -> [f64; 6] {
    [b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z]
}

/// Evenly spaced azimuths at fixed elevation and radius.
pub fn turntable_cameras(
    n_views: usize,
    radius: f64,
    elevation: f64,
    target: Vec3,
    resolution: usize,
    fov_y: f64,
) -> Vec<Camera> {
    (0..n_views)
        .map(|i| Camera {
            radius,
            azimuth: 360.0 * i as f64 / n_views as f64,
            elevation,
            target,
            fov_y,
            width: resolution,
            height: resolution,
        })
        .collect()
}

/// Camera distance that frames `bounds` for the given vertical field of view.
pub fn framing_radius(bounds: &Bounds, fov_y: f64) -> f64 {
    let half = bounds.extent().norm() / 2.0;
    1.1 * half / (fov_y.to_radians() / 2.0).sin()
}

/// White-background renders side by side in one image.
pub fn render_strip(field: &VoxelField, cameras: &[Camera]) -> Result<ImageRgb> {
    let settings = RenderSettings::default();
    let frames = cameras.iter().map(|c| render(field, c, &settings)).collect::<Result<Vec<_>>>()?;
    let (w, h) = cameras.first().map(|c| (c.width, c.height)).unwrap_or((0, 0));
    let mut strip = ImageRgb::filled(w * frames.len(), h, [1.0; 3]);
    for (n, f) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                strip.data[y * strip.width + n * w + x] = f.rgb.data[y * w + x];
            }
        }
    }
    Ok(strip)
}

/// `n` cameras on a golden-angle spiral over an elevation band.
pub fn fixed_views(n: usize, radius: f64, elevation_range: (f64, f64), target: Vec3, resolution: usize, fov_y: f64) -> Vec<Camera> {
    let golden = 180.0 * (3.0 - 5f64.sqrt());
    let (lo, hi) = elevation_range;
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) / n as f64;
            Camera {
                radius,
                azimuth: (golden * i as f64).rem_euclid(360.0),
                elevation: lo + (hi - lo) * s,
                target,
                fov_y,
                width: resolution,
                height: resolution,
            }
        })
        .collect()
}

const CAMERA_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const BACKGROUND_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Reference foreground and alpha for one fixed view.
struct CachedTarget {
    fg: ImageRgb,
    alpha: Vec<f64>,
}

/// Coarse-stage optimizer state machine.
pub struct Trainer {
    pub config: RunConfig,
    pub body: PosedBody,
    pub face_labels: Vec<u8>,
    pub state: OptimState,
    guidance: Guidance,
    schedule: NoiseSchedule,
    camera_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    background_rng: ChaCha8Rng,
    views: Vec<Camera>,
    cache: Vec<Option<CachedTarget>>,
    n_v: usize,
    stage: usize,
    focus_seen: bool,
    skipped: usize,
    events: Vec<ScheduleEvent>,
    losses: Vec<LossRecord>,
}

impl Trainer {
    /// Poses the body from the config and initializes the field.
    pub fn new(config: RunConfig, guidance: Guidance) -> Result<Self> {
        config.validate()?;
        let template = config.body.template()?;
        let (beta, xi) = config.body.params()?;
        let body = template.pose(&beta, &xi)?;
        let field = initial_field(&config, &body)?;
        Self::with_field(config, guidance, body, template.face_part_labels, field)
    }

    /// Starts from an explicit field instead of the blob initialization.
    pub fn with_field(
        config: RunConfig,
        guidance: Guidance,
        body: PosedBody,
        face_labels: Vec<u8>,
        field: VoxelField,
    ) -> Result<Self> {
        config.validate()?;
        field.validate()?;
        let schedule = config.guidance.schedule()?;
        let seed = config.seed;
        let target = body.centroid();
        let views = match config.views.mode {
            ViewMode::Fixed => fixed_views(
                config.views.count,
                config.views.radius,
                config.views.elevation_range,
                target,
                config.plan.resolution,
                config.plan.fov_y,
            ),
            ViewMode::Random => Vec::new(),
        };
        let n_v = grid_plan(0, &config.plan);
        let events = vec![ScheduleEvent {
            step: 0,
            kind: EventKind::Init { n_v, dims: field.dims, bounds: bounds_array(&field.bounds) },
        }];
        Ok(Trainer {
            cache: views.iter().map(|_| None).collect(),
            views,
            body,
            face_labels,
            state: OptimState::new(field),
            guidance,
            schedule,
            camera_rng: stream(seed, CAMERA_STREAM),
            noise_rng: stream(seed, NOISE_STREAM),
            background_rng: stream(seed, BACKGROUND_STREAM),
            n_v,
            stage: 0,
            focus_seen: false,
            skipped: 0,
            events,
            losses: Vec::new(),
            config,
        })
    }

    pub fn field(&self) -> &VoxelField {
        &self.state.field
    }

    pub fn events(&self) -> &[ScheduleEvent] {
        &self.events
    }

    fn log(&mut self, step: usize, kind: EventKind) {
        self.events.push(ScheduleEvent { step, kind });
    }

    /// Grid doublings, bbox shrink and radius-stage bookkeeping for `step`.
    fn apply_schedule(&mut self, step: usize) -> Result<()> {
        let plan = &self.config.plan;
        let n_v = grid_plan(step, plan);
        let shrink = plan.bbox_shrink_step == Some(step);
        if n_v != self.n_v && !shrink {
            let bounds = self.state.field.bounds;
            let dims = dims_for(&bounds, voxel_size(&bounds, n_v)?);
            self.state.resample_to(bounds, dims)?;
            self.n_v = n_v;
            self.log(step, EventKind::GridResample { n_v, dims });
        }
        if shrink {
            let threshold = self.config.plan.bbox_threshold;
            let old = self.state.field.clone();
            let bounds = old.shrink_bbox(threshold)?;
            let dims = dims_for(&bounds, voxel_size(&bounds, n_v)?);
            let g = old.geometry();
            let (mut retained, mut lost) = (0, 0);
            for idx in 0..old.len() {
                if old.sigma(idx) > threshold {
                    let [i, j, k] = g.coords(idx);
                    if bounds.contains(&g.cell_center(i, j, k)) {
                        retained += 1;
                    } else {
                        lost += 1;
                    }
                }
            }
            if lost > 0 {
                return Err(Error::InvalidInput(format!("bbox shrink would drop {lost} dense cells")));
            }
            self.state.resample_to(bounds, dims)?;
            self.n_v = n_v;
            self.log(step, EventKind::BboxShrink { threshold, bounds: bounds_array(&bounds), dims, retained, lost });
        }
        let stage = radius_stage(step, &self.config.plan);
        if stage != self.stage {
            self.stage = stage;
            let (r_min, r_max) = radius_range(step, &self.config.plan);
            self.log(step, EventKind::RadiusStage { stage, r_min, r_max });
        }
        Ok(())
    }

    /// Picks this iteration's camera; the second value is the view index for fixed views.
    fn pick_camera(&mut self, step: usize) -> (Camera, Option<usize>, Option<String>) {
        if !self.views.is_empty() {
            let i = self.camera_rng.random_range(0..self.views.len());
            return (self.views[i], Some(i), None);
        }
        let plan = &self.config.plan;
        if let Some(pick) = focus_camera(step, plan, &self.config.focus, &self.body.joints, &mut self.camera_rng) {
            let name = self.config.focus.regions[pick.region].name.clone();
            return (pick.camera, None, Some(name));
        }
        (sample_camera(step, plan, self.body.centroid(), &mut self.camera_rng), None, None)
    }

    fn target_image(&mut self, camera: &Camera, view: Option<usize>, bg: [f64; 3]) -> Result<Option<ImageRgb>> {
        let Guidance::TargetField(reference) = &self.guidance else {
            return Ok(None);
        };
        let black = self.config.render.settings(Background::Color([0.0; 3]));
        let compute = || -> Result<CachedTarget> {
            let out = render(reference, camera, &black)?;
            Ok(CachedTarget { fg: out.rgb, alpha: out.alpha })
        };
        let fresh;
        let cached = match view {
            Some(i) => {
                if self.cache[i].is_none() {
                    self.cache[i] = Some(compute()?);
                }
                self.cache[i].as_ref().expect("filled above")
            }
            None => {
                fresh = compute()?;
                &fresh
            }
        };
        let data = cached
            .fg
            .data
            .iter()
            .zip(&cached.alpha)
            .map(|(f, a)| [0, 1, 2].map(|c| f[c] + (1.0 - a) * bg[c]))
            .collect();
        Ok(Some(ImageRgb { width: cached.fg.width, height: cached.fg.height, data }))
    }

    /// Runs iteration `step`.
    pub fn step(&mut self, step: usize) -> Result<()> {
        self.apply_schedule(step)?;
        let (camera, view, focus) = self.pick_camera(step);
        if let Some(region) = &focus {
            if !self.focus_seen {
                self.focus_seen = true;
                self.log(step, EventKind::FocusStart { region: region.clone() });
            }
        }
        let background = if self.config.render.random_background {
            Background::RandomPerImage { seed: self.background_rng.next_u64() }
        } else {
            Background::Color([1.0; 3])
        };
        let bg = background.resolve();
        let settings = self.config.render.settings(background);

        let x = render(&self.state.field, &camera, &settings)?.rgb;
        let condition = rasterize_condition(&self.body, &self.face_labels, &camera)?;
        if condition.camera != camera {
            return Err(Error::InvalidInput("condition image and render use different cameras".into()));
        }
        let t = self.schedule.sample_t(&mut self.noise_rng);
        let noise = sample_noise(camera.width, camera.height, &mut self.noise_rng);

        let target = self.target_image(&camera, view, bg)?;
        let mut silhouette = SilhouetteOracle { background: bg };
        let target_for_log = match (&target, &self.guidance) {
            (Some(t), _) => Some(t.clone()),
            (None, Guidance::Silhouette) => Some(silhouette.target_image(&condition)),
            _ => None,
        };
        let mut point_mass;
        let oracle: &mut dyn GuidanceOracle = match (&mut self.guidance, target) {
            (Guidance::TargetField(_), Some(t)) => {
                point_mass = TargetImageOracle::new(t);
                &mut point_mass
            }
            (Guidance::Oracle(o), _) => o.as_mut(),
            _ => &mut silhouette,
        };
        let request = GuidanceRequest {
            x: &x,
            t,
            noise: &noise,
            condition: Some(&condition),
            prompt: &self.config.prompt,
            cfg_scale: self.config.guidance.cfg_scale,
        };
        let pixel_grad = match sds_pixel_grad(&request, oracle, &self.schedule, self.config.guidance.weighting) {
            Ok(g) => g,
            Err(Error::GuidanceUnavailable(reason)) => {
                self.skipped += 1;
                self.log(step, EventKind::GuidanceSkipped { reason });
                return Ok(());
            }
            Err(e) => return Err(e),
        };

        let mut grad = render_backward(&self.state.field, &camera, &settings, &pixel_grad)?;
        let log_now = self.config.output.log_every > 0 && step % self.config.output.log_every == 0;
        let smooth = if self.config.smooth.lambda > 0.0 {
            Some(add_smoothness_grad(&mut grad, &self.state.field, &self.config.smooth)?)
        } else if log_now {
            Some(field_smoothness(&self.state.field, &self.config.smooth)?)
        } else {
            None
        };
        let rates = self.config.optimizer.at_step(step, self.config.plan.coarse_iters);
        if !adaptive_step(&mut self.state, &grad, &rates)? {
            self.log(step, EventKind::StepRejected);
        }
        if log_now {
            let n = (pixel_grad.data.len() * 3) as f64;
            let sds_grad_rms = (pixel_grad.data.iter().flatten().map(|g| g * g).sum::<f64>() / n).sqrt();
            let target_mse = target_for_log.map(|t| t.rms_diff(&x).powi(2));
            self.losses.push(LossRecord {
                step,
                sds_grad_rms,
                smooth: smooth.unwrap_or(0.0),
                target_mse,
                camera_radius: camera.radius,
                focus: focus.is_some(),
            });
        }
        Ok(())
    }

    /// Writes the field and a turntable strip for `step` under `dir`.
    pub fn snapshot(&mut self, step: usize, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let name = format!("snapshot_{step:05}");
        let field = &self.state.field;
        field.save(&dir.join(format!("{name}.vxf")))?;
        let out = &self.config.output;
        if out.turntable_views > 0 {
            let cams = turntable_cameras(
                out.turntable_views,
                framing_radius(&field.bounds, self.config.plan.fov_y),
                15.0,
                field.bounds.center(),
                out.turntable_resolution,
                self.config.plan.fov_y,
            );
            render_strip(field, &cams)?.save_png(&dir.join(format!("{name}.png")))?;
        }
        self.log(step, EventKind::Snapshot { file: format!("{name}.vxf") });
        Ok(())
    }

    /// Runs all coarse iterations; snapshots go to `out` when given.
    pub fn run(mut self, out: Option<&Path>) -> Result<(VoxelField, RunReport)> {
        let start = Instant::now();
        let iters = self.config.plan.coarse_iters;
        let every = self.config.output.snapshot_every;
        for step in 0..iters {
            self.step(step)?;
            if let Some(dir) = out {
                if every > 0 && (step + 1) % every == 0 {
                    self.snapshot(step + 1, dir)?;
                }
            }
        }
        let field = self.state.field;
        let final_smoothness = field_smoothness(&field, &self.config.smooth)?;
        let report = RunReport {
            prompt: self.config.prompt.clone(),
            seed: self.config.seed,
            rng_streams: [CAMERA_STREAM, NOISE_STREAM, BACKGROUND_STREAM],
            iterations: iters,
            skipped: self.skipped,
            rejected: self.state.rejected,
            degraded: self.skipped * 10 > iters,
            events: self.events,
            losses: self.losses,
            final_dims: field.dims,
            final_bounds: bounds_array(&field.bounds),
            final_smoothness,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        Ok((field, report))
    }
}

/// Initial bounds (config or a padded cube around the body) and blob field.
pub fn initial_field(config: &RunConfig, body: &PosedBody) -> Result<VoxelField> {
    let bounds = match config.init.bounds {
        Some(b) => Bounds::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))?,
        None => {
            let (lo, hi) = body.bbox().ok_or_else(|| Error::InvalidInput("empty body".into()))?;
            let half = (hi - lo).max() / 2.0 * (1.0 + config.init.margin);
            Bounds::cube((lo + hi) / 2.0, half)?
        }
    };
    let n_v = grid_plan(0, &config.plan);
    let dims = dims_for(&bounds, voxel_size(&bounds, n_v)?);
    let mut field = init_blob(bounds, dims, body, config.init.density_shift)?;
    add_body_density_bias(&mut field, &body.vertices, config.init.bias_strength)?;
    Ok(field)
}

/// Runs the coarse stage described by `config`.
pub fn train_coarse(config: RunConfig, guidance: Guidance, out: Option<&Path>) -> Result<(VoxelField, RunReport)> {
    Trainer::new(config, guidance)?.run(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{default_template, PoseParams, ShapeParams};
    use crate::voxel_field::activate_density;

    fn body() -> PosedBody {
        default_template().pose(&ShapeParams::zeros(), &PoseParams::a_pose(40.0)).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [2, 2, 2], 0.3, [0.2; 3]).unwrap();
        let mut s = OptimState::new(f.clone());
        s.m_density[0] = 0.5;
        s.v_density[0] = 0.25;
        s.steps = 3;
        adaptive_step(&mut s, &FieldGrad::zeros(8), &AdamConfig::default()).unwrap();
        assert_eq!(s.field, f);
        assert!((s.m_density[0] - 0.45).abs() < 1e-15);
        assert!((s.v_density[0] - 0.2475).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [2, 2, 2], 0.0, [0.5; 3]).unwrap();
        let mut s = OptimState::new(f);
        let cfg = AdamConfig::default();
        for _ in 0..500 {
            let mut g = FieldGrad::zeros(8);
            g.density_raw[0] = 2.0 * (s.field.density_raw[0] - 3.0);
            adaptive_step(&mut s, &g, &cfg).unwrap();
        }
        assert!((s.field.density_raw[0] - 3.0).abs() < 1e-4, "{}", s.field.density_raw[0]);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [2, 2, 2], 0.0, [0.5; 3]).unwrap();
        let mut s = OptimState::new(f);
        let mut g = FieldGrad::zeros(8);
        g.density_raw[2] = f64::NAN;
        let before = s.clone();
        assert!(!adaptive_step(&mut s, &g, &AdamConfig::default()).unwrap());
        assert_eq!(s.field, before.field);
        assert_eq!(s.rejected, 1);
        assert!(adaptive_step(&mut s, &FieldGrad::zeros(7), &AdamConfig::default()).is_err());
    }

    #[test]
    fn moments_follow_resampling() {
        let f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [4, 4, 4], 0.0, [0.5; 3]).unwrap();
        let mut s = OptimState::new(f);
        s.m_density.iter_mut().for_each(|m| *m = 0.7);
        s.resample_to(s.field.bounds, [8, 8, 8]).unwrap();
        assert_eq!(s.field.dims, [8, 8, 8]);
        assert_eq!(s.m_density.len(), 512);
        assert_eq!(s.v_color.len(), 512);
        assert!(s.m_density.iter().all(|m| (m - 0.7).abs() < 1e-12));
    }

    #[test]
    fn blob_shape() {
        let b = body();
        let (lo, hi) = b.bbox().unwrap();
        let bounds = Bounds::cube((lo + hi) / 2.0, 0.6).unwrap();
        let f = init_blob(bounds, [41, 41, 41], &b, -2.0).unwrap();
        let g = f.geometry();
        let center = g.index(20, 20, 20);
        let max = f.density_raw.iter().cloned().fold(f64::MIN, f64::max);
        assert!(f.density_raw[center] >= max - 1e-9);
        assert!((activate_density(max, -2.0) - 1.0).abs() < 0.01);
        assert_eq!(f.density_raw[0], 0.0);
        // per-axis extent of the nonzero region tracks the body box
        let cell = g.cell_size();
        for a in 0..3 {
            let mut lo_i = usize::MAX;
            let mut hi_i = 0;
            for idx in 0..f.len() {
                if f.density_raw[idx] > 0.0 {
                    let c = g.coords(idx)[a];
                    lo_i = lo_i.min(c);
                    hi_i = hi_i.max(c);
                }
            }
            let extent = (hi_i - lo_i + 1) as f64 * cell[a];
            assert!((extent - (hi[a] - lo[a])).abs() <= 2.0 * cell[a], "axis {a}: {extent}");
        }
    }

    #[test]
    fn degenerate_body_rejected() {
        let mut b = body();
        b.vertices.iter_mut().for_each(|v| v.z = 0.0);
        assert!(init_blob(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [4, 4, 4], &b, -2.0).is_err());
    }

    #[test]
    fn density_bias_profile() {
        let bounds = Bounds::cube(Vec3::zeros(), 1.0).unwrap();
        let dims = [20, 20, 20];
        let base = VoxelField::filled(bounds, dims, 0.0, [0.5; 3]).unwrap();
        let g = base.geometry();
        let vertex = g.cell_center(10, 10, 10);
        let mut f = base.clone();
        add_body_density_bias(&mut f, &[vertex], 0.0).unwrap();
        assert_eq!(f, base);
        add_body_density_bias(&mut f, &[vertex], 2.0).unwrap();
        assert_eq!(f.density_raw[g.index(10, 10, 10)], 2.0);
        let s = 0.1;
        let one = f.density_raw[g.index(11, 10, 10)];
        assert!((one - 2.0 * (-0.5f64).exp()).abs() < 1e-12);
        // beyond three voxel sizes the bias is below 1% of the strength
        for idx in 0..f.len() {
            let [i, j, k] = g.coords(idx);
            if (g.cell_center(i, j, k) - vertex).norm() > 3.05 * s {
                assert!(f.density_raw[idx] < 0.02);
            }
        }
    }

    #[test]
    fn turntable_spacing() {
        let cams = turntable_cameras(4, 2.0, 10.0, Vec3::zeros(), 8, 45.0);
        let az: Vec<f64> = cams.iter().map(|c| c.azimuth).collect();
        assert_eq!(az, vec![0.0, 90.0, 180.0, 270.0]);
        let views = fixed_views(64, 1.8, (-30.0, 60.0), Vec3::zeros(), 8, 45.0);
        assert_eq!(views.len(), 64);
        assert!(views.iter().all(|c| (-30.0..=60.0).contains(&c.elevation) && (0.0..360.0).contains(&c.azimuth)));
    }

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.plan = crate::schedule::StagePlan::none(16 * 16 * 16, 6);
        c.plan.resolution = 12;
        c.output.log_every = 1;
        c
    }

    #[test]
    fn silhouette_run_is_finite_and_deterministic() {
        let run = || train_coarse(small_config(), Guidance::Silhouette, None).unwrap();
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra.losses, rb.losses);
        assert!(ra.losses.iter().all(|l| l.sds_grad_rms.is_finite() && l.smooth.is_finite()));
        assert!(!ra.degraded);
        assert_eq!(ra.losses.len(), 6);
    }

    struct Flaky(usize);
    impl GuidanceOracle for Flaky {
        fn predict_noise(&mut self, q: &crate::guidance::NoiseQuery<'_>) -> Result<ImageRgb> {
            self.0 += 1;
            if self.0 % 2 == 0 {
                Err(Error::GuidanceUnavailable("offline".into()))
            } else {
                Ok(q.z_t.clone())
            }
        }
    }

    #[test]
    fn unavailable_guidance_is_skipped_and_flags_degraded() {
        let (_, report) = train_coarse(small_config(), Guidance::Oracle(Box::new(Flaky(0))), None).unwrap();
        assert_eq!(report.skipped, 3);
        assert!(report.degraded);
        let skips = report.events.iter().filter(|e| matches!(e.kind, EventKind::GuidanceSkipped { .. })).count();
        assert_eq!(skips, 3);
    }
}
