//! Run configuration: a TOML file plus dotted command-line overrides.
//!
//! Overrides look like `plan.coarse_iters=200` or `smooth.lambda=0`; a bare
//! key sets `true`. The switch `plan.none` replaces the progressive plan with
//! a constant one (no doublings, no shrink, one radius stage, no focus mode).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::body_model::{default_template, BodyTemplate, PoseParams, ShapeParams, NUM_BETAS};
use crate::error::{Error, Result};
use crate::guidance::{NoiseSchedule, Weighting};
use crate::optimize::AdamConfig;
use crate::regularize::SmoothConfig;
use crate::renderer::{Background, RenderSettings};
use crate::schedule::{FocusTargets, StagePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyConfig {
    /// Template JSON; the built-in procedural template when absent.
    pub template: Option<PathBuf>,
    pub beta: Vec<f64>,
    /// Shoulder drop of the default A-pose, degrees.
    pub a_pose_deg: f64,
    /// JSON pose file (`{"xi": [[x, y, z], ...], "beta": [...]}`) overriding the A-pose.
    pub pose_file: Option<PathBuf>,
}

impl Default for BodyConfig {
    fn default() -> Self {
        BodyConfig { template: None, beta: vec![0.0; NUM_BETAS], a_pose_deg: 40.0, pose_file: None }
    }
}

/// Pose file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub xi: Vec<[f64; 3]>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
}

impl BodyConfig {
    pub fn template(&self) -> Result<BodyTemplate> {
        match &self.template {
            Some(path) => BodyTemplate::load_json(path),
            None => Ok(default_template()),
        }
    }

    /// Shape and pose, with the pose file taking precedence over the A-pose.
    pub fn params(&self) -> Result<(ShapeParams, PoseParams)> {
        let mut beta = ShapeParams { beta: self.beta.clone() };
        let pose = match &self.pose_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let file: PoseFile = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("pose file {}: {e}", path.display())))?;
                if let Some(b) = file.beta {
                    beta = ShapeParams { beta: b };
                }
                PoseParams { xi: file.xi }
            }
            None => PoseParams::a_pose(self.a_pose_deg),
        };
        beta.validate()?;
        Ok((beta, pose))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    /// Palette rendering of the condition image (built in).
    Silhouette,
    /// Renders of a reference voxel field from the training camera (built in).
    Target,
    /// Wire-protocol server at `endpoint`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub oracle: OracleKind,
    /// Reference field for the target oracle.
    pub reference: Option<PathBuf>,
    /// `tcp://host:port` or `stdio:program arg ...` for the external oracle.
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub weighting: Weighting,
    /// Passed through to external oracles only.
    pub cfg_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            oracle: OracleKind::Silhouette,
            reference: None,
            endpoint: None,
            timeout_secs: 30.0,
            steps: 1000,
            t_min: 0.02,
            t_max: 0.98,
            weighting: Weighting::OneMinusAlphaBar,
            cfg_scale: 7.5,
        }
    }
}

impl GuidanceConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let mut s = NoiseSchedule::cosine(self.steps);
        s.t_min = self.t_min;
        s.t_max = self.t_max;
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub step_fraction: f64,
    pub early_stop_transmittance: f64,
    /// One random background color per training image.
    pub random_background: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let d = RenderSettings::default();
        RenderConfig {
            step_fraction: d.step_fraction,
            early_stop_transmittance: d.early_stop_transmittance,
            random_background: true,
        }
    }
}

impl RenderConfig {
    pub fn settings(&self, background: Background) -> RenderSettings {
        RenderSettings {
            step_fraction: self.step_fraction,
            early_stop_transmittance: self.early_stop_transmittance,
            background,
            ..RenderSettings::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Padding of the initial cube around the posed body, as a fraction of its largest half-extent.
    pub margin: f64,
    pub density_shift: f64,
    /// Peak added by the body-surface density bias (0 disables it).
    pub bias_strength: f64,
    /// Explicit initial bounds `[xmin, ymin, zmin, xmax, ymax, zmax]`.
    pub bounds: Option<[f64; 6]>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { margin: 0.15, density_shift: crate::voxel_field::DEFAULT_DENSITY_SHIFT, bias_strength: 1.0, bounds: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// Cameras from the progressive plan.
    Random,
    /// A fixed ring of `count` cameras.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub mode: ViewMode,
    pub count: usize,
    pub radius: f64,
    pub elevation_range: (f64, f64),
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig { mode: ViewMode::Random, count: 64, radius: 1.8, elevation_range: (-30.0, 60.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Snapshot period in iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    pub turntable_views: usize,
    pub turntable_resolution: usize,
    /// Loss curve sampling period.
    pub log_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            snapshot_every: 500,
            turntable_views: 4,
            turntable_resolution: 128,
            log_every: 10,
        }
    }
}

/// Everything one `generate` run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt: String,
    pub seed: u64,
    pub body: BodyConfig,
    pub plan: StagePlan,
    pub focus: FocusTargets,
    pub smooth: SmoothConfig,
    pub optimizer: AdamConfig,
    pub guidance: GuidanceConfig,
    pub render: RenderConfig,
    pub init: InitConfig,
    pub views: ViewConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prompt: "a 3D avatar of a person".into(),
            seed: 0,
            body: BodyConfig::default(),
            plan: StagePlan::default(),
            focus: FocusTargets::default(),
            smooth: SmoothConfig::default(),
            optimizer: AdamConfig::default(),
            guidance: GuidanceConfig::default(),
            render: RenderConfig::default(),
            init: InitConfig::default(),
            views: ViewConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Splits `key=value` (or a bare `key`) into an override pair.
pub fn parse_override(arg: &str) -> (String, Option<String>) {
    let arg = arg.trim_start_matches("--");
    match arg.split_once('=') {
        Some((k, v)) => (k.to_string(), Some(v.to_string())),
        None => (arg.to_string(), None),
    }
}

fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.into())),
        Err(_) => Value::String(text.into()),
    }
}

fn apply_override(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order, and validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, Option<String>)]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            let v = value.as_deref().map(parse_value).unwrap_or(Value::Boolean(true));
            apply_override(&mut table, key, v)?;
        }
        let none = match table.get_mut("plan").and_then(Value::as_table_mut) {
            Some(plan) => match plan.remove("none") {
                Some(Value::Boolean(b)) => b,
                Some(other) => return Err(Error::Config(format!("plan.none must be a boolean, got {other}"))),
                None => false,
            },
            None => false,
        };
        let mut config: RunConfig = match table.try_into() {
            Ok(c) => c,
            Err(e) => {
                let e: toml::de::Error = e;
                // Re-parse the file alone for a located message when it is the culprit.
                if let Err(located) = toml::from_str::<RunConfig>(text) {
                    if located.message() == e.message() {
                        return Err(Error::Config(located.to_string()));
                    }
                }
                return Err(Error::Config(e.to_string()));
            }
        };
        if none {
            let keep = config.plan.clone();
            config.plan = StagePlan {
                elevation_range: keep.elevation_range,
                fov_y: keep.fov_y,
                resolution: keep.resolution,
                focus_resolution: keep.focus_resolution,
                bbox_threshold: keep.bbox_threshold,
                ..StagePlan::none(keep.final_n_v, keep.coarse_iters)
            };
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, Option<String>)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.plan.validate().map_err(cfg)?;
        self.focus.validate(crate::body_model::NUM_JOINTS).map_err(cfg)?;
        self.smooth.validate().map_err(cfg)?;
        self.optimizer.validate().map_err(cfg)?;
        self.guidance.schedule()?;
        self.render.settings(Background::Color([1.0; 3])).validate().map_err(cfg)?;
        if self.body.beta.len() != NUM_BETAS {
            return Err(Error::Config(format!("body.beta needs {NUM_BETAS} entries")));
        }
        match self.guidance.oracle {
            OracleKind::Target if self.guidance.reference.is_none() => {
                return Err(Error::Config("target oracle needs guidance.reference".into()))
            }
            OracleKind::External if self.guidance.endpoint.is_none() => {
                return Err(Error::Config("external oracle needs guidance.endpoint".into()))
            }
            _ => {}
        }
        if self.views.mode == ViewMode::Fixed && (self.views.count == 0 || !(self.views.radius > 0.0)) {
            return Err(Error::Config("fixed views need count > 0 and radius > 0".into()));
        }
        if !(self.init.margin >= 0.0) || !(self.init.bias_strength >= 0.0) {
            return Err(Error::Config("init.margin and init.bias_strength must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(args: &[&str]) -> Vec<(String, Option<String>)> {
        args.iter().map(|a| parse_override(a)).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.plan.coarse_iters, 5000);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = "seed = 3\n[smooth]\nlambda = 0.5\n";
        let c = RunConfig::from_toml_str(
            text,
            &ov(&["--smooth.lambda=0", "seed=9", "--plan.coarse_iters=200", "--prompt=a knight", "--render.random_background=false"]),
        )
        .unwrap();
        assert_eq!(c.smooth.lambda, 0.0);
        assert_eq!(c.seed, 9);
        assert_eq!(c.plan.coarse_iters, 200);
        assert_eq!(c.prompt, "a knight");
        assert!(!c.render.random_background);
    }

    #[test]
    fn plan_none_disables_progression() {
        let c = RunConfig::from_toml_str("[plan]\nfinal_n_v = 32768\n", &ov(&["--plan.none"])).unwrap();
        assert!(c.plan.grid_double_steps.is_empty());
        assert_eq!(c.plan.bbox_shrink_step, None);
        assert_eq!(c.plan.focus_start_step, None);
        assert_eq!(c.plan.radius_stages.len(), 1);
        assert_eq!(c.plan.final_n_v, 32768);
        let c = RunConfig::from_toml_str("", &ov(&["--plan.none=false"])).unwrap();
        assert_eq!(c.plan, StagePlan::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_toml_str("seed = 1\nprompt = \n", &[]).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = RunConfig::from_toml_str("seed = 1\n[smooth]\nlamda = 2\n", &[]).unwrap_err().to_string();
        assert!(err.contains("lamda") && err.contains("line 3"), "{err}");
        assert!(RunConfig::from_toml_str("", &ov(&["--smooth.k_g=4"])).is_err());
        assert!(RunConfig::from_toml_str("", &ov(&["--guidance.oracle=\"target\""])).is_err());
        assert!(RunConfig::from_toml_str("", &ov(&["--seed.x=1"])).is_err());
    }

    #[test]
    fn bare_string_override_values() {
        let c = RunConfig::from_toml_str("", &ov(&["--guidance.oracle=external", "--guidance.endpoint=tcp://127.0.0.1:9"]))
            .unwrap();
        assert_eq!(c.guidance.oracle, OracleKind::External);
        assert_eq!(c.guidance.endpoint.as_deref(), Some("tcp://127.0.0.1:9"));
    }
}
