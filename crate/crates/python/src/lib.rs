//! Python bindings: fields, cameras, rendering, condition images, mesh export
//! and the coarse training driver.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use voxavatar::body_model::{default_template, PoseParams, ShapeParams};
use voxavatar::config::{parse_override, RunConfig};
use voxavatar::gradcheck::{renderer_gradcheck, smoothness_gradcheck, RendererCheck};
use voxavatar::guidance::NoiseSchedule;
use voxavatar::mesh_export::{bake_colors, export, marching_cubes, MeshFormat, TriangleMesh};
use voxavatar::optimize::{init_blob, train_coarse, Guidance};
use voxavatar::raster::{label_histogram, rasterize_condition, Camera};
use voxavatar::regularize::{field_smoothness, SmoothConfig};
use voxavatar::renderer::{render, Background, RenderSettings};
use voxavatar::voxel_field::{Bounds, VoxelField};
use voxavatar::{Error, Vec3};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::InvalidInput(_) | Error::Config(_) | Error::Format(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct PyCamera {
    inner: Camera,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (radius, azimuth, elevation, target=(0.0, 0.0, 0.0), fov_y=45.0, width=64, height=64))]
    fn new(radius: f64, azimuth: f64, elevation: f64, target: (f64, f64, f64), fov_y: f64, width: usize, height: usize) -> PyResult<Self> {
        let inner = Camera { radius, azimuth, elevation, target: Vec3::new(target.0, target.1, target.2), fov_y, width, height };
        inner.validate().map_err(to_py)?;
        Ok(PyCamera { inner })
    }

    /// World-space camera position.
    fn position(&self) -> (f64, f64, f64) {
        let p = self.inner.position();
        (p.x, p.y, p.z)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!("Camera(radius={}, azimuth={}, elevation={}, fov_y={}, {}x{})", c.radius, c.azimuth, c.elevation, c.fov_y, c.width, c.height)
    }
}

#[pyclass(name = "VoxelField")]
struct PyVoxelField {
    inner: VoxelField,
}

#[pymethods]
impl PyVoxelField {
    /// Uniform grid over `[lo, hi]` with one raw density and color everywhere.
    #[staticmethod]
    #[pyo3(signature = (lo, hi, dims, raw=0.0, color=(0.5, 0.5, 0.5)))]
    fn filled(lo: (f64, f64, f64), hi: (f64, f64, f64), dims: (usize, usize, usize), raw: f64, color: (f64, f64, f64)) -> PyResult<Self> {
        let bounds = Bounds::new(Vec3::new(lo.0, lo.1, lo.2), Vec3::new(hi.0, hi.1, hi.2)).map_err(to_py)?;
        let inner = VoxelField::filled(bounds, [dims.0, dims.1, dims.2], raw, [color.0, color.1, color.2]).map_err(to_py)?;
        Ok(PyVoxelField { inner })
    }

    /// Ellipsoidal blob around the built-in body in an A-pose, on an `n^3` cube.
    #[staticmethod]
    #[pyo3(signature = (n=64, a_pose_deg=40.0, margin=0.15))]
    fn blob(n: usize, a_pose_deg: f64, margin: f64) -> PyResult<Self> {
        let body = default_template().pose(&ShapeParams::zeros(), &PoseParams::a_pose(a_pose_deg)).map_err(to_py)?;
        let (lo, hi) = body.bbox().ok_or_else(|| PyValueError::new_err("empty body"))?;
        let bounds = Bounds::cube((lo + hi) / 2.0, (hi - lo).max() / 2.0 * (1.0 + margin)).map_err(to_py)?;
        let inner = init_blob(bounds, [n; 3], &body, voxavatar::voxel_field::DEFAULT_DENSITY_SHIFT).map_err(to_py)?;
        Ok(PyVoxelField { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVoxelField { inner: VoxelField::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let [x, y, z] = self.inner.dims;
        (x, y, z)
    }

    #[getter]
    fn bounds(&self) -> ((f64, f64, f64), (f64, f64, f64)) {
        let (lo, hi) = (self.inner.bounds.min, self.inner.bounds.max);
        ((lo.x, lo.y, lo.z), (hi.x, hi.y, hi.z))
    }

    /// Raw (pre-activation) densities, x fastest.
    #[getter]
    fn density_raw(&self) -> Vec<f64> {
        self.inner.density_raw.clone()
    }

    #[setter]
    fn set_density_raw(&mut self, values: Vec<f64>) -> PyResult<()> {
        if values.len() != self.inner.len() {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", self.inner.len(), values.len())));
        }
        self.inner.density_raw = values;
        Ok(())
    }

    /// Activated densities, x fastest.
    fn sigma(&self) -> Vec<f64> {
        (0..self.inner.len()).map(|i| self.inner.sigma(i)).collect()
    }

    /// Number of cells with activated density above `threshold`.
    #[pyo3(signature = (threshold=0.1))]
    fn occupied_cells(&self, threshold: f64) -> usize {
        self.inner.occupancy(threshold).iter().filter(|&&o| o).count()
    }

    /// Tight bounds of the cells above `threshold`, padded by one cell.
    #[pyo3(signature = (threshold=0.1))]
    fn shrink_bbox(&self, threshold: f64) -> PyResult<((f64, f64, f64), (f64, f64, f64))> {
        let b = self.inner.shrink_bbox(threshold).map_err(to_py)?;
        Ok(((b.min.x, b.min.y, b.min.z), (b.max.x, b.max.y, b.max.z)))
    }

    /// Smoothness loss of the density gradient field (unscaled).
    fn smoothness(&self) -> PyResult<f64> {
        field_smoothness(&self.inner, &SmoothConfig::default()).map_err(to_py)
    }

    /// Volume render; returns `(width, height, rgb)` with `rgb` row-major interleaved.
    #[pyo3(signature = (camera, background=(1.0, 1.0, 1.0)))]
    fn render(&self, camera: &PyCamera, background: (f64, f64, f64)) -> PyResult<(usize, usize, Vec<f64>)> {
        let settings = RenderSettings { background: Background::Color([background.0, background.1, background.2]), ..Default::default() };
        let out = render(&self.inner, &camera.inner, &settings).map_err(to_py)?;
        Ok((out.rgb.width, out.rgb.height, out.rgb.to_interleaved()))
    }

    /// Marching-cubes surface with baked colors: `(vertices, faces, colors)`.
    #[pyo3(signature = (iso=0.1))]
    fn mesh(&self, iso: f64) -> PyResult<(Vec<(f64, f64, f64)>, Vec<(usize, usize, usize)>, Vec<(f64, f64, f64)>)> {
        let m = self.extract(iso)?;
        Ok((
            m.vertices.iter().map(|v| (v.x, v.y, v.z)).collect(),
            m.faces.iter().map(|f| (f[0], f[1], f[2])).collect(),
            m.colors.iter().map(|c| (c[0], c[1], c[2])).collect(),
        ))
    }

    /// Writes the colored iso-surface as `.obj` or `.ply`.
    #[pyo3(signature = (path, iso=0.1))]
    fn export_mesh(&self, path: PathBuf, iso: f64) -> PyResult<(usize, usize)> {
        let format = MeshFormat::from_path(&path).map_err(to_py)?;
        let m = self.extract(iso)?;
        export(&m, &path, format).map_err(to_py)?;
        Ok((m.vertices.len(), m.faces.len()))
    }

    fn __repr__(&self) -> String {
        format!("VoxelField(dims={:?})", self.inner.dims)
    }
}

impl PyVoxelField {
    fn extract(&self, iso: f64) -> PyResult<TriangleMesh> {
        let mut m = marching_cubes(&self.inner, iso).map_err(to_py)?;
        bake_colors(&mut m, &self.inner);
        Ok(m)
    }
}

/// Part labels (0 = background) of the built-in body seen from `camera`.
#[pyfunction]
#[pyo3(signature = (camera, a_pose_deg=40.0))]
fn condition_labels(camera: &PyCamera, a_pose_deg: f64) -> PyResult<Vec<u8>> {
    let tpl = default_template();
    let body = tpl.pose(&ShapeParams::zeros(), &PoseParams::a_pose(a_pose_deg)).map_err(to_py)?;
    Ok(rasterize_condition(&body, &tpl.face_part_labels, &camera.inner).map_err(to_py)?.labels)
}

/// Pixel count per label `0..=24` of the condition image.
#[pyfunction]
#[pyo3(signature = (camera, a_pose_deg=40.0))]
fn condition_histogram(camera: &PyCamera, a_pose_deg: f64) -> PyResult<Vec<u64>> {
    let tpl = default_template();
    let body = tpl.pose(&ShapeParams::zeros(), &PoseParams::a_pose(a_pose_deg)).map_err(to_py)?;
    Ok(label_histogram(&rasterize_condition(&body, &tpl.face_part_labels, &camera.inner).map_err(to_py)?).to_vec())
}

/// Cumulative signal level `alpha_bar` of the cosine schedule.
#[pyfunction]
#[pyo3(signature = (t, steps=1000))]
fn alpha_bar(t: usize, steps: usize) -> PyResult<f64> {
    NoiseSchedule::cosine(steps).alpha_bar_at(t).map_err(to_py)
}

/// Renderer and smoothness finite-difference checks; `(name, passed, summary)` per check.
#[pyfunction]
#[pyo3(signature = (seed=0, grid=8, image=6))]
fn gradcheck(py: Python<'_>, seed: u64, grid: usize, image: usize) -> PyResult<Vec<(String, bool, String)>> {
    py.detach(|| {
        let opts = RendererCheck { grid, image, ..Default::default() };
        let reports = vec![renderer_gradcheck(seed, &opts)?, smoothness_gradcheck(seed, 8, 1e-3)?];
        Ok(reports.into_iter().map(|r| (r.name.clone(), r.passed, r.summary())).collect())
    })
    .map_err(to_py)
}

/// Runs the coarse stage; returns the run report as JSON.
///
/// `overrides` use the command-line form, e.g. `["--plan.none", "--seed=3"]`.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new(), out=None))]
fn generate(py: Python<'_>, config: Option<PathBuf>, overrides: Vec<String>, out: Option<PathBuf>) -> PyResult<String> {
    let pairs: Vec<_> = overrides.iter().map(|o| parse_override(o)).collect();
    let mut cfg = match &config {
        Some(path) => RunConfig::load(path, &pairs),
        None => RunConfig::from_toml_str("", &pairs),
    }
    .map_err(to_py)?;
    if let Some(dir) = &out {
        cfg.output.dir = dir.clone();
    }
    py.detach(|| {
        let dir = cfg.output.dir.clone();
        let guidance = Guidance::from_config(&cfg.guidance)?;
        let (field, report) = train_coarse(cfg, guidance, out.as_deref())?;
        if out.is_some() {
            field.save(&dir.join("final.vxf"))?;
        }
        report.to_json()
    })
    .map_err(to_py)
}

#[pymodule]
#[pyo3(name = "voxavatar")]
fn voxavatar_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCamera>()?;
    m.add_class::<PyVoxelField>()?;
    m.add_function(wrap_pyfunction!(condition_labels, m)?)?;
    m.add_function(wrap_pyfunction!(condition_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bar, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
