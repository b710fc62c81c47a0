//! Explicit density/color voxel grids.
//!
//! Values live at cell centers. A grid with `dims = (nx, ny, nz)` over
//! `bounds` has cell size `(max - min) / dims` and its first center half a
//! cell inside `min`. Sampling inside the bounds but outside the hull of the
//! centers clamps to the nearest center plane; sampling outside the bounds
//! yields empty space.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::Vec3;

/// Default shift `b` of the density activation `softplus(raw + b)`.
pub const DEFAULT_DENSITY_SHIFT: f64 = -2.0;

const MAGIC: &[u8; 4] = b"VXAF";
const FORMAT_VERSION: u32 = 1;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Bounds { min, max };
        b.validate()?;
        Ok(b)
    }

    /// Cube of half-width `half` around `center`.
    pub fn cube(center: Vec3, half: f64) -> Result<Self> {
        Self::new(center - Vec3::repeat(half), center + Vec3::repeat(half))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a]);
        if ok {
            Ok(())
        } else {
            invalid(format!("bounds max {:?} must exceed min {:?} on every axis", self.max, self.min))
        }
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Ray parameter interval `[t0, t1]` inside the box, if any.
    pub fn intersect_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Grid geometry shared by fields and auxiliary grids (moments, gradients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub bounds: Bounds,
    pub dims: [usize; 3],
}

/// The 8 cells around a sample point and their trilinear weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        Vec3::new(e.x / self.dims[0] as f64, e.y / self.dims[1] as f64, e.z / self.dims[2] as f64)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = self.cell_size();
        self.bounds.min + Vec3::new((i as f64 + 0.5) * c.x, (j as f64 + 0.5) * c.y, (k as f64 + 0.5) * c.z)
    }

    /// Trilinear stencil at `p`, clamped to the center hull. Points outside
    /// the bounds return `None` unless `clamp_outside` is set.
    pub fn stencil(&self, p: &Vec3, clamp_outside: bool) -> Option<Stencil> {
        if !clamp_outside && !self.bounds.contains(p) {
            return None;
        }
        let cell = self.cell_size();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = ((p[a] - self.bounds.min[a]) / cell[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = u - i0 as f64;
        }
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            index[c] = self.index(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weight[c] = wx * wy * wz;
        }
        Some(Stencil { index, weight })
    }

    /// Trilinear sample by nested lerps (exact at cell centers).
    pub fn sample_scalar(&self, values: &[f64], p: &Vec3, clamp_outside: bool) -> Option<f64> {
        if !clamp_outside && !self.bounds.contains(p) {
            return None;
        }
        let cell = self.cell_size();
        let mut base = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let u = ((p[a] - self.bounds.min[a]) / cell[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n - 2);
            base[a] = i0;
            f[a] = u - i0 as f64;
        }
        let at = |dx: usize, dy: usize, dz: usize| values[self.index(base[0] + dx, base[1] + dy, base[2] + dz)];
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let c00 = lerp(at(0, 0, 0), at(1, 0, 0), f[0]);
        let c10 = lerp(at(0, 1, 0), at(1, 1, 0), f[0]);
        let c01 = lerp(at(0, 0, 1), at(1, 0, 1), f[0]);
        let c11 = lerp(at(0, 1, 1), at(1, 1, 1), f[0]);
        Some(lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2]))
    }

    /// Resamples a scalar grid onto `target` by clamped trilinear sampling.
    pub fn resample_scalar(&self, values: &[f64], target: &GridGeometry) -> Vec<f64> {
        let mut out = Vec::with_capacity(target.len());
        for k in 0..target.dims[2] {
            for j in 0..target.dims[1] {
                for i in 0..target.dims[0] {
                    let p = target.cell_center(i, j, k);
                    out.push(self.sample_scalar(values, &p, true).expect("clamped sampling"));
                }
            }
        }
        out
    }
}

/// Density and color voxel grids.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    pub bounds: Bounds,
    pub dims: [usize; 3],
    /// Pre-activation density per cell.
    pub density_raw: Vec<f64>,
    /// RGB per cell, each channel in `[0, 1]`.
    pub color: Vec<[f64; 3]>,
    /// Activation shift `b`.
    pub shift: f64,
}

/// `softplus(raw + shift)`, overflow-safe. `-inf` maps to 0.
pub fn activate_density(raw: f64, shift: f64) -> f64 {
    let x = raw + shift;
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`activate_density`] with respect to `raw` (the logistic function).
pub fn activate_density_grad(raw: f64, shift: f64) -> f64 {
    let x = raw + shift;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw density whose activation equals `sigma` (inverse softplus).
pub fn raw_for_density(sigma: f64, shift: f64) -> f64 {
    assert!(sigma > 0.0, "inverse activation needs sigma > 0");
    let x = if sigma > 30.0 { sigma + (-(-sigma).exp()).ln_1p() } else { sigma.exp_m1().ln() };
    x - shift
}

/// Edge length of a cubic voxel when `n_v` voxels fill `bounds`.
pub fn voxel_size(bounds: &Bounds, n_v: usize) -> Result<f64> {
    bounds.validate()?;
    if n_v < 8 {
        return invalid(format!("voxel count must be at least 8, got {n_v}"));
    }
    let e = bounds.extent();
    Ok((e.x * e.y * e.z / n_v as f64).cbrt())
}

/// Per-axis cell counts for a voxel size: `max(2, round(d / s_v))`.
pub fn dims_for(bounds: &Bounds, s_v: f64) -> [usize; 3] {
    let e = bounds.extent();
    [0, 1, 2].map(|a| ((e[a] / s_v).round() as usize).max(2))
}

impl VoxelField {
    /// Field with constant raw density and color.
    pub fn filled(bounds: Bounds, dims: [usize; 3], raw: f64, color: [f64; 3]) -> Result<Self> {
        bounds.validate()?;
        if dims.iter().any(|&d| d < 2) {
            return invalid(format!("every grid axis needs at least 2 cells, got {dims:?}"));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(VoxelField {
            bounds,
            dims,
            density_raw: vec![raw; n],
            color: vec![color; n],
            shift: DEFAULT_DENSITY_SHIFT,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry { bounds: self.bounds, dims: self.dims }
    }

    pub fn len(&self) -> usize {
        self.density_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density_raw.is_empty()
    }

    pub fn cell_size(&self) -> Vec3 {
        self.geometry().cell_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.dims.iter().any(|&d| d < 2) {
            return invalid("every grid axis needs at least 2 cells");
        }
        let n = self.geometry().len();
        if self.density_raw.len() != n || self.color.len() != n {
            return invalid("grid buffers do not match dims");
        }
        if self.density_raw.iter().any(|v| !v.is_finite()) {
            return invalid("raw density must be finite");
        }
        if self.color.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return invalid("colors must lie in [0, 1]");
        }
        Ok(())
    }

    /// `(raw density, color)` at `p`; outside the bounds `(-inf, black)`.
    pub fn trilinear(&self, p: &Vec3) -> (f64, [f64; 3]) {
        let geom = self.geometry();
        match geom.stencil(p, false) {
            None => (f64::NEG_INFINITY, [0.0; 3]),
            Some(_) => {
                let raw = geom.sample_scalar(&self.density_raw, p, false).expect("inside bounds");
                let s = geom.stencil(p, false).expect("inside bounds");
                let mut c = [0.0; 3];
                for (idx, w) in s.index.iter().zip(s.weight) {
                    for ch in 0..3 {
                        c[ch] += w * self.color[*idx][ch];
                    }
                }
                (raw, c)
            }
        }
    }

    /// Activated density at `p`.
    pub fn sigma_at(&self, p: &Vec3) -> f64 {
        activate_density(self.trilinear(p).0, self.shift)
    }

    pub fn sigma(&self, idx: usize) -> f64 {
        activate_density(self.density_raw[idx], self.shift)
    }

    /// Cells with activated density above `threshold`.
    pub fn occupancy(&self, threshold: f64) -> Vec<bool> {
        (0..self.len()).map(|i| self.sigma(i) > threshold).collect()
    }

    /// Resamples onto explicit bounds and dims.
    pub fn resample_to(&self, bounds: Bounds, dims: [usize; 3]) -> Result<VoxelField> {
        bounds.validate()?;
        if dims.iter().any(|&d| d < 2) {
            return invalid("every grid axis needs at least 2 cells");
        }
        let old = self.geometry();
        let new = GridGeometry { bounds, dims };
        let density_raw = old.resample_scalar(&self.density_raw, &new);
        let channels: Vec<Vec<f64>> = (0..3)
            .map(|ch| {
                let plane: Vec<f64> = self.color.iter().map(|c| c[ch]).collect();
                old.resample_scalar(&plane, &new)
            })
            .collect();
        let color = (0..new.len())
            .map(|i| [channels[0][i], channels[1][i], channels[2][i]].map(|c| c.clamp(0.0, 1.0)))
            .collect();
        Ok(VoxelField { bounds, dims, density_raw, color, shift: self.shift })
    }

    /// Resamples onto `new_bounds` with dims derived from [`voxel_size`] for `new_n_v`.
    pub fn resample(&self, new_bounds: Bounds, new_n_v: usize) -> Result<VoxelField> {
        let s = voxel_size(&new_bounds, new_n_v)?;
        self.resample_to(new_bounds, dims_for(&new_bounds, s))
    }

    /// Tightest box around cells with activated density above `threshold`,
    /// padded by one cell and clipped to the current bounds. Unchanged when
    /// no cell qualifies.
    pub fn shrink_bbox(&self, threshold: f64) -> Result<Bounds> {
        if !(threshold > 0.0) {
            return invalid("shrink threshold must be positive");
        }
        let geom = self.geometry();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for idx in 0..self.len() {
            if self.sigma(idx) > threshold {
                any = true;
                let c = geom.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        if !any {
            return Ok(self.bounds);
        }
        let cell = geom.cell_size();
        let mut min = Vec3::zeros();
        let mut max = Vec3::zeros();
        for a in 0..3 {
            min[a] = (self.bounds.min[a] + (lo[a] as f64 - 1.0) * cell[a]).max(self.bounds.min[a]);
            max[a] = (self.bounds.min[a] + (hi[a] as f64 + 2.0) * cell[a]).min(self.bounds.max[a]);
        }
        Bounds::new(min, max)
    }

    /// Writes the binary container described in `docs/formats.md`.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for d in self.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.shift.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * 16);
        for v in &self.density_raw {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for c in &self.color {
            for ch in c {
                buf.extend_from_slice(&(*ch as f32).to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VoxelField> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a voxel field file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported voxel field version {version}")));
        }
        let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = read_f64(&mut r)?;
        }
        let shift = read_f64(&mut r)?;
        let bounds = Bounds::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
            .map_err(|e| Error::Format(e.to_string()))?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
        if r.len() != n * 16 {
            return Err(Error::Format(format!("payload has {} bytes, expected {}", r.len(), n * 16)));
        }
        let floats: Vec<f64> =
            r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let density_raw = floats[..n].to_vec();
        let color = floats[n..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let field = VoxelField { bounds, dims, density_raw, color, shift };
        field.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(field)
    }

    pub fn load(path: &Path) -> Result<VoxelField> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated voxel field file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Inside/outside flags of `geometry`'s cell centers for a mesh made of
/// closed shells, which may overlap. Shells are the connected components of
/// the face graph; a center is inside when a `+z` ray from it crosses some
/// shell an odd number of times.
pub fn voxelize_closed_mesh(vertices: &[Vec3], faces: &[[usize; 3]], geometry: &GridGeometry) -> Result<Vec<bool>> {
    if faces.iter().flatten().any(|&i| i >= vertices.len()) {
        return invalid("face index out of range");
    }
    let mut parent: Vec<usize> = (0..vertices.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for f in faces {
        let a = find(&mut parent, f[0]);
        for &v in &f[1..] {
            let b = find(&mut parent, v);
            parent[b] = a;
        }
    }
    let shell: Vec<usize> = faces.iter().map(|f| find(&mut parent, f[0])).collect();

    let [nx, ny, nz] = geometry.dims;
    let mut inside = vec![false; geometry.len()];
    // A tiny irrational offset keeps columns off mesh edges and vertices.
    let jitter = geometry.cell_size().min() * 1e-6;
    let mut hits: Vec<(usize, f64)> = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let c = geometry.cell_center(i, j, 0);
            let (px, py) = (c.x + jitter * std::f64::consts::SQRT_2, c.y + jitter * 3f64.sqrt());
            hits.clear();
            for (fi, f) in faces.iter().enumerate() {
                let [a, b, d] = f.map(|v| vertices[v]);
                if px < a.x.min(b.x).min(d.x) || px > a.x.max(b.x).max(d.x) {
                    continue;
                }
                if py < a.y.min(b.y).min(d.y) || py > a.y.max(b.y).max(d.y) {
                    continue;
                }
                let area = (b.x - a.x) * (d.y - a.y) - (d.x - a.x) * (b.y - a.y);
                if area == 0.0 {
                    continue;
                }
                let w0 = ((b.x - px) * (d.y - py) - (d.x - px) * (b.y - py)) / area;
                let w1 = ((d.x - px) * (a.y - py) - (a.x - px) * (d.y - py)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                hits.push((shell[fi], w0 * a.z + w1 * b.z + w2 * d.z));
            }
            hits.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
            for k in 0..nz {
                let z = geometry.cell_center(i, j, k).z;
                let mut start = 0;
                while start < hits.len() {
                    let id = hits[start].0;
                    let end = start + hits[start..].iter().take_while(|h| h.0 == id).count();
                    let above = hits[start..end].iter().filter(|h| h.1 > z).count();
                    if above % 2 == 1 {
                        inside[geometry.index(i, j, k)] = true;
                        break;
                    }
                    start = end;
                }
            }
        }
    }
    Ok(inside)
}
