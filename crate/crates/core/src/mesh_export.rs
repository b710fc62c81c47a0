//! Surface extraction from a density field and mesh file I/O.
//!
//! Marching cubes runs on the lattice of cell centers, padded by one layer of
//! empty space so every surface closes. The per-configuration triangulation is
//! derived at first use from a single face rule: on every cube face, each run
//! of inside corners (in face-boundary order) is cut off by its own segment.
//! Neighboring cubes evaluate the same rule on a shared face, so the output is
//! watertight, and segments are directed so the winding is consistent with
//! normals pointing from high to low density.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{invalid, Error, Result};
use crate::voxel_field::VoxelField;
use crate::Vec3;

/// Default iso level, matching the bbox occupancy threshold.
pub const DEFAULT_ISO: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-vertex RGB in `[0, 1]`; empty until baked.
    pub colors: Vec<[f64; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return invalid("mesh has non-finite vertices");
        }
        if self.faces.iter().flatten().any(|&i| i >= self.vertices.len()) {
            return invalid("face index out of range");
        }
        if !self.colors.is_empty() && self.colors.len() != self.vertices.len() {
            return invalid(format!("{} colors for {} vertices", self.colors.len(), self.vertices.len()));
        }
        Ok(())
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i]);
            let fn_ = (b - a).cross(&(c - a));
            for &i in f {
                n[i] += fn_;
            }
        }
        n.iter().map(|v| v.try_normalize(1e-300).unwrap_or_else(Vec3::zeros)).collect()
    }

    /// Signed enclosed volume; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Number of faces using each undirected edge.
    pub fn edge_use_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Cube corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs `(lo, hi)` differing in one axis.
fn cube_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..3 {
        for c in 0..8 {
            if c & (1 << a) == 0 {
                edges.push((c, c | (1 << a)));
            }
        }
    }
    edges
}

/// Corners of each face in counter-clockwise order seen from outside.
fn face_cycles() -> Vec<[usize; 4]> {
    let mut faces = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let mut normal = Vec3::zeros();
            normal[axis] = if side == 1 { 1.0 } else { -1.0 };
            let u_axis = (axis + 1) % 3;
            let v_axis = (axis + 2) % 3;
            let mut corners: Vec<usize> = (0..8).filter(|c| corner_offset(*c)[axis] == side).collect();
            let angle = |c: &usize| {
                let o = corner_offset(*c);
                let (u, v) = (o[u_axis] as f64 - 0.5, o[v_axis] as f64 - 0.5);
                // (u_axis, v_axis, axis) is right-handed, so flip for the -axis face.
                let s = normal[axis];
                v.atan2(u) * s
            };
            corners.sort_by(|a, b| angle(a).total_cmp(&angle(b)));
            faces.push([corners[0], corners[1], corners[2], corners[3]]);
        }
    }
    faces
}

/// One contour loop of a cube configuration.
struct Contour {
    /// Crossed cube edges in winding order, rotated so a fan from the first
    /// one never runs a diagonal along a cube face.
    edges: Vec<usize>,
    /// No such fan exists: triangulate around the loop centroid instead.
    center: bool,
}

/// Whether two cube edges lie on a common face.
fn share_face(edges: &[(usize, usize)], a: usize, b: usize) -> bool {
    let (ea, eb) = (edges[a], edges[b]);
    (0..3).any(|axis| {
        (0..2).any(|side| {
            [ea.0, ea.1, eb.0, eb.1].iter().all(|&c| corner_offset(c)[axis] == side)
        })
    })
}

/// Closed loops of cube-edge indices for every inside-corner mask.
fn case_table() -> &'static Vec<Vec<Contour>> {
    static TABLE: OnceLock<Vec<Vec<Contour>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let edges = cube_edges();
        let edge_of = |a: usize, b: usize| edges.iter().position(|&(p, q)| (p, q) == (a.min(b), a.max(b))).expect("cube edge");
        let faces = face_cycles();
        (0..256usize)
            .map(|mask| {
                let inside = |c: usize| mask & (1 << c) != 0;
                // next[e] = edge reached from crossing e along the contour
                let mut next = [usize::MAX; 12];
                for cyc in &faces {
                    for s in 0..4 {
                        let (c, prev) = (cyc[s], cyc[(s + 3) % 4]);
                        if !inside(c) || inside(prev) {
                            continue;
                        }
                        // a run of inside corners starts at `c`
                        let mut e = s;
                        while inside(cyc[(e + 1) % 4]) {
                            e = (e + 1) % 4;
                        }
                        let enter = edge_of(prev, c);
                        let leave = edge_of(cyc[e], cyc[(e + 1) % 4]);
                        next[leave] = enter;
                    }
                }
                let mut seen = [false; 12];
                let mut loops = Vec::new();
                for start in 0..12 {
                    if next[start] == usize::MAX || seen[start] {
                        continue;
                    }
                    let mut lp = Vec::new();
                    let mut e = start;
                    while !seen[e] {
                        seen[e] = true;
                        lp.push(e);
                        e = next[e];
                    }
                    let n = lp.len();
                    let start = (0..n).find(|&s| (2..n - 1).all(|d| !share_face(&edges, lp[s], lp[(s + d) % n])));
                    let contour = match start {
                        Some(s) => Contour { edges: (0..n).map(|d| lp[(s + d) % n]).collect(), center: false },
                        None => Contour { edges: lp, center: true },
                    };
                    loops.push(contour);
                }
                loops
            })
            .collect()
    })
}

/// Marching cubes on the activated density at level `iso`.
pub fn marching_cubes(field: &VoxelField, iso: f64) -> Result<TriangleMesh> {
    if !(iso > 0.0) {
        return invalid("iso level must be > 0");
    }
    field.validate()?;
    let g = field.geometry();
    let [nx, ny, nz] = field.dims;
    // padded lattice: index p in 0..n+2 maps to cell p-1
    let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
    let value = |i: usize, j: usize, k: usize| -> f64 {
        if i == 0 || j == 0 || k == 0 || i > nx || j > ny || k > nz {
            -iso
        } else {
            field.sigma(g.index(i - 1, j - 1, k - 1)) - iso
        }
    };
    let cell = g.cell_size();
    let position = |i: usize, j: usize, k: usize| {
        field.bounds.min + Vec3::new((i as f64 - 0.5) * cell.x, (j as f64 - 0.5) * cell.y, (k as f64 - 0.5) * cell.z)
    };
    let edges = cube_edges();
    let table = case_table();
    let mut mesh = TriangleMesh::default();
    // lattice edge (start point index, axis) -> vertex
    let mut welded: HashMap<(usize, usize), usize> = HashMap::new();
    let point_index = |i: usize, j: usize, k: usize| i + px * (j + py * k);
    for k in 0..pz - 1 {
        for j in 0..py - 1 {
            for i in 0..px - 1 {
                let mut vals = [0.0; 8];
                let mut mask = 0usize;
                for (c, v) in vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *v = value(i + o[0], j + o[1], k + o[2]);
                    if *v > 0.0 {
                        mask |= 1 << c;
                    }
                }
                if mask == 0 || mask == 255 {
                    continue;
                }
                for contour in &table[mask] {
                    let ids: Vec<usize> = contour
                        .edges
                        .iter()
                        .map(|&e| {
                            let (a, b) = edges[e];
                            let (oa, ob) = (corner_offset(a), corner_offset(b));
                            let axis = (0..3).find(|&x| oa[x] != ob[x]).expect("edge axis");
                            let key = (point_index(i + oa[0], j + oa[1], k + oa[2]), axis);
                            *welded.entry(key).or_insert_with(|| {
                                let t = vals[a] / (vals[a] - vals[b]);
                                let pa = position(i + oa[0], j + oa[1], k + oa[2]);
                                let pb = position(i + ob[0], j + ob[1], k + ob[2]);
                                mesh.vertices.push(pa + (pb - pa) * t);
                                mesh.vertices.len() - 1
                            })
                        })
                        .collect();
                    if contour.center {
                        let c = ids.iter().map(|&v| mesh.vertices[v]).sum::<Vec3>() / ids.len() as f64;
                        mesh.vertices.push(c);
                        let ci = mesh.vertices.len() - 1;
                        for t in 0..ids.len() {
                            mesh.faces.push([ci, ids[(t + 1) % ids.len()], ids[t]]);
                        }
                    } else {
                        for t in 1..ids.len() - 1 {
                            mesh.faces.push([ids[0], ids[t + 1], ids[t]]);
                        }
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Per-vertex colors by trilinear sampling (clamped to the grid).
pub fn bake_colors(mesh: &mut TriangleMesh, field: &VoxelField) {
    let g = field.geometry();
    mesh.colors = mesh
        .vertices
        .iter()
        .map(|p| {
            let s = g.stencil(p, true).expect("clamped stencil");
            let mut c = [0.0; 3];
            for (idx, w) in s.index.iter().zip(s.weight) {
                for ch in 0..3 {
                    c[ch] += w * field.color[*idx][ch];
                }
            }
            c.map(|v| v.clamp(0.0, 1.0))
        })
        .collect();
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => invalid(format!("cannot infer mesh format from {}", path.display())),
        }
    }
}

fn to_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// ASCII OBJ (full precision) with `v x y z [r g b]`, `vn` and `f a//a b//b c//c` lines.
pub fn write_obj(mesh: &TriangleMesh, out: &mut impl Write) -> Result<()> {
    mesh.validate()?;
    writeln!(out, "# {} vertices, {} faces", mesh.vertices.len(), mesh.faces.len())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        match mesh.colors.get(i) {
            Some(c) => writeln!(out, "v {:?} {:?} {:?} {:?} {:?} {:?}", v.x, v.y, v.z, c[0], c[1], c[2])?,
            None => writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z)?,
        }
    }
    for n in mesh.vertex_normals() {
        writeln!(out, "vn {:?} {:?} {:?}", n.x as f32, n.y as f32, n.z as f32)?;
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}")?;
    }
    Ok(())
}

pub fn read_obj(input: impl Read) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let mut any_color = false;
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let bad = |what: &str| Error::Format(format!("obj line {}: {what}", lineno + 1));
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let nums: Vec<f64> = parts.map(|p| p.parse::<f64>().map_err(|_| bad("bad number"))).collect::<Result<_>>()?;
                match nums.len() {
                    3 => mesh.colors.push([0.0; 3]),
                    6 => {
                        any_color = true;
                        mesh.colors.push([nums[3], nums[4], nums[5]]);
                    }
                    _ => return Err(bad("vertex needs 3 or 6 numbers")),
                }
                mesh.vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or("");
                        match first.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(bad("bad face index")),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangles are supported"));
                }
                mesh.faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    if !any_color {
        mesh.colors.clear();
    }
    mesh.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(mesh)
}

/// Binary little-endian PLY: float positions, uchar colors, uchar-counted int faces.
pub fn write_ply(mesh: &TriangleMesh, out: &mut impl Write) -> Result<()> {
    mesh.validate()?;
    let colored = !mesh.colors.is_empty();
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", mesh.vertices.len());
    header += "property float x\nproperty float y\nproperty float z\n";
    if colored {
        header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    header += &format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.faces.len());
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(mesh.vertices.len() * 15 + mesh.faces.len() * 13);
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in [v.x, v.y, v.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        if colored {
            buf.extend(mesh.colors[i].map(to_byte));
        }
    }
    for f in &mesh.faces {
        buf.push(3);
        for &i in f {
            let i = i32::try_from(i).map_err(|_| Error::Format("vertex index exceeds PLY int range".into()))?;
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads the PLY layout produced by [`write_ply`].
pub fn read_ply(input: impl Read) -> Result<TriangleMesh> {
    let mut reader = BufReader::new(input);
    let bad = |m: &str| Error::Format(format!("ply: {m}"));
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut colored = false;
    let mut first = true;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("missing end_header"));
        }
        let line = line.trim_end();
        if first {
            if line != "ply" {
                return Err(bad("missing magic"));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(bad("only binary_little_endian is supported")),
            ["element", "vertex", n] => n_vertices = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", "face", n] => n_faces = Some(n.parse::<usize>().map_err(|_| bad("bad face count"))?),
            ["property", "uchar", "red"] => colored = true,
            ["end_header"] => break,
            _ => {}
        }
    }
    let (nv, nf) = (n_vertices.ok_or_else(|| bad("no vertex element"))?, n_faces.ok_or_else(|| bad("no face element"))?);
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    let vsize = 12 + if colored { 3 } else { 0 };
    if body.len() != nv * vsize + nf * 13 {
        return Err(bad("payload size does not match header"));
    }
    let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as f64;
    let mut mesh = TriangleMesh::default();
    for v in 0..nv {
        let o = v * vsize;
        mesh.vertices.push(Vec3::new(f32_at(o), f32_at(o + 4), f32_at(o + 8)));
        if colored {
            mesh.colors.push([0, 1, 2].map(|c| body[o + 12 + c] as f64 / 255.0));
        }
    }
    for f in 0..nf {
        let o = nv * vsize + f * 13;
        if body[o] != 3 {
            return Err(bad("only triangles are supported"));
        }
        let idx = [0, 1, 2].map(|c| i32::from_le_bytes(body[o + 1 + 4 * c..o + 5 + 4 * c].try_into().expect("4 bytes")));
        if idx.iter().any(|&i| i < 0) {
            return Err(bad("negative vertex index"));
        }
        mesh.faces.push(idx.map(|i| i as usize));
    }
    mesh.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(mesh)
}

pub fn export(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<()> {
    let mut buf = Vec::new();
    match format {
        MeshFormat::Obj => write_obj(mesh, &mut buf)?,
        MeshFormat::Ply => write_ply(mesh, &mut buf)?,
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TriangleMesh> {
    let file = fs::File::open(path)?;
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => read_obj(file),
        MeshFormat::Ply => read_ply(file),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_field::{raw_for_density, Bounds};
    use proptest::prelude::*;

    /// Smoothed indicator of a ball: sigma ~ 1 inside, ~ 0 outside.
    fn sphere_field(n: usize, radius: f64, center: Vec3) -> VoxelField {
        let mut f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [n; 3], 0.0, [0.5; 3]).unwrap();
        let g = f.geometry();
        let width = 0.5 * g.cell_size().x;
        for idx in 0..f.len() {
            let [i, j, k] = g.coords(idx);
            let d = (g.cell_center(i, j, k) - center).norm() - radius;
            let sigma = (1.0 / (1.0 + (d / width).exp())).max(1e-9);
            f.density_raw[idx] = raw_for_density(sigma, f.shift);
        }
        f
    }

    #[test]
    fn face_cycles_are_counter_clockwise_from_outside() {
        for (fi, cyc) in face_cycles().iter().enumerate() {
            let (axis, side) = (fi / 2, fi % 2);
            let p = cyc.map(|c| {
                let o = corner_offset(c);
                Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64)
            });
            let n = (p[1] - p[0]).cross(&(p[2] - p[1]));
            let expect = if side == 1 { 1.0 } else { -1.0 };
            assert_eq!(n[axis], expect, "face {fi}");
        }
    }

    #[test]
    fn case_table_covers_every_crossing_once() {
        let edges = cube_edges();
        for (mask, loops) in case_table().iter().enumerate() {
            let crossing: Vec<usize> = (0..12)
                .filter(|&e| {
                    let (a, b) = edges[e];
                    (mask >> a & 1) != (mask >> b & 1)
                })
                .collect();
            let mut used: Vec<usize> = loops.iter().flat_map(|l| l.edges.iter().copied()).collect();
            used.sort();
            assert_eq!(used, crossing, "mask {mask}");
            assert!(loops.iter().all(|l| l.edges.len() >= 3));
        }
        // complementary masks yield the same number of crossings
        assert_eq!(case_table()[0].len(), 0);
        assert_eq!(case_table()[1].len(), 1);
    }

    #[test]
    fn sphere_mesh_is_near_radius_watertight_and_outward() {
        let (n, r) = (32, 0.55);
        let center = Vec3::new(0.03, -0.02, 0.01);
        let f = sphere_field(n, r, center);
        let mesh = marching_cubes(&f, 0.5).unwrap();
        assert!(!mesh.is_empty());
        mesh.validate().unwrap();
        let voxel = 2.0 / n as f64;
        for v in &mesh.vertices {
            assert!(((v - center).norm() - r).abs() <= 1.5 * voxel);
        }
        assert!(mesh.edge_use_counts().values().all(|&c| c == 2));
        let vol = mesh.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!((vol - exact).abs() / exact < 0.05, "{vol} vs {exact}");
    }

    #[test]
    fn zero_field_gives_empty_mesh() {
        let f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [6; 3], -50.0, [0.5; 3]).unwrap();
        let m = marching_cubes(&f, 0.1).unwrap();
        assert!(m.vertices.is_empty() && m.faces.is_empty());
        assert!(marching_cubes(&f, 0.0).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let f = sphere_field(16, 0.5, Vec3::zeros());
        assert_eq!(marching_cubes(&f, 0.3).unwrap(), marching_cubes(&f, 0.3).unwrap());
    }

    /// Odd number of triangle hits along a slightly tilted ray.
    fn crossing_parity(mesh: &TriangleMesh, origin: Vec3) -> bool {
        let dir = Vec3::new(0.0123, 0.0071, 1.0).normalize();
        let mut hits = 0;
        for f in &mesh.faces {
            let [a, b, c] = f.map(|i| mesh.vertices[i]);
            let (e1, e2) = (b - a, c - a);
            let p = dir.cross(&e2);
            let det = e1.dot(&p);
            if det.abs() < 1e-14 {
                continue;
            }
            let s = origin - a;
            let u = s.dot(&p) / det;
            let q = s.cross(&e1);
            let v = dir.dot(&q) / det;
            let t = e2.dot(&q) / det;
            if u >= 0.0 && v >= 0.0 && u + v <= 1.0 && t > 0.0 {
                hits += 1;
            }
        }
        hits % 2 == 1
    }

    fn random_field(seed: u64, n: usize) -> VoxelField {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::filled(Bounds::cube(Vec3::zeros(), 1.0).unwrap(), [n; 3], 0.0, [0.5; 3]).unwrap();
        for r in f.density_raw.iter_mut() {
            *r = rng.random_range(-3.0..6.0);
        }
        f
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_fields_give_closed_oriented_meshes(seed in 0u64..10_000) {
            let f = random_field(seed, 6);
            let mesh = marching_cubes(&f, 1.0).unwrap();
            mesh.validate().unwrap();
            // closed 2-manifold edges with opposite windings on the two sides
            let mut directed: HashMap<(usize, usize), i32> = HashMap::new();
            for t in &mesh.faces {
                for e in 0..3 {
                    *directed.entry((t[e], t[(e + 1) % 3])).or_insert(0) += 1;
                }
            }
            for (&(a, b), &c) in &directed {
                prop_assert_eq!(c, 1);
                prop_assert_eq!(directed.get(&(b, a)).copied(), Some(1));
            }
        }

        #[test]
        fn surface_encloses_the_occupied_cells(seed in 0u64..10_000) {
            let f = random_field(seed, 8);
            let iso = 1.0;
            let mesh = marching_cubes(&f, iso).unwrap();
            let g = f.geometry();
            let mismatches = (0..f.len())
                .filter(|&idx| {
                    let [i, j, k] = g.coords(idx);
                    crossing_parity(&mesh, g.cell_center(i, j, k)) != (f.sigma(idx) > iso)
                })
                .count();
            prop_assert!(mismatches == 0, "{} mismatched cells", mismatches);
        }
    }

    #[test]
    fn bake_constant_and_ramp() {
        let mut f = sphere_field(16, 0.6, Vec3::zeros());
        f.color.iter_mut().for_each(|c| *c = [0.2, 0.4, 0.9]);
        let mut m = marching_cubes(&f, 0.5).unwrap();
        bake_colors(&mut m, &f);
        assert!(m.colors.iter().all(|c| (c[0] - 0.2).abs() < 1e-12 && (c[1] - 0.4).abs() < 1e-12 && (c[2] - 0.9).abs() < 1e-12));

        let g = f.geometry();
        for idx in 0..f.len() {
            let [i, _, _] = g.coords(idx);
            f.color[idx] = [i as f64 / 15.0, 0.5, 1.0 - i as f64 / 15.0];
        }
        bake_colors(&mut m, &f);
        let mut pairs: Vec<(f64, f64)> = m.vertices.iter().zip(&m.colors).map(|(v, c)| (v.x, c[0])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12));
        assert!(m.colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    }

    fn baked_sphere() -> TriangleMesh {
        let mut f = sphere_field(12, 0.6, Vec3::zeros());
        let g = f.geometry();
        for idx in 0..f.len() {
            let [i, j, k] = g.coords(idx);
            f.color[idx] = [i as f64 / 11.0, j as f64 / 11.0, k as f64 / 11.0];
        }
        let mut m = marching_cubes(&f, 0.5).unwrap();
        bake_colors(&mut m, &f);
        m
    }

    fn assert_round_trip(a: &TriangleMesh, b: &TriangleMesh, single: bool, color_tol: f64) {
        assert_eq!(a.faces, b.faces);
        assert_eq!(a.vertices.len(), b.vertices.len());
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            for c in 0..3 {
                assert_eq!(q[c], if single { p[c] as f32 as f64 } else { p[c] });
            }
        }
        assert_eq!(a.colors.len(), b.colors.len());
        for (p, q) in a.colors.iter().zip(&b.colors) {
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() <= color_tol);
            }
        }
    }

    #[test]
    fn ply_round_trip() {
        let m = baked_sphere();
        let mut buf = Vec::new();
        write_ply(&m, &mut buf).unwrap();
        let back = read_ply(&buf[..]).unwrap();
        assert_round_trip(&m, &back, true, 0.5 / 255.0 + 1e-12);
        assert!(read_ply(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn obj_round_trip_and_counts() {
        let m = baked_sphere();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), m.vertices.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("vn ")).count(), m.vertices.len());
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), m.faces.len());
        let back = read_obj(&buf[..]).unwrap();
        assert_round_trip(&m, &back, false, 0.0);
    }

    #[test]
    fn empty_mesh_files_are_valid() {
        let m = TriangleMesh::default();
        let mut ply = Vec::new();
        write_ply(&m, &mut ply).unwrap();
        assert_eq!(read_ply(&ply[..]).unwrap(), m);
        let mut obj = Vec::new();
        write_obj(&m, &mut obj).unwrap();
        assert_eq!(read_obj(&obj[..]).unwrap(), m);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(MeshFormat::from_path(Path::new("a/b.PLY")).unwrap(), MeshFormat::Ply);
        assert_eq!(MeshFormat::from_path(Path::new("x.obj")).unwrap(), MeshFormat::Obj);
        assert!(MeshFormat::from_path(Path::new("x.stl")).is_err());
    }
}
