//! Marching-cubes mesh extraction, surface sampling and Chamfer / F-score
//! evaluation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::mc_tables::{CORNERS, EDGES, EDGE_TABLE, TRIANGLE_TABLE};
use crate::volrender::Aabb;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("grid resolution {0} below the minimum of 8")]
    Resolution(usize),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("malformed mesh file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MIN_RESOLUTION: usize = 8;
const DEGENERATE_AREA: f64 = 1e-12;

pub type P3 = [f64; 3];

fn sub(a: &P3, b: &P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &P3, b: &P3) -> P3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: &P3, b: &P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist(a: &P3, b: &P3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<P3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<P3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        let n = cross(&sub(&b, &a), &sub(&c, &a));
        0.5 * dot(&n, &n).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(MeshError::Format("triangle index out of range".into()));
        }
        Ok(())
    }

    /// Drops triangles with repeated indices or area below `1e-12`, then
    /// unreferenced vertices.
    pub fn remove_degenerate(&mut self) {
        let keep: Vec<bool> = (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangles[t];
                a != b && b != c && a != c && self.triangle_area(t) > DEGENERATE_AREA
            })
            .collect();
        let mut k = keep.iter();
        self.triangles.retain(|_| *k.next().unwrap());
        self.compact();
    }

    /// Keeps triangles whose centroid lies inside `bounds`.
    pub fn crop(&mut self, bounds: &Aabb) {
        let verts = &self.vertices;
        self.triangles.retain(|t| {
            let c = [0, 1, 2].map(|k| (verts[t[0] as usize][k] + verts[t[1] as usize][k] + verts[t[2] as usize][k]) / 3.0);
            (0..3).all(|k| c[k] >= bounds.min[k] && c[k] <= bounds.max[k])
        });
        self.compact();
    }

    fn compact(&mut self) {
        let mut map = vec![u32::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        let mut normals = self.normals.as_ref().map(|_| Vec::new());
        for t in self.triangles.iter_mut() {
            for i in t.iter_mut() {
                if map[*i as usize] == u32::MAX {
                    map[*i as usize] = verts.len() as u32;
                    verts.push(self.vertices[*i as usize]);
                    if let (Some(out), Some(src)) = (normals.as_mut(), self.normals.as_ref()) {
                        out.push(src[*i as usize]);
                    }
                }
                *i = map[*i as usize];
            }
        }
        self.vertices = verts;
        self.normals = normals;
    }

    /// Every undirected edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    /// Signed volume (positive when triangles wind outward).
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                dot(&a, &cross(&b, &c)) / 6.0
            })
            .sum()
    }
}

/// Regular lattice of `(res + 1)^3` sample points over `bounds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub bounds: Aabb,
    pub res: usize,
}

impl Lattice {
    pub fn new(bounds: Aabb, res: usize) -> Result<Self, MeshError> {
        if res < MIN_RESOLUTION {
            return Err(MeshError::Resolution(res));
        }
        Ok(Self { bounds, res })
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| (self.bounds.max[k] - self.bounds.min[k]) / self.res as f64)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> P3 {
        let h = self.cell_size();
        [
            self.bounds.min[0] + i as f64 * h[0],
            self.bounds.min[1] + j as f64 * h[1],
            self.bounds.min[2] + k as f64 * h[2],
        ]
    }

    /// All lattice points, x fastest.
    pub fn points(&self) -> Vec<P3> {
        let n = self.res + 1;
        let mut out = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Result of an extraction; `empty` is set when no cell crosses the iso level.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub mesh: TriangleMesh,
    pub empty: bool,
}

/// Marching cubes over lattice values (x fastest) at `iso`. Triangles wind
/// so that their normals point towards increasing values.
pub fn marching_cubes_values(lattice: &Lattice, values: &[f64], iso: f64) -> Extraction {
    let n = lattice.res + 1;
    assert_eq!(values.len(), n * n * n, "lattice value count");
    let idx = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();
    for k in 0..lattice.res {
        for j in 0..lattice.res {
            for i in 0..lattice.res {
                let mut case = 0usize;
                let mut val = [0.0f64; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    val[c] = values[idx(i + off[0], j + off[1], k + off[2])];
                    if val[c] < iso {
                        case |= 1 << c;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for (e, pair) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let (a, b) = (CORNERS[pair[0]], CORNERS[pair[1]]);
                    let (lo, hi, va, vb) = if a <= b { (a, b, val[pair[0]], val[pair[1]]) } else { (b, a, val[pair[1]], val[pair[0]]) };
                    let axis = (0..3).find(|&d| lo[d] != hi[d]).expect("edge spans one axis");
                    let key = idx(i + lo[0], j + lo[1], k + lo[2]) * 3 + axis;
                    local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let pa = lattice.point(i + lo[0], j + lo[1], k + lo[2]);
                        let pb = lattice.point(i + hi[0], j + hi[1], k + hi[2]);
                        let t = if (vb - va).abs() > 0.0 { ((iso - va) / (vb - va)).clamp(0.0, 1.0) } else { 0.5 };
                        mesh.vertices.push([0, 1, 2].map(|d| pa[d] + t * (pb[d] - pa[d])));
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // Table winding faces the below-iso side; reverse it.
                    mesh.triangles.push([local[tri[0] as usize], local[tri[2] as usize], local[tri[1] as usize]]);
                }
            }
        }
    }
    let empty = mesh.triangles.is_empty();
    mesh.remove_degenerate();
    Extraction { mesh, empty }
}

/// Marching cubes of an SDF given as a batched evaluator.
pub fn marching_cubes<F>(sdf: F, bounds: Aabb, res: usize, iso: f64) -> Result<Extraction, MeshError>
where
    F: Fn(&[P3]) -> Vec<f64>,
{
    let lattice = Lattice::new(bounds, res)?;
    let values = sdf(&lattice.points());
    Ok(marching_cubes_values(&lattice, &values, iso))
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface<R: Rng>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Result<Vec<P3>, MeshError> {
    if mesh.triangles.is_empty() {
        return Err(MeshError::Empty("mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if total <= 0.0 {
        return Err(MeshError::Empty("mesh surface"));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i as usize]);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push([0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    Ok(out)
}

/// Uniform grid over a point set for exact nearest-neighbor queries.
pub struct PointGrid<'a> {
    points: &'a [P3],
    min: P3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [P3]) -> Result<Self, MeshError> {
        if points.is_empty() {
            return Err(MeshError::Empty("point set"));
        }
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let ext = [0, 1, 2].map(|k| (max[k] - min[k]).max(1e-9));
        let vol = ext[0] * ext[1] * ext[2];
        // Roughly two points per cell.
        let cell = (vol * 2.0 / points.len() as f64).cbrt().max(ext[0].max(ext[1]).max(ext[2]) / 256.0);
        let dims = ext.map(|e| ((e / cell).floor() as usize + 1).min(1024));
        let mut grid = Self {
            points,
            min,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let cells: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0u32; n_cells + 1];
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        Ok(grid)
    }

    fn cell_of(&self, p: &P3) -> [usize; 3] {
        [0, 1, 2].map(|k| (((p[k] - self.min[k]) / self.cell).floor().max(0.0) as usize).min(self.dims[k] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Distance from `q` to the nearest stored point.
    pub fn nearest_distance(&self, q: &P3) -> f64 {
        // Unclamped cell coordinates of the query.
        let qc = [0, 1, 2].map(|k| ((q[k] - self.min[k]) / self.cell).floor() as i64);
        let lo_grid = [0i64; 3];
        let hi_grid = self.dims.map(|d| d as i64 - 1);
        // Chebyshev ring at which the grid is first reached.
        let start = (0..3)
            .map(|k| (lo_grid[k] - qc[k]).max(qc[k] - hi_grid[k]).max(0))
            .max()
            .unwrap_or(0);
        let max_ring = (0..3).map(|k| (qc[k] - lo_grid[k]).abs().max((hi_grid[k] - qc[k]).abs())).max().unwrap_or(0);
        let mut best = f64::INFINITY;
        let mut r = start;
        loop {
            let lo = [0, 1, 2].map(|k| (qc[k] - r).max(lo_grid[k]));
            let hi = [0, 1, 2].map(|k| (qc[k] + r).min(hi_grid[k]));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let ring = (x - qc[0]).abs().max((y - qc[1]).abs()).max((z - qc[2]).abs());
                        if ring != r {
                            continue;
                        }
                        let c = self.flat([x as usize, y as usize, z as usize]);
                        for &pi in &self.order[self.starts[c] as usize..self.starts[c + 1] as usize] {
                            let d = dist(q, &self.points[pi as usize]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // Unvisited points lie at least `r` cells away.
            if best <= r as f64 * self.cell || r >= max_ring {
                return best;
            }
            r += 1;
        }
    }
}

/// O(n m) nearest-neighbor distances (oracle for [`PointGrid`]).
pub fn brute_force_distances(queries: &[P3], points: &[P3]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| points.iter().map(|p| dist(q, p)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn nearest_distances(queries: &[P3], points: &[P3]) -> Result<Vec<f64>, MeshError> {
    let grid = PointGrid::new(points)?;
    Ok(queries.par_iter().map(|q| grid.nearest_distance(q)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryScore {
    pub chamfer_l1: f64,
    /// Percent.
    pub f_score: f64,
    pub precision: f64,
    pub recall: f64,
    pub tau: f64,
}

impl GeometryScore {
    pub fn csv_header() -> &'static str {
        "chamfer_l1,f_score,precision,recall,tau"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.chamfer_l1, self.f_score, self.precision, self.recall, self.tau)
    }

    pub fn report(&self) -> String {
        format!(
            "Chamfer-L1: {:.6}\nF-score@{}: {:.3}%\nprecision: {:.3}%\nrecall: {:.3}%\n",
            self.chamfer_l1, self.tau, self.f_score, self.precision, self.recall
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn within_percent(v: &[f64], tau: f64) -> f64 {
    100.0 * v.iter().filter(|&&d| d < tau).count() as f64 / v.len() as f64
}

/// Score from precomputed distances: `pred_to_ref[i]` for predicted points
/// and `ref_to_pred[j]` for reference points.
pub fn score_from_distances(pred_to_ref: &[f64], ref_to_pred: &[f64], tau: f64) -> Result<GeometryScore, MeshError> {
    if pred_to_ref.is_empty() || ref_to_pred.is_empty() {
        return Err(MeshError::Empty("point set"));
    }
    let precision = within_percent(pred_to_ref, tau);
    let recall = within_percent(ref_to_pred, tau);
    let f_score = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(GeometryScore {
        chamfer_l1: 0.5 * (mean(pred_to_ref) + mean(ref_to_pred)),
        f_score,
        precision,
        recall,
        tau,
    })
}

pub fn chamfer_f_score(pred: &[P3], reference: &[P3], tau: f64) -> Result<GeometryScore, MeshError> {
    let a = nearest_distances(pred, reference)?;
    let b = nearest_distances(reference, pred)?;
    score_from_distances(&a, &b, tau)
}

/// Brute-force counterpart of [`chamfer_f_score`].
pub fn chamfer_f_score_brute(pred: &[P3], reference: &[P3], tau: f64) -> Result<GeometryScore, MeshError> {
    if pred.is_empty() || reference.is_empty() {
        return Err(MeshError::Empty("point set"));
    }
    score_from_distances(&brute_force_distances(pred, reference), &brute_force_distances(reference, pred), tau)
}

/// Analytic sphere used as an exact reference surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereReference {
    pub center: P3,
    pub radius: f64,
}

impl SphereReference {
    pub fn distance(&self, p: &P3) -> f64 {
        (dist(p, &self.center) - self.radius).abs()
    }

    pub fn signed_distance(&self, p: &P3) -> f64 {
        dist(p, &self.center) - self.radius
    }

    /// Uniform samples (normalized Gaussian directions).
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<P3> {
        let normal = rand_distr::StandardNormal;
        (0..n)
            .map(|_| loop {
                let d: P3 = [rng.sample(normal), rng.sample(normal), rng.sample(normal)];
                let l = dot(&d, &d).sqrt();
                if l > 1e-12 {
                    break [0, 1, 2].map(|k| self.center[k] + self.radius * d[k] / l);
                }
            })
            .collect()
    }

    /// Scores predicted points using exact point-to-sphere distances for
    /// precision and `ref_samples` sphere samples for recall.
    pub fn score<R: Rng>(&self, pred: &[P3], ref_samples: usize, tau: f64, rng: &mut R) -> Result<GeometryScore, MeshError> {
        if pred.is_empty() {
            return Err(MeshError::Empty("point set"));
        }
        let a: Vec<f64> = pred.iter().map(|p| self.distance(p)).collect();
        let reference = self.sample(ref_samples, rng);
        let b = nearest_distances(&reference, pred)?;
        score_from_distances(&a, &b, tau)
    }
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh, MeshError> {
    let text = fs::read_to_string(path)?;
    let mut mesh = TriangleMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let v: Vec<f64> = tok.take(3).map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| MeshError::Format(format!("line {}: {e}", ln + 1)))?;
                if v.len() != 3 {
                    return Err(MeshError::Format(format!("line {}: vertex needs 3 coordinates", ln + 1)));
                }
                mesh.vertices.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = tok
                    .map(|s| s.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| MeshError::Format(format!("line {}: {e}", ln + 1)))?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(MeshError::Format(format!("line {}: bad face", ln + 1)));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Binary little-endian PLY; `scalar` adds a per-vertex float property
/// named `error`.
pub fn write_ply(mesh: &TriangleMesh, scalar: Option<&[f64]>, path: &Path) -> Result<(), MeshError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "ply\nformat binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if scalar.is_some() {
        writeln!(w, "property float error")?;
    }
    writeln!(w, "element face {}", mesh.triangles.len())?;
    writeln!(w, "property list uchar int vertex_indices\nend_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if let Some(s) = scalar {
            w.write_all(&(s[i] as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads meshes written by [`write_ply`] (float vertex properties, the
/// first three being x, y, z; uchar/int face lists).
pub fn read_ply(path: &Path) -> Result<(TriangleMesh, Option<Vec<f64>>), MeshError> {
    let bytes = fs::read(path)?;
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| MeshError::Format("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| MeshError::Format("header is not text".into()))?;
    let mut n_vert = 0;
    let mut n_face = 0;
    let mut vprops = Vec::new();
    let mut in_vertex = false;
    for line in header.lines() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(MeshError::Format(format!("unsupported format {fmt}")));
            }
            ["element", "vertex", n] => {
                n_vert = n.parse().map_err(|_| MeshError::Format("bad vertex count".into()))?;
                in_vertex = true;
            }
            ["element", "face", n] => {
                n_face = n.parse().map_err(|_| MeshError::Format("bad face count".into()))?;
                in_vertex = false;
            }
            ["property", "float", name] if in_vertex => vprops.push(name.to_string()),
            ["property", ty, ..] if in_vertex => return Err(MeshError::Format(format!("unsupported vertex property type {ty}"))),
            _ => {}
        }
    }
    if vprops.len() < 3 {
        return Err(MeshError::Format("vertex needs x, y, z".into()));
    }
    let mut pos = end + 11;
    let mut take = |n: usize| -> Result<&[u8], MeshError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| MeshError::Format("truncated body".into()))?;
        pos += n;
        Ok(s)
    };
    let mut mesh = TriangleMesh::default();
    let has_scalar = vprops.iter().any(|p| p == "error");
    let mut scalar = Vec::new();
    for _ in 0..n_vert {
        let mut vals = Vec::with_capacity(vprops.len());
        for _ in 0..vprops.len() {
            let b = take(4)?;
            vals.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        mesh.vertices.push([vals[0], vals[1], vals[2]]);
        if let Some(i) = vprops.iter().position(|p| p == "error") {
            scalar.push(vals[i]);
        }
    }
    for _ in 0..n_face {
        let count = take(1)?[0] as usize;
        let mut idx = Vec::with_capacity(count);
        for _ in 0..count {
            let b = take(4)?;
            let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if v < 0 {
                return Err(MeshError::Format("negative vertex index".into()));
            }
            idx.push(v as u32);
        }
        for k in 1..count.saturating_sub(1) {
            mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
        }
    }
    mesh.validate()?;
    Ok((mesh, has_scalar.then_some(scalar)))
}

/// Reads `.obj` or `.ply` by extension.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh, MeshError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path),
        Some("ply") => Ok(read_ply(path)?.0),
        _ => Err(MeshError::Format(format!("unknown mesh extension for {}", path.display()))),
    }
}

pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<(), MeshError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => write_obj(mesh, path),
        Some("ply") => write_ply(mesh, None, path),
        _ => Err(MeshError::Format(format!("unknown mesh extension for {}", path.display()))),
    }
}

/// Per-vertex signed error truncated to `[-e_max, e_max]`.
pub fn signed_error<F: Fn(&P3) -> f64>(mesh: &TriangleMesh, signed_distance: F, e_max: f64) -> Vec<f64> {
    mesh.vertices.iter().map(|v| signed_distance(v).clamp(-e_max, e_max)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_sdf(r: f64) -> impl Fn(&[P3]) -> Vec<f64> {
        move |pts: &[P3]| pts.iter().map(|p| dot(p, p).sqrt() - r).collect()
    }

    fn unit_box() -> Aabb {
        Aabb::new([-1.0; 3], [1.0; 3])
    }

    #[test]
    fn sphere_vertices_near_radius_and_watertight() {
        let ex = marching_cubes(sphere_sdf(0.5), unit_box(), 64, 0.0).unwrap();
        assert!(!ex.empty);
        let h = 2.0 / 64.0;
        for v in &ex.mesh.vertices {
            assert!((dot(v, v).sqrt() - 0.5).abs() <= 1.5 * h);
        }
        assert!(ex.mesh.is_watertight());
        let vol = ex.mesh.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((vol - exact).abs() / exact < 0.01, "{vol} vs {exact}");
    }

    #[test]
    fn positive_field_is_empty() {
        let ex = marching_cubes(|p: &[P3]| vec![1.0; p.len()], unit_box(), 8, 0.0).unwrap();
        assert!(ex.empty && ex.mesh.is_empty());
        assert!(matches!(marching_cubes(sphere_sdf(0.5), unit_box(), 7, 0.0), Err(MeshError::Resolution(7))));
    }

    #[test]
    fn square_sampling_splits_evenly() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            normals: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_surface(&mesh, 10_000, &mut rng).unwrap();
        // Triangle 0 is the half below the diagonal y = x.
        let below = pts.iter().filter(|p| p[1] < p[0]).count() as f64;
        let sigma = (10_000.0f64 * 0.25).sqrt();
        assert!((below - 5000.0).abs() < 3.0 * sigma);
        assert!(pts.iter().all(|p| p[2].abs() < 1e-6));
        assert!(sample_surface(&TriangleMesh::default(), 3, &mut rng).is_err());
    }

    #[test]
    fn sphere_samples_are_uniform_over_octants() {
        let ex = marching_cubes(sphere_sdf(0.5), unit_box(), 48, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = sample_surface(&ex.mesh, 100_000, &mut rng).unwrap();
        let mut counts = [0usize; 8];
        for p in &pts {
            let o = (p[0] >= 0.0) as usize | ((p[1] >= 0.0) as usize) << 1 | ((p[2] >= 0.0) as usize) << 2;
            counts[o] += 1;
        }
        let (lo, hi) = (*counts.iter().min().unwrap() as f64, *counts.iter().max().unwrap() as f64);
        assert!((hi - lo) / lo < 0.05, "{counts:?}");
    }

    #[test]
    fn lattice_offset_chamfer() {
        let a: Vec<P3> = (0..50).map(|i| [i as f64, 0.0, 0.0]).collect();
        let b: Vec<P3> = (0..50).map(|i| [i as f64 + 0.3, 0.0, 0.0]).collect();
        let s = chamfer_f_score(&a, &b, 1.0).unwrap();
        assert!((s.chamfer_l1 - 0.3).abs() < 1e-12);
        let same = chamfer_f_score(&a, &a, 0.01).unwrap();
        assert_eq!((same.chamfer_l1, same.f_score), (0.0, 100.0));
        let tau = 0.2;
        let shifted: Vec<P3> = a.iter().map(|p| [p[0], p[1] + tau / 2.0, p[2]]).collect();
        let s = chamfer_f_score(&a, &shifted, tau).unwrap();
        assert_eq!((s.precision, s.recall), (100.0, 100.0));
        assert!(chamfer_f_score(&[], &a, 0.1).is_err());
    }

    #[test]
    fn grid_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 7, 300, 2000] {
            let a: Vec<P3> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2), rng.gen_range(0.0..3.0)]).collect();
            let b: Vec<P3> = (0..n).map(|_| [rng.gen_range(-2.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            assert_eq!(nearest_distances(&a, &b).unwrap(), brute_force_distances(&a, &b));
            assert_eq!(chamfer_f_score(&a, &b, 0.1).unwrap(), chamfer_f_score_brute(&a, &b, 0.1).unwrap());
        }
    }

    #[test]
    fn metric_symmetry_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<P3> = (0..500).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let b: Vec<P3> = (0..400).map(|_| [rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1]).collect();
        let ab = chamfer_f_score(&a, &b, 0.05).unwrap();
        let ba = chamfer_f_score(&b, &a, 0.05).unwrap();
        assert_eq!(ab.chamfer_l1, ba.chamfer_l1);
        let mut last = 0.0;
        for tau in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let f = chamfer_f_score(&a, &b, tau).unwrap().f_score;
            assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn analytic_reference_agrees_with_sampled() {
        // A slightly inflated prediction, so geometric error dominates the
        // sampling density of the reference.
        let ex = marching_cubes(sphere_sdf(0.53), unit_box(), 64, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pred = sample_surface(&ex.mesh, 20_000, &mut rng).unwrap();
        let sphere = SphereReference {
            center: [0.0; 3],
            radius: 0.5,
        };
        let exact = sphere.score(&pred, 20_000, 0.04, &mut rng).unwrap();
        let reference = sphere.sample(200_000, &mut rng);
        let sampled = chamfer_f_score(&pred, &reference, 0.04).unwrap();
        let rel = (exact.chamfer_l1 - sampled.chamfer_l1).abs() / sampled.chamfer_l1;
        assert!(rel < 0.02, "exact {} sampled {}", exact.chamfer_l1, sampled.chamfer_l1);
    }

    #[test]
    fn obj_and_ply_round_trip_same_geometry() {
        let ex = marching_cubes(sphere_sdf(0.5), unit_box(), 16, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("m.obj");
        let ply = dir.path().join("m.ply");
        write_obj(&ex.mesh, &obj).unwrap();
        let err = signed_error(&ex.mesh, |p| dot(p, p).sqrt() - 0.5, 0.002);
        write_ply(&ex.mesh, Some(&err), &ply).unwrap();
        let a = read_obj(&obj).unwrap();
        let (b, s) = read_ply(&ply).unwrap();
        assert_eq!(a.triangles, b.triangles);
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            assert!(dist(p, q) < 1e-6);
        }
        assert!(s.unwrap().iter().all(|v| v.abs() <= 0.002 + 1e-9));
    }

    #[test]
    fn crop_removes_outside_triangles() {
        let mut mesh = marching_cubes(sphere_sdf(0.5), unit_box(), 16, 0.0).unwrap().mesh;
        let before = mesh.triangles.len();
        mesh.crop(&Aabb::new([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0]));
        assert!(mesh.triangles.len() < before && !mesh.triangles.is_empty());
        assert!(mesh.vertices.iter().all(|v| v[2] > -0.1));
        mesh.validate().unwrap();
    }
}
