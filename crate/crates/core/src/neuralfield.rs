//! Hash-grid neural signed distance field with SDF and color decoders.
//!
//! The SDF is `s(x) = Phi_s(G(x))[0] + (|x - c| - r0)`: the decoder output
//! is a residual on top of a sphere of radius `r0` centered in the domain,
//! so an untrained field already behaves like a signed distance function
//! (negative inside). Normals come from central finite differences of `s`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub coarsest_res: usize,
    pub finest_res: usize,
    pub table_size_log2: u32,
    pub features_per_level: usize,
    pub domain_min: [f64; 3],
    pub domain_max: [f64; 3],
}

impl HashGridConfig {
    /// CPU-sized grid.
    pub fn desk() -> Self {
        Self {
            levels: 16,
            coarsest_res: 16,
            finest_res: 512,
            table_size_log2: 14,
            features_per_level: 2,
            domain_min: [-1.0; 3],
            domain_max: [1.0; 3],
        }
    }

    /// Grid sizes reported for the full-scale setup.
    pub fn paper() -> Self {
        Self {
            levels: 16,
            coarsest_res: 32,
            finest_res: 2700,
            table_size_log2: 19,
            features_per_level: 2,
            domain_min: [-1.0; 3],
            domain_max: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.levels == 0 || self.levels > u16::MAX as usize {
            return Err(FieldError::Config("levels must be positive".into()));
        }
        if self.coarsest_res < 1 || self.finest_res < self.coarsest_res {
            return Err(FieldError::Config("resolutions must satisfy 1 <= coarsest <= finest".into()));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 24 {
            return Err(FieldError::Config("table_size_log2 must be in 1..=24".into()));
        }
        if self.features_per_level == 0 {
            return Err(FieldError::Config("features_per_level must be positive".into()));
        }
        if (0..3).any(|k| self.domain_max[k] <= self.domain_min[k]) {
            return Err(FieldError::Config("empty domain".into()));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    /// Per-level growth factor of the geometric resolution progression.
    pub fn growth(&self) -> f64 {
        if self.levels == 1 {
            1.0
        } else {
            ((self.finest_res as f64).ln() - (self.coarsest_res as f64).ln()).exp().powf(1.0 / (self.levels - 1) as f64)
        }
    }

    pub fn resolution(&self, level: usize) -> usize {
        if level + 1 == self.levels {
            return self.finest_res;
        }
        (self.coarsest_res as f64 * self.growth().powi(level as i32)).round() as usize
    }

    /// Whether the dense `(res+1)^3` lattice fits into the table.
    pub fn is_dense(&self, level: usize) -> bool {
        let n = self.resolution(level) as u64 + 1;
        n * n * n <= self.table_size() as u64
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.domain_max[0] - self.domain_min[0],
            self.domain_max[1] - self.domain_min[1],
            self.domain_max[2] - self.domain_min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.domain_max[0] + self.domain_min[0]),
            0.5 * (self.domain_max[1] + self.domain_min[1]),
            0.5 * (self.domain_max[2] + self.domain_min[2]),
        ]
    }

    /// Cell edge length (smallest axis) at `level`.
    pub fn cell_size(&self, level: usize) -> f64 {
        let e = self.extent();
        e[0].min(e[1]).min(e[2]) / self.resolution(level) as f64
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Table row (within the level) for integer lattice coordinates.
    pub fn lattice_index(&self, level: usize, c: [u32; 3]) -> usize {
        if self.is_dense(level) {
            let n = self.resolution(level) + 1;
            c[0] as usize + n * (c[1] as usize + n * c[2] as usize)
        } else {
            hash_index(c, self.table_size())
        }
    }
}

#[inline]
fn hash_index(c: [u32; 3], table_size: usize) -> usize {
    let h = c[0].wrapping_mul(PRIMES[0]) ^ c[1].wrapping_mul(PRIMES[1]) ^ c[2].wrapping_mul(PRIMES[2]);
    (h as usize) & (table_size - 1)
}

/// Active level count for progressive training: starts at `start` and adds
/// one level every `interval` iterations.
pub fn active_levels_at(iteration: usize, levels: usize, start: usize, interval: usize) -> usize {
    let interval = interval.max(1);
    (start + iteration / interval).min(levels)
}

/// The default progression: four levels at first, one more per 1000 iterations.
pub fn set_active_levels(iteration: usize, levels: usize) -> usize {
    active_levels_at(iteration, levels, 4, 1000)
}

/// Interpolation stencil of a batch of points: 8 corners per active level.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub blocks: Vec<u16>,
    pub rows: Vec<u32>,
    pub weights: Vec<f32>,
    /// Number of points that were clamped into the domain.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub sdf_hidden: usize,
    pub geo_features: usize,
    pub color_hidden: usize,
    /// Radius of the initial sphere, as a fraction of the domain half-extent.
    pub init_radius_fraction: f64,
    pub softplus_beta: f32,
    pub init_sharpness: f32,
    pub seed: u64,
}

impl FieldConfig {
    pub fn desk() -> Self {
        Self {
            grid: HashGridConfig::desk(),
            sdf_hidden: 64,
            geo_features: 15,
            color_hidden: 64,
            init_radius_fraction: 0.5,
            softplus_beta: 100.0,
            init_sharpness: 64.0,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            grid: HashGridConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn init_radius(&self) -> f64 {
        let e = self.grid.extent();
        0.5 * e[0].min(e[1]).min(e[2]) * self.init_radius_fraction
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldParams {
    pub table: ParamId,
    pub sdf_w1: ParamId,
    pub sdf_b1: ParamId,
    pub sdf_ws: ParamId,
    pub sdf_bs: ParamId,
    pub feat_w: ParamId,
    pub feat_b: ParamId,
    pub col_w1: ParamId,
    pub col_b1: ParamId,
    pub col_w2: ParamId,
    pub col_b2: ParamId,
    pub col_w3: ParamId,
    pub col_b3: ParamId,
    pub log_sharpness: ParamId,
}

/// Differentiable evaluation of a field at sample points.
#[derive(Debug, Clone, Copy)]
pub struct SampleEval {
    /// `n x 1` signed distances.
    pub sdf: Var,
    /// `n x 3` finite-difference gradients (not normalized).
    pub grad: Var,
    /// `n x 3` unit normals (zero where the gradient vanishes).
    pub normal: Var,
    /// `n x 3` colors in `[0, 1]`.
    pub color: Var,
}

/// Anything the volume renderer can draw.
pub trait FieldModel: Sync {
    fn params(&self) -> &ParamStore;

    /// Plain SDF values (no gradient tracking).
    fn sdf_values(&self, points: &[[f32; 3]]) -> Vec<f32>;

    /// Finite-difference step for normals.
    fn fd_step(&self) -> f32;

    /// NeuS sharpness as a `1x1` node.
    fn sharpness(&self, tape: &mut Tape) -> Var;

    fn eval_samples(&self, tape: &mut Tape, points: &[[f32; 3]], view_dirs: &[[f32; 3]]) -> Result<SampleEval, TensorError>;
}

fn offsets_batch(points: &[[f32; 3]], h: f32) -> Vec<[f32; 3]> {
    let n = points.len();
    let mut all = Vec::with_capacity(7 * n);
    all.extend_from_slice(points);
    for axis in 0..3 {
        for sign in [1.0f32, -1.0] {
            all.extend(points.iter().map(|p| {
                let mut q = *p;
                q[axis] += sign * h;
                q
            }));
        }
    }
    all
}

/// Turns a `7n x 1` SDF column (center, +x, -x, +y, -y, +z, -z blocks)
/// into the center values and central-difference gradients.
pub fn fd_gradient(tape: &mut Tape, sdf_all: Var, n: usize, h: f32) -> Result<(Var, Var), TensorError> {
    let s0 = tape.slice_rows(sdf_all, 0, n)?;
    let mut cols = Vec::with_capacity(3);
    for axis in 0..3 {
        let plus = tape.slice_rows(sdf_all, (1 + 2 * axis) * n, n)?;
        let minus = tape.slice_rows(sdf_all, (2 + 2 * axis) * n, n)?;
        let d = tape.sub(plus, minus)?;
        cols.push(tape.scale(d, 1.0 / (2.0 * h)));
    }
    let grad = tape.concat_cols(&cols)?;
    Ok((s0, grad))
}

#[derive(Debug, Clone)]
pub struct NeuralField {
    pub config: FieldConfig,
    pub store: ParamStore,
    pub ids: FieldParams,
    active_levels: usize,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl NeuralField {
    pub fn new(config: FieldConfig) -> Result<Self, FieldError> {
        config.grid.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g = &config.grid;
        let mut store = ParamStore::new();
        let table_rows = g.levels * g.table_size();
        let f = g.features_per_level;
        let table = store.add("grid.table", table_rows, f, uniform(&mut rng, table_rows * f, 1e-4));
        let din = g.output_dim();
        let hs = config.sdf_hidden;
        let xav = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f32).sqrt();
        let sdf_w1 = store.add("sdf.w1", din, hs, uniform(&mut rng, din * hs, xav(din, hs)));
        let sdf_b1 = store.add("sdf.b1", 1, hs, vec![0.0; hs]);
        let sdf_ws = store.add("sdf.ws", hs, 1, uniform(&mut rng, hs, 0.1 * xav(hs, 1)));
        let sdf_bs = store.add("sdf.bs", 1, 1, vec![0.0]);
        let gf = config.geo_features;
        let feat_w = store.add("sdf.wf", hs, gf, uniform(&mut rng, hs * gf, xav(hs, gf)));
        let feat_b = store.add("sdf.bf", 1, gf, vec![0.0; gf]);
        let cin = 1 + gf + 3 + 3;
        let hc = config.color_hidden;
        let col_w1 = store.add("color.w1", cin, hc, uniform(&mut rng, cin * hc, xav(cin, hc)));
        let col_b1 = store.add("color.b1", 1, hc, vec![0.0; hc]);
        let col_w2 = store.add("color.w2", hc, hc, uniform(&mut rng, hc * hc, xav(hc, hc)));
        let col_b2 = store.add("color.b2", 1, hc, vec![0.0; hc]);
        let col_w3 = store.add("color.w3", hc, 3, uniform(&mut rng, hc * 3, xav(hc, 3)));
        let col_b3 = store.add("color.b3", 1, 3, vec![0.0; 3]);
        let log_sharpness = store.add("sharpness.log", 1, 1, vec![config.init_sharpness.ln()]);
        let active = 4.min(g.levels);
        Ok(Self {
            ids: FieldParams {
                table,
                sdf_w1,
                sdf_b1,
                sdf_ws,
                sdf_bs,
                feat_w,
                feat_b,
                col_w1,
                col_b1,
                col_w2,
                col_b2,
                col_w3,
                col_b3,
                log_sharpness,
            },
            config,
            store,
            active_levels: active,
        })
    }

    pub fn active_levels(&self) -> usize {
        self.active_levels
    }

    pub fn set_active(&mut self, levels: usize) {
        self.active_levels = levels.min(self.config.grid.levels);
    }

    pub fn sharpness_value(&self) -> f32 {
        self.store.get(self.ids.log_sharpness).values[0].exp()
    }

    /// Interpolation stencil for `points` over the active levels.
    pub fn stencil(&self, points: &[[f32; 3]]) -> Stencil {
        let g = &self.config.grid;
        let active = self.active_levels;
        let per_row = 8 * active;
        let mut st = Stencil {
            blocks: (0..per_row).map(|e| (e / 8) as u16).collect(),
            rows: Vec::with_capacity(points.len() * per_row),
            weights: Vec::with_capacity(points.len() * per_row),
            clamped: 0,
        };
        let ext = g.extent();
        let t = g.table_size();
        let levels: Vec<(usize, Option<usize>)> = (0..active)
            .map(|l| {
                let res = g.resolution(l);
                (res, g.is_dense(l).then_some(res + 1))
            })
            .collect();
        for p in points {
            let mut u = [0.0f64; 3];
            let mut clamped = false;
            for k in 0..3 {
                let v = (p[k] as f64 - g.domain_min[k]) / ext[k];
                if !(0.0..=1.0).contains(&v) {
                    clamped = true;
                }
                u[k] = v.clamp(0.0, 1.0);
            }
            if clamped {
                st.clamped += 1;
            }
            for (level, &(res, dense)) in levels.iter().enumerate() {
                let mut part = [[0u32; 2]; 3];
                let mut wt = [[0.0f64; 2]; 3];
                for k in 0..3 {
                    let x = u[k] * res as f64;
                    let b = (x.floor() as usize).min(res - 1) as u32;
                    let f = x - b as f64;
                    wt[k] = [1.0 - f, f];
                    part[k] = match dense {
                        Some(n) => {
                            let stride = [1, n as u32, (n * n) as u32][k];
                            [b * stride, (b + 1) * stride]
                        }
                        None => [b.wrapping_mul(PRIMES[k]), (b + 1).wrapping_mul(PRIMES[k])],
                    };
                }
                let offset = (level * t) as u32;
                for corner in 0..8usize {
                    let (i, j, k) = (corner & 1, corner >> 1 & 1, corner >> 2 & 1);
                    let row = match dense {
                        Some(_) => part[0][i] + part[1][j] + part[2][k],
                        None => (part[0][i] ^ part[1][j] ^ part[2][k]) & (t as u32 - 1),
                    };
                    st.rows.push(offset + row);
                    st.weights.push((wt[0][i] * wt[1][j] * wt[2][k]) as f32);
                }
            }
        }
        st
    }

    /// Multi-resolution features of one point (inactive levels are zero).
    pub fn hash_encode(&self, x: [f32; 3]) -> Vec<f32> {
        let g = &self.config.grid;
        let f = g.features_per_level;
        let st = self.stencil(&[x]);
        let table = &self.store.get(self.ids.table).values;
        let mut out = vec![0.0f32; g.output_dim()];
        for (e, (&row, &w)) in st.rows.iter().zip(&st.weights).enumerate() {
            let b = st.blocks[e] as usize * f;
            for k in 0..f {
                out[b + k] += w * table[row as usize * f + k];
            }
        }
        out
    }

    fn encode(&self, tape: &mut Tape, points: &[[f32; 3]]) -> Result<Var, TensorError> {
        let st = self.stencil(points);
        let g = &self.config.grid;
        if st.blocks.is_empty() {
            return Ok(tape.constant(Tensor::zeros(points.len(), g.output_dim())));
        }
        tape.weighted_gather(self.ids.table, g.levels, st.blocks, st.rows, st.weights)
    }

    fn prior(&self, points: &[[f32; 3]]) -> Tensor {
        let c = self.config.grid.center();
        let r0 = self.config.init_radius();
        let data = points
            .iter()
            .map(|p| {
                let d = ((p[0] as f64 - c[0]).powi(2) + (p[1] as f64 - c[1]).powi(2) + (p[2] as f64 - c[2]).powi(2)).sqrt();
                (d - r0) as f32
            })
            .collect();
        Tensor {
            rows: points.len(),
            cols: 1,
            data,
        }
    }

    /// SDF column and hidden activations of the SDF decoder.
    fn sdf_forward(&self, tape: &mut Tape, points: &[[f32; 3]]) -> Result<(Var, Var), TensorError> {
        let enc = self.encode(tape, points)?;
        let w1 = tape.param(self.ids.sdf_w1);
        let b1 = tape.param(self.ids.sdf_b1);
        let z = tape.matmul(enc, w1)?;
        let z = tape.add(z, b1)?;
        let hidden = tape.softplus(z, self.config.softplus_beta);
        let ws = tape.param(self.ids.sdf_ws);
        let bs = tape.param(self.ids.sdf_bs);
        let s = tape.matmul(hidden, ws)?;
        let s = tape.add(s, bs)?;
        let prior = tape.constant(self.prior(points));
        let s = tape.add(s, prior)?;
        Ok((s, hidden))
    }

    /// Differentiable signed distance and geometry features `(s, f)`.
    pub fn sdf_query(&self, tape: &mut Tape, points: &[[f32; 3]]) -> Result<(Var, Var), TensorError> {
        let (s, hidden) = self.sdf_forward(tape, points)?;
        let f = self.features(tape, hidden)?;
        Ok((s, f))
    }

    fn features(&self, tape: &mut Tape, hidden: Var) -> Result<Var, TensorError> {
        let wf = tape.param(self.ids.feat_w);
        let bf = tape.param(self.ids.feat_b);
        let f = tape.matmul(hidden, wf)?;
        tape.add(f, bf)
    }

    /// Color decoder on `(s, f, v, n)`; output squashed into `[0, 1]^3`.
    pub fn color_query(&self, tape: &mut Tape, s: Var, f: Var, v: Var, n: Var) -> Result<Var, TensorError> {
        let x = tape.concat_cols(&[s, f, v, n])?;
        let mut h = x;
        for (w, b) in [
            (self.ids.col_w1, self.ids.col_b1),
            (self.ids.col_w2, self.ids.col_b2),
        ] {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let z = tape.matmul(h, wv)?;
            let z = tape.add(z, bv)?;
            h = tape.relu(z);
        }
        let w3 = tape.param(self.ids.col_w3);
        let b3 = tape.param(self.ids.col_b3);
        let z = tape.matmul(h, w3)?;
        let z = tape.add(z, b3)?;
        Ok(tape.sigmoid(z))
    }

    /// Step for finite-difference normals: half the finest active cell.
    pub fn fd_step_value(&self) -> f32 {
        let level = self.active_levels.max(1) - 1;
        (0.5 * self.config.grid.cell_size(level)) as f32
    }

    /// Unit normal from finite differences; falls back to `+z` (flag set)
    /// when the gradient vanishes.
    pub fn normal_at(&self, x: [f32; 3]) -> ([f32; 3], bool) {
        let h = self.fd_step();
        let s = self.sdf_values(&offsets_batch(&[x], h));
        let g = [
            (s[1] - s[2]) as f64,
            (s[3] - s[4]) as f64,
            (s[5] - s[6]) as f64,
        ];
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if n < 1e-12 {
            return ([0.0, 0.0, 1.0], true);
        }
        ([(g[0] / n) as f32, (g[1] / n) as f32, (g[2] / n) as f32], false)
    }

    /// Writes a versioned checkpoint (config block plus named raw parameters).
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), FieldError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "PSDFCKPT v1")?;
        let cfg = serde_json::to_string(&self.config).map_err(|e| FieldError::Checkpoint(e.to_string()))?;
        writeln!(w, "config {cfg}")?;
        writeln!(w, "active_levels {}", self.active_levels)?;
        writeln!(w, "params {}", self.store.len())?;
        for (_, p) in self.store.iter() {
            writeln!(w, "param {} {} {}", p.name, p.rows, p.cols)?;
            let mut buf = Vec::with_capacity(p.values.len() * 4);
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, FieldError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<File>| -> Result<String, FieldError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(FieldError::Checkpoint("unexpected end of file".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != "PSDFCKPT v1" {
            return Err(FieldError::Checkpoint("bad magic or version".into()));
        }
        let cfg_line = next_line(&mut r)?;
        let cfg = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| FieldError::Checkpoint("missing config block".into()))?;
        let config: FieldConfig = serde_json::from_str(cfg).map_err(|e| FieldError::Checkpoint(e.to_string()))?;
        let al_line = next_line(&mut r)?;
        let active: usize = al_line
            .strip_prefix("active_levels ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FieldError::Checkpoint("missing active_levels".into()))?;
        let count_line = next_line(&mut r)?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FieldError::Checkpoint("missing parameter count".into()))?;
        let mut field = NeuralField::new(config)?;
        if count != field.store.len() {
            return Err(FieldError::Checkpoint(format!(
                "expected {} parameters, found {count}",
                field.store.len()
            )));
        }
        for _ in 0..count {
            let head = next_line(&mut r)?;
            let tok: Vec<&str> = head.split_whitespace().collect();
            if tok.len() != 4 || tok[0] != "param" {
                return Err(FieldError::Checkpoint(format!("bad parameter record `{head}`")));
            }
            let id = field
                .store
                .find(tok[1])
                .ok_or_else(|| FieldError::Checkpoint(format!("unknown parameter `{}`", tok[1])))?;
            let (rows, cols): (usize, usize) = (
                tok[2].parse().map_err(|_| FieldError::Checkpoint("bad rows".into()))?,
                tok[3].parse().map_err(|_| FieldError::Checkpoint("bad cols".into()))?,
            );
            let p = field.store.get_mut(id);
            if rows != p.rows || cols != p.cols {
                return Err(FieldError::Checkpoint(format!("shape mismatch for `{}`", tok[1])));
            }
            let mut bytes = vec![0u8; rows * cols * 4];
            r.read_exact(&mut bytes)?;
            for (v, b) in p.values.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            let mut nl = [0u8; 1];
            r.read_exact(&mut nl)?;
        }
        if next_line(&mut r)? != "end" {
            return Err(FieldError::Checkpoint("missing end marker".into()));
        }
        field.set_active(active);
        Ok(field)
    }
}

impl FieldModel for NeuralField {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn sdf_values(&self, points: &[[f32; 3]]) -> Vec<f32> {
        const CHUNK: usize = 8192;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let mut tape = Tape::new(&self.store);
            let (s, _) = self.sdf_forward(&mut tape, chunk).expect("shapes are consistent");
            out.extend_from_slice(tape.value(s));
        }
        out
    }

    fn fd_step(&self) -> f32 {
        self.fd_step_value()
    }

    fn sharpness(&self, tape: &mut Tape) -> Var {
        let l = tape.param(self.ids.log_sharpness);
        tape.exp(l)
    }

    fn eval_samples(&self, tape: &mut Tape, points: &[[f32; 3]], view_dirs: &[[f32; 3]]) -> Result<SampleEval, TensorError> {
        let n = points.len();
        let h = self.fd_step();
        let batch = offsets_batch(points, h);
        let (s_all, hidden_all) = self.sdf_forward(tape, &batch)?;
        let (sdf, grad) = fd_gradient(tape, s_all, n, h)?;
        let hidden = tape.slice_rows(hidden_all, 0, n)?;
        let feat = self.features(tape, hidden)?;
        let normal = tape.normalize3(grad, 1e-12)?;
        let v = tape.constant(Tensor {
            rows: n,
            cols: 3,
            data: view_dirs.iter().flatten().copied().collect(),
        });
        let color = self.color_query(tape, sdf, feat, v, normal)?;
        Ok(SampleEval {
            sdf,
            grad,
            normal,
            color,
        })
    }
}

/// Closed-form SDFs used as oracles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticShape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Points with `normal . x = offset` lie on the plane.
    Plane { normal: [f64; 3], offset: f64 },
}

impl AnalyticShape {
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match *self {
            AnalyticShape::Sphere { center, radius } => {
                ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt() - radius
            }
            AnalyticShape::Plane { normal, offset } => normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2] - offset,
        }
    }
}

/// An analytic SDF with constant color, fixed sharpness and an optional
/// scale factor (a scale other than one breaks the unit-gradient property).
#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub shape: AnalyticShape,
    pub color: [f32; 3],
    pub sharpness: f32,
    pub scale: f32,
    pub step: f32,
    store: ParamStore,
}

impl AnalyticField {
    pub fn new(shape: AnalyticShape, color: [f32; 3], sharpness: f32) -> Self {
        Self {
            shape,
            color,
            sharpness,
            scale: 1.0,
            step: 1e-3,
            store: ParamStore::new(),
        }
    }

    pub fn scaled(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }
}

impl FieldModel for AnalyticField {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn sdf_values(&self, points: &[[f32; 3]]) -> Vec<f32> {
        points
            .iter()
            .map(|p| (self.scale as f64 * self.shape.sdf([p[0] as f64, p[1] as f64, p[2] as f64])) as f32)
            .collect()
    }

    fn fd_step(&self) -> f32 {
        self.step
    }

    fn sharpness(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::scalar(self.sharpness))
    }

    fn eval_samples(&self, tape: &mut Tape, points: &[[f32; 3]], _view_dirs: &[[f32; 3]]) -> Result<SampleEval, TensorError> {
        let n = points.len();
        let h = self.fd_step();
        let batch = offsets_batch(points, h);
        let s_all = tape.constant(Tensor {
            rows: batch.len(),
            cols: 1,
            data: self.sdf_values(&batch),
        });
        let (sdf, grad) = fd_gradient(tape, s_all, n, h)?;
        let normal = tape.normalize3(grad, 1e-12)?;
        let color = tape.constant(Tensor {
            rows: n,
            cols: 3,
            data: (0..n).flat_map(|_| self.color).collect(),
        });
        Ok(SampleEval {
            sdf,
            grad,
            normal,
            color,
        })
    }
}
