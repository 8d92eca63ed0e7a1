//! Loss assembly, criss-cross pixel sampling, the staged weight schedule
//! and the optimization loop.
//!
//! One step renders the sampled pixels in ray chunks (each chunk owns a
//! tape), assembles the pixel losses on a separate small tape whose leaves
//! are the rendered values, and pushes the leaf adjoints back into the chunk
//! tapes as seeds.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::PolarizationFrame;
use crate::meshmetrics::{marching_cubes, Extraction, MeshError};
use crate::neuralfield::{active_levels_at, FieldConfig, FieldError, FieldModel, NeuralField};
use crate::polconstraint::{coeff_ortho, coeff_persp, ConstraintKind, DisambiguationOffset, DEFAULT_DOP_THRESHOLD};
use crate::tensorcore::{Gradients, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::volrender::{generate_ray, render_pixels, render_rays, sample_depths_batch, Aabb, Ray, SamplerConfig};

pub const TELEMETRY_NAME: &str = "telemetry.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

/// Normals shorter than this are treated as undefined by the losses.
const NORMAL_EPS: f32 = 1e-6;
const MASK_CLAMP: f32 = 1e-4;
/// Default number of sample points per step above which the chunk tapes are
/// rebuilt for the backward pass instead of being kept alive.
pub const TAPE_POINT_BUDGET: usize = 400_000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric failure at iteration {iteration}: {detail}")]
    Numeric { iteration: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Loss combinations reachable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "pisr")]
    Pisr,
    #[serde(rename = "pisr-c")]
    PisrC,
    #[serde(rename = "pisr-n")]
    PisrN,
    #[serde(rename = "pisr-o")]
    PisrO,
    #[serde(rename = "pisr-on")]
    PisrOn,
    #[serde(rename = "pisr-p")]
    PisrP,
}

impl Variant {
    pub const NAMES: [&'static str; 6] = ["pisr", "pisr-c", "pisr-n", "pisr-o", "pisr-on", "pisr-p"];

    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name {
            "pisr" => Variant::Pisr,
            "pisr-c" => Variant::PisrC,
            "pisr-n" => Variant::PisrN,
            "pisr-o" => Variant::PisrO,
            "pisr-on" => Variant::PisrOn,
            "pisr-p" => Variant::PisrP,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pisr => "pisr",
            Variant::PisrC => "pisr-c",
            Variant::PisrN => "pisr-n",
            Variant::PisrO => "pisr-o",
            Variant::PisrOn => "pisr-on",
            Variant::PisrP => "pisr-p",
        }
    }

    pub fn pol_kind(self) -> Option<ConstraintKind> {
        match self {
            Variant::Pisr | Variant::PisrP => Some(ConstraintKind::Perspective),
            Variant::PisrO | Variant::PisrOn => Some(ConstraintKind::Orthographic),
            Variant::PisrC | Variant::PisrN => None,
        }
    }

    pub fn uses_normal(self) -> bool {
        matches!(self, Variant::Pisr | Variant::PisrN | Variant::PisrOn)
    }
}

/// Which kernel branch the polarimetric loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchMode {
    /// Low DoP: product of both offsets; high DoP: specular offset only.
    Auto,
    /// Diffuse offset for every pixel.
    Diffuse,
    /// Specular offset for every pixel.
    Specular,
}

impl BranchMode {
    pub fn name(self) -> &'static str {
        match self {
            BranchMode::Auto => "auto",
            BranchMode::Diffuse => "diffuse",
            BranchMode::Specular => "specular",
        }
    }
}

pub fn kernel_tag(kind: Option<ConstraintKind>) -> &'static str {
    match kind {
        Some(ConstraintKind::Perspective) => "persp",
        Some(ConstraintKind::Orthographic) => "ortho",
        None => "none",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup: usize,
    pub ramp: usize,
    pub decay: usize,
    /// Peak polarimetric weight.
    pub lambda_p: f32,
    /// Peak normal-smoothing weight.
    pub lambda_n: f32,
    pub lambda_e: f32,
    /// Peak neighbor count per center.
    pub neighbors: usize,
    pub mask_weight: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub lambda_p: f32,
    pub lambda_n: f32,
    pub lambda_e: f32,
    pub neighbors: usize,
}

impl ScheduleConfig {
    pub fn paper() -> Self {
        Self {
            warmup: 2500,
            ramp: 2500,
            decay: 2500,
            lambda_p: 2.0,
            lambda_n: 1.0,
            lambda_e: 0.1,
            neighbors: 28,
            mask_weight: 0.1,
        }
    }

    pub fn at(&self, iteration: usize) -> ScheduleValues {
        let it = iteration as f64;
        let w = self.warmup as f64;
        let r = self.ramp as f64;
        let d = self.decay as f64;
        let (fp, fnb) = if it < w {
            (0.0, 0.0)
        } else if it < w + r {
            let f = (it - w) / r;
            (f, f)
        } else if it < w + r + d {
            (1.0, 1.0 - (it - w - r) / d)
        } else {
            (1.0, 0.0)
        };
        let n = self.neighbors as f64 * fnb;
        ScheduleValues {
            lambda_p: (self.lambda_p as f64 * fp) as f32,
            lambda_n: (self.lambda_n as f64 * fnb) as f32,
            lambda_e: self.lambda_e,
            neighbors: (n / 4.0).floor() as usize * 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_grid: f32,
    pub lr_mlp: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Learning-rate multiplier reached at the last iteration.
    pub final_lr_fraction: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            final_lr_fraction: 0.05,
        }
    }
}

/// Constant until `warmup`, then cosine decay to `final_fraction` at `max_iterations`.
pub fn lr_factor(iteration: usize, warmup: usize, max_iterations: usize, final_fraction: f32) -> f32 {
    if iteration < warmup || max_iterations <= warmup {
        return 1.0;
    }
    let t = ((iteration - warmup) as f64 / (max_iterations - warmup) as f64).min(1.0);
    let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    (final_fraction as f64 + (1.0 - final_fraction as f64) * c) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub variant: Variant,
    pub branch: BranchMode,
    pub max_iterations: usize,
    /// Pixel budget |S| per step.
    pub batch_pixels: usize,
    pub chunk_rays: usize,
    pub dop_threshold: f64,
    /// Pixels with DoP below this are excluded from the polarimetric loss.
    pub min_dop: f64,
    /// Dilation (pixels) of the foreground masks used to draw centers.
    pub mask_dilation: usize,
    pub level_start: usize,
    pub level_interval: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub background: [f32; 3],
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub field: FieldConfig,
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 2] = ["desk", "paper"];

    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            variant: Variant::Pisr,
            branch: BranchMode::Auto,
            max_iterations: 20_000,
            batch_pixels: 4096,
            chunk_rays: 128,
            dop_threshold: DEFAULT_DOP_THRESHOLD,
            min_dop: 0.0,
            mask_dilation: 4,
            level_start: 4,
            level_interval: 1000,
            checkpoint_every: 5000,
            background: [0.0; 3],
            seed: 0,
            sampler: SamplerConfig::default(),
            schedule: ScheduleConfig::paper(),
            optim: OptimConfig::default(),
            field: FieldConfig::paper(),
        }
    }

    /// Desk-scale profile for 64x64 synthetic views on a few CPU cores.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            max_iterations: 3000,
            batch_pixels: 128,
            chunk_rays: 64,
            level_interval: 150,
            checkpoint_every: 1000,
            sampler: SamplerConfig {
                n_coarse: 16,
                n_importance: 16,
                importance_rounds: 1,
            },
            schedule: ScheduleConfig {
                warmup: 750,
                ramp: 750,
                decay: 750,
                ..ScheduleConfig::paper()
            },
            field: FieldConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self, TrainError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(TrainError::Config(format!(
                "unknown preset '{other}' (valid: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Parses a TOML document layered over the preset it names (`preset`
    /// key, default desk). Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => "desk",
            Some(v) => v.as_str().ok_or_else(|| TrainError::Config("preset must be a string".into()))?,
        };
        let base = Self::preset(preset)?;
        let mut merged = toml::Value::try_from(&base).map_err(|e| TrainError::Config(e.to_string()))?;
        merge_toml(&mut merged, toml::Value::Table(user));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.batch_pixels == 0 || self.chunk_rays == 0 {
            return bad("batch_pixels and chunk_rays must be positive");
        }
        if self.sampler.n_coarse < 2 {
            return bad("sampler.n_coarse must be at least 2");
        }
        if self.sampler.n_importance > 0 && self.sampler.importance_rounds == 0 {
            return bad("sampler.importance_rounds must be positive when n_importance > 0");
        }
        if !(0.0..=1.0).contains(&self.dop_threshold) || !(0.0..=1.0).contains(&self.min_dop) {
            return bad("dop_threshold and min_dop must lie in [0, 1]");
        }
        if !(self.optim.lr_grid > 0.0 && self.optim.lr_mlp > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.optim.final_lr_fraction) {
            return bad("optim.final_lr_fraction must lie in [0, 1]");
        }
        if self.level_interval == 0 {
            return bad("level_interval must be positive");
        }
        if self.schedule.neighbors % 4 != 0 {
            return bad("schedule.neighbors must be a multiple of 4");
        }
        self.field.grid.validate()?;
        Ok(())
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn domain_bounds(cfg: &FieldConfig) -> Aabb {
    Aabb::new(cfg.grid.domain_min, cfg.grid.domain_max)
}

/// RNG for one (iteration, stream) pair of a seeded run.
pub fn stream_rng(seed: u64, iteration: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 20) | stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub frame: usize,
    pub col: usize,
    pub row: usize,
}

/// Candidate center pixels: the dilated foreground of every frame.
#[derive(Debug, Clone)]
pub struct SamplingDomain {
    dims: Vec<(usize, usize)>,
    candidates: Vec<Pixel>,
}

impl SamplingDomain {
    pub fn from_frames(frames: &[PolarizationFrame], dilation: usize) -> Self {
        let mut candidates = Vec::new();
        let r = dilation as isize;
        for (f, fr) in frames.iter().enumerate() {
            let (w, h) = (fr.width, fr.height);
            let mut keep = vec![false; w * h];
            for row in 0..h {
                for col in 0..w {
                    if !fr.mask[row * w + col] {
                        continue;
                    }
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let (rr, cc) = (row as isize + dr, col as isize + dc);
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                keep[rr as usize * w + cc as usize] = true;
                            }
                        }
                    }
                }
            }
            for (i, &k) in keep.iter().enumerate() {
                if k {
                    candidates.push(Pixel {
                        frame: f,
                        col: i % w,
                        row: i / w,
                    });
                }
            }
        }
        Self {
            dims: frames.iter().map(|f| (f.width, f.height)).collect(),
            candidates,
        }
    }

    pub fn candidates(&self) -> &[Pixel] {
        &self.candidates
    }

    pub fn dims(&self, frame: usize) -> (usize, usize) {
        self.dims[frame]
    }
}

/// Centers plus criss-cross neighbors; `pixels` is the deduplicated union.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSamplePlan {
    pub centers: Vec<Pixel>,
    /// Per center, the `(dcol, drow)` offsets kept after border clipping.
    pub neighbors: Vec<Vec<(isize, isize)>>,
    pub arm_extent: usize,
    pub pixels: Vec<Pixel>,
    pub center_rows: Vec<usize>,
    pub neighbor_rows: Vec<Vec<usize>>,
}

/// Offsets `+-1..+-arm` along both image axes.
pub fn criss_cross_offsets(arm: usize) -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(4 * arm);
    for k in 1..=arm as isize {
        out.extend_from_slice(&[(k, 0), (-k, 0), (0, k), (0, -k)]);
    }
    out
}

pub fn sample_plan<R: Rng>(
    rng: &mut R,
    domain: &SamplingDomain,
    n_centers: usize,
    n_neighbors: usize,
) -> Result<PixelSamplePlan, TrainError> {
    if domain.candidates.is_empty() {
        return Err(TrainError::Input("no foreground pixels to sample".into()));
    }
    let arm = n_neighbors / 4;
    let offsets = criss_cross_offsets(arm);
    let mut index: HashMap<Pixel, usize> = HashMap::new();
    let mut pixels = Vec::new();
    let mut row_of = |p: Pixel, pixels: &mut Vec<Pixel>| -> usize {
        *index.entry(p).or_insert_with(|| {
            pixels.push(p);
            pixels.len() - 1
        })
    };
    let mut plan = PixelSamplePlan {
        centers: Vec::with_capacity(n_centers),
        neighbors: Vec::with_capacity(n_centers),
        arm_extent: arm,
        pixels: Vec::new(),
        center_rows: Vec::with_capacity(n_centers),
        neighbor_rows: Vec::with_capacity(n_centers),
    };
    for _ in 0..n_centers {
        let c = domain.candidates[rng.gen_range(0..domain.candidates.len())];
        let (w, h) = domain.dims[c.frame];
        plan.center_rows.push(row_of(c, &mut pixels));
        let mut kept = Vec::new();
        let mut rows = Vec::new();
        for &(dc, dr) in &offsets {
            let (col, row) = (c.col as isize + dc, c.row as isize + dr);
            if col < 0 || row < 0 || col as usize >= w || row as usize >= h {
                continue;
            }
            kept.push((dc, dr));
            rows.push(row_of(
                Pixel {
                    frame: c.frame,
                    col: col as usize,
                    row: row as usize,
                },
                &mut pixels,
            ));
        }
        plan.centers.push(c);
        plan.neighbors.push(kept);
        plan.neighbor_rows.push(rows);
    }
    plan.pixels = pixels;
    Ok(plan)
}

/// Mean absolute error over all pixels and RGB channels.
pub fn loss_color(tape: &mut Tape, pred: Var, target: &[f32]) -> Result<Var, TensorError> {
    let (rows, cols) = tape.shape(pred);
    let t = tape.constant(Tensor::new(rows, cols, target.to_vec())?);
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Binary cross-entropy between accumulated weight and the object mask.
pub fn loss_mask(tape: &mut Tape, wsum: Var, mask: &[bool]) -> Result<Var, TensorError> {
    let n = mask.len();
    let w = tape.clamp(wsum, MASK_CLAMP, 1.0 - MASK_CLAMP);
    let m = tape.constant(Tensor::new(n, 1, mask.iter().map(|&b| b as u8 as f32).collect())?);
    let inv_m = tape.constant(Tensor::new(n, 1, mask.iter().map(|&b| (!b) as u8 as f32).collect())?);
    let lw = tape.log(w);
    let nw = tape.neg(w);
    let one_minus = tape.add_scalar(nw, 1.0);
    let l1w = tape.log(one_minus);
    let a = tape.mul(m, lw)?;
    let b = tape.mul(inv_m, l1w)?;
    let s = tape.add(a, b)?;
    let mean = tape.mean(s);
    Ok(tape.neg(mean))
}

/// Per-pixel polarimetric observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolPixel {
    pub phi: f64,
    pub rho: f64,
    /// Unit ray direction in the camera frame.
    pub view_cam: Vector3<f64>,
    /// World-to-camera rotation of the view.
    pub rotation: Matrix3<f64>,
}

/// Precomputed world-frame kernel rows for a set of normal-tensor rows.
///
/// Per pixel `f = h1 * (m * h2 + (1 - m))` with `h = (a . n)^2` for unit
/// `a` and renormalized `n`. Degenerate pixels carry zero rows, so `f = 0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolCoeffs {
    pub rows: Vec<usize>,
    pub primary: Vec<f32>,
    pub secondary: Vec<f32>,
    pub mix: Vec<f32>,
    pub degenerate: usize,
}

impl PolCoeffs {
    pub fn build(
        pixels: &[(usize, PolPixel)],
        kind: ConstraintKind,
        branch: BranchMode,
        theta: f64,
        min_dop: f64,
    ) -> Self {
        let mut out = PolCoeffs::default();
        for &(row, px) in pixels {
            out.rows.push(row);
            let coeffs = pixel_coefficients(&px, kind, branch, theta, min_dop);
            let (a1, a2, m) = match coeffs {
                Some(c) => c,
                None => {
                    out.degenerate += 1;
                    ([0.0; 3], [0.0; 3], 0.0)
                }
            };
            out.primary.extend_from_slice(&a1);
            out.secondary.extend_from_slice(&a2);
            out.mix.push(m);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn world_unit(kind: ConstraintKind, px: &PolPixel, delta: DisambiguationOffset) -> Option<[f32; 3]> {
    let c = match kind {
        ConstraintKind::Orthographic => coeff_ortho(px.phi, delta),
        ConstraintKind::Perspective => coeff_persp(px.phi, delta, &px.view_cam).ok()?,
    };
    let a = c.normalized().ok()?;
    let w = px.rotation.transpose() * a;
    Some([w.x as f32, w.y as f32, w.z as f32])
}

fn pixel_coefficients(
    px: &PolPixel,
    kind: ConstraintKind,
    branch: BranchMode,
    theta: f64,
    min_dop: f64,
) -> Option<([f32; 3], [f32; 3], f32)> {
    if px.rho < min_dop {
        return None;
    }
    use DisambiguationOffset::{Diffuse, Specular};
    match branch {
        BranchMode::Diffuse => Some((world_unit(kind, px, Diffuse)?, [0.0; 3], 0.0)),
        BranchMode::Specular => Some((world_unit(kind, px, Specular)?, [0.0; 3], 0.0)),
        BranchMode::Auto => {
            let a1 = world_unit(kind, px, Specular)?;
            if px.rho < theta {
                Some((a1, world_unit(kind, px, Diffuse)?, 1.0))
            } else {
                Some((a1, [0.0; 3], 0.0))
            }
        }
    }
}

/// Mean polarimetric kernel over the coefficient rows of `normal`.
pub fn loss_pol(tape: &mut Tape, normal: Var, coeffs: &PolCoeffs) -> Result<Var, TensorError> {
    let n = coeffs.len();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let g = tape.gather_rows(normal, &coeffs.rows)?;
    let u = tape.normalize3(g, NORMAL_EPS)?;
    let a1 = tape.constant(Tensor::new(n, 3, coeffs.primary.clone())?);
    let a2 = tape.constant(Tensor::new(n, 3, coeffs.secondary.clone())?);
    let m = tape.constant(Tensor::new(n, 1, coeffs.mix.clone())?);
    let rest = tape.constant(Tensor::new(n, 1, coeffs.mix.iter().map(|v| 1.0 - v).collect())?);
    let d1 = tape.dot_rows(u, a1)?;
    let h1 = tape.square(d1);
    let d2 = tape.dot_rows(u, a2)?;
    let h2 = tape.square(d2);
    let mh2 = tape.mul(m, h2)?;
    let k = tape.add(mh2, rest)?;
    let f = tape.mul(h1, k)?;
    let s = tape.sum(f);
    Ok(tape.scale(s, 1.0 / n as f32))
}

/// Center/neighbor row pairs of the normal-smoothing loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalPairs {
    pub centers: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

impl NormalPairs {
    /// Keeps centers with at least one neighbor.
    pub fn new(centers: Vec<usize>, neighbors: Vec<Vec<usize>>) -> Self {
        let (centers, neighbors) = centers
            .into_iter()
            .zip(neighbors)
            .filter(|(_, n)| !n.is_empty())
            .unzip();
        Self { centers, neighbors }
    }

    pub fn pair_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// `-(1/|S_c|) sum_u (1/|N_u|) sum_j SG(n_u) . n_j` on renormalized normals.
pub fn loss_normal(tape: &mut Tape, normal: Var, pairs: &NormalPairs) -> Result<Var, TensorError> {
    let p = pairs.pair_count();
    if p == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let nc = pairs.centers.len() as f32;
    let mut ci = Vec::with_capacity(p);
    let mut ni = Vec::with_capacity(p);
    let mut w = Vec::with_capacity(p);
    for (&c, nb) in pairs.centers.iter().zip(&pairs.neighbors) {
        for &j in nb {
            ci.push(c);
            ni.push(j);
            w.push(1.0 / (nc * nb.len() as f32));
        }
    }
    let u = tape.normalize3(normal, NORMAL_EPS)?;
    let c = tape.gather_rows(u, &ci)?;
    let c = tape.stop_gradient(c);
    let nb = tape.gather_rows(u, &ni)?;
    let d = tape.dot_rows(c, nb)?;
    let wv = tape.constant(Tensor::new(p, 1, w)?);
    let wd = tape.mul(d, wv)?;
    let s = tape.sum(wd);
    Ok(tape.neg(s))
}

/// Sum over rows of `(|g| - 1)^2`.
pub fn eikonal_sum(tape: &mut Tape, grad: Var) -> Var {
    let sq = tape.square(grad);
    let s = tape.sum_cols(sq);
    let s = tape.add_scalar(s, 1e-12);
    let len = tape.sqrt(s);
    let d = tape.add_scalar(len, -1.0);
    let d2 = tape.square(d);
    tape.sum(d2)
}

pub fn loss_eikonal(tape: &mut Tape, grad: Var) -> Var {
    let n = tape.shape(grad).0.max(1);
    let s = eikonal_sum(tape, grad);
    tape.scale(s, 1.0 / n as f32)
}

/// Adaptive-moment optimizer with per-parameter learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        Self {
            m: store.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: impl Fn(ParamId) -> f32) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, p) in store.iter_mut() {
            let rate = lr(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            match grads.get(id) {
                Some(g) => {
                    for i in 0..p.values.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p.values[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..p.values.len() {
                        m[i] *= b1;
                        v[i] *= b2;
                        p.values[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One telemetry record; `total` = color + lp*pol + ln*normal + le*eikonal + mask_weight*mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub total: f64,
    pub color: f64,
    pub pol: f64,
    pub normal: f64,
    pub eikonal: f64,
    pub mask: f64,
    pub lambda_p: f32,
    pub lambda_n: f32,
    pub lambda_e: f32,
    pub mask_weight: f32,
    pub neighbors: usize,
    pub active_levels: usize,
    pub degenerate: usize,
    pub kernel: &'static str,
    pub branch: &'static str,
    pub sharpness: f32,
    pub lr_scale: f32,
}

impl TelemetryRow {
    pub const HEADER: &'static str = "iteration,total,color,pol,normal,eikonal,mask,lambda_p,lambda_n,lambda_e,mask_weight,neighbors,active_levels,degenerate,kernel,branch,sharpness,lr_scale";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.total,
            self.color,
            self.pol,
            self.normal,
            self.eikonal,
            self.mask,
            self.lambda_p,
            self.lambda_n,
            self.lambda_e,
            self.mask_weight,
            self.neighbors,
            self.active_levels,
            self.degenerate,
            self.kernel,
            self.branch,
            self.sharpness,
            self.lr_scale
        )
    }
}

/// Background CSV writer fed through a channel; every queued line is written.
pub struct TelemetryWriter {
    tx: Option<mpsc::Sender<String>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl TelemetryWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let mut out = BufWriter::new(File::create(path)?);
        let (tx, rx) = mpsc::channel::<String>();
        let handle = std::thread::spawn(move || -> std::io::Result<()> {
            writeln!(out, "{}", TelemetryRow::HEADER)?;
            for line in rx {
                writeln!(out, "{line}")?;
            }
            out.flush()
        });
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn push(&self, row: &TelemetryRow) {
        if let Some(tx) = &self.tx {
            // A closed channel means the writer failed; finish() reports it.
            let _ = tx.send(row.csv());
        }
    }

    pub fn finish(mut self) -> Result<(), TrainError> {
        self.close()
    }

    fn close(&mut self) -> Result<(), TrainError> {
        self.tx.take();
        match self.handle.take() {
            Some(h) => h
                .join()
                .map_err(|_| TrainError::Io(std::io::Error::other("telemetry writer panicked")))?
                .map_err(TrainError::Io),
            None => Ok(()),
        }
    }
}

impl Drop for TelemetryWriter {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

struct ChunkForward<'a> {
    tape: Tape<'a>,
    color: Var,
    normal: Var,
    wsum: Var,
    eik: Var,
    samples: usize,
}

fn forward_chunk<'a>(
    field: &'a NeuralField,
    rays: &[Ray],
    cfg: &TrainConfig,
    iteration: usize,
    chunk: usize,
) -> Result<ChunkForward<'a>, TensorError> {
    let mut rng = stream_rng(cfg.seed, iteration, 1 + chunk as u64);
    let depths = sample_depths_batch(rays, field, &cfg.sampler, Some(&mut rng));
    let mut tape = Tape::new(&field.store);
    let out = render_rays(&mut tape, field, rays, &depths, cfg.background)?;
    let eik = eikonal_sum(&mut tape, out.grad);
    let samples = *out.offsets.last().unwrap_or(&0);
    Ok(ChunkForward {
        tape,
        color: out.color,
        normal: out.normal,
        wsum: out.wsum,
        eik,
        samples,
    })
}

struct PixelLosses {
    total: f64,
    color: f64,
    pol: f64,
    normal: f64,
    mask: f64,
    degenerate: usize,
    d_color: Vec<f32>,
    d_normal: Vec<f32>,
    d_wsum: Vec<f32>,
}

/// Stateful optimization loop over one dataset.
pub struct Trainer {
    pub config: TrainConfig,
    pub field: NeuralField,
    frames: Vec<PolarizationFrame>,
    domain: SamplingDomain,
    bounds: Aabb,
    adam: Adam,
    iteration: usize,
    tape_budget: usize,
}

impl Trainer {
    pub fn new(frames: Vec<PolarizationFrame>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if frames.len() < 2 {
            return Err(TrainError::Input(format!("need at least 2 frames, got {}", frames.len())));
        }
        if frames.iter().all(|f| f.foreground_count() == 0) {
            return Err(TrainError::Input("dataset has zero foreground pixels".into()));
        }
        let mut fcfg = config.field.clone();
        fcfg.seed = config.seed;
        let mut field = NeuralField::new(fcfg)?;
        field.set_active(active_levels_at(0, field.config.grid.levels, config.level_start, config.level_interval));
        let domain = SamplingDomain::from_frames(&frames, config.mask_dilation);
        let bounds = domain_bounds(&field.config);
        let adam = Adam::new(&field.store, &config.optim);
        Ok(Self {
            config,
            field,
            frames,
            domain,
            bounds,
            adam,
            iteration: 0,
            tape_budget: TAPE_POINT_BUDGET,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Memory knob: sample points per step up to which chunk tapes are kept
    /// between the forward and backward passes. Results do not depend on it.
    pub fn set_tape_budget(&mut self, points: usize) {
        self.tape_budget = points;
    }

    pub fn frames(&self) -> &[PolarizationFrame] {
        &self.frames
    }

    /// Weights actually applied at `iteration` after the variant switches.
    pub fn effective_schedule(&self, iteration: usize) -> ScheduleValues {
        let mut s = self.config.schedule.at(iteration);
        if self.config.variant.pol_kind().is_none() {
            s.lambda_p = 0.0;
        }
        if !self.config.variant.uses_normal() {
            s.lambda_n = 0.0;
            s.neighbors = 0;
        }
        s
    }

    pub fn step(&mut self) -> Result<TelemetryRow, TrainError> {
        let it = self.iteration;
        let cfg = &self.config;
        let levels = active_levels_at(it, self.field.config.grid.levels, cfg.level_start, cfg.level_interval);
        self.field.set_active(levels);
        let sched = self.effective_schedule(it);
        let n_centers = (cfg.batch_pixels / (1 + sched.neighbors)).max(1);
        let mut rng = stream_rng(cfg.seed, it, 0);
        let plan = sample_plan(&mut rng, &self.domain, n_centers, sched.neighbors)?;

        let mut rays = Vec::with_capacity(plan.pixels.len());
        let mut ray_rows = Vec::with_capacity(plan.pixels.len());
        for (row, p) in plan.pixels.iter().enumerate() {
            if let Some(r) = generate_ray(&self.frames[p.frame].camera, p.col, p.row, p.frame, &self.bounds) {
                rays.push(r);
                ray_rows.push(row);
            }
        }
        let chunk = cfg.chunk_rays;
        let n_chunks = rays.len().div_ceil(chunk);
        let field = &self.field;
        let run = |ci: usize| forward_chunk(field, &rays[ci * chunk..((ci + 1) * chunk).min(rays.len())], cfg, it, ci);
        let keep = rays.len() * (cfg.sampler.n_coarse + cfg.sampler.n_importance) * 7 <= self.tape_budget;

        let p = plan.pixels.len();
        let mut color = Vec::with_capacity(p * 3);
        for _ in 0..p {
            color.extend_from_slice(&cfg.background);
        }
        let mut normal = vec![0.0f32; p * 3];
        let mut wsum = vec![0.0f32; p];
        let mut eik_total = 0.0f64;
        let mut n_samples = 0usize;
        let mut kept: Vec<ChunkForward> = Vec::new();
        let chunks: Vec<ChunkForward> = (0..n_chunks).into_par_iter().map(run).collect::<Result<_, _>>()?;
        for (ci, c) in chunks.into_iter().enumerate() {
            let base = ci * chunk;
            let (cv, nv, wv) = (c.tape.value(c.color), c.tape.value(c.normal), c.tape.value(c.wsum));
            for k in 0..wv.len() {
                let row = ray_rows[base + k];
                color[3 * row..3 * row + 3].copy_from_slice(&cv[3 * k..3 * k + 3]);
                normal[3 * row..3 * row + 3].copy_from_slice(&nv[3 * k..3 * k + 3]);
                wsum[row] = wv[k];
            }
            eik_total += c.tape.scalar(c.eik) as f64;
            n_samples += c.samples;
            if keep {
                kept.push(c);
            }
        }
        let eikonal = eik_total / n_samples.max(1) as f64;

        let losses = self.pixel_losses(&plan, &ray_rows, &rays, &color, &normal, &wsum, &sched)?;
        let total = losses.total + sched.lambda_e as f64 * eikonal;
        if !total.is_finite() {
            return Err(TrainError::Numeric {
                iteration: it,
                detail: format!(
                    "non-finite loss (color {}, pol {}, normal {}, eikonal {}, mask {})",
                    losses.color, losses.pol, losses.normal, eikonal, losses.mask
                ),
            });
        }

        let eik_seed = sched.lambda_e / n_samples.max(1) as f32;
        let seeds_for = |ci: usize, c: &ChunkForward| -> Vec<(Var, Vec<f32>)> {
            let base = ci * chunk;
            let len = c.tape.shape(c.wsum).0;
            let mut dc = Vec::with_capacity(len * 3);
            let mut dn = Vec::with_capacity(len * 3);
            let mut dw = Vec::with_capacity(len);
            for k in 0..len {
                let row = ray_rows[base + k];
                dc.extend_from_slice(&losses.d_color[3 * row..3 * row + 3]);
                dn.extend_from_slice(&losses.d_normal[3 * row..3 * row + 3]);
                dw.push(losses.d_wsum[row]);
            }
            vec![(c.color, dc), (c.normal, dn), (c.wsum, dw), (c.eik, vec![eik_seed])]
        };
        let grads: Vec<Gradients> = if keep {
            kept.par_iter()
                .enumerate()
                .map(|(ci, c)| c.tape.backward_seeded(&seeds_for(ci, c)).map(|g| g.params))
                .collect::<Result<_, _>>()?
        } else {
            (0..n_chunks)
                .into_par_iter()
                .map(|ci| {
                    let c = run(ci)?;
                    c.tape.backward_seeded(&seeds_for(ci, &c)).map(|g| g.params)
                })
                .collect::<Result<_, _>>()?
        };
        drop(kept);
        let mut merged = Gradients::new(self.field.store.len());
        for g in &grads {
            merged.merge(g);
        }
        for (id, p) in self.field.store.iter() {
            if let Some(g) = merged.get(id) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::Numeric {
                        iteration: it,
                        detail: format!("non-finite gradient in parameter '{}'", p.name),
                    });
                }
            }
        }

        let lr_scale = lr_factor(it, cfg.schedule.warmup, cfg.max_iterations, cfg.optim.final_lr_fraction);
        let (lr_grid, lr_mlp) = (cfg.optim.lr_grid * lr_scale, cfg.optim.lr_mlp * lr_scale);
        let table = self.field.ids.table;
        self.adam
            .step(&mut self.field.store, &merged, |id| if id == table { lr_grid } else { lr_mlp });

        let row = TelemetryRow {
            iteration: it,
            total,
            color: losses.color,
            pol: losses.pol,
            normal: losses.normal,
            eikonal,
            mask: losses.mask,
            lambda_p: sched.lambda_p,
            lambda_n: sched.lambda_n,
            lambda_e: sched.lambda_e,
            mask_weight: self.config.schedule.mask_weight,
            neighbors: sched.neighbors,
            active_levels: levels,
            degenerate: losses.degenerate,
            kernel: kernel_tag(self.config.variant.pol_kind()),
            branch: self.config.branch.name(),
            sharpness: self.field.sharpness_value(),
            lr_scale,
        };
        self.iteration += 1;
        Ok(row)
    }

    #[allow(clippy::too_many_arguments)]
    fn pixel_losses(
        &self,
        plan: &PixelSamplePlan,
        ray_rows: &[usize],
        rays: &[Ray],
        color: &[f32],
        normal: &[f32],
        wsum: &[f32],
        sched: &ScheduleValues,
    ) -> Result<PixelLosses, TrainError> {
        let cfg = &self.config;
        let p = plan.pixels.len();
        let mut target = Vec::with_capacity(3 * p);
        let mut mask = Vec::with_capacity(p);
        for px in &plan.pixels {
            let f = &self.frames[px.frame];
            target.extend_from_slice(&f.color_at(px.col, px.row));
            mask.push(f.mask[f.index(px.col, px.row)]);
        }
        let mut rendered = vec![false; p];
        for &r in ray_rows {
            rendered[r] = true;
        }

        let mut tape = Tape::new(&self.field.store);
        let c_in = tape.input(Tensor::new(p, 3, color.to_vec())?);
        let n_in = tape.input(Tensor::new(p, 3, normal.to_vec())?);
        let w_in = tape.input(Tensor::new(p, 1, wsum.to_vec())?);
        let l_color = loss_color(&mut tape, c_in, &target)?;
        let l_mask = loss_mask(&mut tape, w_in, &mask)?;
        let wm = tape.scale(l_mask, cfg.schedule.mask_weight);
        let mut total = tape.add(l_color, wm)?;

        let mut pol = 0.0;
        let mut degenerate = 0;
        if let Some(kind) = cfg.variant.pol_kind() {
            let pix: Vec<(usize, PolPixel)> = ray_rows
                .iter()
                .zip(rays)
                .filter(|(&row, _)| mask[row])
                .map(|(&row, ray)| {
                    let px = plan.pixels[row];
                    let f = &self.frames[px.frame];
                    let i = f.index(px.col, px.row);
                    (
                        row,
                        PolPixel {
                            phi: f.aop[i] as f64,
                            rho: f.dop[i] as f64,
                            view_cam: ray.dir_cam.normalize(),
                            rotation: f.camera.rotation,
                        },
                    )
                })
                .collect();
            let coeffs = PolCoeffs::build(&pix, kind, cfg.branch, cfg.dop_threshold, cfg.min_dop);
            degenerate = coeffs.degenerate;
            let l_pol = loss_pol(&mut tape, n_in, &coeffs)?;
            pol = tape.scalar(l_pol) as f64;
            if sched.lambda_p > 0.0 {
                let s = tape.scale(l_pol, sched.lambda_p);
                total = tape.add(total, s)?;
            }
        }

        let mut nrm = 0.0;
        if sched.neighbors > 0 {
            let fg = |r: usize| mask[r] && rendered[r];
            let mut centers = Vec::new();
            let mut neighbors = Vec::new();
            for (&c, nb) in plan.center_rows.iter().zip(&plan.neighbor_rows) {
                if !fg(c) {
                    continue;
                }
                centers.push(c);
                neighbors.push(nb.iter().copied().filter(|&j| fg(j)).collect());
            }
            let pairs = NormalPairs::new(centers, neighbors);
            let l_n = loss_normal(&mut tape, n_in, &pairs)?;
            nrm = tape.scalar(l_n) as f64;
            if sched.lambda_n > 0.0 {
                let s = tape.scale(l_n, sched.lambda_n);
                total = tape.add(total, s)?;
            }
        }

        let g = tape.backward(total)?;
        let grab = |v: Var, len: usize| g.wrt(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        Ok(PixelLosses {
            total: tape.scalar(total) as f64,
            color: tape.scalar(l_color) as f64,
            pol,
            normal: nrm,
            mask: tape.scalar(l_mask) as f64,
            degenerate,
            d_color: grab(c_in, 3 * p),
            d_normal: grab(n_in, 3 * p),
            d_wsum: grab(w_in, p),
        })
    }
}

pub struct TrainOutcome {
    pub field: NeuralField,
    pub telemetry: Vec<TelemetryRow>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:06}.ckpt")
}

/// Runs `max_iterations` steps. With `out_dir`, writes the telemetry CSV,
/// periodic checkpoints and `final.ckpt`; a numeric failure writes
/// `diagnostic.ckpt` before returning the error.
pub fn train(
    frames: Vec<PolarizationFrame>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut observer: impl FnMut(&TelemetryRow),
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(frames, config.clone())?;
    let writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(TelemetryWriter::create(&dir.join(TELEMETRY_NAME))?)
        }
        None => None,
    };
    let mut telemetry = Vec::with_capacity(config.max_iterations);
    while trainer.iteration() < config.max_iterations {
        let row = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let (Some(dir), TrainError::Numeric { .. }) = (out_dir, &e) {
                    trainer.field.save_checkpoint(&dir.join(DIAGNOSTIC_CHECKPOINT))?;
                }
                if let Some(w) = writer {
                    w.finish()?;
                }
                return Err(e);
            }
        };
        if let Some(w) = &writer {
            w.push(&row);
        }
        observer(&row);
        telemetry.push(row);
        let done = trainer.iteration();
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.max_iterations {
                trainer.field.save_checkpoint(&dir.join(checkpoint_name(done)))?;
            }
        }
    }
    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        trainer.field.save_checkpoint(&path)?;
        final_checkpoint = Some(path);
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(TrainOutcome {
        field: trainer.field,
        telemetry,
        final_checkpoint,
    })
}

/// Marching cubes of the zero level set over the field domain.
pub fn extract_mesh(field: &NeuralField, res: usize) -> Result<Extraction, MeshError> {
    let bounds = domain_bounds(&field.config);
    marching_cubes(
        |pts| {
            let p32: Vec<[f32; 3]> = pts.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect();
            field.sdf_values(&p32).into_iter().map(f64::from).collect()
        },
        bounds,
        res,
        0.0,
    )
}

/// Polarimetric kernel and normal error of a field's rendered normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolEval {
    /// Mean kernel value over evaluated foreground pixels.
    pub loss: f64,
    pub pixels: usize,
    pub degenerate: usize,
    /// Mean angle (degrees) to the `gtnormal` channel, when present.
    pub angular_error_deg: Option<f64>,
}

/// Renders every foreground pixel of `frames` and scores the renormalized
/// normals with the given kernel and branch.
pub fn pol_loss_eval<F: FieldModel + ?Sized>(
    field: &F,
    frames: &[PolarizationFrame],
    bounds: &Aabb,
    sampler: &SamplerConfig,
    kind: ConstraintKind,
    branch: BranchMode,
    theta: f64,
) -> Result<PolEval, TrainError> {
    let mut sum = 0.0;
    let mut pixels = 0usize;
    let mut degenerate = 0usize;
    let mut ang_sum = 0.0;
    let mut ang_n = 0usize;
    for (fi, f) in frames.iter().enumerate() {
        let mut rays = Vec::new();
        for row in 0..f.height {
            for col in 0..f.width {
                if f.mask[f.index(col, row)] {
                    if let Some(r) = generate_ray(&f.camera, col, row, fi, bounds) {
                        rays.push(r);
                    }
                }
            }
        }
        let out = render_pixels(field, &rays, sampler, [0.0; 3])?;
        let gt = f.extra("gtnormal").filter(|c| c.channels == 3);
        for (ray, px) in rays.iter().zip(&out) {
            let (col, row) = ray.pixel;
            let i = f.index(col, row);
            let n = Vector3::new(px.normal[0] as f64, px.normal[1] as f64, px.normal[2] as f64);
            let len = n.norm();
            pixels += 1;
            let pp = PolPixel {
                phi: f.aop[i] as f64,
                rho: f.dop[i] as f64,
                view_cam: ray.dir_cam.normalize(),
                rotation: f.camera.rotation,
            };
            match pixel_coefficients(&pp, kind, branch, theta, 0.0) {
                Some((a1, a2, m)) if len > NORMAL_EPS as f64 => {
                    let u = n / len;
                    let h = |a: [f32; 3]| {
                        let d = u.dot(&Vector3::new(a[0] as f64, a[1] as f64, a[2] as f64));
                        d * d
                    };
                    sum += h(a1) * (m as f64 * h(a2) + (1.0 - m as f64));
                }
                Some(_) => {}
                None => degenerate += 1,
            }
            if let Some(g) = gt {
                let np = g.width * g.height;
                let gn = Vector3::new(g.data[i] as f64, g.data[np + i] as f64, g.data[2 * np + i] as f64);
                if len > 1e-9 && gn.norm() > 1e-9 {
                    let c = (n.dot(&gn) / (len * gn.norm())).clamp(-1.0, 1.0);
                    ang_sum += c.acos().to_degrees();
                    ang_n += 1;
                }
            }
        }
    }
    Ok(PolEval {
        loss: if pixels > 0 { sum / pixels as f64 } else { 0.0 },
        pixels,
        degenerate,
        angular_error_deg: (ang_n > 0).then(|| ang_sum / ang_n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralfield::{AnalyticField, AnalyticShape};
    use crate::polconstraint::aop_from_normal;
    use crate::synthdata::{render_frame, AnalyticScene, CameraRig, Material, Shape};

    fn tiny_frames(n: usize, res: usize) -> Vec<PolarizationFrame> {
        let scene = AnalyticScene::new(Shape::by_name("sphere").unwrap(), Material::by_name("diffuse").unwrap());
        let rig = CameraRig::new(n, res, res);
        rig.cameras()
            .iter()
            .enumerate()
            .map(|(i, c)| render_frame(&scene, c, res, res, i as u64))
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.batch_pixels = 24;
        cfg.chunk_rays = 8;
        cfg.sampler = SamplerConfig {
            n_coarse: 8,
            n_importance: 4,
            importance_rounds: 1,
        };
        cfg.schedule.warmup = 1;
        cfg.schedule.ramp = 2;
        cfg.field.grid.levels = 4;
        cfg.field.grid.finest_res = 32;
        cfg.field.grid.table_size_log2 = 10;
        cfg.field.sdf_hidden = 16;
        cfg.field.color_hidden = 16;
        cfg
    }

    #[test]
    fn schedule_matches_staging() {
        let s = ScheduleConfig::paper();
        assert_eq!(s.at(0).lambda_p, 0.0);
        assert_eq!(s.at(2499).lambda_p, 0.0);
        assert_eq!(s.at(2499).lambda_n, 0.0);
        assert_eq!(s.at(2499).neighbors, 0);
        assert_eq!(s.at(5000).lambda_p, 2.0);
        assert_eq!(s.at(5000).lambda_n, 1.0);
        assert_eq!(s.at(5000).neighbors, 28);
        let mid = s.at(3750);
        assert!((mid.lambda_p - 1.0).abs() < 1e-6 && (mid.lambda_n - 0.5).abs() < 1e-6);
        assert_eq!(mid.neighbors, 12);
        assert_eq!(s.at(7500).lambda_n, 0.0);
        assert_eq!(s.at(7500).neighbors, 0);
        assert_eq!(s.at(19_999).lambda_p, 2.0);
        assert_eq!(s.at(10).lambda_e, 0.1);
        for it in (0..10_000).step_by(7) {
            assert_eq!(s.at(it).neighbors % 4, 0);
        }
    }

    #[test]
    fn lr_factor_is_constant_then_cosine() {
        assert_eq!(lr_factor(10, 100, 1000, 0.05), 1.0);
        assert_eq!(lr_factor(100, 100, 1000, 0.05), 1.0);
        assert!((lr_factor(550, 100, 1000, 0.05) - 0.525).abs() < 1e-6);
        assert!((lr_factor(1000, 100, 1000, 0.05) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn sample_plan_criss_cross() {
        let frames = tiny_frames(2, 32);
        let domain = SamplingDomain::from_frames(&frames, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = sample_plan(&mut rng, &domain, 20, 28).unwrap();
        assert_eq!(plan.arm_extent, 7);
        assert_eq!(plan.centers.len(), 20);
        let mut seen = std::collections::HashSet::new();
        for p in &plan.pixels {
            assert!(p.col < 32 && p.row < 32);
            assert!(seen.insert(*p), "duplicate pixel");
        }
        for (c, offs) in plan.centers.iter().zip(&plan.neighbors) {
            assert!(offs.len() <= 28);
            for &(dc, dr) in offs {
                assert!((dc == 0) != (dr == 0));
                assert!(dc.abs() <= 7 && dr.abs() <= 7);
            }
            let interior = c.col >= 7 && c.row >= 7 && c.col + 7 < 32 && c.row + 7 < 32;
            if interior {
                assert_eq!(offs.len(), 28);
            }
        }
        for (ci, rows) in plan.center_rows.iter().zip(&plan.neighbor_rows) {
            let c = plan.pixels[*ci];
            for &r in rows {
                let n = plan.pixels[r];
                assert_eq!(n.frame, c.frame);
                assert!(n.col == c.col || n.row == c.row);
            }
        }
        let plan0 = sample_plan(&mut rng, &domain, 20, 0).unwrap();
        let unique: std::collections::HashSet<_> = plan0.centers.iter().collect();
        assert_eq!(plan0.pixels.len(), unique.len());
        assert!(plan0.neighbors.iter().all(Vec::is_empty));
    }

    #[test]
    fn centers_come_from_dilated_foreground() {
        let frames = tiny_frames(2, 24);
        let domain = SamplingDomain::from_frames(&frames, 2);
        for p in domain.candidates() {
            let f = &frames[p.frame];
            let mut near = false;
            for dr in -2isize..=2 {
                for dc in -2isize..=2 {
                    let (c, r) = (p.col as isize + dc, p.row as isize + dr);
                    if c >= 0 && r >= 0 && (c as usize) < 24 && (r as usize) < 24 && f.mask[f.index(c as usize, r as usize)] {
                        near = true;
                    }
                }
            }
            assert!(near);
        }
        assert!(domain.candidates().len() > frames.iter().map(|f| f.foreground_count()).sum::<usize>());
    }

    #[test]
    fn color_loss_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let target = vec![0.2, 0.4, 0.6, 0.1, 0.3, 0.5];
        let p = tape.input(Tensor::new(2, 3, target.clone()).unwrap());
        let l = loss_color(&mut tape, p, &target).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let mut shifted = target.clone();
        shifted[0] += 0.1;
        shifted[3] += 0.1;
        let p = tape.input(Tensor::new(2, 3, shifted).unwrap());
        let l = loss_color(&mut tape, p, &target).unwrap();
        assert!((tape.scalar(l) - 0.1 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn mask_loss_matches_cross_entropy() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let w = tape.input(Tensor::new(3, 1, vec![0.9, 0.2, 0.0]).unwrap());
        let l = loss_mask(&mut tape, w, &[true, false, false]).unwrap();
        let expected = -((0.9f64).ln() + (0.8f64).ln() + (1.0 - 1e-4f64).ln()) / 3.0;
        assert!((tape.scalar(l) as f64 - expected).abs() < 1e-5);
    }

    fn pol_pixels(normals: &[Vector3<f64>], delta: DisambiguationOffset, rho: f64) -> (Vec<(usize, PolPixel)>, Vec<f32>) {
        let frames = tiny_frames(2, 8);
        let cam = &frames[1].camera;
        let mut px = Vec::new();
        let mut flat = Vec::new();
        for (i, n) in normals.iter().enumerate() {
            let v = cam.camera_ray(1.0 + i as f64, 6.5 - 0.3 * i as f64);
            let n_cam = cam.dir_to_camera(n);
            let phi = aop_from_normal(&n_cam, &v, delta).unwrap();
            px.push((
                i,
                PolPixel {
                    phi,
                    rho,
                    view_cam: v,
                    rotation: cam.rotation,
                },
            ));
            flat.extend(n.iter().map(|&c| c as f32));
        }
        (px, flat)
    }

    fn some_normals() -> Vec<Vector3<f64>> {
        (0..6)
            .map(|i| {
                let t = 0.7 * i as f64;
                Vector3::new(t.cos(), 0.4 * t.sin() - 0.2, -0.9 + 0.3 * t.sin()).normalize()
            })
            .collect()
    }

    #[test]
    fn pol_loss_is_zero_on_oracle_normals() {
        let store = ParamStore::new();
        for (delta, rho) in [(DisambiguationOffset::Diffuse, 0.15), (DisambiguationOffset::Specular, 0.6)] {
            for kind in [ConstraintKind::Perspective, ConstraintKind::Orthographic] {
                let (px, flat) = pol_pixels(&some_normals(), delta, rho);
                let c = PolCoeffs::build(&px, kind, BranchMode::Auto, DEFAULT_DOP_THRESHOLD, 0.0);
                assert_eq!(c.degenerate, 0);
                let mut tape = Tape::new(&store);
                let n = tape.input(Tensor::new(6, 3, flat).unwrap());
                let l = loss_pol(&mut tape, n, &c).unwrap();
                let v = tape.scalar(l) as f64;
                if kind == ConstraintKind::Perspective {
                    assert!(v < 1e-10, "{v}");
                } else {
                    // The orthographic kernel ignores the ray, so it only
                    // vanishes where the ray is the optical axis.
                    assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn pol_loss_positive_for_rotated_normal() {
        let store = ParamStore::new();
        let (px, _) = pol_pixels(&some_normals(), DisambiguationOffset::Specular, 0.6);
        let c = PolCoeffs::build(&px, ConstraintKind::Perspective, BranchMode::Auto, DEFAULT_DOP_THRESHOLD, 0.0);
        let frames = tiny_frames(2, 8);
        let cam = &frames[1].camera;
        let mut flat = Vec::new();
        for ((_, p), n) in px.iter().zip(some_normals()) {
            let axis = cam.dir_to_world(&p.view_cam);
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), std::f64::consts::FRAC_PI_2);
            flat.extend((rot * n).iter().map(|&c| c as f32));
        }
        let mut tape = Tape::new(&store);
        let n = tape.input(Tensor::new(6, 3, flat).unwrap());
        let l = loss_pol(&mut tape, n, &c).unwrap();
        assert!(tape.scalar(l) > 1e-3);
    }

    #[test]
    fn degenerate_pixels_contribute_zero() {
        let px: Vec<(usize, PolPixel)> = (0..5)
            .map(|i| {
                (
                    i,
                    PolPixel {
                        phi: 0.0,
                        rho: 0.1,
                        view_cam: Vector3::new(1.0, 0.0, 0.0),
                        rotation: Matrix3::identity(),
                    },
                )
            })
            .collect();
        let c = PolCoeffs::build(&px, ConstraintKind::Perspective, BranchMode::Diffuse, DEFAULT_DOP_THRESHOLD, 0.0);
        assert_eq!(c.degenerate, 5);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let n = tape.input(Tensor::new(5, 3, vec![0.3, -0.5, 0.8].repeat(5)).unwrap());
        let l = loss_pol(&mut tape, n, &c).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let excluded = PolCoeffs::build(&px, ConstraintKind::Orthographic, BranchMode::Auto, 0.3, 0.2);
        assert_eq!(excluded.degenerate, 5);
    }

    #[test]
    fn normal_loss_extremes_and_stop_gradient() {
        let store = ParamStore::new();
        let same = vec![0.0, 0.0, 2.0].repeat(5);
        let pairs = NormalPairs::new(vec![0], vec![vec![1, 2, 3, 4]]);
        let mut tape = Tape::new(&store);
        let n = tape.input(Tensor::new(5, 3, same).unwrap());
        let l = loss_normal(&mut tape, n, &pairs).unwrap();
        assert!((tape.scalar(l) + 1.0).abs() < 1e-6);

        let mut ortho = vec![0.0, 0.0, 1.0];
        ortho.extend([1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0]);
        let mut tape = Tape::new(&store);
        let n = tape.input(Tensor::new(5, 3, ortho).unwrap());
        let l = loss_normal(&mut tape, n, &pairs).unwrap();
        assert!(tape.scalar(l).abs() < 1e-7);
        let g = tape.backward(l).unwrap();
        let d = g.wrt(n).unwrap();
        assert_eq!(&d[0..3], &[0.0, 0.0, 0.0]);
        assert!(d[3..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn empty_neighbor_sets_are_skipped() {
        let pairs = NormalPairs::new(vec![0, 1], vec![vec![], vec![2]]);
        assert_eq!(pairs.centers, vec![1]);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let n = tape.input(Tensor::new(3, 3, vec![1.0, 0.0, 0.0].repeat(3)).unwrap());
        let l = loss_normal(&mut tape, n, &pairs).unwrap();
        assert!((tape.scalar(l) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn eikonal_on_exact_and_scaled_sphere() {
        let shape = AnalyticShape::Sphere {
            center: [0.0; 3],
            radius: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f32; 3]> = (0..500)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .filter(|p: &[f32; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() > 0.05)
            .collect();
        let dirs = vec![[0.0, 0.0, 1.0]; pts.len()];
        for (scale, expect, tol) in [(1.0, 0.0, 1e-3), (2.0, 1.0, 0.05)] {
            let f = AnalyticField::new(shape, [0.5; 3], 64.0).scaled(scale);
            let mut tape = Tape::new(f.params());
            let e = f.eval_samples(&mut tape, &pts, &dirs).unwrap();
            let l = loss_eikonal(&mut tape, e.grad);
            assert!((tape.scalar(l) as f64 - expect).abs() < tol, "scale {scale}: {}", tape.scalar(l));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", 1, 2, vec![1.0, -1.0]);
        let mut adam = Adam::new(&store, &OptimConfig::default());
        let mut g = Gradients::new(1);
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let s = tape.sum(w);
        g.merge(&tape.backward(s).unwrap().params);
        drop(tape);
        adam.step(&mut store, &g, |_| 0.1);
        let v = &store.get(id).values;
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn config_toml_layering() {
        let c = TrainConfig::from_toml_str("preset = \"paper\"\nmax_iterations = 10\n[schedule]\nwarmup = 3\n").unwrap();
        assert_eq!(c.max_iterations, 10);
        assert_eq!(c.schedule.warmup, 3);
        assert_eq!(c.schedule.ramp, 2500);
        assert_eq!(c.batch_pixels, 4096);
        let d = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(d, TrainConfig::desk());
        let round = TrainConfig::from_toml_str(&TrainConfig::paper().to_toml_string()).unwrap();
        assert_eq!(round, TrainConfig::paper());
        assert!(matches!(TrainConfig::from_toml_str("bogus = 1"), Err(TrainError::Config(_))));
        assert!(matches!(TrainConfig::from_toml_str("preset = \"huge\""), Err(TrainError::Config(_))));
        assert!(matches!(TrainConfig::from_toml_str("variant = \"pisr-x\""), Err(TrainError::Config(_))));
    }

    #[test]
    fn variants_switch_terms() {
        assert_eq!(Variant::NAMES.len(), 6);
        for name in Variant::NAMES {
            assert_eq!(Variant::by_name(name).unwrap().name(), name);
        }
        assert_eq!(Variant::PisrC.pol_kind(), None);
        assert!(!Variant::PisrC.uses_normal());
        assert_eq!(Variant::PisrO.pol_kind(), Some(ConstraintKind::Orthographic));
        assert_eq!(Variant::Pisr.pol_kind(), Some(ConstraintKind::Perspective));
        assert!(Variant::Pisr.uses_normal() && Variant::PisrN.uses_normal() && Variant::PisrOn.uses_normal());
    }

    #[test]
    fn trainer_rejects_bad_inputs() {
        let frames = tiny_frames(1, 16);
        assert!(matches!(Trainer::new(frames, tiny_config()), Err(TrainError::Input(_))));
        let mut frames = tiny_frames(2, 16);
        for f in &mut frames {
            f.mask.iter_mut().for_each(|m| *m = false);
        }
        assert!(matches!(Trainer::new(frames, tiny_config()), Err(TrainError::Input(_))));
    }

    #[test]
    fn steps_are_deterministic_and_follow_schedule() {
        let run = || {
            let mut t = Trainer::new(tiny_frames(3, 16), tiny_config()).unwrap();
            let rows: Vec<TelemetryRow> = (0..4).map(|_| t.step().unwrap()).collect();
            (t.field.store.clone(), rows)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra[0].lambda_p, 0.0);
        assert_eq!(ra[3].lambda_p, 2.0);
        assert!(ra.iter().all(|r| r.kernel == "persp" && r.total.is_finite()));
        let expected = ra[2].color
            + ra[2].lambda_p as f64 * ra[2].pol
            + ra[2].lambda_n as f64 * ra[2].normal
            + ra[2].lambda_e as f64 * ra[2].eikonal
            + ra[2].mask_weight as f64 * ra[2].mask;
        assert!((ra[2].total - expected).abs() < 1e-5 * expected.abs().max(1.0));
    }

    #[test]
    fn tape_recompute_path_matches_kept_tapes() {
        let mut t = Trainer::new(tiny_frames(3, 16), tiny_config()).unwrap();
        let mut u = Trainer::new(tiny_frames(3, 16), tiny_config()).unwrap();
        u.set_tape_budget(0);
        for _ in 0..3 {
            assert_eq!(t.step().unwrap(), u.step().unwrap());
        }
        assert_eq!(t.field.store, u.field.store);
    }

    #[test]
    fn nan_parameters_abort_with_numeric_error() {
        let mut t = Trainer::new(tiny_frames(2, 16), tiny_config()).unwrap();
        let id = t.field.ids.sdf_bs;
        t.field.store.get_mut(id).values[0] = f32::NAN;
        assert!(matches!(t.step(), Err(TrainError::Numeric { .. })));
    }

    #[test]
    fn train_writes_telemetry_and_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.max_iterations = 3;
        cfg.checkpoint_every = 2;
        let out = train(tiny_frames(2, 16), &cfg, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(out.telemetry.len(), 3);
        let csv = fs::read_to_string(dir.path().join(TELEMETRY_NAME)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TelemetryRow::HEADER);
        assert_eq!(lines.len(), 4);
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
        assert!(dir.path().join(checkpoint_name(2)).exists());
        let loaded = NeuralField::load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(loaded.store, out.field.store);
    }
}
