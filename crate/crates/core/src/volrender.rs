//! Ray generation, depth sampling and NeuS-style volume rendering of
//! color and normals.

use nalgebra::{Point3, Vector3};
use rand::Rng;

use crate::imaging::CameraModel;
use crate::neuralfield::FieldModel;
use crate::tensorcore::{Tape, Tensor, TensorError, Var};

/// Axis-aligned box bounding the reconstruction domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// Slab intersection; returns `(t_enter, t_exit)` for `t >= 0`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[k];
            let (a, b) = ((self.min[k] - o[k]) * inv, (self.max[k] - o[k]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Minimum near bound, keeps samples away from the camera center.
pub const MIN_NEAR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction in the world frame.
    pub dir: Vector3<f64>,
    /// Unit direction in the camera frame.
    pub dir_cam: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    pub frame: usize,
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

/// Ray through the center of pixel `(col, row)`; `None` if it misses the box.
pub fn generate_ray(camera: &CameraModel, col: usize, row: usize, frame: usize, bounds: &Aabb) -> Option<Ray> {
    let dir_cam = camera.camera_ray(col as f64 + 0.5, row as f64 + 0.5);
    let dir = camera.dir_to_world(&dir_cam).normalize();
    let origin = camera.center().coords;
    let (near, far) = bounds.intersect(&origin, &dir)?;
    let near = near.max(MIN_NEAR);
    if far <= near {
        return None;
    }
    Some(Ray {
        origin,
        dir,
        dir_cam,
        near,
        far,
        frame,
        pixel: (col, row),
    })
}

/// Rays for `pixels`; the second vector lists indices of pixels whose rays
/// miss the domain (excluded from the first).
pub fn generate_rays(camera: &CameraModel, pixels: &[(usize, usize)], frame: usize, bounds: &Aabb) -> (Vec<Ray>, Vec<usize>) {
    let mut rays = Vec::with_capacity(pixels.len());
    let mut missed = Vec::new();
    for (i, &(c, r)) in pixels.iter().enumerate() {
        match generate_ray(camera, c, r, frame, bounds) {
            Some(ray) => rays.push(ray),
            None => missed.push(i),
        }
    }
    (rays, missed)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
    pub importance_rounds: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_importance: 64,
            importance_rounds: 1,
        }
    }
}

/// One depth per stratum of `[near, far]`: the stratum midpoint, or a
/// uniform draw inside it when an RNG is given.
pub fn stratified_depths<R: Rng>(near: f64, far: f64, m: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / m as f64;
    match rng {
        Some(rng) => (0..m).map(|i| near + (i as f64 + rng.gen::<f64>()) * step).collect(),
        None => (0..m).map(|i| near + (i as f64 + 0.5) * step).collect(),
    }
}

/// Plain `f64` NeuS weights of one ray (same formula as the tape op).
pub fn neus_weights(sdf: &[f64], k: f64) -> Vec<f64> {
    let log_sig = |x: f64| if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() };
    let mut w = Vec::with_capacity(sdf.len());
    let mut t = 1.0;
    for i in 0..sdf.len() {
        let next = if i + 1 < sdf.len() { sdf[i + 1] } else { sdf[i] };
        let alpha = (1.0 - (log_sig(k * next) - log_sig(k * sdf[i])).exp()).max(0.0);
        w.push(t * alpha);
        t *= 1.0 - alpha;
    }
    w
}

/// Inverse-CDF resampling of `n` depths from the piecewise-constant density
/// whose mass on `[t_j, t_{j+1}]` is proportional to `w_j + eps`.
fn importance_depths<R: Rng>(t: &[f64], w: &[f64], n: usize, rng: &mut Option<&mut R>) -> Vec<f64> {
    let m = t.len();
    if m < 2 || n == 0 {
        return Vec::new();
    }
    let mut cdf = Vec::with_capacity(m);
    cdf.push(0.0);
    for j in 0..m - 1 {
        let last = *cdf.last().unwrap();
        cdf.push(last + w[j] + 1e-5);
    }
    let total = cdf[m - 1];
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let jit = match rng.as_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        let u = (i as f64 + jit) / n as f64 * total;
        while j + 2 < m && cdf[j + 1] < u {
            j += 1;
        }
        let span = cdf[j + 1] - cdf[j];
        let frac = if span > 0.0 { ((u - cdf[j]) / span).clamp(0.0, 1.0) } else { 0.5 };
        out.push(t[j] + frac * (t[j + 1] - t[j]));
    }
    out
}

fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.total_cmp(y));
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for v in all {
        if out.last().is_none_or(|&l| v > l + 1e-9) {
            out.push(v);
        }
    }
    out
}

/// Sample depths for a batch of rays: stratified coarse samples followed by
/// `importance_rounds` rounds of weight-proportional resampling. SDF values
/// for the importance rounds are evaluated without gradient tracking.
pub fn sample_depths_batch<F: FieldModel + ?Sized, R: Rng>(
    rays: &[Ray],
    field: &F,
    cfg: &SamplerConfig,
    mut rng: Option<&mut R>,
) -> Vec<Vec<f64>> {
    let mut depths: Vec<Vec<f64>> = rays
        .iter()
        .map(|r| stratified_depths(r.near, r.far, cfg.n_coarse, rng.as_deref_mut()))
        .collect();
    if cfg.importance_rounds == 0 || cfg.n_importance == 0 {
        return depths;
    }
    let k = sharpness_value(field) as f64;
    let per_round = cfg.n_importance / cfg.importance_rounds.max(1);
    for _ in 0..cfg.importance_rounds {
        let mut pts = Vec::new();
        for (r, ts) in rays.iter().zip(&depths) {
            for &t in ts {
                let p = r.at(t);
                pts.push([p.x as f32, p.y as f32, p.z as f32]);
            }
        }
        let sdf = field.sdf_values(&pts);
        let mut off = 0;
        for ts in depths.iter_mut() {
            let s: Vec<f64> = sdf[off..off + ts.len()].iter().map(|&v| v as f64).collect();
            off += ts.len();
            let w = neus_weights(&s, k);
            let extra = importance_depths(ts, &w, per_round.max(1), &mut rng);
            *ts = merge_sorted(ts, &extra);
        }
    }
    depths
}

/// Single-ray convenience wrapper of [`sample_depths_batch`].
pub fn sample_depths<F: FieldModel + ?Sized, R: Rng>(ray: &Ray, field: &F, cfg: &SamplerConfig, rng: Option<&mut R>) -> Vec<f64> {
    sample_depths_batch(std::slice::from_ref(ray), field, cfg, rng).remove(0)
}

pub fn sharpness_value<F: FieldModel + ?Sized>(field: &F) -> f32 {
    let mut tape = Tape::new(field.params());
    let k = field.sharpness(&mut tape);
    tape.scalar(k)
}

/// Differentiable render of a ray batch.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `rays x 3`, composited over the background.
    pub color: Var,
    /// `rays x 3`, weighted sum of unit sample normals (not renormalized).
    pub normal: Var,
    /// `rays x 1`, accumulated weight.
    pub wsum: Var,
    /// `samples x 1` NeuS weights.
    pub weights: Var,
    /// `samples x 3` finite-difference SDF gradients.
    pub grad: Var,
    /// Row offsets of each ray's samples.
    pub offsets: Vec<usize>,
}

pub fn render_rays<F: FieldModel + ?Sized>(
    tape: &mut Tape,
    field: &F,
    rays: &[Ray],
    depths: &[Vec<f64>],
    background: [f32; 3],
) -> Result<RenderOutput, TensorError> {
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    let mut pts = Vec::new();
    let mut dirs = Vec::new();
    for (r, ts) in rays.iter().zip(depths) {
        for &t in ts {
            let p = r.at(t);
            pts.push([p.x as f32, p.y as f32, p.z as f32]);
            dirs.push([r.dir.x as f32, r.dir.y as f32, r.dir.z as f32]);
        }
        offsets.push(pts.len());
    }
    let eval = field.eval_samples(tape, &pts, &dirs)?;
    let k = field.sharpness(tape);
    let w = tape.neus_weights(eval.sdf, k, &offsets)?;
    let wc = tape.mul(w, eval.color)?;
    let c = tape.segment_sum(wc, &offsets)?;
    let wn = tape.mul(w, eval.normal)?;
    let normal = tape.segment_sum(wn, &offsets)?;
    let wsum = tape.segment_sum(w, &offsets)?;
    let neg = tape.neg(wsum);
    let rest = tape.add_scalar(neg, 1.0);
    let bg = tape.constant(Tensor {
        rows: 1,
        cols: 3,
        data: background.to_vec(),
    });
    let bgc = tape.matmul(rest, bg)?;
    let color = tape.add(c, bgc)?;
    Ok(RenderOutput {
        color,
        normal,
        wsum,
        weights: w,
        grad: eval.grad,
        offsets,
    })
}

/// Rendered values of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRender {
    pub color: [f32; 3],
    pub normal: [f32; 3],
    pub wsum: f32,
}

/// Forward-only render of independent rays.
pub fn render_pixels<F: FieldModel + ?Sized>(
    field: &F,
    rays: &[Ray],
    cfg: &SamplerConfig,
    background: [f32; 3],
) -> Result<Vec<PixelRender>, TensorError> {
    let mut out = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(256) {
        let depths = sample_depths_batch::<F, rand_chacha::ChaCha8Rng>(chunk, field, cfg, None);
        let mut tape = Tape::new(field.params());
        let r = render_rays(&mut tape, field, chunk, &depths, background)?;
        let c = tape.value(r.color);
        let n = tape.value(r.normal);
        let w = tape.value(r.wsum);
        for i in 0..chunk.len() {
            out.push(PixelRender {
                color: [c[3 * i], c[3 * i + 1], c[3 * i + 2]],
                normal: [n[3 * i], n[3 * i + 1], n[3 * i + 2]],
                wsum: w[i],
            });
        }
    }
    Ok(out)
}

/// Zero-weight composite: background color, zero normal, zero opacity.
pub fn empty_pixel(background: [f32; 3]) -> PixelRender {
    PixelRender {
        color: background,
        normal: [0.0; 3],
        wsum: 0.0,
    }
}

/// First intersection of a ray with an analytic sphere (test oracle helper).
pub fn ray_sphere(ray: &Ray, center: Point3<f64>, radius: f64) -> Option<f64> {
    let oc = ray.origin - center.coords;
    let b = oc.dot(&ray.dir);
    let c = oc.dot(&oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralfield::{AnalyticField, AnalyticShape, FieldConfig, NeuralField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraModel {
        CameraModel::look_at(
            60.0,
            60.0,
            32.0,
            32.0,
            Point3::new(0.0, 0.0, -3.0),
            Point3::origin(),
            Vector3::new(0.0, -1.0, 0.0),
        )
    }

    fn unit_box() -> Aabb {
        Aabb::new([-1.0; 3], [1.0; 3])
    }

    fn red_sphere(k: f32) -> AnalyticField {
        AnalyticField::new(
            AnalyticShape::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            },
            [1.0, 0.0, 0.0],
            k,
        )
    }

    #[test]
    fn principal_and_offset_directions() {
        let cam = camera();
        let d = cam.camera_ray(cam.cx, cam.cy);
        assert!((d - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let d = cam.camera_ray(cam.cx + cam.fx, cam.cy);
        let e = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert!((d - e).norm() < 1e-15);
    }

    #[test]
    fn rays_missing_the_box_are_excluded() {
        let cam = CameraModel::look_at(
            60.0,
            60.0,
            32.0,
            32.0,
            Point3::new(0.0, 5.0, -3.0),
            Point3::new(0.0, 5.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        );
        let (rays, missed) = generate_rays(&cam, &[(32, 32), (0, 0)], 0, &unit_box());
        assert!(rays.is_empty());
        assert_eq!(missed, vec![0, 1]);
        let (rays, missed) = generate_rays(&camera(), &[(32, 32)], 0, &unit_box());
        assert!(missed.is_empty());
        assert!((rays[0].near - 2.0).abs() < 1e-3 && (rays[0].far - 4.0).abs() < 1e-3);
    }

    #[test]
    fn stratified_depths_one_per_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = stratified_depths(1.0, 3.0, 4, Some(&mut rng));
        for (i, &v) in t.iter().enumerate() {
            assert!(v >= 1.0 + 0.5 * i as f64 && v < 1.0 + 0.5 * (i + 1) as f64);
        }
        assert!(t.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn importance_samples_concentrate_at_surface() {
        let field = red_sphere(64.0);
        let cam = camera();
        let bounds = unit_box();
        let cfg = SamplerConfig {
            n_coarse: 32,
            n_importance: 32,
            importance_rounds: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(c, r) in &[(32usize, 32usize), (36, 30), (28, 35)] {
            let ray = generate_ray(&cam, c, r, 0, &bounds).unwrap();
            let t = sample_depths(&ray, &field, &cfg, Some(&mut rng));
            assert!(t.windows(2).all(|p| p[1] > p[0]));
            let hit = ray_sphere(&ray, Point3::origin(), 0.5).unwrap();
            let width = (ray.far - ray.near) / cfg.n_coarse as f64;
            let near = t.iter().filter(|&&x| (x - hit).abs() <= 3.0 * width).count();
            assert!(2 * near >= t.len(), "{near} of {}", t.len());
        }
    }

    #[test]
    fn neus_weights_plain_properties() {
        let w = neus_weights(&[0.5, 0.6, 0.7, 0.8], 64.0);
        assert!(w.iter().all(|&v| v == 0.0));
        let w = neus_weights(&[0.05, -0.05], 2000.0);
        assert!((w[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn red_sphere_center_pixels_render_red() {
        let field = red_sphere(2000.0);
        let cam = camera();
        let pixels: Vec<(usize, usize)> = (30..34).flat_map(|c| (30..34).map(move |r| (c, r))).collect();
        let (rays, _) = generate_rays(&cam, &pixels, 0, &unit_box());
        let out = render_pixels(&field, &rays, &SamplerConfig::default(), [0.0, 0.0, 1.0]).unwrap();
        for (px, ray) in out.iter().zip(&rays) {
            assert!((px.color[0] - 1.0).abs() < 1e-3 && px.color[1].abs() < 1e-3 && px.color[2].abs() < 1e-3, "{:?}", px.color);
            assert!(px.wsum <= 1.0 + 1e-4);
            let hit = ray.at(ray_sphere(ray, Point3::origin(), 0.5).unwrap()).normalize();
            let n = Vector3::new(px.normal[0] as f64, px.normal[1] as f64, px.normal[2] as f64).normalize();
            assert!(n.dot(&hit).clamp(-1.0, 1.0).acos().to_degrees() < 5.0);
        }
    }

    #[test]
    fn missing_rays_composite_background() {
        let field = red_sphere(64.0);
        let cam = camera();
        // Passes beside the sphere but through the box.
        let (rays, _) = generate_rays(&cam, &[(10, 32)], 0, &unit_box());
        assert_eq!(rays.len(), 1);
        let out = render_pixels(&field, &rays, &SamplerConfig::default(), [0.2, 0.3, 0.4]).unwrap();
        assert!(out[0].wsum < 1e-6);
        assert!((out[0].color[2] - 0.4).abs() < 1e-5);
        assert_eq!(empty_pixel([0.1, 0.1, 0.1]).wsum, 0.0);
    }

    #[test]
    fn linear_sdf_weight_peak_is_unbiased() {
        for &k in &[64.0f64, 256.0, 1024.0] {
            let t: Vec<f64> = (0..64).map(|i| i as f64 / 63.0 * 2.0).collect();
            let tstar = 1.013;
            let s: Vec<f64> = t.iter().map(|&x| tstar - x).collect();
            let w = neus_weights(&s, k);
            let arg = w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let nearest = t.iter().enumerate().min_by(|a, b| (a.1 - tstar).abs().total_cmp(&(b.1 - tstar).abs())).unwrap().0;
            assert!((arg as i64 - nearest as i64).abs() <= 1, "k={k}: {arg} vs {nearest}");
        }
    }

    #[test]
    fn render_is_deterministic_for_neural_field() {
        let field = NeuralField::new(FieldConfig::desk()).unwrap();
        let cam = camera();
        let (rays, _) = generate_rays(&cam, &[(32, 32), (10, 40)], 0, &unit_box());
        let cfg = SamplerConfig {
            n_coarse: 16,
            n_importance: 16,
            importance_rounds: 1,
        };
        let a = render_pixels(&field, &rays, &cfg, [0.0; 3]).unwrap();
        let b = render_pixels(&field, &rays, &cfg, [0.0; 3]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.wsum <= 1.0 + 1e-4 && p.wsum >= 0.0));
    }
}
