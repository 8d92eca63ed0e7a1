//! Synthetic multi-view polarization datasets rendered from analytic SDF
//! scenes by sphere tracing.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{read_frame, wrap_half_pi, write_frame, CameraModel, Channel, ImagingError, PolarizationFrame};
use crate::polconstraint::{aop_from_normal, DisambiguationOffset};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene or rig: {0}")]
    Config(String),
    #[error("camera {view} does not see the whole object")]
    Visibility { view: usize },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Ring in the xy plane.
    Torus { major: f64, minor: f64 },
    #[serde(rename = "roundedbox")]
    RoundedBox { half_extents: [f64; 3], radius: f64 },
    #[serde(rename = "twospheres")]
    TwoSpheres { centers: [[f64; 3]; 2], radii: [f64; 2] },
}

impl Shape {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Torus { major, minor } => {
                let q = (p.x * p.x + p.y * p.y).sqrt() - major;
                (q * q + p.z * p.z).sqrt() - minor
            }
            Shape::RoundedBox { half_extents, radius } => {
                let q = Vector3::new(
                    p.x.abs() - half_extents[0] + radius,
                    p.y.abs() - half_extents[1] + radius,
                    p.z.abs() - half_extents[2] + radius,
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0) - radius
            }
            Shape::TwoSpheres { centers, radii } => {
                let a = (p - Vector3::from(centers[0])).norm() - radii[0];
                let b = (p - Vector3::from(centers[1])).norm() - radii[1];
                a.min(b)
            }
        }
    }

    /// Normalized analytic gradient.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let g = match *self {
            Shape::Sphere { .. } => *p,
            Shape::Torus { major, .. } => {
                let rho = (p.x * p.x + p.y * p.y).sqrt().max(1e-12);
                let q = rho - major;
                Vector3::new(q * p.x / rho, q * p.y / rho, p.z)
            }
            Shape::RoundedBox { half_extents, radius } => {
                let q = Vector3::new(
                    p.x.abs() - half_extents[0] + radius,
                    p.y.abs() - half_extents[1] + radius,
                    p.z.abs() - half_extents[2] + radius,
                );
                let s = Vector3::new(p.x.signum(), p.y.signum(), p.z.signum());
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                if outside.norm() > 0.0 {
                    outside.component_mul(&s)
                } else {
                    let k = if q.x >= q.y && q.x >= q.z {
                        0
                    } else if q.y >= q.z {
                        1
                    } else {
                        2
                    };
                    let mut g = Vector3::zeros();
                    g[k] = s[k];
                    g
                }
            }
            Shape::TwoSpheres { centers, radii } => {
                let c0 = Vector3::from(centers[0]);
                let c1 = Vector3::from(centers[1]);
                if (p - c0).norm() - radii[0] <= (p - c1).norm() - radii[1] {
                    p - c0
                } else {
                    p - c1
                }
            }
        };
        let n = g.norm();
        if n < 1e-15 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            g / n
        }
    }

    /// Radius of a sphere about the origin enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Torus { major, minor } => major + minor,
            Shape::RoundedBox { half_extents, .. } => Vector3::from(half_extents).norm(),
            Shape::TwoSpheres { centers, radii } => {
                (Vector3::from(centers[0]).norm() + radii[0]).max(Vector3::from(centers[1]).norm() + radii[1])
            }
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Torus { major, minor } => minor > 0.0 && major > minor,
            Shape::RoundedBox { half_extents, radius } => radius >= 0.0 && half_extents.iter().all(|&h| h >= radius && h > 0.0),
            Shape::TwoSpheres { radii, .. } => radii.iter().all(|&r| r > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::Config(format!("invalid shape parameters {self:?}")))
        }
    }

    /// Default instance for a scene name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(Shape::Sphere { radius: 0.6 }),
            "torus" => Some(Shape::Torus { major: 0.5, minor: 0.2 }),
            "roundedbox" => Some(Shape::RoundedBox {
                half_extents: [0.45, 0.35, 0.3],
                radius: 0.1,
            }),
            "twospheres" => Some(Shape::TwoSpheres {
                centers: [[-0.3, 0.0, 0.0], [0.35, 0.0, 0.1]],
                radii: [0.35, 0.25],
            }),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 4] = ["sphere", "torus", "roundedbox", "twospheres"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Diffuse,
    Specular,
    /// Specular where the world x coordinate of the hit is non-negative.
    Mixed,
}

impl Material {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "diffuse" => Some(Material::Diffuse),
            "specular" => Some(Material::Specular),
            "mixed" => Some(Material::Mixed),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 3] = ["diffuse", "specular", "mixed"];

    /// Whether a hit at world point `p` reflects specularly.
    pub fn is_specular_at(&self, p: &Vector3<f64>) -> bool {
        match self {
            Material::Diffuse => false,
            Material::Specular => true,
            Material::Mixed => p.x >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub shape: Shape,
    pub material: Material,
    pub base_color: [f64; 3],
    /// `(diffuse, specular)` degree of polarization.
    pub dop_levels: (f64, f64),
    /// Standard deviation (radians) of wrapped-Gaussian AoP noise.
    pub aop_noise: f64,
    /// Direction towards the light, world frame.
    pub light_dir: [f64; 3],
    pub background: [f32; 3],
}

impl AnalyticScene {
    pub fn new(shape: Shape, material: Material) -> Self {
        Self {
            shape,
            material,
            base_color: [0.7, 0.6, 0.5],
            dop_levels: (0.15, 0.6),
            aop_noise: 0.0,
            light_dir: [0.4, -0.3, 0.8],
            background: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.shape.validate()?;
        let (d, s) = self.dop_levels;
        if !((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&s)) {
            return Err(SynthError::Config("DoP levels must lie in [0, 1]".into()));
        }
        if !(self.aop_noise >= 0.0) {
            return Err(SynthError::Config("AoP noise must be non-negative".into()));
        }
        if Vector3::from(self.light_dir).norm() < 1e-9 {
            return Err(SynthError::Config("light direction must be nonzero".into()));
        }
        Ok(())
    }

    /// Lambertian plus a Blinn-Phong lobe; `view` points from the surface
    /// towards the camera.
    pub fn shade(&self, p: &Vector3<f64>, n: &Vector3<f64>, view: &Vector3<f64>) -> [f32; 3] {
        let l = Vector3::from(self.light_dir).normalize();
        let diffuse = 0.35 + 0.55 * n.dot(&l).max(0.0);
        let (ks, shininess) = if self.material.is_specular_at(p) { (0.35, 24) } else { (0.05, 8) };
        let h = (l + view).normalize();
        let spec = ks * n.dot(&h).max(0.0).powi(shininess);
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            out[k] = (self.base_color[k] * diffuse + spec).clamp(0.0, 1.0) as f32;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub n_views: usize,
    pub orbit_radius: f64,
    /// Elevations in degrees, cycled over the views.
    pub elevations_deg: Vec<f64>,
    pub look_at: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
}

impl CameraRig {
    pub fn new(n_views: usize, width: usize, height: usize) -> Self {
        Self {
            n_views,
            orbit_radius: 3.0,
            elevations_deg: vec![-30.0, 10.0, -10.0, 30.0],
            look_at: [0.0; 3],
            width,
            height,
            fov_deg: 40.0,
        }
    }

    /// Close-range wide-angle rig, where rays deviate strongly from the
    /// optical axis.
    pub fn wide_angle(n_views: usize, width: usize, height: usize) -> Self {
        Self {
            orbit_radius: 2.2,
            fov_deg: 60.0,
            ..Self::new(n_views, width, height)
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        let f = self.focal();
        let target = Point3::from(self.look_at);
        (0..self.n_views)
            .map(|i| {
                let az = 2.0 * std::f64::consts::PI * i as f64 / self.n_views as f64;
                let el = self.elevations_deg[i % self.elevations_deg.len()].to_radians();
                let eye = target + self.orbit_radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                CameraModel::look_at(
                    f,
                    f,
                    0.5 * self.width as f64,
                    0.5 * self.height as f64,
                    eye,
                    target,
                    Vector3::new(0.0, 0.0, 1.0),
                )
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_views == 0 || self.width == 0 || self.height == 0 {
            return Err(SynthError::Config("rig needs at least one view and a nonempty image".into()));
        }
        if self.elevations_deg.is_empty() || !(self.fov_deg > 0.0 && self.fov_deg < 170.0) || !(self.orbit_radius > 0.0) {
            return Err(SynthError::Config("invalid rig geometry".into()));
        }
        Ok(())
    }

    /// Every camera must contain the projected bounding sphere (centered at
    /// the origin) inside its image.
    pub fn check_visibility(&self, bounding_radius: f64) -> Result<(), SynthError> {
        for (view, cam) in self.cameras().iter().enumerate() {
            let c = cam.world_to_camera(&Point3::origin());
            let d = c.coords.norm();
            if d <= bounding_radius {
                return Err(SynthError::Visibility { view });
            }
            let half_x = ((0.5 * self.width as f64) / cam.fx).atan();
            let half_y = ((0.5 * self.height as f64) / cam.fy).atan();
            let ang = (c.z / d).clamp(-1.0, 1.0).acos();
            if ang + (bounding_radius / d).asin() > half_x.min(half_y) {
                return Err(SynthError::Visibility { view });
            }
        }
        Ok(())
    }
}

/// Result of tracing one ray against the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [f32; 3],
}

const TRACE_EPS: f64 = 1e-6;
const MAX_STEPS: usize = 2000;

/// Sphere tracing from `origin` along unit `dir`.
pub fn trace(scene: &AnalyticScene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let scale = scene.shape.bounding_radius().max(1e-3);
    let t_max = origin.norm() + 2.0 * scale;
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let p = origin + dir * t;
        let s = scene.shape.sdf(&p);
        if s.abs() < TRACE_EPS * scale {
            let normal = scene.shape.normal(&p);
            return Some(Hit {
                depth: t,
                point: p,
                normal,
                color: scene.shade(&p, &normal, &(-dir)),
            });
        }
        t += s;
        if t > t_max || t < 0.0 {
            return None;
        }
    }
    None
}

/// Renders one ground-truth polarization frame.
pub fn render_frame(scene: &AnalyticScene, camera: &CameraModel, width: usize, height: usize, noise_seed: u64) -> PolarizationFrame {
    let origin = camera.center().coords;
    let pixels: Vec<Option<(Hit, Vector3<f64>)>> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (col, row) = (i % width, i / width);
            let v_cam = camera.camera_ray(col as f64 + 0.5, row as f64 + 0.5);
            let dir = camera.dir_to_world(&v_cam).normalize();
            trace(scene, &origin, &dir).map(|h| (h, v_cam))
        })
        .collect();
    let mut frame = PolarizationFrame::new(width, height, camera.clone());
    let n = width * height;
    let mut gt_normal = vec![0.0f32; 3 * n];
    let mut gt_depth = vec![0.0f32; n];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, scene.aop_noise.max(1e-300)).expect("finite sigma");
    for (i, px) in pixels.iter().enumerate() {
        let (col, row) = (i % width, i / width);
        match px {
            None => frame.set_color(col, row, scene.background),
            Some((hit, v_cam)) => {
                frame.mask[i] = true;
                frame.set_color(col, row, hit.color);
                let n_cam = camera.dir_to_camera(&hit.normal);
                let specular = scene.material.is_specular_at(&hit.point);
                let delta = if specular {
                    DisambiguationOffset::Specular
                } else {
                    DisambiguationOffset::Diffuse
                };
                match aop_from_normal(&n_cam, v_cam, delta) {
                    Ok(phi) => {
                        let phi = if scene.aop_noise > 0.0 {
                            wrap_half_pi(phi + noise.sample(&mut rng))
                        } else {
                            phi
                        };
                        frame.aop[i] = phi as f32;
                        frame.dop[i] = if specular { scene.dop_levels.1 } else { scene.dop_levels.0 } as f32;
                    }
                    Err(_) => {
                        frame.aop[i] = 0.0;
                        frame.dop[i] = 0.0;
                    }
                }
                for k in 0..3 {
                    gt_normal[k * n + i] = hit.normal[k] as f32;
                }
                gt_depth[i] = hit.depth as f32;
            }
        }
    }
    frame.extras.push(Channel {
        name: "gtnormal".into(),
        width,
        height,
        channels: 3,
        data: gt_normal,
    });
    frame.extras.push(Channel {
        name: "gtdepth".into(),
        width,
        height,
        channels: 1,
        data: gt_depth,
    });
    frame
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scene: AnalyticScene,
    pub rig: CameraRig,
    pub seed: u64,
    pub scene_hash: String,
    pub files: Vec<FileRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Content hash of the generating parameters.
pub fn scene_hash(scene: &AnalyticScene, rig: &CameraRig, seed: u64) -> String {
    let body = serde_json::json!({ "scene": scene, "rig": rig, "seed": seed });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

pub fn file_sha256(path: &Path) -> Result<String, SynthError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn frame_name(view: usize) -> String {
    format!("view_{view:03}.pframe")
}

/// Renders every view of `rig` into `out_dir` and writes the manifest.
pub fn generate_dataset(scene: &AnalyticScene, rig: &CameraRig, seed: u64, out_dir: &Path) -> Result<Manifest, SynthError> {
    scene.validate()?;
    rig.validate()?;
    rig.check_visibility(scene.shape.bounding_radius())?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(rig.n_views);
    for (view, cam) in rig.cameras().iter().enumerate() {
        let frame = render_frame(scene, cam, rig.width, rig.height, seed.wrapping_mul(1_000_003).wrapping_add(view as u64));
        let name = frame_name(view);
        let path = out_dir.join(&name);
        write_frame(&frame, &path)?;
        files.push(FileRecord {
            sha256: file_sha256(&path)?,
            name,
        });
    }
    let manifest = Manifest {
        version: 1,
        scene: scene.clone(),
        rig: rig.clone(),
        seed,
        scene_hash: scene_hash(scene, rig, seed),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SynthError::Manifest(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))
}

/// Frame paths of a dataset directory: the manifest order when present,
/// otherwise all `*.pframe` files sorted by name.
pub fn dataset_frames(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    if dir.join(MANIFEST_NAME).exists() {
        let m = read_manifest(dir)?;
        return Ok(m.files.iter().map(|f| dir.join(&f.name)).collect());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pframe"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PolarizationFrame>, SynthError> {
    dataset_frames(dir)?.iter().map(|p| read_frame(p).map_err(SynthError::from)).collect()
}
