//! Polarization imaging: Stokes vectors from polarizer-angle intensities,
//! AoP/DoP maps, camera models and the `PFRAME` container format.
//!
//! All image planes are linear radiometric values stored as `f32`.
//! Camera parameters are kept in `f64`.

use std::f64::consts::FRAC_PI_2;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use thiserror::Error;

/// Absolute slack used when comparing polarization magnitudes to `s0`.
pub const EPS_NUM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed frame header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch in channel `{channel}`: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    DimensionMismatch {
        channel: String,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("missing channel `{0}`")]
    MissingChannel(String),
    #[error("camera rotation is not a proper rotation (orthonormality error {0:e})")]
    InvalidRotation(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear polarization state of a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StokesVector {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
}

impl StokesVector {
    pub fn new(s0: f64, s1: f64, s2: f64) -> Self {
        Self { s0, s1, s2 }
    }

    /// Angle of polarization in `[-pi/2, pi/2]`. A zero vector maps to 0.
    pub fn aop(&self) -> f64 {
        if self.s1 == 0.0 && self.s2 == 0.0 {
            return 0.0;
        }
        0.5 * self.s2.atan2(self.s1)
    }

    /// Degree of linear polarization, clamped to `[0, 1]`.
    pub fn dop(&self) -> f64 {
        if self.s0 <= EPS_NUM {
            return 0.0;
        }
        ((self.s1 * self.s1 + self.s2 * self.s2).sqrt() / self.s0).clamp(0.0, 1.0)
    }

    /// True when the polarized magnitude does not exceed the total intensity.
    pub fn is_physical(&self) -> bool {
        self.s0 >= 0.0
            && (self.s1 * self.s1 + self.s2 * self.s2).sqrt() <= self.s0 + EPS_NUM * self.s0.max(1.0)
    }
}

/// Stokes vector from four images taken behind a linear polarizer at
/// 0, 45, 90 and 135 degrees.
pub fn stokes_from_polarizer_images(
    i0: f64,
    i45: f64,
    i90: f64,
    i135: f64,
) -> Result<StokesVector, ImagingError> {
    for (name, v) in [("i0", i0), ("i45", i45), ("i90", i90), ("i135", i135)] {
        if !(v >= 0.0) {
            return Err(ImagingError::InvalidInput(format!(
                "intensity {name} = {v} must be non-negative"
            )));
        }
    }
    Ok(StokesVector {
        s0: 0.5 * (i0 + i45 + i90 + i135),
        s1: i0 - i90,
        s2: i45 - i135,
    })
}

/// Intensity seen behind a linear polarizer at `polarizer_angle` for light
/// with total intensity `s0`, degree `dop` and angle `aop` (Malus' law).
pub fn polarizer_intensity(s0: f64, dop: f64, aop: f64, polarizer_angle: f64) -> f64 {
    0.5 * s0 * (1.0 + dop * (2.0 * (polarizer_angle - aop)).cos())
}

pub fn aop(s: &StokesVector) -> f64 {
    s.aop()
}

pub fn dop(s: &StokesVector) -> f64 {
    s.dop()
}

/// Wraps an angle into `[-pi/2, pi/2]` (angles are defined modulo pi).
pub fn wrap_half_pi(angle: f64) -> f64 {
    let w = angle - std::f64::consts::PI * (angle / std::f64::consts::PI).round();
    w.clamp(-FRAC_PI_2, FRAC_PI_2)
}

/// Pinhole camera with a world-to-camera rigid pose.
///
/// Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, ImagingError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera looking from `eye` towards `target`, with `up` as the world up hint.
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(0.0, 0.0, 1.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye.coords);
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(ImagingError::InvalidRotation(err.max((det - 1.0).abs())));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(ImagingError::InvalidInput(
                "focal lengths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn dir_to_camera(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    pub fn dir_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * d
    }

    /// Unit ray direction in the camera frame through continuous pixel
    /// coordinates `(u, v)`. Pixel `(col, row)` has its center at
    /// `(col + 0.5, row + 0.5)`.
    pub fn camera_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        let pc = self.world_to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        Some((self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }
}

/// A named planar `f32` image with `channels` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Planar layout: plane `c` occupies `[c*w*h, (c+1)*w*h)`.
    pub data: Vec<f32>,
}

impl Channel {
    fn plane_len(&self) -> usize {
        self.width * self.height
    }
}

/// One calibrated polarization view.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizationFrame {
    pub width: usize,
    pub height: usize,
    /// Planar linear RGB, 3 planes of `width * height`.
    pub color: Vec<f32>,
    /// Radians in `[-pi/2, pi/2]`.
    pub aop: Vec<f32>,
    /// In `[0, 1]`.
    pub dop: Vec<f32>,
    pub mask: Vec<bool>,
    pub camera: CameraModel,
    /// Extra channels (for example ground-truth normals/depth), written
    /// after the required ones and never interpreted by the reader.
    pub extras: Vec<Channel>,
}

impl PolarizationFrame {
    pub fn new(width: usize, height: usize, camera: CameraModel) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![0.0; 3 * n],
            aop: vec![0.0; n],
            dop: vec![0.0; n],
            mask: vec![false; n],
            camera,
            extras: Vec::new(),
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn color_at(&self, col: usize, row: usize) -> [f32; 3] {
        let n = self.width * self.height;
        let i = self.index(col, row);
        [self.color[i], self.color[n + i], self.color[2 * n + i]]
    }

    pub fn set_color(&mut self, col: usize, row: usize, rgb: [f32; 3]) {
        let n = self.width * self.height;
        let i = self.index(col, row);
        self.color[i] = rgb[0];
        self.color[n + i] = rgb[1];
        self.color[2 * n + i] = rgb[2];
    }

    pub fn extra(&self, name: &str) -> Option<&Channel> {
        self.extras.iter().find(|c| c.name == name)
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Enforces the AoP/DoP value ranges in place.
    pub fn sanitize(&mut self) {
        for a in &mut self.aop {
            *a = wrap_half_pi(*a as f64) as f32;
        }
        for d in &mut self.dop {
            *d = d.clamp(0.0, 1.0);
        }
    }

    /// Fills color/AoP/DoP from four polarizer-angle intensity planes
    /// (each `width * height * 3`, planar RGB). AoP and DoP are computed
    /// from the channel-averaged Stokes vector.
    pub fn set_from_polarizer_images(
        &mut self,
        i0: &[f32],
        i45: &[f32],
        i90: &[f32],
        i135: &[f32],
    ) -> Result<(), ImagingError> {
        let n = self.width * self.height;
        for (name, img) in [("i0", i0), ("i45", i45), ("i90", i90), ("i135", i135)] {
            if img.len() != 3 * n {
                return Err(ImagingError::InvalidInput(format!(
                    "{name} has {} values, expected {}",
                    img.len(),
                    3 * n
                )));
            }
        }
        for p in 0..n {
            let mut acc = StokesVector::new(0.0, 0.0, 0.0);
            for c in 0..3 {
                let k = c * n + p;
                let s = stokes_from_polarizer_images(
                    i0[k] as f64,
                    i45[k] as f64,
                    i90[k] as f64,
                    i135[k] as f64,
                )?;
                self.color[k] = s.s0 as f32;
                acc.s0 += s.s0 / 3.0;
                acc.s1 += s.s1 / 3.0;
                acc.s2 += s.s2 / 3.0;
            }
            self.aop[p] = acc.aop() as f32;
            self.dop[p] = acc.dop() as f32;
        }
        Ok(())
    }
}

const MAGIC: &str = "PFRAME";
const VERSION: &str = "v1";

fn write_channel<W: Write>(w: &mut W, name: &str, width: usize, height: usize, data: &[f32]) -> std::io::Result<()> {
    writeln!(w, "channel {name} {width} {height}")?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    writeln!(w)
}

/// Writes a frame in the `PFRAME v1` container format.
pub fn write_frame(frame: &PolarizationFrame, path: &Path) -> Result<(), ImagingError> {
    let mut w = BufWriter::new(File::create(path)?);
    let cam = &frame.camera;
    writeln!(w, "{MAGIC} {VERSION} {} {}", frame.width, frame.height)?;
    writeln!(w, "K {} {} {} {}", cam.fx, cam.fy, cam.cx, cam.cy)?;
    let r = &cam.rotation;
    writeln!(
        w,
        "R {} {} {} {} {} {} {} {} {}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)]
    )?;
    let t = &cam.translation;
    writeln!(w, "t {} {} {}", t.x, t.y, t.z)?;
    let (wd, ht) = (frame.width, frame.height);
    write_channel(&mut w, "color3", wd, ht, &frame.color)?;
    write_channel(&mut w, "aop1", wd, ht, &frame.aop)?;
    write_channel(&mut w, "dop1", wd, ht, &frame.dop)?;
    let mask: Vec<f32> = frame.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_channel(&mut w, "mask1", wd, ht, &mask)?;
    for extra in &frame.extras {
        let name = format!("{}{}", extra.name, extra.channels);
        write_channel(&mut w, &name, extra.width, extra.height, &extra.data)?;
    }
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String, ImagingError> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(ImagingError::MalformedHeader("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn parse_floats(tokens: &[&str], expected: usize, what: &str) -> Result<Vec<f64>, ImagingError> {
    if tokens.len() != expected {
        return Err(ImagingError::MalformedHeader(format!(
            "`{what}` expects {expected} values, found {}",
            tokens.len()
        )));
    }
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| ImagingError::MalformedHeader(format!("bad number `{t}` in `{what}`")))
        })
        .collect()
}

/// Splits a channel name like `gtnormal3` into (`gtnormal`, 3).
fn split_channel_name(name: &str) -> Result<(String, usize), ImagingError> {
    let digits = name.chars().rev().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 || digits == name.len() {
        return Err(ImagingError::MalformedHeader(format!(
            "channel name `{name}` lacks a component count"
        )));
    }
    let (base, count) = name.split_at(name.len() - digits);
    let count: usize = count
        .parse()
        .map_err(|_| ImagingError::MalformedHeader(format!("bad channel name `{name}`")))?;
    if count == 0 {
        return Err(ImagingError::MalformedHeader(format!(
            "channel `{name}` has zero components"
        )));
    }
    Ok((base.to_string(), count))
}

/// Reads a `PFRAME v1` file.
pub fn read_frame(path: &Path) -> Result<PolarizationFrame, ImagingError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_line(&mut r)?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.len() != 4 || tok[0] != MAGIC || tok[1] != VERSION {
        return Err(ImagingError::MalformedHeader(format!("bad header line `{header}`")));
    }
    let width: usize = tok[2]
        .parse()
        .map_err(|_| ImagingError::MalformedHeader("bad width".into()))?;
    let height: usize = tok[3]
        .parse()
        .map_err(|_| ImagingError::MalformedHeader("bad height".into()))?;

    let mut k = None;
    let mut rot = None;
    let mut trans = None;
    let mut channels: Vec<Channel> = Vec::new();
    loop {
        let line = read_line(&mut r)?;
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok[0] {
            "K" => k = Some(parse_floats(&tok[1..], 4, "K")?),
            "R" => rot = Some(parse_floats(&tok[1..], 9, "R")?),
            "t" => trans = Some(parse_floats(&tok[1..], 3, "t")?),
            "channel" => {
                if tok.len() != 4 {
                    return Err(ImagingError::MalformedHeader(format!("bad channel line `{line}`")));
                }
                let (base, count) = split_channel_name(tok[1])?;
                let cw: usize = tok[2]
                    .parse()
                    .map_err(|_| ImagingError::MalformedHeader(format!("bad channel width in `{line}`")))?;
                let ch: usize = tok[3]
                    .parse()
                    .map_err(|_| ImagingError::MalformedHeader(format!("bad channel height in `{line}`")))?;
                let len = cw
                    .checked_mul(ch)
                    .and_then(|v| v.checked_mul(count))
                    .ok_or_else(|| ImagingError::MalformedHeader("channel too large".into()))?;
                let mut bytes = vec![0u8; len * 4];
                r.read_exact(&mut bytes)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let mut nl = [0u8; 1];
                r.read_exact(&mut nl)?;
                if nl[0] != b'\n' {
                    return Err(ImagingError::MalformedHeader(format!(
                        "channel `{}` is not terminated by a newline",
                        tok[1]
                    )));
                }
                channels.push(Channel {
                    name: base,
                    width: cw,
                    height: ch,
                    channels: count,
                    data,
                });
            }
            "end" => break,
            other => {
                return Err(ImagingError::MalformedHeader(format!("unknown record `{other}`")));
            }
        }
    }

    let k = k.ok_or_else(|| ImagingError::MalformedHeader("missing K record".into()))?;
    let rot = rot.ok_or_else(|| ImagingError::MalformedHeader("missing R record".into()))?;
    let trans = trans.ok_or_else(|| ImagingError::MalformedHeader("missing t record".into()))?;
    let camera = CameraModel::new(
        k[0],
        k[1],
        k[2],
        k[3],
        Matrix3::from_row_slice(&rot),
        Vector3::new(trans[0], trans[1], trans[2]),
    )?;

    for c in &channels {
        if c.width != width || c.height != height {
            return Err(ImagingError::DimensionMismatch {
                channel: format!("{}{}", c.name, c.channels),
                expected_w: width,
                expected_h: height,
                found_w: c.width,
                found_h: c.height,
            });
        }
    }
    let mut take = |name: &str, count: usize| -> Result<Vec<f32>, ImagingError> {
        let pos = channels
            .iter()
            .position(|c| c.name == name && c.channels == count)
            .ok_or_else(|| ImagingError::MissingChannel(format!("{name}{count}")))?;
        let c = channels.remove(pos);
        debug_assert_eq!(c.data.len(), c.plane_len() * count);
        Ok(c.data)
    };
    let color = take("color", 3)?;
    let aop = take("aop", 1)?;
    let dop = take("dop", 1)?;
    let mask = take("mask", 1)?.into_iter().map(|m| m > 0.5).collect();
    Ok(PolarizationFrame {
        width,
        height,
        color,
        aop,
        dop,
        mask,
        camera,
        extras: channels,
    })
}
