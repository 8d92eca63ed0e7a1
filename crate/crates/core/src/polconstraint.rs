//! Polarimetric constraints on surface normals.
//!
//! Both the orthographic and perspective constraints express that the
//! camera-frame normal `n` lies in a plane determined by the measured AoP
//! `phi` (and, for the perspective form, the pixel ray `v`). The kernels
//! here measure the squared deviation from that plane.
//!
//! Conventions: camera frame x right, y down, z forward.

use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use thiserror::Error;

use crate::imaging::wrap_half_pi;

/// Default DoP threshold separating the diffuse-dominant and
/// specular-dominant branches of the segmented kernel.
pub const DEFAULT_DOP_THRESHOLD: f64 = 0.3;

const DEGENERATE_COEFF: f64 = 1e-12;
const DEGENERATE_VIEW: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("degenerate constraint: coefficient norm {0:e}")]
    DegenerateConstraint(f64),
    #[error("degenerate view: ray parallel to normal (|v x n| = {0:e})")]
    DegenerateView(f64),
}

/// The pi/2 offset resolving diffuse (0) versus specular (pi/2) AoP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DisambiguationOffset {
    Diffuse,
    Specular,
}

impl DisambiguationOffset {
    pub fn radians(self) -> f64 {
        match self {
            DisambiguationOffset::Diffuse => 0.0,
            DisambiguationOffset::Specular => FRAC_PI_2,
        }
    }

    pub fn toggled(self) -> Self {
        match self {
            DisambiguationOffset::Diffuse => DisambiguationOffset::Specular,
            DisambiguationOffset::Specular => DisambiguationOffset::Diffuse,
        }
    }
}

/// Which constraint the polarimetric loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Orthographic,
    Perspective,
}

/// Coefficient vector `a` of a linear constraint `a . n = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintCoefficients(pub Vector3<f64>);

impl ConstraintCoefficients {
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Unit-length coefficients, or an error when the constraint is degenerate.
    pub fn normalized(&self) -> Result<Vector3<f64>, ConstraintError> {
        let norm = self.norm();
        if norm < DEGENERATE_COEFF {
            return Err(ConstraintError::DegenerateConstraint(norm));
        }
        Ok(self.0 / norm)
    }
}

pub fn coeff_ortho(phi: f64, delta: DisambiguationOffset) -> ConstraintCoefficients {
    let p = phi + delta.radians();
    ConstraintCoefficients(Vector3::new(p.sin(), p.cos(), 0.0))
}

/// Perspective coefficients for camera ray `v` (unit length).
///
/// The vector is never degenerate for `v_z != 0`; the error is raised when
/// the ray lies in the image plane and is parallel to the AoP direction.
pub fn coeff_persp(
    phi: f64,
    delta: DisambiguationOffset,
    v: &Vector3<f64>,
) -> Result<ConstraintCoefficients, ConstraintError> {
    let p = phi + delta.radians();
    let (s, c) = p.sin_cos();
    // `0.0 - x` rather than `-x` keeps the on-axis z component at +0.0.
    let a = Vector3::new(v.z * s, v.z * c, 0.0 - (v.y * c + v.x * s));
    let norm = a.norm();
    if norm < DEGENERATE_COEFF {
        return Err(ConstraintError::DegenerateConstraint(norm));
    }
    Ok(ConstraintCoefficients(a))
}

fn unit(n: &Vector3<f64>) -> Vector3<f64> {
    let len = n.norm();
    if (len - 1.0).abs() > 1e-6 && len > 0.0 {
        n / len
    } else {
        *n
    }
}

/// `(a . n)^2 / |a|^2`, shared by both kernels so that the perspective form
/// reproduces the orthographic one exactly on the optical axis.
fn normalized_square(a: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
    let d = a.dot(&unit(n));
    d * d / a.dot(a)
}

/// Orthographic kernel `(a_o . n)^2`.
pub fn h_ortho(phi: f64, delta: DisambiguationOffset, n: &Vector3<f64>) -> f64 {
    normalized_square(&coeff_ortho(phi, delta).0, n)
}

/// Perspective kernel `(a_p . n / |a_p|)^2`, bounded by one.
pub fn h_persp(
    phi: f64,
    delta: DisambiguationOffset,
    v: &Vector3<f64>,
    n: &Vector3<f64>,
) -> Result<f64, ConstraintError> {
    let a = coeff_persp(phi, delta, v)?;
    Ok(normalized_square(&a.0, n))
}

/// Gradient of [`h_persp`] with respect to a unit normal `n`.
///
/// Treats `n` as already normalized (no projection onto the tangent space).
pub fn h_persp_grad_n(
    phi: f64,
    delta: DisambiguationOffset,
    v: &Vector3<f64>,
    n: &Vector3<f64>,
) -> Result<Vector3<f64>, ConstraintError> {
    let a = coeff_persp(phi, delta, v)?.normalized()?;
    Ok(a * (2.0 * a.dot(n)))
}

/// Segmented kernel switching on the degree of polarization.
///
/// Below `theta` both branches are plausible, so the product of the two
/// kernels is used. At or above `theta` only the specular branch applies.
pub fn f_persp(
    phi: f64,
    v: &Vector3<f64>,
    n: &Vector3<f64>,
    rho: f64,
    theta: f64,
) -> Result<f64, ConstraintError> {
    let spec = h_persp(phi, DisambiguationOffset::Specular, v, n)?;
    if rho < theta {
        let diff = h_persp(phi, DisambiguationOffset::Diffuse, v, n)?;
        Ok(diff * spec)
    } else {
        Ok(spec)
    }
}

/// Orthographic counterpart of [`f_persp`].
pub fn f_ortho(phi: f64, n: &Vector3<f64>, rho: f64, theta: f64) -> f64 {
    let spec = h_ortho(phi, DisambiguationOffset::Specular, n);
    if rho < theta {
        h_ortho(phi, DisambiguationOffset::Diffuse, n) * spec
    } else {
        spec
    }
}

/// AoP observed along camera ray `v` for a surface with camera-frame
/// normal `n` under offset `delta`; the exact inverse of the perspective
/// constraint. Result wrapped into `[-pi/2, pi/2]`.
pub fn aop_from_normal(
    n: &Vector3<f64>,
    v: &Vector3<f64>,
    delta: DisambiguationOffset,
) -> Result<f64, ConstraintError> {
    let c = v.cross(n);
    let len = c.norm();
    if len < DEGENERATE_VIEW {
        return Err(ConstraintError::DegenerateView(len));
    }
    let phi_prime = c.x.atan2(c.y);
    Ok(wrap_half_pi(phi_prime - delta.radians()))
}
