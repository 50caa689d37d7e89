//! Cameras, poses, and ray generation.
//!
//! Conventions used throughout the crate:
//!
//! * Poses are camera-to-world. The camera looks along the **negative z**
//!   column of its rotation, so the viewing axis is `-R[:,2]`.
//! * Pixel `(u, v)` maps to the camera-frame direction
//!   `((u - cx)/fx, (v - cy)/fy, -1)`; callers pass pixel *centers*
//!   (`u + 0.5` for integer pixel `u`).
//! * Orbit coordinates place the zenith on **+z**: `polar` is the angle from
//!   +z and `azimuth` rotates about +z starting from +x, so a camera center is
//!   `center + r·(sinθ·cosφ, sinθ·sinφ, cosθ)`.
//! * Depth images store z-depth (distance along the optical axis); ray
//!   sampling works in Euclidean distance along the unit direction. Use
//!   [`zdepth_factor`] to convert.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics for one image resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidConfig(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics for the same field of view at a different resolution.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    /// Builds a pose, rejecting rotations that are not orthonormal
    /// (tolerance `tol` on `RᵀR - I` and on `det R - 1`).
    pub fn checked(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let max_dev = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_dev > tol {
            return Err(Error::DegeneratePose(format!(
                "rotation not orthonormal (max deviation {max_dev:.2e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > tol.max(1e-9) {
            return Err(Error::DegeneratePose(format!(
                "rotation has determinant {:.6}, expected +1",
                rotation.determinant()
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::checked(rotation, translation, 1e-6)
    }

    /// Direction the camera looks toward: `-R[:,2]`.
    pub fn viewing_axis(&self) -> Vector3<f64> {
        -self.rotation.column(2)
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera point to world coordinates.
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major `[R | t]` 3x4 flattening used by dataset manifests.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    /// Parses the manifest flattening. `tol` is the orthonormality tolerance
    /// (dataset poses are allowed looser precision than internally built ones).
    pub fn from_row_major_3x4(v: &[f64; 12], tol: f64) -> Result<Self> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Self::checked(rotation, translation, tol)
    }
}

/// Camera position in orbit coordinates around a center point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPose {
    /// Distance from the orbit center.
    pub radius: f64,
    /// Angle from the +z zenith, in `[0, π]`.
    pub polar: f64,
    /// Rotation about +z measured from +x, in `[-π, π)`.
    pub azimuth: f64,
}

/// Relative viewpoint between a reference and a virtual camera, in orbit
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPose {
    pub d_radius: f64,
    pub d_polar: f64,
    pub d_azimuth: f64,
}

/// One camera ray. `near`/`far` bound the sample interval in Euclidean
/// distance along `dir`; a ray that misses the scene bounds has `near >= far`.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub dir: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn hits_bounds(&self) -> bool {
        self.near < self.far
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    // rem_euclid can return exactly 2π for inputs like -π - 1e-300; fold the
    // closed end back onto the half-open interval.
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Converts a camera center to orbit coordinates around `center`.
pub fn to_polar(translation: &Vector3<f64>, center: &Vector3<f64>) -> PolarPose {
    let d = translation - center;
    let radius = d.norm();
    if radius < 1e-12 {
        return PolarPose { radius: 0.0, polar: 0.0, azimuth: 0.0 };
    }
    let polar = (d.z / radius).clamp(-1.0, 1.0).acos();
    let azimuth = if d.x == 0.0 && d.y == 0.0 { 0.0 } else { d.y.atan2(d.x) };
    PolarPose { radius, polar, azimuth }
}

/// Camera center for orbit coordinates around `center`.
pub fn polar_to_center(p: &PolarPose, center: &Vector3<f64>) -> Vector3<f64> {
    center
        + Vector3::new(
            p.radius * p.polar.sin() * p.azimuth.cos(),
            p.radius * p.polar.sin() * p.azimuth.sin(),
            p.radius * p.polar.cos(),
        )
}

/// Viewpoint change from `reference` to `virt`; the azimuth difference is
/// wrapped to `[-π, π)`.
pub fn relative_polar(reference: &PolarPose, virt: &PolarPose) -> DeltaPose {
    DeltaPose {
        d_radius: virt.radius - reference.radius,
        d_polar: virt.polar - reference.polar,
        d_azimuth: wrap_angle(virt.azimuth - reference.azimuth),
    }
}

/// Normalized angle between two viewpoint directions, `arccos` of the clamped
/// cosine divided by π, so the result lies in `[0, 1]`.
pub fn angular_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegeneratePose(
            "angular distance of a zero-length direction".into(),
        ));
    }
    let c = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(c.acos() / std::f64::consts::PI)
}

/// Camera-to-world pose looking from `eye` toward `target`.
///
/// `up` seeds the image orientation; when it is (nearly) parallel to the view
/// direction a fixed fallback axis is substituted so the basis stays well
/// conditioned.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<RigidPose> {
    let fwd = target - eye;
    let n = fwd.norm();
    if n < 1e-12 {
        return Err(Error::DegeneratePose("look_at with eye == target".into()));
    }
    let d = fwd / n;
    let mut u = *up;
    if d.cross(&u).norm() < 1e-6 {
        u = Vector3::new(1.0, 0.0, 0.0);
        if d.cross(&u).norm() < 1e-6 {
            u = Vector3::new(0.0, 1.0, 0.0);
        }
    }
    let x = d.cross(&u).normalize();
    let z = -d;
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    RigidPose::new(rotation, *eye)
}

/// Moves the camera center within its image plane (orientation fixed) so the
/// viewing axis passes through the origin, with the origin in front of the
/// camera. Errors if the camera faces away from the origin. Idempotent.
pub fn pseudo_camera(pose: &RigidPose) -> Result<RigidPose> {
    let d = pose.viewing_axis();
    let s = pose.translation.dot(&d);
    // The origin sits on the new axis at parameter λ = -s; demand λ > 0.
    if s >= 0.0 {
        return Err(Error::DegeneratePose(format!(
            "camera faces away from the object center (axis projection {s:.4})"
        )));
    }
    Ok(RigidPose { rotation: pose.rotation, translation: d * s })
}

/// Projects a world point to pixel coordinates; `None` if the point is not in
/// front of the camera.
pub fn project(
    pose: &RigidPose,
    intr: &Intrinsics,
    world: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let p = pose.world_to_camera(world);
    if p.z >= -1e-12 {
        return None;
    }
    let inv = -1.0 / p.z;
    Some((intr.cx + intr.fx * p.x * inv, intr.cy + intr.fy * p.y * inv))
}

/// Multiplier converting a z-depth at pixel `(u, v)` into Euclidean distance
/// along that pixel's unit ray direction.
pub fn zdepth_factor(intr: &Intrinsics, u: f64, v: f64) -> f64 {
    let x = (u - intr.cx) / intr.fx;
    let y = (v - intr.cy) / intr.fy;
    (x * x + y * y + 1.0).sqrt()
}

/// Intersects `origin + t·dir` (unit `dir`) with the sphere of radius `r`
/// about the origin. Returns `(t0, t1)` clamped to `t >= 0`, or `None` if the
/// ray misses.
pub fn intersect_sphere(origin: &Vector3<f64>, dir: &Vector3<f64>, r: f64) -> Option<(f64, f64)> {
    let b = origin.dot(dir);
    let c = origin.dot(origin) - r * r;
    let disc = b * b - c;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = (-b - sq, -b + sq);
    if t1 <= 0.0 {
        return None;
    }
    Some((t0.max(0.0), t1))
}

/// Builds rays through the given pixel coordinates (callers pass pixel
/// centers). `bound_radius` fixes each ray's `[near, far]` from its
/// intersection with the scene-bounding sphere.
pub fn generate_rays(
    pose: &RigidPose,
    intr: &Intrinsics,
    pixels: &[(f64, f64)],
    bound_radius: f64,
) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(u, v)| {
            let cam = Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, -1.0);
            let dir = (pose.rotation * cam).normalize();
            let (near, far) = intersect_sphere(&pose.translation, &dir, bound_radius)
                .unwrap_or((0.0, 0.0));
            Ray { origin: pose.translation, dir, near, far }
        })
        .collect()
}

/// Ranges for sampling a virtual viewpoint. A zero-width range pins that
/// coordinate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViewBounds {
    pub radius: [f64; 2],
    pub polar: [f64; 2],
    pub azimuth: [f64; 2],
}

impl ViewBounds {
    /// Bounds collapsed onto one viewpoint.
    pub fn at(p: &PolarPose) -> Self {
        Self {
            radius: [p.radius, p.radius],
            polar: [p.polar, p.polar],
            azimuth: [p.azimuth, p.azimuth],
        }
    }
}

/// Samples a virtual camera uniformly within `bounds` (independently in
/// radius, polar, azimuth), oriented so its viewing axis passes through the
/// origin. Exactly three RNG draws are consumed.
pub fn sample_virtual_view<R: Rng>(rng: &mut R, bounds: &ViewBounds) -> Result<(RigidPose, PolarPose)> {
    for (name, r) in [
        ("radius", bounds.radius),
        ("polar", bounds.polar),
        ("azimuth", bounds.azimuth),
    ] {
        if r[1] < r[0] {
            return Err(Error::InvalidConfig(format!("empty {name} range {r:?}")));
        }
    }
    if bounds.radius[0] <= 0.0 {
        return Err(Error::InvalidConfig("virtual view radius must be positive".into()));
    }
    let polar = PolarPose {
        radius: rng.gen_range(bounds.radius[0]..=bounds.radius[1]),
        polar: rng.gen_range(bounds.polar[0]..=bounds.polar[1]),
        azimuth: rng.gen_range(bounds.azimuth[0]..=bounds.azimuth[1]),
    };
    let eye = polar_to_center(&polar, &Vector3::zeros());
    let pose = look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0))?;
    Ok((pose, polar))
}
