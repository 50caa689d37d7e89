//! Dataset manifest, image I/O, preprocessing, and the synthetic
//! deforming-scene generator.
//!
//! On disk a dataset is a directory holding `manifest.json` plus per-frame
//! `rgb_%04d.png` (8-bit RGB), `depth_%04d.png` (16-bit grayscale, value ×
//! `depth_scale` = z-depth in scene units, 0 = invalid), and
//! `mask_%04d.png` (8-bit, ≥128 = foreground). The manifest records
//! intrinsics, the depth scale, and each frame's camera-to-world pose as
//! twelve row-major floats. Depth is **z-depth** — distance along the
//! optical axis, not along the pixel ray — and the synthetic generator
//! emits the same convention.
//!
//! Preprocessing replaces every pose by its re-aimed pseudo camera (so the
//! viewing axis passes through the object center), then crops all images to
//! one square window centered on the principal point — where the origin now
//! projects — and shifts the intrinsics accordingly. Rigid pre-alignment of
//! the sequence to the unit-sphere object frame is assumed done upstream;
//! loading only checks that cameras sit outside the unit bound.
//!
//! The synthetic generator sphere-traces analytic primitive SDFs under a
//! closed-form translation motion, shades them with a fixed world light,
//! and writes ground-truth meshes and the per-frame displacement oracle
//! next to the rendered frames, giving training runs an exact reference.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{marching_zero_set, write_ply, TriangleMesh};
use crate::geometry::{generate_rays, look_at, pseudo_camera, project, Intrinsics, RigidPose};
use crate::render::shade_color;

/// One observed RGB-D frame. `rgb` is row-major `h×w×3` in `[0,1]`,
/// `depth` is z-depth in scene units with 0 marking invalid pixels, and
/// `mask` is `{0,1}` foreground. `pose` maps camera to world.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<f64>,
    pub pose: RigidPose,
    pub index: usize,
}

/// A loaded sequence with shared intrinsics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub depth_scale: f64,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    depth_scale: f64,
    frames: Vec<ManifestFrame>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    rgb: String,
    depth: String,
    mask: String,
    /// Camera-to-world `[R | t]`, row-major.
    pose: [f64; 12],
}

/// Orthonormality tolerance for poses read from disk; real capture
/// pipelines store rotations with limited precision.
const POSE_TOL: f64 = 1e-4;

/// Writes `dataset` into `dir` in the on-disk layout described in the
/// module docs, creating the directory if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let intr = &dataset.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut frames = Vec::with_capacity(dataset.frames.len());
    for frame in &dataset.frames {
        let names = (
            format!("rgb_{:04}.png", frame.index),
            format!("depth_{:04}.png", frame.index),
            format!("mask_{:04}.png", frame.index),
        );
        let rgb: Vec<u8> = frame
            .rgb
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .ok_or_else(|| Error::ShapeMismatch(format!("frame {}: rgb size", frame.index)))?
            .save_with_format(dir.join(&names.0), image::ImageFormat::Png)?;
        let depth: Vec<u16> = frame
            .depth
            .iter()
            .map(|&v| ((v / dataset.depth_scale).round()).clamp(0.0, 65535.0) as u16)
            .collect();
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, depth)
            .ok_or_else(|| Error::ShapeMismatch(format!("frame {}: depth size", frame.index)))?
            .save_with_format(dir.join(&names.1), image::ImageFormat::Png)?;
        let mask: Vec<u8> = frame.mask.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(w as u32, h as u32, mask)
            .ok_or_else(|| Error::ShapeMismatch(format!("frame {}: mask size", frame.index)))?
            .save_with_format(dir.join(&names.2), image::ImageFormat::Png)?;
        frames.push(ManifestFrame {
            rgb: names.0,
            depth: names.1,
            mask: names.2,
            pose: frame.pose.to_row_major_3x4(),
        });
    }
    let manifest = Manifest {
        width: w,
        height: h,
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        depth_scale: dataset.depth_scale,
        frames,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads and validates a dataset directory. Frames are indexed by their
/// manifest order, contiguously from 0. Errors name the offending frame or
/// file: missing images, dimension mismatches, poses that fail
/// orthonormality, or cameras inside the unit object bound all fail the
/// load.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let intrinsics = Intrinsics::new(
        manifest.fx,
        manifest.fy,
        manifest.cx,
        manifest.cy,
        manifest.width,
        manifest.height,
    )?;
    if !(manifest.depth_scale.is_finite() && manifest.depth_scale > 0.0) {
        return Err(Error::Dataset(format!("bad depth_scale {}", manifest.depth_scale)));
    }
    let (w, h) = (manifest.width, manifest.height);
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (index, mf) in manifest.frames.iter().enumerate() {
        let ctx = |what: &str, e: String| Error::Dataset(format!("frame {index} {what}: {e}"));
        let pose = RigidPose::from_row_major_3x4(&mf.pose, POSE_TOL)
            .map_err(|e| ctx("pose", e.to_string()))?;
        if pose.translation.norm() <= 1.0 {
            return Err(ctx(
                "pose",
                format!(
                    "camera center {:.3} units from origin is inside the unit object bound",
                    pose.translation.norm()
                ),
            ));
        }
        let rgb_img = image::open(dir.join(&mf.rgb))
            .map_err(|e| ctx(&mf.rgb, e.to_string()))?
            .to_rgb8();
        if (rgb_img.width() as usize, rgb_img.height() as usize) != (w, h) {
            return Err(ctx(&mf.rgb, format!("{}×{} ≠ {w}×{h}", rgb_img.width(), rgb_img.height())));
        }
        let depth_img = match image::open(dir.join(&mf.depth))
            .map_err(|e| ctx(&mf.depth, e.to_string()))?
        {
            image::DynamicImage::ImageLuma16(img) => img,
            _ => return Err(ctx(&mf.depth, "depth must be 16-bit grayscale".into())),
        };
        if (depth_img.width() as usize, depth_img.height() as usize) != (w, h) {
            return Err(ctx(
                &mf.depth,
                format!("{}×{} ≠ {w}×{h}", depth_img.width(), depth_img.height()),
            ));
        }
        let mask_img = image::open(dir.join(&mf.mask))
            .map_err(|e| ctx(&mf.mask, e.to_string()))?
            .to_luma8();
        if (mask_img.width() as usize, mask_img.height() as usize) != (w, h) {
            return Err(ctx(
                &mf.mask,
                format!("{}×{} ≠ {w}×{h}", mask_img.width(), mask_img.height()),
            ));
        }
        frames.push(Frame {
            rgb: rgb_img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
            depth: depth_img
                .as_raw()
                .iter()
                .map(|&v| v as f64 * manifest.depth_scale)
                .collect(),
            mask: mask_img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect(),
            pose,
            index,
        });
    }
    Ok(Dataset { intrinsics, depth_scale: manifest.depth_scale, frames })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Re-aims every camera at the object center and crops all frames to one
/// shared square window around the principal point.
///
/// Per frame, the pose becomes its pseudo camera (center moved within the
/// image plane until the viewing axis passes through the origin), which
/// makes the origin project exactly onto the principal point; frames whose
/// cameras face away from the origin are dropped with a warning and listed
/// in the returned vector (by their original index). The window side is
/// sized so every frame's foreground mask fits with a 10% margin, clamped
/// to the image; the crop offset shifts the principal point so projection
/// through the new intrinsics equals the old pixel minus the offset.
/// Because the offset is clamped to keep the window inside the image, a
/// second pass over the output is the identity: the window then spans the
/// whole (already cropped) image.
pub fn preprocess(dataset: &Dataset) -> Result<(Dataset, Vec<usize>)> {
    let intr = &dataset.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let mut kept: Vec<(usize, RigidPose)> = Vec::new();
    let mut dropped = Vec::new();
    for frame in &dataset.frames {
        match pseudo_camera(&frame.pose) {
            Ok(pose) => kept.push((frame.index, pose)),
            Err(e) => {
                log::warn!("dropping frame {}: {e}", frame.index);
                dropped.push(frame.index);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::Dataset("no frame survives re-aiming at the object center".into()));
    }

    // Foreground extent (Chebyshev, in pixels) from the principal point,
    // maximized over frames; the window must contain it with margin.
    let mut extent = 0.0f64;
    for frame in &dataset.frames {
        if dropped.contains(&frame.index) {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if frame.mask[y * w + x] > 0.5 {
                    let dx = (x as f64 + 0.5 - intr.cx).abs();
                    let dy = (y as f64 + 0.5 - intr.cy).abs();
                    extent = extent.max(dx.max(dy));
                }
            }
        }
    }
    if extent == 0.0 {
        return Err(Error::Dataset("every frame has an empty foreground mask".into()));
    }
    let half = (1.1 * extent).max(extent + 1.0).ceil() as usize;
    let side = (2 * half).min(w).min(h);
    let clamp_origin = |center: f64, limit: usize| -> usize {
        let lo = (center - side as f64 / 2.0).round();
        (lo.max(0.0) as usize).min(limit - side)
    };
    let x0 = clamp_origin(intr.cx, w);
    let y0 = clamp_origin(intr.cy, h);
    if side < 2 * half {
        log::warn!(
            "crop window {side}px is clamped by the {w}×{h} image; the mask margin is reduced"
        );
    }

    let intrinsics = Intrinsics::new(
        intr.fx,
        intr.fy,
        intr.cx - x0 as f64,
        intr.cy - y0 as f64,
        side,
        side,
    )?;
    let mut frames = Vec::with_capacity(kept.len());
    for (new_index, &(old_index, pose)) in kept.iter().enumerate() {
        let src = &dataset.frames[dataset.frames.iter().position(|f| f.index == old_index).unwrap()];
        let crop = |img: &[f64], ch: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(side * side * ch);
            for y in 0..side {
                let row = ((y0 + y) * w + x0) * ch;
                out.extend_from_slice(&img[row..row + side * ch]);
            }
            out
        };
        frames.push(Frame {
            rgb: crop(&src.rgb, 3),
            depth: crop(&src.depth, 1),
            mask: crop(&src.mask, 1),
            pose,
            index: new_index,
        });
    }
    Ok((Dataset { intrinsics, depth_scale: dataset.depth_scale, frames }, dropped))
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Analytic solid whose exact signed distance drives rendering, meshing,
/// and the back-projection consistency checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    /// Capsule along the z axis: segment half-length plus a radius.
    Capsule { half_len: f64, radius: f64 },
    Union { parts: Vec<Primitive> },
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { radius } => p.norm() - radius,
            Primitive::Box { half } => {
                let q = Vector3::new(
                    p.x.abs() - half[0],
                    p.y.abs() - half[1],
                    p.z.abs() - half[2],
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Primitive::Capsule { half_len, radius } => {
                let z = p.z.clamp(-half_len, *half_len);
                Vector3::new(p.x, p.y, p.z - z).norm() - radius
            }
            Primitive::Union { parts } => {
                parts.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Radius of the origin-centered ball the solid fits in.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Primitive::Sphere { radius } => *radius,
            Primitive::Box { half } => Vector3::from(*half).norm(),
            Primitive::Capsule { half_len, radius } => half_len + radius,
            Primitive::Union { parts } => {
                parts.iter().map(|c| c.bounding_radius()).fold(0.0, f64::max)
            }
        }
    }
}

/// Closed-form rigid translation of the solid over normalized time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Offset `axis · amplitude · sin(2π · cycles · t)` of the solid; the
    /// axis is used as given.
    TranslateSin { axis: [f64; 3], amplitude: f64, cycles: f64 },
}

impl Motion {
    /// World-space displacement of the solid at normalized time `t_norm`.
    pub fn offset(&self, t_norm: f64) -> Vector3<f64> {
        match self {
            Motion::Static => Vector3::zeros(),
            Motion::TranslateSin { axis, amplitude, cycles } => {
                Vector3::from(*axis)
                    * (*amplitude * (2.0 * std::f64::consts::PI * cycles * t_norm).sin())
            }
        }
    }

    pub fn max_offset(&self) -> f64 {
        match self {
            Motion::Static => 0.0,
            Motion::TranslateSin { axis, amplitude, .. } => {
                Vector3::from(*axis).norm() * amplitude.abs()
            }
        }
    }
}

/// Surface albedo as a function of the **canonical** (undisplaced) point,
/// so texture rides along with the motion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlbedoSpec {
    Flat { rgb: [f64; 3] },
    /// Alternating color bands of width `period` along `axis`.
    Bands { axis: [f64; 3], period: f64, rgb_a: [f64; 3], rgb_b: [f64; 3] },
}

impl AlbedoSpec {
    pub fn color(&self, canonical: &Vector3<f64>) -> [f64; 3] {
        match self {
            AlbedoSpec::Flat { rgb } => *rgb,
            AlbedoSpec::Bands { axis, period, rgb_a, rgb_b } => {
                let band = (canonical.dot(&Vector3::from(*axis)) / period).floor() as i64;
                if band.rem_euclid(2) == 0 {
                    *rgb_a
                } else {
                    *rgb_b
                }
            }
        }
    }
}

/// Circular camera path at fixed radius and polar angle, evenly spaced in
/// azimuth: frame `i` of `n` sits at `start + span · i / n`, so a full
/// `2π` span does not duplicate its endpoint. Cameras look at the origin
/// with +z up.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub radius: f64,
    pub polar: f64,
    pub azimuth_start: f64,
    pub azimuth_span: f64,
}

impl OrbitSpec {
    pub fn pose(&self, i: usize, n: usize) -> Result<RigidPose> {
        let az = self.azimuth_start + self.azimuth_span * i as f64 / n.max(1) as f64;
        let eye = Vector3::new(
            self.radius * self.polar.sin() * az.cos(),
            self.radius * self.polar.sin() * az.sin(),
            self.radius * self.polar.cos(),
        );
        look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0))
    }
}

fn default_depth_scale() -> f64 {
    0.001
}
fn default_mesh_resolution() -> usize {
    64
}
fn default_focal_ratio() -> f64 {
    0.75
}
fn default_ambient() -> f64 {
    0.3
}

/// Full description of a synthetic sequence; rendering it is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub primitive: Primitive,
    pub albedo: AlbedoSpec,
    pub motion: Motion,
    pub orbit: OrbitSpec,
    pub frames: usize,
    pub resolution: usize,
    /// World-space light direction for lambertian shading (normalized
    /// internally).
    pub light_dir: [f64; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default = "default_mesh_resolution")]
    pub mesh_resolution: usize,
    /// Focal length as a fraction of the image side.
    #[serde(default = "default_focal_ratio")]
    pub focal_ratio: f64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.frames == 0 {
            return fail("frames must be at least 1".into());
        }
        if self.resolution < 8 {
            return fail(format!("resolution {} below 8", self.resolution));
        }
        if self.mesh_resolution < 2 {
            return fail(format!("mesh_resolution {} below 2", self.mesh_resolution));
        }
        let reach = self.primitive.bounding_radius() + self.motion.max_offset();
        if reach >= 1.0 {
            return fail(format!(
                "solid plus motion reaches {reach:.3} units; it must stay inside the unit bound"
            ));
        }
        if self.orbit.radius <= 1.0 {
            return fail(format!(
                "orbit radius {:.3} places cameras inside the unit object bound",
                self.orbit.radius
            ));
        }
        if !(self.ambient >= 0.0 && self.ambient <= 1.0) {
            return fail(format!("ambient {} outside [0,1]", self.ambient));
        }
        if Vector3::from(self.light_dir).norm() < 1e-9 {
            return fail("light_dir must be nonzero".into());
        }
        if !(self.depth_scale > 0.0) || !(self.focal_ratio > 0.0) {
            return fail("depth_scale and focal_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let f = self.focal_ratio * self.resolution as f64;
        let c = self.resolution as f64 / 2.0;
        Intrinsics::new(f, f, c, c, self.resolution, self.resolution)
    }

    /// Signed distance of the deformed solid at world point `p`, time
    /// `t_norm`.
    pub fn sdf(&self, p: &Vector3<f64>, t_norm: f64) -> f64 {
        self.primitive.sdf(&(p - self.motion.offset(t_norm)))
    }

    /// Normalized frame time: frame `i` of `n` maps to `i/(n-1)` (0 when
    /// the sequence has a single frame).
    pub fn t_norm(&self, i: usize) -> f64 {
        if self.frames <= 1 {
            0.0
        } else {
            i as f64 / (self.frames - 1) as f64
        }
    }
}

/// Reads a [`SyntheticSceneSpec`] from a JSON file.
pub fn load_scene_spec(path: &Path) -> Result<SyntheticSceneSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let spec: SyntheticSceneSpec =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

const TRACE_EPS: f64 = 1e-9;
const TRACE_STEPS: usize = 512;
const NORMAL_EPS: f64 = 1e-6;

/// Renders one frame of the spec from `pose`: returns `(rgb, depth, mask)`
/// with z-depth in scene units.
fn render_synthetic_frame(
    spec: &SyntheticSceneSpec,
    pose: &RigidPose,
    intr: &Intrinsics,
    t_norm: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (intr.width, intr.height);
    let pixels: Vec<(f64, f64)> = (0..w * h)
        .map(|i| ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
        .collect();
    let rays = generate_rays(pose, intr, &pixels, 1.0);
    let light = Vector3::from(spec.light_dir).normalize();
    let axis = pose.viewing_axis();
    let offset = spec.motion.offset(t_norm);
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![0.0; w * h];
    for (i, ray) in rays.iter().enumerate() {
        if ray.far <= ray.near {
            continue;
        }
        let mut t = ray.near;
        let mut hit = false;
        for _ in 0..TRACE_STEPS {
            let p = ray.origin + ray.dir * t;
            let d = spec.sdf(&p, t_norm);
            if d < TRACE_EPS {
                hit = true;
                break;
            }
            t += d;
            if t > ray.far + 0.1 {
                break;
            }
        }
        if !hit {
            continue;
        }
        let p = ray.origin + ray.dir * t;
        let mut grad = Vector3::zeros();
        for a in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[a] += NORMAL_EPS;
            lo[a] -= NORMAL_EPS;
            grad[a] = (spec.sdf(&hi, t_norm) - spec.sdf(&lo, t_norm)) / (2.0 * NORMAL_EPS);
        }
        let normal = grad.normalize();
        let albedo = spec.albedo.color(&(p - offset));
        let shaded = shade_color(albedo, &normal, &light, spec.ambient);
        rgb[i * 3..i * 3 + 3].copy_from_slice(&shaded);
        depth[i] = (p - pose.translation).dot(&axis);
        mask[i] = 1.0;
    }
    (rgb, depth, mask)
}

/// Per-frame ground-truth displacement of the solid, saved as
/// `oracle.json`: a point on the frame-`t` surface corresponds to the
/// canonical point minus that frame's offset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformationOracle {
    pub offsets: Vec<[f64; 3]>,
}

impl DeformationOracle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Renders the spec into `dir`: the dataset itself (manifest + PNGs), the
/// scene description (`scene.json`), per-frame ground-truth meshes
/// (`gt/gt_%04d.ply`, vertices colored by albedo), and the displacement
/// oracle (`oracle.json`). Returns the in-memory dataset.
pub fn synth_generate(spec: &SyntheticSceneSpec, dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut offsets = Vec::with_capacity(spec.frames);
    let gt_dir = dir.join("gt");
    fs::create_dir_all(&gt_dir)?;
    for i in 0..spec.frames {
        let t_norm = spec.t_norm(i);
        let pose = spec.orbit.pose(i, spec.frames)?;
        let (rgb, depth, mask) = render_synthetic_frame(spec, &pose, &intr, t_norm);
        frames.push(Frame { rgb, depth, mask, pose, index: i });
        let offset = spec.motion.offset(t_norm);
        offsets.push([offset.x, offset.y, offset.z]);
        let mesh = gt_mesh(spec, t_norm)?;
        write_ply(&mesh, &gt_dir.join(format!("gt_{i:04}.ply")))?;
    }
    let dataset = Dataset { intrinsics: intr, depth_scale: spec.depth_scale, frames };
    save_dataset(&dataset, dir)?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(spec)?)?;
    fs::write(
        dir.join("oracle.json"),
        serde_json::to_string_pretty(&DeformationOracle { offsets })?,
    )?;
    Ok(dataset)
}

/// Ground-truth mesh of the deformed solid at `t_norm`, vertices colored
/// by the albedo of their canonical point.
pub fn gt_mesh(spec: &SyntheticSceneSpec, t_norm: f64) -> Result<TriangleMesh> {
    let mut field = |pts: &[f64]| {
        pts.chunks(3)
            .map(|p| spec.sdf(&Vector3::new(p[0], p[1], p[2]), t_norm))
            .collect()
    };
    let mut mesh = marching_zero_set(&mut field, spec.mesh_resolution, 1.0)?;
    let offset = spec.motion.offset(t_norm);
    let colors = mesh
        .vertices
        .iter()
        .map(|v| spec.albedo.color(&(Vector3::from(*v) - offset)))
        .collect();
    mesh.colors = Some(colors);
    Ok(mesh)
}

/// Keeps `project` in the public preprocessing story: the projected object
/// center after re-aiming is exactly the principal point, which the crop
/// then centers. Exposed for tests and diagnostics.
pub fn projected_center(pose: &RigidPose, intr: &Intrinsics) -> Option<(f64, f64)> {
    project(pose, intr, &Vector3::zeros())
}
