//! Synthetic scenes with exact ground truth: a textured box traced
//! analytically, or a random Gaussian cloud rendered by the splat rasterizer.

use nalgebra::{Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetFrame};
use crate::geometry::{PinholeCamera, SE3Pose};
use crate::grid::{Grid, Image};
use crate::splat::{logit, rasterize, Gaussian3D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SceneGeometry {
    /// Axis-aligned box centered at the origin.
    Box { size: [f64; 3] },
    /// Random Gaussians inside a cube of half-width `extent`.
    Gaussians { count: usize, extent: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// Arc of `arc_deg` degrees around the vertical axis, looking at the
    /// origin.
    Orbit {
        radius: f64,
        height: f64,
        arc_deg: f64,
    },
    /// Straight segment, looking at the origin.
    Line { start: [f64; 3], end: [f64; 3] },
    /// Full circle whose last pose equals its first.
    Loop { radius: f64, height: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub geometry: SceneGeometry,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub frame_rate: f64,
    /// Samples per pixel along each axis for box color.
    pub supersample: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            geometry: SceneGeometry::Box {
                size: [1.0, 1.0, 1.0],
            },
            trajectory: Trajectory::Orbit {
                radius: 2.0,
                height: -0.6,
                arc_deg: 120.0,
            },
            frames: 60,
            width: 128,
            height: 96,
            focal_px: 110.0,
            frame_rate: 30.0,
            supersample: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSpec(m));
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.width < 2 || self.height < 2 {
            return bad(format!(
                "image size {}x{} too small",
                self.width, self.height
            ));
        }
        if !(self.focal_px > 0.0 && self.frame_rate > 0.0) {
            return bad("focal_px and frame_rate must be positive".into());
        }
        if self.supersample == 0 {
            return bad("supersample must be positive".into());
        }
        match &self.geometry {
            SceneGeometry::Box { size } if size.iter().any(|s| !(*s > 0.0)) => {
                return bad(format!("box size {size:?} must be positive"));
            }
            SceneGeometry::Gaussians { count, extent } if *count == 0 || !(*extent > 0.0) => {
                return bad("gaussian count and extent must be positive".into());
            }
            _ => {}
        }
        match &self.trajectory {
            Trajectory::Orbit { radius, .. } | Trajectory::Loop { radius, .. }
                if !(*radius > 0.0) =>
            {
                bad("radius must be positive".into())
            }
            Trajectory::Line { start, end } if start == end => bad("line start equals end".into()),
            _ => Ok(()),
        }
    }

    pub fn camera(&self) -> PinholeCamera {
        PinholeCamera {
            fx: self.focal_px,
            fy: self.focal_px,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    pub fn poses(&self) -> Vec<SE3Pose> {
        let up = Vector3::new(0.0, -1.0, 0.0);
        let n = self.frames;
        let frac = |k: usize, denom: usize| {
            if denom == 0 {
                0.0
            } else {
                k as f64 / denom as f64
            }
        };
        (0..n)
            .map(|k| {
                let eye = match &self.trajectory {
                    Trajectory::Orbit {
                        radius,
                        height,
                        arc_deg,
                    } => {
                        let a = arc_deg.to_radians() * frac(k, n - 1);
                        Vector3::new(radius * a.sin(), *height, -radius * a.cos())
                    }
                    Trajectory::Loop { radius, height } => {
                        let a = std::f64::consts::TAU * frac(k, n - 1);
                        Vector3::new(radius * a.sin(), *height, -radius * a.cos())
                    }
                    Trajectory::Line { start, end } => {
                        let t = frac(k, n - 1);
                        Vector3::from(*start) * (1.0 - t) + Vector3::from(*end) * t
                    }
                };
                SE3Pose::look_at(eye, Vector3::zeros(), up)
            })
            .collect()
    }
}

/// Smooth per-face color pattern with phases drawn from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxTexture {
    base: [Vector3<f64>; 6],
    phase: [Vector3<f64>; 6],
    frequency: f64,
}

impl BoxTexture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = [Vector3::zeros(); 6];
        let mut phase = [Vector3::zeros(); 6];
        for f in 0..6 {
            base[f] = Vector3::from_fn(|_, _| rng.random_range(0.3..0.7));
            phase[f] = Vector3::from_fn(|_, _| rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self {
            base,
            phase,
            frequency: 2.0 * std::f64::consts::PI * 1.2,
        }
    }

    /// Color at a surface point of face `face` (`axis * 2 + (positive as usize)`).
    pub fn color(&self, face: usize, p: &Vector3<f64>) -> Vector3<f64> {
        let (u, v) = match face / 2 {
            0 => (p.y, p.z),
            1 => (p.x, p.z),
            _ => (p.x, p.y),
        };
        let w = self.frequency;
        let ph = self.phase[face];
        let b = self.base[face];
        Vector3::new(
            b.x + 0.25 * (w * u + ph.x).sin(),
            b.y + 0.25 * (w * v + ph.y).sin(),
            b.z + 0.2 * (w * (u + v) * 0.7 + ph.z).sin(),
        )
        .map(|c| c.clamp(0.0, 1.0))
    }
}

/// First intersection of a ray with an origin-centered box: distance along
/// `dir` and face index, or `None` on a miss.
pub fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    half: &Vector3<f64>,
) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut face = 0;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t0 = (-half[a] - origin[a]) / dir[a];
        let t1 = (half[a] - origin[a]) / dir[a];
        let (lo, hi, positive) = if t0 < t1 {
            (t0, t1, false)
        } else {
            (t1, t0, true)
        };
        if lo > t_near {
            t_near = lo;
            face = a * 2 + positive as usize;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, face))
}

/// Supersampled color and pixel-center depth of a box view. Background is
/// black with depth 0.
pub fn render_box(
    size: &[f64; 3],
    texture: &BoxTexture,
    pose: &SE3Pose,
    camera: &PinholeCamera,
    supersample: usize,
) -> (Image, Grid<f64>) {
    let half = Vector3::from(*size) / 2.0;
    let r = pose.rotation_matrix();
    let eye = pose.center();
    let trace = |x: f64, y: f64| {
        let ray = camera.ray(&Vector2::new(x, y));
        let dir = r * ray;
        ray_box(&eye, &dir, &half).map(|(t, face)| (t, face, eye + dir * t))
    };
    let n = supersample as f64;
    let image = Grid::from_fn(camera.width, camera.height, |x, y| {
        let mut acc = Vector3::zeros();
        for sy in 0..supersample {
            for sx in 0..supersample {
                let ox = (sx as f64 + 0.5) / n - 0.5;
                let oy = (sy as f64 + 0.5) / n - 0.5;
                if let Some((_, face, p)) = trace(x as f64 + ox, y as f64 + oy) {
                    acc += texture.color(face, &p);
                }
            }
        }
        quantize(&(acc / (n * n)))
    });
    let depth = Grid::from_fn(camera.width, camera.height, |x, y| {
        trace(x as f64, y as f64).map_or(0.0, |(t, _, _)| t)
    });
    (image, depth)
}

/// Rounds each channel to the nearest multiple of 1/255.
pub fn quantize(c: &Vector3<f64>) -> Vector3<f64> {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Rendered accumulated opacity above which a Gaussian-scene pixel carries
/// ground-truth depth.
pub const GAUSSIAN_DEPTH_ALPHA: f64 = 0.5;

/// Random Gaussian cloud with opacities in `[0.5, 0.95]`.
pub fn random_gaussians(count: usize, extent: f64, seed: u64) -> Vec<Gaussian3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|id| {
            let q: Vector4<f64> = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            Gaussian3D {
                id: id as u64,
                position: Vector3::from_fn(|_, _| rng.random_range(-extent..extent)),
                rotation: q / q.norm().max(1e-9),
                log_scale: Vector3::from_fn(|_, _| (extent * rng.random_range(0.05..0.2)).ln()),
                opacity_logit: logit(rng.random_range(0.5..0.95)),
                color: Vector3::from_fn(|_, _| rng.random_range(0.1..0.9)),
            }
        })
        .collect()
}

/// Thin, nearly opaque Gaussians tiling the box surface at roughly
/// `spacing`, colored by `texture`.
pub fn box_surface_gaussians(
    size: &[f64; 3],
    texture: &BoxTexture,
    spacing: f64,
) -> Vec<Gaussian3D> {
    let half = Vector3::from(*size) / 2.0;
    let mut out = Vec::new();
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let na = (size[a] / spacing).ceil().max(1.0) as usize;
        let nb = (size[b] / spacing).ceil().max(1.0) as usize;
        for positive in [false, true] {
            let face = axis * 2 + positive as usize;
            for i in 0..na {
                for j in 0..nb {
                    let mut p = Vector3::zeros();
                    p[axis] = if positive { half[axis] } else { -half[axis] };
                    p[a] = -half[a] + size[a] * (i as f64 + 0.5) / na as f64;
                    p[b] = -half[b] + size[b] * (j as f64 + 0.5) / nb as f64;
                    let mut log_scale = Vector3::repeat((0.6 * spacing).ln());
                    log_scale[axis] = (1e-3 * spacing).ln();
                    out.push(Gaussian3D {
                        id: out.len() as u64,
                        position: p,
                        rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                        log_scale,
                        opacity_logit: logit(0.99),
                        color: texture.color(face, &p),
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub dataset: Dataset,
    /// Ground-truth Gaussians for Gaussian scenes; empty for boxes.
    pub gaussians: Vec<Gaussian3D>,
}

/// Renders every frame of `spec` with ground-truth pose and depth.
/// Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, SceneError> {
    spec.validate()?;
    let camera = spec.camera();
    camera
        .validate()
        .map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
    let poses = spec.poses();
    let (frames, gaussians) = match &spec.geometry {
        SceneGeometry::Box { size } => {
            let texture = BoxTexture::new(seed);
            let frames = poses
                .iter()
                .enumerate()
                .map(|(k, pose)| {
                    let (image, depth) =
                        render_box(size, &texture, pose, &camera, spec.supersample);
                    DatasetFrame {
                        timestamp: k as f64 / spec.frame_rate,
                        image,
                        pose: Some(*pose),
                        depth: Some(depth),
                    }
                })
                .collect();
            (frames, Vec::new())
        }
        SceneGeometry::Gaussians { count, extent } => {
            let gaussians = random_gaussians(*count, *extent, seed);
            let frames = poses
                .iter()
                .enumerate()
                .map(|(k, pose)| {
                    let r = rasterize(&gaussians, pose, &camera);
                    let depth = Grid::from_fn(camera.width, camera.height, |x, y| {
                        let a = r.alpha[(x, y)];
                        if a > GAUSSIAN_DEPTH_ALPHA {
                            r.depth[(x, y)] / a
                        } else {
                            0.0
                        }
                    });
                    DatasetFrame {
                        timestamp: k as f64 / spec.frame_rate,
                        image: r.color.map(quantize),
                        pose: Some(*pose),
                        depth: Some(depth),
                    }
                })
                .collect();
            (frames, gaussians)
        }
    };
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        dataset: Dataset { camera, frames },
        gaussians,
    })
}
