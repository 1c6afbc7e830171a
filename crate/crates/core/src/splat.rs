//! Anisotropic 3D Gaussians and a tile-based differentiable software
//! rasterizer producing alpha-blended color, depth and accumulated opacity.
//!
//! A Gaussian's footprint is truncated at Mahalanobis distance 3 in the
//! image plane. Tile binning uses the exact bounding box of that ellipse, so
//! the tiled renderer and a per-pixel full-sort renderer agree exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{
    Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector4,
};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{PinholeCamera, SE3Pose};
use crate::grid::{Grid, Image};

pub const NEAR_PLANE: f64 = 0.01;
pub const LOW_PASS: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of the footprint.
pub const CUTOFF_SQ: f64 = 9.0;
pub const TILE: usize = 16;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    /// Stable identity used to break depth ties.
    pub id: u64,
    pub position: Vector3<f64>,
    /// Raw quaternion `(w, x, y, z)`; normalized wherever it is used.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn isotropic(
        id: u64,
        position: Vector3<f64>,
        scale: f64,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        Self {
            id,
            position,
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let q = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_quaternion(&(self.rotation / self.rotation.norm()))
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scales().map(|s| s * s));
        r * s2 * r.transpose()
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_quaternion(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Inclusive pixel bounding box of the truncated footprint, clipped to
    /// the image.
    pub bbox: [usize; 4],
}

/// Weight `exp(-0.5 d^T conic d)` of a projected Gaussian at a pixel.
pub fn evaluate_gaussian(g: &ProjectedGaussian, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - g.mean2d;
    (-0.5 * (d.transpose() * g.conic * d)[(0, 0)]).exp()
}

/// Intermediate quantities of a projection kept for the backward pass.
#[derive(Clone, Copy, Debug)]
struct Projection {
    proj: ProjectedGaussian,
    t: Vector3<f64>,
    jac: Matrix2x3<f64>,
    /// Covariance in the camera frame.
    cov_cam: Matrix3<f64>,
}

fn world_to_camera(pose: &SE3Pose) -> (Matrix3<f64>, Vector3<f64>) {
    let inv = pose.inverse();
    (inv.rotation_matrix(), inv.translation)
}

fn project_impl(
    g: &Gaussian3D,
    w: &Matrix3<f64>,
    tw: &Vector3<f64>,
    camera: &PinholeCamera,
) -> Option<Projection> {
    let t = w * g.position + tw;
    if t.z <= NEAR_PLANE {
        return None;
    }
    let jac = camera.project_jacobian(&t);
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * LOW_PASS;
    let conic = cov2d.try_inverse()?;
    let mean2d = camera.project_unchecked(&t);
    let rx = 3.0 * cov2d[(0, 0)].sqrt();
    let ry = 3.0 * cov2d[(1, 1)].sqrt();
    let (x0, x1) = ((mean2d.x - rx).floor(), (mean2d.x + rx).ceil());
    let (y0, y1) = ((mean2d.y - ry).floor(), (mean2d.y + ry).ceil());
    let (wmax, hmax) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
    if !(x1 >= 0.0 && y1 >= 0.0 && x0 <= wmax && y0 <= hmax) {
        return None;
    }
    let bbox = [
        x0.max(0.0) as usize,
        x1.min(wmax) as usize,
        y0.max(0.0) as usize,
        y1.min(hmax) as usize,
    ];
    Some(Projection {
        proj: ProjectedGaussian {
            mean2d,
            cov2d,
            conic,
            depth: t.z,
            opacity: g.opacity(),
            color: g.color,
            bbox,
        },
        t,
        jac,
        cov_cam,
    })
}

/// Projects a Gaussian into a camera with camera-to-world `pose`. `None`
/// when it is behind the near plane or its footprint misses the image.
pub fn project_gaussian(
    g: &Gaussian3D,
    pose: &SE3Pose,
    camera: &PinholeCamera,
) -> Option<ProjectedGaussian> {
    let (w, tw) = world_to_camera(pose);
    project_impl(g, &w, &tw, camera).map(|p| p.proj)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub color: Image,
    pub depth: Grid<f64>,
    pub alpha: Grid<f64>,
}

struct Scene {
    projections: Vec<Projection>,
    /// Index into the input Gaussian slice for each projection.
    source: Vec<usize>,
    tiles_x: usize,
    /// Depth-sorted projection indices overlapping each tile.
    bins: Vec<Vec<usize>>,
}

fn prepare(gaussians: &[Gaussian3D], pose: &SE3Pose, camera: &PinholeCamera) -> Scene {
    let (w, tw) = world_to_camera(pose);
    let mut projected: Vec<(usize, Projection)> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_impl(g, &w, &tw, camera).map(|p| (i, p)))
        .collect();
    projected.sort_by(|(ia, a), (ib, b)| {
        a.proj
            .depth
            .total_cmp(&b.proj.depth)
            .then(gaussians[*ia].id.cmp(&gaussians[*ib].id))
            .then(ia.cmp(ib))
    });
    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, (_, p)) in projected.iter().enumerate() {
        let [x0, x1, y0, y1] = p.proj.bbox;
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                bins[ty * tiles_x + tx].push(k);
            }
        }
    }
    let (source, projections) = projected.into_iter().unzip();
    Scene {
        projections,
        source,
        tiles_x,
        bins,
    }
}

impl Scene {
    fn tile_pixels(
        &self,
        tile: usize,
        camera: &PinholeCamera,
    ) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let xs = tx * TILE..((tx + 1) * TILE).min(camera.width);
        let ys = ty * TILE..((ty + 1) * TILE).min(camera.height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

/// One Gaussian's contribution at a pixel during front-to-back blending.
#[derive(Clone, Copy, Debug)]
struct Sample {
    k: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    offset: Vector2<f64>,
    transmittance: f64,
}

/// Front-to-back blend at one pixel over the depth-sorted candidate list.
/// Calls `visit` for every contributing sample and returns the final
/// transmittance.
fn blend_pixel(
    scene: &Scene,
    candidates: &[usize],
    pixel: Vector2<f64>,
    mut visit: impl FnMut(&Sample, &ProjectedGaussian),
) -> f64 {
    let mut t = 1.0;
    for &k in candidates {
        let g = &scene.projections[k].proj;
        let d = pixel - g.mean2d;
        let maha = (d.transpose() * g.conic * d)[(0, 0)];
        if maha > CUTOFF_SQ {
            continue;
        }
        let gauss = (-0.5 * maha).exp();
        let raw = g.opacity * gauss;
        let alpha = raw.min(MAX_ALPHA);
        visit(
            &Sample {
                k,
                alpha,
                gauss,
                clamped: raw > MAX_ALPHA,
                offset: d,
                transmittance: t,
            },
            g,
        );
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    t
}

struct TileOutput {
    color: Vec<Vector3<f64>>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
}

/// Renders the Gaussians from a camera with camera-to-world `pose` over a
/// black background.
pub fn rasterize(
    gaussians: &[Gaussian3D],
    pose: &SE3Pose,
    camera: &PinholeCamera,
) -> RenderedFrame {
    let scene = prepare(gaussians, pose, camera);
    let tiles: Vec<TileOutput> = (0..scene.bins.len())
        .into_par_iter()
        .map(|tile| {
            let mut out = TileOutput {
                color: Vec::new(),
                depth: Vec::new(),
                alpha: Vec::new(),
            };
            for (x, y) in scene.tile_pixels(tile, camera) {
                let mut c = Vector3::zeros();
                let mut z = 0.0;
                let t = blend_pixel(
                    &scene,
                    &scene.bins[tile],
                    Vector2::new(x as f64, y as f64),
                    |s, g| {
                        let w = s.alpha * s.transmittance;
                        c += g.color * w;
                        z += g.depth * w;
                    },
                );
                out.color.push(c);
                out.depth.push(z);
                out.alpha.push(1.0 - t);
            }
            out
        })
        .collect();
    let (w, h) = (camera.width, camera.height);
    let mut frame = RenderedFrame {
        color: Grid::new(w, h, Vector3::zeros()),
        depth: Grid::new(w, h, 0.0),
        alpha: Grid::new(w, h, 0.0),
    };
    for (tile, out) in tiles.iter().enumerate() {
        for (n, (x, y)) in scene.tile_pixels(tile, camera).enumerate() {
            frame.color[(x, y)] = out.color[n];
            frame.depth[(x, y)] = out.depth[n];
            frame.alpha[(x, y)] = out.alpha[n];
        }
    }
    frame
}

/// Largest blending weight `alpha * T` each Gaussian reaches on any pixel of
/// the view; zero for Gaussians that never contribute.
pub fn max_contributions(
    gaussians: &[Gaussian3D],
    pose: &SE3Pose,
    camera: &PinholeCamera,
) -> Vec<f64> {
    let scene = prepare(gaussians, pose, camera);
    let per_tile: Vec<Vec<(usize, f64)>> = (0..scene.bins.len())
        .into_par_iter()
        .map(|tile| {
            let mut best = vec![0.0; scene.bins[tile].len()];
            let local: std::collections::BTreeMap<usize, usize> = scene.bins[tile]
                .iter()
                .enumerate()
                .map(|(i, &k)| (k, i))
                .collect();
            for (x, y) in scene.tile_pixels(tile, camera) {
                blend_pixel(
                    &scene,
                    &scene.bins[tile],
                    Vector2::new(x as f64, y as f64),
                    |s, _| {
                        let slot = &mut best[local[&s.k]];
                        *slot = f64::max(*slot, s.alpha * s.transmittance);
                    },
                );
            }
            scene.bins[tile].iter().copied().zip(best).collect()
        })
        .collect();
    let mut out = vec![0.0; gaussians.len()];
    for tile in per_tile {
        for (k, v) in tile {
            let slot = &mut out[scene.source[k]];
            *slot = f64::max(*slot, v);
        }
    }
    out
}

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    /// With respect to the raw (unnormalized) quaternion `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
    /// With respect to the projected mean in pixels.
    pub mean2d: Vector2<f64>,
}

impl Default for GaussianGrad {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Vector4::zeros(),
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
            mean2d: Vector2::zeros(),
        }
    }
}

/// Image-space gradient of one projected Gaussian.
#[derive(Clone, Copy, Debug)]
struct ScreenGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl ScreenGrad {
    fn zero() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            opacity: 0.0,
            color: Vector3::zeros(),
            depth: 0.0,
        }
    }

    fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// Gradients of `sum(grad_color . color) + sum(grad_depth * depth)` with
/// respect to every Gaussian, in input order. Culled Gaussians get zero.
pub fn rasterize_backward(
    gaussians: &[Gaussian3D],
    pose: &SE3Pose,
    camera: &PinholeCamera,
    grad_color: &Image,
    grad_depth: &Grid<f64>,
) -> Vec<GaussianGrad> {
    let scene = prepare(gaussians, pose, camera);
    let per_tile: Vec<Vec<ScreenGrad>> = (0..scene.bins.len())
        .into_par_iter()
        .map(|tile| {
            let bin = &scene.bins[tile];
            let local: std::collections::BTreeMap<usize, usize> =
                bin.iter().enumerate().map(|(i, &k)| (k, i)).collect();
            let mut acc = vec![ScreenGrad::zero(); bin.len()];
            let mut samples: Vec<Sample> = Vec::new();
            for (x, y) in scene.tile_pixels(tile, camera) {
                let gc = grad_color[(x, y)];
                let gd = grad_depth[(x, y)];
                if gc == Vector3::zeros() && gd == 0.0 {
                    continue;
                }
                samples.clear();
                blend_pixel(&scene, bin, Vector2::new(x as f64, y as f64), |s, _| {
                    samples.push(*s)
                });
                // `behind` is the loss weight of everything blended after the
                // current sample, relative to the transmittance just past it.
                let mut behind = 0.0;
                for s in samples.iter().rev() {
                    let g = &scene.projections[s.k].proj;
                    let own = g.color.dot(&gc) + g.depth * gd;
                    let d_alpha = s.transmittance * (own - behind);
                    behind = own * s.alpha + (1.0 - s.alpha) * behind;
                    let slot = &mut acc[local[&s.k]];
                    let w = s.alpha * s.transmittance;
                    slot.color += gc * w;
                    slot.depth += gd * w;
                    if s.clamped {
                        continue;
                    }
                    slot.opacity += d_alpha * s.gauss;
                    let d_gauss = d_alpha * g.opacity;
                    // gauss = exp(-0.5 d^T A d), d = pixel - mean.
                    let ad = g.conic * s.offset;
                    slot.mean2d += ad * (d_gauss * s.gauss);
                    slot.conic += s.offset * s.offset.transpose() * (-0.5 * d_gauss * s.gauss);
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![ScreenGrad::zero(); scene.projections.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (i, &k) in scene.bins[tile].iter().enumerate() {
            screen[k].add(&acc[i]);
        }
    }
    let (w, _) = world_to_camera(pose);
    let chained: Vec<(usize, GaussianGrad)> = screen
        .par_iter()
        .enumerate()
        .map(|(k, sg)| {
            let src = scene.source[k];
            (
                src,
                chain_projection(&gaussians[src], &scene.projections[k], &w, camera, sg),
            )
        })
        .collect();
    let mut out = vec![GaussianGrad::default(); gaussians.len()];
    for (src, g) in chained {
        out[src] = g;
    }
    out
}

/// Pushes image-space gradients back to the Gaussian parameters.
fn chain_projection(
    g: &Gaussian3D,
    p: &Projection,
    w: &Matrix3<f64>,
    camera: &PinholeCamera,
    sg: &ScreenGrad,
) -> GaussianGrad {
    let conic = p.proj.conic;
    // Sigma' = A^-1, so dL/dSigma' = -A^T G_A A^T.
    let g_cov2d = -conic * sg.conic * conic;
    let g_cov2d = (g_cov2d + g_cov2d.transpose()) * 0.5;
    let jac = p.jac;
    let g_cov_cam = jac.transpose() * g_cov2d * jac;
    let g_jac = g_cov2d * jac * p.cov_cam * 2.0;
    let g_cov_world = w.transpose() * g_cov_cam * w;

    let t = p.t;
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = jac.transpose() * sg.mean2d;
    g_t.x += g_jac[(0, 2)] * (-fx * iz2);
    g_t.y += g_jac[(1, 2)] * (-fy * iz2);
    g_t.z += g_jac[(0, 0)] * (-fx * iz2)
        + g_jac[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_jac[(1, 1)] * (-fy * iz2)
        + g_jac[(1, 2)] * (2.0 * fy * t.y * iz3)
        + sg.depth;
    let position = w.transpose() * g_t;

    let qn = g.rotation.norm();
    let q = g.rotation / qn;
    let r = rotation_from_quaternion(&q);
    let s = g.scales();
    let s2 = Matrix3::from_diagonal(&s.map(|v| v * v));
    let g_r = g_cov_world * r * s2 * 2.0;
    let log_scale = Vector3::from_fn(|k, _| {
        let col = r.column(k);
        2.0 * s[k] * s[k] * (col.transpose() * g_cov_world * col)[(0, 0)]
    });
    let g_q = quaternion_grad(&q, &g_r);
    let rotation = (g_q - q * q.dot(&g_q)) / qn;

    let o = p.proj.opacity;
    GaussianGrad {
        position,
        rotation,
        log_scale,
        opacity_logit: sg.opacity * o * (1.0 - o),
        color: sg.color,
        mean2d: sg.mean2d,
    }
}

/// Gradient with respect to a unit quaternion `(w, x, y, z)` given the
/// gradient with respect to its rotation matrix.
fn quaternion_grad(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    Vector4::new(g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz))
}

#[derive(Debug, Error)]
pub enum SplatIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
}

const RECORD_FLOATS: usize = 14;

/// Writes Gaussians as `IGS1 <count>\n` followed by 14 little-endian `f32`
/// per record: position, rotation `(w, x, y, z)`, log-scale, opacity logit,
/// color.
pub fn write_gaussians(mut out: impl Write, gaussians: &[Gaussian3D]) -> std::io::Result<()> {
    writeln!(out, "IGS1 {}", gaussians.len())?;
    let mut buf = Vec::with_capacity(gaussians.len() * RECORD_FLOATS * 4);
    for g in gaussians {
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
}

/// Reads the format of [`write_gaussians`]. Ids are assigned in file order.
pub fn read_gaussians(input: impl Read) -> Result<Vec<Gaussian3D>, SplatIoError> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let count: usize = header
        .trim_end()
        .strip_prefix("IGS1 ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| SplatIoError::Header(header.trim_end().to_string()))?;
    let mut bytes = vec![0u8; count * RECORD_FLOATS * 4];
    reader.read_exact(&mut bytes)?;
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(floats
        .chunks_exact(RECORD_FLOATS)
        .enumerate()
        .map(|(i, r)| Gaussian3D {
            id: i as u64,
            position: Vector3::new(r[0], r[1], r[2]),
            rotation: Vector4::new(r[3], r[4], r[5], r[6]),
            log_scale: Vector3::new(r[7], r[8], r[9]),
            opacity_logit: r[10],
            color: Vector3::new(r[11], r[12], r[13]),
        })
        .collect())
}

pub fn save_gaussians(path: &Path, gaussians: &[Gaussian3D]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_gaussians(&mut w, gaussians)?;
    w.flush()
}

pub fn load_gaussians(path: &Path) -> Result<Vec<Gaussian3D>, SplatIoError> {
    read_gaussians(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn camera() -> PinholeCamera {
        PinholeCamera::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap()
    }

    fn projected(mean: Vector2<f64>, cov: Matrix2<f64>, opacity: f64) -> ProjectedGaussian {
        ProjectedGaussian {
            mean2d: mean,
            cov2d: cov,
            conic: cov.try_inverse().unwrap(),
            depth: 1.0,
            opacity,
            color: Vector3::zeros(),
            bbox: [0, 0, 0, 0],
        }
    }

    #[test]
    fn gaussian_weights() {
        let g = projected(Vector2::new(3.0, 4.0), Matrix2::identity(), 1.0);
        assert_eq!(evaluate_gaussian(&g, &Vector2::new(3.0, 4.0)), 1.0);
        assert!((evaluate_gaussian(&g, &Vector2::new(4.0, 4.0)) - (-0.5f64).exp()).abs() < 1e-15);
        let a = projected(Vector2::zeros(), Matrix2::new(4.0, 0.0, 0.0, 1.0), 1.0);
        assert!((evaluate_gaussian(&a, &Vector2::new(6.0, 0.0)) - (-4.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn on_axis_projection_is_isotropic_and_near_plane_culls() {
        let cam = camera();
        let g = Gaussian3D::isotropic(0, Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, Vector3::zeros());
        let p = project_gaussian(&g, &SE3Pose::identity(), &cam).unwrap();
        assert!((p.mean2d - Vector2::new(cam.cx, cam.cy)).norm() < 1e-12);
        assert!((p.cov2d[(0, 0)] - p.cov2d[(1, 1)]).abs() < 1e-12 && p.cov2d[(0, 1)].abs() < 1e-12);
        let near =
            Gaussian3D::isotropic(0, Vector3::new(0.0, 0.0, 0.01), 0.1, 0.5, Vector3::zeros());
        assert!(project_gaussian(&near, &SE3Pose::identity(), &cam).is_none());
        let far_off =
            Gaussian3D::isotropic(0, Vector3::new(50.0, 0.0, 1.0), 0.01, 0.5, Vector3::zeros());
        assert!(project_gaussian(&far_off, &SE3Pose::identity(), &cam).is_none());
    }

    #[test]
    fn projected_covariance_matches_monte_carlo() {
        let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let mut g =
            Gaussian3D::isotropic(0, Vector3::new(0.3, -0.2, 8.0), 1.0, 0.5, Vector3::zeros());
        g.log_scale = Vector3::new(0.02f64.ln(), 0.05f64.ln(), 0.03f64.ln());
        g.rotation = Vector4::new(0.9, 0.2, -0.3, 0.1);
        let p = project_gaussian(&g, &SE3Pose::identity(), &cam).unwrap();
        let l = g.covariance().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Vector2<f64>> = (0..10_000)
            .map(|_| {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                cam.project_unchecked(&(g.position + l * z))
            })
            .collect();
        let mean = samples.iter().sum::<Vector2<f64>>() / samples.len() as f64;
        let cov = samples
            .iter()
            .map(|s| (s - mean) * (s - mean).transpose())
            .sum::<Matrix2<f64>>()
            / (samples.len() - 1) as f64;
        let analytic = p.cov2d - Matrix2::identity() * LOW_PASS;
        assert!((cov - analytic).norm() / analytic.norm() < 0.05);
    }

    #[test]
    fn opaque_gaussian_reproduces_color_and_depth() {
        let cam = camera();
        let mut g = Gaussian3D::isotropic(
            0,
            Vector3::new(0.0, 0.0, 2.0),
            0.2,
            0.5,
            Vector3::new(0.2, 0.4, 0.6),
        );
        g.opacity_logit = 30.0;
        let f = rasterize(&[g.clone()], &SE3Pose::identity(), &cam);
        // cx = 15.5 puts the mean between pixels; sample the nearest one.
        let c = f.color[(15, 15)];
        let a = f.alpha[(15, 15)];
        assert!((c / a - g.color).norm() < 1e-12);
        assert!((f.depth[(15, 15)] / a - 2.0).abs() < 1e-12);
        assert!(a > 0.98);
    }

    #[test]
    fn two_coincident_half_opaque_gaussians_blend() {
        let cam = PinholeCamera::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let c1 = Vector3::new(1.0, 0.0, 0.0);
        let c2 = Vector3::new(0.0, 1.0, 0.0);
        let a = Gaussian3D::isotropic(0, Vector3::new(0.0, 0.0, 2.0), 0.2, 0.5, c1);
        let b = Gaussian3D::isotropic(1, Vector3::new(0.0, 0.0, 2.0), 0.2, 0.5, c2);
        let f = rasterize(&[a.clone(), b.clone()], &SE3Pose::identity(), &cam);
        assert!((f.color[(16, 16)] - (c1 * 0.5 + c2 * 0.25)).norm() < 1e-12);
        let mut a2 = a.clone();
        a2.position.z = 2.0 + 1e-9;
        let mut b2 = b.clone();
        b2.position.z = 2.0 - 1e-9;
        let f2 = rasterize(&[a2, b2], &SE3Pose::identity(), &cam);
        assert!((f2.color[(16, 16)] - (c2 * 0.5 + c1 * 0.25)).norm() < 1e-6);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian3D> {
        (0..n)
            .map(|i| Gaussian3D {
                id: i as u64,
                position: Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(1.5..3.0),
                ),
                rotation: Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                log_scale: Vector3::from_fn(|_, _| rng.random_range(-3.0..-1.5)),
                opacity_logit: rng.random_range(-2.0..2.0),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn permutation_invariance_and_alpha_bounds() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut rng, 40);
        let f = rasterize(&scene, &SE3Pose::identity(), &cam);
        let mut rev = scene.clone();
        rev.reverse();
        assert_eq!(rasterize(&rev, &SE3Pose::identity(), &cam), f);
        assert!(f.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 5);
        let grads = rasterize_backward(
            &scene,
            &SE3Pose::identity(),
            &cam,
            &Grid::new(32, 32, Vector3::zeros()),
            &Grid::new(32, 32, 0.0),
        );
        assert!(grads.iter().all(|g| *g == GaussianGrad::default()));
    }

    #[test]
    fn frontmost_color_gradient_equals_upstream() {
        let cam = PinholeCamera::new(40.0, 40.0, 16.0, 16.0, 32, 32).unwrap();
        let mut g =
            Gaussian3D::isotropic(0, Vector3::new(0.0, 0.0, 2.0), 0.05, 0.5, Vector3::zeros());
        g.opacity_logit = 30.0;
        let mut gc = Grid::new(32, 32, Vector3::zeros());
        gc[(16, 16)] = Vector3::new(0.3, -0.2, 0.7);
        let grads = rasterize_backward(
            &[g],
            &SE3Pose::identity(),
            &cam,
            &gc,
            &Grid::new(32, 32, 0.0),
        );
        assert!((grads[0].color - gc[(16, 16)] * MAX_ALPHA).norm() < 1e-15);
    }

    #[test]
    fn single_gaussian_gradients_match_finite_differences() {
        let cam = camera();
        let pose = SE3Pose::look_at(
            Vector3::new(0.2, -0.1, -0.3),
            Vector3::new(0.0, 0.0, 2.0),
            -Vector3::y(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = random_scene(&mut rng, 1).remove(0);
        g.log_scale = Vector3::new(-1.6, -1.9, -2.2);
        g.opacity_logit = 0.3;
        let gc = Grid::from_fn(32, 32, |x, y| {
            Vector3::new((x as f64 * 0.3).sin(), (y as f64 * 0.2).cos(), 0.5)
        });
        let gd = Grid::from_fn(32, 32, |x, y| 0.1 * ((x + 2 * y) as f64 * 0.1).sin());
        let loss = |g: &Gaussian3D| {
            let f = rasterize(std::slice::from_ref(g), &pose, &cam);
            let mut l = 0.0;
            for y in 0..32 {
                for x in 0..32 {
                    l += f.color[(x, y)].dot(&gc[(x, y)]) + f.depth[(x, y)] * gd[(x, y)];
                }
            }
            l
        };
        let grad = rasterize_backward(std::slice::from_ref(&g), &pose, &cam, &gc, &gd)[0];
        let h = 1e-6;
        let check = |name: &str, analytic: f64, perturb: &dyn Fn(&mut Gaussian3D, f64)| {
            let mut a = g.clone();
            perturb(&mut a, h);
            let mut b = g.clone();
            perturb(&mut b, -h);
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let err = (analytic - fd).abs() / fd.abs().max(1e-6);
            assert!(err < 1e-4, "{name}: analytic {analytic} vs fd {fd}");
        };
        for k in 0..3 {
            check("position", grad.position[k], &|g, h| g.position[k] += h);
            check("log_scale", grad.log_scale[k], &|g, h| g.log_scale[k] += h);
            check("color", grad.color[k], &|g, h| g.color[k] += h);
        }
        for k in 0..4 {
            check("rotation", grad.rotation[k], &|g, h| g.rotation[k] += h);
        }
        check("opacity", grad.opacity_logit, &|g, h| g.opacity_logit += h);
    }

    #[test]
    fn file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = random_scene(&mut rng, 7);
        let mut buf = Vec::new();
        write_gaussians(&mut buf, &scene).unwrap();
        assert!(buf.starts_with(b"IGS1 7\n"));
        assert_eq!(buf.len(), 7 + 7 * 14 * 4);
        let back = read_gaussians(buf.as_slice()).unwrap();
        for (a, b) in scene.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(b.position.map(|v| v as f32 as f64), b.position);
            assert!((a.position - b.position).norm() < 1e-6);
            assert!((a.color - b.color).norm() < 1e-6);
        }
        assert!(read_gaussians(&b"IGS2 1\n"[..]).is_err());
    }
}
