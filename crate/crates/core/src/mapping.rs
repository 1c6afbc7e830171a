//! Incremental Gaussian map optimization over a sliding keyframe window.
//!
//! Each accepted keyframe triggers a coarse-to-fine cycle over an image
//! pyramid. At the start of every level new Gaussians are seeded from the
//! newest keyframe where its depth is confident, then window keyframes are
//! rendered round-robin and fitted with an L1 color term plus an L1 depth
//! term weighted by inverse depth variance.

use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_graph::KeyframeId;
use crate::geometry::{PinholeCamera, SE3Pose};
use crate::grid::{scaled_dim, Grid, Image};
use crate::splat::{
    max_contributions, rasterize, rasterize_backward, Gaussian3D, GaussianGrad, RenderedFrame,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("pyramid level {level} has degenerate size {width}x{height}")]
    DegenerateLevel {
        level: usize,
        width: usize,
        height: usize,
    },
    #[error("no valid pixels to seed from")]
    EmptyMask,
    #[error("invalid mapping configuration: {0}")]
    InvalidConfig(String),
    #[error("packet grids disagree: {0}")]
    DimensionMismatch(String),
}

/// Tracking output handed to mapping for one keyframe. Depth is metric
/// (0 marks pixels without depth) and `covariance` is its variance.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframePacket {
    pub keyframe_id: KeyframeId,
    pub image: Image,
    pub depth: Grid<f64>,
    pub covariance: Grid<f64>,
    pub pose: SE3Pose,
}

impl KeyframePacket {
    pub fn validate(&self) -> Result<(), MappingError> {
        if !self.image.same_dims(&self.depth) || !self.image.same_dims(&self.covariance) {
            return Err(MappingError::DimensionMismatch(format!(
                "image {:?}, depth {:?}, covariance {:?}",
                self.image.dims(),
                self.depth.dims(),
                self.covariance.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthLoss {
    /// Absolute depth error divided by the depth variance.
    Weighted,
    /// Absolute depth error.
    Raw,
    /// Color only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub downsample: f64,
    pub levels: usize,
    pub seed_stride: usize,
    pub loss_mix: f64,
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    /// Decay length of the position learning rate, counted in updates of
    /// each Gaussian since its creation.
    pub lr_decay_iterations: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub window: usize,
    pub iterations_per_keyframe: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    /// Gaussians whose largest axis exceeds this fraction of the scene
    /// extent are removed at the densification cadence; 0 disables.
    pub prune_max_scale_ratio: f64,
    pub post_iterations: usize,
    pub mask_threshold: f64,
    pub filter_kernel: usize,
    pub depth_loss: DepthLoss,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            downsample: 0.8,
            levels: 3,
            seed_stride: 128,
            loss_mix: 0.5,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_decay_iterations: 3000.0,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            window: 8,
            iterations_per_keyframe: 60,
            densify_interval: 150,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.1,
            prune_max_scale_ratio: 0.1,
            post_iterations: 0,
            mask_threshold: 0.2,
            filter_kernel: 32,
            depth_loss: DepthLoss::Weighted,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: &str| Err(MappingError::InvalidConfig(m.to_string()));
        if !(self.downsample > 0.0 && self.downsample < 1.0) {
            return bad("downsample must lie in (0, 1)");
        }
        if self.levels == 0 {
            return bad("levels must be at least 1");
        }
        if !(self.loss_mix > 0.0 && self.loss_mix <= 1.0) {
            return bad("loss_mix must lie in (0, 1]");
        }
        if !(self.lr_position_final <= self.lr_position_init && self.lr_position_final > 0.0) {
            return bad("need 0 < lr_position_final <= lr_position_init");
        }
        if !(self.lr_decay_iterations > 0.0) {
            return bad("lr_decay_iterations must be positive");
        }
        if !(self.prune_max_scale_ratio >= 0.0) {
            return bad("prune_max_scale_ratio must be non-negative");
        }
        if self.seed_stride == 0
            || self.window == 0
            || self.densify_interval == 0
            || self.filter_kernel == 0
        {
            return bad("seed_stride, window, densify_interval and filter_kernel must be positive");
        }
        Ok(())
    }
}

/// Log-linear interpolation from `lr_init` to `lr_final` over `tau`
/// iterations, constant afterwards.
pub fn lr_schedule(n: f64, lr_init: f64, lr_final: f64, tau: f64) -> f64 {
    let t = (n / tau).clamp(0.0, 1.0);
    ((1.0 - t) * lr_init.ln() + t * lr_final.ln()).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub level: usize,
    pub image: Image,
    pub depth: Grid<f64>,
    pub covariance: Grid<f64>,
    pub camera: PinholeCamera,
}

/// Resamples depth using only taps with valid depth; a pixel stays valid
/// when at least half of its bilinear weight is valid. Variance blends the
/// same valid taps where depth is valid and all taps elsewhere.
fn resample_depth(
    depth: &Grid<f64>,
    cov: &Grid<f64>,
    w: usize,
    h: usize,
    scale: f64,
) -> (Grid<f64>, Grid<f64>) {
    let mut d_out = Grid::new(w, h, 0.0);
    let mut c_out = Grid::new(w, h, 0.0);
    let paired = Grid::from_fn(depth.width(), depth.height(), |x, y| {
        Vector2::new(depth[(x, y)], cov[(x, y)])
    });
    for y in 0..h {
        for x in 0..w {
            let sx = crate::grid::source_coord(x, scale);
            let sy = crate::grid::source_coord(y, scale);
            let (v, mass) = paired.sample_bilinear_masked(sx, sy, |v| v.x > 0.0);
            if mass >= 0.5 {
                d_out[(x, y)] = v.x;
                c_out[(x, y)] = v.y;
            } else {
                c_out[(x, y)] = cov.sample_bilinear(sx, sy);
            }
        }
    }
    (d_out, c_out)
}

/// Level `l` is the packet resampled by `downsample^l`; level 0 is an exact
/// copy.
pub fn build_pyramid(
    packet: &KeyframePacket,
    camera: &PinholeCamera,
    downsample: f64,
    levels: usize,
) -> Result<Vec<PyramidLevel>, MappingError> {
    packet.validate()?;
    if packet.image.dims() != (camera.width, camera.height) {
        return Err(MappingError::DimensionMismatch(format!(
            "image {:?} vs camera {}x{}",
            packet.image.dims(),
            camera.width,
            camera.height
        )));
    }
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        if level == 0 {
            out.push(PyramidLevel {
                level,
                image: packet.image.clone(),
                depth: packet.depth.clone(),
                covariance: packet.covariance.clone(),
                camera: *camera,
            });
            continue;
        }
        let scale = downsample.powi(level as i32);
        let (w, h) = (
            scaled_dim(camera.width, scale),
            scaled_dim(camera.height, scale),
        );
        if w == 0 || h == 0 {
            return Err(MappingError::DegenerateLevel {
                level,
                width: w,
                height: h,
            });
        }
        let (depth, covariance) = resample_depth(&packet.depth, &packet.covariance, w, h, scale);
        out.push(PyramidLevel {
            level,
            image: packet.image.resample(w, h, scale),
            depth,
            covariance,
            camera: camera.scaled(scale),
        });
    }
    Ok(out)
}

/// Window `[i - k/2, i + k/2 - 1]` clipped to `[0, len)`.
fn window(i: usize, kernel: usize, len: usize) -> (usize, usize) {
    let lo = i.saturating_sub(kernel / 2);
    let hi = (i + kernel.div_ceil(2)).min(len);
    (lo, hi.max(lo + 1))
}

fn max_filter(g: &Grid<f64>, kernel: usize) -> Grid<f64> {
    let (w, h) = g.dims();
    let rows = Grid::from_fn(w, h, |x, y| {
        let (lo, hi) = window(x, kernel, w);
        (lo..hi)
            .map(|xx| g[(xx, y)])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Grid::from_fn(w, h, |x, y| {
        let (lo, hi) = window(y, kernel, h);
        (lo..hi)
            .map(|yy| rows[(x, yy)])
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

/// Sets a pixel when strictly more than half of its window is set, clears
/// it when strictly fewer are; ties keep the pixel.
fn majority_filter(m: &Grid<bool>, kernel: usize) -> Grid<bool> {
    let (w, h) = m.dims();
    let mut integral = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = m[(x, y)] as usize
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    Grid::from_fn(w, h, |x, y| {
        let (x0, x1) = window(x, kernel, w);
        let (y0, y1) = window(y, kernel, h);
        let at = |xx: usize, yy: usize| integral[yy * (w + 1) + xx];
        let trues = at(x1, y1) + at(x0, y0) - at(x0, y1) - at(x1, y0);
        let total = (x1 - x0) * (y1 - y0);
        match (2 * trues).cmp(&total) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => m[(x, y)],
        }
    })
}

/// Spread of variances, relative to the largest, below which a grid counts
/// as uniform.
pub const UNIFORM_SPREAD: f64 = 1e-9;

/// Pixels whose max-filtered, min-max normalized variance is below
/// `threshold`, smoothed by a majority filter of the same size. A uniform
/// grid normalizes to zero everywhere.
pub fn covariance_mask(covariance: &Grid<f64>, threshold: f64, kernel: usize) -> Grid<bool> {
    let lo = covariance.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = covariance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = if hi - lo > UNIFORM_SPREAD * hi.abs() {
        covariance.map(|c| (c - lo) / (hi - lo))
    } else {
        covariance.map(|_| 0.0)
    };
    let filtered = max_filter(&normalized, kernel);
    majority_filter(&filtered.map(|v| *v < threshold), kernel)
}

/// Per-Gaussian bookkeeping kept alongside the map.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    pub origin: KeyframeId,
    /// Updates applied since the Gaussian was created.
    pub steps: u64,
    moments: [[f64; 14]; 2],
    grad_norm_sum: f64,
    grad_count: u32,
    position_grad_sum: Vector3<f64>,
}

impl GaussianState {
    fn new(origin: KeyframeId) -> Self {
        Self {
            origin,
            steps: 0,
            moments: [[0.0; 14]; 2],
            grad_norm_sum: 0.0,
            grad_count: 0,
            position_grad_sum: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian3D>,
    pub states: Vec<GaussianState>,
    next_id: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: Vec<Gaussian3D>) -> Self {
        let next_id = gaussians.iter().map(|g| g.id + 1).max().unwrap_or(0);
        let states = gaussians.iter().map(|_| GaussianState::new(0)).collect();
        Self {
            gaussians,
            states,
            next_id,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn push(&mut self, g: Gaussian3D, origin: KeyframeId) {
        self.next_id = self.next_id.max(g.id + 1);
        self.gaussians.push(g);
        self.states.push(GaussianState::new(origin));
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.gaussians.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.states.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    pub fn render(&self, pose: &SE3Pose, camera: &PinholeCamera) -> RenderedFrame {
        rasterize(&self.gaussians, pose, camera)
    }
}

/// Seeds up to `ceil(valid / stride)` Gaussians from distinct pixels that
/// have valid depth and a set mask bit.
pub fn seed_gaussians<R: Rng>(
    level: &PyramidLevel,
    pose: &SE3Pose,
    stride: usize,
    mask: &Grid<bool>,
    rng: &mut R,
    first_id: u64,
) -> Result<Vec<Gaussian3D>, MappingError> {
    if !mask.same_dims(&level.depth) {
        return Err(MappingError::DimensionMismatch(format!(
            "mask {:?} vs level {:?}",
            mask.dims(),
            level.depth.dims()
        )));
    }
    let (w, h) = level.depth.dims();
    let valid = level.depth.iter().filter(|d| **d > 0.0).count();
    let candidates: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask[(x, y)] && level.depth[(x, y)] > 0.0)
        .collect();
    if candidates.is_empty() {
        return Err(MappingError::EmptyMask);
    }
    let count = valid.div_ceil(stride).min(candidates.len());
    let mut picked: Vec<usize> = sample(rng, candidates.len(), count).into_vec();
    picked.sort_unstable();
    let cam = &level.camera;
    let points: Vec<(Vector3<f64>, Vector3<f64>, f64)> = picked
        .iter()
        .map(|&i| {
            let (x, y) = candidates[i];
            let z = level.depth[(x, y)];
            let p_cam = cam.ray(&Vector2::new(x as f64, y as f64)) * z;
            (pose.transform_point(&p_cam), level.image[(x, y)], z)
        })
        .collect();
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &(p, color, z))| {
            let mut dists: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q.0 - p).norm())
                .collect();
            let scale = if dists.is_empty() {
                z * (stride as f64).sqrt() / cam.fx
            } else {
                let k = dists.len().min(3);
                dists.select_nth_unstable_by(k - 1, f64::total_cmp);
                dists[..k].iter().sum::<f64>() / k as f64
            };
            Gaussian3D {
                id: first_id + i as u64,
                position: p,
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                log_scale: Vector3::repeat(scale.max(1e-6).ln()),
                opacity_logit: 0.0,
                color: color.map(|c| c.clamp(0.0, 1.0)),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub color_term: f64,
    pub depth_term: f64,
    pub grad_color: Image,
    pub grad_depth: Grid<f64>,
}

pub const COVARIANCE_EPS: f64 = 1e-8;
/// Rendered pixels need at least this accumulated opacity to enter the
/// depth term.
pub const DEPTH_ALPHA_MIN: f64 = 0.5;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `mix * L_color + (1 - mix) * L_depth` with its gradient with respect to
/// the rendered color and depth.
pub fn mapping_loss(
    rendered: &RenderedFrame,
    image: &Image,
    depth: &Grid<f64>,
    covariance: &Grid<f64>,
    mix: f64,
    mode: DepthLoss,
) -> LossOutput {
    let (w, h) = image.dims();
    let n_color = (w * h * 3) as f64;
    let mut color_term = 0.0;
    let grad_color = Grid::from_fn(w, h, |x, y| {
        let diff = rendered.color[(x, y)] - image[(x, y)];
        color_term += diff.abs().sum();
        diff.map(sign) * (mix / n_color)
    });
    color_term /= n_color;
    let mut grad_depth = Grid::new(w, h, 0.0);
    let mut depth_term = 0.0;
    if mode != DepthLoss::None && mix < 1.0 {
        let valid: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| depth[(x, y)] > 0.0 && rendered.alpha[(x, y)] > DEPTH_ALPHA_MIN)
            .collect();
        if !valid.is_empty() {
            let n = valid.len() as f64;
            for (x, y) in valid {
                let weight = match mode {
                    DepthLoss::Weighted => 1.0 / (covariance[(x, y)] + COVARIANCE_EPS),
                    _ => 1.0,
                };
                let diff = rendered.depth[(x, y)] - depth[(x, y)];
                depth_term += diff.abs() * weight;
                grad_depth[(x, y)] = sign(diff) * weight * (1.0 - mix) / n;
            }
            depth_term /= n;
        }
    }
    LossOutput {
        loss: mix * color_term + (1.0 - mix) * depth_term,
        color_term,
        depth_term,
        grad_color,
        grad_depth,
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

fn flatten(g: &GaussianGrad) -> [f64; 14] {
    [
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
    ]
}

/// One bias-corrected Adam step on every Gaussian. Moments and bias
/// correction are per Gaussian, counted from its creation, and the position
/// learning rate is `lr_position(steps already taken)`. Colors are kept in
/// `[0, 1]` and updated rotations renormalized.
pub fn adam_step(
    map: &mut GaussianMap,
    grads: &[GaussianGrad],
    lr_position: impl Fn(u64) -> f64,
    config: &MappingConfig,
) {
    let mut lrs = [0.0; 14];
    lrs[3..7].fill(config.lr_rotation);
    lrs[7..10].fill(config.lr_scale);
    lrs[10] = config.lr_opacity;
    lrs[11..14].fill(config.lr_color);
    for ((g, state), grad) in map
        .gaussians
        .iter_mut()
        .zip(map.states.iter_mut())
        .zip(grads)
    {
        lrs[0..3].fill(lr_position(state.steps));
        state.steps += 1;
        let t = state.steps.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let flat = flatten(grad);
        let mut step = [0.0; 14];
        for k in 0..14 {
            let m = &mut state.moments[0][k];
            *m = BETA1 * *m + (1.0 - BETA1) * flat[k];
            let v = &mut state.moments[1][k];
            *v = BETA2 * *v + (1.0 - BETA2) * flat[k] * flat[k];
            let m_hat = state.moments[0][k] / bc1;
            let v_hat = state.moments[1][k] / bc2;
            step[k] = lrs[k] * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        g.position -= Vector3::new(step[0], step[1], step[2]);
        g.rotation -= Vector4::new(step[3], step[4], step[5], step[6]);
        g.log_scale -= Vector3::new(step[7], step[8], step[9]);
        g.opacity_logit -= step[10];
        g.color -= Vector3::new(step[11], step[12], step[13]);
        g.color = g.color.map(|c| c.clamp(0.0, 1.0));
        if step[3..7].iter().any(|s| *s != 0.0) {
            g.normalize_rotation();
        }
    }
}

/// Splits or clones Gaussians whose mean screen-space gradient exceeds the
/// threshold, then removes low-opacity and oversized Gaussians. Resets the gradient
/// statistics.
pub fn densify_and_prune(map: &mut GaussianMap, config: &MappingConfig) {
    let n = map.len();
    if n == 0 {
        return;
    }
    let centroid = map
        .gaussians
        .iter()
        .map(|g| g.position)
        .sum::<Vector3<f64>>()
        / n as f64;
    let extent = map
        .gaussians
        .iter()
        .map(|g| (g.position - centroid).norm())
        .fold(0.0, f64::max);
    let mut keep = vec![true; n];
    let mut added = Vec::new();
    for i in 0..n {
        let st = &map.states[i];
        if st.grad_count == 0
            || st.grad_norm_sum / (st.grad_count as f64) <= config.densify_grad_threshold
        {
            continue;
        }
        let g = map.gaussians[i].clone();
        let scales = g.scales();
        let (axis, smax) = scales.argmax();
        if smax > 0.01 * extent {
            let dir = g.rotation_matrix().column(axis) * smax;
            for sgn in [1.0, -1.0] {
                let mut child = g.clone();
                child.position += dir * sgn;
                child.log_scale -= Vector3::repeat(1.6f64.ln());
                added.push((child, st.origin));
            }
            keep[i] = false;
        } else {
            let mut child = g.clone();
            let pg = st.position_grad_sum;
            if pg.norm() > 0.0 {
                child.position -= pg.normalize() * smax;
            }
            added.push((child, st.origin));
        }
    }
    let max_scale = config.prune_max_scale_ratio * extent;
    let pruned = |g: &Gaussian3D| {
        g.opacity() < config.prune_opacity
            || (config.prune_max_scale_ratio > 0.0 && g.scales().max() > max_scale)
    };
    for (i, g) in map.gaussians.iter().enumerate() {
        if pruned(g) {
            keep[i] = false;
        }
    }
    map.retain(&keep);
    for (mut g, origin) in added {
        if pruned(&g) {
            continue;
        }
        g.id = map.next_id();
        map.push(g, origin);
    }
    for st in &mut map.states {
        st.grad_norm_sum = 0.0;
        st.grad_count = 0;
        st.position_grad_sum = Vector3::zeros();
    }
}

/// Minimum blending weight for a Gaussian to count as visible.
pub const VISIBILITY_WEIGHT: f64 = 1.0 / 255.0;

/// Removes Gaussians seeded from `origin` that do not reach
/// [`VISIBILITY_WEIGHT`] anywhere when rendered from `pose`.
pub fn prune_occluded(
    map: &mut GaussianMap,
    origin: KeyframeId,
    pose: &SE3Pose,
    camera: &PinholeCamera,
) {
    let contrib = max_contributions(&map.gaussians, pose, camera);
    let keep: Vec<bool> = map
        .states
        .iter()
        .zip(&contrib)
        .map(|(st, c)| st.origin != origin || *c >= VISIBILITY_WEIGHT)
        .collect();
    map.retain(&keep);
}

/// Sliding-window mapper owning the map and the keyframe pyramids.
#[derive(Clone, Debug)]
pub struct Mapper {
    pub config: MappingConfig,
    pub camera: PinholeCamera,
    pub map: GaussianMap,
    window: VecDeque<(KeyframePacket, Vec<PyramidLevel>)>,
    /// Latest packet of every keyframe ever accepted, for post-processing.
    history: Vec<KeyframePacket>,
    iteration: u64,
    rng: ChaCha8Rng,
    /// Median valid depth of the first keyframe; position learning rates
    /// are multiplied by it so mapping does not depend on the scene scale.
    scene_scale: Option<f64>,
}

impl Mapper {
    pub fn new(
        config: MappingConfig,
        camera: PinholeCamera,
        seed: u64,
    ) -> Result<Self, MappingError> {
        config.validate()?;
        Ok(Self {
            config,
            camera,
            map: GaussianMap::new(),
            window: VecDeque::new(),
            history: Vec::new(),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scene_scale: None,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn scene_scale(&self) -> Option<f64> {
        self.scene_scale
    }

    pub fn window_ids(&self) -> Vec<KeyframeId> {
        self.window.iter().map(|(p, _)| p.keyframe_id).collect()
    }

    pub fn history(&self) -> &[KeyframePacket] {
        &self.history
    }

    /// Replaces stored packets with refreshed tracking estimates. Unknown
    /// ids are ignored.
    pub fn refresh(&mut self, packets: &[KeyframePacket]) -> Result<(), MappingError> {
        for p in packets {
            if let Some(slot) = self
                .window
                .iter_mut()
                .find(|(w, _)| w.keyframe_id == p.keyframe_id)
            {
                *slot = (
                    p.clone(),
                    build_pyramid(p, &self.camera, self.config.downsample, self.config.levels)?,
                );
            }
            if let Some(h) = self
                .history
                .iter_mut()
                .find(|h| h.keyframe_id == p.keyframe_id)
            {
                *h = p.clone();
            }
        }
        Ok(())
    }

    /// Adds a keyframe to the window (dropping the oldest beyond the window
    /// size) and runs one coarse-to-fine optimization cycle. Returns false
    /// when the keyframe is already in the window.
    pub fn add_keyframe(&mut self, packet: KeyframePacket) -> Result<bool, MappingError> {
        if self
            .window
            .iter()
            .any(|(p, _)| p.keyframe_id == packet.keyframe_id)
        {
            return Ok(false);
        }
        let pyramid = build_pyramid(
            &packet,
            &self.camera,
            self.config.downsample,
            self.config.levels,
        )?;
        if self.scene_scale.is_none() {
            let mut valid: Vec<f64> = packet.depth.iter().copied().filter(|d| *d > 0.0).collect();
            if !valid.is_empty() {
                let mid = valid.len() / 2;
                valid.select_nth_unstable_by(mid, f64::total_cmp);
                self.scene_scale = Some(valid[mid]);
            }
        }
        match self
            .history
            .iter_mut()
            .find(|h| h.keyframe_id == packet.keyframe_id)
        {
            Some(h) => *h = packet.clone(),
            None => self.history.push(packet.clone()),
        }
        self.window.push_back((packet, pyramid));
        while self.window.len() > self.config.window {
            self.window.pop_front();
        }
        self.optimize_window(self.config.iterations_per_keyframe)?;
        Ok(true)
    }

    /// Coarse-to-fine optimization of the current window with `budget`
    /// iterations split evenly across levels (remainder to the finest).
    pub fn optimize_window(&mut self, budget: usize) -> Result<(), MappingError> {
        if budget == 0 || self.window.is_empty() {
            return Ok(());
        }
        let levels = self.config.levels;
        let per_level = budget / levels;
        let mut round_robin = 0usize;
        for level in (0..levels).rev() {
            let iters = if level == 0 {
                budget - per_level * (levels - 1)
            } else {
                per_level
            };
            self.seed_level(level)?;
            for _ in 0..iters {
                let idx = round_robin % self.window.len();
                round_robin += 1;
                let (packet, pyramid) = &self.window[idx];
                let (pose, lvl) = (packet.pose, pyramid[level].clone());
                self.step(&pose, &lvl, true);
            }
        }
        let (latest, _) = self.window.back().expect("window is not empty");
        let (origin, pose) = (latest.keyframe_id, latest.pose);
        prune_occluded(&mut self.map, origin, &pose, &self.camera);
        Ok(())
    }

    fn seed_level(&mut self, level: usize) -> Result<(), MappingError> {
        let (packet, pyramid) = self.window.back().expect("window is not empty");
        let lvl = &pyramid[level];
        let mask = covariance_mask(
            &lvl.covariance,
            self.config.mask_threshold,
            self.config.filter_kernel,
        );
        let first_id = self.map.next_id;
        match seed_gaussians(
            lvl,
            &packet.pose,
            self.config.seed_stride,
            &mask,
            &mut self.rng,
            first_id,
        ) {
            Ok(seeds) => {
                let origin = packet.keyframe_id;
                for g in seeds {
                    self.map.push(g, origin);
                }
                Ok(())
            }
            Err(MappingError::EmptyMask) => {
                log::debug!("no confident pixels to seed at level {level}");
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// One render / loss / update step on a single view. With `densify`, a
    /// densify/prune pass due after a multiple of `densify_interval` completed
    /// iterations runs before rendering, so a window never ends on untrained
    /// split or cloned children.
    fn step(&mut self, pose: &SE3Pose, level: &PyramidLevel, densify: bool) -> f64 {
        if densify
            && self.iteration > 0
            && self
                .iteration
                .is_multiple_of(self.config.densify_interval as u64)
        {
            densify_and_prune(&mut self.map, &self.config);
        }
        let cam = &level.camera;
        let rendered = self.map.render(pose, cam);
        let loss = mapping_loss(
            &rendered,
            &level.image,
            &level.depth,
            &level.covariance,
            self.config.loss_mix,
            self.config.depth_loss,
        );
        let grads = rasterize_backward(
            &self.map.gaussians,
            pose,
            cam,
            &loss.grad_color,
            &loss.grad_depth,
        );
        let ndc = 0.5 * cam.width.max(cam.height) as f64;
        for (st, g) in self.map.states.iter_mut().zip(&grads) {
            if g.mean2d != Vector2::zeros() {
                st.grad_norm_sum += g.mean2d.norm() * ndc;
                st.grad_count += 1;
                st.position_grad_sum += g.position;
            }
        }
        let scale = self.scene_scale.unwrap_or(1.0);
        let (lr_i, lr_f, tau) = (
            self.config.lr_position_init,
            self.config.lr_position_final,
            self.config.lr_decay_iterations,
        );
        adam_step(
            &mut self.map,
            &grads,
            |age| scale * lr_schedule(age as f64, lr_i, lr_f, tau),
            &self.config,
        );
        self.iteration += 1;
        loss.loss
    }

    /// `iterations` single-view refinement steps at full resolution on
    /// keyframes drawn uniformly from the whole history with a generator
    /// seeded by `seed`.
    pub fn post_process(&mut self, iterations: usize, seed: u64) -> Result<(), MappingError> {
        if iterations == 0 || self.history.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pyramids: Vec<PyramidLevel> = self
            .history
            .iter()
            .map(|p| {
                build_pyramid(p, &self.camera, self.config.downsample, 1).map(|mut v| v.remove(0))
            })
            .collect::<Result<_, _>>()?;
        for _ in 0..iterations {
            let k = rng.random_range(0..self.history.len());
            let pose = self.history[k].pose;
            self.step(&pose, &pyramids[k], false);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cam(w: usize, h: usize) -> PinholeCamera {
        PinholeCamera::new(
            w as f64,
            w as f64,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
        )
        .unwrap()
    }

    fn packet(w: usize, h: usize) -> KeyframePacket {
        KeyframePacket {
            keyframe_id: 0,
            image: Grid::new(w, h, Vector3::new(0.2, 0.5, 0.7)),
            depth: Grid::new(w, h, 2.0),
            covariance: Grid::new(w, h, 0.01),
            pose: SE3Pose::identity(),
        }
    }

    #[test]
    fn pyramid_dims_and_constant_levels() {
        let p = packet(640, 480);
        let levels = build_pyramid(&p, &cam(640, 480), 0.8, 3).unwrap();
        assert_eq!(levels[1].image.dims(), (512, 384));
        assert_eq!(levels[2].image.dims(), (409, 307));
        assert_eq!(levels[2].camera.width, 409);
        assert_eq!(levels[0].image, p.image);
        for l in &levels {
            assert!(l
                .image
                .iter()
                .all(|c| (c - Vector3::new(0.2, 0.5, 0.7)).norm() < 1e-12));
            assert!(l.depth.iter().all(|d| (d - 2.0).abs() < 1e-12));
        }
        assert!(matches!(
            build_pyramid(&packet(4, 4), &cam(4, 4), 0.1, 3),
            Err(MappingError::DegenerateLevel { .. })
        ));
    }

    #[test]
    fn schedule_endpoints() {
        assert!((lr_schedule(0.0, 1.6e-4, 1.6e-6, 3000.0) - 1.6e-4).abs() < 1e-16);
        assert!((lr_schedule(3000.0, 1.6e-4, 1.6e-6, 3000.0) - 1.6e-6).abs() < 1e-18);
        assert!((lr_schedule(1500.0, 1.6e-4, 1.6e-6, 3000.0) / 1.6e-5 - 1.0).abs() < 1e-12);
        assert_eq!(
            lr_schedule(9000.0, 1.6e-4, 1.6e-6, 3000.0),
            lr_schedule(3000.0, 1.6e-4, 1.6e-6, 3000.0)
        );
    }

    proptest! {
        #[test]
        fn schedule_is_log_linear(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let f = |t: f64| lr_schedule(t * 3000.0, 1.6e-4, 1.6e-6, 3000.0).ln();
            let mid = f((a + b) / 2.0);
            prop_assert!((mid - (f(a) + f(b)) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_covariance_keeps_everything() {
        let m = covariance_mask(&Grid::new(40, 30, 0.3), 0.2, 32);
        assert!(m.iter().all(|b| *b));
    }

    #[test]
    fn corner_spike_leaves_interior() {
        let mut c = Grid::new(64, 64, 0.0);
        c[(0, 0)] = 1.0;
        let m = covariance_mask(&c, 0.2, 32);
        assert!(!m[(0, 0)] && !m[(5, 5)]);
        assert!(m[(40, 40)] && m[(63, 63)]);
        assert_eq!(m, naive_mask(&c, 0.2, 32));
    }

    fn naive_mask(c: &Grid<f64>, thr: f64, k: usize) -> Grid<bool> {
        let (w, h) = c.dims();
        let (lo, hi) = c
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
        let near = |i: usize, j: usize| {
            (j as i64) >= i as i64 - (k / 2) as i64
                && (j as i64) < i as i64 - (k / 2) as i64 + k as i64
        };
        let raw = Grid::from_fn(w, h, |x, y| {
            let mut m = f64::NEG_INFINITY;
            for yy in 0..h {
                for xx in 0..w {
                    if near(x, xx) && near(y, yy) {
                        let v = if hi > lo {
                            (c[(xx, yy)] - lo) / (hi - lo)
                        } else {
                            0.0
                        };
                        m = m.max(v);
                    }
                }
            }
            m < thr
        });
        Grid::from_fn(w, h, |x, y| {
            let (mut t, mut n) = (0, 0);
            for yy in 0..h {
                for xx in 0..w {
                    if near(x, xx) && near(y, yy) {
                        n += 1;
                        t += raw[(xx, yy)] as usize;
                    }
                }
            }
            if 2 * t > n {
                true
            } else if 2 * t < n {
                false
            } else {
                raw[(x, y)]
            }
        })
    }

    #[test]
    fn interior_spike_matches_oracle() {
        let mut c = Grid::from_fn(64, 64, |x, y| 0.01 * ((x * 7 + y * 3) % 5) as f64);
        c[(30, 33)] = 1.0;
        let m = covariance_mask(&c, 0.2, 32);
        assert!(!m[(30, 33)]);
        assert_eq!(m, naive_mask(&c, 0.2, 32));
        let m8 = covariance_mask(&c, 0.2, 7);
        assert_eq!(m8, naive_mask(&c, 0.2, 7));
    }

    #[test]
    fn seeding_count_and_reprojection() {
        let mut p = packet(128, 128);
        p.depth = Grid::from_fn(128, 128, |x, y| 1.5 + 0.01 * x as f64 + 0.005 * y as f64);
        p.pose = SE3Pose::exp(&nalgebra::Vector6::new(0.1, -0.2, 0.3, 0.05, 0.02, -0.1));
        let levels = build_pyramid(&p, &cam(128, 128), 0.8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = Grid::new(128, 128, true);
        let seeds = seed_gaussians(&levels[0], &p.pose, 128, &mask, &mut rng, 10).unwrap();
        assert_eq!(seeds.len(), 128);
        assert_eq!(seeds[0].id, 10);
        let c = levels[0].camera;
        let w2c = p.pose.inverse();
        for g in &seeds {
            let uv = c.project(&w2c.transform_point(&g.position)).unwrap();
            let (x, y) = (uv.x.round(), uv.y.round());
            assert!((uv - Vector2::new(x, y)).norm() < 0.5);
            assert_eq!(g.color, Vector3::new(0.2, 0.5, 0.7));
        }
        let none = Grid::new(128, 128, false);
        assert_eq!(
            seed_gaussians(&levels[0], &p.pose, 128, &none, &mut rng, 0),
            Err(MappingError::EmptyMask)
        );
    }

    #[test]
    fn loss_examples() {
        let (w, h) = (8, 6);
        let img = Grid::new(w, h, Vector3::new(0.5, 0.5, 0.5));
        let depth = Grid::new(w, h, 2.0);
        let cov = Grid::new(w, h, 0.04);
        let exact = RenderedFrame {
            color: img.clone(),
            depth: depth.clone(),
            alpha: Grid::new(w, h, 1.0),
        };
        let l = mapping_loss(&exact, &img, &depth, &cov, 0.5, DepthLoss::Weighted);
        assert_eq!(l.loss, 0.0);
        assert!(l.grad_color.iter().all(|g| *g == Vector3::zeros()));
        assert!(l.grad_depth.iter().all(|g| *g == 0.0));
        let off = RenderedFrame {
            depth: depth.map(|d| d + 0.1),
            ..exact.clone()
        };
        let l = mapping_loss(&off, &img, &depth, &cov, 0.5, DepthLoss::Weighted);
        assert!((l.depth_term - 0.1 / (0.04 + COVARIANCE_EPS)).abs() < 1e-9);
        let l1 = mapping_loss(&off, &img, &depth, &cov, 1.0, DepthLoss::Weighted);
        assert_eq!(l1.loss, 0.0);
    }

    #[test]
    fn opacity_prune_and_split_bookkeeping() {
        let mut map = GaussianMap::new();
        map.push(
            Gaussian3D::isotropic(0, Vector3::zeros(), 0.5, 0.05, Vector3::zeros()),
            0,
        );
        map.push(
            Gaussian3D::isotropic(1, Vector3::new(5.0, 0.0, 0.0), 0.5, 0.5, Vector3::zeros()),
            0,
        );
        map.push(
            Gaussian3D::isotropic(2, Vector3::new(-5.0, 0.0, 0.0), 0.01, 0.5, Vector3::zeros()),
            0,
        );
        let cfg = MappingConfig::default();
        densify_and_prune(&mut map, &cfg);
        assert_eq!(
            map.gaussians.iter().map(|g| g.id).collect::<Vec<_>>(),
            vec![1, 2]
        );
        map.states[0].grad_norm_sum = 1.0;
        map.states[0].grad_count = 1;
        densify_and_prune(&mut map, &cfg);
        assert_eq!(map.len(), 3);
        let ids: Vec<u64> = map.gaussians.iter().map(|g| g.id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
        let child = &map.gaussians[1];
        assert!((child.scales().x - 0.5 / 1.6).abs() < 1e-12);
        assert!((child.position - Vector3::new(5.5, 0.0, 0.0)).norm() < 1e-12);
    }

    fn textured_packet(w: usize, h: usize) -> KeyframePacket {
        KeyframePacket {
            keyframe_id: 0,
            image: Grid::from_fn(w, h, |x, y| {
                let c = if (x / 8 + y / 8) % 2 == 0 { 0.8 } else { 0.2 };
                Vector3::new(c, 0.5 * c + 0.2, 1.0 - c)
            }),
            depth: Grid::new(w, h, 2.0),
            covariance: Grid::new(w, h, 0.01),
            pose: SE3Pose::identity(),
        }
    }

    #[test]
    fn zero_budget_leaves_map_unchanged_and_training_reduces_loss() {
        let (w, h) = (48, 32);
        let mut mapper = Mapper::new(
            MappingConfig {
                seed_stride: 4,
                filter_kernel: 8,
                iterations_per_keyframe: 0,
                ..MappingConfig::default()
            },
            cam(w, h),
            3,
        )
        .unwrap();
        mapper.add_keyframe(textured_packet(w, h)).unwrap();
        assert!(mapper.map.is_empty());
        mapper.optimize_window(3).unwrap();
        let before = mapper.map.clone();
        mapper.optimize_window(0).unwrap();
        assert_eq!(mapper.map, before);
        let lvl = build_pyramid(&textured_packet(w, h), &cam(w, h), 0.8, 1)
            .unwrap()
            .remove(0);
        let loss = |m: &Mapper| {
            let r = m.map.render(&SE3Pose::identity(), &cam(w, h));
            mapping_loss(
                &r,
                &lvl.image,
                &lvl.depth,
                &lvl.covariance,
                0.5,
                DepthLoss::Weighted,
            )
            .color_term
        };
        let start = loss(&mapper);
        mapper.post_process(100, 1).unwrap();
        assert!(loss(&mapper) < start);
    }

    #[test]
    fn post_process_is_seeded() {
        let (w, h) = (32, 32);
        let cfg = MappingConfig {
            seed_stride: 8,
            filter_kernel: 8,
            iterations_per_keyframe: 6,
            ..MappingConfig::default()
        };
        let mut a = Mapper::new(cfg, cam(w, h), 5).unwrap();
        a.add_keyframe(textured_packet(w, h)).unwrap();
        let mut b = a.clone();
        let base = a.map.clone();
        a.post_process(0, 9).unwrap();
        assert_eq!(a.map, base);
        a.post_process(20, 9).unwrap();
        b.post_process(20, 9).unwrap();
        assert_eq!(a.map, b.map);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mask_is_scale_invariant(
            values in proptest::collection::vec(0.0f64..1.0, 16 * 12),
            log_k in -8.0f64..8.0,
            kernel in 1usize..9,
            threshold in 0.05f64..0.95,
        ) {
            let grid = Grid::from_vec(16, 12, values);
            let k = 10f64.powf(log_k);
            let mask = covariance_mask(&grid, threshold, kernel);
            prop_assert_eq!(covariance_mask(&grid.map(|c| c * k), threshold, kernel), mask);
        }
    }

    fn scene_packet(w: usize, h: usize) -> (KeyframePacket, PinholeCamera) {
        let spec = crate::scene::SceneSpec {
            frames: 2,
            width: w,
            height: h,
            focal_px: 0.86 * w as f64,
            ..crate::scene::SceneSpec::default()
        };
        let scene = crate::scene::generate_scene(&spec, 4).unwrap();
        let f = &scene.dataset.frames[0];
        let depth = f.depth.clone().unwrap();
        let packet = KeyframePacket {
            keyframe_id: 0,
            image: f.image.clone(),
            covariance: Grid::new(w, h, 1e-2),
            depth,
            pose: f.pose.unwrap(),
        };
        (packet, scene.dataset.camera)
    }

    /// Gaussians in front of the identity camera whose footprints keep every
    /// pixel away from the truncation boundary, so finite differences do not
    /// cross it.
    fn smooth_gaussians(rng: &mut ChaCha8Rng, camera: &PinholeCamera) -> Vec<Gaussian3D> {
        loop {
            let n = rng.random_range(1..=10);
            let gs: Vec<Gaussian3D> = (0..n)
                .map(|i| {
                    let mut g = Gaussian3D::isotropic(
                        i as u64,
                        Vector3::new(
                            rng.random_range(-0.4..0.4),
                            rng.random_range(-0.3..0.3),
                            2.0 + 0.2 * i as f64,
                        ),
                        rng.random_range(0.05..0.2),
                        rng.random_range(0.3..0.9),
                        Vector3::new(
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                        ),
                    );
                    g.log_scale += Vector3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        0.0,
                    );
                    g.rotation = Vector4::new(
                        1.0,
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                    );
                    g.normalize_rotation();
                    g
                })
                .collect();
            let projected: Vec<_> = gs
                .iter()
                .filter_map(|g| crate::splat::project_gaussian(g, &SE3Pose::identity(), camera))
                .collect();
            let near_edge = (0..camera.height).any(|y| {
                (0..camera.width).any(|x| {
                    projected.iter().any(|p| {
                        let d = Vector2::new(x as f64, y as f64) - p.mean2d;
                        ((d.transpose() * p.conic * d)[(0, 0)] - crate::splat::CUTOFF_SQ).abs()
                            < 0.02
                    })
                })
            });
            if !near_edge {
                return gs;
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let camera = cam(24, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst: f64 = 0.0;
        for _ in 0..4 {
            let gs = smooth_gaussians(&mut rng, &camera);
            let image = Grid::from_fn(24, 20, |_, _| {
                Vector3::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            });
            let depth = Grid::from_fn(24, 20, |_, _| rng.random_range(1.5..3.0));
            let cov = Grid::from_fn(24, 20, |_, _| rng.random_range(0.01..0.1));
            let loss = |gs: &[Gaussian3D]| {
                let r = rasterize(gs, &SE3Pose::identity(), &camera);
                mapping_loss(&r, &image, &depth, &cov, 0.7, DepthLoss::Weighted)
            };
            let base = loss(&gs);
            let grads = rasterize_backward(
                &gs,
                &SE3Pose::identity(),
                &camera,
                &base.grad_color,
                &base.grad_depth,
            );
            for (i, grad) in grads.iter().enumerate() {
                let analytic = flatten(grad);
                for (k, a) in analytic.iter().enumerate() {
                    let h = 1e-7;
                    let perturbed = |sgn: f64| {
                        let mut p = gs.clone();
                        let g = &mut p[i];
                        match k {
                            0..=2 => g.position[k] += sgn * h,
                            3..=6 => g.rotation[k - 3] += sgn * h,
                            7..=9 => g.log_scale[k - 7] += sgn * h,
                            10 => g.opacity_logit += sgn * h,
                            _ => g.color[k - 11] += sgn * h,
                        }
                        loss(&p).loss
                    };
                    let numeric = (perturbed(1.0) - perturbed(-1.0)) / (2.0 * h);
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
                }
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn first_steps_of_seeded_keyframe_decrease_loss() {
        let (packet, camera) = scene_packet(48, 36);
        let cfg = MappingConfig {
            levels: 1,
            seed_stride: 4,
            filter_kernel: 8,
            lr_color: 1e-3,
            lr_opacity: 1e-2,
            lr_scale: 1e-3,
            lr_position_init: 1.6e-5,
            lr_position_final: 1.6e-6,
            ..MappingConfig::default()
        };
        let mut mapper = Mapper::new(cfg, camera, 2).unwrap();
        mapper.window.push_back((
            packet.clone(),
            build_pyramid(&packet, &camera, 0.8, 1).unwrap(),
        ));
        mapper.seed_level(0).unwrap();
        let level = mapper.window[0].1[0].clone();
        let losses: Vec<f64> = (0..50)
            .map(|_| mapper.step(&packet.pose, &level, false))
            .collect();
        for (k, pair) in losses.windows(2).enumerate() {
            assert!(
                pair[1] <= pair[0],
                "loss rose at step {}: {} -> {}",
                k + 1,
                pair[0],
                pair[1]
            );
        }
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn zero_loss_gradient_leaves_parameters_unchanged() {
        let camera = cam(32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gs = smooth_gaussians(&mut rng, &camera);
        let r = rasterize(&gs, &SE3Pose::identity(), &camera);
        let packet = KeyframePacket {
            keyframe_id: 0,
            image: r.color.clone(),
            depth: Grid::from_fn(32, 24, |x, y| {
                if r.alpha[(x, y)] > DEPTH_ALPHA_MIN {
                    r.depth[(x, y)]
                } else {
                    0.0
                }
            }),
            covariance: Grid::new(32, 24, 1e-3),
            pose: SE3Pose::identity(),
        };
        let level = build_pyramid(&packet, &camera, 0.8, 1).unwrap().remove(0);
        let mut mapper = Mapper::new(MappingConfig::default(), camera, 0).unwrap();
        mapper.map = GaussianMap::from_gaussians(gs.clone());
        for _ in 0..5 {
            assert_eq!(mapper.step(&SE3Pose::identity(), &level, true), 0.0);
        }
        assert_eq!(mapper.map.gaussians, gs);
    }

    #[test]
    fn position_rate_follows_each_gaussian_age() {
        let mut map = GaussianMap::new();
        map.push(
            Gaussian3D::isotropic(0, Vector3::zeros(), 0.1, 0.5, Vector3::zeros()),
            0,
        );
        map.push(
            Gaussian3D::isotropic(1, Vector3::zeros(), 0.1, 0.5, Vector3::zeros()),
            0,
        );
        map.states[1].steps = 1000;
        let grad = GaussianGrad {
            position: Vector3::new(1.0, 0.0, 0.0),
            ..GaussianGrad::default()
        };
        let cfg = MappingConfig::default();
        let lr = |age: u64| {
            lr_schedule(
                age as f64,
                cfg.lr_position_init,
                cfg.lr_position_final,
                cfg.lr_decay_iterations,
            )
        };
        adam_step(&mut map, &[grad, grad], lr, &cfg);
        assert!((map.gaussians[0].position.x + cfg.lr_position_init).abs() < 1e-15);
        assert!(map.gaussians[1].position.x.abs() < 1e-4 && map.gaussians[1].position.x < 0.0);
        assert_eq!((map.states[0].steps, map.states[1].steps), (1, 1001));
    }

    #[test]
    fn oversized_gaussians_are_pruned() {
        let mut map = GaussianMap::new();
        for (i, x) in [-1.0, 0.0, 1.0].iter().enumerate() {
            map.push(
                Gaussian3D::isotropic(
                    i as u64,
                    Vector3::new(*x, 0.0, 0.0),
                    0.05,
                    0.5,
                    Vector3::zeros(),
                ),
                0,
            );
        }
        map.gaussians[1].log_scale.y = 0.5f64.ln();
        let mut off = map.clone();
        densify_and_prune(&mut map, &MappingConfig::default());
        assert_eq!(
            map.gaussians.iter().map(|g| g.id).collect::<Vec<_>>(),
            vec![0, 2]
        );
        densify_and_prune(
            &mut off,
            &MappingConfig {
                prune_max_scale_ratio: 0.0,
                ..MappingConfig::default()
            },
        );
        assert_eq!(off.len(), 3);
    }
}
