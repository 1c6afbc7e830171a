//! Image and trajectory metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SE3Pose;
use crate::grid::{Grid, Image};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least 3 associated poses, have {0}")]
    TooFewPoses(usize),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no frames left to evaluate")]
    NoEvalFrames,
    #[error("degenerate trajectory: {0}")]
    Degenerate(String),
}

/// PSNR in dB of two `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let n = (a.len() * 3) as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_squared())
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over windows fully inside the image.
fn filter_valid(g: &Grid<f64>, k: &[f64; SSIM_WINDOW]) -> Grid<f64> {
    let (w, h) = g.dims();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let rows = Grid::from_fn(ow, h, |x, y| {
        (0..SSIM_WINDOW).map(|i| k[i] * g[(x + i, y)]).sum::<f64>()
    });
    Grid::from_fn(ow, oh, |x, y| {
        (0..SSIM_WINDOW)
            .map(|i| k[i] * rows[(x, y + i)])
            .sum::<f64>()
    })
}

/// Mean SSIM over channels with an 11×11 Gaussian window (σ = 1.5) and
/// constants for a unit dynamic range. Images smaller than the window fall
/// back to a single global window.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let (w, h) = a.dims();
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let x = a.map(|v| v[c]);
        let y = b.map(|v| v[c]);
        if w < SSIM_WINDOW || h < SSIM_WINDOW {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cov = x
                .iter()
                .zip(y.iter())
                .map(|(p, q)| (p - mx) * (q - my))
                .sum::<f64>()
                / n;
            total += ssim_formula(mx, my, vx, vy, cov);
            continue;
        }
        let mx = filter_valid(&x, &k);
        let my = filter_valid(&y, &k);
        let xx = filter_valid(&Grid::from_fn(w, h, |i, j| x[(i, j)] * x[(i, j)]), &k);
        let yy = filter_valid(&Grid::from_fn(w, h, |i, j| y[(i, j)] * y[(i, j)]), &k);
        let xy = filter_valid(&Grid::from_fn(w, h, |i, j| x[(i, j)] * y[(i, j)]), &k);
        let n = mx.len() as f64;
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx.as_slice()[i], my.as_slice()[i]);
            s += ssim_formula(
                ux,
                uy,
                xx.as_slice()[i] - ux * ux,
                yy.as_slice()[i] - uy * uy,
                xy.as_slice()[i] - ux * uy,
            );
        }
        total += s / n;
    }
    total / 3.0
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cov: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Mean absolute difference over pixels with positive ground-truth depth,
/// or `None` when there are none.
pub fn depth_l1(rendered: &Grid<f64>, truth: &Grid<f64>) -> Option<f64> {
    let (sum, n) = rendered
        .iter()
        .zip(truth.iter())
        .filter(|(_, t)| **t > 0.0)
        .fold((0.0, 0usize), |(s, n), (r, t)| (s + (r - t).abs(), n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Se3,
    Sim3,
}

/// Similarity `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Camera pose mapped through the similarity (rotation and center).
    pub fn apply_pose(&self, pose: &SE3Pose) -> SE3Pose {
        let r = self.rotation * pose.rotation_matrix();
        let rot = nalgebra::UnitQuaternion::from_matrix(&r);
        SE3Pose::new(rot, self.apply(&pose.center()))
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Least-squares similarity (or rigid transform) taking `from` onto `to`.
pub fn umeyama(
    from: &[Vector3<f64>],
    to: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity, EvalError> {
    if from.len() != to.len() {
        return Err(EvalError::LengthMismatch(from.len(), to.len()));
    }
    let n = from.len();
    if n < 3 {
        return Err(EvalError::TooFewPoses(n));
    }
    let nf = n as f64;
    let mu_x = from.iter().sum::<Vector3<f64>>() / nf;
    let mu_y = to.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in from.iter().zip(to) {
        cov += (y - mu_y) * (x - mu_x).transpose();
        var_x += (x - mu_x).norm_squared();
    }
    cov /= nf;
    var_x /= nf;
    if !(var_x > 0.0) {
        return Err(EvalError::Degenerate("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&s.diagonal())).sum() / var_x
    } else {
        1.0
    };
    Ok(Similarity {
        scale,
        rotation,
        translation: mu_y - rotation * mu_x * scale,
    })
}

/// Alignment of an estimated trajectory onto ground truth.
pub fn align_trajectories(
    estimated: &[SE3Pose],
    ground_truth: &[SE3Pose],
    alignment: Alignment,
) -> Result<Similarity, EvalError> {
    if estimated.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch(
            estimated.len(),
            ground_truth.len(),
        ));
    }
    if estimated.len() < 3 {
        return Err(EvalError::TooFewPoses(estimated.len()));
    }
    let from: Vec<Vector3<f64>> = estimated.iter().map(|p| p.center()).collect();
    let to: Vec<Vector3<f64>> = ground_truth.iter().map(|p| p.center()).collect();
    match alignment {
        Alignment::None => Ok(Similarity::identity()),
        Alignment::Se3 => umeyama(&from, &to, false),
        Alignment::Sim3 => umeyama(&from, &to, true),
    }
}

/// RMSE of camera-center residuals after alignment.
pub fn ate_rmse(
    estimated: &[SE3Pose],
    ground_truth: &[SE3Pose],
    alignment: Alignment,
) -> Result<f64, EvalError> {
    let sim = align_trajectories(estimated, ground_truth, alignment)?;
    let sq: f64 = estimated
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| (sim.apply(&e.center()) - g.center()).norm_squared())
        .sum();
    Ok((sq / estimated.len() as f64).sqrt())
}

/// Every `stride`-th frame index below `num_frames` that is not a keyframe.
pub fn eval_frames(
    num_frames: usize,
    keyframes: &[usize],
    stride: usize,
) -> Result<Vec<usize>, EvalError> {
    let stride = stride.max(1);
    let frames: Vec<usize> = (0..num_frames)
        .step_by(stride)
        .filter(|i| !keyframes.contains(i))
        .collect();
    if frames.is_empty() {
        Err(EvalError::NoEvalFrames)
    } else {
        Ok(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector6};
    use proptest::prelude::*;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Grid::from_fn(w, h, |x, y| Vector3::repeat(f(x, y)))
    }

    #[test]
    fn identical_images_hit_caps() {
        let a = image(20, 16, |x, y| ((x * 3 + y * 7) % 11) as f64 / 11.0);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_uniform_offset() {
        let a = image(8, 8, |_, _| 0.5);
        let b = image(8, 8, |_, _| 0.6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_bounded_and_drops_with_noise() {
        let a = image(24, 24, |x, y| ((x + y) % 5) as f64 / 5.0);
        let b = image(24, 24, |x, y| ((x * 7 + y * 3) % 5) as f64 / 5.0);
        let s = ssim(&a, &b);
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn depth_offset() {
        let t = Grid::from_fn(6, 4, |x, _| if x == 0 { 0.0 } else { 2.0 });
        let r = t.map(|d| d + 0.05);
        assert!((depth_l1(&r, &t).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(depth_l1(&r, &Grid::new(6, 4, 0.0)), None);
    }

    #[test]
    fn frame_selection() {
        assert_eq!(eval_frames(20, &[0, 7, 10], 5).unwrap(), vec![5, 15]);
        assert_eq!(eval_frames(3, &[0], 5), Err(EvalError::NoEvalFrames));
    }

    fn trajectory() -> Vec<SE3Pose> {
        (0..6)
            .map(|k| {
                let a = k as f64 * 0.3;
                SE3Pose::exp(&Vector6::new(
                    a.cos(),
                    0.2 * a,
                    a.sin(),
                    0.1 * a,
                    a,
                    -0.05 * a,
                ))
            })
            .collect()
    }

    #[test]
    fn ate_examples() {
        let gt = trajectory();
        assert!(ate_rmse(&gt, &gt, Alignment::Sim3).unwrap() < 1e-12);
        let scaled: Vec<SE3Pose> = gt
            .iter()
            .map(|p| SE3Pose::new(p.rotation, p.translation * 2.0))
            .collect();
        assert!(ate_rmse(&scaled, &gt, Alignment::Sim3).unwrap() < 1e-9);
        let offset = Vector3::new(0.3, -0.4, 1.2);
        let shifted: Vec<SE3Pose> = gt
            .iter()
            .map(|p| SE3Pose::new(p.rotation, p.translation + offset))
            .collect();
        assert!((ate_rmse(&shifted, &gt, Alignment::None).unwrap() - offset.norm()).abs() < 1e-12);
        assert!(ate_rmse(&shifted, &gt, Alignment::Se3).unwrap() < 1e-9);
        assert_eq!(
            ate_rmse(&gt[..2], &gt[..2], Alignment::Sim3),
            Err(EvalError::TooFewPoses(2))
        );
    }

    proptest! {
        #[test]
        fn umeyama_recovers_similarity(
            s in 0.2f64..5.0,
            axis in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let rot = UnitQuaternion::from_scaled_axis(Vector3::from(axis));
            let sim = Similarity { scale: s, rotation: *rot.to_rotation_matrix().matrix(), translation: Vector3::from(t) };
            let from: Vec<Vector3<f64>> = trajectory().iter().map(|p| p.center()).collect();
            let to: Vec<Vector3<f64>> = from.iter().map(|p| sim.apply(p)).collect();
            let fit = umeyama(&from, &to, true).unwrap();
            prop_assert!((fit.scale - s).abs() < 1e-8 * s.max(1.0));
            for p in &from {
                prop_assert!((fit.apply(p) - sim.apply(p)).norm() < 1e-8);
                prop_assert!((fit.inverse().apply(&fit.apply(p)) - p).norm() < 1e-9);
            }
        }
    }
}
