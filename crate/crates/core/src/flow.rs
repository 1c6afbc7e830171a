//! Sources of flow revisions and confidence weights for dense bundle
//! adjustment.
//!
//! A provider returns, for an edge `(i, j)` and the current reprojection of
//! frame `i`'s solver grid into frame `j`, a per-pixel revision such that
//! `current + revision` is the target location, plus per-axis confidences.
//! Revisions live on the solver grid and are measured in solver pixels;
//! [`FlowProvider::mean_flow`] and noise levels are reported in input-image
//! pixels.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::frame_graph::FrameHandle;
use crate::geometry::{PinholeCamera, SE3Pose};
use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("frame {0:?} was not registered with the flow provider")]
    UnknownFrame(FrameHandle),
    #[error("no valid pixels between frames {0:?} and {1:?}")]
    NoValidPixels(FrameHandle, FrameHandle),
    #[error("grid is {got:?}, solver resolution is {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowRevision {
    pub revision: Grid<Vector2<f64>>,
    pub confidence: Grid<Vector2<f64>>,
}

impl FlowRevision {
    pub fn dims(&self) -> (usize, usize) {
        self.revision.dims()
    }
}

pub trait FlowProvider {
    fn flow_revision(
        &mut self,
        frame_i: FrameHandle,
        frame_j: FrameHandle,
        current: &Grid<Vector2<f64>>,
    ) -> Result<FlowRevision, FlowError>;

    /// Mean flow magnitude from `frame_i` to `frame_j` over valid pixels, in
    /// input-image pixels.
    fn mean_flow(&mut self, frame_i: FrameHandle, frame_j: FrameHandle) -> Result<f64, FlowError>;

    /// Whether `flow(i, j)` confidences equal those of `flow(j, i)`.
    fn is_symmetric(&self) -> bool {
        false
    }
}

/// Provider that never revises the flow.
#[derive(Clone, Debug, Default)]
pub struct ZeroProvider;

impl FlowProvider for ZeroProvider {
    fn flow_revision(
        &mut self,
        _frame_i: FrameHandle,
        _frame_j: FrameHandle,
        current: &Grid<Vector2<f64>>,
    ) -> Result<FlowRevision, FlowError> {
        let (w, h) = current.dims();
        Ok(FlowRevision {
            revision: Grid::new(w, h, Vector2::zeros()),
            confidence: Grid::new(w, h, Vector2::new(1.0, 1.0)),
        })
    }

    fn mean_flow(
        &mut self,
        _frame_i: FrameHandle,
        _frame_j: FrameHandle,
    ) -> Result<f64, FlowError> {
        Ok(0.0)
    }

    fn is_symmetric(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug)]
struct GroundTruthFrame {
    pose: SE3Pose,
    inv_depth: Grid<f64>,
}

/// Targets and validity of the true correspondence field of an edge.
#[derive(Clone, Debug)]
struct TrueField {
    targets: Grid<Vector2<f64>>,
    valid: Grid<bool>,
}

/// Oracle provider for scenes with known poses and depths. Targets are the
/// true reprojections, optionally perturbed by Gaussian noise that is fixed
/// per ordered frame pair. Pixels without geometry, landing outside the
/// target frame, or occluded there get zero confidence.
#[derive(Clone, Debug)]
pub struct GroundTruthProvider {
    camera: PinholeCamera,
    solver_scale: f64,
    noise_sigma_px: f64,
    seed: u64,
    occlusion_tolerance: f64,
    frames: BTreeMap<FrameHandle, GroundTruthFrame>,
    fields: BTreeMap<(FrameHandle, FrameHandle), TrueField>,
}

pub const MIN_CONFIDENCE: f64 = 1e-6;
pub const MAX_CONFIDENCE: f64 = 1e6;
const NOISE_EPS: f64 = 1e-12;

impl GroundTruthProvider {
    /// `camera` is the solver-resolution camera and `solver_scale` the ratio
    /// of solver to input resolution (1/8 by default).
    pub fn new(camera: PinholeCamera, solver_scale: f64) -> Self {
        Self {
            camera,
            solver_scale,
            noise_sigma_px: 0.0,
            seed: 0,
            occlusion_tolerance: 0.05,
            frames: BTreeMap::new(),
            fields: BTreeMap::new(),
        }
    }

    /// Adds Gaussian noise with standard deviation `sigma_px` input-image
    /// pixels to every target.
    pub fn with_noise(mut self, sigma_px: f64, seed: u64) -> Self {
        self.noise_sigma_px = sigma_px;
        self.seed = seed;
        self.fields.clear();
        self
    }

    pub fn noise_sigma_px(&self) -> f64 {
        self.noise_sigma_px
    }

    pub fn camera(&self) -> &PinholeCamera {
        &self.camera
    }

    /// Registers ground truth for a frame: camera-to-world pose and inverse
    /// depth at solver resolution (0 where there is no geometry).
    pub fn register(
        &mut self,
        handle: FrameHandle,
        pose: SE3Pose,
        inv_depth: Grid<f64>,
    ) -> Result<(), FlowError> {
        let expected = (self.camera.width, self.camera.height);
        if inv_depth.dims() != expected {
            return Err(FlowError::DimensionMismatch {
                expected,
                got: inv_depth.dims(),
            });
        }
        self.fields.retain(|(a, b), _| *a != handle && *b != handle);
        self.frames
            .insert(handle, GroundTruthFrame { pose, inv_depth });
        Ok(())
    }

    pub fn is_registered(&self, handle: FrameHandle) -> bool {
        self.frames.contains_key(&handle)
    }

    /// Confidence assigned to valid pixels, in inverse solver pixels squared.
    pub fn confidence(&self) -> f64 {
        if self.noise_sigma_px == 0.0 {
            1.0
        } else {
            let sigma = self.noise_sigma_px * self.solver_scale;
            (1.0 / (sigma * sigma + NOISE_EPS)).clamp(MIN_CONFIDENCE, MAX_CONFIDENCE)
        }
    }

    fn frame(&self, h: FrameHandle) -> Result<&GroundTruthFrame, FlowError> {
        self.frames.get(&h).ok_or(FlowError::UnknownFrame(h))
    }

    fn true_field(&mut self, i: FrameHandle, j: FrameHandle) -> Result<&TrueField, FlowError> {
        if !self.fields.contains_key(&(i, j)) {
            let field = self.compute_field(i, j)?;
            self.fields.insert((i, j), field);
        }
        Ok(&self.fields[&(i, j)])
    }

    fn compute_field(&self, i: FrameHandle, j: FrameHandle) -> Result<TrueField, FlowError> {
        let fi = self.frame(i)?;
        let fj = self.frame(j)?;
        let cam = &self.camera;
        let rel = fj.pose.inverse().compose(&fi.pose);
        let same_view = rel == SE3Pose::identity();
        let (w, h) = fi.inv_depth.dims();
        let mut targets = Grid::new(w, h, Vector2::zeros());
        let mut valid = Grid::new(w, h, false);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(self.seed, i, j));
        let sigma = self.noise_sigma_px * self.solver_scale;
        let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
        for y in 0..h {
            for x in 0..w {
                // Draw unconditionally so the noise field does not depend on
                // visibility.
                let n = match &noise {
                    Some(d) => Vector2::new(d.sample(&mut rng), d.sample(&mut rng)),
                    None => Vector2::zeros(),
                };
                let p = Vector2::new(x as f64, y as f64);
                targets[(x, y)] = p;
                let d = fi.inv_depth[(x, y)];
                if d <= 0.0 {
                    continue;
                }
                let pj: Vector3<f64> = rel.transform_point(&(cam.ray(&p) / d));
                if pj.z <= 0.0 {
                    continue;
                }
                let q = if same_view {
                    p
                } else {
                    cam.project_unchecked(&pj)
                };
                if !cam.contains(&q) {
                    continue;
                }
                let (dj, mass) = fj.inv_depth.sample_bilinear_masked(q.x, q.y, |v| *v > 0.0);
                if mass < 0.999 {
                    continue;
                }
                let expected = 1.0 / pj.z;
                if (expected - dj).abs() > self.occlusion_tolerance * expected {
                    continue;
                }
                targets[(x, y)] = q + n;
                valid[(x, y)] = true;
            }
        }
        Ok(TrueField { targets, valid })
    }
}

fn pair_seed(seed: u64, i: FrameHandle, j: FrameHandle) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ i.0.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ j.0.wrapping_mul(0x94D0_49BB_1331_11EB).rotate_left(17)
}

impl FlowProvider for GroundTruthProvider {
    fn flow_revision(
        &mut self,
        frame_i: FrameHandle,
        frame_j: FrameHandle,
        current: &Grid<Vector2<f64>>,
    ) -> Result<FlowRevision, FlowError> {
        let expected = (self.camera.width, self.camera.height);
        if current.dims() != expected {
            return Err(FlowError::DimensionMismatch {
                expected,
                got: current.dims(),
            });
        }
        let conf = self.confidence();
        let field = self.true_field(frame_i, frame_j)?;
        let (w, h) = expected;
        let mut revision = Grid::new(w, h, Vector2::zeros());
        let mut confidence = Grid::new(w, h, Vector2::zeros());
        for y in 0..h {
            for x in 0..w {
                if field.valid[(x, y)] {
                    revision[(x, y)] = field.targets[(x, y)] - current[(x, y)];
                    confidence[(x, y)] = Vector2::new(conf, conf);
                }
            }
        }
        Ok(FlowRevision {
            revision,
            confidence,
        })
    }

    fn mean_flow(&mut self, frame_i: FrameHandle, frame_j: FrameHandle) -> Result<f64, FlowError> {
        let scale = self.solver_scale;
        let field = self.true_field(frame_i, frame_j)?;
        let (w, h) = field.targets.dims();
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if field.valid[(x, y)] {
                    let d = field.targets[(x, y)] - Vector2::new(x as f64, y as f64);
                    sum += d.norm();
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(FlowError::NoValidPixels(frame_i, frame_j));
        }
        Ok(sum / n as f64 / scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::reproject_field;

    fn plane_camera() -> PinholeCamera {
        PinholeCamera::new(25.0, 25.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn plane(z: f64) -> Grid<f64> {
        Grid::new(32, 24, 1.0 / z)
    }

    #[test]
    fn ground_truth_revision_reaches_true_reprojection() {
        let cam = plane_camera();
        let mut p = GroundTruthProvider::new(cam, 1.0);
        let gi = SE3Pose::identity();
        let gj = SE3Pose::from_translation(Vector3::new(0.05, 0.0, 0.0));
        p.register(FrameHandle(0), gi, plane(2.0)).unwrap();
        p.register(FrameHandle(1), gj, plane(2.0)).unwrap();
        let truth = reproject_field(&gi, &gj, &cam, &plane(2.0));
        let current = Grid::from_fn(32, 24, |x, y| Vector2::new(x as f64, y as f64));
        let rev = p
            .flow_revision(FrameHandle(0), FrameHandle(1), &current)
            .unwrap();
        for y in 0..24 {
            for x in 0..32 {
                let c = rev.confidence[(x, y)];
                if c.x > 0.0 {
                    assert_eq!(c, Vector2::new(1.0, 1.0));
                    let target = current[(x, y)] + rev.revision[(x, y)];
                    assert!((target - truth.coords[(x, y)]).norm() < 1e-12);
                }
            }
        }
        // Pixels whose true target leaves the image get no confidence.
        assert_eq!(rev.confidence[(0, 5)], Vector2::zeros());
        assert!(rev.confidence[(20, 5)].x > 0.0);
    }

    #[test]
    fn uniform_translation_flow_mean() {
        // Fronto-parallel plane at z = 2 and a sideways baseline b give a
        // uniform flow of f * b / z pixels.
        let cam = plane_camera();
        let mut p = GroundTruthProvider::new(cam, 1.0);
        let b = 3.0 * 2.0 / 25.0;
        p.register(FrameHandle(0), SE3Pose::identity(), plane(2.0))
            .unwrap();
        p.register(
            FrameHandle(1),
            SE3Pose::from_translation(Vector3::new(b, 0.0, 0.0)),
            plane(2.0),
        )
        .unwrap();
        let m = p.mean_flow(FrameHandle(0), FrameHandle(1)).unwrap();
        assert!((m - 3.0).abs() < 1e-6, "{m}");
        assert_eq!(p.mean_flow(FrameHandle(0), FrameHandle(0)).unwrap(), 0.0);
    }

    #[test]
    fn mean_flow_reported_in_image_pixels() {
        let cam = plane_camera();
        let mut p = GroundTruthProvider::new(cam, 0.125);
        let b = 3.0 * 2.0 / 25.0;
        p.register(FrameHandle(0), SE3Pose::identity(), plane(2.0))
            .unwrap();
        p.register(
            FrameHandle(1),
            SE3Pose::from_translation(Vector3::new(b, 0.0, 0.0)),
            plane(2.0),
        )
        .unwrap();
        let m = p.mean_flow(FrameHandle(0), FrameHandle(1)).unwrap();
        assert!((m - 24.0).abs() < 1e-6);
    }

    #[test]
    fn noise_statistics_match_configured_sigma() {
        let cam = PinholeCamera::new(60.0, 60.0, 63.5, 47.5, 128, 96).unwrap();
        let scale = 0.5;
        let mut p = GroundTruthProvider::new(cam, scale).with_noise(0.5, 11);
        let clean_field = reproject_field(
            &SE3Pose::identity(),
            &SE3Pose::identity(),
            &cam,
            &Grid::new(128, 96, 0.5),
        );
        p.register(FrameHandle(0), SE3Pose::identity(), Grid::new(128, 96, 0.5))
            .unwrap();
        p.register(FrameHandle(1), SE3Pose::identity(), Grid::new(128, 96, 0.5))
            .unwrap();
        let rev = p
            .flow_revision(FrameHandle(0), FrameHandle(1), &clean_field.coords)
            .unwrap();
        let mut samples = Vec::new();
        for y in 0..96 {
            for x in 0..128 {
                if rev.confidence[(x, y)].x > 0.0 {
                    let r = rev.revision[(x, y)] / scale;
                    samples.extend([r.x, r.y]);
                }
            }
        }
        assert!(samples.len() > 20_000);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 0.5).abs() < 0.02, "std {std}");
        let expected_conf = 1.0 / (0.25 * 0.25 + NOISE_EPS);
        assert!((p.confidence() - expected_conf).abs() < 1e-9);
        // Noise is fixed per pair: repeated queries agree.
        let again = p
            .flow_revision(FrameHandle(0), FrameHandle(1), &clean_field.coords)
            .unwrap();
        assert_eq!(again, rev);
    }

    #[test]
    fn zero_provider_and_errors() {
        let mut z = ZeroProvider;
        let current = Grid::new(4, 3, Vector2::new(1.0, 2.0));
        let rev = z
            .flow_revision(FrameHandle(0), FrameHandle(9), &current)
            .unwrap();
        assert!(rev.revision.iter().all(|r| *r == Vector2::zeros()));
        assert!(rev.confidence.iter().all(|c| *c == Vector2::new(1.0, 1.0)));

        let mut p = GroundTruthProvider::new(plane_camera(), 1.0);
        p.register(FrameHandle(0), SE3Pose::identity(), Grid::new(32, 24, 0.0))
            .unwrap();
        assert_eq!(
            p.mean_flow(FrameHandle(0), FrameHandle(1)),
            Err(FlowError::UnknownFrame(FrameHandle(1)))
        );
        assert_eq!(
            p.mean_flow(FrameHandle(0), FrameHandle(0)),
            Err(FlowError::NoValidPixels(FrameHandle(0), FrameHandle(0)))
        );
        assert!(matches!(
            p.register(FrameHandle(2), SE3Pose::identity(), Grid::new(3, 3, 1.0)),
            Err(FlowError::DimensionMismatch { .. })
        ));
    }
}
