//! Mapping-only ablations on sequences with ground-truth poses and depth.
//!
//! Every `keyframe_stride`-th frame becomes a keyframe packet built from the
//! ground truth, so the variants differ only in the mapping configuration.
//! Scores come from [`crate::pipeline::evaluate`] on the remaining frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::grid::Grid;
use crate::mapping::{DepthLoss, KeyframePacket, Mapper, MappingConfig, MappingError};
use crate::pipeline::{evaluate, PipelineError, TrajectoryEntry};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("frame {0} lacks a ground-truth pose or depth")]
    MissingGroundTruth(usize),
    #[error("need at least 3 keyframes, the stride leaves {0}")]
    TooFewKeyframes(usize),
    #[error("invalid ablation setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSetup {
    pub keyframe_stride: usize,
    pub eval_stride: usize,
    pub seed: u64,
    /// Depth variance attached to noiseless ground-truth depth.
    pub depth_variance: f64,
    pub mapping: MappingConfig,
}

impl Default for AblationSetup {
    fn default() -> Self {
        Self {
            keyframe_stride: 4,
            eval_stride: 5,
            seed: 0,
            depth_variance: 1e-4,
            mapping: MappingConfig::default(),
        }
    }
}

impl AblationSetup {
    pub fn validate(&self) -> Result<(), AblationError> {
        if self.keyframe_stride == 0 || self.eval_stride == 0 {
            return Err(AblationError::Invalid("strides must be positive".into()));
        }
        if !(self.depth_variance > 0.0) {
            return Err(AblationError::Invalid(
                "depth_variance must be positive".into(),
            ));
        }
        self.mapping.validate()?;
        Ok(())
    }

    pub fn keyframes(&self, dataset: &Dataset) -> Result<Vec<usize>, AblationError> {
        let kfs: Vec<usize> = (0..dataset.frames.len())
            .step_by(self.keyframe_stride)
            .collect();
        if kfs.len() < 3 {
            return Err(AblationError::TooFewKeyframes(kfs.len()));
        }
        Ok(kfs)
    }
}

/// Per-pixel depth noise whose standard deviation grows log-linearly from
/// `sigma_min` to `sigma_max` across each keyframe, in a seeded random
/// direction per keyframe. The packet covariance is the true variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthNoise {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for DepthNoise {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 0.2,
            seed: 1,
        }
    }
}

/// Score of one ablation variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_l1: Option<f64>,
    pub gaussians: usize,
    pub iterations: u64,
}

/// Keyframe packets carrying ground-truth depth with constant variance.
pub fn ground_truth_packets(
    dataset: &Dataset,
    setup: &AblationSetup,
) -> Result<Vec<KeyframePacket>, AblationError> {
    setup
        .keyframes(dataset)?
        .into_iter()
        .map(|i| {
            let f = &dataset.frames[i];
            match (f.pose, &f.depth) {
                (Some(pose), Some(depth)) => Ok(KeyframePacket {
                    keyframe_id: i as u64,
                    image: f.image.clone(),
                    depth: depth.clone(),
                    covariance: Grid::new(depth.width(), depth.height(), setup.depth_variance),
                    pose,
                }),
                _ => Err(AblationError::MissingGroundTruth(i)),
            }
        })
        .collect()
}

/// Ground-truth packets with [`DepthNoise`] added to every valid pixel.
pub fn noisy_packets(
    dataset: &Dataset,
    setup: &AblationSetup,
    noise: &DepthNoise,
) -> Result<Vec<KeyframePacket>, AblationError> {
    if !(noise.sigma_min > 0.0 && noise.sigma_max >= noise.sigma_min) {
        return Err(AblationError::Invalid(
            "need 0 < sigma_min <= sigma_max".into(),
        ));
    }
    let mut packets = ground_truth_packets(dataset, setup)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let ratio = (noise.sigma_max / noise.sigma_min).ln();
    for p in &mut packets {
        let (w, h) = p.depth.dims();
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let proj = |x: usize, y: usize| x as f64 * dx + y as f64 * dy;
        let corners = [
            proj(0, 0),
            proj(w - 1, 0),
            proj(0, h - 1),
            proj(w - 1, h - 1),
        ];
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sigma = Grid::from_fn(w, h, |x, y| {
            let u = if hi > lo {
                (proj(x, y) - lo) / (hi - lo)
            } else {
                0.0
            };
            noise.sigma_min * (u * ratio).exp()
        });
        for y in 0..h {
            for x in 0..w {
                let n: f64 = standard.sample(&mut rng);
                let d = p.depth[(x, y)];
                if d > 0.0 {
                    p.depth[(x, y)] = (d + sigma[(x, y)] * n).max(1e-3);
                }
            }
        }
        p.covariance = sigma.map(|s| s * s);
    }
    Ok(packets)
}

/// Feeds `packets` to a fresh mapper in order.
pub fn map_packets(
    packets: &[KeyframePacket],
    dataset: &Dataset,
    config: &MappingConfig,
    seed: u64,
) -> Result<Mapper, AblationError> {
    let mut mapper = Mapper::new(config.clone(), dataset.camera, seed)?;
    for p in packets {
        mapper.add_keyframe(p.clone())?;
    }
    Ok(mapper)
}

/// Evaluates a mapper on the non-keyframes, using ground-truth poses.
pub fn score(
    label: &str,
    mapper: &Mapper,
    dataset: &Dataset,
    setup: &AblationSetup,
) -> Result<AblationRow, AblationError> {
    let trajectory: Vec<TrajectoryEntry> = setup
        .keyframes(dataset)?
        .into_iter()
        .map(|i| {
            let f = &dataset.frames[i];
            f.pose
                .map(|pose| TrajectoryEntry {
                    frame: i,
                    timestamp: f.timestamp,
                    pose,
                })
                .ok_or(AblationError::MissingGroundTruth(i))
        })
        .collect::<Result<_, _>>()?;
    let report = evaluate(
        &mapper.map.gaussians,
        &trajectory,
        dataset,
        setup.eval_stride,
    )?;
    Ok(AblationRow {
        label: label.to_string(),
        psnr: report.mean_psnr,
        ssim: report.mean_ssim,
        depth_l1: report.mean_depth_l1,
        gaussians: mapper.map.len(),
        iterations: mapper.iteration(),
    })
}

/// Constant position learning rates compared against the configured decay.
pub const CONSTANT_POSITION_LRS: [f64; 3] = [1.6e-6, 5e-5, 1.6e-4];

/// Position learning-rate decay against constant rates on packets with
/// heteroscedastic depth noise, without post-processing, at identical
/// iteration budgets.
pub fn decay_ablation(
    dataset: &Dataset,
    setup: &AblationSetup,
    noise: &DepthNoise,
) -> Result<Vec<AblationRow>, AblationError> {
    setup.validate()?;
    let packets = noisy_packets(dataset, setup, noise)?;
    let m = &setup.mapping;
    let mut variants = vec![(
        format!(
            "decay {:.1e} -> {:.1e} over {}",
            m.lr_position_init, m.lr_position_final, m.lr_decay_iterations
        ),
        m.clone(),
    )];
    for lr in CONSTANT_POSITION_LRS {
        variants.push((
            format!("constant {lr:.1e}"),
            MappingConfig {
                lr_position_init: lr,
                lr_position_final: lr,
                ..setup.mapping.clone()
            },
        ));
    }
    variants
        .into_par_iter()
        .map(|(label, cfg)| {
            let mapper = map_packets(&packets, dataset, &cfg, setup.seed)?;
            score(&label, &mapper, dataset, setup)
        })
        .collect()
}

/// Covariance-weighted, unweighted and absent depth terms on packets with
/// heteroscedastic depth noise, without post-processing.
pub fn depth_loss_ablation(
    dataset: &Dataset,
    setup: &AblationSetup,
    noise: &DepthNoise,
) -> Result<Vec<AblationRow>, AblationError> {
    setup.validate()?;
    let packets = noisy_packets(dataset, setup, noise)?;
    [
        ("weighted", DepthLoss::Weighted),
        ("raw", DepthLoss::Raw),
        ("none", DepthLoss::None),
    ]
    .into_par_iter()
    .map(|(label, mode)| {
        let cfg = MappingConfig {
            depth_loss: mode,
            ..setup.mapping.clone()
        };
        let mapper = map_packets(&packets, dataset, &cfg, setup.seed)?;
        score(label, &mapper, dataset, setup)
    })
    .collect()
}

/// One incremental pass followed by each post-processing budget, all
/// starting from the same map.
pub fn postproc_ablation(
    dataset: &Dataset,
    setup: &AblationSetup,
    budgets: &[usize],
) -> Result<Vec<AblationRow>, AblationError> {
    setup.validate()?;
    let packets = ground_truth_packets(dataset, setup)?;
    let base = map_packets(&packets, dataset, &setup.mapping, setup.seed)?;
    budgets
        .par_iter()
        .map(|&beta| {
            let mut mapper = base.clone();
            mapper.post_process(beta, setup.seed)?;
            score(&format!("post {beta}"), &mapper, dataset, setup)
        })
        .collect()
}
