//! End-to-end run: keyframe tracking with dense bundle adjustment feeding
//! the sliding-window Gaussian mapper, followed by evaluation.
//!
//! Flow comes from the ground-truth oracle, so every frame needs a
//! ground-truth pose and depth.

use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, RunMode, TrackingConfig};
use crate::dataset::{Dataset, DatasetError};
use crate::dba::{ba_iterate, DbaError};
use crate::eval::{align_trajectories, depth_l1, eval_frames, psnr, ssim, Alignment, EvalError};
use crate::flow::{FlowError, FlowProvider, GroundTruthProvider};
use crate::frame_graph::{
    induced_mean_flow, keyframe_decision, FrameGraph, FrameHandle, GraphError, Keyframe,
};
use crate::geometry::{InverseDepthMap, PinholeCamera, SE3Pose};
use crate::grid::{source_coord, Grid};
use crate::mapping::{KeyframePacket, Mapper, MappingError};
use crate::splat::{rasterize, Gaussian3D};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dba(#[from] DbaError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("frame {0} lacks the ground-truth pose or depth the flow oracle needs")]
    MissingGroundTruth(usize),
    #[error("mapping thread panicked")]
    MappingThread,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub frame: usize,
    pub timestamp: f64,
    pub pose: SE3Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub timestamp: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_depth_l1: Option<f64>,
    pub ate_rmse: f64,
    /// Scale of the similarity taking the estimate onto ground truth.
    pub alignment_scale: f64,
    pub keyframes: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Keyframe poses in estimation order.
    pub trajectory: Vec<TrajectoryEntry>,
    pub gaussians: Vec<Gaussian3D>,
    pub mapping_iterations: u64,
    pub report: EvalReport,
}

/// Inverse depth at solver resolution from metric depth, resampled from
/// valid pixels only; 0 where fewer than half the taps are valid.
pub fn solver_inverse_depth(depth: &Grid<f64>, solver: &PinholeCamera, scale: f64) -> Grid<f64> {
    Grid::from_fn(solver.width, solver.height, |x, y| {
        let (z, mass) =
            depth.sample_bilinear_masked(source_coord(x, scale), source_coord(y, scale), |z| {
                *z > 0.0
            });
        if mass >= 0.5 && z > 0.0 {
            1.0 / z
        } else {
            0.0
        }
    })
}

/// A solver pixel counts as observed when its marginal inverse-depth
/// variance is well below what the regularizer alone would give.
fn is_observed(variance: f64, regularizer: f64) -> bool {
    variance > 0.0 && variance < 0.5 / regularizer
}

/// Full-resolution mapping input for a keyframe. Pixels whose bilinear
/// footprint touches an unobserved solver pixel get depth 0 and the largest
/// observed variance.
pub fn keyframe_packet(
    kf: &Keyframe,
    camera: &PinholeCamera,
    tracking: &TrackingConfig,
) -> KeyframePacket {
    let up = 1.0 / tracking.solver_scale;
    let (w, h) = (camera.width, camera.height);
    let eta = tracking.dba.depth_regularizer;
    let observed = kf
        .depth
        .covariance
        .map(|c| if is_observed(*c, eta) { 1.0 } else { 0.0 });
    let coverage = observed.resample(w, h, up);
    let (depth, var) = kf.depth.upsample(w, h, up);
    let valid = coverage.map(|c| *c > 1.0 - 1e-9);
    let var_max = var
        .iter()
        .zip(valid.iter())
        .filter(|(_, v)| **v)
        .map(|(c, _)| *c)
        .fold(0.0, f64::max);
    KeyframePacket {
        keyframe_id: kf.id,
        image: kf.image.clone(),
        depth: Grid::from_fn(w, h, |x, y| if valid[(x, y)] { depth[(x, y)] } else { 0.0 }),
        covariance: Grid::from_fn(
            w,
            h,
            |x, y| if valid[(x, y)] { var[(x, y)] } else { var_max },
        ),
        pose: kf.pose,
    }
}

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let mid = v.len() / 2;
    v.select_nth_unstable_by(mid, f64::total_cmp);
    Some(v[mid])
}

/// Messages from tracking to mapping, in emission order.
#[derive(Clone, Debug)]
pub enum MapMessage {
    /// Refreshed estimates for keyframes mapping may hold, then new
    /// keyframes, newest last.
    Update {
        refresh: Vec<KeyframePacket>,
        keyframes: Vec<KeyframePacket>,
    },
    /// Final estimates of every keyframe; mapping finishes after applying it.
    Finish { refresh: Vec<KeyframePacket> },
}

struct Tracker<'a> {
    config: &'a RunConfig,
    dataset: &'a Dataset,
    solver_camera: PinholeCamera,
    provider: GroundTruthProvider,
    graph: FrameGraph,
    keyframe_frames: Vec<usize>,
    since_global: usize,
}

impl<'a> Tracker<'a> {
    fn new(config: &'a RunConfig, dataset: &'a Dataset) -> Self {
        let t = &config.tracking;
        let solver_camera = dataset.camera.scaled(t.solver_scale);
        let mut provider = GroundTruthProvider::new(solver_camera, t.solver_scale);
        if t.flow_noise_px > 0.0 {
            provider = provider.with_noise(t.flow_noise_px, config.rng_seed);
        }
        Self {
            config,
            dataset,
            solver_camera,
            provider,
            graph: FrameGraph::new(),
            keyframe_frames: Vec::new(),
            since_global: 0,
        }
    }

    fn packets(&self, ids: impl Iterator<Item = u64>) -> Vec<KeyframePacket> {
        ids.filter_map(|id| self.graph.get(id))
            .map(|kf| keyframe_packet(kf, &self.dataset.camera, &self.config.tracking))
            .collect()
    }

    fn global_ba(&mut self) -> Result<(), PipelineError> {
        let t = &self.config.tracking;
        let cam = self.solver_camera;
        let scale = t.solver_scale;
        let edges = self.graph.build_global_graph(
            |a, b| {
                induced_mean_flow(&a.pose, &b.pose, &a.depth.values, &cam)
                    .map_or(f64::INFINITY, |f| f / scale)
            },
            t.global_proximity_px,
        )?;
        let report = ba_iterate(
            &mut self.graph,
            &edges,
            &mut self.provider,
            &cam,
            &t.dba,
            t.global_ba_iterations,
        )?;
        log::debug!(
            "global BA over {} keyframes, {} edges: cost {:.3e} -> {:.3e}",
            self.graph.len(),
            edges.len(),
            report.initial_cost,
            report.final_cost
        );
        Ok(())
    }

    /// Processes one frame; returns a mapping update when it became a
    /// keyframe.
    fn track(&mut self, index: usize) -> Result<Option<MapMessage>, PipelineError> {
        let frame = &self.dataset.frames[index];
        let (Some(pose), Some(depth)) = (frame.pose, frame.depth.as_ref()) else {
            return Err(PipelineError::MissingGroundTruth(index));
        };
        let t = &self.config.tracking;
        let handle = FrameHandle(index as u64);
        let inv = solver_inverse_depth(depth, &self.solver_camera, t.solver_scale);
        self.provider.register(handle, pose, inv)?;
        let (w, h) = (self.solver_camera.width, self.solver_camera.height);
        let Some(last) = self.graph.last() else {
            self.graph.insert(Keyframe {
                id: index as u64,
                image: frame.image.clone(),
                pose: SE3Pose::identity(),
                depth: InverseDepthMap::constant(w, h, t.initial_inv_depth),
                handle,
                timestamp: frame.timestamp,
            })?;
            self.keyframe_frames.push(index);
            return Ok(None);
        };
        let flow = match self.provider.mean_flow(last.handle, handle) {
            Ok(f) => f,
            Err(FlowError::NoValidPixels(..)) => f64::INFINITY,
            Err(e) => return Err(e.into()),
        };
        if !keyframe_decision(flow, t.keyframe_flow_threshold_px) {
            return Ok(None);
        }
        let eta = t.dba.depth_regularizer;
        let observed = last
            .depth
            .values
            .iter()
            .zip(last.depth.covariance.iter())
            .filter(|(_, c)| is_observed(**c, eta))
            .map(|(d, _)| *d);
        let init = median(observed)
            .or_else(|| median(last.depth.values.iter().copied()))
            .unwrap_or(t.initial_inv_depth);
        let new_pose = last.pose;
        self.graph.insert(Keyframe {
            id: index as u64,
            image: frame.image.clone(),
            pose: new_pose,
            depth: InverseDepthMap::constant(w, h, init),
            handle,
            timestamp: frame.timestamp,
        })?;
        self.keyframe_frames.push(index);
        let first = self.graph.len() == 2;
        let edges = self
            .graph
            .build_local_window(t.local_window_keyframes, t.local_radius_keyframes)?;
        let iterations = if first {
            t.initial_ba_iterations
        } else {
            t.local_ba_iterations
        };
        ba_iterate(
            &mut self.graph,
            &edges,
            &mut self.provider,
            &self.solver_camera,
            &t.dba,
            iterations,
        )?;
        self.since_global += 1;
        if self.since_global >= t.global_ba_period_keyframes {
            self.since_global = 0;
            self.global_ba()?;
        }
        let ids: Vec<u64> = self.graph.keyframes().iter().map(|k| k.id).collect();
        let (older, newest) = ids.split_at(ids.len() - 1);
        Ok(Some(if first {
            MapMessage::Update {
                refresh: Vec::new(),
                keyframes: self.packets(ids.iter().copied()),
            }
        } else {
            let start = older.len().saturating_sub(t.local_window_keyframes);
            MapMessage::Update {
                refresh: self.packets(older[start..].iter().copied()),
                keyframes: self.packets(newest.iter().copied()),
            }
        }))
    }

    fn finish(&mut self) -> Result<MapMessage, PipelineError> {
        if self.graph.len() >= 2 {
            self.global_ba()?;
        }
        let ids: Vec<u64> = self.graph.keyframes().iter().map(|k| k.id).collect();
        Ok(MapMessage::Finish {
            refresh: self.packets(ids.into_iter()),
        })
    }

    fn trajectory(&self) -> Vec<TrajectoryEntry> {
        self.graph
            .keyframes()
            .iter()
            .map(|k| TrajectoryEntry {
                frame: k.id as usize,
                timestamp: k.timestamp,
                pose: k.pose,
            })
            .collect()
    }
}

/// Applies a batch of messages. With `latest_only`, a keyframe is skipped
/// when a newer keyframe arrives in the same batch. Returns true once the
/// finish message has been applied.
fn apply_messages(
    mapper: &mut Mapper,
    batch: Vec<MapMessage>,
    latest_only: bool,
) -> Result<bool, MappingError> {
    let last_keyframe_msg = batch
        .iter()
        .rposition(|m| matches!(m, MapMessage::Update { keyframes, .. } if !keyframes.is_empty()));
    let mut finished = false;
    for (i, msg) in batch.into_iter().enumerate() {
        match msg {
            MapMessage::Update { refresh, keyframes } => {
                mapper.refresh(&refresh)?;
                let n = keyframes.len();
                for (k, packet) in keyframes.into_iter().enumerate() {
                    if latest_only && (Some(i) != last_keyframe_msg || k + 1 != n) {
                        log::debug!("mapping busy, skipping keyframe {}", packet.keyframe_id);
                        continue;
                    }
                    mapper.add_keyframe(packet)?;
                }
            }
            MapMessage::Finish { refresh } => {
                mapper.refresh(&refresh)?;
                finished = true;
            }
        }
    }
    Ok(finished)
}

/// Seed offset separating the post-processing sampler from seeding.
const POST_PROCESS_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs tracking, mapping, post-processing and evaluation on `dataset`.
pub fn run(config: &RunConfig, dataset: &Dataset) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let mut dataset = dataset.clone();
    if let Some(n) = config.clip_frames {
        dataset.clip(n);
    }
    dataset.validate()?;
    let mut tracker = Tracker::new(config, &dataset);
    let mut mapper = Mapper::new(config.mapping.clone(), dataset.camera, config.rng_seed)?;
    match config.mode {
        RunMode::Interleaved => {
            for index in 0..dataset.frames.len() {
                if let Some(msg) = tracker.track(index)? {
                    apply_messages(&mut mapper, vec![msg], false)?;
                }
            }
            let msg = tracker.finish()?;
            apply_messages(&mut mapper, vec![msg], false)?;
        }
        RunMode::Concurrent => {
            let (tx, rx) = mpsc::channel::<MapMessage>();
            let mapped = std::thread::scope(|scope| {
                let worker = scope.spawn(move || -> Result<Mapper, MappingError> {
                    let mut mapper = mapper;
                    while let Ok(first) = rx.recv() {
                        let mut batch = vec![first];
                        batch.extend(rx.try_iter());
                        if apply_messages(&mut mapper, batch, true)? {
                            break;
                        }
                    }
                    Ok(mapper)
                });
                let tracked = (|| -> Result<(), PipelineError> {
                    for index in 0..dataset.frames.len() {
                        if let Some(msg) = tracker.track(index)? {
                            let _ = tx.send(msg);
                        }
                    }
                    let _ = tx.send(tracker.finish()?);
                    Ok(())
                })();
                drop(tx);
                let mapped = worker.join().map_err(|_| PipelineError::MappingThread)?;
                tracked?;
                Ok::<_, PipelineError>(mapped?)
            })?;
            mapper = mapped;
        }
    }
    mapper.post_process(
        config.mapping.post_iterations,
        config.rng_seed ^ POST_PROCESS_SEED_OFFSET,
    )?;
    let trajectory = tracker.trajectory();
    let gaussians = mapper.map.gaussians.clone();
    let report = evaluate(&gaussians, &trajectory, &dataset, config.eval_stride_frames)?;
    Ok(RunOutput {
        trajectory,
        gaussians,
        mapping_iterations: mapper.iteration(),
        report,
    })
}

/// Renders every `stride`-th non-keyframe with a ground-truth pose, mapped
/// into the estimate's frame by the similarity fitted on keyframe centers.
/// Rendered depth is scaled back to ground-truth units.
pub fn evaluate(
    gaussians: &[Gaussian3D],
    trajectory: &[TrajectoryEntry],
    dataset: &Dataset,
    stride: usize,
) -> Result<EvalReport, PipelineError> {
    let paired: Vec<(SE3Pose, SE3Pose)> = trajectory
        .iter()
        .filter_map(|e| {
            dataset
                .frames
                .get(e.frame)
                .and_then(|f| f.pose)
                .map(|g| (e.pose, g))
        })
        .collect();
    let (est, gt): (Vec<SE3Pose>, Vec<SE3Pose>) = paired.into_iter().unzip();
    let sim = align_trajectories(&est, &gt, Alignment::Sim3)?;
    let ate = crate::eval::ate_rmse(&est, &gt, Alignment::Sim3)?;
    let keyframes: Vec<usize> = trajectory.iter().map(|e| e.frame).collect();
    let candidates = eval_frames(dataset.frames.len(), &keyframes, stride)?;
    let selected: Vec<usize> = candidates
        .into_iter()
        .filter(|&i| dataset.frames[i].pose.is_some())
        .collect();
    if selected.is_empty() {
        return Err(EvalError::NoEvalFrames.into());
    }
    let to_estimate = sim.inverse();
    let frames: Vec<FrameMetrics> = selected
        .par_iter()
        .map(|&i| {
            let f = &dataset.frames[i];
            let pose = to_estimate.apply_pose(&f.pose.expect("filtered above"));
            let r = rasterize(gaussians, &pose, &dataset.camera);
            let depth = f
                .depth
                .as_ref()
                .and_then(|d| depth_l1(&r.depth.map(|z| z * sim.scale), d));
            FrameMetrics {
                frame: i,
                timestamp: f.timestamp,
                psnr: psnr(&r.color, &f.image),
                ssim: ssim(&r.color, &f.image),
                depth_l1: depth,
            }
        })
        .collect();
    let n = frames.len() as f64;
    let depths: Vec<f64> = frames.iter().filter_map(|m| m.depth_l1).collect();
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|m| m.ssim).sum::<f64>() / n,
        mean_depth_l1: (!depths.is_empty())
            .then(|| depths.iter().sum::<f64>() / depths.len() as f64),
        ate_rmse: ate,
        alignment_scale: sim.scale,
        keyframes: keyframes.len(),
        frames,
    })
}
