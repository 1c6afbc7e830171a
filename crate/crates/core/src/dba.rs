//! Dense bundle adjustment over keyframe poses and per-pixel inverse depths.
//!
//! Every pixel of a host keyframe `i` is reprojected into each neighbor `j`
//! of the edge set and pulled towards the flow target with per-axis
//! confidence weights. The resulting normal equations have a block camera
//! part `C`, a diagonal depth part `P` and sparse coupling blocks `E`; the
//! depth block is eliminated with the Schur complement.
//!
//! Depth variable `m` of a problem with `K` keyframes of `n` pixels each is
//! `k * n + y * width + x`.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2x6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowError, FlowProvider};
use crate::frame_graph::{EdgeSet, FrameGraph, FrameHandle, GraphError};
use crate::geometry::{reproject_field, skew, PinholeCamera, SE3Pose};
use crate::grid::Grid;

/// Reprojected points closer than this to the target camera are ignored.
pub const MIN_POINT_DEPTH: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DbaError {
    #[error("bundle adjustment needs at least two connected keyframes")]
    EmptyGraph,
    #[error("reduced camera system is singular")]
    SingularSystem,
    #[error("reduced camera matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbaConfig {
    /// Added to every depth diagonal entry so unobserved pixels stay
    /// solvable, in squared solver pixels per squared inverse depth.
    pub depth_regularizer: f64,
    pub initial_damping: f64,
    pub max_step_retries: usize,
    pub min_inv_depth: f64,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    /// Strength of the pose-space scale anchor relative to the mean camera
    /// diagonal. Zero disables it.
    pub scale_prior_weight: f64,
    /// Keep the mean inverse depth of the pinned keyframe fixed by rescaling
    /// the solution about the pinned camera after each accepted step.
    pub normalize_scale: bool,
    pub update_covariance: bool,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self {
            depth_regularizer: 1e-3,
            initial_damping: 1e-4,
            max_step_retries: 10,
            min_inv_depth: 1e-4,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-9,
            scale_prior_weight: 1.0,
            normalize_scale: true,
            update_covariance: true,
        }
    }
}

/// Gauss-Newton normal equations `[C E; E^T P] [dxi; dd] = [v; w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub c: DMatrix<f64>,
    /// Nonzero 6-blocks of column `m` of `E`, sorted by pose index.
    pub e: Vec<Vec<(usize, Vector6<f64>)>>,
    pub p: DVector<f64>,
    pub v: DVector<f64>,
    pub w: DVector<f64>,
    pub pinned: Vec<bool>,
    /// Weighted squared residual at the linearization point.
    pub cost: f64,
}

impl NormalEquations {
    pub fn zeros(num_poses: usize, num_depths: usize) -> Self {
        Self {
            c: DMatrix::zeros(6 * num_poses, 6 * num_poses),
            e: vec![Vec::new(); num_depths],
            p: DVector::zeros(num_depths),
            v: DVector::zeros(6 * num_poses),
            w: DVector::zeros(num_depths),
            pinned: vec![false; num_poses],
            cost: 0.0,
        }
    }

    pub fn num_poses(&self) -> usize {
        self.pinned.len()
    }

    pub fn num_depths(&self) -> usize {
        self.p.len()
    }

    /// Block `(k, m)` of `E`, zero when absent.
    pub fn e_block(&self, m: usize, k: usize) -> Vector6<f64> {
        self.e[m]
            .iter()
            .find(|(idx, _)| *idx == k)
            .map(|(_, b)| *b)
            .unwrap_or_else(Vector6::zeros)
    }

    fn e_add(&mut self, m: usize, k: usize, block: Vector6<f64>) {
        let col = &mut self.e[m];
        match col.binary_search_by_key(&k, |(idx, _)| *idx) {
            Ok(pos) => col[pos].1 += block,
            Err(pos) => col.insert(pos, (k, block)),
        }
    }

    /// Accumulates one 2D residual `r = target - projection` depending on
    /// the listed poses through `pose_jacobians` and on depth `m` through
    /// `depth_jacobian`. Jacobians are of the projection, not the residual.
    pub fn add_observation(
        &mut self,
        m: usize,
        pose_jacobians: &[(usize, Matrix2x6<f64>)],
        depth_jacobian: Vector2<f64>,
        weight: Vector2<f64>,
        residual: Vector2<f64>,
    ) {
        let wr = weight.component_mul(&residual);
        let wjd = weight.component_mul(&depth_jacobian);
        for &(k, jk) in pose_jacobians {
            let wjk = Matrix2x6::from_rows(&[jk.row(0) * weight.x, jk.row(1) * weight.y]);
            for &(l, jl) in pose_jacobians {
                let block = jk.transpose()
                    * Matrix2x6::from_rows(&[jl.row(0) * weight.x, jl.row(1) * weight.y]);
                let mut view = self.c.fixed_view_mut::<6, 6>(6 * k, 6 * l);
                view += block;
            }
            let mut vk = self.v.fixed_rows_mut::<6>(6 * k);
            vk += jk.transpose() * wr;
            self.e_add(m, k, wjk.transpose() * depth_jacobian);
        }
        self.p[m] += depth_jacobian.dot(&wjd);
        self.w[m] += depth_jacobian.dot(&wr);
        self.cost += residual.dot(&wr);
    }

    /// Removes pose `k` from the problem: identity block in `C`, zero
    /// coupling and zero right-hand side.
    pub fn pin(&mut self, k: usize) {
        let n = self.c.nrows();
        for r in 0..6 {
            for col in 0..n {
                self.c[(6 * k + r, col)] = 0.0;
                self.c[(col, 6 * k + r)] = 0.0;
            }
            self.c[(6 * k + r, 6 * k + r)] = 1.0;
            self.v[6 * k + r] = 0.0;
        }
        for col in &mut self.e {
            col.retain(|(idx, _)| *idx != k);
        }
        self.pinned[k] = true;
    }

    pub fn add_depth_regularizer(&mut self, eta: f64) {
        self.p.add_scalar_mut(eta);
    }
}

/// Projection of one pixel of frame `i` into frame `j` and its Jacobians
/// with respect to left pose increments and the inverse depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLinearization {
    pub projection: Vector2<f64>,
    pub point_j: Vector3<f64>,
    pub jac_i: Matrix2x6<f64>,
    pub jac_j: Matrix2x6<f64>,
    pub jac_d: Vector2<f64>,
}

/// `None` when the point lands closer than [`MIN_POINT_DEPTH`] to camera `j`
/// or the inverse depth is not positive.
pub fn linearize_pixel(
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    camera: &PinholeCamera,
    pixel: &Vector2<f64>,
    inv_depth: f64,
) -> Option<PixelLinearization> {
    if inv_depth <= 0.0 {
        return None;
    }
    let ray = camera.ray(pixel);
    let r_i = pose_i.rotation_matrix();
    let r_jt = pose_j.rotation_matrix().transpose();
    let x_w = r_i * (ray / inv_depth) + pose_i.translation;
    let x_j = r_jt * (x_w - pose_j.translation);
    if x_j.z <= MIN_POINT_DEPTH {
        return None;
    }
    let jp = camera.project_jacobian(&x_j);
    // d X_j / d xi_i = R_j^T [I, -[X_w]x]; the j increment enters negated.
    let mut a = Matrix3x6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_jt);
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-r_jt * skew(&x_w)));
    let jac_i = jp * a;
    let dx_dd = r_jt * r_i * (-ray / (inv_depth * inv_depth));
    Some(PixelLinearization {
        projection: camera.project_unchecked(&x_j),
        point_j: x_j,
        jac_i,
        jac_j: -jac_i,
        jac_d: jp * dx_dd,
    })
}

type Matrix3x6 = nalgebra::Matrix3x6<f64>;

/// Poses and inverse depths of the keyframes taking part in one problem.
#[derive(Clone, Debug, PartialEq)]
pub struct BaState {
    pub poses: Vec<SE3Pose>,
    pub depths: Vec<Grid<f64>>,
}

impl BaState {
    pub fn pixels_per_frame(&self) -> usize {
        self.depths.first().map_or(0, |d| d.len())
    }

    fn check(&self, camera: &PinholeCamera) -> Result<(), DbaError> {
        if self.poses.len() != self.depths.len() {
            return Err(DbaError::DimensionMismatch(format!(
                "{} poses vs {} depth maps",
                self.poses.len(),
                self.depths.len()
            )));
        }
        if let Some(d) = self
            .depths
            .iter()
            .find(|d| d.dims() != (camera.width, camera.height))
        {
            return Err(DbaError::DimensionMismatch(format!(
                "depth map {:?} vs solver camera {}x{}",
                d.dims(),
                camera.width,
                camera.height
            )));
        }
        Ok(())
    }
}

/// Flow targets and confidences of one directed edge, indices into a
/// [`BaState`].
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeObservation {
    pub i: usize,
    pub j: usize,
    pub targets: Grid<Vector2<f64>>,
    pub confidence: Grid<Vector2<f64>>,
}

/// Normal equations of the weighted reprojection cost. Pose `pinned` is
/// removed from the problem and `config.depth_regularizer` is added to `P`.
pub fn residuals_and_jacobians(
    state: &BaState,
    camera: &PinholeCamera,
    observations: &[EdgeObservation],
    pinned: usize,
    config: &DbaConfig,
) -> Result<NormalEquations, DbaError> {
    if observations.is_empty() || state.poses.len() < 2 {
        return Err(DbaError::EmptyGraph);
    }
    state.check(camera)?;
    let n = state.pixels_per_frame();
    let (w, h) = (camera.width, camera.height);
    let mut ne = NormalEquations::zeros(state.poses.len(), n * state.poses.len());
    for obs in observations {
        check_observation(obs, state, camera)?;
        let (gi, gj) = (&state.poses[obs.i], &state.poses[obs.j]);
        for y in 0..h {
            for x in 0..w {
                let conf = obs.confidence[(x, y)];
                if conf.x <= 0.0 && conf.y <= 0.0 {
                    continue;
                }
                let d = state.depths[obs.i][(x, y)];
                let pixel = Vector2::new(x as f64, y as f64);
                let Some(lin) = linearize_pixel(gi, gj, camera, &pixel, d) else {
                    continue;
                };
                let r = obs.targets[(x, y)] - lin.projection;
                ne.add_observation(
                    obs.i * n + y * w + x,
                    &[(obs.i, lin.jac_i), (obs.j, lin.jac_j)],
                    lin.jac_d,
                    conf,
                    r,
                );
            }
        }
    }
    ne.pin(pinned);
    ne.add_depth_regularizer(config.depth_regularizer);
    Ok(ne)
}

fn check_observation(
    obs: &EdgeObservation,
    state: &BaState,
    camera: &PinholeCamera,
) -> Result<(), DbaError> {
    let k = state.poses.len();
    if obs.i >= k || obs.j >= k || obs.i == obs.j {
        return Err(DbaError::DimensionMismatch(format!(
            "edge ({}, {}) with {k} keyframes",
            obs.i, obs.j
        )));
    }
    let dims = (camera.width, camera.height);
    if obs.targets.dims() != dims || obs.confidence.dims() != dims {
        return Err(DbaError::DimensionMismatch(format!(
            "flow grid {:?} vs solver {:?}",
            obs.targets.dims(),
            dims
        )));
    }
    Ok(())
}

/// Weighted squared reprojection error against fixed targets.
pub fn reprojection_cost(
    state: &BaState,
    camera: &PinholeCamera,
    observations: &[EdgeObservation],
) -> f64 {
    let (w, h) = (camera.width, camera.height);
    let mut cost = 0.0;
    for obs in observations {
        let rel = state.poses[obs.j].inverse().compose(&state.poses[obs.i]);
        for y in 0..h {
            for x in 0..w {
                let conf = obs.confidence[(x, y)];
                if conf.x <= 0.0 && conf.y <= 0.0 {
                    continue;
                }
                let d = state.depths[obs.i][(x, y)];
                if d <= 0.0 {
                    continue;
                }
                let pixel = Vector2::new(x as f64, y as f64);
                let pj = rel.transform_point(&(camera.ray(&pixel) / d));
                if pj.z <= MIN_POINT_DEPTH {
                    continue;
                }
                let r = obs.targets[(x, y)] - camera.project_unchecked(&pj);
                cost += conf.x * r.x * r.x + conf.y * r.y * r.y;
            }
        }
    }
    cost
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchurSolution {
    pub pose_updates: Vec<Vector6<f64>>,
    pub depth_updates: DVector<f64>,
}

/// Reduced camera matrix `C - E P^-1 E^T` and right-hand side
/// `v - E P^-1 w` of the damped system.
fn reduce(
    ne: &NormalEquations,
    damping: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>), DbaError> {
    let mut s = ne.c.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += damping * ne.c[(i, i)];
    }
    let p = ne.p.map(|p| p * (1.0 + damping));
    if p.iter().any(|p| !(*p > 0.0)) {
        return Err(DbaError::SingularSystem);
    }
    let mut rhs = ne.v.clone();
    for (m, col) in ne.e.iter().enumerate() {
        let inv = 1.0 / p[m];
        for &(k, ek) in col {
            let mut rk = rhs.fixed_rows_mut::<6>(6 * k);
            rk -= ek * (ne.w[m] * inv);
            for &(l, el) in col {
                let mut block = s.fixed_view_mut::<6, 6>(6 * k, 6 * l);
                block -= ek * el.transpose() * inv;
            }
        }
    }
    Ok((s, rhs, p))
}

/// Solves `(H + damping * diag(H)) x = b` by eliminating the depth block.
pub fn schur_solve(ne: &NormalEquations, damping: f64) -> Result<SchurSolution, DbaError> {
    let (s, rhs, p) = reduce(ne, damping)?;
    let chol = Cholesky::new(s).ok_or(DbaError::SingularSystem)?;
    let dxi = chol.solve(&rhs);
    let pose_updates: Vec<Vector6<f64>> = (0..ne.num_poses())
        .map(|k| dxi.fixed_rows::<6>(6 * k).into_owned())
        .collect();
    let depth_updates = DVector::from_fn(ne.num_depths(), |m, _| {
        let coupled: f64 = ne.e[m]
            .iter()
            .map(|(k, ek)| ek.dot(&pose_updates[*k]))
            .sum();
        (ne.w[m] - coupled) / p[m]
    });
    Ok(SchurSolution {
        pose_updates,
        depth_updates,
    })
}

/// Marginal inverse-depth variances and the pose covariance
/// `Sigma_G = (C - E P^-1 E^T)^-1`. Pinned pose blocks are reported as zero.
pub fn depth_covariance(ne: &NormalEquations) -> Result<(DVector<f64>, DMatrix<f64>), DbaError> {
    let (s, _, p) = reduce(ne, 0.0).map_err(|_| DbaError::NotPositiveDefinite)?;
    let chol = Cholesky::new(s).ok_or(DbaError::NotPositiveDefinite)?;
    let mut sigma_g = chol.inverse();
    for (k, pinned) in ne.pinned.iter().enumerate() {
        if *pinned {
            sigma_g.rows_mut(6 * k, 6).fill(0.0);
            sigma_g.columns_mut(6 * k, 6).fill(0.0);
        }
    }
    let sigma_d = DVector::from_fn(ne.num_depths(), |m, _| {
        let mut quad = 0.0;
        for &(k, ek) in &ne.e[m] {
            for &(l, el) in &ne.e[m] {
                quad += (ek.transpose() * sigma_g.fixed_view::<6, 6>(6 * k, 6 * l) * el)[(0, 0)];
            }
        }
        (1.0 / p[m] + quad / (p[m] * p[m])).max(0.0)
    });
    Ok((sigma_d, sigma_g))
}

/// Adds `kappa * u u^T` to `C`, where `u` is the unit pose-space direction
/// that scales every free camera center about the pinned one. `kappa` is
/// `weight` times the mean free diagonal of `C`.
pub fn add_scale_prior(ne: &mut NormalEquations, poses: &[SE3Pose], pinned: usize, weight: f64) {
    if weight <= 0.0 {
        return;
    }
    let c0 = poses[pinned].center();
    let mut u = DVector::zeros(6 * poses.len());
    let mut diag = 0.0;
    let mut count = 0usize;
    for (k, pose) in poses.iter().enumerate() {
        if ne.pinned[k] {
            continue;
        }
        u.fixed_rows_mut::<3>(6 * k)
            .copy_from(&(pose.center() - c0));
        for r in 0..6 {
            diag += ne.c[(6 * k + r, 6 * k + r)];
            count += 1;
        }
    }
    let norm = u.norm();
    if norm < 1e-12 || count == 0 {
        return;
    }
    u /= norm;
    let kappa = weight * diag / count as f64;
    ne.c += &u * u.transpose() * kappa;
}

/// State after applying a solver step; inverse depths are clamped below.
pub fn apply_update(
    state: &BaState,
    step: &SchurSolution,
    pinned: usize,
    min_inv_depth: f64,
) -> BaState {
    let n = state.pixels_per_frame();
    let poses = state
        .poses
        .iter()
        .enumerate()
        .map(|(k, g)| {
            if k == pinned {
                *g
            } else {
                g.retract(&step.pose_updates[k])
            }
        })
        .collect();
    let depths = state
        .depths
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let mut out = d.clone();
            for (idx, v) in out.as_mut_slice().iter_mut().enumerate() {
                *v = (*v + step.depth_updates[k * n + idx]).max(min_inv_depth);
            }
            out
        })
        .collect();
    BaState { poses, depths }
}

fn mean(values: &Grid<f64>) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Applies the exact scale gauge transformation that restores the pinned
/// keyframe's mean inverse depth to `anchor`.
pub fn normalize_scale(state: &mut BaState, pinned: usize, anchor: f64) {
    let current = mean(&state.depths[pinned]);
    if !(current > 0.0 && anchor > 0.0) {
        return;
    }
    let c = anchor / current;
    let c0 = state.poses[pinned].center();
    for (k, pose) in state.poses.iter_mut().enumerate() {
        if k != pinned {
            pose.translation = c0 + (pose.translation - c0) / c;
        }
    }
    for d in &mut state.depths {
        for v in d.as_mut_slice() {
            *v *= c;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, against that iteration's targets.
    pub accepted_costs: Vec<f64>,
    pub pose_updates_norm: Vec<f64>,
    pub converged: bool,
}

/// Queries the provider for every edge at the current state.
pub fn observe<P: FlowProvider + ?Sized>(
    state: &BaState,
    handles: &[FrameHandle],
    edges: &[(usize, usize)],
    camera: &PinholeCamera,
    provider: &mut P,
) -> Result<Vec<EdgeObservation>, DbaError> {
    edges
        .iter()
        .map(|&(i, j)| {
            let current =
                reproject_field(&state.poses[i], &state.poses[j], camera, &state.depths[i]).coords;
            let rev = provider.flow_revision(handles[i], handles[j], &current)?;
            let targets = Grid::from_fn(current.width(), current.height(), |x, y| {
                current[(x, y)] + rev.revision[(x, y)]
            });
            Ok(EdgeObservation {
                i,
                j,
                targets,
                confidence: rev.confidence,
            })
        })
        .collect()
}

/// Levenberg-Marquardt iterations on an explicit problem. Flow targets are
/// re-queried at the start of every iteration and held fixed while the step
/// is tested.
#[allow(clippy::too_many_arguments)]
pub fn optimize<P: FlowProvider + ?Sized>(
    state: &mut BaState,
    handles: &[FrameHandle],
    edges: &[(usize, usize)],
    pinned: usize,
    camera: &PinholeCamera,
    provider: &mut P,
    config: &DbaConfig,
    iterations: usize,
) -> Result<BaReport, DbaError> {
    if edges.is_empty() || state.poses.len() < 2 {
        return Err(DbaError::EmptyGraph);
    }
    state.check(camera)?;
    let anchor = mean(&state.depths[pinned]);
    let mut report = BaReport {
        iterations: 0,
        initial_cost: 0.0,
        final_cost: 0.0,
        accepted_costs: Vec::new(),
        pose_updates_norm: Vec::new(),
        converged: false,
    };
    let mut damping = config.initial_damping;
    for it in 0..iterations {
        let obs = observe(state, handles, edges, camera, provider)?;
        let mut ne = residuals_and_jacobians(state, camera, &obs, pinned, config)?;
        add_scale_prior(&mut ne, &state.poses, pinned, config.scale_prior_weight);
        if it == 0 {
            report.initial_cost = ne.cost;
        }
        report.iterations = it + 1;
        report.final_cost = ne.cost;
        if ne.cost < config.cost_tolerance {
            report.converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=config.max_step_retries {
            let step = match schur_solve(&ne, damping) {
                Ok(s) => s,
                Err(DbaError::SingularSystem) => {
                    damping *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let trial = apply_update(state, &step, pinned, config.min_inv_depth);
            let trial_cost = reprojection_cost(&trial, camera, &obs);
            if trial_cost <= ne.cost {
                damping = (damping / 10.0).max(1e-12);
                accepted = Some((trial, trial_cost, step));
                break;
            }
            damping *= 10.0;
        }
        let Some((trial, trial_cost, step)) = accepted else {
            break;
        };
        *state = trial;
        if config.normalize_scale {
            normalize_scale(state, pinned, anchor);
        }
        let step_norm = step
            .pose_updates
            .iter()
            .map(|s| s.norm_squared())
            .sum::<f64>()
            .sqrt();
        let depth_norm = step.depth_updates.amax();
        report.final_cost = trial_cost;
        report.accepted_costs.push(trial_cost);
        report.pose_updates_norm.push(step_norm);
        if trial_cost < config.cost_tolerance
            || (step_norm < config.step_tolerance && depth_norm < config.step_tolerance)
        {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Marginal inverse-depth variances of every keyframe in `state`, one grid
/// per keyframe, from a fresh linearization.
pub fn state_covariance<P: FlowProvider + ?Sized>(
    state: &BaState,
    handles: &[FrameHandle],
    edges: &[(usize, usize)],
    pinned: usize,
    camera: &PinholeCamera,
    provider: &mut P,
    config: &DbaConfig,
) -> Result<Vec<Grid<f64>>, DbaError> {
    let obs = observe(state, handles, edges, camera, provider)?;
    let mut ne = residuals_and_jacobians(state, camera, &obs, pinned, config)?;
    add_scale_prior(&mut ne, &state.poses, pinned, config.scale_prior_weight);
    let (sigma_d, _) = depth_covariance(&ne)?;
    let n = state.pixels_per_frame();
    Ok((0..state.poses.len())
        .map(|k| {
            Grid::from_vec(
                camera.width,
                camera.height,
                sigma_d.as_slice()[k * n..(k + 1) * n].to_vec(),
            )
        })
        .collect())
}

/// Runs bundle adjustment on the keyframes referenced by `edges`, pinning
/// the oldest of them, and writes poses, inverse depths and (optionally)
/// depth variances back into the graph.
pub fn ba_iterate<P: FlowProvider + ?Sized>(
    graph: &mut FrameGraph,
    edges: &EdgeSet,
    provider: &mut P,
    camera: &PinholeCamera,
    config: &DbaConfig,
    iterations: usize,
) -> Result<BaReport, DbaError> {
    let mut ids: Vec<u64> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(DbaError::EmptyGraph);
    }
    let mut indices = Vec::with_capacity(ids.len());
    for &id in &ids {
        indices.push(graph.index_of(id).ok_or(GraphError::UnknownKeyframe(id))?);
    }
    let local = |id: u64| ids.binary_search(&id).expect("edge id collected above");
    let local_edges: Vec<(usize, usize)> =
        edges.iter().map(|&(a, b)| (local(a), local(b))).collect();
    let kfs = graph.keyframes();
    let handles: Vec<FrameHandle> = indices.iter().map(|&i| kfs[i].handle).collect();
    let mut state = BaState {
        poses: indices.iter().map(|&i| kfs[i].pose).collect(),
        depths: indices
            .iter()
            .map(|&i| kfs[i].depth.values.clone())
            .collect(),
    };
    let report = optimize(
        &mut state,
        &handles,
        &local_edges,
        0,
        camera,
        provider,
        config,
        iterations,
    )?;
    let covariance = if config.update_covariance {
        Some(state_covariance(
            &state,
            &handles,
            &local_edges,
            0,
            camera,
            provider,
            config,
        )?)
    } else {
        None
    };
    let kfs = graph.keyframes_mut();
    for (local_idx, &i) in indices.iter().enumerate() {
        kfs[i].pose = state.poses[local_idx];
        kfs[i].depth.values = state.depths[local_idx].clone();
        if let Some(cov) = &covariance {
            kfs[i].depth.covariance = cov[local_idx].clone();
        }
    }
    Ok(report)
}
