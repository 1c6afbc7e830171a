//! Keyframe store and covisibility graph.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::geometry::{reproject_field, InverseDepthMap, PinholeCamera, SE3Pose};
use crate::grid::Image;

/// Opaque reference a flow provider uses to find its per-frame data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameHandle(pub u64);

pub type KeyframeId = u64;

/// Directed edges between keyframe ids.
pub type EdgeSet = BTreeSet<(KeyframeId, KeyframeId)>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("need at least 2 keyframes, have {0}")]
    InsufficientKeyframes(usize),
    #[error("window must be at least 2, got {0}")]
    InvalidWindow(usize),
    #[error("keyframe id {new} is not greater than last id {last}")]
    NonMonotoneId { last: KeyframeId, new: KeyframeId },
    #[error("keyframe image is {got:?}, expected {expected:?}")]
    ImageDimensions {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("edge ({0}, {1}) references a missing keyframe")]
    DanglingEdge(KeyframeId, KeyframeId),
    #[error("self edge on keyframe {0}")]
    SelfEdge(KeyframeId),
    #[error("edge ({0}, {1}) has no reverse edge")]
    AsymmetricEdge(KeyframeId, KeyframeId),
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(KeyframeId),
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub image: Image,
    pub pose: SE3Pose,
    /// Inverse depth and its marginal variance at solver resolution.
    pub depth: InverseDepthMap,
    pub handle: FrameHandle,
    pub timestamp: f64,
}

/// True when the mean flow strictly exceeds the keyframe threshold.
pub fn keyframe_decision(mean_flow_magnitude: f64, threshold: f64) -> bool {
    mean_flow_magnitude > threshold
}

#[derive(Clone, Debug, Default)]
pub struct FrameGraph {
    keyframes: Vec<Keyframe>,
    edges: EdgeSet,
}

impl FrameGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [Keyframe] {
        &mut self.keyframes
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn index_of(&self, id: KeyframeId) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    pub fn get(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.index_of(id).map(|i| &self.keyframes[i])
    }

    pub fn get_mut(&mut self, id: KeyframeId) -> Option<&mut Keyframe> {
        self.index_of(id).map(move |i| &mut self.keyframes[i])
    }

    pub fn insert(&mut self, keyframe: Keyframe) -> Result<(), GraphError> {
        if let Some(last) = self.keyframes.last() {
            if keyframe.id <= last.id {
                return Err(GraphError::NonMonotoneId {
                    last: last.id,
                    new: keyframe.id,
                });
            }
            if keyframe.image.dims() != last.image.dims() {
                return Err(GraphError::ImageDimensions {
                    expected: last.image.dims(),
                    got: keyframe.image.dims(),
                });
            }
        }
        self.keyframes.push(keyframe);
        debug_assert!(self.audit().is_ok());
        Ok(())
    }

    /// Replaces the edge set after validating it against the vertices.
    pub fn set_edges(&mut self, edges: EdgeSet) -> Result<(), GraphError> {
        self.check_edges(&edges)?;
        self.edges = edges;
        Ok(())
    }

    /// Checks every structural invariant of the graph.
    pub fn audit(&self) -> Result<(), GraphError> {
        for pair in self.keyframes.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(GraphError::NonMonotoneId {
                    last: pair[0].id,
                    new: pair[1].id,
                });
            }
            if pair[1].image.dims() != pair[0].image.dims() {
                return Err(GraphError::ImageDimensions {
                    expected: pair[0].image.dims(),
                    got: pair[1].image.dims(),
                });
            }
        }
        self.check_edges(&self.edges)
    }

    fn check_edges(&self, edges: &EdgeSet) -> Result<(), GraphError> {
        for &(i, j) in edges {
            if i == j {
                return Err(GraphError::SelfEdge(i));
            }
            if self.index_of(i).is_none() || self.index_of(j).is_none() {
                return Err(GraphError::DanglingEdge(i, j));
            }
            if !edges.contains(&(j, i)) {
                return Err(GraphError::AsymmetricEdge(i, j));
            }
        }
        Ok(())
    }

    /// Edges among the most recent `window` keyframes, each connected to its
    /// `radius` nearest neighbors by insertion order.
    pub fn build_local_window(&self, window: usize, radius: usize) -> Result<EdgeSet, GraphError> {
        if window < 2 {
            return Err(GraphError::InvalidWindow(window));
        }
        if self.keyframes.len() < 2 {
            return Err(GraphError::InsufficientKeyframes(self.keyframes.len()));
        }
        let start = self.keyframes.len().saturating_sub(window);
        let ids: Vec<KeyframeId> = self.keyframes[start..].iter().map(|k| k.id).collect();
        let mut edges = EdgeSet::new();
        for a in 0..ids.len() {
            for b in (a + 1)..ids.len().min(a + radius + 1) {
                edges.insert((ids[a], ids[b]));
                edges.insert((ids[b], ids[a]));
            }
        }
        Ok(edges)
    }

    /// Consecutive chain plus every pair whose distance falls below
    /// `proximity_threshold`. The distance is queried once per unordered pair.
    pub fn build_global_graph(
        &self,
        mut flow_distance: impl FnMut(&Keyframe, &Keyframe) -> f64,
        proximity_threshold: f64,
    ) -> Result<EdgeSet, GraphError> {
        let n = self.keyframes.len();
        if n < 2 {
            return Err(GraphError::InsufficientKeyframes(n));
        }
        let mut edges = EdgeSet::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let (ka, kb) = (&self.keyframes[a], &self.keyframes[b]);
                if b == a + 1 || flow_distance(ka, kb) < proximity_threshold {
                    edges.insert((ka.id, kb.id));
                    edges.insert((kb.id, ka.id));
                }
            }
        }
        Ok(edges)
    }

    pub fn snapshot(&self) -> FrameGraph {
        self.clone()
    }
}

/// Mean magnitude of the flow induced by the current poses and depths of two
/// keyframes, in solver pixels. `None` when no pixel reprojects validly.
pub fn induced_mean_flow(
    from: &SE3Pose,
    to: &SE3Pose,
    inv_depth: &crate::grid::Grid<f64>,
    camera: &PinholeCamera,
) -> Option<f64> {
    let field = reproject_field(from, to, camera, inv_depth);
    let (w, h) = inv_depth.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if field.valid[(x, y)] {
                let p = field.coords[(x, y)];
                sum += ((p.x - x as f64).powi(2) + (p.y - y as f64).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
