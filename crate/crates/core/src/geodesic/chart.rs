use super::{nearest_among, EdgeGraph, GeodesicError, TangentFrame};
use crate::util::{self, Vec3};

/// Number of chart entries: the centre plus its eight nearest neighbours.
pub const CHART_SIZE: usize = 9;

/// Polar tangent-plane coordinates of the vertices nearest to a centre.
///
/// Entry 0 is always the centre itself at the origin; the remaining
/// entries are sorted by ascending `(distance, index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMapChart {
    pub center: usize,
    pub neighbor_ids: [usize; CHART_SIZE],
    /// `(x, y)` along `(e1, e2)` of the centre's frame. The radius equals
    /// the edge-graph distance from the centre.
    pub coords: [[f64; 2]; CHART_SIZE],
}

impl LogMapChart {
    pub fn radii(&self) -> [f64; CHART_SIZE] {
        self.coords.map(|c| c[0].hypot(c[1]))
    }

    /// Mean radius over the non-centre entries.
    pub fn mean_neighbor_radius(&self) -> f64 {
        self.radii()[1..].iter().sum::<f64>() / (CHART_SIZE - 1) as f64
    }
}

/// Chart over all mesh vertices.
pub fn build_log_chart(
    graph: &EdgeGraph,
    positions: &[Vec3],
    frame: &TangentFrame,
) -> Result<LogMapChart, GeodesicError> {
    let all = vec![true; graph.vertex_count()];
    build_log_chart_among(graph, positions, frame, &all)
}

/// Chart whose entries are restricted to `candidates` (a coarse level's
/// vertices) while paths still run over the full edge graph.
///
/// Each entry's angle is the direction of the first edge on its shortest
/// path, projected into the frame and measured from `e1`. When that edge
/// is (nearly) parallel to the normal the chord to the entry is used
/// instead.
pub fn build_log_chart_among(
    graph: &EdgeGraph,
    positions: &[Vec3],
    frame: &TangentFrame,
    candidates: &[bool],
) -> Result<LogMapChart, GeodesicError> {
    let center = frame.origin;
    if center >= graph.vertex_count() {
        return Err(GeodesicError::InvalidVertex(center));
    }
    let available = candidates.iter().filter(|&&c| c).count() + usize::from(!candidates[center]);
    if available < CHART_SIZE + 1 {
        return Err(GeodesicError::TooFewNeighbors(available));
    }
    let mut mask = candidates.to_vec();
    mask[center] = true;
    let (field, order) = nearest_among(graph, center, CHART_SIZE, &mask);
    if order.len() < CHART_SIZE {
        return Err(GeodesicError::DisconnectedMesh(center));
    }
    debug_assert_eq!(order[0], center);

    let origin = positions[center];
    let mut neighbor_ids = [center; CHART_SIZE];
    let mut coords = [[0.0; 2]; CHART_SIZE];
    for (slot, &v) in order.iter().enumerate().skip(1) {
        neighbor_ids[slot] = v;
        let r = field.dist[v];
        let hop = field.first_hop(v).expect("settled vertex has a path");
        let in_plane = |d: Vec3| [util::dot(d, frame.e1), util::dot(d, frame.e2)];
        let edge = util::sub(positions[hop], origin);
        let mut dir = in_plane(edge);
        if dir[0].hypot(dir[1]) < 1e-6 * util::norm(edge) {
            dir = in_plane(util::sub(positions[v], origin));
        }
        let angle = if dir[0] == 0.0 && dir[1] == 0.0 {
            0.0
        } else {
            dir[1].atan2(dir[0])
        };
        coords[slot] = [r * angle.cos(), r * angle.sin()];
    }
    Ok(LogMapChart {
        center,
        neighbor_ids,
        coords,
    })
}
