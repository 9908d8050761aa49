//! Parallel transport convolution operators.
//!
//! A PTC layer samples a signal at 13 stencil sites laid out in each
//! vertex's tangent frame, then mixes the samples with learned weights. The
//! sampling step is fixed by the geometry of a reference mesh and is stored
//! here as one sparse matrix per resolution level.

mod hierarchy;

pub use hierarchy::{build_hierarchy, level_sizes, HierarchyConfig, MeshHierarchy, MIN_LEVEL_SIZE};

use crate::container::ContainerError;
use crate::geodesic::{GeodesicError, LogMapChart, CHART_SIZE};
use crate::mesh::MeshError;
use crate::sparse::{CsrMatrix, SparseError};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stencil sites per vertex: the centre plus two rings of six.
pub const STENCIL_SIZE: usize = 13;

/// Distance below which a stencil site counts as sitting on a chart entry.
pub const EXACT_HIT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PtcError {
    #[error("vertex {0} has an empty chart")]
    EmptyChart(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("level {level} would have {size} vertices, below the minimum of {min}")]
    HierarchyTooDeep { level: usize, size: usize, min: usize },
    #[error("cache built for topology {found}, expected {expected}")]
    StaleCache { expected: String, found: String },
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// How stencil samples are interpolated from the nine chart entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Weighted linear least squares with inverse-squared-distance weights.
    /// Reproduces constant and linear signals in chart coordinates; falls
    /// back to plain inverse distance weighting when the fit is singular.
    MovingLeastSquares,
    /// Normalised inverse-squared-distance weights.
    InverseDistance,
}

/// Which diagonal scaling multiplies the signal before interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassScaling {
    /// Vertex masses divided by their mean, so entries stay near 1.
    Normalized,
    /// Lumped vertex masses in m².
    Raw,
    /// No mass weighting.
    Unit,
}

/// 13 stencil sites: the origin, six at `inner·r` and six at `outer·r`,
/// at angles 0°, 60°, …, 300° from `e1`.
pub fn stencil_template_with(mean_radius: f64, inner: f64, outer: f64) -> [[f64; 2]; STENCIL_SIZE] {
    let mut t = [[0.0; 2]; STENCIL_SIZE];
    for k in 0..6 {
        let a = std::f64::consts::FRAC_PI_3 * k as f64;
        let (s, c) = a.sin_cos();
        t[1 + k] = [inner * mean_radius * c, inner * mean_radius * s];
        t[7 + k] = [outer * mean_radius * c, outer * mean_radius * s];
    }
    t
}

/// Template with rings at half and full `mean_radius`.
pub fn stencil_template(mean_radius: f64) -> [[f64; 2]; STENCIL_SIZE] {
    stencil_template_with(mean_radius, 0.5, 1.0)
}

fn inverse_distance(coords: &[[f64; 2]], site: [f64; 2]) -> Vec<f64> {
    let w: Vec<f64> = coords
        .iter()
        .map(|p| 1.0 / ((p[0] - site[0]).powi(2) + (p[1] - site[1]).powi(2)))
        .collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Interpolation weights of `site` over chart entries at `coords`. The
/// weights always sum to one.
pub fn site_weights(coords: &[[f64; 2]], site: [f64; 2], scheme: Interpolation) -> Vec<f64> {
    let dist2: Vec<f64> = coords
        .iter()
        .map(|p| (p[0] - site[0]).powi(2) + (p[1] - site[1]).powi(2))
        .collect();
    if let Some(hit) = dist2.iter().position(|&d| d.sqrt() <= EXACT_HIT) {
        let mut w = vec![0.0; coords.len()];
        w[hit] = 1.0;
        return w;
    }
    if scheme == Interpolation::InverseDistance {
        return inverse_distance(coords, site);
    }
    // Offsets are scaled by the largest distance so the normal matrix is
    // dimensionless and its conditioning test scale free.
    let h = dist2.iter().cloned().fold(0.0, f64::max).sqrt();
    let basis: Vec<Vector3<f64>> = coords
        .iter()
        .map(|p| Vector3::new(1.0, (p[0] - site[0]) / h, (p[1] - site[1]) / h))
        .collect();
    let w: Vec<f64> = dist2.iter().map(|d| h * h / d).collect();
    let mut a = Matrix3::zeros();
    for (b, &wi) in basis.iter().zip(&w) {
        a += b * b.transpose() * wi;
    }
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let Some(inv) = (lo > 1e-10 * hi).then(|| a.try_inverse()).flatten() else {
        return inverse_distance(coords, site);
    };
    let e0 = inv.column(0).into_owned();
    basis.iter().zip(&w).map(|(b, &wi)| wi * b.dot(&e0)).collect()
}

/// Fixed sampling matrix and vertex masses of one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct PtcOperator {
    pub vertex_count: usize,
    pub stencil_size: usize,
    /// `(n·K) × n`; row `v·K + k` samples stencil site `k` of vertex `v`.
    pub interp: CsrMatrix,
    /// Lumped vertex masses (m²).
    pub mass: Vec<f64>,
    pub mass_scaling: MassScaling,
}

impl PtcOperator {
    /// Diagonal applied to the signal before interpolation.
    pub fn mass_weights(&self) -> Vec<f64> {
        match self.mass_scaling {
            MassScaling::Raw => self.mass.clone(),
            MassScaling::Unit => vec![1.0; self.vertex_count],
            MassScaling::Normalized => {
                let mean = crate::util::mean(&self.mass);
                self.mass.iter().map(|m| m / mean).collect()
            }
        }
    }

    /// `F · M`, the matrix the network multiplies its signals by.
    pub fn effective_matrix(&self) -> CsrMatrix {
        self.interp
            .scale_columns(&self.mass_weights())
            .expect("mass has one entry per column")
    }

    pub fn with_mass_scaling(&self, mass_scaling: MassScaling) -> Self {
        PtcOperator {
            mass_scaling,
            ..self.clone()
        }
    }
}

/// Assembles the sampling matrix from one chart per vertex (chart `i` must
/// be centred on local vertex `i`; entries are local indices).
pub fn assemble_operator(
    charts: &[LogMapChart],
    masses: &[f64],
    template: &[[f64; 2]; STENCIL_SIZE],
    scheme: Interpolation,
    mass_scaling: MassScaling,
) -> Result<PtcOperator, PtcError> {
    let n = charts.len();
    if masses.len() != n {
        return Err(PtcError::ShapeMismatch(format!(
            "{} masses for {n} charts",
            masses.len()
        )));
    }
    let mut triplets = Vec::with_capacity(n * STENCIL_SIZE * CHART_SIZE);
    for (v, chart) in charts.iter().enumerate() {
        if chart.neighbor_ids.iter().any(|&id| id >= n) || chart.coords.is_empty() {
            return Err(PtcError::EmptyChart(v));
        }
        for (k, &site) in template.iter().enumerate() {
            let w = site_weights(&chart.coords, site, scheme);
            for (&id, &wi) in chart.neighbor_ids.iter().zip(&w) {
                if wi != 0.0 {
                    triplets.push((v * STENCIL_SIZE + k, id, wi));
                }
            }
        }
    }
    Ok(PtcOperator {
        vertex_count: n,
        stencil_size: STENCIL_SIZE,
        interp: CsrMatrix::from_triplets(n * STENCIL_SIZE, n, &triplets)?,
        mass: masses.to_vec(),
        mass_scaling,
    })
}

/// Stencil samples `F · M · f` of a row-major `n × channels` signal.
pub fn apply_ptc(op: &PtcOperator, signal: &[f64], channels: usize) -> Result<Vec<f64>, PtcError> {
    if signal.len() != op.vertex_count * channels {
        return Err(PtcError::ShapeMismatch(format!(
            "signal has {} values, operator expects {}x{channels}",
            signal.len(),
            op.vertex_count
        )));
    }
    let m = op.mass_weights();
    let scaled: Vec<f64> = signal
        .chunks(channels)
        .zip(&m)
        .flat_map(|(row, w)| row.iter().map(move |x| x * w))
        .collect();
    Ok(op.interp.matmul_dense(&scaled, channels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesic::{build_log_chart, compute_frames, dijkstra, EdgeGraph};
    use crate::mesh::{compute_cfan, primitives, vertex_mass, TriangleMesh};
    use crate::util;
    use proptest::prelude::*;

    fn operator_for(mesh: &TriangleMesh, scheme: Interpolation) -> (PtcOperator, Vec<crate::geodesic::TangentFrame>) {
        let g = EdgeGraph::from_mesh(mesh);
        let feat = compute_cfan(mesh).unwrap();
        let field = dijkstra(&g, 0).unwrap();
        let frames: Vec<_> = compute_frames(mesh, &feat, &field)
            .unwrap()
            .into_iter()
            .map(|(f, _)| f)
            .collect();
        let charts: Vec<_> = frames
            .iter()
            .map(|f| build_log_chart(&g, mesh.vertices(), f).unwrap())
            .collect();
        let r = charts.iter().map(|c| c.mean_neighbor_radius()).sum::<f64>() / charts.len() as f64;
        let op = assemble_operator(
            &charts,
            &vertex_mass(mesh),
            &stencil_template(r),
            scheme,
            MassScaling::Normalized,
        )
        .unwrap();
        (op, frames)
    }

    #[test]
    fn template_layout() {
        let t = stencil_template(2.0);
        assert_eq!(t[0], [0.0, 0.0]);
        assert_eq!(t[1], [1.0, 0.0]);
        assert_eq!(t[7], [2.0, 0.0]);
        // rotating by 60° permutes each ring
        for ring in [1..7, 7..13] {
            for k in ring.clone() {
                let (s, c) = std::f64::consts::FRAC_PI_3.sin_cos();
                let p = [c * t[k][0] - s * t[k][1], s * t[k][0] + c * t[k][1]];
                assert!(ring
                    .clone()
                    .any(|j| (t[j][0] - p[0]).abs() < 1e-12 && (t[j][1] - p[1]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn weights_reproduce_constants_and_exact_hits() {
        let coords = [[0.0, 0.0], [1.0, 0.1], [-0.5, 0.8], [0.3, -0.9], [1.2, 1.0]];
        for scheme in [Interpolation::MovingLeastSquares, Interpolation::InverseDistance] {
            let w = site_weights(&coords, [0.2, 0.3], scheme);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let w = site_weights(&coords, [-0.5, 0.8 + 1e-12], scheme);
            assert_eq!(w, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        }
        // MLS is exact on linear data
        let w = site_weights(&coords, [0.2, 0.3], Interpolation::MovingLeastSquares);
        let f = |p: &[f64; 2]| 2.0 * p[0] - 3.0 * p[1] + 0.5;
        let est: f64 = coords.iter().zip(&w).map(|(p, wi)| wi * f(p)).sum();
        assert!((est - f(&[0.2, 0.3])).abs() < 1e-12);
    }

    #[test]
    fn collinear_entries_fall_back_to_inverse_distance() {
        let coords = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let w = site_weights(&coords, [0.5, 1.0], Interpolation::MovingLeastSquares);
        assert_eq!(w, site_weights(&coords, [0.5, 1.0], Interpolation::InverseDistance));
    }

    #[test]
    fn rows_sum_to_one_and_center_rows_hit_their_vertex() {
        let m = primitives::icosphere(2, 1.0);
        let (op, _) = operator_for(&m, Interpolation::MovingLeastSquares);
        assert_eq!(op.interp.rows(), m.vertex_count() * STENCIL_SIZE);
        assert!(op.interp.max_row_nnz() <= CHART_SIZE);
        for s in op.interp.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
        let f: Vec<f64> = (0..m.vertex_count()).map(|i| (i as f64 * 0.37).sin()).collect();
        let unit = op.with_mass_scaling(MassScaling::Unit);
        let out = apply_ptc(&unit, &f, 1).unwrap();
        for v in 0..m.vertex_count() {
            assert_eq!(out[v * STENCIL_SIZE], f[v]);
        }
    }

    #[test]
    fn planar_linear_signal_is_reproduced() {
        let grid = primitives::planar_grid(8, 8, 0.25);
        let (op, frames) = operator_for(&grid, Interpolation::MovingLeastSquares);
        let p = grid.vertices();
        // shift so x stays well away from zero for the relative check
        let f: Vec<f64> = p.iter().map(|v| v[0] + 1.0).collect();
        let unit = op.with_mass_scaling(MassScaling::Unit);
        let out = apply_ptc(&unit, &f, 1).unwrap();
        let mean_r = {
            let g = EdgeGraph::from_mesh(&grid);
            let c: Vec<_> = frames.iter().map(|fr| build_log_chart(&g, p, fr).unwrap()).collect();
            c.iter().map(|c| c.mean_neighbor_radius()).sum::<f64>() / c.len() as f64
        };
        let t = stencil_template(mean_r);
        // interior vertices only: two cells from the border
        for (v, fr) in frames.iter().enumerate() {
            if p[v][0] < 0.5 || p[v][0] > 1.5 || p[v][1] < 0.5 || p[v][1] > 1.5 {
                continue;
            }
            for (k, s) in t.iter().enumerate() {
                let world = util::add(p[v], util::add(util::scale(fr.e1, s[0]), util::scale(fr.e2, s[1])));
                let truth = world[0] + 1.0;
                let got = out[v * STENCIL_SIZE + k];
                assert!((got - truth).abs() <= 0.05 * truth.abs(), "v{v} k{k}: {got} vs {truth}");
            }
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let m = primitives::capsule_with(8, 2, 3);
        assert_eq!(m.vertex_count(), 50);
        let (op, _) = operator_for(&m, Interpolation::MovingLeastSquares);
        let n = m.vertex_count();
        let dense = op.interp.to_dense();
        let mw = op.mass_weights();
        let f: Vec<f64> = (0..n * 2).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let got = apply_ptc(&op, &f, 2).unwrap();
        for r in 0..n * STENCIL_SIZE {
            for ch in 0..2 {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += dense[r][j] * mw[j] * f[j * 2 + ch];
                }
                assert!((got[r * 2 + ch] - acc).abs() < 1e-12);
            }
        }
        assert!(apply_ptc(&op, &f[1..], 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn apply_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let m = primitives::icosphere(1, 1.0);
            let (op, _) = operator_for(&m, Interpolation::MovingLeastSquares);
            let n = m.vertex_count();
            let f: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let g: Vec<f64> = (0..n).map(|i| ((i as u64 * 13 + seed * 7) % 23) as f64 * 0.1).collect();
            let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let lhs = apply_ptc(&op, &mix, 1).unwrap();
            let (pf, pg) = (apply_ptc(&op, &f, 1).unwrap(), apply_ptc(&op, &g, 1).unwrap());
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (a * pf[i] + b * pg[i])).abs() < 1e-12 * lhs[i].abs().max(1.0));
            }
        }
    }
}
