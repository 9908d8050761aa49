use super::{MeshError, TriangleMesh};
use crate::util::{self, Vec3};
use serde::{Deserialize, Serialize};

/// Tolerance on the unit length of every vertex normal.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

/// Per-vertex conformal factor and unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct CfanFeature {
    /// `c_i = log Σ_{τ∋i} Area(τ)/3`
    pub conformal: Vec<f64>,
    /// Area-weighted average of incident face normals, unit length.
    pub normals: Vec<Vec3>,
}

impl CfanFeature {
    pub fn vertex_count(&self) -> usize {
        self.conformal.len()
    }

    /// Row-major `n × 4` layout: `(c, nx, ny, nz)` per vertex.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.conformal.len() * 4);
        for (c, n) in self.conformal.iter().zip(&self.normals) {
            out.extend_from_slice(&[*c, n[0], n[1], n[2]]);
        }
        out
    }
}

/// Incident faces of each vertex, in face order.
fn incidence(mesh: &TriangleMesh) -> Vec<Vec<usize>> {
    let mut inc = vec![Vec::new(); mesh.vertex_count()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        for &v in f {
            inc[v].push(fi);
        }
    }
    inc
}

fn face_terms(mesh: &TriangleMesh) -> Result<Vec<(f64, Vec3)>, MeshError> {
    (0..mesh.face_count()).map(|f| mesh.face_area_and_normal(f)).collect()
}

/// Lumped vertex mass `Σ_{τ∋i} Area(τ)/3`.
pub fn vertex_mass(mesh: &TriangleMesh) -> Vec<f64> {
    let terms = face_terms(mesh).expect("validated mesh has no degenerate faces");
    incidence(mesh)
        .iter()
        .map(|faces| {
            let thirds: Vec<f64> = faces.iter().map(|&f| terms[f].0 / 3.0).collect();
            util::pairwise_sum(&thirds)
        })
        .collect()
}

pub fn compute_cfan(mesh: &TriangleMesh) -> Result<CfanFeature, MeshError> {
    let terms = face_terms(mesh)?;
    let inc = incidence(mesh);
    let mut conformal = Vec::with_capacity(inc.len());
    let mut normals = Vec::with_capacity(inc.len());
    let mut scratch = Vec::new();
    for (v, faces) in inc.iter().enumerate() {
        if faces.is_empty() {
            return Err(MeshError::IsolatedVertex(v));
        }
        scratch.clear();
        scratch.extend(faces.iter().map(|&f| terms[f].0 / 3.0));
        let mass = util::pairwise_sum(&scratch);
        if mass <= 0.0 {
            return Err(MeshError::IsolatedVertex(v));
        }
        conformal.push(mass.ln());

        let mut weighted = [0.0; 3];
        for (k, w) in weighted.iter_mut().enumerate() {
            scratch.clear();
            scratch.extend(faces.iter().map(|&f| terms[f].0 * terms[f].1[k]));
            *w = util::pairwise_sum(&scratch);
        }
        // Norm of the weighted vector sum, so the result has unit length.
        let n = util::normalized(weighted, 1e-300)
            .ok_or_else(|| MeshError::Validation(format!("vertex {v} has cancelling face normals")))?;
        normals.push(n);
    }
    Ok(CfanFeature { conformal, normals })
}

/// Per-vertex, per-channel z-scoring fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub vertex_count: usize,
    pub channels: usize,
    /// Row-major `vertex_count × channels`.
    pub mean: Vec<f64>,
    /// Same layout as `mean`. Each entry is at least
    /// [`FeatureNormalizer::STD_FLOOR`] and at least
    /// [`FeatureNormalizer::RELATIVE_FLOOR`] times its channel's mean.
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    pub const STD_FLOOR: f64 = 1e-6;
    /// Nearly constant entries (a normal component at a pole, say) would
    /// otherwise blow up any input that strays from the training set.
    pub const RELATIVE_FLOOR: f64 = 0.1;

    /// Fits statistics from samples laid out row-major `vertex_count × channels`.
    pub fn fit(samples: &[Vec<f64>], vertex_count: usize, channels: usize) -> Result<Self, MeshError> {
        if samples.len() < 2 {
            return Err(MeshError::ShapeMismatch(format!(
                "normalizer needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let width = vertex_count * channels;
        if let Some(bad) = samples.iter().find(|s| s.len() != width) {
            return Err(MeshError::ShapeMismatch(format!(
                "expected {width} values per sample, got {}",
                bad.len()
            )));
        }
        let count = samples.len() as f64;
        let mut mean = vec![0.0; width];
        let mut column = vec![0.0; samples.len()];
        for (j, m) in mean.iter_mut().enumerate() {
            for (c, s) in column.iter_mut().zip(samples) {
                *c = s[j];
            }
            *m = util::pairwise_sum(&column) / count;
        }
        let mut std = vec![0.0; width];
        for (j, sd) in std.iter_mut().enumerate() {
            for (c, s) in column.iter_mut().zip(samples) {
                let d = s[j] - mean[j];
                *c = d * d;
            }
            *sd = (util::pairwise_sum(&column) / count).sqrt();
        }
        for ch in 0..channels {
            let channel_mean =
                (0..vertex_count).map(|v| std[v * channels + ch]).sum::<f64>() / vertex_count.max(1) as f64;
            let floor = (Self::RELATIVE_FLOOR * channel_mean).max(Self::STD_FLOOR);
            for v in 0..vertex_count {
                let sd = &mut std[v * channels + ch];
                *sd = sd.max(floor);
            }
        }
        Ok(FeatureNormalizer {
            vertex_count,
            channels,
            mean,
            std,
        })
    }

    pub fn fit_cfan(features: &[CfanFeature]) -> Result<Self, MeshError> {
        let n = features.first().map(|f| f.vertex_count()).unwrap_or(0);
        let samples: Vec<Vec<f64>> = features.iter().map(|f| f.to_channels()).collect();
        Self::fit(&samples, n, 4)
    }

    fn check(&self, x: &[f64]) -> Result<(), MeshError> {
        if x.len() != self.mean.len() {
            return Err(MeshError::ShapeMismatch(format!(
                "normalizer expects {} values, got {}",
                self.mean.len(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, MeshError> {
        self.check(x)?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>, MeshError> {
        self.check(z)?;
        Ok(z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    /// Statistics for a subset of channels, e.g. only the conformal channel.
    pub fn select_channels(&self, channels: &[usize]) -> FeatureNormalizer {
        let mut mean = Vec::with_capacity(self.vertex_count * channels.len());
        let mut std = Vec::with_capacity(mean.capacity());
        for v in 0..self.vertex_count {
            for &c in channels {
                mean.push(self.mean[v * self.channels + c]);
                std.push(self.std[v * self.channels + c]);
            }
        }
        FeatureNormalizer {
            vertex_count: self.vertex_count,
            channels: channels.len(),
            mean,
            std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;

    #[test]
    fn tetrahedron_conformal_factor() {
        let tet = primitives::regular_tetrahedron(1.0);
        let f = compute_cfan(&tet).unwrap();
        // three faces of area √3/4 each, one third each
        let expect = (3f64.sqrt() / 4.0).ln();
        for c in &f.conformal {
            assert!((c - expect).abs() < 1e-12, "{c} vs {expect}");
        }
        assert!((expect - (-0.8370)).abs() < 1e-4);
        let centroid = [0.0; 3];
        for (v, n) in tet.vertices().iter().zip(&f.normals) {
            let radial = util::normalized(util::sub(*v, centroid), 0.0).unwrap();
            assert!(util::dot(radial, *n) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn flat_grid_normals_point_up() {
        let grid = primitives::planar_grid(5, 4, 1.0);
        let f = compute_cfan(&grid).unwrap();
        for n in &f.normals {
            assert!(util::norm(util::sub(*n, [0.0, 0.0, 1.0])) < 1e-12);
        }
    }

    #[test]
    fn tetrahedron_masses_sum_to_area() {
        let tet = primitives::regular_tetrahedron(1.0);
        let m = vertex_mass(&tet);
        for v in &m {
            assert!((v - 0.4330127018922193).abs() < 1e-12);
        }
        let total: f64 = m.iter().sum();
        assert!((total - 3f64.sqrt()).abs() < 1e-12);
        assert!((total - tet.total_area()).abs() < 1e-12);
    }

    #[test]
    fn mass_scales_quadratically() {
        let s = primitives::icosphere(1, 1.0);
        let m0 = vertex_mass(&s);
        let m1 = vertex_mass(&s.map_vertices(|v| util::scale(v, 2.5)).unwrap());
        for (a, b) in m0.iter().zip(&m1) {
            assert!((b / a - 6.25).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_conformal_is_mass() {
        let s = primitives::icosphere(2, 1.3);
        let f = compute_cfan(&s).unwrap();
        for (c, m) in f.conformal.iter().zip(vertex_mass(&s)) {
            assert!((c.exp() - m).abs() <= 1e-9 * m);
        }
    }

    #[test]
    fn normalizer_two_point_statistics() {
        let samples = vec![vec![-1.0, 5.0], vec![1.0, 5.0]];
        let norm = FeatureNormalizer::fit(&samples, 2, 1).unwrap();
        assert_eq!(norm.mean, vec![0.0, 5.0]);
        assert_eq!(norm.std[0], 1.0);
        assert_eq!(norm.std[1], 0.05);
        assert_eq!(norm.apply(&[1.0, 5.0]).unwrap(), vec![1.0, 0.0]);
        let flat = FeatureNormalizer::fit(&[vec![2.0], vec![2.0]], 1, 1).unwrap();
        assert_eq!(flat.std[0], FeatureNormalizer::STD_FLOOR);
    }

    #[test]
    fn normalizer_round_trip_and_errors() {
        let samples = vec![vec![0.1, 2.0, -3.0], vec![0.4, -1.0, 7.5], vec![2.0, 0.0, 1.0]];
        let norm = FeatureNormalizer::fit(&samples, 3, 1).unwrap();
        let x = [0.3, 0.2, -9.0];
        let back = norm.invert(&norm.apply(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        assert!(FeatureNormalizer::fit(&samples[..1], 3, 1).is_err());
        assert!(FeatureNormalizer::fit(&[vec![1.0], vec![1.0, 2.0]], 1, 1).is_err());
        assert!(norm.apply(&[1.0]).is_err());
    }
}
