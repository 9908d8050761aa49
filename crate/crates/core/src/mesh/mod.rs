//! Triangle meshes with a fixed face list, plus the per-vertex CFAN feature.

mod cfan;
pub mod io;
pub mod primitives;

pub use cfan::{compute_cfan, vertex_mass, CfanFeature, FeatureNormalizer, NORMAL_TOLERANCE};

use crate::util::{self, Vec3};
use thiserror::Error;

/// Faces smaller than this (m²) are rejected as degenerate.
pub const AREA_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mesh: {0}")]
    Validation(String),
    #[error("face {face} is degenerate (cross-product norm {norm:e})")]
    DegenerateFace { face: usize, norm: f64 },
    #[error("vertex {0} has no incident faces")]
    IsolatedVertex(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MeshError {
    fn from(e: std::io::Error) -> Self {
        MeshError::Io(e.to_string())
    }
}

/// A surface given by vertex coordinates and a face list over them.
///
/// Construction validates index ranges, face areas and vertex usage, so a
/// `TriangleMesh` value always satisfies those invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    name: String,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, name: impl Into<String>) -> Result<Self, MeshError> {
        let mesh = TriangleMesh {
            vertices,
            faces,
            name: name.into(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<(), MeshError> {
        let n = self.vertices.len();
        if self.faces.is_empty() {
            return Err(MeshError::Validation("mesh has no faces".into()));
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(MeshError::Validation(format!("vertex {i} has a non-finite coordinate")));
            }
        }
        let mut used = vec![false; n];
        for (fi, f) in self.faces.iter().enumerate() {
            for &idx in f {
                if idx >= n {
                    return Err(MeshError::Validation(format!(
                        "face {fi} references vertex {idx} but the mesh has {n} vertices"
                    )));
                }
                used[idx] = true;
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::Validation(format!("face {fi} repeats a vertex index")));
            }
            let area = self.face_area_and_normal(fi).map(|(a, _)| a).unwrap_or(0.0);
            if area < AREA_EPSILON {
                return Err(MeshError::Validation(format!(
                    "face {fi} has area {area:e} below {AREA_EPSILON:e}"
                )));
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(MeshError::Validation(format!(
                "vertex {i} is not referenced by any face"
            )));
        }
        Ok(())
    }

    /// Same topology, new coordinates. The result is validated again.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self, MeshError> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::ShapeMismatch(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        TriangleMesh::new(vertices, self.faces.clone(), self.name.clone())
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Area and unit normal of one face; the normal follows the stored winding.
    pub fn face_area_and_normal(&self, face: usize) -> Result<(f64, Vec3), MeshError> {
        let f = self
            .faces
            .get(face)
            .ok_or_else(|| MeshError::Validation(format!("face index {face} out of range")))?;
        face_area_normal(self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]).ok_or_else(|| {
            let c = util::cross(
                util::sub(self.vertices[f[1]], self.vertices[f[0]]),
                util::sub(self.vertices[f[2]], self.vertices[f[0]]),
            );
            MeshError::DegenerateFace {
                face,
                norm: util::norm(c),
            }
        })
    }

    pub fn total_area(&self) -> f64 {
        let areas: Vec<f64> = (0..self.faces.len())
            .map(|f| self.face_area_and_normal(f).map(|(a, _)| a).unwrap_or(0.0))
            .collect();
        util::pairwise_sum(&areas)
    }

    /// Sorted, deduplicated one-ring neighbours of every vertex.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                nbrs[a].push(b);
                nbrs[b].push(a);
            }
        }
        for list in &mut nbrs {
            list.sort_unstable();
            list.dedup();
        }
        nbrs
    }

    /// Checksum of the vertex count and face list; coordinates are ignored.
    pub fn topology_checksum(&self) -> String {
        topology_checksum(self.vertices.len(), &self.faces)
    }

    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Result<Self, MeshError> {
        self.with_vertices(self.vertices.iter().map(|&v| f(v)).collect())
    }

    /// Axis-aligned bounding box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        util::norm(util::sub(hi, lo))
    }
}

pub fn topology_checksum(vertex_count: usize, faces: &[[usize; 3]]) -> String {
    let mut bytes = Vec::with_capacity(8 + faces.len() * 24);
    bytes.extend_from_slice(&(vertex_count as u64).to_le_bytes());
    for f in faces {
        for &i in f {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
    }
    util::sha256_hex(&bytes)
}

/// Area and unit normal of the triangle (a, b, c), `None` if degenerate.
pub fn face_area_normal(a: Vec3, b: Vec3, c: Vec3) -> Option<(f64, Vec3)> {
    let cr = util::cross(util::sub(b, a), util::sub(c, a));
    let len = util::norm(cr);
    if len < 1e-12 {
        return None;
    }
    Some((0.5 * len, util::scale(cr, 1.0 / len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn right_triangle() -> TriangleMesh {
        TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
            "tri",
        )
        .unwrap()
    }

    #[test]
    fn unit_right_triangle() {
        let (a, n) = right_triangle().face_area_and_normal(0).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(n, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn equilateral_triangle_area() {
        let h = 3f64.sqrt() / 2.0;
        let m = TriangleMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]],
            vec![[0, 1, 2]],
            "eq",
        )
        .unwrap();
        let (a, _) = m.face_area_and_normal(0).unwrap();
        // ½‖(1,0,0)×(½,√3/2,0)‖ = ½·√3/2
        assert!((a - 0.4330127018922193).abs() < 1e-15);
    }

    #[test]
    fn rotated_face_has_rotated_normal() {
        let m = right_triangle();
        let axis = util::normalized([1.0, 2.0, -0.5], 0.0).unwrap();
        let r = m.map_vertices(|v| util::rotate(v, axis, 1.1)).unwrap();
        let (a0, n0) = m.face_area_and_normal(0).unwrap();
        let (a1, n1) = r.face_area_and_normal(0).unwrap();
        assert!((a0 - a1).abs() < 1e-12);
        let expect = util::rotate(n0, axis, 1.1);
        assert!(util::norm(util::sub(n1, expect)) < 1e-12);
    }

    #[test]
    fn rejects_bad_meshes() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(matches!(
            TriangleMesh::new(v.clone(), vec![[0, 1, 2]], "collinear"),
            Err(MeshError::Validation(_))
        ));
        assert!(matches!(
            TriangleMesh::new(v.clone(), vec![[0, 1, 3]], "range"),
            Err(MeshError::Validation(_))
        ));
        assert!(matches!(
            TriangleMesh::new(v, vec![[0, 1, 1]], "repeat"),
            Err(MeshError::Validation(_))
        ));
        let unused = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]];
        assert!(TriangleMesh::new(unused, vec![[0, 1, 2]], "unused").is_err());
    }

    #[test]
    fn topology_checksum_ignores_coordinates() {
        let m = right_triangle();
        let moved = m.map_vertices(|v| util::add(v, [3.0, 0.0, 1.0])).unwrap();
        assert_eq!(m.topology_checksum(), moved.topology_checksum());
        let flipped = TriangleMesh::new(m.vertices().to_vec(), vec![[0, 2, 1]], "f").unwrap();
        assert_ne!(m.topology_checksum(), flipped.topology_checksum());
    }
}
