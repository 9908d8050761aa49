//! Differentiable conformal factors and vertex normals of batched meshes.
//!
//! Positions are `[.., n, 3]`; every leading index is one mesh sharing the
//! face list.

use super::{mismatch, Op, Tape, Tensor, TensorError, Var};
use crate::util::{self, Vec3};
use std::sync::Arc;

pub type Faces = Arc<Vec<[usize; 3]>>;

#[derive(Debug)]
pub(super) struct ConformalRecord {
    p: Var,
    faces: Faces,
    masses: Vec<f64>,
}

#[derive(Debug)]
pub(super) struct NormalsRecord {
    p: Var,
    faces: Faces,
    /// Unnormalised per-vertex sums of face cross products.
    sums: Vec<Vec3>,
}

fn corner(data: &[f64], base: usize, v: usize) -> Vec3 {
    let i = base + 3 * v;
    [data[i], data[i + 1], data[i + 2]]
}

fn face_cross(data: &[f64], base: usize, f: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
    let p0 = corner(data, base, f[0]);
    let a = util::sub(corner(data, base, f[1]), p0);
    let b = util::sub(corner(data, base, f[2]), p0);
    (a, b, util::cross(a, b))
}

/// Spreads a gradient on a face cross product `c = a × b` back to the
/// three corners.
fn scatter_cross(gp: &mut [f64], base: usize, f: &[usize; 3], a: Vec3, b: Vec3, gc: Vec3) {
    let ga = util::cross(b, gc);
    let gb = util::cross(gc, a);
    for k in 0..3 {
        gp[base + 3 * f[1] + k] += ga[k];
        gp[base + 3 * f[2] + k] += gb[k];
        gp[base + 3 * f[0] + k] -= ga[k] + gb[k];
    }
}

fn batch_layout(tape: &Tape, p: Var, faces: &Faces) -> Result<(usize, usize), TensorError> {
    let shape = tape.shape(p);
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != 3 {
        return Err(mismatch(format!("positions of shape {shape:?}")));
    }
    let n = shape[nd - 2];
    if faces.iter().flatten().any(|&v| v >= n) {
        return Err(mismatch(format!("face index beyond {n} vertices")));
    }
    Ok((tape.value(p).len() / (3 * n), n))
}

/// Face areas of every mesh in a flat `[.., n, 3]` buffer.
pub fn face_areas(positions: &[f64], vertex_count: usize, faces: &[[usize; 3]]) -> Vec<Vec<f64>> {
    positions
        .chunks(3 * vertex_count)
        .map(|mesh| {
            faces
                .iter()
                .map(|f| 0.5 * util::norm(face_cross(mesh, 0, f).2))
                .collect()
        })
        .collect()
}

/// Per mesh, whether any face area falls below `eps`.
pub fn has_degenerate_face(positions: &[f64], vertex_count: usize, faces: &[[usize; 3]], eps: f64) -> Vec<bool> {
    face_areas(positions, vertex_count, faces)
        .into_iter()
        .map(|a| a.iter().any(|&x| !(x >= eps)))
        .collect()
}

impl Tape {
    /// Log of the lumped vertex area (one third of each incident face),
    /// shaped `[.., n]`.
    pub fn conformal_factor(&mut self, p: Var, faces: &Faces) -> Result<Var, TensorError> {
        let (batch, n) = batch_layout(self, p, faces)?;
        let data = &self.value(p).data;
        let mut masses = vec![0.0; batch * n];
        for b in 0..batch {
            for f in faces.iter() {
                let area = 0.5 * util::norm(face_cross(data, 3 * n * b, f).2);
                for &v in f {
                    masses[b * n + v] += area / 3.0;
                }
            }
        }
        let shape = self.shape(p)[..self.shape(p).len() - 1].to_vec();
        let out = Tensor {
            shape,
            data: masses.iter().map(|m| m.ln()).collect(),
        };
        let rg = self.rg(p);
        let rec = ConformalRecord {
            p,
            faces: faces.clone(),
            masses,
        };
        Ok(self.push(out, Op::Conformal(rec), rg))
    }

    /// Unit area-weighted vertex normals, shaped like `p`.
    pub fn vertex_normals(&mut self, p: Var, faces: &Faces) -> Result<Var, TensorError> {
        let (batch, n) = batch_layout(self, p, faces)?;
        let data = &self.value(p).data;
        let mut sums = vec![[0.0; 3]; batch * n];
        for b in 0..batch {
            for f in faces.iter() {
                let c = face_cross(data, 3 * n * b, f).2;
                for &v in f {
                    sums[b * n + v] = util::add(sums[b * n + v], c);
                }
            }
        }
        let out: Vec<f64> = sums
            .iter()
            .flat_map(|u| util::scale(*u, 1.0 / util::norm(*u)))
            .collect();
        let out = Tensor {
            shape: self.shape(p).to_vec(),
            data: out,
        };
        let rg = self.rg(p);
        let rec = NormalsRecord {
            p,
            faces: faces.clone(),
            sums,
        };
        Ok(self.push(out, Op::VertexNormals(rec), rg))
    }
}

pub(super) fn conformal_backward(tape: &Tape, rec: &ConformalRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let n = tape.shape(rec.p)[tape.shape(rec.p).len() - 2];
    let data = tape.value(rec.p).data.clone();
    let Some(gp) = tape.slot(grads, rec.p) else { return };
    let batch = rec.masses.len() / n;
    for b in 0..batch {
        let base = 3 * n * b;
        for f in rec.faces.iter() {
            let (a, bb, c) = face_cross(&data, base, f);
            let len = util::norm(c);
            if len == 0.0 {
                continue;
            }
            let g_area: f64 = f.iter().map(|&v| g[b * n + v] / rec.masses[b * n + v]).sum::<f64>() / 3.0;
            let gc = util::scale(c, g_area * 0.5 / len);
            scatter_cross(gp, base, f, a, bb, gc);
        }
    }
}

pub(super) fn normals_backward(
    tape: &Tape,
    rec: &NormalsRecord,
    normals: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let n = tape.shape(rec.p)[tape.shape(rec.p).len() - 2];
    let data = tape.value(rec.p).data.clone();
    let Some(gp) = tape.slot(grads, rec.p) else { return };
    // gradient with respect to each unnormalised sum
    let gu: Vec<Vec3> = rec
        .sums
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let nv = [normals[3 * i], normals[3 * i + 1], normals[3 * i + 2]];
            let gi = [g[3 * i], g[3 * i + 1], g[3 * i + 2]];
            let along = util::dot(nv, gi);
            util::scale(util::sub(gi, util::scale(nv, along)), 1.0 / util::norm(*u))
        })
        .collect();
    let batch = rec.sums.len() / n;
    for b in 0..batch {
        let base = 3 * n * b;
        for f in rec.faces.iter() {
            let (a, bb, _) = face_cross(&data, base, f);
            let gc = f.iter().fold([0.0; 3], |acc, &v| util::add(acc, gu[b * n + v]));
            scatter_cross(gp, base, f, a, bb, gc);
        }
    }
}
