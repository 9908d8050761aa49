use super::{DistanceField, GeodesicError};
use crate::mesh::{CfanFeature, TriangleMesh};
use crate::util::{self, Vec3};

/// Orthonormal tangent basis at a vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub origin: usize,
    pub e1: Vec3,
    pub e2: Vec3,
    pub normal: Vec3,
}

impl TangentFrame {
    /// Completes `e1` (already tangent and unit length) to a right-handed frame.
    fn from_e1(origin: usize, e1: Vec3, normal: Vec3) -> Self {
        TangentFrame {
            origin,
            e1,
            e2: util::cross(normal, e1),
            normal,
        }
    }
}

/// Which rule produced a frame's first axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSource {
    /// Dominant principal curvature direction.
    Principal,
    /// Umbilic point: the geodesic distance gradient.
    Gradient,
    /// No usable gradient: the previous frame projected onto this tangent plane.
    Transported,
    /// Nothing else available: direction to the first one-ring neighbour.
    EdgeDirection,
}

/// Tangent basis built from the direction to the smallest-index neighbour.
/// Depends only on geometry, so it co-rotates with the mesh.
fn local_basis(verts: &[Vec3], nbrs: &[usize], v: usize, normal: Vec3) -> Option<(Vec3, Vec3)> {
    for &w in nbrs {
        let d = util::project_to_plane(util::sub(verts[w], verts[v]), normal);
        if let Some(t1) = util::normalized(d, 1e-12) {
            return Some((t1, util::cross(normal, t1)));
        }
    }
    None
}

/// Gradient of the distance field at `vertex`, fitted by weighted least
/// squares over the one ring in the tangent plane and normalised.
///
/// Offsets are weighted by inverse squared edge length.
pub fn geodesic_gradient(
    mesh: &TriangleMesh,
    neighbors: &[Vec<usize>],
    field: &DistanceField,
    normals: &[Vec3],
    vertex: usize,
) -> Result<Vec3, GeodesicError> {
    if vertex >= mesh.vertex_count() {
        return Err(GeodesicError::InvalidVertex(vertex));
    }
    if vertex == field.source {
        return Err(GeodesicError::ZeroGradient(vertex));
    }
    let verts = mesh.vertices();
    let normal = normals[vertex];
    let (t1, t2) = local_basis(verts, &neighbors[vertex], vertex, normal).ok_or(GeodesicError::ZeroGradient(vertex))?;
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &w in &neighbors[vertex] {
        let d = util::sub(verts[w], verts[vertex]);
        let len2 = util::dot(d, d);
        if len2 == 0.0 {
            continue;
        }
        let weight = 1.0 / len2;
        let (u, s) = (util::dot(d, t1), util::dot(d, t2));
        let df = field.dist[w] - field.dist[vertex];
        a11 += weight * u * u;
        a12 += weight * u * s;
        a22 += weight * s * s;
        b1 += weight * u * df;
        b2 += weight * s * df;
    }
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= 1e-14 * (a11 * a22).abs().max(f64::MIN_POSITIVE) {
        return Err(GeodesicError::ZeroGradient(vertex));
    }
    let g1 = (a22 * b1 - a12 * b2) / det;
    let g2 = (a11 * b2 - a12 * b1) / det;
    let g = util::add(util::scale(t1, g1), util::scale(t2, g2));
    util::normalized(g, 1e-9).ok_or(GeodesicError::ZeroGradient(vertex))
}

/// Principal directions from a least-squares fit of the normal variation
/// over the one ring. Returns `(direction of largest |κ|, |κ1|, |κ2|)`.
fn principal_direction(verts: &[Vec3], nbrs: &[usize], normals: &[Vec3], v: usize) -> Option<(Vec3, f64, f64)> {
    if nbrs.len() < 3 {
        return None;
    }
    let normal = normals[v];
    let (t1, t2) = local_basis(verts, nbrs, v, normal)?;
    // dn ≈ S·u, solved as S = (Σ dn uᵀ)(Σ u uᵀ)⁻¹
    let (mut uu11, mut uu12, mut uu22) = (0.0, 0.0, 0.0);
    let (mut nu11, mut nu12, mut nu21, mut nu22) = (0.0, 0.0, 0.0, 0.0);
    for &w in nbrs {
        let d = util::sub(verts[w], verts[v]);
        let (p, q) = (util::dot(d, t1), util::dot(d, t2));
        let dn = util::sub(normals[w], normal);
        let (a, b) = (util::dot(dn, t1), util::dot(dn, t2));
        uu11 += p * p;
        uu12 += p * q;
        uu22 += q * q;
        nu11 += a * p;
        nu12 += a * q;
        nu21 += b * p;
        nu22 += b * q;
    }
    let det = uu11 * uu22 - uu12 * uu12;
    if det.abs() <= 1e-14 * (uu11 * uu22).abs().max(f64::MIN_POSITIVE) {
        return None;
    }
    let (i11, i12, i22) = (uu22 / det, -uu12 / det, uu11 / det);
    let s11 = nu11 * i11 + nu12 * i12;
    let s12 = nu11 * i12 + nu12 * i22;
    let s21 = nu21 * i11 + nu22 * i12;
    let s22 = nu21 * i12 + nu22 * i22;
    // symmetric part
    let (a, b, d) = (s11, 0.5 * (s12 + s21), s22);
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mean + rad, mean - rad);
    let (big, small) = if l1.abs() >= l2.abs() { (l1, l2) } else { (l2, l1) };
    // eigenvector of `big`, picking the better conditioned formula
    let (x, y) = if (big - a).abs() + b.abs() >= (big - d).abs() + b.abs() {
        (b, big - a)
    } else {
        (big - d, b)
    };
    let dir = if x == 0.0 && y == 0.0 {
        t1
    } else {
        util::add(util::scale(t1, x), util::scale(t2, y))
    };
    let dir = util::normalized(dir, 1e-300)?;
    Some((dir, big.abs(), small.abs()))
}

/// Frame at a single vertex, without the transport fallback.
///
/// The first axis is the dominant principal direction, oriented into the
/// half plane of the geodesic gradient. Near-umbilic vertices use the
/// gradient itself.
pub fn principal_frame(
    mesh: &TriangleMesh,
    feature: &CfanFeature,
    field: &DistanceField,
    vertex: usize,
) -> Result<(TangentFrame, FrameSource), GeodesicError> {
    let nbrs = mesh.vertex_neighbors();
    frame_at(mesh, &nbrs, &feature.normals, field, vertex, None)
}

fn frame_at(
    mesh: &TriangleMesh,
    nbrs: &[Vec<usize>],
    normals: &[Vec3],
    field: &DistanceField,
    v: usize,
    previous: Option<&TangentFrame>,
) -> Result<(TangentFrame, FrameSource), GeodesicError> {
    if v >= mesh.vertex_count() {
        return Err(GeodesicError::InvalidVertex(v));
    }
    let verts = mesh.vertices();
    let normal = normals[v];
    let gradient = geodesic_gradient(mesh, nbrs, field, normals, v).ok();
    let transported = previous.and_then(|p| util::normalized(util::project_to_plane(p.e1, normal), 1e-9));
    let edge_dir = local_basis(verts, &nbrs[v], v, normal).map(|(t1, _)| t1);

    let fallback = || -> Option<(Vec3, FrameSource)> {
        if let Some(g) = gradient {
            Some((g, FrameSource::Gradient))
        } else if let Some(t) = transported {
            Some((t, FrameSource::Transported))
        } else {
            edge_dir.map(|t| (t, FrameSource::EdgeDirection))
        }
    };

    let (e1, source) = match principal_direction(verts, &nbrs[v], normals, v) {
        Some((dir, k1, k2)) if k1 - k2 >= 0.1 * k1.max(1e-9) => {
            let reference = gradient.or(transported).or(edge_dir);
            let dir = match reference {
                Some(r) if util::dot(dir, r) < 0.0 => util::scale(dir, -1.0),
                _ => dir,
            };
            (dir, FrameSource::Principal)
        }
        _ => fallback().ok_or(GeodesicError::ZeroGradient(v))?,
    };
    // re-project to remove rounding drift off the tangent plane
    let e1 = util::normalized(util::project_to_plane(e1, normal), 1e-12).ok_or(GeodesicError::ZeroGradient(v))?;
    Ok((TangentFrame::from_e1(v, e1, normal), source))
}

/// Frames for every vertex, processed in index order so that a vertex
/// without a usable gradient can inherit its predecessor's axis.
pub fn compute_frames(
    mesh: &TriangleMesh,
    feature: &CfanFeature,
    field: &DistanceField,
) -> Result<Vec<(TangentFrame, FrameSource)>, GeodesicError> {
    let nbrs = mesh.vertex_neighbors();
    let mut frames: Vec<(TangentFrame, FrameSource)> = Vec::with_capacity(mesh.vertex_count());
    for v in 0..mesh.vertex_count() {
        let prev = frames.last().map(|(f, _)| f);
        frames.push(frame_at(mesh, &nbrs, &feature.normals, field, v, prev)?);
    }
    Ok(frames)
}
