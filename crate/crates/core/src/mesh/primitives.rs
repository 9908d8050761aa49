//! Procedural meshes used as dataset bases and test fixtures.

use super::TriangleMesh;
use crate::util::{self, Vec3};
use std::collections::HashMap;

/// Flips faces whose normal points towards the origin. Only meaningful for
/// star-shaped closed surfaces around the origin.
fn orient_outward(vertices: &[Vec3], faces: &mut [[usize; 3]]) {
    for f in faces.iter_mut() {
        let a = vertices[f[0]];
        let c = util::cross(util::sub(vertices[f[1]], a), util::sub(vertices[f[2]], a));
        let centroid = util::scale(util::add(util::add(a, vertices[f[1]]), vertices[f[2]]), 1.0 / 3.0);
        if util::dot(c, centroid) < 0.0 {
            f.swap(1, 2);
        }
    }
}

/// Regular tetrahedron with the given edge length, centred at the origin.
pub fn regular_tetrahedron(edge: f64) -> TriangleMesh {
    let s = edge / (2.0 * 2f64.sqrt());
    let vertices = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
    let mut faces = vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    orient_outward(&vertices, &mut faces);
    TriangleMesh::new(vertices, faces, "tetrahedron").expect("valid tetrahedron")
}

/// Subdivided icosahedron projected onto a sphere; `10·4^s + 2` vertices.
pub fn icosphere(subdivisions: usize, radius: f64) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    for v in &mut vertices {
        *v = util::normalized(*v, 0.0).unwrap();
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = util::scale(util::add(vertices[a], vertices[b]), 0.5);
                vertices.push(util::normalized(m, 0.0).unwrap());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut vertices);
            let bc = midpoint(f[1], f[2], &mut vertices);
            let ca = midpoint(f[2], f[0], &mut vertices);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|v| util::scale(v, radius)).collect::<Vec<_>>();
    orient_outward(&vertices, &mut faces);
    TriangleMesh::new(vertices, faces, format!("icosphere{subdivisions}")).expect("valid icosphere")
}

/// Flat grid in the z = 0 plane with `nx × ny` square cells of side
/// `spacing`, each split into four triangles around a centre vertex.
///
/// Corner vertices come first (`j·(nx+1) + i` at `(i·h, j·h)`), then the
/// cell centres. The triangulation is mirror symmetric about every grid
/// line, which keeps edge-graph distances symmetric as well.
pub fn planar_grid(nx: usize, ny: usize, spacing: f64) -> TriangleMesh {
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([i as f64 * spacing, j as f64 * spacing, 0.0]);
        }
    }
    let corner = |i: usize, j: usize| j * (nx + 1) + i;
    let mut faces = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let c = vertices.len();
            vertices.push([(i as f64 + 0.5) * spacing, (j as f64 + 0.5) * spacing, 0.0]);
            let (a, b, d, e) = (corner(i, j), corner(i + 1, j), corner(i + 1, j + 1), corner(i, j + 1));
            faces.push([a, b, c]);
            faces.push([b, d, c]);
            faces.push([d, e, c]);
            faces.push([e, a, c]);
        }
    }
    TriangleMesh::new(vertices, faces, "grid").expect("valid grid")
}

/// Open cylinder around the z axis: `rings` circles of `segments` vertices.
pub fn cylinder(segments: usize, rings: usize, radius: f64, height: f64) -> TriangleMesh {
    let mut vertices = Vec::new();
    for r in 0..rings {
        let z = height * r as f64 / (rings - 1) as f64 - height / 2.0;
        // stagger alternate rings for better-shaped triangles
        let offset = if r % 2 == 1 { 0.5 } else { 0.0 };
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * (s as f64 + offset) / segments as f64;
            vertices.push([radius * a.cos(), radius * a.sin(), z]);
        }
    }
    let mut faces = Vec::new();
    for r in 0..rings - 1 {
        for s in 0..segments {
            let a = r * segments + s;
            let b = r * segments + (s + 1) % segments;
            let c = (r + 1) * segments + s;
            let d = (r + 1) * segments + (s + 1) % segments;
            if r % 2 == 0 {
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            } else {
                faces.push([a, d, c]);
                faces.push([a, b, d]);
            }
        }
    }
    // outward winding: check the first face
    let mesh = TriangleMesh::new(vertices.clone(), faces.clone(), "cylinder").expect("valid cylinder");
    let (_, n) = mesh.face_area_and_normal(0).unwrap();
    let f0 = faces[0];
    let centroid = util::scale(
        util::add(util::add(vertices[f0[0]], vertices[f0[1]]), vertices[f0[2]]),
        1.0 / 3.0,
    );
    if util::dot(n, [centroid[0], centroid[1], 0.0]) < 0.0 {
        for f in &mut faces {
            f.swap(1, 2);
        }
    }
    TriangleMesh::new(vertices, faces, "cylinder").expect("valid cylinder")
}

/// Closed capsule (cylinder with hemispherical caps) along z with unit
/// radius and total length 3. `segments` vertices per ring.
pub fn capsule(segments: usize) -> TriangleMesh {
    capsule_with(segments, (segments / 4).max(2), (segments / 4).max(1))
}

/// Capsule with explicit ring counts: `cap_rings` per hemisphere (pole
/// excluded) and `body_rings` cylinder bands. Has
/// `segments · (2·cap_rings + body_rings − 1) + 2` vertices.
pub fn capsule_with(segments: usize, cap_rings: usize, body_rings: usize) -> TriangleMesh {
    assert!(segments >= 4, "capsule needs at least 4 segments");
    assert!(
        cap_rings >= 1 && body_rings >= 1,
        "capsule needs at least one ring per part"
    );
    let half = 0.5;
    let mut profile: Vec<(f64, f64)> = Vec::new(); // (radius, z)
    for k in 1..=cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        profile.push((phi.sin(), half + phi.cos()));
    }
    for k in 1..body_rings {
        let z = half - 2.0 * half * k as f64 / body_rings as f64;
        profile.push((1.0, z));
    }
    for k in 0..cap_rings {
        let phi = std::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        profile.push((phi.cos(), -half - phi.sin()));
    }
    let mut vertices = vec![[0.0, 0.0, half + 1.0]];
    for (ri, &(r, z)) in profile.iter().enumerate() {
        let offset = if ri % 2 == 1 { 0.5 } else { 0.0 };
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * (s as f64 + offset) / segments as f64;
            vertices.push([r * a.cos(), r * a.sin(), z]);
        }
    }
    let bottom = vertices.len();
    vertices.push([0.0, 0.0, -half - 1.0]);
    let ring = |r: usize, s: usize| 1 + r * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s), ring(0, s + 1)]);
    }
    for r in 0..profile.len() - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            if r % 2 == 0 {
                faces.push([a, c, b]);
                faces.push([b, c, d]);
            } else {
                faces.push([a, d, b]);
                faces.push([a, c, d]);
            }
        }
    }
    let last = profile.len() - 1;
    for s in 0..segments {
        faces.push([bottom, ring(last, s + 1), ring(last, s)]);
    }
    orient_outward(&vertices, &mut faces);
    TriangleMesh::new(vertices, faces, format!("capsule{segments}")).expect("valid capsule")
}

/// Moves every vertex by a deterministic pseudo-random offset of at most
/// `amplitude` per coordinate. Breaks the exact distance ties of symmetric
/// meshes.
pub fn jittered(mesh: &TriangleMesh, amplitude: f64, seed: u64) -> TriangleMesh {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vertices = mesh
        .vertices()
        .iter()
        .map(|&v| {
            let d: Vec3 = std::array::from_fn(|_| rng.random_range(-amplitude..amplitude));
            util::add(v, d)
        })
        .collect();
    mesh.with_vertices(vertices).expect("small jitter keeps faces valid")
}
