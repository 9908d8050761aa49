use super::{assemble_operator, stencil_template_with, Interpolation, MassScaling, PtcError, PtcOperator};
use crate::container::Container;
use crate::geodesic::{
    build_log_chart_among, compute_frames, dijkstra, farthest_point_sample_among, nearest_among, EdgeGraph, LogMapChart,
};
use crate::mesh::{vertex_mass, CfanFeature, TriangleMesh};
use crate::sparse::CsrMatrix;
use crate::util;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Smallest level the hierarchy will create; one full stencil of vertices.
pub const MIN_LEVEL_SIZE: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    /// Upper bound on the number of levels, the full mesh included.
    pub max_levels: usize,
    /// Source of the global distance field and first FPS sample.
    pub seed_vertex: usize,
    /// Fail instead of truncating when `max_levels` cannot be reached.
    pub strict: bool,
    pub inner_ratio: f64,
    pub outer_ratio: f64,
    pub interpolation: Interpolation,
    pub mass_scaling: MassScaling,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            max_levels: 6,
            seed_vertex: 0,
            strict: false,
            inner_ratio: 0.5,
            outer_ratio: 1.0,
            interpolation: Interpolation::MovingLeastSquares,
            mass_scaling: MassScaling::Normalized,
        }
    }
}

impl HierarchyConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        util::sha256_hex(self.to_toml().as_bytes())
    }
}

/// Level sizes produced by repeated quartering of `n`, stopping before a
/// level would fall below [`MIN_LEVEL_SIZE`] or at `max_levels`.
pub fn level_sizes(n: usize, max_levels: usize) -> (Vec<usize>, Option<usize>) {
    let mut sizes = vec![n];
    while sizes.len() < max_levels {
        let next = sizes.last().expect("nonempty").div_ceil(4);
        if next < MIN_LEVEL_SIZE {
            return (sizes, Some(next));
        }
        sizes.push(next);
    }
    (sizes, None)
}

/// Multi-resolution operators for one reference mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshHierarchy {
    pub topology_checksum: String,
    /// SHA-256 of the reference vertex coordinates.
    pub geometry_hash: String,
    pub config: HierarchyConfig,
    /// Full-mesh vertex ids per level; level 0 is every vertex in order.
    pub levels: Vec<Vec<usize>>,
    /// FPS prefix of each level that formed the next one.
    pub fps_orders: Vec<Vec<usize>>,
    pub mean_radii: Vec<f64>,
    /// `down_maps[l]`: `n_{l+1} × n_l` restriction.
    pub down_maps: Vec<CsrMatrix>,
    /// `up_maps[l]`: `n_l × n_{l+1}` interpolation, rows sum to one.
    pub up_maps: Vec<CsrMatrix>,
    pub operators: Vec<PtcOperator>,
    pub notes: Vec<String>,
}

fn geometry_hash(mesh: &TriangleMesh) -> String {
    let bytes: Vec<u8> = mesh
        .vertices()
        .iter()
        .flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes()))
        .collect();
    util::sha256_hex(&bytes)
}

fn mask(n: usize, members: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &v in members {
        m[v] = true;
    }
    m
}

fn local_index(n: usize, members: &[usize]) -> Vec<usize> {
    let mut pos = vec![usize::MAX; n];
    for (i, &v) in members.iter().enumerate() {
        pos[v] = i;
    }
    pos
}

/// Builds the decimation hierarchy and one PTC operator per level.
///
/// Frames come from the full mesh; coarse-level charts take their entries
/// from the level's vertices while measuring paths on the full edge graph.
/// Coarse masses aggregate every full-mesh vertex onto its geodesically
/// nearest level vertex.
pub fn build_hierarchy(
    mesh: &TriangleMesh,
    feature: &CfanFeature,
    config: &HierarchyConfig,
) -> Result<MeshHierarchy, PtcError> {
    let n = mesh.vertex_count();
    let graph = EdgeGraph::from_mesh(mesh);
    let field = dijkstra(&graph, config.seed_vertex)?;
    let frames = compute_frames(mesh, feature, &field)?;
    let full_mass = vertex_mass(mesh);

    let (sizes, dropped) = level_sizes(n, config.max_levels.max(1));
    let mut notes = Vec::new();
    if let Some(size) = dropped {
        if config.strict {
            return Err(PtcError::HierarchyTooDeep {
                level: sizes.len(),
                size,
                min: MIN_LEVEL_SIZE,
            });
        }
        notes.push(format!(
            "depth truncated to {} levels: level {} would have {size} vertices",
            sizes.len(),
            sizes.len()
        ));
    }

    let mut levels: Vec<Vec<usize>> = vec![(0..n).collect()];
    let mut fps_orders = Vec::new();
    for &size in &sizes[1..] {
        let prev = levels.last().expect("nonempty");
        let order = farthest_point_sample_among(&graph, prev, size, config.seed_vertex)?;
        fps_orders.push(order.clone());
        levels.push(order);
    }

    let mut down_maps = Vec::new();
    let mut up_maps = Vec::new();
    for l in 0..levels.len() - 1 {
        let (fine, coarse) = (&levels[l], &levels[l + 1]);
        let fine_pos = local_index(n, fine);
        let coarse_pos = local_index(n, coarse);
        let down: Vec<_> = coarse.iter().enumerate().map(|(i, &v)| (i, fine_pos[v], 1.0)).collect();
        down_maps.push(CsrMatrix::from_triplets(coarse.len(), fine.len(), &down)?);

        let coarse_mask = mask(n, coarse);
        let mut up = Vec::new();
        for (row, &v) in fine.iter().enumerate() {
            let (f, near) = nearest_among(&graph, v, 3, &coarse_mask);
            if near.first().map(|&c| f.dist[c]) == Some(0.0) {
                up.push((row, coarse_pos[near[0]], 1.0));
                continue;
            }
            let w: Vec<f64> = near.iter().map(|&c| 1.0 / (f.dist[c] * f.dist[c])).collect();
            let total: f64 = w.iter().sum();
            for (&c, wi) in near.iter().zip(&w) {
                up.push((row, coarse_pos[c], wi / total));
            }
        }
        up_maps.push(CsrMatrix::from_triplets(fine.len(), coarse.len(), &up)?);
    }

    let mut operators = Vec::new();
    let mut mean_radii = Vec::new();
    for (l, members) in levels.iter().enumerate() {
        let member_mask = mask(n, members);
        let pos = local_index(n, members);
        let mass = if l == 0 {
            full_mass.clone()
        } else {
            let mut m = vec![0.0; members.len()];
            for (v, &mv) in full_mass.iter().enumerate() {
                let (_, near) = nearest_among(&graph, v, 1, &member_mask);
                m[pos[near[0]]] += mv;
            }
            m
        };
        let charts = members
            .iter()
            .map(|&v| {
                let c = build_log_chart_among(&graph, mesh.vertices(), &frames[v].0, &member_mask)?;
                Ok(LogMapChart {
                    center: pos[c.center],
                    neighbor_ids: c.neighbor_ids.map(|id| pos[id]),
                    coords: c.coords,
                })
            })
            .collect::<Result<Vec<_>, PtcError>>()?;
        let r = util::mean(&charts.iter().map(|c| c.mean_neighbor_radius()).collect::<Vec<_>>());
        let template = stencil_template_with(r, config.inner_ratio, config.outer_ratio);
        operators.push(assemble_operator(
            &charts,
            &mass,
            &template,
            config.interpolation,
            config.mass_scaling,
        )?);
        mean_radii.push(r);
    }

    Ok(MeshHierarchy {
        topology_checksum: mesh.topology_checksum(),
        geometry_hash: geometry_hash(mesh),
        config: config.clone(),
        levels,
        fps_orders,
        mean_radii,
        down_maps,
        up_maps,
        operators,
        notes,
    })
}

fn put_csr(c: &mut Container, name: &str, m: &CsrMatrix) -> Result<(), PtcError> {
    c.put_usize(&format!("{name}/shape"), &[m.rows(), m.cols()])?;
    c.put_usize(&format!("{name}/indptr"), m.indptr())?;
    c.put_usize(&format!("{name}/indices"), m.indices())?;
    c.put_f64(&format!("{name}/values"), &[m.nnz()], m.values().to_vec())?;
    Ok(())
}

fn get_csr(c: &Container, name: &str) -> Result<CsrMatrix, PtcError> {
    let shape = c.get_usize(&format!("{name}/shape"))?;
    if shape.len() != 2 {
        return Err(PtcError::ShapeMismatch(format!("{name}: bad shape entry")));
    }
    Ok(CsrMatrix::from_parts(
        shape[0],
        shape[1],
        c.get_usize(&format!("{name}/indptr"))?,
        c.get_usize(&format!("{name}/indices"))?,
        c.get_f64(&format!("{name}/values"))?.1.to_vec(),
    )?)
}

impl MeshHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    /// Cache key from topology, reference geometry and configuration.
    pub fn cache_key(mesh: &TriangleMesh, config: &HierarchyConfig) -> String {
        let text = format!(
            "{}\n{}\n{}",
            mesh.topology_checksum(),
            geometry_hash(mesh),
            config.hash()
        );
        util::sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn cache_path(dir: &Path, mesh: &TriangleMesh, config: &HierarchyConfig) -> PathBuf {
        dir.join(format!("ptc-{}.bin", Self::cache_key(mesh, config)))
    }

    pub fn to_container(&self) -> Result<Container, PtcError> {
        let mut c = Container::new();
        c.put_text("meta/topology", &self.topology_checksum)?;
        c.put_text("meta/geometry", &self.geometry_hash)?;
        c.put_text("meta/config", &self.config.to_toml())?;
        c.put_text("meta/notes", &self.notes.join("\n"))?;
        c.put_usize("meta/depth", &[self.depth()])?;
        for (l, members) in self.levels.iter().enumerate() {
            c.put_usize(&format!("level/{l}/vertices"), members)?;
            let op = &self.operators[l];
            put_csr(&mut c, &format!("level/{l}/interp"), &op.interp)?;
            c.put_f64(&format!("level/{l}/mass"), &[op.mass.len()], op.mass.clone())?;
            c.put_f64(&format!("level/{l}/mean_radius"), &[1], vec![self.mean_radii[l]])?;
        }
        for l in 0..self.depth() - 1 {
            c.put_usize(&format!("level/{l}/fps"), &self.fps_orders[l])?;
            put_csr(&mut c, &format!("level/{l}/down"), &self.down_maps[l])?;
            put_csr(&mut c, &format!("level/{l}/up"), &self.up_maps[l])?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, PtcError> {
        let config: HierarchyConfig = toml::from_str(c.get_text("meta/config")?)
            .map_err(|e| PtcError::ShapeMismatch(format!("unreadable hierarchy config: {e}")))?;
        let depth = c.get_usize("meta/depth")?.first().copied().unwrap_or(0);
        let notes_text = c.get_text("meta/notes")?;
        let mut h = MeshHierarchy {
            topology_checksum: c.get_text("meta/topology")?.to_string(),
            geometry_hash: c.get_text("meta/geometry")?.to_string(),
            config: config.clone(),
            levels: Vec::new(),
            fps_orders: Vec::new(),
            mean_radii: Vec::new(),
            down_maps: Vec::new(),
            up_maps: Vec::new(),
            operators: Vec::new(),
            notes: notes_text.lines().map(str::to_string).collect(),
        };
        for l in 0..depth {
            let members = c.get_usize(&format!("level/{l}/vertices"))?;
            let interp = get_csr(c, &format!("level/{l}/interp"))?;
            let mass = c.get_f64(&format!("level/{l}/mass"))?.1.to_vec();
            h.mean_radii.push(c.get_f64(&format!("level/{l}/mean_radius"))?.1[0]);
            h.operators.push(PtcOperator {
                vertex_count: members.len(),
                stencil_size: super::STENCIL_SIZE,
                interp,
                mass,
                mass_scaling: config.mass_scaling,
            });
            h.levels.push(members);
        }
        for l in 0..depth.saturating_sub(1) {
            h.fps_orders.push(c.get_usize(&format!("level/{l}/fps"))?);
            h.down_maps.push(get_csr(c, &format!("level/{l}/down"))?);
            h.up_maps.push(get_csr(c, &format!("level/{l}/up"))?);
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<(), PtcError> {
        self.to_container()?.write_atomic(path)?;
        Ok(())
    }

    /// Loads a cached hierarchy, rejecting one built for another topology.
    pub fn load_checked(path: &Path, expected_topology: &str) -> Result<Self, PtcError> {
        let h = Self::from_container(&Container::read(path)?)?;
        if h.topology_checksum != expected_topology {
            return Err(PtcError::StaleCache {
                expected: expected_topology.to_string(),
                found: h.topology_checksum,
            });
        }
        Ok(h)
    }

    /// Returns the cached hierarchy for `(mesh, config)` if present, else
    /// builds and stores it. The flag reports a cache hit.
    pub fn load_or_build(
        cache_dir: &Path,
        mesh: &TriangleMesh,
        feature: &CfanFeature,
        config: &HierarchyConfig,
    ) -> Result<(Self, bool), PtcError> {
        let path = Self::cache_path(cache_dir, mesh, config);
        if path.exists() {
            let h = Self::load_checked(&path, &mesh.topology_checksum())?;
            log::info!("operator cache hit: {}", path.display());
            return Ok((h, true));
        }
        let h = build_hierarchy(mesh, feature, config)?;
        std::fs::create_dir_all(cache_dir).map_err(crate::container::ContainerError::from)?;
        h.save(&path)?;
        log::info!("operator cache written: {}", path.display());
        Ok((h, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{compute_cfan, primitives};

    fn hierarchy(mesh: &TriangleMesh) -> MeshHierarchy {
        build_hierarchy(mesh, &compute_cfan(mesh).unwrap(), &HierarchyConfig::default()).unwrap()
    }

    #[test]
    fn quartering_chain() {
        assert_eq!(level_sizes(2562, 6), (vec![2562, 641, 161, 41], Some(11)));
        assert_eq!(level_sizes(162, 6), (vec![162, 41], Some(11)));
        assert_eq!(level_sizes(10242, 6).0, vec![10242, 2561, 641, 161, 41]);
        assert_eq!(level_sizes(2562, 2), (vec![2562, 641], None));
    }

    #[test]
    fn icosphere_hierarchy_structure() {
        let m = primitives::icosphere(2, 1.0);
        let h = hierarchy(&m);
        assert_eq!(h.level_sizes(), vec![162, 41]);
        assert_eq!(h.notes.len(), 1);
        assert_eq!(h.levels[1][0], 0);
        let (down, up) = (&h.down_maps[0], &h.up_maps[0]);
        assert_eq!((down.rows(), down.cols()), (41, 162));
        assert_eq!((up.rows(), up.cols()), (162, 41));
        for s in up.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(up.max_row_nnz() <= 3);
        // down ∘ up is the identity on kept vertices
        let du = down.matmul(up).unwrap();
        assert_eq!(du, CsrMatrix::identity(41));
        // constants survive the round trip
        let c = vec![2.5; 162];
        let coarse = down.matmul_dense(&c, 1).unwrap();
        assert!(up
            .matmul_dense(&coarse, 1)
            .unwrap()
            .iter()
            .all(|&x| (x - 2.5).abs() < 1e-14));
        // mass is conserved by Voronoi aggregation
        let total0: f64 = h.operators[0].mass.iter().sum();
        let total1: f64 = h.operators[1].mass.iter().sum();
        assert!((total0 - total1).abs() < 1e-9 * total0);
        for op in &h.operators {
            for s in op.interp.row_sums() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn strict_mode_rejects_truncation() {
        let m = primitives::icosphere(2, 1.0);
        let cfg = HierarchyConfig {
            strict: true,
            ..HierarchyConfig::default()
        };
        assert!(matches!(
            build_hierarchy(&m, &compute_cfan(&m).unwrap(), &cfg),
            Err(PtcError::HierarchyTooDeep { level: 2, size: 11, .. })
        ));
        let ok = HierarchyConfig { max_levels: 2, ..cfg };
        assert!(build_hierarchy(&m, &compute_cfan(&m).unwrap(), &ok).is_ok());
    }

    #[test]
    fn build_is_deterministic_and_round_trips_bit_exactly() {
        let m = primitives::capsule(12);
        let a = hierarchy(&m);
        let b = hierarchy(&m);
        assert_eq!(a, b);
        let bytes = a.to_container().unwrap().to_bytes();
        let back = MeshHierarchy::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }

    #[test]
    fn cache_hit_and_stale_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let m = primitives::icosphere(1, 1.0);
        let f = compute_cfan(&m).unwrap();
        let cfg = HierarchyConfig::default();
        let (first, hit) = MeshHierarchy::load_or_build(dir.path(), &m, &f, &cfg).unwrap();
        assert!(!hit);
        let (second, hit) = MeshHierarchy::load_or_build(dir.path(), &m, &f, &cfg).unwrap();
        assert!(hit);
        assert_eq!(first, second);
        let path = MeshHierarchy::cache_path(dir.path(), &m, &cfg);
        let other = primitives::capsule(8);
        assert!(matches!(
            MeshHierarchy::load_checked(&path, &other.topology_checksum()),
            Err(PtcError::StaleCache { .. })
        ));
    }
}
