//! Procedural meshes with separate identity and pose factors.
//!
//! Identity (`beta`) scales every vertex radially by a smooth low-order
//! profile, which changes local areas. Pose (`theta`) twists the surface
//! about fixed axes with a smooth blend, which moves normals while leaving
//! areas nearly unchanged.

use crate::mesh::{io, primitives, MeshError, TriangleMesh};
use crate::util::{self, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use thiserror::Error;

/// Largest supported identity dimension.
pub const MAX_BETA: usize = 8;
/// Largest supported pose dimension.
pub const MAX_THETA: usize = 6;
/// Standard deviation of sampled factors.
pub const FACTOR_STD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("pose angle {value} exceeds pi/2 in magnitude")]
    SelfIntersectionRisk { value: f64 },
    #[error("invalid factor spec: {0}")]
    InvalidSpec(String),
    #[error("a dataset needs at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Template surface the factors deform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    Icosphere { subdivisions: usize },
    Capsule { segments: usize },
}

impl BaseShape {
    pub fn mesh(self) -> TriangleMesh {
        match self {
            BaseShape::Icosphere { subdivisions } => primitives::icosphere(subdivisions, 1.0),
            BaseShape::Capsule { segments } => primitives::capsule(segments),
        }
    }
}

/// Identity and pose parameters of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub base: BaseShape,
}

impl FactorSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.beta.len() > MAX_BETA || self.theta.len() > MAX_THETA {
            return Err(SynthError::InvalidSpec(format!(
                "at most {MAX_BETA} identity and {MAX_THETA} pose factors are supported"
            )));
        }
        if let Some(&b) = self.beta.iter().find(|b| !b.is_finite()) {
            return Err(SynthError::InvalidSpec(format!("identity factor {b}")));
        }
        if let Some(&t) = self.theta.iter().find(|t| !(t.abs() <= FRAC_PI_2)) {
            return Err(SynthError::SelfIntersectionRisk { value: t });
        }
        Ok(())
    }
}

/// Smooth radial profiles on the unit sphere, in order of use.
fn profile(k: usize, d: Vec3) -> f64 {
    let [x, y, z] = d;
    match k {
        0 => z,
        1 => x,
        2 => y,
        3 => 0.5 * (3.0 * z * z - 1.0),
        4 => 2.0 * x * z,
        5 => 2.0 * y * z,
        6 => x * x - y * y,
        _ => 2.0 * x * y,
    }
}

/// Pose joints: twists about fixed axes through the origin. A vertex
/// rotates by a fraction of the angle that ramps smoothly along the axis,
/// which shears the surface without stretching it to first order.
const S: f64 = std::f64::consts::FRAC_1_SQRT_2;
const TWIST_AXES: [Vec3; MAX_THETA] = [
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [S, S, 0.0],
    [S, 0.0, S],
    [0.0, S, S],
];

/// Weight rising from 0 at `t = -1` to 1 at `t = 1`.
fn ramp(t: f64) -> f64 {
    let s = ((t + 1.0) / 2.0).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Deforms the base surface by the given factors.
pub fn generate_mesh(spec: &FactorSpec) -> Result<TriangleMesh, SynthError> {
    spec.validate()?;
    let base = spec.base.mesh();
    let extent = base.vertices().iter().fold(0.0f64, |m, &v| m.max(util::norm(v)));
    let vertices = base
        .vertices()
        .iter()
        .map(|&v| {
            let dir = util::normalized(v, 1e-12).unwrap_or([0.0, 0.0, 1.0]);
            let offset: f64 = spec.beta.iter().enumerate().map(|(k, b)| b * profile(k, dir)).sum();
            let mut p = if offset == 0.0 { v } else { util::scale(v, offset.exp()) };
            for (&axis, &angle) in TWIST_AXES.iter().zip(&spec.theta) {
                if angle != 0.0 {
                    let w = ramp(util::dot(v, axis) / extent);
                    p = util::rotate(p, axis, w * angle);
                }
            }
            p
        })
        .collect();
    Ok(base
        .with_vertices(vertices)?
        .renamed(format!("synthetic-{}", spec.beta.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub topology_checksum: String,
    pub base: BaseShape,
    pub seed: u64,
    pub beta_dims: usize,
    pub theta_dims: usize,
    pub noise_sigma: Option<f64>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn spec(&self, i: usize) -> FactorSpec {
        FactorSpec {
            beta: self.samples[i].beta.clone(),
            theta: self.samples[i].theta.clone(),
            base: self.base,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Manifest(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub count: usize,
    pub beta_dims: usize,
    pub theta_dims: usize,
    pub base: BaseShape,
    pub seed: u64,
    pub noise_sigma: Option<f64>,
    /// Train, validation and test fractions.
    pub splits: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 200,
            beta_dims: 4,
            theta_dims: 4,
            base: BaseShape::Icosphere { subdivisions: 2 },
            seed: 0,
            noise_sigma: None,
            splits: (0.75, 0.05, 0.20),
        }
    }
}

/// Split sizes for `count` items; validation and test are rounded, train
/// takes the remainder.
pub fn split_counts(count: usize, splits: (f64, f64, f64)) -> (usize, usize, usize) {
    let total = splits.0 + splits.1 + splits.2;
    let val = (count as f64 * splits.1 / total).round() as usize;
    let test = (count as f64 * splits.2 / total).round() as usize;
    (count - val - test, val, test)
}

/// Samples factors, assigns splits and builds every mesh.
pub fn generate_dataset(config: &DatasetConfig) -> Result<(DatasetManifest, Vec<TriangleMesh>), SynthError> {
    if config.count < 10 {
        return Err(SynthError::TooFewSamples(config.count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, FACTOR_STD).expect("positive std");
    let mut factors = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let beta: Vec<f64> = (0..config.beta_dims).map(|_| normal.sample(&mut rng)).collect();
        let theta: Vec<f64> = (0..config.theta_dims)
            .map(|_| normal.sample(&mut rng).clamp(-FRAC_PI_2, FRAC_PI_2))
            .collect();
        factors.push((beta, theta));
    }
    let mut order: Vec<usize> = (0..config.count).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let (train, val, _) = split_counts(config.count, config.splits);
    let mut splits = vec![Split::Test; config.count];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut meshes = Vec::with_capacity(config.count);
    let mut samples = Vec::with_capacity(config.count);
    let noise = config
        .noise_sigma
        .filter(|&s| s > 0.0)
        .map(|s| Normal::new(0.0, s).expect("positive std"));
    for (i, (beta, theta)) in factors.into_iter().enumerate() {
        let spec = FactorSpec {
            beta,
            theta,
            base: config.base,
        };
        let id = format!("sample_{i:04}");
        let mut mesh = generate_mesh(&spec)?.renamed(&id);
        if let Some(noise) = &noise {
            let v = mesh
                .vertices()
                .iter()
                .map(|&p| util::add(p, std::array::from_fn(|_| noise.sample(&mut rng))))
                .collect();
            mesh = mesh.with_vertices(v)?;
        }
        samples.push(SampleRecord {
            id,
            split: splits[i],
            beta: spec.beta,
            theta: spec.theta,
        });
        meshes.push(mesh);
    }
    let manifest = DatasetManifest {
        topology_checksum: meshes[0].topology_checksum(),
        base: config.base,
        seed: config.seed,
        beta_dims: config.beta_dims,
        theta_dims: config.theta_dims,
        noise_sigma: config.noise_sigma,
        samples,
    };
    Ok((manifest, meshes))
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes `manifest.toml` and one OFF file per sample.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, meshes: &[TriangleMesh]) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for (rec, mesh) in manifest.samples.iter().zip(meshes) {
        io::save_mesh(mesh, &dir.join(format!("{}.off", rec.id)), io::MeshFormat::Off)?;
    }
    crate::container::write_atomic(&dir.join(MANIFEST_FILE), manifest.to_toml().as_bytes())?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], checking that every mesh
/// has the recorded topology.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<TriangleMesh>), SynthError> {
    let manifest = DatasetManifest::from_toml(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut meshes = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let mesh = io::load_mesh(&dir.join(format!("{}.off", rec.id)), io::MeshFormat::Off)?;
        if mesh.topology_checksum() != manifest.topology_checksum {
            return Err(SynthError::Manifest(format!("{} has a different topology", rec.id)));
        }
        meshes.push(mesh);
    }
    Ok((manifest, meshes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::compute_cfan;

    const BASE: BaseShape = BaseShape::Icosphere { subdivisions: 2 };

    fn spec(beta: &[f64], theta: &[f64]) -> FactorSpec {
        FactorSpec {
            beta: beta.to_vec(),
            theta: theta.to_vec(),
            base: BASE,
        }
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_factors_give_base() {
        let m = generate_mesh(&spec(&[0.0; 4], &[0.0; 4])).unwrap();
        assert_eq!(m.vertices(), BASE.mesh().vertices());
        let c = generate_mesh(&FactorSpec {
            beta: vec![],
            theta: vec![],
            base: BaseShape::Capsule { segments: 8 },
        })
        .unwrap();
        assert_eq!(c.vertices(), primitives::capsule(8).vertices());
    }

    #[test]
    fn out_of_range_pose_is_rejected() {
        assert!(matches!(
            generate_mesh(&spec(&[], &[1.6])),
            Err(SynthError::SelfIntersectionRisk { .. })
        ));
        assert!(generate_mesh(&spec(&[0.0; 9], &[])).is_err());
    }

    #[test]
    fn pose_nearly_preserves_total_area() {
        let base = BASE.mesh().total_area();
        for a in [-0.6, -0.3, 0.3, 0.6] {
            for j in 0..MAX_THETA {
                let mut theta = [0.0; MAX_THETA];
                theta[j] = a;
                let area = generate_mesh(&spec(&[], &theta)).unwrap().total_area();
                assert!(
                    (area / base - 1.0).abs() < 0.02,
                    "joint {j} angle {a}: {area} vs {base}"
                );
            }
        }
    }

    #[test]
    fn pose_nearly_preserves_conformal_factors() {
        let beta = [0.2, -0.15, 0.1, 0.25];
        let rest = compute_cfan(&generate_mesh(&spec(&beta, &[0.0; 4])).unwrap()).unwrap();
        // angles up to two standard deviations of the sampling distribution
        for theta in [[0.4, 0.0, 0.0, 0.0], [0.0, -0.4, 0.4, 0.0], [0.3, 0.3, -0.3, 0.3]] {
            let posed = compute_cfan(&generate_mesh(&spec(&beta, &theta)).unwrap()).unwrap();
            let d = rel_diff(&rest.conformal, &posed.conformal);
            assert!(d < 0.02, "{theta:?}: {d}");
        }
    }

    #[test]
    fn factorisation_fidelity() {
        // a grid of specs varying both factors
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, FACTOR_STD).unwrap();
        let specs: Vec<FactorSpec> = (0..24)
            .map(|_| {
                let b: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
                let t: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
                spec(&b, &t)
            })
            .collect();
        let feats: Vec<Vec<f64>> = specs
            .iter()
            .map(|s| compute_cfan(&generate_mesh(s).unwrap()).unwrap().conformal)
            .collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut dc, mut db, mut dt) = (vec![], vec![], vec![]);
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                dc.push(dist(&feats[i], &feats[j]));
                db.push(dist(&specs[i].beta, &specs[j].beta));
                dt.push(dist(&specs[i].theta, &specs[j].theta));
            }
        }
        let rho_beta = util::spearman(&dc, &db);
        let rho_theta = util::spearman(&dc, &dt);
        assert!(rho_beta > 0.8, "conformal vs beta {rho_beta}");
        assert!(rho_theta.abs() < 0.2, "conformal vs theta {rho_theta}");

        // at fixed identity, positions track pose
        let beta = [0.1, -0.2, 0.15, 0.05];
        let posed: Vec<(Vec<f64>, Vec<f64>)> = (0..16)
            .map(|_| {
                let t: Vec<f64> = (0..4).map(|_| normal.sample(&mut rng)).collect();
                let m = generate_mesh(&spec(&beta, &t)).unwrap();
                (t, m.vertices().iter().flatten().copied().collect())
            })
            .collect();
        let (mut dp, mut dt) = (vec![], vec![]);
        for i in 0..posed.len() {
            for j in i + 1..posed.len() {
                dp.push(dist(&posed[i].1, &posed[j].1));
                dt.push(dist(&posed[i].0, &posed[j].0));
            }
        }
        let rho = util::spearman(&dp, &dt);
        assert!(rho > 0.8, "positions vs theta {rho}");
    }

    #[test]
    fn dataset_is_deterministic_and_split() {
        let cfg = DatasetConfig {
            count: 40,
            ..Default::default()
        };
        let (a, ma) = generate_dataset(&cfg).unwrap();
        let (b, _) = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(split_counts(200, cfg.splits), (150, 10, 40));
        assert_eq!(a.indices(Split::Train).len(), 30);
        assert_eq!(a.indices(Split::Val).len(), 2);
        assert_eq!(a.indices(Split::Test).len(), 8);
        assert!(ma.iter().all(|m| m.topology_checksum() == a.topology_checksum));
        assert!(matches!(
            generate_dataset(&DatasetConfig { count: 5, ..cfg }),
            Err(SynthError::TooFewSamples(5))
        ));
    }

    #[test]
    fn factor_std_matches() {
        let cfg = DatasetConfig {
            count: 2500,
            beta_dims: 4,
            theta_dims: 0,
            base: BaseShape::Icosphere { subdivisions: 0 },
            ..Default::default()
        };
        let (m, _) = generate_dataset(&cfg).unwrap();
        let all: Vec<f64> = m.samples.iter().flat_map(|s| s.beta.clone()).collect();
        let mean = util::mean(&all);
        let std = (all.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64).sqrt();
        assert!((std / FACTOR_STD - 1.0).abs() < 0.03, "{std}");
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 12,
            noise_sigma: Some(0.001),
            ..Default::default()
        };
        let (m, meshes) = generate_dataset(&cfg).unwrap();
        write_dataset(dir.path(), &m, &meshes).unwrap();
        let (m2, meshes2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in meshes.iter().zip(&meshes2) {
            for (p, q) in a.vertices().iter().zip(b.vertices()) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() <= 1e-8 * p[k].abs().max(1.0));
                }
            }
        }
    }
}
