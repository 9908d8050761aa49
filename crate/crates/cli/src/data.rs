//! `synth` and `precompute`.

use crate::manifest::RunManifest;
use crate::Global;
use anyhow::{bail, Context, Result};
use cfan::mesh::{compute_cfan, TriangleMesh};
use cfan::model::mean_shape;
use cfan::ptc::{HierarchyConfig, MeshHierarchy};
use cfan::synth::{self, BaseShape, DatasetConfig, DatasetManifest, Split};
use clap::Args;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Number of samples across all splits.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub beta_dims: usize,
    #[arg(long, default_value_t = 4)]
    pub theta_dims: usize,
    /// Icosphere subdivisions of the base surface (2 gives 162 vertices).
    #[arg(long, default_value_t = 2)]
    pub subdivisions: usize,
    /// Standard deviation of per-vertex noise added to every sample.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

pub fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    let config = DatasetConfig {
        count: a.count,
        beta_dims: a.beta_dims,
        theta_dims: a.theta_dims,
        base: BaseShape::Icosphere {
            subdivisions: a.subdivisions,
        },
        seed: g.seed(),
        noise_sigma: a.noise_sigma,
        ..Default::default()
    };
    let (manifest, meshes) = synth::generate_dataset(&config)?;
    synth::write_dataset(&g.out, &manifest, &meshes)?;
    let mut m = RunManifest::new("synth", g.seed(), &a)?;
    m.output(synth::MANIFEST_FILE);
    for rec in &manifest.samples {
        m.output(format!("{}.off", rec.id));
    }
    m.write(&g.out)?;
    log::info!(
        "wrote {} samples ({} vertices) to {}",
        meshes.len(),
        meshes[0].vertex_count(),
        g.out.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct PrecomputeArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Hierarchy options (TOML); defaults apply when absent.
    #[arg(long)]
    pub hierarchy_config: Option<PathBuf>,
}

/// A dataset loaded from disk.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub meshes: Vec<TriangleMesh>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, meshes) =
            synth::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            meshes,
        })
    }

    /// Meshes of one split, with their sample indices.
    pub fn split(&self, split: Split) -> (Vec<usize>, Vec<&TriangleMesh>) {
        let idx = self.manifest.indices(split);
        let meshes = idx.iter().map(|&i| &self.meshes[i]).collect();
        (idx, meshes)
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        match self.manifest.samples.iter().position(|s| s.id == id) {
            Some(i) => Ok(i),
            None => bail!("no sample {id} in {}", self.dir.display()),
        }
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => bail!("unknown split {s}; expected train, val or test"),
    })
}

pub fn precompute(g: &Global, a: PrecomputeArgs) -> Result<()> {
    let config = match &a.hierarchy_config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => HierarchyConfig::default(),
    };
    let data = Dataset::load(&a.dataset)?;
    let (_, train) = data.split(Split::Train);
    let mean = mean_shape(&train)?;
    let feature = compute_cfan(&mean)?;
    let (h, hit) = MeshHierarchy::load_or_build(&g.out, &mean, &feature, &config)?;
    if hit {
        log::info!("cache hit, nothing recomputed");
    }
    let path = MeshHierarchy::cache_path(&g.out, &mean, &config);

    let mut m = RunManifest::new("precompute", g.seed(), &(&a, &config))?;
    m.dataset(&a.dataset)?;
    m.output(file_name(&path));
    m.output("hierarchy.toml");
    let summary = HierarchySummary {
        file: file_name(&path),
        topology_checksum: mean.topology_checksum(),
        seed_vertex: config.seed_vertex,
        level_sizes: h.level_sizes(),
        config,
    };
    cfan::container::write_atomic(&g.out.join("hierarchy.toml"), toml::to_string(&summary)?.as_bytes())?;
    m.write(&g.out)?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct HierarchySummary {
    file: String,
    topology_checksum: String,
    seed_vertex: usize,
    level_sizes: Vec<usize>,
    config: HierarchyConfig,
}

pub fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
