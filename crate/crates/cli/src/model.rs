//! `train`, `evaluate` and `embed`.

use crate::data::{parse_split, Dataset};
use crate::manifest::RunManifest;
use crate::Global;
use anyhow::{bail, Context, Result};
use cfan::eval::{chamfer_sampled, mean_vertex_error_mm, MM_PER_UNIT};
use cfan::latent::{write_embedding, EmbeddingMatrix};
use cfan::mesh::TriangleMesh;
use cfan::model::{build_model, evaluate_losses, fit_normalizer, mean_shape, train_with, Model, ModelConfig, Variant};
use cfan::ptc::MeshHierarchy;
use cfan::synth::Split;
use cfan::util::mean_and_stderr;
use clap::{Args, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Cfan,
    Xyz,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Overrides the configured variant; `xyz` alone also switches to the
    /// coordinate model's default widths when no config file is given.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Precomputed hierarchy; rejected if built for another topology.
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
}

/// The model configuration after applying the config file, then flags.
fn resolve_config(g: &Global, a: &TrainArgs) -> Result<ModelConfig> {
    let mut config = match (&g.config, a.variant) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelConfig::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?
        }
        (None, Some(VariantArg::Xyz)) => ModelConfig::xyz(),
        (None, _) => ModelConfig::default(),
    };
    if let Some(v) = a.variant {
        config.variant = match v {
            VariantArg::Cfan => Variant::Cfan,
            VariantArg::Xyz => Variant::Xyz,
        };
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = a.batch {
        config.batch = b;
    }
    if let Some(s) = g.seed {
        config.seed = s;
    }
    config
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
    Ok(config)
}

pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let config = resolve_config(g, &a)?;
    let data = Dataset::load(&a.dataset)?;
    let (_, train_set) = data.split(Split::Train);
    let (_, val_set) = data.split(Split::Val);
    if train_set.len() < 2 {
        bail!("the training split needs at least 2 meshes, found {}", train_set.len());
    }

    let mut m = RunManifest::new("train", config.seed, &(&a, &config))?;
    m.dataset(&a.dataset)?;
    let model = match &a.hierarchy {
        Some(path) => {
            m.input(path)?;
            let mean = mean_shape(&train_set)?;
            let h = MeshHierarchy::load_checked(path, &mean.topology_checksum())
                .with_context(|| format!("loading hierarchy {}", path.display()))?;
            let normalizer = fit_normalizer(config.variant, &train_set)?;
            Model::new(config.clone(), Arc::new(h), &mean, normalizer)?
        }
        None => build_model(config.clone(), &train_set)?,
    };

    let outcome = train_with(model, &train_set, &val_set, |r| {
        log::info!(
            "epoch {:>4}  train L1 {:.6}  val L1 {:.6}  KL {:.4}  L_D {:.4e}  L_M {:.4e}",
            r.epoch,
            r.train_l1,
            r.val_l1,
            r.kl,
            r.ld,
            r.lm
        );
    })?;
    log::info!("best epoch {}", outcome.best_epoch);

    outcome.model.save(&g.out.join(CHECKPOINT))?;
    std::fs::write(g.out.join("history.csv"), outcome.history_csv())?;
    std::fs::write(g.out.join("config.toml"), config.to_toml())?;
    for f in [CHECKPOINT, "history.csv", "config.toml"] {
        m.output(f);
    }
    m.write(&g.out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Fails unless every mesh has the model's topology.
pub fn check_topology(model: &Model, meshes: &[&TriangleMesh]) -> Result<()> {
    for mesh in meshes {
        if mesh.topology_checksum() != model.topology_checksum() {
            bail!(
                "topology mismatch: {} does not share the checkpoint topology ({} vertices expected, found {})",
                mesh.name(),
                model.vertex_count(),
                mesh.vertex_count()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let model = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let (idx, meshes) = data.split(split);
    if meshes.is_empty() {
        bail!("the {} split is empty", a.split);
    }
    check_topology(&model, &meshes)?;

    let recon = model.reconstruct(&meshes)?;
    let mut w = csv::Writer::from_path(g.out.join("metrics.csv"))?;
    w.write_record(["sample_id", "l2_mm", "chamfer_mm"])?;
    let (mut l2, mut ch) = (Vec::new(), Vec::new());
    for ((&i, mesh), r) in idx.iter().zip(&meshes).zip(&recon) {
        let e = mean_vertex_error_mm(mesh.vertices(), r);
        let c = MM_PER_UNIT * chamfer_sampled(mesh.vertices(), r);
        w.write_record([data.manifest.samples[i].id.clone(), e.to_string(), c.to_string()])?;
        l2.push(e);
        ch.push(c);
    }
    w.flush()?;

    let mut s = csv::Writer::from_path(g.out.join("summary.csv"))?;
    s.write_record(["metric", "mean", "se"])?;
    for (name, xs) in [("l2_mm", &l2), ("chamfer_mm", &ch)] {
        let (mean, se) = mean_and_stderr(xs);
        s.write_record([name.to_string(), mean.to_string(), se.to_string()])?;
    }
    if meshes.len() >= 2 {
        let held = evaluate_losses(&model, &meshes, g.seed())?;
        for (name, v) in [("L1", held.l1), ("KL", held.kl), ("L_D", held.ld), ("L_M", held.lm)] {
            s.write_record([name.to_string(), v.to_string(), String::new()])?;
        }
    }
    s.flush()?;

    let mut m = RunManifest::new("evaluate", g.seed(), &a)?;
    m.input(&a.checkpoint)?;
    m.dataset(&a.dataset)?;
    m.output("metrics.csv");
    m.output("summary.csv");
    m.write(&g.out)?;
    let (mean, se) = mean_and_stderr(&l2);
    println!("mean L2 vertex error: {mean:.4} ± {se:.4} mm over {} meshes", l2.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Posterior means of `meshes` as an embedding split at the conformal size.
pub fn embed_meshes(model: &Model, meshes: &[&TriangleMesh], ids: Vec<String>) -> Result<EmbeddingMatrix> {
    let codes: Vec<_> = model.encode(meshes)?.iter().map(|s| s.mean_code()).collect();
    Ok(EmbeddingMatrix::from_codes(&codes, ids)?)
}

pub fn embed(g: &Global, a: EmbedArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let model = load_model(&a.checkpoint)?;
    let data = Dataset::load(&a.dataset)?;
    let (idx, meshes) = data.split(split);
    if meshes.is_empty() {
        bail!("the {} split is empty", a.split);
    }
    check_topology(&model, &meshes)?;
    let ids: Vec<String> = idx.iter().map(|&i| data.manifest.samples[i].id.clone()).collect();
    let emb = embed_meshes(&model, &meshes, ids)?;
    write_embedding(&g.out.join("embedding.csv"), &emb)?;

    let mut w = csv::Writer::from_path(g.out.join("factors.csv"))?;
    let mut head = vec!["sample_id".to_string()];
    head.extend((0..data.manifest.beta_dims).map(|i| format!("beta_{i}")));
    head.extend((0..data.manifest.theta_dims).map(|i| format!("theta_{i}")));
    w.write_record(&head)?;
    for &i in &idx {
        let rec = &data.manifest.samples[i];
        let mut row = vec![rec.id.clone()];
        row.extend(rec.beta.iter().chain(&rec.theta).map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut m = RunManifest::new("embed", g.seed(), &(&a, model.config.latent_dims))?;
    m.input(&a.checkpoint)?;
    m.dataset(&a.dataset)?;
    m.output("embedding.csv");
    m.output("factors.csv");
    m.write(&g.out)?;
    Ok(())
}
