//! `interpolate`, `transfer`, `generate` and `register`.

use crate::data::Dataset;
use crate::manifest::RunManifest;
use crate::model::{check_topology, load_model};
use crate::Global;
use anyhow::{bail, Context, Result};
use cfan::eval::{chamfer_sampled, mean_pairwise_distance, MM_PER_UNIT};
use cfan::latent::{
    cca_embed, fit_latent_gaussian, nn_disentanglement_metric, pca_project, procrustes_register, read_embedding,
    sample_codes, split_latents, write_embedding, write_matrix_csv, EmbeddingMatrix, GenerationMode, NnMetric,
};
use cfan::mesh::io::{load_mesh_auto, save_mesh, MeshFormat};
use cfan::mesh::{compute_cfan, TriangleMesh};
use cfan::model::{LatentCode, Model};
use cfan::synth::generate_mesh;
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

fn encode_one(model: &Model, mesh: &TriangleMesh) -> Result<LatentCode> {
    check_topology(model, &[mesh])?;
    Ok(model.encode(&[mesh])?[0].mean_code())
}

fn save_off(mesh: &TriangleMesh, out: &Path, name: &str, m: &mut RunManifest) -> Result<()> {
    save_mesh(mesh, &out.join(name), MeshFormat::Off)?;
    m.output(name);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    /// Interpolate the conformal code, keep the first mesh's normal code.
    Conformal,
    /// Interpolate the normal code, keep the first mesh's conformal code.
    Normal,
    /// Interpolate both codes.
    Joint,
}

#[derive(Debug, Args, Serialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mesh_a: PathBuf,
    #[arg(long)]
    pub mesh_b: PathBuf,
    /// Number of points on the uniform grid over [0, 1], endpoints included.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = InterpolationMode::Joint)]
    pub mode: InterpolationMode,
    /// Also decode the steps × steps grid with conformal interpolation along
    /// rows and normal interpolation along columns.
    #[arg(long)]
    pub grid: bool,
}

/// Code at `t` on the path from `a` to `b` under `mode`.
pub fn path_code(a: &LatentCode, b: &LatentCode, mode: InterpolationMode, t: f64) -> LatentCode {
    let both = a.lerp(b, t);
    match mode {
        InterpolationMode::Conformal => LatentCode {
            z_c: both.z_c,
            z_n: a.z_n.clone(),
        },
        InterpolationMode::Normal => LatentCode {
            z_c: a.z_c.clone(),
            z_n: both.z_n,
        },
        InterpolationMode::Joint => both,
    }
}

pub fn interpolate(g: &Global, a: InterpolateArgs) -> Result<()> {
    if a.steps < 2 {
        bail!("--steps must be at least 2");
    }
    let model = load_model(&a.checkpoint)?;
    let mesh_a = load_mesh_auto(&a.mesh_a)?;
    let mesh_b = load_mesh_auto(&a.mesh_b)?;
    let za = encode_one(&model, &mesh_a)?;
    let zb = encode_one(&model, &mesh_b)?;
    let alphas: Vec<f64> = (0..a.steps).map(|i| i as f64 / (a.steps - 1) as f64).collect();

    let mut m = RunManifest::new("interpolate", g.seed(), &a)?;
    m.input(&a.checkpoint)?;
    m.input(&a.mesh_a)?;
    m.input(&a.mesh_b)?;

    let codes: Vec<LatentCode> = alphas.iter().map(|&t| path_code(&za, &zb, a.mode, t)).collect();
    let decoded = model.decode(&codes)?;
    let mut w = csv::Writer::from_path(g.out.join("features.csv"))?;
    w.write_record(["step", "alpha", "vertex", "conformal_factor"])?;
    for (i, (mesh, t)) in decoded.iter().zip(&alphas).enumerate() {
        save_off(mesh, &g.out, &format!("step_{i:03}.off"), &mut m)?;
        let f = compute_cfan(mesh)?;
        for (v, c) in f.conformal.iter().enumerate() {
            w.write_record([i.to_string(), t.to_string(), v.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    m.output("features.csv");

    if a.grid {
        for (r, &tc) in alphas.iter().enumerate() {
            let row: Vec<LatentCode> = alphas
                .iter()
                .map(|&tn| LatentCode {
                    z_c: za.lerp(&zb, tc).z_c,
                    z_n: za.lerp(&zb, tn).z_n,
                })
                .collect();
            for (c, mesh) in model.decode(&row)?.iter().enumerate() {
                save_off(mesh, &g.out, &format!("grid_{r:03}_{c:03}.off"), &mut m)?;
            }
        }
    }
    m.write(&g.out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Transferred {
    /// Identity of the second mesh on the pose of the first.
    Identity,
    /// Pose of the second mesh on the identity of the first.
    Pose,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset holding the samples named by --a and --b; enables the
    /// ground-truth comparison.
    #[arg(long, requires_all = ["a", "b"], conflicts_with_all = ["mesh_a", "mesh_b"])]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub a: Option<String>,
    #[arg(long)]
    pub b: Option<String>,
    #[arg(long, requires = "mesh_b")]
    pub mesh_a: Option<PathBuf>,
    #[arg(long, requires = "mesh_a")]
    pub mesh_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Transferred::Identity)]
    pub which: Transferred,
}

/// The swapped code: `(z_c^b, z_n^a)` for identity, `(z_c^a, z_n^b)` for pose.
pub fn swap_code(a: &LatentCode, b: &LatentCode, which: Transferred) -> LatentCode {
    match which {
        Transferred::Identity => LatentCode {
            z_c: b.z_c.clone(),
            z_n: a.z_n.clone(),
        },
        Transferred::Pose => LatentCode {
            z_c: a.z_c.clone(),
            z_n: b.z_n.clone(),
        },
    }
}

pub fn transfer(g: &Global, a: TransferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut m = RunManifest::new("transfer", g.seed(), &a)?;
    m.input(&a.checkpoint)?;

    let (mesh_a, mesh_b, target) = match (&a.dataset, &a.mesh_a, &a.mesh_b) {
        (Some(dir), _, _) => {
            let data = Dataset::load(dir)?;
            m.dataset(dir)?;
            let ia = data.index_of(a.a.as_deref().unwrap_or_default())?;
            let ib = data.index_of(a.b.as_deref().unwrap_or_default())?;
            let (sa, sb) = (data.manifest.spec(ia), data.manifest.spec(ib));
            let spec = match a.which {
                Transferred::Identity => cfan::synth::FactorSpec { beta: sb.beta, ..sa },
                Transferred::Pose => cfan::synth::FactorSpec { theta: sb.theta, ..sa },
            };
            let target = generate_mesh(&spec)?;
            (data.meshes[ia].clone(), data.meshes[ib].clone(), Some(target))
        }
        (None, Some(pa), Some(pb)) => {
            m.input(pa)?;
            m.input(pb)?;
            (load_mesh_auto(pa)?, load_mesh_auto(pb)?, None)
        }
        _ => bail!("give either --dataset with --a and --b, or --mesh-a and --mesh-b"),
    };
    let za = encode_one(&model, &mesh_a)?;
    let zb = encode_one(&model, &mesh_b)?;
    let swapped = swap_code(&za, &zb, a.which);
    let out = model.decode(&[swapped, za, zb])?;
    save_off(&out[0], &g.out, "transfer.off", &mut m)?;

    let mut w = csv::Writer::from_path(g.out.join("transfer.csv"))?;
    w.write_record(["metric", "value"])?;
    if let Some(target) = target {
        save_off(&target, &g.out, "target.off", &mut m)?;
        let ch = |x: &TriangleMesh| MM_PER_UNIT * chamfer_sampled(x.vertices(), target.vertices());
        let transfer_mm = ch(&out[0]);
        // joint swaps: decoding either full code instead of the mixed one
        let baseline = [ch(&out[1]), ch(&out[2])];
        for (name, v) in [
            ("chamfer_mm", transfer_mm),
            ("baseline_a_chamfer_mm", baseline[0]),
            ("baseline_b_chamfer_mm", baseline[1]),
        ] {
            w.write_record([name.to_string(), v.to_string()])?;
        }
        println!(
            "transfer Chamfer {transfer_mm:.4} mm (joint-swap baselines {:.4} / {:.4} mm)",
            baseline[0], baseline[1]
        );
    }
    w.flush()?;
    m.output("transfer.csv");
    m.write(&g.out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    /// One shared normal code, varying conformal codes.
    FixPose,
    /// One shared conformal code, varying normal codes.
    FixIdentity,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Embedding CSV the latent Gaussian is fitted to.
    #[arg(long)]
    pub embedding: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = GenerateMode::FixPose)]
    pub mode: GenerateMode,
    /// Covariance scale of the sampling distribution.
    #[arg(long, default_value_t = 0.8)]
    pub scale: f64,
}

pub fn generate(g: &Global, a: GenerateArgs) -> Result<()> {
    if !(a.scale >= 0.0 && a.scale.is_finite()) {
        bail!("--scale must be finite and non-negative");
    }
    let model = load_model(&a.checkpoint)?;
    let split = model.config.latent_dims.0;
    let emb = read_embedding(&a.embedding, Some(split))?;
    if emb.cols() != model.config.total_latent() {
        bail!(
            "embedding has {} columns, the checkpoint expects {}",
            emb.cols(),
            model.config.total_latent()
        );
    }
    let fit = fit_latent_gaussian(&emb)?;
    let mode = match a.mode {
        GenerateMode::FixPose => GenerationMode::FixPose,
        GenerateMode::FixIdentity => GenerationMode::FixIdentity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed());
    let codes = sample_codes(&fit, split, mode, a.scale, a.count, &mut rng);

    let mut m = RunManifest::new("generate", g.seed(), &a)?;
    m.input(&a.checkpoint)?;
    m.input(&a.embedding)?;
    let meshes = model.decode(&codes)?;
    let mut conformal = Vec::new();
    let mut normals = Vec::new();
    for (i, mesh) in meshes.iter().enumerate() {
        save_off(mesh, &g.out, &format!("sample_{i:03}.off"), &mut m)?;
        let f = compute_cfan(mesh)?;
        conformal.push(f.conformal);
        normals.push(f.normals.iter().flatten().copied().collect::<Vec<_>>());
    }
    let ids: Vec<String> = (0..a.count).map(|i| format!("sample_{i:03}")).collect();
    write_embedding(&g.out.join("codes.csv"), &EmbeddingMatrix::from_codes(&codes, ids)?)?;
    m.output("codes.csv");

    let mut w = csv::Writer::from_path(g.out.join("diversity.csv"))?;
    w.write_record(["feature", "mean_pairwise_distance"])?;
    w.write_record(["conformal".to_string(), mean_pairwise_distance(&conformal).to_string()])?;
    w.write_record(["normal".to_string(), mean_pairwise_distance(&normals).to_string()])?;
    w.flush()?;
    m.output("diversity.csv");
    m.write(&g.out)?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct RegisterArgs {
    /// Coordinate-model embedding the registration is fitted on.
    #[arg(long)]
    pub xyz: PathBuf,
    /// CFAN-model embedding of the same samples, the registration target.
    #[arg(long)]
    pub cfan: PathBuf,
    /// Width of the conformal block; half the columns by default.
    #[arg(long)]
    pub split_point: Option<usize>,
    /// Coordinate-model embedding to evaluate; the fit embedding by default.
    #[arg(long, requires = "cfan_eval")]
    pub xyz_eval: Option<PathBuf>,
    /// CFAN-model embedding to evaluate; the fit embedding by default.
    #[arg(long, requires = "xyz_eval")]
    pub cfan_eval: Option<PathBuf>,
    /// Ground-truth factors of the evaluated samples, as written by `embed`.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    /// Restrict the registration to proper rotations.
    #[arg(long)]
    pub proper: bool,
    /// Also report the metric on PCA projections of each block.
    #[arg(long)]
    pub pca_dims: Option<usize>,
}

/// `β` and `θ` per sample id.
pub type Factors = HashMap<String, (Vec<f64>, Vec<f64>)>;

/// Reads [`Factors`] from a `factors.csv`.
pub fn read_factors(path: &Path) -> Result<Factors> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let head = r.headers()?.clone();
    if head.get(0) != Some("sample_id") {
        bail!("{}: first column must be sample_id", path.display());
    }
    let kind: Vec<bool> = head.iter().skip(1).map(|h| h.starts_with("beta_")).collect();
    if head
        .iter()
        .skip(1)
        .any(|h| !h.starts_with("beta_") && !h.starts_with("theta_"))
    {
        bail!("{}: columns must be beta_* or theta_*", path.display());
    }
    let mut out = HashMap::new();
    for rec in r.records() {
        let rec = rec?;
        let (mut beta, mut theta) = (Vec::new(), Vec::new());
        for (x, &is_beta) in rec.iter().skip(1).zip(&kind) {
            let v: f64 = x
                .trim()
                .parse()
                .with_context(|| format!("{}: bad number {x:?}", path.display()))?;
            if is_beta {
                beta.push(v)
            } else {
                theta.push(v)
            }
        }
        out.insert(rec[0].to_string(), (beta, theta));
    }
    Ok(out)
}

/// Factor vectors in the row order of `ids`.
fn aligned_factors(factors: &Factors, ids: &[String]) -> Result<[Vec<Vec<f64>>; 2]> {
    let mut beta = Vec::with_capacity(ids.len());
    let mut theta = Vec::with_capacity(ids.len());
    for id in ids {
        let (b, t) = factors.get(id).with_context(|| format!("no factors for sample {id}"))?;
        beta.push(b.clone());
        theta.push(t.clone());
    }
    Ok([beta, theta])
}

/// Results of [`register_embeddings`], before anything is written.
pub struct RegisterReport {
    pub registration: cfan::latent::RegistrationResult,
    pub z_xc: EmbeddingMatrix,
    pub z_xn: EmbeddingMatrix,
    /// `(label, metric)` for the CFAN blocks, the registered coordinate
    /// blocks and the raw coordinate column split, then PCA variants.
    pub metrics: Vec<(String, NnMetric)>,
    pub cca_conformal: cfan::latent::CcaResult,
    pub cca_normal: cfan::latent::CcaResult,
}

/// Fits the registration on `(fit_x, fit_c)` and evaluates it on
/// `(eval_x, eval_c)`.
pub fn register_embeddings(
    fit_x: &EmbeddingMatrix,
    fit_c: &EmbeddingMatrix,
    eval_x: &EmbeddingMatrix,
    eval_c: &EmbeddingMatrix,
    factors: Option<&Factors>,
    proper: bool,
    pca_dims: Option<usize>,
) -> Result<RegisterReport> {
    let registration = procrustes_register(fit_x, fit_c, proper)?;
    let (z_xc, z_xn) = split_latents(eval_x, &registration)?;
    let (c_c, c_n) = eval_c.split()?;
    let (raw_c, raw_n) = eval_x.split()?;

    let mut metrics = Vec::new();
    if let Some(f) = factors {
        let [beta, theta] = aligned_factors(f, &eval_c.sample_ids)?;
        let blocks = [
            ("cfan", &c_c, &c_n),
            ("xyz_registered", &z_xc, &z_xn),
            ("xyz_raw", &raw_c, &raw_n),
        ];
        for (label, zc, zn) in blocks {
            metrics.push((label.to_string(), nn_disentanglement_metric(zc, zn, &beta, &theta)?));
        }
        if let Some(k) = pca_dims {
            for (label, zc, zn) in blocks {
                let pc = pca_project(zc, k.min(zc.cols()))?;
                let pn = pca_project(zn, k.min(zn.cols()))?;
                metrics.push((
                    format!("{label}_pca"),
                    nn_disentanglement_metric(&pc, &pn, &beta, &theta)?,
                ));
            }
        }
    }
    let cca_conformal = cca_embed(&z_xc, &c_c, z_xc.cols().min(c_c.cols()))?;
    let cca_normal = cca_embed(&z_xn, &c_n, z_xn.cols().min(c_n.cols()))?;
    Ok(RegisterReport {
        registration,
        z_xc,
        z_xn,
        metrics,
        cca_conformal,
        cca_normal,
    })
}

pub fn register(g: &Global, a: RegisterArgs) -> Result<()> {
    let read = |p: &Path| -> Result<EmbeddingMatrix> {
        let e = read_embedding(p, None).with_context(|| format!("reading {}", p.display()))?;
        let split = a.split_point.unwrap_or(e.cols() / 2);
        if split == 0 || split >= e.cols() {
            bail!("split point {split} leaves an empty block in {} columns", e.cols());
        }
        Ok(EmbeddingMatrix::new(e.values, e.sample_ids, Some(split))?)
    };
    let fit_x = read(&a.xyz)?;
    let fit_c = read(&a.cfan)?;
    let (eval_x, eval_c) = match (&a.xyz_eval, &a.cfan_eval) {
        (Some(x), Some(c)) => (read(x)?, read(c)?),
        _ => (fit_x.clone(), fit_c.clone()),
    };
    let factors = a.factors.as_deref().map(read_factors).transpose()?;
    let report = register_embeddings(&fit_x, &fit_c, &eval_x, &eval_c, factors.as_ref(), a.proper, a.pca_dims)?;

    let mut m = RunManifest::new("register", g.seed(), &a)?;
    for p in [
        Some(&a.xyz),
        Some(&a.cfan),
        a.xyz_eval.as_ref(),
        a.cfan_eval.as_ref(),
        a.factors.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        m.input(p)?;
    }

    let reg = &report.registration;
    let l = reg.rotation.ncols();
    let cols: Vec<String> = (0..l).map(|i| format!("r_{i}")).collect();
    write_matrix_csv(&g.out.join("rotation.csv"), &cols, &reg.rotation, None)?;
    write_embedding(&g.out.join("z_xc.csv"), &report.z_xc)?;
    write_embedding(&g.out.join("z_xn.csv"), &report.z_xn)?;

    let mut w = csv::Writer::from_path(g.out.join("registration.csv"))?;
    w.write_record(["quantity", "value"])?;
    w.write_record(["residual".to_string(), reg.residual.to_string()])?;
    w.write_record([
        "unregistered_residual".to_string(),
        reg.unregistered_residual.to_string(),
    ])?;
    w.write_record(["determinant".to_string(), reg.rotation.determinant().to_string()])?;
    w.write_record(["rank_collapse".to_string(), reg.rank_collapse.to_string()])?;
    for (i, s) in reg.singular_values.iter().enumerate() {
        w.write_record([format!("singular_value_{i}"), s.to_string()])?;
    }
    w.flush()?;

    if !report.metrics.is_empty() {
        let mut w = csv::Writer::from_path(g.out.join("nn_metric.csv"))?;
        w.write_record(["embedding", "space", "beta_mean", "beta_se", "theta_mean", "theta_se"])?;
        for (label, metric) in &report.metrics {
            for (space, r) in [("z_c", metric.conformal), ("z_n", metric.normal)] {
                w.write_record([
                    label.clone(),
                    space.to_string(),
                    r.beta.mean.to_string(),
                    r.beta.se.to_string(),
                    r.theta.mean.to_string(),
                    r.theta.se.to_string(),
                ])?;
            }
        }
        w.flush()?;
        m.output("nn_metric.csv");
        for (label, metric) in &report.metrics {
            println!("{label}: ordering holds at 2 SE: {}", metric.ordering_holds(2.0));
        }
    }
    std::fs::write(
        g.out.join("cca_conformal.csv"),
        report.cca_conformal.to_csv(&eval_c.sample_ids),
    )?;
    std::fs::write(
        g.out.join("cca_normal.csv"),
        report.cca_normal.to_csv(&eval_c.sample_ids),
    )?;
    for f in [
        "rotation.csv",
        "z_xc.csv",
        "z_xn.csv",
        "registration.csv",
        "cca_conformal.csv",
        "cca_normal.csv",
    ] {
        m.output(f);
    }
    m.write(&g.out)?;
    Ok(())
}
