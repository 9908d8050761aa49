//! The mesh variational autoencoder: encoders built from parallel transport
//! convolutions over a decimation hierarchy, a joint decoder, the training
//! losses and the training loop.

mod config;
pub mod gradcheck;
mod loss;
mod train;

pub use config::{ModelConfig, Variant};
pub use loss::{
    disentanglement_penalty, kl_term, metric_penalty, sample_pairs, total_loss, LossParts, DEGENERATE_PENALTY,
};
pub use train::{evaluate_losses, train, train_with, EpochRecord, HeldOutLosses, TrainOutcome};

use crate::container::{Container, ContainerError};
use crate::mesh::{FeatureNormalizer, MeshError, TriangleMesh};
use crate::ptc::{MeshHierarchy, PtcError};
use crate::sparse::CsrMatrix;
use crate::tensor::{batch_norm, BatchNormMode, BatchNormState, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Bound on the log-variance head.
pub const LOGVAR_CLAMP: f64 = 20.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("a batch needs at least 2 meshes, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at epoch {epoch}, step {step}: {source}")]
    NonFiniteDetected {
        epoch: usize,
        step: usize,
        source: TensorError,
    },
    #[error("gradient check failed at {0}")]
    Gradient(crate::tensor::gradcheck::GradientMismatch),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Ptc(#[from] PtcError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Means and log-variances of one mesh's latent posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalStats {
    pub mu_c: Vec<f64>,
    pub mu_n: Vec<f64>,
    pub logvar_c: Vec<f64>,
    pub logvar_n: Vec<f64>,
}

impl VariationalStats {
    /// `[mu_c, mu_n]`.
    pub fn mean_code(&self) -> LatentCode {
        LatentCode {
            z_c: self.mu_c.clone(),
            z_n: self.mu_n.clone(),
        }
    }
}

/// A point in latent space, split into its conformal and normal parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z_c: Vec<f64>,
    pub z_n: Vec<f64>,
}

impl LatentCode {
    pub fn joined(&self) -> Vec<f64> {
        self.z_c.iter().chain(&self.z_n).copied().collect()
    }

    /// `(1 − t) · self + t · other`, part by part.
    pub fn lerp(&self, other: &LatentCode, t: f64) -> LatentCode {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        LatentCode {
            z_c: mix(&self.z_c, &other.z_c),
            z_n: mix(&self.z_n, &other.z_n),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    bn: Option<(ParamId, ParamId, usize)>,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    layers: Vec<ConvIds>,
    head_w: ParamId,
    head_b: ParamId,
    /// Input statistics, per vertex and channel.
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    channels: usize,
    latent: usize,
}

#[derive(Debug, Clone)]
struct DecoderIds {
    dense_w: ParamId,
    dense_b: ParamId,
    layers: Vec<ConvIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Sparse operators of the hierarchy, shared by every forward pass.
#[derive(Debug, Clone)]
struct Network {
    faces: Arc<Vec<[usize; 3]>>,
    sizes: Vec<usize>,
    conv: Vec<Arc<CsrMatrix>>,
    down: Vec<Arc<CsrMatrix>>,
    up: Vec<Arc<CsrMatrix>>,
    stencil: usize,
    /// Hierarchy level of each encoder layer.
    schedule: Vec<usize>,
}

/// Trained or freshly initialised autoencoder.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Running statistics of every encoder batch-norm layer.
    pub bn: Vec<BatchNormState>,
    pub normalizer: FeatureNormalizer,
    pub hierarchy: Arc<MeshHierarchy>,
    /// Shape the decoder output is added to, flattened `n × 3`.
    template: Vec<f64>,
    net: Network,
    encoders: Vec<EncoderIds>,
    decoder: DecoderIds,
}

/// Hierarchy level of each of `layers` encoder layers: one level per layer
/// while levels remain, then the coarsest level repeats.
pub fn layer_schedule(layers: usize, depth: usize) -> Vec<usize> {
    (0..layers).map(|i| i.min(depth.saturating_sub(1))).collect()
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("matching length")
}

impl Model {
    /// Builds a model with fresh parameters drawn from `config.seed`.
    ///
    /// The decoder predicts offsets from `template`, which also fixes the
    /// topology; it is normally the mean training shape. `normalizer` must
    /// have 4 channels (conformal factor, normal) for the CFAN variant and 3
    /// (coordinates) for the coordinate variant.
    pub fn new(
        config: ModelConfig,
        hierarchy: Arc<MeshHierarchy>,
        template: &TriangleMesh,
        normalizer: FeatureNormalizer,
    ) -> Result<Self, ModelError> {
        let faces = template.faces();
        config.validate().map_err(ModelError::Config)?;
        let expected_channels = match config.variant {
            Variant::Cfan => 4,
            Variant::Xyz => 3,
        };
        let n = hierarchy.level_sizes()[0];
        if normalizer.channels != expected_channels || normalizer.vertex_count != n {
            return Err(ModelError::ShapeMismatch(format!(
                "normalizer has {} channels over {} vertices, expected {expected_channels} over {n}",
                normalizer.channels, normalizer.vertex_count
            )));
        }
        if template.vertex_count() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "template has {} vertices, hierarchy {n}",
                template.vertex_count()
            )));
        }
        let net = Network::from_hierarchy(&hierarchy, faces, config.encoder_widths.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let specs: Vec<(&str, Vec<usize>, usize)> = match config.variant {
            Variant::Cfan => vec![
                ("enc_c", vec![0], config.latent_dims.0),
                ("enc_n", vec![1, 2, 3], config.latent_dims.1),
            ],
            Variant::Xyz => vec![("enc_x", vec![0, 1, 2], config.total_latent())],
        };
        let mut encoders = Vec::new();
        for (name, channels, latent) in specs {
            let sub = normalizer.select_channels(&channels);
            let mut layers = Vec::new();
            let mut cin = channels.len();
            for (i, &w) in config.encoder_widths.iter().enumerate() {
                let wid = params.add(format!("{name}/conv{i}/w"), glorot(&mut rng, net.stencil * cin, w));
                let bid = params.add(format!("{name}/conv{i}/b"), Tensor::zeros(&[w]));
                let g = params.add(format!("{name}/bn{i}/gamma"), Tensor::full(&[w], 1.0));
                let be = params.add(format!("{name}/bn{i}/beta"), Tensor::zeros(&[w]));
                bn.push(BatchNormState::new(w));
                layers.push(ConvIds {
                    w: wid,
                    b: bid,
                    bn: Some((g, be, bn.len() - 1)),
                });
                cin = w;
            }
            let flat = net.sizes[*net.schedule.last().expect("layers")] * cin;
            let head_w = params.add(format!("{name}/head/w"), glorot(&mut rng, flat, 2 * latent));
            let head_b = params.add(format!("{name}/head/b"), Tensor::zeros(&[2 * latent]));
            encoders.push(EncoderIds {
                layers,
                head_w,
                head_b,
                input_mean: sub.mean,
                input_std: sub.std,
                channels: channels.len(),
                latent,
            });
        }
        let widths = &config.decoder_widths;
        let coarse = net.sizes[*net.schedule.last().expect("layers")];
        let dense_w = params.add(
            "dec/dense/w",
            glorot(&mut rng, config.total_latent(), coarse * widths[0]),
        );
        let dense_b = params.add("dec/dense/b", Tensor::zeros(&[coarse * widths[0]]));
        let mut layers = Vec::new();
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let wid = params.add(format!("dec/conv{i}/w"), glorot(&mut rng, net.stencil * cin, w));
            let bid = params.add(format!("dec/conv{i}/b"), Tensor::zeros(&[w]));
            layers.push(ConvIds {
                w: wid,
                b: bid,
                bn: None,
            });
            cin = w;
        }
        let out_w = params.add("dec/out/w", glorot(&mut rng, cin, 3));
        let out_b = params.add("dec/out/b", Tensor::zeros(&[3]));
        Ok(Model {
            config,
            params,
            bn,
            normalizer,
            hierarchy,
            template: template.vertices().iter().flatten().copied().collect(),
            net,
            encoders,
            decoder: DecoderIds {
                dense_w,
                dense_b,
                layers,
                out_w,
                out_b,
            },
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.net.sizes[0]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.net.faces
    }

    pub fn topology_checksum(&self) -> &str {
        &self.hierarchy.topology_checksum
    }

    /// Level used by each encoder layer.
    pub fn schedule(&self) -> &[usize] {
        &self.net.schedule
    }

    pub(crate) fn shared_faces(&self) -> &Arc<Vec<[usize; 3]>> {
        &self.net.faces
    }

    fn check_mesh(&self, mesh: &TriangleMesh) -> Result<(), ModelError> {
        if mesh.topology_checksum() != self.hierarchy.topology_checksum {
            return Err(ModelError::ShapeMismatch(format!(
                "mesh {} does not share the model topology",
                mesh.name()
            )));
        }
        Ok(())
    }

    /// Stacks meshes into a `[B, n, 3]` tensor after a topology check.
    pub fn positions(&self, meshes: &[&TriangleMesh]) -> Result<Tensor, ModelError> {
        let mut data = Vec::with_capacity(meshes.len() * self.vertex_count() * 3);
        for m in meshes {
            self.check_mesh(m)?;
            data.extend(m.vertices().iter().flatten());
        }
        Ok(Tensor::new(&[meshes.len(), self.vertex_count(), 3], data)?)
    }

    /// Normalised encoder inputs computed on the tape from positions
    /// `[B, n, 3]`, one per encoder.
    pub(crate) fn features(&self, tape: &mut Tape, p: Var, which: &[bool]) -> Result<Vec<Option<Var>>, ModelError> {
        let mut out = Vec::with_capacity(self.encoders.len());
        match self.config.variant {
            Variant::Cfan => {
                let (b, n) = (tape.shape(p)[0], tape.shape(p)[1]);
                if which[0] {
                    let c = tape.conformal_factor(p, &self.net.faces)?;
                    let c = tape.reshape(c, &[b, n, 1])?;
                    let e = &self.encoders[0];
                    out.push(Some(tape.standardize(c, &e.input_mean, &e.input_std)?));
                } else {
                    out.push(None);
                }
                if which[1] {
                    let nr = tape.vertex_normals(p, &self.net.faces)?;
                    let e = &self.encoders[1];
                    out.push(Some(tape.standardize(nr, &e.input_mean, &e.input_std)?));
                } else {
                    out.push(None);
                }
            }
            Variant::Xyz => {
                let e = &self.encoders[0];
                out.push(Some(tape.standardize(p, &e.input_mean, &e.input_std)?));
            }
        }
        Ok(out)
    }

    fn conv(&self, tape: &mut Tape, x: Var, level: usize, ids: &ConvIds) -> Result<Var, ModelError> {
        let (b, n, c) = (tape.shape(x)[0], tape.shape(x)[1], tape.shape(x)[2]);
        let sampled = tape.sparse_matmul(&self.net.conv[level], x)?;
        let stacked = tape.reshape(sampled, &[b, n, self.net.stencil * c])?;
        let w = tape.param(&self.params, ids.w);
        let bias = tape.param(&self.params, ids.b);
        Ok(tape.affine(stacked, w, Some(bias))?)
    }

    /// Runs encoder `k` on a `[B, n, C]` input, returning `(mu, logvar)`.
    pub(crate) fn encoder_forward(
        &self,
        tape: &mut Tape,
        k: usize,
        x: Var,
        bn: &mut [BatchNormState],
        mode: BatchNormMode,
    ) -> Result<(Var, Var), ModelError> {
        let enc = &self.encoders[k];
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.vertex_count() || shape[2] != enc.channels {
            return Err(ModelError::ShapeMismatch(format!(
                "encoder input {shape:?}, expected [B, {}, {}]",
                self.vertex_count(),
                enc.channels
            )));
        }
        let mut h = x;
        let mut level = 0;
        for (ids, &target) in enc.layers.iter().zip(&self.net.schedule) {
            while level < target {
                h = tape.sparse_matmul(&self.net.down[level], h)?;
                level += 1;
            }
            h = self.conv(tape, h, level, ids)?;
            let (g, be, slot) = ids.bn.expect("encoder layers are normalised");
            let g = tape.param(&self.params, g);
            let be = tape.param(&self.params, be);
            h = batch_norm(tape, h, g, be, &mut bn[slot], mode)?;
            h = tape.relu(h);
        }
        let b = shape[0];
        let flat = tape.value(h).len() / b;
        let h = tape.reshape(h, &[b, flat])?;
        let w = tape.param(&self.params, enc.head_w);
        let hb = tape.param(&self.params, enc.head_b);
        let stats = tape.affine(h, w, Some(hb))?;
        let mu = tape.slice(stats, 0, enc.latent)?;
        let lv = tape.slice(stats, enc.latent, enc.latent)?;
        let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, lv))
    }

    /// Encodes positions `[B, n, 3]` into `(mu_c, logvar_c, mu_n, logvar_n)`.
    /// Only the requested halves are computed for the CFAN variant.
    pub(crate) fn encode_tape(
        &self,
        tape: &mut Tape,
        p: Var,
        bn: &mut [BatchNormState],
        mode: BatchNormMode,
        which: [bool; 2],
    ) -> Result<[Option<(Var, Var)>; 2], ModelError> {
        let inputs = self.features(tape, p, &which)?;
        match self.config.variant {
            Variant::Cfan => {
                let c = match inputs[0] {
                    Some(x) => Some(self.encoder_forward(tape, 0, x, bn, mode)?),
                    None => None,
                };
                let n = match inputs[1] {
                    Some(x) => Some(self.encoder_forward(tape, 1, x, bn, mode)?),
                    None => None,
                };
                Ok([c, n])
            }
            Variant::Xyz => {
                let (mu, lv) = self.encoder_forward(tape, 0, inputs[0].expect("one input"), bn, mode)?;
                let lc = self.config.latent_dims.0;
                let ln = self.config.latent_dims.1;
                Ok([
                    Some((tape.slice(mu, 0, lc)?, tape.slice(lv, 0, lc)?)),
                    Some((tape.slice(mu, lc, ln)?, tape.slice(lv, lc, ln)?)),
                ])
            }
        }
    }

    /// Decodes joint codes `[B, ℓ_c + ℓ_n]` into positions `[B, n, 3]`.
    pub(crate) fn decoder_forward(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.config.total_latent() {
            return Err(ModelError::ShapeMismatch(format!(
                "latent {shape:?}, expected [B, {}]",
                self.config.total_latent()
            )));
        }
        let b = shape[0];
        let d = &self.decoder;
        let w = tape.param(&self.params, d.dense_w);
        let bias = tape.param(&self.params, d.dense_b);
        let h = tape.affine(z, w, Some(bias))?;
        let h = tape.elu(h);
        let mut level = *self.net.schedule.last().expect("layers");
        let mut h = tape.reshape(h, &[b, self.net.sizes[level], self.config.decoder_widths[0]])?;
        for (ids, &target) in d.layers.iter().zip(self.net.schedule.iter().rev()) {
            while level > target {
                h = tape.sparse_matmul(&self.net.up[level - 1], h)?;
                level -= 1;
            }
            h = self.conv(tape, h, level, ids)?;
            h = tape.elu(h);
        }
        while level > 0 {
            h = tape.sparse_matmul(&self.net.up[level - 1], h)?;
            level -= 1;
        }
        let w = tape.param(&self.params, d.out_w);
        let bias = tape.param(&self.params, d.out_b);
        let offsets = tape.affine(h, w, Some(bias))?;
        let template = tape.constant(Tensor::new(&[b, self.vertex_count(), 3], self.template.repeat(b))?);
        Ok(tape.add(offsets, template)?)
    }

    /// Posterior statistics of each mesh with batch norm in `Eval` mode.
    pub fn encode(&self, meshes: &[&TriangleMesh]) -> Result<Vec<VariationalStats>, ModelError> {
        let mut tape = Tape::new();
        let p = tape.constant(self.positions(meshes)?);
        let mut bn = self.bn.clone();
        let [c, n] = self.encode_tape(&mut tape, p, &mut bn, BatchNormMode::Eval, [true, true])?;
        let (c, n) = (c.expect("requested"), n.expect("requested"));
        tape.ensure_finite()?;
        let rows = |v: Var, i: usize, tape: &Tape| {
            let w = tape.shape(v)[1];
            tape.value(v).data[i * w..(i + 1) * w].to_vec()
        };
        Ok((0..meshes.len())
            .map(|i| VariationalStats {
                mu_c: rows(c.0, i, &tape),
                logvar_c: rows(c.1, i, &tape),
                mu_n: rows(n.0, i, &tape),
                logvar_n: rows(n.1, i, &tape),
            })
            .collect())
    }

    /// Decodes codes into meshes on the model topology.
    pub fn decode(&self, codes: &[LatentCode]) -> Result<Vec<TriangleMesh>, ModelError> {
        self.decode_positions(codes)?
            .into_iter()
            .enumerate()
            .map(|(i, v)| Ok(TriangleMesh::new(v, self.faces().to_vec(), format!("decoded_{i}"))?))
            .collect()
    }

    /// Raw decoder output, one coordinate list per code. Unlike
    /// [`Model::decode`] this never fails on degenerate faces.
    pub fn decode_positions(&self, codes: &[LatentCode]) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
        let (lc, ln) = self.config.latent_dims;
        let mut flat = Vec::with_capacity(codes.len() * (lc + ln));
        for c in codes {
            if c.z_c.len() != lc || c.z_n.len() != ln {
                return Err(ModelError::ShapeMismatch(format!(
                    "code of sizes ({}, {}), expected ({lc}, {ln})",
                    c.z_c.len(),
                    c.z_n.len()
                )));
            }
            flat.extend(c.joined());
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[codes.len(), lc + ln], flat)?);
        let p = self.decoder_forward(&mut tape, z)?;
        tape.ensure_finite()?;
        let n = self.vertex_count();
        Ok(tape
            .value(p)
            .data
            .chunks(3 * n)
            .map(|m| m.chunks(3).map(|v| [v[0], v[1], v[2]]).collect())
            .collect())
    }

    /// `decode(mu)` for each mesh.
    pub fn reconstruct(&self, meshes: &[&TriangleMesh]) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
        let codes: Vec<LatentCode> = self.encode(meshes)?.iter().map(VariationalStats::mean_code).collect();
        self.decode_positions(&codes)
    }

    pub fn to_container(&self) -> Result<Container, ModelError> {
        let mut c = Container::new();
        c.put_text("meta/config", &self.config.to_toml())?;
        c.put_usize(
            "meta/faces",
            &self.faces().iter().flatten().copied().collect::<Vec<_>>(),
        )?;
        c.put_f64("meta/template", &[self.vertex_count(), 3], self.template.clone())?;
        self.params.write_to(&mut c, "param/")?;
        for (i, s) in self.bn.iter().enumerate() {
            c.put_f64(&format!("bn/{i}/mean"), &[s.mean.len()], s.mean.clone())?;
            c.put_f64(&format!("bn/{i}/var"), &[s.var.len()], s.var.clone())?;
        }
        let nz = &self.normalizer;
        c.put_f64("norm/mean", &[nz.vertex_count, nz.channels], nz.mean.clone())?;
        c.put_f64("norm/std", &[nz.vertex_count, nz.channels], nz.std.clone())?;
        c.insert_prefixed("hier/", &self.hierarchy.to_container()?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        let config = ModelConfig::from_toml(c.get_text("meta/config")?).map_err(ModelError::Config)?;
        let flat = c.get_usize("meta/faces")?;
        if flat.len() % 3 != 0 {
            return Err(ModelError::ShapeMismatch("face list length".into()));
        }
        let faces: Vec<[usize; 3]> = flat.chunks(3).map(|f| [f[0], f[1], f[2]]).collect();
        let template = TriangleMesh::new(
            c.get_f64("meta/template")?
                .1
                .chunks(3)
                .map(|v| [v[0], v[1], v[2]])
                .collect(),
            faces,
            "template",
        )?;
        let hierarchy = Arc::new(MeshHierarchy::from_container(&c.extract_prefixed("hier/"))?);
        let (dims, mean) = c.get_f64("norm/mean")?;
        let (_, std) = c.get_f64("norm/std")?;
        if dims.len() != 2 {
            return Err(ModelError::ShapeMismatch("normalizer dims".into()));
        }
        let normalizer = FeatureNormalizer {
            vertex_count: dims[0],
            channels: dims[1],
            mean: mean.to_vec(),
            std: std.to_vec(),
        };
        let mut model = Model::new(config, hierarchy, &template, normalizer)?;
        model.params.read_from(c, "param/")?;
        for (i, s) in model.bn.iter_mut().enumerate() {
            s.mean = c.get_f64(&format!("bn/{i}/mean"))?.1.to_vec();
            s.var = c.get_f64(&format!("bn/{i}/var"))?.1.to_vec();
        }
        Ok(model)
    }

    /// Writes the checkpoint atomically.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_container()?.write_atomic(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Network {
    fn from_hierarchy(h: &MeshHierarchy, faces: &[[usize; 3]], layers: usize) -> Result<Self, ModelError> {
        let sizes = h.level_sizes();
        if faces.iter().flatten().any(|&v| v >= sizes[0]) {
            return Err(ModelError::ShapeMismatch("face index beyond the finest level".into()));
        }
        let stencil = h.operators[0].stencil_size;
        Ok(Network {
            faces: Arc::new(faces.to_vec()),
            conv: h.operators.iter().map(|op| Arc::new(op.effective_matrix())).collect(),
            down: h.down_maps.iter().cloned().map(Arc::new).collect(),
            up: h.up_maps.iter().cloned().map(Arc::new).collect(),
            schedule: layer_schedule(layers, sizes.len()),
            sizes,
            stencil,
        })
    }
}

/// Builds a fresh model for `meshes`: the operators and decoder template
/// come from their mean shape and the input normaliser from their features.
pub fn build_model(config: ModelConfig, meshes: &[&TriangleMesh]) -> Result<Model, ModelError> {
    let mean = mean_shape(meshes)?;
    let cfan = crate::mesh::compute_cfan(&mean)?;
    let hierarchy = crate::ptc::build_hierarchy(&mean, &cfan, &crate::ptc::HierarchyConfig::default())?;
    let normalizer = fit_normalizer(config.variant, meshes)?;
    Model::new(config, Arc::new(hierarchy), &mean, normalizer)
}

/// Element-wise mean of meshes sharing one topology.
pub fn mean_shape(meshes: &[&TriangleMesh]) -> Result<TriangleMesh, ModelError> {
    let first = meshes
        .first()
        .ok_or_else(|| ModelError::ShapeMismatch("no meshes to average".into()))?;
    let topo = first.topology_checksum();
    let mut acc = vec![[0.0; 3]; first.vertex_count()];
    for m in meshes {
        if m.topology_checksum() != topo {
            return Err(ModelError::ShapeMismatch(format!(
                "{} has a different topology",
                m.name()
            )));
        }
        for (a, v) in acc.iter_mut().zip(m.vertices()) {
            for k in 0..3 {
                a[k] += v[k];
            }
        }
    }
    let inv = 1.0 / meshes.len() as f64;
    let verts = acc.into_iter().map(|a| a.map(|x| x * inv)).collect();
    Ok(first.with_vertices(verts)?.renamed("mean-shape"))
}

/// Fits the per-vertex input normaliser for `variant` on training meshes.
pub fn fit_normalizer(variant: Variant, meshes: &[&TriangleMesh]) -> Result<FeatureNormalizer, ModelError> {
    let n = meshes
        .first()
        .ok_or_else(|| ModelError::ShapeMismatch("no meshes".into()))?
        .vertex_count();
    Ok(match variant {
        Variant::Cfan => {
            let feats = meshes
                .iter()
                .map(|m| crate::mesh::compute_cfan(m))
                .collect::<Result<Vec<_>, _>>()?;
            FeatureNormalizer::fit_cfan(&feats)?
        }
        Variant::Xyz => {
            let samples: Vec<Vec<f64>> = meshes
                .iter()
                .map(|m| m.vertices().iter().flatten().copied().collect())
                .collect();
            FeatureNormalizer::fit(&samples, n, 3)?
        }
    })
}
