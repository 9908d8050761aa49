//! Latent-space analysis: Procrustes registration between models, nearest
//! neighbour disentanglement statistics, PCA, CCA and Gaussian sampling of
//! new codes.

mod io;

pub use io::{read_embedding, write_embedding, write_matrix_csv};

use crate::model::LatentCode;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Singular-value ratio below which a registration is reported as rank
/// collapsed.
pub const RANK_COLLAPSE_RATIO: f64 = 1e-10;

/// Covariance eigenvalues below this fraction of the largest are raised to
/// it before whitening in [`cca_embed`].
pub const CCA_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("sample ids differ at row {row}: {left} vs {right}")]
    MisalignedSamples { row: usize, left: String, right: String },
    #[error("malformed embedding file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One latent vector per sample, rows aligned with `sample_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: DMatrix<f64>,
    pub sample_ids: Vec<String>,
    /// Column where the conformal block ends and the normal block begins.
    pub split_point: Option<usize>,
}

impl EmbeddingMatrix {
    pub fn new(values: DMatrix<f64>, sample_ids: Vec<String>, split_point: Option<usize>) -> Result<Self, LatentError> {
        if sample_ids.len() != values.nrows() {
            return Err(LatentError::ShapeMismatch(format!(
                "{} ids for {} rows",
                sample_ids.len(),
                values.nrows()
            )));
        }
        if let Some(s) = split_point {
            if s > values.ncols() {
                return Err(LatentError::ShapeMismatch(format!(
                    "split point {s} beyond {} columns",
                    values.ncols()
                )));
            }
        }
        for c in 0..values.ncols() {
            for r in 0..values.nrows() {
                if !values[(r, c)].is_finite() {
                    return Err(LatentError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(EmbeddingMatrix {
            values,
            sample_ids,
            split_point,
        })
    }

    /// Builds from row vectors.
    pub fn from_rows(
        rows: &[Vec<f64>],
        sample_ids: Vec<String>,
        split_point: Option<usize>,
    ) -> Result<Self, LatentError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(LatentError::ShapeMismatch(format!(
                "row of {} values, expected {cols}",
                bad.len()
            )));
        }
        let values = DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied());
        Self::new(values, sample_ids, split_point)
    }

    /// Joint posterior means of every mesh, split between the two codes.
    pub fn from_codes(codes: &[LatentCode], sample_ids: Vec<String>) -> Result<Self, LatentError> {
        let split = codes.first().map(|c| c.z_c.len());
        let rows: Vec<Vec<f64>> = codes.iter().map(LatentCode::joined).collect();
        Self::from_rows(&rows, sample_ids, split)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Columns `start..start + width` as a new embedding without a split.
    pub fn columns(&self, start: usize, width: usize) -> EmbeddingMatrix {
        EmbeddingMatrix {
            values: self.values.columns(start, width).into_owned(),
            sample_ids: self.sample_ids.clone(),
            split_point: None,
        }
    }

    /// The `(conformal, normal)` column blocks.
    pub fn split(&self) -> Result<(EmbeddingMatrix, EmbeddingMatrix), LatentError> {
        let s = self
            .split_point
            .ok_or_else(|| LatentError::ShapeMismatch("embedding has no split point".into()))?;
        Ok((self.columns(0, s), self.columns(s, self.cols() - s)))
    }

    /// Per-row codes split at the split point.
    pub fn to_codes(&self) -> Result<Vec<LatentCode>, LatentError> {
        let s = self
            .split_point
            .ok_or_else(|| LatentError::ShapeMismatch("embedding has no split point".into()))?;
        Ok((0..self.rows())
            .map(|i| {
                let r = self.row(i);
                LatentCode {
                    z_c: r[..s].to_vec(),
                    z_n: r[s..].to_vec(),
                }
            })
            .collect())
    }

    fn check_aligned(&self, other: &EmbeddingMatrix) -> Result<(), LatentError> {
        if self.rows() != other.rows() {
            return Err(LatentError::ShapeMismatch(format!(
                "{} rows vs {} rows",
                self.rows(),
                other.rows()
            )));
        }
        for (row, (a, b)) in self.sample_ids.iter().zip(&other.sample_ids).enumerate() {
            if a != b {
                return Err(LatentError::MisalignedSamples {
                    row,
                    left: a.clone(),
                    right: b.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Outcome of [`procrustes_register`].
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Orthogonal `ℓ × ℓ` matrix minimising `‖Z_x R − Z_cn‖_F`.
    pub rotation: DMatrix<f64>,
    /// Column where the conformal block of the target ends.
    pub split: usize,
    /// `‖Z_x R − Z_cn‖_F²` at the solution.
    pub residual: f64,
    /// `‖Z_x − Z_cn‖_F²`, the objective at the identity.
    pub unregistered_residual: f64,
    /// Singular values of `Z_xᵀ Z_cn`, largest first.
    pub singular_values: Vec<f64>,
    /// Set when the smallest singular value is below
    /// [`RANK_COLLAPSE_RATIO`] times the largest; the rotation is then not
    /// unique.
    pub rank_collapse: bool,
}

impl RegistrationResult {
    /// Columns of the rotation mapping onto the conformal block.
    pub fn conformal_block(&self) -> DMatrix<f64> {
        self.rotation.columns(0, self.split).into_owned()
    }

    /// Columns of the rotation mapping onto the normal block.
    pub fn normal_block(&self) -> DMatrix<f64> {
        let l = self.rotation.ncols();
        self.rotation.columns(self.split, l - self.split).into_owned()
    }
}

fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Orthogonal Procrustes registration of `zx` onto `zcn`.
///
/// With `Z_xᵀ Z_cn = U Σ Vᵀ` the minimiser over orthogonal matrices is
/// `R = U Vᵀ`. With `proper` the solution is restricted to rotations by
/// flipping the last column of `U` when `det(U Vᵀ) < 0`. The split point is
/// taken from `zcn`, or the middle column when it has none.
pub fn procrustes_register(
    zx: &EmbeddingMatrix,
    zcn: &EmbeddingMatrix,
    proper: bool,
) -> Result<RegistrationResult, LatentError> {
    zx.check_aligned(zcn)?;
    if zx.cols() != zcn.cols() {
        return Err(LatentError::ShapeMismatch(format!(
            "{} latent columns vs {}",
            zx.cols(),
            zcn.cols()
        )));
    }
    let m = zx.values.transpose() * &zcn.values;
    let svd = m.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    // nalgebra does not promise an order, so sort by singular value
    let l = zx.cols();
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    u = DMatrix::from_fn(l, l, |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(l, l, |r, c| v_t[(order[r], c)]);
    let mut rotation = &u * &v_t;
    if proper && rotation.determinant() < 0.0 {
        let mut last = u.column_mut(l - 1);
        last *= -1.0;
        rotation = &u * &v_t;
    }
    let largest = singular_values.first().copied().unwrap_or(0.0);
    let smallest = singular_values.last().copied().unwrap_or(0.0);
    let rank_collapse = smallest < RANK_COLLAPSE_RATIO * largest || largest == 0.0;
    if rank_collapse {
        log::warn!("registration is rank deficient: singular values span {largest:e} to {smallest:e}");
    }
    let residual = frobenius_sq(&(&zx.values * &rotation - &zcn.values));
    let unregistered_residual = frobenius_sq(&(&zx.values - &zcn.values));
    Ok(RegistrationResult {
        rotation,
        split: zcn.split_point.unwrap_or(l / 2),
        residual,
        unregistered_residual,
        singular_values,
        rank_collapse,
    })
}

/// `(Z_x R_c, Z_x R_n)`: the coordinate model's latents expressed in the
/// registered conformal and normal subspaces.
pub fn split_latents(
    zx: &EmbeddingMatrix,
    reg: &RegistrationResult,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix), LatentError> {
    if zx.cols() != reg.rotation.nrows() {
        return Err(LatentError::ShapeMismatch(format!(
            "{} latent columns for a {}-dimensional registration",
            zx.cols(),
            reg.rotation.nrows()
        )));
    }
    let registered = EmbeddingMatrix {
        values: &zx.values * &reg.rotation,
        sample_ids: zx.sample_ids.clone(),
        split_point: None,
    };
    Ok((
        registered.columns(0, reg.split),
        registered.columns(reg.split, registered.cols() - reg.split),
    ))
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> MeanSe {
        let (mean, se) = crate::util::mean_and_stderr(xs);
        MeanSe { mean, se }
    }
}

/// Nearest-neighbour factor distances for the two latent subspaces.
///
/// `conformal.beta` is the mean `‖Δβ‖` between each sample and its nearest
/// neighbour in the conformal subspace, and so on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnMetric {
    pub conformal: NnRow,
    pub normal: NnRow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnRow {
    pub beta: MeanSe,
    pub theta: MeanSe,
}

impl NnMetric {
    /// Whether the conformal neighbours are closer in `β` and the normal
    /// neighbours closer in `θ`, each by more than `k` combined standard
    /// errors.
    pub fn ordering_holds(&self, k: f64) -> bool {
        let gap = |a: MeanSe, b: MeanSe| b.mean - a.mean > k * (a.se.powi(2) + b.se.powi(2)).sqrt();
        gap(self.conformal.beta, self.normal.beta) && gap(self.normal.theta, self.conformal.theta)
    }

    /// CSV table with one row per subspace.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("space,beta_mean,beta_se,theta_mean,theta_se\n");
        for (name, r) in [("z_c", self.conformal), ("z_n", self.normal)] {
            out += &format!("{name},{},{},{},{}\n", r.beta.mean, r.beta.se, r.theta.mean, r.theta.se);
        }
        out
    }
}

fn nearest_neighbours(m: &DMatrix<f64>) -> Vec<usize> {
    let n = m.nrows();
    (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, i);
            for j in (0..n).filter(|&j| j != i) {
                let d: f64 = (0..m.ncols()).map(|k| (m[(i, k)] - m[(j, k)]).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Nearest-neighbour disentanglement statistics.
///
/// For each sample, finds its Euclidean nearest neighbour (excluding
/// itself) in `zc` and in `zn`, and records the distance between their
/// ground-truth `β` and `θ` vectors.
pub fn nn_disentanglement_metric(
    zc: &EmbeddingMatrix,
    zn: &EmbeddingMatrix,
    beta: &[Vec<f64>],
    theta: &[Vec<f64>],
) -> Result<NnMetric, LatentError> {
    zc.check_aligned(zn)?;
    let n = zc.rows();
    if n < 2 {
        return Err(LatentError::TooFewSamples { needed: 2, got: n });
    }
    if beta.len() != n || theta.len() != n {
        return Err(LatentError::ShapeMismatch(format!(
            "{} β and {} θ vectors for {n} samples",
            beta.len(),
            theta.len()
        )));
    }
    let row = |nn: &[usize]| {
        let db: Vec<f64> = (0..n).map(|i| distance(&beta[i], &beta[nn[i]])).collect();
        let dt: Vec<f64> = (0..n).map(|i| distance(&theta[i], &theta[nn[i]])).collect();
        NnRow {
            beta: MeanSe::of(&db),
            theta: MeanSe::of(&dt),
        }
    };
    Ok(NnMetric {
        conformal: row(&nearest_neighbours(&zc.values)),
        normal: row(&nearest_neighbours(&zn.values)),
    })
}

fn centered(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_fn(m.ncols(), |c, _| m.column(c).sum() / n);
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    (c, mean)
}

/// Eigenpairs of a symmetric matrix, largest eigenvalue first.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Principal axes of an embedding.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Unit axes as columns, by decreasing variance.
    pub components: DMatrix<f64>,
    /// Variance along each axis.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(emb: &EmbeddingMatrix) -> Result<Pca, LatentError> {
        if emb.rows() < 2 {
            return Err(LatentError::TooFewSamples {
                needed: 2,
                got: emb.rows(),
            });
        }
        let (c, mean) = centered(&emb.values);
        let cov = c.transpose() * &c / (emb.rows() as f64 - 1.0);
        let (variances, mut components) = sorted_eigen(cov);
        // the loading of largest magnitude is made positive
        for mut col in components.column_iter_mut() {
            let big = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                col *= -1.0;
            }
        }
        Ok(Pca {
            mean,
            components,
            variances: variances.into_iter().map(|v| v.max(0.0)).collect(),
        })
    }

    /// Fraction of the total variance along each axis.
    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.variances.iter().sum();
        self.variances
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect()
    }

    /// Coordinates of the centred rows on the first `dim` axes.
    pub fn project(&self, emb: &EmbeddingMatrix, dim: usize) -> Result<EmbeddingMatrix, LatentError> {
        if dim > self.components.ncols() || emb.cols() != self.mean.len() {
            return Err(LatentError::ShapeMismatch(format!(
                "projection to {dim} of {} dimensions",
                emb.cols()
            )));
        }
        let mut c = emb.values.clone();
        for (j, mut col) in c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        Ok(EmbeddingMatrix {
            values: c * self.components.columns(0, dim),
            sample_ids: emb.sample_ids.clone(),
            split_point: None,
        })
    }
}

/// Projects mean-centred rows onto the top `target_dim` principal axes.
pub fn pca_project(emb: &EmbeddingMatrix, target_dim: usize) -> Result<EmbeddingMatrix, LatentError> {
    Pca::fit(emb)?.project(emb, target_dim)
}

/// Paired canonical coordinates of two embeddings.
#[derive(Debug, Clone)]
pub struct CcaResult {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Canonical correlations, non-increasing, in `[0, 1]`.
    pub correlations: Vec<f64>,
}

impl CcaResult {
    /// CSV with `sample_id,a_0..,b_0..` columns.
    pub fn to_csv(&self, sample_ids: &[String]) -> String {
        let k = self.a.ncols();
        let mut out = String::from("sample_id");
        for p in ["a", "b"] {
            for i in 0..k {
                out += &format!(",{p}_{i}");
            }
        }
        out.push('\n');
        for (r, id) in sample_ids.iter().enumerate() {
            out += id;
            for m in [&self.a, &self.b] {
                for c in 0..k {
                    out += &format!(",{}", m[(r, c)]);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `C^{-1/2}` with eigenvalues floored at [`CCA_RIDGE`] times the largest.
fn inverse_sqrt(cov: DMatrix<f64>) -> DMatrix<f64> {
    let l = cov.nrows();
    let (values, vectors) = sorted_eigen(cov);
    let floor = (CCA_RIDGE * values[0]).max(f64::MIN_POSITIVE);
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        l,
        values.iter().map(|&v| 1.0 / v.max(floor).sqrt()),
    ));
    &vectors * d * vectors.transpose()
}

/// Canonical correlation analysis: whitens both embeddings, takes the SVD of
/// their cross-covariance and returns the top `out_dim` paired projections.
pub fn cca_embed(a: &EmbeddingMatrix, b: &EmbeddingMatrix, out_dim: usize) -> Result<CcaResult, LatentError> {
    a.check_aligned(b)?;
    if a.rows() < 2 {
        return Err(LatentError::TooFewSamples {
            needed: 2,
            got: a.rows(),
        });
    }
    if out_dim > a.cols().min(b.cols()) {
        return Err(LatentError::ShapeMismatch(format!(
            "{out_dim} components from {} and {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let n = a.rows() as f64 - 1.0;
    let (ca, _) = centered(&a.values);
    let (cb, _) = centered(&b.values);
    let wa = inverse_sqrt(ca.transpose() * &ca / n);
    let wb = inverse_sqrt(cb.transpose() * &cb / n);
    let cross = &wa * (ca.transpose() * &cb / n) * &wb;
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let order = &order[..out_dim];
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), out_dim, |r, c| m[(r, order[c])]);
    Ok(CcaResult {
        a: ca * &wa * pick(&u),
        b: cb * &wb * pick(&v),
        correlations: order.iter().map(|&i| svd.singular_values[i].clamp(0.0, 1.0)).collect(),
    })
}

/// Diagonal Gaussian fitted to an embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    /// Maximum-likelihood variance per dimension.
    pub variance: Vec<f64>,
}

/// Per-dimension mean and variance of the rows.
pub fn fit_latent_gaussian(emb: &EmbeddingMatrix) -> Result<LatentGaussian, LatentError> {
    if emb.rows() < 2 {
        return Err(LatentError::TooFewSamples {
            needed: 2,
            got: emb.rows(),
        });
    }
    let n = emb.rows() as f64;
    let mut mean = Vec::with_capacity(emb.cols());
    let mut variance = Vec::with_capacity(emb.cols());
    for col in emb.values.column_iter() {
        let m = col.sum() / n;
        mean.push(m);
        variance.push(col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n);
    }
    Ok(LatentGaussian { mean, variance })
}

/// Draws `count` vectors from `N(mean, scale · variance)`.
pub fn sample_latents<R: Rng + ?Sized>(fit: &LatentGaussian, scale: f64, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count).map(|_| draw(fit, scale, 0..fit.mean.len(), rng)).collect()
}

fn draw<R: Rng + ?Sized>(fit: &LatentGaussian, scale: f64, dims: std::ops::Range<usize>, rng: &mut R) -> Vec<f64> {
    dims.map(|i| {
        let e: f64 = StandardNormal.sample(rng);
        fit.mean[i] + (scale * fit.variance[i]).sqrt() * e
    })
    .collect()
}

/// Which factor stays fixed across a generated batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    /// One shared normal code; conformal codes vary.
    FixPose,
    /// One shared conformal code; normal codes vary.
    FixIdentity,
}

/// Codes for a generated batch: the fixed half is drawn once, the other half
/// per sample, both from the fitted Gaussian with covariance scaled by
/// `scale`. `split` is the size of the conformal code.
pub fn sample_codes<R: Rng + ?Sized>(
    fit: &LatentGaussian,
    split: usize,
    mode: GenerationMode,
    scale: f64,
    count: usize,
    rng: &mut R,
) -> Vec<LatentCode> {
    let l = fit.mean.len();
    let shared = match mode {
        GenerationMode::FixPose => draw(fit, scale, split..l, rng),
        GenerationMode::FixIdentity => draw(fit, scale, 0..split, rng),
    };
    (0..count)
        .map(|_| match mode {
            GenerationMode::FixPose => LatentCode {
                z_c: draw(fit, scale, 0..split, rng),
                z_n: shared.clone(),
            },
            GenerationMode::FixIdentity => LatentCode {
                z_c: shared.clone(),
                z_n: draw(fit, scale, split..l, rng),
            },
        })
        .collect()
}
