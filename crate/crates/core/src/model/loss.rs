//! Reconstruction, KL, disentanglement and metric-smoothness terms.

use super::{Model, ModelError, VariationalStats};
use crate::mesh::AREA_EPSILON;
use crate::tensor::{
    has_degenerate_face, kl_divergence, reparameterize, BatchNormMode, BatchNormState, Tape, Tensor, Var,
};
use rand::Rng;

/// Metric-penalty contribution of a pair whose decoded meshes have a
/// degenerate face.
pub const DEGENERATE_PENALTY: f64 = 1e3;

/// Values of the loss terms for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// L1 reconstruction error per mesh.
    pub l1: f64,
    /// KL term per mesh.
    pub kl: f64,
    /// Disentanglement penalty summed over pairs (`NaN` when not computed).
    pub ld: f64,
    /// Metric penalty summed over pairs (`NaN` when not computed).
    pub lm: f64,
}

/// `Σ (σ² + μ² − 1 − log σ²)` over every latent dimension.
pub fn kl_term(stats: &VariationalStats) -> f64 {
    stats
        .mu_c
        .iter()
        .zip(&stats.logvar_c)
        .chain(stats.mu_n.iter().zip(&stats.logvar_n))
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum()
}

/// Shuffles `0..batch` and pairs consecutive items; an odd item is left out.
pub fn sample_pairs<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..batch).collect();
    for i in (1..batch).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order.chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

/// Each pair's blend weight repeated across `width` columns.
fn alpha_rows(tape: &mut Tape, alphas: &[f64], width: usize, complement: bool) -> Result<Var, ModelError> {
    let data = alphas
        .iter()
        .flat_map(|&a| std::iter::repeat_n(if complement { 1.0 - a } else { a }, width))
        .collect();
    Ok(tape.constant(Tensor::new(&[alphas.len(), width], data)?))
}

/// `(1 − α) · a + α · b` row by row for `[P, width]` inputs.
fn blend(tape: &mut Tape, a: Var, b: Var, alphas: &[f64]) -> Result<Var, ModelError> {
    let width = tape.value(a).len() / alphas.len();
    let shape = tape.shape(a).to_vec();
    let wa = alpha_rows(tape, alphas, width, true)?;
    let wb = alpha_rows(tape, alphas, width, false)?;
    let wa = tape.reshape(wa, &shape)?;
    let wb = tape.reshape(wb, &shape)?;
    let x = tape.mul(a, wa)?;
    let y = tape.mul(b, wb)?;
    Ok(tape.add(x, y)?)
}

/// Decode-and-re-encode stability of one code under a perturbation of the
/// other, summed over pairs.
///
/// For each pair `(0, 1)` with weight `α`, the conformal code of mesh 0 is
/// moved by `α (μ_c¹ − μ_c⁰)`, decoded and re-encoded, and the squared
/// change of the re-encoded normal code is charged; then the same with the
/// roles swapped. With `self_terms` the perturbed code's own cycle error is
/// charged too. Re-encoding runs batch norm in `Frozen` mode on `frozen`.
#[allow(clippy::too_many_arguments)]
pub fn disentanglement_penalty(
    model: &Model,
    tape: &mut Tape,
    mu_c: Var,
    mu_n: Var,
    pairs: &[(usize, usize)],
    alphas: &[f64],
    frozen: &mut [BatchNormState],
    self_terms: bool,
) -> Result<Var, ModelError> {
    let first: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let c0 = tape.gather_rows(mu_c, &first)?;
    let c1 = tape.gather_rows(mu_c, &second)?;
    let n0 = tape.gather_rows(mu_n, &first)?;
    let n1 = tape.gather_rows(mu_n, &second)?;
    let mut terms = Vec::new();
    // perturb the conformal code, then the normal code
    for perturb_c in [true, false] {
        let (moved0, moved1, kept) = if perturb_c { (c0, c1, n0) } else { (n0, n1, c0) };
        let moved = blend(tape, moved0, moved1, alphas)?;
        let z = if perturb_c {
            tape.concat(&[moved, kept])?
        } else {
            tape.concat(&[kept, moved])?
        };
        let p = model.decoder_forward(tape, z)?;
        let which = if perturb_c {
            [self_terms, true]
        } else {
            [true, self_terms]
        };
        let [rc, rn] = model.encode_tape(tape, p, frozen, BatchNormMode::Frozen, which)?;
        let (re_kept, re_moved) = if perturb_c { (rn, rc) } else { (rc, rn) };
        let d = tape.sub(re_kept.expect("requested").0, kept)?;
        terms.push(tape.sq_sum(d));
        if self_terms {
            let d = tape.sub(re_moved.expect("requested").0, moved)?;
            terms.push(tape.sq_sum(d));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// L1 gap between blended endpoint conformal factors and the conformal
/// factors of the decoded blended mean, summed over pairs. Pairs with a
/// degenerate decoded face contribute [`DEGENERATE_PENALTY`] instead.
pub fn metric_penalty(
    model: &Model,
    tape: &mut Tape,
    mu_c: Var,
    mu_n: Var,
    pairs: &[(usize, usize)],
    alphas: &[f64],
) -> Result<Var, ModelError> {
    let n = model.vertex_count();
    let z = tape.concat(&[mu_c, mu_n])?;
    let ends = model.decoder_forward(tape, z)?;
    let first: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let z0 = tape.gather_rows(z, &first)?;
    let z1 = tape.gather_rows(z, &second)?;
    let zb = blend(tape, z0, z1, alphas)?;
    let mids = model.decoder_forward(tape, zb)?;
    let faces = model.faces();
    let bad_ends = has_degenerate_face(&tape.value(ends).data, n, faces, AREA_EPSILON);
    let bad_mids = has_degenerate_face(&tape.value(mids).data, n, faces, AREA_EPSILON);
    let valid: Vec<usize> = (0..pairs.len())
        .filter(|&k| !(bad_ends[pairs[k].0] || bad_ends[pairs[k].1] || bad_mids[k]))
        .collect();
    let penalty = DEGENERATE_PENALTY * (pairs.len() - valid.len()) as f64;
    if valid.is_empty() {
        return Ok(tape.constant(Tensor::scalar(penalty)));
    }
    let va: Vec<usize> = valid.iter().map(|&k| pairs[k].0).collect();
    let vb: Vec<usize> = valid.iter().map(|&k| pairs[k].1).collect();
    let valphas: Vec<f64> = valid.iter().map(|&k| alphas[k]).collect();
    let faces = model.shared_faces().clone();
    let pa = tape.gather_rows(ends, &va)?;
    let pb = tape.gather_rows(ends, &vb)?;
    let pm = tape.gather_rows(mids, &valid)?;
    let fa = tape.conformal_factor(pa, &faces)?;
    let fb = tape.conformal_factor(pb, &faces)?;
    let fm = tape.conformal_factor(pm, &faces)?;
    let mixed = blend(tape, fa, fb, &valphas)?;
    let d = tape.sub(mixed, fm)?;
    let l = tape.abs_sum(d);
    Ok(tape.add_scalar(l, penalty))
}

/// The full training objective on one batch.
///
/// `inputs` feed the encoders and `targets` are the meshes to reconstruct
/// (they differ only under noise augmentation); both are `[B, n, 3]`.
/// Batch norm runs in `Train` mode and updates `bn`; re-encoding inside the
/// disentanglement penalty uses a copy taken before this batch.
pub fn total_loss<R: Rng + ?Sized>(
    model: &Model,
    tape: &mut Tape,
    bn: &mut [BatchNormState],
    inputs: &Tensor,
    targets: &Tensor,
    rng: &mut R,
) -> Result<(Var, LossParts), ModelError> {
    let b = inputs.shape[0];
    if b < 2 {
        return Err(ModelError::BatchTooSmall(b));
    }
    if inputs.shape != targets.shape {
        return Err(ModelError::ShapeMismatch(format!(
            "inputs {:?} and targets {:?}",
            inputs.shape, targets.shape
        )));
    }
    let cfg = &model.config;
    let mut frozen = bn.to_vec();
    let x = tape.constant(inputs.clone());
    let target = tape.constant(targets.clone());
    let [c, n] = model.encode_tape(tape, x, bn, BatchNormMode::Train, [true, true])?;
    let ((mu_c, lv_c), (mu_n, lv_n)) = (c.expect("requested"), n.expect("requested"));
    let zc = reparameterize(tape, mu_c, lv_c, Some(&mut *rng))?;
    let zn = reparameterize(tape, mu_n, lv_n, Some(&mut *rng))?;
    let z = tape.concat(&[zc, zn])?;
    let recon = model.decoder_forward(tape, z)?;
    let diff = tape.sub(recon, target)?;
    let l1 = tape.abs_sum(diff);
    let l1 = tape.scale(l1, 1.0 / b as f64);
    let kc = kl_divergence(tape, mu_c, lv_c)?;
    let kn = kl_divergence(tape, mu_n, lv_n)?;
    let kl = tape.add(kc, kn)?;
    let kl = tape.scale(kl, 1.0 / b as f64);
    let pairs = sample_pairs(b, rng);
    let alphas: Vec<f64> = pairs.iter().map(|_| rng.random::<f64>()).collect();
    let wkl = tape.scale(kl, cfg.lambda_kl);
    let mut total = tape.add(l1, wkl)?;
    let mut parts = LossParts {
        l1: tape.item(l1),
        kl: tape.item(kl),
        ld: f64::NAN,
        lm: f64::NAN,
        ..Default::default()
    };
    if cfg.lambda_d > 0.0 {
        let ld = disentanglement_penalty(model, tape, mu_c, mu_n, &pairs, &alphas, &mut frozen, cfg.ld_self_terms)?;
        parts.ld = tape.item(ld);
        let w = tape.scale(ld, cfg.lambda_d);
        total = tape.add(total, w)?;
    }
    if cfg.lambda_m > 0.0 {
        let lm = metric_penalty(model, tape, mu_c, mu_n, &pairs, &alphas)?;
        parts.lm = tape.item(lm);
        let w = tape.scale(lm, cfg.lambda_m);
        total = tape.add(total, w)?;
    }
    parts.total = tape.item(total);
    Ok((total, parts))
}
