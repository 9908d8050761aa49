//! Finite-difference check of the full training objective.

use super::{total_loss, Model};
use crate::mesh::TriangleMesh;
use crate::tensor::gradcheck::GradientMismatch;
use crate::tensor::{ParamId, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Entries compared by [`check_total_loss`] and the largest relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalLossCheck {
    pub entries: usize,
    pub worst_relative: f64,
}

/// Central differences of [`total_loss`] against its reverse-mode gradient
/// for a spread of about six entries from every parameter tensor.
///
/// The loss is evaluated with a fixed noise and pairing seed so both sides
/// see the same objective. Batch-norm statistics are taken from `model.bn`.
/// Entries the batch-norm mean cancels are zero up to round-off, so each
/// entry is judged against `max(|a|, |n|, 1e-7 · g)` with `g` the largest
/// numeric derivative found.
pub fn check_total_loss(
    model: &Model,
    meshes: &[&TriangleMesh],
    h: f64,
    tol: f64,
) -> Result<TotalLossCheck, crate::model::ModelError> {
    let p = model.positions(meshes)?;
    let eval = |m: &Model| -> Result<(Tape, crate::tensor::Var), crate::model::ModelError> {
        let mut t = Tape::new();
        let mut bn = m.bn.clone();
        let (l, _) = total_loss(m, &mut t, &mut bn, &p, &p, &mut ChaCha8Rng::seed_from_u64(42))?;
        Ok((t, l))
    };
    let (tape, loss) = eval(model)?;
    let grads = tape.backward(loss)?;
    let mut rows = Vec::new();
    for id in model.params.ids().collect::<Vec<ParamId>>() {
        let len = model.params.get(id).len();
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; len]);
        for i in (0..len).step_by((len / 6).max(1)) {
            let mut plus = model.clone();
            plus.params.get_mut(id).data[i] += h;
            let mut minus = model.clone();
            minus.params.get_mut(id).data[i] -= h;
            let (tp, lp) = eval(&plus)?;
            let (tm, lm) = eval(&minus)?;
            rows.push((id, i, analytic[i], (tp.item(lp) - tm.item(lm)) / (2.0 * h)));
        }
    }
    let global = rows.iter().fold(0.0f64, |m, r| m.max(r.3.abs()));
    let mut worst = 0.0f64;
    for &(id, i, a, n) in &rows {
        let denom = a.abs().max(n.abs()).max(1e-7 * global).max(f64::MIN_POSITIVE);
        let rel = (a - n).abs() / denom;
        if rel > tol {
            return Err(crate::model::ModelError::Gradient(GradientMismatch {
                location: format!("{}[{i}]", model.params.name(id)),
                analytic: a,
                numeric: n,
            }));
        }
        worst = worst.max(rel);
    }
    Ok(TotalLossCheck {
        entries: rows.len(),
        worst_relative: worst,
    })
}

/// Moves a freshly initialised model to a generic point for
/// [`check_total_loss`]: every parameter gets a uniform offset in
/// `±0.05` and the running batch-norm statistics become non-trivial.
///
/// Zero biases put ReLUs fed by empty stencils exactly on their kink,
/// where central differences are meaningless.
pub fn prepare_for_gradcheck(model: &mut Model, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        for x in &mut model.params.get_mut(id).data {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    for s in &mut model.bn {
        s.mean.iter_mut().enumerate().for_each(|(i, m)| *m = 0.05 * i as f64);
        s.var
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 1.0 + 0.1 * i as f64);
    }
}
