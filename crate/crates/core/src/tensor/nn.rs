//! Batch normalisation, the reparameterisation trick and the Gaussian KL term.

use super::{mismatch, Op, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::StandardNormal;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics a batch-norm layer normalises with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running estimates; nothing is updated.
    Eval,
    /// Running estimates held fixed inside a training step, so that a
    /// re-encoding pass neither sees nor disturbs the batch statistics.
    Frozen,
}

/// Running per-channel mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug)]
pub(super) struct BatchNormRecord {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

/// Normalises each channel (last axis) of `x`, then scales by `gamma` and
/// shifts by `beta`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
    mode: BatchNormMode,
) -> Result<Var, TensorError> {
    let xv = tape.value(x);
    let c = xv.last_dim();
    if tape.value(gamma).len() != c || tape.value(beta).len() != c || state.mean.len() != c {
        return Err(mismatch(format!("batch norm over {c} channels")));
    }
    let rows = xv.len() / c;
    let (mean, inv_std) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for r in 0..rows {
                for k in 0..c {
                    mean[k] += xv.data[r * c + k];
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            for r in 0..rows {
                for k in 0..c {
                    let d = xv.data[r * c + k] - mean[k];
                    var[k] += d * d;
                }
            }
            let biased: Vec<f64> = var.iter().map(|v| v / rows as f64).collect();
            let unbiased_scale = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            for k in 0..c {
                state.mean[k] = (1.0 - BN_MOMENTUM) * state.mean[k] + BN_MOMENTUM * mean[k];
                state.var[k] = (1.0 - BN_MOMENTUM) * state.var[k] + BN_MOMENTUM * biased[k] * unbiased_scale;
            }
            let inv: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mean, inv)
        }
        BatchNormMode::Eval | BatchNormMode::Frozen => (
            state.mean.clone(),
            state.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
        ),
    };
    let (gv, bv) = (&tape.value(gamma).data, &tape.value(beta).data);
    let mut xhat = vec![0.0; xv.len()];
    let mut data = vec![0.0; xv.len()];
    for r in 0..rows {
        for k in 0..c {
            let i = r * c + k;
            xhat[i] = (xv.data[i] - mean[k]) * inv_std[k];
            data[i] = gv[k] * xhat[i] + bv[k];
        }
    }
    let out = Tensor {
        shape: xv.shape.clone(),
        data,
    };
    let rg = tape.rg(x) || tape.rg(gamma) || tape.rg(beta);
    let rec = BatchNormRecord {
        x,
        gamma,
        beta,
        xhat,
        inv_std,
        batch_stats: mode == BatchNormMode::Train,
    };
    Ok(tape.push(out, Op::BatchNorm(rec), rg))
}

pub(super) fn batch_norm_backward(tape: &Tape, rec: &BatchNormRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let c = rec.inv_std.len();
    let rows = g.len() / c;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for r in 0..rows {
        for k in 0..c {
            sum_g[k] += g[r * c + k];
            sum_gx[k] += g[r * c + k] * rec.xhat[r * c + k];
        }
    }
    if let Some(gg) = tape.slot(grads, rec.gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(o, s)| *o += s);
    }
    if let Some(gb) = tape.slot(grads, rec.beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(o, s)| *o += s);
    }
    let gamma = tape.value(rec.gamma).data.clone();
    if let Some(gx) = tape.slot(grads, rec.x) {
        let n = rows as f64;
        for r in 0..rows {
            for k in 0..c {
                let i = r * c + k;
                let scale = gamma[k] * rec.inv_std[k];
                gx[i] += if rec.batch_stats {
                    scale * (g[i] - sum_g[k] / n - rec.xhat[i] * sum_gx[k] / n)
                } else {
                    scale * g[i]
                };
            }
        }
    }
}

/// `μ + exp(½ log σ²) · ε` with standard normal `ε` drawn from `rng`, or `μ`
/// itself when no generator is given.
pub fn reparameterize<R: Rng + ?Sized>(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    rng: Option<&mut R>,
) -> Result<Var, TensorError> {
    let Some(rng) = rng else { return Ok(mu) };
    let shape = tape.shape(mu).to_vec();
    let eps: Vec<f64> = (0..tape.value(mu).len()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = tape.constant(Tensor::new(&shape, eps)?);
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// `Σ (σ² + μ² − 1 − log σ²)` over every entry.
pub fn kl_divergence(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var, TensorError> {
    let var = tape.exp(logvar);
    let mu2 = tape.square(mu);
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, logvar)?;
    let b = tape.add_scalar(b, -1.0);
    Ok(tape.sum(b))
}
