//! The training loop and held-out loss evaluation.

use super::loss::{disentanglement_penalty, metric_penalty, sample_pairs, total_loss};
use super::{Model, ModelError};
use crate::mesh::TriangleMesh;
use crate::tensor::{kl_divergence, AdamW, BatchNormMode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Meshes per chunk when evaluating without gradients.
const EVAL_CHUNK: usize = 16;

/// One row of the training history. Epoch 0 describes the untrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training L1 per mesh.
    pub train_l1: f64,
    /// Eval-mode L1 per validation mesh, `NaN` without a validation set.
    pub val_l1: f64,
    pub kl: f64,
    /// `NaN` when the term's weight is zero.
    pub ld: f64,
    /// `NaN` when the term's weight is zero.
    pub lm: f64,
}

/// Eval-mode losses on a held-out set. `l1` and `kl` are per mesh, `ld` and
/// `lm` per pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOutLosses {
    pub l1: f64,
    pub kl: f64,
    pub ld: f64,
    pub lm: f64,
}

/// Result of [`train`]: the model with the best validation L1 and the full
/// history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// History as CSV with header `epoch,train_L1,val_L1,KL,L_D,L_M`.
    pub fn history_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_L1", "val_L1", "KL", "L_D", "L_M"])
            .expect("in-memory write");
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                r.train_l1.to_string(),
                r.val_l1.to_string(),
                r.kl.to_string(),
                r.ld.to_string(),
                r.lm.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Eval-mode L1 reconstruction error per mesh, decoding posterior means.
fn reconstruction_l1(model: &Model, meshes: &[&TriangleMesh]) -> Result<f64, ModelError> {
    if meshes.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in meshes.chunks(EVAL_CHUNK) {
        let rec = model.reconstruct(chunk)?;
        for (m, r) in chunk.iter().zip(&rec) {
            total += m
                .vertices()
                .iter()
                .zip(r)
                .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>())
                .sum::<f64>();
        }
    }
    Ok(total / meshes.len() as f64)
}

/// Eval-mode L1, KL, disentanglement and metric losses on `meshes`.
///
/// Meshes are processed in chunks of 16; pairs and blend weights within each
/// chunk come from `seed`, so repeated calls agree exactly.
pub fn evaluate_losses(model: &Model, meshes: &[&TriangleMesh], seed: u64) -> Result<HeldOutLosses, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut l1, mut kl, mut ld, mut lm, mut pairs_seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for chunk in meshes.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let target = tape.constant(model.positions(chunk)?);
        let mut bn = model.bn.clone();
        let [c, n] = model.encode_tape(&mut tape, target, &mut bn, BatchNormMode::Eval, [true, true])?;
        let ((mu_c, lv_c), (mu_n, lv_n)) = (c.expect("requested"), n.expect("requested"));
        let z = tape.concat(&[mu_c, mu_n])?;
        let rec = model.decoder_forward(&mut tape, z)?;
        let d = tape.sub(rec, target)?;
        let e = tape.abs_sum(d);
        l1 += tape.item(e);
        let kc = kl_divergence(&mut tape, mu_c, lv_c)?;
        let kn = kl_divergence(&mut tape, mu_n, lv_n)?;
        kl += tape.item(kc) + tape.item(kn);
        let pairs = sample_pairs(chunk.len(), &mut rng);
        if !pairs.is_empty() {
            let alphas: Vec<f64> = pairs.iter().map(|_| rng.random::<f64>()).collect();
            let v = disentanglement_penalty(
                model,
                &mut tape,
                mu_c,
                mu_n,
                &pairs,
                &alphas,
                &mut bn,
                model.config.ld_self_terms,
            )?;
            ld += tape.item(v);
            let v = metric_penalty(model, &mut tape, mu_c, mu_n, &pairs, &alphas)?;
            lm += tape.item(v);
            pairs_seen += pairs.len();
        }
        tape.ensure_finite()?;
    }
    let count = meshes.len().max(1) as f64;
    let pc = pairs_seen.max(1) as f64;
    Ok(HeldOutLosses {
        l1: l1 / count,
        kl: kl / count,
        ld: if pairs_seen > 0 { ld / pc } else { f64::NAN },
        lm: if pairs_seen > 0 { lm / pc } else { f64::NAN },
    })
}

/// Trains for `model.config.epochs` epochs and keeps the parameters with the
/// lowest validation L1 (training L1 when `val` is empty).
pub fn train(model: Model, train: &[&TriangleMesh], val: &[&TriangleMesh]) -> Result<TrainOutcome, ModelError> {
    train_with(model, train, val, |_| {})
}

/// [`train`] with a callback after every history row.
pub fn train_with(
    mut model: Model,
    train: &[&TriangleMesh],
    val: &[&TriangleMesh],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    let cfg = model.config.clone();
    if train.len() < 2 {
        return Err(ModelError::BatchTooSmall(train.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let noise = match cfg.noise_augment_sigma {
        Some(s) if s > 0.0 => Some(Normal::new(0.0, s).expect("valid sigma")),
        _ => None,
    };

    let pre = evaluate_losses(&model, train, cfg.seed)?;
    let first = EpochRecord {
        epoch: 0,
        train_l1: pre.l1,
        val_l1: reconstruction_l1(&model, val)?,
        kl: pre.kl,
        ld: pre.ld,
        lm: pre.lm,
    };
    on_epoch(&first);
    let score = |r: &EpochRecord| if val.is_empty() { r.train_l1 } else { r.val_l1 };
    let mut best = (score(&first), 0, model.clone());
    let mut history = vec![first];

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (step, idx) in order.chunks(cfg.batch).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<&TriangleMesh> = idx.iter().map(|&i| train[i]).collect();
            let targets = model.positions(&batch)?;
            let inputs = match &noise {
                Some(nd) => {
                    let data = targets.data.iter().map(|x| x + nd.sample(&mut rng)).collect();
                    Tensor::new(&targets.shape, data)?
                }
                None => targets.clone(),
            };
            let mut tape = Tape::new();
            let mut bn = model.bn.clone();
            let (loss, parts) = total_loss(&model, &mut tape, &mut bn, &inputs, &targets, &mut rng)?;
            let fail = |source| ModelError::NonFiniteDetected { epoch, step, source };
            tape.ensure_finite().map_err(fail)?;
            let grads = tape.backward(loss).map_err(fail)?;
            opt.step(&mut model.params, &grads);
            model.bn = bn;
            for (s, v) in sums.iter_mut().zip([parts.l1, parts.kl, parts.ld, parts.lm]) {
                *s += v;
            }
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            train_l1: sums[0] / b,
            val_l1: reconstruction_l1(&model, val)?,
            kl: sums[1] / b,
            ld: sums[2] / b,
            lm: sums[3] / b,
        };
        on_epoch(&record);
        let s = score(&record);
        if s < best.0 {
            best = (s, epoch, model.clone());
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        model: best.2,
        history,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::Variant;
    use super::*;

    #[test]
    fn training_lowers_reconstruction_error() {
        let meshes = toy_meshes(10, 2);
        let refs: Vec<&TriangleMesh> = meshes.iter().collect();
        let mut cfg = toy_config(Variant::Cfan);
        cfg.epochs = 30;
        cfg.learning_rate = 5e-3;
        let out = train(toy_model(cfg, &meshes), &refs[..8], &refs[8..]).unwrap();
        assert_eq!(out.history.len(), 31);
        let first = out.history[0];
        let best = out.history[out.best_epoch];
        assert!(best.val_l1 < 0.5 * first.val_l1, "{} -> {}", first.val_l1, best.val_l1);
        let l1 = reconstruction_l1(&out.model, &refs[8..]).unwrap();
        assert!((l1 - best.val_l1).abs() < 1e-9);
        let csv = out.history_csv();
        assert!(csv.starts_with("epoch,train_L1,val_L1,KL,L_D,L_M\n"));
        assert_eq!(csv.lines().count(), 32);
    }

    #[test]
    fn training_is_deterministic() {
        let meshes = toy_meshes(6, 4);
        let refs: Vec<&TriangleMesh> = meshes.iter().collect();
        let mut cfg = toy_config(Variant::Xyz);
        cfg.noise_augment_sigma = Some(0.01);
        let a = train(toy_model(cfg.clone(), &meshes), &refs, &[]).unwrap();
        let b = train(toy_model(cfg, &meshes), &refs, &[]).unwrap();
        let bits = |h: &[EpochRecord]| -> Vec<u64> {
            h.iter()
                .flat_map(|r| [r.train_l1, r.val_l1, r.kl, r.ld, r.lm])
                .map(f64::to_bits)
                .collect()
        };
        assert_eq!(bits(&a.history), bits(&b.history));
        assert!(a.history.iter().all(|r| r.val_l1.is_nan()));
    }

    #[test]
    fn held_out_losses_are_reproducible() {
        let meshes = toy_meshes(5, 9);
        let refs: Vec<&TriangleMesh> = meshes.iter().collect();
        let model = toy_model(toy_config(Variant::Cfan), &meshes);
        let a = evaluate_losses(&model, &refs, 1).unwrap();
        assert_eq!(a, evaluate_losses(&model, &refs, 1).unwrap());
        assert!(a.l1 > 0.0 && a.kl >= 0.0 && a.ld >= 0.0 && a.lm >= 0.0);
        let l1 = reconstruction_l1(&model, &refs).unwrap();
        assert!((a.l1 - l1).abs() < 1e-9 * l1);
    }

    #[test]
    fn needs_two_training_meshes() {
        let meshes = toy_meshes(2, 1);
        let model = toy_model(toy_config(Variant::Cfan), &meshes);
        assert!(matches!(
            train(model, &[&meshes[0]], &[]),
            Err(ModelError::BatchTooSmall(1))
        ));
    }
}
