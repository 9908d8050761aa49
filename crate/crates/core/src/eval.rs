//! Reconstruction and transfer error metrics.

use crate::util::{self, Vec3};

/// Point budget for Chamfer comparisons.
pub const CHAMFER_POINTS: usize = 2048;

/// Coordinates are metres; reported errors are millimetres.
pub const MM_PER_UNIT: f64 = 1000.0;

/// Euclidean farthest point sampling starting from point 0. Ties go to the
/// smaller index.
pub fn farthest_points(points: &[Vec3], count: usize) -> Vec<usize> {
    let count = count.min(points.len());
    if count == 0 {
        return Vec::new();
    }
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut order = Vec::with_capacity(count);
    let mut next = 0;
    for _ in 0..count {
        order.push(next);
        let p = points[next];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, q) in points.iter().enumerate() {
            let d = util::norm(util::sub(*q, p));
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        next = best.1;
    }
    order
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let d: Vec<f64> = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| util::norm(util::sub(*a, *b)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    util::mean(&d)
}

/// Symmetric Chamfer distance `½ (mean_a min_b ‖a − b‖ + mean_b min_a ‖a − b‖)`
/// with unsquared distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    0.5 * (mean_nearest(a, b) + mean_nearest(b, a))
}

/// [`chamfer`] after reducing each set to at most [`CHAMFER_POINTS`]
/// points by farthest point sampling.
pub fn chamfer_sampled(a: &[Vec3], b: &[Vec3]) -> f64 {
    let pick = |p: &[Vec3]| -> Vec<Vec3> { farthest_points(p, CHAMFER_POINTS).into_iter().map(|i| p[i]).collect() };
    chamfer(&pick(a), &pick(b))
}

/// Mean per-vertex Euclidean error between corresponding vertices, in
/// millimetres.
pub fn mean_vertex_error_mm(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len(), "vertex counts differ");
    let d: Vec<f64> = a.iter().zip(b).map(|(p, q)| util::norm(util::sub(*p, *q))).collect();
    MM_PER_UNIT * util::mean(&d)
}

/// Mean Euclidean distance over all unordered pairs of vectors; 0 for
/// fewer than two.
pub fn mean_pairwise_distance(xs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push(
                xs[i]
                    .iter()
                    .zip(&xs[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    if d.is_empty() {
        0.0
    } else {
        util::mean(&d)
    }
}
