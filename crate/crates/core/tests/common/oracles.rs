//! Brute-force reference implementations of the evaluation metrics.

use plugdit::numerics::{Rng, Tensor};

pub fn abs_rel(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if mask[i] {
            sum += (pred[i] - gt[i]).abs() / gt[i];
            n += 1;
        }
    }
    sum / n as f64
}

pub fn delta1(pred: &[f64], gt: &[f64], mask: &[bool], threshold: f64) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if mask[i] {
            n += 1;
            let r = if pred[i] > gt[i] {
                pred[i] / gt[i]
            } else {
                gt[i] / pred[i]
            };
            if r < threshold {
                hits += 1;
            }
        }
    }
    hits as f64 / n as f64
}

/// `(mean angle in degrees, fraction strictly below 11.25°)` of per-pixel
/// normal triples.
pub fn angles(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: &[bool]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut below = 0usize;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        let mut dot = pred[i][0] * gt[i][0] + pred[i][1] * gt[i][1] + pred[i][2] * gt[i][2];
        if dot > 1.0 {
            dot = 1.0;
        }
        if dot < -1.0 {
            dot = -1.0;
        }
        let deg = dot.acos() * 180.0 / std::f64::consts::PI;
        sum += deg;
        if deg < 11.25 {
            below += 1;
        }
        n += 1;
    }
    (sum / n as f64, below as f64 / n as f64)
}

pub fn residual(pred: &[f64], gt: &[f64], mask: &[bool], s: f64, b: f64) -> f64 {
    (0..gt.len())
        .filter(|&i| mask[i])
        .map(|i| (s * pred[i] + b - gt[i]).powi(2))
        .sum()
}

/// Best residual found by a coarse-to-fine grid search over `(s, b)`.
pub fn grid_search(pred: &[f64], gt: &[f64], mask: &[bool]) -> (f64, f64, f64) {
    let (mut cs, mut cb, mut span) = (0.0, 0.0, 20.0);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..30 {
        let steps = 40;
        for i in 0..=steps {
            for j in 0..=steps {
                let s = cs - span / 2.0 + span * i as f64 / steps as f64;
                let b = cb - span / 2.0 + span * j as f64 / steps as f64;
                let r = residual(pred, gt, mask, s, b);
                if r < best.0 {
                    best = (r, s, b);
                }
            }
        }
        cs = best.1;
        cb = best.2;
        span /= 4.0;
    }
    best
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Random unit normal in the upper half space.
pub fn random_normal(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal().abs() + 0.2];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

pub fn normals_tensor(n: &[[f64; 3]], h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| n[i % (h * w)][i / (h * w)] as f32)
}

pub fn normals_of(t: &Tensor) -> Vec<[f64; 3]> {
    let n = t.shape()[1] * t.shape()[2];
    (0..n).map(|p| [0, 1, 2].map(|c| t.data()[c * n + p] as f64)).collect()
}
