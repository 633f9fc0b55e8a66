//! Reference computations used by the acceptance checks. They are written
//! from first principles and share no code with `epgt-core`.

use nalgebra::{Matrix3, Vector3};

/// `[t]ₓ`.
pub fn cross_matrix(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Unit-Frobenius F of two world-to-camera poses `x_c = R X + t`.
pub fn fundamental_from_poses(
    k1: &Matrix3<f64>,
    r1: &Matrix3<f64>,
    t1: &Vector3<f64>,
    k2: &Matrix3<f64>,
    r2: &Matrix3<f64>,
    t2: &Vector3<f64>,
) -> Matrix3<f64> {
    let r = r2 * r1.transpose();
    let t = t2 - r * t1;
    let e = cross_matrix(&t) * r;
    let f = k2.try_inverse().expect("invertible K2").transpose()
        * e
        * k1.try_inverse().expect("invertible K1");
    f / f.norm()
}

/// Distance between two matrices up to sign after scaling both to unit
/// Frobenius norm.
pub fn projective_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let (a, b) = (a / a.norm(), b / b.norm());
    (a - b).norm().min((a + b).norm())
}

/// `x2ᵀ F x1`.
pub fn algebraic(f: &Matrix3<f64>, p1: (f64, f64), p2: (f64, f64)) -> f64 {
    Vector3::new(p2.0, p2.1, 1.0).dot(&(f * Vector3::new(p1.0, p1.1, 1.0)))
}

/// First-order geometric error, px².
pub fn sampson(f: &Matrix3<f64>, p1: (f64, f64), p2: (f64, f64)) -> f64 {
    let x1 = Vector3::new(p1.0, p1.1, 1.0);
    let x2 = Vector3::new(p2.0, p2.1, 1.0);
    let l2 = f * x1;
    let l1 = f.transpose() * x2;
    let r = x2.dot(&l2);
    r * r / (l2.x * l2.x + l2.y * l2.y + l1.x * l1.x + l1.y * l1.y)
}

/// Squared Frobenius norm of the best multiple of `c` approximating `m`:
/// `⟨m, c⟩² / ‖c‖²`. A larger value means a closer candidate direction.
pub fn explained(m: &Matrix3<f64>, c: &Matrix3<f64>) -> f64 {
    let dot = m.component_mul(c).sum();
    dot * dot / c.norm_squared()
}

/// Row-wise softmax in f64; `-inf` entries get zero weight.
pub fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, |m, v| m.max(f64::from(v)));
    let e: Vec<f64> = row
        .iter()
        .map(|&v| {
            if v.is_finite() {
                (f64::from(v) - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Mean and standard deviation of the hit rate of independent Bernoulli
/// trials with success probabilities `p`.
pub fn bernoulli_rate(p: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|q| q * (1.0 - q)).sum::<f64>() / (n * n);
    (mean, var.sqrt())
}

/// Median of finite or infinite values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}
