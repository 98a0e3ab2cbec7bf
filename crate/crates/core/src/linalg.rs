//! Small dense linear-algebra helpers for the structural layer.

use ndarray::Array2;

fn norm1(m: &Array2<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "expm: matrix must be square");
    let norm = norm1(m);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..=20 {
        term = term.dot(&scaled) / k as f64;
        result += &term;
        if norm1(&term) < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
/// Returns `None` when a pivot vanishes.
pub fn inverse(m: &Array2<f64>) -> Option<Array2<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "inverse: matrix must be square");
    let mut a = m.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        if a[[pivot, col]].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let p = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[[r, col]];
                if f != 0.0 {
                    for k in 0..n {
                        a[[r, k]] -= f * a[[col, k]];
                        inv[[r, k]] -= f * inv[[col, k]];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// 1-norm condition number; infinite for singular input.
pub fn condition_number(m: &Array2<f64>) -> f64 {
    match inverse(m) {
        Some(inv) => norm1(m) * norm1(&inv),
        None => f64::INFINITY,
    }
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Array2<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 {
        return 0.0;
    }
    let mtm = m.t().dot(m);
    let mut v = Array2::<f64>::from_elem((n, 1), 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = mtm.dot(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (norm - lambda).abs() <= 1e-14 * norm {
            lambda = norm;
            break;
        }
        lambda = norm;
    }
    lambda.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn expm_of_swap_matches_cosh() {
        let e = expm(&array![[0.0, 1.0], [1.0, 0.0]]);
        assert!((e[[0, 0]] - 1f64.cosh()).abs() < 1e-14);
        assert!((e[[0, 1]] - 1f64.sinh()).abs() < 1e-14);
    }

    #[test]
    fn expm_large_norm_diagonal() {
        let e = expm(&array![[3.0, 0.0], [0.0, -2.0]]);
        assert!((e[[0, 0]] / 3f64.exp() - 1.0).abs() < 1e-13);
        assert!((e[[1, 1]] / (-2f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_roundtrip() {
        let m = array![[2.0, 1.0, 0.0], [0.0, 1.0, 3.0], [1.0, 0.0, 1.0]];
        let inv = inverse(&m).unwrap();
        let id = m.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - t).abs() < 1e-12);
            }
        }
        assert!(inverse(&array![[1.0, 2.0], [2.0, 4.0]]).is_none());
    }

    #[test]
    fn spectral_norm_diag() {
        assert!((spectral_norm(&array![[3.0, 0.0], [0.0, -4.0]]) - 4.0).abs() < 1e-9);
    }
}
