//! Deliberately naive reference implementations for test use only.
//!
//! Everything here is written with explicit loops and no shared code with
//! the main crate, so the two paths can be compared against each other
//! without a common-mode bug.

use ndarray::{Array1, Array2};

/// Which axis of the score matrix the softmax normalizes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each row of scores becomes a probability distribution.
    Rows,
    /// Each column of scores becomes a probability distribution.
    Cols,
}

/// Scaled dot-product attention computed with explicit per-element loops.
///
/// `queries` is (m x dk), `keys` is (l x dk), `values` is (l x dv). Scores
/// are `queries[i] . keys[j] * scale`. With `SoftmaxAxis::Rows` each query's
/// scores over the l key positions are normalized, and the output is
/// (m x dv) with `out[i] = sum_j a[i][j] * values[j]`.
pub fn naive_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    scale: f64,
    axis: SoftmaxAxis,
) -> Array2<f64> {
    let m = queries.nrows();
    let l = keys.nrows();
    assert_eq!(queries.ncols(), keys.ncols(), "query/key width mismatch");
    assert_eq!(keys.nrows(), values.nrows(), "key/value count mismatch");

    let mut scores = Array2::<f64>::zeros((m, l));
    for i in 0..m {
        for j in 0..l {
            let mut acc = 0.0f64;
            for t in 0..queries.ncols() {
                acc += queries[[i, t]] * keys[[j, t]];
            }
            scores[[i, j]] = acc * scale;
        }
    }

    let attn = naive_softmax(&scores, axis);

    let dv = values.ncols();
    let mut out = Array2::<f64>::zeros((m, dv));
    for i in 0..m {
        for t in 0..dv {
            let mut acc = 0.0f64;
            for j in 0..l {
                acc += attn[[i, j]] * values[[j, t]];
            }
            out[[i, t]] = acc;
        }
    }
    out
}

/// Softmax with explicit loops, max-shifted for stability.
pub fn naive_softmax(scores: &Array2<f64>, axis: SoftmaxAxis) -> Array2<f64> {
    let (m, l) = (scores.nrows(), scores.ncols());
    let mut out = Array2::<f64>::zeros((m, l));
    match axis {
        SoftmaxAxis::Rows => {
            for i in 0..m {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..l {
                    mx = mx.max(scores[[i, j]]);
                }
                let mut sum = 0.0;
                for j in 0..l {
                    let e = (scores[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    sum += e;
                }
                for j in 0..l {
                    out[[i, j]] /= sum;
                }
            }
        }
        SoftmaxAxis::Cols => {
            for j in 0..l {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..m {
                    mx = mx.max(scores[[i, j]]);
                }
                let mut sum = 0.0;
                for i in 0..m {
                    let e = (scores[[i, j]] - mx).exp();
                    out[[i, j]] = e;
                    sum += e;
                }
                for i in 0..m {
                    out[[i, j]] /= sum;
                }
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function of a flat parameter
/// vector: grad[i] = (f(x + e_i h) - f(x - e_i h)) / 2h.
pub fn finite_diff_grad<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + step;
        let fp = f(&work);
        work[i] = point[i] - step;
        let fm = f(&work);
        work[i] = point[i];
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Per-row top-k weights: full descending sort of each row, sum of the
/// first k entries in sorted order. Also returns the retained values.
pub fn brute_topk_weights(scores: &Array2<f64>, k: usize) -> (Array1<f64>, Array2<f64>) {
    assert!(k <= scores.ncols(), "k exceeds column count");
    let m = scores.nrows();
    let mut weights = Array1::<f64>::zeros(m);
    let mut kept = Array2::<f64>::zeros((m, k));
    for i in 0..m {
        let mut row: Vec<f64> = scores.row(i).iter().copied().collect();
        row.sort_by(|a, b| b.partial_cmp(a).expect("non-finite score"));
        let mut acc = 0.0;
        for j in 0..k {
            kept[[i, j]] = row[j];
            acc += row[j];
        }
        weights[i] = acc;
    }
    (weights, kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn singleton_key_returns_value() {
        let q = array![[0.3, -1.0]];
        let k = array![[2.0, 0.5]];
        let v = array![[7.0, -3.0, 0.25]];
        let out = naive_attention(&q, &k, &v, 1.0, SoftmaxAxis::Rows);
        assert_eq!(out, v);
    }

    #[test]
    fn symmetric_logits_give_uniform_mix() {
        let q = array![[0.0, 0.0]];
        let k = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let v = array![[3.0], [6.0], [9.0]];
        let out = naive_attention(&q, &k, &v, 0.5, SoftmaxAxis::Rows);
        assert!((out[[0, 0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let grad = finite_diff_grad(f, &[1.0, 1.0, 1.0], 1e-5);
        for g in grad {
            assert!((g - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_on_linear_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1];
        let grad = finite_diff_grad(f, &[0.7, -0.4], 1e-5);
        assert!((grad[0] - 3.0).abs() < 1e-10);
        assert!((grad[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn topk_hand_case() {
        let s = array![[3.0, 1.0, 2.0]];
        let (w, kept) = brute_topk_weights(&s, 2);
        assert_eq!(w[0], 5.0);
        assert_eq!(kept, array![[3.0, 2.0]]);
    }

    #[test]
    fn topk_full_width_is_row_sum() {
        let s = array![[1.0, -2.0, 0.5], [4.0, 4.0, 4.0]];
        let (w, _) = brute_topk_weights(&s, 3);
        assert!((w[0] - (-0.5)).abs() < 1e-12);
        assert!((w[1] - 12.0).abs() < 1e-12);
    }
}
