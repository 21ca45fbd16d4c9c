//! Knowledge transfer of feature queries from base to novel classes, and
//! test-time integration of prototypes across shots.
//!
//! Compatibility scores each base feature query against a novel support
//! map, keeps the top-k positions per query, and sums them into a weight.
//! The most compatible queries are duplicated (independent copies) to seed
//! the novel class. The same weights, softmaxed across shots, blend K
//! per-shot prototypes into one set at test time.

use ndarray::{Array1, Array2};

use crate::error::{FpdError, Result};
use crate::types::{ClassId, FeatureMap, FeatureQuerySet, ProjectionParams, PrototypeSet};

/// Per-query compatibility against one novel support map.
#[derive(Clone, Debug)]
pub struct CompatibilityReport {
    /// weight_i, one per stacked base query row.
    pub per_query_weight: Array1<f64>,
    /// The k retained score entries per row, in descending order.
    pub topk_values: Array2<f64>,
    /// Which base class each stacked query row came from.
    pub source_class_of_query: Vec<ClassId>,
}

/// How Eq-8 style shot weights are derived from per-query weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShotWeightMode {
    /// One weight per (query index, shot) pair; each query row blends its
    /// own shots.
    PerQuery,
    /// One scalar per shot (the mean over query indexes), applied to every
    /// row alike.
    PerShotScalar,
}

impl Default for ShotWeightMode {
    fn default() -> Self {
        ShotWeightMode::PerQuery
    }
}

/// Raw compatibility scores S = Q . (X_ns W)^T, shape (nc, hw).
pub fn compatibility_scores(
    stacked_queries: &Array2<f64>,
    x_ns: &FeatureMap,
    params: &ProjectionParams,
) -> Result<Array2<f64>> {
    if stacked_queries.ncols() != params.d_prime() {
        return Err(FpdError::shape(
            "compatibility",
            "stacked queries",
            &[stacked_queries.nrows(), stacked_queries.ncols()],
            "projection W",
            &[params.w.nrows(), params.w.ncols()],
        ));
    }
    if x_ns.channels() != params.d() {
        return Err(FpdError::shape(
            "compatibility",
            "support map",
            &[x_ns.positions(), x_ns.channels()],
            "projection W",
            &[params.w.nrows(), params.w.ncols()],
        ));
    }
    let keys = x_ns.matrix().dot(&params.w);
    Ok(stacked_queries.dot(&keys.t()))
}

/// Top-k compatibility of every stacked base query against a novel support
/// map. `source_classes` labels each row of `stacked_queries`.
pub fn compatibility(
    stacked_queries: &Array2<f64>,
    source_classes: &[ClassId],
    x_ns: &FeatureMap,
    params: &ProjectionParams,
    k: usize,
) -> Result<CompatibilityReport> {
    if stacked_queries.nrows() == 0 {
        return Err(FpdError::validation("no base feature queries to score"));
    }
    if source_classes.len() != stacked_queries.nrows() {
        return Err(FpdError::validation(
            "source class labels must cover every stacked query row",
        ));
    }
    let hw = x_ns.positions();
    if k == 0 || k > hw {
        return Err(FpdError::validation(format!(
            "top-k depth {k} outside 1..={hw} support positions"
        )));
    }
    let scores = compatibility_scores(stacked_queries, x_ns, params)?;
    let (weights, topk) = topk_row_weights(&scores, k);
    Ok(CompatibilityReport {
        per_query_weight: weights,
        topk_values: topk,
        source_class_of_query: source_classes.to_vec(),
    })
}

/// Keep the k largest entries per row (descending, ties by original column
/// order) and sum them in that order.
pub fn topk_row_weights(scores: &Array2<f64>, k: usize) -> (Array1<f64>, Array2<f64>) {
    let m = scores.nrows();
    let mut weights = Array1::<f64>::zeros(m);
    let mut kept = Array2::<f64>::zeros((m, k));
    for (i, row) in scores.rows().into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("non-finite compatibility score")
                .then(a.cmp(&b))
        });
        let mut acc = 0.0;
        for (j, &col) in idx.iter().take(k).enumerate() {
            kept[[i, j]] = row[col];
            acc += row[col];
        }
        weights[i] = acc;
    }
    (weights, kept)
}

/// Default top-k depth: a minority of support positions.
pub fn default_topk(hw: usize) -> usize {
    (hw / 4).max(1)
}

/// Duplicate the n best-weighted base query rows into a fresh, independent
/// query set for a novel class. Ties break toward the lowest row index.
pub fn select_and_duplicate(
    report: &CompatibilityReport,
    stacked_queries: &Array2<f64>,
    n: usize,
    novel_class: ClassId,
) -> Result<FeatureQuerySet> {
    let nc = stacked_queries.nrows();
    if n == 0 || n > nc {
        return Err(FpdError::validation(format!(
            "cannot select {n} of {nc} base feature queries"
        )));
    }
    let order = selection_order(&report.per_query_weight);
    let mut queries = Array2::<f64>::zeros((n, stacked_queries.ncols()));
    for (r, &i) in order.iter().take(n).enumerate() {
        queries.row_mut(r).assign(&stacked_queries.row(i));
    }
    Ok(FeatureQuerySet {
        class_id: novel_class,
        queries,
    })
}

/// Row indexes sorted by weight descending, index ascending on ties.
pub fn selection_order(weights: &Array1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .expect("non-finite weight")
            .then(a.cmp(&b))
    });
    idx
}

/// Blend K per-shot prototype sets with softmax-normalized weights.
///
/// `weight_per_shot` is (n, K): row i holds the raw weights of query i
/// across the K shots. With `PerShotScalar` the rows are first collapsed to
/// their mean so every query index shares one weight per shot.
pub fn integrate_shots(
    prototype_per_shot: &[PrototypeSet],
    weight_per_shot: &Array2<f64>,
    mode: ShotWeightMode,
) -> Result<PrototypeSet> {
    let k = prototype_per_shot.len();
    if k == 0 {
        return Err(FpdError::validation("cannot integrate zero shots"));
    }
    let class_id = prototype_per_shot[0].class_id;
    let (n, d) = prototype_per_shot[0].prototypes.dim();
    for p in prototype_per_shot {
        if p.class_id != class_id {
            return Err(FpdError::validation("shot prototypes must share a class"));
        }
        if p.prototypes.dim() != (n, d) {
            return Err(FpdError::shape(
                "integrate_shots",
                "first shot prototypes",
                &[n, d],
                "mismatched shot prototypes",
                &[p.prototypes.nrows(), p.prototypes.ncols()],
            ));
        }
    }
    if weight_per_shot.dim() != (n, k) {
        return Err(FpdError::shape(
            "integrate_shots",
            "prototypes (n rows)",
            &[n, k],
            "weight matrix",
            &[weight_per_shot.nrows(), weight_per_shot.ncols()],
        ));
    }
    if weight_per_shot.iter().any(|w| !w.is_finite()) {
        return Err(FpdError::validation("shot weights must be finite"));
    }

    let effective = match mode {
        ShotWeightMode::PerQuery => weight_per_shot.clone(),
        ShotWeightMode::PerShotScalar => {
            let mut collapsed = Array2::<f64>::zeros((n, k));
            for s in 0..k {
                let mean = weight_per_shot.column(s).sum() / n as f64;
                for i in 0..n {
                    collapsed[[i, s]] = mean;
                }
            }
            collapsed
        }
    };

    let normalized = softmax_rows(&effective);
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for (s, p) in prototype_per_shot.iter().enumerate() {
            let w = normalized[[i, s]];
            for j in 0..d {
                out[[i, j]] += w * p.prototypes[[i, j]];
            }
        }
    }
    Ok(PrototypeSet {
        class_id,
        prototypes: out,
    })
}

/// Softmax of each row; exposed so tests can assert the normalization.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for e in row.iter_mut() {
            *e = (*e - mx).exp();
            sum += *e;
        }
        for e in row.iter_mut() {
            *e /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    use crate::optim::normal_matrix;

    fn params(d: usize, d_prime: usize, seed: u64) -> ProjectionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProjectionParams {
            w: normal_matrix(&mut rng, d, d_prime, 0.5),
            w_prime: normal_matrix(&mut rng, d, d_prime, 0.5),
            class_embeddings: BTreeMap::new(),
            alpha: 0.0,
            background_queries: normal_matrix(&mut rng, 1, d, 0.5),
        }
    }

    #[test]
    fn full_width_topk_is_row_sum() {
        let scores = array![[1.0, -2.0, 3.5], [0.0, 0.0, 0.0]];
        let (w, _) = topk_row_weights(&scores, 3);
        assert!((w[0] - 2.5).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn weight_equals_sum_of_retained_entries_exactly() {
        // same summation path: weight is literally the sum of topk_values
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = normal_matrix(&mut rng, 5, 7, 2.0);
        let (w, kept) = topk_row_weights(&scores, 3);
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += kept[[i, j]];
            }
            assert_eq!(w[i], acc);
        }
    }

    #[test]
    fn all_zero_support_gives_zero_weights_and_stable_order() {
        let p = params(3, 3, 5);
        let x = FeatureMap::new(2, 2, Array2::zeros((4, 3))).unwrap();
        let q = Array2::from_elem((4, 3), 1.0);
        let classes = vec![ClassId(0); 4];
        let rep = compatibility(&q, &classes, &x, &p, 2).unwrap();
        assert!(rep.per_query_weight.iter().all(|&w| w == 0.0));
        assert_eq!(selection_order(&rep.per_query_weight), vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_larger_than_hw_rejected() {
        let p = params(3, 3, 6);
        let x = FeatureMap::new(1, 2, Array2::zeros((2, 3))).unwrap();
        let q = Array2::zeros((2, 3));
        assert!(compatibility(&q, &[ClassId(0); 2], &x, &p, 3).is_err());
    }

    #[test]
    fn selection_follows_weights_with_index_tiebreak() {
        let weights = array![5.0, 1.0, 9.0];
        assert_eq!(selection_order(&weights)[..2], [2, 0]);
        let tied = array![4.0, 7.0, 7.0];
        assert_eq!(selection_order(&tied), vec![1, 2, 0]);
    }

    #[test]
    fn duplicates_are_independent_copies() {
        let base = array![[1.0, 2.0], [3.0, 4.0]];
        let rep = CompatibilityReport {
            per_query_weight: array![1.0, 2.0],
            topk_values: Array2::zeros((2, 1)),
            source_class_of_query: vec![ClassId(0), ClassId(0)],
        };
        let mut novel = select_and_duplicate(&rep, &base, 2, ClassId(9)).unwrap();
        novel.queries[[0, 0]] = 777.0;
        assert_eq!(base[[1, 0]], 3.0);
        assert_eq!(base[[0, 0]], 1.0);
    }

    #[test]
    fn selecting_every_row_duplicates_each_once() {
        let base = array![[1.0], [2.0], [3.0]];
        let rep = CompatibilityReport {
            per_query_weight: array![0.1, 0.3, 0.2],
            topk_values: Array2::zeros((3, 1)),
            source_class_of_query: vec![ClassId(0); 3],
        };
        let novel = select_and_duplicate(&rep, &base, 3, ClassId(5)).unwrap();
        let mut rows: Vec<f64> = novel.queries.column(0).to_vec();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_shot_integration_is_identity() {
        let p = PrototypeSet {
            class_id: ClassId(2),
            prototypes: array![[1.5, -0.5], [2.0, 3.0]],
        };
        let w = array![[0.7], [100.0]];
        let out = integrate_shots(&[p.clone()], &w, ShotWeightMode::PerQuery).unwrap();
        assert_eq!(out.prototypes, p.prototypes);
    }

    #[test]
    fn equal_weights_give_arithmetic_mean() {
        let mk = |v: f64| PrototypeSet {
            class_id: ClassId(0),
            prototypes: Array2::from_elem((2, 2), v),
        };
        let w = Array2::from_elem((2, 3), 0.42);
        let out = integrate_shots(&[mk(1.0), mk(2.0), mk(6.0)], &w, ShotWeightMode::PerQuery).unwrap();
        for &v in out.prototypes.iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_shots_rejected() {
        let w = Array2::<f64>::zeros((1, 0));
        assert!(integrate_shots(&[], &w, ShotWeightMode::PerQuery).is_err());
    }

    #[test]
    fn per_shot_scalar_mode_collapses_rows() {
        let a = PrototypeSet {
            class_id: ClassId(0),
            prototypes: array![[1.0], [1.0]],
        };
        let b = PrototypeSet {
            class_id: ClassId(0),
            prototypes: array![[3.0], [3.0]],
        };
        // row 0 prefers shot 0, row 1 prefers shot 1; the means tie
        let w = array![[2.0, 0.0], [0.0, 2.0]];
        let out = integrate_shots(&[a, b], &w, ShotWeightMode::PerShotScalar).unwrap();
        for &v in out.prototypes.iter() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_normalizes() {
        let w = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let s = softmax_rows(&w);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
