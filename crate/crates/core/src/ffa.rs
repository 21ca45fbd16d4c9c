//! Fine-grained feature aggregation: distill per-class prototypes from
//! support maps with learnable feature queries, then assign them back into
//! the query feature map through cross-attention. Also hosts the
//! dense-matching ablation arm that attends over raw support cells instead
//! of distilled prototypes.

use ndarray::Array2;

use crate::autodiff::{Graph, NodeId};
use crate::error::{FpdError, Result};
use crate::types::{
    ClassId, FeatureMap, FeatureQuerySet, ProjectionParams, PrototypeBank, PrototypeSet, RowLabel,
};

/// What the two axes of an affinity matrix mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityAxes {
    /// rows: feature queries, cols: support positions.
    QueriesByPositions,
    /// rows: query-map positions, cols: prototype bank rows.
    PositionsByPrototypes,
}

/// A softmax-normalized attention matrix plus its axis bookkeeping.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
    pub axes: AffinityAxes,
    /// Axis index the softmax normalized over; 1 means each row is a
    /// probability distribution.
    pub normalized_axis: usize,
}

impl AffinityMatrix {
    /// Every slice along the normalized axis sums to one and entries lie in
    /// (0, 1]; the upper bound is attained only for singleton slices.
    pub fn validate(&self) -> Result<()> {
        if self.normalized_axis != 1 {
            return Err(FpdError::validation("only row-normalized affinities are produced"));
        }
        for row in self.values.rows() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(FpdError::Numerical(format!("affinity row sums to {s}")));
            }
            for &v in row {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(FpdError::Numerical(format!("affinity entry {v} outside (0,1]")));
                }
            }
        }
        Ok(())
    }
}

/// Graph-level distillation. Returns the affinity node and the (n, d)
/// prototype node:
/// affinity = softmax(q . (X_s W)^T / sqrt(d')), normalized over support
/// positions; prototypes = affinity . X_s + e_cls.
pub fn distill(
    g: &mut Graph,
    x_s: NodeId,
    queries: NodeId,
    w: NodeId,
    e_cls: NodeId,
) -> (NodeId, NodeId) {
    let d_prime = g.shape(w).1;
    let keys = g.matmul(x_s, w);
    let scores = g.matmul_nt(queries, keys);
    let scaled = g.scale(scores, 1.0 / (d_prime as f64).sqrt());
    let affinity = g.softmax_rows(scaled);
    let pooled = g.matmul(affinity, x_s);
    let protos = g.add_bias(pooled, e_cls);
    (affinity, protos)
}

/// Graph-level assignment. Returns the affinity node and the aggregated
/// query map node:
/// affinity = softmax((X_q W')(P W')^T / sqrt(d')), normalized over bank
/// rows; out = X_q + alpha * affinity . P.
pub fn assign(
    g: &mut Graph,
    x_q: NodeId,
    bank: NodeId,
    w_prime: NodeId,
    alpha: NodeId,
) -> (NodeId, NodeId) {
    let d_prime = g.shape(w_prime).1;
    let q_proj = g.matmul(x_q, w_prime);
    let p_proj = g.matmul(bank, w_prime);
    let scores = g.matmul_nt(q_proj, p_proj);
    let scaled = g.scale(scores, 1.0 / (d_prime as f64).sqrt());
    let affinity = g.softmax_rows(scaled);
    let assigned = g.matmul(affinity, bank);
    let gated = g.scalar_mul(assigned, alpha);
    let out = g.add(x_q, gated);
    (affinity, out)
}

/// Graph-level dense matching: attention straight from query positions onto
/// every support cell, residual-added behind the same kind of zero-init
/// gate. Key projections mirror the distillation pair so the arm stays
/// parameter-matched.
pub fn dense_match(
    g: &mut Graph,
    x_q: NodeId,
    support_cells: NodeId,
    w: NodeId,
    w_prime: NodeId,
    alpha: NodeId,
) -> (NodeId, NodeId) {
    let d_prime = g.shape(w_prime).1;
    let q_proj = g.matmul(x_q, w_prime);
    let k_proj = g.matmul(support_cells, w);
    let scores = g.matmul_nt(q_proj, k_proj);
    let scaled = g.scale(scores, 1.0 / (d_prime as f64).sqrt());
    let affinity = g.softmax_rows(scaled);
    let mixed = g.matmul(affinity, support_cells);
    let gated = g.scalar_mul(mixed, alpha);
    let out = g.add(x_q, gated);
    (affinity, out)
}

fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FpdError::validation(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Distill one class's fine-grained prototypes from a support feature map.
pub fn distill_prototypes(
    x_s: &FeatureMap,
    q: &FeatureQuerySet,
    params: &ProjectionParams,
) -> Result<(AffinityMatrix, PrototypeSet)> {
    if x_s.channels() != params.d() {
        return Err(FpdError::shape(
            "distill_prototypes",
            "support map",
            &[x_s.positions(), x_s.channels()],
            "projection W",
            &[params.w.nrows(), params.w.ncols()],
        ));
    }
    if q.d_prime() != params.d_prime() {
        return Err(FpdError::shape(
            "distill_prototypes",
            "feature queries",
            &[q.n(), q.d_prime()],
            "projection W",
            &[params.w.nrows(), params.w.ncols()],
        ));
    }
    check_finite("support map", x_s.matrix())?;
    check_finite("feature queries", &q.queries)?;

    let e_cls = params
        .class_embeddings
        .get(&q.class_id)
        .ok_or_else(|| FpdError::validation(format!("no class embedding for {}", q.class_id)))?;

    let mut g = Graph::new();
    let xs = g.constant(x_s.matrix().clone());
    let qs = g.constant(q.queries.clone());
    let w = g.constant(params.w.clone());
    let e = g.constant(e_cls.clone());
    let (aff, protos) = distill(&mut g, xs, qs, w, e);

    Ok((
        AffinityMatrix {
            values: g.value(aff).clone(),
            axes: AffinityAxes::QueriesByPositions,
            normalized_axis: 1,
        },
        PrototypeSet {
            class_id: q.class_id,
            prototypes: g.value(protos).clone(),
        },
    ))
}

/// Stack per-class prototypes in roster order and append the background
/// rows.
pub fn build_prototype_bank(
    per_class: &[PrototypeSet],
    params: &ProjectionParams,
) -> Result<PrototypeBank> {
    if per_class.is_empty() {
        return Err(FpdError::validation("prototype bank needs at least one class"));
    }
    for (i, a) in per_class.iter().enumerate() {
        for b in &per_class[i + 1..] {
            if a.class_id == b.class_id {
                return Err(FpdError::validation(format!(
                    "duplicate class {} in prototype bank input",
                    a.class_id
                )));
            }
        }
    }
    let d = per_class[0].prototypes.ncols();
    for p in per_class {
        if p.prototypes.ncols() != d {
            return Err(FpdError::shape(
                "build_prototype_bank",
                "first prototype set",
                &[per_class[0].prototypes.nrows(), d],
                "mismatched prototype set",
                &[p.prototypes.nrows(), p.prototypes.ncols()],
            ));
        }
    }
    if params.background_queries.ncols() != d {
        return Err(FpdError::shape(
            "build_prototype_bank",
            "prototypes",
            &[per_class[0].prototypes.nrows(), d],
            "background rows",
            &[params.n_bg(), params.background_queries.ncols()],
        ));
    }

    let total: usize = per_class.iter().map(|p| p.prototypes.nrows()).sum();
    let mut rows = Array2::<f64>::zeros((total + params.n_bg(), d));
    let mut labels = Vec::with_capacity(rows.nrows());
    let mut off = 0;
    for p in per_class {
        rows.slice_mut(ndarray::s![off..off + p.prototypes.nrows(), ..])
            .assign(&p.prototypes);
        for _ in 0..p.prototypes.nrows() {
            labels.push(RowLabel::Class(p.class_id));
        }
        off += p.prototypes.nrows();
    }
    rows.slice_mut(ndarray::s![off.., ..])
        .assign(&params.background_queries);
    for _ in 0..params.n_bg() {
        labels.push(RowLabel::Background);
    }
    Ok(PrototypeBank {
        rows,
        row_labels: labels,
    })
}

/// Assign bank prototypes into a query feature map.
pub fn assign_prototypes(
    x_q: &FeatureMap,
    bank: &PrototypeBank,
    params: &ProjectionParams,
) -> Result<(AffinityMatrix, FeatureMap)> {
    if bank.is_empty() {
        return Err(FpdError::validation("prototype bank is empty"));
    }
    if x_q.channels() != bank.d() {
        return Err(FpdError::shape(
            "assign_prototypes",
            "query map",
            &[x_q.positions(), x_q.channels()],
            "prototype bank",
            &[bank.len(), bank.d()],
        ));
    }
    check_finite("query map", x_q.matrix())?;
    check_finite("prototype bank", &bank.rows)?;

    let mut g = Graph::new();
    let xq = g.constant(x_q.matrix().clone());
    let bk = g.constant(bank.rows.clone());
    let wp = g.constant(params.w_prime.clone());
    let alpha = g.constant(Array2::from_elem((1, 1), params.alpha));
    let (aff, out) = assign(&mut g, xq, bk, wp, alpha);

    Ok((
        AffinityMatrix {
            values: g.value(aff).clone(),
            axes: AffinityAxes::PositionsByPrototypes,
            normalized_axis: 1,
        },
        FeatureMap::new(x_q.height(), x_q.width(), g.value(out).clone())?,
    ))
}

/// Dense-matching ablation arm operating on raw support cells.
pub fn dense_match_baseline(
    x_q: &FeatureMap,
    supports: &[(ClassId, FeatureMap)],
    params: &ProjectionParams,
) -> Result<FeatureMap> {
    if supports.is_empty() {
        return Err(FpdError::validation("dense matching needs support maps"));
    }
    let d = x_q.channels();
    for (cid, s) in supports {
        if s.channels() != d {
            return Err(FpdError::shape(
                "dense_match_baseline",
                "query map",
                &[x_q.positions(), d],
                &format!("support map {cid}"),
                &[s.positions(), s.channels()],
            ));
        }
    }
    check_finite("query map", x_q.matrix())?;

    let total: usize = supports.iter().map(|(_, s)| s.positions()).sum();
    let mut cells = Array2::<f64>::zeros((total, d));
    let mut off = 0;
    for (_, s) in supports {
        cells
            .slice_mut(ndarray::s![off..off + s.positions(), ..])
            .assign(s.matrix());
        off += s.positions();
    }

    let mut g = Graph::new();
    let xq = g.constant(x_q.matrix().clone());
    let sc = g.constant(cells);
    let w = g.constant(params.w.clone());
    let wp = g.constant(params.w_prime.clone());
    let alpha = g.constant(Array2::from_elem((1, 1), params.alpha));
    let (_aff, out) = dense_match(&mut g, xq, sc, w, wp, alpha);
    FeatureMap::new(x_q.height(), x_q.width(), g.value(out).clone())
}

/// The row labels a bank built from `classes` (n rows each) plus n_bg
/// background rows will carry.
pub fn bank_labels(classes: &[ClassId], n: usize, n_bg: usize) -> Vec<RowLabel> {
    let mut labels = Vec::with_capacity(classes.len() * n + n_bg);
    for c in classes {
        for _ in 0..n {
            labels.push(RowLabel::Class(*c));
        }
    }
    for _ in 0..n_bg {
        labels.push(RowLabel::Background);
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    use crate::optim::normal_matrix;

    fn toy_params(d: usize, d_prime: usize, n_bg: usize, classes: &[ClassId], seed: u64) -> ProjectionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut class_embeddings = BTreeMap::new();
        for c in classes {
            class_embeddings.insert(*c, normal_matrix(&mut rng, 1, d, 0.5));
        }
        ProjectionParams {
            w: normal_matrix(&mut rng, d, d_prime, 0.5),
            w_prime: normal_matrix(&mut rng, d, d_prime, 0.5),
            class_embeddings,
            alpha: 0.0,
            background_queries: normal_matrix(&mut rng, n_bg, d, 0.5),
        }
    }

    #[test]
    fn singleton_support_cell_distills_to_value_plus_embedding() {
        let c = ClassId(0);
        let params = toy_params(3, 3, 1, &[c], 7);
        let v = array![[0.2, -1.0, 4.0]];
        let x_s = FeatureMap::new(1, 1, v.clone()).unwrap();
        let q = FeatureQuerySet {
            class_id: c,
            queries: array![[0.3, 0.3, -0.2]],
        };
        let (aff, p) = distill_prototypes(&x_s, &q, &params).unwrap();
        assert_eq!(aff.values[[0, 0]], 1.0);
        let expect = &v + params.class_embeddings.get(&c).unwrap();
        for (a, b) in p.prototypes.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_row_counts_and_labels() {
        let a = ClassId(3);
        let b = ClassId(8);
        let params = toy_params(4, 4, 5, &[a, b], 1);
        let pa = PrototypeSet {
            class_id: a,
            prototypes: Array2::zeros((5, 4)),
        };
        let pb = PrototypeSet {
            class_id: b,
            prototypes: Array2::ones((5, 4)),
        };
        let bank = build_prototype_bank(&[pa, pb], &params).unwrap();
        assert_eq!(bank.len(), 15);
        assert_eq!(&bank.row_labels[..5], &vec![RowLabel::Class(a); 5][..]);
        assert_eq!(&bank.row_labels[5..10], &vec![RowLabel::Class(b); 5][..]);
        assert_eq!(&bank.row_labels[10..], &vec![RowLabel::Background; 5][..]);
    }

    #[test]
    fn minimal_bank_has_two_rows() {
        let c = ClassId(0);
        let params = toy_params(2, 2, 1, &[c], 2);
        let p = PrototypeSet {
            class_id: c,
            prototypes: Array2::zeros((1, 2)),
        };
        let bank = build_prototype_bank(&[p], &params).unwrap();
        assert_eq!(bank.len(), 2);
    }

    #[test]
    fn duplicate_class_rejected() {
        let c = ClassId(1);
        let params = toy_params(2, 2, 1, &[c], 3);
        let p = PrototypeSet {
            class_id: c,
            prototypes: Array2::zeros((1, 2)),
        };
        assert!(build_prototype_bank(&[p.clone(), p], &params).is_err());
    }

    #[test]
    fn zero_alpha_assignment_is_bit_identical_to_input() {
        let c = ClassId(0);
        let params = toy_params(4, 4, 2, &[c], 11);
        assert_eq!(params.alpha, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xq_vals = normal_matrix(&mut rng, 12, 4, 1.0);
        let x_q = FeatureMap::new(3, 4, xq_vals.clone()).unwrap();
        let bank = PrototypeBank {
            rows: normal_matrix(&mut rng, 6, 4, 1.0),
            row_labels: bank_labels(&[c], 4, 2),
        };
        let (aff, out) = assign_prototypes(&x_q, &bank, &params).unwrap();
        aff.validate().unwrap();
        // bit-equality, not approximate
        assert_eq!(out.matrix(), &xq_vals);
    }

    #[test]
    fn empty_bank_rejected() {
        let c = ClassId(0);
        let params = toy_params(4, 4, 2, &[c], 1);
        let x_q = FeatureMap::new(1, 1, Array2::zeros((1, 4))).unwrap();
        let bank = PrototypeBank {
            rows: Array2::zeros((0, 4)),
            row_labels: vec![],
        };
        assert!(assign_prototypes(&x_q, &bank, &params).is_err());
    }

    #[test]
    fn dense_match_singleton_support_adds_cell_at_unit_gate() {
        let c = ClassId(0);
        let mut params = toy_params(3, 3, 1, &[c], 13);
        params.alpha = 1.0;
        let v = array![[1.0, 2.0, 3.0]];
        let sup = FeatureMap::new(1, 1, v.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xq_vals = normal_matrix(&mut rng, 4, 3, 1.0);
        let x_q = FeatureMap::new(2, 2, xq_vals.clone()).unwrap();
        let out = dense_match_baseline(&x_q, &[(c, sup)], &params).unwrap();
        for r in 0..4 {
            for ch in 0..3 {
                let expect = xq_vals[[r, ch]] + v[[0, ch]];
                assert!((out.matrix()[[r, ch]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_error_names_both_operands() {
        let c = ClassId(0);
        let params = toy_params(4, 4, 1, &[c], 19);
        let x_s = FeatureMap::new(1, 2, Array2::zeros((2, 3))).unwrap();
        let q = FeatureQuerySet {
            class_id: c,
            queries: Array2::zeros((2, 4)),
        };
        let err = distill_prototypes(&x_s, &q, &params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("support map"), "{msg}");
        assert!(msg.contains("projection W"), "{msg}");
    }
}
