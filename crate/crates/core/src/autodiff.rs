//! Small reverse-mode automatic differentiation tape over `f64` ndarrays.
//!
//! A [`Graph`] is built per forward pass (define-by-run). Every node stores
//! its value; `backward` walks the tape in reverse and accumulates adjoints.
//! All math is double precision and single threaded, which keeps training
//! runs bit-reproducible and makes finite-difference verification practical.
//!
//! Node values are at most rank 2. Feature maps travel as `(H*W, C)`
//! matrices with the spatial extent carried alongside by the caller; ops
//! that need spatial structure (`im2col`, `roi_pool`) take it explicitly.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{FpdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Row-broadcast add: lhs is (m, n), rhs is (1, n).
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a * b^T` without materializing the transpose.
    MatMulNT(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Multiply by a learnable scalar stored as a (1, 1) node.
    ScalarMul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SumAll(NodeId),
    AddN(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// Per output row, a horizontal span `(row, col0)..(row, col0+len)` of
    /// the input.
    GatherSpans {
        x: NodeId,
        starts: Vec<(usize, usize)>,
        len: usize,
    },
    MeanRows(NodeId),
    Im2Col {
        x: NodeId,
        h: usize,
        w: usize,
        c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Mean-pooled bilinear RoI sampling; `samples` holds, per output cell,
    /// the contributing (row, weight) pairs into the input map.
    RoiPool {
        map: NodeId,
        samples: Vec<Vec<(usize, f64)>>,
    },
    CrossEntropyMean {
        logits: NodeId,
        targets: Vec<usize>,
        /// Softmax probabilities saved by the forward pass.
        probs: Array2<f64>,
    },
    BceWithLogitsMean {
        logits: NodeId,
        targets: Vec<f64>,
    },
    SmoothL1Mean {
        pred: NodeId,
        target: Array2<f64>,
        beta: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    /// For leaves: does backward need to keep this node's adjoint?
    trainable: bool,
    name: Option<String>,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction, so backward is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.nrows(), v.ncols())
    }

    /// Scalar convenience accessor for (1, 1) nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Named leaf; `trainable` decides whether backward records its adjoint.
    pub fn param(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].trainable = trainable;
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    /// `a + bias` where bias is (1, n) broadcast over the rows of a.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a . b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s.0].value[[0, 0]];
        let v = &self.nodes[a.0].value * sv;
        self.push(v, Op::ScalarMul(a, s))
    }

    /// Row-wise softmax, max-shifted.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
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
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Array2::<f64>::zeros((rows, total));
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            v.slice_mut(ndarray::s![.., off..off + pv.ncols()])
                .assign(pv);
            off += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0].0].value.ncols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut v = Array2::<f64>::zeros((total, cols));
        let mut off = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            v.slice_mut(ndarray::s![off..off + pv.nrows(), ..])
                .assign(pv);
            off += pv.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = self.nodes[parts[0].0].value.clone();
        for p in &parts[1..] {
            v = v + &self.nodes[p.0].value;
        }
        self.push(v, Op::AddN(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::<f64>::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&x.row(i));
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    /// Gather horizontal spans of width `len`; output is (starts.len(), len).
    pub fn gather_spans(&mut self, x: NodeId, starts: &[(usize, usize)], len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut v = Array2::<f64>::zeros((starts.len(), len));
        for (r, &(row, col0)) in starts.iter().enumerate() {
            for j in 0..len {
                v[[r, j]] = xv[[row, col0 + j]];
            }
        }
        self.push(
            v,
            Op::GatherSpans {
                x,
                starts: starts.to_vec(),
                len,
            },
        )
    }

    /// Mean over rows: (m, n) -> (1, n).
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let m = x.nrows() as f64;
        let mut v = Array2::<f64>::zeros((1, x.ncols()));
        for r in x.rows() {
            for (j, e) in r.iter().enumerate() {
                v[[0, j]] += e;
            }
        }
        v /= m;
        self.push(v, Op::MeanRows(a))
    }

    /// Patch extraction for 3x3-style convolutions. Input x is (h*w, c)
    /// row-major; output is (ho*wo, k*k*c) with zero padding.
    pub fn im2col(
        &mut self,
        x: NodeId,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let c = xv.ncols();
        debug_assert_eq!(xv.nrows(), h * w);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut v = Array2::<f64>::zeros((ho * wo, k * k * c));
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = oy * wo + ox;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let irow = iy as usize * w + ix as usize;
                        let col0 = (ky * k + kx) * c;
                        for ch in 0..c {
                            v[[orow, col0 + ch]] = xv[[irow, ch]];
                        }
                    }
                }
            }
        }
        self.push(
            v,
            Op::Im2Col {
                x,
                h,
                w,
                c,
                k,
                stride,
                pad,
            },
        )
    }

    /// Mean-pooled bilinear RoI features. `map` is (h*w, c); boxes are in
    /// feature-map cell units; each RoI becomes one (1, c) row averaged over
    /// `bins*bins` bilinear samples.
    pub fn roi_pool(
        &mut self,
        map: NodeId,
        h: usize,
        w: usize,
        boxes: &[[f64; 4]],
        bins: usize,
    ) -> NodeId {
        let mv = &self.nodes[map.0].value;
        let c = mv.ncols();
        debug_assert_eq!(mv.nrows(), h * w);
        let mut samples: Vec<Vec<(usize, f64)>> = Vec::with_capacity(boxes.len());
        let mut v = Array2::<f64>::zeros((boxes.len(), c));
        let norm = 1.0 / (bins * bins) as f64;
        for (r, b) in boxes.iter().enumerate() {
            let (x1, y1, x2, y2) = (b[0], b[1], b[2], b[3]);
            let bw = (x2 - x1).max(1e-6);
            let bh = (y2 - y1).max(1e-6);
            let mut contrib: Vec<(usize, f64)> = Vec::new();
            for by in 0..bins {
                for bx in 0..bins {
                    let cx = x1 + (bx as f64 + 0.5) * bw / bins as f64;
                    let cy = y1 + (by as f64 + 0.5) * bh / bins as f64;
                    // continuous coords -> cell-index space
                    let px = (cx - 0.5).clamp(0.0, (w - 1) as f64);
                    let py = (cy - 0.5).clamp(0.0, (h - 1) as f64);
                    let x0 = px.floor() as usize;
                    let y0 = py.floor() as usize;
                    let x1i = (x0 + 1).min(w - 1);
                    let y1i = (y0 + 1).min(h - 1);
                    let fx = px - x0 as f64;
                    let fy = py - y0 as f64;
                    let pts = [
                        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                        (y0 * w + x1i, fx * (1.0 - fy)),
                        (y1i * w + x0, (1.0 - fx) * fy),
                        (y1i * w + x1i, fx * fy),
                    ];
                    for &(row, wgt) in &pts {
                        if wgt == 0.0 {
                            continue;
                        }
                        let wn = wgt * norm;
                        contrib.push((row, wn));
                        for ch in 0..c {
                            v[[r, ch]] += wn * mv[[row, ch]];
                        }
                    }
                }
            }
            samples.push(contrib);
        }
        self.push(v, Op::RoiPool { map, samples })
    }

    /// Mean cross entropy of row logits against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let x = &self.nodes[logits.0].value;
        debug_assert_eq!(x.nrows(), targets.len());
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
            loss -= row[targets[i]].max(1e-300).ln();
        }
        loss /= targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross entropy with logits; numerically stable form.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let x = &self.nodes[logits.0].value;
        debug_assert_eq!(x.len(), targets.len());
        let mut loss = 0.0;
        for (xi, ti) in x.iter().zip(targets.iter()) {
            loss += xi.max(0.0) - xi * ti + (-xi.abs()).exp().ln_1p();
        }
        loss /= targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceWithLogitsMean {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean smooth-L1 (Huber) loss against a constant target.
    pub fn smooth_l1_mean(&mut self, pred: NodeId, target: Array2<f64>, beta: f64) -> NodeId {
        let x = &self.nodes[pred.0].value;
        debug_assert_eq!(x.dim(), target.dim());
        let n = x.len() as f64;
        let mut loss = 0.0;
        for (xi, ti) in x.iter().zip(target.iter()) {
            let d = (xi - ti).abs();
            loss += if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            };
        }
        loss /= n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SmoothL1Mean { pred, target, beta },
        )
    }

    /// Reverse sweep from a scalar node. Returns adjoints for every node
    /// (entries for non-trainable leaves are kept too so tests can inspect
    /// intermediate gradients).
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.len(), 1, "backward needs a scalar loss node");
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(grads, a.0, g.clone());
                add_grad(grads, b.0, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, a.0, g.clone());
                add_grad(grads, b.0, -g.clone());
            }
            Op::Mul(a, b) => {
                add_grad(grads, a.0, g * &self.nodes[b.0].value);
                add_grad(grads, b.0, g * &self.nodes[a.0].value);
            }
            Op::AddBias(a, bias) => {
                add_grad(grads, a.0, g.clone());
                let mut gb = Array2::<f64>::zeros((1, g.ncols()));
                for r in g.rows() {
                    for (j, e) in r.iter().enumerate() {
                        gb[[0, j]] += e;
                    }
                }
                add_grad(grads, bias.0, gb);
            }
            Op::MatMul(a, b) => {
                add_grad(grads, a.0, g.dot(&self.nodes[b.0].value.t()));
                add_grad(grads, b.0, self.nodes[a.0].value.t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                add_grad(grads, a.0, g.dot(&self.nodes[b.0].value));
                add_grad(grads, b.0, g.t().dot(&self.nodes[a.0].value));
            }
            Op::Scale(a, c) => add_grad(grads, a.0, g * *c),
            Op::ScalarMul(a, s) => {
                let sv = self.nodes[s.0].value[[0, 0]];
                add_grad(grads, a.0, g * sv);
                let ds = (g * &self.nodes[a.0].value).sum();
                add_grad(grads, s.0, Array2::from_elem((1, 1), ds));
            }
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut da = Array2::<f64>::zeros(s.dim());
                for r in 0..s.nrows() {
                    let mut dot = 0.0;
                    for j in 0..s.ncols() {
                        dot += g[[r, j]] * s[[r, j]];
                    }
                    for j in 0..s.ncols() {
                        da[[r, j]] = s[[r, j]] * (g[[r, j]] - dot);
                    }
                }
                add_grad(grads, a.0, da);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let da = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                add_grad(grads, a.0, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.ncols();
                    let gp = g.slice(ndarray::s![.., off..off + n]).to_owned();
                    add_grad(grads, p.0, gp);
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.nrows();
                    let gp = g.slice(ndarray::s![off..off + n, ..]).to_owned();
                    add_grad(grads, p.0, gp);
                    off += n;
                }
            }
            Op::SumAll(a) => {
                let gv = g[[0, 0]];
                add_grad(
                    grads,
                    a.0,
                    Array2::from_elem(self.nodes[a.0].value.dim(), gv),
                );
            }
            Op::AddN(parts) => {
                for p in parts {
                    add_grad(grads, p.0, g.clone());
                }
            }
            Op::GatherRows(a, idx) => {
                let mut da = Array2::<f64>::zeros(self.nodes[a.0].value.dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = da.row_mut(i);
                    dst += &g.row(r);
                }
                add_grad(grads, a.0, da);
            }
            Op::GatherSpans { x, starts, len } => {
                let mut dx = Array2::<f64>::zeros(self.nodes[x.0].value.dim());
                for (r, &(row, col0)) in starts.iter().enumerate() {
                    for j in 0..*len {
                        dx[[row, col0 + j]] += g[[r, j]];
                    }
                }
                add_grad(grads, x.0, dx);
            }
            Op::MeanRows(a) => {
                let m = self.nodes[a.0].value.nrows();
                let mut da = Array2::<f64>::zeros(self.nodes[a.0].value.dim());
                let inv = 1.0 / m as f64;
                for mut r in da.rows_mut() {
                    for (j, e) in r.iter_mut().enumerate() {
                        *e = g[[0, j]] * inv;
                    }
                }
                add_grad(grads, a.0, da);
            }
            Op::Im2Col {
                x,
                h,
                w,
                c,
                k,
                stride,
                pad,
            } => {
                let (h, w, c, k, stride, pad) = (*h, *w, *c, *k, *stride, *pad);
                let ho = (h + 2 * pad - k) / stride + 1;
                let wo = (w + 2 * pad - k) / stride + 1;
                let mut dx = Array2::<f64>::zeros((h * w, c));
                for oy in 0..ho {
                    for ox in 0..wo {
                        let orow = oy * wo + ox;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let irow = iy as usize * w + ix as usize;
                                let col0 = (ky * k + kx) * c;
                                for ch in 0..c {
                                    dx[[irow, ch]] += g[[orow, col0 + ch]];
                                }
                            }
                        }
                    }
                }
                add_grad(grads, x.0, dx);
            }
            Op::RoiPool { map, samples } => {
                let mut dm = Array2::<f64>::zeros(self.nodes[map.0].value.dim());
                let c = dm.ncols();
                for (r, contrib) in samples.iter().enumerate() {
                    for &(row, wgt) in contrib {
                        for ch in 0..c {
                            dm[[row, ch]] += wgt * g[[r, ch]];
                        }
                    }
                }
                add_grad(grads, map.0, dm);
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                let gv = g[[0, 0] ] / targets.len() as f64;
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[[i, t]] -= 1.0;
                }
                add_grad(grads, logits.0, dx * gv);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let x = &self.nodes[logits.0].value;
                let gv = g[[0, 0]] / targets.len() as f64;
                let mut dx = Array2::<f64>::zeros(x.dim());
                for ((d, xi), ti) in dx.iter_mut().zip(x.iter()).zip(targets.iter()) {
                    let sig = 1.0 / (1.0 + (-xi).exp());
                    *d = (sig - ti) * gv;
                }
                add_grad(grads, logits.0, dx);
            }
            Op::SmoothL1Mean { pred, target, beta } => {
                let x = &self.nodes[pred.0].value;
                let gv = g[[0, 0]] / x.len() as f64;
                let mut dx = Array2::<f64>::zeros(x.dim());
                for ((d, xi), ti) in dx.iter_mut().zip(x.iter()).zip(target.iter()) {
                    let diff = xi - ti;
                    *d = gv * (diff / beta).clamp(-1.0, 1.0);
                }
                add_grad(grads, pred.0, dx);
            }
        }
    }

    /// Gradients of every trainable named leaf, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if let (Some(name), Some(g)) = (&node.name, &grads.grads[i]) {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Array2<f64>| *acc = &*acc + g)
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }

    /// Validate two operands agree on an inner dimension, with a shape
    /// error naming both sides.
    pub fn check_inner(
        op: &str,
        lhs_name: &str,
        lhs: &Array2<f64>,
        rhs_name: &str,
        rhs: &Array2<f64>,
        lhs_dim: usize,
        rhs_dim: usize,
    ) -> Result<()> {
        let l = if lhs_dim == 0 { lhs.nrows() } else { lhs.ncols() };
        let r = if rhs_dim == 0 { rhs.nrows() } else { rhs.ncols() };
        if l != r {
            return Err(FpdError::shape(
                op,
                lhs_name,
                &[lhs.nrows(), lhs.ncols()],
                rhs_name,
                &[rhs.nrows(), rhs.ncols()],
            ));
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

fn add_grad(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
    match &mut grads[i] {
        Some(acc) => *acc = &*acc + &g,
        slot => *slot = Some(g),
    }
}

/// Conv output spatial size for one axis.
pub fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Helper used across the model: affine layer `x . w + b`.
pub fn affine(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xw = g.matmul(x, w);
    g.add_bias(xw, b)
}

pub fn flat_len(a: &Array2<f64>) -> usize {
    a.nrows() * a.ncols()
}

/// Flattened view of a (1, n) or (m, n) array as a Vec, row-major.
pub fn to_flat_vec(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub fn from_flat(v: &[f64], rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v.to_vec()).expect("shape/vec length mismatch")
}

/// 1D array helper for logits stored as a column.
pub fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

pub fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

pub fn array1_to_row(v: &Array1<f64>) -> Array2<f64> {
    row(v.as_slice().expect("contiguous"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_grads_match_manual() {
        let mut g = Graph::new();
        let a = g.param("a", array![[1.0, 2.0], [3.0, 4.0]], true);
        let b = g.param("b", array![[0.5, -1.0], [2.0, 0.0]], true);
        let c = g.matmul(a, b);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        // d(sum(AB))/dA = ones . B^T
        let da = grads.get(a).unwrap();
        assert_eq!(da, &array![[-0.5, 2.0], [-0.5, 2.0]]);
        let db = grads.get(b).unwrap();
        assert_eq!(db, &array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_check_out() {
        let mut g = Graph::new();
        let x = g.param("x", array![[0.1, 0.9, -0.3], [5.0, 5.0, 5.0]], true);
        let s = g.softmax_rows(x);
        for row in g.value(s).rows() {
            assert_close(row.sum(), 1.0, 1e-12);
        }
        // loss = sum(s * w) for a fixed weighting picks out softmax jacobian
        let wgt = g.constant(array![[1.0, 2.0, 3.0], [1.0, 0.0, 0.0]]);
        let prod = g.mul(s, wgt);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let dx = grads.get(x).unwrap().clone();

        // finite difference
        let base = array![[0.1, 0.9, -0.3], [5.0, 5.0, 5.0]];
        let eval = |v: &Array2<f64>| {
            let mut g2 = Graph::new();
            let x2 = g2.constant(v.clone());
            let s2 = g2.softmax_rows(x2);
            let w2 = g2.constant(array![[1.0, 2.0, 3.0], [1.0, 0.0, 0.0]]);
            let p2 = g2.mul(s2, w2);
            let l2 = g2.sum_all(p2);
            g2.scalar(l2)
        };
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = base.clone();
                p[[i, j]] += h;
                let fp = eval(&p);
                p[[i, j]] -= 2.0 * h;
                let fm = eval(&p);
                let fd = (fp - fm) / (2.0 * h);
                assert_close(dx[[i, j]], fd, 1e-6);
            }
        }
    }

    #[test]
    fn im2col_identity_kernel_roundtrip() {
        // k=1, stride=1, pad=0 is the identity
        let mut g = Graph::new();
        let x = g.param("x", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]], true);
        let cols = g.im2col(x, 2, 2, 1, 1, 0);
        assert_eq!(g.value(cols), g.value(x));
        let loss = g.sum_all(cols);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &Array2::from_elem((4, 2), 1.0));
    }

    #[test]
    fn conv3x3_shapes_and_backward_mass_conservation() {
        let mut g = Graph::new();
        let h = 4;
        let w = 4;
        let x = g.param("x", Array2::from_elem((16, 3), 1.0), true);
        let cols = g.im2col(x, h, w, 3, 1, 1);
        assert_eq!(g.shape(cols), (16, 27));
        let wgt = g.constant(Array2::from_elem((27, 5), 0.5));
        let y = g.matmul(cols, wgt);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let dx = grads.get(x).unwrap();
        // every input cell participates in at least one patch
        assert!(dx.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_n() {
        let mut g = Graph::new();
        let logits = g.constant(Array2::zeros((3, 4)));
        let loss = g.cross_entropy_mean(logits, &[0, 1, 2]);
        assert_close(g.scalar(loss), (4.0f64).ln(), 1e-12);
    }

    #[test]
    fn bce_grads_are_sigmoid_minus_target() {
        let mut g = Graph::new();
        let logits = g.param("l", array![[0.0], [2.0]], true);
        let loss = g.bce_with_logits_mean(logits, &[1.0, 0.0]);
        let grads = g.backward(loss);
        let dl = grads.get(logits).unwrap();
        assert_close(dl[[0, 0]], (0.5 - 1.0) / 2.0, 1e-12);
        let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert_close(dl[[1, 0]], sig2 / 2.0, 1e-12);
    }

    #[test]
    fn smooth_l1_quadratic_and_linear_zones() {
        let mut g = Graph::new();
        let pred = g.constant(array![[0.05, 3.0]]);
        let loss = g.smooth_l1_mean(pred, array![[0.0, 0.0]], 1.0);
        let expect = (0.5 * 0.05 * 0.05 + (3.0 - 0.5)) / 2.0;
        assert_close(g.scalar(loss), expect, 1e-12);
    }

    #[test]
    fn roi_pool_full_box_equals_mean() {
        let mut g = Graph::new();
        let map = g.constant(array![[1.0], [2.0], [3.0], [4.0]]); // 2x2, 1ch
        let pooled = g.roi_pool(map, 2, 2, &[[0.0, 0.0, 2.0, 2.0]], 2);
        // bin centers land exactly on the four cells
        assert_close(g.value(pooled)[[0, 0]], 2.5, 1e-12);
    }

    #[test]
    fn scalar_mul_routes_gradient_to_gate() {
        let mut g = Graph::new();
        let x = g.constant(array![[2.0, -1.0]]);
        let alpha = g.param("alpha", Array2::zeros((1, 1)), true);
        let y = g.scalar_mul(x, alpha);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert_close(grads.get(alpha).unwrap()[[0, 0]], 1.0, 1e-12);
    }
}
