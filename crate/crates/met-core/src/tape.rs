//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! A `Tape` owns every tensor produced during one forward pass. Operations
//! append an op record only when the output needs a gradient, so inference
//! over frozen weights pays for the forward arithmetic and nothing else.
//! `backward` replays the records once, in reverse order of creation, which
//! makes gradient accumulation bit-reproducible under a fixed seed.

use std::rc::Rc;

use crate::error::{MetError, Result};
use crate::tensor::Tensor;

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Epsilon used inside the gradient of the pairwise-distance reduction so it
/// stays bounded at coincident points.
pub const PAIRDIST_GRAD_EPS: f64 = 1e-12;

enum Op {
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddRow {
        a: usize,
        v: usize,
    },
    MulRow {
        a: usize,
        v: usize,
    },
    Transpose {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceRows {
        a: usize,
        lo: usize,
    },
    SliceCols {
        a: usize,
        lo: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    CrossEntropyMean {
        logits: usize,
        labels: Rc<Vec<usize>>,
        probs: Vec<f64>,
    },
    WeightedPairDist {
        reps: usize,
        weights: Rc<Vec<f64>>,
    },
}

struct OpRecord {
    out: usize,
    op: Op,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    records: Vec<OpRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of op records queued for the reverse pass.
    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Insert a tensor as a leaf node, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(tensor);
        TensorId(id)
    }

    /// Insert plain values that never receive gradients.
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0];
        (t.shape[0], t.shape[1])
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert!(self.nodes[id.0].is_scalar());
        self.nodes[id.0].data[0]
    }

    /// Gradient buffer of a node, once `backward` has run.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        let id = self.nodes.len();
        let mut t = Tensor::new(rows, cols, data).expect("op outputs have positive extents");
        t.requires_grad = requires_grad;
        self.nodes.push(t);
        if requires_grad {
            self.records.push(OpRecord { out: id, op });
        }
        TensorId(id)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `C = A B` for `A: m x k`, `B: k x n`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(MetError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = mm_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(m, n, data, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(m, n, data, rg, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(m, n, data, rg, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(m, n, data, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (m, n) = self.shape(a);
        let data = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.needs(&[a.0]);
        self.push(m, n, data, rg, Op::Scale { a: a.0, c })
    }

    /// Broadcast add of a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        self.expect_row("add_row", v, n)?;
        let vd = self.data(v).to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += vd[j];
            }
        }
        let rg = self.needs(&[a.0, v.0]);
        Ok(self.push(m, n, data, rg, Op::AddRow { a: a.0, v: v.0 }))
    }

    /// Scale column `j` of `a` by `v[j]`; equivalently right-multiplication
    /// by the diagonal matrix carrying `v`.
    pub fn mul_row(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        self.expect_row("mul_row", v, n)?;
        let vd = self.data(v).to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= vd[j];
            }
        }
        let rg = self.needs(&[a.0, v.0]);
        Ok(self.push(m, n, data, rg, Op::MulRow { a: a.0, v: v.0 }))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let ad = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        let rg = self.needs(&[a.0]);
        self.push(n, m, data, rg, Op::Transpose { a: a.0 })
    }

    /// Exact-erf GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let data = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.needs(&[a.0]);
        self.push(m, n, data, rg, Op::Gelu { a: a.0 })
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let ad = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&ad[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let rg = self.needs(&[a.0]);
        self.push(m, n, data, rg, Op::SoftmaxRows { a: a.0 })
    }

    /// Per-row normalization with `1/d` variance, then `xhat * gamma + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, d) = self.shape(x);
        if d == 0 {
            return Err(MetError::EmptyAxis { op: "layer_norm" });
        }
        self.expect_row("layer_norm", gamma, d)?;
        self.expect_row("layer_norm", beta, d)?;
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            m,
            d,
            out,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows `lo..hi` of `a`.
    pub fn slice_rows(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if lo >= hi || hi > m {
            return Err(MetError::Index(format!(
                "slice_rows {lo}..{hi} out of 0..{m}"
            )));
        }
        let data = self.data(a)[lo * n..hi * n].to_vec();
        let rg = self.needs(&[a.0]);
        Ok(self.push(hi - lo, n, data, rg, Op::SliceRows { a: a.0, lo }))
    }

    /// Columns `lo..hi` of `a`.
    pub fn slice_cols(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let (m, n) = self.shape(a);
        if lo >= hi || hi > n {
            return Err(MetError::Index(format!(
                "slice_cols {lo}..{hi} out of 0..{n}"
            )));
        }
        let w = hi - lo;
        let ad = self.data(a);
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&ad[i * n + lo..i * n + hi]);
        }
        let rg = self.needs(&[a.0]);
        Ok(self.push(m, w, data, rg, Op::SliceCols { a: a.0, lo }))
    }

    /// Stack tensors with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(MetError::EmptyAxis { op: "concat_rows" });
        }
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(MetError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(rows, n, data, rg, Op::ConcatRows { parts: ids }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.needs(&[a.0]);
        self.push(1, 1, vec![s], rg, Op::Sum { a: a.0 })
    }

    /// Copy of `a`'s values through which no gradient flows.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let mut t = Tensor::new(m, n, self.data(a).to_vec()).expect("detach preserves shape");
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Mean over rows of the negative log-likelihood of `labels` under
    /// row-wise softmax of `logits`.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (m, c) = self.shape(logits);
        if labels.len() != m {
            return Err(MetError::Data(format!(
                "{} labels for {} logit rows",
                labels.len(),
                m
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(MetError::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            let row = &ld[i * c..(i + 1) * c];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[labels[i]] - log_z;
        }
        let loss = total / m as f64;
        let rg = self.needs(&[logits.0]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            rg,
            Op::CrossEntropyMean {
                logits: logits.0,
                labels: Rc::new(labels.to_vec()),
                probs,
            },
        ))
    }

    /// `sum_{i,j} weights[i,j] * |reps_i - reps_j|_2` over all ordered pairs.
    ///
    /// The forward value uses the exact Euclidean norm; the reverse pass
    /// guards the `1/dist` factor with `PAIRDIST_GRAD_EPS` so coincident
    /// points get a zero (bounded) gradient instead of a blow-up.
    pub fn weighted_pairdist_sum(
        &mut self,
        reps: TensorId,
        weights: Rc<Vec<f64>>,
    ) -> Result<TensorId> {
        let (m, d) = self.shape(reps);
        if weights.len() != m * m {
            return Err(MetError::ShapeMismatch {
                op: "weighted_pairdist_sum",
                lhs: vec![m, m],
                rhs: vec![1, weights.len()],
            });
        }
        let rd = self.data(reps);
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let w = weights[i * m + j];
                if w == 0.0 {
                    continue;
                }
                let mut sq = 0.0;
                for t in 0..d {
                    let diff = rd[i * d + t] - rd[j * d + t];
                    sq += diff * diff;
                }
                total += w * sq.sqrt();
            }
        }
        let rg = self.needs(&[reps.0]);
        Ok(self.push(
            1,
            1,
            vec![total],
            rg,
            Op::WeightedPairDist {
                reps: reps.0,
                weights,
            },
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar loss into every reachable node that
    /// requires them. Frozen leaves and detached branches receive none.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.is_scalar() {
            return Err(MetError::NonScalar {
                op: "backward",
                shape: loss_node.shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for r in (0..self.records.len()).rev() {
            let out = self.records[r].out;
            let Some(gout) = grads[out].take() else {
                continue;
            };
            self.accumulate(r, &gout, &mut grads);
            grads[out] = Some(gout);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    match &mut self.nodes[i].grad {
                        Some(existing) => {
                            for (e, v) in existing.iter_mut().zip(&g) {
                                *e += v;
                            }
                        }
                        None => self.nodes[i].grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, record: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.records[record].out;
        match &self.records[record].op {
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    let ga = ensure(grads, *a, m * k);
                    mm_nt_acc(ga, gout, &self.nodes[*b].data, m, n, k);
                }
                if self.nodes[*b].requires_grad {
                    let gb = ensure(grads, *b, k * n);
                    mm_tn_acc(gb, &self.nodes[*a].data, gout, m, k, n);
                }
            }
            Op::Add { a, b } => {
                for &i in &[*a, *b] {
                    if self.nodes[i].requires_grad {
                        axpy(ensure(grads, i, gout.len()), 1.0, gout);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].requires_grad {
                    axpy(ensure(grads, *a, gout.len()), 1.0, gout);
                }
                if self.nodes[*b].requires_grad {
                    axpy(ensure(grads, *b, gout.len()), -1.0, gout);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].requires_grad {
                    let bd = &self.nodes[*b].data;
                    let ga = ensure(grads, *a, gout.len());
                    for t in 0..gout.len() {
                        ga[t] += gout[t] * bd[t];
                    }
                }
                if self.nodes[*b].requires_grad {
                    let ad = &self.nodes[*a].data;
                    let gb = ensure(grads, *b, gout.len());
                    for t in 0..gout.len() {
                        gb[t] += gout[t] * ad[t];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].requires_grad {
                    axpy(ensure(grads, *a, gout.len()), *c, gout);
                }
            }
            Op::AddRow { a, v } => {
                let n = self.nodes[*v].shape[1];
                let m = gout.len() / n;
                if self.nodes[*a].requires_grad {
                    axpy(ensure(grads, *a, gout.len()), 1.0, gout);
                }
                if self.nodes[*v].requires_grad {
                    let gv = ensure(grads, *v, n);
                    for i in 0..m {
                        for j in 0..n {
                            gv[j] += gout[i * n + j];
                        }
                    }
                }
            }
            Op::MulRow { a, v } => {
                let n = self.nodes[*v].shape[1];
                let m = gout.len() / n;
                if self.nodes[*a].requires_grad {
                    let vd = &self.nodes[*v].data;
                    let ga = ensure(grads, *a, gout.len());
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[i * n + j] * vd[j];
                        }
                    }
                }
                if self.nodes[*v].requires_grad {
                    let ad = &self.nodes[*a].data;
                    let gv = ensure(grads, *v, n);
                    for i in 0..m {
                        for j in 0..n {
                            gv[j] += gout[i * n + j] * ad[i * n + j];
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let ga = ensure(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].requires_grad {
                    let ad = &self.nodes[*a].data;
                    let ga = ensure(grads, *a, gout.len());
                    for t in 0..gout.len() {
                        ga[t] += gout[t] * gelu_grad_scalar(ad[t]);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[*a].requires_grad {
                    let y = &self.nodes[out].data;
                    let n = self.nodes[out].shape[1];
                    let m = self.nodes[out].shape[0];
                    let ga = ensure(grads, *a, m * n);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gout[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[*gamma].shape[1];
                let m = gout.len() / d;
                if self.nodes[*beta].requires_grad {
                    let gb = ensure(grads, *beta, d);
                    for i in 0..m {
                        for j in 0..d {
                            gb[j] += gout[i * d + j];
                        }
                    }
                }
                if self.nodes[*gamma].requires_grad {
                    let gg = ensure(grads, *gamma, d);
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += gout[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    let g = &self.nodes[*gamma].data;
                    let gx = ensure(grads, *x, m * d);
                    for i in 0..m {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = gout[i * d + j] * g[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * d + j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = gout[i * d + j] * g[j];
                            gx[i * d + j] +=
                                inv_std[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::SliceRows { a, lo } => {
                if self.nodes[*a].requires_grad {
                    let n = self.nodes[*a].shape[1];
                    let numel = self.nodes[*a].data.len();
                    let ga = ensure(grads, *a, numel);
                    for (t, g) in gout.iter().enumerate() {
                        ga[lo * n + t] += g;
                    }
                }
            }
            Op::SliceCols { a, lo } => {
                if self.nodes[*a].requires_grad {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let w = gout.len() / m;
                    let ga = ensure(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * n + lo + j] += gout[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    if self.nodes[p].requires_grad {
                        let gp = ensure(grads, p, len);
                        axpy(gp, 1.0, &gout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                if self.nodes[*a].requires_grad {
                    let numel = self.nodes[*a].data.len();
                    let ga = ensure(grads, *a, numel);
                    for v in ga.iter_mut() {
                        *v += gout[0];
                    }
                }
            }
            Op::CrossEntropyMean {
                logits,
                labels,
                probs,
            } => {
                if self.nodes[*logits].requires_grad {
                    let (m, c) = (self.nodes[*logits].shape[0], self.nodes[*logits].shape[1]);
                    let gl = ensure(grads, *logits, m * c);
                    let scale = gout[0] / m as f64;
                    for i in 0..m {
                        for j in 0..c {
                            let target = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - target);
                        }
                    }
                }
            }
            Op::WeightedPairDist { reps, weights } => {
                if self.nodes[*reps].requires_grad {
                    let (m, d) = (self.nodes[*reps].shape[0], self.nodes[*reps].shape[1]);
                    let rd = &self.nodes[*reps].data;
                    let gr = ensure(grads, *reps, m * d);
                    let g = gout[0];
                    for i in 0..m {
                        for j in 0..m {
                            let w = weights[i * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            let mut sq = 0.0;
                            for t in 0..d {
                                let diff = rd[i * d + t] - rd[j * d + t];
                                sq += diff * diff;
                            }
                            let inv = 1.0 / (sq + PAIRDIST_GRAD_EPS).sqrt();
                            for t in 0..d {
                                let diff = rd[i * d + t] - rd[j * d + t];
                                let contrib = g * w * diff * inv;
                                gr[i * d + t] += contrib;
                                gr[j * d + t] -= contrib;
                            }
                        }
                    }
                }
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(usize, usize)> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(MetError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok((m, n))
    }

    fn expect_row(&self, op: &'static str, v: TensorId, d: usize) -> Result<()> {
        if self.shape(v) != (1, d) {
            return Err(MetError::ShapeMismatch {
                op,
                lhs: vec![1, d],
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        Ok(())
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(into: &mut [f64], alpha: f64, from: &[f64]) {
    for (d, s) in into.iter_mut().zip(from) {
        *d += alpha * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `C = A B`, row-major, ikj order.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `C += A B^T` for `A: m x n`, `B: k x n`, accumulated into `c: m x k`.
fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + t] += s;
        }
    }
}

/// `C += A^T B` for `A: m x k`, `B: m x n`, accumulated into `c: k x n`.
fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let crow = &mut c[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Standard normal CDF via the exact erf form.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}
