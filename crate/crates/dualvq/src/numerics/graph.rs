use super::tensor::Tensor;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("bad tensor shape: {0}")]
    BadShape(String),
    #[error("{op} at node {node}: shape mismatch: {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("{op} at node {node}: {detail}")]
    BadInput {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("node id {0} out of range")]
    BadNodeId(usize),
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// How a 1-D convolution pads its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output length is `(len - k)/stride + 1`.
    Valid,
    /// Zero padding so the output length is `ceil(len / stride)`.
    Same,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    AddBiasRows(usize, usize),
    Relu(usize),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad_left: usize,
    },
    ConvT1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Transpose(usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    BroadcastRow(usize),
    ConcatCols(usize, usize),
    CropCols(usize),
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    StopGrad { _src: usize },
    GradReverse {
        x: usize,
        lambda: f64,
    },
    StraightThrough {
        src: usize,
    },
    SoftmaxRows(usize),
    CrossEntropyRows {
        logits: usize,
        targets: Vec<usize>,
    },
    GetElement {
        x: usize,
        index: usize,
    },
    ReplaceElement {
        x: usize,
        index: usize,
        scalar: usize,
    },
    RowNormalize(usize),
}

/// Reverse-mode tape over tensor operations.
///
/// Values are computed eagerly as ops are applied; [`Graph::backward`]
/// sweeps the tape once, accumulating gradients into every node. Frozen
/// leaves never receive gradient (it stays exactly zero).
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    frozen: Vec<bool>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            frozen: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, frozen: bool) -> NodeId {
        let id = self.values.len();
        self.grads.push(vec![0.0; value.numel()]);
        self.values.push(value);
        self.frozen.push(frozen);
        self.ops.push(op);
        NodeId(id)
    }

    /// Insert a leaf whose gradient will be tracked.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a leaf that never receives gradient (frozen parameter or
    /// constant input).
    pub fn frozen_leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` with respect to `id`, flat.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.values[id.0].shape().to_vec(), self.grads[id.0].clone())
            .expect("grad shape matches value shape")
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn check2d(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), GraphError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch {
                op,
                node: id.0,
                detail: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch {
                op,
                node: b.0,
                detail: format!(
                    "operands {:?} vs {:?} (nodes {} and {})",
                    self.shape(a),
                    self.shape(b),
                    a.0,
                    b.0
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a.0, b.0), false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("sub", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a.0, b.0), false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("mul", a, b)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a.0, b.0), false))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let data = self.values[a.0].data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(a.0, c), false))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let data = self.values[a.0].data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddScalar(a.0), false))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let data = self.values[a.0].data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Relu(a.0), false))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, ka) = self.check2d("matmul", a)?;
        let (kb, n) = self.check2d("matmul", b)?;
        if ka != kb {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                node: b.0,
                detail: format!("inner dims {ka} vs {kb} (nodes {} and {})", a.0, b.0),
            });
        }
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * ka..(i + 1) * ka];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a.0, b.0), false))
    }

    /// `x: [n, m]` plus a length-`m` bias added to every row.
    pub fn add_bias_rows(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (n, m) = self.check2d("add_bias_rows", x)?;
        if self.shape(b) != [m] {
            return Err(GraphError::ShapeMismatch {
                op: "add_bias_rows",
                node: b.0,
                detail: format!("bias shape {:?}, want [{m}]", self.shape(b)),
            });
        }
        let xv = self.values[x.0].data();
        let bv = self.values[b.0].data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xv[i * m + j] + bv[j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddBiasRows(x.0, b.0), false))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let (n, m) = self.check2d("transpose", a)?;
        let av = self.values[a.0].data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a.0), false))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 1-D cross-correlation. `x: [c_in, len]`, `w: [c_out, c_in, k]`,
    /// `b: [c_out]`, output `[c_out, out_len]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId, GraphError> {
        let (c_in, len) = self.check2d("conv1d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return Err(GraphError::ShapeMismatch {
                op: "conv1d",
                node: w.0,
                detail: format!("weight shape {ws:?}, want [c_out, {c_in}, k]"),
            });
        }
        let (c_out, k) = (ws[0], ws[2]);
        if self.shape(b) != [c_out] {
            return Err(GraphError::ShapeMismatch {
                op: "conv1d",
                node: b.0,
                detail: format!("bias shape {:?}, want [{c_out}]", self.shape(b)),
            });
        }
        if stride == 0 {
            return Err(GraphError::BadInput {
                op: "conv1d",
                node: x.0,
                detail: "stride must be positive".into(),
            });
        }
        let (out_len, pad_left) = match padding {
            Padding::Valid => {
                if len < k {
                    return Err(GraphError::BadInput {
                        op: "conv1d",
                        node: x.0,
                        detail: format!("input length {len} shorter than kernel {k}"),
                    });
                }
                ((len - k) / stride + 1, 0)
            }
            Padding::Same => {
                let out_len = len.div_ceil(stride);
                let needed = (out_len - 1) * stride + k;
                let pad_total = needed.saturating_sub(len);
                (out_len, pad_total / 2)
            }
        };
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let bv = self.values[b.0].data();
        let mut out = vec![0.0; c_out * out_len];
        for oc in 0..c_out {
            let orow = &mut out[oc * out_len..(oc + 1) * out_len];
            orow.fill(bv[oc]);
            for ic in 0..c_in {
                let wrow = &wv[(oc * c_in + ic) * k..(oc * c_in + ic + 1) * k];
                let xrow = &xv[ic * len..(ic + 1) * len];
                for (ol, o) in orow.iter_mut().enumerate() {
                    let start = (ol * stride) as isize - pad_left as isize;
                    let kk_lo = (-start).max(0) as usize;
                    let kk_hi = k.min((len as isize - start).max(0) as usize);
                    let xs = (start + kk_lo as isize) as usize;
                    let mut acc = 0.0;
                    for (wk, xk) in wrow[kk_lo..kk_hi].iter().zip(&xrow[xs..xs + (kk_hi - kk_lo)]) {
                        acc += wk * xk;
                    }
                    *o += acc;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c_out, out_len], out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad_left,
            },
            false,
        ))
    }

    /// Transposed 1-D convolution. `x: [c_in, len]`, `w: [c_in, c_out, k]`,
    /// `b: [c_out]`, output `[c_out, (len-1)*stride + k - 2*pad]`.
    pub fn conv1d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let (c_in, len) = self.check2d("conv1d_transpose", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != c_in {
            return Err(GraphError::ShapeMismatch {
                op: "conv1d_transpose",
                node: w.0,
                detail: format!("weight shape {ws:?}, want [{c_in}, c_out, k]"),
            });
        }
        let (c_out, k) = (ws[1], ws[2]);
        if self.shape(b) != [c_out] {
            return Err(GraphError::ShapeMismatch {
                op: "conv1d_transpose",
                node: b.0,
                detail: format!("bias shape {:?}, want [{c_out}]", self.shape(b)),
            });
        }
        if stride == 0 {
            return Err(GraphError::BadInput {
                op: "conv1d_transpose",
                node: x.0,
                detail: "stride must be positive".into(),
            });
        }
        let full = (len - 1) * stride + k;
        if full <= 2 * pad {
            return Err(GraphError::BadInput {
                op: "conv1d_transpose",
                node: x.0,
                detail: format!("padding {pad} swallows the whole output ({full})"),
            });
        }
        let out_len = full - 2 * pad;
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let bv = self.values[b.0].data();
        let mut out = vec![0.0; c_out * out_len];
        for oc in 0..c_out {
            out[oc * out_len..(oc + 1) * out_len].fill(bv[oc]);
        }
        for ic in 0..c_in {
            let xrow = &xv[ic * len..(ic + 1) * len];
            for (il, &xval) in xrow.iter().enumerate() {
                let base = (il * stride) as isize - pad as isize;
                for oc in 0..c_out {
                    let wrow = &wv[(ic * c_out + oc) * k..(ic * c_out + oc + 1) * k];
                    let orow = &mut out[oc * out_len..(oc + 1) * out_len];
                    for (kk, &wk) in wrow.iter().enumerate() {
                        let ol = base + kk as isize;
                        if ol >= 0 && (ol as usize) < out_len {
                            orow[ol as usize] += xval * wk;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![c_out, out_len], out)?,
            Op::ConvT1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            false,
        ))
    }

    /// Keep the first `len` columns of a rank-2 tensor.
    pub fn crop_cols(&mut self, x: NodeId, len: usize) -> Result<NodeId, GraphError> {
        let (n, m) = self.check2d("crop_cols", x)?;
        if len == 0 || len > m {
            return Err(GraphError::BadInput {
                op: "crop_cols",
                node: x.0,
                detail: format!("crop to {len} columns out of {m}"),
            });
        }
        let xv = self.values[x.0].data();
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * m..i * m + len]);
        }
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::CropCols(x.0), false))
    }

    // ── reductions and shaping ──────────────────────────────────────

    /// Mean over rows: `[n, d] -> [1, d]`. This is the temporal average
    /// pooling step when rows are time frames. Each column is accumulated
    /// in sorted order, so the result is bit-identical under any row
    /// permutation, and a constant column returns its value exactly.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (n, d) = self.check2d("mean_rows", x)?;
        let xv = self.values[x.0].data();
        let mut out = vec![0.0; d];
        let mut col = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..n {
                col[i] = xv[i * d + j];
            }
            col.sort_by(f64::total_cmp);
            *o = if col[0].to_bits() == col[n - 1].to_bits() {
                col[0]
            } else {
                col.iter().sum::<f64>() / n as f64
            };
        }
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x.0), false))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s: f64 = self.values[x.0].data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x.0), false))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let n = self.values[x.0].numel();
        let s: f64 = self.values[x.0].data().iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MeanAll(x.0), false))
    }

    /// Repeat a `[1, d]` row `n` times into `[n, d]`.
    pub fn broadcast_row(&mut self, x: NodeId, n: usize) -> Result<NodeId, GraphError> {
        let (one, d) = self.check2d("broadcast_row", x)?;
        if one != 1 || n == 0 {
            return Err(GraphError::BadInput {
                op: "broadcast_row",
                node: x.0,
                detail: format!("want a [1, d] row and n > 0, got {:?} x {n}", self.shape(x)),
            });
        }
        let row = self.values[x.0].data().to_vec();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::BroadcastRow(x.0), false))
    }

    /// Concatenate along columns: `[n, a] ++ [n, b] -> [n, a+b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (na, ca) = self.check2d("concat_cols", a)?;
        let (nb, cb) = self.check2d("concat_cols", b)?;
        if na != nb {
            return Err(GraphError::ShapeMismatch {
                op: "concat_cols",
                node: b.0,
                detail: format!("row counts {na} vs {nb}"),
            });
        }
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let mut out = Vec::with_capacity(na * (ca + cb));
        for i in 0..na {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(
            Tensor::new(vec![na, ca + cb], out)?,
            Op::ConcatCols(a.0, b.0),
            false,
        ))
    }

    /// Select rows of a `[k, d]` table; gradient scatter-adds back.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, GraphError> {
        let (k, d) = self.check2d("gather_rows", table)?;
        if indices.is_empty() {
            return Err(GraphError::BadInput {
                op: "gather_rows",
                node: table.0,
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(GraphError::BadInput {
                op: "gather_rows",
                node: table.0,
                detail: format!("index {bad} out of range for {k} rows"),
            });
        }
        let tv = self.values[table.0].data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
            false,
        ))
    }

    // ── custom-gradient nodes ───────────────────────────────────────

    /// Identity forward; exactly zero gradient flows through.
    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let v = self.values[x.0].clone();
        Ok(self.push(v, Op::StopGrad { _src: x.0 }, false))
    }

    /// Identity forward; backward multiplies the upstream gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> Result<NodeId, GraphError> {
        if lambda < 0.0 {
            return Err(GraphError::BadInput {
                op: "grad_reverse",
                node: x.0,
                detail: format!("lambda must be >= 0, got {lambda}"),
            });
        }
        let v = self.values[x.0].clone();
        Ok(self.push(v, Op::GradReverse { x: x.0, lambda }, false))
    }

    /// Straight-through estimator: forward takes `value` verbatim,
    /// backward hands the downstream gradient to `src` unchanged.
    pub fn straight_through(&mut self, src: NodeId, value: Tensor) -> Result<NodeId, GraphError> {
        if self.shape(src) != value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "straight_through",
                node: src.0,
                detail: format!(
                    "source shape {:?} vs value shape {:?}",
                    self.shape(src),
                    value.shape()
                ),
            });
        }
        Ok(self.push(value, Op::StraightThrough { src: src.0 }, false))
    }

    // ── softmax family ──────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (n, c) = self.check2d("softmax_rows", x)?;
        let xv = self.values[x.0].data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::SoftmaxRows(x.0), false))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, GraphError> {
        let (n, c) = self.check2d("cross_entropy_rows", logits)?;
        if targets.len() != n {
            return Err(GraphError::ShapeMismatch {
                op: "cross_entropy_rows",
                node: logits.0,
                detail: format!("{n} rows but {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(GraphError::BadInput {
                op: "cross_entropy_rows",
                node: logits.0,
                detail: format!("target {bad} out of range for {c} classes"),
            });
        }
        let xv = self.values[logits.0].data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropyRows {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            false,
        ))
    }

    // ── element access ──────────────────────────────────────────────

    /// Extract one element (flat index) as a scalar node.
    pub fn get_element(&mut self, x: NodeId, index: usize) -> Result<NodeId, GraphError> {
        let n = self.values[x.0].numel();
        if index >= n {
            return Err(GraphError::BadInput {
                op: "get_element",
                node: x.0,
                detail: format!("index {index} out of range for {n} elements"),
            });
        }
        let v = self.values[x.0].data()[index];
        Ok(self.push(Tensor::scalar(v), Op::GetElement { x: x.0, index }, false))
    }

    /// Copy of `x` with one element (flat index) replaced by a scalar node.
    pub fn replace_element(
        &mut self,
        x: NodeId,
        index: usize,
        scalar: NodeId,
    ) -> Result<NodeId, GraphError> {
        let n = self.values[x.0].numel();
        if index >= n {
            return Err(GraphError::BadInput {
                op: "replace_element",
                node: x.0,
                detail: format!("index {index} out of range for {n} elements"),
            });
        }
        let s = self.values[scalar.0].as_scalar().ok_or(GraphError::BadInput {
            op: "replace_element",
            node: scalar.0,
            detail: "replacement must be a scalar node".into(),
        })?;
        let mut data = self.values[x.0].data().to_vec();
        data[index] = s;
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ReplaceElement {
                x: x.0,
                index,
                scalar: scalar.0,
            },
            false,
        ))
    }

    /// Scale every row of `[n, d]` to unit L2 norm.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (n, d) = self.check2d("row_normalize", x)?;
        let xv = self.values[x.0].data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(GraphError::BadInput {
                    op: "row_normalize",
                    node: x.0,
                    detail: format!("row {i} has zero norm"),
                });
            }
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::RowNormalize(x.0), false))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all earlier calls
    /// are cleared first, so each call stands alone.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        if loss.0 >= self.values.len() {
            return Err(GraphError::BadNodeId(loss.0));
        }
        if !self.values[loss.0].is_scalar() {
            return Err(GraphError::NonScalarLoss {
                node: loss.0,
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Parents always precede their node, so split keeps borrows disjoint.
            let (head, tail) = self.grads.split_at_mut(i);
            let go = &tail[0];
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            let frozen = &self.frozen;
            let acc = |head: &mut [Vec<f64>], p: usize, idx: usize, v: f64| {
                if !frozen[p] {
                    head[p][idx] += v;
                }
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (idx, &g) in go.iter().enumerate() {
                        acc(head, *a, idx, g);
                        acc(head, *b, idx, g);
                    }
                }
                Op::Sub(a, b) => {
                    for (idx, &g) in go.iter().enumerate() {
                        acc(head, *a, idx, g);
                        acc(head, *b, idx, -g);
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.values[*a].data();
                    let bv = self.values[*b].data();
                    for (idx, &g) in go.iter().enumerate() {
                        acc(head, *a, idx, g * bv[idx]);
                        acc(head, *b, idx, g * av[idx]);
                    }
                }
                Op::Scale(a, c) => {
                    for (idx, &g) in go.iter().enumerate() {
                        acc(head, *a, idx, g * c);
                    }
                }
                Op::AddScalar(a) => {
                    for (idx, &g) in go.iter().enumerate() {
                        acc(head, *a, idx, g);
                    }
                }
                Op::Relu(a) => {
                    let av = self.values[*a].data();
                    for (idx, &g) in go.iter().enumerate() {
                        if av[idx] > 0.0 {
                            acc(head, *a, idx, g);
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.values[*a].rows(), self.values[*a].cols());
                    let n = self.values[*b].cols();
                    let av = self.values[*a].data();
                    let bv = self.values[*b].data();
                    if !frozen[*a] {
                        let ga = &mut head[*a];
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += go[i2 * n + j] * bv[p * n + j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    }
                    if !frozen[*b] {
                        let gb = &mut head[*b];
                        for p in 0..k {
                            for i2 in 0..m {
                                let aip = av[i2 * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += aip * go[i2 * n + j];
                                }
                            }
                        }
                    }
                }
                Op::AddBiasRows(x, b) => {
                    let (n, m) = (self.values[*x].rows(), self.values[*x].cols());
                    if !frozen[*x] {
                        for (idx, &g) in go.iter().enumerate() {
                            head[*x][idx] += g;
                        }
                    }
                    if !frozen[*b] {
                        for i2 in 0..n {
                            for j in 0..m {
                                head[*b][j] += go[i2 * m + j];
                            }
                        }
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad_left,
                } => {
                    let (c_in, len) = (self.values[*x].rows(), self.values[*x].cols());
                    let ws = self.values[*w].shape();
                    let (c_out, k) = (ws[0], ws[2]);
                    let out_len = go.len() / c_out;
                    let xv = self.values[*x].data();
                    let wv = self.values[*w].data();
                    for oc in 0..c_out {
                        let gorow = &go[oc * out_len..(oc + 1) * out_len];
                        if !frozen[*b] {
                            head[*b][oc] += gorow.iter().sum::<f64>();
                        }
                        for ic in 0..c_in {
                            let woff = (oc * c_in + ic) * k;
                            for (ol, &g) in gorow.iter().enumerate() {
                                if g == 0.0 {
                                    continue;
                                }
                                let start = (ol * stride) as isize - *pad_left as isize;
                                let kk_lo = (-start).max(0) as usize;
                                let kk_hi = k.min((len as isize - start).max(0) as usize);
                                for kk in kk_lo..kk_hi {
                                    let xi = (start + kk as isize) as usize;
                                    if !frozen[*x] {
                                        head[*x][ic * len + xi] += g * wv[woff + kk];
                                    }
                                    if !frozen[*w] {
                                        head[*w][woff + kk] += g * xv[ic * len + xi];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::ConvT1d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (c_in, len) = (self.values[*x].rows(), self.values[*x].cols());
                    let ws = self.values[*w].shape();
                    let (c_out, k) = (ws[1], ws[2]);
                    let out_len = go.len() / c_out;
                    let xv = self.values[*x].data();
                    let wv = self.values[*w].data();
                    if !frozen[*b] {
                        for oc in 0..c_out {
                            head[*b][oc] += go[oc * out_len..(oc + 1) * out_len].iter().sum::<f64>();
                        }
                    }
                    for ic in 0..c_in {
                        for il in 0..len {
                            let base = (il * stride) as isize - *pad as isize;
                            let xval = xv[ic * len + il];
                            let mut gx = 0.0;
                            for oc in 0..c_out {
                                let woff = (ic * c_out + oc) * k;
                                let gorow = &go[oc * out_len..(oc + 1) * out_len];
                                for kk in 0..k {
                                    let ol = base + kk as isize;
                                    if ol >= 0 && (ol as usize) < out_len {
                                        let g = gorow[ol as usize];
                                        gx += g * wv[woff + kk];
                                        if !frozen[*w] {
                                            head[*w][woff + kk] += g * xval;
                                        }
                                    }
                                }
                            }
                            if !frozen[*x] {
                                head[*x][ic * len + il] += gx;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = (self.values[*a].rows(), self.values[*a].cols());
                    if !frozen[*a] {
                        for i2 in 0..n {
                            for j in 0..m {
                                head[*a][i2 * m + j] += go[j * n + i2];
                            }
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (n, d) = (self.values[*a].rows(), self.values[*a].cols());
                    if !frozen[*a] {
                        let inv = 1.0 / n as f64;
                        for i2 in 0..n {
                            for j in 0..d {
                                head[*a][i2 * d + j] += go[j] * inv;
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = go[0];
                    if !frozen[*a] {
                        for v in head[*a].iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let g = go[0] / self.values[*a].numel() as f64;
                    if !frozen[*a] {
                        for v in head[*a].iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::BroadcastRow(a) => {
                    let d = self.values[*a].cols();
                    let n = go.len() / d;
                    if !frozen[*a] {
                        for i2 in 0..n {
                            for j in 0..d {
                                head[*a][j] += go[i2 * d + j];
                            }
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (n, ca) = (self.values[*a].rows(), self.values[*a].cols());
                    let cb = self.values[*b].cols();
                    for i2 in 0..n {
                        for j in 0..ca {
                            acc(head, *a, i2 * ca + j, go[i2 * (ca + cb) + j]);
                        }
                        for j in 0..cb {
                            acc(head, *b, i2 * cb + j, go[i2 * (ca + cb) + ca + j]);
                        }
                    }
                }
                Op::CropCols(a) => {
                    let (n, m) = (self.values[*a].rows(), self.values[*a].cols());
                    let len = go.len() / n;
                    if !frozen[*a] {
                        for i2 in 0..n {
                            for j in 0..len {
                                head[*a][i2 * m + j] += go[i2 * len + j];
                            }
                        }
                    }
                }
                Op::GatherRows { table, indices } => {
                    let d = self.values[*table].cols();
                    if !frozen[*table] {
                        for (r, &i2) in indices.iter().enumerate() {
                            for j in 0..d {
                                head[*table][i2 * d + j] += go[r * d + j];
                            }
                        }
                    }
                }
                Op::StopGrad { .. } => {}
                Op::GradReverse { x, lambda } => {
                    if !frozen[*x] {
                        for (idx, &g) in go.iter().enumerate() {
                            head[*x][idx] += -lambda * g;
                        }
                    }
                }
                Op::StraightThrough { src } => {
                    if !frozen[*src] {
                        for (idx, &g) in go.iter().enumerate() {
                            head[*src][idx] += g;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (n, c) = (self.values[*a].rows(), self.values[*a].cols());
                    let yv = self.values[i].data();
                    if !frozen[*a] {
                        for i2 in 0..n {
                            let y = &yv[i2 * c..(i2 + 1) * c];
                            let g = &go[i2 * c..(i2 + 1) * c];
                            let dot: f64 = y.iter().zip(g).map(|(yj, gj)| yj * gj).sum();
                            for j in 0..c {
                                head[*a][i2 * c + j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let (n, c) = (self.values[*logits].rows(), self.values[*logits].cols());
                    let xv = self.values[*logits].data();
                    let g = go[0] / n as f64;
                    if !frozen[*logits] {
                        for (i2, &t) in targets.iter().enumerate() {
                            let row = &xv[i2 * c..(i2 + 1) * c];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                            for j in 0..c {
                                let p = (row[j] - m).exp() / z;
                                let ind = if j == t { 1.0 } else { 0.0 };
                                head[*logits][i2 * c + j] += g * (p - ind);
                            }
                        }
                    }
                }
                Op::GetElement { x, index } => {
                    acc(head, *x, *index, go[0]);
                }
                Op::ReplaceElement { x, index, scalar } => {
                    for (idx, &g) in go.iter().enumerate() {
                        if idx == *index {
                            acc(head, *scalar, 0, g);
                        } else {
                            acc(head, *x, idx, g);
                        }
                    }
                }
                Op::RowNormalize(a) => {
                    let (n, d) = (self.values[*a].rows(), self.values[*a].cols());
                    let xv = self.values[*a].data();
                    let yv = self.values[i].data();
                    if !frozen[*a] {
                        for i2 in 0..n {
                            let x = &xv[i2 * d..(i2 + 1) * d];
                            let y = &yv[i2 * d..(i2 + 1) * d];
                            let g = &go[i2 * d..(i2 + 1) * d];
                            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let dot: f64 = y.iter().zip(g).map(|(yj, gj)| yj * gj).sum();
                            for j in 0..d {
                                head[*a][i2 * d + j] += (g[j] - y[j] * dot) / norm;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
