use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use super::Scalar;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// `a @ b`
    MatMul { a: NodeId, b: NodeId },
    /// `a @ b^T`
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Row-broadcast `(n, d) + (d,)`
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    /// A constant tensor was added at forward time; gradient passes through.
    AddConst { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    /// Sum of per-position NLL over non-pad targets.
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
        pad: usize,
        smoothing: f64,
    },
    /// Row gather from an embedding table.
    Embed { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize, width: usize },
    ConcatCols { parts: Vec<NodeId> },
    Relu { a: NodeId },
    /// Elementwise multiply by a frozen 0-or-1/keep mask.
    Dropout { a: NodeId, mask: Vec<S> },
    SumAll { a: NodeId },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Scale { a, .. }
            | Op::AddConst { a }
            | Op::SoftmaxRows { a }
            | Op::Relu { a }
            | Op::Dropout { a, .. }
            | Op::SumAll { a } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropySum { logits, .. } => vec![*logits],
            Op::Embed { table, .. } => vec![*table],
            Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatCols { parts } => parts.clone(),
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes only ever reference earlier nodes, so reverse iteration is a valid
/// topological order for backpropagation. One backward pass per tape.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Drop every node recorded after `len`. Earlier nodes are never mutated
    /// by later ones, so repeated forward passes can share a prefix (bound
    /// parameters, encoder memory) and release their own nodes afterwards.
    /// Ids handed out past `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        debug_assert!(len <= self.nodes.len());
        self.nodes.truncate(len);
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, leaf_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        let needs_grad = match op {
            Op::Leaf => leaf_grad,
            ref op => op.inputs().iter().any(|i| {
                debug_assert!(i.0 < id.0, "tape op references a later node");
                self.nodes[i.0].needs_grad
            }),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- forward primitives -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out).expect("shape consistent");
        Ok(self.push(t, Op::MatMul { a, b }, false))
    }

    /// `a @ b^T` where `a: (m, k)` and `b: (n, k)`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![S::zero(); m * n];
        matmul_nt_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out).expect("shape consistent");
        Ok(self.push(t, Op::MatMulNt { a, b }, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(sa, data).expect("shape consistent");
        Ok(self.push(t, Op::Add { a, b }, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(sa, data).expect("shape consistent");
        Ok(self.push(t, Op::Mul { a, b }, false))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let d = sa[1];
        let bdata = self.nodes[bias.0].value.data().to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdata[i % d])
            .collect();
        let t = Tensor::new(sa, data).expect("shape consistent");
        Ok(self.push(t, Op::AddBias { a, bias }, false))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64_exact(c);
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0].value.data().iter().map(|&x| x * cs).collect();
        let t = Tensor::new(shape, data).expect("shape consistent");
        self.push(t, Op::Scale { a, c }, false)
    }

    /// Add a constant (non-differentiated) tensor: masks, positional tables.
    pub fn add_const(&mut self, a: NodeId, constant: &Tensor<S>) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa != constant.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                lhs: sa,
                rhs: constant.shape().to_vec(),
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(constant.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(sa, data).expect("shape consistent");
        Ok(self.push(t, Op::AddConst { a }, false))
    }

    /// Row-stabilized softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let src = self.nodes[a.0].value.data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let width = *shape.last().unwrap();
        let mut data = vec![S::zero(); src.len()];
        for (orow, irow) in data.chunks_mut(width).zip(src.chunks(width)) {
            softmax_row(irow, orow);
        }
        let t = Tensor::new(shape, data).expect("shape consistent");
        Ok(self.push(t, Op::SoftmaxRows { a }, false))
    }

    /// Per-position normalization over the trailing dimension, then affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s.len() != 1 || s[0] != d {
                let _ = name;
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: s.to_vec(),
                });
            }
        }
        let epss = S::from_f64_exact(eps);
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let mut data = vec![S::zero(); src.len()];
        let dn = S::from_f64_exact(d as f64);
        for (orow, irow) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = irow.iter().copied().sum::<S>() / dn;
            let var = irow
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / dn;
            let inv_std = (var + epss).sqrt().recip();
            for j in 0..d {
                orow[j] = (irow[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::new(sx, data).expect("shape consistent");
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, false))
    }

    /// Summed negative log-likelihood over non-pad positions, with optional
    /// label smoothing mass `smoothing` spread over the other classes.
    /// Returns the scalar node and the number of contributing positions.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad: usize,
        smoothing: f64,
    ) -> Result<(NodeId, usize)> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let vocab = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Internal(format!(
                "target id {t} out of vocabulary ({vocab})"
            )));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::EmptyLossSupport);
        }
        let src = self.nodes[logits.0].value.data();
        let mut total = 0.0f64;
        for (row, &tgt) in src.chunks(vocab).zip(targets) {
            if tgt == pad {
                continue;
            }
            let logp = log_softmax_row_f64(row);
            if smoothing == 0.0 {
                total -= logp[tgt];
            } else {
                let off = smoothing / (vocab as f64 - 1.0);
                for (c, lp) in logp.iter().enumerate() {
                    let q = if c == tgt { 1.0 - smoothing } else { off };
                    total -= q * lp;
                }
            }
        }
        let t = Tensor::scalar(S::from_f64_exact(total));
        let node = self.push(
            t,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing,
            },
            false,
        );
        Ok((node, count))
    }

    /// Mean negative log-likelihood over non-pad positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad: usize,
        smoothing: f64,
    ) -> Result<NodeId> {
        let (sum, count) = self.cross_entropy_sum(logits, targets, pad, smoothing)?;
        Ok(self.scale(sum, 1.0 / count as f64))
    }

    /// Gather rows `ids` from a `(vocab, d)` table.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: st,
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Internal(format!(
                "embedding id {id} out of vocabulary ({vocab})"
            )));
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data).expect("shape consistent");
        Ok(self.push(
            t,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || start + width > sx[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: sx,
                rhs: vec![start, width],
            });
        }
        let cols = sx[1];
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(sx[0] * width);
        for r in 0..sx[0] {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let t = Tensor::new(vec![sx[0], width], data).expect("shape consistent");
        Ok(self.push(t, Op::SliceCols { x, start, width }, false))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptySequence);
        }
        let rows = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let w = self.shape(p)[1];
                let src = self.nodes[p.0].value.data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data).expect("shape consistent");
        Ok(self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            false,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let t = Tensor::new(shape, data).expect("shape consistent");
        self.push(t, Op::Relu { a }, false)
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut SplitMix64) -> NodeId {
        if rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let inv = S::from_f64_exact(1.0 / keep);
        let shape = self.shape(a).to_vec();
        let mask: Vec<S> = (0..self.nodes[a.0].value.numel())
            .map(|_| {
                if rng.next_f64() < keep {
                    inv
                } else {
                    S::zero()
                }
            })
            .collect();
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let t = Tensor::new(shape, data).expect("shape consistent");
        self.push(t, Op::Dropout { a, mask }, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: S = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a }, false)
    }

    // ---- backward -----------------------------------------------------------

    /// Checks the topological invariant: every op only references earlier
    /// nodes. Violations are internal errors (the public API cannot produce
    /// them).
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|input| input.0 >= i) {
                return Err(Error::Internal(format!(
                    "tape cycle: node {i} references a node at or after itself"
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss; fills `grad` buffers of every node
    /// that requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.validate()?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[loss.0].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.nodes[loss.0].value.set_grad(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].value.grad().is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let upstream = node.value.grad().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let k = before[a.0].value.shape()[1];
                    if before[a.0].needs_grad {
                        let mut da = vec![S::zero(); m * k];
                        // dA = dC @ B^T
                        matmul_nt_raw(upstream, before[b.0].value.data(), m, n, k, &mut da);
                        accumulate(&mut before[a.0], &da);
                    }
                    if before[b.0].needs_grad {
                        let mut db = vec![S::zero(); k * n];
                        // dB = A^T @ dC
                        matmul_tn_raw(before[a.0].value.data(), upstream, m, k, n, &mut db);
                        accumulate(&mut before[b.0], &db);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let k = before[a.0].value.shape()[1];
                    if before[a.0].needs_grad {
                        let mut da = vec![S::zero(); m * k];
                        // dA = dC @ B
                        matmul_raw(upstream, before[b.0].value.data(), m, n, k, &mut da);
                        accumulate(&mut before[a.0], &da);
                    }
                    if before[b.0].needs_grad {
                        let mut db = vec![S::zero(); n * k];
                        // dB = dC^T @ A
                        matmul_tn_raw(upstream, before[a.0].value.data(), m, n, k, &mut db);
                        accumulate(&mut before[b.0], &db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    let up = upstream.to_vec();
                    if before[a.0].needs_grad {
                        accumulate(&mut before[a.0], &up);
                    }
                    if before[b.0].needs_grad {
                        accumulate(&mut before[b.0], &up);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        let da: Vec<S> = upstream
                            .iter()
                            .zip(before[b.0].value.data())
                            .map(|(&u, &y)| u * y)
                            .collect();
                        accumulate(&mut before[a.0], &da);
                    }
                    if before[b.0].needs_grad {
                        let db: Vec<S> = upstream
                            .iter()
                            .zip(before[a.0].value.data())
                            .map(|(&u, &x)| u * x)
                            .collect();
                        accumulate(&mut before[b.0], &db);
                    }
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let d = before[bias.0].value.numel();
                    if before[a.0].needs_grad {
                        let up = upstream.to_vec();
                        accumulate(&mut before[a.0], &up);
                    }
                    if before[bias.0].needs_grad {
                        let mut db = vec![S::zero(); d];
                        for (i, &u) in upstream.iter().enumerate() {
                            db[i % d] = db[i % d] + u;
                        }
                        accumulate(&mut before[bias.0], &db);
                    }
                }
                Op::Scale { a, c } => {
                    if before[a.0].needs_grad {
                        let cs = S::from_f64_exact(*c);
                        let da: Vec<S> = upstream.iter().map(|&u| u * cs).collect();
                        accumulate(&mut before[a.0], &da);
                    }
                }
                Op::AddConst { a } => {
                    if before[a.0].needs_grad {
                        let up = upstream.to_vec();
                        accumulate(&mut before[a.0], &up);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if before[a.0].needs_grad {
                        let width = *node.value.shape().last().unwrap();
                        let out = node.value.data();
                        let mut da = vec![S::zero(); out.len()];
                        for ((drow, orow), urow) in da
                            .chunks_mut(width)
                            .zip(out.chunks(width))
                            .zip(upstream.chunks(width))
                        {
                            let dot: S = urow.iter().zip(orow).map(|(&u, &s)| u * s).sum();
                            for j in 0..width {
                                drow[j] = orow[j] * (urow[j] - dot);
                            }
                        }
                        accumulate(&mut before[a.0], &da);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = before[gain.0].value.numel();
                    let dn = S::from_f64_exact(d as f64);
                    let epss = S::from_f64_exact(*eps);
                    let xdata = before[x.0].value.data();
                    let gdata = before[gain.0].value.data();
                    let mut dx = vec![S::zero(); xdata.len()];
                    let mut dgain = vec![S::zero(); d];
                    let mut dbias = vec![S::zero(); d];
                    for ((xrow, urow), dxrow) in xdata
                        .chunks(d)
                        .zip(upstream.chunks(d))
                        .zip(dx.chunks_mut(d))
                    {
                        let mean = xrow.iter().copied().sum::<S>() / dn;
                        let var =
                            xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                        let inv_std = (var + epss).sqrt().recip();
                        let xhat: Vec<S> = xrow.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![S::zero(); d];
                        for j in 0..d {
                            dgain[j] = dgain[j] + urow[j] * xhat[j];
                            dbias[j] = dbias[j] + urow[j];
                            dxhat[j] = urow[j] * gdata[j];
                        }
                        let sum_dxhat: S = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat: S =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dxrow[j] = inv_std / dn
                                * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    if before[x.0].needs_grad {
                        accumulate(&mut before[x.0], &dx);
                    }
                    if before[gain.0].needs_grad {
                        accumulate(&mut before[gain.0], &dgain);
                    }
                    if before[bias.0].needs_grad {
                        accumulate(&mut before[bias.0], &dbias);
                    }
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    pad,
                    smoothing,
                } => {
                    if before[logits.0].needs_grad {
                        let vocab = before[logits.0].value.shape()[1];
                        let up = upstream[0].to_f64_exact();
                        let src = before[logits.0].value.data();
                        let mut dl = vec![S::zero(); src.len()];
                        for ((row, drow), &tgt) in
                            src.chunks(vocab).zip(dl.chunks_mut(vocab)).zip(targets)
                        {
                            if tgt == *pad {
                                continue;
                            }
                            let p = softmax_row_f64(row);
                            let off = if *smoothing == 0.0 {
                                0.0
                            } else {
                                smoothing / (vocab as f64 - 1.0)
                            };
                            for c in 0..vocab {
                                let q = if c == tgt { 1.0 - smoothing } else { off };
                                drow[c] = S::from_f64_exact(up * (p[c] - q));
                            }
                        }
                        accumulate(&mut before[logits.0], &dl);
                    }
                }
                Op::Embed { table, ids } => {
                    if before[table.0].needs_grad {
                        let d = before[table.0].value.shape()[1];
                        let mut dt = vec![S::zero(); before[table.0].value.numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] = dt[id * d + j] + upstream[r * d + j];
                            }
                        }
                        accumulate(&mut before[table.0], &dt);
                    }
                }
                Op::SliceCols { x, start, width } => {
                    if before[x.0].needs_grad {
                        let cols = before[x.0].value.shape()[1];
                        let rows = before[x.0].value.shape()[0];
                        let mut dx = vec![S::zero(); rows * cols];
                        for r in 0..rows {
                            for j in 0..*width {
                                dx[r * cols + start + j] = upstream[r * width + j];
                            }
                        }
                        accumulate(&mut before[x.0], &dx);
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = before[p.0].value.shape()[1];
                        if before[p.0].needs_grad {
                            let mut dp = vec![S::zero(); rows * w];
                            for r in 0..rows {
                                dp[r * w..(r + 1) * w].copy_from_slice(
                                    &upstream[r * total + offset..r * total + offset + w],
                                );
                            }
                            accumulate(&mut before[p.0], &dp);
                        }
                        offset += w;
                    }
                }
                Op::Relu { a } => {
                    if before[a.0].needs_grad {
                        let da: Vec<S> = upstream
                            .iter()
                            .zip(before[a.0].value.data())
                            .map(|(&u, &x)| if x > S::zero() { u } else { S::zero() })
                            .collect();
                        accumulate(&mut before[a.0], &da);
                    }
                }
                Op::Dropout { a, mask } => {
                    if before[a.0].needs_grad {
                        let da: Vec<S> =
                            upstream.iter().zip(mask).map(|(&u, &m)| u * m).collect();
                        accumulate(&mut before[a.0], &da);
                    }
                }
                Op::SumAll { a } => {
                    if before[a.0].needs_grad {
                        let da = vec![upstream[0]; before[a.0].value.numel()];
                        accumulate(&mut before[a.0], &da);
                    }
                }
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn corrupt_for_test(&mut self) {
        // Point the last node's op at itself to exercise cycle detection.
        if let Some(last) = self.nodes.len().checked_sub(1) {
            self.nodes[last].op = Op::AddConst { a: NodeId(last) };
        }
    }
}

fn accumulate<S: Scalar>(node: &mut Node<S>, delta: &[S]) {
    let grad = node.value.ensure_grad();
    debug_assert_eq!(grad.len(), delta.len());
    for (g, &d) in grad.iter_mut().zip(delta) {
        *g = *g + d;
    }
}

/// Stabilized softmax of one row into `out`.
fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn softmax_row_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    let row: Vec<f64> = row.iter().map(|v| v.to_f64_exact()).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_row_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    let row: Vec<f64> = row.iter().map(|v| v.to_f64_exact()).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - max - log_sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t64(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = tape.constant(t64(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[vec![1.0, 2.0]]));
        let b = tape.constant(t64(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilator() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let x = tape.constant(Tensor::filled(vec![3, 2], 5.0));
        let y = tape.matmul(z, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[2, 2]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masked_column_vanishes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![0.0, crate::numerics::NEG_INF]]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![1.0f64.ln(), 3.0f64.ln()]]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.25).abs() < 1e-15);
        assert!((out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![f64::NAN, 0.0]]));
        assert!(matches!(
            tape.softmax_rows(x),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![1.0, 1.0, 1.0]]));
        let g = tape.constant(Tensor::filled(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![-1.0, 1.0]]));
        let g = tape.constant(Tensor::filled(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![0.0, 2.0]]));
        let g = tape.constant(Tensor::filled(vec![2], 2.0));
        let b = tape.constant(Tensor::filled(vec![2], 1.0));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert!((out[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 4]));
        let loss = tape.cross_entropy(logits, &[2], 0usize.wrapping_sub(1), 0.0).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t64(&[vec![50.0, 0.0, 0.0]]));
        let loss = tape.cross_entropy(logits, &[0], usize::MAX, 0.0).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_pad_exclusion() {
        let pad = 0usize;
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t64(&[vec![0.3, -0.2, 1.0], vec![9.9, 9.9, 9.9]]));
        let both = tape.cross_entropy(logits, &[2, pad], pad, 0.0).unwrap();
        let single_logits = tape.constant(t64(&[vec![0.3, -0.2, 1.0]]));
        let single = tape.cross_entropy(single_logits, &[2], pad, 0.0).unwrap();
        assert!(
            (tape.value(both).data()[0] - tape.value(single).data()[0]).abs() < 1e-14
        );
    }

    #[test]
    fn cross_entropy_all_pad_is_error() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 0], 0, 0.0),
            Err(Error::EmptyLossSupport)
        ));
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cycle_detection() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let _ = x;
        tape.corrupt_for_test();
        assert!(matches!(tape.validate(), Err(Error::Internal(_))));
    }

    #[test]
    fn truncate_releases_later_nodes_and_keeps_earlier_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), false);
        let mark = tape.len();
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        tape.truncate(mark);
        assert_eq!(tape.len(), mark);
        // The prefix is intact and usable for further work.
        let z = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(z).data(), &[4.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut rng = SplitMix64::new(1);
        let x = tape.leaf(Tensor::filled(vec![2, 2], 2.0), true);
        let y = tape.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn matmul_associativity_on_random_chains() {
        let mut rng = SplitMix64::new(0xA550C);
        for _ in 0..50 {
            let (m, k, l, n) = (
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(5) as usize,
                1 + rng.next_below(5) as usize,
            );
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(Tensor::rand_uniform(vec![m, k], -2.0, 2.0, &mut rng));
            let b = tape.constant(Tensor::rand_uniform(vec![k, l], -2.0, 2.0, &mut rng));
            let c = tape.constant(Tensor::rand_uniform(vec![l, n], -2.0, 2.0, &mut rng));
            let ab = tape.matmul(a, b).unwrap();
            let left = tape.matmul(ab, c).unwrap();
            let bc = tape.matmul(b, c).unwrap();
            let right = tape.matmul(a, bc).unwrap();
            for (x, y) in tape
                .value(left)
                .data()
                .iter()
                .zip(tape.value(right).data())
            {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
                assert!(rel <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_any_finite_rows() {
        let mut rng = SplitMix64::new(0x50F7);
        for _ in 0..200 {
            let rows = 1 + rng.next_below(4) as usize;
            let cols = 1 + rng.next_below(8) as usize;
            let mut tape = Tape::<f64>::new();
            // Random rows mixing huge negatives (near the mask value) with
            // ordinary scores; at least one entry above NEG_INF/2 per row.
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    if c == r % cols {
                        data.push(rng.next_range(-100.0, 100.0));
                    } else if rng.next_f64() < 0.3 {
                        data.push(crate::numerics::NEG_INF);
                    } else {
                        data.push(rng.next_range(-50.0, 50.0));
                    }
                }
            }
            let x = tape
                .constant(Tensor::new(vec![rows, cols], data).unwrap());
            let y = tape.softmax_rows(x).unwrap();
            for r in 0..rows {
                let sum: f64 = tape.value(y).row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
            }
        }
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]));
        let a = tape.slice_cols(x, 0, 2).unwrap();
        let b = tape.slice_cols(x, 2, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }
}
