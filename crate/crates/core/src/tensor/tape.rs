use super::kernels::{self, ConvDims};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, exposed for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Softmax,
    Relu,
    Concat,
    Slice,
    MulConst,
    Embedding,
    LayerNorm,
    Conv1d,
    Depthwise,
    Pad,
    Sum,
    CrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Mul,
    Scale(f64),
    MatMul {
        batch: usize,
        n: usize,
        p: usize,
        m: usize,
        shared_rhs: bool,
    },
    Transpose {
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Softmax,
    Relu,
    Concat {
        widths: Vec<usize>,
    },
    Slice {
        start: usize,
        width: usize,
    },
    MulConst(Vec<f64>),
    Embedding {
        ids: Vec<usize>,
    },
    LayerNorm {
        xhat: Vec<f64>,
        inv_sigma: Vec<f64>,
    },
    Conv1d(ConvDims),
    Depthwise(ConvDims),
    Pad {
        batch: usize,
        n_in: usize,
        left: usize,
        right: usize,
    },
    Sum,
    CrossEntropy {
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
        total_weight: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Softmax => OpKind::Softmax,
            Op::Relu => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::MulConst(_) => OpKind::MulConst,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d(_) => OpKind::Conv1d,
            Op::Depthwise(_) => OpKind::Depthwise,
            Op::Pad { .. } => OpKind::Pad,
            Op::Sum => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Dynamic Wengert list. Nodes are appended in evaluation order, so the
/// list is topologically sorted by construction and `backward` is a single
/// reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_ran: bool,
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [d] => (1, 1, *d),
        [n, d] => (1, *n, *d),
        [b, n, d] => (*b, *n, *d),
        _ => unreachable!(),
    }
}

fn with_depth(shape: &[usize], depth: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("rank >= 1") = depth;
    s
}

fn with_length(shape: &[usize], len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = len;
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` when
    /// `v` does not require gradients or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, Vec::new(), value);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(Op::Scale(s), vec![a], value)
    }

    /// Matrix product.
    ///
    /// * `[n,p] x [p,m] -> [n,m]`
    /// * `[b,n,p] x [p,m] -> [b,n,m]` (shared right operand)
    /// * `[b,n,p] x [b,p,m] -> [b,n,m]` (batched)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, n, p, m, shared_rhs, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([n, p], [p2, m]) if p == p2 => (1, *n, *p, *m, true, vec![*n, *m]),
            ([bt, n, p], [p2, m]) if p == p2 => (1, bt * n, *p, *m, true, vec![*bt, *n, *m]),
            ([bt, n, p], [bt2, p2, m]) if bt == bt2 && p == p2 => {
                (*bt, *n, *p, *m, false, vec![*bt, *n, *m])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let b_off = if shared_rhs { 0 } else { bi * p * m };
            kernels::gemm_nn(
                &ad[bi * n * p..(bi + 1) * n * p],
                &bd[b_off..b_off + p * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                p,
                m,
            );
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            Op::MatMul {
                batch,
                n,
                p,
                m,
                shared_rhs,
            },
            vec![a, b],
            value,
        ))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("needs rank >= 2, got {shape:?}"),
            });
        }
        let (batch, rows, cols) = dims3(&shape);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[off + c * rows + r] = src[off + r * cols + c];
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 1, r - 2);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Transpose { batch, rows, cols }, vec![a], value))
    }

    /// Softmax over the last axis.
    ///
    /// `mask`, when given, has one entry per `(batch, last-axis index)` pair
    /// and is broadcast over the middle axis; `false` entries get probability
    /// exactly zero. A row whose entries are all masked is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (batch, n, m) = dims3(self.shape(a));
        if let Some(mask) = mask {
            if mask.len() != batch * m {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("mask length {} != {}", mask.len(), batch * m),
                });
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let keep = mask.map(|mk| &mk[b * m..(b + 1) * m]);
            for i in 0..n {
                let off = (b * n + i) * m;
                let row = &src[off..off + m];
                let live = |j: usize| keep.is_none_or(|k| k[j]);
                let mx = (0..m)
                    .filter(|&j| live(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(TensorError::Invalid {
                        op: "softmax",
                        msg: "every entry of a row is masked".into(),
                    });
                }
                let mut total = 0.0;
                for j in 0..m {
                    if live(j) {
                        let e = (row[j] - mx).exp();
                        out[off + j] = e;
                        total += e;
                    }
                }
                for o in &mut out[off..off + m] {
                    *o /= total;
                }
            }
        }
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(Op::Softmax, vec![a], value))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(Op::Relu, vec![a], value)
    }

    /// Concatenate along the depth (last) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).depth()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = with_depth(self.shape(first), total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Concat { widths }, parts.to_vec(), value))
    }

    /// Depth channels `start..start + width`.
    pub fn slice_depth(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let depth = self.value(a).depth();
        if width == 0 || start + width > depth {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_depth",
                index: start + width,
                limit: depth,
            });
        }
        let rows = self.value(a).rows();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * depth + start..r * depth + start + width]);
        }
        let shape = with_depth(self.shape(a), width);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Slice { start, width }, vec![a], value))
    }

    /// Split the depth axis into `groups` equal segments.
    pub fn split_depth(&mut self, a: Var, groups: usize) -> Result<Vec<Var>> {
        let depth = self.value(a).depth();
        if groups == 0 || !depth.is_multiple_of(groups) {
            return Err(TensorError::Invalid {
                op: "split_depth",
                msg: format!("{groups} groups do not divide depth {depth}"),
            });
        }
        let w = depth / groups;
        (0..groups).map(|g| self.slice_depth(a, g * w, w)).collect()
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return Err(TensorError::DataLength {
                shape: self.shape(a).to_vec(),
                len: factors.len(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::MulConst(factors), vec![a], value))
    }

    /// Multiply each depth vector by a per-row weight (e.g. a 0/1 padding
    /// mask over positions).
    pub fn scale_rows(&mut self, a: Var, row_weights: &[f64]) -> Result<Var> {
        let (rows, depth) = (self.value(a).rows(), self.value(a).depth());
        if row_weights.len() != rows {
            return Err(TensorError::Invalid {
                op: "scale_rows",
                msg: format!("{} weights for {rows} rows", row_weights.len()),
            });
        }
        let factors = row_weights
            .iter()
            .flat_map(|&w| std::iter::repeat_n(w, depth))
            .collect();
        self.mul_const(a, factors)
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut super::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let factors = (0..self.value(a).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        self.mul_const(a, factors)
    }

    /// Gather rows of `table[vocab, depth]`. `lead` is the shape of `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let [vocab, depth] = ts[..] else {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be rank 2, got {ts:?}"),
            });
        };
        if lead.iter().product::<usize>() != ids.len() {
            return Err(TensorError::DataLength {
                shape: lead.to_vec(),
                len: ids.len(),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * depth);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&src[id * depth..(id + 1) * depth]);
        }
        let mut shape = lead.to_vec();
        shape.push(depth);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Embedding { ids: ids.to_vec() }, vec![table], value))
    }

    /// `gain * (x - mean) / sqrt(var + eps) + bias` over the depth axis, with
    /// population variance and scalar `gain`/`bias` (shape `[1]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).len() != 1 {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!("{name} must be a scalar, got {:?}", self.shape(v)),
                });
            }
        }
        let g = self.value(gain).item();
        let bv = self.value(bias).item();
        let (rows, depth) = (self.value(x).rows(), self.value(x).depth());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_sigma = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        let h = depth as f64;
        for r in 0..rows {
            let row = &src[r * depth..(r + 1) * depth];
            let mean = row.iter().sum::<f64>() / h;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for j in 0..depth {
                let xh = (row[j] - mean) * inv;
                xhat[r * depth + j] = xh;
                out[r * depth + j] = g * xh + bv;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            Op::LayerNorm { xhat, inv_sigma },
            vec![x, gain, bias],
            value,
        ))
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        k: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
    ) -> Result<(ConvDims, Vec<usize>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("input must be [length, depth] or [batch, length, depth], got {xs:?}"),
            });
        }
        let (batch, n_in, depth) = dims3(&xs);
        if depth != cin {
            return Err(TensorError::Invalid {
                op,
                msg: format!("input depth {depth} != kernel input channels {cin}"),
            });
        }
        if dilation == 0 {
            return Err(TensorError::Invalid {
                op,
                msg: "dilation must be >= 1".into(),
            });
        }
        let span = (k - 1) * dilation;
        if n_in <= span {
            return Err(TensorError::Invalid {
                op,
                msg: format!("length {n_in} too short for kernel span {}", span + 1),
            });
        }
        let n_out = n_in - span;
        let out_shape = with_depth(&with_length(&xs, n_out), cout);
        Ok((
            ConvDims {
                batch,
                n_in,
                n_out,
                k,
                dilation,
                cin,
                cout,
            },
            out_shape,
        ))
    }

    /// Unpadded dilated convolution: `x[.., n, cin]`, `w[k, cin, cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let [k, cin, cout] = ws[..] else {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: format!("kernel must be [k, cin, cout], got {ws:?}"),
            });
        };
        let (dims, out_shape) = self.conv_dims("conv1d", x, k, cin, cout, dilation)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &mut out, &dims);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Conv1d(dims), vec![x, w], value))
    }

    /// Unpadded per-channel dilated convolution: `x[.., n, c]`, `w[k, c]`.
    pub fn depthwise(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let [k, c] = ws[..] else {
            return Err(TensorError::Invalid {
                op: "depthwise",
                msg: format!("kernel must be [k, c], got {ws:?}"),
            });
        };
        let (dims, out_shape) = self.conv_dims("depthwise", x, k, c, c, dilation)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &mut out, &dims);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Depthwise(dims), vec![x, w], value))
    }

    /// Zero-pad the length axis.
    pub fn pad_length(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        if left == 0 && right == 0 {
            return Ok(x);
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Invalid {
                op: "pad_length",
                msg: format!("needs a length axis, got {xs:?}"),
            });
        }
        let (batch, n_in, depth) = dims3(&xs);
        let n_out = n_in + left + right;
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * n_out * depth];
        for b in 0..batch {
            let dst = (b * n_out + left) * depth;
            out[dst..dst + n_in * depth]
                .copy_from_slice(&src[b * n_in * depth..(b + 1) * n_in * depth]);
        }
        let value = Tensor::new(&with_length(&xs, n_out), out)?;
        Ok(self.push(
            Op::Pad {
                batch,
                n_in,
                left,
                right,
            },
            vec![x],
            value,
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    /// Weighted mean negative log-likelihood of `targets` under
    /// `softmax(logits)` along the last axis. One target and one weight per
    /// row; rows with weight zero are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (rows, vocab) = (self.value(logits).rows(), self.value(logits).depth());
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!(
                    "{} targets / {} weights for {rows} rows",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "no unmasked positions".into(),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: vocab,
                });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..vocab {
                let e = (row[j] - mx).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (mx + z.ln() - row[t]);
            }
        }
        let value = Tensor::scalar(loss / total_weight);
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
            vec![logits],
            value,
        ))
    }

    /// Clear gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_ran = false;
    }

    /// Reverse sweep from a scalar `loss`. Each node's contributions are
    /// added to its inputs in input order, nodes are visited in reverse tape
    /// order, so accumulation order is fixed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_ran = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.grad = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Add into one input's gradient buffer. The buffer is moved out of
        // `grads` for the duration of the body and put back afterwards.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    let mut owned = grads[v.0].take().unwrap_or_else(|| vec![0.0; len]);
                    {
                        let $buf: &mut [f64] = &mut owned;
                        $body
                    }
                    grads[v.0] = Some(owned);
                }
            };
        }
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &v in ins {
                    acc!(v, |buf| {
                        kernels::axpy(1.0, g, buf);
                    });
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc!(a, |buf| {
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc!(b, |buf| {
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(s) => {
                acc!(ins[0], |buf| {
                    kernels::axpy(*s, g, buf);
                });
            }
            Op::MatMul {
                batch,
                n,
                p,
                m,
                shared_rhs,
            } => {
                let (a, b) = (ins[0], ins[1]);
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let (n, p, m) = (*n, *p, *m);
                acc!(a, |buf| {
                    for bi in 0..*batch {
                        let b_off = if *shared_rhs { 0 } else { bi * p * m };
                        kernels::gemm_nt(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &bd[b_off..b_off + p * m],
                            &mut buf[bi * n * p..(bi + 1) * n * p],
                            n,
                            m,
                            p,
                        );
                    }
                });
                acc!(b, |buf| {
                    for bi in 0..*batch {
                        let b_off = if *shared_rhs { 0 } else { bi * p * m };
                        kernels::gemm_tn(
                            &ad[bi * n * p..(bi + 1) * n * p],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut buf[b_off..b_off + p * m],
                            n,
                            p,
                            m,
                        );
                    }
                });
            }
            Op::Transpose { batch, rows, cols } => {
                acc!(ins[0], |buf| {
                    for b in 0..*batch {
                        let off = b * rows * cols;
                        for r in 0..*rows {
                            for c in 0..*cols {
                                buf[off + r * cols + c] += g[off + c * rows + r];
                            }
                        }
                    }
                });
            }
            Op::Softmax => {
                let y = node.value.data();
                let m = node.value.depth();
                acc!(ins[0], |buf| {
                    for r in 0..y.len() / m {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            buf[r * m + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::Relu => {
                let x = self.value(ins[0]).data();
                acc!(ins[0], |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut start = 0;
                for (&v, &w) in ins.iter().zip(widths) {
                    acc!(v, |buf| {
                        for r in 0..rows {
                            kernels::axpy(
                                1.0,
                                &g[r * total + start..r * total + start + w],
                                &mut buf[r * w..(r + 1) * w],
                            );
                        }
                    });
                    start += w;
                }
            }
            Op::Slice { start, width } => {
                let depth = self.value(ins[0]).depth();
                let rows = g.len() / width;
                acc!(ins[0], |buf| {
                    for r in 0..rows {
                        kernels::axpy(
                            1.0,
                            &g[r * width..(r + 1) * width],
                            &mut buf[r * depth + start..r * depth + start + width],
                        );
                    }
                });
            }
            Op::MulConst(factors) => {
                acc!(ins[0], |buf| {
                    for ((o, gi), f) in buf.iter_mut().zip(g).zip(factors) {
                        *o += gi * f;
                    }
                });
            }
            Op::Embedding { ids } => {
                let depth = node.value.depth();
                acc!(ins[0], |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(
                            1.0,
                            &g[r * depth..(r + 1) * depth],
                            &mut buf[id * depth..(id + 1) * depth],
                        );
                    }
                });
            }
            Op::LayerNorm { xhat, inv_sigma } => {
                let (x, gain, bias) = (ins[0], ins[1], ins[2]);
                let gv = self.value(gain).item();
                let depth = node.value.depth();
                let h = depth as f64;
                acc!(x, |buf| {
                    for (r, &inv) in inv_sigma.iter().enumerate() {
                        let gr = &g[r * depth..(r + 1) * depth];
                        let xr = &xhat[r * depth..(r + 1) * depth];
                        let mean_g: f64 = gr.iter().sum::<f64>() * gv / h;
                        let mean_gx: f64 =
                            gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() * gv / h;
                        for j in 0..depth {
                            buf[r * depth + j] += inv * (gv * gr[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
                acc!(gain, |buf| {
                    buf[0] += g.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>();
                });
                acc!(bias, |buf| {
                    buf[0] += g.iter().sum::<f64>();
                });
            }
            Op::Conv1d(dims) => {
                let (x, w) = (ins[0], ins[1]);
                acc!(x, |buf| {
                    kernels::conv1d_backward_input(g, self.value(w).data(), buf, dims);
                });
                acc!(w, |buf| {
                    kernels::conv1d_backward_weight(g, self.value(x).data(), buf, dims);
                });
            }
            Op::Depthwise(dims) => {
                let (x, w) = (ins[0], ins[1]);
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                acc!(x, |buf| {
                    kernels::depthwise_backward(g, xd, wd, Some(buf), None, dims);
                });
                acc!(w, |buf| {
                    kernels::depthwise_backward(g, xd, wd, None, Some(buf), dims);
                });
            }
            Op::Pad {
                batch,
                n_in,
                left,
                right,
            } => {
                let depth = node.value.depth();
                let n_out = n_in + left + right;
                acc!(ins[0], |buf| {
                    for b in 0..*batch {
                        let src = (b * n_out + left) * depth;
                        kernels::axpy(
                            1.0,
                            &g[src..src + n_in * depth],
                            &mut buf[b * n_in * depth..(b + 1) * n_in * depth],
                        );
                    }
                });
            }
            Op::Sum => {
                acc!(ins[0], |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::CrossEntropy {
                probs,
                targets,
                weights,
                total_weight,
            } => {
                let vocab = self.value(ins[0]).depth();
                acc!(ins[0], |buf| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w / total_weight;
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
