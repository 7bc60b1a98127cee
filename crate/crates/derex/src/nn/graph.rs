//! Arena-based reverse-mode differentiation: eager forward evaluation into a
//! tape of nodes, backward as a reverse sweep. Single-threaded per graph;
//! distinct graphs are independent.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {context}: {a:?} vs {b:?}")]
    ShapeMismatch { context: String, a: Vec<usize>, b: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("tensor data length {got} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, got: usize },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid layer spec: {0}")]
    BadLayer(String),
}

/// Plain value tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NnError::BadLength { shape, got: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x], requires_grad: false }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Forward-identity node whose backward contributes nothing upstream.
pub fn stop_gradient(t: &Tensor) -> Tensor {
    Tensor { shape: t.shape.clone(), data: t.data.clone(), requires_grad: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    /// Row gather from a parameter table: out[i] = table[indices[i]].
    Embed { table: NodeId, indices: Vec<usize> },
    Add(NodeId, NodeId),
    /// Broadcast-add a length-k bias to each row of a (b, k) matrix.
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// a' * b for a (p, m), b (p, n) -> (m, n).
    MatMulTN(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Conv2d { x: NodeId, w: NodeId, bias: NodeId, stride: usize },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mu: Vec<f64>, var: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    StopGrad(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    /// Stack b vectors of length k into a (b, k) matrix.
    StackRows(Vec<NodeId>),
    /// Graph-drawing second moment: see `laplacian` module.
    OuterDeltaProduct { fu: NodeId, fv: NodeId },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Accumulated parameter gradients keyed by parameter name.
pub type GradStore = BTreeMap<String, Vec<f64>>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn tensor_of(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.shape(id).to_vec(),
            data: self.value(id).to_vec(),
            requires_grad: self.nodes[id.0].needs_grad,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.push(vec![1], vec![x], Op::Leaf, false)
    }

    /// Bind a named parameter value as a differentiable node.
    pub fn param(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.push(shape, data, Op::Param(name.to_string()), true)
    }

    pub fn embed(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId, NnError> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(NnError::ShapeMismatch { context: "embed".into(), a: tshape, b: vec![] });
        }
        let k = tshape[1];
        let mut out = Vec::with_capacity(indices.len() * k);
        for &ix in &indices {
            if ix >= tshape[0] {
                return Err(NnError::ShapeMismatch {
                    context: format!("embed index {ix}"),
                    a: tshape.clone(),
                    b: vec![ix],
                });
            }
            out.extend_from_slice(&self.value(table)[ix * k..(ix + 1) * k]);
        }
        let b = indices.len();
        let needs = self.needs(table);
        Ok(self.push(vec![b, k], out, Op::Embed { table, indices }, needs))
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        context: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                context: context.into(),
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let value: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), value, op, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ashape.len() != 2 || bshape != vec![ashape[1]] {
            return Err(NnError::ShapeMismatch { context: "add_bias".into(), a: ashape, b: bshape });
        }
        let k = ashape[1];
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(self.nodes[bias.0].value.iter()) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(ashape, value, Op::AddBias(a, bias), needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Scale(a, c), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (m, p) = mat_shape(self.shape(a), "matmul lhs")?;
        let (p2, n) = mat_shape(self.shape(b), "matmul rhs")?;
        if p != p2 {
            return Err(NnError::ShapeMismatch {
                context: "matmul".into(),
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for k in 0..p {
                    let aik = av[i * p + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bb) in orow.iter_mut().zip(brow) {
                        *o += aik * bb;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// `a' * b`: contracts over the leading (row) dimension.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (p, m) = mat_shape(self.shape(a), "matmul_tn lhs")?;
        let (p2, n) = mat_shape(self.shape(b), "matmul_tn rhs")?;
        if p != p2 {
            return Err(NnError::ShapeMismatch {
                context: "matmul_tn".into(),
                a: self.shape(a).to_vec(),
                b: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for r in 0..p {
                let arow = &av[r * m..(r + 1) * m];
                let brow = &bv[r * n..(r + 1) * n];
                for (i, &ai) in arow.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bb) in orow.iter_mut().zip(brow) {
                        *o += ai * bb;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMulTN(a, b), needs))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Tanh(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), value, Op::Relu(a), needs)
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).to_vec();
        self.push(self.nodes[a.0].shape.clone(), value, Op::StopGrad(a), false)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NnError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(NnError::ShapeMismatch {
                context: "reshape".into(),
                a: self.shape(a).to_vec(),
                b: shape,
            });
        }
        let value = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, value, Op::Reshape(a), needs))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, NnError> {
        if rows.is_empty() {
            return Err(NnError::BadLayer("stack_rows of empty list".into()));
        }
        let k = self.value(rows[0]).len();
        let mut value = Vec::with_capacity(rows.len() * k);
        let mut needs = false;
        for &r in rows {
            if self.value(r).len() != k {
                return Err(NnError::ShapeMismatch {
                    context: "stack_rows".into(),
                    a: vec![k],
                    b: self.shape(r).to_vec(),
                });
            }
            value.extend_from_slice(self.value(r));
            needs |= self.needs(r);
        }
        Ok(self.push(vec![rows.len(), k], value, Op::StackRows(rows.to_vec()), needs))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(NnError::ShapeMismatch { context: "conv2d".into(), a: xs, b: ws });
        }
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if self.shape(bias) != [co] || h < kh || wd < kw {
            return Err(NnError::ShapeMismatch {
                context: "conv2d bias/kernel".into(),
                a: self.shape(bias).to_vec(),
                b: ws,
            });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = vec![0.0; b * co * oh * ow];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(bias);
            for bi in 0..b {
                for c in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bv[c];
                            for ic in 0..ci {
                                for ky in 0..kh {
                                    let xrow = (bi * ci + ic) * h * wd + (oy * stride + ky) * wd;
                                    let wrow = (c * ci + ic) * kh * kw + ky * kw;
                                    for kx in 0..kw {
                                        acc += xv[xrow + ox * stride + kx] * wv[wrow + kx];
                                    }
                                }
                            }
                            out[((bi * co + c) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(vec![b, co, oh, ow], out, Op::Conv2d { x, w, bias, stride }, needs))
    }

    /// Batch statistics (train mode); returns the node plus (mu, var) so the
    /// caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>), NnError> {
        let xs = self.shape(x).to_vec();
        let (b, k) = mat_shape(&xs, "batchnorm")?;
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(NnError::ShapeMismatch {
                context: "batchnorm affine".into(),
                a: xs,
                b: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let mut mu = vec![0.0; k];
        for row in xv.chunks(k) {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= b as f64;
        }
        let mut var = vec![0.0; k];
        for row in xv.chunks(k) {
            for j in 0..k {
                let d = row[j] - mu[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= b as f64;
        }
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(k) {
            for j in 0..k {
                let xhat = (row[j] - mu[j]) / (var[j] + eps).sqrt();
                out.push(gv[j] * xhat + bv[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            xs,
            out,
            Op::BatchNormTrain { x, gamma, beta, eps, mu: mu.clone(), var: var.clone() },
            needs,
        );
        Ok((id, mu, var))
    }

    /// Running statistics (eval mode); `mean`/`var` are constants.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<NodeId, NnError> {
        let xs = self.shape(x).to_vec();
        let (_b, k) = mat_shape(&xs, "batchnorm_eval")?;
        if mean.len() != k || var.len() != k {
            return Err(NnError::ShapeMismatch {
                context: "batchnorm_eval stats".into(),
                a: xs,
                b: vec![mean.len(), var.len()],
            });
        }
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(k) {
            for j in 0..k {
                out.push(gv[j] * (row[j] - mean[j]) / (var[j] + eps).sqrt() + bv[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xs,
            out,
            Op::BatchNormEval { x, gamma, beta, eps, mean: mean.to_vec(), var: var.to_vec() },
            needs,
        ))
    }

    /// Mean over samples and over all (j,l) of
    /// (fu_j fu_l - delta_jl)(fv_j fv_l - delta_jl); both inputs (b, k).
    pub fn outer_delta_product(&mut self, fu: NodeId, fv: NodeId) -> Result<NodeId, NnError> {
        let (b, k) = mat_shape(self.shape(fu), "outer_delta_product")?;
        if self.shape(fv) != [b, k] {
            return Err(NnError::ShapeMismatch {
                context: "outer_delta_product".into(),
                a: self.shape(fu).to_vec(),
                b: self.shape(fv).to_vec(),
            });
        }
        let fuv = self.value(fu);
        let fvv = self.value(fv);
        let mut total = 0.0;
        for i in 0..b {
            let u = &fuv[i * k..(i + 1) * k];
            let v = &fvv[i * k..(i + 1) * k];
            for j in 0..k {
                for l in 0..k {
                    let delta = if j == l { 1.0 } else { 0.0 };
                    total += (u[j] * u[l] - delta) * (v[j] * v[l] - delta);
                }
            }
        }
        total /= (b * k * k) as f64;
        let needs = self.needs(fu) || self.needs(fv);
        Ok(self.push(vec![1], vec![total], Op::OuterDeltaProduct { fu, fv }, needs))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_seeded(loss, &[1.0])
    }

    /// Reverse sweep seeding an arbitrary upstream gradient at `output`.
    pub fn backward_seeded(&self, output: NodeId, seed: &[f64]) -> Result<GradStore, NnError> {
        if seed.len() != self.value(output).len() {
            return Err(NnError::ShapeMismatch {
                context: "backward seed".into(),
                a: self.shape(output).to_vec(),
                b: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.to_vec());
        let mut out = GradStore::new();
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let acc = |graph: &Graph, grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, add: &dyn Fn(&mut [f64])| {
                if !graph.needs(id) {
                    return;
                }
                let slot = grads[id.0]
                    .get_or_insert_with(|| vec![0.0; graph.value(id).len()]);
                add(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    let entry = out.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (e, gi) in entry.iter_mut().zip(&g) {
                        *e += gi;
                    }
                }
                Op::Embed { table, indices } => {
                    let k = self.shape(*table)[1];
                    acc(self, &mut grads, *table, &|slot: &mut [f64]| {
                        for (row, &ix) in indices.iter().enumerate() {
                            for j in 0..k {
                                slot[ix * k + j] += g[row * k + j];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s += gi;
                        }
                    });
                    acc(self, &mut grads, *b, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s += gi;
                        }
                    });
                }
                Op::AddBias(a, bias) => {
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s += gi;
                        }
                    });
                    let k = self.value(*bias).len();
                    acc(self, &mut grads, *bias, &|slot: &mut [f64]| {
                        for (i, gi) in g.iter().enumerate() {
                            slot[i % k] += gi;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s += gi;
                        }
                    });
                    acc(self, &mut grads, *b, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s -= gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).to_vec();
                    let bv = self.value(*b).to_vec();
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for i in 0..slot.len() {
                            slot[i] += g[i] * bv[i];
                        }
                    });
                    acc(self, &mut grads, *b, &|slot: &mut [f64]| {
                        for i in 0..slot.len() {
                            slot[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s += gi * c;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, p) = mat_shape(self.shape(*a), "bw").unwrap();
                    let n = self.shape(*b)[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // dA = G B', dB = A' G
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for i in 0..m {
                            for k in 0..p {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[k * n + j];
                                }
                                slot[i * p + k] += s;
                            }
                        }
                    });
                    acc(self, &mut grads, *b, &|slot: &mut [f64]| {
                        for k in 0..p {
                            for i in 0..m {
                                let aik = av[i * p + k];
                                if aik == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    slot[k * n + j] += aik * g[i * n + j];
                                }
                            }
                        }
                    });
                }
                Op::MatMulTN(a, b) => {
                    let (p, m) = mat_shape(self.shape(*a), "bw").unwrap();
                    let n = self.shape(*b)[1];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // y = A' B: dA = B G', dB = A G
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for r in 0..p {
                            for i in 0..m {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += bv[r * n + j] * g[i * n + j];
                                }
                                slot[r * m + i] += s;
                            }
                        }
                    });
                    acc(self, &mut grads, *b, &|slot: &mut [f64]| {
                        for r in 0..p {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[r * m + i] * g[i * n + j];
                                }
                                slot[r * n + j] += s;
                            }
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yv = &node.value;
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for i in 0..slot.len() {
                            slot[i] += g[i] * (1.0 - yv[i] * yv[i]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for i in 0..slot.len() {
                            if xv[i] > 0.0 {
                                slot[i] += g[i];
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, bias, stride } => {
                    let xs = self.shape(*x).to_vec();
                    let ws = self.shape(*w).to_vec();
                    let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                    let s = *stride;
                    let oh = (h - kh) / s + 1;
                    let ow = (wd - kw) / s + 1;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    acc(self, &mut grads, *bias, &|slot: &mut [f64]| {
                        for bi in 0..b {
                            for c in 0..co {
                                let base = (bi * co + c) * oh * ow;
                                slot[c] += g[base..base + oh * ow].iter().sum::<f64>();
                            }
                        }
                    });
                    acc(self, &mut grads, *w, &|slot: &mut [f64]| {
                        for bi in 0..b {
                            for c in 0..co {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let go = g[((bi * co + c) * oh + oy) * ow + ox];
                                        if go == 0.0 {
                                            continue;
                                        }
                                        for ic in 0..ci {
                                            for ky in 0..kh {
                                                let xrow =
                                                    (bi * ci + ic) * h * wd + (oy * s + ky) * wd;
                                                let wrow = (c * ci + ic) * kh * kw + ky * kw;
                                                for kx in 0..kw {
                                                    slot[wrow + kx] +=
                                                        go * xv[xrow + ox * s + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    acc(self, &mut grads, *x, &|slot: &mut [f64]| {
                        for bi in 0..b {
                            for c in 0..co {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let go = g[((bi * co + c) * oh + oy) * ow + ox];
                                        if go == 0.0 {
                                            continue;
                                        }
                                        for ic in 0..ci {
                                            for ky in 0..kh {
                                                let xrow =
                                                    (bi * ci + ic) * h * wd + (oy * s + ky) * wd;
                                                let wrow = (c * ci + ic) * kh * kw + ky * kw;
                                                for kx in 0..kw {
                                                    slot[xrow + ox * s + kx] +=
                                                        go * wv[wrow + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::BatchNormTrain { x, gamma, beta, eps, mu, var } => {
                    let (b, k) = mat_shape(self.shape(*x), "bw").unwrap();
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let bf = b as f64;
                    // xhat per entry
                    let mut xhat = vec![0.0; b * k];
                    for i in 0..b {
                        for j in 0..k {
                            xhat[i * k + j] = (xv[i * k + j] - mu[j]) / (var[j] + eps).sqrt();
                        }
                    }
                    acc(self, &mut grads, *beta, &|slot: &mut [f64]| {
                        for i in 0..b {
                            for j in 0..k {
                                slot[j] += g[i * k + j];
                            }
                        }
                    });
                    acc(self, &mut grads, *gamma, &|slot: &mut [f64]| {
                        for i in 0..b {
                            for j in 0..k {
                                slot[j] += g[i * k + j] * xhat[i * k + j];
                            }
                        }
                    });
                    acc(self, &mut grads, *x, &|slot: &mut [f64]| {
                        // means of dxhat and dxhat*xhat per feature
                        let mut m1 = vec![0.0; k];
                        let mut m2 = vec![0.0; k];
                        for i in 0..b {
                            for j in 0..k {
                                let dxh = g[i * k + j] * gv[j];
                                m1[j] += dxh;
                                m2[j] += dxh * xhat[i * k + j];
                            }
                        }
                        for j in 0..k {
                            m1[j] /= bf;
                            m2[j] /= bf;
                        }
                        for i in 0..b {
                            for j in 0..k {
                                let dxh = g[i * k + j] * gv[j];
                                slot[i * k + j] += (dxh - m1[j] - xhat[i * k + j] * m2[j])
                                    / (var[j] + eps).sqrt();
                            }
                        }
                    });
                }
                Op::BatchNormEval { x, gamma, beta, eps, mean, var } => {
                    let (b, k) = mat_shape(self.shape(*x), "bw").unwrap();
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    acc(self, &mut grads, *beta, &|slot: &mut [f64]| {
                        for i in 0..b {
                            for j in 0..k {
                                slot[j] += g[i * k + j];
                            }
                        }
                    });
                    acc(self, &mut grads, *gamma, &|slot: &mut [f64]| {
                        for i in 0..b {
                            for j in 0..k {
                                let xh = (xv[i * k + j] - mean[j]) / (var[j] + eps).sqrt();
                                slot[j] += g[i * k + j] * xh;
                            }
                        }
                    });
                    acc(self, &mut grads, *x, &|slot: &mut [f64]| {
                        for i in 0..b {
                            for j in 0..k {
                                slot[i * k + j] += g[i * k + j] * gv[j] / (var[j] + eps).sqrt();
                            }
                        }
                    });
                }
                Op::StopGrad(_) => {}
                Op::Sum(a) => {
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for s in slot.iter_mut() {
                            *s += g[0];
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(self, &mut grads, *a, &|slot: &mut [f64]| {
                        for (s, gi) in slot.iter_mut().zip(&g) {
                            *s += gi;
                        }
                    });
                }
                Op::StackRows(rows) => {
                    let k = node.shape[1];
                    for (r, id) in rows.iter().enumerate() {
                        let gr = g[r * k..(r + 1) * k].to_vec();
                        acc(self, &mut grads, *id, &|slot: &mut [f64]| {
                            for (s, gi) in slot.iter_mut().zip(&gr) {
                                *s += gi;
                            }
                        });
                    }
                }
                Op::OuterDeltaProduct { fu, fv } => {
                    let (b, k) = mat_shape(self.shape(*fu), "bw").unwrap();
                    let fuv = self.value(*fu);
                    let fvv = self.value(*fv);
                    let norm = g[0] / (b * k * k) as f64;
                    acc(self, &mut grads, *fu, &|slot: &mut [f64]| {
                        for i in 0..b {
                            let u = &fuv[i * k..(i + 1) * k];
                            let v = &fvv[i * k..(i + 1) * k];
                            for a in 0..k {
                                let mut s = 0.0;
                                for l in 0..k {
                                    let delta = if a == l { 1.0 } else { 0.0 };
                                    s += u[l] * (v[a] * v[l] - delta);
                                }
                                slot[i * k + a] += 2.0 * norm * s;
                            }
                        }
                    });
                    acc(self, &mut grads, *fv, &|slot: &mut [f64]| {
                        for i in 0..b {
                            let u = &fuv[i * k..(i + 1) * k];
                            let v = &fvv[i * k..(i + 1) * k];
                            for a in 0..k {
                                let mut s = 0.0;
                                for l in 0..k {
                                    let delta = if a == l { 1.0 } else { 0.0 };
                                    s += v[l] * (u[a] * u[l] - delta);
                                }
                                slot[i * k + a] += 2.0 * norm * s;
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

fn mat_shape(shape: &[usize], context: &str) -> Result<(usize, usize), NnError> {
    if shape.len() != 2 {
        return Err(NnError::ShapeMismatch {
            context: context.into(),
            a: shape.to_vec(),
            b: vec![],
        });
    }
    Ok((shape[0], shape[1]))
}
