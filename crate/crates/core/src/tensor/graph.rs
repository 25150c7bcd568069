//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns a flat arena of nodes recorded in forward order. Each op
//! appends one node holding its computed value plus the information backward
//! needs (input ids, saved indices, dropout masks). Parameter leaves snapshot
//! the store value at registration time and remember the parameter name so
//! `backward` can accumulate into the store's gradient slots.
//!
//! Gradient accumulation order is fixed by node id, so repeated runs over the
//! same inputs are bit-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::store::ParamStore;
use super::{shape_err, Tensor, TensorError};

/// Handle to a node in one [`Graph`]. Ids from different graphs must not mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    MeanRows { a: NodeId },
    Windows { a: NodeId, width: usize },
    MaxRows { a: NodeId, argmax: Vec<usize> },
    Relu { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    CrossEntropy { probs: NodeId, target: usize },
    CrossEntropyLogits { logits: NodeId, target: usize },
    BceWithLogit { logit: NodeId, target: f64 },
    Dropout { a: NodeId, mask: Vec<f64> },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    Concat { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Scale { a: NodeId, factor: f64 },
    Transpose { a: NodeId },
    SumScalars { parts: Vec<NodeId> },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Parameter name for store-registered leaves.
    param: Option<String>,
}

/// One recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: Option<ChaCha8Rng>,
    consumed: bool,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    /// Inference-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Graph { nodes: Vec::new(), train: false, rng: None, consumed: false }
    }

    /// Training-mode graph; `rng` drives dropout masks.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Graph { nodes: Vec::new(), train: true, rng: Some(rng), consumed: false }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, param: None });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Computed value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.val(id)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.val(id).shape()
    }

    /// Constant input leaf. No gradient is reported for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf: snapshots the current store value and remembers the
    /// name so backward can accumulate into the store's gradient slot.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, TensorError> {
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].param = Some(name.to_string());
        Ok(id)
    }

    /// Matrix product. `a` is [m,k] or [k] (treated as one row, giving a
    /// rank-1 result), `b` is [k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (am, ak) = self.val(a).rows_cols();
        let bs = self.val(b).shape();
        if bs.len() != 2 || bs[0] != ak {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.val(a).shape(), bs),
            ));
        }
        let bn = bs[1];
        let mut out = vec![0.0; am * bn];
        let ad = self.val(a).data();
        let bd = self.val(b).data();
        for i in 0..am {
            for k in 0..ak {
                let aik = ad[i * ak + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[k * bn..(k + 1) * bn];
                let orow = &mut out[i * bn..(i + 1) * bn];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let shape = if self.val(a).shape().len() == 1 { vec![bn] } else { vec![am, bn] };
        Ok(self.push(Tensor { shape, data: out }, Op::Matmul { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }))
    }

    /// Adds a rank-1 bias of length `cols` to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (_, cols) = self.val(a).rows_cols();
        let bs = self.val(bias).shape();
        if bs.len() != 1 || bs[0] != cols {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + bias {:?}", self.val(a).shape(), bs),
            ));
        }
        let bd = self.val(bias).data().to_vec();
        let data = self
            .val(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % cols])
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::AddBias { a, bias }))
    }

    /// Gathers rows of a [vocab,dim] table: output row t is `table[ids[t]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let ts = self.val(table).shape();
        if ts.len() != 2 {
            return Err(shape_err("embedding", format!("table {:?} is not rank 2", ts)));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err(
                "embedding",
                format!("token id {} out of range for vocab {}", bad, vocab),
            ));
        }
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id sequence".to_string()));
        }
        let td = self.val(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let value = Tensor { shape: vec![ids.len(), dim], data };
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Column-wise mean over rows: [m,n] -> [n].
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.val(a).shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(shape_err("mean_rows", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let ad = self.val(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += ad[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor { shape: vec![n], data: out }, Op::MeanRows { a }))
    }

    /// Sliding windows over rows: [seq,d] with width w -> [seq-w+1, w*d],
    /// where output row t is the concatenation of input rows t..t+w.
    pub fn windows(&mut self, a: NodeId, width: usize) -> Result<NodeId, TensorError> {
        let s = self.val(a).shape();
        if s.len() != 2 || width == 0 || s[0] < width {
            return Err(shape_err(
                "windows",
                format!("{:?} with window width {}", s, width),
            ));
        }
        let (seq, d) = (s[0], s[1]);
        let steps = seq - width + 1;
        let ad = self.val(a).data();
        let mut data = Vec::with_capacity(steps * width * d);
        for t in 0..steps {
            data.extend_from_slice(&ad[t * d..(t + width) * d]);
        }
        let value = Tensor { shape: vec![steps, width * d], data };
        Ok(self.push(value, Op::Windows { a, width }))
    }

    /// Column-wise max over rows: [m,n] -> [n]. Ties keep the lowest row.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.val(a).shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(shape_err("max_rows", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let ad = self.val(a).data();
        let mut out = ad[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for i in 1..m {
            for j in 0..n {
                let v = ad[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n], data: out }, Op::MaxRows { a, argmax }))
    }

    /// One-dimensional convolution over a [seq,d] sequence: `kernel` is
    /// [w*d, filters], `bias` is [filters]. Composed from `windows`, a matrix
    /// product, and a bias add, so backward needs no dedicated rule.
    pub fn conv1d(
        &mut self,
        a: NodeId,
        kernel: NodeId,
        bias: NodeId,
        width: usize,
    ) -> Result<NodeId, TensorError> {
        let win = self.windows(a, width)?;
        let prod = self.matmul(win, kernel)?;
        self.add_bias(prod, bias)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.val(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.val(a).data().iter().map(|x| x.tanh()).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.val(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Sigmoid { a })
    }

    /// Row-wise softmax with max subtraction; rank 1 is one row.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.val(a).rows_cols();
        let ad = self.val(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            softmax_into(row, &mut data[r * cols..(r + 1) * cols]);
        }
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softmax { a })
    }

    /// Row-wise log-softmax via a stable log-sum-exp.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.val(a).rows_cols();
        let ad = self.val(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::LogSoftmax { a })
    }

    /// Negative log-likelihood of `target` under a rank-1 probability vector.
    pub fn cross_entropy(&mut self, probs: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let s = self.val(probs).shape();
        if s.len() != 1 || target >= s[0] {
            return Err(shape_err(
                "cross_entropy",
                format!("probs {:?}, target {}", s, target),
            ));
        }
        let loss = -self.val(probs).data()[target].ln();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, target }))
    }

    /// Fused softmax + negative log-likelihood on rank-1 logits. Stays finite
    /// for any finite logits, unlike `cross_entropy` on saturated softmax
    /// output, so training losses route through this.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        target: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.val(logits).shape();
        if s.len() != 1 || target >= s[0] {
            return Err(shape_err(
                "cross_entropy_logits",
                format!("logits {:?}, target {}", s, target),
            ));
        }
        let row = self.val(logits).data();
        let loss = log_sum_exp(row) - row[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyLogits { logits, target }))
    }

    /// Binary cross-entropy on a single pre-sigmoid logit, in the stable
    /// max(x,0) - x t + ln(1 + exp(-|x|)) form.
    pub fn bce_with_logit(&mut self, logit: NodeId, target: f64) -> Result<NodeId, TensorError> {
        let s = self.val(logit).shape();
        if s != [1] {
            return Err(shape_err("bce_with_logit", format!("logit shape {:?}", s)));
        }
        let x = self.val(logit).data()[0];
        let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogit { logit, target }))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by 1/(1-p); in eval mode the
    /// input node is returned unchanged.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(shape_err("dropout", format!("rate {} outside [0,1)", p)));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training graph carries an rng");
        let mask: Vec<f64> = (0..self.nodes[a.0].value.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Dropout { a, mask }))
    }

    /// Row-wise layer normalization with learned gain and bias of length
    /// `cols`. Variance is the biased estimate; epsilon is 1e-5.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.val(a).rows_cols();
        if self.val(gain).shape() != [cols] || self.val(bias).shape() != [cols] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.val(a).shape(),
                    self.val(gain).shape(),
                    self.val(bias).shape()
                ),
            ));
        }
        let ad = self.val(a).data();
        let gd = self.val(gain).data();
        let bd = self.val(bias).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv * gd[c] + bd[c];
            }
        }
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { a, gain, bias }))
    }

    /// Concatenates rank-1 tensors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".to_string()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 1 {
                return Err(shape_err("concat", format!("part of shape {:?}", s)));
            }
            data.extend_from_slice(self.val(p).data());
        }
        let value = Tensor { shape: vec![data.len()], data };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts".to_string()));
        }
        let rows = self.val(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("part {:?} against {} rows", s, rows),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.val(p).data();
                data.extend_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor { shape: vec![rows, total], data };
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.val(a).data().iter().map(|x| x * factor).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale { a, factor })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.val(a).shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let ad = self.val(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::Transpose { a }))
    }

    /// Sum of scalar nodes, used to combine per-level losses.
    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("sum_scalars", "no parts".to_string()));
        }
        let mut total = 0.0;
        for &p in parts {
            if self.val(p).shape() != [1] {
                return Err(shape_err(
                    "sum_scalars",
                    format!("part of shape {:?}", self.val(p).shape()),
                ));
            }
            total += self.val(p).data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::SumScalars { parts: parts.to_vec() }))
    }

    /// Scaled dot-product self-attention for one head: softmax(q kᵀ/√d) v
    /// where q, k, v are [seq, d]. Composed from transpose, matmul, scale,
    /// and row softmax.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<NodeId, TensorError> {
        let qs = self.val(q).shape().to_vec();
        for (&part, label) in [(k, "k"), (v, "v")].iter().map(|(p, l)| (p, *l)) {
            if self.val(part).shape() != qs.as_slice() {
                return Err(shape_err(
                    "attention",
                    format!("q {:?} vs {} {:?}", qs, label, self.val(part).shape()),
                ));
            }
        }
        if qs.len() != 2 {
            return Err(shape_err("attention", format!("q {:?} is not rank 2", qs)));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (qs[1] as f64).sqrt());
        let weights = self.softmax(scaled);
        self.matmul(weights, v)
    }

    /// Reverse pass from a scalar loss. Parameter gradients are added into
    /// the store's gradient slots (callers zero them when starting a fresh
    /// accumulation); leaves and params not on a path to the loss contribute
    /// nothing. The graph keeps its values and can still be read afterwards,
    /// but cannot run backward twice.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        self.consumed = true;
        if self.val(loss).shape() != [1] {
            return Err(TensorError::LossNotScalar(self.val(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let up = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    if let Some(name) = &self.nodes[idx].param {
                        store.accumulate_grad(name, &up)?;
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.val(a).rows_cols();
                    let n = self.val(b).shape()[1];
                    let ad = self.val(a).data();
                    let bd = self.val(b).data();
                    // dA = dC Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += up[i * n + j] * bd[kk * n + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    // dB = Aᵀ dC
                    let mut db = vec![0.0; k * n];
                    for kk in 0..k {
                        for i in 0..m {
                            let aik = ad[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += aik * up[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads[a.0], up.clone());
                    accumulate(&mut grads[b.0], up);
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let cols = self.val(bias).shape()[0];
                    let mut db = vec![0.0; cols];
                    for (i, g) in up.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    accumulate(&mut grads[a.0], up);
                    accumulate(&mut grads[bias.0], db);
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let dim = self.val(table).shape()[1];
                    let mut dt = vec![0.0; self.val(table).numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += up[t * dim + j];
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::MeanRows { a } => {
                    let a = *a;
                    let (m, n) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                    let inv = 1.0 / m as f64;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = up[j] * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Windows { a, width } => {
                    let (a, width) = (*a, *width);
                    let (seq, d) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                    let steps = seq - width + 1;
                    let mut da = vec![0.0; seq * d];
                    for t in 0..steps {
                        for off in 0..width * d {
                            da[t * d + off] += up[t * width * d + off];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::MaxRows { a, argmax } => {
                    let a = *a;
                    let n = self.val(a).shape()[1];
                    let mut da = vec![0.0; self.val(a).numel()];
                    for (j, &row) in argmax.iter().enumerate() {
                        da[row * n + j] = up[j];
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let da = self
                        .val(a)
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(&x, g)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], da);
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let da = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(&y, g)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[a.0], da);
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    let da = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(&y, g)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[a.0], da);
                }
                Op::Softmax { a } => {
                    let a = *a;
                    let (rows, cols) = self.val(a).rows_cols();
                    let y = self.nodes[idx].value.data();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &up[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..cols {
                            da[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LogSoftmax { a } => {
                    let a = *a;
                    let (rows, cols) = self.val(a).rows_cols();
                    let y = self.nodes[idx].value.data();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &up[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            da[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::CrossEntropy { probs, target } => {
                    let (probs, target) = (*probs, *target);
                    let p = self.val(probs).data();
                    let mut da = vec![0.0; p.len()];
                    da[target] = -up[0] / p[target];
                    accumulate(&mut grads[probs.0], da);
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let row = self.val(logits).data();
                    let mut da = vec![0.0; row.len()];
                    softmax_into(row, &mut da);
                    da[target] -= 1.0;
                    for g in &mut da {
                        *g *= up[0];
                    }
                    accumulate(&mut grads[logits.0], da);
                }
                Op::BceWithLogit { logit, target } => {
                    let (logit, target) = (*logit, *target);
                    let x = self.val(logit).data()[0];
                    accumulate(&mut grads[logit.0], vec![(sigmoid(x) - target) * up[0]]);
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    let da = mask.iter().zip(&up).map(|(m, g)| m * g).collect();
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let (a, gain, bias) = (*a, *gain, *bias);
                    let (rows, cols) = self.val(a).rows_cols();
                    let ad = self.val(a).data();
                    let gd = self.val(gain).data();
                    let mut da = vec![0.0; rows * cols];
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &ad[r * cols..(r + 1) * cols];
                        let gr = &up[r * cols..(r + 1) * cols];
                        let (mean, var) = mean_var(row);
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gd).map(|(g, gv)| g * gv).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(dx, xh)| dx * xh)
                            .sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            da[r * cols + c] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                            dg[c] += gr[c] * xhat[c];
                            db[c] += gr[c];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[gain.0], dg);
                    accumulate(&mut grads[bias.0], db);
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.val(p).numel();
                        accumulate(&mut grads[p.0], up[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = self.val(parts[0]).shape()[0];
                    let total: usize =
                        parts.iter().map(|&p| self.val(p).shape()[1]).sum();
                    let mut off = 0;
                    for p in parts {
                        let w = self.val(p).shape()[1];
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&up[r * total + off..r * total + off + w]);
                        }
                        accumulate(&mut grads[p.0], dp);
                        off += w;
                    }
                }
                Op::Scale { a, factor } => {
                    let (a, factor) = (*a, *factor);
                    let da = up.iter().map(|g| g * factor).collect();
                    accumulate(&mut grads[a.0], da);
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let (m, n) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                    let mut da = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] = up[j * m + i];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::SumScalars { parts } => {
                    let parts = parts.clone();
                    for p in parts {
                        accumulate(&mut grads[p.0], up.clone());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
