//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of every node that depends on a trainable input. Tapes are built
//! fresh for each forward pass and dropped afterwards.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{matmul_dims, AxisLayout, Tensor};
use crate::error::{contract_err, shape_err, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
pub struct Dropout {
    p: f32,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f32, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng }
    }

    fn mask(&mut self, len: usize) -> Vec<f32> {
        let keep = 1.0 / (1.0 - self.p);
        (0..len).map(|_| if self.rng.random::<f32>() < self.p { 0.0 } else { keep }).collect()
    }

    pub fn is_active(&self) -> bool {
        self.p > 0.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow { a: Var, bias: Var },
    Gelu(Var),
    Sigmoid(Var),
    Softmax { a: Var, layout: AxisLayout },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f32>, rstds: Vec<f32> },
    Attention(Box<AttentionRecord>),
    Sum(Var),
    Mean(Var),
    MeanRows { a: Var, rows: usize, cols: usize },
    ConcatRows(Var, Var),
    GatherRows { a: Var, idx: Vec<usize>, cols: usize },
    Reshape(Var),
    Conv1d(Box<ConvRecord>),
    Dropout { a: Var, mask: Vec<f32> },
    WeightedMse { pred: Var, target: Vec<f32>, weights: Vec<f32>, total: f64 },
    Bce { p: Var, labels: Vec<f32> },
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
    tokens: usize,
    /// Softmax output per head, `heads × tokens × tokens`.
    probs: Vec<f32>,
    /// Dropout mask over `probs`, when training.
    mask: Option<Vec<f32>>,
}

struct ConvRecord {
    x: Var,
    w: Var,
    b: Var,
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    kernel: usize,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, Var)>,
}

impl Grads {
    /// Gradient with respect to `v`, if `v` was reachable and trainable.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` pairs for every trainable parameter that was
    /// used in the pass, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f32])> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on record")
    }

    /// Records a tensor as an input; it is differentiated when
    /// `t.requires_grad()` is set.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-trainable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("constant of shape {shape:?} given {} values", data.len()));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Records a model parameter once per tape; later calls with the same id
    /// return the first handle so gradients from every use accumulate.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, t.requires_grad());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what} needs equal shapes, got {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, c), ng)
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap();
        if self.shape(bias) != [cols] {
            return shape_err(format!(
                "row bias of shape {:?} does not fit rows of {:?}",
                self.shape(bias),
                self.shape(a)
            ));
        }
        let b = self.value(bias);
        let value = self.value(a).chunks(cols).flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let ng = self.needs(&[a, bias]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::AddRow { a, bias }, ng))
    }

    /// `x · w + b` for `x[rows×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let layout = AxisLayout::new(self.shape(a), axis)?;
        let mut value = self.value(a).to_vec();
        layout.softmax_in_place(&mut value);
        let ng = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Softmax { a, layout }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layer_norm over {:?} needs gamma/beta of shape [{d}], got {:?} and {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return contract_err("layer_norm eps must be positive");
        }
        let mut value = vec![0.0; self.value(x).len()];
        let (means, rstds) =
            kernels::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), eps, &mut value);
        let ng = self.needs(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::LayerNorm { x, gamma, beta, means, rstds }, ng))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k` and `v` are `tokens × (heads·head_dim)` with head `h` occupying
    /// columns `h·head_dim .. (h+1)·head_dim`. The result has the same layout.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let width = heads * head_dim;
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || shape[1] != width || self.shape(k) != shape || self.shape(v) != shape {
            return shape_err(format!(
                "attention with {heads} heads of size {head_dim} needs q/k/v of shape [tokens, {width}], got {:?}, {:?}, {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        let n = shape[0];
        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut probs = vec![0.0f32; heads * n * n];
        let mut out = vec![0.0f32; n * width];
        let mut mask = dropout.filter(|d| d.is_active()).map(|d| d.mask(heads * n * n));

        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut qh = vec![0.0f32; n * head_dim];
        let mut kh = vec![0.0f32; n * head_dim];
        let mut vh = vec![0.0f32; n * head_dim];
        let mut oh = vec![0.0f32; n * head_dim];
        for h in 0..heads {
            extract_head(qv, &mut qh, width, h, head_dim);
            extract_head(kv, &mut kh, width, h, head_dim);
            extract_head(vv, &mut vh, width, h, head_dim);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            kernels::matmul_nt_acc(&qh, &kh, p, n, head_dim, n);
            p.iter_mut().for_each(|s| *s *= scale);
            kernels::softmax_rows(p, n);
            oh.iter_mut().for_each(|o| *o = 0.0);
            match mask.as_mut() {
                Some(m) => {
                    let dropped: Vec<f32> = p.iter().zip(&m[h * n * n..(h + 1) * n * n]).map(|(a, b)| a * b).collect();
                    kernels::matmul_acc(&dropped, &vh, &mut oh, n, n, head_dim);
                }
                None => kernels::matmul_acc(p, &vh, &mut oh, n, n, head_dim),
            }
            insert_head(&oh, &mut out, width, h, head_dim);
        }
        let ng = self.needs(&[q, k, v]);
        let rec = AttentionRecord { q, k, v, heads, head_dim, tokens: n, probs, mask };
        Ok(self.push(shape, out, Op::Attention(Box::new(rec)), ng))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node,
    /// laid out `heads × tokens × tokens`, before dropout.
    pub fn attention_probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::Attention(rec) => Some(&rec.probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        let ng = self.needs(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s = (vals.iter().map(|&x| x as f64).sum::<f64>() / vals.len() as f64) as f32;
        let ng = self.needs(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    /// Averages the rows of a matrix into a single row `[cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return shape_err(format!("mean_rows expects a matrix, got {s:?}")),
        };
        let mut acc = vec![0.0f64; cols];
        for row in self.value(a).chunks(cols) {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let value = acc.into_iter().map(|s| (s / rows as f64) as f32).collect();
        let ng = self.needs(&[a]);
        Ok(self.push(vec![cols], value, Op::MeanRows { a, rows, cols }, ng))
    }

    /// Stacks the rows of `b` below the rows of `a`. A rank-1 `b` counts as
    /// one row.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap();
        let b_cols = *self.shape(b).last().unwrap();
        if self.shape(a).len() != 2 || b_cols != cols || self.shape(b).len() > 2 {
            return shape_err(format!("concat_rows cannot stack {:?} under {:?}", self.shape(b), self.shape(a)));
        }
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let rows = value.len() / cols;
        let ng = self.needs(&[a, b]);
        Ok(self.push(vec![rows, cols], value, Op::ConcatRows(a, b), ng))
    }

    /// Selects rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return shape_err(format!("gather_rows expects a matrix, got {s:?}")),
        };
        if idx.is_empty() {
            return shape_err("gather_rows needs at least one index");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return shape_err(format!("row index {bad} out of range for {rows} rows"));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            value.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(vec![idx.len(), cols], value, Op::GatherRows { a, idx: idx.to_vec(), cols }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    /// Same-padded 1-D convolution over `x[batch, cin, len]` with weights
    /// `w[cout, cin, kernel]` (odd kernel) and bias `b[cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, cin, len) = match self.shape(x) {
            [bt, c, l] => (*bt, *c, *l),
            s => return shape_err(format!("conv1d input must be [batch, channels, len], got {s:?}")),
        };
        let (cout, wcin, kernel) = match self.shape(w) {
            [o, i, k] => (*o, *i, *k),
            s => return shape_err(format!("conv1d weight must be [out, in, kernel], got {s:?}")),
        };
        if wcin != cin || kernel % 2 == 0 || self.shape(b) != [cout] {
            return shape_err(format!(
                "conv1d weight {:?} / bias {:?} incompatible with input {:?} (kernel must be odd)",
                self.shape(w),
                self.shape(b),
                self.shape(x)
            ));
        }
        let pad = kernel / 2;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0f32; batch * cout * len];
        for bi in 0..batch {
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                orow.iter_mut().for_each(|o| *o = bv[co]);
                for ci in 0..cin {
                    let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for kk in 0..kernel {
                        let wk = wv[(co * cin + ci) * kernel + kk];
                        for t in 0..len {
                            let src = t + kk;
                            if src >= pad && src - pad < len {
                                orow[t] += wk * xrow[src - pad];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[x, w, b]);
        let rec = ConvRecord { x, w, b, batch, cin, cout, len, kernel };
        Ok(self.push(vec![batch, cout, len], out, Op::Conv1d(Box::new(rec)), ng))
    }

    /// Inverted dropout; identity when `dropout` is absent or inactive.
    pub fn dropout(&mut self, a: Var, dropout: Option<&mut Dropout>) -> Var {
        let Some(d) = dropout.filter(|d| d.is_active()) else {
            return a;
        };
        let mask = d.mask(self.value(a).len());
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.needs(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Dropout { a, mask }, ng)
    }

    /// `Σ wᵢ (predᵢ − targetᵢ)² / Σ wᵢ`
    pub fn weighted_mse(&mut self, pred: Var, target: &[f32], weights: &[f32]) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n {
            return shape_err(format!(
                "weighted_mse over {n} predictions given {} targets and {} weights",
                target.len(),
                weights.len()
            ));
        }
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        if total <= 0.0 {
            return contract_err("weighted_mse needs positive total weight");
        }
        let acc: f64 = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| {
                let d = p as f64 - t as f64;
                w as f64 * d * d
            })
            .sum();
        let ng = self.needs(&[pred]);
        let op = Op::WeightedMse { pred, target: target.to_vec(), weights: weights.to_vec(), total };
        Ok(self.push(vec![1], vec![(acc / total) as f32], op, ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels,
    /// with `p` clamped to `[1e-7, 1 − 1e-7]`.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[f32]) -> Result<Var> {
        let probs = self.value(p);
        if probs.len() != labels.len() {
            return shape_err(format!(
                "binary_cross_entropy over {} probabilities given {} labels",
                probs.len(),
                labels.len()
            ));
        }
        let loss = crate::finetune::binary_cross_entropy(probs, labels) as f32;
        let ng = self.needs(&[p]);
        Ok(self.push(vec![1], vec![loss], Op::Bce { p, labels: labels.to_vec() }, ng))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect::<Vec<_>>();
        let mut params = params;
        params.sort_by_key(|&(_, v)| v.0);
        Ok(Grads { by_node: grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, bv, ga, *m, *n, *k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av, g, gb, *k, *m, *n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, &d)| *s -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, &d), &y) in s.iter_mut().zip(g).zip(bv) {
                        *s += d * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((s, &d), &x) in s.iter_mut().zip(g).zip(av) {
                        *s += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &d)| *s += c * d);
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    let cols = s.len();
                    for row in g.chunks(cols) {
                        s.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, &d), &x) in s.iter_mut().zip(g).zip(av) {
                        *s += d * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, &d), &y) in s.iter_mut().zip(g).zip(&node.value) {
                        *s += d * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { a, layout } => {
                if let Some(s) = self.slot(grads, *a) {
                    layout.softmax_backward(&node.value, g, s);
                }
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                let d = means.len().max(1);
                let d = node.value.len() / d;
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                if let Some(s) = self.slot(grads, *gamma) {
                    for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            s[j] += gr[j] * (xr[j] - means[r]) * rstds[r];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(s, &v)| *s += v);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut xhat = vec![0.0f32; d];
                    let mut dxhat = vec![0.0f32; d];
                    for (r, ((xr, gr), sr)) in xv.chunks(d).zip(g.chunks(d)).zip(s.chunks_mut(d)).enumerate() {
                        let mut mean_dxhat = 0.0f64;
                        let mut mean_dxhat_xhat = 0.0f64;
                        for j in 0..d {
                            xhat[j] = (xr[j] - means[r]) * rstds[r];
                            dxhat[j] = gr[j] * gv[j];
                            mean_dxhat += dxhat[j] as f64;
                            mean_dxhat_xhat += (dxhat[j] * xhat[j]) as f64;
                        }
                        let mean_dxhat = (mean_dxhat / d as f64) as f32;
                        let mean_dxhat_xhat = (mean_dxhat_xhat / d as f64) as f32;
                        for j in 0..d {
                            sr[j] += rstds[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let d = g[0] / s.len() as f32;
                    s.iter_mut().for_each(|s| *s += d);
                }
            }
            Op::MeanRows { a, rows, cols } => {
                if let Some(s) = self.slot(grads, *a) {
                    let inv = 1.0 / *rows as f32;
                    for row in s.chunks_mut(*cols) {
                        row.iter_mut().zip(g).for_each(|(s, &d)| *s += d * inv);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(&g[..split]).for_each(|(s, &d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(&g[split..]).for_each(|(s, &d)| *s += d);
                }
            }
            Op::GatherRows { a, idx, cols } => {
                if let Some(s) = self.slot(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut s[i * cols..(i + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(s, &d)| *s += d);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
                }
            }
            Op::Conv1d(rec) => self.conv1d_backward(rec, g, grads),
            Op::Dropout { a, mask } => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((s, &d), &m) in s.iter_mut().zip(g).zip(mask) {
                        *s += d * m;
                    }
                }
            }
            Op::WeightedMse { pred, target, weights, total } => {
                let pv = self.value(*pred);
                if let Some(s) = self.slot(grads, *pred) {
                    let c = 2.0 * g[0] as f64 / total;
                    for i in 0..s.len() {
                        s[i] += (c * weights[i] as f64 * (pv[i] as f64 - target[i] as f64)) as f32;
                    }
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                if let Some(s) = self.slot(grads, *p) {
                    let n = labels.len() as f64;
                    for i in 0..s.len() {
                        let pr = pv[i] as f64;
                        if !(crate::finetune::PROB_CLAMP..=1.0 - crate::finetune::PROB_CLAMP).contains(&pr) {
                            continue;
                        }
                        let y = labels[i] as f64;
                        let d = (-y / pr + (1.0 - y) / (1.0 - pr)) / n;
                        s[i] += (g[0] as f64 * d) as f32;
                    }
                }
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let AttentionRecord { q, k, v, heads, head_dim, tokens: n, probs, mask } = rec;
        let (heads, dh, n) = (*heads, *head_dim, *n);
        let width = heads * dh;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
        let mut dq = vec![0.0f32; n * width];
        let mut dk = vec![0.0f32; n * width];
        let mut dv = vec![0.0f32; n * width];

        let mut qh = vec![0.0f32; n * dh];
        let mut kh = vec![0.0f32; n * dh];
        let mut vh = vec![0.0f32; n * dh];
        let mut goh = vec![0.0f32; n * dh];
        let mut dqh = vec![0.0f32; n * dh];
        let mut dkh = vec![0.0f32; n * dh];
        let mut dvh = vec![0.0f32; n * dh];
        let mut dpd = vec![0.0f32; n * n];
        let mut ds = vec![0.0f32; n * n];
        for h in 0..heads {
            extract_head(qv, &mut qh, width, h, dh);
            extract_head(kv, &mut kh, width, h, dh);
            extract_head(vv, &mut vh, width, h, dh);
            extract_head(g, &mut goh, width, h, dh);
            let p = &probs[h * n * n..(h + 1) * n * n];
            let hm = mask.as_ref().map(|m| &m[h * n * n..(h + 1) * n * n]);

            // out = Pd · V
            dpd.iter_mut().for_each(|x| *x = 0.0);
            kernels::matmul_nt_acc(&goh, &vh, &mut dpd, n, dh, n);
            dvh.iter_mut().for_each(|x| *x = 0.0);
            match hm {
                Some(m) => {
                    let dropped: Vec<f32> = p.iter().zip(m).map(|(a, b)| a * b).collect();
                    kernels::matmul_tn_acc(&dropped, &goh, &mut dvh, n, n, dh);
                    dpd.iter_mut().zip(m).for_each(|(d, &mv)| *d *= mv);
                }
                None => kernels::matmul_tn_acc(p, &goh, &mut dvh, n, n, dh),
            }

            ds.iter_mut().for_each(|x| *x = 0.0);
            kernels::softmax_rows_backward(p, &dpd, &mut ds, n);
            ds.iter_mut().for_each(|x| *x *= scale);

            dqh.iter_mut().for_each(|x| *x = 0.0);
            kernels::matmul_acc(&ds, &kh, &mut dqh, n, n, dh);
            dkh.iter_mut().for_each(|x| *x = 0.0);
            kernels::matmul_tn_acc(&ds, &qh, &mut dkh, n, n, dh);

            insert_head(&dqh, &mut dq, width, h, dh);
            insert_head(&dkh, &mut dk, width, h, dh);
            insert_head(&dvh, &mut dv, width, h, dh);
        }
        for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
            if let Some(s) = self.slot(grads, var) {
                s.iter_mut().zip(&d).for_each(|(s, &x)| *s += x);
            }
        }
    }

    fn conv1d_backward(&self, rec: &ConvRecord, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let ConvRecord { x, w, b, batch, cin, cout, len, kernel } = *rec;
        let pad = kernel / 2;
        let (xv, wv) = (self.value(x), self.value(w));
        if let Some(s) = self.slot(grads, b) {
            for bi in 0..batch {
                for co in 0..cout {
                    let row = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                    s[co] += row.iter().sum::<f32>();
                }
            }
        }
        if let Some(s) = self.slot(grads, w) {
            for bi in 0..batch {
                for co in 0..cout {
                    let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                    for ci in 0..cin {
                        let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                        for kk in 0..kernel {
                            let mut acc = 0.0f32;
                            for t in 0..len {
                                let src = t + kk;
                                if src >= pad && src - pad < len {
                                    acc += grow[t] * xrow[src - pad];
                                }
                            }
                            s[(co * cin + ci) * kernel + kk] += acc;
                        }
                    }
                }
            }
        }
        if let Some(s) = self.slot(grads, x) {
            for bi in 0..batch {
                for co in 0..cout {
                    let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                    for ci in 0..cin {
                        let srow = &mut s[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                        for kk in 0..kernel {
                            let wk = wv[(co * cin + ci) * kernel + kk];
                            for t in 0..len {
                                let src = t + kk;
                                if src >= pad && src - pad < len {
                                    srow[src - pad] += wk * grow[t];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn extract_head(src: &[f32], dst: &mut [f32], width: usize, h: usize, dh: usize) {
    for (r, row) in dst.chunks_mut(dh).enumerate() {
        row.copy_from_slice(&src[r * width + h * dh..r * width + (h + 1) * dh]);
    }
}

fn insert_head(src: &[f32], dst: &mut [f32], width: usize, h: usize, dh: usize) {
    for (r, row) in src.chunks(dh).enumerate() {
        dst[r * width + h * dh..r * width + (h + 1) * dh].copy_from_slice(row);
    }
}
