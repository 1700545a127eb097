//! Reverse-mode automatic differentiation over flat `f64` buffers.
//!
//! A [`Tape`] records every operation of a forward pass. Calling
//! [`Tape::backward`] replays the tape in reverse and returns the gradient of
//! a scalar output with respect to every node that was created through
//! [`Tape::param`]. Nodes created with [`Tape::constant`] never receive
//! gradients, which is how frozen encoder weights are kept out of training.
//!
//! Tensors are row-major. Two-dimensional ops interpret a shape `[m, n]` as
//! `m` rows of `n` columns; images use `[h * w, c]` (pixel-major HWC) and the
//! transpose convolution uses channel-first `[c, h, w]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{OdgError, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(OdgError::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map `out[i] = sum_k w_k * in[j_k]`, used for resampling.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub in_len: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// Geometry of a 2-D transpose convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTSpec {
    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

/// Index value that makes [`Tape::gather`] emit zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    MeanRows(Var),
    StdRows(Var),
    MixMean(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    Sparse(Var, Arc<SparseMap>),
    ConvT(Var, Var, Var, ConvTSpec, usize, usize),
    LogSoftmax(Var),
    Cosine(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient for `v`, or `None` when no path from the output reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled to `len` when unreachable.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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
        &self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Trainable (or probed) input: receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Fixed input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = mat_dims(&sa);
        let (k2, n) = mat_dims(&sb);
        if k != k2 {
            return Err(OdgError::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.data(a).len() != self.data(b).len() {
            return Err(OdgError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `[m, n] + [n]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.data(row).len();
        let total = self.data(a).len();
        if n == 0 || !total.is_multiple_of(n) {
            return Err(OdgError::Shape(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let rd = self.data(row);
        let data = self.data(a).iter().enumerate().map(|(i, x)| x + rd[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::vector(vec![s]), Op::Sum(a), ng)
    }

    /// Mean over the first axis: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = mat_dims(self.shape(a));
        let d = self.data(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let ng = self.ng(a);
        self.push(Tensor::vector(out), Op::MeanRows(a), ng)
    }

    /// Population standard deviation over the first axis: `[m, n] -> [n]`.
    pub fn std_rows(&mut self, a: Var) -> Var {
        let (m, n) = mat_dims(self.shape(a));
        let d = self.data(a);
        let mean = column_mean(d, m, n);
        let mut var = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let c = d[i * n + j] - mean[j];
                var[j] += c * c;
            }
        }
        let out = var.into_iter().map(|v| (v / m as f64).sqrt()).collect();
        let ng = self.ng(a);
        self.push(Tensor::vector(out), Op::StdRows(a), ng)
    }

    /// `alpha * x + (1 - alpha) * mean_rows(x)` broadcast back over rows.
    pub fn mix_mean(&mut self, a: Var, alpha: f64) -> Var {
        let (m, n) = mat_dims(self.shape(a));
        let d = self.data(a);
        let mean = column_mean(d, m, n);
        let data = d
            .iter()
            .enumerate()
            .map(|(i, x)| alpha * x + (1.0 - alpha) * mean[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor { shape, data }, Op::MixMean(a, alpha), ng)
    }

    /// Stack along the first axis. Vectors of length `n` count as `[1, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| OdgError::Shape("concat_rows of nothing".into()))?;
        let n = mat_dims(self.shape(*first)).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (m, n2) = mat_dims(self.shape(*p));
            if n2 != n {
                return Err(OdgError::Shape(format!("concat_rows width {n2} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.data(*p));
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor { shape: vec![rows, n], data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = mat_dims(self.shape(a));
        let (m2, q) = mat_dims(self.shape(b));
        if m != m2 {
            return Err(OdgError::Shape(format!("concat_cols rows {m} vs {m2}")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ad[i * p..(i + 1) * p]);
            data.extend_from_slice(&bd[i * q..(i + 1) * q]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![m, p + q], data }, Op::ConcatCols(a, b), ng))
    }

    /// `out[i] = a[idx[i]]`, or zero where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(OdgError::Shape(format!("gather {:?} from {} indices", shape, idx.len())));
        }
        let d = self.data(a);
        let mut data = Vec::with_capacity(idx.len());
        for &j in idx.iter() {
            if j == GATHER_ZERO {
                data.push(0.0);
            } else {
                data.push(*d.get(j).ok_or_else(|| OdgError::Shape(format!("gather index {j}")))?);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape, data }, Op::Gather(a, idx), ng))
    }

    pub fn sparse(&mut self, a: Var, map: Arc<SparseMap>, shape: Vec<usize>) -> Result<Var> {
        if map.in_len != self.data(a).len() || shape.iter().product::<usize>() != map.rows.len() {
            return Err(OdgError::Shape(format!(
                "sparse map {}->{} applied to {:?} as {:?}",
                map.in_len,
                map.rows.len(),
                self.shape(a),
                shape
            )));
        }
        let d = self.data(a);
        let data = map.rows.iter().map(|r| r.iter().map(|(j, w)| w * d[*j]).sum()).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape, data }, Op::Sparse(a, map), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(OdgError::Shape(format!("reshape {:?} -> {:?}", self.shape(a), shape)));
        }
        let data = self.data(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor { shape, data }, Op::Reshape(a), ng))
    }

    /// Transpose convolution of `x: [c_in, h, w]` with `w: [c_in, c_out, k, k]`
    /// and bias `b: [c_out]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: ConvTSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != spec.c_in {
            return Err(OdgError::Shape(format!("conv_transpose2d input {:?} for {:?}", xs, spec)));
        }
        let k = spec.kernel;
        if self.data(w).len() != spec.c_in * spec.c_out * k * k || self.data(b).len() != spec.c_out
        {
            return Err(OdgError::Shape(format!("conv_transpose2d weights for {:?}", spec)));
        }
        let (h, wd) = (xs[1], xs[2]);
        let (ho, wo) = (spec.out_size(h), spec.out_size(wd));
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        // columns[j, p] = sum_ci W[ci, j] x[ci, p] with j = (co, ky, kx)
        let cols = conv_t_columns(xd, wdat, spec.c_in, spec.c_out * k * k, h * wd);
        let mut out = vec![0.0; spec.c_out * ho * wo];
        for co in 0..spec.c_out {
            out[co * ho * wo..(co + 1) * ho * wo].iter_mut().for_each(|o| *o = bd[co]);
        }
        for_each_tap(spec, h, wd, ho, wo, |j, p, o| out[o] += cols[j * h * wd + p]);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor { shape: vec![spec.c_out, ho, wo], data: out },
            Op::ConvT(x, w, b, spec, h, wd),
            ng,
        ))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let mx = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + d.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        let data = d.iter().map(|x| x - lse).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(Tensor { shape, data }, Op::LogSoftmax(a), ng)
    }

    /// Cosine similarity of two equally sized tensors, as a length-1 vector.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let c = cosine(self.data(a), self.data(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::vector(vec![c]), Op::Cosine(a, b), ng))
    }

    /// Select a single element as a length-1 vector.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, Arc::new(vec![i]), vec![1])
    }

    /// Select row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = mat_dims(self.shape(a));
        if i >= m {
            return Err(OdgError::Shape(format!("row {i} of {m}")));
        }
        self.gather(a, Arc::new((i * n..(i + 1) * n).collect()), vec![n])
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.data.len()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let len = self.nodes[v.0].value.data.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(self.shape(*a));
                let n = mat_dims(self.shape(*b)).1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                let n = self.data(*r).len();
                self.acc(grads, *r, |gr| {
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v));
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(ad) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let ad = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += gv * x.signum() * f64::from(u8::from(*x != 0.0));
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::MeanRows(a) => {
                let (m, n) = mat_dims(self.shape(*a));
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i % n] / m as f64;
                    }
                });
            }
            Op::StdRows(a) => {
                let (m, n) = mat_dims(self.shape(*a));
                let ad = self.data(*a);
                let mean = column_mean(ad, m, n);
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        let j = i % n;
                        if out[j] > 0.0 {
                            *o += g[j] * (ad[i] - mean[j]) / (m as f64 * out[j]);
                        }
                    }
                });
            }
            Op::MixMean(a, alpha) => {
                let (m, n) = mat_dims(self.shape(*a));
                let gmean = column_mean(g, m, n);
                self.acc(grads, *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += alpha * g[i] + (1.0 - alpha) * gmean[i % n];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    self.acc(grads, *p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = mat_dims(self.shape(*a));
                let q = mat_dims(self.shape(*b)).1;
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        add_into(&mut ga[i * p..(i + 1) * p], &g[i * (p + q)..i * (p + q) + p]);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        add_into(
                            &mut gb[i * q..(i + 1) * q],
                            &g[i * (p + q) + p..(i + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::Gather(a, idx) => {
                self.acc(grads, *a, |ga| {
                    for (gv, &j) in g.iter().zip(idx.iter()) {
                        if j != GATHER_ZERO {
                            ga[j] += gv;
                        }
                    }
                });
            }
            Op::Sparse(a, map) => {
                self.acc(grads, *a, |ga| {
                    for (gv, row) in g.iter().zip(&map.rows) {
                        for (j, w) in row {
                            ga[*j] += w * gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
            }
            Op::ConvT(x, w, b, spec, h, wd) => {
                self.conv_t_backward(*x, *w, *b, *spec, *h, *wd, &node.value.shape, g, grads);
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += gv - y.exp() * total;
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let na = norm(ad).max(NORM_FLOOR);
                let nb = norm(bd).max(NORM_FLOOR);
                let c = out[0];
                self.acc(grads, *a, |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(ad).zip(bd) {
                        *o += g[0] * (y / (na * nb) - c * x / (na * na));
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(ad).zip(bd) {
                        *o += g[0] * (x / (na * nb) - c * y / (nb * nb));
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvTSpec,
        h: usize,
        wd: usize,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let k = spec.kernel;
        let (xd, wdat) = (self.data(x), self.data(w));
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let (n_j, n_p) = (spec.c_out * k * k, h * wd);
        let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wdat.len()] } else { Vec::new() };
        if need_x || need_w {
            let mut gcols = vec![0.0; n_j * n_p];
            for_each_tap(spec, h, wd, ho, wo, |j, p, o| gcols[j * n_p + p] = g[o]);
            for ci in 0..spec.c_in {
                let xrow = &xd[ci * n_p..(ci + 1) * n_p];
                for j in 0..n_j {
                    let grow = &gcols[j * n_p..(j + 1) * n_p];
                    if need_x {
                        let wv = wdat[ci * n_j + j];
                        if wv != 0.0 {
                            gx[ci * n_p..(ci + 1) * n_p].iter_mut().zip(grow).for_each(|(o, gv)| *o += wv * gv);
                        }
                    }
                    if need_w {
                        gw[ci * n_j + j] = xrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, |o| add_into(o, &gx));
        }
        if need_w {
            self.acc(grads, w, |o| add_into(o, &gw));
        }
        self.acc(grads, b, |gb| {
            for (co, o) in gb.iter_mut().enumerate() {
                *o += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        });
    }
}

/// `cols[j, p] = sum_i w[i, j] x[i, p]` for `w: [n_in, n_j]`, `x: [n_in, n_p]`.
fn conv_t_columns(x: &[f64], w: &[f64], n_in: usize, n_j: usize, n_p: usize) -> Vec<f64> {
    let mut cols = vec![0.0; n_j * n_p];
    for i in 0..n_in {
        let xrow = &x[i * n_p..(i + 1) * n_p];
        for j in 0..n_j {
            let wv = w[i * n_j + j];
            if wv == 0.0 {
                continue;
            }
            cols[j * n_p..(j + 1) * n_p].iter_mut().zip(xrow).for_each(|(c, xv)| *c += wv * xv);
        }
    }
    cols
}

/// Visit every (column row `j`, input pixel `p`, output index `o`) triple of a
/// transpose convolution whose output position lies inside the map.
fn for_each_tap(spec: ConvTSpec, h: usize, w: usize, ho: usize, wo: usize, mut f: impl FnMut(usize, usize, usize)) {
    let k = spec.kernel;
    for co in 0..spec.c_out {
        for ky in 0..k {
            for kx in 0..k {
                let j = (co * k + ky) * k + kx;
                for iy in 0..h {
                    let oy = (iy * spec.stride + ky) as isize - spec.padding as isize;
                    if oy < 0 || oy >= ho as isize {
                        continue;
                    }
                    let orow = (co * ho + oy as usize) * wo;
                    for ix in 0..w {
                        let ox = (ix * spec.stride + kx) as isize - spec.padding as isize;
                        if ox < 0 || ox >= wo as isize {
                            continue;
                        }
                        f(j, iy * w + ix, orow + ox as usize);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn column_mean(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (o, v) in mean.iter_mut().zip(&d[i * n..(i + 1) * n]) {
            *o += v;
        }
    }
    mean.iter_mut().for_each(|o| *o /= m as f64);
    mean
}

/// `[m, n]` view of a shape; vectors are single rows.
pub fn mat_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with a small floor on the norms.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a).max(NORM_FLOOR) * norm(b).max(NORM_FLOOR))
}

/// Bilinear resampling map for pixel-major `[h * w, c]` buffers, using
/// half-pixel centers without corner alignment.
pub fn bilinear_map(h: usize, w: usize, c: usize, ho: usize, wo: usize) -> SparseMap {
    fn axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    }
    let ys = axis(h, ho);
    let xs = axis(w, wo);
    let mut rows = Vec::with_capacity(ho * wo * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let mut r: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let j = (yy * w + xx) * c + ch;
                        match r.iter_mut().find(|(k, _)| *k == j) {
                            Some(e) => e.1 += wgt,
                            None => r.push((j, wgt)),
                        }
                    }
                }
                rows.push(r);
            }
        }
    }
    SparseMap { in_len: h * w * c, rows }
}
