//! Minimal tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Graph`] records every intermediate value together with the operation
//! that produced it. Calling [`Graph::backward`] walks the tape in reverse and
//! returns a gradient for every node that requires one. Parameters enter the
//! tape as leaves through [`Graph::param`]; frozen weights and data enter
//! through [`Graph::constant`], which never receives a gradient.
//!
//! All values are kept in standard (row-major) layout so reshapes are free.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, ArrayD<f64>),
    MatMul { a: Var, b: Var, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: ArrayD<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    SqDist { a: Var, b: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    SumLast(Var),
    LogFloor { x: Var, floor: f64 },
}

#[derive(Debug)]
struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-d value")
}

fn view3(a: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected a 3-d value")
}

fn last_dim(a: &ArrayD<f64>) -> usize {
    *a.shape().last().expect("scalar has no last axis")
}

/// Rows of a value viewed as `[prod(leading), last]`.
fn as_rows(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    let n = last_dim(a);
    let m = if n == 0 { 0 } else { a.len() / n };
    ArrayView2::from_shape((m, n), a.as_slice().expect("standard layout")).unwrap()
}

fn matmul2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    c
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a node with {} elements", val.len());
        val.iter().copied().next().unwrap()
    }

    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x[.., n] + bias[n]`, broadcasting over the leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = last_dim(self.value(x));
        assert_eq!(self.value(bias).shape(), &[n], "add_bias: bias shape");
        let mut value = self.value(x).clone();
        {
            let b = self.value(bias).as_slice().unwrap();
            for row in value.as_slice_mut().unwrap().chunks_mut(n) {
                for (r, bb) in row.iter_mut().zip(b) {
                    *r += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant array (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: ArrayD<f64>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const: shape mismatch");
        let value = self.value(x) * &c;
        let rg = self.rg(x);
        self.push(value, Op::MulConst(x, c), rg)
    }

    /// Adds a constant array; the gradient passes straight through to `x`.
    pub fn add_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        let k = self.constant(c.clone());
        self.add(x, k)
    }

    /// 2-d matrix product `a · b` or `a · bᵀ`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = view2(self.value(a));
        let bv = view2(self.value(b));
        let bv = if transpose_b { bv.reversed_axes() } else { bv };
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimension mismatch");
        let value = matmul2(av, bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, tb: transpose_b }, rg)
    }

    /// Batched product over the leading axis of two 3-d values.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = view3(self.value(a));
        let bv = view3(self.value(b));
        let g = av.shape()[0];
        assert_eq!(g, bv.shape()[0], "batch_matmul: batch mismatch");
        let (m, k) = (av.shape()[1], av.shape()[2]);
        let n = if transpose_b { bv.shape()[1] } else { bv.shape()[2] };
        let kb = if transpose_b { bv.shape()[2] } else { bv.shape()[1] };
        assert_eq!(k, kb, "batch_matmul: inner dimension mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((g, m, n));
        for i in 0..g {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let bi = if transpose_b { bi.reversed_axes() } else { bi };
            let mut ci = out.index_axis_mut(Axis(0), i);
            general_mat_mul(1.0, &ai, &bi, 0.0, &mut ci);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out.into_dyn(), Op::BatchMatMul { a, b, tb: transpose_b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(x);
        self.push(value, Op::Permute(x, perm.to_vec()), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let n = last_dim(&value);
        for row in value.as_slice_mut().unwrap().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let n = last_dim(&value);
        for row in value.as_slice_mut().unwrap().chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = last_dim(xv);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.len() / n.max(1));
        for row in xhat.as_slice_mut().unwrap().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).as_slice().unwrap();
        let b = self.value(bias).as_slice().unwrap();
        assert_eq!(g.len(), n, "layer_norm: gain shape");
        let mut value = xhat.clone();
        for row in value.as_slice_mut().unwrap().chunks_mut(n) {
            for ((v, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Selects rows of a 2-d value: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = view2(self.value(table));
        let d = t.ncols();
        let mut out = Array2::<f64>::zeros((idx.len(), d));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < t.nrows(), "gather_rows: index {r} out of range {}", t.nrows());
            out.row_mut(i).assign(&t.row(r));
        }
        let rg = self.rg(table);
        self.push(out.into_dyn(), Op::GatherRows { table, idx: idx.to_vec() }, rg)
    }

    /// Pairwise squared Euclidean distances `out[i, k] = ‖a_i − b_k‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let value = pairwise_sq_dist(view2(self.value(a)), view2(self.value(b))).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::SqDist { a, b }, rg)
    }

    /// Scales each row to unit L2 norm (rows with norm below `eps` are divided by `eps`).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let n = last_dim(&value);
        let mut norms = Vec::new();
        for row in value.as_slice_mut().unwrap().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows { x, norms }, rg)
    }

    /// Picks one entry per row of a 2-d value: `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = view2(self.value(x));
        assert_eq!(xv.nrows(), idx.len(), "pick: one index per row");
        let value: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv[[i, j]]).collect();
        let rg = self.rg(x);
        self.push(ArrayD::from_shape_vec(IxDyn(&[idx.len()]), value).unwrap(), Op::Pick { x, idx: idx.to_vec() }, rg)
    }

    /// Sum of all elements, as a 0-d value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = xv.sum_axis(Axis(xv.ndim() - 1));
        let rg = self.rg(x);
        self.push(value, Op::SumLast(x), rg)
    }

    /// `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).mapv(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(value, Op::LogFloor { x, floor }, rg)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], gy.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], -&gy);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], gy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &gy * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], &gy * self.value(*a));
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let gb = as_rows(&gy).sum_axis(Axis(0)).into_dyn();
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], gy);
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads[x.0], gy * *s),
                Op::MulConst(x, c) => accumulate(&mut grads[x.0], gy * c),
                Op::MatMul { a, b, tb } => {
                    let g2 = view2(&gy);
                    let av = view2(self.value(*a));
                    let bv = view2(self.value(*b));
                    if self.rg(*a) {
                        // C = A·B → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                        let ga = if *tb { matmul2(g2, bv) } else { matmul2(g2, bv.t()) };
                        accumulate(&mut grads[a.0], ga.into_dyn());
                    }
                    if self.rg(*b) {
                        // C = A·B → dB = Aᵀ·dC ; C = A·Bᵀ → dB = dCᵀ·A
                        let gb = if *tb { matmul2(g2.t(), av) } else { matmul2(av.t(), g2) };
                        accumulate(&mut grads[b.0], gb.into_dyn());
                    }
                }
                Op::BatchMatMul { a, b, tb } => {
                    let g3 = view3(&gy);
                    let av = view3(self.value(*a));
                    let bv = view3(self.value(*b));
                    let batches = av.shape()[0];
                    if self.rg(*a) {
                        let mut ga = ndarray::Array3::<f64>::zeros(av.raw_dim());
                        for i in 0..batches {
                            let gi = g3.index_axis(Axis(0), i);
                            let bi = bv.index_axis(Axis(0), i);
                            let mut out = ga.index_axis_mut(Axis(0), i);
                            if *tb {
                                general_mat_mul(1.0, &gi, &bi, 0.0, &mut out);
                            } else {
                                general_mat_mul(1.0, &gi, &bi.t(), 0.0, &mut out);
                            }
                        }
                        accumulate(&mut grads[a.0], ga.into_dyn());
                    }
                    if self.rg(*b) {
                        let mut gb = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                        for i in 0..batches {
                            let gi = g3.index_axis(Axis(0), i);
                            let ai = av.index_axis(Axis(0), i);
                            let mut out = gb.index_axis_mut(Axis(0), i);
                            if *tb {
                                general_mat_mul(1.0, &gi.t(), &ai, 0.0, &mut out);
                            } else {
                                general_mat_mul(1.0, &ai.t(), &gi, 0.0, &mut out);
                            }
                        }
                        accumulate(&mut grads[b.0], gb.into_dyn());
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).raw_dim();
                    accumulate(&mut grads[x.0], gy.into_shape_with_order(shape).unwrap());
                }
                Op::Permute(x, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let g = gy.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                    accumulate(&mut grads[x.0], g);
                }
                Op::Relu(x) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], g);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let n = last_dim(y);
                    let mut g = gy;
                    for (grow, yrow) in g
                        .as_slice_mut()
                        .unwrap()
                        .chunks_mut(n)
                        .zip(y.as_slice().unwrap().chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let n = last_dim(y);
                    let mut g = gy;
                    for (grow, yrow) in g
                        .as_slice_mut()
                        .unwrap()
                        .chunks_mut(n)
                        .zip(y.as_slice().unwrap().chunks(n))
                    {
                        let total: f64 = grow.iter().sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = last_dim(xhat);
                    let gy_rows = as_rows(&gy);
                    let xh_rows = as_rows(xhat);
                    if self.rg(*bias) {
                        accumulate(&mut grads[bias.0], gy_rows.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.rg(*gain) {
                        let gg = (&gy_rows * &xh_rows).sum_axis(Axis(0)).into_dyn();
                        accumulate(&mut grads[gain.0], gg);
                    }
                    if self.rg(*x) {
                        let gvec = self.value(*gain).as_slice().unwrap();
                        let mut gx = ArrayD::<f64>::zeros(xhat.raw_dim());
                        let nf = n as f64;
                        for (((out, grow), xrow), is) in gx
                            .as_slice_mut()
                            .unwrap()
                            .chunks_mut(n)
                            .zip(gy.as_slice().unwrap().chunks(n))
                            .zip(xhat.as_slice().unwrap().chunks(n))
                            .zip(inv_std)
                        {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..n {
                                let d = grow[j] * gvec[j];
                                sum_d += d;
                                sum_dx += d * xrow[j];
                            }
                            for j in 0..n {
                                let d = grow[j] * gvec[j];
                                out[j] = is / nf * (nf * d - sum_d - xrow[j] * sum_dx);
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::GatherRows { table, idx } => {
                    let mut gt = Array2::<f64>::zeros(view2(self.value(*table)).raw_dim());
                    let g2 = view2(&gy);
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = gt.row_mut(r);
                        row += &g2.row(i);
                    }
                    accumulate(&mut grads[table.0], gt.into_dyn());
                }
                Op::SqDist { a, b } => {
                    let g2 = view2(&gy);
                    let av = view2(self.value(*a));
                    let bv = view2(self.value(*b));
                    if self.rg(*a) {
                        // dA_i = 2 (Σ_k g_ik) a_i − 2 Σ_k g_ik b_k
                        let mut ga = matmul2(g2, bv) * -2.0;
                        for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                            let s: f64 = g2.row(i).sum();
                            row.scaled_add(2.0 * s, &av.row(i));
                        }
                        accumulate(&mut grads[a.0], ga.into_dyn());
                    }
                    if self.rg(*b) {
                        // dB_k = 2 (Σ_i g_ik) b_k − 2 Σ_i g_ik a_i
                        let mut gb = matmul2(g2.t(), av) * -2.0;
                        for (k, mut row) in gb.rows_mut().into_iter().enumerate() {
                            let s: f64 = g2.column(k).sum();
                            row.scaled_add(2.0 * s, &bv.row(k));
                        }
                        accumulate(&mut grads[b.0], gb.into_dyn());
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let n = last_dim(y);
                    let mut g = gy;
                    for ((grow, yrow), norm) in g
                        .as_slice_mut()
                        .unwrap()
                        .chunks_mut(n)
                        .zip(y.as_slice().unwrap().chunks(n))
                        .zip(norms)
                    {
                        let raw_norm: f64 = yrow.iter().map(|v| v * v).sum::<f64>().sqrt() * norm;
                        if raw_norm < *norm * (1.0 - 1e-12) {
                            // eps branch: plain scaling
                            grow.iter_mut().for_each(|v| *v /= norm);
                            continue;
                        }
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::Pick { x, idx } => {
                    let mut gx = Array2::<f64>::zeros(view2(self.value(*x)).raw_dim());
                    let gs = gy.as_slice().unwrap();
                    for (i, &j) in idx.iter().enumerate() {
                        gx[[i, j]] += gs[i];
                    }
                    accumulate(&mut grads[x.0], gx.into_dyn());
                }
                Op::Sum(x) => {
                    let s = gy.iter().copied().next().unwrap();
                    accumulate(&mut grads[x.0], ArrayD::from_elem(self.value(*x).raw_dim(), s));
                }
                Op::SumLast(x) => {
                    let xv = self.value(*x);
                    let n = last_dim(xv);
                    let gs = gy.as_slice().unwrap();
                    let mut gx = ArrayD::<f64>::zeros(xv.raw_dim());
                    for (row, g) in gx.as_slice_mut().unwrap().chunks_mut(n).zip(gs) {
                        row.iter_mut().for_each(|v| *v = *g);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LogFloor { x, floor } => {
                    let mut g = gy;
                    Zip::from(&mut g).and(self.value(*x)).for_each(|g, &v| {
                        *g = if v > *floor { *g / v } else { 0.0 };
                    });
                    accumulate(&mut grads[x.0], g);
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// `out[i, k] = Σ_j (a[i, j] − b[k, j])²`, summed in coordinate order.
pub fn pairwise_sq_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.ncols(), "sq_dist: dimension mismatch");
    let mut out = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    for (i, ai) in a.rows().into_iter().enumerate() {
        for (k, bk) in b.rows().into_iter().enumerate() {
            let mut s = 0.0;
            for (x, y) in ai.iter().zip(bk.iter()) {
                let d = x - y;
                s += d * d;
            }
            out[[i, k]] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at every coordinate of every input.
    fn check<F>(inputs: Vec<ArrayD<f64>>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (i, base) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
            for j in 0..base.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, a)| {
                            let mut a = a.clone();
                            if k == i {
                                a.as_slice_mut().unwrap()[j] += delta;
                            }
                            g.constant(a)
                        })
                        .collect();
                    let l = f(&mut g, &vs);
                    g.scalar(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[j];
                let tol = 1e-6 * (1.0 + numeric.abs().max(a.abs()));
                assert!((a - numeric).abs() < tol, "input {i} coord {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Random projection to a scalar so every output coordinate matters.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(g.value(v).shape(), &mut rng);
        let p = g.mul_const(v, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let c = random(&[4], &mut rng);
        check(vec![a, b, c], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let m = g.add_bias(m, v[2]);
            let r = g.relu(m);
            let r = g.scale(r, 0.7);
            project(g, r, 9)
        });
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3, 5], &mut rng);
        let b = random(&[5, 2], &mut rng);
        let bt = random(&[4, 5], &mut rng);
        check(vec![a.clone(), b], |g, v| {
            let c = g.matmul(v[0], v[1], false);
            project(g, c, 3)
        });
        check(vec![a, bt], |g, v| {
            let c = g.matmul(v[0], v[1], true);
            project(g, c, 4)
        });
    }

    #[test]
    fn batch_matmul_reshape_permute_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 4, 3], &mut rng);
        let c = random(&[2, 5, 4], &mut rng);
        check(vec![a.clone(), b], |g, v| {
            let c = g.batch_matmul(v[0], v[1], false);
            let p = g.permute(c, &[1, 0, 2]);
            let r = g.reshape(p, &[3, 6]);
            project(g, r, 5)
        });
        check(vec![a, c], |g, v| {
            let c = g.batch_matmul(v[0], v[1], true);
            project(g, c, 6)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[3, 5], &mut rng);
        check(vec![a.clone()], |g, v| {
            let s = g.softmax(v[0]);
            project(g, s, 7)
        });
        check(vec![a.clone()], |g, v| {
            let s = g.log_softmax(v[0]);
            project(g, s, 8)
        });
        check(vec![a], |g, v| {
            let s = g.log_softmax(v[0]);
            let p = g.pick(s, &[0, 4, 2]);
            g.sum(p)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 6], &mut rng);
        let gain = random(&[6], &mut rng);
        let bias = random(&[6], &mut rng);
        check(vec![x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            project(g, y, 10)
        });
    }

    #[test]
    fn gather_sqdist_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random(&[5, 3], &mut rng);
        let b = random(&[4, 3], &mut rng);
        check(vec![t, b], |g, v| {
            let rows = g.gather_rows(v[0], &[1, 1, 4]);
            let d = g.sq_dist(rows, v[1]);
            let n = g.normalize_rows(d, 1e-12);
            let s = g.sum_last(n);
            project(g, s, 11)
        });
    }

    #[test]
    fn log_floor_gradient_and_clamp() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 2.0, 1e-20]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x);
        let l = g.log_floor(v, 1e-10);
        let s = g.sum(l);
        let grads = g.backward(s);
        let gv = grads.get(v).unwrap().as_slice().unwrap().to_vec();
        assert!((gv[0] - 2.0).abs() < 1e-12);
        assert!((gv[1] - 0.5).abs() < 1e-12);
        assert_eq!(gv[2], 0.0);
        assert!((g.value(l).as_slice().unwrap()[2] - (1e-10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        // d/dx (x * sg[x]) = sg[x]
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[3.0, 3.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let p = g.param(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let m = g.matmul(c, p, false);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
