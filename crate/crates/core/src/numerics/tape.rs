//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every primitive in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks the tape once in
//! reverse from the loss and accumulates adjoints.
//!
//! ```
//! use varident::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SelectRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    GroupMax(Var, Vec<usize>),
    GroupMean(Var, usize),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    LogSumExpRows(Var),
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

/// Ordered record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded node; `None` when the node does
    /// not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every registered parameter, zero-filled when disconnected.
    pub fn params(&self) -> &BTreeMap<usize, Tensor> {
        &self.params
    }

    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor> {
        self.params
    }
}

fn shape2(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant or free input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that reports its gradient under `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `x · w + b` with `x: n×k`, `w: k×m`, `b` of length `m`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        assert_eq!(wv.rows(), k, "affine: inner dimension mismatch");
        assert_eq!(bv.len(), m, "affine: bias length mismatch");
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            orow.copy_from_slice(bd);
            for (p, &xip) in xd[i * k..(i + 1) * k].iter().enumerate() {
                if xip == 0.0 {
                    continue;
                }
                let wrow = &wd[p * m..(p + 1) * m];
                for (o, &w) in orow.iter_mut().zip(wrow) {
                    *o += xip * w;
                }
            }
        }
        let value = Tensor::new(shape2(n, m), out).expect("affine shape");
        self.push(value, Op::Affine(x, w, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise op: length mismatch");
        let value = av.zip_map(bv, f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// Hinge `[x]_+`; the inactive region has exactly zero gradient.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Per-row sum, `n×k → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, k) = (av.rows(), av.cols());
        let out = (0..n).map(|i| av.data()[i * k..(i + 1) * k].iter().sum()).collect();
        let value = Tensor::new(shape2(n, 1), out).expect("row_sum shape");
        self.push(value, Op::RowSum(a))
    }

    /// Per-row squared L2 norm, `n×k → n×1`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.row_sum(sq)
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        assert_eq!(bv.rows(), n, "concat_cols: row mismatch");
        let (ka, kb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(n * (ka + kb));
        for i in 0..n {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(shape2(n, ka + kb), out).expect("concat shape");
        self.push(value, Op::ConcatCols(a, b))
    }

    /// `a` stacked above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.cols();
        assert_eq!(bv.cols(), k, "concat_rows: column mismatch");
        let mut out = Vec::with_capacity(av.len() + bv.len());
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        let value = Tensor::new(shape2(av.rows() + bv.rows(), k), out).expect("concat shape");
        self.push(value, Op::ConcatRows(a, b))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let k = av.cols();
        assert!(!idx.is_empty(), "select_rows: empty index");
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            assert!(i < av.rows(), "select_rows: index out of range");
            out.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(shape2(idx.len(), k), out).expect("select shape");
        self.push(value, Op::SelectRows(a, idx.to_vec()))
    }

    /// Multiplies row `i` of `a` by `s[i]`, with `s: n×1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(sv.len(), n, "scale_rows: one scale per row");
        let mut out = av.data().to_vec();
        for i in 0..n {
            let si = sv.data()[i];
            for o in &mut out[i * k..(i + 1) * k] {
                *o *= si;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("scale_rows shape");
        self.push(value, Op::ScaleRows(a, s))
    }

    /// Max over consecutive column groups of width `g`, `n×(k·g) → n×k`.
    pub fn group_max(&mut self, a: Var, g: usize) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        assert!(g > 0 && c % g == 0, "group_max: width must divide columns");
        let k = c / g;
        let mut out = Vec::with_capacity(n * k);
        let mut arg = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = av.row(i);
            for j in 0..k {
                let grp = &row[j * g..(j + 1) * g];
                let mut best = 0;
                for (t, &v) in grp.iter().enumerate() {
                    if v > grp[best] {
                        best = t;
                    }
                }
                out.push(grp[best]);
                arg.push(i * c + j * g + best);
            }
        }
        let value = Tensor::new(shape2(n, k), out).expect("group_max shape");
        self.push(value, Op::GroupMax(a, arg))
    }

    /// Mean over consecutive column groups of width `g`.
    pub fn group_mean(&mut self, a: Var, g: usize) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        assert!(g > 0 && c % g == 0, "group_mean: width must divide columns");
        let k = c / g;
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = av.row(i);
            for j in 0..k {
                out.push(row[j * g..(j + 1) * g].iter().sum::<f64>() / g as f64);
            }
        }
        let value = Tensor::new(shape2(n, k), out).expect("group_mean shape");
        self.push(value, Op::GroupMean(a, g))
    }

    /// Per-row `logsumexp(z) − z[label]`, `n×C → n×1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), n, "cross entropy: one label per row");
        let mut out = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c, "cross entropy: label out of range");
            let row = lv.row(i);
            out.push(logsumexp_slice(row) - row[y]);
        }
        let value = Tensor::new(shape2(n, 1), out).expect("ce shape");
        self.push(value, Op::SoftmaxCrossEntropy(logits, labels.to_vec()))
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows();
        let out = (0..n).map(|i| logsumexp_slice(av.row(i))).collect();
        let value = Tensor::new(shape2(n, 1), out).expect("lse shape");
        self.push(value, Op::LogSumExpRows(a))
    }

    /// `out[i][c] = ‖x_i − m_c‖²`, `n×D, N×D → n×N`.
    pub fn pairwise_sq_dist(&mut self, x: Var, m: Var) -> Var {
        let (xv, mv) = (self.value(x), self.value(m));
        let (n, d, nc) = (xv.rows(), xv.cols(), mv.rows());
        assert_eq!(mv.cols(), d, "pairwise_sq_dist: dimension mismatch");
        let mut out = Vec::with_capacity(n * nc);
        for i in 0..n {
            let xi = xv.row(i);
            for c in 0..nc {
                let mc = mv.row(c);
                out.push(xi.iter().zip(mc).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let value = Tensor::new(shape2(n, nc), out).expect("pairwise shape");
        self.push(value, Op::PairwiseSqDist(x, m))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::non_finite(format!("loss = {}", lv.item())));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = adj
                    .get(i)
                    .and_then(Option::clone)
                    .unwrap_or_else(|| Tensor::zeros_like(&node.value));
                match params.get_mut(&id) {
                    None => {
                        params.insert(id, g);
                    }
                    Some(acc) => Tensor::add_assign(acc, &g),
                }
            }
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::Affine(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut gx = vec![0.0; n * k];
                let mut gw = vec![0.0; k * m];
                let mut gb = vec![0.0; m];
                for i in 0..n {
                    let grow = &gd[i * m..(i + 1) * m];
                    for (bj, gj) in gb.iter_mut().zip(grow) {
                        *bj += gj;
                    }
                    for p in 0..k {
                        let wrow = &wd[p * m..(p + 1) * m];
                        gx[i * k + p] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let xip = xd[i * k + p];
                        if xip != 0.0 {
                            for (gwj, gj) in gw[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *gwj += xip * gj;
                            }
                        }
                    }
                }
                accumulate(adj, *x, xv.shape(), gx);
                accumulate(adj, *w, wv.shape(), gw);
                accumulate(adj, *b, val(*b).shape(), gb);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, val(*a).shape(), g.data().to_vec());
                accumulate(adj, *b, val(*b).shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, val(*a).shape(), g.data().to_vec());
                accumulate(adj, *b, val(*b).shape(), g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.zip_map(bv, |x, y| x * y).into_data();
                let gb = g.zip_map(av, |x, y| x * y).into_data();
                accumulate(adj, *a, av.shape(), ga);
                accumulate(adj, *b, bv.shape(), gb);
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, val(*a).shape(), g.data().iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => accumulate(adj, *a, val(*a).shape(), g.data().to_vec()),
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gi, t| gi * (1.0 - t * t)).into_data();
                accumulate(adj, *a, val(*a).shape(), ga);
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                let ga = g
                    .zip_map(av, |gi, x| if x > 0.0 { gi } else { gi * slope })
                    .into_data();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::Relu(a) => {
                let av = val(*a);
                let ga = g
                    .zip_map(av, |gi, x| if x > 0.0 { gi } else { 0.0 })
                    .into_data();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(out, |gi, e| gi * e).into_data();
                accumulate(adj, *a, val(*a).shape(), ga);
            }
            Op::Log(a) => {
                let av = val(*a);
                let ga = g.zip_map(av, |gi, x| gi / x).into_data();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::Square(a) => {
                let av = val(*a);
                let ga = g.zip_map(av, |gi, x| 2.0 * gi * x).into_data();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::Sqrt(a) => {
                // subgradient 0 at the origin
                let ga = g
                    .zip_map(out, |gi, s| if s > 0.0 { 0.5 * gi / s } else { 0.0 })
                    .into_data();
                accumulate(adj, *a, val(*a).shape(), ga);
            }
            Op::Abs(a) => {
                let av = val(*a);
                let ga = g.zip_map(av, |gi, x| gi * sign(x)).into_data();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(adj, *a, av.shape(), vec![g.item(); av.len()]);
            }
            Op::Mean(a) => {
                let av = val(*a);
                let s = g.item() / av.len() as f64;
                accumulate(adj, *a, av.shape(), vec![s; av.len()]);
            }
            Op::RowSum(a) => {
                let av = val(*a);
                let k = av.cols();
                let ga = (0..av.len()).map(|e| g.data()[e / k]).collect();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ka, kb) = (av.cols(), bv.cols());
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for i in 0..av.rows() {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..ka]);
                    gb.extend_from_slice(&row[ka..ka + kb]);
                }
                accumulate(adj, *a, av.shape(), ga);
                accumulate(adj, *b, bv.shape(), gb);
            }
            Op::ConcatRows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let split = av.len();
                accumulate(adj, *a, av.shape(), g.data()[..split].to_vec());
                accumulate(adj, *b, bv.shape(), g.data()[split..].to_vec());
            }
            Op::SelectRows(a, idx) => {
                let av = val(*a);
                let k = av.cols();
                let mut ga = vec![0.0; av.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, src) in ga[i * k..(i + 1) * k].iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (val(*a), val(*s));
                let k = av.cols();
                let mut ga = vec![0.0; av.len()];
                let mut gs = vec![0.0; sv.len()];
                for i in 0..av.rows() {
                    let si = sv.data()[i];
                    let grow = g.row(i);
                    let arow = av.row(i);
                    for j in 0..k {
                        ga[i * k + j] = grow[j] * si;
                        gs[i] += grow[j] * arow[j];
                    }
                }
                accumulate(adj, *a, av.shape(), ga);
                accumulate(adj, *s, sv.shape(), gs);
            }
            Op::GroupMax(a, arg) => {
                let av = val(*a);
                let mut ga = vec![0.0; av.len()];
                for (gi, &src) in g.data().iter().zip(arg) {
                    ga[src] += gi;
                }
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::GroupMean(a, grp) => {
                let av = val(*a);
                let c = av.cols();
                let k = c / grp;
                let inv = 1.0 / *grp as f64;
                let ga = (0..av.len())
                    .map(|e| {
                        let (i, col) = (e / c, e % c);
                        g.data()[i * k + col / grp] * inv
                    })
                    .collect();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let lv = val(*logits);
                let c = lv.cols();
                let mut gl = Vec::with_capacity(lv.len());
                for (i, &y) in labels.iter().enumerate() {
                    let row = lv.row(i);
                    let lse = logsumexp_slice(row);
                    let gi = g.data()[i];
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        gl.push(gi * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                debug_assert_eq!(gl.len(), lv.rows() * c);
                accumulate(adj, *logits, lv.shape(), gl);
            }
            Op::LogSumExpRows(a) => {
                let av = val(*a);
                let k = av.cols();
                let ga = (0..av.len())
                    .map(|e| {
                        let i = e / k;
                        g.data()[i] * (av.data()[e] - out.data()[i]).exp()
                    })
                    .collect();
                accumulate(adj, *a, av.shape(), ga);
            }
            Op::PairwiseSqDist(x, m) => {
                let (xv, mv) = (val(*x), val(*m));
                let (n, d, nc) = (xv.rows(), xv.cols(), mv.rows());
                let mut gx = vec![0.0; xv.len()];
                let mut gm = vec![0.0; mv.len()];
                for i in 0..n {
                    for c in 0..nc {
                        let gic = g.data()[i * nc + c];
                        if gic == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = 2.0 * gic * (xv.data()[i * d + t] - mv.data()[c * d + t]);
                            gx[i * d + t] += diff;
                            gm[c * d + t] -= diff;
                        }
                    }
                }
                accumulate(adj, *x, xv.shape(), gx);
                accumulate(adj, *m, mv.shape(), gm);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("adjoint shape"));
        }
    }
}

/// Max-shifted `log Σ exp(v_i)`.
pub(crate) fn logsumexp_slice(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable `log Σ exp(v_i)` for a non-empty finite vector.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("logsumexp of empty input"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("logsumexp input"));
    }
    Ok(logsumexp_slice(values))
}

/// Runs a backward pass and returns gradients keyed by parameter id.
pub fn forward_backward(tape: &Tape, loss: Var) -> Result<BTreeMap<usize, Tensor>> {
    Ok(tape.backward(loss)?.into_params())
}
