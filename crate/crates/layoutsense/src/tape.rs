//! Reverse-mode autodiff tape over ndarray values.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes in
//! topological order; [`Tape::param_grads`] replays it backwards and returns
//! gradients aligned with a [`ParamSet`]. Conventions: vectors are rank-1,
//! matrices rank-2 `[rows, cols]`, feature maps rank-3 `[channels, h, w]`.
//! Scalars are 1-element vectors.

use crate::num::Scalar;
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::collections::BTreeMap;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter arrays. Order is the manifest order used by
/// checkpoints and digests.
#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| *n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar elements across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Converts every array to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64(x.to_f64())))
                .collect(),
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamSet`].
#[derive(Debug)]
pub struct Grads<F: Scalar> {
    by_param: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros(params: &ParamSet<F>) -> Self {
        Grads { by_param: vec![None; params.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.by_param[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Grads<F>) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            if let Some(s) = src {
                match dst {
                    Some(d) => *d += s,
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }
}

enum Op<F: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    AddConst(F),
    Scale(F),
    /// `[r,c] + [c]` broadcast over rows.
    AddRow,
    /// `[r,c] * [c]` broadcast over rows.
    MulRow,
    MatMul,
    MatVec,
    Transpose,
    Tanh,
    Sigmoid,
    /// Rank-1 softmax over the first `valid` entries; the rest get weight 0.
    Softmax { valid: usize },
    /// Row-wise softmax over the first `valid` columns.
    SoftmaxRows { valid: usize },
    /// Rank-1 log-softmax over all entries.
    LogSoftmax,
    /// Rank-1 -> scalar selection.
    Pick { index: usize },
    /// Concatenation along axis 0 (any rank; trailing dims must agree).
    Concat0 { sizes: Vec<usize> },
    /// Column-wise concatenation of matrices.
    ConcatCols { widths: Vec<usize> },
    /// `[r,c]` -> `[r,len]` starting at column `start`.
    SliceCols { start: usize, len: usize },
    Reshape { from: Vec<usize> },
    SumAll,
    MeanAll,
    /// `[r,c]` -> `[c]`, mean over rows.
    MeanRows,
    /// Euclidean norm of all entries -> scalar.
    Norm2,
    /// Row gather from a `[v,d]` matrix.
    GatherRows { ids: Vec<usize> },
    /// 2-D convolution, input `[cin,h,w]`, weight `[cout,cin,k,k]`.
    Conv2d { stride: usize, pad: usize },
    /// `[c,h,w] + [c]` broadcast per channel.
    ChanBias,
    /// Row-wise layer norm: (x `[r,c]`, gamma `[c]`, beta `[c]`).
    LayerNorm { eps: F },
    /// Elementwise multiply by a fixed (non-differentiable) mask.
    MulMask { mask: ArrayD<F> },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    op: Op<F>,
}

/// Forward recording + reverse pass. One `ParamSet` per tape.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    leased: BTreeMap<usize, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leased: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<F>, parents: Vec<Var>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, parents, op });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input value.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    pub fn constant_vec(&mut self, values: &[F]) -> Var {
        self.constant(Array1::from(values.to_vec()).into_dyn())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Leases a parameter into the tape; repeated leases return the same node
    /// so gradients from every use accumulate there.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> Var {
        if let Some(&v) = self.leased.get(&id.0) {
            return v;
        }
        let v = self.push(params.value(id).clone(), vec![], Op::Leaf);
        self.leased.insert(id.0, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, vec![a, b], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, vec![a, b], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, vec![a, b], Op::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| -x);
        self.push(value, vec![a], Op::Neg)
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, vec![a], Op::AddConst(c))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, vec![a], Op::Scale(c))
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let m = as2(self.value(a));
        let row = as1(self.value(v));
        assert_eq!(m.ncols(), row.len(), "add_row width mismatch");
        let value = (&m + &row).into_dyn();
        self.push(value, vec![a, v], Op::AddRow)
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        let m = as2(self.value(a));
        let row = as1(self.value(v));
        assert_eq!(m.ncols(), row.len(), "mul_row width mismatch");
        let value = (&m * &row).into_dyn();
        self.push(value, vec![a, v], Op::MulRow)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let am = as2(self.value(a));
        let bm = as2(self.value(b));
        assert_eq!(am.ncols(), bm.nrows(), "matmul inner dim mismatch");
        let value = am.dot(&bm).into_dyn();
        self.push(value, vec![a, b], Op::MatMul)
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Var {
        let am = as2(self.value(a));
        let xv = as1(self.value(x));
        assert_eq!(am.ncols(), xv.len(), "matvec inner dim mismatch");
        let value = am.dot(&xv).into_dyn();
        self.push(value, vec![a, x], Op::MatVec)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let m = as2(self.value(a));
        let value = m.t().to_owned().into_dyn();
        self.push(value, vec![a], Op::Transpose)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(value, vec![a], Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(value, vec![a], Op::Sigmoid)
    }

    /// Numerically stable masked softmax over a vector's first `valid` entries.
    pub fn softmax(&mut self, a: Var, valid: usize) -> Var {
        let x = as1(self.value(a));
        assert!(valid >= 1 && valid <= x.len(), "softmax valid out of range");
        let value = softmax1(&x, valid).into_dyn();
        self.push(value, vec![a], Op::Softmax { valid })
    }

    pub fn softmax_rows(&mut self, a: Var, valid: usize) -> Var {
        let x = as2(self.value(a));
        assert!(valid >= 1 && valid <= x.ncols(), "softmax_rows valid out of range");
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.outer_iter().enumerate() {
            let r = softmax1(&row.to_owned(), valid);
            out.row_mut(i).assign(&r);
        }
        self.push(out.into_dyn(), vec![a], Op::SoftmaxRows { valid })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = as1(self.value(a));
        let max = x.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = x.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        let value = x.mapv(|v| v - lse).into_dyn();
        self.push(value, vec![a], Op::LogSoftmax)
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let x = as1(self.value(a));
        assert!(index < x.len(), "pick index out of range");
        let value = Array1::from(vec![x[index]]).into_dyn();
        self.push(value, vec![a], Op::Pick { index })
    }

    /// Concatenates along axis 0. Works for vectors and same-width matrices.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat0 shape mismatch");
        self.push(value, parts.to_vec(), Op::Concat0 { sizes })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[1]).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, parts.to_vec(), Op::ConcatCols { widths })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = as2(self.value(a));
        assert!(start + len <= m.ncols(), "slice_cols out of range");
        let value = m.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        self.push(value, vec![a], Op::SliceCols { start, len })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.value(a).shape().to_vec();
        let n: usize = shape.iter().product();
        assert_eq!(self.value(a).len(), n, "reshape element count mismatch");
        let flat: Vec<F> = self.value(a).iter().cloned().collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        self.push(value, vec![a], Op::Reshape { from })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).iter().cloned().sum();
        self.push(Array1::from(vec![s]).into_dyn(), vec![a], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).len()).unwrap();
        let s: F = self.value(a).iter().cloned().sum();
        self.push(Array1::from(vec![s / n]).into_dyn(), vec![a], Op::MeanAll)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = as2(self.value(a));
        let value = m.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(value, vec![a], Op::MeanRows)
    }

    /// Euclidean norm of all entries. Gradient is 0 at the origin.
    pub fn norm2(&mut self, a: Var) -> Var {
        let s: F = self.value(a).iter().map(|&x| x * x).sum();
        let value = Array1::from(vec![s.sqrt()]).into_dyn();
        self.push(value, vec![a], Op::Norm2)
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let m = as2(self.value(a));
        let mut out = Array2::zeros((ids.len(), m.ncols()));
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < m.nrows(), "gather_rows id out of range");
            out.row_mut(row).assign(&m.row(id));
        }
        self.push(out.into_dyn(), vec![a], Op::GatherRows { ids: ids.to_vec() })
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let x = as3(self.value(input));
        let w = self.value(weight);
        assert_eq!(w.ndim(), 4, "conv2d weight must be rank 4");
        let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(w.shape()[3], k, "conv2d kernels are square");
        assert_eq!(x.shape()[0], cin, "conv2d channel mismatch");
        let (h, wdim) = (x.shape()[1], x.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wdim + 2 * pad - k) / stride + 1;
        let cols = im2col(&x, k, stride, pad, ho, wo);
        let wmat = flatten_weight(w, cout, cin * k * k);
        let out = wmat.dot(&cols); // [cout, ho*wo]
        let value = Array3::from_shape_vec((cout, ho, wo), out.iter().cloned().collect())
            .unwrap()
            .into_dyn();
        self.push(value, vec![input, weight], Op::Conv2d { stride, pad })
    }

    pub fn chan_bias(&mut self, map: Var, bias: Var) -> Var {
        let x = as3(self.value(map));
        let b = as1(self.value(bias));
        assert_eq!(x.shape()[0], b.len(), "chan_bias channel mismatch");
        let mut out = x.to_owned();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v + b[c]);
        }
        self.push(out.into_dyn(), vec![map, bias], Op::ChanBias)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let m = as2(self.value(x));
        let g = as1(self.value(gamma));
        let b = as1(self.value(beta));
        assert_eq!(m.ncols(), g.len());
        assert_eq!(m.ncols(), b.len());
        let mut out = Array2::zeros(m.raw_dim());
        for (i, row) in m.outer_iter().enumerate() {
            let n = F::from_usize(row.len()).unwrap();
            let mean = row.iter().cloned().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let sd = (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[(i, j)] = g[j] * (v - mean) / sd + b[j];
            }
        }
        self.push(out.into_dyn(), vec![x, gamma, beta], Op::LayerNorm { eps })
    }

    /// Multiplies by a fixed mask (dropout); the mask gets no gradient.
    pub fn mul_mask(&mut self, a: Var, mask: ArrayD<F>) -> Var {
        assert_eq!(self.value(a).shape(), mask.shape(), "mul_mask shape mismatch");
        let value = &self.nodes[a.0].value * &mask;
        self.push(value, vec![a], Op::MulMask { mask })
    }

    /// Backward pass from a scalar loss; returns gradients for every leased
    /// parameter of `params`.
    pub fn param_grads(&self, params: &ParamSet<F>, loss: Var) -> Grads<F> {
        let node_grads = self.backward(loss);
        let mut grads = Grads::zeros(params);
        for (&pid, &var) in &self.leased {
            if let Some(g) = &node_grads[var.0] {
                grads.by_param[pid] = Some(g.clone());
            }
        }
        grads
    }

    fn backward(&self, loss: Var) -> Vec<Option<ArrayD<F>>> {
        assert_eq!(self.value(loss).len(), 1, "backward seed must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), F::one()));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            let parent_grads = self.op_backward(node, &g);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        grads
    }

    fn op_backward(&self, node: &Node<F>, g: &ArrayD<F>) -> Vec<ArrayD<F>> {
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.mapv(|x| -x)],
            Op::Mul => vec![g * pv(1), g * pv(0)],
            Op::Neg => vec![g.mapv(|x| -x)],
            Op::AddConst(_) => vec![g.clone()],
            Op::Scale(c) => vec![g.mapv(|x| x * *c)],
            Op::AddRow => {
                let gm = as2(g);
                vec![g.clone(), gm.sum_axis(Axis(0)).into_dyn()]
            }
            Op::MulRow => {
                let gm = as2(g);
                let a = as2(pv(0));
                let v = as1(pv(1));
                let da = (&gm * &v).into_dyn();
                let dv = (&gm * &a).sum_axis(Axis(0)).into_dyn();
                vec![da, dv]
            }
            Op::MatMul => {
                let gm = as2(g);
                let a = as2(pv(0));
                let b = as2(pv(1));
                vec![gm.dot(&b.t()).into_dyn(), a.t().dot(&gm).into_dyn()]
            }
            Op::MatVec => {
                let gv = as1(g);
                let a = as2(pv(0));
                let x = as1(pv(1));
                let mut da = Array2::zeros((a.nrows(), a.ncols()));
                for i in 0..a.nrows() {
                    for j in 0..a.ncols() {
                        da[(i, j)] = gv[i] * x[j];
                    }
                }
                vec![da.into_dyn(), a.t().dot(&gv).into_dyn()]
            }
            Op::Transpose => vec![as2(g).t().to_owned().into_dyn()],
            Op::Tanh => {
                let y = &node.value;
                vec![g * &y.mapv(|v| F::one() - v * v)]
            }
            Op::Sigmoid => {
                let y = &node.value;
                vec![g * &y.mapv(|v| v * (F::one() - v))]
            }
            Op::Softmax { valid } => {
                let y = as1(&node.value);
                let gv = as1(g);
                let mut dot = F::zero();
                for j in 0..*valid {
                    dot += gv[j] * y[j];
                }
                let mut dx = Array1::zeros(y.len());
                for j in 0..*valid {
                    dx[j] = y[j] * (gv[j] - dot);
                }
                vec![dx.into_dyn()]
            }
            Op::SoftmaxRows { valid } => {
                let y = as2(&node.value);
                let gm = as2(g);
                let mut dx = Array2::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let mut dot = F::zero();
                    for j in 0..*valid {
                        dot += gm[(i, j)] * y[(i, j)];
                    }
                    for j in 0..*valid {
                        dx[(i, j)] = y[(i, j)] * (gm[(i, j)] - dot);
                    }
                }
                vec![dx.into_dyn()]
            }
            Op::LogSoftmax => {
                let x = as1(pv(0));
                let gv = as1(g);
                let gsum: F = gv.iter().cloned().sum();
                let sm = softmax1(&x, x.len());
                let dx = &gv - &sm.mapv(|p| p * gsum);
                vec![dx.into_dyn()]
            }
            Op::Pick { index } => {
                let n = pv(0).len();
                let mut dx = Array1::zeros(n);
                dx[*index] = as1(g)[0];
                vec![dx.into_dyn()]
            }
            Op::Concat0 { sizes } => {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for (k, &sz) in sizes.iter().enumerate() {
                    let part = g
                        .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + sz))
                        .to_owned();
                    assert_eq!(part.shape(), pv(k).shape());
                    out.push(part);
                    offset += sz;
                }
                out
            }
            Op::ConcatCols { widths } => {
                let gm = as2(g);
                let mut out = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for &w in widths {
                    out.push(gm.slice(ndarray::s![.., offset..offset + w]).to_owned().into_dyn());
                    offset += w;
                }
                out
            }
            Op::SliceCols { start, len } => {
                let a = as2(pv(0));
                let gm = as2(g);
                let mut dx = Array2::zeros((a.nrows(), a.ncols()));
                dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&gm);
                vec![dx.into_dyn()]
            }
            Op::Reshape { from } => {
                let flat: Vec<F> = g.iter().cloned().collect();
                vec![ArrayD::from_shape_vec(IxDyn(from), flat).unwrap()]
            }
            Op::SumAll => {
                let gv = as1(g)[0];
                vec![ArrayD::from_elem(pv(0).raw_dim(), gv)]
            }
            Op::MeanAll => {
                let n = F::from_usize(pv(0).len()).unwrap();
                let gv = as1(g)[0] / n;
                vec![ArrayD::from_elem(pv(0).raw_dim(), gv)]
            }
            Op::MeanRows => {
                let a = as2(pv(0));
                let gv = as1(g);
                let scale = F::one() / F::from_usize(a.nrows()).unwrap();
                let mut dx = Array2::zeros((a.nrows(), a.ncols()));
                for i in 0..a.nrows() {
                    for j in 0..a.ncols() {
                        dx[(i, j)] = gv[j] * scale;
                    }
                }
                vec![dx.into_dyn()]
            }
            Op::Norm2 => {
                let norm = as1(&node.value)[0];
                let gv = as1(g)[0];
                if norm == F::zero() {
                    vec![ArrayD::zeros(pv(0).raw_dim())]
                } else {
                    vec![pv(0).mapv(|x| gv * x / norm)]
                }
            }
            Op::GatherRows { ids } => {
                let a = as2(pv(0));
                let gm = as2(g);
                let mut dx = Array2::zeros((a.nrows(), a.ncols()));
                for (row, &id) in ids.iter().enumerate() {
                    let mut dst = dx.row_mut(id);
                    dst += &gm.row(row);
                }
                vec![dx.into_dyn()]
            }
            Op::Conv2d { stride, pad } => {
                let x = as3(pv(0));
                let w = pv(1);
                let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let gmap = as3(g);
                let (ho, wo) = (gmap.shape()[1], gmap.shape()[2]);
                let gmat = Array2::from_shape_vec((cout, ho * wo), gmap.iter().cloned().collect())
                    .unwrap();
                let cols = im2col(&x, k, *stride, *pad, ho, wo);
                let dw_mat = gmat.dot(&cols.t()); // [cout, cin*k*k]
                let dw = ArrayD::from_shape_vec(
                    IxDyn(&[cout, cin, k, k]),
                    dw_mat.iter().cloned().collect(),
                )
                .unwrap();
                let wmat = flatten_weight(w, cout, cin * k * k);
                let dcols = wmat.t().dot(&gmat); // [cin*k*k, ho*wo]
                let dx = col2im(
                    &dcols,
                    cin,
                    x.shape()[1],
                    x.shape()[2],
                    k,
                    *stride,
                    *pad,
                    ho,
                    wo,
                );
                vec![dx.into_dyn(), dw]
            }
            Op::ChanBias => {
                let gmap = as3(g);
                let db = gmap.sum_axis(Axis(2)).sum_axis(Axis(1));
                vec![g.clone(), db.into_dyn()]
            }
            Op::LayerNorm { eps } => {
                let x = as2(pv(0));
                let gamma = as1(pv(1));
                let gm = as2(g);
                let n = F::from_usize(x.ncols()).unwrap();
                let mut dx = Array2::zeros(x.raw_dim());
                let mut dgamma = Array1::zeros(x.ncols());
                let mut dbeta = Array1::zeros(x.ncols());
                for i in 0..x.nrows() {
                    let row = x.row(i);
                    let mean = row.iter().cloned().sum::<F>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                    let sd = (var + *eps).sqrt();
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mean) / sd).collect();
                    let gg: Vec<F> =
                        (0..x.ncols()).map(|j| gm[(i, j)] * gamma[j]).collect();
                    let mean_gg = gg.iter().cloned().sum::<F>() / n;
                    let mean_gg_xhat = gg
                        .iter()
                        .zip(xhat.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<F>()
                        / n;
                    for j in 0..x.ncols() {
                        dx[(i, j)] = (gg[j] - mean_gg - xhat[j] * mean_gg_xhat) / sd;
                        dgamma[j] += gm[(i, j)] * xhat[j];
                        dbeta[j] += gm[(i, j)];
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }
            Op::MulMask { mask } => vec![g * mask],
        }
    }
}

fn as1<F: Scalar>(a: &ArrayD<F>) -> Array1<F> {
    a.view().into_dimensionality::<Ix1>().expect("expected rank-1").to_owned()
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> Array2<F> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2").to_owned()
}

fn as3<F: Scalar>(a: &ArrayD<F>) -> Array3<F> {
    a.view().into_dimensionality::<Ix3>().expect("expected rank-3").to_owned()
}

fn softmax1<F: Scalar>(x: &Array1<F>, valid: usize) -> Array1<F> {
    let max = x.iter().take(valid).cloned().fold(F::neg_infinity(), F::max);
    let mut out = Array1::zeros(x.len());
    let mut denom = F::zero();
    for j in 0..valid {
        let e = (x[j] - max).exp();
        out[j] = e;
        denom += e;
    }
    for j in 0..valid {
        out[j] = out[j] / denom;
    }
    out
}

fn flatten_weight<F: Scalar>(w: &ArrayD<F>, cout: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_vec((cout, cols), w.iter().cloned().collect()).unwrap()
}

/// Unrolls `[cin,h,w]` into `[cin*k*k, ho*wo]` patch columns (zero padding).
fn im2col<F: Scalar>(
    x: &Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::zeros((cin * k * k, ho * wo));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(c, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<F> {
    let mut dx = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        dx[(c, ii as usize, jj as usize)] += dcols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    dx
}
