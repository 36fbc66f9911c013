use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Relu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    Softmax {
        a: Var,
        temperature: F,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
        probs: Array2<F>,
        count: usize,
    },
    MeanPool {
        x: Var,
        mask: Array2<F>,
        counts: Vec<F>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Sum {
        a: Var,
    },
}

impl<F> Op<F> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MeanPool { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a } => vec![*a],
        }
    }
}

pub(crate) struct Node<F> {
    pub(crate) value: ArrayD<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Records array operations for reverse-mode differentiation.
///
/// Every node value is kept in standard (row-major) layout and is checked
/// for NaN/Inf when recorded.
pub struct Tape<F: Scalar> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn all_finite<F: Scalar>(a: &ArrayD<F>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub(crate) fn as_matrix<F: Scalar>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("tape values are kept in standard layout")
}

/// Reshapes in row-major order regardless of the input's memory layout.
pub(crate) fn reshaped<F: Scalar>(a: ArrayD<F>, shape: IxDyn) -> ArrayD<F> {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(shape)
        .expect("element count preserved")
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to_shape<F: Scalar>(mut g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at index `len` or later. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Records a leaf. Trainable leaves receive gradients on `backward`.
    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Result<Var> {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        if !all_finite(&value) {
            return Err(NumError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: ArrayD<F>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar node holds one element")
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: ArrayD<F>,
        op: Op<F>,
    ) -> Result<Var> {
        if !all_finite(&value) {
            return Err(NumError::NonFinite { op: op_name });
        }
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`. Repeated uses of a node sum
    /// their gradient contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(NumError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut pending: Vec<Option<ArrayD<F>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(ArrayD::from_elem(loss_value.raw_dim(), F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !all_finite(&g) {
                return Err(NumError::NonFinite { op: "backward" });
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
            } else {
                self.propagate(i, g, &mut pending);
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, pending: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut pending[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: ArrayD<F>, pending: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.len() / k;
                let b2 = as_matrix(bv, k, n);
                let g2 = as_matrix(&g, m, n);
                if self.wants(*a) {
                    let da = g2.dot(&b2.t());
                    let da = reshaped(da.into_dyn(), IxDyn(av.shape()));
                    self.accumulate(pending, *a, da);
                }
                if self.wants(*b) {
                    let a2 = as_matrix(av, m, k);
                    let db = a2.t().dot(&g2).into_dyn();
                    self.accumulate(pending, *b, db);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let batch = av.shape()[0];
                if self.wants(*a) {
                    let mut da = ArrayD::<F>::zeros(av.raw_dim());
                    for t in 0..batch {
                        let gi = g
                            .index_axis(Axis(0), t)
                            .into_dimensionality()
                            .expect("rank 2");
                        let bi: ArrayView2<F> = bv
                            .index_axis(Axis(0), t)
                            .into_dimensionality()
                            .expect("rank 2");
                        let mut out = da
                            .index_axis_mut(Axis(0), t)
                            .into_dimensionality()
                            .expect("rank 2");
                        if *transpose_b {
                            general_mat_mul(F::one(), &gi, &bi, F::zero(), &mut out);
                        } else {
                            general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut out);
                        }
                    }
                    self.accumulate(pending, *a, da);
                }
                if self.wants(*b) {
                    let mut db = ArrayD::<F>::zeros(bv.raw_dim());
                    for t in 0..batch {
                        let gi: ArrayView2<F> = g
                            .index_axis(Axis(0), t)
                            .into_dimensionality()
                            .expect("rank 2");
                        let ai: ArrayView2<F> = av
                            .index_axis(Axis(0), t)
                            .into_dimensionality()
                            .expect("rank 2");
                        let mut out = db
                            .index_axis_mut(Axis(0), t)
                            .into_dimensionality()
                            .expect("rank 2");
                        if *transpose_b {
                            general_mat_mul(F::one(), &gi.t(), &ai, F::zero(), &mut out);
                        } else {
                            general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut out);
                        }
                    }
                    self.accumulate(pending, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    let da = sum_to_shape(g.clone(), self.shape(*a));
                    self.accumulate(pending, *a, da);
                }
                if self.wants(*b) {
                    let db = sum_to_shape(g, self.shape(*b));
                    self.accumulate(pending, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.wants(*a) {
                    let prod = &g * bv;
                    self.accumulate(pending, *a, sum_to_shape(prod, av.shape()));
                }
                if self.wants(*b) {
                    let prod = &g * av;
                    self.accumulate(pending, *b, sum_to_shape(prod, bv.shape()));
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(pending, *a, g.mapv(|x| x * f));
            }
            Op::Relu { a } => {
                let mut da = g;
                da.zip_mut_with(&node.value, |d, &y| {
                    if y <= F::zero() {
                        *d = F::zero();
                    }
                });
                self.accumulate(pending, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = xhat.ncols();
                let rows = xhat.nrows();
                let g2 = as_matrix(&g, rows, d);
                let gam = self.value(*gamma);
                if self.wants(*gamma) {
                    let dg = (&g2 * xhat).sum_axis(Axis(0)).into_dyn();
                    self.accumulate(pending, *gamma, dg);
                }
                if self.wants(*beta) {
                    let db = g2.sum_axis(Axis(0)).into_dyn();
                    self.accumulate(pending, *beta, db);
                }
                if self.wants(*x) {
                    let dn = F::of(d as f64);
                    let mut dx = Array2::<F>::zeros((rows, d));
                    for r in 0..rows {
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for c in 0..d {
                            let dxh = g2[[r, c]] * gam[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[[r, c]];
                        }
                        let scale = inv_std[r] / dn;
                        for c in 0..d {
                            let dxh = g2[[r, c]] * gam[c];
                            dx[[r, c]] =
                                scale * (dn * dxh - sum_dxhat - xhat[[r, c]] * sum_dxhat_xhat);
                        }
                    }
                    let dx = reshaped(dx.into_dyn(), IxDyn(self.shape(*x)));
                    self.accumulate(pending, *x, dx);
                }
            }
            Op::Softmax { a, temperature } => {
                let y = &node.value;
                let d = *y.shape().last().expect("softmax rank >= 1");
                let rows = y.len() / d;
                let y2 = as_matrix(y, rows, d);
                let g2 = as_matrix(&g, rows, d);
                let inv_t = F::one() / *temperature;
                let mut dx = Array2::<F>::zeros((rows, d));
                for r in 0..rows {
                    let dot: F = (0..d).map(|c| g2[[r, c]] * y2[[r, c]]).sum();
                    for c in 0..d {
                        dx[[r, c]] = y2[[r, c]] * (g2[[r, c]] - dot) * inv_t;
                    }
                }
                let dx = reshaped(dx.into_dyn(), y.raw_dim());
                self.accumulate(pending, *a, dx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let h = tv.shape()[1];
                let g2 = as_matrix(&g, ids.len(), h);
                let mut dt = Array2::<F>::zeros((tv.shape()[0], h));
                for (row, &id) in ids.iter().enumerate() {
                    let mut dst = dt.row_mut(id);
                    dst += &g2.row(row);
                }
                self.accumulate(pending, *table, dt.into_dyn());
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                probs,
                count,
            } => {
                let scale = g.iter().next().copied().unwrap_or_else(F::one) / F::of(*count as f64);
                let mut dl = probs.clone();
                for (r, (&t, &ok)) in targets.iter().zip(valid.iter()).enumerate() {
                    let mut row = dl.row_mut(r);
                    if ok {
                        row[t] -= F::one();
                        row.mapv_inplace(|p| p * scale);
                    } else {
                        row.fill(F::zero());
                    }
                }
                let dl = reshaped(dl.into_dyn(), IxDyn(self.shape(*logits)));
                self.accumulate(pending, *logits, dl);
            }
            Op::MeanPool { x, mask, counts } => {
                let shape = self.shape(*x).to_vec();
                let (b, t, h) = (shape[0], shape[1], shape[2]);
                let mut dx = ArrayD::<F>::zeros(IxDyn(&shape));
                for bi in 0..b {
                    for ti in 0..t {
                        let w = mask[[bi, ti]] / counts[bi];
                        if w == F::zero() {
                            continue;
                        }
                        for hi in 0..h {
                            dx[[bi, ti, hi]] = g[[bi, hi]] * w;
                        }
                    }
                }
                self.accumulate(pending, *x, dx);
            }
            Op::Reshape { a } => {
                let da = reshaped(g, IxDyn(self.shape(*a)));
                self.accumulate(pending, *a, da);
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let da = g
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                self.accumulate(pending, *a, da);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        self.accumulate(pending, *p, piece);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                end,
            } => {
                let mut da = ArrayD::<F>::zeros(IxDyn(self.shape(*a)));
                da.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                    .assign(&g);
                self.accumulate(pending, *a, da);
            }
            Op::Sum { a } => {
                let s = g.iter().next().copied().unwrap_or_else(F::one);
                let da = ArrayD::from_elem(IxDyn(self.shape(*a)), s);
                self.accumulate(pending, *a, da);
            }
        }
    }
}
