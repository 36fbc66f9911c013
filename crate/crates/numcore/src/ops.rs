//! Forward rules for every recorded operation. Backward rules live next to
//! the tape sweep in `tape.rs`.

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tape::{as_matrix, reshaped, Op, Tape, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice, Zip};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumError::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

impl<F: Scalar> Tape<F> {
    /// `a` of shape `[.., k]` times a `[k, n]` matrix; leading axes of `a`
    /// are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.ndim() < 1 || bv.ndim() != 2 || av.shape()[av.ndim() - 1] != bv.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        let m = av.len() / k;
        let out = as_matrix(av, m, k).dot(&as_matrix(bv, k, n));
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let out = reshaped(out.into_dyn(), IxDyn(&shape));
        self.push("matmul", out, Op::MatMul { a, b })
    }

    /// Batched product of `[n, p, k]` with `[n, k, q]`, or with `[n, q, k]`
    /// transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let mismatch = || NumError::ShapeMismatch {
            op: "bmm",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch());
        }
        let (batch, p, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, q) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let mut out = ArrayD::<F>::zeros(IxDyn(&[batch, p, q]));
        for t in 0..batch {
            let ai: ArrayView2<F> = av
                .index_axis(Axis(0), t)
                .into_dimensionality()
                .expect("rank 2");
            let bi: ArrayView2<F> = bv
                .index_axis(Axis(0), t)
                .into_dimensionality()
                .expect("rank 2");
            let mut oi = out
                .index_axis_mut(Axis(0), t)
                .into_dimensionality()
                .expect("rank 2");
            if transpose_b {
                general_mat_mul(F::one(), &ai, &bi.t(), F::zero(), &mut oi);
            } else {
                general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
            }
        }
        self.push("bmm", out, Op::BatchMatMul { a, b, transpose_b })
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let out = {
            let av = self
                .value(a)
                .broadcast(IxDyn(&shape))
                .expect("broadcast checked");
            let bv = self
                .value(b)
                .broadcast(IxDyn(&shape))
                .expect("broadcast checked");
            Zip::from(&av).and(&bv).map_collect(|&x, &y| x + y)
        };
        self.push("add", out, Op::Add { a, b })
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let out = {
            let av = self
                .value(a)
                .broadcast(IxDyn(&shape))
                .expect("broadcast checked");
            let bv = self
                .value(b)
                .broadcast(IxDyn(&shape))
                .expect("broadcast checked");
            Zip::from(&av).and(&bv).map_collect(|&x, &y| x * y)
        };
        self.push("mul", out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let out = self.value(a).mapv(|x| x * factor);
        self.push("scale", out, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push("relu", out, Op::Relu { a })
    }

    /// Normalizes over the last axis, then applies gain and bias of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| NumError::invalid("layer_norm", "rank 0 input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(NumError::ShapeMismatch {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let rows = xv.len() / d;
        let x2 = as_matrix(xv, rows, d);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let dn = F::of(d as f64);
        let mut xhat = Array2::<F>::zeros((rows, d));
        let mut out = Array2::<F>::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[[r, c]] = h;
                out[[r, c]] = h * gv[c] + bv[c];
            }
        }
        let out = reshaped(out.into_dyn(), xv.raw_dim());
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax of `a / temperature` over the last axis.
    pub fn softmax(&mut self, a: Var, temperature: F) -> Result<Var> {
        if temperature <= F::zero() || !temperature.is_finite() {
            return Err(NumError::invalid(
                "softmax",
                format!("temperature must be > 0, got {temperature}"),
            ));
        }
        let av = self.value(a);
        let d = *av
            .shape()
            .last()
            .ok_or_else(|| NumError::invalid("softmax", "rank 0 input"))?;
        let rows = av.len() / d;
        let a2 = as_matrix(av, rows, d);
        let mut out = Array2::<F>::zeros((rows, d));
        for r in 0..rows {
            let row = a2.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut total = F::zero();
            for c in 0..d {
                let e = ((row[c] - max) / temperature).exp();
                out[[r, c]] = e;
                total += e;
            }
            out.row_mut(r).mapv_inplace(|e| e / total);
        }
        let out = reshaped(out.into_dyn(), av.raw_dim());
        self.push("softmax", out, Op::Softmax { a, temperature })
    }

    /// Gathers rows of a `[v, h]` table. `ids` is laid out row-major in
    /// `index_shape`; the result has shape `index_shape + [h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(NumError::invalid(
                "embedding",
                format!("table must be rank 2, got {:?}", tv.shape()),
            ));
        }
        if index_shape.iter().product::<usize>() != ids.len() {
            return Err(NumError::ShapeMismatch {
                op: "embedding",
                left: vec![ids.len()],
                right: index_shape.to_vec(),
            });
        }
        let (v, h) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Array2::<F>::zeros((ids.len(), h));
        for (row, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(NumError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.row_mut(row).assign(&tv.index_axis(Axis(0), id));
        }
        let mut shape = index_shape.to_vec();
        shape.push(h);
        let out = reshaped(out.into_dyn(), IxDyn(&shape));
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`
    /// over the last axis. Rows with `valid[r] == false` are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = *lv
            .shape()
            .last()
            .ok_or_else(|| NumError::invalid("cross_entropy", "rank 0 logits"))?;
        let rows = lv.len() / v;
        if targets.len() != rows || valid.is_some_and(|m| m.len() != rows) {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let valid: Vec<bool> = valid
            .map(<[bool]>::to_vec)
            .unwrap_or_else(|| vec![true; rows]);
        let count = valid.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(NumError::invalid("cross_entropy", "no valid target rows"));
        }
        let l2 = as_matrix(lv, rows, v);
        let mut probs = Array2::<F>::zeros((rows, v));
        let mut total = F::zero();
        for r in 0..rows {
            let row = l2.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut z = F::zero();
            for c in 0..v {
                let e = (row[c] - max).exp();
                probs[[r, c]] = e;
                z += e;
            }
            probs.row_mut(r).mapv_inplace(|e| e / z);
            if valid[r] {
                let t = targets[r];
                if t >= v {
                    return Err(NumError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: v,
                    });
                }
                total += z.ln() + max - row[t];
            }
        }
        let loss = ArrayD::from_elem(IxDyn(&[]), total / F::of(count as f64));
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid,
                probs,
                count,
            },
        )
    }

    /// Masked mean over the time axis of a `[b, t, h]` input.
    pub fn mean_pool(&mut self, x: Var, mask: &Array2<bool>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || mask.dim() != (xv.shape()[0], xv.shape()[1]) {
            return Err(NumError::ShapeMismatch {
                op: "mean_pool",
                left: xv.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let (b, t, h) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let maskf = mask.mapv(|m| if m { F::one() } else { F::zero() });
        let mut counts = Vec::with_capacity(b);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, h]));
        for bi in 0..b {
            let c: F = maskf.row(bi).sum();
            if c == F::zero() {
                return Err(NumError::invalid(
                    "mean_pool",
                    format!("example {bi} is fully masked"),
                ));
            }
            counts.push(c);
            for ti in 0..t {
                if !mask[[bi, ti]] {
                    continue;
                }
                for hi in 0..h {
                    out[[bi, hi]] += xv[[bi, ti, hi]] / c;
                }
            }
        }
        self.push(
            "mean_pool",
            out,
            Op::MeanPool {
                x,
                mask: maskf,
                counts,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                left: av.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = reshaped(av.clone(), IxDyn(shape));
        self.push("reshape", out, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.ndim()];
        if axes.len() != av.ndim()
            || axes
                .iter()
                .any(|&x| x >= av.ndim() || std::mem::replace(&mut seen[x], true))
        {
            return Err(NumError::invalid(
                "permute",
                format!("bad axes {axes:?} for shape {:?}", av.shape()),
            ));
        }
        let out = av
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(
            "permute",
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes checked");
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() || start > end || end > av.shape()[axis] {
            return Err(NumError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", av.shape()),
            ));
        }
        let out = av
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.push(
            "slice",
            out,
            Op::Slice {
                a,
                axis,
                start,
                end,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push("sum", out, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::of(n as f64))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -F::one())?;
        self.add(a, nb)
    }
}
