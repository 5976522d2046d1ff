//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value; nodes are
//! therefore topologically ordered by construction and [`Graph::backward`]
//! walks them once in reverse. Gradients accumulate additively, so a value
//! consumed by several operations receives the sum of its contributions.
//! Nodes whose inputs carry no gradient requirement are skipped entirely,
//! which keeps frozen sub-networks cheap during finetuning.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_acc, gemm_at_b_acc, transpose_block, Tensor};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Boolean allow-matrix for attention. `allow[r * cols + c]` permits row `r`
/// to attend to column `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Arc<Vec<bool>>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Dimension {
                op: "attention_mask",
                lhs: vec![rows, cols],
                rhs: vec![allow.len()],
            });
        }
        Ok(Self {
            rows,
            cols,
            allow: Arc::new(allow),
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: Arc::new(vec![true; rows * cols]),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax {
        x: Var,
    },
    Rope {
        x: Var,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    GroupMeanRows {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    #[cfg(test)]
    Broken(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Reverse-mode gradients, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` for values that do
    /// not require gradients or did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut [T] {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn gelu_tanh<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + three * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `x[..., d] + bias[d]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_bias", v, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    /// `a[..., m, k] · b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "batch_matmul",
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        )
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 3) {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = self.value(x).len() / (rows * cols).max(1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..batch {
            out.extend(transpose_block(
                &src[b * rows * cols..(b + 1) * rows * cols],
                rows,
                cols,
            ));
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        self.push(
            "transpose",
            Tensor::from_parts(new_shape, out),
            Op::Transpose(x),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Index {
                op: "slice",
                detail: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = width;
        self.push(
            "slice",
            Tensor::from_parts(new_shape, out),
            Op::Slice { x, axis, start },
            &[x],
        )
    }

    /// Rows `[start, end)` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(x, 0, start, end)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Index {
                op: "concat",
                detail: format!("axis {axis} on shape {base_shape:?}"),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| gelu_tanh(e).0);
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    /// Normalize over the last axis, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let inv_d = T::one() / T::of_usize(d);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis with disallowed entries forced to exactly
    /// zero. `scores` has shape `[..., rows, cols]` and the mask is shared by
    /// every leading index.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Contract("softmax of rank-0".into()))?;
        let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if let Some(m) = mask {
            if m.rows != rows || m.cols != cols {
                return Err(Error::Dimension {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: vec![m.rows, m.cols],
                });
            }
            for r in 0..rows {
                if !(0..cols).any(|c| m.allowed(r, c)) {
                    return Err(Error::DegenerateAttention { row: r });
                }
            }
        }
        let src = self.value(scores).data();
        let mut out = vec![T::zero(); src.len()];
        for (idx, (row_in, row_out)) in src.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let r = idx % rows;
            let allowed = |c: usize| mask.map_or(true, |m| m.allowed(r, c));
            let mut max = T::neg_infinity();
            for (c, &v) in row_in.iter().enumerate() {
                if allowed(c) && v > max {
                    max = v;
                }
            }
            let mut denom = T::zero();
            for (c, (&v, o)) in row_in.iter().zip(row_out.iter_mut()).enumerate() {
                if allowed(c) {
                    let e = (v - max).exp();
                    *o = e;
                    denom += e;
                }
            }
            for o in row_out.iter_mut() {
                *o /= denom;
            }
        }
        self.push(
            "masked_softmax",
            Tensor::from_parts(shape, out),
            Op::MaskedSoftmax { x: scores },
            &[scores],
        )
    }

    /// Rotary embedding of `x[heads, n, dh]`: consecutive pairs `(2i, 2i+1)`
    /// of row `t` are rotated by the angle whose cosine/sine are stored at
    /// `cos[t * dh/2 + i]` / `sin[t * dh/2 + i]`.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[2] % 2 != 0 {
            return Err(Error::Dimension {
                op: "rope",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (heads, n, dh) = (shape[0], shape[1], shape[2]);
        let half = dh / 2;
        if cos.len() != n * half || sin.len() != n * half {
            return Err(Error::Dimension {
                op: "rope",
                lhs: shape,
                rhs: vec![cos.len()],
            });
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for h in 0..heads {
            for t in 0..n {
                let base = (h * n + t) * dh;
                for i in 0..half {
                    let (c, s) = (cos[t * half + i], sin[t * half + i]);
                    let (x0, x1) = (src[base + 2 * i], src[base + 2 * i + 1]);
                    out[base + 2 * i] = x0 * c - x1 * s;
                    out[base + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        self.push(
            "rope",
            Tensor::from_parts(shape, out),
            Op::Rope { x, cos, sin },
            &[x],
        )
    }

    /// `[n, heads * dh] -> [heads, n, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
            return Err(Error::Dimension {
                op: "split_heads",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for t in 0..n {
            for h in 0..heads {
                out[(h * n + t) * dh..(h * n + t + 1) * dh]
                    .copy_from_slice(&src[t * d + h * dh..t * d + (h + 1) * dh]);
            }
        }
        self.push(
            "split_heads",
            Tensor::from_parts(vec![heads, n, dh], out),
            Op::SplitHeads { x, heads },
            &[x],
        )
    }

    /// `[heads, n, dh] -> [n, heads * dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension {
                op: "merge_heads",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (heads, n, dh) = (shape[0], shape[1], shape[2]);
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for h in 0..heads {
            for t in 0..n {
                out[t * d + h * dh..t * d + (h + 1) * dh]
                    .copy_from_slice(&src[(h * n + t) * dh..(h * n + t + 1) * dh]);
            }
        }
        self.push(
            "merge_heads",
            Tensor::from_parts(vec![n, d], out),
            Op::MergeHeads(x),
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / T::of_usize(t.len()));
        self.push("mean", v, Op::Mean(x), &[x])
    }

    /// `out[i] = x[index[i]]` along the first axis.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::Contract("gather on rank-0".into()))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                detail: format!("row {bad} of {rows}"),
            });
        }
        let width = self.value(x).len() / rows.max(1);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = index.len();
        self.push(
            "gather_rows",
            Tensor::from_parts(new_shape, out),
            Op::GatherRows { x, index },
            &[x],
        )
    }

    /// `out[g] = mean of x rows listed in groups[g]` along the first axis.
    pub fn group_mean_rows(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::Contract("pool on rank-0".into()))?;
        for g in groups.iter() {
            if g.is_empty() {
                return Err(Error::Contract("empty pooling group".into()));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= rows) {
                return Err(Error::Index {
                    op: "group_mean_rows",
                    detail: format!("row {bad} of {rows}"),
                });
            }
        }
        let width = self.value(x).len() / rows.max(1);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * width];
        for (gi, g) in groups.iter().enumerate() {
            let dst = &mut out[gi * width..(gi + 1) * width];
            for &r in g {
                for (o, &v) in dst.iter_mut().zip(&src[r * width..(r + 1) * width]) {
                    *o += v;
                }
            }
            let n = T::of_usize(g.len());
            for o in dst.iter_mut() {
                *o /= n;
            }
        }
        let mut new_shape = shape;
        new_shape[0] = groups.len();
        self.push(
            "group_mean_rows",
            Tensor::from_parts(new_shape, out),
            Op::GroupMeanRows { x, groups },
            &[x],
        )
    }

    /// Identity forward with a deliberately wrong (doubled) gradient, used to
    /// prove the gradient checker catches broken rules.
    #[cfg(test)]
    pub(crate) fn broken_identity(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.push("broken", v, Op::Broken(x), &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        for (o, &x) in acc!(*v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if wants(b) {
                    for (o, &x) in acc!(*b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(a) {
                    let ga = acc!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if wants(b) {
                    let gb = acc!(*b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(x) {
                    for (o, &v) in acc!(*x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if wants(bias) {
                    let gb = acc!(*bias);
                    let d = gb.len();
                    for row in g.chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    for (o, &v) in acc!(*x).iter_mut().zip(g) {
                        *o += v * *c;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k;
                if wants(a) {
                    let bt = transpose_block(tb.data(), k, n);
                    gemm_acc(g, &bt, acc!(*a), m, n, k);
                }
                if wants(b) {
                    gemm_at_b_acc(ta.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                    let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                    if wants(a) {
                        let bt = transpose_block(bi, k, n);
                        gemm_acc(gi, &bt, &mut acc!(*a)[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                    if wants(b) {
                        gemm_at_b_acc(ai, gi, &mut acc!(*b)[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(x) {
                    let shape = node.value.shape();
                    let r = shape.len();
                    let (rows, cols) = (shape[r - 2], shape[r - 1]);
                    let block = rows * cols;
                    let gx = acc!(*x);
                    for b in 0..g.len() / block.max(1) {
                        let t = transpose_block(&g[b * block..(b + 1) * block], rows, cols);
                        for (o, v) in gx[b * block..(b + 1) * block].iter_mut().zip(t) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(x) {
                    for (o, &v) in acc!(*x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if wants(x) {
                    let in_shape = nodes[x.0].value.shape();
                    let (outer, len, inner) = split_axis(in_shape, *axis);
                    let width = node.value.shape()[*axis];
                    let gx = acc!(*x);
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for (d, &v) in gx[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&g[src..src + width * inner])
                        {
                            *d += v;
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if wants(v) {
                        let gx = acc!(*v);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (d, &val) in gx[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *d += val;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let xv = nodes[x.0].value.data();
                    let gx = acc!(*x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_tanh(xv[i]).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = nodes[gamma.0].value.data();
                let d = gam.len();
                let rows = g.len() / d;
                if wants(gamma) {
                    let gg = acc!(*gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(beta) {
                    let gb = acc!(*beta);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(x) {
                    let inv_d = T::one() / T::of_usize(d);
                    let gx = acc!(*x);
                    for r in 0..rows {
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xhat = T::zero();
                        for j in 0..d {
                            let dy = g[r * d + j] * gam[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[r * d + j];
                        }
                        mean_dy *= inv_d;
                        mean_dy_xhat *= inv_d;
                        for j in 0..d {
                            let dy = g[r * d + j] * gam[j];
                            gx[r * d + j] +=
                                rstd[r] * (dy - mean_dy - xhat[r * d + j] * mean_dy_xhat);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                if wants(x) {
                    let y = node.value.data();
                    let cols = node.value.last_dim();
                    let gx = acc!(*x);
                    for ((yr, gr), or) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            or[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin } => {
                if wants(x) {
                    let shape = node.value.shape();
                    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
                    let half = dh / 2;
                    let gx = acc!(*x);
                    for h in 0..heads {
                        for t in 0..n {
                            let base = (h * n + t) * dh;
                            for i in 0..half {
                                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                                let (g0, g1) = (g[base + 2 * i], g[base + 2 * i + 1]);
                                gx[base + 2 * i] += g0 * c + g1 * s;
                                gx[base + 2 * i + 1] += g1 * c - g0 * s;
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if wants(x) {
                    let shape = node.value.shape();
                    let (n, dh) = (shape[1], shape[2]);
                    let d = heads * dh;
                    let gx = acc!(*x);
                    for t in 0..n {
                        for h in 0..*heads {
                            for j in 0..dh {
                                gx[t * d + h * dh + j] += g[(h * n + t) * dh + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads(x) => {
                if wants(x) {
                    let shape = nodes[x.0].value.shape();
                    let (heads, n, dh) = (shape[0], shape[1], shape[2]);
                    let d = heads * dh;
                    let gx = acc!(*x);
                    for h in 0..heads {
                        for t in 0..n {
                            for j in 0..dh {
                                gx[(h * n + t) * dh + j] += g[t * d + h * dh + j];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    for o in acc!(*x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let gx = acc!(*x);
                    let share = g[0] / T::of_usize(gx.len());
                    for o in gx.iter_mut() {
                        *o += share;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if wants(x) {
                    let width = node.value.len() / index.len().max(1);
                    let gx = acc!(*x);
                    for (i, &src) in index.iter().enumerate() {
                        for j in 0..width {
                            gx[src * width + j] += g[i * width + j];
                        }
                    }
                }
            }
            Op::GroupMeanRows { x, groups } => {
                if wants(x) {
                    let width = node.value.len() / groups.len().max(1);
                    let gx = acc!(*x);
                    for (gi, grp) in groups.iter().enumerate() {
                        let n = T::of_usize(grp.len());
                        for &r in grp {
                            for j in 0..width {
                                gx[r * width + j] += g[gi * width + j] / n;
                            }
                        }
                    }
                }
            }
            #[cfg(test)]
            Op::Broken(x) => {
                if wants(x) {
                    let two = T::of(2.0);
                    for (o, &v) in acc!(*x).iter_mut().zip(g) {
                        *o += two * v;
                    }
                }
            }
        }
    }
}
