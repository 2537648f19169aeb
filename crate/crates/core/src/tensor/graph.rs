use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::{Real, Tensor, TensorError, TensorResult};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(usize),
    SumAll(usize),
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Exp(usize),
    Ln(usize),
    MaxConst(usize, T),
    L2Norm {
        a: usize,
        width: usize,
    },
    Cosine {
        a: usize,
        b: usize,
        m: usize,
        n: usize,
        width: usize,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Select {
        a: usize,
        index: usize,
        block: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        width: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        width: usize,
        frozen: Option<usize>,
    },
    Conv1d {
        x: usize,
        k: usize,
        b: usize,
        rows: usize,
        d: usize,
        c_out: usize,
        ks: usize,
    },
    TConv1d {
        u: usize,
        k: usize,
        b: usize,
        positions: usize,
        c_in: usize,
        ks: usize,
        d: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: usize,
        rows: usize,
        cols: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
    },
    TConv2d {
        u: usize,
        k: usize,
        b: usize,
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
    },
    MaxPool {
        x: usize,
        indices: Vec<usize>,
        c: usize,
    },
    MaxUnpool {
        v: usize,
        indices: Vec<usize>,
        c: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Accumulated adjoints of the differentiable leaves, keyed by node id.
/// A missing entry means the gradient is identically zero.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var.0)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Tape of recorded operations. Node ids are assigned in creation order,
/// which is already a topological order of the computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> TensorResult<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.zip_with("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let value = self.zip_with("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.map(a, |x| x * c);
        self.push(value, Op::Scale(a.0, c), &[a.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va[i * k + p];
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + x * vb[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> TensorResult<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => {
                return Err(TensorError::InvalidShape {
                    op: "concatenate",
                    shape: vec![],
                    reason: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concatenate",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concatenate",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(*v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(
            value,
            Op::Concat {
                inputs: ids.clone(),
                outer,
                inner,
            },
            &ids,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), &[a.0])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "sum-reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + data[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::SumAxis {
                a: a.0,
                outer,
                len,
                inner,
            },
            &[a.0],
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        let s = self.sum_axis(a, axis)?;
        let n = T::from_f64(self.shape(a)[axis] as f64);
        Ok(self.scale(s, T::one() / n))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.exp());
        self.push(value, Op::Exp(a.0), &[a.0])
    }

    pub fn ln(&mut self, a: Var) -> TensorResult<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(TensorError::Domain { op: "natural-log" });
        }
        let value = self.map(a, |x| x.ln());
        Ok(self.push(value, Op::Ln(a.0), &[a.0]))
    }

    /// Elementwise `max(x, c)`; the gradient passes where `x > c`.
    pub fn max_const(&mut self, a: Var, c: T) -> Var {
        let value = self.map(a, |x| if x > c { x } else { c });
        self.push(value, Op::MaxConst(a.0, c), &[a.0])
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        let width = match shape.last() {
            Some(&w) => w,
            None => {
                return Err(TensorError::InvalidShape {
                    op: "l2-norm",
                    shape,
                    reason: "needs rank >= 1".into(),
                })
            }
        };
        let out = self
            .value(a)
            .data()
            .chunks(width)
            .map(|row| row.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        Ok(self.push(value, Op::L2Norm { a: a.0, width }, &[a.0]))
    }

    /// Cosine similarity. Two vectors give a scalar; an `m × w` and an
    /// `n × w` matrix give the `m × n` matrix of row-pair similarities.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, n, width, out_shape) = match (sa.len(), sb.len()) {
            (1, 1) if sa == sb => (1, 1, sa[0], vec![]),
            (2, 2) if sa[1] == sb[1] => (sa[0], sb[0], sa[1], vec![sa[0], sb[0]]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "cosine-similarity",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let norms = |data: &[T]| -> Vec<T> {
            data.chunks(width)
                .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
                .collect()
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let norm_a = norms(va);
        let norm_b = norms(vb);
        for ns in [&norm_a, &norm_b] {
            if let Some(index) = ns.iter().position(|&x| x == T::zero()) {
                return Err(TensorError::ZeroNorm {
                    op: "cosine-similarity",
                    index,
                });
            }
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ra = &va[i * width..(i + 1) * width];
            for j in 0..n {
                let rb = &vb[j * width..(j + 1) * width];
                let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                out[i * n + j] = dot / (norm_a[i] * norm_b[j]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Cosine {
                a: a.0,
                b: b.0,
                m,
                n,
                width,
                norm_a,
                norm_b,
            },
            &[a.0, b.0],
        ))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> TensorResult<(usize, usize, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(split_axis(shape, axis))
    }

    /// Per-lane log-sum-exp with the max shift, laid out as `outer × inner`.
    fn log_sum_exp(&self, a: Var, outer: usize, len: usize, inner: usize) -> Vec<T> {
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| data[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(T::neg_infinity(), T::max);
                let s: T = (0..len).map(|l| (at(l) - m).exp()).sum();
                out.push(m + s.ln());
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        let (outer, len, inner) = self.check_axis("softmax", a, axis)?;
        let lse = self.log_sum_exp(a, outer, len, inner);
        let src = self.value(a);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let idx = (o * len + l) * inner + i;
                    out[idx] = (out[idx] - lse[o * inner + i]).exp();
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            &[a.0],
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> TensorResult<Var> {
        let (outer, len, inner) = self.check_axis("log-softmax", a, axis)?;
        let lse = self.log_sum_exp(a, outer, len, inner);
        let src = self.value(a);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let idx = (o * len + l) * inner + i;
                    out[idx] = out[idx] - lse[o * inner + i];
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LogSoftmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            &[a.0],
        ))
    }

    /// `a[index]` along the first axis.
    pub fn select(&mut self, a: Var, index: usize) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "select",
                shape,
                reason: "needs rank >= 2".into(),
            });
        }
        if index >= shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "select",
                index,
                bound: shape[0],
            });
        }
        let block: usize = shape[1..].iter().product();
        let data = self.value(a).data()[index * block..(index + 1) * block].to_vec();
        let value = Tensor::new(shape[1..].to_vec(), data)?;
        Ok(self.push(value, Op::Select { a: a.0, index, block }, &[a.0]))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice-rows",
                index: start + len,
                bound: shape.first().copied().unwrap_or(0),
            });
        }
        let width: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * width..(start + len) * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SliceRows { a: a.0, start, width }, &[a.0]))
    }

    /// Row lookup `table[ids[i]]`. Gradient never reaches row `frozen`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], frozen: Option<usize>) -> TensorResult<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape,
                reason: "table must be rank 2".into(),
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape,
                reason: "no ids".into(),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        let value = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
                width,
                frozen,
            },
            &[table.0],
        ))
    }

    /// TextCNN convolution: `input` is `P × d`, `kernels` is `c_out × ks × d`,
    /// `bias` is `c_out`; output is `(P-ks+1) × c_out`.
    pub fn conv1d_valid(&mut self, input: Var, kernels: Var, bias: Var) -> TensorResult<Var> {
        let (si, sk, sb) = (
            self.shape(input).to_vec(),
            self.shape(kernels).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 2 || sk.len() != 3 || sk[2] != si[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: si,
                rhs: sk,
            });
        }
        if sb != [sk[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sk,
                rhs: sb,
            });
        }
        let (rows, d, c_out, ks) = (si[0], si[1], sk[0], sk[1]);
        if rows < ks {
            return Err(TensorError::SequenceTooShort {
                op: "conv1d",
                len: rows,
                kernel: ks,
            });
        }
        let positions = rows + 1 - ks;
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..positions).flat_map(|_| b.iter().copied()).collect();
        kernels::conv1d_acc(
            self.value(input).data(),
            rows,
            d,
            self.value(kernels).data(),
            c_out,
            ks,
            &mut out,
        );
        let value = Tensor::new(vec![positions, c_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x: input.0,
                k: kernels.0,
                b: bias.0,
                rows,
                d,
                c_out,
                ks,
            },
            &[input.0, kernels.0, bias.0],
        ))
    }

    /// Adjoint-forward of [`Graph::conv1d_valid`]: `input` is `P × c_in`,
    /// `kernels` is `c_in × ks × d`, `bias` is `d`; output is `(P+ks-1) × d`.
    pub fn transposed_conv1d(&mut self, input: Var, kernels: Var, bias: Var) -> TensorResult<Var> {
        let (si, sk, sb) = (
            self.shape(input).to_vec(),
            self.shape(kernels).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 2 || sk.len() != 3 || sk[0] != si[1] {
            return Err(TensorError::ShapeMismatch {
                op: "transposed-conv1d",
                lhs: si,
                rhs: sk,
            });
        }
        if sb != [sk[2]] {
            return Err(TensorError::ShapeMismatch {
                op: "transposed-conv1d",
                lhs: sk,
                rhs: sb,
            });
        }
        let (positions, c_in, ks, d) = (si[0], si[1], sk[1], sk[2]);
        let rows = positions + ks - 1;
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        kernels::conv1d_scatter_acc(
            self.value(input).data(),
            positions,
            c_in,
            self.value(kernels).data(),
            ks,
            d,
            &mut out,
        );
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::TConv1d {
                u: input.0,
                k: kernels.0,
                b: bias.0,
                positions,
                c_in,
                ks,
                d,
            },
            &[input.0, kernels.0, bias.0],
        ))
    }

    /// Valid 2D cross-correlation of one `R × C` plane with `c_out × kh × kw`
    /// kernels; output is `c_out × (R-kh+1) × (C-kw+1)`.
    pub fn conv2d_valid(&mut self, input: Var, kernels: Var, bias: Var) -> TensorResult<Var> {
        let (si, sk, sb) = (
            self.shape(input).to_vec(),
            self.shape(kernels).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 2 || sk.len() != 3 || sb != [sk[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (rows, cols, c_out, kh, kw) = (si[0], si[1], sk[0], sk[1], sk[2]);
        if rows < kh || cols < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: si,
                reason: format!("plane smaller than {kh}x{kw} kernel"),
            });
        }
        let (out_r, out_c) = (rows + 1 - kh, cols + 1 - kw);
        let b = self.value(bias).data();
        let mut out: Vec<T> = b
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, out_r * out_c))
            .collect();
        kernels::conv2d_acc(
            self.value(input).data(),
            rows,
            cols,
            self.value(kernels).data(),
            c_out,
            kh,
            kw,
            &mut out,
        );
        let value = Tensor::new(vec![c_out, out_r, out_c], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: input.0,
                k: kernels.0,
                b: bias.0,
                rows,
                cols,
                c_out,
                kh,
                kw,
            },
            &[input.0, kernels.0, bias.0],
        ))
    }

    /// Adjoint-forward of [`Graph::conv2d_valid`]: maps `c_in × H × W` back to
    /// one `(H+kh-1) × (W+kw-1)` plane. `bias` has shape `[1]`.
    pub fn transposed_conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> TensorResult<Var> {
        let (si, sk, sb) = (
            self.shape(input).to_vec(),
            self.shape(kernels).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 3 || sk.len() != 3 || sk[0] != si[0] || sb != [1] {
            return Err(TensorError::ShapeMismatch {
                op: "transposed-conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (c_in, h, w, kh, kw) = (si[0], si[1], si[2], sk[1], sk[2]);
        let (rows, cols) = (h + kh - 1, w + kw - 1);
        let mut out = vec![self.value(bias).data()[0]; rows * cols];
        kernels::conv2d_scatter_acc(
            self.value(input).data(),
            c_in,
            h,
            w,
            self.value(kernels).data(),
            kh,
            kw,
            &mut out,
        );
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            value,
            Op::TConv2d {
                u: input.0,
                k: kernels.0,
                b: bias.0,
                c_in,
                h,
                w,
                kh,
                kw,
            },
            &[input.0, kernels.0, bias.0],
        ))
    }

    /// Max over the first `valid` positions of a `P × c` map. Returns the
    /// pooled `c` vector and the argmax rows (lowest index on ties).
    pub fn max_pool_time(&mut self, input: Var, valid: usize) -> TensorResult<(Var, Vec<usize>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "max-pool",
                shape,
                reason: "needs a P x c map".into(),
            });
        }
        let (p, c) = (shape[0], shape[1]);
        if valid == 0 || valid > p {
            return Err(TensorError::IndexOutOfRange {
                op: "max-pool",
                index: valid,
                bound: p,
            });
        }
        let data = self.value(input).data();
        let mut values = Vec::with_capacity(c);
        let mut indices = Vec::with_capacity(c);
        for o in 0..c {
            let mut best = 0;
            for row in 1..valid {
                if data[row * c + o] > data[best * c + o] {
                    best = row;
                }
            }
            values.push(data[best * c + o]);
            indices.push(best);
        }
        let value = Tensor::new(vec![c], values)?;
        let var = self.push(
            value,
            Op::MaxPool {
                x: input.0,
                indices: indices.clone(),
                c,
            },
            &[input.0],
        );
        Ok((var, indices))
    }

    /// Places `values[o]` at row `indices[o]` of a zero `len × c` map.
    pub fn max_unpool_time(&mut self, values: Var, indices: &[usize], len: usize) -> TensorResult<Var> {
        let shape = self.shape(values).to_vec();
        if shape.len() != 1 || shape[0] != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "max-unpool",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        let c = indices.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::IndexOutOfRange {
                op: "max-unpool",
                index: bad,
                bound: len,
            });
        }
        let v = self.value(values).data();
        let mut out = vec![T::zero(); len * c];
        for (o, &row) in indices.iter().enumerate() {
            out[row * c + o] = v[o];
        }
        let value = Tensor::new(vec![len, c], out)?;
        Ok(self.push(
            value,
            Op::MaxUnpool {
                v: values.0,
                indices: indices.to_vec(),
                c,
            },
            &[values.0],
        ))
    }

    /// Inverted dropout. Rate 0 returns `input` itself and draws nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> TensorResult<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.value(input).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = self.value(input);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x: input.0, mask }, &[input.0]))
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns the adjoints of every
    /// differentiable leaf reached.
    pub fn backward(&self, loss: Var) -> TensorResult<GradientMap<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut result = GradientMap::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                result.grads.insert(id, t);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], idx: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let n = self.nodes[idx].value.numel();
        let buf = grads[idx].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (t, &x) in gb.iter_mut().zip(g) {
                        *t = *t - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for ((t, &x), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *t = *t + x * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((t, &x), &y) in gb.iter_mut().zip(g).zip(va) {
                        *t = *t + x * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| {
                    for (t, &x) in ga.iter_mut().zip(g) {
                        *t = *t + x * *c;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, outer, inner } => {
                let total_block = g.len() / outer;
                let mut offset = 0;
                for &inp in inputs {
                    let block = self.nodes[inp].value.numel() / outer;
                    self.acc(grads, inp, |gi| {
                        for o in 0..*outer {
                            let src = &g[o * total_block + offset..o * total_block + offset + block];
                            add_into(&mut gi[o * block..(o + 1) * block], src);
                        }
                    });
                    offset += block;
                }
                debug_assert_eq!(offset % inner, 0);
            }
            Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::SumAll(a) => {
                let s = g[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|t| *t = *t + s));
            }
            Op::SumAxis { a, outer, len, inner } => {
                self.acc(grads, *a, |ga| {
                    for o in 0..*outer {
                        for l in 0..*len {
                            for i in 0..*inner {
                                let idx = (o * len + l) * inner + i;
                                ga[idx] = ga[idx] + g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |ga| {
                    for ((t, &x), &e) in ga.iter_mut().zip(g).zip(y) {
                        *t = *t + x * e;
                    }
                });
            }
            Op::Ln(a) => {
                let va = val(*a);
                self.acc(grads, *a, |ga| {
                    for ((t, &x), &v) in ga.iter_mut().zip(g).zip(va) {
                        *t = *t + x / v;
                    }
                });
            }
            Op::MaxConst(a, c) => {
                let va = val(*a);
                self.acc(grads, *a, |ga| {
                    for ((t, &x), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v > *c {
                            *t = *t + x;
                        }
                    }
                });
            }
            Op::L2Norm { a, width } => {
                let (va, norms) = (val(*a), node.value.data());
                self.acc(grads, *a, |ga| {
                    for (r, (&gr, &nr)) in g.iter().zip(norms).enumerate() {
                        if nr == T::zero() {
                            continue;
                        }
                        for k in 0..*width {
                            let idx = r * width + k;
                            ga[idx] = ga[idx] + gr * va[idx] / nr;
                        }
                    }
                });
            }
            Op::Cosine {
                a,
                b,
                m,
                n,
                width,
                norm_a,
                norm_b,
            } => {
                let (m, n, w) = (*m, *n, *width);
                let (va, vb, cos) = (val(*a), val(*b), node.value.data());
                // d cos(a,b)/da = b/(|a||b|) - cos·a/|a|²
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let c1 = gij / (norm_a[i] * norm_b[j]);
                            let c2 = gij * cos[i * n + j] / (norm_a[i] * norm_a[i]);
                            for k in 0..w {
                                ga[i * w + k] = ga[i * w + k] + c1 * vb[j * w + k] - c2 * va[i * w + k];
                            }
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let c1 = gij / (norm_a[i] * norm_b[j]);
                            let c2 = gij * cos[i * n + j] / (norm_b[j] * norm_b[j]);
                            for k in 0..w {
                                gb[j * w + k] = gb[j * w + k] + c1 * va[i * w + k] - c2 * vb[j * w + k];
                            }
                        }
                    }
                });
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                self.acc(grads, *a, |ga| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..*len {
                                ga[idx(l)] = ga[idx(l)] + y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a, outer, len, inner } => {
                let y = node.value.data();
                self.acc(grads, *a, |ga| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let total: T = (0..*len).map(|l| g[idx(l)]).sum();
                            for l in 0..*len {
                                ga[idx(l)] = ga[idx(l)] + g[idx(l)] - y[idx(l)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Select { a, index, block } => {
                self.acc(grads, *a, |ga| add_into(&mut ga[index * block..(index + 1) * block], g));
            }
            Op::SliceRows { a, start, width } => {
                self.acc(grads, *a, |ga| add_into(&mut ga[start * width..start * width + g.len()], g));
            }
            Op::Gather {
                table,
                ids,
                width,
                frozen,
            } => {
                let w = *width;
                self.acc(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *frozen {
                            continue;
                        }
                        add_into(&mut gt[id * w..(id + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Conv1d {
                x,
                k,
                b,
                rows,
                d,
                c_out,
                ks,
            } => {
                let positions = rows + 1 - ks;
                self.acc(grads, *x, |gx| {
                    kernels::conv1d_scatter_acc(g, positions, *c_out, val(*k), *ks, *d, gx)
                });
                self.acc(grads, *k, |gk| {
                    kernels::conv1d_kernel_grad_acc(val(*x), g, positions, *c_out, *ks, *d, gk)
                });
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(*c_out) {
                        add_into(gb, row);
                    }
                });
            }
            Op::TConv1d {
                u,
                k,
                b,
                positions,
                c_in,
                ks,
                d,
            } => {
                let rows = positions + ks - 1;
                self.acc(grads, *u, |gu| kernels::conv1d_acc(g, rows, *d, val(*k), *c_in, *ks, gu));
                self.acc(grads, *k, |gk| {
                    kernels::conv1d_kernel_grad_acc(g, val(*u), *positions, *c_in, *ks, *d, gk)
                });
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(*d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Conv2d {
                x,
                k,
                b,
                rows,
                cols,
                c_out,
                kh,
                kw,
            } => {
                let (h, w) = (rows + 1 - kh, cols + 1 - kw);
                self.acc(grads, *x, |gx| {
                    kernels::conv2d_scatter_acc(g, *c_out, h, w, val(*k), *kh, *kw, gx)
                });
                self.acc(grads, *k, |gk| {
                    kernels::conv2d_kernel_grad_acc(val(*x), g, *c_out, h, w, *kh, *kw, gk)
                });
                self.acc(grads, *b, |gb| {
                    for (o, plane) in g.chunks(h * w).enumerate() {
                        gb[o] = gb[o] + plane.iter().copied().sum::<T>();
                    }
                });
            }
            Op::TConv2d {
                u,
                k,
                b,
                c_in,
                h,
                w,
                kh,
                kw,
            } => {
                let (rows, cols) = (h + kh - 1, w + kw - 1);
                self.acc(grads, *u, |gu| {
                    kernels::conv2d_acc(g, rows, cols, val(*k), *c_in, *kh, *kw, gu)
                });
                self.acc(grads, *k, |gk| {
                    kernels::conv2d_kernel_grad_acc(g, val(*u), *c_in, *h, *w, *kh, *kw, gk)
                });
                self.acc(grads, *b, |gb| gb[0] = gb[0] + g.iter().copied().sum::<T>());
            }
            Op::MaxPool { x, indices, c } => {
                self.acc(grads, *x, |gx| {
                    for (o, &row) in indices.iter().enumerate() {
                        gx[row * c + o] = gx[row * c + o] + g[o];
                    }
                });
            }
            Op::MaxUnpool { v, indices, c } => {
                self.acc(grads, *v, |gv| {
                    for (o, &row) in indices.iter().enumerate() {
                        gv[o] = gv[o] + g[row * c + o];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |gx| {
                    for ((t, &y), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *t = *t + y * m;
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
