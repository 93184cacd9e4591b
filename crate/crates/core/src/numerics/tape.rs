use rand::Rng;

use super::{gelu_scalar, softmax_row, Element, NumericsError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    AddN(Vec<usize>),
    Pick {
        x: usize,
        index: usize,
    },
    CrossEntropyLogits {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropyProbs {
        probs: usize,
        labels: Vec<usize>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations so that [`Tape::backward`] can replay them in
/// reverse. Nodes are appended in evaluation order, so every parent index is
/// smaller than its child's.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `tensor`'s grad buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn widen<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64()).collect()
}

fn narrow<T: Element>(shape: Vec<usize>, data: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, data).expect("kernel produced inconsistent shape")
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor.detached(), Op::Leaf, needs)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.detached(), Op::Leaf, false)
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(shape_err(op, shape, &[0, 0]));
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(
            &widen(self.value(a)),
            &widen(self.value(b)),
            &mut c,
            m,
            k,
            n,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(narrow(vec![m, n], &c), Op::MatMul(a.0, b.0), needs))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul_t", a)?;
        let (n, k2) = self.require_2d("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(
            &widen(self.value(a)),
            &widen(self.value(b)),
            &mut c,
            m,
            k,
            n,
        );
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(narrow(vec![m, n], &c), Op::MatMulT(a.0, b.0), needs))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(x.to_f64(), y.to_f64()))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(narrow(shape, &out), record, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds the 1-D `row` to every row of `x` (bias broadcast over the last axis).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.shape(row) != [c] {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let b = widen(self.value(row));
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j].to_f64() + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, row.0]);
        Ok(self.push(narrow(shape, &out), Op::AddRow(x.0, row.0), needs))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, record: Op) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| f(v.to_f64())).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0]);
        self.push(narrow(shape, &out), record, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x.0))
    }

    /// Pointwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu_scalar(v).0, Op::Gelu(x.0))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let xv = widen(self.value(x));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0]);
        self.push(narrow(shape, &out), Op::Softmax(x.0), needs)
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = widen(self.value(x));
        let g = widen(self.value(gain));
        let b = widen(self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            narrow(shape, &out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Row gather: `out[i] = src[ids[i]]`. Used for embedding lookup.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(src);
        if ids.is_empty() {
            return Err(NumericsError::InvalidTensor("gather_rows: no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                size: r,
            });
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_vec(vec![ids.len(), c], out)?;
        let needs = self.needs(&[src.0]);
        Ok(self.push(
            value,
            Op::GatherRows {
                src: src.0,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims2(p).1)
            .ok_or_else(|| NumericsError::InvalidTensor("concat_rows: no parts".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p);
            if pc != c {
                return Err(shape_err(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(
            Tensor::from_vec(vec![rows, c], out)?,
            Op::ConcatRows(idx),
            needs,
        ))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if width == 0 || start + width > c {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                size: c,
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::from_vec(vec![r, width], out)?,
            Op::SliceCols { x: x.0, start },
            needs,
        ))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.dims2(p).0)
            .ok_or_else(|| NumericsError::InvalidTensor("concat_cols: no parts".into()))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p);
            if pr != r {
                return Err(shape_err(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            total += pc;
        }
        let mut out = vec![T::default(); r * total];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.dims2(p);
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(
            Tensor::from_vec(vec![r, total], out)?,
            Op::ConcatCols(idx),
            needs,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` during training,
    /// and the input is returned untouched otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v.to_f64() * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0]);
        Ok(self.push(narrow(shape, &out), Op::Dropout { x: x.0, mask }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s / n), Op::Mean(x.0), needs)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::InvalidTensor("add_n: no parts".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).numel()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(shape_err("add_n", &shape, self.shape(p)));
            }
            for (a, v) in acc.iter_mut().zip(self.value(p).data()) {
                *a += v.to_f64();
            }
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(narrow(shape, &acc), Op::AddN(idx), needs))
    }

    /// Scalar holding the element at flat `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if index >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "pick",
                index,
                size: n,
            });
        }
        let v = self.value(x).data()[index].to_f64();
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x: x.0, index }, needs))
    }

    /// Mean cross-entropy of `labels` under `softmax(logits)`, computed fused
    /// so the gradient is `(probs − onehot) / n`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(logits);
        check_labels(labels, r, c)?;
        let z = widen(self.value(logits));
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropyLogits {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean negative log-probability of `labels` given row-normalized `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(probs);
        check_labels(labels, r, c)?;
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p[i * c + l].to_f64().ln())
            .sum();
        let needs = self.needs(&[probs.0]);
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropyProbs {
                probs: probs.0,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Propagates gradients from the scalar `loss` to every leaf that
    /// requires them, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.needs_grad, g) {
                (Op::Leaf, true, Some(g)) => {
                    Some(g.into_iter().map(T::from_f64).collect::<Vec<T>>())
                }
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].needs_grad;
        let numel = |p: usize| nodes[p].value.numel();
        macro_rules! acc {
            ($p:expr) => {
                slot(grads, $p, numel($p))
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let (_, nn) = nodes[*b].value.dims2();
                if wants(*a) {
                    let bv = widen(&nodes[*b].value);
                    gemm_nt(g, &bv, acc!(*a), m, nn, k);
                }
                if wants(*b) {
                    let av = widen(&nodes[*a].value);
                    gemm_tn(&av, g, acc!(*b), m, k, nn);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let (nn, _) = nodes[*b].value.dims2();
                if wants(*a) {
                    let bv = widen(&nodes[*b].value);
                    gemm_nn(g, &bv, acc!(*a), m, nn, k);
                }
                if wants(*b) {
                    let av = widen(&nodes[*a].value);
                    gemm_tn(g, &av, acc!(*b), m, nn, k);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if wants(p) {
                        for (d, &v) in acc!(p).iter_mut().zip(g) {
                            *d += v;
                        }
                    }
                }
            }
            Op::AddRow(x, row) => {
                let (r, c) = nodes[*x].value.dims2();
                if wants(*x) {
                    for (d, &v) in acc!(*x).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if wants(*row) {
                    let d = acc!(*row);
                    for ii in 0..r {
                        for j in 0..c {
                            d[j] += g[ii * c + j];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[*b].value.data();
                    for ((d, &v), o) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += v * o.to_f64();
                    }
                }
                if wants(*b) {
                    let av = nodes[*a].value.data();
                    for ((d, &v), o) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += v * o.to_f64();
                    }
                }
            }
            Op::Scale(x, c) => {
                for (d, &v) in acc!(*x).iter_mut().zip(g) {
                    *d += v * c;
                }
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                for ((d, &v), yv) in acc!(*x).iter_mut().zip(g).zip(y) {
                    let t = yv.to_f64();
                    *d += v * (1.0 - t * t);
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[*x].value.data();
                for ((d, &v), xx) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    *d += v * gelu_scalar(xx.to_f64()).1;
                }
            }
            Op::Softmax(x) => {
                let (r, c) = nodes[i].value.dims2();
                let y = widen(&nodes[i].value);
                let d = acc!(*x);
                for ii in 0..r {
                    let yr = &y[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[ii * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = nodes[*x].value.dims2();
                let gv = widen(&nodes[*gain].value);
                if wants(*gain) {
                    let d = acc!(*gain);
                    for ii in 0..r {
                        for j in 0..c {
                            d[j] += g[ii * c + j] * xhat[ii * c + j];
                        }
                    }
                }
                if wants(*bias) {
                    let d = acc!(*bias);
                    for ii in 0..r {
                        for j in 0..c {
                            d[j] += g[ii * c + j];
                        }
                    }
                }
                if wants(*x) {
                    let d = acc!(*x);
                    let mut gh = vec![0.0; c];
                    for ii in 0..r {
                        let xh = &xhat[ii * c..(ii + 1) * c];
                        for j in 0..c {
                            gh[j] = g[ii * c + j] * gv[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghx =
                            gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[ii * c + j] += rstd[ii] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                let (_, c) = nodes[*src].value.dims2();
                let d = acc!(*src);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] += g[row * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(p);
                    if wants(p) {
                        for (d, &v) in acc!(p).iter_mut().zip(&g[offset..offset + len]) {
                            *d += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = nodes[*x].value.dims2();
                let (_, w) = nodes[i].value.dims2();
                let d = acc!(*x);
                for ii in 0..r {
                    for j in 0..w {
                        d[ii * c + start + j] += g[ii * w + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = nodes[i].value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, pc) = nodes[p].value.dims2();
                    if wants(p) {
                        let d = acc!(p);
                        for ii in 0..r {
                            for j in 0..pc {
                                d[ii * pc + j] += g[ii * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::Dropout { x, mask } => {
                for ((d, &v), m) in acc!(*x).iter_mut().zip(g).zip(mask) {
                    *d += v * m;
                }
            }
            Op::Reshape(x) => {
                for (d, &v) in acc!(*x).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Sum(x) => {
                for d in acc!(*x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let scale = g[0] / numel(*x) as f64;
                for d in acc!(*x).iter_mut() {
                    *d += scale;
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if wants(p) {
                        for (d, &v) in acc!(p).iter_mut().zip(g) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Pick { x, index } => {
                acc!(*x)[*index] += g[0];
            }
            Op::CrossEntropyLogits {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = nodes[*logits].value.dims2();
                let scale = g[0] / r as f64;
                let d = acc!(*logits);
                for (ii, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        d[ii * c + j] += scale * (probs[ii * c + j] - onehot);
                    }
                }
            }
            Op::CrossEntropyProbs { probs, labels } => {
                let (r, c) = nodes[*probs].value.dims2();
                let p = nodes[*probs].value.data();
                let scale = g[0] / r as f64;
                let d = acc!(*probs);
                for (ii, &label) in labels.iter().enumerate() {
                    d[ii * c + label] -= scale / p[ii * c + label].to_f64();
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], p: usize, len: usize) -> &mut Vec<f64> {
    grads[p].get_or_insert_with(|| vec![0.0; len])
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err(
            "cross_entropy",
            &[rows, classes],
            &[labels.len()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NumericsError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.25, -7.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[3, 2], &[0.0, 0.0, 1000.0, 1000.0, -5.0, 5.0]));
        let p = tape.softmax(z);
        let v = tape.value(p).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] + v[5] - 1.0).abs() < 1e-12);

        let z = tape.constant(t(&[4], &[1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]));
        let p = tape.softmax(z);
        for (got, want) in tape.value(p).data().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
        let g = tape.constant(t(&[3], &[1.5, -1.0, 3.0]));
        let b = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-12).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 20.0, -20.0]));
        let y = tape.gelu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-9);
        assert!(v[2].abs() < 1e-9);
    }

    #[test]
    fn gelu_tracks_exact_erf_form() {
        // Exact GELU is x·Φ(x); compare on a grid against a series Φ.
        fn phi(x: f64) -> f64 {
            // Abramowitz-Stegun 7.1.26 is too coarse; integrate the density.
            let n = 20_000;
            let lo = -10.0;
            let h = (x - lo) / n as f64;
            let dens = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut s = dens(lo) + dens(x);
            for i in 1..n {
                s += dens(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        }
        for i in -40..=40 {
            let x = i as f64 / 10.0;
            let exact = x * phi(x);
            assert!((gelu_scalar(x).0 - exact).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn gather_rows_and_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.gather_rows(table, &[0]).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0]);
        assert!(matches!(
            tape.gather_rows(table, &[2]),
            Err(NumericsError::IndexOutOfRange { .. })
        ));
        let single = tape.constant(t(&[1, 3], &[7.0, 8.0, 9.0]));
        let r = tape.gather_rows(single, &[0, 0, 0]).unwrap();
        assert_eq!(tape.shape(r), &[3, 3]);
    }

    #[test]
    fn duplicate_ids_accumulate() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let r = tape.gather_rows(table, &[1, 1, 2]).unwrap();
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_inference_and_zero_rate_are_identity() {
        let mut tape = Tape::<f32>::new();
        let mut r = rng::seeded(1);
        let x = tape.constant(Tensor::filled(vec![100], 1.5));
        assert_eq!(tape.dropout(x, 0.1, false, &mut r).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, true, &mut r).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut r),
            Err(NumericsError::InvalidProbability(_))
        ));
        assert!(tape.dropout(x, -0.1, false, &mut r).is_err());
    }

    #[test]
    fn dropout_rate_and_scaling() {
        let mut tape = Tape::<f32>::new();
        let mut r = rng::seeded(11);
        let n = 1_000_000;
        let x = tape.constant(Tensor::filled(vec![n], 1.0));
        let y = tape.dropout(x, 0.1, true, &mut r).unwrap();
        let v = tape.value(y).data();
        let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64 / n as f64;
        // 6 sigma of Binomial(1e6, 0.1) is 0.0018.
        assert!((zeros - 0.1).abs() < 0.002, "zero fraction {zeros}");
        let keep = (1.0f64 / 0.9) as f32;
        assert!(v.iter().all(|&e| e == 0.0 || e == keep));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let perfect = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let l = tape.cross_entropy(perfect, &[1]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        let uniform = tape.constant(Tensor::filled(vec![2, 5], 0.2));
        let l = tape.cross_entropy(uniform, &[0, 4]).unwrap();
        assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);

        let logits = tape.constant(Tensor::zeros(vec![2, 5]));
        let l = tape.cross_entropy_logits(logits, &[3, 1]).unwrap();
        assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy_logits(logits, &[5, 0]),
            Err(NumericsError::LabelOutOfRange {
                label: 5,
                classes: 5
            })
        ));
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());

        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
