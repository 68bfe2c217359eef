use crate::autodiff::kernels::{self, MatRef, NormCache};
use crate::autodiff::tensor::Tensor;
use crate::error::{MctError, Result};

/// Handle to a node in a [`Graph`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Gelu(Var),
    Conv3x3 {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    MeanCols(Var),
    MaxCols(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    SoftMarginLoss(Var, Vec<f64>),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::MeanCols(_) => "mean_cols",
            Op::MaxCols(..) => "max_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::SoftMarginLoss(..) => "soft_margin_loss",
        }
    }
}

/// One recorded operation and its cached output.
#[derive(Clone, Debug)]
pub struct ComputationNode {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

impl ComputationNode {
    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Append-only tape of tensor operations. Inputs always precede their
/// consumers, so the tape order is a topological order of the graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<ComputationNode>,
}

/// Gradient accumulators produced by [`Graph::backward`], one per node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; zeros if `v` did not influence it.
    pub fn get(&self, v: Var, graph: &Graph) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn take(&mut self, v: Var, graph: &Graph) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
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

    pub fn node(&self, v: Var) -> &ComputationNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {}", op.tag());
        self.nodes.push(ComputationNode {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s {
            &[r, c] => Ok((r, c)),
            _ => Err(MctError::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(MctError::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), t, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_bias")?;
        let bs = self.value(bias).shape();
        if bs != [n] {
            return Err(MctError::shape("add_bias", &[m, n], bs));
        }
        let mut t = self.value(a).clone();
        let b = self.value(bias).data();
        for row in t.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddBias(a, bias), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), t, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::new(&[m, n], out)?, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != [d] {
                return Err(MctError::shape("layer_norm", &[m, d], s));
            }
        }
        let (y, cache) = kernels::layer_norm(
            self.value(x).data(),
            m,
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, cache }, Tensor::new(&[m, d], y)?, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(Op::Gelu(a), t, rg)
    }

    /// `x: n×n×d`, `kernels: c×3×3×d`, `bias: c` → `n×n×c`.
    pub fn conv3x3(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let &[n, n2, d] = xs.as_slice() else {
            return Err(MctError::shape("conv3x3", &xs, &ks));
        };
        let &[c, kh, kw, kd] = ks.as_slice() else {
            return Err(MctError::shape("conv3x3", &xs, &ks));
        };
        if kh != 3 || kw != 3 {
            return Err(MctError::Config(format!("conv3x3 needs 3x3 kernels, got {kh}x{kw}")));
        }
        if n != n2 || n == 0 || kd != d {
            return Err(MctError::shape("conv3x3", &xs, &ks));
        }
        if self.value(bias).shape() != [c] {
            return Err(MctError::shape("conv3x3", &ks, self.value(bias).shape()));
        }
        let out = kernels::conv3x3(
            self.value(x).data(),
            n,
            d,
            self.value(kernels).data(),
            self.value(bias).data(),
            c,
        );
        let rg = self.rg(&[x, kernels, bias]);
        Ok(self.push(Op::Conv3x3 { x, kernels, bias }, Tensor::new(&[n, n, c], out)?, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(MctError::shape("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows(a, start), Tensor::new(&[len, n], data)?, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(MctError::shape("concat_rows", &[m, n], &[r, c]));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(&[m, n], data)?, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(MctError::shape("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(a).data();
        let data = (0..m)
            .flat_map(|r| src[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols(a, start), Tensor::new(&[m, len], data)?, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(MctError::shape("concat_cols", &[m], &[r, c]));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(&[m, n], data)?, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Row means of an `m×n` matrix, shape `[m]`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_cols")?;
        let v = self.value(a);
        let data = (0..m).map(|r| v.row(r).iter().sum::<f64>() / n as f64).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MeanCols(a), Tensor::new(&[m], data)?, rg))
    }

    /// Row maxima of an `m×n` matrix, shape `[m]`; ties go to the first column.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims2(a, "max_cols")?;
        let v = self.value(a);
        let mut arg = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            let (j, x) =
                v.row(r).iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &x)| {
                        if x > best.1 {
                            (j, x)
                        } else {
                            best
                        }
                    },
                );
            arg.push(j);
            data.push(x);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MaxCols(a, arg), Tensor::new(&[m], data)?, rg))
    }

    /// Column means of an `m×n` matrix, shape `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let v = self.value(a);
        let mut data = vec![0.0; n];
        for r in 0..m {
            for (acc, x) in data.iter_mut().zip(v.row(r)) {
                *acc += x;
            }
        }
        for x in &mut data {
            *x /= m as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MeanRows(a), Tensor::new(&[n], data)?, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Multi-label soft margin loss,
    /// `-(1/C) Σ_c [y_c log σ(s_c) + (1-y_c) log σ(-s_c)]`.
    pub fn soft_margin_loss(&mut self, scores: Var, labels: &[f64]) -> Result<Var> {
        let s = self.value(scores);
        if s.shape() != [labels.len()] {
            return Err(MctError::shape("soft_margin_loss", s.shape(), &[labels.len()]));
        }
        let loss = multilabel_soft_margin(s.data(), labels);
        let rg = self.rg(&[scores]);
        Ok(self.push(Op::SoftMarginLoss(scores, labels.to_vec()), Tensor::scalar(loss), rg))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(MctError::shape("backward", out.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &ComputationNode, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                let gref = MatRef::new(g.data(), m, n);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_acc(gref, MatRef::new(self.value(*b).data(), k, n).t(), &mut da);
                    acc(*a, Tensor::new(&[m, k], da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_acc(MatRef::new(self.value(*a).data(), m, k).t(), gref, &mut db);
                    acc(*b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*a, g.clone());
                acc(*bias, Tensor::new(&[n], db)?);
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                acc(*b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2()?;
                let dx = kernels::softmax_rows_backward(node.value.data(), g.data(), m, n);
                acc(*a, Tensor::new(&[m, n], dx)?);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (m, d) = node.value.dims2()?;
                let (dx, dg, db) = kernels::layer_norm_backward(g.data(), cache, self.value(*gamma).data(), m, d);
                acc(*x, Tensor::new(&[m, d], dx)?);
                acc(*gamma, Tensor::new(&[d], dg)?);
                acc(*beta, Tensor::new(&[d], db)?);
            }
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), "gelu", |gv, x| gv * kernels::gelu_grad(x))?;
                acc(*a, d);
            }
            Op::Conv3x3 { x, kernels: k, bias } => {
                let xs = self.value(*x).shape().to_vec();
                let ks = self.value(*k).shape().to_vec();
                let (n, d, c) = (xs[0], xs[2], ks[0]);
                let (dx, dk, db) =
                    kernels::conv3x3_backward(g.data(), self.value(*x).data(), n, d, self.value(*k).data(), c);
                acc(*x, Tensor::new(&xs, dx)?);
                acc(*k, Tensor::new(&ks, dk)?);
                acc(*bias, Tensor::new(&[c], db)?);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let n = src.shape()[1];
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let v = self.value(*p);
                    let piece = g.data()[offset..offset + v.len()].to_vec();
                    offset += v.len();
                    acc(*p, Tensor::new(v.shape(), piece)?);
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (m, n) = src.dims2()?;
                let w = g.shape()[1];
                let mut d = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    d.data_mut()[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    let piece = (0..m)
                        .flat_map(|r| g.data()[r * n + offset..r * n + offset + w].iter().copied())
                        .collect();
                    offset += w;
                    acc(*p, Tensor::new(&[m, w], piece)?);
                }
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.value(*a).shape())?),
            Op::MeanCols(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let data = (0..m)
                    .flat_map(|r| std::iter::repeat_n(g.data()[r] / n as f64, n))
                    .collect();
                acc(*a, Tensor::new(&[m, n], data)?);
            }
            Op::MaxCols(a, arg) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = Tensor::zeros(&[m, n]);
                for (r, &j) in arg.iter().enumerate() {
                    d.data_mut()[r * n + j] = g.data()[r];
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let row: Vec<f64> = g.data().iter().map(|x| x / m as f64).collect();
                let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                acc(*a, Tensor::new(&[m, n], data)?);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::SoftMarginLoss(scores, labels) => {
                let s = self.value(*scores);
                let c = labels.len() as f64;
                let gv = g.data()[0];
                // d/ds of -(y log σ(s) + (1-y) log σ(-s)) is σ(s) - y
                let data = s
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| gv * (kernels::sigmoid(x) - y) / c)
                    .collect();
                acc(*scores, Tensor::new(s.shape(), data)?);
            }
        }
        Ok(())
    }
}

/// Scalar multi-label soft margin loss (mean over classes).
pub fn multilabel_soft_margin(scores: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| y * kernels::log_sigmoid(s) + (1.0 - y) * kernels::log_sigmoid(-s))
        .sum();
    -total / scores.len() as f64
}
