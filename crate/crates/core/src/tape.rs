//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation appends a node after its inputs, so the tape is always in
//! topological order and `backward` is a single reverse sweep.

use crate::error::{contract_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    StopGradient,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    AddRowBias { x: usize, bias: usize },
    Relu(usize),
    Sum(usize),
    Mean(usize),
    L2NormalizeRows { x: usize, norms: Vec<S> },
    GlobalAvgPool { x: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Reshape(usize),
    Concat(Vec<usize>),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, xhat: Vec<S>, inv_std: Vec<S> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<S>, inv_std: Vec<S> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<S> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Vec<S>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<S>,
}

/// Batch statistics computed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased per-channel variance (used for running estimates).
    pub var: Vec<S>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
    generation: u64,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; `None` if no gradient flowed.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    generation: u64,
}

/// Splits an N×C×rest layout into (N, C, rest).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("expected at least N×C, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, g: &[S]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
        None => *slot = Some(g.to_vec()),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), generation: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Vars from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(contract_err!("variable does not belong to the current tape"));
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, needs_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, needs_grad, op });
        Var { id: self.nodes.len() - 1, generation: self.generation }
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[self.idx(v).expect("live variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("live variable")].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("live variable")].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::from_vec(self.shape(v), self.value(v).to_vec()).expect("tape values are well-formed")
    }

    /// Records a tensor; it receives gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(shape_err!("constant of shape {shape:?} with {} values", data.len()));
        }
        Ok(self.push(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Identity on values; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let n = &self.nodes[i];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        Ok(self.push(value, shape, false, Op::StopGradient))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err!(
                "{name}: {:?} vs {:?}",
                self.nodes[ia].shape,
                self.nodes[ib].shape
            ));
        }
        Ok((ia, ib))
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
        self.nodes[ia].value.iter().zip(&self.nodes[ib].value).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "add")?;
        let v = self.zip_map(ia, ib, |x, y| x + y);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(v, shape, self.ng(&[ia, ib]), Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "sub")?;
        let v = self.zip_map(ia, ib, |x, y| x - y);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(v, shape, self.ng(&[ia, ib]), Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "mul")?;
        let v = self.zip_map(ia, ib, |x, y| x * y);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(v, shape, self.ng(&[ia, ib]), Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.nodes[i].value.iter().map(|&e| e * c).collect();
        let shape = self.nodes[i].shape.clone();
        Ok(self.push(v, shape, self.ng(&[i]), Op::Scale(i, c)))
    }

    fn matrix_dims(&self, i: usize) -> Result<(usize, usize)> {
        match self.nodes[i].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err!("expected a matrix, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix_dims(ia)?;
        let (k2, n) = self.matrix_dims(ib)?;
        if k != k2 {
            return Err(shape_err!("matmul: [{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(&self.nodes[ia].value, &self.nodes[ib].value, &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], self.ng(&[ia, ib]), Op::MatMul { a: ia, b: ib, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let (rows, cols) = self.matrix_dims(i)?;
        let src = &self.nodes[i].value;
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(out, vec![cols, rows], self.ng(&[i]), Op::Transpose { x: i, rows, cols }))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (m, n) = self.matrix_dims(ix)?;
        if self.nodes[ib].shape != [n] {
            return Err(shape_err!("row bias {:?} for [{m},{n}]", self.nodes[ib].shape));
        }
        let b = &self.nodes[ib].value;
        let v = self.nodes[ix]
            .value
            .iter()
            .enumerate()
            .map(|(e, &val)| val + b[e % n])
            .collect();
        Ok(self.push(v, vec![m, n], self.ng(&[ix, ib]), Op::AddRowBias { x: ix, bias: ib }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let v = self.nodes[i].value.iter().map(|&e| if e > S::zero() { e } else { S::zero() }).collect();
        let shape = self.nodes[i].shape.clone();
        Ok(self.push(v, shape, self.ng(&[i]), Op::Relu(i)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.nodes[i].value.iter().copied().sum::<S>();
        Ok(self.push(vec![s], vec![1], self.ng(&[i]), Op::Sum(i)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let n = S::from_usize_lossy(self.nodes[i].value.len());
        let s = self.nodes[i].value.iter().copied().sum::<S>() / n;
        Ok(self.push(vec![s], vec![1], self.ng(&[i]), Op::Mean(i)))
    }

    /// Divides each row of an `n×d` matrix by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let (rows, cols) = self.matrix_dims(i)?;
        let src = &self.nodes[i].value;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(norm > S::zero()) || !norm.is_finite() {
                return Err(Error::Data(format!("cannot normalize row {r} with norm {norm}")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        Ok(self.push(out, vec![rows, cols], self.ng(&[i]), Op::L2NormalizeRows { x: i, norms }))
    }

    /// Mean over spatial extents: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        if self.nodes[i].shape.len() != 4 {
            return Err(shape_err!("global_avg_pool expects NCHW, got {:?}", self.nodes[i].shape));
        }
        let (n, c, p) = channel_layout(&self.nodes[i].shape)?;
        let inv = S::one() / S::from_usize_lossy(p);
        let v = self.nodes[i].value.chunks(p).map(|ch| ch.iter().copied().sum::<S>() * inv).collect();
        Ok(self.push(v, vec![n, c], self.ng(&[i]), Op::GlobalAvgPool { x: i }))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let (n, c, h, w) = match self.nodes[i].shape.as_slice() {
            &[n, c, h, w] if h >= 2 && w >= 2 => (n, c, h, w),
            s => return Err(shape_err!("max_pool2x2 expects NCHW with H,W >= 2, got {s:?}")),
        };
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[i].value;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(out, vec![n, c, oh, ow], self.ng(&[i]), Op::MaxPool2 { x: i, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let numel = check_shape(shape)?;
        if numel != self.nodes[i].value.len() {
            return Err(shape_err!("reshape {:?} -> {shape:?}", self.nodes[i].shape));
        }
        let v = self.nodes[i].value.clone();
        Ok(self.push(v, shape.to_vec(), self.ng(&[i]), Op::Reshape(i)))
    }

    /// Concatenates along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract_err!("concat of zero tensors"));
        }
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let tail = self.nodes[ids[0]].shape[1..].to_vec();
        let mut lead = 0;
        let mut v = Vec::new();
        for &i in &ids {
            if self.nodes[i].shape[1..] != tail[..] {
                return Err(shape_err!("concat: {:?} vs trailing {tail:?}", self.nodes[i].shape));
            }
            lead += self.nodes[i].shape[0];
            v.extend_from_slice(&self.nodes[i].value);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.ng(&ids);
        Ok(self.push(v, shape, ng, Op::Concat(ids)))
    }

    /// 2-D convolution, NCHW input and O×I×Kh×Kw kernel, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (n, c, h, wd) = match self.nodes[ix].shape.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(shape_err!("conv2d input must be NCHW, got {s:?}")),
        };
        let (o, ki, kh, kw) = match self.nodes[iw].shape.as_slice() {
            &[o, i, kh, kw] => (o, i, kh, kw),
            s => return Err(shape_err!("conv2d kernel must be O×I×Kh×Kw, got {s:?}")),
        };
        if ki != c {
            return Err(shape_err!("conv2d: input has {c} channels, kernel expects {ki}"));
        }
        if stride == 0 {
            return Err(contract_err!("conv2d stride must be >= 1"));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].shape != [o] {
                return Err(shape_err!("conv2d bias {:?} for {o} outputs", self.nodes[ib].shape));
            }
        }
        let (ph, pw) = padding;
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(shape_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                wd + 2 * pw
            ));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: o,
            kh,
            kw,
            stride,
            pad_h: ph,
            pad_w: pw,
            out_h: (h + 2 * ph - kh) / stride + 1,
            out_w: (wd + 2 * pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| self.nodes[i].value.as_slice()),
        );
        let mut deps = vec![ix, iw];
        deps.extend(ib);
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            vec![n, o, geom.out_h, geom.out_w],
            ng,
            Op::Conv2d { x: ix, w: iw, b: ib, geom },
        ))
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, p) = channel_layout(&self.nodes[ix].shape)?;
        self.check_channel_param(ig, c)?;
        self.check_channel_param(ib, c)?;
        let count = n * p;
        if count < 2 {
            return Err(contract_err!("batch statistics need at least 2 values per channel"));
        }
        let xs = &self.nodes[ix].value;
        let (g, bt) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let m = S::from_usize_lossy(count);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let block = &xs[(s * c + ch) * p..][..p];
                mean[ch] += block.iter().copied().sum::<S>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let block = &xs[(s * c + ch) * p..][..p];
                var[ch] += block.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<S>();
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v / m + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); xs.len()];
        let mut out = vec![S::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * p;
                for e in off..off + p {
                    let h = (xs[e] - mean[ch]) * inv_std[ch];
                    xhat[e] = h;
                    out[e] = g[ch] * h + bt[ch];
                }
            }
        }
        let unbiased = var.iter().map(|&v| v / S::from_usize_lossy(count - 1)).collect();
        let shape = self.nodes[ix].shape.clone();
        let ng = self.ng(&[ix, ig, ib]);
        let y = self.push(out, shape, ng, Op::BatchNormTrain { x: ix, gamma: ig, beta: ib, xhat, inv_std });
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: S,
    ) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, p) = channel_layout(&self.nodes[ix].shape)?;
        self.check_channel_param(ig, c)?;
        self.check_channel_param(ib, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics must have {c} entries"));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let xs = &self.nodes[ix].value;
        let (g, bt) = (&self.nodes[ig].value, &self.nodes[ib].value);
        let mut out = vec![S::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * p;
                for e in off..off + p {
                    out[e] = g[ch] * ((xs[e] - mean[ch]) * inv_std[ch]) + bt[ch];
                }
            }
        }
        let shape = self.nodes[ix].shape.clone();
        let ng = self.ng(&[ix, ig, ib]);
        Ok(self.push(
            out,
            shape,
            ng,
            Op::BatchNormEval { x: ix, gamma: ig, beta: ib, mean: mean.to_vec(), inv_std },
        ))
    }

    fn check_channel_param(&self, i: usize, c: usize) -> Result<()> {
        if self.nodes[i].shape != [c] {
            return Err(shape_err!("per-channel parameter {:?} for {c} channels", self.nodes[i].shape));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy of `logits[m×c]` against class indices.
    /// Entries equal to negative infinity are treated as masked out.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let i = self.idx(logits)?;
        let (m, c) = self.matrix_dims(i)?;
        if targets.len() != m {
            return Err(shape_err!("{} targets for {m} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(contract_err!("target {t} out of range for {c} classes"));
        }
        let src = &self.nodes[i].value;
        let mut probs = vec![S::zero(); m * c];
        let mut loss = S::zero();
        for r in 0..m {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let pr = &mut probs[r * c..(r + 1) * c];
            let mut z = S::zero();
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            pr.iter_mut().for_each(|p| *p /= z);
            loss += -(row[targets[r]] - mx - z.ln());
        }
        loss /= S::from_usize_lossy(m);
        Ok(self.push(
            vec![loss],
            vec![1],
            self.ng(&[i]),
            Op::CrossEntropy { logits: i, targets: targets.to_vec(), probs },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients add across paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].shape
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![S::one()]);
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, generation: self.generation })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let wants = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if wants(p) {
                        add_into(&mut grads[p], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[*a], g);
                }
                if wants(*b) {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    add_into(&mut grads[*b], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if wants(*a) {
                    let d: Vec<S> = g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect();
                    add_into(&mut grads[*a], &d);
                }
                if wants(*b) {
                    let d: Vec<S> = g.iter().zip(va).map(|(&gv, &x)| gv * x).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<S> = g.iter().map(|&v| v * *c).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::MatMul { a, b, m, k, n } => {
                if wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul_a_bt_acc(g, &self.nodes[*b].value, &mut da, *m, *n, *k);
                    add_into(&mut grads[*a], &da);
                }
                if wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    kernels::matmul_at_b_acc(&self.nodes[*a].value, g, &mut db, *m, *k, *n);
                    add_into(&mut grads[*b], &db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let mut d = vec![S::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] = g[c * rows + r];
                    }
                }
                add_into(&mut grads[*x], &d);
            }
            Op::AddRowBias { x, bias } => {
                if wants(*x) {
                    add_into(&mut grads[*x], g);
                }
                if wants(*bias) {
                    let n = self.nodes[*bias].value.len();
                    let mut d = vec![S::zero(); n];
                    for (e, &v) in g.iter().enumerate() {
                        d[e % n] += v;
                    }
                    add_into(&mut grads[*bias], &d);
                }
            }
            Op::Relu(x) => {
                let d: Vec<S> = g
                    .iter()
                    .zip(&self.nodes[*x].value)
                    .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                add_into(&mut grads[*x], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.nodes[*x].value.len()];
                add_into(&mut grads[*x], &d);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                let d = vec![g[0] / S::from_usize_lossy(n); n];
                add_into(&mut grads[*x], &d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = node.shape[1];
                let mut d = vec![S::zero(); node.value.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &node.value[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>();
                    for c in 0..cols {
                        d[r * cols + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                add_into(&mut grads[*x], &d);
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, p) = channel_layout(&self.nodes[*x].shape).expect("validated");
                let inv = S::one() / S::from_usize_lossy(p);
                let d: Vec<S> = g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(p)).collect();
                add_into(&mut grads[*x], &d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![S::zero(); self.nodes[*x].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                add_into(&mut grads[*x], &d);
            }
            Op::Reshape(x) => add_into(&mut grads[*x], g),
            Op::Concat(ids) => {
                let mut off = 0;
                for &p in ids {
                    let len = self.nodes[p].value.len();
                    if wants(p) {
                        add_into(&mut grads[p], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    wants(*x),
                    wants(*w),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[*x], &dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[*w], &dw);
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let plane = geom.out_h * geom.out_w;
                    let mut db = vec![S::zero(); geom.out_channels];
                    for (k, chunk) in g.chunks(plane).enumerate() {
                        db[k % geom.out_channels] += chunk.iter().copied().sum::<S>();
                    }
                    add_into(&mut grads[b], &db);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, c, p) = channel_layout(&node.shape).expect("validated");
                let (sum_g, sum_gx) = channel_sums(g, Some(xhat), n, c, p);
                if wants(*gamma) {
                    add_into(&mut grads[*gamma], &sum_gx);
                }
                if wants(*beta) {
                    add_into(&mut grads[*beta], &sum_g);
                }
                if wants(*x) {
                    let gm = &self.nodes[*gamma].value;
                    let m = S::from_usize_lossy(n * p);
                    let mut d = vec![S::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch] / m;
                            let off = (s * c + ch) * p;
                            for e in off..off + p {
                                d[e] = k * (m * g[e] - sum_g[ch] - xhat[e] * sum_gx[ch]);
                            }
                        }
                    }
                    add_into(&mut grads[*x], &d);
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let (n, c, p) = channel_layout(&node.shape).expect("validated");
                let xs = &self.nodes[*x].value;
                if wants(*gamma) || wants(*beta) {
                    let mut sum_g = vec![S::zero(); c];
                    let mut sum_gx = vec![S::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * p;
                            for e in off..off + p {
                                sum_g[ch] += g[e];
                                sum_gx[ch] += g[e] * (xs[e] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    if wants(*gamma) {
                        add_into(&mut grads[*gamma], &sum_gx);
                    }
                    if wants(*beta) {
                        add_into(&mut grads[*beta], &sum_g);
                    }
                }
                if wants(*x) {
                    let gm = &self.nodes[*gamma].value;
                    let mut d = vec![S::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            let off = (s * c + ch) * p;
                            for e in off..off + p {
                                d[e] = g[e] * k;
                            }
                        }
                    }
                    add_into(&mut grads[*x], &d);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.nodes[*logits].shape[1];
                let m = targets.len();
                let k = g[0] / S::from_usize_lossy(m);
                let mut d: Vec<S> = probs.iter().map(|&p| p * k).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= k;
                }
                add_into(&mut grads[*logits], &d);
            }
        }
    }
}

fn channel_sums<S: Scalar>(g: &[S], xhat: Option<&[S]>, n: usize, c: usize, p: usize) -> (Vec<S>, Vec<S>) {
    let mut sum_g = vec![S::zero(); c];
    let mut sum_gx = vec![S::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * p;
            for e in off..off + p {
                sum_g[ch] += g[e];
                if let Some(xh) = xhat {
                    sum_gx[ch] += g[e] * xh[e];
                }
            }
        }
    }
    (sum_g, sum_gx)
}
