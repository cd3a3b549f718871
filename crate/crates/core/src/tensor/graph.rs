//! Recording tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its output.
//! A node only remembers its inputs when at least one of them requires a
//! gradient; otherwise it is stored as a constant. Node order is creation
//! order, which is a topological order, so `backward` is a single reverse
//! sweep.

use super::conv::{max_pool, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Per-batch statistics.
    Train { eps: T },
    /// Fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to update running averages.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    MaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, .. } => vec![*x, *w],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Scale(x, _) | Relu(x) | Sigmoid(x) | Exp(x) | Log(x) | MaxPool(x, _)
            | GlobalAvgPool(x) | Reshape(x) | Sum(x) | Mean(x) | RowSum(x) => vec![*x],
            Slice { x, .. } | L2Normalize { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            SoftmaxCrossEntropy { logits, .. } | BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Node indices in the order the sweep processed them.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

const L2_EPS: f64 = 1e-12;

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn softplus_neg_abs<T: Scalar>(x: T) -> T {
    // ln(1 + e^{-|x|})
    (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Number of nodes that keep references to their inputs.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: same value, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Adds a per-channel bias of shape `[C]` along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % c];
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `op(a) @ op(b)` with optional transposes of either rank-2 operand.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            ta,
            tb,
            m,
            n,
            ka,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    /// `x @ w^T + b` with `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("dense", &sx, &sw));
        }
        let y = self.matmul_ex(x, w, false, true)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = geom.forward(self.value(x).data(), self.value(w).data());
        let v = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(v, Op::Conv2d { x, w, geom }))
    }

    /// Batch normalization over axis 1 of a rank-2 or rank-4 input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::op("batch_norm", format!("input rank < 2: {sx:?}")));
        }
        let c = sx[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &sx, self.shape(p)));
            }
        }
        let n = sx[0];
        let inner: usize = sx[2..].iter().product();
        let count = n * inner;
        if count == 0 {
            return Err(Error::op("batch_norm", "empty batch"));
        }
        let xd = self.value(x).data();
        let channel = |i: usize| (i / inner) % c;
        let (mean, var, stats, train) = match mode {
            BnMode::Train { .. } => {
                let mut mean = vec![T::zero(); c];
                for (i, &v) in xd.iter().enumerate() {
                    mean[channel(i)] += v;
                }
                let cnt = T::from_usize(count).unwrap();
                mean.iter_mut().for_each(|m| *m /= cnt);
                let mut var = vec![T::zero(); c];
                for (i, &v) in xd.iter().enumerate() {
                    let d = v - mean[channel(i)];
                    var[channel(i)] += d * d;
                }
                var.iter_mut().for_each(|s| *s /= cnt);
                let unbiased = if count > 1 {
                    let f = cnt / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&s| s * f).collect()
                } else {
                    var.clone()
                };
                let stats = BnStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BnMode::Eval { mean, var, .. } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &sx, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let eps = match mode {
            BnMode::Train { eps } | BnMode::Eval { eps, .. } => eps,
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ch = channel(i);
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        let v = Tensor::new(&sx, out)?;
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::op("log", "input must be strictly positive"));
        }
        let v = self.map(a, |x| x.ln());
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (shape, out, arg) = max_pool(self.value(x).data(), self.shape(x), k, stride, pad)?;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::MaxPool(x, arg)))
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::op("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[s[0], s[1]], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::op("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::op("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::op(
                "slice",
                format!("range {start}..{end} on axis {axis} invalid for {s:?}"),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `[N, D] -> [N]`
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::op("row_sum", format!("expected rank 2, got {s:?}")));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(s[1].max(1))
            .map(|r| r.iter().copied().sum())
            .collect();
        let v = Tensor::new(&[s[0]], out)?;
        Ok(self.push(v, Op::RowSum(x)))
    }

    /// Scales every row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::op("l2_normalize", format!("expected rank 2, got {s:?}")));
        }
        let eps = T::lit(L2_EPS);
        let d = s[1];
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            out.extend(row.iter().map(|&v| v / denom));
        }
        let v = Tensor::new(&s, out)?;
        Ok(self.push(v, Op::L2Normalize { x, norms }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::op("softmax_cross_entropy", format!("target {t} >= {c} classes")));
        }
        let mut probs = Vec::with_capacity(s[0] * c);
        let mut loss = T::zero();
        for (row, &t) in self.value(logits).data().chunks(c).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        loss /= T::from_usize(s[0]).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Binary cross-entropy on sigmoid logits `[N, K]`, summed over `K` and
    /// averaged over `N`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() || s[0] == 0 {
            return Err(Error::shape("bce_with_logits", &s, targets.shape()));
        }
        let mut loss = T::zero();
        for (&l, &y) in self.value(logits).data().iter().zip(targets.data()) {
            loss += l.max(T::zero()) - l * y + softplus_neg_abs(l);
        }
        loss /= T::from_usize(s[0]).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::op("backward", "empty tape"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::op(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<T>| {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += *c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let s = self.shape(*x);
                    let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                    let mut gb = vec![T::zero(); c];
                    for (i, &v) in g.iter().enumerate() {
                        gb[(i / inner) % c] += v;
                    }
                    acc(*b, gb);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    // dA_op = G @ op(B)^T ; stored A is op(A) or its transpose
                    let mut ga = vec![T::zero(); m * k];
                    if *ta {
                        // stored [k, m] = op(B) @ G^T
                        T::gemm(*tb, true, k, m, n, T::one(), vb, g, T::zero(), &mut ga);
                    } else {
                        T::gemm(false, !*tb, m, k, n, T::one(), g, vb, T::zero(), &mut ga);
                    }
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    // dB_op = op(A)^T @ G
                    let mut gb = vec![T::zero(); k * n];
                    if *tb {
                        // stored [n, k] = G^T @ op(A)
                        T::gemm(true, *ta, n, k, m, T::one(), g, va, T::zero(), &mut gb);
                    } else {
                        T::gemm(!*ta, false, k, n, m, T::one(), va, g, T::zero(), &mut gb);
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = geom.backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let count = T::from_usize(s[0] * inner).unwrap();
                let channel = |i: usize| (i / inner) % c;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    sum_g[channel(i)] += gv;
                    sum_gx[channel(i)] += gv * h;
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gv, &h))| {
                            let ch = channel(i);
                            if *train {
                                gam[ch] * inv_std[ch] / count
                                    * (count * gv - sum_g[ch] - h * sum_gx[ch])
                            } else {
                                gv * gam[ch] * inv_std[ch]
                            }
                        })
                        .collect();
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if self.wants(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(&g, &x)| g / x).collect());
            }
            Op::MaxPool(a, arg) => {
                let mut dx = vec![T::zero(); self.value(*a).len()];
                for (&gv, &i) in g.iter().zip(arg) {
                    dx[i] += gv;
                }
                acc(*a, dx);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(self.value(*a).len());
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * inv).take(hw));
                }
                acc(*a, dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total + offset;
                            dv.extend_from_slice(&g[base..base + block]);
                        }
                        acc(v, dv);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, inner) = outer_inner(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * s[*axis] * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                acc(*x, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::RowSum(a) => {
                let d = self.shape(*a)[1];
                let mut dx = Vec::with_capacity(g.len() * d);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv).take(d));
                }
                acc(*a, dx);
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let y = node.value.data();
                let eps = T::lit(L2_EPS);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                    if n > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / eps));
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(targets.len()).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] -= scale;
                }
                acc(*logits, dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = self.shape(*logits)[0];
                let scale = g[0] / T::from_usize(n).unwrap();
                let x = self.value(*logits).data();
                acc(
                    *logits,
                    x.iter()
                        .zip(targets)
                        .map(|(&l, &y)| (sigmoid(l) - y) * scale)
                        .collect(),
                );
            }
        }
        Ok(())
    }
}
