use super::kernels::{self, Conv2dConfig, ConvDims};
use super::{numel, Result, Scalar, Tensor, TensorError};
use crate::parallel::for_each_chunk;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the recorded op kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Reshape,
    Add,
    Mul,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    MatMul,
    Transpose,
    BatchMatMul,
    TransposeLast2,
    Conv2d,
    ChannelBias,
    AvgPool2,
    MeanTrailing,
    MeanAxis1,
    SoftmaxRows,
    BatchNorm,
    PairwiseSum,
    Stack,
    ScaleBroadcast,
    AddRowBroadcast,
    Sum,
    CrossEntropy,
    BinarySigmoid,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::BatchMatMul => "bmm",
            OpKind::TransposeLast2 => "transpose_last2",
            OpKind::Conv2d => "conv2d",
            OpKind::ChannelBias => "channel_bias",
            OpKind::AvgPool2 => "avg_pool2",
            OpKind::MeanTrailing => "mean_trailing",
            OpKind::MeanAxis1 => "mean_axis1",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::BatchNorm => "batch_norm",
            OpKind::PairwiseSum => "pairwise_sum",
            OpKind::Stack => "stack",
            OpKind::ScaleBroadcast => "scale_broadcast",
            OpKind::AddRowBroadcast => "add_row_broadcast",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::BinarySigmoid => "binary_sigmoid",
        }
    }
}

enum Op<F> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Conv2d(Var, Var, ConvDims),
    ChannelBias(Var, Var),
    AvgPool2(Var),
    MeanTrailing(Var, usize),
    MeanAxis1(Var),
    SoftmaxRows(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<F>,
        inv_std: Vec<F>,
        training: bool,
    },
    PairwiseSum(Var),
    Stack(Vec<Var>),
    ScaleBroadcast(Var, Var),
    AddRowBroadcast(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<F>,
        targets: Vec<usize>,
    },
    BinarySigmoid {
        logits: Var,
        labels: Vec<F>,
    },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::TransposeLast2(_) => OpKind::TransposeLast2,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::ChannelBias(..) => OpKind::ChannelBias,
            Op::AvgPool2(_) => OpKind::AvgPool2,
            Op::MeanTrailing(..) => OpKind::MeanTrailing,
            Op::MeanAxis1(_) => OpKind::MeanAxis1,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::PairwiseSum(_) => OpKind::PairwiseSum,
            Op::Stack(_) => OpKind::Stack,
            Op::ScaleBroadcast(..) => OpKind::ScaleBroadcast,
            Op::AddRowBroadcast(..) => OpKind::AddRowBroadcast,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BinarySigmoid { .. } => OpKind::BinarySigmoid,
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only record of forward computations. Nodes are pushed in
/// evaluation order, so every node's inputs precede it.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    fault: Option<(OpKind, F)>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every gradient emitted by ops of `kind` by `factor`.
    /// Fault injection for exercising the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, F::lit(factor)));
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, shape: &[usize], data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        let kind = op.kind();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(TensorError::InvalidShape {
                shape: self.shape(v).to_vec(),
                reason: format!("{op} expects rank {rank}"),
            });
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::lit(c);
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::Sigmoid(x), &[x])
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::mm_nn(self.data(a), self.data(b), m, k, n);
        self.push(&[m, n], data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("transpose", x, 2)?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let data = transpose2(self.data(x), 1, r, c);
        self.push(&[c, r], data, Op::Transpose(x), &[x])
    }

    /// Batched `a[b×m×k] · b[b×k×n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![F::zero(); bs * m * n];
        for_each_chunk(&mut out, m * n, |i, c| {
            let r = mm_seq(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], m, k, n);
            c.copy_from_slice(&r);
        });
        self.push(&[bs, m, n], out, Op::BatchMatMul(a, b), &[a, b])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("transpose_last2", x, 3)?;
        let s = self.shape(x).to_vec();
        let data = transpose2(self.data(x), s[0], s[1], s[2]);
        self.push(&[s[0], s[2], s[1]], data, Op::TransposeLast2(x), &[x])
    }

    /// `x[n×ci×h×w] ⋆ k[co×ci×kh×kw]`, see [`Conv2dConfig`] for the supported geometry.
    pub fn conv2d(&mut self, x: Var, k: Var, cfg: Conv2dConfig) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sk.len() != 4 {
            return Err(TensorError::InvalidShape {
                shape: sk.to_vec(),
                reason: "conv2d kernel must be rank 4".into(),
            });
        }
        cfg.validate(sk[2], sk[3])?;
        if sx.len() != 4 || sx[1] != sk[1] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let d = ConvDims {
            n: sx[0],
            ci: sx[1],
            co: sk[0],
            h: sx[2],
            w: sx[3],
            k: sk[2],
            pad: cfg.padding,
        };
        let data = kernels::conv2d_forward(self.data(x), self.data(k), d);
        self.push(&[d.n, d.co, d.h, d.w], data, Op::Conv2d(x, k, d), &[x, k])
    }

    /// Adds `b[c]` to every plane of channel `c` of `x[n×c×h×w]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(TensorError::Shape {
                op: "channel_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let plane = sx[2] * sx[3];
        let (c, bd) = (sx[1], self.data(b));
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / plane) % c])
            .collect();
        self.push(&sx, data, Op::ChannelBias(x, b), &[x, b])
    }

    /// 2× spatial downsampling by 2×2 mean pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "avg_pool2 expects rank 4 with even spatial extents".into(),
            });
        }
        let data = kernels::avg_pool2_forward(self.data(x), s[0] * s[1], s[2], s[3]);
        self.push(&[s[0], s[1], s[2] / 2, s[3] / 2], data, Op::AvgPool2(x), &[x])
    }

    /// Mean over the last `axes` dimensions; the result keeps the leading ones.
    pub fn mean_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axes == 0 || axes > s.len() {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: format!("cannot average over {axes} trailing axes"),
            });
        }
        let lead = &s[..s.len() - axes];
        let inner = numel(&s[s.len() - axes..]);
        let inv = F::lit(1.0 / inner as f64);
        let data = self
            .data(x)
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<F>() * inv)
            .collect();
        self.push(&lead.to_vec(), data, Op::MeanTrailing(x, inner), &[x])
    }

    /// Mean over the middle axis of `x[a×t×c]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("mean_axis1", x, 3)?;
        let s = self.shape(x).to_vec();
        let (a, t, c) = (s[0], s[1], s[2]);
        let inv = F::lit(1.0 / t as f64);
        let xd = self.data(x);
        let mut data = vec![F::zero(); a * c];
        for i in 0..a {
            for j in 0..t {
                for k in 0..c {
                    data[i * c + k] = data[i * c + k] + xd[(i * t + j) * c + k];
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        self.push(&[a, c], data, Op::MeanAxis1(x), &[x])
    }

    /// Softmax over the last axis, with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| TensorError::InvalidShape {
            shape: s.clone(),
            reason: "softmax_rows needs rank >= 1".into(),
        })?;
        let mut data = self.data(x).to_vec();
        data.chunks_mut(cols).for_each(softmax_in_place);
        self.push(&s, data, Op::SoftmaxRows(x), &[x])
    }

    /// Training-mode batch normalization of `x[n×c×h×w]` over batch and
    /// spatial axes. Returns the output, batch mean and unbiased batch variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<F>, Vec<F>)> {
        let (c, plane, count) = self.bn_dims(x, gamma, beta)?;
        if count < 2 {
            return Err(TensorError::DegenerateStats { count });
        }
        let n = count / plane;
        let xd = self.data(x);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        let inv_count = F::lit(1.0 / count as f64);
        for ch in 0..c {
            let mut s = F::zero();
            for b in 0..n {
                s = s + xd[(b * c + ch) * plane..][..plane].iter().copied().sum::<F>();
            }
            let m = s * inv_count;
            let mut q = F::zero();
            for b in 0..n {
                for &v in &xd[(b * c + ch) * plane..][..plane] {
                    q = q + (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q * inv_count;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + F::lit(eps)).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * F::lit(count as f64 / (count - 1) as f64)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, unbiased))
    }

    /// Eval-mode batch normalization using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Result<Var> {
        let (c, _, _) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Shape {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std = running_var.iter().map(|&v| F::one() / (v + F::lit(eps)).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(TensorError::Shape {
                op: "batch_norm",
                lhs: s.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok((s[1], s[2] * s[3], s[0] * s[2] * s[3]))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], inv_std: Vec<F>, training: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        let (g, b) = (self.data(gamma), self.data(beta));
        let normalized: Vec<F> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let data = normalized
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                g[ch] * v + b[ch]
            })
            .collect();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
            training,
        };
        self.push(&s, data, op, &[x, gamma, beta])
    }

    /// `x[b×t×d] → y[b×t×t×d]` with `y[b,i,j] = x[b,i] + x[b,j]`.
    pub fn pairwise_sum(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("pairwise_sum", x, 3)?;
        let s = self.shape(x).to_vec();
        let (bs, t, d) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(bs * t * t * d);
        for b in 0..bs {
            for i in 0..t {
                let xi = &xd[(b * t + i) * d..][..d];
                for j in 0..t {
                    let xj = &xd[(b * t + j) * d..][..d];
                    data.extend(xi.iter().zip(xj).map(|(&p, &q)| p + q));
                }
            }
        }
        self.push(&[bs, t, t, d], data, Op::PairwiseSum(x), &[x])
    }

    /// Stacks equally shaped `[r, rest..]` values into `[r, n, rest..]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "stack of zero tensors".into(),
        })?;
        for &v in &xs[1..] {
            self.same_shape("stack", first, v)?;
        }
        let s = self.shape(first).to_vec();
        if s.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "stack needs rank >= 1".into(),
            });
        }
        let r = s[0];
        let inner = numel(&s[1..]);
        let n = xs.len();
        let mut data = vec![F::zero(); r * n * inner];
        for (k, &v) in xs.iter().enumerate() {
            let vd = self.data(v);
            for i in 0..r {
                data[(i * n + k) * inner..][..inner].copy_from_slice(&vd[i * inner..(i + 1) * inner]);
            }
        }
        let mut shape = vec![r, n];
        shape.extend_from_slice(&s[1..]);
        self.push(&shape, data, Op::Stack(xs.to_vec()), xs)
    }

    /// `x[r×n] ⊙ w` where `w` has shape `[1]` (shared) or `[n]` (per column).
    pub fn scale_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || !(sw == [1] || sw == [sx[1]]) {
            return Err(TensorError::Shape {
                op: "scale_broadcast",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, wn) = (sx[1], sw[0]);
        let wd = self.data(w);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[if wn == 1 { 0 } else { i % n }])
            .collect();
        self.push(&sx, data, Op::ScaleBroadcast(x, w), &[x, w])
    }

    /// `x[r×k] + b[k]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(TensorError::Shape {
                op: "add_row_broadcast",
                lhs: sx,
                rhs: sb,
            });
        }
        let k = sx[1];
        let bd = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bd[i % k]).collect();
        self.push(&sx, data, Op::AddRowBroadcast(x, b), &[x, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<F>();
        self.push(&[], vec![s], Op::Sum(x), &[x])
    }

    /// Mean over the batch of `-s_g + log Σ_j exp(s_j)` for `logits[b×k]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&g| g >= k) {
            return Err(TensorError::ClassIndex { index: bad, classes: k });
        }
        let ld = self.data(logits);
        let mut probs = ld.to_vec();
        let mut total = F::zero();
        for (row, &g) in ld.chunks(k).zip(targets) {
            total = total + log_sum_exp(row) - row[g];
        }
        probs.chunks_mut(k).for_each(softmax_in_place);
        let loss = total / F::lit(targets.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.to_vec(),
        };
        self.push(&[], vec![loss], op, &[logits])
    }

    /// Mean over the batch of the per-class binary sigmoid loss summed over classes.
    pub fn binary_sigmoid(&mut self, logits: Var, labels: &Tensor<F>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || labels.shape() != s.as_slice() {
            return Err(TensorError::Shape {
                op: "binary_sigmoid",
                lhs: s,
                rhs: labels.shape().to_vec(),
            });
        }
        if let Some(&bad) = labels.data().iter().find(|&&y| y != F::zero() && y != F::one()) {
            return Err(TensorError::NonBinaryLabel { value: bad.as_f64() });
        }
        let total = self
            .data(logits)
            .iter()
            .zip(labels.data())
            .map(|(&z, &y)| z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<F>();
        let loss = total / F::lit(s[0] as f64);
        let op = Op::BinarySigmoid {
            logits,
            labels: labels.data().to_vec(),
        };
        self.push(&[], vec![loss], op, &[logits])
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 || ls.len() > 1 {
            return Err(TensorError::NotScalar { shape: ls.to_vec() });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            let mut g = g;
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    g.data_mut().iter_mut().for_each(|v| *v = *v * factor);
                }
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Vec<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.shape(v).to_vec(),
                    data: g,
                })
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, zip_map(gd, self.data(*b), |g, y| g * y));
                self.accumulate(grads, *b, zip_map(gd, self.data(*a), |g, x| g * x));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gd.iter().map(|&v| v * *c).collect()),
            Op::Relu(x) => {
                let gx = zip_map(gd, self.data(*x), |g, v| if v > F::zero() { g } else { F::zero() });
                self.accumulate(grads, *x, gx)
            }
            Op::Tanh(x) => self.accumulate(grads, *x, zip_map(gd, out, |g, y| g * (F::one() - y * y))),
            Op::Sigmoid(x) => self.accumulate(grads, *x, zip_map(gd, out, |g, y| g * y * (F::one() - y))),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::mm_nt(gd, self.data(*b), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::mm_tn(self.data(*a), gd, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let s = g.shape();
                self.accumulate(grads, *x, transpose2(gd, 1, s[0], s[1]));
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                if self.needs(*a) {
                    let bd = self.data(*b);
                    let mut ga = vec![F::zero(); bs * m * k];
                    for_each_chunk(&mut ga, m * k, |t, c| {
                        let r = mm_nt_seq(&gd[t * m * n..][..m * n], &bd[t * k * n..][..k * n], m, n, k);
                        c.copy_from_slice(&r);
                    });
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    let mut gb = vec![F::zero(); bs * k * n];
                    for_each_chunk(&mut gb, k * n, |t, c| {
                        let r = mm_tn_seq(&ad[t * m * k..][..m * k], &gd[t * m * n..][..m * n], m, k, n);
                        c.copy_from_slice(&r);
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::TransposeLast2(x) => {
                let s = g.shape();
                self.accumulate(grads, *x, transpose2(gd, s[0], s[1], s[2]));
            }
            Op::Conv2d(x, k, d) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, kernels::conv2d_grad_input(gd, self.data(*k), *d));
                }
                if self.needs(*k) {
                    self.accumulate(grads, *k, kernels::conv2d_grad_kernel(gd, self.data(*x), *d));
                }
            }
            Op::ChannelBias(x, b) => {
                self.accumulate(grads, *x, gd.to_vec());
                let s = g.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut gb = vec![F::zero(); c];
                for (j, p) in gd.chunks(plane).enumerate() {
                    gb[j % c] = gb[j % c] + p.iter().copied().sum::<F>();
                }
                self.accumulate(grads, *b, gb);
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, kernels::avg_pool2_backward(gd, s[0] * s[1], s[2], s[3]));
            }
            Op::MeanTrailing(x, inner) => {
                let inv = F::lit(1.0 / *inner as f64);
                let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, *inner)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAxis1(x) => {
                let s = self.shape(*x);
                let (a, t, c) = (s[0], s[1], s[2]);
                let inv = F::lit(1.0 / t as f64);
                let mut gx = vec![F::zero(); a * t * c];
                for i in 0..a {
                    for j in 0..t {
                        for k in 0..c {
                            gx[(i * t + j) * c + k] = gd[i * c + k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let cols = *g.shape().last().expect("rank >= 1");
                let mut gx = vec![F::zero(); gd.len()];
                for ((gr, yr), xr) in gd.chunks(cols).zip(out.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dotp = kernels::dot(gr, yr);
                    for ((o, &gv), &yv) in xr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dotp);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => {
                let s = g.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let count = s[0] * plane;
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (j, (gp, xp)) in gd.chunks(plane).zip(normalized.chunks(plane)).enumerate() {
                    let ch = j % c;
                    sum_g[ch] = sum_g[ch] + gp.iter().copied().sum::<F>();
                    sum_gx[ch] = sum_gx[ch] + kernels::dot(gp, xp);
                }
                let gam = self.data(*gamma);
                if self.needs(*x) {
                    let inv_n = F::lit(1.0 / count as f64);
                    let gx = gd
                        .iter()
                        .zip(normalized)
                        .enumerate()
                        .map(|(i, (&gv, &xh))| {
                            let ch = (i / plane) % c;
                            let scale = gam[ch] * inv_std[ch];
                            if *training {
                                scale * (gv - sum_g[ch] * inv_n - xh * sum_gx[ch] * inv_n)
                            } else {
                                scale * gv
                            }
                        })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::PairwiseSum(x) => {
                let s = self.shape(*x);
                let (bs, t, d) = (s[0], s[1], s[2]);
                let mut gx = vec![F::zero(); bs * t * d];
                for b in 0..bs {
                    for i in 0..t {
                        for j in 0..t {
                            let gp = &gd[((b * t + i) * t + j) * d..][..d];
                            for (q, &v) in gp.iter().enumerate() {
                                gx[(b * t + i) * d + q] = gx[(b * t + i) * d + q] + v;
                                gx[(b * t + j) * d + q] = gx[(b * t + j) * d + q] + v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Stack(xs) => {
                let s = g.shape();
                let (r, n) = (s[0], s[1]);
                let inner = numel(&s[2..]);
                for (k, &v) in xs.iter().enumerate() {
                    let mut gv = Vec::with_capacity(r * inner);
                    for row in 0..r {
                        gv.extend_from_slice(&gd[(row * n + k) * inner..][..inner]);
                    }
                    self.accumulate(grads, v, gv);
                }
            }
            Op::ScaleBroadcast(x, w) => {
                let n = g.shape()[1];
                let wd = self.data(*w);
                let wn = wd.len();
                let widx = |i: usize| if wn == 1 { 0 } else { i % n };
                let gx = gd.iter().enumerate().map(|(i, &v)| v * wd[widx(i)]).collect();
                self.accumulate(grads, *x, gx);
                let mut gw = vec![F::zero(); wn];
                for (i, (&gv, &xv)) in gd.iter().zip(self.data(*x)).enumerate() {
                    gw[widx(i)] = gw[widx(i)] + gv * xv;
                }
                self.accumulate(grads, *w, gw);
            }
            Op::AddRowBroadcast(x, b) => {
                self.accumulate(grads, *x, gd.to_vec());
                let k = g.shape()[1];
                let mut gb = vec![F::zero(); k];
                for row in gd.chunks(k) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / F::lit(targets.len() as f64);
                let mut gx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * k + t] = gx[r * k + t] - scale;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::BinarySigmoid { logits, labels } => {
                let b = self.shape(*logits)[0];
                let scale = gd[0] / F::lit(b as f64);
                let gx = zip_map(self.data(*logits), labels, |z, y| (sigmoid(z) - y) * scale);
                self.accumulate(grads, *logits, gx);
            }
        }
    }
}

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
}

/// Transposes `b` stacked `r×c` matrices.
fn transpose2<F: Scalar>(x: &[F], b: usize, r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); b * r * c];
    for t in 0..b {
        let (src, dst) = (&x[t * r * c..][..r * c], &mut out[t * r * c..][..r * c]);
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn mm_seq<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] = c[i * n + j] + av * b[p * n + j];
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`, single-threaded.
fn mm_nt_seq<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = kernels::dot(&a[i * k..][..k], &b[j * k..][..k]);
        }
    }
    c
}

/// `a[m×k]ᵀ · b[m×n]`, single-threaded.
fn mm_tn_seq<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[p * n + j] = c[p * n + j] + av * b[i * n + j];
            }
        }
    }
    c
}
