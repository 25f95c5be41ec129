//! The temporal reasoning graph block.
//!
//! For a clip of `T` frame feature maps `x_i ∈ R^{C×H×W}` each of `N` heads
//! builds a learnable row-stochastic adjacency `A^k` from pairwise frame
//! similarities, convolves the sequence through it, and an aggregator fuses
//! the head outputs with per-node softmax weights. The result is added back
//! onto the input: `H = relu(X + Z)`.
//!
//! All functions operate on a batch of clips laid out as `[B·T, C, H, W]`
//! (frame-major within each clip); [`SeqShape`] carries the factorization.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::params::{BatchNormIds, Graph, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Conv2dConfig, Result, Scalar, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// `Vᵀ tanh(u + v)`
    Sum,
    /// `uᵀ v`
    #[default]
    DotProduct,
    /// `uᵀ W₁ v`
    Bilinear,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 3] = [SimilarityKind::Sum, SimilarityKind::DotProduct, SimilarityKind::Bilinear];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Sum => "sum",
            SimilarityKind::DotProduct => "dot_product",
            SimilarityKind::Bilinear => "bilinear",
        }
    }
}

/// Similarity function together with its parameters.
#[derive(Clone, Copy, Debug)]
pub enum Similarity<'a, F> {
    Sum { v: &'a [F] },
    DotProduct,
    Bilinear { w1: &'a Tensor<F> },
}

/// Pairwise frame similarity `g(u, v)` on flattened feature vectors.
pub fn similarity<F: Scalar>(u: &[F], v: &[F], g: Similarity<'_, F>) -> Result<F> {
    let mismatch = |rhs: usize| TensorError::Shape {
        op: "similarity",
        lhs: vec![u.len()],
        rhs: vec![rhs],
    };
    if u.len() != v.len() {
        return Err(mismatch(v.len()));
    }
    let d = u.len();
    Ok(match g {
        Similarity::Sum { v: weights } => {
            if weights.len() != d {
                return Err(mismatch(weights.len()));
            }
            u.iter()
                .zip(v)
                .zip(weights)
                .fold(F::zero(), |s, ((&a, &b), &w)| s + w * (a + b).tanh())
        }
        Similarity::DotProduct => u.iter().zip(v).fold(F::zero(), |s, (&a, &b)| s + a * b),
        Similarity::Bilinear { w1 } => {
            if w1.shape() != [d, d] {
                return Err(TensorError::Shape {
                    op: "similarity",
                    lhs: vec![d, d],
                    rhs: w1.shape().to_vec(),
                });
            }
            let w = w1.data();
            let mut s = F::zero();
            for i in 0..d {
                let row = w[i * d..(i + 1) * d].iter().zip(v).fold(F::zero(), |s, (&a, &b)| s + a * b);
                s = s + u[i] * row;
            }
            s
        }
    })
}

/// How head outputs are fused into `Z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned per-node softmax weights over heads.
    #[default]
    Aggregate,
    /// Channel concatenation of heads followed by a 1×1 conv back to `C`.
    Concat,
    /// Elementwise mean over heads.
    ElemAvg,
}

/// Shape of the aggregator weight `W′`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorWeight {
    /// One scalar shared by all heads and nodes.
    #[default]
    Shared,
    /// One scalar per head.
    PerHead,
    /// An `N×N` matrix mixing pooled head scores.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrgConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub similarity: SimilarityKind,
    /// Channel width `C′` of the similarity transform.
    pub sim_width: usize,
    /// Divide similarities by `√(C′·H·W)` before the row softmax.
    pub scale_similarity: bool,
    pub aggregator: AggregatorWeight,
    pub fusion: Fusion,
    /// Batchnorm after the 3×3 spatial transform.
    pub batch_norm: bool,
    /// Batchnorm after the 1×1 similarity transform.
    pub similarity_batch_norm: bool,
    /// Start the spatial transforms at zero (block computes `relu(X)`).
    pub zero_init_spatial: bool,
}

impl TrgConfig {
    pub fn new(channels: usize, height: usize, width: usize, heads: usize) -> Self {
        Self {
            channels,
            height,
            width,
            heads,
            similarity: SimilarityKind::DotProduct,
            sim_width: channels.div_ceil(2),
            scale_similarity: false,
            aggregator: AggregatorWeight::Shared,
            fusion: Fusion::Aggregate,
            batch_norm: true,
            similarity_batch_norm: false,
            zero_init_spatial: false,
        }
    }

    /// Flattened length of one transformed frame.
    pub fn sim_dim(&self) -> usize {
        self.sim_width * self.height * self.width
    }
}

/// Factorization of a `[B·T, C, H, W]` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SeqShape {
    pub fn nodes(&self) -> usize {
        self.batch * self.frames
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.nodes(), self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub sim_transform: ParamId,
    pub sim_bn: Option<BatchNormIds>,
    /// `V` (Sum) or `W₁` (Bilinear).
    pub sim_weight: Option<ParamId>,
    pub spatial: ParamId,
    pub spatial_bn: Option<BatchNormIds>,
}

/// Parameter handles of one TRG layer.
#[derive(Clone, Debug)]
pub struct TrgLayer {
    pub cfg: TrgConfig,
    pub heads: Vec<HeadParams>,
    pub aggregator: Option<ParamId>,
    pub concat_proj: Option<ParamId>,
}

/// Uniform in `±1/√fan_in`.
pub(crate) fn fan_in_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

impl TrgLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, cfg: TrgConfig, rng: &mut Rng) -> Result<Self> {
        let invalid = |reason: &str| TensorError::InvalidShape {
            shape: vec![cfg.heads, cfg.channels, cfg.height, cfg.width],
            reason: reason.to_string(),
        };
        if cfg.heads == 0 {
            return Err(invalid("head count must be >= 1"));
        }
        if cfg.channels == 0 || cfg.sim_width == 0 || cfg.height == 0 || cfg.width == 0 {
            return Err(invalid("extents must be positive"));
        }
        let (c, cs, d) = (cfg.channels, cfg.sim_width, cfg.sim_dim());
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let p = format!("{prefix}.head{k}");
            let sim_transform = store.add(
                format!("{p}.sim_transform"),
                fan_in_uniform(&[cs, c, 1, 1], c, rng),
                ParamKind::Weight,
            );
            let sim_bn = cfg
                .similarity_batch_norm
                .then(|| BatchNormIds::register(store, &format!("{p}.sim_bn"), cs));
            let sim_weight = match cfg.similarity {
                SimilarityKind::DotProduct => None,
                SimilarityKind::Sum => Some(store.add(format!("{p}.sim_v"), fan_in_uniform(&[d], d, rng), ParamKind::Weight)),
                SimilarityKind::Bilinear => {
                    Some(store.add(format!("{p}.sim_w1"), fan_in_uniform(&[d, d], d, rng), ParamKind::Weight))
                }
            };
            let spatial_init = if cfg.zero_init_spatial {
                Tensor::zeros(&[c, c, 3, 3])
            } else {
                fan_in_uniform(&[c, c, 3, 3], 9 * c, rng)
            };
            let spatial = store.add(format!("{p}.spatial"), spatial_init, ParamKind::Weight);
            let spatial_bn = cfg
                .batch_norm
                .then(|| BatchNormIds::register(store, &format!("{p}.spatial_bn"), c));
            heads.push(HeadParams {
                sim_transform,
                sim_bn,
                sim_weight,
                spatial,
                spatial_bn,
            });
        }
        let n = cfg.heads;
        let aggregator = (cfg.fusion == Fusion::Aggregate).then(|| {
            let init = match cfg.aggregator {
                AggregatorWeight::Shared => Tensor::full(&[1], F::one()),
                AggregatorWeight::PerHead => Tensor::full(&[n], F::one()),
                AggregatorWeight::Full => Tensor::from_fn(&[n, n], |i| if i / n == i % n { F::one() } else { F::zero() }),
            };
            store.add(format!("{prefix}.aggregator"), init, ParamKind::Weight)
        });
        let concat_proj = (cfg.fusion == Fusion::Concat).then(|| {
            store.add(
                format!("{prefix}.concat_proj"),
                fan_in_uniform(&[c, n * c, 1, 1], n * c, rng),
                ParamKind::Weight,
            )
        });
        Ok(Self {
            cfg,
            heads,
            aggregator,
            concat_proj,
        })
    }

    fn check_input<F: Scalar>(&self, g: &Graph<'_, F>, x: Var, s: SeqShape) -> Result<()> {
        let want = [s.nodes(), self.cfg.channels, self.cfg.height, self.cfg.width];
        if g.shape(x) != want || s.channels != self.cfg.channels {
            return Err(TensorError::Shape {
                op: "trg_forward",
                lhs: g.shape(x).to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Raw pairwise similarities `e_ij` of head `k`, shape `[B, T, T]`.
    pub fn similarities<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, s: SeqShape, k: usize) -> Result<Var> {
        let head = &self.heads[k];
        let d = self.cfg.sim_dim();
        let w = g.param(head.sim_transform);
        let mut p = g.conv2d(x, w, Conv2dConfig::POINTWISE)?;
        if let Some(bn) = &head.sim_bn {
            p = g.batch_norm(p, bn, BN_EPS, BN_MOMENTUM)?;
        }
        let p = g.reshape(p, &[s.batch, s.frames, d])?;
        let e = match self.cfg.similarity {
            SimilarityKind::DotProduct => {
                let pt = g.transpose_last2(p)?;
                g.bmm(p, pt)?
            }
            SimilarityKind::Bilinear => {
                let w1 = g.param(head.sim_weight.expect("bilinear weight"));
                let flat = g.reshape(p, &[s.nodes(), d])?;
                let pw = g.matmul(flat, w1)?;
                let pw = g.reshape(pw, &[s.batch, s.frames, d])?;
                let pt = g.transpose_last2(p)?;
                g.bmm(pw, pt)?
            }
            SimilarityKind::Sum => {
                let v = g.param(head.sim_weight.expect("sum weight"));
                let v = g.reshape(v, &[d, 1])?;
                let pair = g.pairwise_sum(p)?;
                let th = g.tanh(pair)?;
                let th = g.reshape(th, &[s.batch * s.frames * s.frames, d])?;
                let e = g.matmul(th, v)?;
                g.reshape(e, &[s.batch, s.frames, s.frames])?
            }
        };
        if self.cfg.scale_similarity {
            g.scale(e, 1.0 / (d as f64).sqrt())
        } else {
            Ok(e)
        }
    }

    /// Row-stochastic adjacency `A^k` for every clip, shape `[B, T, T]`.
    pub fn build_adjacency<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, s: SeqShape, k: usize) -> Result<Var> {
        let e = self.similarities(g, x, s, k)?;
        g.softmax_rows(e)
    }

    /// `y_i = relu(bn(Σ_j a_ij · conv3×3(x_j)))` for head `k`, shape `[B·T, C, H, W]`.
    pub fn graph_conv<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, adj: Var, s: SeqShape, k: usize) -> Result<Var> {
        if g.shape(adj) != [s.batch, s.frames, s.frames] {
            return Err(TensorError::Shape {
                op: "graph_conv",
                lhs: g.shape(adj).to_vec(),
                rhs: vec![s.batch, s.frames, s.frames],
            });
        }
        let head = &self.heads[k];
        let w = g.param(head.spatial);
        let y = g.conv2d(x, w, Conv2dConfig::SAME)?;
        let y = g.reshape(y, &[s.batch, s.frames, s.frame_len()])?;
        let y = g.bmm(adj, y)?;
        let mut y = g.reshape(y, &s.dims())?;
        if let Some(bn) = &head.spatial_bn {
            y = g.batch_norm(y, bn, BN_EPS, BN_MOMENTUM)?;
        }
        g.relu(y)
    }

    /// Fuses head outputs into `Z`. For [`Fusion::Aggregate`] also returns the
    /// per-node head weights `β′` of shape `[B·T, N]`.
    pub fn fuse<F: Scalar>(&self, g: &mut Graph<'_, F>, heads: &[Var], s: SeqShape) -> Result<(Var, Option<Var>)> {
        match self.cfg.fusion {
            Fusion::Aggregate => {
                let w = g.param(self.aggregator.expect("aggregator weight"));
                let (z, beta) = aggregate(g, heads, w, s)?;
                Ok((z, Some(beta)))
            }
            Fusion::ElemAvg => {
                let mut acc = heads[0];
                for &h in &heads[1..] {
                    acc = g.add(acc, h)?;
                }
                Ok((g.scale(acc, 1.0 / heads.len() as f64)?, None))
            }
            Fusion::Concat => {
                let flat = heads
                    .iter()
                    .map(|&h| g.reshape(h, &[s.nodes(), s.frame_len()]))
                    .collect::<Result<Vec<_>>>()?;
                let st = g.stack(&flat)?;
                let st = g.reshape(st, &[s.nodes(), heads.len() * s.channels, s.height, s.width])?;
                let w = g.param(self.concat_proj.expect("concat projection"));
                Ok((g.conv2d(st, w, Conv2dConfig::POINTWISE)?, None))
            }
        }
    }

    /// `H = relu(X + Z)`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, s: SeqShape) -> Result<TrgOutput> {
        self.check_input(g, x, s)?;
        let mut adjacency = Vec::with_capacity(self.cfg.heads);
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for k in 0..self.cfg.heads {
            let a = self.build_adjacency(g, x, s, k)?;
            heads.push(self.graph_conv(g, x, a, s, k)?);
            adjacency.push(a);
        }
        let (z, beta) = self.fuse(g, &heads, s)?;
        let sum = g.add(x, z)?;
        let out = g.relu(sum)?;
        Ok(TrgOutput {
            out,
            adjacency,
            heads,
            beta,
        })
    }

    /// Evaluates the adjacency stack of one clip `x[T, C, H, W]` in eval mode.
    pub fn adjacency_stack<F: Scalar>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<AdjacencyStack<F>> {
        let s = single_clip_shape(x)?;
        let mut g = Graph::new(store, crate::params::Mode::Eval);
        let xv = g.constant(x.clone());
        let mut values = Vec::with_capacity(self.cfg.heads * s.frames * s.frames);
        for k in 0..self.cfg.heads {
            let a = self.build_adjacency(&mut g, xv, s, k)?;
            values.extend_from_slice(g.value(a).data());
        }
        Ok(AdjacencyStack {
            heads: self.cfg.heads,
            nodes: s.frames,
            values,
        })
    }
}

pub(crate) fn single_clip_shape<F: Scalar>(x: &Tensor<F>) -> Result<SeqShape> {
    match *x.shape() {
        [t, c, h, w] => Ok(SeqShape {
            batch: 1,
            frames: t,
            channels: c,
            height: h,
            width: w,
        }),
        _ => Err(TensorError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "feature sequence must be T×C×H×W".into(),
        }),
    }
}

/// Multi-head relation aggregator.
///
/// Per node `i`: `z′ᵏ = mean(zᵏ_i)`, `βₖ = relu(W′ z′ᵏ)`, `β′ = softmax(β)`,
/// `z_i = Σₖ β′ₖ zᵏ_i`. `w` has shape `[1]`, `[N]` or `[N, N]`.
pub fn aggregate<F: Scalar>(g: &mut Graph<'_, F>, heads: &[Var], w: Var, s: SeqShape) -> Result<(Var, Var)> {
    let n = heads.len();
    let pooled = heads
        .iter()
        .map(|&h| g.mean_trailing(h, 3))
        .collect::<Result<Vec<_>>>()?;
    let pooled = g.stack(&pooled)?;
    let scores = if g.shape(w).len() == 2 {
        let wt = g.transpose(w)?;
        g.matmul(pooled, wt)?
    } else {
        g.scale_broadcast(pooled, w)?
    };
    let scores = g.relu(scores)?;
    let beta = g.softmax_rows(scores)?;
    let flat = heads
        .iter()
        .map(|&h| g.reshape(h, &[s.nodes(), s.frame_len()]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.stack(&flat)?;
    let weights = g.reshape(beta, &[s.nodes(), 1, n])?;
    let z = g.bmm(weights, stacked)?;
    let z = g.reshape(z, &s.dims())?;
    Ok((z, beta))
}

/// Vars produced by one [`TrgLayer::forward`].
#[derive(Clone, Debug)]
pub struct TrgOutput {
    pub out: Var,
    /// One `[B, T, T]` adjacency per head.
    pub adjacency: Vec<Var>,
    /// One `[B·T, C, H, W]` graph-conv output per head.
    pub heads: Vec<Var>,
    pub beta: Option<Var>,
}

/// `N` row-stochastic `T×T` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyStack<F> {
    pub heads: usize,
    pub nodes: usize,
    pub values: Vec<F>,
}

impl<F: Scalar> AdjacencyStack<F> {
    pub fn head(&self, k: usize) -> &[F] {
        let t2 = self.nodes * self.nodes;
        &self.values[k * t2..(k + 1) * t2]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[F]> {
        self.values.chunks(self.nodes)
    }

    /// Largest deviation of any row sum from 1, and whether all entries lie in `[0, 1]`.
    pub fn stochastic_error(&self) -> (f64, bool) {
        let dev = self
            .rows()
            .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        let bounded = self.values.iter().all(|&v| v >= F::zero() && v <= F::one());
        (dev, bounded)
    }

    /// CSV with frame indices as header row and column.
    pub fn head_csv(&self, k: usize) -> String {
        let mut out = String::from("frame");
        for j in 0..self.nodes {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.head(k).chunks(self.nodes).enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{:.6}", v.as_f64()));
            }
            out.push('\n');
        }
        out
    }
}
