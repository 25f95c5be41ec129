//! Full classifiable models: backbone stub, TRG stack, classifier head and losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Graph, Mode, ParamId, ParamKind, ParamStore};
use crate::rng;
use crate::tensor::{Conv2dConfig, Scalar, Tensor, TensorError, Var};
use crate::trg::{fan_in_uniform, AggregatorWeight, Fusion, SeqShape, SimilarityKind, TrgConfig, TrgLayer, TrgOutput};

/// Temporal head placed between the backbone and the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Multi-head graphs with the learned relation aggregator.
    #[default]
    Full,
    /// No temporal graph; features are averaged over time.
    Avgpool,
    /// Multi-head graphs fused by channel concatenation and a 1×1 conv.
    Concat,
    /// Multi-head graphs fused by an elementwise mean.
    Elemavg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Avgpool, Variant::Concat, Variant::Elemavg, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Avgpool => "avgpool",
            Variant::Concat => "concat",
            Variant::Elemavg => "elemavg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    fn fusion(self) -> Option<Fusion> {
        match self {
            Variant::Full => Some(Fusion::Aggregate),
            Variant::Concat => Some(Fusion::Concat),
            Variant::Elemavg => Some(Fusion::ElemAvg),
            Variant::Avgpool => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frames per clip `T`.
    pub frames: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden_channels: usize,
    /// Feature channels `C` entering the temporal head.
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub similarity: SimilarityKind,
    /// Similarity transform width `C′`; `None` means `⌈C/2⌉`.
    pub sim_width: Option<usize>,
    pub scale_similarity: bool,
    pub aggregator: AggregatorWeight,
    pub batch_norm: bool,
    pub similarity_batch_norm: bool,
    pub zero_init_spatial: bool,
    pub variant: Variant,
    pub classes: usize,
    pub label_mode: LabelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            in_channels: 3,
            height: 16,
            width: 16,
            hidden_channels: 8,
            channels: 8,
            heads: 3,
            layers: 1,
            similarity: SimilarityKind::DotProduct,
            sim_width: None,
            scale_similarity: false,
            aggregator: AggregatorWeight::Shared,
            batch_norm: true,
            similarity_batch_norm: false,
            zero_init_spatial: false,
            variant: Variant::Full,
            classes: 6,
            label_mode: LabelMode::Single,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("hidden_channels", self.hidden_channels),
            ("channels", self.channels),
            ("heads", self.heads),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(ModelError::Config(format!(
                "input extent {}x{} must be divisible by 4 for the two downsampling stages",
                self.height, self.width
            )));
        }
        if self.sim_width == Some(0) {
            return Err(ModelError::Config("sim_width must be positive".into()));
        }
        if self.variant != Variant::Avgpool && self.layers == 0 {
            return Err(ModelError::Config(format!(
                "variant {} needs at least one TRG layer",
                self.variant.name()
            )));
        }
        Ok(())
    }

    /// `(C, H/4, W/4)` of the backbone output.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height / 4, self.width / 4)
    }

    pub fn trg_config(&self) -> Option<TrgConfig> {
        let fusion = self.variant.fusion()?;
        let (c, h, w) = self.feature_dims();
        Some(TrgConfig {
            similarity: self.similarity,
            sim_width: self.sim_width.unwrap_or(c.div_ceil(2)),
            scale_similarity: self.scale_similarity,
            aggregator: self.aggregator,
            fusion,
            batch_norm: self.batch_norm,
            similarity_batch_norm: self.similarity_batch_norm,
            zero_init_spatial: self.zero_init_spatial,
            ..TrgConfig::new(c, h, w, self.heads)
        })
    }

    pub fn trg_layers(&self) -> usize {
        if self.variant == Variant::Avgpool {
            0
        } else {
            self.layers
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBias {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Classifier {
    weight: ParamId,
    bias: ParamId,
}

/// Ground truth for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<F> {
    Single(Vec<usize>),
    /// Binary `[B, K]` label matrix.
    Multi(Tensor<F>),
}

pub struct ForwardOutput {
    pub logits: Var,
    pub features: Var,
    pub trg: Vec<TrgOutput>,
    pub shape: SeqShape,
}

/// A parameter-initialized model of one [`Variant`].
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    stem: [ConvBias; 2],
    pub layers: Vec<TrgLayer>,
    classifier: Classifier,
}

impl<F: Scalar> Model<F> {
    /// Builds and initializes a model; initialization draws from the `"init"`
    /// sub-stream of `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut store = ParamStore::new();
        let (cin, hid, c) = (config.in_channels, config.hidden_channels, config.channels);
        let conv = |store: &mut ParamStore<F>, name: &str, co: usize, ci: usize, rng: &mut rng::Rng| ConvBias {
            weight: store.add(
                format!("backbone.{name}.weight"),
                fan_in_uniform(&[co, ci, 3, 3], 9 * ci, rng),
                ParamKind::Weight,
            ),
            bias: store.add(format!("backbone.{name}.bias"), Tensor::zeros(&[co]), ParamKind::Weight),
        };
        let stem = [conv(&mut store, "conv1", hid, cin, &mut rng), conv(&mut store, "conv2", c, hid, &mut rng)];
        let mut layers = Vec::new();
        if let Some(tc) = config.trg_config() {
            for l in 0..config.layers {
                layers.push(TrgLayer::new(&mut store, &format!("trg{l}"), tc.clone(), &mut rng)?);
            }
        }
        let in_dim = if config.variant == Variant::Avgpool {
            c
        } else {
            config.frames * c
        };
        let classifier = Classifier {
            weight: store.add("classifier.weight", Tensor::zeros(&[in_dim, config.classes]), ParamKind::Weight),
            bias: store.add("classifier.bias", Tensor::zeros(&[config.classes]), ParamKind::Weight),
        };
        Ok(Self {
            config,
            store,
            stem,
            layers,
            classifier,
        })
    }

    /// Reassembles a model around a stored parameter set (e.g. from a checkpoint).
    pub fn with_params(config: ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if model.store.len() != store.len() {
            return Err(ModelError::Config(format!(
                "parameter set has {} entries, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for ((_, want), (_, got)) in model.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            layers: self.layers.clone(),
            classifier: self.classifier.clone(),
        }
    }

    /// Two stages of 3×3 conv + bias + relu + 2× mean-pool, applied to every frame.
    pub fn backbone(&self, g: &mut Graph<'_, F>, frames: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(frames);
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
            return Err(TensorError::Shape {
                op: "backbone",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), cfg.in_channels, cfg.height, cfg.width],
            }
            .into());
        }
        let mut x = frames;
        for stage in &self.stem {
            let w = g.param(stage.weight);
            let b = g.param(stage.bias);
            let y = g.conv2d(x, w, Conv2dConfig::SAME)?;
            let y = g.channel_bias(y, b)?;
            let y = g.relu(y)?;
            x = g.avg_pool2(y)?;
        }
        Ok(x)
    }

    /// Logits from temporal-head features `h[B·T, C, h, w]`.
    pub fn classify(&self, g: &mut Graph<'_, F>, h: Var, s: SeqShape) -> Result<Var> {
        let pooled = g.mean_trailing(h, 2)?;
        let feats = if self.config.variant == Variant::Avgpool {
            let seq = g.reshape(pooled, &[s.batch, s.frames, s.channels])?;
            g.mean_axis1(seq)?
        } else {
            g.reshape(pooled, &[s.batch, s.frames * s.channels])?
        };
        let w = g.param(self.classifier.weight);
        let b = g.param(self.classifier.bias);
        let z = g.matmul(feats, w)?;
        Ok(g.add_row_broadcast(z, b)?)
    }

    /// `frames` is `[B·T, C_in, H, W]` with the `T` frames of each clip contiguous.
    pub fn forward(&self, g: &mut Graph<'_, F>, frames: Var, batch: usize) -> Result<ForwardOutput> {
        let t = self.config.frames;
        if g.shape(frames).first() != Some(&(batch * t)) {
            return Err(ModelError::Config(format!(
                "input has {:?} frames, expected batch {batch} x {t}",
                g.shape(frames).first()
            )));
        }
        let feats = self.backbone(g, frames)?;
        let (c, h, w) = self.config.feature_dims();
        let s = SeqShape {
            batch,
            frames: t,
            channels: c,
            height: h,
            width: w,
        };
        let mut x = feats;
        let mut trg = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, x, s)?;
            x = out.out;
            trg.push(out);
        }
        let logits = self.classify(g, x, s)?;
        Ok(ForwardOutput {
            logits,
            features: feats,
            trg,
            shape: s,
        })
    }

    pub fn loss(&self, g: &mut Graph<'_, F>, logits: Var, targets: &Targets<F>) -> Result<Var> {
        Ok(match targets {
            Targets::Single(t) => g.cross_entropy(logits, t)?,
            Targets::Multi(y) => g.binary_sigmoid(logits, y)?,
        })
    }

    /// Evaluates logits `[B, K]` without recording gradients for later use.
    pub fn logits(&self, frames: &Tensor<F>, batch: usize, mode: Mode) -> Result<Tensor<F>> {
        let mut g = Graph::new(&self.store, mode);
        let x = g.constant(frames.clone());
        let out = self.forward(&mut g, x, batch)?;
        Ok(g.value(out.logits).clone())
    }

    /// Parameter ids that belong to TRG layers.
    pub fn trg_param_names(&self) -> impl Iterator<Item = &str> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("trg") && p.trainable())
            .map(|(_, p)| p.name.as_str())
    }
}

/// `-s_g + log Σ exp(s_j)` for one sample, with its gradient `softmax(s) − onehot(g)`.
pub fn cross_entropy_loss<F: Scalar>(logits: &[F], class: usize) -> std::result::Result<(F, Vec<F>), TensorError> {
    let mut tape = crate::tensor::Tape::new();
    let s = tape.leaf(Tensor::new(&[1, logits.len()], logits.to_vec())?, true);
    let l = tape.cross_entropy(s, &[class])?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).data()[0], g.get(s).expect("grad").data().to_vec()))
}

/// `Σ_j −(y_j log σ(s_j) + (1−y_j) log(1−σ(s_j)))` for one sample, with its gradient `σ(s) − y`.
pub fn binary_sigmoid_loss<F: Scalar>(logits: &[F], labels: &[F]) -> std::result::Result<(F, Vec<F>), TensorError> {
    let mut tape = crate::tensor::Tape::new();
    let s = tape.leaf(Tensor::new(&[1, logits.len()], logits.to_vec())?, true);
    let y = Tensor::new(&[1, labels.len()], labels.to_vec())?;
    let l = tape.binary_sigmoid(s, &y)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).data()[0], g.get(s).expect("grad").data().to_vec()))
}
