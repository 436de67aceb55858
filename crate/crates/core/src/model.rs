//! The age-regression network: a stack of
//! `conv → relu → maxpool → spatial attention` stages, dropout, flatten, and a
//! dense head with relu between layers and a linear scalar output.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    accumulate_shared_grad, attention_backward, attention_forward, validate_extent, AttentionSiteCache,
    SharedAttentionParams,
};
use crate::ops::{
    conv3d_backward, conv3d_forward, dense_backward, dense_forward, dropout, dropout_backward,
    maxpool3d_backward, maxpool3d_forward, relu, relu_backward, ConvCache, ConvSpec, DenseCache,
    DropoutCache, PoolCache, PoolSpec, ReluCache,
};
use crate::{Error, Real, Result, Tensor};

/// Every downsampling stage pools 2×2×2 windows with stride 2.
pub const POOL: PoolSpec = PoolSpec {
    extent: (2, 2, 2),
    stride: (2, 2, 2),
};

const CONV_DROPOUT_COUNTER: u64 = 0;
const DENSE_DROPOUT_COUNTER: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One parameter set for every site.
    Shared,
    /// An independent parameter set per site.
    PerLayer,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub conv_kernel: [usize; 3],
    pub conv_stride: [usize; 3],
    pub conv_padding: [usize; 3],
    pub dense_widths: Vec<usize>,
    pub attention_mode: AttentionMode,
    pub attention_kernel: usize,
    pub dropout_conv: f64,
    pub dropout_dense: f64,
    /// Spatial input extent (D, H, W).
    pub input_shape: [usize; 3],
    /// Expected flatten length feeding the first dense layer; `None` accepts
    /// whatever the conv stack produces.
    pub flatten_features: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![12, 16, 32, 64, 128, 512, 1024],
            conv_kernel: [2, 2, 2],
            conv_stride: [1, 1, 1],
            conv_padding: [1, 1, 1],
            dense_widths: vec![512, 128, 64, 12, 1],
            attention_mode: AttentionMode::Shared,
            attention_kernel: 7,
            dropout_conv: 0.3,
            dropout_dense: 0.3,
            input_shape: [91, 109, 91],
            flatten_features: Some(1024),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub layer: usize,
    pub stage: &'static str,
    pub channels: usize,
    pub spatial: [usize; 3],
}

/// Spatial extents through the conv stack, computed from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: [usize; 3],
    pub steps: Vec<TraceStep>,
    pub flatten: usize,
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input 1x{:?}", self.input)?;
        for s in &self.steps {
            write!(f, " -> {}{} {}x{:?}", s.stage, s.layer, s.channels, s.spatial)?;
        }
        write!(f, " -> flatten {}", self.flatten)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

impl ModelConfig {
    pub fn conv_spec(&self, layer: usize) -> ConvSpec {
        let cin = if layer == 0 { 1 } else { self.conv_channels[layer - 1] };
        let t = |a: [usize; 3]| (a[0], a[1], a[2]);
        ConvSpec::new(
            cin,
            self.conv_channels[layer],
            t(self.conv_kernel),
            t(self.conv_stride),
            t(self.conv_padding),
        )
    }

    /// Walks conv and pool extents layer by layer. Stops at the first stage
    /// whose extent becomes invalid.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let mut spatial = self.input_shape;
        let mut steps = Vec::new();
        for layer in 0..self.conv_channels.len() {
            let channels = self.conv_channels[layer];
            spatial = self.conv_spec(layer).output_extent(spatial).map_err(|e| {
                Error::Shape(format!("conv layer {}: {e}; trace so far: {steps:?}", layer + 1))
            })?;
            steps.push(TraceStep {
                layer: layer + 1,
                stage: "conv",
                channels,
                spatial,
            });
            spatial = POOL.output_extent(spatial).map_err(|e| {
                Error::Shape(format!("pool after conv layer {}: {e}; trace so far: {steps:?}", layer + 1))
            })?;
            steps.push(TraceStep {
                layer: layer + 1,
                stage: "pool",
                channels,
                spatial,
            });
        }
        let channels = *self.conv_channels.last().unwrap_or(&1);
        Ok(ShapeTrace {
            input: self.input_shape,
            steps,
            flatten: channels * spatial.iter().product::<usize>(),
        })
    }

    pub fn validate(&self) -> Result<ShapeTrace> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be a non-empty list of positive counts".into()));
        }
        if self.dense_widths.is_empty() || self.dense_widths.contains(&0) {
            return Err(Error::Config("dense_widths must be a non-empty list of positive widths".into()));
        }
        if self.dense_widths.last() != Some(&1) {
            return Err(Error::Config(format!(
                "last dense width must be 1 (scalar age), got {:?}",
                self.dense_widths
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("input_shape {:?} has a zero extent", self.input_shape)));
        }
        for (name, rate) in [("dropout_conv", self.dropout_conv), ("dropout_dense", self.dropout_dense)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {rate}")));
            }
        }
        if self.attention_mode != AttentionMode::None {
            validate_extent(self.attention_kernel)?;
        }
        let trace = self.shape_trace()?;
        if let Some(expected) = self.flatten_features {
            if expected != trace.flatten {
                return Err(Error::Shape(format!(
                    "flatten length {} does not match the first dense layer's input width {expected}; derived trace: {trace}",
                    trace.flatten
                )));
            }
        }
        Ok(trace)
    }

    pub fn attention_sites(&self) -> usize {
        match self.attention_mode {
            AttentionMode::Shared => 1,
            AttentionMode::PerLayer => self.conv_channels.len(),
            AttentionMode::None => 0,
        }
    }

    /// Per-tensor parameter table in checkpoint order.
    pub fn param_table(&self) -> Result<Vec<ParamRow>> {
        let trace = self.validate()?;
        let mut rows = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            let count = shape.iter().product();
            rows.push(ParamRow { name, shape, count });
        };
        for l in 0..self.conv_channels.len() {
            let spec = self.conv_spec(l);
            push(format!("conv{}.weight", l + 1), spec.weight_shape().to_vec());
            push(format!("conv{}.bias", l + 1), vec![spec.out_channels]);
        }
        let k = self.attention_kernel;
        for s in 0..self.attention_sites() {
            let prefix = match self.attention_mode {
                AttentionMode::Shared => "attention".to_string(),
                _ => format!("attention{}", s + 1),
            };
            push(format!("{prefix}.kernel"), vec![1, 2, k, k, k]);
            push(format!("{prefix}.bias"), vec![1]);
        }
        let mut fan_in = trace.flatten;
        for (i, &width) in self.dense_widths.iter().enumerate() {
            push(format!("dense{}.weight", i + 1), vec![fan_in, width]);
            push(format!("dense{}.bias", i + 1), vec![width]);
            fan_in = width;
        }
        Ok(rows)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_table()?.iter().map(|r| r.count).sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams<T> {
    Shared(SharedAttentionParams<T>),
    PerLayer(Vec<SharedAttentionParams<T>>),
    None,
}

impl<T: Real> AttentionParams<T> {
    /// Parameters used at site `layer` (0-based).
    pub fn site(&self, layer: usize) -> Option<&SharedAttentionParams<T>> {
        match self {
            AttentionParams::Shared(p) => Some(p),
            AttentionParams::PerLayer(ps) => ps.get(layer),
            AttentionParams::None => None,
        }
    }

    pub fn sets(&self) -> &[SharedAttentionParams<T>] {
        match self {
            AttentionParams::Shared(p) => std::slice::from_ref(p),
            AttentionParams::PerLayer(ps) => ps,
            AttentionParams::None => &[],
        }
    }

    fn sets_mut(&mut self) -> &mut [SharedAttentionParams<T>] {
        match self {
            AttentionParams::Shared(p) => std::slice::from_mut(p),
            AttentionParams::PerLayer(ps) => ps,
            AttentionParams::None => &mut [],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BrainAgeModel<T = f32> {
    config: ModelConfig,
    trace: ShapeTrace,
    pub convs: Vec<ConvLayer<T>>,
    pub attention: AttentionParams<T>,
    pub dense: Vec<DenseLayer<T>>,
    generation: u64,
}

/// Compares configuration and parameters; the cache generation is ignored.
impl<T: Real> PartialEq for BrainAgeModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.convs == other.convs && self.attention == other.attention && self.dense == other.dense
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_init<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-limit..limit)))
}

impl<T: Real> BrainAgeModel<T> {
    /// Builds and initializes the network. Each parameter tensor draws from
    /// its own seeded stream, so conv and dense initial values do not depend
    /// on the attention mode; per-layer attention copies start equal to the
    /// shared set.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let trace = config.validate()?;
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        for l in 0..config.conv_channels.len() {
            let spec = config.conv_spec(l);
            let shape = spec.weight_shape();
            let fan_in = shape[1..].iter().product();
            let mut rng = stream_rng(seed, l as u64 + 1);
            convs.push(ConvLayer {
                spec,
                weight: uniform_init(&shape, fan_in, &mut rng),
                bias: Tensor::zeros(&[spec.out_channels]),
            });
        }
        let attention = match config.attention_mode {
            AttentionMode::None => AttentionParams::None,
            mode => {
                let theta = SharedAttentionParams::init(config.attention_kernel, &mut stream_rng(seed, 1000))?;
                if mode == AttentionMode::Shared {
                    AttentionParams::Shared(theta)
                } else {
                    AttentionParams::PerLayer(vec![theta; config.conv_channels.len()])
                }
            }
        };
        let mut dense = Vec::with_capacity(config.dense_widths.len());
        let mut fan_in = trace.flatten;
        for (i, &width) in config.dense_widths.iter().enumerate() {
            let mut rng = stream_rng(seed, 2000 + i as u64);
            dense.push(DenseLayer {
                weight: uniform_init(&[fan_in, width], fan_in, &mut rng),
                bias: Tensor::zeros(&[width]),
            });
            fan_in = width;
        }
        Ok(Self {
            config: config.clone(),
            trace,
            convs,
            attention,
            dense,
            generation: 0,
        })
    }

    /// Rebuilds a model from parameter tensors in [`Self::parameters`] order.
    pub fn from_parameters(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        let expected = model.parameters().len();
        if tensors.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
        for (slot, t) in model.parameters_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} does not match config-derived {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape_trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn num_conv_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Conv layers, then attention sets, then dense layers; weight before bias.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for a in self.attention.sets() {
            out.push(&a.kernel);
            out.push(&a.bias);
        }
        for d in &self.dense {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    /// Mutable view in [`Self::parameters`] order. Invalidates outstanding
    /// forward caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.generation += 1;
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for a in self.attention.sets_mut() {
            out.push(&mut a.kernel);
            out.push(&mut a.bias);
        }
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn cast<U: Real>(&self) -> BrainAgeModel<U> {
        let tensors = self.parameters().into_iter().map(|t| t.cast()).collect();
        BrainAgeModel::from_parameters(&self.config, tensors).expect("same config")
    }

    /// Same parameters, attention re-expressed in another mode. Untying copies
    /// the shared set to every site; tying requires all sites to be equal.
    pub fn with_attention_mode(&self, mode: AttentionMode) -> Result<Self> {
        let layers = self.convs.len();
        let attention = match (&self.attention, mode) {
            (_, AttentionMode::None) => AttentionParams::None,
            (AttentionParams::Shared(p), AttentionMode::Shared) => AttentionParams::Shared(p.clone()),
            (AttentionParams::Shared(p), AttentionMode::PerLayer) => AttentionParams::PerLayer(vec![p.clone(); layers]),
            (AttentionParams::PerLayer(ps), AttentionMode::PerLayer) => AttentionParams::PerLayer(ps.clone()),
            (AttentionParams::PerLayer(ps), AttentionMode::Shared) => {
                if ps.windows(2).any(|w| w[0] != w[1]) {
                    return Err(Error::InvalidArgument("per-layer attention sets differ; cannot tie them".into()));
                }
                AttentionParams::Shared(ps[0].clone())
            }
            (AttentionParams::None, _) => {
                return Err(Error::InvalidArgument("model has no attention parameters to convert".into()))
            }
        };
        let mut config = self.config.clone();
        config.attention_mode = mode;
        Ok(Self {
            config,
            trace: self.trace.clone(),
            convs: self.convs.clone(),
            attention,
            dense: self.dense.clone(),
            generation: 0,
        })
    }

    /// Runs the network on `[N,1,D,H,W]`. Dropout is active only when
    /// `training`, with masks keyed by `seed`.
    pub fn forward(&self, batch: &Tensor<T>, training: bool, seed: u64) -> Result<ForwardPass<T>> {
        let [n, c, d, h, w] = batch.dims5("model input")?;
        if c != 1 || [d, h, w] != self.config.input_shape {
            return Err(Error::Shape(format!(
                "model expects input [N,1,{},{},{}], got {:?}",
                self.config.input_shape[0],
                self.config.input_shape[1],
                self.config.input_shape[2],
                batch.shape()
            )));
        }

        let mut stages = Vec::with_capacity(self.convs.len());
        let mut x = batch.clone();
        for (l, layer) in self.convs.iter().enumerate() {
            let (z, conv) = conv3d_forward(&x, &layer.weight, &layer.bias, &layer.spec)?;
            let (a, relu_cache) = relu(&z);
            let (pooled, pool) = maxpool3d_forward(&a, &POOL)?;
            let (out, attention, map) = match self.attention.site(l) {
                Some(theta) => {
                    let site = attention_forward(&pooled, theta)?;
                    (site.features, Some(site.cache), Some(site.map))
                }
                None => (pooled.clone(), None, None),
            };
            stages.push(StageCache {
                conv,
                relu: relu_cache,
                pool,
                attention,
                pre_attention: pooled,
                post_attention: out.clone(),
                map,
            });
            x = out;
        }

        let stage_shape = x.shape().to_vec();
        let (x, conv_dropout) = dropout(&x, self.config.dropout_conv, seed, CONV_DROPOUT_COUNTER, training)?;
        let flat = x.reshape(&[n, self.trace.flatten])?;

        let last = self.dense.len() - 1;
        let mut heads = Vec::with_capacity(self.dense.len());
        let mut x = flat;
        for (i, layer) in self.dense.iter().enumerate() {
            let (y, dense) = dense_forward(&x, &layer.weight, &layer.bias)?;
            if i == last {
                heads.push(HeadCache { dense, relu: None, dropout: None });
                x = y;
                break;
            }
            let (y, relu_cache) = relu(&y);
            let (y, drop) = if i == 0 {
                let (y, c) = dropout(&y, self.config.dropout_dense, seed, DENSE_DROPOUT_COUNTER, training)?;
                (y, Some(c))
            } else {
                (y, None)
            };
            heads.push(HeadCache {
                dense,
                relu: Some(relu_cache),
                dropout: drop,
            });
            x = y;
        }

        Ok(ForwardPass {
            predictions: x.reshape(&[n])?,
            caches: ForwardCaches {
                generation: self.generation,
                batch: n,
                stages,
                stage_shape,
                conv_dropout,
                heads,
            },
        })
    }

    /// Predictions only.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(batch, false, 0)?.predictions)
    }

    /// Gradient of `Σ dloss_dpred · prediction` with respect to every
    /// parameter and the input. In shared mode the attention gradient is the
    /// ordered sum of every site's contribution.
    pub fn backward(&self, caches: &ForwardCaches<T>, dloss_dpred: &Tensor<T>) -> Result<BackwardPass<T>> {
        if caches.generation != self.generation || caches.stages.len() != self.convs.len() {
            return Err(Error::StaleCache(
                "forward caches were produced before the parameters last changed".into(),
            ));
        }
        dloss_dpred.expect_shape(&[caches.batch], "prediction gradient")?;
        let n = caches.batch;

        let mut dense_grads = Vec::with_capacity(self.dense.len());
        let mut g = dloss_dpred.clone().reshape(&[n, 1])?;
        for head in caches.heads.iter().rev() {
            if let Some(drop) = &head.dropout {
                g = dropout_backward(drop, &g)?;
            }
            if let Some(r) = &head.relu {
                g = relu_backward(r, &g)?;
            }
            let grads = dense_backward(&head.dense, &g)?;
            dense_grads.push((grads.dweights, grads.dbias));
            g = grads.dx;
        }
        dense_grads.reverse();

        let g = g.reshape(&caches.stage_shape)?;
        let mut g = dropout_backward(&caches.conv_dropout, &g)?;

        let layers = caches.stages.len();
        let mut conv_grads = Vec::with_capacity(layers);
        let mut site_grads = Vec::with_capacity(layers);
        let mut taps = Vec::with_capacity(layers);
        for stage in caches.stages.iter().rev() {
            let d_post = g;
            let d_pre = match &stage.attention {
                Some(cache) => {
                    let (dx, dtheta) = attention_backward(cache, &d_post)?;
                    site_grads.push(dtheta);
                    dx
                }
                None => d_post.clone(),
            };
            let da = maxpool3d_backward(&stage.pool, &d_pre)?;
            let dz = relu_backward(&stage.relu, &da)?;
            let grads = conv3d_backward(&stage.conv, &dz)?;
            conv_grads.push((grads.dweights, grads.dbias));
            taps.push(SiteGradients { d_pre, d_post });
            g = grads.dx;
        }
        conv_grads.reverse();
        site_grads.reverse();
        taps.reverse();

        let attention = match self.attention {
            AttentionParams::Shared(_) => vec![accumulate_shared_grad(&site_grads)?],
            AttentionParams::PerLayer(_) => site_grads.clone(),
            AttentionParams::None => Vec::new(),
        };

        Ok(BackwardPass {
            grads: Gradients {
                convs: conv_grads,
                attention,
                dense: dense_grads,
            },
            input: g,
            site_contributions: site_grads,
            taps,
        })
    }
}

/// Everything one conv stage needs for backward, plus its feature maps.
#[derive(Clone, Debug)]
pub struct StageCache<T> {
    conv: ConvCache<T>,
    relu: ReluCache,
    pool: PoolCache,
    attention: Option<AttentionSiteCache<T>>,
    /// Max-pool output, the attention site input.
    pub pre_attention: Tensor<T>,
    /// Attention-modulated output (equal to `pre_attention` without attention).
    pub post_attention: Tensor<T>,
    pub map: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct HeadCache<T> {
    dense: DenseCache<T>,
    relu: Option<ReluCache>,
    dropout: Option<DropoutCache<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCaches<T> {
    generation: u64,
    batch: usize,
    pub stages: Vec<StageCache<T>>,
    stage_shape: Vec<usize>,
    conv_dropout: DropoutCache<T>,
    heads: Vec<HeadCache<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    /// One age per sample, shape `[N]`.
    pub predictions: Tensor<T>,
    pub caches: ForwardCaches<T>,
}

/// Gradients laid out like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
    pub attention: Vec<SharedAttentionParams<T>>,
    pub dense: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Same order as [`BrainAgeModel::parameters`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.push(w);
            out.push(b);
        }
        for a in &self.attention {
            out.push(&a.kernel);
            out.push(&a.bias);
        }
        for (w, b) in &self.dense {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Upstream gradients at a stage's attention input and output.
#[derive(Clone, Debug)]
pub struct SiteGradients<T> {
    pub d_pre: Tensor<T>,
    pub d_post: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BackwardPass<T> {
    pub grads: Gradients<T>,
    /// Gradient with respect to the input batch.
    pub input: Tensor<T>,
    /// Per-site attention gradients before accumulation, site 1 first.
    pub site_contributions: Vec<SharedAttentionParams<T>>,
    pub taps: Vec<SiteGradients<T>>,
}
