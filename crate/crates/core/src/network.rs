//! Hypercolumn segmentation network built from six convolution blocks, and
//! the ordinary CNN baseline with the same layout.
//!
//! A block is convolution, rectification (orientation pooling for the
//! rotation-equivariant variant), batch normalisation and 2x2 max-pooling.
//! Every block output is upsampled to the input resolution, concatenated with
//! the raw input and classified per pixel by a stack of 1x1 convolutions.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::orientpool::{orientation_pool, orientation_pool_backward, PolarField};
use crate::real::Real;
use crate::rotkernel::{circular_mask, rotconv_backward, rotconv_forward, support_size, CanonicalFilter, OrientationSet};
use crate::tensor::{
    concat_channels, crop, dims_str, maxpool2x2, maxpool2x2_backward, reflect_pad, relu, relu_backward, softmax_channels,
    split_channels, upsample_bilinear, upsample_bilinear_backward, PoolIndices, Tensor4,
};
use crate::vecfield::{
    apply_multiplier, vec_dropout, vec_maxpool2x2, vec_maxpool2x2_backward, vec_rotconv, vec_rotconv_backward,
    vec_upsample_bilinear, vec_upsample_bilinear_backward, VecBatchNorm, VecBatchNormCache, VectorField, VectorFilter,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Roteqnet,
    Baseline,
}

/// What the classifier sees of each vector-field block output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadFeatures {
    /// `|z|` per filter; rotation invariant, so the label map is equivariant.
    Magnitude,
    /// `u` and `v` per filter.
    Cartesian,
}

fn default_variant() -> Variant {
    Variant::Roteqnet
}
fn default_nf() -> usize {
    2
}
fn default_orientations() -> usize {
    8
}
fn default_classes() -> usize {
    5
}
fn default_in_channels() -> usize {
    4
}
fn default_filter_size() -> usize {
    7
}
fn default_multipliers() -> Vec<usize> {
    vec![2, 2, 3, 4, 4, 4]
}
fn default_head_features() -> HeadFeatures {
    HeadFeatures::Magnitude
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_nf")]
    pub nf: usize,
    /// Ignored by the baseline.
    #[serde(default = "default_orientations")]
    pub orientations: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_filter_size")]
    pub filter_size: usize,
    #[serde(default = "default_multipliers")]
    pub layer_multipliers: Vec<usize>,
    /// Empty means `[50 nf, 50 nf, classes]`.
    #[serde(default)]
    pub mlp_widths: Vec<usize>,
    #[serde(default = "default_head_features")]
    pub head_features: HeadFeatures,
    /// Whole-vector (or element) dropout on block outputs during training.
    #[serde(default)]
    pub dropout: f64,
    /// Route `|g|` instead of the chain-rule projection through orientation
    /// pooling.
    #[serde(default)]
    pub magnitude_backward: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: default_variant(),
            nf: default_nf(),
            orientations: default_orientations(),
            classes: default_classes(),
            in_channels: default_in_channels(),
            filter_size: default_filter_size(),
            layer_multipliers: default_multipliers(),
            mlp_widths: Vec::new(),
            head_features: default_head_features(),
            dropout: 0.0,
            magnitude_backward: false,
        }
    }
}

impl ModelConfig {
    pub fn roteqnet(nf: usize, orientations: usize, classes: usize, in_channels: usize) -> Self {
        ModelConfig {
            nf,
            orientations,
            classes,
            in_channels,
            ..Default::default()
        }
        .resolved()
        .expect("valid preset")
    }

    pub fn baseline(nf: usize, classes: usize, in_channels: usize) -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            nf,
            orientations: 1,
            classes,
            in_channels,
            ..Default::default()
        }
        .resolved()
        .expect("valid preset")
    }

    /// Fills defaults that depend on other fields and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.mlp_widths.is_empty() {
            self.mlp_widths = vec![50 * self.nf, 50 * self.nf, self.classes];
        }
        if self.variant == Variant::Baseline {
            self.orientations = 1;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(format!("model.{path}"), msg));
        if self.nf == 0 {
            return bad("nf", "must be at least 1".into());
        }
        if self.orientations == 0 {
            return bad("orientations", "must be at least 1".into());
        }
        if self.classes < 2 {
            return bad("classes", "need at least two classes".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be at least 1".into());
        }
        if self.filter_size.is_multiple_of(2) {
            return bad("filter_size", format!("{} is not odd", self.filter_size));
        }
        if self.layer_multipliers.is_empty() || self.layer_multipliers.contains(&0) {
            return bad("layer_multipliers", "needs at least one positive entry".into());
        }
        if self.mlp_widths.last() != Some(&self.classes) || self.mlp_widths.contains(&0) {
            return bad(
                "mlp_widths",
                format!("must be positive and end with classes = {}", self.classes),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn filter_counts(&self) -> Vec<usize> {
        self.layer_multipliers.iter().map(|k| k * self.nf).collect()
    }

    /// Input sides must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.layer_multipliers.len()
    }

    /// Channels contributed by each block to the hypercolumn.
    pub fn tap_widths(&self) -> Vec<usize> {
        let per = match (self.variant, self.head_features) {
            (Variant::Roteqnet, HeadFeatures::Cartesian) => 2,
            _ => 1,
        };
        self.filter_counts().iter().map(|f| f * per).collect()
    }

    pub fn hypercolumn_channels(&self) -> usize {
        self.tap_widths().iter().sum::<usize>() + self.in_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    Scale,
    Shift,
    /// Running statistics: stored and checkpointed, never trained.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub role: Role,
    /// Support of each trailing `m x m` plane, for masked filters.
    pub mask: Option<Vec<bool>>,
}

impl<T: Real> Param<T> {
    fn new(name: String, dims: Vec<usize>, role: Role, fill: T, mask: Option<Vec<bool>>) -> Self {
        let len = dims.iter().product();
        Param {
            name,
            dims,
            data: vec![fill; len],
            role,
            mask,
        }
    }

    pub fn trainable(&self) -> bool {
        self.role != Role::Buffer
    }

    /// Number of free entries (masked-out cells excluded).
    pub fn free_len(&self) -> usize {
        match &self.mask {
            Some(mask) => {
                let per = mask.iter().filter(|&&b| b).count();
                self.data.len() / mask.len() * per
            }
            None => self.data.len(),
        }
    }

    /// Zeroes masked-out cells.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            crate::rotkernel::apply_mask(&mut self.data, mask);
        }
    }

    /// Whether flat entry `k` is a free (unmasked) value.
    pub fn is_free(&self, k: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[k % m.len()])
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    filters: usize,
    depth: usize,
    weight: usize,
    weight_v: Option<usize>,
    bias: usize,
    gamma: usize,
    beta: Option<usize>,
    stat_a: usize,
    stat_b: Option<usize>,
    tap_mean: Option<usize>,
}

#[derive(Debug, Clone)]
struct HeadSlots {
    weight: usize,
    bias: usize,
    outputs: usize,
}

/// Per-channel batch normalisation with centring, used by the baseline.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    normalized: Tensor4<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.gamma.len() {
            return Err(Error::shape(
                "batchnorm",
                format!("{} channels", self.gamma.len()),
                dims_str(x.dims()),
            ));
        }
        if x.n() == 0 {
            return Err(Error::invalid("batchnorm", "empty batch"));
        }
        Ok(())
    }

    fn affine(&self, x: &Tensor4<T>, mean: &[f64], inv_std: &[f64]) -> (Tensor4<T>, Tensor4<T>) {
        let [n, c, _, _] = x.dims();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let (g, be) = (self.gamma[ch].f64(), self.beta[ch].f64());
                let src = x.plane(b, ch);
                let nz: Vec<f64> = src.iter().map(|v| (v.f64() - mean[ch]) * inv_std[ch]).collect();
                for (d, &v) in normalized.plane_mut(b, ch).iter_mut().zip(&nz) {
                    *d = T::of(v);
                }
                for (d, &v) in out.plane_mut(b, ch).iter_mut().zip(&nz) {
                    *d = T::of(g * v + be);
                }
            }
        }
        (out, normalized)
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
        self.check(x)?;
        let [n, c, h, w] = x.dims();
        let count = (n * h * w) as f64;
        if n * h * w < 2 {
            return Err(Error::invalid(
                "batchnorm",
                "training statistics need at least two values per channel",
            ));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mu = (0..n)
                .map(|b| x.plane(b, ch).iter().map(|v| v.f64()).sum::<f64>())
                .sum::<f64>()
                / count;
            let s2 = (0..n)
                .map(|b| x.plane(b, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>())
                .sum::<f64>();
            mean[ch] = mu;
            var[ch] = s2 / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (out, normalized) = self.affine(x, &mean, &inv_std);
        let m = self.momentum;
        for ch in 0..c {
            self.running_mean[ch] = T::of((1.0 - m) * self.running_mean[ch].f64() + m * mean[ch]);
            self.running_var[ch] = T::of((1.0 - m) * self.running_var[ch].f64() + m * var[ch]);
        }
        Ok((out, BatchNormCache { normalized, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let mean: Vec<f64> = self.running_mean.iter().map(|v| v.f64()).collect();
        let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v.f64() + self.eps).sqrt()).collect();
        Ok(self.affine(x, &mean, &inv_std).0)
    }

    /// Returns `(grad_x, grad_gamma, grad_beta)`.
    pub fn backward(&self, cache: &BatchNormCache<T>, grad: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
        let xh = &cache.normalized;
        if grad.dims() != xh.dims() {
            return Err(Error::shape("batchnorm backward", dims_str(xh.dims()), dims_str(grad.dims())));
        }
        let [n, c, h, w] = grad.dims();
        let count = (n * h * w) as f64;
        let mut gx = Tensor4::zeros(grad.dims());
        let mut gg = Vec::with_capacity(c);
        let mut gb = Vec::with_capacity(c);
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                for (g, x) in grad.plane(b, ch).iter().zip(xh.plane(b, ch)) {
                    sum_g += g.f64();
                    sum_gx += g.f64() * x.f64();
                }
            }
            gg.push(T::of(sum_gx));
            gb.push(T::of(sum_g));
            let k = self.gamma[ch].f64() * cache.inv_std[ch] / count;
            for b in 0..n {
                let (g, x) = (grad.plane(b, ch), xh.plane(b, ch));
                let dst = gx.plane_mut(b, ch);
                for i in 0..dst.len() {
                    dst[i] = T::of(k * (count * g[i].f64() - sum_g - x[i].f64() * sum_gx));
                }
            }
        }
        Ok((gx, gg, gb))
    }
}

/// A block output: scalar maps for the baseline, vector fields otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Feature<T> {
    Scalar(Tensor4<T>),
    Field(VectorField<T>),
}

impl<T: Real> Feature<T> {
    pub fn dims(&self) -> [usize; 4] {
        match self {
            Feature::Scalar(t) => t.dims(),
            Feature::Field(z) => z.dims(),
        }
    }
}

/// Channel-wise concatenation of upsampled features with the raw input last.
/// A vector field contributes its `u` channels followed by its `v` channels.
pub fn hypercolumn_concat<T: Real>(features: &[Feature<T>], raw: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut parts: Vec<&Tensor4<T>> = Vec::new();
    for f in features {
        match f {
            Feature::Scalar(t) => parts.push(t),
            Feature::Field(z) => {
                parts.push(&z.u);
                parts.push(&z.v);
            }
        }
    }
    parts.push(raw);
    concat_channels(&parts)
}

#[derive(Debug, Clone)]
enum BlockCache<T> {
    Rot {
        polar: PolarField<T>,
        bn: VecBatchNormCache<T>,
        pool: PoolIndices,
        drop: Option<Vec<T>>,
    },
    Base {
        pre: Tensor4<T>,
        bn: BatchNormCache<T>,
        pool: PoolIndices,
        drop: Option<Vec<T>>,
    },
}

/// Intermediate values kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Tensor4<T>,
    blocks: Vec<BlockCache<T>>,
    outputs: Vec<Feature<T>>,
    head_inputs: Vec<Tensor4<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Every discrete decision of the pass (orientation argmax, rectifier
    /// signs, pooling winners). Finite differences are only meaningful
    /// between parameter values with the same signature.
    pub fn signature(&self) -> Vec<u64> {
        let positive = |t: &Tensor4<T>| t.data().iter().map(|&v| (v > T::zero()) as u64).collect::<Vec<_>>();
        let mut sig = Vec::new();
        for b in &self.blocks {
            match b {
                BlockCache::Rot { polar, pool, .. } => {
                    sig.extend(polar.argmax.iter().map(|&a| a as u64));
                    sig.extend(positive(&polar.rho));
                    sig.extend(pool.source.iter().map(|&k| k as u64));
                }
                BlockCache::Base { pre, pool, .. } => {
                    sig.extend(positive(pre));
                    sig.extend(pool.source.iter().map(|&k| k as u64));
                }
            }
        }
        for h in self.head_inputs.iter().skip(1) {
            sig.extend(positive(h));
        }
        sig
    }
}

/// Results of an inference pass, including the per-block outputs.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub logits: Tensor4<T>,
    pub block_outputs: Vec<Feature<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    blocks: Vec<BlockSlots>,
    head: Vec<HeadSlots>,
}

impl<T: Real> Model<T> {
    /// All weights zero, scales one, running statistics at their start values.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let cfg = cfg.clone().resolved()?;
        let m = cfg.filter_size;
        let rot = cfg.variant == Variant::Roteqnet;
        let mask = if rot { Some(circular_mask(m)?) } else { None };
        let mut params = Vec::new();
        let mut push = |p: Param<T>| {
            params.push(p);
            params.len() - 1
        };
        let mut blocks = Vec::new();
        let mut depth = cfg.in_channels;
        for (k, &f) in cfg.filter_counts().iter().enumerate() {
            let wdims = vec![f, depth, m, m];
            let (weight, weight_v) = if rot && k > 0 {
                let u = push(Param::new(
                    format!("block{k}.weight_u"),
                    wdims.clone(),
                    Role::Weight,
                    T::zero(),
                    mask.clone(),
                ));
                let v = push(Param::new(
                    format!("block{k}.weight_v"),
                    wdims,
                    Role::Weight,
                    T::zero(),
                    mask.clone(),
                ));
                (u, Some(v))
            } else {
                (
                    push(Param::new(
                        format!("block{k}.weight"),
                        wdims,
                        Role::Weight,
                        T::zero(),
                        mask.clone(),
                    )),
                    None,
                )
            };
            let bias = push(Param::new(format!("block{k}.bias"), vec![f], Role::Bias, T::zero(), None));
            let gamma = push(Param::new(format!("block{k}.bn.gamma"), vec![f], Role::Scale, T::one(), None));
            let (beta, stat_a, stat_b) = if rot {
                let s = push(Param::new(
                    format!("block{k}.bn.running_std"),
                    vec![f],
                    Role::Buffer,
                    T::one(),
                    None,
                ));
                (None, s, None)
            } else {
                let b = push(Param::new(format!("block{k}.bn.beta"), vec![f], Role::Shift, T::zero(), None));
                let rm = push(Param::new(
                    format!("block{k}.bn.running_mean"),
                    vec![f],
                    Role::Buffer,
                    T::zero(),
                    None,
                ));
                let rv = push(Param::new(
                    format!("block{k}.bn.running_var"),
                    vec![f],
                    Role::Buffer,
                    T::one(),
                    None,
                ));
                (Some(b), rm, Some(rv))
            };
            let tap_mean = (rot && cfg.head_features == HeadFeatures::Magnitude).then(|| {
                push(Param::new(
                    format!("block{k}.tap.running_mean"),
                    vec![f],
                    Role::Buffer,
                    T::zero(),
                    None,
                ))
            });
            blocks.push(BlockSlots {
                filters: f,
                depth,
                weight,
                weight_v,
                bias,
                gamma,
                beta,
                stat_a,
                stat_b,
                tap_mean,
            });
            depth = f;
        }
        let mut head = Vec::new();
        let mut inputs = cfg.hypercolumn_channels();
        for (l, &outputs) in cfg.mlp_widths.iter().enumerate() {
            let weight = push(Param::new(
                format!("head{l}.weight"),
                vec![outputs, inputs, 1, 1],
                Role::Weight,
                T::zero(),
                None,
            ));
            let bias = push(Param::new(
                format!("head{l}.bias"),
                vec![outputs],
                Role::Bias,
                T::zero(),
                None,
            ));
            head.push(HeadSlots { weight, bias, outputs });
            inputs = outputs;
        }
        Ok(Model {
            cfg,
            params,
            blocks,
            head,
        })
    }

    /// Builds a model and initialises it from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        crate::train::init_model(&mut model, seed);
        Ok(model)
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// the layout implied by `cfg`.
    pub fn from_params(cfg: &ModelConfig, params: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        if params.len() != model.params.len() {
            return Err(Error::format(
                "RTQC",
                format!("expected {} parameters, found {}", model.params.len(), params.len()),
            ));
        }
        for (slot, (name, dims, data)) in model.params.iter_mut().zip(params) {
            if slot.name != name || slot.dims != dims || data.len() != slot.data.len() {
                return Err(Error::format(
                    "RTQC",
                    format!(
                        "parameter {name} {dims:?} does not match expected {} {:?}",
                        slot.name, slot.dims
                    ),
                ));
            }
            slot.data = data;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Trainable values, masked-out filter cells excluded.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.free_len()).sum()
    }

    /// Evaluates with a different number of orientations. Canonical filters
    /// do not depend on `R`, so a trained model can be probed at any `R`.
    pub fn set_orientations(&mut self, r: usize) -> Result<()> {
        if self.cfg.variant == Variant::Baseline {
            return Err(Error::invalid("set_orientations", "the baseline has no orientations"));
        }
        OrientationSet::new(r)?;
        self.cfg.orientations = r;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    data: p.data.iter().map(|v| U::of(v.f64())).collect(),
                    role: p.role,
                    mask: p.mask.clone(),
                })
                .collect(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.cfg.in_channels {
            return Err(Error::shape(
                "model forward",
                format!("{} input channels", self.cfg.in_channels),
                dims_str(x.dims()),
            ));
        }
        let k = self.cfg.spatial_multiple();
        if !x.h().is_multiple_of(k) || !x.w().is_multiple_of(k) || x.h() == 0 || x.w() == 0 {
            let (ph, pw) = (x.h().div_ceil(k).max(1) * k, x.w().div_ceil(k).max(1) * k);
            return Err(Error::invalid(
                "model forward",
                format!(
                    "input {}x{} is not a multiple of {k}; reflect-pad to {ph}x{pw} (see pad_to_multiple)",
                    x.h(),
                    x.w()
                ),
            ));
        }
        Ok(())
    }

    fn canonical_filters(&self, s: &BlockSlots) -> Vec<CanonicalFilter<T>> {
        let m = self.cfg.filter_size;
        let per = s.depth * m * m;
        let w = &self.params[s.weight].data;
        let b = &self.params[s.bias].data;
        (0..s.filters)
            .map(|f| CanonicalFilter::new(m, s.depth, w[f * per..(f + 1) * per].to_vec(), b[f]).expect("layout"))
            .collect()
    }

    fn vector_filters(&self, s: &BlockSlots) -> Vec<VectorFilter<T>> {
        let m = self.cfg.filter_size;
        let per = s.depth * m * m;
        let wu = &self.params[s.weight].data;
        let wv = &self.params[s.weight_v.expect("vector block")].data;
        let b = &self.params[s.bias].data;
        (0..s.filters)
            .map(|f| {
                VectorFilter::new(
                    m,
                    s.depth,
                    wu[f * per..(f + 1) * per].to_vec(),
                    wv[f * per..(f + 1) * per].to_vec(),
                    b[f],
                )
                .expect("layout")
            })
            .collect()
    }

    fn vec_bn(&self, s: &BlockSlots) -> VecBatchNorm<T> {
        let mut bn = VecBatchNorm::new(s.filters);
        bn.gamma = self.params[s.gamma].data.clone();
        bn.running_std = self.params[s.stat_a].data.clone();
        bn
    }

    fn scalar_bn(&self, s: &BlockSlots) -> BatchNorm2d<T> {
        let mut bn = BatchNorm2d::new(s.filters);
        bn.gamma = self.params[s.gamma].data.clone();
        bn.beta = self.params[s.beta.expect("baseline block")].data.clone();
        bn.running_mean = self.params[s.stat_a].data.clone();
        bn.running_var = self.params[s.stat_b.expect("baseline block")].data.clone();
        bn
    }

    /// Upsampled block output for the hypercolumn. Magnitude taps are
    /// centred per filter (batch mean in training, running mean otherwise);
    /// in training the updated running mean is pushed to `stats`.
    fn tap(&self, k: usize, out: &Feature<T>, stats: Option<&mut Vec<(usize, Vec<T>)>>) -> Result<Feature<T>> {
        let factor = 1 << (k + 1);
        Ok(match (out, self.cfg.head_features) {
            (Feature::Scalar(t), _) => Feature::Scalar(upsample_bilinear(t, factor)?),
            (Feature::Field(z), HeadFeatures::Magnitude) => {
                let mut mag = z.magnitude();
                let slot = self.blocks[k].tap_mean.expect("magnitude head");
                let running = &self.params[slot].data;
                let shift: Vec<f64> = match stats {
                    Some(stats) => {
                        let mean = channel_means(&mag);
                        let m = TAP_MOMENTUM;
                        let next = running
                            .iter()
                            .zip(&mean)
                            .map(|(r, &b)| T::of((1.0 - m) * r.f64() + m * b))
                            .collect();
                        stats.push((slot, next));
                        mean
                    }
                    None => running.iter().map(|v| v.f64()).collect(),
                };
                subtract_channels(&mut mag, &shift);
                Feature::Scalar(upsample_bilinear(&mag, factor)?)
            }
            (Feature::Field(z), HeadFeatures::Cartesian) => Feature::Field(vec_upsample_bilinear(z, factor)?),
        })
    }

    /// Shared forward pass. With `train`, batch statistics are used, caches
    /// are kept and the new running statistics are returned.
    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: &Tensor4<T>,
        mut train: Option<&mut dyn RngCore>,
    ) -> Result<(Tensor4<T>, Vec<Feature<T>>, Option<ForwardCache<T>>, Vec<(usize, Vec<T>)>)> {
        self.check_input(x)?;
        let m = self.cfg.filter_size;
        let pad = m / 2;
        let orient = OrientationSet::new(self.cfg.orientations)?;
        let training = train.is_some();
        let p_drop = if training { self.cfg.dropout } else { 0.0 };
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut outputs: Vec<Feature<T>> = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        for (k, s) in self.blocks.iter().enumerate() {
            let input = if k == 0 { None } else { Some(&outputs[k - 1]) };
            let (out, cache) = match self.cfg.variant {
                Variant::Roteqnet => {
                    let stack = match input {
                        None => rotconv_forward(x, &self.canonical_filters(s), &orient, pad)?,
                        Some(Feature::Field(z)) => vec_rotconv(z, &self.vector_filters(s), &orient, pad)?,
                        Some(Feature::Scalar(_)) => unreachable!("vector blocks receive fields"),
                    };
                    let (polar, field) = orientation_pool(&stack);
                    drop(stack);
                    let mut bn = self.vec_bn(s);
                    let (normed, bn_cache) = if training {
                        let (o, c) = bn.forward_train(&field)?;
                        stats.push((s.stat_a, bn.running_std.clone()));
                        (o, Some(c))
                    } else {
                        (bn.forward_eval(&field)?, None)
                    };
                    let (mut pooled, pool) = vec_maxpool2x2(&normed)?;
                    let mut drop_mask = None;
                    if p_drop > 0.0 {
                        let rng = train.as_deref_mut().expect("training");
                        let (d, mask) = vec_dropout(&pooled, p_drop, rng)?;
                        pooled = d;
                        drop_mask = Some(mask);
                    }
                    let cache = bn_cache.map(|bn| BlockCache::Rot {
                        polar,
                        bn,
                        pool,
                        drop: drop_mask,
                    });
                    (Feature::Field(pooled), cache)
                }
                Variant::Baseline => {
                    let src = match input {
                        None => x,
                        Some(Feature::Scalar(t)) => t,
                        Some(Feature::Field(_)) => unreachable!("baseline blocks are scalar"),
                    };
                    let pre = conv2d(src, &self.params[s.weight].data, &self.params[s.bias].data, s.filters, m, pad)?;
                    let act = relu(&pre);
                    let mut bn = self.scalar_bn(s);
                    let (normed, bn_cache) = if training {
                        let (o, c) = bn.forward_train(&act)?;
                        stats.push((s.stat_a, bn.running_mean.clone()));
                        stats.push((s.stat_b.expect("baseline block"), bn.running_var.clone()));
                        (o, Some(c))
                    } else {
                        (bn.forward_eval(&act)?, None)
                    };
                    let (mut pooled, pool) = maxpool2x2(&normed)?;
                    let mut drop_mask = None;
                    if p_drop > 0.0 {
                        let rng = train.as_deref_mut().expect("training");
                        let mask = scalar_dropout_mask::<T>(pooled.len(), p_drop, rng);
                        for (v, &k) in pooled.data_mut().iter_mut().zip(&mask) {
                            *v *= k;
                        }
                        drop_mask = Some(mask);
                    }
                    let cache = bn_cache.map(|bn| BlockCache::Base {
                        pre,
                        bn,
                        pool,
                        drop: drop_mask,
                    });
                    (Feature::Scalar(pooled), cache)
                }
            };
            if let Some(c) = cache {
                caches.push(c);
            }
            outputs.push(out);
        }
        let taps = outputs
            .iter()
            .enumerate()
            .map(|(k, o)| self.tap(k, o, training.then_some(&mut stats)))
            .collect::<Result<Vec<_>>>()?;
        let mut a = hypercolumn_concat(&taps, x)?;
        drop(taps);
        let mut head_inputs = Vec::with_capacity(self.head.len());
        for (l, h) in self.head.iter().enumerate() {
            let z = conv2d(&a, &self.params[h.weight].data, &self.params[h.bias].data, h.outputs, 1, 0)?;
            let next = if l + 1 < self.head.len() { relu(&z) } else { z };
            if training {
                head_inputs.push(std::mem::replace(&mut a, next));
            } else {
                a = next;
            }
        }
        let cache = training.then(|| ForwardCache {
            input: x.clone(),
            blocks: caches,
            outputs: outputs.clone(),
            head_inputs,
        });
        Ok((a, outputs, cache, stats))
    }

    /// Training-mode forward: batch statistics, running statistics updated.
    /// `rng` drives dropout when it is enabled.
    pub fn forward_train(&mut self, x: &Tensor4<T>, rng: &mut dyn RngCore) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let (logits, _, cache, stats) = self.run(x, Some(rng))?;
        for (idx, data) in stats {
            self.params[idx].data = data;
        }
        Ok((logits, cache.expect("training pass keeps caches")))
    }

    /// Inference-mode forward returning logits and the block outputs.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Inference<T>> {
        let (logits, block_outputs, _, _) = self.run(x, None)?;
        Ok(Inference { logits, block_outputs })
    }

    /// Per-pixel class distribution `(n, C, h, w)`.
    pub fn forward_dense(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(softmax_channels(&self.infer(x)?.logits))
    }

    /// Like [`Model::forward_dense`] for any input size: reflect-pads up to
    /// the next valid size and crops the result.
    pub fn forward_any_size(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (padded, (h, w)) = pad_to_multiple(x, self.cfg.spatial_multiple())?;
        crop(&self.forward_dense(&padded)?, h, w)
    }

    /// Gradients of every parameter (zeros for buffers) given the gradient
    /// with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor4<T>) -> Result<Vec<Vec<T>>> {
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        let m = self.cfg.filter_size;
        let pad = m / 2;
        let orient = OrientationSet::new(self.cfg.orientations)?;

        let mut g = grad_logits.clone();
        for (l, h) in self.head.iter().enumerate().rev() {
            let inp = &cache.head_inputs[l];
            let cg = conv2d_backward(inp, &self.params[h.weight].data, h.outputs, 1, 0, &g, true)?;
            grads[h.weight] = cg.grad_w;
            grads[h.bias] = cg.grad_b;
            let gx = cg.grad_x.expect("requested");
            g = if l > 0 { relu_backward(inp, &gx) } else { gx };
        }
        let mut widths = self.cfg.tap_widths();
        widths.push(self.cfg.in_channels);
        let mut tap_grads = split_channels(&g, &widths)?;
        tap_grads.pop();

        let mut carry: Option<Feature<T>> = None;
        for (k, s) in self.blocks.iter().enumerate().rev() {
            let factor = 1 << (k + 1);
            let tg = &tap_grads[k];
            match (&cache.blocks[k], &cache.outputs[k]) {
                (BlockCache::Rot { polar, bn, pool, drop }, Feature::Field(out)) => {
                    let mut gout = match self.cfg.head_features {
                        HeadFeatures::Magnitude => {
                            let mut gm = upsample_bilinear_backward(tg, factor)?;
                            let mean = channel_means(&gm);
                            subtract_channels(&mut gm, &mean);
                            out.magnitude_backward(&gm)?
                        }
                        HeadFeatures::Cartesian => {
                            let up = VectorField::from_stacked(tg)?;
                            vec_upsample_bilinear_backward(&up, factor)?
                        }
                    };
                    if let Some(Feature::Field(c)) = carry.take() {
                        add_into(&mut gout.u, &c.u);
                        add_into(&mut gout.v, &c.v);
                    }
                    if let Some(mask) = drop {
                        gout = apply_multiplier(&gout, mask);
                    }
                    let gbn = vec_maxpool2x2_backward(&gout, pool)?;
                    let (gfield, ggamma) = self.vec_bn(s).backward(bn, &gbn)?;
                    grads[s.gamma] = ggamma;
                    let gstack = orientation_pool_backward(&gfield, polar, self.cfg.magnitude_backward)?;
                    if k == 0 {
                        let rg = rotconv_backward(&cache.input, &self.canonical_filters(s), &orient, pad, &gstack, false)?;
                        grads[s.weight] = rg.grad_w.concat();
                        grads[s.bias] = rg.grad_b;
                    } else {
                        let Feature::Field(z) = &cache.outputs[k - 1] else {
                            unreachable!("vector blocks receive fields")
                        };
                        let rg = vec_rotconv_backward(z, &self.vector_filters(s), &orient, pad, &gstack, true)?;
                        grads[s.weight] = rg.grad_wu.concat();
                        grads[s.weight_v.expect("vector block")] = rg.grad_wv.concat();
                        grads[s.bias] = rg.grad_b;
                        carry = rg.grad_z.map(Feature::Field);
                    }
                }
                (BlockCache::Base { pre, bn, pool, drop }, Feature::Scalar(_)) => {
                    let mut gout = upsample_bilinear_backward(tg, factor)?;
                    if let Some(Feature::Scalar(c)) = carry.take() {
                        add_into(&mut gout, &c);
                    }
                    if let Some(mask) = drop {
                        for (v, &k) in gout.data_mut().iter_mut().zip(mask) {
                            *v *= k;
                        }
                    }
                    let gbn = maxpool2x2_backward(&gout, pool)?;
                    let (gact, ggamma, gbeta) = self.scalar_bn(s).backward(bn, &gbn)?;
                    grads[s.gamma] = ggamma;
                    grads[s.beta.expect("baseline block")] = gbeta;
                    let gpre = relu_backward(pre, &gact);
                    let src = if k == 0 {
                        &cache.input
                    } else {
                        match &cache.outputs[k - 1] {
                            Feature::Scalar(t) => t,
                            Feature::Field(_) => unreachable!("baseline blocks are scalar"),
                        }
                    };
                    let cg = conv2d_backward(src, &self.params[s.weight].data, s.filters, m, pad, &gpre, k > 0)?;
                    grads[s.weight] = cg.grad_w;
                    grads[s.bias] = cg.grad_b;
                    carry = cg.grad_x.map(Feature::Scalar);
                }
                _ => unreachable!("cache matches variant"),
            }
        }
        Ok(grads)
    }
}

const TAP_MOMENTUM: f64 = 0.1;

fn channel_means<T: Real>(t: &Tensor4<T>) -> Vec<f64> {
    let [n, c, h, w] = t.dims();
    let count = (n * h * w) as f64;
    (0..c)
        .map(|ch| {
            (0..n)
                .map(|b| t.plane(b, ch).iter().map(|v| v.f64()).sum::<f64>())
                .sum::<f64>()
                / count
        })
        .collect()
}

fn subtract_channels<T: Real>(t: &mut Tensor4<T>, shift: &[f64]) {
    let [n, c, _, _] = t.dims();
    for b in 0..n {
        for (ch, &s) in shift.iter().enumerate().take(c) {
            for v in t.plane_mut(b, ch) {
                *v = T::of(v.f64() - s);
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut Tensor4<T>, src: &Tensor4<T>) {
    for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

fn scalar_dropout_mask<T: Real>(len: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    use rand::Rng;
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Reflect-pads bottom and right to the next multiple of `multiple`;
/// returns the padded tensor and the original `(h, w)`.
pub fn pad_to_multiple<T: Real>(x: &Tensor4<T>, multiple: usize) -> Result<(Tensor4<T>, (usize, usize))> {
    let (h, w) = (x.h(), x.w());
    let ph = h.div_ceil(multiple).max(1) * multiple;
    let pw = w.div_ceil(multiple).max(1) * multiple;
    Ok((reflect_pad(x, ph, pw)?, (h, w)))
}

/// Trainable entries per filter of a block, for initialisation fan-in.
pub(crate) fn fan_in(cfg: &ModelConfig, name: &str, dims: &[usize]) -> usize {
    let depth = dims[1];
    if name.starts_with("head") {
        return depth;
    }
    match cfg.variant {
        Variant::Baseline => depth * cfg.filter_size * cfg.filter_size,
        Variant::Roteqnet => {
            let support = support_size(cfg.filter_size).expect("validated");
            let components = if name.ends_with("weight_u") || name.ends_with("weight_v") {
                2
            } else {
                1
            };
            components * depth * support
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rotate_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            nf: 1,
            orientations: 4,
            classes: 3,
            in_channels: 2,
            filter_size: 3,
            layer_multipliers: vec![2, 2],
            mlp_widths: vec![6, 3],
            ..Default::default()
        }
    }

    #[test]
    fn filter_counts_follow_multipliers() {
        assert_eq!(ModelConfig::roteqnet(3, 8, 6, 4).filter_counts(), vec![6, 6, 9, 12, 12, 12]);
        assert_eq!(ModelConfig::baseline(12, 6, 4).filter_counts(), vec![24, 24, 36, 48, 48, 48]);
        assert_eq!(ModelConfig::roteqnet(3, 8, 6, 4).mlp_widths, vec![150, 150, 6]);
    }

    #[test]
    fn parameter_counts_match_layer_algebra() {
        // masked 7x7 support has 37 cells
        let r = Model::<f32>::zeros(&ModelConfig::roteqnet(3, 8, 6, 4)).unwrap();
        let conv = 6 * 37 * 4 + 2 * 37 * (6 * 6 + 9 * 6 + 12 * 9 + 12 * 12 + 12 * 12);
        let bn_bias = 2 * (6 + 6 + 9 + 12 + 12 + 12);
        let head = (61 * 150 + 150) + (150 * 150 + 150) + (150 * 6 + 6);
        assert_eq!(r.parameter_count(), conv + bn_bias + head);

        let b = Model::<f32>::zeros(&ModelConfig::baseline(12, 6, 4)).unwrap();
        let conv = 49 * (24 * 4 + 24 * 24 + 36 * 24 + 48 * 36 + 48 * 48 + 48 * 48);
        let bn_bias = 3 * (24 + 24 + 36 + 48 + 48 + 48);
        let head = (232 * 600 + 600) + (600 * 600 + 600) + (600 * 6 + 6);
        assert_eq!(b.parameter_count(), conv + bn_bias + head);
        let ratio = b.parameter_count() as f64 / r.parameter_count() as f64;
        assert!((5.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rejects_indivisible_input_with_hint() {
        let model = Model::<f64>::zeros(&ModelConfig::roteqnet(1, 4, 3, 1)).unwrap();
        let err = model.forward_dense(&Tensor4::zeros([1, 1, 48, 64])).unwrap_err().to_string();
        assert!(err.contains("64x64"), "{err}");
    }

    #[test]
    fn zero_final_layer_gives_uniform_output() {
        let mut model = Model::<f64>::init(&small(Variant::Roteqnet), 3).unwrap();
        let last = model.head.last().unwrap().weight;
        model.params[last].data.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::from_fn([1, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let p = model.forward_dense(&x).unwrap();
        assert_eq!(p.dims(), [1, 3, 8, 8]);
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn hypercolumn_layout() {
        let z = VectorField::<f64>::zeros([1, 1, 4, 4]);
        let raw = Tensor4::filled([1, 4, 4, 4], 1.0);
        let h = hypercolumn_concat(&[Feature::Field(z.clone()), Feature::Field(z)], &raw).unwrap();
        assert_eq!(h.c(), 8);
        assert_eq!(hypercolumn_concat(&[], &raw).unwrap(), raw);
    }

    #[test]
    fn any_size_forward_crops_back() {
        let model = Model::<f64>::init(&small(Variant::Baseline), 1).unwrap();
        let x = Tensor4::filled([1, 2, 5, 7], 0.5);
        assert_eq!(model.forward_any_size(&x).unwrap().dims(), [1, 3, 5, 7]);
    }

    #[test]
    fn quarter_turn_equivariance_of_label_map() {
        let mut cfg = small(Variant::Roteqnet);
        cfg.filter_size = 5;
        let mut model = Model::<f64>::init(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::from_fn([2, 2, 16, 16], |_| rng.random_range(-1.0..1.0));
        // populate the running statistics
        model.forward_train(&x, &mut rng).unwrap();
        let base = model.forward_dense(&x).unwrap();
        let turned = model.forward_dense(&rotate_image(&x, 90.0)).unwrap();
        assert!(turned.max_abs_diff(&rotate_image(&base, 90.0)) < 1e-9);
    }

    #[test]
    fn training_updates_running_statistics_only_in_train_mode() {
        let mut model = Model::<f64>::init(&small(Variant::Baseline), 2).unwrap();
        let before = model.params.clone();
        let x = Tensor4::filled([2, 2, 8, 8], 0.25);
        model.infer(&x).unwrap();
        assert_eq!(model.params, before);
        model.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let changed: Vec<_> = model
            .params
            .iter()
            .zip(&before)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.role)
            .collect();
        assert!(!changed.is_empty() && changed.iter().all(|&r| r == Role::Buffer));
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let m32 = Model::<f32>::init(&small(Variant::Roteqnet), 4).unwrap();
        let back: Model<f32> = m32.cast::<f64>().cast();
        assert_eq!(back.params, m32.params);
    }

    #[test]
    fn masked_cells_start_at_zero() {
        let model = Model::<f64>::init(&ModelConfig::roteqnet(1, 4, 3, 2), 9).unwrap();
        for p in model.params() {
            for (k, &v) in p.data.iter().enumerate() {
                if !p.is_free(k) {
                    assert_eq!(v, 0.0, "{}", p.name);
                }
            }
        }
    }
}
