//! Scene classifier, LUT-weight generator, contrastive projection head and
//! basis LUTs.
//!
//! ```text
//! image ─► working space ─► resize(proxy) ─► 5 × [conv s2 ─► leaky (─► inorm)] ─► backbone
//!                                                                                  │ GAP
//!                                              ┌───────────────────────────────────┤
//!                                              ▼                                   ▼
//!                                  linear ─► leaky ─► linear              linear ─► leaky ─► linear
//!                                        N fusion weights                   128-d feature
//! ```
//!
//! The fused LUT `Σ wₙ φⁿ` is applied to the full-resolution image in the
//! working space; the feature only feeds the triplet loss during training.

mod checkpoint;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use layers::{
    conv_out_size, instance_norm, instance_norm_backward, leaky_relu, leaky_relu_backward, Conv2d, FeatureMap, Linear,
};

use crate::image::{resize_bilinear, ColorSpace, ImageBuffer};
use crate::lut::{self, fuse, identity_lut, Lut3D, LutError, LutWeights};

pub const FEATURE_LEN: usize = 128;
pub const CLASSIFIER_LAYERS: usize = 5;
/// Classifier layers (0-based) followed by instance normalization.
const NORMALIZED_LAYERS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("classifier expects a {expected}x{expected} {space:?} image, got {width}x{height} {actual:?}")]
    WrongInput {
        expected: usize,
        space: ColorSpace,
        width: usize,
        height: usize,
        actual: ColorSpace,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// Architecture and LUT hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_basis: usize,
    pub lut_size: usize,
    pub color_space: ColorSpace,
    /// Side of the square classifier input.
    pub proxy_size: usize,
    pub widths: [usize; CLASSIFIER_LAYERS],
    pub weight_gen_hidden: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_basis: 8,
            lut_size: lut::DEFAULT_LUT_SIZE,
            color_space: ColorSpace::NormalizedLAB,
            proxy_size: 256,
            widths: [16, 32, 64, 128, 128],
            weight_gen_hidden: 64,
            mlp_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_basis == 0 {
            return bad("n_basis must be at least 1");
        }
        if self.lut_size < 2 {
            return bad("lut_size must be at least 2");
        }
        if self.proxy_size == 0 {
            return bad("proxy_size must be positive");
        }
        if self.widths.contains(&0) || self.weight_gen_hidden == 0 || self.mlp_hidden == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Spatial side of the backbone for this proxy size.
    pub fn backbone_size(&self) -> usize {
        (0..CLASSIFIER_LAYERS).fold(self.proxy_size, |n, _| conv_out_size(n))
    }
}

/// Contrastive feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(pub Vec<f64>);

impl AsRef<[f64]> for Feature {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub classifier: Vec<Conv2d>,
    pub weight_gen: [Linear; 2],
    pub mlp: [Linear; 2],
    pub basis_luts: Vec<Lut3D>,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut classifier = Vec::with_capacity(CLASSIFIER_LAYERS);
        let mut in_c = 3;
        for &w in &config.widths {
            classifier.push(Conv2d::zeros(in_c, w));
            in_c = w;
        }
        let top = config.widths[CLASSIFIER_LAYERS - 1];
        Ok(Self {
            config: config.clone(),
            classifier,
            weight_gen: [
                Linear::zeros(top, config.weight_gen_hidden),
                Linear::zeros(config.weight_gen_hidden, config.n_basis),
            ],
            mlp: [Linear::zeros(top, config.mlp_hidden), Linear::zeros(config.mlp_hidden, FEATURE_LEN)],
            basis_luts: (0..config.n_basis)
                .map(|_| Lut3D::zeros(config.lut_size))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Zero classifier and head tensors with no basis LUTs; used to
    /// accumulate per-sample network gradients.
    pub(crate) fn network_zeros_like(&self) -> Self {
        let mut classifier = Vec::with_capacity(CLASSIFIER_LAYERS);
        for c in &self.classifier {
            classifier.push(Conv2d::zeros(c.in_c, c.out_c));
        }
        let lin = |l: &Linear| Linear::zeros(l.in_f, l.out_f);
        Self {
            config: self.config.clone(),
            classifier,
            weight_gen: [lin(&self.weight_gen[0]), lin(&self.weight_gen[1])],
            mlp: [lin(&self.mlp[0]), lin(&self.mlp[1])],
            basis_luts: Vec::new(),
        }
    }

    /// Tensors in declaration order: classifier (weight, bias) per layer,
    /// weight generator, MLP, then basis LUT lattices.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.classifier {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for l in self.weight_gen.iter().chain(&self.mlp) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for lut in &self.basis_luts {
            out.push(lut.values());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.classifier {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for l in self.weight_gen.iter_mut().chain(&mut self.mlp) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for lut in &mut self.basis_luts {
            out.push(lut.values_mut());
        }
        out
    }

    /// Shapes matching [`ModelParams::tensors`].
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for c in &self.classifier {
            out.push(vec![c.out_c, c.in_c, 3, 3]);
            out.push(vec![c.out_c]);
        }
        for l in self.weight_gen.iter().chain(&self.mlp) {
            out.push(vec![l.out_f, l.in_f]);
            out.push(vec![l.out_f]);
        }
        for lut in &self.basis_luts {
            let m = lut.size();
            out.push(vec![m, m, m, 3]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds `scale * other` elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Makes the weight generator output exactly `(1, 0, …, 0)` so the fused
    /// LUT is basis LUT 0.
    pub fn select_first_basis(&mut self) {
        let last = &mut self.weight_gen[1];
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        last.bias[0] = 1.0;
    }
}

/// Seeded initialization: fan-in-scaled uniform network weights, basis LUT 0
/// set to identity and the others to zero. The weight generator's output
/// bias starts at `(1, 0, …, 0)` so the initial fused LUT is close to the
/// identity.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelParams, ModelError> {
    let mut p = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |w: &mut [f64], b: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in w.iter_mut().chain(b.iter_mut()) {
            *v = rng.gen_range(-bound..bound);
        }
    };
    for c in &mut p.classifier {
        let fan_in = c.fan_in();
        fill(&mut c.weight, &mut c.bias, fan_in);
    }
    for l in p.weight_gen.iter_mut().chain(&mut p.mlp) {
        let fan_in = l.in_f;
        fill(&mut l.weight, &mut l.bias, fan_in);
    }
    let wg = &mut p.weight_gen[1].bias;
    wg.fill(0.0);
    wg[0] = 1.0;
    p.basis_luts[0] = identity_lut(config.lut_size)?;
    Ok(p)
}

/// Intermediate values of one classifier pass.
#[derive(Debug, Clone)]
pub struct ClassifierCache {
    inputs: Vec<(usize, usize)>,
    cols: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
    normed: Vec<Option<(FeatureMap, Vec<f64>)>>,
}

fn check_proxy_input(params: &ModelParams, img: &ImageBuffer) -> Result<(), ModelError> {
    let cfg = &params.config;
    if img.width() != cfg.proxy_size || img.height() != cfg.proxy_size || img.space() != cfg.color_space {
        return Err(ModelError::WrongInput {
            expected: cfg.proxy_size,
            space: cfg.color_space,
            width: img.width(),
            height: img.height(),
            actual: img.space(),
        });
    }
    Ok(())
}

/// Backbone feature map for a `proxy×proxy` image in the model's color space.
pub fn classifier_forward(params: &ModelParams, img: &ImageBuffer) -> Result<FeatureMap, ModelError> {
    check_proxy_input(params, img)?;
    Ok(classifier_forward_cached(params, img).0)
}

pub(crate) fn classifier_forward_cached(params: &ModelParams, img: &ImageBuffer) -> (FeatureMap, ClassifierCache) {
    let mut x = FeatureMap::from_interleaved(img.height(), img.width(), img.data());
    let mut cache = ClassifierCache {
        inputs: Vec::with_capacity(CLASSIFIER_LAYERS),
        cols: Vec::with_capacity(CLASSIFIER_LAYERS),
        pre_act: Vec::with_capacity(CLASSIFIER_LAYERS),
        normed: Vec::with_capacity(CLASSIFIER_LAYERS),
    };
    for (l, conv) in params.classifier.iter().enumerate() {
        cache.inputs.push((x.h, x.w));
        let (mut z, cols) = conv.forward(&x);
        cache.cols.push(cols);
        cache.pre_act.push(z.data.clone());
        leaky_relu(&mut z.data);
        if NORMALIZED_LAYERS.contains(&l) {
            let inv = instance_norm(&mut z);
            cache.normed.push(Some((z.clone(), inv)));
        } else {
            cache.normed.push(None);
        }
        x = z;
    }
    (x, cache)
}

pub(crate) fn classifier_backward(
    params: &ModelParams,
    cache: &ClassifierCache,
    mut grad: FeatureMap,
    out: &mut ModelParams,
) {
    for l in (0..CLASSIFIER_LAYERS).rev() {
        if let Some((y, inv)) = &cache.normed[l] {
            instance_norm_backward(y, inv, &mut grad);
        }
        leaky_relu_backward(&cache.pre_act[l], &mut grad.data);
        grad = params.classifier[l].backward(cache.inputs[l], &cache.cols[l], &grad, &mut out.classifier[l]);
    }
}

/// Intermediate values of the two heads.
#[derive(Debug, Clone)]
pub struct HeadsCache {
    pooled: Vec<f64>,
    backbone_shape: (usize, usize, usize),
    wg_pre: Vec<f64>,
    wg_act: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
}

/// Fusion weights and contrastive feature from a backbone map.
pub fn heads_forward(params: &ModelParams, backbone: &FeatureMap) -> Result<(LutWeights, Feature), ModelError> {
    let top = params.config.widths[CLASSIFIER_LAYERS - 1];
    if backbone.c != top {
        return Err(ModelError::ShapeMismatch(format!(
            "backbone has {} channels, heads expect {top}",
            backbone.c
        )));
    }
    let (w, f, _) = heads_forward_cached(params, backbone);
    Ok((LutWeights::new(w)?, Feature(f)))
}

pub(crate) fn heads_forward_cached(params: &ModelParams, backbone: &FeatureMap) -> (Vec<f64>, Vec<f64>, HeadsCache) {
    let pooled = backbone.global_average();
    let wg_pre = params.weight_gen[0].forward(&pooled);
    let mut wg_act = wg_pre.clone();
    leaky_relu(&mut wg_act);
    let weights = params.weight_gen[1].forward(&wg_act);
    let mlp_pre = params.mlp[0].forward(&pooled);
    let mut mlp_act = mlp_pre.clone();
    leaky_relu(&mut mlp_act);
    let feature = params.mlp[1].forward(&mlp_act);
    let cache = HeadsCache {
        pooled,
        backbone_shape: (backbone.c, backbone.h, backbone.w),
        wg_pre,
        wg_act,
        mlp_pre,
        mlp_act,
    };
    (weights, feature, cache)
}

/// Backward through both heads; either upstream gradient may be absent.
/// Returns the gradient with respect to the backbone map.
pub(crate) fn heads_backward(
    params: &ModelParams,
    cache: &HeadsCache,
    d_weights: Option<&[f64]>,
    d_feature: Option<&[f64]>,
    out: &mut ModelParams,
) -> FeatureMap {
    let mut d_pooled = vec![0.0; cache.pooled.len()];
    if let Some(dw) = d_weights {
        let mut d_act = params.weight_gen[1].backward(&cache.wg_act, dw, &mut out.weight_gen[1]);
        leaky_relu_backward(&cache.wg_pre, &mut d_act);
        let d = params.weight_gen[0].backward(&cache.pooled, &d_act, &mut out.weight_gen[0]);
        d_pooled.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    if let Some(df) = d_feature {
        let mut d_act = params.mlp[1].backward(&cache.mlp_act, df, &mut out.mlp[1]);
        leaky_relu_backward(&cache.mlp_pre, &mut d_act);
        let d = params.mlp[0].backward(&cache.pooled, &d_act, &mut out.mlp[0]);
        d_pooled.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    let (c, h, w) = cache.backbone_shape;
    let n = (h * w) as f64;
    let mut grad = FeatureMap::zeros(c, h, w);
    for (ch, d) in grad.data.chunks_exact_mut(h * w).zip(&d_pooled) {
        ch.fill(d / n);
    }
    grad
}

/// Resizes a working-space image to the classifier's proxy size.
pub fn proxy_input(params: &ModelParams, working: &ImageBuffer) -> Result<ImageBuffer, ModelError> {
    let s = params.config.proxy_size;
    Ok(resize_bilinear(working, s, s)?)
}

/// Products of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Corrected image, `NormalizedSRGB`, same size as the input.
    pub out: ImageBuffer,
    pub weights: LutWeights,
    pub feature: Feature,
    /// The image-adaptive LUT, in the model's working space.
    pub fused: Lut3D,
}

/// Image-adaptive LUT for a `NormalizedSRGB` image.
pub fn adaptive_lut(params: &ModelParams, full_img: &ImageBuffer) -> Result<(Lut3D, LutWeights, Feature), ModelError> {
    let working = full_img.to_space(params.config.color_space);
    adaptive_lut_working(params, &working)
}

/// Image-adaptive LUT for an image already in the model's working space.
pub fn adaptive_lut_working(params: &ModelParams, working: &ImageBuffer) -> Result<(Lut3D, LutWeights, Feature), ModelError> {
    let proxy = proxy_input(params, working)?;
    let backbone = classifier_forward(params, &proxy)?;
    let (weights, feature) = heads_forward(params, &backbone)?;
    let fused = fuse(&params.basis_luts, &weights)?;
    Ok((fused, weights, feature))
}

/// Full inference: classify a downsampled copy, fuse, apply the fused LUT to
/// the full-resolution image and convert back to sRGB.
pub fn model_forward(params: &ModelParams, full_img: &ImageBuffer) -> Result<ForwardOutput, ModelError> {
    if full_img.space() != ColorSpace::NormalizedSRGB {
        return Err(ModelError::Image(crate::image::ImageError::WrongColorSpace {
            expected: ColorSpace::NormalizedSRGB,
            actual: full_img.space(),
        }));
    }
    let working = full_img.to_space(params.config.color_space);
    let (fused, weights, feature) = adaptive_lut_working(params, &working)?;
    let corrected = lut::apply(&fused, &working)?;
    Ok(ForwardOutput {
        out: corrected.to_space(ColorSpace::NormalizedSRGB),
        weights,
        feature,
        fused,
    })
}
