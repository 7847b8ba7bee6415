//! Datasets, triplet sampling, training, evaluation and synthetic data.

mod eval;
mod manifest;
pub mod objective;
mod synth;
mod train;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::Rng;
use thiserror::Error;

use crate::color_mapping::{apply_correction, fit_correction_with, FitError, FitOptions, DEFAULT_SAMPLE_CAP};
use crate::image::{crop_and_flip, load_image, ImageBuffer, ImageError};
use crate::losses::LossError;
use crate::lut::LutError;
use crate::metrics::MetricError;
use crate::model::{ModelConfig, ModelError};

pub use eval::{evaluate, evaluate_with};
pub use manifest::{load_manifest, parse_manifest, write_manifest, SceneRecord, WbSetting};
pub use synth::{render_cast, synth_dataset, synth_ground_truth, SynthCast};
pub use train::{lambda_tri_for_epoch, train, train_with, Adam, EpochRecord, TrainOutput, HISTORY_HEADER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}:{line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error("duplicate scene id {0:?}")]
    DuplicateScene(String),
    #[error("scene {scene:?}: missing file {}", path.display())]
    MissingFile { scene: String, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("need at least 2 scenes, found {0}")]
    NotEnoughScenes(usize),
    #[error("scene {0:?} has a single rendering, so no hard negative exists")]
    SingleRendering(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {component} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        component: &'static str,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Side of the square training crops.
    pub patch: usize,
    pub lambda_tri_early: f64,
    pub lambda_tri_late: f64,
    /// Last epoch (1-based) trained with `lambda_tri_early`.
    pub tri_switch_epoch: usize,
    pub lambda_wb: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub triplet_margin: f64,
    /// Random horizontal and vertical flips of each crop.
    pub flip: bool,
    /// Times each eligible scene serves as an anchor per epoch.
    pub samples_per_scene: usize,
    /// Pixel cap for the per-draw polynomial fit.
    pub fit_sample_cap: Option<usize>,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patch: 256,
            lambda_tri_early: 10.0,
            lambda_tri_late: 1.0,
            tri_switch_epoch: 100,
            lambda_wb: 1.0,
            lambda_s: 1e-4,
            lambda_m: 10.0,
            triplet_margin: 0.0,
            flip: true,
            samples_per_scene: 1,
            fit_sample_cap: Some(DEFAULT_SAMPLE_CAP),
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.batch_size == 0 || self.patch == 0 || self.samples_per_scene == 0 {
            return bad("batch_size, patch and samples_per_scene must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("Adam epsilon must be positive".into());
        }
        let lambdas = [
            self.lambda_tri_early,
            self.lambda_tri_late,
            self.lambda_wb,
            self.lambda_s,
            self.lambda_m,
        ];
        if lambdas.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        // An untrained run (epochs = 0) keeps the default switch epoch.
        if self.epochs > 0 && self.tri_switch_epoch > self.epochs {
            return bad(format!(
                "tri_switch_epoch {} exceeds epochs {}",
                self.tri_switch_epoch, self.epochs
            ));
        }
        self.model.validate()?;
        Ok(())
    }

    fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            sample_cap: self.fit_sample_cap,
            seed,
        }
    }
}

/// Scene records plus a cache of decoded images.
#[derive(Debug, Default)]
pub struct Dataset {
    records: Vec<SceneRecord>,
    cache: RwLock<HashMap<PathBuf, Arc<ImageBuffer>>>,
}

impl Dataset {
    pub fn new(records: Vec<SceneRecord>) -> Self {
        Self {
            records,
            cache: RwLock::default(),
        }
    }

    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Ok(Self::new(load_manifest(path)?))
    }

    pub fn records(&self) -> &[SceneRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rendering_count(&self) -> usize {
        self.records.iter().map(|r| r.renderings.len()).sum()
    }

    /// Loads `path` once and shares the decoded buffer afterwards.
    pub fn image(&self, path: &Path) -> Result<Arc<ImageBuffer>, PipelineError> {
        if let Some(img) = self.cache.read().unwrap().get(path) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(load_image(path)?);
        self.cache
            .write()
            .unwrap()
            .entry(path.to_path_buf())
            .or_insert_with(|| Arc::clone(&img));
        Ok(img)
    }
}

/// One training sample; all four members are equal-size square
/// `NormalizedSRGB` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: ImageBuffer,
    pub positive: ImageBuffer,
    pub negative: ImageBuffer,
    pub anchor_gt: ImageBuffer,
}

fn random_window(
    rng: &mut impl Rng,
    img: &ImageBuffer,
    size: usize,
    flip: bool,
) -> (usize, usize, bool, bool) {
    let x0 = rng.gen_range(0..=img.width() - size);
    let y0 = rng.gen_range(0..=img.height() - size);
    let (h, v) = if flip { (rng.gen(), rng.gen()) } else { (false, false) };
    (x0, y0, h, v)
}

fn crop(img: &ImageBuffer, win: (usize, usize, bool, bool), size: usize) -> Result<ImageBuffer, ImageError> {
    crop_and_flip(img, win.0, win.1, size, win.2, win.3)
}

/// Draws an (anchor, hard positive, hard negative, anchor ground truth)
/// sample around scene `anchor_scene`.
///
/// The anchor is a random rendering of the scene and the negative another
/// rendering of the same scene. The positive is a different scene's ground
/// truth carrying the anchor's cast, obtained by fitting the polynomial
/// mapping from the anchor's ground truth to the anchor. The anchor and its
/// ground truth share one crop window; the other two get their own.
pub fn sample_triplet(
    dataset: &Dataset,
    anchor_scene: usize,
    rng: &mut impl Rng,
    cfg: &TrainConfig,
) -> Result<Triplet, PipelineError> {
    let records = dataset.records();
    if records.len() < 2 {
        return Err(PipelineError::NotEnoughScenes(records.len()));
    }
    let scene = &records[anchor_scene];
    if scene.renderings.len() < 2 {
        return Err(PipelineError::SingleRendering(scene.scene_id.clone()));
    }
    let renderings: Vec<&PathBuf> = scene.renderings.values().collect();
    let a = rng.gen_range(0..renderings.len());
    let n = (a + rng.gen_range(1..renderings.len())) % renderings.len();
    let other = (anchor_scene + rng.gen_range(1..records.len())) % records.len();

    let anchor = dataset.image(renderings[a])?;
    let anchor_gt = dataset.image(&scene.gt_path)?;
    let negative = dataset.image(renderings[n])?;
    let other_gt = dataset.image(&records[other].gt_path)?;

    let size = [&anchor, &anchor_gt, &negative, &other_gt]
        .iter()
        .map(|i| i.width().min(i.height()))
        .fold(cfg.patch, usize::min);

    let inverse = fit_correction_with(&anchor_gt, &anchor, cfg.fit_options(rng.gen()))?;
    let wa = random_window(rng, &anchor, size, cfg.flip);
    let wn = random_window(rng, &negative, size, cfg.flip);
    let wp = random_window(rng, &other_gt, size, cfg.flip);
    // The fitted mapping is per pixel, so it commutes with cropping.
    let positive = apply_correction(&inverse, &crop(&other_gt, wp, size)?);
    Ok(Triplet {
        anchor: crop(&anchor, wa, size)?,
        anchor_gt: crop(&anchor_gt, wa, size)?,
        negative: crop(&negative, wn, size)?,
        positive,
    })
}

/// Indices of scenes that can serve as anchors.
pub fn anchor_pool(dataset: &Dataset) -> Vec<usize> {
    dataset
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.renderings.len() >= 2)
        .map(|(i, _)| i)
        .collect()
}
