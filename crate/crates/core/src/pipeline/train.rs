use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::objective::{batch_loss_and_grad, PreparedTriplet};
use super::{anchor_pool, sample_triplet, Dataset, PipelineError, TrainConfig};
use crate::losses::LossWeights;
use crate::model::{init_params, save_checkpoint, ModelParams};

pub const HISTORY_HEADER: &str = "epoch,L_WB,L_tri,L_s,L_m,L_total,lambda_tri";

/// Triplet weight in force during `epoch` (1-based).
pub fn lambda_tri_for_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch <= cfg.tri_switch_epoch {
        cfg.lambda_tri_early
    } else {
        cfg.lambda_tri_late
    }
}

/// Batch-averaged loss components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wb: f64,
    pub tri: f64,
    pub smooth: f64,
    pub mono: f64,
    pub total: f64,
    pub lambda_tri: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{}",
            self.epoch, self.wb, self.tri, self.smooth, self.mono, self.total, self.lambda_tri
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

impl TrainOutput {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.history {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    /// Writes `history.csv` and `model.ckpt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PipelineError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let hist = dir.join("history.csv");
        std::fs::write(&hist, self.history_csv()).map_err(io(&hist))?;
        save_checkpoint(&self.params, dir.join("model.ckpt"))?;
        Ok(())
    }
}

/// Adam with bias correction and a fixed step size.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut offset = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
            let n = p.len();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            p.par_iter_mut()
                .zip(g.par_iter())
                .zip(m.par_iter_mut().zip(v.par_iter_mut()))
                .for_each(|((p, &g), (m, v))| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
            offset += n;
        }
    }
}

/// Per-sample generator: a function of the seed, epoch and position only.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Trains from `init_params(cfg.seed)`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput, PipelineError> {
    let params = init_params(cfg.seed, &cfg.model)?;
    train_with(dataset, cfg, params, |_| {})
}

/// Trains from the given parameters, calling `on_epoch` after each epoch.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut params: ModelParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput, PipelineError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutput { params, history });
    }
    let pool = anchor_pool(dataset);
    if dataset.len() < 2 {
        return Err(PipelineError::NotEnoughScenes(dataset.len()));
    }
    if pool.is_empty() {
        return Err(PipelineError::SingleRendering(dataset.records()[0].scene_id.clone()));
    }
    let mut adam = Adam::new(params.num_params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    // Epochs are 1-based, so stream 0 is free for the anchor order.
    let mut order_rng = sample_rng(cfg.seed, 0, 0);

    for epoch in 1..=cfg.epochs {
        let lw = LossWeights {
            lambda_wb: cfg.lambda_wb,
            lambda_tri: lambda_tri_for_epoch(cfg, epoch),
            lambda_s: cfg.lambda_s,
            lambda_m: cfg.lambda_m,
        };
        let mut order: Vec<usize> = pool.iter().copied().cycle().take(pool.len() * cfg.samples_per_scene).collect();
        order.shuffle(&mut order_rng);

        let mut sums = [0.0; 5];
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let start = b * cfg.batch_size;
            let prepared: Vec<PreparedTriplet> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &scene)| {
                    let mut rng = sample_rng(cfg.seed, epoch, start + k);
                    let t = sample_triplet(dataset, scene, &mut rng, cfg)?;
                    PreparedTriplet::new(&t, &params)
                })
                .collect::<Result<_, _>>()?;
            let out = batch_loss_and_grad(&params, &prepared, &lw, cfg.triplet_margin)?;
            if let Some(component) = out.parts.first_non_finite() {
                return Err(PipelineError::NonFinite {
                    epoch,
                    batch: b + 1,
                    component,
                });
            }
            if !out.total.is_finite() {
                return Err(PipelineError::NonFinite {
                    epoch,
                    batch: b + 1,
                    component: "L_total",
                });
            }
            adam.step(&mut params, out.grad.as_ref().expect("gradient requested"));
            for (s, v) in sums
                .iter_mut()
                .zip([out.parts.wb, out.parts.tri, out.parts.smooth, out.parts.mono, out.total])
            {
                *s += v;
            }
            batches += 1;
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            wb: sums[0] / n,
            tri: sums[1] / n,
            smooth: sums[2] / n,
            mono: sums[3] / n,
            total: sums[4] / n,
            lambda_tri: lw.lambda_tri,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutput { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ColorSpace;
    use crate::model::ModelConfig;
    use crate::pipeline::synth_dataset;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 3,
            lr: 1e-3,
            patch: 16,
            tri_switch_epoch: 1,
            seed: 3,
            model: ModelConfig {
                n_basis: 2,
                lut_size: 5,
                color_space: ColorSpace::NormalizedLAB,
                proxy_size: 32,
                widths: [4, 4, 4, 4, 4],
                weight_gen_hidden: 8,
                mlp_hidden: 8,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lambda_tri_for_epoch(&cfg, 1), 10.0);
        assert_eq!(lambda_tri_for_epoch(&cfg, 100), 10.0);
        assert_eq!(lambda_tri_for_epoch(&cfg, 101), 1.0);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(3, 24, 1, dir.path()).unwrap();
        let ds = Dataset::from_manifest(&manifest).unwrap();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train(&ds, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.params, init_params(cfg.seed, &cfg.model).unwrap());
    }

    #[test]
    fn deterministic_history_and_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_dataset(4, 24, 2, dir.path()).unwrap();
        let ds = Dataset::from_manifest(&manifest).unwrap();
        let cfg = tiny_cfg();
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let lambdas: Vec<f64> = a.history.iter().map(|r| r.lambda_tri).collect();
        assert_eq!(lambdas, vec![10.0, 1.0, 1.0]);
        assert!(a.history.iter().all(|r| [r.wb, r.tri, r.smooth, r.mono, r.total].iter().all(|v| v.is_finite())));
        let csv = a.history_csv();
        assert!(csv.starts_with(HISTORY_HEADER));
        assert_eq!(csv.lines().count(), 4);

        let out = tempfile::tempdir().unwrap();
        a.save(out.path()).unwrap();
        assert!(out.path().join("model.ckpt").is_file());
        assert_eq!(std::fs::read_to_string(out.path().join("history.csv")).unwrap(), csv);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let cfg = tiny_cfg().model;
        let mut p = ModelParams::zeros(&cfg).unwrap();
        let mut g = p.zeros_like();
        g.mlp[0].bias[0] = 2.0;
        g.mlp[0].bias[1] = -0.5;
        let mut adam = Adam::new(p.num_params(), 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &g);
        // First bias-corrected Adam step has magnitude lr for any nonzero gradient.
        assert!((p.mlp[0].bias[0] + 0.1).abs() < 1e-6);
        assert!((p.mlp[0].bias[1] - 0.1).abs() < 1e-6);
        assert_eq!(p.mlp[0].bias[2], 0.0);
    }
}
