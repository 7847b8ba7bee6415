//! Wall-clock timing of the two inference stages.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ColorSpace, ImageBuffer};
use crate::lut::{self, fuse, Lut3D};
use crate::model::{classifier_forward, heads_forward, proxy_input, ModelError, ModelParams};

/// Summary of repeated measurements, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTiming {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub iters: usize,
}

impl StageTiming {
    pub fn from_samples(ms: &[f64]) -> Self {
        assert!(!ms.is_empty(), "at least one sample");
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            min_ms: ms.iter().cloned().fold(f64::INFINITY, f64::min),
            max_ms: ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            iters: ms.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    /// Resize to the proxy, classifier, heads and LUT fusion.
    pub proxy_fusion: StageTiming,
    /// Fused LUT applied to every full-resolution pixel.
    pub lut_apply: StageTiming,
}

impl fmt::Display for BenchReport {
    /// One `bench,<stage>,WxH,iters,mean_ms,min_ms,max_ms` row per stage.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, t) in [("proxy_fusion", &self.proxy_fusion), ("lut_apply", &self.lut_apply)] {
            writeln!(
                f,
                "bench,{name},{}x{},{},{:.3},{:.3},{:.3}",
                self.width, self.height, t.iters, t.mean_ms, t.min_ms, t.max_ms
            )?;
        }
        Ok(())
    }
}

/// Uniform noise image.
pub fn noise_image(width: usize, height: usize, seed: u64, space: ColorSpace) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height * 3).map(|_| rng.gen::<f64>()).collect();
    ImageBuffer::new(width, height, data, space).expect("values in [0, 1)")
}

fn time_ms<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

/// Times both stages `iters` times on a working-space noise image.
pub fn bench_stages(params: &ModelParams, width: usize, height: usize, iters: usize) -> Result<BenchReport, ModelError> {
    let iters = iters.max(1);
    let img = noise_image(width, height, 0, params.config.color_space);
    let mut a = Vec::with_capacity(iters);
    let mut b = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (fused, ms) = time_ms(|| -> Result<Lut3D, ModelError> {
            let proxy = proxy_input(params, &img)?;
            let backbone = classifier_forward(params, &proxy)?;
            let (w, _) = heads_forward(params, &backbone)?;
            Ok(fuse(&params.basis_luts, &w)?)
        });
        let fused = fused?;
        a.push(ms);
        let (out, ms) = time_ms(|| lut::apply(&fused, &img));
        out?;
        b.push(ms);
    }
    Ok(BenchReport {
        width,
        height,
        proxy_fusion: StageTiming::from_samples(&a),
        lut_apply: StageTiming::from_samples(&b),
    })
}

/// Fastest of `iters` full-image applications of `lut`.
pub fn min_apply_ms(lut: &Lut3D, img: &ImageBuffer, iters: usize) -> f64 {
    (0..iters.max(1))
        .map(|_| time_ms(|| lut::apply(lut, img).expect("valid input")).1)
        .fold(f64::INFINITY, f64::min)
}

/// Ratio of the fastest LUT application time at `large` pixels to that at
/// `small`; close to the pixel-count ratio when the stage scales linearly.
pub fn apply_scaling_ratio(lut: &Lut3D, small: (usize, usize), large: (usize, usize), iters: usize) -> f64 {
    let a = noise_image(small.0, small.1, 1, ColorSpace::NormalizedSRGB);
    let b = noise_image(large.0, large.1, 2, ColorSpace::NormalizedSRGB);
    // Warm up caches and the thread pool.
    let _ = min_apply_ms(lut, &a, 1);
    min_apply_ms(lut, &b, iters) / min_apply_ms(lut, &a, iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn one_row_per_stage() {
        let cfg = ModelConfig {
            proxy_size: 32,
            lut_size: 9,
            ..ModelConfig::default()
        };
        let p = init_params(0, &cfg).unwrap();
        let r = bench_stages(&p, 40, 30, 1).unwrap();
        assert_eq!(r.lut_apply.iters, 1);
        let text = r.to_string();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.starts_with("bench,") && l.contains(",40x30,1,")));
    }

    #[test]
    fn timing_summary() {
        let t = StageTiming::from_samples(&[3.0, 1.0, 2.0]);
        assert_eq!((t.mean_ms, t.min_ms, t.max_ms, t.iters), (2.0, 1.0, 3.0, 3));
    }
}
