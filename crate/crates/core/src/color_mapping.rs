//! Degree-2 polynomial color mapping and hard-positive synthesis.
//!
//! A [`ColorCorrection`] is a `3×11` matrix applied to the monomial
//! expansion [`psi`] of each pixel. Fitting it from a ground truth onto a
//! cast rendering captures (coarsely) the cast; applying that fit to a
//! different scene's ground truth yields an image that needs roughly the same
//! correction as the original rendering.

use std::path::Path;

use nalgebra::{DMatrix, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::image::{ColorSpace, ImageBuffer};

pub const FEATURE_DIM: usize = 11;

/// Default cap on the number of pixels used as fit samples.
pub const DEFAULT_SAMPLE_CAP: usize = 50_000;

// Singular values of R below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("source is {0}x{1} but target is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("at least {FEATURE_DIM} pixels are needed, got {0}")]
    TooFewPixels(usize),
    #[error("expected NormalizedSRGB input, got {0:?}")]
    WrongColorSpace(ColorSpace),
    #[error("least-squares solve failed: {0}")]
    Solve(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `(r, g, b, rg, rb, gb, r², b², g², rgb, 1)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyFeature(pub [f64; FEATURE_DIM]);

#[inline]
pub fn psi(rgb: [f64; 3]) -> PolyFeature {
    let [r, g, b] = rgb;
    PolyFeature([r, g, b, r * g, r * b, g * b, r * r, b * b, g * g, r * g * b, 1.0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorCorrection {
    pub m: [[f64; FEATURE_DIM]; 3],
}

impl ColorCorrection {
    /// Passes `(r, g, b)` straight through.
    pub fn identity() -> Self {
        let mut m = [[0.0; FEATURE_DIM]; 3];
        for (c, row) in m.iter_mut().enumerate() {
            row[c] = 1.0;
        }
        Self { m }
    }

    pub fn zeros() -> Self {
        Self {
            m: [[0.0; FEATURE_DIM]; 3],
        }
    }

    /// `M ψ(rgb)` before clamping.
    #[inline]
    pub fn map_raw(&self, rgb: [f64; 3]) -> [f64; 3] {
        let f = psi(rgb).0;
        self.m.map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
    }

    /// Plain-text dump: three rows of eleven values, 9 significant digits.
    pub fn to_text(&self) -> String {
        self.m
            .iter()
            .map(|row| row.iter().map(|v| format!("{v:.8e}")).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<(), FitError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| FitError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Uniformly subsample at most this many pixels; `None` uses all.
    pub sample_cap: Option<usize>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            sample_cap: Some(DEFAULT_SAMPLE_CAP),
            seed: 0,
        }
    }
}

/// Least-squares fit of `target ≈ M ψ(source)` over pixels.
pub fn fit_correction(source: &ImageBuffer, target: &ImageBuffer) -> Result<ColorCorrection, FitError> {
    fit_correction_with(source, target, FitOptions::default())
}

pub fn fit_correction_with(
    source: &ImageBuffer,
    target: &ImageBuffer,
    opts: FitOptions,
) -> Result<ColorCorrection, FitError> {
    for img in [source, target] {
        if img.space() != ColorSpace::NormalizedSRGB {
            return Err(FitError::WrongColorSpace(img.space()));
        }
    }
    if !source.same_shape(target) {
        return Err(FitError::DimensionMismatch(
            source.width(),
            source.height(),
            target.width(),
            target.height(),
        ));
    }
    let n = source.pixel_count();
    if n < FEATURE_DIM {
        return Err(FitError::TooFewPixels(n));
    }
    let rows: Vec<usize> = match opts.sample_cap {
        Some(cap) if cap < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = rand::seq::index::sample(&mut rng, n, cap.max(FEATURE_DIM)).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let (src, tgt) = (source.data(), target.data());
    let p = rows.len();
    // Column-major storage for nalgebra, assembled in parallel per column.
    let mut a = vec![0.0; p * FEATURE_DIM];
    a.par_chunks_mut(p).enumerate().for_each(|(col, out)| {
        for (o, &r) in out.iter_mut().zip(&rows) {
            *o = psi([src[3 * r], src[3 * r + 1], src[3 * r + 2]]).0[col];
        }
    });
    let mut b = vec![0.0; p * 3];
    for (c, out) in b.chunks_mut(p).enumerate() {
        for (o, &r) in out.iter_mut().zip(&rows) {
            *o = tgt[3 * r + c];
        }
    }
    let solution = solve_min_norm(
        DMatrix::from_vec(p, FEATURE_DIM, a),
        DMatrix::from_vec(p, 3, b),
    )?;
    let mut m = [[0.0; FEATURE_DIM]; 3];
    for (c, row) in m.iter_mut().enumerate() {
        for (f, v) in row.iter_mut().enumerate() {
            *v = solution[(f, c)];
        }
    }
    Ok(ColorCorrection { m })
}

/// Minimum-norm least squares: Householder QR of the tall system, then a
/// rank-revealing SVD of the small triangular factor.
fn solve_min_norm(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<SMatrix<f64, FEATURE_DIM, 3>, FitError> {
    let qr = a.qr();
    let mut qtb = b;
    qr.q_tr_mul(&mut qtb);
    let r: SMatrix<f64, FEATURE_DIM, FEATURE_DIM> = qr.r().fixed_view::<FEATURE_DIM, FEATURE_DIM>(0, 0).into_owned();
    let rhs: SMatrix<f64, FEATURE_DIM, 3> = qtb.fixed_view::<FEATURE_DIM, 3>(0, 0).into_owned();
    let svd = r.svd(true, true);
    let sigma_max = svd.singular_values.max();
    if !sigma_max.is_finite() {
        return Err(FitError::Solve("non-finite singular values"));
    }
    if sigma_max == 0.0 {
        return Ok(SMatrix::zeros());
    }
    svd.solve(&rhs, sigma_max * RANK_TOLERANCE).map_err(FitError::Solve)
}

/// Per-pixel `M ψ(pixel)`, clamped to `[0, 1]`.
pub fn apply_correction(corr: &ColorCorrection, img: &ImageBuffer) -> ImageBuffer {
    let mut out = vec![0.0; img.data().len()];
    out.par_chunks_mut(3 * 1024)
        .zip(img.data().par_chunks(3 * 1024))
        .for_each(|(dst, src)| {
            for (d, s) in dst.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
                d.copy_from_slice(&corr.map_raw([s[0], s[1], s[2]]));
            }
        });
    ImageBuffer::from_clamped(img.width(), img.height(), out, img.space()).expect("shape from a valid buffer")
}

/// Maps `other_gt` through the fitted inverse of the correction that takes
/// `anchor` to `anchor_gt`.
pub fn make_hard_positive(
    anchor: &ImageBuffer,
    anchor_gt: &ImageBuffer,
    other_gt: &ImageBuffer,
) -> Result<ImageBuffer, FitError> {
    make_hard_positive_with(anchor, anchor_gt, other_gt, FitOptions::default())
}

pub fn make_hard_positive_with(
    anchor: &ImageBuffer,
    anchor_gt: &ImageBuffer,
    other_gt: &ImageBuffer,
    opts: FitOptions,
) -> Result<ImageBuffer, FitError> {
    if other_gt.space() != ColorSpace::NormalizedSRGB {
        return Err(FitError::WrongColorSpace(other_gt.space()));
    }
    let inverse = fit_correction_with(anchor_gt, anchor, opts)?;
    Ok(apply_correction(&inverse, other_gt))
}

/// Root-mean-square difference over all components.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}
