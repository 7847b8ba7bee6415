//! Training objectives: direct supervision, triplet, LUT smoothness and
//! monotonicity, and their weighted sum. Each loss has a matching gradient
//! helper used by the training loop.

use thiserror::Error;

use crate::image::ImageBuffer;
use crate::lut::{Lut3D, LutWeights};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_wb: f64,
    pub lambda_tri: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
}

impl LossWeights {
    /// Weights used for the early phase of training.
    pub const PAPER_EARLY: LossWeights = LossWeights {
        lambda_wb: 1.0,
        lambda_tri: 10.0,
        lambda_s: 1e-4,
        lambda_m: 10.0,
    };

    pub fn with_tri(self, lambda_tri: f64) -> Self {
        Self { lambda_tri, ..self }
    }

    pub fn is_valid(&self) -> bool {
        [self.lambda_wb, self.lambda_tri, self.lambda_s, self.lambda_m]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::PAPER_EARLY
    }
}

/// The four loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub wb: f64,
    pub tri: f64,
    pub smooth: f64,
    pub mono: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.wb.is_finite() && self.tri.is_finite() && self.smooth.is_finite() && self.mono.is_finite()
    }

    /// Name of the first non-finite component.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [("L_WB", self.wb), ("L_tri", self.tri), ("L_s", self.smooth), ("L_m", self.mono)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

pub fn loss_total(parts: &LossParts, lw: &LossWeights) -> f64 {
    lw.lambda_wb * parts.wb + lw.lambda_tri * parts.tri + lw.lambda_s * parts.smooth + lw.lambda_m * parts.mono
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean norm of `out - gt` over all pixels and channels.
pub fn image_distance(out: &[f64], gt: &[f64]) -> f64 {
    l2(out, gt)
}

/// Gradient of [`image_distance`] with respect to `out`; zero when the two
/// coincide.
pub fn image_distance_grad(out: &[f64], gt: &[f64]) -> Vec<f64> {
    let d = l2(out, gt);
    if d == 0.0 {
        return vec![0.0; out.len()];
    }
    out.iter().zip(gt).map(|(o, g)| (o - g) / d).collect()
}

/// Mean over the batch of the per-image Euclidean distance.
pub fn loss_wb(outs: &[ImageBuffer], gts: &[ImageBuffer]) -> Result<f64, LossError> {
    if outs.len() != gts.len() {
        return Err(LossError::ShapeMismatch(format!("{} outputs vs {} targets", outs.len(), gts.len())));
    }
    if outs.is_empty() {
        return Err(LossError::Empty("batch"));
    }
    let mut total = 0.0;
    for (i, (o, g)) in outs.iter().zip(gts).enumerate() {
        if !o.same_shape(g) {
            return Err(LossError::ShapeMismatch(format!("image {i} dimensions differ")));
        }
        total += image_distance(o.data(), g.data());
    }
    Ok(total / outs.len() as f64)
}

/// `‖a - p‖ - ‖a - n‖ + margin` for one triplet. With `margin = 0` this is
/// the unhinged form, which may be negative.
pub fn triplet_term(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    l2(anchor, positive) - l2(anchor, negative) + margin
}

/// Gradients of [`triplet_term`] with respect to anchor, positive and negative.
pub fn triplet_term_grad(anchor: &[f64], positive: &[f64], negative: &[f64]) -> [Vec<f64>; 3] {
    let dp = l2(anchor, positive);
    let dn = l2(anchor, negative);
    let unit = |a: &[f64], b: &[f64], d: f64| -> Vec<f64> {
        if d == 0.0 {
            vec![0.0; a.len()]
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
        }
    };
    let up = unit(anchor, positive, dp);
    let un = unit(anchor, negative, dn);
    let ga = up.iter().zip(&un).map(|(p, n)| p - n).collect();
    let gp = up.iter().map(|v| -v).collect();
    [ga, gp, un]
}

pub fn loss_triplet<F: AsRef<[f64]>>(anchors: &[F], positives: &[F], negatives: &[F], margin: f64) -> Result<f64, LossError> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(LossError::ShapeMismatch(format!(
            "batch sizes {}/{}/{}",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    if anchors.is_empty() {
        return Err(LossError::Empty("batch"));
    }
    let mut total = 0.0;
    for ((a, p), n) in anchors.iter().zip(positives).zip(negatives) {
        let (a, p, n) = (a.as_ref(), p.as_ref(), n.as_ref());
        if a.len() != p.len() || a.len() != n.len() {
            return Err(LossError::ShapeMismatch("feature lengths differ".into()));
        }
        total += triplet_term(a, p, n, margin);
    }
    Ok(total / anchors.len() as f64)
}

/// Visits every axis-adjacent pair of lattice entries as
/// `(axis, lower_offset, upper_offset)`; offsets point at channel 0.
fn for_each_adjacent(m: usize, mut f: impl FnMut(usize, usize, usize)) {
    let idx = |i: usize, j: usize, k: usize| ((i * m + j) * m + k) * 3;
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let here = idx(i, j, k);
                if i + 1 < m {
                    f(0, here, idx(i + 1, j, k));
                }
                if j + 1 < m {
                    f(1, here, idx(i, j + 1, k));
                }
                if k + 1 < m {
                    f(2, here, idx(i, j, k + 1));
                }
            }
        }
    }
}

/// Sum of squared differences between axis-adjacent entries (all channels).
pub fn lattice_smoothness(lut: &Lut3D) -> f64 {
    let v = lut.values();
    let mut s = 0.0;
    for_each_adjacent(lut.size(), |_, lo, hi| {
        for c in 0..3 {
            let d = v[hi + c] - v[lo + c];
            s += d * d;
        }
    });
    s
}

pub fn lattice_smoothness_grad(lut: &Lut3D) -> Vec<f64> {
    let v = lut.values();
    let mut g = vec![0.0; v.len()];
    for_each_adjacent(lut.size(), |_, lo, hi| {
        for c in 0..3 {
            let d = v[hi + c] - v[lo + c];
            g[hi + c] += 2.0 * d;
            g[lo + c] -= 2.0 * d;
        }
    });
    g
}

/// Mean over the batch of `‖w‖²`.
pub fn weight_norm(weights_batch: &[LutWeights]) -> f64 {
    if weights_batch.is_empty() {
        return 0.0;
    }
    weights_batch
        .iter()
        .map(|w| w.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / weights_batch.len() as f64
}

/// Lattice smoothness summed over LUTs plus the predicted-weight norm.
pub fn loss_smooth(luts: &[Lut3D], weights_batch: &[LutWeights]) -> Result<f64, LossError> {
    if luts.is_empty() {
        return Err(LossError::Empty("luts"));
    }
    Ok(luts.iter().map(lattice_smoothness).sum::<f64>() + weight_norm(weights_batch))
}

/// Squared violations of monotonicity along each axis, measured on the
/// channel that axis indexes.
pub fn lattice_monotonicity(lut: &Lut3D) -> f64 {
    let v = lut.values();
    let mut s = 0.0;
    for_each_adjacent(lut.size(), |axis, lo, hi| {
        let d = (v[lo + axis] - v[hi + axis]).max(0.0);
        s += d * d;
    });
    s
}

pub fn lattice_monotonicity_grad(lut: &Lut3D) -> Vec<f64> {
    let v = lut.values();
    let mut g = vec![0.0; v.len()];
    for_each_adjacent(lut.size(), |axis, lo, hi| {
        let d = (v[lo + axis] - v[hi + axis]).max(0.0);
        g[lo + axis] += 2.0 * d;
        g[hi + axis] -= 2.0 * d;
    });
    g
}

pub fn loss_mono(luts: &[Lut3D]) -> Result<f64, LossError> {
    if luts.is_empty() {
        return Err(LossError::Empty("luts"));
    }
    Ok(luts.iter().map(lattice_monotonicity).sum())
}
