//! Evaluation metrics and their quartile summaries.

use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{srgb_pixel_to_lab, ColorSpace, ImageBuffer};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("images differ in size: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("expected NormalizedSRGB input, got {0:?}")]
    WrongColorSpace(ColorSpace),
    #[error("cannot summarize an empty list")]
    Empty,
}

fn check_pair(out: &ImageBuffer, gt: &ImageBuffer) -> Result<(), MetricError> {
    if !out.same_shape(gt) {
        return Err(MetricError::ShapeMismatch(out.width(), out.height(), gt.width(), gt.height()));
    }
    for img in [out, gt] {
        if img.space() != ColorSpace::NormalizedSRGB {
            return Err(MetricError::WrongColorSpace(img.space()));
        }
    }
    Ok(())
}

/// Angle in degrees between two RGB vectors; 0 when either is (near) black.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    if na < 1e-6 || nb < 1e-6 {
        return 0.0;
    }
    // atan2 of |a × b| and a · b stays accurate for nearly parallel vectors.
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    sin.atan2(cos).to_degrees()
}

fn mean_over_pixels(out: &ImageBuffer, gt: &ImageBuffer, f: impl Fn([f64; 3], [f64; 3]) -> f64 + Sync) -> f64 {
    let w = out.width() * 3;
    // Row sums in parallel, then a sequential fold so the result does not
    // depend on scheduling.
    let rows: Vec<f64> = out
        .data()
        .par_chunks(w)
        .zip(gt.data().par_chunks(w))
        .map(|(o, g)| {
            o.chunks_exact(3)
                .zip(g.chunks_exact(3))
                .map(|(a, b)| f([a[0], a[1], a[2]], [b[0], b[1], b[2]]))
                .sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / out.pixel_count() as f64
}

/// Mean per-pixel angular error in degrees.
pub fn metric_mae(out: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_pair(out, gt)?;
    Ok(mean_over_pixels(out, gt, angular_error))
}

/// Mean per-pixel CIEDE2000 difference.
pub fn metric_de2000(out: &ImageBuffer, gt: &ImageBuffer) -> Result<f64, MetricError> {
    check_pair(out, gt)?;
    Ok(mean_over_pixels(out, gt, |a, b| ciede2000(srgb_pixel_to_lab(a), srgb_pixel_to_lab(b))))
}

/// CIEDE2000 color difference between two L*a*b* colors, with
/// `kL = kC = kH = 1`.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;

    let c1 = a1.hypot(b1);
    let c2 = a2.hypot(b2);
    let c_bar7 = ((c1 + c2) / 2.0).powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + 25f64.powi(7))).sqrt());
    let a1p = (1.0 + g) * a1;
    let a2p = (1.0 + g) * a2;
    let c1p = a1p.hypot(b1);
    let c2p = a2p.hypot(b2);
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(b1, a1p);
    let h2p = hue(b2, a2p);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let dh = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let d_big_h = 2.0 * (c1p * c2p).sqrt() * (dh.to_radians() / 2.0).sin();

    let l_bar = (l1 + l2) / 2.0;
    let c_bar_p = (c1p + c2p) / 2.0;
    let h_bar_p = if c1p * c2p == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };

    let t = 1.0 - 0.17 * (h_bar_p - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_bar_p).to_radians().cos()
        + 0.32 * (3.0 * h_bar_p + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_bar_p - 63.0).to_radians().cos();
    let d_theta = 30.0 * (-((h_bar_p - 275.0) / 25.0).powi(2)).exp();
    let c_bar_p7 = c_bar_p.powi(7);
    let r_c = 2.0 * (c_bar_p7 / (c_bar_p7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * c_bar_p;
    let s_h = 1.0 + 0.015 * c_bar_p * t;
    let r_t = -(2.0 * d_theta * PI / 180.0).sin() * r_c;

    let tl = dl / s_l;
    let tc = dc / s_c;
    let th = d_big_h / s_h;
    (tl * tl + tc * tc + th * th + r_t * tc * th).sqrt()
}

/// Per-image values with mean and quartiles.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub values: Vec<f64>,
    pub mean: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

/// Linear interpolation between order statistics at position `(n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(values: &[f64]) -> Result<MetricReport, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(MetricReport {
        values: values.to_vec(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q1: quantile_sorted(&sorted, 0.25),
        q2: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

impl MetricReport {
    /// `metric,mean,q1,q2,q3`
    pub fn csv_row(&self, name: &str) -> String {
        format!("metric,{name},{:.6},{:.6},{:.6},{:.6}", self.mean, self.q1, self.q2, self.q3)
    }
}

/// Aligned text table of several named reports.
pub struct ReportTable<'a>(pub &'a [(&'a str, &'a MetricReport)]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>10} {:>10} {:>10} {:>10} {:>6}", "metric", "mean", "Q1", "Q2", "Q3", "n")?;
        for (name, r) in self.0 {
            writeln!(
                f,
                "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>6}",
                name,
                r.mean,
                r.q1,
                r.q2,
                r.q3,
                r.values.len()
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(rgb: [f64; 3]) -> ImageBuffer {
        ImageBuffer::new(1, 1, rgb.to_vec(), ColorSpace::NormalizedSRGB).unwrap()
    }

    #[test]
    fn mae_examples() {
        let a = px([0.2, 0.5, 0.7]);
        assert_eq!(metric_mae(&a, &a).unwrap(), 0.0);
        assert!((metric_mae(&px([1., 0., 0.]), &px([0., 1., 0.])).unwrap() - 90.0).abs() < 1e-12);
        assert!((metric_mae(&px([1., 1., 0.]), &px([1., 0., 0.])).unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(metric_mae(&px([0., 0., 0.]), &px([1., 0., 0.])).unwrap(), 0.0);
        let two = ImageBuffer::filled(2, 1, [0.5; 3], ColorSpace::NormalizedSRGB).unwrap();
        assert!(matches!(metric_mae(&a, &two), Err(MetricError::ShapeMismatch(..))));
    }

    #[test]
    fn de2000_identity_and_reference_pair() {
        let a = px([0.3, 0.6, 0.1]);
        assert_eq!(metric_de2000(&a, &a).unwrap(), 0.0);
        let d = ciede2000([50.0, 2.6772, -79.7751], [50.0, 0.0, -82.7485]);
        assert!((d - 2.0425).abs() < 1e-4);
        let lab = a.to_space(ColorSpace::NormalizedLAB);
        assert!(matches!(metric_de2000(&lab, &lab), Err(MetricError::WrongColorSpace(_))));
    }

    #[test]
    fn summarize_examples() {
        let r = summarize(&[5.0]).unwrap();
        assert_eq!((r.mean, r.q1, r.q2, r.q3), (5.0, 5.0, 5.0, 5.0));
        assert_eq!(summarize(&[1., 2., 3., 4.]).unwrap().q2, 2.5);
        let r = summarize(&[0.0, 10.0]).unwrap();
        assert_eq!((r.mean, r.q1, r.q3), (5.0, 2.5, 7.5));
        assert!(matches!(summarize(&[]), Err(MetricError::Empty)));
        assert_eq!(r.csv_row("mae"), "metric,mae,5.000000,2.500000,5.000000,7.500000");
    }

    proptest! {
        #[test]
        fn report_is_ordered(values in proptest::collection::vec(-100.0f64..100.0, 1..50)) {
            let r = summarize(&values).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.q1 <= r.q2 && r.q2 <= r.q3);
            prop_assert!(r.mean >= lo - 1e-9 && r.mean <= hi + 1e-9);
        }

        #[test]
        fn mae_symmetric_and_scale_invariant(
            a in proptest::array::uniform3(0.01f64..0.5),
            b in proptest::array::uniform3(0.01f64..0.5),
            s in 0.1f64..2.0,
        ) {
            let ab = angular_error(a, b);
            prop_assert!((ab - angular_error(b, a)).abs() < 1e-9);
            prop_assert!((ab - angular_error(a.map(|v| v * s), b.map(|v| v * s))).abs() < 1e-6);
        }
    }
}
