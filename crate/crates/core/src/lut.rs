//! 3D LUT lattice: trilinear application, its vector-Jacobian product,
//! weighted fusion of basis tables, and `.cube` I/O.
//!
//! Lattice entry `(i, j, k)` sits at input `(i, j, k) / (m - 1)` with `i`
//! indexing the first channel (R or L), `j` the second and `k` the third.
//! Storage is channel-interleaved with `k` fastest:
//!
//! ```text
//! values[((i * m + j) * m + k) * 3 + c]
//! ```
//!
//! A `.cube` file lists entries with R fastest, so reading and writing walk
//! the lattice with the axes swapped.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{ColorSpace, ImageBuffer};

pub const DEFAULT_LUT_SIZE: usize = 33;

// Pixels per parallel work item in the backward pass. Fixed so that the
// merge order does not depend on the thread count.
const BACKWARD_CHUNK_PIXELS: usize = 1 << 14;

#[derive(Debug, Error)]
pub enum LutError {
    #[error("lattice size must be at least 2, got {0}")]
    InvalidSize(usize),
    #[error("expected {expected} lattice values, got {actual}")]
    ValueCount { expected: usize, actual: usize },
    #[error("input component {value} at index {index} is outside [0, 1]")]
    InputOutOfRange { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot fuse an empty basis")]
    EmptyBasis,
    #[error("non-finite fusion weight at position {0}")]
    NonFiniteWeight(usize),
    #[error("{path}: malformed .cube header: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("{path}: expected {expected} entries for LUT_3D_SIZE {size}, found {found}")]
    EntryCount {
        path: String,
        size: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: only the unit domain is supported, found {line}")]
    NonUnitDomain { path: String, line: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lut3D {
    m: usize,
    values: Vec<f64>,
}

/// Fusion weights, one per basis LUT.
#[derive(Debug, Clone, PartialEq)]
pub struct LutWeights(Vec<f64>);

impl LutWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, LutError> {
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(LutError::NonFiniteWeight(i));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cell lookup along one axis: lower corner index and fractional offset.
///
/// A coordinate exactly on an interior lattice plane belongs to the cell
/// below it (fraction 1). Both sides give the same value; the choice fixes
/// which one-sided derivative the backward pass reports.
///
/// `i / (m - 1) * (m - 1)` is not always exactly `i` in floating point, so
/// positions within a few ulps of a lattice plane are snapped onto it.
#[inline]
fn locate(x: f64, m: usize) -> (usize, f64) {
    let mut s = x * (m - 1) as f64;
    let r = s.round();
    if (s - r).abs() <= 4.0 * f64::EPSILON * r.max(1.0) {
        s = r;
    }
    let i0 = (s.ceil() - 1.0).clamp(0.0, (m - 2) as f64) as usize;
    (i0, s - i0 as f64)
}

struct Cell {
    base: [usize; 3],
    frac: [f64; 3],
}

impl Cell {
    #[inline]
    fn new(rgb: [f64; 3], m: usize) -> Self {
        let (i, fi) = locate(rgb[0], m);
        let (j, fj) = locate(rgb[1], m);
        let (k, fk) = locate(rgb[2], m);
        Self {
            base: [i, j, k],
            frac: [fi, fj, fk],
        }
    }

    /// Flat entry offsets and trilinear weights of the eight corners, in
    /// `(di, dj, dk)` binary order.
    #[inline]
    fn corners(&self, m: usize) -> [(usize, f64); 8] {
        let [i, j, k] = self.base;
        let [fi, fj, fk] = self.frac;
        let wi = [1.0 - fi, fi];
        let wj = [1.0 - fj, fj];
        let wk = [1.0 - fk, fk];
        let mut out = [(0, 0.0); 8];
        for (n, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (n >> 2, (n >> 1) & 1, n & 1);
            let idx = ((i + di) * m + (j + dj)) * m + (k + dk);
            *slot = (idx * 3, wi[di] * wj[dj] * wk[dk]);
        }
        out
    }
}

impl Lut3D {
    pub fn from_values(m: usize, values: Vec<f64>) -> Result<Self, LutError> {
        if m < 2 {
            return Err(LutError::InvalidSize(m));
        }
        let expected = m * m * m * 3;
        if values.len() != expected {
            return Err(LutError::ValueCount {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { m, values })
    }

    pub fn zeros(m: usize) -> Result<Self, LutError> {
        Self::from_values(m, vec![0.0; m.pow(3) * 3])
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.m + j) * self.m + k) * 3
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let n = self.index(i, j, k);
        [self.values[n], self.values[n + 1], self.values[n + 2]]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, rgb: [f64; 3]) {
        let n = self.index(i, j, k);
        self.values[n..n + 3].copy_from_slice(&rgb);
    }

    /// Trilinear lookup of one color. Components must be in `[0, 1]`.
    #[inline]
    pub fn apply_pixel(&self, rgb: [f64; 3]) -> [f64; 3] {
        let cell = Cell::new(rgb, self.m);
        let mut out = [0.0; 3];
        for (idx, w) in cell.corners(self.m) {
            out[0] += w * self.values[idx];
            out[1] += w * self.values[idx + 1];
            out[2] += w * self.values[idx + 2];
        }
        out
    }

    /// Applies the LUT to interleaved pixels without clamping the result.
    pub fn apply_raw(&self, pixels: &[f64]) -> Result<Vec<f64>, LutError> {
        check_unit(pixels)?;
        let mut out = vec![0.0; pixels.len()];
        out.par_chunks_mut(3 * 1024)
            .zip(pixels.par_chunks(3 * 1024))
            .for_each(|(dst, src)| {
                for (d, s) in dst.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
                    d.copy_from_slice(&self.apply_pixel([s[0], s[1], s[2]]));
                }
            });
        Ok(out)
    }
}

fn check_unit(pixels: &[f64]) -> Result<(), LutError> {
    if !pixels.len().is_multiple_of(3) {
        return Err(LutError::ShapeMismatch(format!(
            "pixel buffer length {} is not a multiple of 3",
            pixels.len()
        )));
    }
    match pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(LutError::InputOutOfRange {
            index,
            value: pixels[index],
        }),
        None => Ok(()),
    }
}

pub fn identity_lut(m: usize) -> Result<Lut3D, LutError> {
    let mut lut = Lut3D::zeros(m)?;
    let step = (m - 1) as f64;
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                lut.set(i, j, k, [i as f64 / step, j as f64 / step, k as f64 / step]);
            }
        }
    }
    Ok(lut)
}

/// Applies `lut` to every pixel of `img`. The color-space tag is kept and
/// results are clamped to `[0, 1]`; see [`Lut3D::apply_raw`] for the
/// unclamped values.
pub fn apply(lut: &Lut3D, img: &ImageBuffer) -> Result<ImageBuffer, LutError> {
    let out = lut.apply_raw(img.data())?;
    Ok(ImageBuffer::from_clamped(img.width(), img.height(), out, img.space())
        .expect("shape taken from a valid buffer"))
}

/// Gradients produced by [`apply_backward`].
#[derive(Debug, Clone)]
pub struct ApplyGrads {
    /// Same layout as [`Lut3D::values`].
    pub lut: Vec<f64>,
    /// Same layout as the input pixels.
    pub pixels: Vec<f64>,
}

/// Vector-Jacobian product of [`Lut3D::apply_raw`] with respect to the
/// lattice values and the input pixels.
pub fn apply_backward(lut: &Lut3D, pixels: &[f64], grad_out: &[f64]) -> Result<ApplyGrads, LutError> {
    check_unit(pixels)?;
    if grad_out.len() != pixels.len() {
        return Err(LutError::ShapeMismatch(format!(
            "grad_out has {} values, pixels have {}",
            grad_out.len(),
            pixels.len()
        )));
    }
    let m = lut.m;
    let scale = (m - 1) as f64;
    let chunk = BACKWARD_CHUNK_PIXELS * 3;
    let mut grad_pixels = vec![0.0; pixels.len()];
    let partials: Vec<Vec<f64>> = grad_pixels
        .par_chunks_mut(chunk)
        .zip(pixels.par_chunks(chunk).zip(grad_out.par_chunks(chunk)))
        .map(|(gpix, (src, gout))| {
            let mut glut = vec![0.0; lut.values.len()];
            for ((gp, p), g) in gpix.chunks_exact_mut(3).zip(src.chunks_exact(3)).zip(gout.chunks_exact(3)) {
                let cell = Cell::new([p[0], p[1], p[2]], m);
                let corners = cell.corners(m);
                for &(idx, w) in &corners {
                    glut[idx] += w * g[0];
                    glut[idx + 1] += w * g[1];
                    glut[idx + 2] += w * g[2];
                }
                // d(out_c)/d(x_a) = scale * sum over corners of dw/dfrac_a * v_c
                let [fi, fj, fk] = cell.frac;
                let f = [[1.0 - fi, fi], [1.0 - fj, fj], [1.0 - fk, fk]];
                for (n, &(idx, _)) in corners.iter().enumerate() {
                    let bits = [n >> 2, (n >> 1) & 1, n & 1];
                    let vg = g[0] * lut.values[idx] + g[1] * lut.values[idx + 1] + g[2] * lut.values[idx + 2];
                    for a in 0..3 {
                        let sign = if bits[a] == 1 { 1.0 } else { -1.0 };
                        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                        gp[a] += scale * sign * f[b][bits[b]] * f[c][bits[c]] * vg;
                    }
                }
            }
            glut
        })
        .collect();
    let mut grad_lut = vec![0.0; lut.values.len()];
    for part in &partials {
        for (a, b) in grad_lut.iter_mut().zip(part) {
            *a += b;
        }
    }
    Ok(ApplyGrads {
        lut: grad_lut,
        pixels: grad_pixels,
    })
}

/// Weighted sum of basis lattices.
pub fn fuse(basis: &[Lut3D], w: &LutWeights) -> Result<Lut3D, LutError> {
    let first = basis.first().ok_or(LutError::EmptyBasis)?;
    if basis.len() != w.len() {
        return Err(LutError::ShapeMismatch(format!(
            "{} basis LUTs but {} weights",
            basis.len(),
            w.len()
        )));
    }
    if let Some(bad) = basis.iter().find(|b| b.m != first.m) {
        return Err(LutError::ShapeMismatch(format!(
            "basis sizes {} and {} differ",
            first.m, bad.m
        )));
    }
    let mut values = vec![0.0; first.values.len()];
    for (lut, &wn) in basis.iter().zip(w.as_slice()) {
        for (acc, v) in values.iter_mut().zip(&lut.values) {
            *acc += wn * v;
        }
    }
    Ok(Lut3D { m: first.m, values })
}

/// A parsed `.cube` file. `space` is recovered from the comment line that
/// [`write_cube_tagged`] emits, when present.
#[derive(Debug, Clone)]
pub struct CubeFile {
    pub title: Option<String>,
    pub space: Option<ColorSpace>,
    pub lut: Lut3D,
}

const SPACE_TAG: &str = "# wblut-color-space:";

pub fn parse_cube(path: impl AsRef<Path>) -> Result<Lut3D, LutError> {
    parse_cube_file(path).map(|c| c.lut)
}

pub fn parse_cube_file(path: impl AsRef<Path>) -> Result<CubeFile, LutError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| LutError::Io {
        path: p.clone(),
        source,
    })?;
    parse_cube_str(&text, &p)
}

pub fn parse_cube_str(text: &str, origin: &str) -> Result<CubeFile, LutError> {
    let header = |reason: String| LutError::MalformedHeader {
        path: origin.to_string(),
        reason,
    };
    let mut size = None;
    let mut title = None;
    let mut space = None;
    let mut entries: Vec<f64> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(tag) = line.strip_prefix(SPACE_TAG) {
            space = ColorSpace::from_name(tag.trim());
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        match key {
            "TITLE" => title = Some(line[5..].trim().trim_matches('"').to_string()),
            "LUT_3D_SIZE" => {
                if size.is_some() {
                    return Err(header("duplicate LUT_3D_SIZE".into()));
                }
                let n = parts
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&n| n >= 2)
                    .ok_or_else(|| header(format!("bad LUT_3D_SIZE on line {}", lineno + 1)))?;
                size = Some(n);
            }
            "LUT_1D_SIZE" => return Err(header("1D LUTs are not supported".into())),
            "DOMAIN_MIN" | "DOMAIN_MAX" => {
                let want = if key == "DOMAIN_MIN" { 0.0 } else { 1.0 };
                let vals: Vec<f64> = parts.map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| {
                    header(format!("bad {key} on line {}", lineno + 1))
                })?;
                if vals.len() != 3 {
                    return Err(header(format!("{key} needs three values")));
                }
                if vals.iter().any(|&v| v != want) {
                    return Err(LutError::NonUnitDomain {
                        path: origin.to_string(),
                        line: line.to_string(),
                    });
                }
            }
            _ if key.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+' || c == '.') => {
                if size.is_none() {
                    return Err(header("data before LUT_3D_SIZE".into()));
                }
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| header(format!("bad entry on line {}", lineno + 1)))?;
                if vals.len() != 3 {
                    return Err(header(format!("entry on line {} needs three values", lineno + 1)));
                }
                entries.extend(vals);
            }
            _ => return Err(header(format!("unknown keyword {key:?} on line {}", lineno + 1))),
        }
    }
    let m = size.ok_or_else(|| header("missing LUT_3D_SIZE".into()))?;
    let expected = m * m * m;
    if entries.len() / 3 != expected {
        return Err(LutError::EntryCount {
            path: origin.to_string(),
            size: m,
            expected,
            found: entries.len() / 3,
        });
    }
    let mut lut = Lut3D::zeros(m)?;
    for (n, rgb) in entries.chunks_exact(3).enumerate() {
        let (r, g, b) = (n % m, (n / m) % m, n / (m * m));
        lut.set(r, g, b, [rgb[0], rgb[1], rgb[2]]);
    }
    Ok(CubeFile { title, space, lut })
}

pub fn write_cube(lut: &Lut3D, path: impl AsRef<Path>) -> Result<(), LutError> {
    write_cube_tagged(lut, path, None)
}

/// Writes `.cube` text; when `space` is given the working color space is
/// recorded in a comment line.
pub fn write_cube_tagged(lut: &Lut3D, path: impl AsRef<Path>, space: Option<ColorSpace>) -> Result<(), LutError> {
    let path = path.as_ref();
    std::fs::write(path, cube_string(lut, space)).map_err(|source| LutError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn cube_string(lut: &Lut3D, space: Option<ColorSpace>) -> String {
    let m = lut.m;
    let mut s = String::with_capacity(m * m * m * 27 + 128);
    s.push_str("# written by wblut\n");
    if let Some(space) = space {
        let _ = writeln!(s, "{SPACE_TAG} {}", space.name());
    }
    let _ = writeln!(s, "LUT_3D_SIZE {m}");
    s.push_str("DOMAIN_MIN 0.0 0.0 0.0\nDOMAIN_MAX 1.0 1.0 1.0\n");
    for b in 0..m {
        for g in 0..m {
            for r in 0..m {
                let v = lut.get(r, g, b);
                let _ = writeln!(s, "{:.6} {:.6} {:.6}", v[0], v[1], v[2]);
            }
        }
    }
    s
}
