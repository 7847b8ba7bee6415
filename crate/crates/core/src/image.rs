//! Pixel containers, sRGB/CIELAB conversion, resampling and file I/O.
//!
//! Every buffer is an `H×W×3` row-major raster of `f64` components. Both
//! color-space tags encode their components into the unit cube so that a
//! LUT can index either one directly:
//!
//! ```text
//! NormalizedSRGB  r, g, b                     -> as is
//! NormalizedLAB   L in [0,100]                -> L / 100
//!                 a, b in [-128, 127]         -> (a + 128) / 255, (b + 128) / 255
//! ```

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data in {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
    #[error("expected {expected:?} buffer, got {actual:?}")]
    WrongColorSpace {
        expected: ColorSpace,
        actual: ColorSpace,
    },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("data length {len} does not match {width}x{height}x3")]
    LengthMismatch {
        len: usize,
        width: usize,
        height: usize,
    },
    #[error("non-finite or out-of-range component {value} at index {index}")]
    OutOfRange { index: usize, value: f64 },
    #[error("crop window {size}x{size} at ({x0}, {y0}) exceeds {width}x{height} image")]
    CropOutOfBounds {
        x0: usize,
        y0: usize,
        size: usize,
        width: usize,
        height: usize,
    },
}

/// Encoding of the three components of an [`ImageBuffer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    NormalizedSRGB,
    NormalizedLAB,
}

impl ColorSpace {
    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::NormalizedSRGB => "srgb",
            ColorSpace::NormalizedLAB => "lab",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srgb" | "rgb" | "normalizedsrgb" => Some(ColorSpace::NormalizedSRGB),
            "lab" | "normalizedlab" => Some(ColorSpace::NormalizedLAB),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
    space: ColorSpace,
}

impl ImageBuffer {
    /// Builds a buffer, checking the shape and that every component lies in
    /// `[0, 1]`.
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f64>,
        space: ColorSpace,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        if data.len() != width * height * 3 {
            return Err(ImageError::LengthMismatch {
                len: data.len(),
                width,
                height,
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
            space,
        })
    }

    /// Like [`ImageBuffer::new`] but clamps components into `[0, 1]`.
    /// Non-finite components become 0.
    pub fn from_clamped(
        width: usize,
        height: usize,
        mut data: Vec<f64>,
        space: ColorSpace,
    ) -> Result<Self, ImageError> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(width, height, data, space)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3], space: ColorSpace) -> Result<Self, ImageError> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data, space)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn expect_space(&self, expected: ColorSpace) -> Result<(), ImageError> {
        if self.space != expected {
            return Err(ImageError::WrongColorSpace {
                expected,
                actual: self.space,
            });
        }
        Ok(())
    }

    /// Converts into `space`, a no-op when already there.
    pub fn to_space(&self, space: ColorSpace) -> ImageBuffer {
        match (self.space, space) {
            (a, b) if a == b => self.clone(),
            (ColorSpace::NormalizedSRGB, ColorSpace::NormalizedLAB) => map_pixels(self, space, |p| {
                encode_lab(srgb_pixel_to_lab(p))
            }),
            _ => map_pixels(self, space, |p| lab_pixel_to_srgb(decode_lab(p))),
        }
    }
}

fn map_pixels(img: &ImageBuffer, space: ColorSpace, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> ImageBuffer {
    let mut data = vec![0.0; img.data.len()];
    data.par_chunks_mut(img.width * 3)
        .zip(img.data.par_chunks(img.width * 3))
        .for_each(|(dst, src)| {
            for (d, s) in dst.chunks_exact_mut(3).zip(src.chunks_exact(3)) {
                let out = f([s[0], s[1], s[2]]);
                for c in 0..3 {
                    d[c] = out[c].clamp(0.0, 1.0);
                }
            }
        });
    ImageBuffer {
        width: img.width,
        height: img.height,
        data,
        space,
    }
}

// sRGB primaries to XYZ, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

// White point taken as the row sums so that sRGB white lands exactly on a = b = 0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

#[inline]
fn srgb_decode(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn srgb_encode(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

#[inline]
fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Gamma-encoded sRGB in `[0, 1]` to CIE 1976 L*a*b* (D65), unnormalized.
pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_decode);
    let mut f = [0.0; 3];
    for (row, (m, w)) in RGB_TO_XYZ.iter().zip(WHITE).enumerate() {
        let xyz = m[0] * lin[0] + m[1] * lin[1] + m[2] * lin[2];
        f[row] = lab_f(xyz / w);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Inverse of [`srgb_pixel_to_lab`], without gamut clamping.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let mut out = [0.0; 3];
    for (o, m) in out.iter_mut().zip(XYZ_TO_RGB.iter()) {
        let lin = m[0] * xyz[0] + m[1] * xyz[1] + m[2] * xyz[2];
        *o = srgb_encode(lin.max(0.0));
    }
    out
}

pub fn encode_lab(lab: [f64; 3]) -> [f64; 3] {
    [lab[0] / 100.0, (lab[1] + 128.0) / 255.0, (lab[2] + 128.0) / 255.0]
}

pub fn decode_lab(enc: [f64; 3]) -> [f64; 3] {
    [enc[0] * 100.0, enc[1] * 255.0 - 128.0, enc[2] * 255.0 - 128.0]
}

pub fn srgb_to_lab(img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
    img.expect_space(ColorSpace::NormalizedSRGB)?;
    Ok(img.to_space(ColorSpace::NormalizedLAB))
}

/// Out-of-gamut results are clamped to `[0, 1]`.
pub fn lab_to_srgb(img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
    img.expect_space(ColorSpace::NormalizedLAB)?;
    Ok(img.to_space(ColorSpace::NormalizedSRGB))
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::InvalidDimensions {
            width: out_w,
            height: out_h,
        });
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(img.width, out_w);
    let ys = taps(img.height, out_h);
    let mut data = vec![0.0; out_w * out_h * 3];
    data.par_chunks_mut(out_w * 3).enumerate().for_each(|(oy, row)| {
        let (y0, y1, fy) = ys[oy];
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p10[c] * fx;
                let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
                row[ox * 3 + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    });
    Ok(ImageBuffer {
        width: out_w,
        height: out_h,
        data,
        space: img.space,
    })
}

/// Cuts a `size×size` window at `(x0, y0)` and optionally mirrors it.
pub fn crop_and_flip(
    img: &ImageBuffer,
    x0: usize,
    y0: usize,
    size: usize,
    hflip: bool,
    vflip: bool,
) -> Result<ImageBuffer, ImageError> {
    if size == 0 || x0 + size > img.width || y0 + size > img.height {
        return Err(ImageError::CropOutOfBounds {
            x0,
            y0,
            size,
            width: img.width,
            height: img.height,
        });
    }
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let sy = if vflip { y0 + size - 1 - y } else { y0 + y };
        for x in 0..size {
            let sx = if hflip { x0 + size - 1 - x } else { x0 + x };
            data.extend_from_slice(&img.pixel(sx, sy));
        }
    }
    Ok(ImageBuffer {
        width: size,
        height: size,
        data,
        space: img.space,
    })
}

/// Reads an 8-bit PNG or binary PPM into a `NormalizedSRGB` buffer (`v / 255`).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::NotFound(display.clone()),
        _ => ImageError::Corrupt {
            path: display.clone(),
            reason: e.to_string(),
        },
    })?;
    let format = match image::guess_format(&bytes) {
        Ok(f @ (image::ImageFormat::Png | image::ImageFormat::Pnm)) => f,
        _ => return Err(ImageError::UnsupportedFormat(display)),
    };
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| ImageError::Corrupt {
        path: display.clone(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    ImageBuffer::new(w as usize, h as usize, data, ColorSpace::NormalizedSRGB)
}

/// Writes an 8-bit file (PNG or PPM, chosen by extension) using
/// `round(v * 255)` quantization.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageError> {
    img.expect_space(ColorSpace::NormalizedSRGB)?;
    let path = path.as_ref();
    let display = path.display().to_string();
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => image::ImageFormat::Png,
        Some("ppm" | "pnm") => image::ImageFormat::Pnm,
        _ => return Err(ImageError::UnsupportedFormat(display)),
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length checked at construction");
    buf.save_with_format(path, format).map_err(|e| ImageError::Write {
        path: display,
        reason: e.to_string(),
    })
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    // f64::round is half-away-from-zero, i.e. half-up for non-negative input.
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
