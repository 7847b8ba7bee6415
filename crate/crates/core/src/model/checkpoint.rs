//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes  "WBLUTCKP"
//! version      u32
//! n_basis      u32
//! lut_size     u32
//! color space  u8       0 = sRGB, 1 = LAB
//! proxy_size   u32
//! n_tensors    u32
//! per tensor:  ndim u32, dims u32 × ndim, values f32 × prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Layer widths are recovered
//! from the tensor shapes.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, CLASSIFIER_LAYERS};
use crate::image::ColorSpace;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WBLUTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn err(path: &str, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_string(),
        reason: reason.into(),
    }
}

pub fn write_checkpoint(params: &ModelParams, w: &mut impl Write) -> std::io::Result<()> {
    let cfg = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [CHECKPOINT_VERSION, cfg.n_basis as u32, cfg.lut_size as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[match cfg.color_space {
        ColorSpace::NormalizedSRGB => 0u8,
        ColorSpace::NormalizedLAB => 1u8,
    }])?;
    w.write_all(&(cfg.proxy_size as u32).to_le_bytes())?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (shape, data) in params.shapes().iter().zip(tensors) {
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).map_err(|e| err(&p, e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| err(&p, e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(err(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(r: &mut impl Read, origin: &str) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| err(origin, e.to_string()))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        origin,
    };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(err(origin, "bad magic"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(err(origin, format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let n_basis = cur.u32()? as usize;
    let lut_size = cur.u32()? as usize;
    let color_space = match cur.take(1)?[0] {
        0 => ColorSpace::NormalizedSRGB,
        1 => ColorSpace::NormalizedLAB,
        t => return Err(err(origin, format!("unknown color space tag {t}"))),
    };
    let proxy_size = cur.u32()? as usize;
    let n_tensors = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let ndim = cur.u32()? as usize;
        if ndim > 8 {
            return Err(err(origin, format!("implausible tensor rank {ndim}")));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((shape, data));
    }
    if cur.pos != bytes.len() {
        return Err(err(origin, "trailing bytes"));
    }
    let expected = 2 * CLASSIFIER_LAYERS + 8 + n_basis;
    if tensors.len() != expected {
        return Err(err(origin, format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let mut widths = [0; CLASSIFIER_LAYERS];
    for (l, w) in widths.iter_mut().enumerate() {
        *w = *tensors[2 * l].0.first().ok_or_else(|| err(origin, "empty conv shape"))?;
    }
    let wg = 2 * CLASSIFIER_LAYERS;
    let config = ModelConfig {
        n_basis,
        lut_size,
        color_space,
        proxy_size,
        widths,
        weight_gen_hidden: *tensors[wg].0.first().ok_or_else(|| err(origin, "empty shape"))?,
        mlp_hidden: *tensors[wg + 4].0.first().ok_or_else(|| err(origin, "empty shape"))?,
    };
    let mut params = ModelParams::zeros(&config).map_err(|e| err(origin, e.to_string()))?;
    let shapes = params.shapes();
    for (n, (dst, (shape, data))) in params.tensors_mut().into_iter().zip(tensors).enumerate() {
        if shape != shapes[n] {
            return Err(err(origin, format!("tensor {n} has shape {shape:?}, expected {:?}", shapes[n])));
        }
        dst.copy_from_slice(&data);
    }
    Ok(params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| err(&p, e.to_string()))?;
    read_checkpoint(&mut f, &p)
}

#[cfg(test)]
mod tests {
    use super::super::init_params;
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_basis: 3,
            lut_size: 4,
            color_space: ColorSpace::NormalizedSRGB,
            proxy_size: 16,
            widths: [2, 3, 4, 5, 6],
            weight_gen_hidden: 7,
            mlp_hidden: 9,
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let p = init_params(11, &small()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back.config, p.config);
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let p = init_params(1, &small()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();

        let mut wrong_version = buf.clone();
        wrong_version[8..12].copy_from_slice(&2u32.to_le_bytes());
        let e = read_checkpoint(&mut wrong_version.as_slice(), "mem").unwrap_err();
        assert!(e.to_string().contains("version"));

        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(read_checkpoint(&mut wrong_magic.as_slice(), "mem").is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..], "mem").is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(&mut trailing.as_slice(), "mem").is_err());
    }
}
