use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{write_manifest, PipelineError, SceneRecord, WbSetting};
use crate::image::{resize_bilinear, save_image, ColorSpace, ImageBuffer};

/// Global cast: per-channel gains followed by a power curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthCast {
    pub gains: [f64; 3],
    pub gamma: f64,
}

impl SynthCast {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            gains: [0; 3].map(|_| rng.gen_range(0.6..=1.4)),
            gamma: rng.gen_range(0.85..=1.18),
        }
    }
}

/// `clamp(gain · v)^gamma` per channel.
pub fn render_cast(gt: &ImageBuffer, gains: [f64; 3], gamma: f64) -> ImageBuffer {
    let data = gt
        .data()
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| (p[c] * gains[c]).clamp(0.0, 1.0).powf(gamma)))
        .collect();
    ImageBuffer::new(gt.width(), gt.height(), data, gt.space()).expect("values clamped to [0, 1]")
}

/// A smooth random color field with a few flat-colored rectangles and
/// disks on top. Channel means are equalized so the scene is gray on
/// average.
pub fn synth_ground_truth(size: usize, rng: &mut impl Rng) -> ImageBuffer {
    let grid = 4;
    let coarse: Vec<f64> = (0..grid * grid * 3).map(|_| rng.gen_range(0.1..0.9)).collect();
    let coarse = ImageBuffer::new(grid, grid, coarse, ColorSpace::NormalizedSRGB).expect("values in range");
    let field = resize_bilinear(&coarse, size, size).expect("positive size");
    let mut data = field.into_data();

    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let color: [f64; 3] = [0; 3].map(|_| rng.gen_range(0.05..0.95));
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let r = rng.gen_range(0.08..0.25) * size as f64;
        let disk = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disk {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.6 * r
                };
                if inside {
                    data[(y * size + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }

    let n = (size * size) as f64;
    let mut means = [0.0; 3];
    for p in data.chunks_exact(3) {
        for c in 0..3 {
            means[c] += p[c] / n;
        }
    }
    let target = (means[0] + means[1] + means[2]) / 3.0;
    for p in data.chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = (p[c] * target / means[c]).clamp(0.0, 1.0);
        }
    }
    ImageBuffer::new(size, size, data, ColorSpace::NormalizedSRGB).expect("values clamped to [0, 1]")
}

fn scene_rng(seed: u64, scene: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene as u64 + 1);
    rng
}

/// Writes `n_scenes` synthetic scenes (ground truth plus five cast
/// renderings each, as PNG) and `manifest.tsv` into `out_dir`. Returns the
/// manifest path.
pub fn synth_dataset(
    n_scenes: usize,
    size: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf, PipelineError> {
    if n_scenes < 2 {
        return Err(PipelineError::NotEnoughScenes(n_scenes));
    }
    if size == 0 {
        return Err(PipelineError::InvalidConfig("image size must be positive".into()));
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let records: Vec<SceneRecord> = (0..n_scenes)
        .into_par_iter()
        .map(|s| {
            let mut rng = scene_rng(seed, s);
            let id = format!("scene{s:04}");
            let gt = synth_ground_truth(size, &mut rng);
            let gt_name = format!("{id}_gt.png");
            save_image(&gt, dir.join(&gt_name))?;
            let mut renderings = BTreeMap::new();
            for setting in WbSetting::PRESETS {
                let cast = SynthCast::random(&mut rng);
                let name = format!("{id}_{setting}.png");
                save_image(&render_cast(&gt, cast.gains, cast.gamma), dir.join(&name))?;
                renderings.insert(setting, PathBuf::from(name));
            }
            Ok(SceneRecord {
                scene_id: id,
                gt_path: PathBuf::from(gt_name),
                renderings,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let manifest = dir.join("manifest.tsv");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::load_manifest;

    fn gray(v: f64) -> ImageBuffer {
        ImageBuffer::filled(2, 2, [v; 3], ColorSpace::NormalizedSRGB).unwrap()
    }

    #[test]
    fn cast_examples() {
        let g = gray(0.5);
        assert_eq!(render_cast(&g, [1.0; 3], 1.0), g);
        let r = render_cast(&g, [1.3, 1.0, 0.7], 1.0);
        let p = r.pixel(1, 1);
        assert!((p[0] - 0.65).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12 && (p[2] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_is_gray_on_average() {
        let img = synth_ground_truth(32, &mut ChaCha8Rng::seed_from_u64(1));
        let mut means = [0.0; 3];
        for p in img.pixels() {
            for c in 0..3 {
                means[c] += p[c] / 1024.0;
            }
        }
        assert!((means[0] - means[1]).abs() < 0.02 && (means[1] - means[2]).abs() < 0.02, "{means:?}");
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_dataset(3, 16, 42, a.path()).unwrap();
        let mb = synth_dataset(3, 16, 42, b.path()).unwrap();
        assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
        let recs = load_manifest(&ma).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(r.renderings.len(), 5);
            for p in std::iter::once(&r.gt_path).chain(r.renderings.values()) {
                let rel = p.strip_prefix(a.path()).unwrap();
                assert_eq!(std::fs::read(p).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
            }
        }
        assert!(synth_dataset(1, 16, 0, a.path()).is_err());
    }
}
