use rayon::prelude::*;

use super::{Dataset, PipelineError};
use crate::image::ImageBuffer;
use crate::metrics::{metric_de2000, metric_mae, summarize, MetricReport};
use crate::model::{model_forward, ModelParams};

/// Runs `correct` on every rendering of every scene and scores the result
/// against the scene's ground truth. Values are in manifest order.
pub fn evaluate_with<F>(dataset: &Dataset, correct: F) -> Result<(MetricReport, MetricReport), PipelineError>
where
    F: Fn(&ImageBuffer) -> Result<ImageBuffer, PipelineError> + Sync,
{
    let jobs: Vec<(&std::path::Path, &std::path::Path)> = dataset
        .records()
        .iter()
        .flat_map(|r| r.renderings.values().map(move |p| (p.as_path(), r.gt_path.as_path())))
        .collect();
    if jobs.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let scores: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|(input, gt)| {
            let input = dataset.image(input)?;
            let gt = dataset.image(gt)?;
            let out = correct(&input)?;
            Ok((metric_mae(&out, &gt)?, metric_de2000(&out, &gt)?))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mae: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let de: Vec<f64> = scores.iter().map(|s| s.1).collect();
    Ok((summarize(&mae)?, summarize(&de)?))
}

/// MAE and CIEDE2000 reports of the model at full resolution.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<(MetricReport, MetricReport), PipelineError> {
    evaluate_with(dataset, |img| Ok(model_forward(params, img)?.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{save_image, ColorSpace};
    use crate::model::{init_params, ModelConfig};
    use crate::pipeline::{SceneRecord, WbSetting};
    use std::collections::BTreeMap;

    #[test]
    fn identity_model_on_clean_renderings_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for s in 0..2 {
            let data: Vec<f64> = (0..12 * 10 * 3).map(|i| ((i * 7 + s * 13) % 250) as f64 / 255.0).collect();
            let img = ImageBuffer::new(12, 10, data, ColorSpace::NormalizedSRGB).unwrap();
            let gt = dir.path().join(format!("{s}.png"));
            save_image(&img, &gt).unwrap();
            let renderings: BTreeMap<_, _> = [WbSetting::Daylight5500, WbSetting::Shade7500]
                .into_iter()
                .map(|w| (w, gt.clone()))
                .collect();
            records.push(SceneRecord {
                scene_id: s.to_string(),
                gt_path: gt,
                renderings,
            });
        }
        let ds = Dataset::new(records);
        let cfg = ModelConfig {
            proxy_size: 32,
            lut_size: 9,
            ..ModelConfig::default()
        };
        let mut p = init_params(0, &cfg).unwrap();
        p.select_first_basis();
        let (mae, de) = evaluate(&p, &ds).unwrap();
        assert_eq!(mae.values.len(), 4);
        assert_eq!(de.values.len(), 4);
        // LAB round trip at identity is exact up to float noise.
        assert!(mae.mean < 1e-4 && de.mean < 1e-4, "{} {}", mae.mean, de.mean);

        let (mae, _) = evaluate_with(&ds, |img| Ok(img.clone())).unwrap();
        assert_eq!(mae.mean, 0.0);
    }
}
