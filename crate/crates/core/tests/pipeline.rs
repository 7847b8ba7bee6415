use std::path::Path;

use wblut::image::ColorSpace;
use wblut::model::{load_checkpoint, ModelConfig};
use wblut::pipeline::{evaluate, evaluate_with, synth_dataset, train, Dataset, TrainConfig, TrainOutput};

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        tri_switch_epoch: epochs / 2,
        batch_size: 8,
        patch: 32,
        lr: 1e-3,
        seed: 3,
        model: ModelConfig {
            n_basis: 4,
            lut_size: 9,
            color_space: ColorSpace::NormalizedLAB,
            proxy_size: 64,
            widths: [8, 8, 8, 16, 16],
            weight_gen_hidden: 16,
            mlp_hidden: 32,
        },
        ..TrainConfig::default()
    }
}

fn dataset(dir: &Path, name: &str, scenes: usize, seed: u64) -> Dataset {
    Dataset::from_manifest(synth_dataset(scenes, 32, seed, dir.join(name)).unwrap()).unwrap()
}

fn trained(dir: &Path, epochs: usize) -> TrainOutput {
    train(&dataset(dir, "train", 20, 1), &toy_config(epochs)).unwrap()
}

#[test]
fn fifty_epochs_lower_the_reconstruction_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), 50);
    assert_eq!(out.history.len(), 50);
    let first = out.history[0].wb;
    let last = out.history[49].wb;
    assert!(last < first, "L_WB {first} -> {last}");
    assert_eq!((out.history[24].lambda_tri, out.history[25].lambda_tri), (10.0, 1.0));
}

#[test]
fn trained_model_beats_identity_on_held_out_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), 50);
    let held = dataset(dir.path(), "held", 5, 2);
    let (_, identity) = evaluate_with(&held, |img| Ok(img.clone())).unwrap();
    let (_, model) = evaluate(&out.params, &held).unwrap();
    assert_eq!(model.values.len(), held.rendering_count());
    assert!(model.mean < identity.mean, "model {} vs identity {}", model.mean, identity.mean);
}

#[test]
fn saved_run_reloads_and_evaluates_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path(), 2);
    let run = dir.path().join("run");
    out.save(&run).unwrap();
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let loaded = load_checkpoint(run.join("model.ckpt")).unwrap();
    assert_eq!(loaded.config, out.params.config);
    let held = dataset(dir.path(), "held", 3, 2);
    let (_, a) = evaluate(&out.params, &held).unwrap();
    let (_, b) = evaluate(&loaded, &held).unwrap();
    // Checkpoints store f32, so allow for rounding of the parameters.
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() < 1e-3, "{x} vs {y}");
    }
}
