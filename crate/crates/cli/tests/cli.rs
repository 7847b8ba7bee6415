use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wblut::bench::noise_image;
use wblut::image::{load_image, save_image, ColorSpace};
use wblut::lut::{identity_lut, parse_cube_file, write_cube};
use wblut::model::{init_params, save_checkpoint, ModelConfig};

fn wblut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wblut"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn noise_png(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    save_image(&noise_image(w, h, seed, ColorSpace::NormalizedSRGB), &path).unwrap();
    path
}

fn small_model() -> ModelConfig {
    ModelConfig {
        proxy_size: 32,
        ..ModelConfig::default()
    }
}

fn identity_checkpoint(dir: &Path) -> PathBuf {
    let mut params = init_params(0, &small_model()).unwrap();
    params.select_first_basis();
    let path = dir.join("identity.ckpt");
    save_checkpoint(&params, &path).unwrap();
    path
}

fn max_abs_diff(a: &Path, b: &Path) -> f64 {
    let (a, b) = (load_image(a).unwrap(), load_image(b).unwrap());
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn apply_identity_cube_preserves_image() {
    let dir = tempfile::tempdir().unwrap();
    let input = noise_png(dir.path(), "in.png", 37, 21, 1);
    let cube = dir.path().join("id.cube");
    write_cube(&identity_lut(33).unwrap(), &cube).unwrap();
    let output = dir.path().join("out.png");
    let o = wblut(&["apply", "--cube", p(&cube), "--input", p(&input), "--output", p(&output)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(max_abs_diff(&input, &output) <= 1.0 / 255.0 + 1e-12);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("timing,lut_apply_ms,")));
    assert!(out.lines().any(|l| l.starts_with("timing,total_ms,")));
}

#[test]
fn apply_requires_a_lut_source() {
    let dir = tempfile::tempdir().unwrap();
    let input = noise_png(dir.path(), "in.png", 4, 4, 1);
    let o = wblut(&["apply", "--input", p(&input), "--output", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    let o = wblut(&["apply", "--cube", "a.cube", "--model", "m.ckpt", "--input", p(&input), "--output", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn apply_model_keeps_resolution_and_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let input = noise_png(dir.path(), "in.png", 300, 200, 2);
    let output = dir.path().join("out.png");
    let o = wblut(&["apply", "--model", p(&ckpt), "--input", p(&input), "--output", p(&output)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = load_image(&output).unwrap();
    assert_eq!((out.width(), out.height()), (300, 200));
    assert!(max_abs_diff(&input, &output) <= 1.0 / 255.0 + 1e-12);

    let missing = dir.path().join("nope.png");
    let o = wblut(&["apply", "--model", p(&ckpt), "--input", p(&missing), "--output", p(&output)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_header_and_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = wblut(&["synth", "--n-scenes", "3", "--size", "32", "--seed", "5", "--out", p(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = data.join("manifest.tsv");

    let o = wblut(&["train", "--manifest", p(&manifest), "--out", p(&dir.path().join("dry")), "--dry-run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = stdout(&o).lines().next().unwrap().to_string();
    for field in ["batch=32", "epochs=200", "lr=0.0001", "beta1=0.9"] {
        assert!(header.split_whitespace().any(|f| f == field), "{header}");
    }

    let out = dir.path().join("run0");
    let o = wblut(&["train", "--manifest", p(&manifest), "--out", p(&out), "--epochs", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.ckpt").is_file());
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);

    let o = wblut(&["train", "--manifest", p(&dir.path().join("none.tsv")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_is_reproducible_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(wblut(&["synth", "--n-scenes", "3", "--size", "24", "--out", p(&data)]).status.success());
    let manifest = data.join("manifest.tsv");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = wblut(&[
            "train", "--manifest", p(&manifest), "--out", p(&out), "--epochs", "2", "--tri-switch-epoch", "1",
            "--batch-size", "2", "--patch", "16", "--proxy-size", "32", "--lut-size", "5", "--n-basis", "2",
            "--lr", "0.001", "--seed", "9",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("history,")).count(), 2);
        (
            std::fs::read(out.join("history.csv")).unwrap(),
            std::fs::read(out.join("model.ckpt")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

fn clean_dataset(dir: &Path) -> (PathBuf, usize) {
    let mut lines = String::new();
    let mut count = 0;
    for s in 0..2 {
        let gt = noise_png(dir, &format!("gt{s}.png"), 20, 16, 10 + s);
        lines.push_str(&format!("s{s}\t{}\tD={},S={}\n", p(&gt), p(&gt), p(&gt)));
        count += 2;
    }
    let manifest = dir.join("manifest.tsv");
    std::fs::write(&manifest, lines).unwrap();
    (manifest, count)
}

#[test]
fn eval_identity_model_on_clean_renderings() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, count) = clean_dataset(dir.path());
    let ckpt = identity_checkpoint(dir.path());
    let o = wblut(&["eval", "--manifest", p(&manifest), "--model", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("metric,")).collect();
    assert_eq!(rows.len(), 2, "{out}");
    for row in rows {
        let values: Vec<f64> = row.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 4);
        assert!(values.iter().all(|v| v.abs() < 1e-4), "{row}");
    }
    let table_counts: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("MAE ") || l.starts_with("dE2000 "))
        .map(|l| l.split_whitespace().last().unwrap())
        .collect();
    assert_eq!(table_counts, vec![count.to_string(); 2]);
}

#[test]
fn bench_rows_and_size_validation() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let o = wblut(&["bench", "--model", p(&ckpt), "--size", "64x48", "--iters", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("bench,")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("bench,proxy_fusion,64x48,1,"));
    assert!(rows[1].starts_with("bench,lut_apply,64x48,1,"));
    for bad in ["64", "64x", "ax3", "0x10"] {
        let o = wblut(&["bench", "--model", p(&ckpt), "--size", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn export_cube_identity_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path());
    let input = noise_png(dir.path(), "in.png", 48, 40, 3);
    let cube = dir.path().join("adaptive.cube");
    let o = wblut(&["export-cube", "--model", p(&ckpt), "--input", p(&input), "--out", p(&cube)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = parse_cube_file(&cube).unwrap();
    assert_eq!(parsed.space, Some(ColorSpace::NormalizedLAB));
    let id = identity_lut(33).unwrap();
    let worst = parsed.lut.values().iter().zip(id.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");

    let via_model = dir.path().join("m.png");
    let via_cube = dir.path().join("c.png");
    assert!(wblut(&["apply", "--model", p(&ckpt), "--input", p(&input), "--output", p(&via_model)]).status.success());
    assert!(wblut(&["apply", "--cube", p(&cube), "--input", p(&input), "--output", p(&via_cube)]).status.success());
    assert!(max_abs_diff(&via_model, &via_cube) <= 1.0 / 255.0 + 1e-12);

    let o = wblut(&["export-cube", "--model", p(&ckpt), "--input", p(&input), "--out", "/nonexistent/dir/x.cube"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_cap_must_be_numeric() {
    let o = Command::new(env!("CARGO_BIN_EXE_wblut"))
        .args(["synth", "--out", "/nonexistent/never"])
        .env("WBLUT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("WBLUT_THREADS"));
}
