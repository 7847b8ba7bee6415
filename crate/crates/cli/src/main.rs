use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};

use wblut::bench::bench_stages;
use wblut::image::{load_image, save_image, ColorSpace};
use wblut::lut::{self, parse_cube_file, write_cube_tagged};
use wblut::metrics::ReportTable;
use wblut::model::{adaptive_lut, adaptive_lut_working, init_params, load_checkpoint, ModelConfig};
use wblut::pipeline::{evaluate, synth_dataset, train_with, Dataset, TrainConfig};

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "WBLUT_THREADS";

#[derive(Parser)]
#[command(name = "wblut", version, about = "Adaptive 3D-LUT white-balance correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correct one image with a trained model or a static .cube LUT.
    Apply(ApplyArgs),
    /// Train a model on a manifest of scenes.
    Train(TrainArgs),
    /// Report MAE and CIEDE2000 of a model over a manifest.
    Eval(EvalArgs),
    /// Time the classifier/fusion and full-resolution LUT stages.
    Bench(BenchArgs),
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Export the image-adaptive LUT a model builds for one image.
    ExportCube(ExportArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("lut_source").required(true).args(["model", "cube"])))]
struct ApplyArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn parse_space(s: &str) -> Result<ColorSpace, String> {
    ColorSpace::from_name(s).ok_or_else(|| format!("unknown color space {s:?}; expected srgb or lab"))
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Side of the square training crops.
    #[arg(long, default_value_t = 256)]
    patch: usize,
    #[arg(long, default_value_t = 10.0)]
    lambda_tri_early: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_tri_late: f64,
    /// Last epoch trained with the early triplet weight.
    #[arg(long, default_value_t = 100)]
    tri_switch_epoch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n_basis: usize,
    #[arg(long, default_value_t = 33)]
    lut_size: usize,
    #[arg(long, default_value = "lab", value_parser = parse_space)]
    color_space: ColorSpace,
    /// Classifier input resolution.
    #[arg(long, default_value_t = 256)]
    proxy_size: usize,
    #[arg(long, default_value_t = 1)]
    samples_per_scene: usize,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    /// Validate the configuration and dataset, then exit without training.
    #[arg(long)]
    dry_run: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            adam_beta1: self.beta1,
            adam_beta2: self.beta2,
            patch: self.patch,
            lambda_tri_early: self.lambda_tri_early,
            lambda_tri_late: self.lambda_tri_late,
            tri_switch_epoch: self.tri_switch_epoch,
            seed: self.seed,
            samples_per_scene: self.samples_per_scene,
            triplet_margin: self.margin,
            model: ModelConfig {
                n_basis: self.n_basis,
                lut_size: self.lut_size,
                color_space: self.color_space,
                proxy_size: self.proxy_size,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let err = || format!("invalid size {s:?}; expected WxH, e.g. 1024x768");
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(err)?;
    let w: usize = w.parse().map_err(|_| err())?;
    let h: usize = h.parse().map_err(|_| err())?;
    if w == 0 || h == 0 {
        return Err(err());
    }
    Ok((w, h))
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    iters: u32,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    n_scenes: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn cmd_apply(a: &ApplyArgs) -> Result<()> {
    enum Source {
        Model(Box<wblut::model::ModelParams>),
        Cube(lut::Lut3D, ColorSpace),
    }
    let img = load_image(&a.input)?;
    let source = match (&a.model, &a.cube) {
        (Some(model), _) => Source::Model(Box::new(load_checkpoint(model)?)),
        (None, Some(cube)) => {
            let cube = parse_cube_file(cube)?;
            Source::Cube(cube.lut, cube.space.unwrap_or(ColorSpace::NormalizedSRGB))
        }
        (None, None) => unreachable!("argument group requires one source"),
    };

    let start = Instant::now();
    let (lut, working) = match &source {
        Source::Model(params) => {
            let working = img.to_space(params.config.color_space);
            (adaptive_lut_working(params, &working)?.0, working)
        }
        Source::Cube(lut, space) => (lut.clone(), img.to_space(*space)),
    };
    let t = Instant::now();
    let corrected = lut::apply(&lut, &working)?;
    let lut_ms = ms_since(t);
    let out = corrected.to_space(ColorSpace::NormalizedSRGB);
    let total_ms = ms_since(start);

    save_image(&out, &a.output)?;
    println!("timing,lut_apply_ms,{lut_ms:.3}");
    println!("timing,total_ms,{total_ms:.3}");
    println!("wrote {} ({}x{})", a.output.display(), out.width(), out.height());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config();
    println!(
        "config batch={} epochs={} lr={} beta1={} beta2={} patch={} lambda_tri={}/{} switch_epoch={} \
         n_basis={} lut_size={} color_space={} proxy={} seed={}",
        cfg.batch_size,
        cfg.epochs,
        cfg.lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.patch,
        cfg.lambda_tri_early,
        cfg.lambda_tri_late,
        cfg.tri_switch_epoch,
        cfg.model.n_basis,
        cfg.model.lut_size,
        cfg.model.color_space.name(),
        cfg.model.proxy_size,
        cfg.seed
    );
    cfg.validate()?;
    let dataset = Dataset::from_manifest(&a.manifest)?;
    println!("dataset scenes={} renderings={}", dataset.len(), dataset.rendering_count());
    if a.dry_run {
        return Ok(());
    }
    let params = init_params(cfg.seed, &cfg.model)?;
    let output = train_with(&dataset, &cfg, params, |r| println!("history,{}", r.csv_line()))?;
    output.save(&a.out)?;
    println!("wrote {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let params = load_checkpoint(&a.model)?;
    let dataset = Dataset::from_manifest(&a.manifest)?;
    let (mae, de) = evaluate(&params, &dataset)?;
    print!("{}", ReportTable(&[("MAE", &mae), ("dE2000", &de)]));
    println!("{}", mae.csv_row("mae"));
    println!("{}", de.csv_row("de2000"));
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let params = load_checkpoint(&a.model)?;
    let (w, h) = a.size;
    let report = bench_stages(&params, w, h, a.iters as usize)?;
    println!("# stage,size,iters,mean_ms,min_ms,max_ms");
    print!("{report}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let manifest = synth_dataset(a.n_scenes, a.size, a.seed, &a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let params = load_checkpoint(&a.model)?;
    let img = load_image(&a.input)?;
    let (fused, weights, _) = adaptive_lut(&params, &img)?;
    write_cube_tagged(&fused, &a.out, Some(params.config.color_space))
        .with_context(|| format!("writing {}", a.out.display()))?;
    let w: Vec<String> = weights.as_slice().iter().map(|v| format!("{v:.6}")).collect();
    println!("weights,{}", w.join(","));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Apply(a) => cmd_apply(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportCube(a) => cmd_export(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
