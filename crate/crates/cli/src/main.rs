use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use vegchange::change::{assess, render_overlay};
use vegchange::infer::{count_components, predictors, threshold_mask, PredictOptions, WindowStats};
use vegchange::raster::{self, generate_blob_scene, render_scene, vcat, SceneStyle};
use vegchange::remap::{augment_with, sample_patches};
use vegchange::train::{load_dataset, synthetic_scenes, MetricsWriter, TrainConfig, Trainer};
use vegchange::watershed::analyze_regions;
use vegchange::weightmap::compute_weight_map;
use vegchange::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "vegchange", version, about = "Vegetation segmentation and change assessment")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, env = "VCA_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a U-Net and write a checkpoint plus metrics.csv.
    Train(TrainArgs),
    /// Predict a vegetation mask for one image.
    Predict(PredictArgs),
    /// Compare two co-registered masks.
    Assess(AssessArgs),
    /// Watershed basins and region proposals for one image.
    Watershed(WatershedArgs),
    /// Dump augmented training patches for inspection.
    Augment(AugmentArgs),
    /// Write a synthetic blob scene and its mask.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on generated scenes: `SEED,COUNT`.
    #[arg(long, conflicts_with = "data")]
    synthetic: Option<String>,
    /// Side of generated scenes in pixels.
    #[arg(long, default_value_t = 96)]
    scene_size: usize,
    /// Directory of `<name>_image.*` / `<name>_mask.pgm` pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    image: PathBuf,
    /// Output prefix; writes `.mask.pgm`, `.prob.vcat` and `.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 144)]
    window: usize,
    #[arg(long, default_value_t = 32)]
    stride: usize,
    /// Average over flipped and rotated copies.
    #[arg(long)]
    tta: bool,
    /// Comma-separated subset of D4 for `--tta` (default: all eight).
    #[arg(long, requires = "tta")]
    transforms: Option<String>,
    /// Skip windows outside watershed region proposals.
    #[arg(long)]
    regions: bool,
    #[arg(long, default_value_t = 3.0)]
    region_sigma: f64,
    #[arg(long, default_value_t = 150)]
    region_min_area: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Smallest component counted as an object.
    #[arg(long, default_value_t = 1)]
    min_object_area: usize,
}

#[derive(Args)]
struct AssessArgs {
    before: PathBuf,
    after: PathBuf,
    #[arg(long, default_value_t = 16)]
    tile: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Ground sampling distance in metres per pixel.
    #[arg(long)]
    pixel_size: Option<f64>,
    /// Output prefix; writes `.json` and `.overlay.ppm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WatershedArgs {
    image: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    #[arg(long, default_value_t = 8)]
    min_area: usize,
    /// Output prefix; writes `.basins.pgm` and `.proposals.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    image: PathBuf,
    mask: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    /// Render a second date with the first N ellipses removed.
    #[arg(long)]
    remove: Option<usize>,
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
}

fn parse_synthetic(s: &str) -> Result<(u64, usize)> {
    let (seed, n) = s
        .split_once(',')
        .with_context(|| format!("--synthetic expects SEED,COUNT, got `{s}`"))?;
    Ok((seed.trim().parse()?, n.trim().parse()?))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(i) = args.iters {
        cfg.iterations = i;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = match (&args.synthetic, &args.data) {
        (Some(spec), _) => {
            let (seed, n) = parse_synthetic(spec)?;
            synthetic_scenes(seed, n, args.scene_size, args.scene_size)?
        }
        (None, Some(dir)) => load_dataset(dir)?,
        (None, None) => bail!(Error::Config("give --synthetic SEED,N or --data DIR".into())),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let iterations = cfg.iterations;
    write_json(&args.out.join("config.json"), &cfg)?;
    let mut trainer = Trainer::new(cfg, data)?;
    let mut metrics = MetricsWriter::create(args.out.join("metrics.csv"))?;
    let rows = trainer.run(iterations, |m| metrics.write(m))?;
    let model_path = args.out.join("model.vcam");
    checkpoint::save(trainer.model(), &model_path)?;
    if let Some(last) = rows.last() {
        info!("final loss {:.4}, batch accuracy {:.3}", last.loss, last.pixel_accuracy);
    }
    println!("{}", model_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictSidecar {
    predictor: String,
    width: usize,
    height: usize,
    windows_evaluated: usize,
    windows_skipped: usize,
    proposals: Option<usize>,
    tau: f64,
    foreground_pixels: usize,
    components: usize,
}

fn predict(args: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&args.model)?;
    let img = raster::load_raster(&args.image)?;
    let proposals = if args.regions {
        Some(analyze_regions(&img, args.region_sigma, args.region_min_area)?.proposals)
    } else {
        None
    };
    let n_proposals = proposals.as_ref().map(Vec::len);
    let options = PredictOptions {
        window: args.window,
        stride: args.stride,
        regions: proposals,
    };
    let spec = match (args.tta, &args.transforms) {
        (false, _) => "sliding".to_string(),
        (true, None) => "tta".to_string(),
        (true, Some(list)) => format!("tta:{list}"),
    };
    let predictor = predictors().create(&spec, &options)?;
    let pred = predictor.predict(&model, &img)?;
    let mask = threshold_mask(&pred.map, args.tau)?;
    raster::save_mask(&mask, with_suffix(&args.out, ".mask.pgm"))?;
    vcat::write(
        with_suffix(&args.out, ".prob.vcat"),
        &[pred.map.height(), pred.map.width()],
        pred.map.p(),
    )?;
    let WindowStats { evaluated, skipped } = pred.windows;
    let sidecar = PredictSidecar {
        predictor: predictor.name(),
        width: mask.width(),
        height: mask.height(),
        windows_evaluated: evaluated,
        windows_skipped: skipped,
        proposals: n_proposals,
        tau: args.tau,
        foreground_pixels: mask.count_ones(),
        components: count_components(&mask, args.min_object_area),
    };
    write_json(&with_suffix(&args.out, ".json"), &sidecar)?;
    println!("{}", serde_json::to_string(&sidecar)?);
    Ok(())
}

fn assess_cmd(args: AssessArgs) -> Result<()> {
    let before = raster::load_mask(&args.before)?;
    let after = raster::load_mask(&args.after)?;
    let a = assess(&before, &after, args.tile, args.tau, args.pixel_size)?;
    write_json(&with_suffix(&args.out, ".json"), &a.report)?;
    let overlay = render_overlay(&before, &after, &a.before, &a.after)?;
    raster::save_raster(&overlay, with_suffix(&args.out, ".overlay.ppm"))?;
    println!("{}", serde_json::to_string(&a.report)?);
    Ok(())
}

fn watershed(args: WatershedArgs) -> Result<()> {
    let img = raster::load_raster(&args.image)?;
    let a = analyze_regions(&img, args.sigma, args.min_area)?;
    let b = &a.basins;
    raster::save_gray_bytes(b.width(), b.height(), &b.to_gray_bytes(), with_suffix(&args.out, ".basins.pgm"))?;
    write_json(&with_suffix(&args.out, ".proposals.json"), &a.proposals)?;
    println!(
        "{} basins, {} proposals, {} line pixels",
        b.n_basins(),
        a.proposals.len(),
        b.line_pixels()
    );
    Ok(())
}

fn augment(args: AugmentArgs) -> Result<()> {
    let img = raster::load_raster(&args.image)?;
    let labels = raster::load_mask(&args.mask)?.to_label_mask();
    let weights = compute_weight_map(&labels, &Default::default())?;
    let batch = sample_patches(&img, &labels, &weights, args.size, args.count, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ext = match img.channels() {
        1 => "pgm",
        3 => "ppm",
        _ => "vcat",
    };
    for (i, p) in batch.patches.iter().enumerate() {
        let aug = augment_with(p, args.seed.wrapping_add(i as u64 + 1), &Default::default())?;
        raster::save_raster(&aug.image, args.out.join(format!("patch{i:03}.{ext}")))?;
        raster::save_mask(&aug.label.foreground(), args.out.join(format!("patch{i:03}_mask.pgm")))?;
    }
    println!("{} patches in {}", batch.patches.len(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let scene = generate_blob_scene(args.seed, args.size, args.size, args.blobs)?;
    raster::save_raster(&scene.image, with_suffix(&args.out, "_image.ppm"))?;
    raster::save_mask(&scene.labels.foreground(), with_suffix(&args.out, "_mask.pgm"))?;
    if let Some(k) = args.remove {
        let kept = &scene.ellipses[k.min(scene.ellipses.len())..];
        let (image, labels) = render_scene(kept, args.size, args.size, args.seed ^ 0x5eed, &SceneStyle::default());
        raster::save_raster(&image, with_suffix(&args.out, "_after_image.ppm"))?;
        raster::save_mask(&labels.foreground(), with_suffix(&args.out, "_after_mask.pgm"))?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => 3,
        Some(Error::Format(_)) => 4,
        Some(Error::Shape(_) | Error::Size(_) | Error::Tiling(_) | Error::Dimension { .. } | Error::Label { .. }) => 5,
        Some(Error::Registration(_)) => 6,
        Some(Error::Config(_) | Error::UnknownStrategy { .. }) => 7,
        Some(Error::Domain(_) | Error::UndefinedBaseline | Error::NonFinite(_)) => 8,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Assess(a) => assess_cmd(a),
        Command::Watershed(a) => watershed(a),
        Command::Augment(a) => augment(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
