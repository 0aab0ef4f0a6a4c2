use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccsp_core::degrade::{generate_corpus, ConditionMix, ParamRanges, MANIFEST_FILE};
use ccsp_core::detector::{parse_labels, Label};
use ccsp_core::error::{Error, Result};
use ccsp_core::imageio::from_rgb_image;
use ccsp_core::metrics::{measure_fps, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use ccsp_core::render::render_overlay;
use ccsp_core::training::{
    compare_strategies, evaluate_model, load_training_data, train, Checkpoint, CompareConfig, Dataset, ExperimentConfig,
    Model, Precision, LOG_FILE, SEED_ENV,
};
use ccsp_core::{Scalar, Tensor};

#[derive(Parser)]
#[command(name = "ccsp", version, about = "Detection under fog, rain and motion blur with a jointly trained restoration stage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a clean annotated image folder into a synthetic corpus.
    Augment(AugmentArgs),
    /// Train the strategy named in a config.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated folder.
    Eval(EvalArgs),
    /// Train and score every strategy of a comparison config.
    Compare(CompareArgs),
    /// Report throughput and parameter count of a config's model.
    Bench(BenchArgs),
    /// Draw predicted (and ground-truth) boxes onto images.
    Render(RenderArgs),
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Falls back to $CCSP_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Condition shares, e.g. fog=0.34,rain=0.33,blur=0.33.
    #[arg(long)]
    mix: Option<String>,
    /// JSON file overriding the parameter ranges.
    #[arg(long)]
    ranges: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory; defaults to checkpoints/<strategy>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotated images (degraded, for restoring strategies).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms: f64,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for compare.json and compare.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Square input side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Augment(a) => augment(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn augment(a: AugmentArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.ok_or_else(|| Error::Config(format!("--seed is required (or set {SEED_ENV})")))?,
    };
    let mix = match &a.mix {
        Some(m) => ConditionMix::parse(m)?,
        None => ConditionMix::default(),
    };
    let ranges = match &a.ranges {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => ParamRanges::default(),
    };
    let manifest = generate_corpus(&a.input, &a.out, &mix, &ranges, seed)?;
    println!("manifest: {}", a.out.join(MANIFEST_FILE).display());
    for (kind, n) in manifest.counts() {
        println!("{}: {n}", kind.name());
    }
    for e in &manifest.errors {
        eprintln!("skipped {}: {}", e.image, e.error);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = Some(s);
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let out = a.out.unwrap_or_else(|| PathBuf::from("checkpoints").join(cfg.strategy.name()));
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &out),
        Precision::F64 => train_typed::<f64>(&cfg, &out),
    }
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data: Dataset<T> = load_training_data(cfg)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(LOG_FILE);
    let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_error = None;
    let ckpt = train(cfg, &data, &mut |rec| {
        let line = serde_json::to_string(rec).expect("records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
        eprintln!("epoch {:>4} {:?} joint {:.6}", rec.epoch, rec.phase, rec.losses.joint);
    })?;
    if let Some(e) = log_error {
        return Err(Error::Io { path: log_path, source: e });
    }
    ckpt.save(out)?;
    println!("checkpoint: {}", out.display());
    println!("parameters: {}", ckpt.model.param_hash());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(&cfg, &a),
        Precision::F64 => eval_typed::<f64>(&cfg, &a),
    }
}

fn eval_typed<T: Scalar>(cfg: &ExperimentConfig, a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.checkpoint, cfg)?;
    let data: Dataset<T> = Dataset::load_dir(&a.data)?;
    let report = evaluate_model(&ckpt.model, &data, a.conf, a.nms)?;
    write_text(&a.out, &report.to_json()?)?;
    println!(
        "precision {:.4} recall {:.4} map50 {:.4} map75 {:.4} fps {:.1} parameters {}",
        report.precision, report.recall, report.map50, report.map75, report.fps, report.parameter_count
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let cfg = CompareConfig::load(&a.config)?;
    let precision = cfg.experiments.first().map(|e| e.precision).unwrap_or_default();
    match precision {
        Precision::F32 => compare_typed::<f32>(&cfg, &a.out),
        Precision::F64 => compare_typed::<f64>(&cfg, &a.out),
    }
}

fn compare_typed<T: Scalar>(cfg: &CompareConfig, out: &Path) -> Result<()> {
    let first = cfg.experiments.first().ok_or_else(|| Error::Config("compare needs at least one experiment".into()))?;
    let mut loader = first.clone();
    if cfg.experiments.iter().any(|e| e.strategy.uses_denoiser()) {
        loader.strategy = ccsp_core::training::Strategy::Joint;
    }
    let train_data: Dataset<T> = load_training_data(&loader)?;
    let test_data: Dataset<T> = cfg.test_data()?;
    let report = compare_strategies(&cfg.experiments, &cfg.seeds, &train_data, &test_data, cfg.conf_threshold, cfg.nms_iou, &mut |r| {
        eprintln!("{} seed {}: map50 {:.4}", r.strategy, r.seed, r.map50)
    })?;
    write_text(&out.join("compare.json"), &report.to_json()?)?;
    write_text(&out.join("compare.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(&cfg, &a),
        Precision::F64 => bench_typed::<f64>(&cfg, &a),
    }
}

fn bench_typed<T: Scalar>(cfg: &ExperimentConfig, a: &BenchArgs) -> Result<()> {
    let model = Model::<T>::build(cfg, cfg.resolved_seed()?)?;
    let probe = Tensor::<T>::from_fn(&[1, 3, a.size, a.size], |i| T::lit((i % 17) as f64 / 16.0));
    let fps = measure_fps(a.images, 1, |_| model.predict(&probe).map(|_| ()))?;
    let report = serde_json::json!({
        "strategy": cfg.strategy,
        "parameter_count": model.parameter_count(),
        "fps": fps,
        "wall_clock": true,
    });
    println!("{report}");
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    match cfg.precision {
        Precision::F32 => render_typed::<f32>(&cfg, &a),
        Precision::F64 => render_typed::<f64>(&cfg, &a),
    }
}

fn render_typed<T: Scalar>(cfg: &ExperimentConfig, a: &RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.checkpoint, cfg)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    for path in &a.images {
        let rgb = image::open(path)
            .map_err(|source| Error::Image { path: path.clone(), source })?
            .to_rgb8();
        let tensor: Tensor<T> = from_rgb_image(&rgb);
        let dets = ckpt.model.detect_image(&tensor, a.conf, a.nms)?;
        let dets: Vec<_> = dets
            .iter()
            .map(|d| ccsp_core::detector::Detection { bbox: d.bbox.cast(), class_id: d.class_id, confidence: d.confidence.as_f64() })
            .collect();
        let label_path = path.with_extension("txt");
        let truths: Option<Vec<Label<f64>>> = match fs::read_to_string(&label_path) {
            Ok(text) => Some(parse_labels(&text)?),
            Err(_) => None,
        };
        let (overlay, _) = render_overlay(&rgb, &dets, truths.as_deref(), &cfg.class_names);
        let name = path.file_name().ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
        let target = a.out.join(name).with_extension("png");
        overlay
            .save_with_format(&target, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: target.clone(), source })?;
        println!("{} -> {} ({} detections)", path.display(), target.display(), dets.len());
    }
    Ok(())
}

