//! `maskvad` command line: synth, train, score, eval and diffmap.

mod overrides;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskvad::data::{
    generate_synthetic, load_dataset, probe_frame_size, write_dataset, write_png, FrameWindow,
    Split, SyntheticSpec, VideoDataset,
};
use maskvad::evaluation::{evaluate_dataset, EvalReport};
use maskvad::model::checkpoint::Checkpoint;
use maskvad::model::{forward, init_params, ModelConfig, ModelParams, Preset};
use maskvad::scoring::{
    diff_map, read_scores_csv, score_dataset, write_scores_csv, NormalizationScope, PsnrPeak,
    ScoreOptions,
};
use maskvad::training::{run_training, RunOptions, TrainConfig, TrainMode, FINAL_CHECKPOINT, METRICS_FILE};
use thiserror::Error;

use overrides::{parse_set, resolve, Override};

const RESOLVED_CONFIG: &str = "resolved_config";
const SPEC_FILE: &str = "spec.json";
const EVAL_FILE: &str = "eval.json";
const SCORES_DIR: &str = "scores";
const DIFFMAP_DIR: &str = "diffmaps";

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] maskvad::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use maskvad::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) => 2,
                E::Numeric(_) | E::UndefinedMetric(_) => 3,
                E::Ingestion { .. } | E::Checkpoint(_) | E::Io { .. } | E::Image { .. } => 4,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(maskvad::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Parser)]
#[command(name = "maskvad", version, about = "Masked-autoencoder video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic moving-sprite dataset.
    Synth(SynthArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Write per-clip anomaly score CSVs.
    Score(ScoreArgs),
    /// Frame-level AUROC report.
    Eval(EvalArgs),
    /// Target, prediction and difference-map PNGs.
    Diffmap(DiffmapArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 8]
    #[arg(long)]
    num_train_clips: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    num_test_clips: Option<usize>,
    /// [default: 24]
    #[arg(long)]
    frames_per_clip: Option<usize>,
    /// Sprite speed in pixels per frame [default: 2]
    #[arg(long)]
    sprite_speed_normal: Option<f64>,
    /// [default: fast_motion]
    #[arg(long, value_parser = ["fast_motion", "odd_shape"])]
    anomaly_kind: Option<String>,
    /// Half-open frame range START,END [default: 8,16]
    #[arg(long, value_name = "START,END")]
    anomaly_span: Option<String>,
    /// [default: 64]
    #[arg(long)]
    frame_height: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    frame_width: Option<usize>,
    /// 1 or 3 [default: 1]
    #[arg(long)]
    channels: Option<usize>,
    /// Extra KEY=VALUE overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Tiny,
    VitB,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::VitB => Preset::VitB,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root containing `train/`.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// baseline, pasrm or pasrm_nct [default: pasrm_nct]
    #[arg(long)]
    mode: Option<TrainMode>,
    /// [default: 60]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0.05]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    beta1: Option<f64>,
    /// [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Fraction of patches masked in the pseudo branch [default: 0.75]
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Pseudo-input probability, pasrm mode only [default: 0.2]
    #[arg(long)]
    pseudo_probability: Option<f64>,
    /// [default: 1.0]
    #[arg(long)]
    lambda_n: Option<f64>,
    /// [default: 1.0]
    #[arg(long)]
    lambda_p: Option<f64>,
    /// [default: 0.3]
    #[arg(long)]
    lambda_cst: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Input frames per window, T [default: 4]
    #[arg(long)]
    input_frames: Option<usize>,
    /// Stop the consistency gradient into the normal branch.
    #[arg(long)]
    stop_grad_normal: bool,
    #[arg(long, value_enum, default_value = "tiny")]
    preset: PresetArg,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    /// Frames are resized to SIZE x SIZE.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Checkpoint whose matching tensors initialize the model.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Extra KEY=VALUE overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeakArg {
    PredictionMax,
    Unit,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    PerClip,
    PerDataset,
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Resize frames to the checkpoint geometry instead of rejecting a mismatch.
    #[arg(long)]
    resize: bool,
}

#[derive(Args)]
struct ScoringFlags {
    #[arg(long, value_enum, default_value = "prediction-max")]
    peak: PeakArg,
    #[arg(long, value_enum, default_value = "per-clip")]
    scope: ScopeArg,
}

impl ScoringFlags {
    fn options(&self) -> ScoreOptions {
        ScoreOptions {
            peak: match self.peak {
                PeakArg::PredictionMax => PsnrPeak::PredictionMax,
                PeakArg::Unit => PsnrPeak::Unit,
            },
            scope: match self.scope {
                ScopeArg::PerClip => NormalizationScope::PerClip,
                ScopeArg::PerDataset => NormalizationScope::PerDataset,
            },
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    input: ModelInput,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of score CSVs written by `score`.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    scores_dir: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    resize: bool,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DiffmapArgs {
    #[command(flatten)]
    input: ModelInput,
    /// Clip to render; every clip if omitted.
    #[arg(long)]
    clip: Option<String>,
    /// Target frame indices, comma separated; every scorable frame if omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Refuses to clobber `artifact` without `force`; with it, removes the old one.
fn claim(artifact: &Path, force: bool) -> CliResult<()> {
    let occupied = if artifact.is_dir() {
        fs::read_dir(artifact)
            .map_err(|e| io_err(artifact, e))?
            .next()
            .is_some()
    } else {
        artifact.exists()
    };
    if !occupied {
        return Ok(());
    }
    if !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            artifact.display()
        )));
    }
    if artifact.is_dir() {
        fs::remove_dir_all(artifact).map_err(|e| io_err(artifact, e))
    } else {
        fs::remove_file(artifact).map_err(|e| io_err(artifact, e))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let mut o: Vec<Override> = Vec::new();
    if let Some(v) = args.seed {
        o.push(("seed".into(), toml::Value::Integer(v as i64)));
    }
    for (key, v) in [
        ("num_train_clips", args.num_train_clips),
        ("num_test_clips", args.num_test_clips),
        ("frames_per_clip", args.frames_per_clip),
        ("frame_height", args.frame_height),
        ("frame_width", args.frame_width),
        ("channels", args.channels),
    ] {
        if let Some(v) = v {
            o.push((key.into(), toml::Value::Integer(v as i64)));
        }
    }
    if let Some(v) = args.sprite_speed_normal {
        o.push(("sprite_speed_normal".into(), toml::Value::Float(v)));
    }
    if let Some(v) = args.anomaly_kind {
        o.push(("anomaly_kind".into(), toml::Value::String(v)));
    }
    if let Some(span) = &args.anomaly_span {
        let parts: Vec<&str> = span.split(',').collect();
        let bounds: Option<Vec<i64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        match bounds {
            Some(b) if b.len() == 2 => o.push((
                "anomaly_span".into(),
                toml::Value::Array(b.into_iter().map(toml::Value::Integer).collect()),
            )),
            _ => {
                return Err(CliError::Usage(format!(
                    "--anomaly-span expects START,END, got `{span}`"
                )))
            }
        }
    }
    for s in &args.set {
        o.push(parse_set(s)?);
    }
    let spec: SyntheticSpec = resolve(&SyntheticSpec::default(), args.config.as_deref(), o)?;
    spec.validate()?;

    for artifact in ["train", "test", SPEC_FILE, RESOLVED_CONFIG] {
        claim(&args.out.join(artifact), args.force)?;
    }
    create_dir(&args.out)?;
    let resolved = toml::to_string(&spec).expect("spec serializes");
    write_text(&args.out.join(RESOLVED_CONFIG), &resolved)?;

    let (train, test) = generate_synthetic(&spec)?;
    write_dataset(&train, &args.out)?;
    write_dataset(&test, &args.out)?;
    let json = serde_json::to_string_pretty(&spec).expect("spec serializes");
    write_text(&args.out.join(SPEC_FILE), &(json + "\n"))?;
    log::info!(
        "wrote {} train and {} test clips to {}",
        train.videos.len(),
        test.videos.len(),
        args.out.display()
    );
    Ok(())
}

fn train_overrides(args: &TrainArgs) -> CliResult<Vec<Override>> {
    let mut o: Vec<Override> = Vec::new();
    if let Some(m) = args.mode {
        o.push(("mode".into(), toml::Value::String(m.to_string())));
    }
    for (key, v) in [
        ("epochs", args.epochs),
        ("batch_size", args.batch_size),
        ("warmup_epochs", args.warmup_epochs),
        ("T", args.input_frames),
    ] {
        if let Some(v) = v {
            o.push((key.into(), toml::Value::Integer(v as i64)));
        }
    }
    for (key, v) in [
        ("lr", args.lr),
        ("weight_decay", args.weight_decay),
        ("beta1", args.beta1),
        ("beta2", args.beta2),
        ("mask_ratio", args.mask_ratio),
        ("pseudo_probability", args.pseudo_probability),
        ("weights.lambda_n", args.lambda_n),
        ("weights.lambda_p", args.lambda_p),
        ("weights.lambda_cst", args.lambda_cst),
    ] {
        if let Some(v) = v {
            o.push((key.into(), toml::Value::Float(v)));
        }
    }
    if let Some(v) = args.seed {
        o.push(("seed".into(), toml::Value::Integer(v as i64)));
    }
    if args.stop_grad_normal {
        o.push(("stop_grad_normal".into(), toml::Value::Boolean(true)));
    }
    for s in &args.set {
        o.push(parse_set(s)?);
    }
    Ok(o)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cfg: TrainConfig = resolve(&TrainConfig::default(), args.config.as_deref(), train_overrides(&args)?)?;
    cfg.validate()?;
    let model_cfg = ModelConfig::preset(
        args.preset.into(),
        (args.image_size, args.image_size),
        args.patch_size,
        cfg.t,
        args.channels,
    )?;

    if args.resume.is_none() {
        for artifact in [METRICS_FILE, FINAL_CHECKPOINT, "checkpoints"] {
            claim(&args.out.join(artifact), args.force)?;
        }
    }
    create_dir(&args.out)?;
    let model_line = format!(
        "# model: preset={} image_size={}x{} patch_size={} channels={}\n",
        Preset::from(args.preset),
        args.image_size,
        args.image_size,
        args.patch_size,
        args.channels
    );
    write_text(
        &args.out.join(RESOLVED_CONFIG),
        &(model_line + &cfg.to_toml_string()),
    )?;

    let dataset = load_dataset(
        &args.data,
        Split::Train,
        (args.image_size, args.image_size),
        args.channels,
        args.patch_size,
    )?;
    let params = init_params(&model_cfg, cfg.seed, args.pretrained.as_deref())?;
    log::info!(
        "training {} ({} parameters) on {} clips, mode {}",
        Preset::from(args.preset),
        params.num_params(),
        dataset.videos.len(),
        cfg.mode
    );
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume.clone(),
    };
    let outcome = run_training(&dataset, params, &cfg, &opts)?;
    log::info!(
        "finished at step {}, final checkpoint {}",
        outcome.state.step,
        args.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}`"))),
    }
}

/// Loads a checkpoint and the split it will be applied to, checking geometry.
fn load_model_and_data(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    resize: bool,
) -> CliResult<(ModelParams, VideoDataset)> {
    let split = parse_split(split)?;
    let params = Checkpoint::load(checkpoint)?.params;
    let cfg = &params.config;
    let native = probe_frame_size(data, split)?;
    if native != cfg.image_size && !resize {
        return Err(CliError::Usage(format!(
            "dataset frames are {}x{} but the checkpoint expects {}x{} (pass --resize to resample)",
            native.0, native.1, cfg.image_size.0, cfg.image_size.1
        )));
    }
    let dataset = load_dataset(data, split, cfg.image_size, cfg.out_channels, cfg.patch_size)?;
    Ok((params, dataset))
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    let scores_dir = args.out.join(SCORES_DIR);
    claim(&scores_dir, args.force)?;
    create_dir(&scores_dir)?;
    let opts = args.scoring.options();
    let resolved = format!(
        "checkpoint = {:?}\ndata = {:?}\nsplit = {:?}\npeak = {:?}\nscope = {:?}\n",
        args.input.checkpoint.display().to_string(),
        args.input.data.display().to_string(),
        args.input.split,
        serde_json::to_value(opts.peak).unwrap().as_str().unwrap(),
        serde_json::to_value(opts.scope).unwrap().as_str().unwrap(),
    );
    write_text(&args.out.join(RESOLVED_CONFIG), &resolved)?;

    let input = &args.input;
    let (params, dataset) = load_model_and_data(&input.checkpoint, &input.data, &input.split, input.resize)?;
    let series = score_dataset(&params, &dataset, params.config.frames(), opts)?;
    for s in &series {
        write_scores_csv(s, &scores_dir.join(format!("{}.csv", s.clip_id)))?;
    }
    log::info!("scored {} clips into {}", series.len(), scores_dir.display());
    Ok(())
}

fn read_scores_dir(dir: &Path) -> CliResult<Vec<maskvad::scoring::ScoreSeries>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no score CSVs in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap().to_string_lossy().into_owned();
            read_scores_csv(&id, p).map_err(CliError::from)
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let eval_path = args.out.join(EVAL_FILE);
    claim(&eval_path, args.force)?;
    create_dir(&args.out)?;

    let series = match (&args.scores_dir, &args.checkpoint, &args.data) {
        (Some(dir), _, _) => {
            write_text(
                &args.out.join(RESOLVED_CONFIG),
                &format!("scores_dir = {:?}\n", dir.display().to_string()),
            )?;
            read_scores_dir(dir)?
        }
        (None, Some(ckpt), Some(data)) => {
            let opts = args.scoring.options();
            write_text(
                &args.out.join(RESOLVED_CONFIG),
                &format!(
                    "checkpoint = {:?}\ndata = {:?}\nsplit = {:?}\npeak = {:?}\nscope = {:?}\n",
                    ckpt.display().to_string(),
                    data.display().to_string(),
                    args.split,
                    serde_json::to_value(opts.peak).unwrap().as_str().unwrap(),
                    serde_json::to_value(opts.scope).unwrap().as_str().unwrap(),
                ),
            )?;
            let (params, dataset) = load_model_and_data(ckpt, data, &args.split, args.resize)?;
            score_dataset(&params, &dataset, params.config.frames(), opts)?
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs --scores-dir or both --checkpoint and --data".into(),
            ))
        }
    };
    let report: EvalReport = evaluate_dataset(&series)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&eval_path, &format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

fn cmd_diffmap(args: DiffmapArgs) -> CliResult<()> {
    let dir = args.out.join(DIFFMAP_DIR);
    claim(&dir, args.force)?;
    create_dir(&dir)?;
    write_text(
        &args.out.join(RESOLVED_CONFIG),
        &format!(
            "checkpoint = {:?}\ndata = {:?}\nsplit = {:?}\nclip = {:?}\nframes = {:?}\n",
            args.input.checkpoint.display().to_string(),
            args.input.data.display().to_string(),
            args.input.split,
            args.clip.clone().unwrap_or_default(),
            args.frames
        ),
    )?;

    let input = &args.input;
    let (params, dataset) = load_model_and_data(&input.checkpoint, &input.data, &input.split, input.resize)?;
    let t = params.config.frames();
    let clips: Vec<_> = match &args.clip {
        Some(id) => {
            let clip = dataset
                .videos
                .iter()
                .find(|c| &c.clip_id == id)
                .ok_or_else(|| CliError::Usage(format!("no clip `{id}` in the dataset")))?;
            vec![clip]
        }
        None => dataset.videos.iter().collect(),
    };
    let mut written = 0;
    for clip in clips {
        let targets: Vec<usize> = if args.frames.is_empty() {
            (t..clip.len()).collect()
        } else {
            args.frames.clone()
        };
        let clip_dir = dir.join(&clip.clip_id);
        create_dir(&clip_dir)?;
        for idx in targets {
            let window = FrameWindow::new(clip, t, idx).map_err(|_| {
                CliError::Usage(format!(
                    "frame {idx} of clip `{}` has no prediction (needs {t} <= index < {})",
                    clip.clip_id,
                    clip.len()
                ))
            })?;
            let (pred, _) = forward(&params, &window, None)?;
            let map = diff_map(window.target(), &pred)?;
            write_png(&clip_dir.join(format!("{idx:06}_target.png")), window.target())?;
            write_png(&clip_dir.join(format!("{idx:06}_prediction.png")), &pred)?;
            write_png(&clip_dir.join(format!("{idx:06}_diff.png")), &map)?;
            written += 1;
        }
    }
    log::info!("wrote {written} diff-map triplets to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diffmap(a) => cmd_diffmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
