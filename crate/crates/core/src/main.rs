use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use trackgen::adversarial::{train_gan, GanConfig};
use trackgen::checkpoint::Checkpoint;
use trackgen::content_vae::{content_samples, train_content_vae, ContentVae, ContentVaeConfig};
use trackgen::error::{Error, Result};
use trackgen::eval::{
    evaluate_model, motion_adherence, AeFeatures, EvalProtocol, ExtractorSpec, FeatureExtractor, PooledPixelFeatures,
    TorchScriptFeatures,
};
use trackgen::generator::{
    train_decoder, GenerateMode, GeneratorConfig, Pipeline, CONTENT_CKPT, DECODER_CKPT, MOTION_CKPT,
};
use trackgen::motion_vae::{train_motion_vae, MotionVae, MotionVaeConfig};
use trackgen::preprocess::{
    episode_dirs, load_dataset, prepare_episode, train_background_ae, BackgroundAeConfig, BackgroundSource,
    MaskOptions,
};
use trackgen::synth::{generate_dataset, DetectOptions, WorldConfig};
use trackgen::tracks::load_tracks;
use trackgen::train::{LossLog, TrainConfig};
use trackgen::video::{load_frame, load_video, save_video};

/// Box-track controlled video generation.
#[derive(Debug, Parser)]
#[command(name = "trackgen", version)]
struct Cli {
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,

    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sprite dataset with ground-truth tracks.
    Synth {
        /// Flat JSON world config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of episodes.
        #[arg(long)]
        count: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rasterize tracks and extract foreground masks for every episode.
    Preprocess {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Train a background autoencoder instead of using each episode's background.png.
        #[arg(long)]
        train_background: bool,
        /// Flat JSON config for the background model and training.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Difference threshold for foreground masks.
        #[arg(long)]
        threshold: Option<f32>,
        /// Gaussian widening kernel size in pixels.
        #[arg(long)]
        kernel: Option<usize>,
    },
    /// Train one stage of the model.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Generate a video with a trained model.
    Generate {
        /// Model directory holding the checkpoints.
        #[arg(long)]
        model: PathBuf,
        /// controlled or unconditional.
        #[arg(long, default_value = "controlled")]
        mode: String,
        /// Content reference image (controlled mode).
        #[arg(long)]
        content: Option<PathBuf>,
        /// tracks.json with the commanded boxes (controlled mode).
        #[arg(long)]
        tracks: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output frame directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate models and videos.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Serve generation over HTTP.
    Serve {
        /// Directory of model directories.
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON config; keys of the model config and of the training schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model directory to write checkpoints and the loss CSV into.
    #[arg(long)]
    out: PathBuf,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum TrainStage {
    /// Motion autoencoder on rasterized tracks.
    MotionVae(TrainArgs),
    /// Content autoencoder on first frames with foreground masks.
    ContentVae(TrainArgs),
    /// Decoder from frozen autoencoder latents; needs both autoencoders in --out.
    Decoder(TrainArgs),
    /// Adversarial fine-tuning; needs the decoder in --out.
    Gan(TrainArgs),
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// FID of generated sets against real episodes, with a bootstrap interval.
    Fid {
        /// Model directory.
        #[arg(long)]
        model: PathBuf,
        /// Protocol JSON (num_sets, videos_per_set, mode, resamples, level, seed, extractor).
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Reference dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean IoU between commanded tracks and boxes detected in a video.
    Adherence {
        /// Frame directory of the video.
        #[arg(long)]
        generated: PathBuf,
        /// Commanded tracks.json.
        #[arg(long)]
        tracks: PathBuf,
        /// Clean background image; defaults to background.png next to the frame directory.
        #[arg(long)]
        background: Option<PathBuf>,
        /// Detection threshold on the background difference.
        #[arg(long)]
        threshold: Option<f32>,
        /// Minimum detected box area in pixels.
        #[arg(long)]
        min_area: Option<i64>,
    },
}

fn read_flat_config(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Missing {
        path: path.to_path_buf(),
        hint: format!("cannot read config: {e}"),
    })?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

/// Overlay flat config keys onto a serializable config, recording used keys.
fn overlay<T: Serialize + DeserializeOwned>(base: T, flat: &Map<String, Value>, used: &mut Vec<String>) -> Result<T> {
    let mut v = serde_json::to_value(&base)?;
    let obj = v.as_object_mut().expect("configs serialize to objects");
    for (k, val) in flat {
        if obj.contains_key(k) {
            obj.insert(k.clone(), val.clone());
            used.push(k.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn reject_unused(flat: &Map<String, Value>, used: &[String]) -> Result<()> {
    let unknown: Vec<&String> = flat.keys().filter(|k| !used.contains(k)).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config keys: {unknown:?}")))
    }
}

impl TrainArgs {
    fn train_config(&self, flat: &Map<String, Value>, used: &mut Vec<String>) -> Result<TrainConfig> {
        let mut t = overlay(TrainConfig::default(), flat, used)?;
        if let Some(s) = self.steps {
            t.steps = s;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(l) = self.learning_rate {
            t.learning_rate = l;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t.validate()?;
        Ok(t)
    }
}

fn write_log(log: &LossLog, out: &Path, name: &str) -> Result<()> {
    let path = out.join(format!("{name}_loss.csv"));
    log.write_csv(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_train(stage: TrainStage) -> Result<()> {
    let (args, name) = match &stage {
        TrainStage::MotionVae(a) => (a, "motion_vae"),
        TrainStage::ContentVae(a) => (a, "content_vae"),
        TrainStage::Decoder(a) => (a, "decoder"),
        TrainStage::Gan(a) => (a, "gan"),
    };
    let flat = read_flat_config(args.config.as_deref())?;
    let mut used = Vec::new();
    let train = args.train_config(&flat, &mut used)?;
    let episodes = load_dataset(&args.data)?;
    let first = episodes.first().ok_or_else(|| Error::Validation(format!(
        "no episodes under {}",
        args.data.display()
    )))?;
    let s = first.shape();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    match stage {
        TrainStage::MotionVae(_) => {
            let base = MotionVaeConfig {
                n: s.n,
                h: s.h,
                w: s.w,
                ..Default::default()
            };
            let cfg = overlay(base, &flat, &mut used)?;
            reject_unused(&flat, &used)?;
            let videos: Vec<_> = episodes.iter().map(|e| &e.motion).collect();
            let (model, log) = train_motion_vae(&videos, cfg, &train)?;
            model.checkpoint()?.save(&args.out, MOTION_CKPT)?;
            write_log(&log, &args.out, name)?;
        }
        TrainStage::ContentVae(_) => {
            let base = ContentVaeConfig {
                h: s.h,
                w: s.w,
                ..Default::default()
            };
            let cfg = overlay(base, &flat, &mut used)?;
            reject_unused(&flat, &used)?;
            let samples = content_samples(&episodes, cfg.content_mask);
            let (model, log) = train_content_vae(&samples, cfg, &train)?;
            model.checkpoint()?.save(&args.out, CONTENT_CKPT)?;
            write_log(&log, &args.out, name)?;
        }
        TrainStage::Decoder(_) => {
            let motion = MotionVae::from_checkpoint(&Checkpoint::load(&args.out, MOTION_CKPT)?)?;
            let content = ContentVae::from_checkpoint(&Checkpoint::load(&args.out, CONTENT_CKPT)?)?;
            let base = GeneratorConfig {
                n: s.n,
                h: s.h,
                w: s.w,
                motion_latent_dim: motion.config().latent_dim,
                content_latent_dim: content.config().latent_dim,
                ..Default::default()
            };
            let cfg = overlay(base, &flat, &mut used)?;
            reject_unused(&flat, &used)?;
            let (model, log) = train_decoder(&episodes, &motion, &content, cfg, &train)?;
            model.checkpoint()?.save(&args.out, DECODER_CKPT)?;
            write_log(&log, &args.out, name)?;
        }
        TrainStage::Gan(_) => {
            let pipeline = Pipeline::load(&args.out)?;
            let Pipeline {
                motion,
                content,
                generator,
            } = pipeline;
            let g = generator.config();
            let critic_base = trackgen::adversarial::CriticConfig {
                n: g.n,
                h: g.h,
                w: g.w,
                ..Default::default()
            };
            let critic = overlay(critic_base, &flat, &mut used)?;
            let mut cfg = overlay(GanConfig::default(), &flat, &mut used)?;
            cfg.critic = critic;
            used.retain(|k| k != "critic");
            reject_unused(&flat, &used)?;
            let (gen, critic, log) = train_gan(
                generator,
                &episodes,
                &motion,
                &content,
                cfg,
                &train,
                Some(args.out.clone()),
            )?;
            let _ = (gen, critic);
            write_log(&log, &args.out, name)?;
        }
    }
    println!("saved checkpoints to {}", args.out.display());
    Ok(())
}

fn run_preprocess(
    data: &Path,
    train_background: bool,
    config: Option<&Path>,
    threshold: Option<f32>,
    kernel: Option<usize>,
) -> Result<()> {
    let flat = read_flat_config(config)?;
    let mut used = Vec::new();
    let mut opts = MaskOptions::default();
    if let Some(v) = flat.get("mask_threshold") {
        opts.threshold = v.as_f64().ok_or_else(|| Error::Config("mask_threshold must be a number".into()))? as f32;
        used.push("mask_threshold".to_string());
    }
    if let Some(v) = flat.get("mask_kernel") {
        opts.kernel = v.as_u64().ok_or_else(|| Error::Config("mask_kernel must be an integer".into()))? as usize;
        used.push("mask_kernel".to_string());
    }
    if let Some(t) = threshold {
        opts.threshold = t;
    }
    if let Some(k) = kernel {
        opts.kernel = k;
    }
    let dirs = episode_dirs(data)?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!("no episodes under {}", data.display())));
    }
    if train_background {
        let videos: Vec<_> = dirs
            .iter()
            .map(|d| load_video(&d.join("frames")))
            .collect::<Result<_>>()?;
        let s = videos[0].shape();
        let frames: Vec<_> = videos.iter().flat_map(|v| (0..s.n).map(move |t| v.frame(t))).collect();
        let base = BackgroundAeConfig {
            h: s.h,
            w: s.w,
            ..Default::default()
        };
        let cfg = overlay(base, &flat, &mut used)?;
        let train = overlay(TrainConfig::default(), &flat, &mut used)?;
        reject_unused(&flat, &used)?;
        let (model, log) = train_background_ae(&frames, cfg, &train)?;
        model.checkpoint()?.save(data, "background_ae")?;
        write_log(&log, data, "background_ae")?;
        for d in &dirs {
            prepare_episode(d, &BackgroundSource::Model(&model), opts)?;
        }
    } else {
        reject_unused(&flat, &used)?;
        for d in &dirs {
            let bg_path = d.join("background.png");
            if !bg_path.exists() {
                return Err(Error::Missing {
                    path: bg_path,
                    hint: "pass --train-background to estimate backgrounds with an autoencoder".into(),
                });
            }
            let bg = load_frame(&bg_path, Some(3))?;
            prepare_episode(d, &BackgroundSource::Known(bg.view()), opts)?;
        }
    }
    println!("prepared {} episodes", dirs.len());
    Ok(())
}

fn run_generate(
    model: &Path,
    mode: &str,
    content: Option<&Path>,
    tracks: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mode: GenerateMode = mode.parse()?;
    let (content, tracks) = match mode {
        GenerateMode::Controlled => {
            let c = content.ok_or_else(|| Error::Validation("--content is required in controlled mode".into()))?;
            let t = tracks.ok_or_else(|| Error::Validation("--tracks is required in controlled mode".into()))?;
            (Some(load_frame(c, Some(3))?), Some(load_tracks(t)?))
        }
        GenerateMode::Unconditional => (None, None),
    };
    let pipeline = Pipeline::load(model)?;
    let video = pipeline.generate(mode, content.as_ref().map(|c| c.view()), tracks.as_ref(), seed)?;
    save_video(&video, out)?;
    println!("wrote {} frames to {}", video.shape().n, out.display());
    Ok(())
}

fn run_eval(what: EvalCommand) -> Result<()> {
    match what {
        EvalCommand::Fid {
            model,
            protocol,
            data,
            out,
        } => {
            let protocol: EvalProtocol = match protocol {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Missing {
                        path: p.clone(),
                        hint: format!("cannot read protocol: {e}"),
                    })?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => EvalProtocol::default(),
            };
            let pipeline = Pipeline::load(&model)?;
            let reference = load_dataset(&data)?;
            let s = pipeline.shape();
            let report = match &protocol.extractor {
                ExtractorSpec::TrainedAeFeatures => {
                    let fx = AeFeatures {
                        model: &pipeline.content,
                    };
                    evaluate_model(&pipeline, &reference, &protocol, &fx)?
                }
                ExtractorSpec::PretrainedClassifierFeatures { path } => {
                    let fx = TorchScriptFeatures::load(path, s.h, s.w)?;
                    evaluate_model(&pipeline, &reference, &protocol, &fx as &dyn FeatureExtractor)?
                }
                ExtractorSpec::PooledPixels { grid } => {
                    let fx = PooledPixelFeatures { grid: *grid };
                    evaluate_model(&pipeline, &reference, &protocol, &fx)?
                }
            };
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(o) = out {
                std::fs::write(&o, &text).map_err(|e| Error::Io { path: o.clone(), source: e })?;
            }
            println!("{text}");
            Ok(())
        }
        EvalCommand::Adherence {
            generated,
            tracks,
            background,
            threshold,
            min_area,
        } => {
            let video = load_video(&generated)?;
            let tracks = load_tracks(&tracks)?;
            let bg_path = match background {
                Some(p) => p,
                None => generated
                    .parent()
                    .map(|p| p.join("background.png"))
                    .filter(|p| p.exists())
                    .ok_or_else(|| Error::Missing {
                        path: generated.join("../background.png"),
                        hint: "pass --background with the clean background image".into(),
                    })?,
            };
            let bg = load_frame(&bg_path, Some(video.shape().c))?;
            let mut opts = DetectOptions::default();
            if let Some(t) = threshold {
                opts.threshold = t;
            }
            if let Some(m) = min_area {
                opts.min_area = m;
            }
            let score = motion_adherence(&video, &tracks, bg.view(), opts)?;
            println!("{score}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            count,
            out,
            seed,
        } => {
            let flat = read_flat_config(config.as_deref())?;
            let mut used = Vec::new();
            let mut cfg = overlay(WorldConfig::default(), &flat, &mut used)?;
            reject_unused(&flat, &used)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if count == 0 {
                return Err(Error::Validation("--count must be positive".into()));
            }
            let index = generate_dataset(&cfg, count, &out)?;
            println!("wrote {} episodes to {}", index.episodes.len(), out.display());
            Ok(())
        }
        Command::Preprocess {
            data,
            train_background,
            config,
            threshold,
            kernel,
        } => run_preprocess(&data, train_background, config.as_deref(), threshold, kernel),
        Command::Train { stage } => run_train(stage),
        Command::Generate {
            model,
            mode,
            content,
            tracks,
            seed,
            out,
        } => run_generate(&model, &mode, content.as_deref(), tracks.as_deref(), seed, &out),
        Command::Eval { what } => run_eval(what),
        Command::Serve {
            models_dir,
            host,
            port,
        } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: PathBuf::from("runtime"),
                source: e,
            })?;
            rt.block_on(trackgen::service::serve(&models_dir, &host, port))
        }
    }
}

fn report(json: bool, kind: &str, message: &str, code: u8) -> ExitCode {
    if json {
        let body = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
        eprintln!("{body}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                return report(true, "usage", e.to_string().trim(), 1);
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    let json = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            report(json, e.kind(), &e.to_string(), code)
        }
    }
}
