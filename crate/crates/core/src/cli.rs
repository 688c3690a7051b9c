//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{invert, reconstruct, InversionRecord};
use crate::masks::{expand_to_rect, load_mask_pgm, save_mask_pgm};
use crate::pipeline::{prepare, run_prepared, AblationStage, PipelineTrace};
use crate::predictor::{
    blob_dataset, train_toy, ConditioningVector, FileExchangePredictor, IdentityScalePredictor, NoisePredictor,
    ToyConfig, ToyDenoiser, TrainConfig, TrainSample, ZeroPredictor,
};
use crate::scene::{write_toy_scene, SceneManifest, ToySceneSpec, TOY_COND_DIM};
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentTensor, Shape};

pub const THREADS_ENV: &str = "PNPMIX_THREADS";
pub const LABELS_FILE: &str = "labels.json";
const BACKGROUND_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "pnpmix", version, about = "Training-free multi-concept compositing over DDPM inversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ScheduleArgs {
    /// Number of diffusion steps.
    #[arg(id = "T", long = "T", default_value_t = 50)]
    pub steps: usize,
    /// First beta; defaults to the standard range rescaled to T.
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
}

impl ScheduleArgs {
    fn build(&self) -> Result<NoiseSchedule> {
        let (s, e) = NoiseSchedule::default_range(self.steps);
        NoiseSchedule::linear(self.steps, self.beta_start.unwrap_or(s), self.beta_end.unwrap_or(e))
    }
}

#[derive(Debug, clap::Args)]
pub struct PredictorArgs {
    /// zero | identity:K | toy:CHECKPOINT | toy-random:SEED | exchange:DIR
    #[arg(long, default_value = "zero")]
    pub predictor: String,
    /// Seconds to wait for an exchange response.
    #[arg(long, default_value_t = 60.0)]
    pub exchange_timeout: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the noise schedule as CSV.
    ScheduleDump {
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Invert one latent and write its inversion record.
    Invert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        cond_id: usize,
        #[arg(long, default_value_t = TOY_COND_DIM)]
        cond_dim: usize,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Fuse a scene described by a manifest.
    Blend {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation stage a..e; defaults to the manifest's stage.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        beta: Option<f32>,
        #[arg(long)]
        me_margin: Option<usize>,
        /// Use a convex exterior blend for dilution (experimental).
        #[arg(long)]
        dilution_convex: bool,
        /// Directory for per-channel PGM previews of the output.
        #[arg(long)]
        preview: Option<PathBuf>,
        /// Directory for per-step snapshots.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Train the toy denoiser on a dataset directory.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f32,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Write a procedural toy scene and its manifest.
    MakeScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "T", default_value_t = 50)]
        steps: usize,
    },
    /// Write a labelled blob dataset for train-toy.
    MakeBlobs {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = TOY_COND_DIM)]
        cond_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replace a mask by its margin-grown bounding rectangle.
    MaskExpand {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::masks::DEFAULT_ME_MARGIN)]
        margin: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetLabels {
    pub cond_dim: usize,
    pub items: Vec<LabelledFile>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelledFile {
    pub file: String,
    pub label: usize,
}

/// Builds a predictor from its spec string. `shape`/`cond_dim` size random toy models.
pub fn parse_predictor(
    spec: &str,
    shape: Shape,
    cond_dim: usize,
    exchange_timeout: Duration,
) -> Result<Box<dyn NoisePredictor>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match (kind, arg) {
        ("zero", "") => Ok(Box::new(ZeroPredictor)),
        ("identity", k) => {
            let k: f32 = k
                .parse()
                .map_err(|_| Error::Parameter(format!("identity predictor needs a scale, got {k:?}")))?;
            if !k.is_finite() {
                return Err(Error::Parameter(format!("identity scale must be finite, got {k}")));
            }
            Ok(Box::new(IdentityScalePredictor::new(k)))
        }
        ("toy", path) if !path.is_empty() => Ok(Box::new(ToyDenoiser::load(Path::new(path))?)),
        ("toy-random", seed) => {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Parameter(format!("toy-random needs an integer seed, got {seed:?}")))?;
            Ok(Box::new(ToyDenoiser::random(ToyConfig::new(shape, 8, cond_dim), seed)?))
        }
        ("exchange", dir) if !dir.is_empty() => {
            let dir = Path::new(dir);
            if !dir.is_dir() {
                return Err(Error::NotFound(dir.to_path_buf()));
            }
            Ok(Box::new(FileExchangePredictor::new(dir, exchange_timeout)))
        }
        _ => Err(Error::Parameter(format!(
            "unknown predictor {spec:?}; expected zero, identity:K, toy:PATH, toy-random:SEED or exchange:DIR"
        ))),
    }
}

fn timeout(secs: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(secs).map_err(|_| Error::Parameter(format!("bad exchange timeout {secs}")))
}

/// Per-channel min-max scaled 8-bit PGM; for viewing only.
pub fn preview_pgm(x: &LatentTensor, c: usize) -> Vec<u8> {
    let s = x.shape();
    let plane = x.channel(c);
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    bytes.extend(plane.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    bytes
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_dataset(dir: &Path) -> Result<(Vec<TrainSample>, usize)> {
    let labels_path = dir.join(LABELS_FILE);
    let bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let labels: DatasetLabels = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", labels_path.display())))?;
    let samples = labels
        .items
        .iter()
        .map(|item| {
            Ok(TrainSample {
                x0: LatentTensor::load(dir.join(&item.file))?,
                cond: ConditioningVector::one_hot(item.label, labels.cond_dim)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = samples.first() {
        for (s, item) in samples.iter().zip(&labels.items) {
            if s.x0.shape() != first.x0.shape() {
                return Err(Error::Validation(format!(
                    "{} is {}, expected {}",
                    item.file,
                    s.x0.shape(),
                    first.x0.shape()
                )));
            }
        }
    }
    Ok((samples, labels.cond_dim))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::ScheduleDump { schedule, out } => {
            let csv = schedule.build()?.to_csv();
            match out {
                Some(p) => write_file(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Invert {
            input,
            out,
            seed,
            cond_id,
            cond_dim,
            schedule,
            predictor,
        } => {
            let sched = schedule.build()?;
            let x0 = LatentTensor::load(&input)?;
            let cond = ConditioningVector::one_hot(cond_id, cond_dim)?;
            let p = parse_predictor(&predictor.predictor, x0.shape(), cond_dim, timeout(predictor.exchange_timeout)?)?;
            let rec = invert(&x0, &sched, p.as_ref(), &cond, seed)?;
            let back = reconstruct(&rec, &sched, p.as_ref(), &cond)?;
            rec.save(&out)?;
            println!("wrote {} (T={}, shape {})", out.display(), rec.steps(), rec.shape());
            println!("round-trip max-abs-error: {:e}", back.max_abs_diff(&x0)?);
        }
        Command::Blend {
            manifest,
            out,
            stage,
            alpha,
            beta,
            me_margin,
            dilution_convex,
            preview,
            trace,
            predictor,
        } => {
            let (m, base) = SceneManifest::load(&manifest)?;
            let stage = match stage {
                Some(s) => s.parse::<AblationStage>()?,
                None => m.stage()?,
            };
            let mut cfg = m.blend_config(stage)?;
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.beta = beta.unwrap_or(cfg.beta);
            cfg.me_margin = me_margin.unwrap_or(cfg.me_margin);
            cfg.dilution_convex = dilution_convex;
            cfg.validate()?;
            let bundle = m.bundle(&base)?;
            let sched = m.schedule()?;
            let p = parse_predictor(
                &predictor.predictor,
                bundle.back.shape(),
                m.cond_dim,
                timeout(predictor.exchange_timeout)?,
            )?;
            let prepared = prepare(&bundle, &sched, p.as_ref())?;
            let mut tr = PipelineTrace::default();
            let result = run_prepared(&bundle, &prepared, &sched, p.as_ref(), &cfg, trace.as_ref().map(|_| &mut tr))?;
            write_file(&out, &result.to_bytes())?;
            if let Some(dir) = &trace {
                tr.save_dir(dir)?;
            }
            if let Some(dir) = &preview {
                for c in 0..result.shape().channels {
                    write_file(&dir.join(format!("out_c{c}.pgm")), &preview_pgm(&result, c))?;
                }
            }
            println!("wrote {} (stage {stage}, predictor {})", out.display(), p.name());
            println!("sha256: {}", result.digest());
            let err = result.max_abs_diff_masked(&bundle.back, bundle.masks.background())?;
            let ok = err <= BACKGROUND_TOLERANCE;
            println!(
                "background check: max |out - back| on M_B = {err:e} ({})",
                if ok { "pass" } else { "FAIL" }
            );
            if !ok {
                return Err(Error::Numeric(format!(
                    "background region drifted by {err:e} (tolerance {BACKGROUND_TOLERANCE:e})"
                )));
            }
        }
        Command::TrainToy {
            data,
            out,
            loss_csv,
            steps,
            lr,
            batch,
            width,
            seed,
            schedule,
        } => {
            let sched = schedule.build()?;
            let (samples, cond_dim) = load_dataset(&data)?;
            let first = samples
                .first()
                .ok_or_else(|| Error::Validation(format!("dataset {} is empty", data.display())))?;
            let mut model = ToyDenoiser::random(ToyConfig::new(first.x0.shape(), width, cond_dim), seed)?;
            let cfg = TrainConfig {
                steps,
                lr,
                batch_size: batch,
                seed,
            };
            let report = train_toy(&mut model, &samples, &sched, &cfg)?;
            model.save(&out)?;
            if let Some(p) = &loss_csv {
                write_file(p, report.to_csv().as_bytes())?;
            }
            println!(
                "trained {} params for {steps} steps: loss {:.5} -> {:.5}",
                model.num_params(),
                report.initial_loss(),
                report.final_loss()
            );
        }
        Command::MakeScene {
            out,
            size,
            n,
            channels,
            seed,
            steps,
        } => {
            let spec = ToySceneSpec { size, channels, n, seed };
            let path = write_toy_scene(&out, &spec, steps)?;
            println!("wrote {}", path.display());
        }
        Command::MakeBlobs {
            out,
            count,
            size,
            channels,
            cond_dim,
            seed,
        } => {
            if count == 0 || cond_dim == 0 {
                return Err(Error::Parameter("count and cond-dim must be positive".into()));
            }
            let samples = blob_dataset(count, Shape::new(channels, size, size), cond_dim, seed)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut items = Vec::with_capacity(count);
            for (i, s) in samples.iter().enumerate() {
                let file = format!("blob_{i:04}.pnpl");
                s.x0.save(out.join(&file))?;
                let label = s.cond.values().iter().position(|&v| v == 1.0).unwrap_or(0);
                items.push(LabelledFile { file, label });
            }
            let labels = DatasetLabels { cond_dim, items };
            let mut text = serde_json::to_string_pretty(&labels).expect("labels serialize");
            text.push('\n');
            write_file(&out.join(LABELS_FILE), text.as_bytes())?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::MaskExpand { input, out, margin } => {
            let m = load_mask_pgm(&input)?;
            let r = expand_to_rect(&m, margin)?;
            save_mask_pgm(&r, &out)?;
            println!("wrote {} ({} of {} pixels set)", out.display(), r.count(), r.bits().len());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Parameter(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool may already exist when embedded; the cap is best effort then.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Loads an inversion record written by `invert`.
pub fn load_record(path: &Path) -> Result<InversionRecord> {
    InversionRecord::load(path)
}
