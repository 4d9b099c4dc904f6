//! Command-line driver: dataset generation, training and the evaluation
//! commands, plus the mapping from library errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use linvid::autodiff::gradcheck::TOLERANCE_F64;
use linvid::datagen::{self, pgm, DatasetSpec, FrameTriplet};
use linvid::eval;
use linvid::gradsuite;
use linvid::train::{self, Checkpoint, RunConfig, CHECKPOINT_MANIFEST};
use linvid::{Error, Precision, Tensor};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

pub const INTERPOLATION_SCHEMA_VERSION: u32 = 1;
pub const INTERPOLATION_RULE: &str =
    "z(tau) = (1 - tau) z1 + tau z2 on every code component; pooled codes interpolate magnitudes and phases alike, phases clamped to [-1, 1]";

#[derive(Debug, Parser)]
#[command(name = "linvid", version, about = "Train and evaluate linearizing video encoders")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON config: a run config, or a dataset spec where only data is needed.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the training precision.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset and cache it under --out.
    Gen {
        /// Also write the first N triplets as PGM images.
        #[arg(long, default_value_t = 0)]
        previews: usize,
    },
    /// Train a model; writes run.json, metrics.csv, timing.csv and checkpoint/.
    Train,
    /// Decode codes interpolated (or extrapolated) between two frames.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 2, value_names = ["FRAME1", "FRAME2"])]
        frames: Vec<PathBuf>,
        /// Comma-separated τ values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        taus: Option<Vec<f64>>,
    },
    /// Mean cosine of adjacent triples in pixel space and code space.
    Curvature {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Finite-difference gradient checks of the registered operations.
    Gradcheck {
        /// `all` or one operation name.
        #[arg(default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = gradsuite::DEFAULT_CASES)]
        cases: usize,
    },
    /// Tile the convolution kernels of a checkpoint into PGM images.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Probe the inferred correction for the skip label.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `gen` (instead of --config).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Exit code for an error chain: the first library error decides.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config { .. } | Error::Shape { .. } | Error::Precondition { .. } | Error::Json(_) => EXIT_CONFIG,
                Error::NonFinite { .. } | Error::Diverged { .. } | Error::Contract(_) => EXIT_NUMERIC,
                Error::Io(_) | Error::Image(_) | Error::Format(_) => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_CONFIG
}

pub fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen { previews } => cmd_gen(g, *previews),
        Command::Train => cmd_train(g),
        Command::Interpolate { checkpoint, frames, taus } => cmd_interpolate(g, checkpoint, frames, taus.as_deref()),
        Command::Curvature { checkpoint, data } => cmd_curvature(g, checkpoint, data),
        Command::Gradcheck { scope, cases } => cmd_gradcheck(g, scope, *cases),
        Command::Viz { checkpoint } => cmd_viz(g, checkpoint),
        Command::Probe { checkpoint, data } => cmd_probe(g, checkpoint, data),
    }
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::config("out", "this command needs --out").into())
}

fn require_config(g: &Global) -> Result<&Path> {
    g.config
        .as_deref()
        .ok_or_else(|| Error::config("config", "this command needs --config").into())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

/// A dataset spec and seed from a config that is either a run config or a
/// bare dataset spec.
fn dataset_from_config(path: &Path, seed: Option<u64>) -> Result<(DatasetSpec, u64)> {
    let value = read_json(path)?;
    if value.get("dataset").is_some() {
        let run = RunConfig::from_json(&value.to_string())?;
        Ok((run.dataset, seed.unwrap_or(run.seed)))
    } else {
        let spec: DatasetSpec =
            serde_json::from_value(value).map_err(|e| Error::config("dataset", e.to_string()))?;
        Ok((spec, seed.unwrap_or(0)))
    }
}

fn load_triplets(g: &Global, data: &DataArgs) -> Result<Vec<FrameTriplet>> {
    match (&data.data, &g.config) {
        (Some(dir), _) => Ok(datagen::load_dataset(dir)?.1),
        (None, Some(path)) => {
            let (spec, seed) = dataset_from_config(path, g.seed)?;
            Ok(datagen::generate(&spec, seed)?)
        }
        (None, None) => bail!(Error::config("data", "give --data or --config")),
    }
}

/// Accepts a checkpoint directory or a training output directory.
fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = if path.join(CHECKPOINT_MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join("checkpoint")
    };
    Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    println!("{text}");
    Ok(text)
}

fn write_report<T: Serialize>(g: &Global, name: &str, value: &T) -> Result<()> {
    let text = print_json(value)?;
    if let Some(out) = &g.out {
        fs::create_dir_all(out).map_err(Error::from)?;
        fs::write(out.join(name), text + "\n").map_err(Error::from)?;
    }
    Ok(())
}

fn cmd_gen(g: &Global, previews: usize) -> Result<u8> {
    let (spec, seed) = dataset_from_config(require_config(g)?, g.seed)?;
    let out = require_out(g)?;
    let triplets = datagen::generate(&spec, seed)?;
    let manifest = datagen::save_dataset(out, &spec, seed, &triplets)?;
    for (i, t) in triplets.iter().take(previews).enumerate() {
        for (k, f) in t.frames.iter().enumerate() {
            pgm::write_pgm(out.join(format!("preview_{i:03}_{k}.pgm")), f)?;
        }
    }
    eprintln!("wrote {} triplets of {:?} to {}", manifest.count, manifest.frame_shape, out.display());
    Ok(EXIT_OK)
}

fn cmd_train(g: &Global) -> Result<u8> {
    let mut run = RunConfig::from_json(&read_text(require_config(g)?)?)?;
    if let Some(s) = g.seed {
        run.seed = s;
    }
    if let Some(p) = g.precision {
        run.precision = p;
    }
    let out = require_out(g)?;
    let res = train::run_train(&run, out)?;
    match res.train.metrics.last() {
        Some(m) => eprintln!(
            "trained {} epochs: l2 {:.6}, code cosine {:.4}, input cosine {:.4}",
            m.epoch, m.l2_error, m.code_cosine, m.input_cosine
        ),
        None => eprintln!("wrote initial weights (0 epochs)"),
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct InterpolationManifest {
    schema_version: u32,
    rule: &'static str,
    frames: Vec<PathBuf>,
    taus: Vec<f64>,
    files: Vec<String>,
}

fn cmd_interpolate(g: &Global, checkpoint: &Path, frames: &[PathBuf], taus: Option<&[f64]>) -> Result<u8> {
    let ck = load_checkpoint(checkpoint)?;
    let out = require_out(g)?;
    let taus = taus.map(<[f64]>::to_vec).unwrap_or_else(|| eval::DEFAULT_TAUS.to_vec());
    let imgs: Vec<Tensor> = frames.iter().map(pgm::read_image).collect::<Result<_, _>>()?;
    let decoded = eval::interpolate(&imgs[0], &imgs[1], &taus, &ck.params, &ck.manifest.model)?;
    let files = eval::write_interpolation(out, &taus, &decoded)?;
    let manifest = InterpolationManifest {
        schema_version: INTERPOLATION_SCHEMA_VERSION,
        rule: INTERPOLATION_RULE,
        frames: frames.to_vec(),
        taus,
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    fs::write(out.join("manifest.json"), text + "\n").map_err(Error::from)?;
    eprintln!("wrote {} images to {}", files.len(), out.display());
    Ok(EXIT_OK)
}

fn cmd_curvature(g: &Global, checkpoint: &Path, data: &DataArgs) -> Result<u8> {
    let ck = load_checkpoint(checkpoint)?;
    let seqs: Vec<Vec<Tensor>> = load_triplets(g, data)?
        .into_iter()
        .map(|t| t.frames.to_vec())
        .collect();
    let report = eval::measure_curvature(&seqs, &ck.params, &ck.manifest.model)?;
    write_report(g, "curvature.json", &report)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(g: &Global, scope: &str, cases: usize) -> Result<u8> {
    let seed = g.seed.unwrap_or(0);
    let mut failed = false;
    for op in gradsuite::selected(scope)? {
        let start = Instant::now();
        let r = gradsuite::check_op(op, cases, seed)?;
        let ok = r.passed(TOLERANCE_F64);
        failed |= !ok;
        println!(
            "{:<18} {} max_rel_error={:.3e} trials={} resampled={} ({:.1}s)",
            r.op,
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.trials,
            r.resampled,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(if failed { EXIT_CHECK_FAILED } else { EXIT_OK })
}

fn cmd_viz(g: &Global, checkpoint: &Path) -> Result<u8> {
    let ck = load_checkpoint(checkpoint)?;
    let out = require_out(g)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    for (name, img) in eval::filter_images(&ck.params, &ck.manifest.model)? {
        let path = out.join(format!("filters_{name}.pgm"));
        pgm::write_pgm(&path, &img)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(EXIT_OK)
}

fn cmd_probe(g: &Global, checkpoint: &Path, data: &DataArgs) -> Result<u8> {
    let ck = load_checkpoint(checkpoint)?;
    let dcfg = ck.delta_config()?;
    let triplets = load_triplets(g, data)?;
    let report = eval::probe_deltas(&triplets, &ck.params, &ck.manifest.model, &dcfg, g.seed.unwrap_or(0))?;
    write_report(g, "probe.json", &report)?;
    Ok(EXIT_OK)
}
