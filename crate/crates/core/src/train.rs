//! Training runs: configuration, the epoch loop, checkpoints and metrics.
//!
//! A run is a pure function of its [`RunConfig`]: the dataset, the initial
//! weights and the minibatch order are all derived from `seed`. Wall-clock
//! time is kept out of `metrics.csv` (it goes to `timing.csv`) so that two
//! identical runs leave byte-identical checkpoints and metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, triplet_rng, DatasetSpec, FrameTriplet};
use crate::error::{Error, Result};
use crate::ltz;
use crate::model::{self, Architecture, DeepSize, LossBreakdown, ModelConfig, ModelParams, ShallowSize};
use crate::optim::{mean_gradients, Sgd, SgdConfig};
use crate::tensor::{Precision, Tensor};
use crate::uncertainty::{self, DeltaConfig, DeltaState, W1_NAME};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const RUN_CONFIG_FILE: &str = "run.json";
pub const METRICS_COLUMNS: [&str; 5] = ["epoch", "l2_error", "input_cosine", "code_cosine", "loss"];

const W1_SEED_SALT: u64 = 0xD317_A000_0000_0001;
const SHUFFLE_SEED_SALT: u64 = 0x5EED_0000_0000_0002;

/// Where the model comes from: a scaled preset or a full layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Shallow {
        arch: Architecture,
        #[serde(flatten)]
        size: ShallowSize,
    },
    Deep {
        arch: Architecture,
        #[serde(flatten)]
        size: DeepSize,
    },
    Custom {
        config: ModelConfig,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Shallow { arch, size } => ModelConfig::shallow(*arch, *size),
            ModelSpec::Deep { arch, size } => ModelConfig::deep(*arch, *size),
            ModelSpec::Custom { config } => {
                config.validate()?;
                Ok(config.clone())
            }
        }
    }
}

fn default_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    /// Overrides the curvature weight of the model.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Trains with the latent correction when present.
    #[serde(default)]
    pub delta: Option<DeltaConfig>,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("run config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The model config with overrides applied, after validating the whole
    /// run.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = self.model.build()?;
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        cfg.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Sgd::new(self.optimizer)?;
        if let Some(d) = &self.delta {
            d.validate(&cfg)?;
        }
        Ok(cfg)
    }
}

/// One row of `metrics.csv`; all values are means over the epoch's
/// minibatch steps (measured before each update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Prediction term `½‖x̂ − x‖²`; at the inferred `δ` when training with
    /// the latent correction.
    pub l2_error: f64,
    /// Mean cosine of the raw frame trajectory.
    pub input_cosine: f64,
    /// Mean cosine of the code trajectory (phases only for pooled codes).
    pub code_cosine: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
    pub iterations: usize,
    /// Inferred `δ` of every training triplet during the last epoch, in
    /// dataset order. Empty without the latent correction.
    pub delta_states: Vec<DeltaState>,
}

/// Initial weights of a run, including `W1` when the latent correction is on.
pub fn initial_params(cfg: &ModelConfig, delta: Option<&DeltaConfig>, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::init(cfg, seed)?;
    if let Some(d) = delta {
        uncertainty::init_w1(&mut params, cfg, d, seed ^ W1_SEED_SALT)?;
    }
    Ok(params)
}

/// Mean cosine of the raw pixel trajectory over the triplets.
pub fn input_cosine(triplets: &[FrameTriplet], eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in triplets {
        total += model::curvature_penalty(&t.frames[0], &t.frames[1], &t.frames[2], eps)?;
    }
    Ok(total / triplets.len().max(1) as f64)
}

fn diverged(epoch: usize, what: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        what: what.into(),
    }
}

fn at_epoch(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, what } => diverged(epoch, format!("{op}: non-finite {what}")),
        other => other,
    }
}

/// Runs the epoch loop. `on_epoch` sees each row with the epoch's
/// wall-clock seconds.
pub fn train(
    run: &RunConfig,
    cfg: &ModelConfig,
    triplets: &[FrameTriplet],
    mut on_epoch: impl FnMut(&MetricsRow, f64),
) -> Result<TrainOutput> {
    if triplets.is_empty() && run.epochs > 0 {
        return Err(Error::config("dataset", "no training triplets"));
    }
    let mut params = initial_params(cfg, run.delta.as_ref(), run.seed)?;
    let mut opt = Sgd::new(run.optimizer)?;
    let in_cos = input_cosine(triplets, cfg.eps_curv)?;
    let mut metrics = Vec::with_capacity(run.epochs);
    let mut iterations = 0;
    let mut delta_states: Vec<Option<DeltaState>> = Vec::new();
    let mut order: Vec<usize> = (0..triplets.len()).collect();

    for epoch in 1..=run.epochs {
        let start = Instant::now();
        order.shuffle(&mut triplet_rng(run.seed ^ SHUFFLE_SEED_SALT, epoch));
        let last = epoch == run.epochs;
        if last && run.delta.is_some() {
            delta_states = vec![None; triplets.len()];
        }
        let mut sum = LossBreakdown {
            prediction: 0.0,
            cosine: 0.0,
            curvature: 0.0,
            total: 0.0,
        };
        let mut steps = 0usize;
        for chunk in order.chunks(run.batch_size) {
            let batch: Vec<&FrameTriplet> = chunk.iter().map(|&i| &triplets[i]).collect();
            let mean = match &run.delta {
                Some(d) => {
                    let (states, mean) =
                        uncertainty::train_step_uncertain(&batch, &mut params, cfg, d, &mut opt, run.precision)
                            .map_err(|e| at_epoch(epoch, e))?;
                    if last {
                        for (&i, s) in chunk.iter().zip(states) {
                            delta_states[i] = Some(s);
                        }
                    }
                    mean
                }
                None => plain_step(&batch, &mut params, cfg, &mut opt, run.precision).map_err(|e| at_epoch(epoch, e))?,
            };
            if !mean.total.is_finite() {
                return Err(diverged(epoch, "loss"));
            }
            sum.prediction += mean.prediction;
            sum.cosine += mean.cosine;
            sum.total += mean.total;
            steps += 1;
            iterations += 1;
        }
        if !params.all_finite() {
            return Err(diverged(epoch, "parameters"));
        }
        let n = steps as f64;
        let row = MetricsRow {
            epoch,
            l2_error: sum.prediction / n,
            input_cosine: in_cos,
            code_cosine: sum.cosine / n,
            loss: sum.total / n,
        };
        on_epoch(&row, start.elapsed().as_secs_f64());
        metrics.push(row);
    }
    Ok(TrainOutput {
        params,
        metrics,
        iterations,
        delta_states: delta_states.into_iter().flatten().collect(),
    })
}

fn plain_step(
    batch: &[&FrameTriplet],
    params: &mut ModelParams,
    cfg: &ModelConfig,
    opt: &mut Sgd,
    precision: Precision,
) -> Result<LossBreakdown> {
    let mut grads = Vec::with_capacity(batch.len());
    let mut mean = LossBreakdown {
        prediction: 0.0,
        cosine: 0.0,
        curvature: 0.0,
        total: 0.0,
    };
    for t in batch {
        let (l, g) = model::loss_and_grads(t, params, cfg, precision)?;
        mean.prediction += l.prediction;
        mean.cosine += l.cosine;
        mean.curvature += l.curvature;
        mean.total += l.total;
        grads.push(g);
    }
    let n = batch.len() as f64;
    mean.prediction /= n;
    mean.cosine /= n;
    mean.curvature /= n;
    mean.total /= n;
    let g = mean_gradients(&grads)?;
    if !g.iter().all(Tensor::all_finite) {
        return Err(Error::NonFinite {
            op: "train",
            what: "parameter gradient".into(),
        });
    }
    opt.step(params, &g, precision)?;
    Ok(mean)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub arch: Architecture,
    pub a: [f64; 2],
    pub lambda: f64,
    /// Pool sharpness, when the model phase-pools.
    pub beta: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub iterations: usize,
    pub precision: Precision,
    pub dataset: String,
    pub model: ModelConfig,
    pub delta: Option<DeltaConfig>,
    /// How `W1` is laid out, when present.
    pub w1_layout: Option<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(run: &RunConfig, cfg: &ModelConfig, params: ModelParams, iterations: usize) -> Self {
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            arch: cfg.arch,
            a: cfg.a,
            lambda: cfg.lambda,
            beta: cfg.pool.map(|p| p.beta),
            seed: run.seed,
            epochs: run.epochs,
            iterations,
            precision: run.precision,
            dataset: run.dataset.id().to_string(),
            model: cfg.clone(),
            delta: run.delta,
            w1_layout: run
                .delta
                .map(|_| "[corrected code length, dim delta], row-major; W1 * delta lands in code space".to_string()),
            params: params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    file: format!("{name}.ltz"),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        Checkpoint { manifest, params }
    }

    pub fn delta_config(&self) -> Result<DeltaConfig> {
        self.manifest
            .delta
            .ok_or_else(|| Error::precondition("checkpoint", "model was trained without the latent correction"))
    }

    /// Writes `manifest.json` plus one LTZ file per parameter. Refuses
    /// non-finite weights.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.params.all_finite() {
            return Err(Error::NonFinite {
                op: "checkpoint",
                what: "parameters".into(),
            });
        }
        fs::create_dir_all(dir)?;
        for (entry, (_, t)) in self.manifest.params.iter().zip(self.params.iter()) {
            ltz::write(dir.join(&entry.file), t)?;
        }
        write_json(&dir.join(CHECKPOINT_MANIFEST), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "checkpoint schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        manifest.model.validate()?;
        let mut params = ModelParams::empty();
        for entry in &manifest.params {
            let t = ltz::read(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!("{}: shape {:?}, manifest says {:?}", entry.file, t.shape(), entry.shape)));
            }
            params.insert(&entry.name, t);
        }
        let fresh = ModelParams::init(&manifest.model, 0)?;
        for (name, t) in fresh.iter() {
            if params.get(name).map(Tensor::shape) != Some(t.shape()) {
                return Err(Error::Format(format!("checkpoint is missing or misshapes `{name}`")));
            }
        }
        if let Some(d) = &manifest.delta {
            d.validate(&manifest.model)?;
            if params.get(W1_NAME).map(|t| t.shape().to_vec()) != Some(d.w1_shape(&manifest.model)?.to_vec()) {
                return Err(Error::Format(format!("checkpoint is missing or misshapes `{W1_NAME}`")));
            }
        }
        Ok(Checkpoint { manifest, params })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_COLUMNS).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub train: TrainOutput,
    pub config: ModelConfig,
}

/// Generates the dataset, trains, and writes `run.json`, the checkpoint,
/// `metrics.csv` and `timing.csv` under `out`. Metrics rows are flushed
/// as epochs finish, so a diverged run keeps the rows before the failure.
pub fn run_train(run: &RunConfig, out: &Path) -> Result<RunOutput> {
    let cfg = run.model_config()?;
    let triplets = datagen::generate(&run.dataset, run.seed)?;
    if let Some(t) = triplets.first() {
        if t.frame_shape() != cfg.input_shape {
            return Err(Error::config(
                "dataset",
                format!("frames are {:?}, model expects {:?}", t.frame_shape(), cfg.input_shape),
            ));
        }
    }
    fs::create_dir_all(out)?;
    write_json(&out.join(RUN_CONFIG_FILE), run)?;

    let mut metrics = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out.join(METRICS_FILE))
        .map_err(csv_error)?;
    metrics.write_record(METRICS_COLUMNS).map_err(csv_error)?;
    let mut timing = csv::Writer::from_path(out.join(TIMING_FILE)).map_err(csv_error)?;
    timing.write_record(["epoch", "seconds"]).map_err(csv_error)?;
    metrics.flush()?;
    timing.flush()?;

    let mut sink_error = None;
    let result = train(run, &cfg, &triplets, |row, secs| {
        let r = metrics
            .serialize(row)
            .and_then(|_| timing.write_record([row.epoch.to_string(), format!("{secs:.3}")]))
            .map_err(csv_error)
            .and_then(|_| metrics.flush().and_then(|_| timing.flush()).map_err(Error::from));
        if let Err(e) = r {
            sink_error.get_or_insert(e);
        }
    });
    if let Some(e) = sink_error {
        return Err(e);
    }
    let train = result?;
    Checkpoint::new(run, &cfg, train.params.clone(), train.iterations).save(&out.join("checkpoint"))?;
    Ok(RunOutput {
        dir: out.to_path_buf(),
        train,
        config: cfg,
    })
}

#[cfg(test)]
mod tests;
