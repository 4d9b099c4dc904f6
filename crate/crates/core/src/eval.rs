//! Evaluation: code-space interpolation, trajectory curvature, phase
//! regression, held-out prediction error, filter tiles and the `δ` probe.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{pgm, FrameTriplet};
use crate::error::{Error, Result};
use crate::model::{self, Encoding, Layer, ModelConfig, ModelParams};
use crate::phase_pool::Code;
use crate::tensor::Tensor;
use crate::uncertainty::{self, probe, DeltaConfig};

/// Temporal indices the interpolation figures are rendered at.
pub const DEFAULT_TAUS: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

fn lerp(a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    // (1 - τ) a + τ b hits both endpoints exactly.
    a.zip_map(b, |x, y| (1.0 - tau) * x + tau * y)
}

/// `z(τ) = (1 − τ) z1 + τ z2`. Pooled codes interpolate magnitudes and
/// phases alike; phases are clamped to [-1, 1] once `τ` leaves [0, 1].
pub fn interpolate_code(z1: &Encoding, z2: &Encoding, tau: f64) -> Result<Encoding> {
    if !tau.is_finite() {
        return Err(Error::precondition("interpolate", "τ must be finite"));
    }
    match (z1, z2) {
        (Encoding::Flat(a), Encoding::Flat(b)) => Ok(Encoding::Flat(lerp(a, b, tau)?)),
        (Encoding::Pooled(a), Encoding::Pooled(b)) => {
            if a.spec != b.spec {
                return Err(Error::shape("interpolate", "codes come from different pool specs"));
            }
            let mut p = lerp(&a.p, &b.p, tau)?;
            p.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            Ok(Encoding::Pooled(Code {
                m: lerp(&a.m, &b.m, tau)?,
                p,
                spec: a.spec,
                input_shape: a.input_shape,
            }))
        }
        _ => Err(Error::shape("interpolate", "one pooled and one flat code")),
    }
}

/// Decodes the interpolated code at every `τ`.
pub fn interpolate(
    frame1: &Tensor,
    frame2: &Tensor,
    taus: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<Tensor>> {
    if taus.is_empty() {
        return Err(Error::precondition("interpolate", "empty τ list"));
    }
    let z1 = model::encode(frame1, params, cfg)?;
    let z2 = model::encode(frame2, params, cfg)?;
    taus.iter()
        .map(|&t| model::decode(&interpolate_code(&z1, &z2, t)?, params, cfg))
        .collect()
}

/// File name of the image rendered at position `index`, value `tau`.
pub fn interpolation_file_name(index: usize, tau: f64) -> String {
    format!("interp_{index:02}_tau_{tau}.pgm")
}

/// Writes one PGM per `τ` into `dir`.
pub fn write_interpolation(dir: &Path, taus: &[f64], frames: &[Tensor]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    taus.iter()
        .zip(frames)
        .enumerate()
        .map(|(i, (&tau, f))| {
            let path = dir.join(interpolation_file_name(i, tau));
            pgm::write_pgm(&path, &check_image(f)?)?;
            Ok(path)
        })
        .collect()
}

/// Only single-channel frames can be written.
fn check_image(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [1, _, _] => Ok(t.clone()),
        s => Err(Error::shape("write_interpolation", format!("expected a grayscale frame, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Curvature and straightness

/// Mean cosine between consecutive differences over all adjacent triples
/// of a sequence. 1 is a straight, constant-direction trajectory.
pub fn mean_cosine(seq: &[Tensor], eps: f64) -> Result<f64> {
    if seq.len() < 3 {
        return Err(Error::precondition("mean_cosine", format!("sequence of {} frames, need 3", seq.len())));
    }
    let mut total = 0.0;
    for w in seq.windows(3) {
        total += model::curvature_penalty(&w[0], &w[1], &w[2], eps)?;
    }
    Ok(total / (seq.len() - 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    /// Mean cosine of the raw pixel trajectories.
    pub input_cosine: f64,
    /// Mean cosine of the code trajectories (phases only for pooled codes).
    pub code_cosine: f64,
    pub sequences: usize,
    pub triples: usize,
}

/// Code trajectory of a frame sequence, as the vectors the curvature term
/// sees.
pub fn code_trajectory(seq: &[Tensor], params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    seq.iter()
        .map(|f| Ok(model::encode(f, params, cfg)?.curvature_vector(cfg.curvature_phase_only)))
        .collect()
}

/// Averages over every adjacent triple of every sequence, in pixels and in
/// code space.
pub fn measure_curvature(seqs: &[Vec<Tensor>], params: &ModelParams, cfg: &ModelConfig) -> Result<CurvatureReport> {
    if seqs.is_empty() {
        return Err(Error::precondition("measure_curvature", "no sequences"));
    }
    let (mut input, mut code, mut triples) = (0.0, 0.0, 0usize);
    for seq in seqs {
        let n = seq.len().saturating_sub(2) as f64;
        input += mean_cosine(seq, cfg.eps_curv)? * n;
        code += mean_cosine(&code_trajectory(seq, params, cfg)?, cfg.eps_curv)? * n;
        triples += seq.len() - 2;
    }
    Ok(CurvatureReport {
        input_cosine: input / triples as f64,
        code_cosine: code / triples as f64,
        sequences: seqs.len(),
        triples,
    })
}

/// Coefficient of determination of a per-coordinate straight-line fit
/// against time, pooled over coordinates: `1 − ΣSS_res / ΣSS_tot`. A
/// trajectory with no variance at all counts as perfectly fit.
pub fn linear_fit_r2(traj: &[Tensor]) -> Result<f64> {
    if traj.len() < 3 {
        return Err(Error::precondition("linear_fit_r2", "need at least 3 time steps"));
    }
    let d = traj[0].len();
    if traj.iter().any(|t| t.len() != d) {
        return Err(Error::shape("linear_fit_r2", "time steps differ in length"));
    }
    let n = traj.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let stt: f64 = (0..traj.len()).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let (mut res, mut tot) = (0.0, 0.0);
    for j in 0..d {
        let y: Vec<f64> = traj.iter().map(|t| t.data()[j]).collect();
        let y_mean = y.iter().sum::<f64>() / n;
        let sty: f64 = y.iter().enumerate().map(|(t, v)| (t as f64 - t_mean) * (v - y_mean)).sum();
        let slope = sty / stt;
        for (t, v) in y.iter().enumerate() {
            let fit = y_mean + slope * (t as f64 - t_mean);
            res += (v - fit).powi(2);
            tot += (v - y_mean).powi(2);
        }
    }
    Ok(if tot > 0.0 { 1.0 - res / tot } else { 1.0 })
}

/// R² of the phase trajectory of a frame sequence.
pub fn phase_r2(seq: &[Tensor], params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    if !cfg.is_pooled() {
        return Err(Error::precondition("phase_r2", format!("{} has no phases", cfg.arch)));
    }
    let phases: Vec<Tensor> = seq
        .iter()
        .map(|f| match model::encode(f, params, cfg)? {
            Encoding::Pooled(c) => Ok(c.p),
            Encoding::Flat(_) => unreachable!("pooled model"),
        })
        .collect::<Result<_>>()?;
    linear_fit_r2(&phases)
}

// ---------------------------------------------------------------------------
// Held-out prediction error

/// Mean prediction term `½‖x̂ − x^{t+1}‖²` over triplets. With a latent
/// correction, `δ` is inferred against each target first.
pub fn prediction_error(
    triplets: &[FrameTriplet],
    params: &ModelParams,
    cfg: &ModelConfig,
    delta: Option<&DeltaConfig>,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::precondition("prediction_error", "no triplets"));
    }
    let mut total = 0.0;
    for t in triplets {
        total += match delta {
            Some(d) => uncertainty::infer_delta(t, params, cfg, d)?.final_error(),
            None => model::loss_eq1(t, params, cfg)?.prediction,
        };
    }
    Ok(total / triplets.len() as f64)
}

// ---------------------------------------------------------------------------
// Filter tiles

/// Gap between tiles inside a group and between groups.
pub const TILE_GAP: usize = 1;
pub const GROUP_GAP: usize = 3;

/// Placement of `n` square tiles of side `side`, `group` tiles to a group,
/// `groups_per_row` groups to a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterLayout {
    pub tiles: usize,
    pub side: usize,
    pub group: usize,
    pub groups_per_row: usize,
    pub rows: usize,
    pub width: usize,
    pub height: usize,
}

impl FilterLayout {
    pub fn new(tiles: usize, side: usize, group: usize, groups_per_row: usize) -> Result<Self> {
        if tiles == 0 || side == 0 || group == 0 || groups_per_row == 0 {
            return Err(Error::precondition("filter_layout", "empty layout"));
        }
        let groups = tiles.div_ceil(group);
        let rows = groups.div_ceil(groups_per_row);
        let cols_groups = groups.min(groups_per_row);
        let group_width = group * side + (group - 1) * TILE_GAP;
        let width = cols_groups * group_width + (cols_groups - 1) * GROUP_GAP;
        let height = rows * side + (rows - 1) * TILE_GAP;
        Ok(FilterLayout {
            tiles,
            side,
            group,
            groups_per_row,
            rows,
            width,
            height,
        })
    }

    /// Top-left corner `(row, col)` in pixels of tile `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        let (g, k) = (i / self.group, i % self.group);
        let (row, gcol) = (g / self.groups_per_row, g % self.groups_per_row);
        let group_width = self.group * self.side + (self.group - 1) * TILE_GAP;
        (
            row * (self.side + TILE_GAP),
            gcol * (group_width + GROUP_GAP) + k * (self.side + TILE_GAP),
        )
    }
}

/// Maps a tile to [0, 1] by its own range; a constant tile becomes
/// mid-gray.
pub fn normalize_tile(t: &Tensor) -> Tensor {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        t.map(|_| 0.5)
    }
}

/// Tiles square `[k, k]` filters onto a black `[1, H, W]` canvas.
pub fn tile_filters(tiles: &[Tensor], group: usize, groups_per_row: usize) -> Result<Tensor> {
    let side = tiles
        .first()
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::precondition("tile_filters", "no filters"))?;
    if tiles.iter().any(|t| t.shape() != [side, side]) {
        return Err(Error::shape("tile_filters", "filters must be square and equal-sized"));
    }
    let layout = FilterLayout::new(tiles.len(), side, group, groups_per_row)?;
    let mut canvas = Tensor::zeros(&[1, layout.height, layout.width]);
    for (i, t) in tiles.iter().enumerate() {
        let (r0, c0) = layout.origin(i);
        let n = normalize_tile(t);
        for r in 0..side {
            for c in 0..side {
                canvas.data_mut()[(r0 + r) * layout.width + c0 + c] = n.data()[r * side + c];
            }
        }
    }
    Ok(canvas)
}

/// The 2-D kernel slices of a `[C_out, C_in, k, k]` weight, ordered by the
/// feature map they belong to: output channel in the encoder, input channel
/// in the decoder (which reads the pooled features).
pub fn kernel_slices(w: &Tensor, by_input: bool) -> Result<Vec<Tensor>> {
    let [co, ci, kh, kw] = w.shape() else {
        return Err(Error::shape("kernel_slices", format!("expected a rank-4 kernel, got {:?}", w.shape())));
    };
    let (co, ci, kh, kw) = (*co, *ci, *kh, *kw);
    let slice = |o: usize, i: usize| {
        let start = (o * ci + i) * kh * kw;
        Tensor::new(vec![kh, kw], w.data()[start..start + kh * kw].to_vec())
    };
    let mut out = Vec::with_capacity(co * ci);
    if by_input {
        for i in 0..ci {
            for o in 0..co {
                out.push(slice(o, i)?);
            }
        }
    } else {
        for o in 0..co {
            for i in 0..ci {
                out.push(slice(o, i)?);
            }
        }
    }
    Ok(out)
}

/// Groups per row of the filter images.
pub const GROUPS_PER_ROW: usize = 4;

/// One tiled image per convolution layer, named `enc_<i>` / `dec_<i>`.
/// Filters are grouped by the feature extent of the pool group (4 when the
/// model does not pool).
pub fn filter_images(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<(String, Tensor)>> {
    let group = cfg.pool.map(|p| p.group[0]).filter(|&g| g > 1).unwrap_or(4);
    let mut out = Vec::new();
    for (part, layers) in [("enc", &cfg.encoder), ("dec", &cfg.decoder)] {
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Conv { kernel, .. } = layer {
                if *kernel < 2 {
                    continue;
                }
                let w = params.require(&format!("{part}.{i}.weight"))?;
                let tiles = kernel_slices(w, part == "dec")?;
                out.push((format!("{part}_{i}"), tile_filters(&tiles, group, GROUPS_PER_ROW)?));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::precondition(
            "viz",
            format!("{} has no convolution layers with spatial kernels to draw", cfg.arch),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Probe

/// Infers `δ` for every labelled triplet and probes the skip label.
pub fn probe_deltas(
    triplets: &[FrameTriplet],
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
    seed: u64,
) -> Result<probe::ProbeReport> {
    let mut deltas = Vec::with_capacity(triplets.len());
    let mut labels = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let s = t
            .skip
            .ok_or_else(|| Error::precondition("probe", format!("triplet {i} has no skip label")))?;
        deltas.push(uncertainty::infer_delta(t, params, cfg, dcfg)?.delta);
        labels.push(s);
    }
    probe::probe_report(&deltas, &labels, seed)
}

#[cfg(test)]
mod tests;
