//! A low-dimensional latent correction `δ` for predictions the frames alone
//! cannot determine.
//!
//! The corrected code is
//!
//! ```text
//! ẑ_δ = b + (W1 δ) ⊙ (a0 z^t + a1 z^{t−1})
//! ```
//!
//! with base `b = z^t` ([`BaseMode::AsWritten`]) or `b` equal to the
//! extrapolated code ([`BaseMode::ExtrapolationBase`]). For each training
//! triplet `δ` starts at zero and takes `k` gradient steps on the prediction
//! error with the network frozen; the network is then trained on the loss
//! at the final `δ`. For phase-pooled codes the correction can be confined
//! to the phases, leaving the magnitude prediction alone.

pub mod probe;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::datagen::FrameTriplet;
use crate::error::{Error, Result};
use crate::model::{
    self, check_frame, encode, encode_frames, frame_nodes, loss_from_codes, Bound, CodeNode, CodeShape, Encoding,
    LossBreakdown, LossNodes, ModelConfig, ModelParams, Prediction,
};
use crate::optim::{mean_gradients, Sgd};
use crate::tensor::{Precision, Tensor};

pub use probe::{probe_report, probe_skip_variable, LogisticProbe, ProbeReport};

/// Name of the correction matrix inside [`ModelParams`].
pub const W1_NAME: &str = "delta.w1";
/// `dim(δ)` may be at most this fraction of the code dimension.
pub const MAX_DIM_RATIO: usize = 8;
/// Step halvings tried before a backtracking step gives up and stays put.
pub const MAX_HALVINGS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseMode {
    /// `ẑ_δ = z^t + …`: at `δ = 0` the prediction is the current code.
    #[default]
    AsWritten,
    /// `ẑ_δ = ẑ + …` with `ẑ` the extrapolated code: at `δ = 0` the
    /// prediction is the uncorrected one.
    ExtrapolationBase,
}

impl std::str::FromStr for BaseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as-written" => Ok(BaseMode::AsWritten),
            "extrapolation-base" => Ok(BaseMode::ExtrapolationBase),
            other => Err(Error::config("base", format!("unknown base mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaConfig {
    pub dim: usize,
    /// Inner gradient steps.
    pub k: usize,
    /// Inner step size (the starting size when backtracking).
    pub alpha: f64,
    /// Correct only the phases of a phase-pooled code.
    pub phase_only: bool,
    pub base: BaseMode,
    /// Halve the step until the error does not increase.
    pub backtrack: bool,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig {
            dim: 3,
            k: 5,
            alpha: 0.1,
            phase_only: true,
            base: BaseMode::AsWritten,
            backtrack: true,
        }
    }
}

impl DeltaConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let code = cfg.validate()?.code;
        if self.dim == 0 {
            return Err(Error::config("delta.dim", "must be positive"));
        }
        if self.dim * MAX_DIM_RATIO > code.dim() {
            return Err(Error::config(
                "delta.dim",
                format!(
                    "{} is too large for a {}-dimensional code (at most 1/{MAX_DIM_RATIO})",
                    self.dim,
                    code.dim()
                ),
            ));
        }
        if self.k == 0 {
            return Err(Error::config("delta.k", "need at least one inner step"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("delta.alpha", "must be finite and non-negative"));
        }
        if cfg.prediction == Prediction::Concat {
            return Err(Error::config(
                "delta",
                "the correction needs an extrapolating predictor, not a concatenated pair",
            ));
        }
        Ok(())
    }

    /// Length of the code sub-vector the correction acts on.
    pub fn corrected_len(&self, cfg: &ModelConfig) -> Result<usize> {
        Ok(match cfg.shapes()?.code {
            CodeShape::Flat(n) => n,
            c @ CodeShape::Pooled { .. } if self.phase_only => c.phase_len(),
            c => c.dim(),
        })
    }

    /// `W1` maps `δ` into the corrected sub-vector: `[corrected_len, dim]`.
    pub fn w1_shape(&self, cfg: &ModelConfig) -> Result<[usize; 2]> {
        Ok([self.corrected_len(cfg)?, self.dim])
    }
}

/// Adds `W1`, uniform in `±1/sqrt(dim δ)`, to `params`.
pub fn init_w1(params: &mut ModelParams, cfg: &ModelConfig, dcfg: &DeltaConfig, seed: u64) -> Result<()> {
    dcfg.validate(cfg)?;
    let shape = dcfg.w1_shape(cfg)?;
    let bound = 1.0 / (dcfg.dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.insert(W1_NAME, Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound)));
    Ok(())
}

/// The corrected code for plain vectors.
pub fn corrected_code(
    z_t: &Tensor,
    z_tm1: &Tensor,
    delta: &Tensor,
    w1: &Tensor,
    a: [f64; 2],
    base: BaseMode,
) -> Result<Tensor> {
    let n = z_t.len();
    if z_tm1.len() != n {
        return Err(Error::shape("corrected_code", format!("code axis: {n} vs {}", z_tm1.len())));
    }
    if w1.shape() != [n, delta.len()] {
        return Err(Error::shape(
            "corrected_code",
            format!("W1 is {:?}, need [{n}, {}]", w1.shape(), delta.len()),
        ));
    }
    let out = (0..n)
        .map(|i| {
            let e = a[0] * z_t.data()[i] + a[1] * z_tm1.data()[i];
            let w1d: f64 = (0..delta.len()).map(|j| w1.data()[i * delta.len() + j] * delta.data()[j]).sum();
            let b = match base {
                BaseMode::AsWritten => z_t.data()[i],
                BaseMode::ExtrapolationBase => e,
            };
            b + w1d * e
        })
        .collect();
    Tensor::new(z_t.shape().to_vec(), out)
}

/// `b + (W1 δ) ⊙ e` on flat nodes.
fn correct_flat(
    g: &mut Graph,
    base: BaseMode,
    a: [f64; 2],
    t: NodeId,
    tm1: NodeId,
    w1: NodeId,
    delta: NodeId,
) -> Result<NodeId> {
    let e = g.lincomb(&[(a[0], t), (a[1], tm1)])?;
    let w1d = g.matvec(w1, delta)?;
    let c = g.mul(w1d, e)?;
    let b = match base {
        BaseMode::AsWritten => t,
        BaseMode::ExtrapolationBase => e,
    };
    g.add(b, c)
}

/// The corrected prediction for codes on a graph.
pub fn corrected_code_node(
    g: &mut Graph,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
    z_t: &CodeNode,
    z_tm1: &CodeNode,
    w1: NodeId,
    delta: NodeId,
) -> Result<CodeNode> {
    match (*z_t, *z_tm1) {
        (CodeNode::Flat(t), CodeNode::Flat(tm1)) => {
            Ok(CodeNode::Flat(correct_flat(g, dcfg.base, cfg.a, t, tm1, w1, delta)?))
        }
        (CodeNode::Pooled { m: mt, p: pt }, CodeNode::Pooled { m: mtm1, p: ptm1 }) => {
            let p_shape = g.value(pt).shape().to_vec();
            let m_shape = g.value(mt).shape().to_vec();
            if dcfg.phase_only {
                let m = g.lincomb(&[(0.5, mt), (0.5, mtm1)])?;
                let (ft, ftm1) = (g.flatten(pt)?, g.flatten(ptm1)?);
                let p = correct_flat(g, dcfg.base, cfg.a, ft, ftm1, w1, delta)?;
                let p = g.reshape(p, &p_shape)?;
                let p = g.clamp(p, -1.0, 1.0)?;
                Ok(CodeNode::Pooled { m, p })
            } else {
                let t = g.concat(&[mt, pt])?;
                let tm1 = g.concat(&[mtm1, ptm1])?;
                let z = correct_flat(g, dcfg.base, cfg.a, t, tm1, w1, delta)?;
                let nm: usize = m_shape.iter().product();
                let np: usize = p_shape.iter().product();
                let m = g.slice(z, 0, nm)?;
                let m = g.reshape(m, &m_shape)?;
                let p = g.slice(z, nm, np)?;
                let p = g.reshape(p, &p_shape)?;
                let p = g.clamp(p, -1.0, 1.0)?;
                Ok(CodeNode::Pooled { m, p })
            }
        }
        _ => Err(Error::Contract("codes of different kinds".into())),
    }
}

/// The loss with the corrected prediction at `delta`.
pub fn delta_loss_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
    bound: &Bound,
    frames: [NodeId; 3],
    delta: NodeId,
) -> Result<LossNodes> {
    let codes = encode_frames(g, cfg, bound, frames)?;
    let w1 = bound.id(W1_NAME)?;
    let predicted = corrected_code_node(g, cfg, dcfg, &codes[1], &codes[0], w1, delta)?;
    loss_from_codes(g, cfg, bound, codes, predicted, frames[2])
}

/// Result of the inner loop for one triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaState {
    /// Final `δ_k`.
    pub delta: Vec<f64>,
    /// `δ_0 … δ_k`.
    pub path: Vec<Vec<f64>>,
    /// Prediction error `½‖x̂ − x‖²` at each of `δ_0 … δ_k`.
    pub trace: Vec<f64>,
}

impl DeltaState {
    pub fn final_error(&self) -> f64 {
        *self.trace.last().expect("trace holds at least δ_0")
    }
}

/// Frozen-network evaluation of the prediction error as a function of `δ`.
struct InnerProblem<'a> {
    cfg: &'a ModelConfig,
    dcfg: &'a DeltaConfig,
    params: &'a ModelParams,
    z_t: &'a Encoding,
    z_tm1: &'a Encoding,
    target: &'a Tensor,
}

impl InnerProblem<'_> {
    /// Error at `delta` and, when `with_grad`, its gradient.
    fn eval(&self, delta: &Tensor, with_grad: bool) -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let t = self.z_t.to_node(&mut g);
        let tm1 = self.z_tm1.to_node(&mut g);
        let d = g.param(delta.clone());
        let w1 = bound.id(W1_NAME)?;
        let code = corrected_code_node(&mut g, self.cfg, self.dcfg, &t, &tm1, w1, d)?;
        let frame = model::decode_node(&mut g, self.cfg, &bound, &code)?;
        let x = g.constant(self.target.clone());
        let err = model::half_squared_error(&mut g, frame, x)?;
        let value = g.value(err).item();
        if !with_grad {
            return Ok((value, None));
        }
        let grad = g.backward(err)?.get_or_zeros(d, delta);
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                op: "infer_delta",
                what: format!("δ gradient at δ = {:?}", delta.data()),
            });
        }
        Ok((value, Some(grad)))
    }
}

/// Runs the inner loop from `δ_0 = 0` given the two context codes.
pub fn infer_delta_from_codes(
    z_tm1: &Encoding,
    z_t: &Encoding,
    target: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
) -> Result<DeltaState> {
    let problem = InnerProblem {
        cfg,
        dcfg,
        params,
        z_t,
        z_tm1,
        target,
    };
    let mut delta = Tensor::zeros(&[dcfg.dim]);
    let (mut err, mut grad) = problem.eval(&delta, true)?;
    let mut path = vec![delta.data().to_vec()];
    let mut trace = vec![err];
    for _ in 0..dcfg.k {
        let g = grad.take().expect("gradient of the accepted point");
        let step = |alpha: f64| delta.zip_map(&g, |d, gi| d - alpha * gi);
        if dcfg.backtrack {
            let mut alpha = dcfg.alpha;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand = step(alpha)?;
                let (e, gr) = problem.eval(&cand, true)?;
                if e <= err {
                    accepted = Some((cand, e, gr));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((cand, e, gr)) => {
                    delta = cand;
                    err = e;
                    grad = gr;
                }
                None => grad = Some(g),
            }
        } else {
            delta = step(dcfg.alpha)?;
            let (e, gr) = problem.eval(&delta, true)?;
            err = e;
            grad = gr;
        }
        if !err.is_finite() {
            return Err(Error::NonFinite {
                op: "infer_delta",
                what: "prediction error".into(),
            });
        }
        path.push(delta.data().to_vec());
        trace.push(err);
    }
    Ok(DeltaState {
        delta: delta.into_data(),
        path,
        trace,
    })
}

/// Encodes the two context frames once and runs the inner loop against
/// the third.
pub fn infer_delta(
    triplet: &FrameTriplet,
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
) -> Result<DeltaState> {
    check_frame(cfg, &triplet.frames[2])?;
    let z_tm1 = encode(&triplet.frames[0], params, cfg)?;
    let z_t = encode(&triplet.frames[1], params, cfg)?;
    infer_delta_from_codes(&z_tm1, &z_t, &triplet.frames[2], params, cfg, dcfg)
}

/// Decodes the corrected prediction at a given `δ`.
pub fn predict_with_delta(
    z_tm1: &Encoding,
    z_t: &Encoding,
    delta: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let t = z_t.to_node(&mut g);
    let tm1 = z_tm1.to_node(&mut g);
    let d = g.constant(Tensor::from_vec(delta.to_vec()));
    let w1 = bound.id(W1_NAME)?;
    let code = corrected_code_node(&mut g, cfg, dcfg, &t, &tm1, w1, d)?;
    let frame = model::decode_node(&mut g, cfg, &bound, &code)?;
    Ok(g.value(frame).clone())
}

/// Loss at a fixed `δ` and its gradient with respect to every parameter
/// (including `W1`).
pub fn loss_and_grads_at(
    triplet: &FrameTriplet,
    delta: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
    precision: Precision,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::with_precision(precision);
    let bound = params.bind(&mut g, true);
    let frames = frame_nodes(&mut g, cfg, triplet)?;
    let d = g.constant(Tensor::from_vec(delta.to_vec()));
    let nodes = delta_loss_graph(&mut g, cfg, dcfg, &bound, frames, d)?;
    let grads = g.backward(nodes.total)?;
    let out = bound
        .ids
        .iter()
        .zip(params.tensors())
        .map(|(id, t)| grads.get_or_zeros(*id, t))
        .collect();
    Ok((nodes.breakdown(&g, cfg.lambda), out))
}

/// The min-over-δ loss: the inner loop's `δ_k` stands in for the minimum.
pub fn loss_eq7(
    triplet: &FrameTriplet,
    params: &ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
) -> Result<(LossBreakdown, DeltaState)> {
    let state = infer_delta(triplet, params, cfg, dcfg)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let frames = frame_nodes(&mut g, cfg, triplet)?;
    let d = g.constant(Tensor::from_vec(state.delta.clone()));
    let nodes = delta_loss_graph(&mut g, cfg, dcfg, &bound, frames, d)?;
    Ok((nodes.breakdown(&g, cfg.lambda), state))
}

/// One minibatch step: infer `δ_k` per sample, then one SGD step on the
/// batch-mean loss at those `δ`s. Returns the per-sample states and the
/// batch-mean loss before the step.
pub fn train_step_uncertain(
    batch: &[&FrameTriplet],
    params: &mut ModelParams,
    cfg: &ModelConfig,
    dcfg: &DeltaConfig,
    opt: &mut Sgd,
    precision: Precision,
) -> Result<(Vec<DeltaState>, LossBreakdown)> {
    let mut states = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    let mut mean = LossBreakdown {
        prediction: 0.0,
        cosine: 0.0,
        curvature: 0.0,
        total: 0.0,
    };
    for t in batch {
        let state = infer_delta(t, params, cfg, dcfg)?;
        let (l, g) = loss_and_grads_at(t, &state.delta, params, cfg, dcfg, precision)?;
        mean.prediction += l.prediction;
        mean.cosine += l.cosine;
        mean.curvature += l.curvature;
        mean.total += l.total;
        grads.push(g);
        states.push(state);
    }
    let n = batch.len() as f64;
    mean.prediction /= n;
    mean.cosine /= n;
    mean.curvature /= n;
    mean.total /= n;
    let g = mean_gradients(&grads)?;
    if !g.iter().all(Tensor::all_finite) {
        return Err(Error::NonFinite {
            op: "train_step_uncertain",
            what: "parameter gradient".into(),
        });
    }
    opt.step(params, &g, precision)?;
    Ok((states, mean))
}

/// Training-set `δ` samples for test-time resampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaDistribution {
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Row-major `dim × dim` sample covariance (divisor `n − 1`, zero for a
    /// single sample).
    pub covariance: Vec<f64>,
}

impl DeltaDistribution {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let d = samples
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::precondition("delta_distribution", "no δ samples"))?;
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("delta_distribution", "samples differ in dimension"));
        }
        let n = samples.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        let mut covariance = vec![0.0; d * d];
        if samples.len() > 1 {
            for s in &samples {
                for i in 0..d {
                    for j in 0..d {
                        covariance[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                    }
                }
            }
            covariance.iter_mut().for_each(|c| *c /= n - 1.0);
        }
        Ok(DeltaDistribution {
            samples,
            mean,
            covariance,
        })
    }

    pub fn from_states(states: &[DeltaState]) -> Result<Self> {
        Self::from_samples(states.iter().map(|s| s.delta.clone()).collect())
    }

    /// A stored sample drawn uniformly.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> &[f64] {
        self.samples.choose(rng).expect("non-empty by construction")
    }
}

/// Writes one row per inner step: sample, step, prediction error, δ
/// components.
pub fn write_trace_csv<W: Write>(out: W, states: &[DeltaState]) -> Result<()> {
    let dim = states.first().map_or(0, |s| s.delta.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "step".into(), "prediction_error".into()];
    header.extend((0..dim).map(|j| format!("delta_{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (i, s) in states.iter().enumerate() {
        for (step, (err, d)) in s.trace.iter().zip(&s.path).enumerate() {
            let mut row = vec![i.to_string(), step.to_string(), format!("{err:e}")];
            row.extend(d.iter().map(|v| format!("{v:e}")));
            w.write_record(&row).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
