//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// Central-difference step used at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold for the max relative error at 64-bit precision.
pub const TOLERANCE_F64: f64 = 1e-4;
/// Pass threshold at 32-bit precision (step 1e-2).
pub const TOLERANCE_F32: f64 = 1e-2;

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct WorstElement {
    pub trial: usize,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstElement>,
    /// Samples discarded for lying within the kink margin.
    pub resampled: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub floor: f64,
    /// Minimum distance of every kink (relu zero, clamp bound, ...) from the
    /// sampled point; closer samples are redrawn.
    pub kink_margin: f64,
    /// Check only this many randomly chosen elements per input tensor.
    pub elements_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            trials: 100,
            seed: 0,
            step: FD_STEP,
            floor: REL_ERROR_FLOOR,
            kink_margin: 1e-3,
            elements_per_input: None,
        }
    }
}

const MAX_RESAMPLES: usize = 1000;

/// Builds the graph for one sample and returns a scalar loss. Non-scalar
/// outputs are contracted against a fixed random projection.
fn scalar_loss<B>(
    build: &B,
    inputs: &[Tensor],
    projection: Option<&Tensor>,
) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let loss = match projection {
        Some(r) => {
            let r = g.constant(r.clone());
            let p = g.mul(out, r)?;
            g.sum(p)?
        }
        None => out,
    };
    Ok((g, ids, loss))
}

/// Compares analytic gradients of `build` against central differences over
/// `config.trials` random instances drawn by `sample`. Deterministic given
/// the seed.
pub fn grad_check<B, S>(
    op: &str,
    build: B,
    mut sample: S,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    S: FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
{
    if config.trials == 0 {
        return Err(Error::Contract("grad_check needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        op: op.to_string(),
        trials: config.trials,
        max_rel_error: 0.0,
        worst: None,
        resampled: 0,
    };

    for trial in 0..config.trials {
        let (inputs, projection, graph, ids, loss) = {
            let mut attempts = 0;
            loop {
                let inputs = sample(&mut rng);
                let (probe, _, out) = scalar_loss(&build, &inputs, None)?;
                let projection = (probe.value(out).len() != 1).then(|| {
                    Tensor::from_fn(probe.value(out).shape(), |_| rng.gen_range(-1.0..1.0))
                });
                let (g, ids, loss) = scalar_loss(&build, &inputs, projection.as_ref())?;
                if g.min_kink_distance() >= config.kink_margin {
                    break (inputs, projection, g, ids, loss);
                }
                attempts += 1;
                report.resampled += 1;
                if attempts >= MAX_RESAMPLES {
                    return Err(Error::Contract(format!(
                        "{op}: could not draw a sample away from kinks"
                    )));
                }
            }
        };
        let grads = graph.backward(loss)?;

        for (input_idx, (tensor, id)) in inputs.iter().zip(&ids).enumerate() {
            let analytic = grads.get_or_zeros(*id, tensor);
            let indices: Vec<usize> = match config.elements_per_input {
                Some(k) if k < tensor.len() => {
                    let mut v = sample_indices(&mut rng, tensor.len(), k).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..tensor.len()).collect(),
            };
            for index in indices {
                let eval = |delta: f64| -> Result<f64> {
                    let mut perturbed = inputs.clone();
                    perturbed[input_idx].data_mut()[index] += delta;
                    let (g, _, l) = scalar_loss(&build, &perturbed, projection.as_ref())?;
                    Ok(g.value(l).item())
                };
                let numeric = (eval(config.step)? - eval(-config.step)?) / (2.0 * config.step);
                let a = analytic.data()[index];
                let err = rel_error(a, numeric, config.floor);
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some(WorstElement {
                        trial,
                        input: input_idx,
                        index,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}
