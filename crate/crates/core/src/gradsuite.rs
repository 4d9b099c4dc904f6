//! The registry of differentiable operations and their finite-difference
//! checks.
//!
//! Every entry draws small random instances and compares the analytic
//! gradient of every input against central differences. Composite entries
//! (`loss_eq1`, `corrected_code`) cycle through several model or mode
//! variants and report the worst case over all of them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, CodeNode, DeepSize, ModelConfig, ModelParams, ShallowSize};
use crate::phase_pool::{phase_pool_node, unpool_node, PoolSpec};
use crate::tensor::Tensor;
use crate::uncertainty::{corrected_code_node, BaseMode, DeltaConfig};

pub const OPS: [&str; 9] = [
    "conv2d",
    "fc",
    "relu",
    "soft_max_pool",
    "soft_argmax_pool",
    "unpool",
    "curvature_penalty",
    "loss_eq1",
    "corrected_code",
];

pub const DEFAULT_CASES: usize = 100;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn config(cases: usize, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        trials: cases,
        seed,
        ..Default::default()
    }
}

/// Folds reports of the variants of one entry into one.
fn merge(op: &str, reports: Vec<GradCheckReport>) -> GradCheckReport {
    let mut out = GradCheckReport {
        op: op.to_string(),
        trials: 0,
        max_rel_error: 0.0,
        worst: None,
        resampled: 0,
    };
    for r in reports {
        out.trials += r.trials;
        out.resampled += r.resampled;
        if out.worst.is_none() || r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst = r.worst;
        }
    }
    out
}

/// Splits `cases` over `variants`, rounding up.
fn per_variant(cases: usize, variants: usize) -> usize {
    cases.div_ceil(variants).max(1)
}

fn pool_spec() -> PoolSpec {
    PoolSpec::new([2, 2, 3], 2.0).with_stride([2, 2, 3])
}

/// Checks one registered operation over `cases` random instances.
pub fn check_op(name: &str, cases: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = config(cases, seed);
    match name {
        "conv2d" => grad_check(
            name,
            |g, x| g.conv2d(x[0], x[1], 1),
            |rng| vec![uniform(&[2, 5, 4], -1.0, 1.0, rng), uniform(&[3, 2, 3, 3], -1.0, 1.0, rng)],
            &cfg,
        ),
        "fc" => grad_check(
            name,
            |g, x| g.fc(x[0], x[1], x[2]),
            |rng| {
                vec![
                    uniform(&[6], -1.0, 1.0, rng),
                    uniform(&[4, 6], -1.0, 1.0, rng),
                    uniform(&[4], -1.0, 1.0, rng),
                ]
            },
            &cfg,
        ),
        "relu" => grad_check(name, |g, x| g.relu(x[0]), |rng| vec![uniform(&[12], -1.0, 1.0, rng)], &cfg),
        "soft_max_pool" | "soft_argmax_pool" => {
            let spec = pool_spec();
            let want_m = name == "soft_max_pool";
            grad_check(
                name,
                |g, x| {
                    let (m, p) = phase_pool_node(g, x[0], &spec)?;
                    Ok(if want_m { m } else { p })
                },
                |rng| vec![uniform(&[4, 4, 3], 0.0, 2.0, rng)],
                &cfg,
            )
        }
        "unpool" => {
            let spec = pool_spec();
            grad_check(
                name,
                |g, x| unpool_node(g, x[0], x[1], &spec, [4, 4, 3]),
                |rng| vec![uniform(&[2, 2, 1], 0.0, 2.0, rng), uniform(&[3, 2, 2, 1], -0.95, 0.95, rng)],
                &cfg,
            )
        }
        "curvature_penalty" => grad_check(
            name,
            |g, x| model::curvature_node(g, model::config::DEFAULT_EPS_CURV, x[0], x[1], x[2]),
            |rng| (0..3).map(|_| uniform(&[5], -1.0, 1.0, rng)).collect(),
            &cfg,
        ),
        "loss_eq1" => check_loss_eq1(cases, seed),
        "corrected_code" => check_corrected_code(cases, seed),
        other => Err(Error::config(
            "scope",
            format!("unknown op `{other}` (known: all, {})", OPS.join(", ")),
        )),
    }
}

/// Small instances of all five architectures.
pub fn small_models() -> Result<Vec<ModelConfig>> {
    let shallow = ShallowSize {
        input_shape: [1, 6, 6],
        filters: 4,
        kernel: 3,
        group: [2, 3, 3],
        beta: 2.0,
    };
    let deep = DeepSize {
        input_shape: [1, 7, 7],
        channels: [2, 2],
        kernel: 3,
        code_dim: 6,
        pooled_features: 2,
        pooled_grid: 2,
        beta: 2.0,
    };
    Architecture::ALL
        .into_iter()
        .map(|arch| match arch {
            Architecture::Shallow1 | Architecture::Shallow2 => ModelConfig::shallow(arch, shallow),
            _ => ModelConfig::deep(arch, deep),
        })
        .collect()
}

/// Full loss gradient with respect to every weight and all three frames.
fn check_loss_eq1(cases: usize, seed: u64) -> Result<GradCheckReport> {
    let models = small_models()?;
    let trials = per_variant(cases, models.len());
    let mut reports = Vec::new();
    for (k, cfg) in models.iter().enumerate() {
        let template = ModelParams::init(cfg, 0)?;
        let n = template.len();
        let shape = cfg.input_shape;
        reports.push(grad_check(
            "loss_eq1",
            |g, ids| {
                let bound = template.bind_nodes(ids[..n].to_vec());
                Ok(model::loss_graph(g, cfg, &bound, [ids[n], ids[n + 1], ids[n + 2]])?.total)
            },
            |rng| {
                let mut inputs: Vec<Tensor> = match ModelParams::init(cfg, rng.gen()) {
                    Ok(p) => p.tensors().cloned().collect(),
                    Err(_) => unreachable!("validated above"),
                };
                // Zero biases would park relus on their kink.
                for t in inputs.iter_mut().filter(|t| t.rank() == 1) {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
                }
                inputs.extend((0..3).map(|_| uniform(&shape, 0.05, 0.95, rng)));
                inputs
            },
            &GradCheckConfig {
                trials,
                seed: seed.wrapping_add(k as u64),
                elements_per_input: Some(4),
                ..Default::default()
            },
        )?);
    }
    Ok(merge("loss_eq1", reports))
}

/// The corrected code with respect to both codes, `W1` and `δ`, for flat
/// and pooled codes in both base modes.
fn check_corrected_code(cases: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::preset(Architecture::Deep2)?;
    let variants = [
        (false, true, BaseMode::AsWritten),
        (false, true, BaseMode::ExtrapolationBase),
        (true, true, BaseMode::AsWritten),
        (true, true, BaseMode::ExtrapolationBase),
        (true, false, BaseMode::AsWritten),
        (true, false, BaseMode::ExtrapolationBase),
    ];
    let trials = per_variant(cases, variants.len());
    let (groups, phase_dim, dim) = ([2usize, 2, 2], 2usize, 2usize);
    let ng: usize = groups.iter().product();
    let mut reports = Vec::new();
    for (k, &(pooled, phase_only, base)) in variants.iter().enumerate() {
        let dcfg = DeltaConfig {
            dim,
            phase_only,
            base,
            ..Default::default()
        };
        let rows = match (pooled, phase_only) {
            (false, _) => 16,
            (true, true) => ng * phase_dim,
            (true, false) => ng * (1 + phase_dim),
        };
        let m_shape = groups.to_vec();
        let p_shape = vec![phase_dim, groups[0], groups[1], groups[2]];
        reports.push(grad_check(
            "corrected_code",
            |g: &mut Graph, x: &[NodeId]| {
                let (t, tm1, w1, d) = if pooled {
                    (
                        CodeNode::Pooled { m: x[0], p: x[1] },
                        CodeNode::Pooled { m: x[2], p: x[3] },
                        x[4],
                        x[5],
                    )
                } else {
                    (CodeNode::Flat(x[0]), CodeNode::Flat(x[1]), x[2], x[3])
                };
                match corrected_code_node(g, &cfg, &dcfg, &t, &tm1, w1, d)? {
                    CodeNode::Flat(z) => Ok(z),
                    CodeNode::Pooled { m, p } => g.concat(&[m, p]),
                }
            },
            |rng| {
                let mut v = if pooled {
                    vec![
                        uniform(&m_shape, 0.0, 2.0, rng),
                        uniform(&p_shape, -0.6, 0.6, rng),
                        uniform(&m_shape, 0.0, 2.0, rng),
                        uniform(&p_shape, -0.6, 0.6, rng),
                    ]
                } else {
                    vec![uniform(&[16], -1.0, 1.0, rng), uniform(&[16], -1.0, 1.0, rng)]
                };
                v.push(uniform(&[rows, dim], -0.5, 0.5, rng));
                v.push(uniform(&[dim], -0.5, 0.5, rng));
                v
            },
            &config(trials, seed.wrapping_add(k as u64)),
        )?);
    }
    Ok(merge("corrected_code", reports))
}

/// The operations named by `scope`: `all` or one name from [`OPS`].
pub fn selected(scope: &str) -> Result<Vec<&'static str>> {
    if scope == "all" {
        return Ok(OPS.to_vec());
    }
    OPS.iter().find(|op| **op == scope).map(|op| vec![*op]).ok_or_else(|| {
        Error::config(
            "scope",
            format!("unknown op `{scope}` (known: all, {})", OPS.join(", ")),
        )
    })
}

pub fn run_suite(scope: &str, cases: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let ops = selected(scope)?;
    if cases == 0 {
        return Err(Error::config("cases", "must be positive"));
    }
    ops.into_iter().map(|op| check_op(op, cases, seed)).collect()
}
