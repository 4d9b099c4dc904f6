//! Encoder, decoder, code-space prediction and the prediction + curvature
//! loss.
//!
//! A frame `x` is encoded to a code `z = F(x)`. The code of the next frame is
//! predicted from the two previous codes and decoded back to pixels. The
//! training loss is
//!
//! ```text
//! L = ½‖G(ẑ^{t+1}) − x^{t+1}‖² − λ cos∠(z^t − z^{t−1}, z^{t+1} − z^t)
//! ```
//!
//! where the curvature cosine only sees phases when the code is
//! phase-pooled. All three frames go through the same parameter nodes, so
//! the Siamese weight sharing is structural.

pub mod config;
pub mod params;

use serde::{Deserialize, Serialize};

pub use config::{
    Architecture, CodeShape, DeepSize, Layer, ModelConfig, Prediction, ShallowSize, Shapes,
};
pub use params::{Bound, ModelParams};

use crate::autodiff::{Graph, NodeId};
use crate::datagen::FrameTriplet;
use crate::error::{Error, Result};
use crate::phase_pool::{self, Code};
use crate::tensor::{Precision, Tensor};
use params::layer_param_name;

/// A code living on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeNode {
    Flat(NodeId),
    Pooled { m: NodeId, p: NodeId },
}

/// A code as a value.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoding {
    Flat(Tensor),
    Pooled(Code),
}

impl Encoding {
    pub fn to_flat(&self) -> Tensor {
        match self {
            Encoding::Flat(t) => t.clone(),
            Encoding::Pooled(c) => c.to_flat(),
        }
    }

    /// The vector the curvature term is measured on.
    pub fn curvature_vector(&self, phase_only: bool) -> Tensor {
        match self {
            Encoding::Flat(t) => Tensor::concat_flat(&[t]),
            Encoding::Pooled(c) if phase_only => Tensor::concat_flat(&[&c.p]),
            Encoding::Pooled(c) => c.to_flat(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoding::Flat(t) => t.len(),
            Encoding::Pooled(c) => c.flat_dim(),
        }
    }

    /// Records the code as constants.
    pub fn to_node(&self, g: &mut Graph) -> CodeNode {
        match self {
            Encoding::Flat(t) => CodeNode::Flat(g.constant(t.clone())),
            Encoding::Pooled(c) => CodeNode::Pooled {
                m: g.constant(c.m.clone()),
                p: g.constant(c.p.clone()),
            },
        }
    }

    /// Reads a code node back as a value, using `cfg` for pool metadata.
    pub fn from_node(g: &Graph, node: &CodeNode, cfg: &ModelConfig) -> Result<Encoding> {
        Ok(match node {
            CodeNode::Flat(id) => Encoding::Flat(g.value(*id).clone()),
            CodeNode::Pooled { m, p } => {
                let (spec, volume) = pooled_meta(cfg)?;
                Encoding::Pooled(Code {
                    m: g.value(*m).clone(),
                    p: g.value(*p).clone(),
                    spec,
                    input_shape: volume,
                })
            }
        })
    }
}

fn pooled_meta(cfg: &ModelConfig) -> Result<(phase_pool::PoolSpec, [usize; 3])> {
    match (cfg.pool, cfg.shapes()?.code) {
        (Some(spec), CodeShape::Pooled { volume, .. }) => Ok((spec, volume)),
        _ => Err(Error::Contract(format!("{} is not a phase-pooled model", cfg.arch))),
    }
}

pub(crate) fn check_frame(cfg: &ModelConfig, frame: &Tensor) -> Result<()> {
    if frame.shape() != cfg.input_shape {
        return Err(Error::shape(
            "encode",
            format!("frame {:?}, model expects {:?}", frame.shape(), cfg.input_shape),
        ));
    }
    if let Some(v) = frame.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::precondition("encode", format!("intensity {v} outside [0, 1]")));
    }
    Ok(())
}

fn apply_layer(
    g: &mut Graph,
    bound: &Bound,
    part: &str,
    i: usize,
    layer: &Layer,
    x: NodeId,
) -> Result<NodeId> {
    match layer {
        Layer::Conv { padding, relu, .. } => {
            let w = bound.id(&layer_param_name(part, i, "weight"))?;
            let b = bound.id(&layer_param_name(part, i, "bias"))?;
            let y = g.conv2d(x, w, *padding)?;
            let y = g.add_channel_bias(y, b)?;
            if *relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        }
        Layer::Fc { relu, .. } => {
            let w = bound.id(&layer_param_name(part, i, "weight"))?;
            let b = bound.id(&layer_param_name(part, i, "bias"))?;
            let flat = g.flatten(x)?;
            let y = g.fc(flat, w, b)?;
            if *relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        }
        Layer::Reshape { shape } => g.reshape(x, shape),
        Layer::Pad { pad } => g.pad2d(x, *pad),
        Layer::PhasePool | Layer::Unpool => unreachable!("handled by caller"),
    }
}

/// Runs the encoder on a frame node.
pub fn encode_node(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, frame: NodeId) -> Result<CodeNode> {
    let mut x = frame;
    for (i, layer) in cfg.encoder.iter().enumerate() {
        if *layer == Layer::PhasePool {
            let spec = cfg
                .pool
                .ok_or_else(|| Error::config("pool", "missing pool spec"))?;
            let (m, p) = phase_pool::phase_pool_node(g, x, &spec)?;
            return Ok(CodeNode::Pooled { m, p });
        }
        x = apply_layer(g, bound, "enc", i, layer, x)?;
    }
    Ok(CodeNode::Flat(g.flatten(x)?))
}

/// Runs the decoder on a code node (for [`Prediction::Concat`] models, the
/// concatenated pair).
pub fn decode_node(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, code: &CodeNode) -> Result<NodeId> {
    let mut layers = cfg.decoder.iter().enumerate();
    let mut x = match *code {
        CodeNode::Flat(id) => id,
        CodeNode::Pooled { m, p } => {
            match layers.next() {
                Some((_, Layer::Unpool)) => {}
                _ => return Err(Error::Contract("pooled code needs an un-pooling decoder".into())),
            }
            let (spec, volume) = pooled_meta(cfg)?;
            phase_pool::unpool_node(g, m, p, &spec, volume)?
        }
    };
    for (i, layer) in layers {
        x = apply_layer(g, bound, "dec", i, layer, x)?;
    }
    Ok(x)
}

/// Forms the decoder input from `z^t` and `z^{t-1}`.
pub fn predict_node(g: &mut Graph, cfg: &ModelConfig, z_t: &CodeNode, z_tm1: &CodeNode) -> Result<CodeNode> {
    let [a0, a1] = cfg.a;
    match (cfg.prediction, *z_t, *z_tm1) {
        (Prediction::Concat, CodeNode::Flat(t), CodeNode::Flat(tm1)) => Ok(CodeNode::Flat(g.concat(&[t, tm1])?)),
        (Prediction::Extrapolate, CodeNode::Flat(t), CodeNode::Flat(tm1)) => {
            Ok(CodeNode::Flat(g.lincomb(&[(a0, t), (a1, tm1)])?))
        }
        (Prediction::MagPhase, CodeNode::Pooled { m: mt, p: pt }, CodeNode::Pooled { m: mtm1, p: ptm1 }) => {
            let m = g.lincomb(&[(0.5, mt), (0.5, mtm1)])?;
            let p = g.lincomb(&[(a0, pt), (a1, ptm1)])?;
            let p = g.clamp(p, -1.0, 1.0)?;
            Ok(CodeNode::Pooled { m, p })
        }
        _ => Err(Error::Contract(format!(
            "{:?} prediction does not match the code kind",
            cfg.prediction
        ))),
    }
}

/// Flat node the curvature cosine is measured on.
pub fn curvature_vector_node(g: &mut Graph, cfg: &ModelConfig, code: &CodeNode) -> Result<NodeId> {
    match *code {
        CodeNode::Flat(id) => Ok(id),
        CodeNode::Pooled { p, .. } if cfg.curvature_phase_only => g.flatten(p),
        CodeNode::Pooled { m, p } => g.concat(&[m, p]),
    }
}

/// `cos∠(z^t − z^{t−1}, z^{t+1} − z^t)` with norms floored at `eps`.
pub fn curvature_node(g: &mut Graph, eps: f64, tm1: NodeId, t: NodeId, tp1: NodeId) -> Result<NodeId> {
    let d1 = g.sub(t, tm1)?;
    let d2 = g.sub(tp1, t)?;
    g.cosine(d1, d2, eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `½‖x̂ − x‖²`.
    pub prediction: f64,
    /// Cosine between consecutive code steps, in [-1, 1].
    pub cosine: f64,
    /// `λ · cosine`.
    pub curvature: f64,
    /// `prediction − curvature`.
    pub total: f64,
}

/// Loss-related nodes of one triplet.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub codes: [CodeNode; 3],
    pub predicted_code: CodeNode,
    pub predicted_frame: NodeId,
    pub prediction: NodeId,
    pub cosine: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, lambda: f64) -> LossBreakdown {
        let prediction = g.value(self.prediction).item();
        let cosine = g.value(self.cosine).item();
        LossBreakdown {
            prediction,
            cosine,
            curvature: lambda * cosine,
            total: g.value(self.total).item(),
        }
    }
}

/// Builds the prediction + curvature loss for three frame nodes.
pub fn loss_graph(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, frames: [NodeId; 3]) -> Result<LossNodes> {
    let codes = encode_frames(g, cfg, bound, frames)?;
    let predicted_code = predict_node(g, cfg, &codes[1], &codes[0])?;
    loss_from_codes(g, cfg, bound, codes, predicted_code, frames[2])
}

pub fn encode_frames(g: &mut Graph, cfg: &ModelConfig, bound: &Bound, frames: [NodeId; 3]) -> Result<[CodeNode; 3]> {
    Ok([
        encode_node(g, cfg, bound, frames[0])?,
        encode_node(g, cfg, bound, frames[1])?,
        encode_node(g, cfg, bound, frames[2])?,
    ])
}

/// Decodes `predicted_code` and assembles the loss against `target`, with
/// the curvature cosine over the three frame codes.
pub fn loss_from_codes(
    g: &mut Graph,
    cfg: &ModelConfig,
    bound: &Bound,
    codes: [CodeNode; 3],
    predicted_code: CodeNode,
    target: NodeId,
) -> Result<LossNodes> {
    let predicted_frame = decode_node(g, cfg, bound, &predicted_code)?;
    let prediction = half_squared_error(g, predicted_frame, target)?;
    let v: Vec<NodeId> = codes
        .iter()
        .map(|c| curvature_vector_node(g, cfg, c))
        .collect::<Result<_>>()?;
    let cosine = curvature_node(g, cfg.eps_curv, v[0], v[1], v[2])?;
    let total = g.lincomb(&[(1.0, prediction), (-cfg.lambda, cosine)])?;
    Ok(LossNodes {
        codes,
        predicted_code,
        predicted_frame,
        prediction,
        cosine,
        total,
    })
}

/// `½‖a − b‖²`.
pub fn half_squared_error(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let sq = g.sum_squares(diff)?;
    g.scale(sq, 0.5)
}

pub(crate) fn frame_nodes(g: &mut Graph, cfg: &ModelConfig, triplet: &FrameTriplet) -> Result<[NodeId; 3]> {
    for f in &triplet.frames {
        check_frame(cfg, f)?;
    }
    Ok(triplet.frames.clone().map(|f| g.constant(f)))
}

pub fn encode(frame: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Encoding> {
    check_frame(cfg, frame)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(frame.clone());
    let node = encode_node(&mut g, cfg, &bound, x)?;
    Encoding::from_node(&g, &node, cfg)
}

/// Decodes one code. Models without a prediction operator decode the static
/// pair `[z, z]` unless a concatenated pair is passed.
pub fn decode(code: &Encoding, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut node = code.to_node(&mut g);
    let shapes = cfg.shapes()?;
    if let (Prediction::Concat, CodeNode::Flat(id)) = (cfg.prediction, node) {
        if g.value(id).len() == shapes.code.dim() {
            node = CodeNode::Flat(g.concat(&[id, id])?);
        }
    }
    let out = decode_node(&mut g, cfg, &bound, &node)?;
    Ok(g.value(out).clone())
}

/// `ẑ = a0 z^t + a1 z^{t−1}`.
pub fn extrapolate_code(z_t: &Tensor, z_tm1: &Tensor, a: [f64; 2]) -> Result<Tensor> {
    if z_t.len() != z_tm1.len() {
        return Err(Error::shape(
            "extrapolate_code",
            format!("code axis: {} vs {}", z_t.len(), z_tm1.len()),
        ));
    }
    Ok(Tensor::from_fn(z_t.shape(), |i| a[0] * z_t.data()[i] + a[1] * z_tm1.data()[i]))
}

/// Averaged magnitudes and linearly extrapolated phases, clamped to [-1, 1].
pub fn predict_mag_phase(code_t: &Code, code_tm1: &Code) -> Result<Code> {
    if code_t.spec != code_tm1.spec || code_t.m.shape() != code_tm1.m.shape() {
        return Err(Error::shape("predict_mag_phase", "codes come from different pool specs"));
    }
    let m = code_t.m.zip_map(&code_tm1.m, |a, b| 0.5 * (a + b))?;
    let p = code_t
        .p
        .zip_map(&code_tm1.p, |a, b| (2.0 * a - b).clamp(-1.0, 1.0))?;
    Ok(Code {
        m,
        p,
        spec: code_t.spec,
        input_shape: code_t.input_shape,
    })
}

pub fn curvature_penalty(z_tm1: &Tensor, z_t: &Tensor, z_tp1: &Tensor, eps: f64) -> Result<f64> {
    if z_tm1.len() != z_t.len() || z_t.len() != z_tp1.len() {
        return Err(Error::shape("curvature_penalty", "codes differ in length"));
    }
    let mut g = Graph::new();
    let [a, b, c] = [z_tm1, z_t, z_tp1].map(|z| g.constant(Tensor::concat_flat(&[z])));
    let cos = curvature_node(&mut g, eps, a, b, c)?;
    Ok(g.value(cos).item())
}

pub fn loss_eq1(triplet: &FrameTriplet, params: &ModelParams, cfg: &ModelConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let frames = frame_nodes(&mut g, cfg, triplet)?;
    let nodes = loss_graph(&mut g, cfg, &bound, frames)?;
    Ok(nodes.breakdown(&g, cfg.lambda))
}

/// Loss and its gradient with respect to every parameter, in parameter
/// order.
pub fn loss_and_grads(
    triplet: &FrameTriplet,
    params: &ModelParams,
    cfg: &ModelConfig,
    precision: Precision,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::with_precision(precision);
    let bound = params.bind(&mut g, true);
    let frames = frame_nodes(&mut g, cfg, triplet)?;
    let nodes = loss_graph(&mut g, cfg, &bound, frames)?;
    let grads = g.backward(nodes.total)?;
    let out = bound
        .ids
        .iter()
        .zip(params.tensors())
        .map(|(id, t)| grads.get_or_zeros(*id, t))
        .collect();
    Ok((nodes.breakdown(&g, cfg.lambda), out))
}

#[cfg(test)]
mod tests;
