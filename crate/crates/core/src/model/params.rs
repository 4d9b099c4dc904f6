use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Layer, ModelConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors in a fixed order. Encoder weights are shared by
/// every frame the encoder processes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<(String, Tensor)>,
}

pub(crate) fn layer_param_name(part: &str, layer: usize, kind: &str) -> String {
    format!("{part}.{layer}.{kind}")
}

impl ModelParams {
    pub fn empty() -> Self {
        ModelParams {
            tensors: Vec::new(),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let shapes = cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::empty();
        let parts = [
            ("enc", &cfg.encoder, cfg.input_shape.to_vec(), &shapes.encoder),
            ("dec", &cfg.decoder, decoder_input_shape(&shapes, cfg), &shapes.decoder),
        ];
        for (part, layers, first_in, outs) in parts {
            let mut in_shape = first_in;
            for (i, layer) in layers.iter().enumerate() {
                match layer {
                    Layer::Conv {
                        out_channels,
                        kernel,
                        ..
                    } => {
                        let c_in = in_shape[0];
                        let fan_in = c_in * kernel * kernel;
                        params.push(
                            layer_param_name(part, i, "weight"),
                            uniform(&[*out_channels, c_in, *kernel, *kernel], fan_in, &mut rng),
                        );
                        params.push(layer_param_name(part, i, "bias"), Tensor::zeros(&[*out_channels]));
                    }
                    Layer::Fc { out, .. } => {
                        let fan_in: usize = in_shape.iter().product();
                        params.push(layer_param_name(part, i, "weight"), uniform(&[*out, fan_in], fan_in, &mut rng));
                        params.push(layer_param_name(part, i, "bias"), Tensor::zeros(&[*out]));
                    }
                    _ => {}
                }
                in_shape = outs[i].clone();
            }
        }
        Ok(params)
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.tensors.push((name, t));
    }

    /// Adds a tensor, replacing one of the same name.
    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.position(name) {
            Some(i) => self.tensors[i].1 = t,
            None => self.push(name.to_string(), t),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.position(name)?;
        Some(self.tensors.remove(i).1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Records every tensor on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        self.bind_nodes(ids)
    }

    /// Pairs already-recorded nodes, one per tensor in parameter order,
    /// with the parameter names.
    pub fn bind_nodes(&self, ids: Vec<NodeId>) -> Bound {
        assert_eq!(ids.len(), self.tensors.len(), "one node per parameter");
        Bound {
            names: self.tensors.iter().map(|(n, _)| n.clone()).collect(),
            ids,
        }
    }
}

fn decoder_input_shape(shapes: &super::config::Shapes, cfg: &ModelConfig) -> Vec<usize> {
    use super::config::{CodeShape, Prediction};
    match (&shapes.code, cfg.prediction) {
        (CodeShape::Flat(n), Prediction::Concat) => vec![2 * n],
        (CodeShape::Flat(n), _) => vec![*n],
        (CodeShape::Pooled { groups, .. }, _) => groups.to_vec(),
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Graph node ids of a bound [`ModelParams`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    pub ids: Vec<NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }
}
