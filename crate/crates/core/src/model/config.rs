use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_pool::{PoolSpec, DEFAULT_BETA};

/// The five architecture families, at desk scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "shallow-1")]
    Shallow1,
    #[serde(rename = "shallow-2")]
    Shallow2,
    #[serde(rename = "deep-1")]
    Deep1,
    #[serde(rename = "deep-2")]
    Deep2,
    #[serde(rename = "deep-3")]
    Deep3,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Shallow1,
        Architecture::Shallow2,
        Architecture::Deep1,
        Architecture::Deep2,
        Architecture::Deep3,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::Shallow1 => "shallow-1",
            Architecture::Shallow2 => "shallow-2",
            Architecture::Deep1 => "deep-1",
            Architecture::Deep2 => "deep-2",
            Architecture::Deep3 => "deep-3",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::config("arch", format!("unknown architecture `{s}`")))
    }
}

/// One stage of an encoder or decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        padding: usize,
        relu: bool,
    },
    /// Fully connected; the input is flattened first.
    Fc { out: usize, relu: bool },
    Reshape { shape: Vec<usize> },
    /// Zero padding of both spatial axes on every side.
    Pad { pad: usize },
    /// Phase pooling with the model's pool spec; ends the encoder.
    PhasePool,
    /// Un-pooling with the model's pool spec; starts the decoder.
    Unpool,
}

/// How the code fed to the decoder is formed from the two input codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// No prediction operator: both codes are concatenated `[z^t, z^{t-1}]`
    /// and the decoder learns the prediction.
    Concat,
    /// Fixed linear extrapolation `a0 z^t + a1 z^{t-1}`.
    Extrapolate,
    /// Averaged magnitudes and linearly extrapolated phases.
    MagPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// `[C, H, W]` of a frame.
    pub input_shape: [usize; 3],
    pub encoder: Vec<Layer>,
    pub prediction: Prediction,
    pub decoder: Vec<Layer>,
    pub pool: Option<PoolSpec>,
    /// Extrapolation coefficients applied to `[z^t, z^{t-1}]`.
    pub a: [f64; 2],
    /// Weight of the curvature term.
    pub lambda: f64,
    /// Apply the curvature term to phases only when the code is pooled.
    pub curvature_phase_only: bool,
    /// Floor on the norms inside the curvature cosine.
    pub eps_curv: f64,
}

pub const DEFAULT_A: [f64; 2] = [2.0, -1.0];
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_EPS_CURV: f64 = 1e-6;

/// Sizes for the scaled shallow architectures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShallowSize {
    pub input_shape: [usize; 3],
    pub filters: usize,
    /// Odd kernel size; convolutions are "same"-padded.
    pub kernel: usize,
    /// Pool group over (feature, x, y).
    pub group: [usize; 3],
    pub beta: f64,
}

impl Default for ShallowSize {
    fn default() -> Self {
        ShallowSize {
            input_shape: [1, 16, 16],
            filters: 16,
            kernel: 5,
            group: [4, 4, 4],
            beta: DEFAULT_BETA,
        }
    }
}

/// Sizes for the scaled deep architectures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepSize {
    pub input_shape: [usize; 3],
    /// Channels of the two encoder convolutions.
    pub channels: [usize; 2],
    pub kernel: usize,
    /// Flat code size of deep-1 and deep-2.
    pub code_dim: usize,
    /// deep-3: number of pooled features and the side of their spatial grid.
    pub pooled_features: usize,
    pub pooled_grid: usize,
    pub beta: f64,
}

impl Default for DeepSize {
    fn default() -> Self {
        DeepSize {
            input_shape: [1, 16, 16],
            channels: [4, 4],
            kernel: 5,
            code_dim: 64,
            pooled_features: 16,
            pooled_grid: 4,
            beta: DEFAULT_BETA,
        }
    }
}

impl ModelConfig {
    fn with_defaults(
        arch: Architecture,
        input_shape: [usize; 3],
        encoder: Vec<Layer>,
        prediction: Prediction,
        decoder: Vec<Layer>,
        pool: Option<PoolSpec>,
    ) -> Self {
        ModelConfig {
            arch,
            input_shape,
            encoder,
            prediction,
            decoder,
            pool,
            a: DEFAULT_A,
            lambda: DEFAULT_LAMBDA,
            curvature_phase_only: true,
            eps_curv: DEFAULT_EPS_CURV,
        }
    }

    /// Conv+ReLU, phase pool; un-pool, conv. shallow-2 pools features with
    /// half-overlapping groups.
    pub fn shallow(arch: Architecture, size: ShallowSize) -> Result<Self> {
        let stride = match arch {
            Architecture::Shallow1 => size.group,
            Architecture::Shallow2 => [(size.group[0] / 2).max(1), size.group[1], size.group[2]],
            other => {
                return Err(Error::config("arch", format!("{other} is not a shallow architecture")))
            }
        };
        if size.kernel % 2 == 0 {
            return Err(Error::config("kernel", "shallow kernels must be odd"));
        }
        let pad = size.kernel / 2;
        let pool = PoolSpec {
            group: size.group,
            stride,
            beta: size.beta,
        };
        let cfg = Self::with_defaults(
            arch,
            size.input_shape,
            vec![
                Layer::Conv {
                    out_channels: size.filters,
                    kernel: size.kernel,
                    padding: pad,
                    relu: true,
                },
                Layer::PhasePool,
            ],
            Prediction::MagPhase,
            vec![
                Layer::Unpool,
                Layer::Conv {
                    out_channels: size.input_shape[0],
                    kernel: size.kernel,
                    padding: pad,
                    relu: false,
                },
            ],
            Some(pool),
        );
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two valid Conv+ReLU stages and an FC+ReLU stage; the decoder mirrors
    /// them with FC+ReLU, reshape, full padding and two convolutions.
    pub fn deep(arch: Architecture, size: DeepSize) -> Result<Self> {
        let [c, h, w] = size.input_shape;
        let k = size.kernel;
        let [c1, c2] = size.channels;
        if h < 2 * (k - 1) + 1 || w < 2 * (k - 1) + 1 {
            return Err(Error::config("kernel", "input too small for two valid convolutions"));
        }
        let (h2, w2) = (h - 2 * (k - 1), w - 2 * (k - 1));
        let conv = |out, relu| Layer::Conv {
            out_channels: out,
            kernel: k,
            padding: 0,
            relu,
        };
        let mut encoder = vec![conv(c1, true), conv(c2, true)];
        let tail = vec![
            Layer::Reshape {
                shape: vec![c2, h2, w2],
            },
            Layer::Pad { pad: k - 1 },
            conv(c1, true),
            Layer::Pad { pad: k - 1 },
            conv(c, false),
        ];
        let dec_fc = Layer::Fc {
            out: c2 * h2 * w2,
            relu: true,
        };
        let (prediction, decoder, pool) = match arch {
            Architecture::Deep1 | Architecture::Deep2 => {
                encoder.push(Layer::Fc {
                    out: size.code_dim,
                    relu: true,
                });
                let pred = if arch == Architecture::Deep1 {
                    Prediction::Concat
                } else {
                    Prediction::Extrapolate
                };
                let mut dec = vec![dec_fc];
                dec.extend(tail);
                (pred, dec, None)
            }
            Architecture::Deep3 => {
                let (f, s) = (size.pooled_features, size.pooled_grid);
                encoder.push(Layer::Fc {
                    out: f * s * s,
                    relu: true,
                });
                encoder.push(Layer::Reshape { shape: vec![f, s, s] });
                encoder.push(Layer::PhasePool);
                let mut dec = vec![Layer::Unpool, dec_fc];
                dec.extend(tail);
                (
                    Prediction::MagPhase,
                    dec,
                    Some(PoolSpec::new([1, s, s], size.beta)),
                )
            }
            other => return Err(Error::config("arch", format!("{other} is not a deep architecture"))),
        };
        let cfg = Self::with_defaults(arch, size.input_shape, encoder, prediction, decoder, pool);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(arch: Architecture) -> Result<Self> {
        match arch {
            Architecture::Shallow1 | Architecture::Shallow2 => Self::shallow(arch, ShallowSize::default()),
            _ => Self::deep(arch, DeepSize::default()),
        }
    }

    pub fn is_pooled(&self) -> bool {
        self.encoder.contains(&Layer::PhasePool)
    }

    /// Checks the whole layer stack and returns its shapes.
    pub fn validate(&self) -> Result<Shapes> {
        if self.input_shape.contains(&0) {
            return Err(Error::config("input_shape", "dimensions must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        if !(self.eps_curv > 0.0) {
            return Err(Error::config("eps_curv", "must be positive"));
        }
        if !self.a.iter().all(|v| v.is_finite()) {
            return Err(Error::config("a", "must be finite"));
        }
        self.shapes()
    }

    fn pool_spec(&self, field: &str) -> Result<PoolSpec> {
        let spec = self
            .pool
            .ok_or_else(|| Error::config(field, "phase pooling layer without a pool spec"))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Shape calculator for the encoder, code and decoder.
    pub fn shapes(&self) -> Result<Shapes> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut encoder = Vec::new();
        let mut pooled_from = None;
        for (i, layer) in self.encoder.iter().enumerate() {
            if pooled_from.is_some() {
                return Err(Error::config(
                    format!("encoder[{i}]"),
                    "phase pooling must be the last encoder stage",
                ));
            }
            shape = match layer {
                Layer::PhasePool => {
                    let spec = self.pool_spec(&format!("encoder[{i}]"))?;
                    let t = spec.tiling(&shape)?;
                    pooled_from = Some([shape[0], shape[1], shape[2]]);
                    t.counts.to_vec()
                }
                Layer::Unpool => {
                    return Err(Error::config(format!("encoder[{i}]"), "un-pooling in encoder"))
                }
                _ => layer_output(layer, &shape, &format!("encoder[{i}]"))?,
            };
            encoder.push(shape.clone());
        }
        let code = match pooled_from {
            Some(vol) => {
                let spec = self.pool_spec("pool")?;
                let t = spec.tiling(&vol)?;
                CodeShape::Pooled {
                    groups: t.counts,
                    phase_dim: spec.phase_dim(),
                    volume: vol,
                }
            }
            None => CodeShape::Flat(shape.iter().product()),
        };
        match (self.prediction, &code) {
            (Prediction::MagPhase, CodeShape::Flat(_)) => {
                return Err(Error::config("prediction", "mag/phase prediction needs phase pooling"))
            }
            (Prediction::Concat | Prediction::Extrapolate, CodeShape::Pooled { .. }) => {
                return Err(Error::config("prediction", "pooled codes use mag/phase prediction"))
            }
            _ => {}
        }
        let mut dshape: Vec<usize> = match (&code, self.prediction) {
            (CodeShape::Flat(n), Prediction::Concat) => vec![2 * n],
            (CodeShape::Flat(n), _) => vec![*n],
            (CodeShape::Pooled { groups, .. }, _) => groups.to_vec(),
        };
        let mut decoder = Vec::new();
        for (i, layer) in self.decoder.iter().enumerate() {
            let field = format!("decoder[{i}]");
            dshape = match layer {
                Layer::Unpool => match (&code, i) {
                    (CodeShape::Pooled { volume, .. }, 0) => volume.to_vec(),
                    _ => return Err(Error::config(field, "un-pooling must be the first decoder stage of a pooled model")),
                },
                Layer::PhasePool => return Err(Error::config(field, "phase pooling in decoder")),
                _ => layer_output(layer, &dshape, &field)?,
            };
            decoder.push(dshape.clone());
        }
        if let CodeShape::Pooled { .. } = code {
            if self.decoder.first() != Some(&Layer::Unpool) {
                return Err(Error::config("decoder[0]", "pooled models must start decoding with un-pooling"));
            }
        }
        if dshape != self.input_shape {
            return Err(Error::config(
                "decoder",
                format!("produces {dshape:?}, frames are {:?}", self.input_shape),
            ));
        }
        Ok(Shapes {
            encoder,
            code,
            decoder,
        })
    }
}

fn layer_output(layer: &Layer, shape: &[usize], field: &str) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv {
            out_channels,
            kernel,
            padding,
            ..
        } => {
            if shape.len() != 3 {
                return Err(Error::config(field, format!("conv needs [C, H, W], got {shape:?}")));
            }
            let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
            if *kernel == 0 || *kernel > h || *kernel > w || *out_channels == 0 {
                return Err(Error::config(field, format!("kernel {kernel} does not fit {shape:?}")));
            }
            Ok(vec![*out_channels, h - kernel + 1, w - kernel + 1])
        }
        Layer::Fc { out, .. } => {
            if *out == 0 {
                return Err(Error::config(field, "fc output must be positive"));
            }
            Ok(vec![*out])
        }
        Layer::Reshape { shape: target } => {
            if target.iter().product::<usize>() != shape.iter().product::<usize>() || target.contains(&0) {
                return Err(Error::config(field, format!("cannot reshape {shape:?} to {target:?}")));
            }
            Ok(target.clone())
        }
        Layer::Pad { pad } => {
            if shape.len() != 3 {
                return Err(Error::config(field, format!("padding needs [C, H, W], got {shape:?}")));
            }
            Ok(vec![shape[0], shape[1] + 2 * pad, shape[2] + 2 * pad])
        }
        Layer::PhasePool | Layer::Unpool => unreachable!("handled by caller"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CodeShape {
    Flat(usize),
    Pooled {
        /// Group counts over (feature, x, y).
        groups: [usize; 3],
        phase_dim: usize,
        /// Activation volume before pooling.
        volume: [usize; 3],
    },
}

impl CodeShape {
    /// Number of scalars in one frame's code.
    pub fn dim(&self) -> usize {
        match self {
            CodeShape::Flat(n) => *n,
            CodeShape::Pooled {
                groups, phase_dim, ..
            } => groups.iter().product::<usize>() * (1 + phase_dim),
        }
    }

    /// Number of phase scalars (0 for flat codes).
    pub fn phase_len(&self) -> usize {
        match self {
            CodeShape::Flat(_) => 0,
            CodeShape::Pooled {
                groups, phase_dim, ..
            } => groups.iter().product::<usize>() * phase_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shapes {
    /// Output shape of each encoder stage.
    pub encoder: Vec<Vec<usize>>,
    pub code: CodeShape,
    /// Output shape of each decoder stage.
    pub decoder: Vec<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_a_is_constant_speed() {
        let cfg = ModelConfig::preset(Architecture::Deep2).unwrap();
        assert_eq!(cfg.a, [2.0, -1.0]);
    }

    #[test]
    fn prediction_per_architecture() {
        let p = |a| ModelConfig::preset(a).unwrap().prediction;
        assert_eq!(p(Architecture::Deep1), Prediction::Concat);
        assert_eq!(p(Architecture::Deep2), Prediction::Extrapolate);
        assert_eq!(p(Architecture::Deep3), Prediction::MagPhase);
        assert_eq!(p(Architecture::Shallow1), Prediction::MagPhase);
    }

    #[test]
    fn arch_ids_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.id().parse::<Architecture>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.id()));
        }
        assert!("deep-4".parse::<Architecture>().is_err());
    }

    #[test]
    fn rejects_mismatched_decoder() {
        let mut cfg = ModelConfig::preset(Architecture::Deep2).unwrap();
        cfg.decoder.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_bad_tiling() {
        let size = ShallowSize {
            filters: 6,
            ..Default::default()
        };
        assert!(ModelConfig::shallow(Architecture::Shallow1, size).is_err());
    }
}
