//! Small models and random frames shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::FrameTriplet;
use crate::model::{Architecture, DeepSize, ModelConfig, ShallowSize};
use crate::tensor::Tensor;

pub fn tiny_shallow(arch: Architecture) -> ModelConfig {
    ModelConfig::shallow(
        arch,
        ShallowSize {
            input_shape: [1, 8, 8],
            filters: 4,
            kernel: 3,
            group: [4, 4, 4],
            beta: 2.0,
        },
    )
    .unwrap()
}

pub fn tiny_deep(arch: Architecture) -> ModelConfig {
    ModelConfig::deep(
        arch,
        DeepSize {
            input_shape: [1, 8, 8],
            channels: [2, 2],
            kernel: 3,
            code_dim: 24,
            pooled_features: 8,
            pooled_grid: 2,
            beta: 2.0,
        },
    )
    .unwrap()
}

pub fn tiny(arch: Architecture) -> ModelConfig {
    match arch {
        Architecture::Shallow1 | Architecture::Shallow2 => tiny_shallow(arch),
        _ => tiny_deep(arch),
    }
}

pub fn random_frame(shape: [usize; 3], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&shape, |_| rng.gen_range(0.05..0.95))
}

pub fn random_triplet(cfg: &ModelConfig, seed: u64) -> FrameTriplet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.input_shape;
    FrameTriplet::new([random_frame(s, &mut rng), random_frame(s, &mut rng), random_frame(s, &mut rng)]).unwrap()
}
