//! A Gaussian intensity bump translating along a line of pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{triplet_rng, FrameTriplet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One bump sequence: frames of shape `[1, 1, n_pixels]` and the bump
/// center in each.
#[derive(Clone, Debug, PartialEq)]
pub struct BumpLine {
    pub frames: Vec<Tensor>,
    pub centers: Vec<f64>,
}

/// `frame_t[i] = exp(-(i - c_t)^2 / (2 sigma^2))` with `c_t = c0 + t * speed`.
pub fn gen_bump_line(n_pixels: usize, sigma: f64, speed: f64, n_frames: usize, c0: f64) -> Result<BumpLine> {
    if n_pixels < 3 {
        return Err(Error::config("n_pixels", format!("need at least 3 pixels, got {n_pixels}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", format!("must be positive, got {sigma}")));
    }
    if !(speed > 0.0) {
        return Err(Error::config("speed", format!("must be positive, got {speed}")));
    }
    let centers: Vec<f64> = (0..n_frames).map(|t| c0 + t as f64 * speed).collect();
    let frames = centers
        .iter()
        .map(|&c| {
            Tensor::from_fn(&[1, 1, n_pixels], |i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
        })
        .collect();
    Ok(BumpLine { frames, centers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BumpDatasetSpec {
    pub n_pixels: usize,
    pub sigma: f64,
    /// Speeds are drawn uniformly from `[speed_min, speed_max]`.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Frames per sequence; triplets use 3.
    pub n_frames: usize,
    pub count: usize,
}

impl Default for BumpDatasetSpec {
    fn default() -> Self {
        BumpDatasetSpec {
            n_pixels: 3,
            sigma: 0.8,
            speed_min: 0.1,
            speed_max: 0.1,
            n_frames: 20,
            count: 200,
        }
    }
}

impl BumpDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::config("speed_min", "need 0 < speed_min <= speed_max"));
        }
        if self.n_frames < 3 {
            return Err(Error::config("n_frames", "need at least 3 frames"));
        }
        let span = (self.n_frames - 1) as f64 * self.speed_max;
        if span > (self.n_pixels - 1) as f64 {
            return Err(Error::config(
                "n_frames",
                format!("a bump at speed {} leaves the line within {} frames", self.speed_max, self.n_frames),
            ));
        }
        gen_bump_line(self.n_pixels, self.sigma, self.speed_min, 1, 0.0).map(|_| ())
    }

    /// `count` sequences of `n_frames`, each with a random speed and a start
    /// chosen so the center stays on the line.
    pub fn sequences(&self, seed: u64) -> Result<Vec<BumpLine>> {
        self.validate()?;
        (0..self.count)
            .map(|i| self.sequence(seed, i, self.n_frames))
            .collect()
    }

    fn sequence(&self, seed: u64, index: usize, n_frames: usize) -> Result<BumpLine> {
        let mut rng = triplet_rng(seed, index);
        let speed = if self.speed_max > self.speed_min {
            rng.gen_range(self.speed_min..self.speed_max)
        } else {
            self.speed_min
        };
        let room = (self.n_pixels - 1) as f64 - (n_frames - 1) as f64 * speed;
        let c0 = rng.gen::<f64>() * room;
        gen_bump_line(self.n_pixels, self.sigma, speed, n_frames, c0)
    }

    /// `count` triplets of consecutive frames, latent trace holding the
    /// bump centers.
    pub fn generate(&self, seed: u64) -> Result<Vec<FrameTriplet>> {
        self.validate()?;
        (0..self.count)
            .map(|i| {
                let line = self.sequence(seed, i, 3)?;
                let [a, b, c]: [Tensor; 3] = line
                    .frames
                    .try_into()
                    .map_err(|_| Error::Contract("bump sequence length".into()))?;
                Ok(FrameTriplet::new([a, b, c])?.with_latent([
                    vec![line.centers[0]],
                    vec![line.centers[1]],
                    vec![line.centers[2]],
                ]))
            })
            .collect()
    }
}
