//! Procedurally rendered sprites with two pose angles, rotating at constant
//! angular speed.
//!
//! A sprite is a sum of isotropic Gaussian blobs. The azimuth rotates the
//! whole sprite in the image plane; the second angle swings a satellite blob
//! around the body. Blobs are evaluated analytically at pixel centers, so
//! rendering is anti-aliased and the pixel sum barely moves under rotation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::skip::apply_skip;
use super::{clip_unit, triplet_rng, FrameTriplet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_STEP_DEG: f64 = 30.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    /// Two unequal blobs along the body axis.
    #[default]
    Dumbbell,
    /// Three unequal blobs in a triangle.
    Tripod,
}

impl SpriteShape {
    /// Body blobs as `(x, y, amplitude)` in units where the frame is 16 wide.
    fn body(self) -> &'static [(f64, f64, f64)] {
        match self {
            SpriteShape::Dumbbell => &[(-2.0, 0.0, 0.7), (2.0, 0.0, 0.4)],
            SpriteShape::Tripod => &[(-2.0, -1.2, 0.7), (2.0, -1.2, 0.4), (0.0, 2.0, 0.25)],
        }
    }
}

const SATELLITE_RADIUS: f64 = 4.5;
const SATELLITE_AMP: f64 = 0.7;
const BLOB_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpriteSceneSpec {
    #[serde(default)]
    pub shape: SpriteShape,
    /// Frame side in pixels.
    pub size: usize,
    /// Azimuth change per frame, degrees.
    pub azimuth_step: f64,
    /// Change per frame of the satellite angle, degrees.
    pub pitch_step: f64,
    /// Draw each angle's direction of travel at random per sequence.
    #[serde(default = "yes")]
    pub random_direction: bool,
}

fn yes() -> bool {
    true
}

impl Default for SpriteSceneSpec {
    fn default() -> Self {
        SpriteSceneSpec {
            shape: SpriteShape::Dumbbell,
            size: 16,
            azimuth_step: 12.0,
            pitch_step: 12.0,
            random_direction: true,
        }
    }
}

impl SpriteSceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("azimuth_step", self.azimuth_step), ("pitch_step", self.pitch_step)] {
            if !(v.abs() <= MAX_STEP_DEG) {
                return Err(Error::config(field, format!("{v} exceeds {MAX_STEP_DEG} degrees per frame")));
            }
        }
        if self.size < 8 {
            return Err(Error::config("size", format!("{} is too small to hold a sprite", self.size)));
        }
        Ok(())
    }

    /// `n` frames starting at a random pose, with the angles per frame.
    pub fn sequence<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let theta0 = rng.gen_range(0.0..360.0);
        let phi0 = rng.gen_range(0.0..360.0);
        let mut sign = || {
            if self.random_direction && rng.gen::<bool>() {
                -1.0
            } else {
                1.0
            }
        };
        let (dt, dp) = (sign() * self.azimuth_step, sign() * self.pitch_step);
        let angles: Vec<Vec<f64>> = (0..n)
            .map(|t| vec![theta0 + t as f64 * dt, phi0 + t as f64 * dp])
            .collect();
        let frames = angles.iter().map(|a| render_sprite(self, a[0], a[1])).collect();
        (frames, angles)
    }
}

/// Renders a `[1, size, size]` frame at azimuth `theta` and satellite angle
/// `phi` (degrees).
pub fn render_sprite(spec: &SpriteSceneSpec, theta: f64, phi: f64) -> Tensor {
    let s = spec.size;
    let unit = s as f64 / 16.0;
    let center = (s as f64 - 1.0) / 2.0;
    let (st, ct) = theta.to_radians().sin_cos();
    let (sp, cp) = phi.to_radians().sin_cos();
    let mut blobs: Vec<(f64, f64, f64)> = spec.shape.body().to_vec();
    blobs.push((SATELLITE_RADIUS * cp, SATELLITE_RADIUS * sp, SATELLITE_AMP));
    let placed: Vec<(f64, f64, f64)> = blobs
        .iter()
        .map(|&(x, y, a)| (center + unit * (ct * x - st * y), center + unit * (st * x + ct * y), a))
        .collect();
    let two_var = 2.0 * (BLOB_SIGMA * unit).powi(2);
    let mut frame = Tensor::from_fn(&[1, s, s], |i| {
        let (py, px) = ((i / s) as f64, (i % s) as f64);
        placed
            .iter()
            .map(|&(x, y, a)| a * (-((px - x).powi(2) + (py - y).powi(2)) / two_var).exp())
            .sum()
    });
    clip_unit(&mut frame);
    frame
}

/// Triplets rendered at `theta0, theta0 + d, theta0 + 2d` (both angles),
/// random start and direction per triplet.
pub fn gen_rotating_sprites(spec: &SpriteSceneSpec, count: usize, seed: u64) -> Result<Vec<FrameTriplet>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let (frames, angles) = spec.sequence(3, &mut triplet_rng(seed, i));
            let [a, b, c]: [Tensor; 3] = frames.try_into().expect("three frames");
            let [la, lb, lc]: [Vec<f64>; 3] = angles.try_into().expect("three poses");
            Ok(FrameTriplet::new([a, b, c])?.with_latent([la, lb, lc]))
        })
        .collect()
}

/// Sprite triplets whose target is the next frame or, with probability
/// `p_skip`, the one after.
pub fn gen_skip_sprites(spec: &SpriteSceneSpec, count: usize, p_skip: f64, seed: u64) -> Result<Vec<FrameTriplet>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = triplet_rng(seed, i);
            let (frames, angles) = spec.sequence(4, &mut rng);
            apply_skip(&frames, Some(&angles), p_skip, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_gives_identical_frames() {
        let spec = SpriteSceneSpec {
            azimuth_step: 0.0,
            pitch_step: 0.0,
            ..Default::default()
        };
        for t in gen_rotating_sprites(&spec, 5, 1).unwrap() {
            assert_eq!(t.frames[0], t.frames[1]);
            assert_eq!(t.frames[1], t.frames[2]);
        }
    }

    #[test]
    fn full_turn_renders_identically() {
        let spec = SpriteSceneSpec::default();
        for (th, ph) in [(10.0, 33.0), (200.0, 290.0)] {
            let a = render_sprite(&spec, th, ph);
            let b = render_sprite(&spec, th + 360.0, ph + 360.0);
            assert!(a.zip_map(&b, |x, y| (x - y).abs()).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn mass_is_rotation_invariant() {
        for shape in [SpriteShape::Dumbbell, SpriteShape::Tripod] {
            let spec = SpriteSceneSpec {
                shape,
                ..Default::default()
            };
            let base = render_sprite(&spec, 0.0, 0.0).sum();
            for t in gen_rotating_sprites(&spec, 40, 8).unwrap() {
                for f in &t.frames {
                    let rel = (f.sum() - base).abs() / base;
                    assert!(rel < 0.02, "mass drifted by {rel}");
                }
            }
        }
    }

    #[test]
    fn angles_advance_at_constant_speed() {
        let spec = SpriteSceneSpec::default();
        for t in gen_rotating_sprites(&spec, 30, 2).unwrap() {
            let l = t.latent.unwrap();
            for k in 0..2 {
                assert!(((l[1][k] - l[0][k]) - (l[2][k] - l[1][k])).abs() < 1e-9);
                assert!(((l[1][k] - l[0][k]).abs() - 12.0).abs() < 1e-9);
            }
            for f in &t.frames {
                assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = SpriteSceneSpec::default();
        let a = gen_skip_sprites(&spec, 10, 0.5, 5).unwrap();
        let b = gen_skip_sprites(&spec, 10, 0.5, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.skip.is_some()));
    }

    #[test]
    fn oversized_step_is_rejected() {
        let spec = SpriteSceneSpec {
            azimuth_step: 31.0,
            ..Default::default()
        };
        assert!(gen_rotating_sprites(&spec, 1, 0).is_err());
    }
}
