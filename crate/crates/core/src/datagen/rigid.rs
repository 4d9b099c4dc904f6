//! Triplets cut from still images under a rigid transform applied at
//! fractions 1/3, 2/3 and 1 of its full strength.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{clip_unit, triplet_rng, FrameTriplet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TAU_SCHEDULE: [f64; 3] = [1.0 / 3.0, 2.0 / 3.0, 1.0];
pub const MAX_ATTEMPTS: usize = 100;

/// Ranges for a random rigid transform. Each parameter is drawn
/// symmetrically about the identity: translation and rotation uniformly in
/// `[-max, max]`, scale log-uniformly in `[1/max_scale, max_scale]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSpec {
    /// Pixels, per axis.
    pub max_translation: f64,
    /// Degrees.
    pub max_rotation: f64,
    /// Ratio, at least 1.
    pub max_scale: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            max_translation: 3.0,
            max_rotation: 15.0,
            max_scale: 1.1,
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            max_translation: 0.0,
            max_rotation: 0.0,
            max_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0) {
            return Err(Error::config("max_translation", "must be non-negative"));
        }
        if !(self.max_rotation >= 0.0) {
            return Err(Error::config("max_rotation", "must be non-negative"));
        }
        if !(self.max_scale >= 1.0) {
            return Err(Error::config("max_scale", "must be at least 1"));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> RigidTransform {
        let mut sym = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let tx = sym(self.max_translation);
        let ty = sym(self.max_translation);
        let rotation = sym(self.max_rotation);
        let scale = sym(self.max_scale.ln()).exp();
        RigidTransform { tx, ty, rotation, scale }
    }
}

/// A transform at full strength (τ = 1). At strength τ it translates by
/// `τ·t`, rotates by `τ·rotation` and scales by `scale^τ` about the window
/// center, so τ = 0 is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub tx: f64,
    pub ty: f64,
    /// Degrees.
    pub rotation: f64,
    pub scale: f64,
}

impl RigidTransform {
    /// Source coordinates `(x, y)` relative to the window center for the
    /// output pixel at offset `(x, y)` from that center.
    fn inverse_map(&self, tau: f64, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = (-tau * self.rotation).to_radians().sin_cos();
        let k = self.scale.powf(-tau);
        let (ux, uy) = (x - tau * self.tx, y - tau * self.ty);
        (k * (c * ux - s * uy), k * (s * ux + c * uy))
    }

    pub fn params(&self) -> [f64; 4] {
        [self.tx, self.ty, self.rotation, self.scale]
    }
}

/// Index into `0..n` reflected at the borders (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn bilinear(img: &Tensor, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |yy: isize, xx: isize| img.data()[reflect(yy, h) * w + reflect(xx, w)];
    let (xi, yi) = (x0 as isize, y0 as isize);
    let top = at(yi, xi) * (1.0 - fx) + at(yi, xi + 1) * fx;
    let bottom = at(yi + 1, xi) * (1.0 - fx) + at(yi + 1, xi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// The `window × window` crop of `still` (`[1, H, W]`) whose top-left corner
/// is at `origin = (row, col)`, with `transform` applied at strength `tau`.
/// Returns `None` when any source coordinate falls outside the still.
pub fn apply_transform(
    still: &Tensor,
    origin: (usize, usize),
    window: usize,
    transform: &RigidTransform,
    tau: f64,
) -> Option<Tensor> {
    let (h, w) = (still.shape()[1], still.shape()[2]);
    let half = (window as f64 - 1.0) / 2.0;
    let (cy, cx) = (origin.0 as f64 + half, origin.1 as f64 + half);
    let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    let corners = [(-half, -half), (half, -half), (-half, half), (half, half)];
    if !corners.iter().all(|&(x, y)| {
        let (sx, sy) = transform.inverse_map(tau, x, y);
        inside(cx + sx, cy + sy)
    }) {
        return None;
    }
    let mut out = Tensor::from_fn(&[1, window, window], |i| {
        let (x, y) = ((i % window) as f64 - half, (i / window) as f64 - half);
        let (sx, sy) = transform.inverse_map(tau, x, y);
        bilinear(still, cx + sx, cy + sy)
    });
    clip_unit(&mut out);
    Some(out)
}

/// Smooth random textures in [0, 1]: sums of a few oriented sinusoids and
/// Gaussian spots. Enough structure for rigid motion to be visible.
pub fn procedural_stills(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if size < 4 {
        return Err(Error::config("still_size", "must be at least 4"));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = triplet_rng(seed, i);
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let angle = rng.gen_range(0.0..std::f64::consts::PI);
                    let freq = rng.gen_range(0.15..0.6);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    (angle.cos() * freq, angle.sin() * freq, phase, rng.gen_range(0.3..1.0))
                })
                .collect();
            let spots: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.0..size as f64),
                        rng.gen_range(0.0..size as f64),
                        rng.gen_range(1.5..4.0),
                    )
                })
                .collect();
            let mut t = Tensor::from_fn(&[1, size, size], |j| {
                let (y, x) = ((j / size) as f64, (j % size) as f64);
                let wave: f64 = waves.iter().map(|&(kx, ky, p, a)| a * (kx * x + ky * y + p).sin()).sum();
                let spot: f64 = spots
                    .iter()
                    .map(|&(sx, sy, r)| (-((x - sx).powi(2) + (y - sy).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                wave + 2.0 * spot
            });
            let (lo, hi) = t
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let span = (hi - lo).max(1e-12);
            t.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / span);
            t
        })
        .collect())
}

/// `count` triplets: pick a still, a window position and a transform, and
/// render the window at τ = 1/3, 2/3, 1. Draws that carry the window past
/// the still's edge are redrawn, up to [`MAX_ATTEMPTS`] times.
pub fn gen_rigid_triplets(
    stills: &[Tensor],
    spec: &TransformSpec,
    window: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<FrameTriplet>> {
    spec.validate()?;
    if stills.is_empty() {
        return Err(Error::config("stills", "no still images"));
    }
    for (k, s) in stills.iter().enumerate() {
        match s.shape() {
            [1, h, w] if *h >= window && *w >= window => {}
            shape => {
                return Err(Error::precondition(
                    "gen_rigid_triplets",
                    format!("still {k} has shape {shape:?}, smaller than the {window}x{window} window"),
                ))
            }
        }
    }
    (0..count)
        .map(|i| {
            let mut rng = triplet_rng(seed, i);
            for _ in 0..MAX_ATTEMPTS {
                let still = &stills[rng.gen_range(0..stills.len())];
                let (h, w) = (still.shape()[1], still.shape()[2]);
                let origin = (rng.gen_range(0..=h - window), rng.gen_range(0..=w - window));
                let transform = spec.sample(&mut rng);
                let frames: Option<Vec<Tensor>> = TAU_SCHEDULE
                    .iter()
                    .map(|&tau| apply_transform(still, origin, window, &transform, tau))
                    .collect();
                if let Some(frames) = frames {
                    let [a, b, c]: [Tensor; 3] = frames.try_into().expect("three frames");
                    let latent = TAU_SCHEDULE.map(|tau| {
                        let mut v = vec![tau];
                        v.extend_from_slice(&transform.params());
                        v
                    });
                    return Ok(FrameTriplet::new([a, b, c])?.with_latent(latent));
                }
            }
            Err(Error::precondition(
                "gen_rigid_triplets",
                format!("no transform kept the {window}x{window} window inside a still after {MAX_ATTEMPTS} attempts"),
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigidDatasetSpec {
    pub transform: TransformSpec,
    pub window: usize,
    pub stills: usize,
    pub still_size: usize,
    pub count: usize,
}

impl Default for RigidDatasetSpec {
    fn default() -> Self {
        RigidDatasetSpec {
            transform: TransformSpec::default(),
            window: 16,
            stills: 8,
            still_size: 40,
            count: 200,
        }
    }
}
