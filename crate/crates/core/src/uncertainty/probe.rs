//! Linear probe: how well does a logistic classifier read a binary label
//! off the inferred `δ`s?

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ITERATIONS: usize = 2000;
const LEARNING_RATE: f64 = 0.5;
/// Small ridge term; keeps weights finite on separable data.
const L2: f64 = 1e-4;
pub const TRAIN_FRACTION: f64 = 0.8;
pub const BASELINE_SHUFFLES: usize = 20;

/// Logistic regression on standardized features, fitted by full-batch
/// gradient descent on the mean log loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn check_data(x: &[Vec<f64>], y: &[bool]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::shape("probe", format!("{} samples, {} labels", x.len(), y.len())));
    }
    let d = x
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::precondition("probe", "no samples"))?;
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("probe", "samples differ in dimension"));
    }
    Ok(d)
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Result<Self> {
        let d = check_data(x, y)?;
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            return Err(Error::precondition("probe", "labels hold a single class"));
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let xs: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..d).map(|j| (r[j] - mean[j]) / scale[j]).collect())
            .collect();
        let (mut w, mut b) = (vec![0.0; d], 0.0);
        for _ in 0..ITERATIONS {
            let (mut gw, mut gb) = (vec![0.0; d], 0.0);
            for (r, &label) in xs.iter().zip(y) {
                let p = sigmoid(b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
                let err = p - f64::from(u8::from(label));
                gb += err;
                for (g, a) in gw.iter_mut().zip(r) {
                    *g += err * a;
                }
            }
            b -= LEARNING_RATE * gb / n;
            for (wj, g) in w.iter_mut().zip(&gw) {
                *wj -= LEARNING_RATE * (g / n + L2 * *wj);
            }
        }
        Ok(LogisticProbe {
            weights: w,
            bias: b,
            mean,
            scale,
        })
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        let v: f64 = x
            .iter()
            .enumerate()
            .map(|(j, a)| (a - self.mean[j]) / self.scale[j] * self.weights[j])
            .sum();
        v + self.bias > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> Result<f64> {
        check_data(x, y)?;
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        Ok(hits as f64 / x.len() as f64)
    }
}

/// Fits on the training split and returns held-out accuracy.
pub fn probe_skip_variable(
    train_x: &[Vec<f64>],
    train_y: &[bool],
    test_x: &[Vec<f64>],
    test_y: &[bool],
) -> Result<f64> {
    LogisticProbe::fit(train_x, train_y)?.accuracy(test_x, test_y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// Mean held-out accuracy over probes trained on shuffled labels.
    pub baseline: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Seeded train/test split of `0..n`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// 80/20 split, probe accuracy, and the shuffled-label baseline.
pub fn probe_report(deltas: &[Vec<f64>], labels: &[bool], seed: u64) -> Result<ProbeReport> {
    check_data(deltas, labels)?;
    let (train, test) = split_indices(deltas.len(), TRAIN_FRACTION, seed);
    if test.is_empty() {
        return Err(Error::precondition("probe", "too few samples for a held-out split"));
    }
    let (tx, ty) = (pick(deltas, &train), pick(labels, &train));
    let (vx, vy) = (pick(deltas, &test), pick(labels, &test));
    let accuracy = probe_skip_variable(&tx, &ty, &vx, &vy)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut total = 0.0;
    let mut done = 0;
    for _ in 0..BASELINE_SHUFFLES {
        let mut shuffled = labels.to_vec();
        shuffled.shuffle(&mut rng);
        let (sy, svy) = (pick(&shuffled, &train), pick(&shuffled, &test));
        match probe_skip_variable(&tx, &sy, &vx, &svy) {
            Ok(a) => {
                total += a;
                done += 1;
            }
            // A shuffle can leave the training split single-class.
            Err(Error::Precondition { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if done == 0 {
        return Err(Error::precondition("probe", "no usable label shuffle"));
    }
    Ok(ProbeReport {
        accuracy,
        baseline: total / done as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}
