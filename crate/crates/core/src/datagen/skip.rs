use rand::Rng;

use super::FrameTriplet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Draws `s ~ Bernoulli(p_skip)` and returns `(f1, f2, f3)` when `s = 0` or
/// `(f1, f2, f4)` when `s = 1`, labelled with `s`. `latent`, when given,
/// holds one entry per frame and is carried along the same way.
pub fn apply_skip<R: Rng>(
    frames: &[Tensor],
    latent: Option<&[Vec<f64>]>,
    p_skip: f64,
    rng: &mut R,
) -> Result<FrameTriplet> {
    if frames.len() < 4 {
        return Err(Error::precondition(
            "apply_skip",
            format!("need a sequence of at least 4 frames, got {}", frames.len()),
        ));
    }
    if !(0.0..=1.0).contains(&p_skip) {
        return Err(Error::config("p_skip", format!("must lie in [0, 1], got {p_skip}")));
    }
    let s = rng.gen::<f64>() < p_skip;
    let last = if s { 3 } else { 2 };
    let mut t = FrameTriplet::new([frames[0].clone(), frames[1].clone(), frames[last].clone()])?;
    t.skip = Some(s);
    if let Some(l) = latent {
        t.latent = Some([l[0].clone(), l[1].clone(), l[last].clone()]);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq() -> Vec<Tensor> {
        (0..4).map(|i| Tensor::full(&[1, 2, 2], i as f64 / 4.0)).collect()
    }

    #[test]
    fn extreme_probabilities_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let t = apply_skip(&seq(), None, 0.0, &mut rng).unwrap();
            assert_eq!(t.skip, Some(false));
            assert_eq!(t.frames[2], seq()[2]);
            let t = apply_skip(&seq(), None, 1.0, &mut rng).unwrap();
            assert_eq!(t.skip, Some(true));
            assert_eq!(t.frames[2], seq()[3]);
        }
    }

    #[test]
    fn fair_coin_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let frames = seq();
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| apply_skip(&frames, None, 0.5, &mut rng).unwrap().skip == Some(true))
            .count();
        let rate = hits as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }

    #[test]
    fn short_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_skip(&seq()[..3], None, 0.5, &mut rng).is_err());
    }
}
