use rand::Rng;

use super::Ctx;
use crate::error::{LevitError, Result};
use crate::tensor::{ops, Element, Tensor, Var};
use crate::Mode;

/// Per-sample keep factors: 0 with probability `p`, otherwise `1 / (1 - p)`.
pub fn drop_path_factors<E: Element>(batch: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<E>> {
    if !(0.0..1.0).contains(&p) {
        return Err(LevitError::InvalidProbability(p));
    }
    let keep = E::from_f64(1.0 / (1.0 - p));
    Ok((0..batch).map(|_| if rng.random::<f64>() < p { E::zero() } else { keep }).collect())
}

/// Stochastic depth on a residual branch. Identity in eval mode or at `p = 0`.
pub fn drop_path<'t, E: Element>(ctx: &mut Ctx<'t, E>, branch: Var<'t, E>, p: f64) -> Result<Var<'t, E>> {
    if !(0.0..1.0).contains(&p) {
        return Err(LevitError::InvalidProbability(p));
    }
    if ctx.mode() == Mode::Eval || p == 0.0 {
        return Ok(branch);
    }
    let batch = branch.shape()[0];
    let factors = drop_path_factors(batch, p, ctx.rng())?;
    branch.scale_per_sample(factors)
}

/// Tape-free variant of [`drop_path`].
pub fn drop_path_tensor<E: Element>(branch: &Tensor<E>, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&p) {
        return Err(LevitError::InvalidProbability(p));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(branch.clone());
    }
    let factors = drop_path_factors(branch.shape()[0], p, rng)?;
    ops::scale_per_sample(branch, &factors)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_when_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::from_fn(&[4, 3], |i| i as f64);
        assert_eq!(drop_path_tensor(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(drop_path_tensor(&x, 0.0, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(drop_path_tensor(&x, 0.7, Mode::Eval, &mut rng).unwrap(), x);
    }

    #[test]
    fn rejects_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::ones(&[2, 2]);
        assert!(matches!(drop_path_tensor(&x, 1.0, Mode::Train, &mut rng), Err(LevitError::InvalidProbability(_))));
    }

    #[test]
    fn expectation_is_preserved() {
        // 10^4 trials of one sample with value 1 at p = 0.5: each draw is 0 or 2,
        // so the mean has standard error 1 / sqrt(10^4).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let x = Tensor::<f64>::ones(&[trials, 1]);
        let y = drop_path_tensor(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.sum() / trials as f64;
        let sigma = 1.0 / (trials as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
