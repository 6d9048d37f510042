//! Gumbel-softmax relaxation of categorical sampling.
//!
//! A sample is `softmax((logits + g) / temperature)` with `g` i.i.d.
//! standard Gumbel noise. In hard mode the forward value is the one-hot
//! vector at the argmax while gradients flow through the soft sample
//! (straight-through estimator).

use rand::Rng;

use super::func;
use super::tape::{Tape, Var};
use crate::error::{ensure, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub hard: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: DEFAULT_TEMPERATURE,
            hard: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            Contract,
            "Gumbel temperature must be positive, got {}",
            self.temperature
        );
        Ok(())
    }
}

/// `n` draws of standard Gumbel noise, `-ln(-ln U)`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // open interval keeps both logs finite
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed sample from noise already drawn; `noise` may be all zeros.
pub fn relaxed_sample(logits: &[f64], noise: &[f64], cfg: GumbelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    ensure!(
        logits.len() == noise.len(),
        Contract,
        "noise length {} does not match {} logits",
        noise.len(),
        logits.len()
    );
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / cfg.temperature)
        .collect();
    let soft = func::softmax(&perturbed);
    Ok(if cfg.hard { one_hot(soft.len(), func::argmax(&perturbed)) } else { soft })
}

/// Draws noise from `rng` and returns a relaxed (or one-hot) sample.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    logits: &[f64],
    cfg: GumbelConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let noise = gumbel_noise(rng, logits.len());
    relaxed_sample(logits, &noise, cfg)
}

/// Differentiable version on the tape. In hard mode the result carries the
/// one-hot value with the soft sample's gradient.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, noise: &[f64], cfg: GumbelConfig) -> Var {
    let shifted = tape.add_const(logits, noise);
    let scaled = tape.scale(shifted, 1.0 / cfg.temperature);
    let soft = tape.softmax(scaled);
    if cfg.hard {
        let hot = one_hot(noise.len(), func::argmax(tape.data(scaled)));
        tape.straight_through(soft, hot)
    } else {
        soft
    }
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_cold_limit_is_argmax() {
        let cfg = GumbelConfig {
            temperature: 1e-6,
            hard: true,
        };
        let s = relaxed_sample(&[0.1, 2.0, -1.0], &[0.0; 3], cfg).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 0.0]);
        let soft = relaxed_sample(&[0.1, 2.0, -1.0], &[0.0; 3], GumbelConfig { hard: false, ..cfg }).unwrap();
        assert!((soft[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn samples_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for hard in [false, true] {
            for _ in 0..200 {
                let cfg = GumbelConfig { temperature: 0.7, hard };
                let s = gumbel_softmax_sample(&[0.3, -0.2, 1.1], cfg, &mut rng).unwrap();
                assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(s.iter().all(|&x| x >= 0.0));
                if hard {
                    assert_eq!(s.iter().filter(|&&x| x == 1.0).count(), 1);
                } else {
                    assert!(s.iter().all(|&x| x > 0.0));
                }
            }
        }
    }

    #[test]
    fn seeded_samples_repeat() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            gumbel_softmax_sample(&[0.0, 0.5], GumbelConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let cfg = GumbelConfig { temperature: 0.0, hard: true };
        assert!(relaxed_sample(&[1.0], &[0.0], cfg).is_err());
    }

    #[test]
    fn straight_through_passes_soft_gradient() {
        let noise = [0.2, -0.4, 0.1];
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::vector(vec![0.5, 0.1, -0.3]));
        let hard = gumbel_softmax(&mut tape, logits, &noise, GumbelConfig { temperature: 0.5, hard: true });
        let weights = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let out = tape.dot(hard, weights);
        let g_hard = tape.backward(out).unwrap().wrt(logits);

        let mut tape2 = Tape::new();
        let logits2 = tape2.param(Tensor::vector(vec![0.5, 0.1, -0.3]));
        let soft = gumbel_softmax(&mut tape2, logits2, &noise, GumbelConfig { temperature: 0.5, hard: false });
        let weights2 = tape2.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let out2 = tape2.dot(soft, weights2);
        let g_soft = tape2.backward(out2).unwrap().wrt(logits2);

        assert_eq!(tape.data(hard), &[1.0, 0.0, 0.0]);
        assert_eq!(g_hard, g_soft);
    }
}
