//! Conditional intensity `lambda_k(u, v)` of an event of kind `k` between two
//! nodes, computed from their embeddings just before the event.
//!
//! Both forms pass a compatibility score through a scaled softplus,
//! `lambda = psi_k * log(1 + exp(score / psi_k))`:
//!
//! * concat: `score = omega_k . [z_u, z_v]`
//! * bilinear: `score = z_u^T Omega_k z_v`
//!
//! The bilinear score has a weight for every pair of features, one from each
//! endpoint, so it can express interactions the concatenation cannot.

use crate::autodiff::{func, Tape, Var};
use crate::config::Interaction;
use crate::events::EventKind;
use crate::params::{IntensityWeights, ParamStore};

/// Plain-value view of the intensity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityParams {
    pub interaction: Interaction,
    /// Effective positive rates.
    pub psi: [f64; 2],
    /// `omega_k` (length `2 dim`) or row-major `Omega_k` (`dim * dim`).
    pub compat: [Vec<f64>; 2],
    pub dim: usize,
}

impl IntensityParams {
    pub fn from_store(store: &ParamStore, interaction: Interaction) -> Self {
        let layout = store.layout().intensity;
        let compat = [
            store.tensor(layout.compat[0]).data().to_vec(),
            store.tensor(layout.compat[1]).data().to_vec(),
        ];
        let dim = match interaction {
            Interaction::Concat => compat[0].len() / 2,
            Interaction::Bilinear => (compat[0].len() as f64).sqrt() as usize,
        };
        IntensityParams {
            interaction,
            psi: store.psi(),
            compat,
            dim,
        }
    }

    pub fn score(&self, z_u: &[f64], z_v: &[f64], kind: EventKind) -> f64 {
        let w = &self.compat[kind.index()];
        match self.interaction {
            Interaction::Concat => {
                let d = z_u.len();
                dot(&w[..d], z_u) + dot(&w[d..], z_v)
            }
            Interaction::Bilinear => {
                let d = self.dim;
                z_u.iter()
                    .enumerate()
                    .map(|(i, &zi)| zi * dot(&w[i * d..(i + 1) * d], z_v))
                    .sum()
            }
        }
    }

    pub fn lambda(&self, z_u: &[f64], z_v: &[f64], kind: EventKind) -> f64 {
        let psi = self.psi[kind.index()];
        psi * func::softplus(self.score(z_u, z_v, kind) / psi)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `psi_k * log(1 + exp(omega_k . [z_u, z_v] / psi_k))`.
pub fn intensity_concat(z_u: &[f64], z_v: &[f64], omega: &[f64], psi: f64) -> f64 {
    let d = z_u.len();
    assert_eq!(omega.len(), 2 * d, "omega must have length 2 * dim");
    psi * func::softplus((dot(&omega[..d], z_u) + dot(&omega[d..], z_v)) / psi)
}

/// `psi_k * log(1 + exp(z_u^T Omega_k z_v / psi_k))` with `Omega_k` row-major.
pub fn intensity_bilinear(z_u: &[f64], z_v: &[f64], omega: &[f64], psi: f64) -> f64 {
    let d = z_u.len();
    assert_eq!(omega.len(), d * d, "Omega must be dim x dim");
    let score: f64 = z_u
        .iter()
        .enumerate()
        .map(|(i, &zi)| zi * dot(&omega[i * d..(i + 1) * d], z_v))
        .sum();
    psi * func::softplus(score / psi)
}

/// Differentiable intensity on the tape; `psi` is the vector of effective
/// rates (already passed through softplus).
pub fn intensity_on_tape(
    tape: &mut Tape,
    z_u: Var,
    z_v: Var,
    kind: EventKind,
    weights: &IntensityWeights<Var>,
    psi: Var,
    interaction: Interaction,
) -> Var {
    let w = weights.compat[kind.index()];
    let score = match interaction {
        Interaction::Concat => {
            let pair = tape.concat(&[z_u, z_v]);
            tape.dot(w, pair)
        }
        Interaction::Bilinear => {
            let right = tape.linear(z_v, w, None);
            tape.dot(z_u, right)
        }
    };
    let psi_k = tape.index(psi, kind.index());
    tape.softplus_scaled(score, psi_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_embeddings_give_psi_log2() {
        let z = [0.0; 3];
        for psi in [1.0, 0.5, 2.5] {
            assert_abs_diff_eq!(intensity_concat(&z, &z, &[0.3; 6], psi), psi * 2f64.ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(intensity_bilinear(&z, &z, &[0.7; 9], psi), psi * 2f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_bilinear_score() {
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let e1 = [1.0, 0.0, 0.0];
        assert_abs_diff_eq!(intensity_bilinear(&e1, &e1, &eye, 1.0), 1.313262, epsilon = 1e-6);
    }

    #[test]
    fn concat_matches_straight_line_recomputation() {
        let z_u = [0.2, -0.5];
        let z_v = [1.0, 0.25];
        let omega = [0.5, 1.0, -2.0, 4.0];
        // score = 0.1 - 0.5 - 2.0 + 1.0 = -1.4
        let psi = 0.8;
        let expect = psi * (1.0 + (-1.4f64 / psi).exp()).ln();
        assert_abs_diff_eq!(intensity_concat(&z_u, &z_v, &omega, psi), expect, epsilon = 1e-12);
    }

    #[test]
    fn generic_bilinear_is_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (rand_vec(&mut rng, 4, 1.0), rand_vec(&mut rng, 4, 1.0));
        let omega = rand_vec(&mut rng, 16, 1.0);
        assert!((intensity_bilinear(&a, &b, &omega, 1.0) - intensity_bilinear(&b, &a, &omega, 1.0)).abs() > 1e-6);
        let mut sym = omega.clone();
        for i in 0..4 {
            for j in 0..4 {
                sym[i * 4 + j] = omega[i * 4 + j] + omega[j * 4 + i];
            }
        }
        assert_abs_diff_eq!(
            intensity_bilinear(&a, &b, &sym, 1.0),
            intensity_bilinear(&b, &a, &sym, 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn positive_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // scores stay within |score / psi| < 700, where exp does not underflow
        for _ in 0..1000 {
            let a = rand_vec(&mut rng, 4, 1.0);
            let b = rand_vec(&mut rng, 4, 1.0);
            let psi = rng.random_range(0.1..5.0);
            assert!(intensity_concat(&a, &b, &rand_vec(&mut rng, 8, 3.0), psi) > 0.0);
            assert!(intensity_bilinear(&a, &b, &rand_vec(&mut rng, 16, 3.0), psi) > 0.0);
        }
    }

    #[test]
    fn tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 3;
        let a = rand_vec(&mut rng, d, 1.0);
        let b = rand_vec(&mut rng, d, 1.0);
        for interaction in [Interaction::Concat, Interaction::Bilinear] {
            let len = if interaction == Interaction::Concat { 2 * d } else { d * d };
            let compat = [rand_vec(&mut rng, len, 1.0), rand_vec(&mut rng, len, 1.0)];
            let params = IntensityParams {
                interaction,
                psi: [0.7, 1.3],
                compat: compat.clone(),
                dim: d,
            };
            let mut tape = Tape::new();
            let shape = if interaction == Interaction::Concat { vec![2 * d] } else { vec![d, d] };
            let w = IntensityWeights {
                psi_raw: tape.constant(Tensor::vector(vec![0.0; 2])),
                compat: [
                    tape.constant(Tensor::new(shape.clone(), compat[0].clone())),
                    tape.constant(Tensor::new(shape, compat[1].clone())),
                ],
            };
            let psi = tape.constant(Tensor::vector(vec![0.7, 1.3]));
            let (za, zb) = (tape.constant(Tensor::vector(a.clone())), tape.constant(Tensor::vector(b.clone())));
            for kind in [EventKind::Association, EventKind::Communication] {
                let lam = intensity_on_tape(&mut tape, za, zb, kind, &w, psi, interaction);
                assert_abs_diff_eq!(tape.scalar(lam), params.lambda(&a, &b, kind), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn lambda_increases_with_score() {
        let params = IntensityParams {
            interaction: Interaction::Concat,
            psi: [1.0, 0.3],
            compat: [vec![1.0, 0.0], vec![1.0, 0.0]],
            dim: 1,
        };
        let mut prev = 0.0;
        for i in -50..50 {
            let l = params.lambda(&[i as f64 * 0.2], &[0.0], EventKind::Communication);
            assert!(l > prev);
            prev = l;
        }
    }
}
