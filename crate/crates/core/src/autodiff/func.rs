//! Plain `f64` versions of the nonlinearities used by the models. The tape
//! ops call into these for their forward values, and evaluation code uses
//! them directly when no gradient is needed.

use crate::error::{ensure, Result};

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `psi * log(1 + exp(x / psi))`, the scaled softplus used for intensities.
pub fn softplus_scaled(x: f64, psi: f64) -> Result<f64> {
    ensure!(psi > 0.0, Contract, "softplus scale must be positive, got {psi}");
    Ok(psi * softplus(x / psi))
}

/// `out[c] = sum_ij x[i] * w[i, j, c] * y[j]` with `w` laid out row-major as
/// `[d_x, d_y, m]`.
pub fn bilinear_form(x: &[f64], w: &[f64], y: &[f64], m: usize) -> Result<Vec<f64>> {
    ensure!(
        w.len() == x.len() * y.len() * m,
        Contract,
        "bilinear weight has {} values, expected {}x{}x{}",
        w.len(),
        x.len(),
        y.len(),
        m
    );
    let dy = y.len();
    let mut out = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (j, &yj) in y.iter().enumerate() {
            let s = xi * yj;
            let base = (i * dy + j) * m;
            for (o, wv) in out.iter_mut().zip(&w[base..base + m]) {
                *o += s * wv;
            }
        }
    }
    Ok(out)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Shannon entropy in nats; `0 log 0` is taken as 0.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
