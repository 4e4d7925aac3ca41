//! Differentiable numeric operators behind the fusion model.
//!
//! Every operator is a pure function over slices and comes with an analytic
//! gradient companion. The autograd tape calls these directly, so the
//! finite-difference checks in this module cover the training path too.
//!
//! Logarithms are natural. Probabilities are clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log is taken.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Added to the denominator of the cosine penalty so zero vectors are safe.
pub const ORTH_EPS: f64 = 1e-12;

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "{name}[{i}] is not finite ({})",
            v[i]
        ))),
        None => Ok(()),
    }
}

fn check_pair(h1: &[f64], h2: &[f64]) -> Result<()> {
    if h1.len() != h2.len() {
        return Err(Error::Shape(format!(
            "operand lengths differ: {} vs {}",
            h1.len(),
            h2.len()
        )));
    }
    if h1.is_empty() {
        return Err(Error::InvalidInput("empty operands".into()));
    }
    check_finite("h1", h1)?;
    check_finite("h2", h2)
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Unclamped logistic function, stable for large |h|.
#[inline]
pub(crate) fn logistic(h: f64) -> f64 {
    if h >= 0.0 {
        1.0 / (1.0 + (-h).exp())
    } else {
        let e = h.exp();
        e / (1.0 + e)
    }
}

/// `ln(e^a + e^b + e^c)` without overflow.
#[inline]
fn log_sum_exp3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Softmax weights of three logits.
#[inline]
fn softmax3(a: f64, b: f64, c: f64) -> [f64; 3] {
    let m = a.max(b).max(c);
    let (ea, eb, ec) = ((a - m).exp(), (b - m).exp(), (c - m).exp());
    let s = ea + eb + ec;
    [ea / s, eb / s, ec / s]
}

/// Elementwise logistic, clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn sigmoid(h: &[f64]) -> Result<Vec<f64>> {
    check_finite("h", h)?;
    Ok(h.iter().map(|&x| clamp_prob(logistic(x))).collect())
}

/// Derivative of [`sigmoid`]; zero where the clamp is active.
pub fn sigmoid_grad(h: &[f64]) -> Vec<f64> {
    h.iter()
        .map(|&x| {
            let s = logistic(x);
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
                0.0
            } else {
                s * (1.0 - s)
            }
        })
        .collect()
}

/// Elementwise `ln(p / (1 - p))` after clamping.
pub fn logit(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = p.iter().position(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidInput(format!(
            "p[{i}] = {} lies outside [0, 1]",
            p[i]
        )));
    }
    Ok(p.iter()
        .map(|&x| {
            let x = clamp_prob(x);
            (x / (1.0 - x)).ln()
        })
        .collect())
}

/// Derivative of [`logit`]; zero where the clamp is active.
pub fn logit_grad(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&x| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&x) {
                0.0
            } else {
                1.0 / (x * (1.0 - x))
            }
        })
        .collect()
}

/// Logits of the equal mixture of the Bernoulli distributions induced by
/// `h1` and `h2`: `logit((σ(h1) + σ(h2)) / 2)`.
///
/// Evaluated as `ln(2e^{a+b} + e^a + e^b) - ln(2 + e^a + e^b)` with both
/// terms in log-sum-exp form, so no clamping is involved.
pub fn logit_pool(h1: &[f64], h2: &[f64]) -> Result<Vec<f64>> {
    check_pair(h1, h2)?;
    let ln2 = std::f64::consts::LN_2;
    Ok(h1
        .iter()
        .zip(h2)
        .map(|(&a, &b)| {
            // Fixed operand order keeps the result exactly symmetric.
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            log_sum_exp3(ln2 + a + b, a, b) - log_sum_exp3(ln2, a, b)
        })
        .collect())
}

/// Elementwise partial derivatives of [`logit_pool`] w.r.t. each operand.
pub fn logit_pool_grad(h1: &[f64], h2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(h1, h2)?;
    let ln2 = std::f64::consts::LN_2;
    let mut g1 = Vec::with_capacity(h1.len());
    let mut g2 = Vec::with_capacity(h1.len());
    for (&a, &b) in h1.iter().zip(h2) {
        let num = softmax3(ln2 + a + b, a, b);
        let den = softmax3(ln2, a, b);
        g1.push(num[0] + num[1] - den[1]);
        g2.push(num[0] + num[2] - den[2]);
    }
    Ok((g1, g2))
}

/// Jensen-Shannon divergence between the factorized Bernoulli distributions
/// with logits `h1` and `h2`, averaged over dimensions.
///
/// The result lies in `[0, ln 2]`.
pub fn jsd_from_logits(h1: &[f64], h2: &[f64]) -> Result<f64> {
    check_pair(h1, h2)?;
    let total: f64 = h1
        .iter()
        .zip(h2)
        .map(|(&a, &b)| {
            let p = clamp_prob(logistic(a));
            let q = clamp_prob(logistic(b));
            bernoulli_jsd(p, q)
        })
        .sum();
    Ok(total / h1.len() as f64)
}

fn bernoulli_jsd(p: f64, q: f64) -> f64 {
    let m = 0.5 * (p + q);
    let kl = |x: f64| x * (x / m).ln() + (1.0 - x) * ((1.0 - x) / (1.0 - m)).ln();
    0.5 * (kl(p) + kl(q))
}

/// Gradient of [`jsd_from_logits`] w.r.t. both logit vectors.
pub fn jsd_from_logits_grad(h1: &[f64], h2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(h1, h2)?;
    let n = h1.len() as f64;
    let dp = sigmoid_grad(h1);
    let dq = sigmoid_grad(h2);
    let mut g1 = Vec::with_capacity(h1.len());
    let mut g2 = Vec::with_capacity(h1.len());
    for i in 0..h1.len() {
        let p = clamp_prob(logistic(h1[i]));
        let q = clamp_prob(logistic(h2[i]));
        let m = 0.5 * (p + q);
        // The mixture's own derivative terms cancel.
        let d_p = 0.5 * ((p / m).ln() - ((1.0 - p) / (1.0 - m)).ln());
        let d_q = 0.5 * ((q / m).ln() - ((1.0 - q) / (1.0 - m)).ln());
        g1.push(d_p * dp[i] / n);
        g2.push(d_q * dq[i] / n);
    }
    Ok((g1, g2))
}

/// Absolute cosine similarity `|<h1, h2>| / (‖h1‖·‖h2‖ + ORTH_EPS)`.
pub fn orthogonality_penalty(h1: &[f64], h2: &[f64]) -> Result<f64> {
    check_pair(h1, h2)?;
    let dot: f64 = h1.iter().zip(h2).map(|(a, b)| a * b).sum();
    let n1 = norm(h1);
    let n2 = norm(h2);
    Ok(dot.abs() / (n1 * n2 + ORTH_EPS))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of [`orthogonality_penalty`].
pub fn orthogonality_penalty_grad(h1: &[f64], h2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(h1, h2)?;
    let dot: f64 = h1.iter().zip(h2).map(|(a, b)| a * b).sum();
    let n1 = norm(h1);
    let n2 = norm(h2);
    let den = n1 * n2 + ORTH_EPS;
    let sign = if dot > 0.0 {
        1.0
    } else if dot < 0.0 {
        -1.0
    } else {
        0.0
    };
    let abs_dot = dot.abs();
    let grad = |own: &[f64], other: &[f64], own_norm: f64, other_norm: f64| -> Vec<f64> {
        own.iter()
            .zip(other)
            .map(|(&x, &y)| {
                let dnorm = if own_norm > 0.0 {
                    other_norm * x / own_norm
                } else {
                    0.0
                };
                sign * y / den - abs_dot * dnorm / (den * den)
            })
            .collect()
    };
    Ok((grad(h1, h2, n1, n2), grad(h2, h1, n2, n1)))
}

/// Softmax of `(scores + mask) / sqrt(d)` where `mask` entries are `0`
/// (visible) or `-inf` (hidden). Hidden entries come out exactly zero.
pub fn masked_scaled_attention(scores: &[f64], mask: &[f64], d: usize) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Shape(format!(
            "scores has {} entries, mask has {}",
            scores.len(),
            mask.len()
        )));
    }
    if d == 0 {
        return Err(Error::InvalidConfig(
            "attention scale d must be positive".into(),
        ));
    }
    check_finite("scores", scores)?;
    if let Some(i) = mask
        .iter()
        .position(|&m| !(m == 0.0 || m == f64::NEG_INFINITY))
    {
        return Err(Error::InvalidMask(format!(
            "mask[{i}] = {} is neither 0 nor -inf",
            mask[i]
        )));
    }
    let visible: Vec<bool> = mask.iter().map(|&m| m == 0.0).collect();
    if !visible.iter().any(|&v| v) {
        return Err(Error::InvalidMask("every entry is masked".into()));
    }
    Ok(softmax_visible(scores, &visible, 1.0 / (d as f64).sqrt()))
}

/// Softmax of `scale·scores` over `visible` entries; hidden entries are 0.
pub(crate) fn softmax_visible(scores: &[f64], visible: &[bool], scale: f64) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .zip(visible)
        .map(|(&s, &v)| if v { (s * scale - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Vector-Jacobian product of a scaled softmax given its output `probs`.
pub fn masked_scaled_attention_backward(probs: &[f64], grad_out: &[f64], d: usize) -> Vec<f64> {
    softmax_backward(probs, grad_out, 1.0 / (d as f64).sqrt())
}

pub(crate) fn softmax_backward(probs: &[f64], grad_out: &[f64], scale: f64) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_out).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_out)
        .map(|(&p, &g)| scale * p * (g - dot))
        .collect()
}

fn check_rank_inputs(alpha: &Matrix, aux_losses: &Matrix, epsilon: f64) -> Result<()> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "ranking margin must be a non-negative number, got {epsilon}"
        )));
    }
    if alpha.shape() != aux_losses.shape() {
        return Err(Error::Shape(format!(
            "alpha is {:?} but aux losses are {:?}",
            alpha.shape(),
            aux_losses.shape()
        )));
    }
    if alpha.rows() == 0 {
        return Err(Error::InvalidInput("no classes".into()));
    }
    Ok(())
}

/// Margin ranking loss pushing, per class, the attention weight of a
/// representation with lower auxiliary loss above that of every
/// representation with higher loss by at least `epsilon`.
///
/// Only ordered pairs with `ℓ_ci < ℓ_cj` (strict) contribute; the result is
/// normalized by `2·|C|`. `aux_losses` are constants.
pub fn margin_rank_attn_loss(alpha: &Matrix, aux_losses: &Matrix, epsilon: f64) -> Result<f64> {
    check_rank_inputs(alpha, aux_losses, epsilon)?;
    let mut total = 0.0;
    for c in 0..alpha.rows() {
        let (a, l) = (alpha.row(c), aux_losses.row(c));
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j && l[i] < l[j] {
                    total += (a[j] - a[i] + epsilon).max(0.0);
                }
            }
        }
    }
    Ok(total / (2.0 * alpha.rows() as f64))
}

/// Gradient of [`margin_rank_attn_loss`] w.r.t. `alpha`.
pub fn margin_rank_attn_loss_grad(
    alpha: &Matrix,
    aux_losses: &Matrix,
    epsilon: f64,
) -> Result<Matrix> {
    check_rank_inputs(alpha, aux_losses, epsilon)?;
    let norm = 1.0 / (2.0 * alpha.rows() as f64);
    let mut grad = Matrix::zeros(alpha.rows(), alpha.cols());
    for c in 0..alpha.rows() {
        let (a, l) = (alpha.row(c), aux_losses.row(c));
        let mut g = vec![0.0; a.len()];
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j && l[i] < l[j] && a[j] - a[i] + epsilon > 0.0 {
                    g[j] += norm;
                    g[i] -= norm;
                }
            }
        }
        grad.row_mut(c).copy_from_slice(&g);
    }
    Ok(grad)
}

fn check_bce(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput(format!(
            "label {i} = {} not in [0, 1]",
            y[i]
        )));
    }
    check_finite("y_hat", y_hat)
}

/// Per-class `-[y ln ŷ + (1-y) ln(1-ŷ)]` with `ŷ` clamped.
pub fn binary_cross_entropy(y: &[f64], y_hat: &[f64]) -> Result<Vec<f64>> {
    check_bce(y, y_hat)?;
    Ok(y.iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            let p = clamp_prob(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .collect())
}

/// Derivative of [`binary_cross_entropy`] w.r.t. `ŷ`; zero where clamped.
pub fn binary_cross_entropy_grad(y: &[f64], y_hat: &[f64]) -> Result<Vec<f64>> {
    check_bce(y, y_hat)?;
    Ok(y.iter()
        .zip(y_hat)
        .map(|(&t, &p)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                -t / p + (1.0 - t) / (1.0 - p)
            }
        })
        .collect())
}

/// Mean squared difference; the alignment used by the "MSE alignment" ablation.
pub fn mean_squared_error(h1: &[f64], h2: &[f64]) -> Result<f64> {
    check_pair(h1, h2)?;
    Ok(h1
        .iter()
        .zip(h2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / h1.len() as f64)
}

pub fn mean_squared_error_grad(h1: &[f64], h2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(h1, h2)?;
    let k = 2.0 / h1.len() as f64;
    let g1: Vec<f64> = h1.iter().zip(h2).map(|(a, b)| k * (a - b)).collect();
    let g2 = g1.iter().map(|g| -g).collect();
    Ok((g1, g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    /// Central differences of a scalar function of one vector.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + FD_STEP;
                let up = f(&x);
                x[i] = orig - FD_STEP;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(
                rel < FD_TOL,
                "{what}[{i}]: analytic {a} vs numeric {n} (rel {rel})"
            );
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    #[test]
    fn sigmoid_examples() {
        let out = sigmoid(&[0.0, 40.0, 4f64.ln()]).unwrap();
        assert_eq!(out[0], 0.5);
        assert_eq!(out[1], 1.0 - 1e-7);
        assert_abs_diff_eq!(out[2], 0.8, epsilon = 1e-12);
        assert!(sigmoid(&[f64::NAN]).is_err());
        assert!(sigmoid(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn logit_examples() {
        let out = logit(&[0.5, 0.8]).unwrap();
        assert_eq!(out[0], 0.0);
        assert_abs_diff_eq!(out[1], 1.386294361, epsilon = 1e-9);
        assert!(logit(&[1.5]).is_err());
        assert!(logit(&[-0.1]).is_err());
    }

    #[test]
    fn sigmoid_inverts_logit() {
        let ps: Vec<f64> = (0..=1000)
            .map(|i| 1e-6 + (1.0 - 2e-6) * i as f64 / 1000.0)
            .collect();
        let back = sigmoid(&logit(&ps).unwrap()).unwrap();
        for (p, b) in ps.iter().zip(&back) {
            assert!((p - b).abs() < 1e-9);
        }
    }

    #[test]
    fn logit_pool_examples() {
        let out = logit_pool(&[0.0, 1.5, 4f64.ln()], &[0.0, 1.5, (2.0f64 / 3.0).ln()]).unwrap();
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 1.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 0.405465, epsilon = 1e-6);
        assert!(matches!(
            logit_pool(&[0.0], &[0.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn logit_pool_matches_probability_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-30.0..30.0);
            let b: f64 = rng.random_range(-30.0..30.0);
            let mixed = 0.5 * (logistic(a) + logistic(b));
            // Reference logit computed from both tails to stay accurate near 1.
            let tail = 0.5 * (logistic(-a) + logistic(-b));
            let reference = (mixed / tail).ln();
            let pooled = logit_pool(&[a], &[b]).unwrap()[0];
            assert!(
                (pooled - reference).abs() < 1e-9,
                "{a} {b}: {pooled} vs {reference}"
            );
        }
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd_from_logits(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);

        // Saturated logits clamp to p = 1 - 1e-7 and q = 1e-7, so the value
        // falls short of ln 2 by the binary entropy of 1e-7.
        let p: f64 = 1e-7;
        let entropy = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let saturated = jsd_from_logits(&[20.0], &[-20.0]).unwrap();
        assert_abs_diff_eq!(saturated, std::f64::consts::LN_2 - entropy, epsilon = 1e-12);
        assert_abs_diff_eq!(saturated, std::f64::consts::LN_2, epsilon = 2e-6);

        // Four-term brute-force sum including complements.
        let (p, q) = (0.75f64, 0.25f64);
        let m = 0.5 * (p + q);
        let brute = 0.5
            * (p * (p / m).ln()
                + (1.0 - p) * ((1.0 - p) / (1.0 - m)).ln()
                + q * (q / m).ln()
                + (1.0 - q) * ((1.0 - q) / (1.0 - m)).ln());
        let lg = logit(&[0.75, 0.25]).unwrap();
        let got = jsd_from_logits(&lg[..1], &lg[1..]).unwrap();
        assert_abs_diff_eq!(got, brute, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.130812, epsilon = 1e-6);
    }

    #[test]
    fn orthogonality_examples() {
        assert_eq!(
            orthogonality_penalty(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            0.0
        );
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(orthogonality_penalty(&v, &v).unwrap(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(
            orthogonality_penalty(&v, &neg).unwrap(),
            1.0,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            orthogonality_penalty(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-10
        );
        let zero = orthogonality_penalty(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(zero, 0.0);
        let (g1, g2) = orthogonality_penalty_grad(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(g1.iter().chain(&g2).all(|g| g.is_finite()));
    }

    #[test]
    fn attention_examples() {
        let out = masked_scaled_attention(&[0.7, 0.7, 0.7], &[0.0; 3], 4).unwrap();
        for o in out {
            assert_abs_diff_eq!(o, 1.0 / 3.0, epsilon = 1e-15);
        }
        let out =
            masked_scaled_attention(&[0.7, 0.7, 0.7], &[0.0, 0.0, f64::NEG_INFINITY], 4).unwrap();
        assert_eq!(out[2], 0.0);
        assert_abs_diff_eq!(out[0], 0.5, epsilon = 1e-15);
        let out = masked_scaled_attention(&[1.0, 2.0, 3.0], &[0.0; 3], 1).unwrap();
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, o) in out.iter().enumerate() {
            assert_abs_diff_eq!(*o, ((k + 1) as f64).exp() / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(out[0], 0.090031, epsilon = 1e-6);
        assert_abs_diff_eq!(out[1], 0.244728, epsilon = 1e-6);
        assert_abs_diff_eq!(out[2], 0.665241, epsilon = 1e-6);

        let all_masked = [f64::NEG_INFINITY; 3];
        assert!(matches!(
            masked_scaled_attention(&[1.0, 2.0, 3.0], &all_masked, 1),
            Err(Error::InvalidMask(_))
        ));
        assert!(matches!(
            masked_scaled_attention(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0], 1),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn ranking_loss_examples() {
        let one = |v: [f64; 3]| Matrix::row_vector(v.to_vec());
        let loss = margin_rank_attn_loss(&one([0.1, 0.3, 0.6]), &one([0.3, 0.2, 0.1]), 0.1);
        assert_eq!(loss.unwrap(), 0.0);
        let loss = margin_rank_attn_loss(&one([0.2, 0.3, 0.5]), &one([0.1, 0.2, 0.3]), 0.1);
        assert_abs_diff_eq!(loss.unwrap(), 0.45, epsilon = 1e-12);
        let third = 1.0 / 3.0;
        let loss = margin_rank_attn_loss(&one([third; 3]), &one([0.4; 3]), 0.1);
        assert_eq!(loss.unwrap(), 0.0);
        assert!(matches!(
            margin_rank_attn_loss(&one([third; 3]), &one([0.4; 3]), -0.1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let out = binary_cross_entropy(&[1.0, 1.0, 0.0], &[1.0 - 1e-7, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(out[0], 1e-7, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(matches!(
            binary_cross_entropy(&[1.0], &[0.5, 0.5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let d = 1 + trial % 8;
            let a = random_vec(&mut rng, d);
            let b = random_vec(&mut rng, d);

            let ga = sigmoid_grad(&a);
            for i in 0..d {
                let n = numeric_grad(&a[i..=i], |x| sigmoid(x).unwrap()[0]);
                assert_grad_close(&ga[i..=i], &n, "sigmoid");
            }

            let probs: Vec<f64> = a.iter().map(|&x| 0.01 + 0.98 * logistic(x)).collect();
            let gl = logit_grad(&probs);
            for i in 0..d {
                let n = numeric_grad(&probs[i..=i], |x| logit(x).unwrap()[0]);
                assert_grad_close(&gl[i..=i], &n, "logit");
            }

            let (g1, g2) = logit_pool_grad(&a, &b).unwrap();
            for i in 0..d {
                let n1 = numeric_grad(&a[i..=i], |x| logit_pool(x, &b[i..=i]).unwrap()[0]);
                let n2 = numeric_grad(&b[i..=i], |x| logit_pool(&a[i..=i], x).unwrap()[0]);
                assert_grad_close(&g1[i..=i], &n1, "logit_pool h1");
                assert_grad_close(&g2[i..=i], &n2, "logit_pool h2");
            }

            let (g1, g2) = jsd_from_logits_grad(&a, &b).unwrap();
            assert_grad_close(
                &g1,
                &numeric_grad(&a, |x| jsd_from_logits(x, &b).unwrap()),
                "jsd h1",
            );
            assert_grad_close(
                &g2,
                &numeric_grad(&b, |x| jsd_from_logits(&a, x).unwrap()),
                "jsd h2",
            );

            let (g1, g2) = orthogonality_penalty_grad(&a, &b).unwrap();
            assert_grad_close(
                &g1,
                &numeric_grad(&a, |x| orthogonality_penalty(x, &b).unwrap()),
                "orth h1",
            );
            assert_grad_close(
                &g2,
                &numeric_grad(&b, |x| orthogonality_penalty(&a, x).unwrap()),
                "orth h2",
            );

            let (g1, g2) = mean_squared_error_grad(&a, &b).unwrap();
            assert_grad_close(
                &g1,
                &numeric_grad(&a, |x| mean_squared_error(x, &b).unwrap()),
                "mse h1",
            );
            assert_grad_close(
                &g2,
                &numeric_grad(&b, |x| mean_squared_error(&a, x).unwrap()),
                "mse h2",
            );

            // Attention: a fixed random upstream gradient turns the
            // vector-valued softmax into a scalar function.
            let scores = random_vec(&mut rng, 3);
            let upstream = random_vec(&mut rng, 3);
            let mask = if trial % 2 == 0 {
                [0.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, f64::NEG_INFINITY]
            };
            let scale_d = 1 + trial % 5;
            let probs = masked_scaled_attention(&scores, &mask, scale_d).unwrap();
            let analytic = masked_scaled_attention_backward(&probs, &upstream, scale_d);
            let numeric = numeric_grad(&scores, |s| {
                masked_scaled_attention(s, &mask, scale_d)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(p, g)| p * g)
                    .sum()
            });
            assert_grad_close(&analytic, &numeric, "attention");

            let classes = 1 + trial % 4;
            let alpha = Matrix::from_vec(classes, 3, random_vec(&mut rng, classes * 3)).unwrap();
            let losses = Matrix::from_vec(classes, 3, random_vec(&mut rng, classes * 3)).unwrap();
            let eps = rng.random_range(0.0..1.0);
            let analytic = margin_rank_attn_loss_grad(&alpha, &losses, eps).unwrap();
            let numeric = numeric_grad(alpha.data(), |x| {
                let a = Matrix::from_vec(classes, 3, x.to_vec()).unwrap();
                margin_rank_attn_loss(&a, &losses, eps).unwrap()
            });
            assert_grad_close(analytic.data(), &numeric, "ranking");

            let labels: Vec<f64> = (0..d).map(|i| ((i + trial) % 2) as f64).collect();
            let y_hat = probs_from(&a);
            let analytic = binary_cross_entropy_grad(&labels, &y_hat).unwrap();
            let numeric = numeric_grad(&y_hat, |p| {
                binary_cross_entropy(&labels, p).unwrap().iter().sum()
            });
            assert_grad_close(&analytic, &numeric, "bce");
        }
    }

    fn probs_from(h: &[f64]) -> Vec<f64> {
        h.iter().map(|&x| 0.02 + 0.96 * logistic(x)).collect()
    }

    fn logits(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-30.0f64..30.0, d)
    }

    fn logit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|d| (logits(d), logits(d)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn logit_pool_is_idempotent(h in (1usize..16).prop_flat_map(logits)) {
            let pooled = logit_pool(&h, &h).unwrap();
            for (p, x) in pooled.iter().zip(&h) {
                prop_assert!((p - x).abs() < 1e-9);
            }
        }

        #[test]
        fn logit_pool_is_symmetric_and_between((a, b) in logit_pair()) {
            let ab = logit_pool(&a, &b).unwrap();
            let ba = logit_pool(&b, &a).unwrap();
            prop_assert_eq!(&ab, &ba);
            for ((p, x), y) in ab.iter().zip(&a).zip(&b) {
                prop_assert!(*p >= x.min(*y) - 1e-12 && *p <= x.max(*y) + 1e-12);
            }
        }

        #[test]
        fn jsd_is_bounded_and_symmetric((a, b) in logit_pair()) {
            let ab = jsd_from_logits(&a, &b).unwrap();
            let ba = jsd_from_logits(&b, &a).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-15);
            let same = jsd_from_logits(&a, &a).unwrap();
            prop_assert_eq!(same, 0.0);
            let p = sigmoid(&a).unwrap();
            let q = sigmoid(&b).unwrap();
            if p != q {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn orthogonality_in_unit_range((a, b) in logit_pair()) {
            let v = orthogonality_penalty(&a, &b).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }

        #[test]
        fn attention_rows_are_stochastic(
            scores in prop::collection::vec(-20.0f64..20.0, 3),
            hide_third in any::<bool>(),
            shift in -50.0f64..50.0,
            d in 1usize..128,
        ) {
            let mask = [0.0, 0.0, if hide_third { f64::NEG_INFINITY } else { 0.0 }];
            let out = masked_scaled_attention(&scores, &mask, d).unwrap();
            prop_assert!(out.iter().all(|&p| p >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if hide_third {
                prop_assert_eq!(out[2], 0.0);
            }
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let out2 = masked_scaled_attention(&shifted, &mask, d).unwrap();
            for (x, y) in out.iter().zip(&out2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn ranking_loss_vanishes_on_correct_order(
            classes in prop::collection::vec(
                (prop::collection::vec(0.0f64..5.0, 3), 0.0f64..0.3),
                1..6,
            ),
        ) {
            // Build α so the lowest loss gets the largest weight, each gap ≥ ε.
            let eps = 0.1;
            let mut alpha = Matrix::zeros(classes.len(), 3);
            let mut losses = Matrix::zeros(classes.len(), 3);
            for (c, (l, base)) in classes.iter().enumerate() {
                let mut order: Vec<usize> = (0..3).collect();
                order.sort_by(|&i, &j| l[i].partial_cmp(&l[j]).unwrap());
                for (rank, &i) in order.iter().enumerate() {
                    alpha.set(c, i, base + (2 - rank) as f64 * (eps + 0.05));
                    losses.set(c, i, l[i]);
                }
            }
            prop_assert_eq!(margin_rank_attn_loss(&alpha, &losses, eps).unwrap(), 0.0);
        }
    }
}
