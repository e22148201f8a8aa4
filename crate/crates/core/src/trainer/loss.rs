//! Scalar objectives and their gradients with respect to their inputs.

use crate::error::{Error, Result};
use crate::quantizer::sigmoid;

/// Value and gradient of a loss with respect to each of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Graded list-wise InfoNCE, together with gradients for the per-document
/// sims and the in-batch sims.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub value: f64,
    pub grad_sims: Vec<f64>,
    pub grad_cross: Vec<f64>,
}

fn check_labels(sims: &[f64], labels: &[u32]) -> Result<()> {
    if sims.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: sims.len(),
        });
    }
    Ok(())
}

/// Mean over documents `d_i` of
/// `-log(exp(s_i/τ) / (exp(s_i/τ) + Σ_{j ∈ N(d_i)} exp(s_j/τ)))`, where
/// `N(d_i)` holds every document with a strictly lower label plus every
/// in-batch sim in `cross`.
pub fn infonce_loss(sims: &[f64], labels: &[u32], cross: &[f64], tau: f64) -> Result<f64> {
    infonce_with_grad(sims, labels, cross, tau).map(|g| g.value)
}

pub fn infonce_with_grad(sims: &[f64], labels: &[u32], cross: &[f64], tau: f64) -> Result<InfoNceGrad> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    check_labels(sims, labels)?;
    let n = sims.len();
    let mut grad_sims = vec![0.0; n];
    let mut grad_cross = vec![0.0; cross.len()];
    if n == 0 {
        return Ok(InfoNceGrad {
            value: 0.0,
            grad_sims,
            grad_cross,
        });
    }
    let mut total = 0.0;
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        negatives.clear();
        negatives.extend((0..n).filter(|&j| labels[i] > labels[j]));
        let own = sims[i] / tau;
        let max = negatives
            .iter()
            .map(|&j| sims[j] / tau)
            .chain(cross.iter().map(|&c| c / tau))
            .fold(own, f64::max);
        let e_own = (own - max).exp();
        let e_neg: Vec<f64> = negatives.iter().map(|&j| (sims[j] / tau - max).exp()).collect();
        let e_cross: Vec<f64> = cross.iter().map(|&c| (c / tau - max).exp()).collect();
        let z = e_own + e_neg.iter().sum::<f64>() + e_cross.iter().sum::<f64>();
        total += -(own - max) + z.ln();

        let scale = 1.0 / (n as f64 * tau);
        grad_sims[i] += (e_own / z - 1.0) * scale;
        for (&j, e) in negatives.iter().zip(&e_neg) {
            grad_sims[j] += e / z * scale;
        }
        for (g, e) in grad_cross.iter_mut().zip(&e_cross) {
            *g += e / z * scale;
        }
    }
    Ok(InfoNceGrad {
        value: total / n as f64,
        grad_sims,
        grad_cross,
    })
}

/// Mean of `1 - sim` over the documents carrying the top label.
pub fn matching_loss(sims: &[f64], labels: &[u32]) -> Result<f64> {
    matching_with_grad(sims, labels).map(|g| g.value)
}

pub fn matching_with_grad(sims: &[f64], labels: &[u32]) -> Result<LossGrad> {
    check_labels(sims, labels)?;
    let top = *labels.iter().max().ok_or(Error::Empty("matching loss documents"))?;
    let count = labels.iter().filter(|&&l| l == top).count() as f64;
    let mut grad = vec![0.0; sims.len()];
    let mut value = 0.0;
    for (i, (&s, &l)) in sims.iter().zip(labels).enumerate() {
        if l == top {
            value += 1.0 - s;
            grad[i] = -1.0 / count;
        }
    }
    Ok(LossGrad {
        value: value / count,
        grad,
    })
}

/// `(1/M) Σ_i Σ_t (|σ(low_i[t]) − 0.5| − 0.5)²` over `M` down-projected tokens.
pub fn quant_reg_loss(lows: &[Vec<f64>]) -> f64 {
    quant_reg_with_grad(lows).0
}

/// Returns the loss and the gradient for each token's low vector.
pub fn quant_reg_with_grad(lows: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    if lows.is_empty() {
        return (0.0, Vec::new());
    }
    let m = lows.len() as f64;
    let mut value = 0.0;
    let grads = lows
        .iter()
        .map(|low| {
            low.iter()
                .map(|&x| {
                    let s = sigmoid(x);
                    let u = s - 0.5;
                    let gap = u.abs() - 0.5;
                    value += gap * gap;
                    let sign = if u > 0.0 {
                        1.0
                    } else if u < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    2.0 * gap * sign * s * (1.0 - s) / m
                })
                .collect()
        })
        .collect();
    (value / m, grads)
}

/// Mean of `(score / rank_tokens − teacher)²`.
pub fn distill_mse_loss(scores: &[f64], teacher: &[f64], rank_tokens: usize) -> Result<f64> {
    distill_with_grad(scores, teacher, rank_tokens).map(|g| g.value)
}

pub fn distill_with_grad(scores: &[f64], teacher: &[f64], rank_tokens: usize) -> Result<LossGrad> {
    if scores.len() != teacher.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher.len(),
            actual: scores.len(),
        });
    }
    if rank_tokens == 0 {
        return Err(Error::Config("rank token count must be positive".into()));
    }
    if scores.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grad: Vec::new(),
        });
    }
    let n = scores.len() as f64;
    let m = rank_tokens as f64;
    let mut value = 0.0;
    let grad = scores
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let r = s / m - t;
            value += r * r;
            2.0 * r / (m * n)
        })
        .collect();
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infonce_cases() {
        assert_eq!(infonce_loss(&[0.3], &[1], &[], 0.05).unwrap(), 0.0);

        let l = infonce_loss(&[0.4, 0.4], &[2, 1], &[], 0.05).unwrap();
        assert!((l - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);

        // Hand evaluation at τ = 1:
        // d1 (label 2): negatives {d2, d3}; d2 (label 1): {d3}; d3: none.
        let s = [0.9f64, 0.5, 0.1];
        let d1 = -(s[0].exp() / (s[0].exp() + s[1].exp() + s[2].exp())).ln();
        let d2 = -(s[1].exp() / (s[1].exp() + s[2].exp())).ln();
        let expected = (d1 + d2 + 0.0) / 3.0;
        let got = infonce_loss(&s, &[2, 1, 0], &[], 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        assert!(infonce_loss(&[0.1], &[0], &[], 0.0).is_err());
        assert!(infonce_loss(&[0.1, 0.2], &[0], &[], 1.0).is_err());
    }

    #[test]
    fn infonce_cross_negatives_apply_to_every_doc() {
        let s = [0.2f64, 0.1];
        let c = [0.3f64];
        let d1 = -(s[0].exp() / (s[0].exp() + s[1].exp() + c[0].exp())).ln();
        let d2 = -(s[1].exp() / (s[1].exp() + c[0].exp())).ln();
        let got = infonce_loss(&s, &[1, 0], &c, 1.0).unwrap();
        assert!((got - (d1 + d2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn infonce_grad_matches_fd() {
        let sims = [0.3, -0.2, 0.7, 0.1];
        let labels = [2, 1, 2, 0];
        let cross = [0.25, -0.4];
        let tau = 0.3;
        let g = infonce_with_grad(&sims, &labels, &cross, tau).unwrap();
        let h = 1e-6;
        for i in 0..sims.len() {
            let mut p = sims;
            let mut m = sims;
            p[i] += h;
            m[i] -= h;
            let fd = (infonce_loss(&p, &labels, &cross, tau).unwrap()
                - infonce_loss(&m, &labels, &cross, tau).unwrap())
                / (2.0 * h);
            assert!((fd - g.grad_sims[i]).abs() < 1e-7);
        }
        for k in 0..cross.len() {
            let mut p = cross;
            let mut m = cross;
            p[k] += h;
            m[k] -= h;
            let fd = (infonce_loss(&sims, &labels, &p, tau).unwrap()
                - infonce_loss(&sims, &labels, &m, tau).unwrap())
                / (2.0 * h);
            assert!((fd - g.grad_cross[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn matching_cases() {
        assert_eq!(matching_loss(&[1.0, 1.0, 0.2], &[3, 3, 1]).unwrap(), 0.0);
        let l = matching_loss(&[0.5, 0.7, 0.0, -0.3], &[2, 2, 1, 0]).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
        assert_eq!(matching_loss(&[-1.0], &[0]).unwrap(), 2.0);
        assert!(matching_loss(&[], &[]).is_err());
    }

    #[test]
    fn reg_cases() {
        assert_eq!(quant_reg_loss(&[vec![0.0; 4]]), 1.0);
        let l = quant_reg_loss(&[vec![0.0, 10.0]]);
        let s10 = 1.0 / (1.0 + (-10.0f64).exp());
        let expected = 0.25 + ((s10 - 0.5).abs() - 0.5).powi(2);
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.25).abs() < 1e-8);
        assert!(quant_reg_loss(&[vec![800.0, -800.0]]) < 1e-300);
    }

    #[test]
    fn distill_cases() {
        assert_eq!(distill_mse_loss(&[2.0, 1.0], &[0.5, 0.25], 4).unwrap(), 0.0);
        assert_eq!(distill_mse_loss(&[2.0], &[0.0], 4).unwrap(), 0.25);
        assert!(distill_mse_loss(&[2.0], &[], 4).is_err());
    }
}
