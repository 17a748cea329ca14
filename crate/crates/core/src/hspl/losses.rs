use serde::{Deserialize, Serialize};

use super::{LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Dims, Tensor};

const CON_EPS: f64 = 1e-8;
const PROB_EPS: f64 = 1e-7;

fn check_dims(v: &[f64], ma: &[f64], mb: &[f64]) -> Result<()> {
    if v.len() != ma.len() || v.len() != mb.len() {
        return Err(Error::ShapeMismatch(format!(
            "feature length {} vs prototypes {} and {}",
            v.len(),
            ma.len(),
            mb.len()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(|V - M_a|^2 - |V - M_b|^2) / max(|V - M_a|^2 + |V - M_b|^2, eps) + n`.
pub fn concentration_loss(v: &[f64], ma: &[f64], mb: &[f64], margin: f64) -> Result<f64> {
    check_dims(v, ma, mb)?;
    let a = sq_dist(v, ma);
    let b = sq_dist(v, mb);
    Ok((a - b) / (a + b).max(CON_EPS) + margin)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationGrad {
    pub loss: f64,
    pub d_v: Vec<f64>,
    pub d_ma: Vec<f64>,
    pub d_mb: Vec<f64>,
}

pub fn concentration_loss_grad(v: &[f64], ma: &[f64], mb: &[f64], margin: f64) -> Result<ConcentrationGrad> {
    check_dims(v, ma, mb)?;
    let a = sq_dist(v, ma);
    let b = sq_dist(v, mb);
    let (s, dl_da, dl_db) = if a + b > CON_EPS {
        let s = a + b;
        (s, 2.0 * b / (s * s), -2.0 * a / (s * s))
    } else {
        (CON_EPS, 1.0 / CON_EPS, -1.0 / CON_EPS)
    };
    let mut d_v = vec![0.0; v.len()];
    let mut d_ma = vec![0.0; v.len()];
    let mut d_mb = vec![0.0; v.len()];
    for i in 0..v.len() {
        let ra = 2.0 * (v[i] - ma[i]);
        let rb = 2.0 * (v[i] - mb[i]);
        d_v[i] = dl_da * ra + dl_db * rb;
        d_ma[i] = -dl_da * ra;
        d_mb[i] = -dl_db * rb;
    }
    Ok(ConcentrationGrad {
        loss: (a - b) / s + margin,
        d_v,
        d_ma,
        d_mb,
    })
}

fn check_grid(n_prob: usize, n_target: usize) -> Result<()> {
    if n_prob != n_target {
        return Err(Error::ShapeMismatch(format!(
            "probability map has {n_prob} voxels, target {n_target}"
        )));
    }
    Ok(())
}

/// Per-voxel focal loss and its derivative in probability.
fn focal_term(p: f64, t: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    if t {
        let q = 1.0 - p;
        let l = -alpha * q.powf(gamma) * p.ln();
        let d = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
        (l, d)
    } else {
        let q = 1.0 - p;
        let l = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let d = (1.0 - alpha) * (-gamma * p.powf(gamma - 1.0) * q.ln() + p.powf(gamma) / q);
        (l, d)
    }
}

/// Mean focal loss over voxels; probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(prob: &[f64], target: &[bool], gamma: f64, alpha: f64) -> Result<f64> {
    check_grid(prob.len(), target.len())?;
    if prob.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = prob
        .iter()
        .zip(target)
        .map(|(&p, &t)| focal_term(p.clamp(PROB_EPS, 1.0 - PROB_EPS), t, gamma, alpha).0)
        .sum();
    Ok(sum / prob.len() as f64)
}

/// Mean focal loss and its gradient with respect to each probability.
pub fn focal_loss_grad(prob: &[f64], target: &[bool], gamma: f64, alpha: f64) -> Result<(f64, Vec<f64>)> {
    check_grid(prob.len(), target.len())?;
    let n = prob.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(prob.len());
    for (&p, &t) in prob.iter().zip(target) {
        let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
        let (l, d) = focal_term(p.clamp(PROB_EPS, 1.0 - PROB_EPS), t, gamma, alpha);
        loss += l;
        grad.push(if inside { d / n } else { 0.0 });
    }
    Ok((loss / n, grad))
}

/// How the summed focal loss is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalNorm {
    /// Divide by the voxel count.
    #[default]
    Mean,
    /// Divide by the number of positive voxels (at least one).
    Positives,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss evaluated from logits, with its gradient in logit space.
pub fn focal_loss_logits(
    logits: &[f32],
    target: &[bool],
    gamma: f64,
    alpha: f64,
    norm: FocalNorm,
) -> Result<(f64, Vec<f32>)> {
    check_grid(logits.len(), target.len())?;
    let denom = match norm {
        FocalNorm::Mean => logits.len().max(1),
        FocalNorm::Positives => target.iter().filter(|&&t| t).count().max(1),
    } as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(target) {
        let z = z as f64;
        let p = sigmoid(z);
        let (l, d) = if t {
            let q = 1.0 - p;
            let ln_p = -softplus(-z);
            let w = alpha * q.powf(gamma);
            (-w * ln_p, w * (gamma * p * ln_p - q))
        } else {
            let ln_q = -softplus(z);
            let w = (1.0 - alpha) * p.powf(gamma);
            (-w * ln_q, w * (p - gamma * (1.0 - p) * ln_q))
        };
        loss += l;
        grad.push((d / denom) as f32);
    }
    Ok((loss / denom, grad))
}

/// Box-regression target at one responsible voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegTarget {
    pub voxel: Dims,
    /// Fractional position of the lesion centre inside the voxel cell, in [0, 1).
    pub offset: [f64; 3],
    /// `ln(diameter / anchor)`.
    pub log_size: f64,
}

fn reg_terms(reg: &Tensor, t: &RegTarget) -> ([f64; 4], [f64; 4]) {
    let [x, y, z] = t.voxel;
    let raw: [f64; 4] = std::array::from_fn(|c| reg.at(c, x, y, z) as f64);
    let mut err = [0.0; 4];
    let mut slope = [1.0; 4];
    for a in 0..3 {
        let s = sigmoid(raw[a]);
        err[a] = s - t.offset[a];
        slope[a] = s * (1.0 - s);
    }
    err[3] = raw[3] - t.log_size;
    (err, slope)
}

/// Mean over positives of the squared decoded-offset and log-size errors.
pub fn regression_loss(reg: &Tensor, targets: &[RegTarget]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let sum: f64 = targets
        .iter()
        .map(|t| reg_terms(reg, t).0.iter().map(|e| e * e).sum::<f64>())
        .sum();
    sum / targets.len() as f64
}

/// Loss and its gradient with respect to the four raw regression channels.
pub fn regression_loss_grad(reg: &Tensor, targets: &[RegTarget]) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(reg.channels(), reg.dims());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let k = targets.len() as f64;
    let mut loss = 0.0;
    for t in targets {
        let (err, slope) = reg_terms(reg, t);
        let [x, y, z] = t.voxel;
        for c in 0..4 {
            loss += err[c] * err[c];
            let g = grad.at(c, x, y, z) as f64 + 2.0 * err[c] * slope[c] / k;
            grad.set(c, x, y, z, g as f32);
        }
    }
    (loss / k, grad)
}

/// Weighted sum of the three terms; rejects non-finite inputs by name.
pub fn total_loss(l_cls: f64, l_reg: f64, l_con: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (term, value) in [("L_cls", l_cls), ("L_reg", l_reg), ("L_con", l_con)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value, step: None });
        }
    }
    Ok(LossBreakdown {
        l_cls,
        l_reg,
        l_con,
        l_final: w.lambda_cls * l_cls + w.lambda_reg * l_reg + w.lambda_con * l_con,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn concentration_examples() {
        let l = |v: &[f64], a: &[f64], b: &[f64]| concentration_loss(v, a, b, 1.0).unwrap();
        assert_eq!(l(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(l(&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]), 2.0);
        assert_eq!(l(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(l(&[0.3, 0.3], &[0.3, 0.3], &[0.3, 0.3]), 1.0);
        assert!(concentration_loss(&[1.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn focal_single_voxel_value() {
        let l = focal_loss(&[0.9], &[true], 2.0, 0.25).unwrap();
        let expect = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 2.634e-4).abs() < 5e-8);
    }

    #[test]
    fn focal_reduces_to_half_cross_entropy() {
        let p = [0.2, 0.7, 0.95, 0.4];
        let t = [true, false, true, false];
        let ce: f64 = p
            .iter()
            .zip(&t)
            .map(|(&p, &t): (&f64, &bool)| if t { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 4.0;
        assert!((focal_loss(&p, &t, 0.0, 0.5).unwrap() - 0.5 * ce).abs() < 1e-12);
    }

    #[test]
    fn focal_at_hard_targets_is_tiny() {
        let l = focal_loss(&[1.0, 0.0], &[true, false], 2.0, 0.25).unwrap();
        assert!(l >= 0.0 && l < 1e-7);
        assert!(focal_loss(&[0.5], &[true, false], 2.0, 0.25).is_err());
    }

    #[test]
    fn logit_focal_matches_probability_focal() {
        let z = [-3.0f32, -0.2, 0.0, 1.7, 4.0];
        let t = [true, false, true, false, true];
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v as f64)).collect();
        let (l, g) = focal_loss_logits(&z, &t, 2.0, 0.25, FocalNorm::Mean).unwrap();
        let (lp, gp) = focal_loss_grad(&p, &t, 2.0, 0.25).unwrap();
        assert!((l - lp).abs() < 1e-12);
        for i in 0..5 {
            let chain = gp[i] * p[i] * (1.0 - p[i]);
            assert!((g[i] as f64 - chain).abs() < 1e-7 * (1.0 + chain.abs()));
        }
        let (lpos, _) = focal_loss_logits(&z, &t, 2.0, 0.25, FocalNorm::Positives).unwrap();
        assert!((lpos - l * 5.0 / 3.0).abs() < 1e-12);
    }

    fn target(voxel: Dims, offset: [f64; 3], log_size: f64) -> RegTarget {
        RegTarget { voxel, offset, log_size }
    }

    #[test]
    fn regression_examples() {
        let reg = Tensor::zeros(4, [2, 2, 2]);
        assert_eq!(regression_loss(&reg, &[target([1, 0, 1], [0.5; 3], 0.0)]), 0.0);
        assert_eq!(regression_loss(&reg, &[]), 0.0);
        let l = regression_loss(&reg, &[target([0, 0, 0], [0.5, 0.0, 0.5], 0.0)]);
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let mut reg = Tensor::zeros(4, [3, 2, 2]);
        for (i, v) in reg.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f32 - 5.0) * 0.3;
        }
        let ts = [target([1, 1, 0], [0.2, 0.7, 0.4], 0.3), target([2, 0, 1], [0.9, 0.1, 0.5], -0.4)];
        let (_, g) = regression_loss_grad(&reg, &ts);
        for i in 0..reg.data().len() {
            let h = 1e-2f32;
            let mut p = reg.clone();
            p.data_mut()[i] += h;
            let mut m = reg.clone();
            m.data_mut()[i] -= h;
            let fd = (regression_loss(&p, &ts) - regression_loss(&m, &ts)) / (2.0 * h as f64);
            assert!((fd - g.data()[i] as f64).abs() < 1e-4, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let b = total_loss(0.4, 10.0, 1.0, &w).unwrap();
        assert!((b.l_final - 0.42).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap().l_final, 0.0);
        let no_con = LossWeights { lambda_con: 0.0, ..w.clone() };
        assert!((total_loss(0.4, 10.0, 1.7, &no_con).unwrap().l_final - 0.41).abs() < 1e-12);
        match total_loss(0.1, f64::NAN, 0.0, &w) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "L_reg"),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn concentration_is_rotation_invariant(
            v in prop::array::uniform2(-3.0f64..3.0),
            a in prop::array::uniform2(-3.0f64..3.0),
            b in prop::array::uniform2(-3.0f64..3.0),
            theta in 0.0f64..std::f64::consts::TAU,
        ) {
            let rot = |p: [f64; 2]| [theta.cos() * p[0] - theta.sin() * p[1], theta.sin() * p[0] + theta.cos() * p[1]];
            let l0 = concentration_loss(&v, &a, &b, 1.0).unwrap();
            let l1 = concentration_loss(&rot(v), &rot(a), &rot(b), 1.0).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9);
        }

        #[test]
        fn concentration_gradient_is_consistent(
            v in prop::collection::vec(-2.0f64..2.0, 4),
            a in prop::collection::vec(-2.0f64..2.0, 4),
            b in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let g = concentration_loss_grad(&v, &a, &b, 1.0).unwrap();
            prop_assert_eq!(g.loss, concentration_loss(&v, &a, &b, 1.0).unwrap());
            // Translating all three points together leaves the loss unchanged.
            let s: f64 = (0..4).map(|i| g.d_v[i] + g.d_ma[i] + g.d_mb[i]).sum();
            prop_assert!(s.abs() < 1e-6 * (1.0 + g.d_v.iter().map(|x| x.abs()).sum::<f64>()));
        }
    }
}
