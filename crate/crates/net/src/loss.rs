//! Training losses over the gt-valid set `V = { v : gt(v) > 0 }`.
//!
//! * scale-invariant log loss on the initial depth:
//!   `mean(delta^2) - lambda * mean(delta)^2`, `delta = ln pred - ln gt`
//! * combined L1 + L2 on the final depth: `mean(|e| + e^2)`, `e = pred - gt`
//! * total: `comb(final) + mu * si(initial)`
//!
//! Everything is computed in `f64` and returns the analytic gradient with
//! respect to the prediction (zero outside `V`).

use serde::{Deserialize, Serialize};

use depthprompt_core::DepthRaster;

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_si: f64,
    pub mu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_si: 0.85,
            mu: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_si) {
            return Err(NetError::Config(format!(
                "lambda_si must lie in [0, 1], got {}",
                self.lambda_si
            )));
        }
        if !(self.mu >= 0.0) {
            return Err(NetError::Config(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_lengths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(depthprompt_core::Error::Contract(format!(
            "loss: pred has {} values, gt has {}",
            pred.len(),
            gt.len()
        ))
        .into());
    }
    Ok(())
}

pub fn loss_si_values(pred: &[f64], gt: &[f64], lambda_si: f64) -> Result<LossValue> {
    check_lengths(pred, gt)?;
    let mut n = 0usize;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g <= 0.0 {
            continue;
        }
        if !(p > 0.0) {
            return Err(NetError::Domain(format!(
                "scale-invariant loss needs a positive prediction at valid pixel {i}, got {p}"
            )));
        }
        let d = p.ln() - g.ln();
        sum += d;
        sum_sq += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(depthprompt_core::Error::EmptyEvaluation.into());
    }
    let nf = n as f64;
    let value = sum_sq / nf - lambda_si * sum * sum / (nf * nf);
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if g <= 0.0 {
                0.0
            } else {
                let d = p.ln() - g.ln();
                (2.0 * d / nf - 2.0 * lambda_si * sum / (nf * nf)) / p
            }
        })
        .collect();
    Ok(LossValue { value, grad })
}

pub fn loss_comb_values(pred: &[f64], gt: &[f64]) -> Result<LossValue> {
    check_lengths(pred, gt)?;
    let n = gt.iter().filter(|&&g| g > 0.0).count();
    if n == 0 {
        return Err(depthprompt_core::Error::EmptyEvaluation.into());
    }
    let nf = n as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if g <= 0.0 {
                return 0.0;
            }
            let e = p - g;
            value += e.abs() + e * e;
            (e.signum() * (e != 0.0) as u8 as f64 + 2.0 * e) / nf
        })
        .collect();
    Ok(LossValue {
        value: value / nf,
        grad,
    })
}

fn widen(r: &DepthRaster) -> Vec<f64> {
    r.values().iter().map(|&v| v as f64).collect()
}

fn check_shapes(a: &DepthRaster, b: &DepthRaster) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(depthprompt_core::Error::Contract(format!(
            "loss: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        ))
        .into());
    }
    Ok(())
}

pub fn loss_si(pred: &DepthRaster, gt: &DepthRaster, lambda_si: f64) -> Result<LossValue> {
    check_shapes(pred, gt)?;
    loss_si_values(&widen(pred), &widen(gt), lambda_si)
}

pub fn loss_comb(pred: &DepthRaster, gt: &DepthRaster) -> Result<LossValue> {
    check_shapes(pred, gt)?;
    loss_comb_values(&widen(pred), &widen(gt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub comb: f64,
    pub si: f64,
    pub grad_final: Vec<f64>,
    pub grad_initial: Vec<f64>,
}

pub fn loss_total_values(final_depth: &[f64], initial_metric: &[f64], gt: &[f64], cfg: &LossConfig) -> Result<TotalLoss> {
    let comb = loss_comb_values(final_depth, gt)?;
    let si = loss_si_values(initial_metric, gt, cfg.lambda_si)?;
    Ok(TotalLoss {
        value: comb.value + cfg.mu * si.value,
        comb: comb.value,
        si: si.value,
        grad_final: comb.grad,
        grad_initial: si.grad.iter().map(|g| cfg.mu * g).collect(),
    })
}

pub fn loss_total(final_depth: &DepthRaster, initial_metric: &DepthRaster, gt: &DepthRaster, cfg: &LossConfig) -> Result<f64> {
    check_shapes(final_depth, gt)?;
    check_shapes(initial_metric, gt)?;
    Ok(loss_total_values(&widen(final_depth), &widen(initial_metric), &widen(gt), cfg)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(v: &[f32]) -> DepthRaster {
        DepthRaster::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn si_zero_at_identity_and_scale_invariant_at_lambda_one() {
        let gt = r(&[1.0, 2.0, 3.0]);
        assert_eq!(loss_si(&gt, &gt, 0.85).unwrap().value, 0.0);
        let scaled = r(&[2.5, 5.0, 7.5]);
        assert!(loss_si(&scaled, &gt, 1.0).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn si_single_pixel_hand_value() {
        let v = loss_si(&r(&[2.0]), &r(&[1.0]), 0.85).unwrap().value;
        let expected = 0.15 * std::f64::consts::LN_2.powi(2);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.07207).abs() < 1e-5);
    }

    #[test]
    fn si_is_symmetric_in_pred_and_gt() {
        let a = r(&[1.0, 2.5, 0.7]);
        let b = r(&[1.3, 2.0, 0.9]);
        let ab = loss_si(&a, &b, 0.85).unwrap().value;
        let ba = loss_si(&b, &a, 0.85).unwrap().value;
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn si_rejects_nonpositive_prediction() {
        let err = loss_si_values(&[0.0, 1.0], &[1.0, 1.0], 0.85);
        assert!(matches!(err, Err(NetError::Domain(_))));
        // invalid gt pixels are skipped entirely
        assert!(loss_si_values(&[-1.0, 1.0], &[0.0, 1.0], 0.85).is_ok());
    }

    #[test]
    fn comb_hand_values() {
        let gt = r(&[1.0, 2.0]);
        assert_eq!(loss_comb(&gt, &gt).unwrap().value, 0.0);
        let off = r(&[1.5, 2.5]);
        assert_eq!(loss_comb(&off, &gt).unwrap().value, 0.75);
        assert!(matches!(
            loss_comb(&gt, &r(&[0.0, 0.0])),
            Err(NetError::Core(depthprompt_core::Error::EmptyEvaluation))
        ));
    }

    #[test]
    fn comb_ignores_invalid_gt_pixels() {
        let gt = r(&[1.0, 0.0, 2.0]);
        let a = loss_comb(&r(&[1.2, 5.0, 2.0]), &gt).unwrap();
        let b = loss_comb(&r(&[1.2, 0.0, 2.0]), &gt).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad[1], 0.0);
    }

    #[test]
    fn total_combines_components() {
        let gt = r(&[1.0, 2.0]);
        assert_eq!(loss_total(&gt, &gt, &gt, &LossConfig::default()).unwrap(), 0.0);
        let fin = r(&[1.5, 2.5]);
        let init = r(&[1.1, 2.3]);
        let mu0 = LossConfig { mu: 0.0, ..Default::default() };
        assert_eq!(loss_total(&fin, &init, &gt, &mu0).unwrap(), loss_comb(&fin, &gt).unwrap().value);
    }

    #[test]
    fn total_from_hand_components() {
        // comb: constant 0.5 error -> 0.75; si: one pixel pred 2, gt 1 -> 0.15 ln(2)^2
        let gt = r(&[1.0]);
        let v = loss_total(&r(&[1.5]), &r(&[2.0]), &gt, &LossConfig::default()).unwrap();
        let expected = 0.75 + 0.1 * 0.15 * std::f64::consts::LN_2.powi(2);
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.757207).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda_si: 1.5, mu: 0.1 }.validate().is_err());
        assert!(LossConfig { lambda_si: 0.5, mu: -0.1 }.validate().is_err());
    }
}
