//! Sample-average risk measures, the smoothed positive part and the
//! quadratic design penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C1 smoothing of `max(x, 0)` that lies below it by at most `eps / 2`.
pub fn smoothed_plus(x: f64, eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("smoothing width must be positive, got {eps}")));
    }
    Ok(if x <= 0.0 {
        (0.0, 0.0)
    } else if x < eps {
        let (e2, e3) = (eps * eps, eps * eps * eps);
        (x.powi(3) / e2 - x.powi(4) / (2.0 * e3), 3.0 * x * x / e2 - 2.0 * x.powi(3) / e3)
    } else {
        (x - 0.5 * eps, 1.0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RiskMeasure {
    Mean,
    /// Conditional value-at-risk at quantile `beta`; `epsilon` is the
    /// smoothing width, chosen from the initial samples when absent.
    Cvar {
        beta: f64,
        #[serde(default)]
        epsilon: Option<f64>,
    },
    Entropic {
        beta: f64,
    },
}

/// Risk value and its derivatives with respect to each sample and to `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskEval {
    pub value: f64,
    pub dq: Vec<f64>,
    pub dt: f64,
}

impl RiskMeasure {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskMeasure::Mean => Ok(()),
            RiskMeasure::Cvar { beta, epsilon } => {
                if !(beta > 0.0 && beta < 1.0) {
                    return Err(Error::invalid(format!("CVaR quantile must lie in (0, 1), got {beta}")));
                }
                if let Some(e) = epsilon {
                    if !(e > 0.0) {
                        return Err(Error::invalid("CVaR smoothing must be positive"));
                    }
                }
                Ok(())
            }
            RiskMeasure::Entropic { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::invalid(format!("entropic aversion must be positive, got {beta}")));
                }
                Ok(())
            }
        }
    }

    pub fn is_cvar(&self) -> bool {
        matches!(self, RiskMeasure::Cvar { .. })
    }

    /// Fills in a missing CVaR smoothing width from `samples`.
    pub fn resolved(&self, samples: &[f64]) -> RiskMeasure {
        match *self {
            RiskMeasure::Cvar { beta, epsilon: None } => RiskMeasure::Cvar { beta, epsilon: Some(default_cvar_epsilon(samples)) },
            other => other,
        }
    }
}

/// `1e-4` times the interquartile range, floored at `1e-8`.
pub fn default_cvar_epsilon(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 1e-8;
    }
    (1e-4 * (quantile(samples, 0.75) - quantile(samples, 0.25))).max(1e-8)
}

/// Linearly interpolated empirical quantile.
pub fn quantile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

pub fn risk_saa(samples: &[f64], risk: &RiskMeasure, t: Option<f64>) -> Result<RiskEval> {
    risk.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("risk needs at least one sample"));
    }
    let n = samples.len() as f64;
    match *risk {
        RiskMeasure::Mean => Ok(RiskEval { value: samples.iter().sum::<f64>() / n, dq: vec![1.0 / n; samples.len()], dt: 0.0 }),
        RiskMeasure::Entropic { beta } => {
            let shift = samples.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = samples.iter().map(|q| (beta * (q - shift)).exp()).collect();
            let sum: f64 = w.iter().sum();
            Ok(RiskEval {
                value: shift + (sum / n).ln() / beta,
                dq: w.iter().map(|wi| wi / sum).collect(),
                dt: 0.0,
            })
        }
        RiskMeasure::Cvar { beta, epsilon } => {
            let t = t.ok_or_else(|| Error::invalid("CVaR needs the auxiliary variable t"))?;
            let eps = epsilon.ok_or_else(|| Error::invalid("CVaR smoothing width is unresolved"))?;
            let c = 1.0 / (n * (1.0 - beta));
            let mut value = t;
            let mut dq = Vec::with_capacity(samples.len());
            let mut dt = 1.0;
            for &q in samples {
                let (v, d) = smoothed_plus(q - t, eps)?;
                value += c * v;
                dq.push(c * d);
                dt -= c * d;
            }
            Ok(RiskEval { value, dq, dt })
        }
    }
}

/// Rockafellar-Uryasev CVaR with the exact positive part at the empirical quantile.
pub fn empirical_cvar(samples: &[f64], beta: f64) -> f64 {
    let t = quantile(samples, beta);
    let n = samples.len() as f64;
    t + samples.iter().map(|q| (q - t).max(0.0)).sum::<f64>() / (n * (1.0 - beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub alpha: f64,
    pub area: f64,
}

impl Penalty {
    /// `alpha * area * |z|^2` and its gradient.
    pub fn eval(&self, z: &[f64]) -> (f64, Vec<f64>) {
        penalty_eval(z, self.alpha, self.area)
    }
}

pub fn penalty_eval(z: &[f64], alpha: f64, area: f64) -> (f64, Vec<f64>) {
    let c = alpha * area;
    (c * z.iter().map(|v| v * v).sum::<f64>(), z.iter().map(|v| 2.0 * c * v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_plus_branches() {
        let eps = 0.1;
        assert_eq!(smoothed_plus(-1.0, eps).unwrap(), (0.0, 0.0));
        let (v, d) = smoothed_plus(eps, eps).unwrap();
        assert!((v - eps / 2.0).abs() < 1e-15 && (d - 1.0).abs() < 1e-15);
        assert!(smoothed_plus(1.0, 0.0).is_err());
    }

    #[test]
    fn risk_examples() {
        assert_eq!(risk_saa(&[1.0, 2.0, 3.0], &RiskMeasure::Mean, None).unwrap().value, 2.0);
        let e = RiskMeasure::Entropic { beta: 1.0 };
        assert!((risk_saa(&[0.7; 5], &e, None).unwrap().value - 0.7).abs() < 1e-15);
        assert!((risk_saa(&[0.0, 3f64.ln()], &e, None).unwrap().value - 2f64.ln()).abs() < 1e-15);
        let c = RiskMeasure::Cvar { beta: 0.9, epsilon: Some(1e-3) };
        assert!(risk_saa(&[1.0], &c, None).is_err());
        assert!(risk_saa(&[1.0], &RiskMeasure::Cvar { beta: 0.9, epsilon: None }, Some(0.0)).is_err());
    }

    #[test]
    fn penalty_example() {
        let (v, g) = penalty_eval(&[1.0, 0.0, 0.0], 0.001, 4.0);
        assert!((v - 0.004).abs() < 1e-18);
        assert_eq!(g, vec![0.008, 0.0, 0.0]);
        assert_eq!(penalty_eval(&[0.0; 3], 0.5, 4.0), (0.0, vec![0.0; 3]));
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
        assert!(empirical_cvar(&[1.0, 2.0, 3.0, 10.0], 0.5) >= 4.0);
    }
}
