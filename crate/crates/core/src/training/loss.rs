use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the 2D term.
    pub lambda: f64,
    /// Candidate-selection threshold applied to `s` and `e`.
    pub threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy; `supervised` is false when there was nothing
/// to average over (the value is then 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bce {
    pub value: f64,
    pub supervised: bool,
}

pub fn bce(x: &[f64], y: &[f64]) -> Bce {
    assert_eq!(x.len(), y.len(), "prediction/label length mismatch");
    if x.is_empty() {
        return Bce {
            value: 0.0,
            supervised: false,
        };
    }
    let total: f64 = x
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Bce {
        value: total / x.len() as f64,
        supervised: true,
    }
}

/// The three loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub f_s: f64,
    pub f_e: f64,
    pub f_m: f64,
}

/// Term weights `(w_s, w_e, w_m)`: `(1-λ)/2, (1-λ)/2, λ`. Without a 2D head
/// the boundary terms share the loss equally.
pub fn term_weights(lambda: f64, has_2d: bool) -> (f64, f64, f64) {
    if has_2d {
        ((1.0 - lambda) / 2.0, (1.0 - lambda) / 2.0, lambda)
    } else {
        (0.5, 0.5, 0.0)
    }
}

pub fn combine(f_s: f64, f_e: f64, f_m: f64, lambda: f64) -> LossParts {
    let (ws, we, wm) = term_weights(lambda, true);
    LossParts {
        total: ws * f_s + we * f_e + wm * f_m,
        f_s,
        f_e,
        f_m,
    }
}

/// Combined loss of one unit from already-masked predictions.
///
/// `s_valid`/`e_valid` pair each valid position's prediction with its 0/1
/// label; `m_l` pairs each selected cell's probability with its label.
pub fn combined_loss(
    s_valid: (&[f64], &[f64]),
    e_valid: (&[f64], &[f64]),
    m_l: (&[f64], &[f64]),
    cfg: &LossConfig,
) -> LossParts {
    let f_s = bce(s_valid.0, s_valid.1).value;
    let f_e = bce(e_valid.0, e_valid.1).value;
    let f_m = bce(m_l.0, m_l.1).value;
    combine(f_s, f_e, f_m, cfg.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_against_one_is_ln2() {
        let b = bce(&[0.5], &[1.0]);
        assert!((b.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(b.supervised);
    }

    #[test]
    fn perfect_predictions_near_zero() {
        let b = bce(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        assert!(b.value <= -(1.0 - BCE_EPS).ln() + 1e-18);
        assert!(b.value < 1e-6);
    }

    #[test]
    fn empty_set_is_unsupervised() {
        let b = bce(&[], &[]);
        assert_eq!(b.value, 0.0);
        assert!(!b.supervised);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let mut acc = 0.0;
            for i in 0..n {
                acc += y[i] * x[i].ln() + (1.0 - y[i]) * (1.0 - x[i]).ln();
            }
            let oracle = -acc / n as f64;
            assert!((bce(&x, &y).value - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_weighting() {
        let (fs, fe, fm) = (0.3, 0.7, 1.9);
        assert!((combine(fs, fe, fm, 0.0).total - 0.5 * (fs + fe)).abs() < 1e-15);
        assert!((combine(fs, fe, fm, 1.0).total - fm).abs() < 1e-15);
        let w = term_weights(0.1, true);
        assert!((w.0 - 0.45).abs() < 1e-15 && (w.1 - 0.45).abs() < 1e-15 && w.2 == 0.1);
        assert!((combine(fs, fe, fm, 0.1).total - (0.45 * fs + 0.45 * fe + 0.1 * fm)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: 1.5, threshold: 0.5 }.validate().is_err());
        assert!(LossConfig { lambda: 0.1, threshold: 1.0 }.validate().is_err());
    }
}
