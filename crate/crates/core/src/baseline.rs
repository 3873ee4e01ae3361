//! Reference forecasters for total sales over the next `horizon` days.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("need {needed} values of history, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("invalid baseline parameter: {0}")]
    Invalid(String),
    #[error("least-squares system is singular")]
    Singular,
}

pub type Result<T, E = BaselineError> = std::result::Result<T, E>;

pub const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    NaiveLastWindow,
    MovingAverage { weeks: usize },
    ArLs { order: usize },
}

impl BaselineSpec {
    pub fn name(&self) -> String {
        match self {
            BaselineSpec::NaiveLastWindow => "naive_last_window".into(),
            BaselineSpec::MovingAverage { weeks } => format!("moving_average_{weeks}w"),
            BaselineSpec::ArLs { order } => format!("ar_ls_{order}"),
        }
    }

    /// Forecast from a daily sales history ending on the forecast origin.
    pub fn forecast(&self, history: &[f64], horizon: usize) -> Result<f64> {
        match *self {
            BaselineSpec::NaiveLastWindow => naive_forecast(history, horizon),
            BaselineSpec::MovingAverage { weeks } => {
                moving_average_forecast(history, horizon, weeks)
            }
            BaselineSpec::ArLs { order } => {
                ar_ls_fit_predict(&window_totals(history, horizon)?, order)
            }
        }
    }
}

fn check_horizon(horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(BaselineError::Invalid("horizon must be >= 1".into()));
    }
    Ok(())
}

/// Sum of the last `horizon` days.
pub fn naive_forecast(history: &[f64], horizon: usize) -> Result<f64> {
    check_horizon(horizon)?;
    if history.len() < horizon {
        return Err(BaselineError::InsufficientHistory {
            needed: horizon,
            available: history.len(),
        });
    }
    Ok(history[history.len() - horizon..].iter().sum())
}

/// Mean daily sales over the last `7·weeks` days, times `horizon`.
pub fn moving_average_forecast(history: &[f64], horizon: usize, weeks: usize) -> Result<f64> {
    check_horizon(horizon)?;
    if weeks == 0 {
        return Err(BaselineError::Invalid(
            "moving average needs weeks >= 1".into(),
        ));
    }
    let span = 7 * weeks;
    if history.len() < span {
        return Err(BaselineError::InsufficientHistory {
            needed: span,
            available: history.len(),
        });
    }
    let mean = history[history.len() - span..].iter().sum::<f64>() / span as f64;
    Ok(mean * horizon as f64)
}

/// Non-overlapping `horizon`-day totals, oldest first, the last one ending
/// at the end of `history`. Leading days that do not fill a window are
/// dropped.
pub fn window_totals(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    check_horizon(horizon)?;
    let skip = history.len() % horizon;
    Ok(history[skip..]
        .chunks(horizon)
        .map(|c| c.iter().sum())
        .collect())
}

/// Ridge-regularized least-squares coefficients `[c, φ₁, …, φ_p]` of
/// `total_t ≈ c + Σ φᵢ total_{t-i}`.
pub fn ar_ls_fit(totals: &[f64], order: usize) -> Result<Vec<f64>> {
    if order == 0 {
        return Err(BaselineError::Invalid("AR order must be >= 1".into()));
    }
    if totals.len() < order + 2 {
        return Err(BaselineError::InsufficientHistory {
            needed: order + 2,
            available: totals.len(),
        });
    }
    let rows = totals.len() - order;
    let cols = order + 1;
    // Ridge as extra rows: [X; √λ I] θ ≈ [y; 0], solved by SVD.
    let mut a = DMatrix::zeros(rows + cols, cols);
    let mut b = DVector::zeros(rows + cols);
    for t in 0..rows {
        a[(t, 0)] = 1.0;
        for i in 1..=order {
            a[(t, i)] = totals[t + order - i];
        }
        b[t] = totals[t + order];
    }
    for j in 0..cols {
        a[(rows + j, j)] = RIDGE.sqrt();
    }
    let theta = a
        .svd(true, true)
        .solve(&b, 0.0)
        .map_err(|_| BaselineError::Singular)?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(BaselineError::Singular);
    }
    Ok(theta.iter().copied().collect())
}

/// One-step-ahead AR(p) prediction of the next total, clamped at 0.
pub fn ar_ls_fit_predict(totals: &[f64], order: usize) -> Result<f64> {
    let theta = ar_ls_fit(totals, order)?;
    let n = totals.len();
    let pred = theta[0] + (1..=order).map(|i| theta[i] * totals[n - i]).sum::<f64>();
    Ok(pred.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn naive_examples() {
        let h: Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(naive_forecast(&h, 7).unwrap(), 28.0);
        assert_eq!(naive_forecast(&[3.0; 20], 5).unwrap(), 15.0);
        assert!(matches!(
            naive_forecast(&[1.0; 3], 7),
            Err(BaselineError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average_forecast(&[2.5; 30], 7, 3).unwrap(), 17.5);
        let alt: Vec<f64> = (0..14)
            .map(|i| if i % 2 == 0 { 0.0 } else { 2.0 })
            .collect();
        assert_eq!(moving_average_forecast(&alt, 7, 2).unwrap(), 7.0);
        let h = [4.0, 1.0, 0.0, 3.0, 9.0, 2.0, 5.0, 6.0, 1.0];
        assert!(
            (moving_average_forecast(&h, 7, 1).unwrap() - naive_forecast(&h, 7).unwrap()).abs()
                < 1e-12
        );
        assert!(moving_average_forecast(&h, 7, 2).is_err());
    }

    #[test]
    fn window_totals_align_to_the_end() {
        let h: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(
            window_totals(&h, 3).unwrap(),
            vec![1.0 + 2.0 + 3.0, 12.0 + 3.0, 7.0 + 8.0 + 9.0]
        );
    }

    #[test]
    fn ar_continues_a_progression() {
        let totals: Vec<f64> = (0..12).map(|t| 5.0 + 3.0 * t as f64).collect();
        let pred = ar_ls_fit_predict(&totals, 2).unwrap();
        assert!((pred - (5.0 + 36.0)).abs() < 1e-6, "{pred}");
    }

    #[test]
    fn ar_constant_and_clamp() {
        let pred = ar_ls_fit_predict(&[7.0; 10], 3).unwrap();
        assert!((pred - 7.0).abs() < 1e-6);
        let falling = [100.0, 80.0, 60.0, 40.0, 20.0, 0.0];
        assert_eq!(ar_ls_fit_predict(&falling, 1).unwrap(), 0.0);
        assert!(ar_ls_fit_predict(&[1.0, 2.0], 1).is_err());
        assert!(ar_ls_fit(&[1.0; 5], 0).is_err());
    }

    #[test]
    fn spec_names() {
        assert_eq!(
            BaselineSpec::MovingAverage { weeks: 2 }.name(),
            "moving_average_2w"
        );
        let h = [1.0; 28];
        for spec in [
            BaselineSpec::NaiveLastWindow,
            BaselineSpec::MovingAverage { weeks: 4 },
            BaselineSpec::ArLs { order: 1 },
        ] {
            assert!(
                (spec.forecast(&h, 7).unwrap() - 7.0).abs() < 1e-6,
                "{spec:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn ar_output_is_clamped(mut totals in proptest::collection::vec(0.0f64..50.0, 6..20), spike in 1e3f64..1e6, order in 1usize..3) {
            let at = totals.len() / 2;
            totals[at] = spike;
            prop_assert!(ar_ls_fit_predict(&totals, order).unwrap() >= 0.0);
        }

        #[test]
        fn residuals_are_orthogonal_to_regressors(totals in proptest::collection::vec(0.0f64..50.0, 8..30), order in 1usize..4) {
            let theta = ar_ls_fit(&totals, order).unwrap();
            let rows = totals.len() - order;
            let mut xtr = vec![0.0; order + 1];
            for t in 0..rows {
                let x: Vec<f64> = std::iter::once(1.0).chain((1..=order).map(|i| totals[t + order - i])).collect();
                let fit: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
                let r = totals[t + order] - fit;
                for (acc, xi) in xtr.iter_mut().zip(&x) {
                    *acc += xi * r;
                }
            }
            // Xᵀr = λθ for the ridge solution.
            for (g, th) in xtr.iter().zip(&theta) {
                prop_assert!((g - RIDGE * th).abs() < 1e-6, "{g} {th}");
            }
        }

        #[test]
        fn baselines_are_exact_on_constants(c in 0.0f64..100.0, horizon in 1usize..10, weeks in 1usize..4) {
            let h = vec![c; 7 * weeks + 3 * horizon + 10];
            prop_assert!((naive_forecast(&h, horizon).unwrap() - c * horizon as f64).abs() < 1e-9);
            prop_assert!((moving_average_forecast(&h, horizon, weeks).unwrap() - c * horizon as f64).abs() < 1e-9);
            let ar = BaselineSpec::ArLs { order: 1 }.forecast(&h, horizon).unwrap();
            prop_assert!((ar - c * horizon as f64).abs() < 1e-6);
        }
    }
}
