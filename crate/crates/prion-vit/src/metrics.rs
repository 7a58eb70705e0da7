//! Regression metrics for temperature prediction.
//!
//! One report carries the five headline numbers plus enough provenance
//! (split name, config hash, seed, sample count) to tie it back to the run
//! that produced it. Serialized field order is fixed so emitted JSON diffs
//! cleanly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier-compensated accumulator, so the reported sums are stable
/// against the order samples happen to arrive in.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    /// Mean squared error, squared degrees Celsius.
    pub mse: f64,
    /// Mean absolute error, degrees Celsius.
    pub mae: f64,
    /// Root mean squared error, degrees Celsius.
    pub rmse: f64,
    /// Largest absolute error, degrees Celsius.
    pub max_error: f64,
    /// Coefficient of determination; `None` when the targets are constant
    /// and the score is undefined.
    pub r2: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

/// Compute all metrics over one split.
pub fn compute_metrics(
    split: &str,
    predictions: &[f64],
    targets: &[f64],
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: vec![predictions.len()],
            rhs: vec![targets.len()],
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset(
            "metrics need at least one prediction".into(),
        ));
    }
    if !predictions.iter().chain(targets).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "metric input",
            name: split.to_string(),
        });
    }

    let n = predictions.len() as f64;
    let mut sq_sum = CompensatedSum::default();
    let mut abs_sum = CompensatedSum::default();
    let mut max_error: f64 = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        let e = p - t;
        sq_sum.add(e * e);
        abs_sum.add(e.abs());
        max_error = max_error.max(e.abs());
    }
    let sq_sum = sq_sum.total();
    let mse = sq_sum / n;
    let mut target_sum = CompensatedSum::default();
    for t in targets {
        target_sum.add(*t);
    }
    let mean_target = target_sum.total() / n;
    let mut ss_tot = CompensatedSum::default();
    for t in targets {
        ss_tot.add((t - mean_target) * (t - mean_target));
    }
    let ss_tot = ss_tot.total();
    let r2 = if ss_tot == 0.0 {
        None
    } else {
        Some(1.0 - sq_sum / ss_tot)
    };

    Ok(MetricsReport {
        split: split.to_string(),
        n: predictions.len(),
        mse,
        mae: abs_sum.total() / n,
        rmse: mse.sqrt(),
        max_error,
        r2,
        config_hash: config_hash.to_string(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn perfect_predictions_are_all_zero_error() {
        let vals = [3.0, -1.5, 100.0];
        let r = compute_metrics("test", &vals, &vals, "h", 1).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.max_error, 0.0);
        assert_eq!(r.r2, Some(1.0));
        assert_eq!(r.n, 3);
    }

    #[test]
    fn hand_computed_triple() {
        let r = compute_metrics("test", &[2.0, 4.0, 6.0], &[1.0, 5.0, 6.0], "h", 1).unwrap();
        assert!((r.mae - 2.0 / 3.0).abs() < 1e-9);
        assert!((r.mse - 2.0 / 3.0).abs() < 1e-9);
        assert!((r.rmse - 0.816_496_580_927_726).abs() < 1e-9);
        assert!((r.max_error - 1.0).abs() < 1e-9);
        assert!((r.r2.unwrap() - 6.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn constant_targets_leave_r2_undefined() {
        let r = compute_metrics("val", &[1.0, 2.0], &[5.0, 5.0], "h", 0).unwrap();
        assert_eq!(r.r2, None);
        assert!(r.mse > 0.0);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        assert!(matches!(
            compute_metrics("test", &[], &[], "h", 0),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            compute_metrics("test", &[1.0], &[1.0, 2.0], "h", 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let err = compute_metrics("test", &[f64::NAN], &[1.0], "h", 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn json_keys_keep_declaration_order() {
        let r = compute_metrics("test", &[1.0], &[2.0], "abcd", 7).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let positions: Vec<usize> = ["split", "n", "mse", "mae", "rmse", "max_error", "r2"]
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
    }

    proptest! {
        #[test]
        fn invariants_hold_on_random_inputs(
            pairs in proptest::collection::vec((-50.0f64..150.0, -50.0f64..150.0), 1..40)
        ) {
            let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let targets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let r = compute_metrics("test", &preds, &targets, "h", 0).unwrap();
            prop_assert!((r.rmse * r.rmse - r.mse).abs() < 1e-9);
            prop_assert!(r.max_error >= r.mae);
            prop_assert!(r.mae >= 0.0);
            if let Some(r2) = r.r2 {
                prop_assert!(r2 <= 1.0);
            }

            let rev_preds: Vec<f64> = preds.iter().rev().copied().collect();
            let rev_targets: Vec<f64> = targets.iter().rev().copied().collect();
            let rev = compute_metrics("test", &rev_preds, &rev_targets, "h", 0).unwrap();
            prop_assert!((r.mse - rev.mse).abs() < 1e-12);
            prop_assert!((r.mae - rev.mae).abs() < 1e-12);
            prop_assert!(r.max_error == rev.max_error);
        }
    }
}
