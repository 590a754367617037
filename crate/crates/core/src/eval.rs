//! Evaluation helpers: accuracy and rejection ROC over RDI scores.

/// One threshold of the rejection sweep.
///
/// A test is accepted when its RDI is at most `theta`. `tpr` is the fraction of
/// valid inputs accepted, `fpr` the fraction of invalid inputs accepted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub theta: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Thresholds 0, 0.01, ..., 1.
pub fn theta_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn accepted_fraction(scores: &[f64], theta: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| **s <= theta).count() as f64 / scores.len() as f64
}

pub fn roc_sweep(valid: &[f64], invalid: &[f64]) -> Vec<RocPoint> {
    theta_grid()
        .into_iter()
        .map(|theta| RocPoint {
            theta,
            tpr: accepted_fraction(valid, theta),
            fpr: accepted_fraction(invalid, theta),
        })
        .collect()
}

/// Area under the ROC as P(valid score < invalid score), ties counting half.
///
/// Returns `None` when either side is empty.
pub fn auc(valid: &[f64], invalid: &[f64]) -> Option<f64> {
    if valid.is_empty() || invalid.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for v in valid {
        for i in invalid {
            if v < i {
                wins += 1.0;
            } else if v == i {
                wins += 0.5;
            }
        }
    }
    Some(wins / (valid.len() * invalid.len()) as f64)
}

/// Trapezoidal area of a sweep, with the (0,0) and (1,1) corners added.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Fraction of positions where the prediction equals the truth (0 for empty input).
pub fn accuracy<A: PartialEq<B>, B>(predicted: &[A], truth: &[B]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "prediction/truth length mismatch");
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| *p == *t).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_valid_accepted_at_one() {
        let roc = roc_sweep(&[0.1, 0.5, 1.0], &[]);
        assert_eq!(roc.len(), 101);
        let last = roc.last().unwrap();
        assert_eq!(last.theta, 1.0);
        assert_eq!(last.tpr, 1.0);
    }

    #[test]
    fn uniform_invalid_rejected_below_one() {
        let roc = roc_sweep(&[0.0], &[1.0, 1.0]);
        for p in &roc[..100] {
            assert_eq!(p.fpr, 0.0);
        }
        assert_eq!(roc[100].fpr, 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2], &[0.8, 0.9]), Some(1.0));
        assert_eq!(auc(&[0.8, 0.9], &[0.1, 0.2]), Some(0.0));
        assert_eq!(auc(&[0.5], &[0.5]), Some(0.5));
        assert_eq!(auc(&[], &[0.5]), None);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&["a", "b"], &["a", "c"]), 0.5);
        assert_eq!(accuracy::<&str, &str>(&[], &[]), 0.0);
    }

    proptest! {
        #[test]
        fn sweep_is_monotone_and_matches_rank_auc_on_grid(
            valid in proptest::collection::vec(0u32..=100, 1..20),
            invalid in proptest::collection::vec(0u32..=100, 1..20),
        ) {
            // scores on the threshold grid: trapezoid area equals the rank statistic
            let v: Vec<f64> = valid.iter().map(|x| *x as f64 / 100.0).collect();
            let i: Vec<f64> = invalid.iter().map(|x| *x as f64 / 100.0).collect();
            let roc = roc_sweep(&v, &i);
            for w in roc.windows(2) {
                prop_assert!(w[1].tpr >= w[0].tpr && w[1].fpr >= w[0].fpr);
            }
            let a = auc(&v, &i).unwrap();
            prop_assert!((trapezoid_auc(&roc) - a).abs() < 1e-9);
        }
    }
}
