//! Trade-off scoring and best-candidate selection.
//!
//! TM-score = (Task Acc)^lambda / MIA Acc with both accuracies in percent
//! units (0-100). Percent units matter: at lambda != 1 the reference
//! score tables only reproduce in percent. Multi-attack runs blend the
//! black-box and white-box scores with a weight alpha.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::UpdateStrategy;

/// Task-over-attack trade-off score; accuracies in percent.
pub fn tm_score(task_acc_pct: f64, mia_acc_pct: f64, lambda: f64) -> Result<f64> {
    if mia_acc_pct <= 0.0 {
        return Err(Error::ZeroMiaAccuracy);
    }
    Ok(task_acc_pct.powf(lambda) / mia_acc_pct)
}

/// Weighted blend of black-box and white-box TM-scores.
pub fn tm_score_multi(tm_b: f64, tm_w: f64, alpha: f64) -> f64 {
    alpha * tm_b + (1.0 - alpha) * tm_w
}

/// Everything the selector knows about one evaluated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub candidate: usize,
    /// The strategy that produced the candidate; absent for models that
    /// did not come out of the 2x2 grid (e.g. the pruning baseline).
    pub strategy: Option<UpdateStrategy>,
    pub task_acc_pct: f64,
    pub mia_acc_b_pct: Option<f64>,
    pub mia_acc_w_pct: Option<f64>,
    pub tm_b: Option<f64>,
    pub tm_w: Option<f64>,
    pub tm_combined: f64,
    pub sparsity: f64,
}

impl EvalReport {
    /// Score a candidate from raw accuracies. At least one attack
    /// accuracy must be present; the combined score is the blend when
    /// both are, otherwise whichever single score exists.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        candidate: usize,
        strategy: Option<UpdateStrategy>,
        task_acc_pct: f64,
        mia_acc_b_pct: Option<f64>,
        mia_acc_w_pct: Option<f64>,
        lambda: f64,
        alpha: f64,
        sparsity: f64,
    ) -> Result<EvalReport> {
        let tm_b = mia_acc_b_pct
            .map(|mia| tm_score(task_acc_pct, mia, lambda))
            .transpose()?;
        let tm_w = mia_acc_w_pct
            .map(|mia| tm_score(task_acc_pct, mia, lambda))
            .transpose()?;
        let tm_combined = match (tm_b, tm_w) {
            (Some(b), Some(w)) => tm_score_multi(b, w, alpha),
            (Some(b), None) => b,
            (None, Some(w)) => w,
            (None, None) => return Err(Error::ZeroMiaAccuracy),
        };
        Ok(EvalReport {
            candidate,
            strategy,
            task_acc_pct,
            mia_acc_b_pct,
            mia_acc_w_pct,
            tm_b,
            tm_w,
            tm_combined,
            sparsity,
        })
    }

    /// Check the stored scores against the formulas they came from.
    pub fn consistent(&self, lambda: f64, alpha: f64, tol: f64) -> bool {
        let check = |mia: Option<f64>, tm: Option<f64>| match (mia, tm) {
            (Some(mia), Some(tm)) => tm_score(self.task_acc_pct, mia, lambda)
                .map(|x| (x - tm).abs() <= tol)
                .unwrap_or(false),
            (None, None) => true,
            _ => false,
        };
        if !check(self.mia_acc_b_pct, self.tm_b) || !check(self.mia_acc_w_pct, self.tm_w) {
            return false;
        }
        let expect = match (self.tm_b, self.tm_w) {
            (Some(b), Some(w)) => tm_score_multi(b, w, alpha),
            (Some(b), None) => b,
            (None, Some(w)) => w,
            (None, None) => return false,
        };
        (expect - self.tm_combined).abs() <= tol
    }
}

/// Index of the report with the maximal combined score. Ties break to the
/// earliest index, which is the fixed strategy enumeration order.
pub fn select_best(reports: &[EvalReport]) -> Result<usize> {
    if reports.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut best = 0;
    for (i, report) in reports.iter().enumerate().skip(1) {
        if report.tm_combined > reports[best].tm_combined {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn reference_single_attack_scores() {
        assert!(close(tm_score(69.52, 51.75, 1.0).unwrap(), 1.34, 0.005));
        assert!(close(tm_score(72.64, 67.33, 1.0).unwrap(), 1.08, 0.005));
    }

    #[test]
    #[allow(clippy::approx_constant)] // 3.14 is the reference table entry
    fn reference_lambda_sweep() {
        let expected = [
            (0.8, 0.58),
            (0.9, 0.88),
            (1.0, 1.34),
            (1.1, 2.05),
            (1.2, 3.14),
        ];
        for (lambda, want) in expected {
            let got = tm_score(69.52, 51.75, lambda).unwrap();
            assert!(close(got, want, 0.005), "lambda {lambda}: {got} vs {want}");
        }
    }

    #[test]
    fn percent_units_are_mandatory_off_lambda_one() {
        // The same sweep in fraction units misses the reference value by a
        // wide margin, which pins the percent convention.
        let fraction_units = (0.6952f64).powf(0.8) / 0.5175;
        assert!((fraction_units - 0.58).abs() > 0.05);
    }

    #[test]
    fn equal_accuracies_score_one() {
        assert!(close(tm_score(55.5, 55.5, 1.0).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn zero_mia_accuracy_is_an_error() {
        assert!(matches!(
            tm_score(50.0, 0.0, 1.0),
            Err(Error::ZeroMiaAccuracy)
        ));
    }

    #[test]
    fn reference_multi_attack_blend() {
        let tm_b = tm_score(68.13, 52.32, 1.0).unwrap();
        let tm_w = tm_score(68.13, 59.01, 1.0).unwrap();
        assert!(close(tm_score_multi(tm_b, tm_w, 0.5), 1.23, 0.005));
    }

    #[test]
    fn blend_extremes_pick_single_scores() {
        assert_eq!(tm_score_multi(1.5, 0.7, 1.0), 1.5);
        assert_eq!(tm_score_multi(1.5, 0.7, 0.0), 0.7);
    }

    fn report_with_score(i: usize, tm: f64) -> EvalReport {
        EvalReport {
            candidate: i,
            strategy: Some(UpdateStrategy::all()[i % 4]),
            task_acc_pct: 0.0,
            mia_acc_b_pct: None,
            mia_acc_w_pct: None,
            tm_b: None,
            tm_w: None,
            tm_combined: tm,
            sparsity: 0.1,
        }
    }

    #[test]
    fn selection_breaks_ties_by_enumeration_order() {
        let reports: Vec<EvalReport> = [1.1, 1.3, 0.9, 1.3]
            .iter()
            .enumerate()
            .map(|(i, &tm)| report_with_score(i, tm))
            .collect();
        assert_eq!(select_best(&reports).unwrap(), 1);
    }

    #[test]
    fn single_candidate_selects_itself() {
        let reports = vec![report_with_score(0, 0.4)];
        assert_eq!(select_best(&reports).unwrap(), 0);
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(select_best(&[]), Err(Error::NoCandidates)));
    }

    // Oracle: brute-force linear scan over randomized scores.
    #[test]
    fn selection_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        for _ in 0..200 {
            let scores: Vec<f64> = (0..rng.random_range(1..9))
                .map(|_| rng.random_range(0.0..3.0))
                .collect();
            let reports: Vec<EvalReport> = scores
                .iter()
                .enumerate()
                .map(|(i, &tm)| report_with_score(i, tm))
                .collect();
            let mut expect = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[expect] {
                    expect = i;
                }
            }
            assert_eq!(select_best(&reports).unwrap(), expect);
        }
    }

    #[test]
    fn scaling_all_scores_never_changes_the_choice() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(72);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
            let factor = rng.random_range(0.01..100.0);
            let base: Vec<EvalReport> = scores
                .iter()
                .enumerate()
                .map(|(i, &tm)| report_with_score(i, tm))
                .collect();
            let scaled: Vec<EvalReport> = scores
                .iter()
                .enumerate()
                .map(|(i, &tm)| report_with_score(i, tm * factor))
                .collect();
            assert_eq!(select_best(&base).unwrap(), select_best(&scaled).unwrap());
        }
    }

    #[test]
    fn score_is_monotone_in_both_accuracies() {
        let base = tm_score(70.0, 55.0, 1.0).unwrap();
        for delta in [0.5, 2.0, 10.0] {
            assert!(tm_score(70.0 + delta, 55.0, 1.0).unwrap() > base);
            assert!(tm_score(70.0, 55.0 + delta, 1.0).unwrap() < base);
        }
        // Holds for lambda != 1 as well.
        let base = tm_score(70.0, 55.0, 1.2).unwrap();
        assert!(tm_score(71.0, 55.0, 1.2).unwrap() > base);
        assert!(tm_score(70.0, 56.0, 1.2).unwrap() < base);
    }

    #[test]
    fn scored_reports_are_self_consistent() {
        let report = EvalReport::score(
            2,
            Some(UpdateStrategy::all()[2]),
            68.13,
            Some(52.32),
            Some(59.01),
            1.0,
            0.5,
            0.05,
        )
        .unwrap();
        assert!(report.consistent(1.0, 0.5, 1e-12));
        assert!(close(report.tm_combined, 1.23, 0.005));
    }
}
