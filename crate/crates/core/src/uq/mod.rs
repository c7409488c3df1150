//! Uncertainty scores, detection metrics and significance tests.

mod detect;
mod metrics;
mod scores;
mod ttest;

pub use detect::{
    misclassification_detection, misclassification_from_probs, ood_detection, ood_from_probs,
    read_scores_csv, write_scores_csv, DetectionResult,
};
pub use metrics::{aupr, auroc, pr_curve, roc_curve};
pub use scores::{uncertainty_scores, Measure, ScoreSource, ScoreVector};
pub use ttest::ttest_unpaired;
