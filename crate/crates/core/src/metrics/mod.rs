//! Discrimination metrics and evaluation reports.

mod auc;
mod cv;
mod report;

pub use auc::{gini, roc_auc};
pub use cv::{
    cross_validate, summarize_folds, window_label, window_sweep, CvReport, CvSummary, SweepPoint, SweepReport, SweepSettings, WINDOW_SIZES,
};
pub use report::{evaluate, evaluate_model, HorizonAuc, HorizonReport, REPORT_COLUMNS};
