//! Evaluation quantities for the three tasks.

pub mod classification;
pub mod detection;
pub mod report;

pub use classification::{accuracy, confusion_matrix, macro_f1, roc_auc, AucReport};
pub use detection::{detect_peaks, match_detections, DetectionMatchReport, MatchStrategy};
pub use report::MetricReport;
