use serde::{Deserialize, Serialize};

use crate::models::{ModelKind, Task};

/// Evaluation summary; inapplicable fields serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub model: ModelKind,
    pub dc: Option<f64>,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn empty(task: Task, model: ModelKind, n_samples: usize, seed: u64) -> Self {
        MetricReport {
            task,
            model,
            dc: None,
            mse: None,
            accuracy: None,
            macro_f1: None,
            auc: None,
            precision: None,
            recall: None,
            f1: None,
            n_samples,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}
