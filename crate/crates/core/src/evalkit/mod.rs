//! Evaluation: string metrics, de-biased multiple choice, leakage audits
//! and the temporal index swap.

pub mod debias;
pub mod leakage;
pub mod metrics;
pub mod templates;
pub mod temporal;

use serde::{Deserialize, Serialize};

pub use debias::{
    debias_infer, ChoiceScorer, ChoiceTask, DebiasMode, DebiasResult, ReaderChoiceScorer,
};
pub use leakage::{filtered_rerun, leakage_audit, LeakageReport, RerunReport};
pub use metrics::{accuracy, exact_match, f1, normalize_answer};
pub use temporal::{
    temporal_swap_eval, DatedIndex, OverlapAnswerer, QaAnswerer, SwapMatrix, TemporalQA,
};

/// Open-domain question with any number of acceptable answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaTask {
    pub question: String,
    pub answers: Vec<String>,
}
