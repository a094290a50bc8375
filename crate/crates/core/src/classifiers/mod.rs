//! Learning-free classifiers fit on one episode's supports.
//!
//! All three score a query so that `score >= 0` means positive.

mod knn;
mod prototype;
mod svm;

pub use knn::{knn_classify, DEFAULT_K};
pub use prototype::{prototype_classify, prototype_fit, PrototypePair};
pub use svm::{kkt_residuals, margin_score, primal_objective, svm_fit, Hyperplane, SvmConfig, SvmFit};

use crate::episode::Label;

/// Borrowed support vector with its label.
pub type Labeled<'a> = (&'a [f64], Label);
