//! Debiased machine unlearning for dense classifiers.
//!
//! Given a trained teacher model and a deletion request, this crate produces
//! an unlearned student model by combining four ingredients:
//!
//! - **Interventional distillation** — the student matches the teacher's
//!   predictions on backdoor-adjusted inputs built from gradient-derived
//!   causal/background splits ([`intervention`]).
//! - **Counterfactual-guided forgetting** — each forget sample is aligned
//!   with the teacher's distribution at a minimal same-concept
//!   counterfactual ([`counterfactual`]).
//! - **Contrastive boundary expansion** — forget embeddings are pulled
//!   toward their counterfactual and pushed from retained samples of other
//!   classes ([`unlearn::losses`]).
//! - **Plain cross-entropy on the retain set** to anchor utility.
//!
//! [`datagen`] builds synthetic datasets from a structural causal model with
//! controllable shortcut/label bias and ingests tabular CSV data; [`eval`]
//! scores the result (RA, FA, MIA, RTE, DI, EOD, semantic redistribution)
//! against a retrain oracle and reference baselines.

pub mod counterfactual;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod exec;
pub mod intervention;
pub mod model;
pub mod unlearn;

pub use error::{Error, Result};
