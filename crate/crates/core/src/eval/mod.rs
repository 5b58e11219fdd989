//! Metrics: utility (RA), forgetting (FA), privacy (MIA), run time (RTE),
//! fairness (DI, EOD) and the semantic-redistribution diagnostic.

pub mod experiment;
pub mod mia;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, ModelParams};

pub use experiment::{
    run_experiment, write_reports_csv, write_reports_json, DatasetSource, ExperimentPlan,
    Method, MetricsReport, ModelSpec, REPORT_SCHEMA_VERSION,
};
pub use mia::{mia_score, train_mia_attacker, MiaAttacker};

/// Argmax predictions for a set of dataset rows.
pub fn predictions(model: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let rows = dataset.features.select(ndarray::Axis(0), indices);
    let trace = model.forward_batch(&rows)?;
    let logits = trace.logits();
    Ok((0..indices.len())
        .map(|i| argmax(logits.row(i).as_slice().expect("contiguous")))
        .collect())
}

fn accuracy_over(model: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let preds = predictions(model, dataset, indices)?;
    let correct = preds
        .iter()
        .zip(indices)
        .filter(|(p, &i)| **p == dataset.labels[i])
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Accuracy on the retain set.
pub fn remaining_accuracy(
    model: &ModelParams,
    dataset: &Dataset,
    retain_indices: &[usize],
) -> Result<f64> {
    if retain_indices.is_empty() {
        return Err(Error::EmptyPartition("remaining_accuracy on empty retain set".into()));
    }
    accuracy_over(model, dataset, retain_indices)
}

/// Accuracy on the forget set.
pub fn forgetting_accuracy(
    model: &ModelParams,
    dataset: &Dataset,
    forget_indices: &[usize],
) -> Result<f64> {
    if forget_indices.is_empty() {
        return Err(Error::EmptyPartition("forgetting_accuracy on empty forget set".into()));
    }
    accuracy_over(model, dataset, forget_indices)
}

/// Disparate impact `P(ŷ=1 | s=0) / P(ŷ=1 | s=1)` over the given rows
/// (favorable class is class 1). `None` when a group is empty or the
/// privileged rate is zero.
pub fn disparate_impact(
    model: &ModelParams,
    dataset: &Dataset,
    eval_indices: &[usize],
) -> Result<Option<f64>> {
    let sensitive = dataset
        .sensitive
        .as_ref()
        .ok_or_else(|| Error::MetricUndefined("disparate_impact needs a sensitive attribute".into()))?;
    let preds = predictions(model, dataset, eval_indices)?;
    let mut favorable = [0usize; 2];
    let mut count = [0usize; 2];
    for (p, &i) in preds.iter().zip(eval_indices) {
        let g = sensitive[i] as usize;
        count[g] += 1;
        if *p == 1 {
            favorable[g] += 1;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Ok(None);
    }
    let rate_unpriv = favorable[0] as f64 / count[0] as f64;
    let rate_priv = favorable[1] as f64 / count[1] as f64;
    if rate_priv == 0.0 {
        return Ok(None);
    }
    Ok(Some(rate_unpriv / rate_priv))
}

/// Equal opportunity difference `TPR(s=0) − TPR(s=1)` over the given rows.
/// `None` when a `(group, y=1)` cell is empty.
pub fn equal_opportunity_difference(
    model: &ModelParams,
    dataset: &Dataset,
    eval_indices: &[usize],
) -> Result<Option<f64>> {
    let sensitive = dataset.sensitive.as_ref().ok_or_else(|| {
        Error::MetricUndefined("equal_opportunity_difference needs a sensitive attribute".into())
    })?;
    let preds = predictions(model, dataset, eval_indices)?;
    let mut tp = [0usize; 2];
    let mut pos = [0usize; 2];
    for (p, &i) in preds.iter().zip(eval_indices) {
        if dataset.labels[i] != 1 {
            continue;
        }
        let g = sensitive[i] as usize;
        pos[g] += 1;
        if *p == 1 {
            tp[g] += 1;
        }
    }
    if pos[0] == 0 || pos[1] == 0 {
        return Ok(None);
    }
    Ok(Some(
        tp[0] as f64 / pos[0] as f64 - tp[1] as f64 / pos[1] as f64,
    ))
}

/// Fraction of forget rows predicted as a same-concept sibling of their true
/// class (the true class itself excluded). Rows whose concept is a singleton
/// count in the denominator and can never hit.
pub fn semantic_redistribution(
    model: &ModelParams,
    dataset: &Dataset,
    forget_indices: &[usize],
) -> Result<f64> {
    if forget_indices.is_empty() {
        return Err(Error::EmptyPartition("semantic_redistribution on empty forget set".into()));
    }
    let preds = predictions(model, dataset, forget_indices)?;
    let mut hits = 0usize;
    for (p, &i) in preds.iter().zip(forget_indices) {
        let truth = dataset.labels[i];
        if *p != truth && dataset.concept_of_class[*p] == dataset.concept_of_class[truth] {
            hits += 1;
        }
    }
    Ok(hits as f64 / forget_indices.len() as f64)
}
