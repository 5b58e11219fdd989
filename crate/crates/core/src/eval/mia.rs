//! Confidence-based membership inference auditing.
//!
//! The attacker thresholds the model's max-softmax confidence: rows at or
//! above the threshold are called members. Calibration sweeps every observed
//! confidence and keeps the balanced-accuracy maximizer (ties going to the
//! lowest threshold). The score of a forget set is the fraction still called
//! member — lower means better forgetting.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{softmax_rows, ModelParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiaAttacker {
    /// Confidence threshold: predicted member iff max-softmax ≥ threshold.
    pub threshold: f64,
    pub balanced_accuracy: f64,
    /// Set when member and non-member confidences were indistinguishable;
    /// the threshold then sits at the pooled median.
    pub low_power: bool,
    pub members_calibrated: usize,
    pub nonmembers_calibrated: usize,
}

/// Max-softmax confidence per row.
pub fn confidences(model: &ModelParams, rows: ArrayView2<f64>) -> Result<Vec<f64>> {
    let trace = model.forward_batch(&rows.to_owned())?;
    let probs = softmax_rows(trace.logits());
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

const LOW_POWER_BALANCED_ACCURACY: f64 = 0.55;

/// Calibrate the attacker on known members and non-members of the model
/// under audit.
pub fn train_mia_attacker(
    model: &ModelParams,
    member_set: ArrayView2<f64>,
    nonmember_set: ArrayView2<f64>,
) -> Result<MiaAttacker> {
    if member_set.nrows() == 0 || nonmember_set.nrows() == 0 {
        return Err(Error::InvalidConfig(
            "MIA calibration needs nonempty member and non-member sets".into(),
        ));
    }
    let member_conf = confidences(model, member_set)?;
    let nonmember_conf = confidences(model, nonmember_set)?;

    let mut candidates: Vec<f64> = member_conf
        .iter()
        .chain(nonmember_conf.iter())
        .cloned()
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
    candidates.dedup();

    let balanced = |threshold: f64| {
        let tpr = member_conf.iter().filter(|&&c| c >= threshold).count() as f64
            / member_conf.len() as f64;
        let tnr = nonmember_conf.iter().filter(|&&c| c < threshold).count() as f64
            / nonmember_conf.len() as f64;
        0.5 * (tpr + tnr)
    };

    let mut best_threshold = candidates[0];
    let mut best_acc = balanced(best_threshold);
    for &t in &candidates[1..] {
        let acc = balanced(t);
        if acc > best_acc {
            best_acc = acc;
            best_threshold = t;
        }
    }

    let low_power = best_acc < LOW_POWER_BALANCED_ACCURACY;
    if low_power {
        // indistinguishable distributions: fall back to the pooled median
        let mid = candidates.len() / 2;
        best_threshold = candidates[mid.min(candidates.len() - 1)];
        best_acc = balanced(best_threshold);
    }

    Ok(MiaAttacker {
        threshold: best_threshold,
        balanced_accuracy: best_acc,
        low_power,
        members_calibrated: member_conf.len(),
        nonmembers_calibrated: nonmember_conf.len(),
    })
}

/// Fraction of the forget set the attacker still flags as member.
pub fn mia_score(
    attacker: &MiaAttacker,
    model: &ModelParams,
    dataset: &Dataset,
    forget_indices: &[usize],
) -> Result<f64> {
    if forget_indices.is_empty() {
        return Err(Error::EmptyPartition("mia_score on empty forget set".into()));
    }
    let rows = dataset.features.select(ndarray::Axis(0), forget_indices);
    let conf = confidences(model, rows.view())?;
    let members = conf.iter().filter(|&&c| c >= attacker.threshold).count();
    Ok(members as f64 / forget_indices.len() as f64)
}
