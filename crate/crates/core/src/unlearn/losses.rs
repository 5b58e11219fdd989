//! The four loss terms of the unlearning objective.
//!
//! `L = L_r + α·L_f + β·L_fCB + γ·Σℓ`, where
//!
//! - `L_r` distills the teacher's *interventional* distribution on the
//!   retain set into the student (forward KL),
//! - `L_f` aligns the student's interventional distribution on a forget
//!   sample with the teacher's at that sample's counterfactual,
//! - `L_fCB` is the contrastive boundary loss pulling forget embeddings
//!   toward their counterfactual and away from retained other-class samples,
//! - `Σℓ` is plain cross-entropy on raw retain inputs.
//!
//! Each term has a value-only form (readable per-sample math, the public
//! contract) and a batched value-plus-gradients form used by the training
//! loop; tests cross-check the two routes against each other and against
//! finite differences.

use ndarray::{Array1, Array2, Axis};

use crate::counterfactual::Counterfactual;
use crate::error::{Error, Result};
use crate::intervention::{
    interventional_distribution, interventional_input, interventional_input_with_z,
    InterventionContext, MaskedInstance,
};
use crate::model::{
    kl_divergence, softmax_rows, ModelParams, ParamGrads, PROB_FLOOR,
};

/// One forget sample prepared for the unlearning losses.
#[derive(Debug, Clone)]
pub struct ForgetItem {
    pub masked: MaskedInstance,
    pub counterfactual: Counterfactual,
    /// Retain-set rows whose teacher-predicted class differs from the
    /// teacher's prediction on this sample.
    pub negatives: Vec<usize>,
    /// Skip-fallback samples keep their contrastive role but drop out of the
    /// forgetting KL.
    pub in_forget_loss: bool,
}

pub type ForgetBatch = Vec<ForgetItem>;

/// Mean KL between teacher and student interventional distributions over a
/// retain batch. Zero exactly when the student equals the teacher.
pub fn remember_loss(
    teacher: &ModelParams,
    student: &ModelParams,
    retain_batch: &[MaskedInstance],
    ctx: &InterventionContext,
) -> Result<f64> {
    if retain_batch.is_empty() {
        return Err(Error::InvalidConfig("remember_loss on an empty batch".into()));
    }
    let mut total = 0.0;
    for m in retain_batch {
        let p = interventional_distribution(teacher, m, ctx)?;
        let q = interventional_distribution(student, m, ctx)?;
        total += kl_divergence(&p, &q)?;
    }
    Ok(total / retain_batch.len() as f64)
}

/// Mean KL between the teacher's interventional distribution at the
/// counterfactual (`do(z + δ)`) and the student's at the original (`do(z)`),
/// over the forget batch. Skip-fallback items are excluded.
pub fn forget_loss(
    teacher: &ModelParams,
    student: &ModelParams,
    batch: &ForgetBatch,
    ctx: &InterventionContext,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("forget_loss on an empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for item in batch {
        if !item.in_forget_loss {
            continue;
        }
        let z_cf = causal_part(&item.counterfactual.x_cf, &item.masked.mask);
        let teacher_input =
            interventional_input_with_z(&z_cf, &item.masked.mask, item.masked.y, ctx);
        let p = teacher.predict(&teacher_input)?;
        let q = student.predict(&interventional_input(&item.masked, ctx))?;
        total += kl_divergence(&p, &q)?;
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Causal part of `x` under a mask: `(1 − M) ⊙ x`.
pub fn causal_part(x: &Array1<f64>, mask: &[u8]) -> Array1<f64> {
    Array1::from_shape_fn(x.len(), |i| if mask[i] == 0 { x[i] } else { 0.0 })
}

/// Contrastive boundary loss over a forget batch (a sum over samples, each
/// scaled by `1/|N|`). Embeddings come from the student on raw inputs and
/// are compared with raw dot products at temperature `tau`.
pub fn contrastive_boundary_loss(
    student: &ModelParams,
    batch: &ForgetBatch,
    features: &Array2<f64>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("tau must be positive".into()));
    }
    let mut total = 0.0;
    for item in batch {
        if item.negatives.is_empty() {
            return Err(Error::InvalidConfig(
                "contrastive loss needs at least one negative per sample".into(),
            ));
        }
        let xi_j = student.embed(&item.masked.x)?;
        let xi_cf = student.embed(&item.counterfactual.x_cf)?;
        let a_cf = xi_j.dot(&xi_cf) / tau;
        let mut scores = vec![a_cf];
        for &k in &item.negatives {
            let xi_k = student.embed(&features.row(k).to_owned())?;
            scores.push(xi_j.dot(&xi_k) / tau);
        }
        let lse = log_sum_exp(&scores);
        total += (lse - a_cf) / item.negatives.len() as f64;
    }
    Ok(total)
}

/// Analytic gradient of the *per-sample, unscaled* contrastive term with
/// respect to the `k`-th negative embedding:
/// `exp(ξ_j·ξ_k⁻/τ) / M · ξ_j/τ`, with `M` the loss denominator. The full
/// loss gradient is this divided by `|N|`.
pub fn contrastive_negative_gradient(
    xi_j: &Array1<f64>,
    xi_cf: &Array1<f64>,
    xi_negs: &[Array1<f64>],
    k: usize,
    tau: f64,
) -> Array1<f64> {
    let a_cf = xi_j.dot(xi_cf) / tau;
    let mut scores = vec![a_cf];
    for neg in xi_negs {
        scores.push(xi_j.dot(neg) / tau);
    }
    let lse = log_sum_exp(&scores);
    let w_k = (scores[k + 1] - lse).exp();
    xi_j * (w_k / tau)
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|&s| (s - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of the student on raw retain inputs.
pub fn retain_ce_loss(student: &ModelParams, retain_batch: &[MaskedInstance]) -> Result<f64> {
    if retain_batch.is_empty() {
        return Err(Error::InvalidConfig("retain_ce_loss on an empty batch".into()));
    }
    let mut total = 0.0;
    for m in retain_batch {
        let dist = student.predict(&m.x)?;
        total -= dist.probs()[m.y].max(PROB_FLOOR).ln();
    }
    Ok(total / retain_batch.len() as f64)
}

/// Per-term breakdown of the unlearning objective (raw, unweighted values).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub remember: f64,
    pub forget: f64,
    pub contrastive: f64,
    pub retain_ce: f64,
    pub total: f64,
}

/// Weighted total `L_r + α·L_f + β·L_fCB + γ·Σℓ` with per-term breakdown.
/// An empty forget batch contributes zero to the forgetting and contrastive
/// terms.
pub fn total_loss(
    teacher: &ModelParams,
    student: &ModelParams,
    retain_batch: &[MaskedInstance],
    forget_batch: &ForgetBatch,
    features: &Array2<f64>,
    ctx: &InterventionContext,
    config: &super::UnlearnConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let remember = remember_loss(teacher, student, retain_batch, ctx)?;
    let retain_ce = retain_ce_loss(student, retain_batch)?;
    let (forget, contrastive) = if forget_batch.is_empty() {
        (0.0, 0.0)
    } else {
        (
            forget_loss(teacher, student, forget_batch, ctx)?,
            contrastive_boundary_loss(student, forget_batch, features, config.tau)?,
        )
    };
    let total = remember
        + config.alpha * forget
        + config.beta * contrastive
        + config.gamma_loss * retain_ce;
    Ok(LossBreakdown {
        remember,
        forget,
        contrastive,
        retain_ce,
        total,
    })
}

// ---------------------------------------------------------------------------
// batched value-plus-gradient routes used by the training loop
// ---------------------------------------------------------------------------

/// Mean forward KL against fixed target rows; returns the mean value and the
/// student parameter gradients.
pub(crate) fn kl_term_grads(
    student: &ModelParams,
    inputs: &Array2<f64>,
    teacher_probs: &Array2<f64>,
) -> Result<(f64, ParamGrads)> {
    let batch = inputs.nrows() as f64;
    let trace = student.forward_batch(inputs)?;
    let q = softmax_rows(trace.logits());
    let mut value = 0.0;
    for (p_row, q_row) in teacher_probs.rows().into_iter().zip(q.rows()) {
        for (&p, &qv) in p_row.iter().zip(q_row.iter()) {
            if p > 0.0 {
                value += p * (p / qv.max(PROB_FLOOR)).ln();
            }
        }
    }
    value /= batch;
    let mut dlogits = &q - teacher_probs;
    dlogits.mapv_inplace(|v| v / batch);
    let (grads, _) = student.backward_batch(&trace, &dlogits);
    Ok((value, grads))
}

/// Mean cross-entropy on raw inputs with gradients.
pub(crate) fn ce_term_grads(
    student: &ModelParams,
    inputs: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, ParamGrads)> {
    let trace = student.forward_batch(inputs)?;
    let (value, dlogits) = crate::model::train::cross_entropy_and_grad(trace.logits(), labels);
    let (grads, _) = student.backward_batch(&trace, &dlogits);
    Ok((value, grads))
}

/// Contrastive boundary loss with gradients over a stacked embedding batch.
///
/// `stacked` holds, per item, the rows `[x_j, x_cf, negatives...]`;
/// `neg_counts[i]` gives the negative count of item `i`. The loss is a sum
/// over items (each scaled by `1/|N|`), matching the value-only route.
pub(crate) fn cb_term_grads(
    student: &ModelParams,
    stacked: &Array2<f64>,
    neg_counts: &[usize],
    tau: f64,
) -> Result<(f64, ParamGrads)> {
    let trace = student.forward_batch(stacked)?;
    let embeddings = trace.embeddings();
    let mut dembed = Array2::<f64>::zeros(embeddings.raw_dim());
    let mut value = 0.0;
    let mut row = 0usize;
    for &n_neg in neg_counts {
        let ncount = n_neg as f64;
        let xi_j = embeddings.row(row);
        let xi_cf = embeddings.row(row + 1);
        let a_cf = xi_j.dot(&xi_cf) / tau;
        let mut scores = Vec::with_capacity(n_neg + 1);
        scores.push(a_cf);
        for k in 0..n_neg {
            scores.push(xi_j.dot(&embeddings.row(row + 2 + k)) / tau);
        }
        let lse = log_sum_exp(&scores);
        value += (lse - a_cf) / ncount;

        // softmax weights over [cf, negatives]
        let w: Vec<f64> = scores.iter().map(|&s| (s - lse).exp()).collect();
        // dL/dξ_j = (1/|N|)[(w_cf − 1)ξ_cf + Σ w_k ξ_k]/τ
        {
            let mut d = &xi_cf.to_owned() * (w[0] - 1.0);
            for k in 0..n_neg {
                d = d + &embeddings.row(row + 2 + k).to_owned() * w[k + 1];
            }
            d.mapv_inplace(|v| v / (tau * ncount));
            dembed.row_mut(row).assign(&d);
        }
        // dL/dξ_cf = (1/|N|)(w_cf − 1)ξ_j/τ
        {
            let d = &xi_j.to_owned() * ((w[0] - 1.0) / (tau * ncount));
            dembed.row_mut(row + 1).assign(&d);
        }
        // dL/dξ_k = (1/|N|)w_k ξ_j/τ
        for k in 0..n_neg {
            let d = &xi_j.to_owned() * (w[k + 1] / (tau * ncount));
            dembed.row_mut(row + 2 + k).assign(&d);
        }
        row += 2 + n_neg;
    }
    if row != stacked.nrows() {
        return Err(Error::DimensionMismatch {
            expected: stacked.nrows(),
            got: row,
            context: "contrastive stacked batch".into(),
        });
    }
    let (grads, _) = student.backward_from_embedding_batch(&trace, &dembed);
    Ok((value, grads))
}

/// Gather rows of a feature matrix.
pub(crate) fn gather_rows(features: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    features.select(Axis(0), indices)
}
