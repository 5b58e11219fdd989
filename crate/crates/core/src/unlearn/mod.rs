//! The teacher–student unlearning loop.
//!
//! The student starts from the teacher's weights. Counterfactuals for the
//! forget set and the intervention context are built once up front (both
//! from the frozen teacher), then every optimizer step sees one retain batch
//! and one forget batch so all four loss terms receive gradients. Negatives
//! are resampled per batch from the retain set under the predicted-class
//! constraint. The teacher is never modified.

pub mod losses;

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{
    find_counterfactuals_batch, CfCacheRecord, CfOutcome, CfSearchConfig, Counterfactual,
};
use crate::datagen::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, par_map};
use crate::intervention::{
    build_intervention_context, compute_masks_batch, interventional_input,
    interventional_input_with_z, ContextDump, InterventionContext, MaskedInstance,
};
use crate::model::train::Optimizer;
use crate::model::{softmax_rows, ModelParams, OptimizerKind, ParamGrads};

pub use losses::{
    contrastive_boundary_loss, contrastive_negative_gradient, forget_loss, remember_loss,
    retain_ce_loss, total_loss, ForgetBatch, ForgetItem, LossBreakdown,
};

/// Behavior when no counterfactual is found within the search budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfFallback {
    /// Drop the sample from the forgetting KL; it still enters the
    /// contrastive loss paired with its nearest sibling sample.
    Skip,
    /// Use the nearest same-concept-different-class training point as the
    /// counterfactual (default).
    NearestSiblingSample,
}

/// How counterfactuals for the forget set are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfStrategy {
    /// Minimal perturbation via growing-sphere search (default). Boundary
    /// cost is exact; the teacher's distribution at such points is close to
    /// the decision fence.
    GrowingSphere,
    /// The nearest retained same-concept-different-class training point the
    /// teacher classifies as its own class, taken verbatim. Real-data
    /// counterfactuals carry confident teacher targets, which drives full
    /// class deletion much harder at small scale.
    SiblingSample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    /// Weight of the forgetting KL.
    pub alpha: f64,
    /// Weight of the contrastive boundary loss.
    pub beta: f64,
    /// Weight of the retain cross-entropy term.
    pub gamma_loss: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Negatives sampled per forget sample per batch.
    pub n_neg: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cf_fallback: CfFallback,
    pub cf_strategy: CfStrategy,
    pub optimizer: OptimizerKind,
    /// Sibling-mean mixing coefficient of the interventional input.
    pub gamma_mix: f64,
    /// Sampling pool size for the intervention context.
    pub pool_size: usize,
    /// Redraw the sampling pool every optimizer step instead of freezing it
    /// at unlearning start.
    pub resample_pool_per_batch: bool,
    pub cf_search: CfSearchConfig,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.2,
            gamma_loss: 0.2,
            tau: 0.5,
            n_neg: 16,
            learning_rate: 1e-4,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            cf_fallback: CfFallback::NearestSiblingSample,
            cf_strategy: CfStrategy::GrowingSphere,
            optimizer: OptimizerKind::Adam,
            gamma_mix: 0.2,
            pool_size: 32,
            resample_pool_per_batch: false,
            cf_search: CfSearchConfig::default(),
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_loss", self.gamma_loss),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be in (0, 1)",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.n_neg == 0 {
            return Err(Error::InvalidConfig("n_neg must be at least 1".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::InvalidConfig("pool_size must be at least 1".into()));
        }
        self.cf_search.validate()
    }
}

/// Mean loss values over one epoch's steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub remember: f64,
    pub forget: f64,
    pub contrastive: f64,
    pub retain_ce: f64,
    pub total: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug)]
pub struct UnlearnOutput {
    pub student: ModelParams,
    /// Wall-clock run time of the whole procedure (millisecond resolution).
    pub rte_seconds: f64,
    pub log: Vec<EpochLog>,
    /// Raw counterfactual search results, suitable for caching.
    pub cf_records: Vec<CfCacheRecord>,
    pub context: Option<ContextDump>,
    /// Forget rows excluded entirely (no counterfactual and no sibling
    /// fallback available).
    pub dropped_forget_rows: Vec<usize>,
}

/// Unlearn with the student initialized from the teacher (the standard entry).
pub fn unlearn(
    teacher: &ModelParams,
    dataset: &Dataset,
    partition: &Partition,
    config: &UnlearnConfig,
    cf_cache: Option<&[CfCacheRecord]>,
) -> Result<UnlearnOutput> {
    unlearn_with_init(teacher.clone(), teacher, dataset, partition, config, cf_cache)
}

/// Unlearn from an explicit student initialization (distillation-convergence
/// tests start the student away from the teacher).
pub fn unlearn_with_init(
    student_init: ModelParams,
    teacher: &ModelParams,
    dataset: &Dataset,
    partition: &Partition,
    config: &UnlearnConfig,
    cf_cache: Option<&[CfCacheRecord]>,
) -> Result<UnlearnOutput> {
    let t0 = Instant::now();
    config.validate()?;
    dataset.validate()?;
    partition.validate(dataset.num_rows())?;
    if teacher.input_dim() != dataset.num_features() {
        return Err(Error::DimensionMismatch {
            expected: dataset.num_features(),
            got: teacher.input_dim(),
            context: "teacher input_dim vs dataset".into(),
        });
    }
    if teacher.num_classes() != dataset.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: dataset.num_classes(),
            got: teacher.num_classes(),
            context: "teacher num_classes vs dataset".into(),
        });
    }

    let retain = &partition.retain_indices;
    let forget = &partition.forget_indices;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut student = student_init;

    // teacher-side preparation: masks for every row we will touch, batched
    // over chunks in parallel (chunking keeps input order, so results are
    // independent of the schedule)
    let retain_masks = masks_chunked(teacher, dataset, retain)?;
    let forget_masks = masks_chunked(teacher, dataset, forget)?;

    // teacher predictions on retain rows, grouped by class, for negatives
    // and for sibling-sample witness selection
    let retain_pred: Vec<usize> =
        teacher.predict_batch(&losses::gather_rows(&dataset.features, retain))?;
    let mut retain_by_pred: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (pos, &pred) in retain_pred.iter().enumerate() {
        retain_by_pred[pred].push(retain[pos]);
    }

    // counterfactuals: reuse the cache where it covers a row, otherwise
    // search (or pick sibling witnesses directly under that strategy)
    let (outcomes, cf_records) = resolve_counterfactuals(
        teacher,
        dataset,
        retain,
        &retain_pred,
        forget,
        &forget_masks,
        config,
        cf_cache,
    )?;

    let teacher_pred_forget: Vec<usize> = forget_masks
        .iter()
        .map(|m| teacher.predict(&m.x).map(|d| d.argmax()))
        .collect::<Result<_>>()?;

    // assemble forget items, applying the fallback policy
    let mut items: Vec<ForgetItem> = Vec::with_capacity(forget.len());
    let mut item_teacher_pred: Vec<usize> = Vec::with_capacity(forget.len());
    let mut dropped = Vec::new();
    for (pos, outcome) in outcomes.iter().enumerate() {
        let masked = forget_masks[pos].clone();
        match outcome {
            CfOutcome::Found(cf) => {
                items.push(ForgetItem {
                    masked,
                    counterfactual: cf.clone(),
                    negatives: Vec::new(),
                    in_forget_loss: true,
                });
                item_teacher_pred.push(teacher_pred_forget[pos]);
            }
            CfOutcome::NotFound { index } => {
                match sibling_sample_counterfactual(dataset, retain, &retain_pred, &masked) {
                    Some(cf) => {
                        items.push(ForgetItem {
                            masked,
                            counterfactual: cf,
                            negatives: Vec::new(),
                            in_forget_loss: config.cf_fallback
                                == CfFallback::NearestSiblingSample,
                        });
                        item_teacher_pred.push(teacher_pred_forget[pos]);
                    }
                    None => dropped.push(*index),
                }
            }
        }
    }

    let ctx_seed = derive_seed(config.seed, 0xC0);
    let mut ctx = build_intervention_context(
        teacher,
        dataset,
        retain,
        config.gamma_mix,
        config.pool_size,
        ctx_seed,
    )?;
    let context_dump = ctx.dump();

    // frozen-context fast path: interventional inputs and teacher targets
    // are constants of the loop
    let mut prepared = prepare_targets(teacher, &retain_masks, &items, &ctx)?;

    let retain_raw = losses::gather_rows(
        &dataset.features,
        retain,
    );
    let retain_labels: Vec<usize> = retain.iter().map(|&i| dataset.labels[i]).collect();

    let mut optimizer = Optimizer::new(config.optimizer, &student);
    let mut log = Vec::with_capacity(config.epochs);
    let mut retain_order: Vec<usize> = (0..retain.len()).collect();
    let mut forget_order: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        retain_order.shuffle(&mut rng);
        forget_order.shuffle(&mut rng);
        let retain_batches: Vec<&[usize]> =
            retain_order.chunks(config.batch_size).collect();
        let forget_batches: Vec<&[usize]> = if items.is_empty() {
            Vec::new()
        } else {
            forget_order.chunks(config.batch_size).collect()
        };

        let mut sums = LossBreakdown {
            remember: 0.0,
            forget: 0.0,
            contrastive: 0.0,
            retain_ce: 0.0,
            total: 0.0,
        };
        for (step, retain_chunk) in retain_batches.iter().enumerate() {
            if config.resample_pool_per_batch {
                let step_seed = derive_seed(ctx_seed, (epoch * retain_batches.len() + step + 1) as u64);
                ctx = build_intervention_context(
                    teacher,
                    dataset,
                    retain,
                    config.gamma_mix,
                    config.pool_size,
                    step_seed,
                )?;
                prepared = prepare_targets(teacher, &retain_masks, &items, &ctx)?;
            }
            let forget_chunk: &[usize] = if forget_batches.is_empty() {
                &[]
            } else {
                forget_batches[step % forget_batches.len()]
            };

            let mut grads = ParamGrads::zeros_like(&student);
            let mut breakdown = LossBreakdown {
                remember: 0.0,
                forget: 0.0,
                contrastive: 0.0,
                retain_ce: 0.0,
                total: 0.0,
            };

            // remember (weight 1)
            let xi = gather_prepared(&prepared.retain_xi, retain_chunk);
            let targets = gather_prepared(&prepared.retain_teacher_probs, retain_chunk);
            let (v, g) = losses::kl_term_grads(&student, &xi, &targets)?;
            breakdown.remember = v;
            grads.add_assign(&g);

            // retain cross-entropy (weight gamma_loss)
            if config.gamma_loss > 0.0 {
                let raw = gather_prepared(&retain_raw, retain_chunk);
                let labels: Vec<usize> =
                    retain_chunk.iter().map(|&i| retain_labels[i]).collect();
                let (v, mut g) = losses::ce_term_grads(&student, &raw, &labels)?;
                breakdown.retain_ce = v;
                g.scale(config.gamma_loss);
                grads.add_assign(&g);
            }

            if !forget_chunk.is_empty() {
                // forgetting KL (weight alpha)
                if config.alpha > 0.0 {
                    let contributing: Vec<usize> = forget_chunk
                        .iter()
                        .cloned()
                        .filter(|&i| items[i].in_forget_loss)
                        .collect();
                    if !contributing.is_empty() {
                        let xi = gather_prepared(&prepared.forget_xi, &contributing);
                        let targets =
                            gather_prepared(&prepared.forget_teacher_cf_probs, &contributing);
                        let (v, mut g) = losses::kl_term_grads(&student, &xi, &targets)?;
                        breakdown.forget = v;
                        g.scale(config.alpha);
                        grads.add_assign(&g);
                    }
                }

                // contrastive boundary (weight beta)
                if config.beta > 0.0 {
                    let (stacked, neg_counts) = stack_contrastive_batch(
                        dataset,
                        &items,
                        forget_chunk,
                        &retain_by_pred,
                        &item_teacher_pred,
                        config.n_neg,
                        &mut rng,
                    )?;
                    if !neg_counts.is_empty() {
                        let (v, mut g) =
                            losses::cb_term_grads(&student, &stacked, &neg_counts, config.tau)?;
                        breakdown.contrastive = v;
                        g.scale(config.beta);
                        grads.add_assign(&g);
                    }
                }
            }

            breakdown.total = breakdown.remember
                + config.alpha * breakdown.forget
                + config.beta * breakdown.contrastive
                + config.gamma_loss * breakdown.retain_ce;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            optimizer.step(&mut student, &grads, config.learning_rate);

            sums.remember += breakdown.remember;
            sums.forget += breakdown.forget;
            sums.contrastive += breakdown.contrastive;
            sums.retain_ce += breakdown.retain_ce;
            sums.total += breakdown.total;
        }

        let steps = retain_batches.len() as f64;
        log.push(EpochLog {
            epoch,
            remember: sums.remember / steps,
            forget: sums.forget / steps,
            contrastive: sums.contrastive / steps,
            retain_ce: sums.retain_ce / steps,
            total: sums.total / steps,
            elapsed_seconds: round_ms(epoch_start.elapsed().as_secs_f64()),
        });
    }

    Ok(UnlearnOutput {
        student,
        rte_seconds: round_ms(t0.elapsed().as_secs_f64()),
        log,
        cf_records,
        context: Some(context_dump),
        dropped_forget_rows: dropped,
    })
}

fn round_ms(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

fn masks_chunked(
    teacher: &ModelParams,
    dataset: &Dataset,
    rows: &[usize],
) -> Result<Vec<MaskedInstance>> {
    let chunks: Vec<&[usize]> = rows.chunks(256).collect();
    let per_chunk: Vec<Result<Vec<MaskedInstance>>> =
        par_map(&chunks, |chunk| compute_masks_batch(teacher, dataset, chunk));
    let mut out = Vec::with_capacity(rows.len());
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

struct PreparedTargets {
    retain_xi: Array2<f64>,
    retain_teacher_probs: Array2<f64>,
    forget_xi: Array2<f64>,
    forget_teacher_cf_probs: Array2<f64>,
}

fn prepare_targets(
    teacher: &ModelParams,
    retain_masks: &[MaskedInstance],
    items: &[ForgetItem],
    ctx: &InterventionContext,
) -> Result<PreparedTargets> {
    let n_feat = teacher.input_dim();
    let retain_xi = stack_rows(
        retain_masks.iter().map(|m| interventional_input(m, ctx)),
        retain_masks.len(),
        n_feat,
    );
    let retain_teacher_probs = if retain_masks.is_empty() {
        Array2::zeros((0, teacher.num_classes()))
    } else {
        softmax_rows(teacher.forward_batch(&retain_xi)?.logits())
    };
    let forget_xi = stack_rows(
        items.iter().map(|it| interventional_input(&it.masked, ctx)),
        items.len(),
        n_feat,
    );
    let forget_teacher_cf_probs = if items.is_empty() {
        Array2::zeros((0, teacher.num_classes()))
    } else {
        let teacher_inputs = stack_rows(
            items.iter().map(|it| {
                let z_cf = losses::causal_part(&it.counterfactual.x_cf, &it.masked.mask);
                interventional_input_with_z(&z_cf, &it.masked.mask, it.masked.y, ctx)
            }),
            items.len(),
            n_feat,
        );
        softmax_rows(teacher.forward_batch(&teacher_inputs)?.logits())
    };
    Ok(PreparedTargets {
        retain_xi,
        retain_teacher_probs,
        forget_xi,
        forget_teacher_cf_probs,
    })
}

fn stack_rows(
    rows: impl Iterator<Item = Array1<f64>>,
    count: usize,
    dim: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((count, dim));
    for (i, row) in rows.enumerate() {
        out.row_mut(i).assign(&row);
    }
    out
}

fn gather_prepared(matrix: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    matrix.select(ndarray::Axis(0), indices)
}

/// Counterfactual from retained data: the nearest same-concept-different-
/// class training point that the teacher classifies as its own class, taken
/// verbatim. Proximity is measured on the sample's causal coordinates; the
/// teacher-classification filter keeps the witness connected to its class
/// region, so the teacher's distribution there is a confident flip target.
fn sibling_sample_counterfactual(
    dataset: &Dataset,
    retain: &[usize],
    retain_pred: &[usize],
    masked: &MaskedInstance,
) -> Option<Counterfactual> {
    let targets = dataset.cf_targets(masked.y);
    let mut best: Option<(f64, usize)> = None;
    for (pos, &row) in retain.iter().enumerate() {
        let label = dataset.labels[row];
        if !targets.contains(&label) || retain_pred[pos] != label {
            continue;
        }
        let mut d2 = 0.0;
        for (c, &m) in masked.mask.iter().enumerate() {
            if m == 0 {
                let diff = dataset.features[[row, c]] - masked.x[c];
                d2 += diff * diff;
            }
        }
        if best.is_none_or(|(b, _)| d2 < b) {
            best = Some((d2, row));
        }
    }
    let (_, row) = best?;
    let x_cf = dataset.features.row(row).to_owned();
    let delta = &x_cf - &masked.x;
    let l2_cost = delta.dot(&delta).sqrt();
    Some(Counterfactual {
        x_cf,
        delta,
        source_class: masked.y,
        cf_class: dataset.labels[row],
        l2_cost,
    })
}

#[allow(clippy::too_many_arguments)]
fn resolve_counterfactuals(
    teacher: &ModelParams,
    dataset: &Dataset,
    retain: &[usize],
    retain_pred: &[usize],
    forget: &[usize],
    forget_masks: &[MaskedInstance],
    config: &UnlearnConfig,
    cf_cache: Option<&[CfCacheRecord]>,
) -> Result<(Vec<CfOutcome>, Vec<CfCacheRecord>)> {
    let mut outcomes: Vec<Option<CfOutcome>> = vec![None; forget.len()];
    if let Some(cache) = cf_cache {
        let by_index: std::collections::HashMap<usize, &CfCacheRecord> =
            cache.iter().map(|r| (r.index, r)).collect();
        for (pos, &row) in forget.iter().enumerate() {
            if let Some(rec) = by_index.get(&row) {
                outcomes[pos] = Some(rec.to_outcome(&forget_masks[pos].x)?);
            }
        }
    }
    match config.cf_strategy {
        CfStrategy::GrowingSphere => {
            let missing: Vec<(usize, MaskedInstance)> = forget
                .iter()
                .enumerate()
                .filter(|(pos, _)| outcomes[*pos].is_none())
                .map(|(pos, &row)| (row, forget_masks[pos].clone()))
                .collect();
            if !missing.is_empty() {
                let searched = find_counterfactuals_batch(
                    teacher,
                    &missing,
                    &dataset.concept_of_class,
                    &config.cf_search,
                );
                let mut it = searched.into_iter();
                for pos in 0..forget.len() {
                    if outcomes[pos].is_none() {
                        outcomes[pos] = Some(it.next().expect("one outcome per missing row"));
                    }
                }
            }
        }
        CfStrategy::SiblingSample => {
            for (pos, &row) in forget.iter().enumerate() {
                if outcomes[pos].is_some() {
                    continue;
                }
                outcomes[pos] = Some(
                    match sibling_sample_counterfactual(
                        dataset,
                        retain,
                        retain_pred,
                        &forget_masks[pos],
                    ) {
                        Some(cf) => CfOutcome::Found(cf),
                        None => CfOutcome::NotFound { index: row },
                    },
                );
            }
        }
    }
    let outcomes: Vec<CfOutcome> = outcomes.into_iter().map(|o| o.expect("filled")).collect();
    let records: Vec<CfCacheRecord> = outcomes
        .iter()
        .zip(forget)
        .map(|(o, &row)| CfCacheRecord::from_outcome(o, row))
        .collect();
    Ok((outcomes, records))
}

/// Sample `n_neg` negatives per forget item and stack the contrastive rows
/// `[x_j, x_cf, negatives...]` per item.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stack_contrastive_batch(
    dataset: &Dataset,
    items: &[ForgetItem],
    chunk: &[usize],
    retain_by_pred: &[Vec<usize>],
    teacher_pred_items: &[usize],
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let n_feat = dataset.num_features();
    let mut rows: Vec<f64> = Vec::new();
    let mut neg_counts = Vec::new();
    for &i in chunk {
        let item = &items[i];
        let own_pred = teacher_pred_items[i];
        let total_other: usize = retain_by_pred
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != own_pred)
            .map(|(_, v)| v.len())
            .sum();
        if total_other == 0 {
            continue;
        }
        rows.extend(item.masked.x.iter());
        rows.extend(item.counterfactual.x_cf.iter());
        for _ in 0..n_neg {
            let mut draw = rng.random_range(0..total_other);
            let mut neg_row = None;
            for (c, pool) in retain_by_pred.iter().enumerate() {
                if c == own_pred {
                    continue;
                }
                if draw < pool.len() {
                    neg_row = Some(pool[draw]);
                    break;
                }
                draw -= pool.len();
            }
            let neg_row = neg_row.expect("draw within total_other");
            rows.extend(dataset.features.row(neg_row).iter());
        }
        neg_counts.push(n_neg);
    }
    let n_rows = rows.len() / n_feat;
    Ok((
        Array2::from_shape_vec((n_rows, n_feat), rows)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?,
        neg_counts,
    ))
}
