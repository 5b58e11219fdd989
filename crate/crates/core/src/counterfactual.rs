//! Minimal same-concept counterfactuals via growing-sphere search.
//!
//! For a forget sample the search looks for the smallest perturbation,
//! supported only on causal (mask = 0) coordinates, that flips the teacher's
//! prediction to a class inside the same class-level concept (any other class
//! when the concept is a singleton). A fixed set of random causal-subspace
//! directions is drawn once per instance and probed at radii growing up to
//! `max_radius`; the first radius with a flip is refined by bisection along
//! each accepted direction and the cheapest candidate wins.
//!
//! The search strategy sits behind [`CounterfactualSearch`] so a latent-space
//! searcher can be added without touching callers.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, par_map};
use crate::intervention::MaskedInstance;
use crate::model::ModelParams;

const BISECTION_STEPS: usize = 10;

/// A perturbed input that crosses the teacher's boundary within the concept.
#[derive(Debug, Clone)]
pub struct Counterfactual {
    pub x_cf: Array1<f64>,
    /// `x_cf − x`, zero on every background coordinate.
    pub delta: Array1<f64>,
    pub source_class: usize,
    /// Teacher prediction at `x_cf`.
    pub cf_class: usize,
    pub l2_cost: f64,
}

impl Counterfactual {
    /// Degenerate counterfactuals (`δ = 0`) are produced for samples the
    /// teacher already misclassifies; they sit across the boundary as-is.
    pub fn is_degenerate(&self) -> bool {
        self.l2_cost == 0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfSearchConfig {
    pub max_radius: f64,
    pub radius_steps: usize,
    pub samples_per_radius: usize,
    pub seed: u64,
}

impl Default for CfSearchConfig {
    fn default() -> Self {
        Self {
            max_radius: 6.0,
            radius_steps: 24,
            samples_per_radius: 64,
            seed: 0,
        }
    }
}

impl CfSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_radius > 0.0) {
            return Err(Error::InvalidConfig("max_radius must be positive".into()));
        }
        if self.radius_steps == 0 || self.samples_per_radius == 0 {
            return Err(Error::InvalidConfig(
                "radius_steps and samples_per_radius must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Pluggable counterfactual search strategy.
pub trait CounterfactualSearch {
    fn search(
        &self,
        teacher: &ModelParams,
        masked: &MaskedInstance,
        concept_of_class: &[usize],
        sample_index: usize,
    ) -> Result<Counterfactual>;
}

/// Random-direction growing-sphere search restricted to causal coordinates.
#[derive(Debug, Clone)]
pub struct GrowingSphereSearch {
    pub config: CfSearchConfig,
}

/// Target classes for a source class: same-concept siblings, or every other
/// class when the concept is a singleton.
pub fn cf_target_classes(concept_of_class: &[usize], source: usize) -> Vec<usize> {
    let concept = concept_of_class[source];
    let siblings: Vec<usize> = (0..concept_of_class.len())
        .filter(|&c| c != source && concept_of_class[c] == concept)
        .collect();
    if !siblings.is_empty() {
        return siblings;
    }
    (0..concept_of_class.len()).filter(|&c| c != source).collect()
}

impl CounterfactualSearch for GrowingSphereSearch {
    fn search(
        &self,
        teacher: &ModelParams,
        masked: &MaskedInstance,
        concept_of_class: &[usize],
        sample_index: usize,
    ) -> Result<Counterfactual> {
        self.config.validate()?;
        let cfg = &self.config;
        let n = masked.x.len();

        let source_pred = teacher.predict(&masked.x)?.argmax();
        if source_pred != masked.y {
            // already across the boundary: degenerate counterfactual
            return Ok(Counterfactual {
                x_cf: masked.x.clone(),
                delta: Array1::zeros(n),
                source_class: masked.y,
                cf_class: source_pred,
                l2_cost: 0.0,
            });
        }

        let causal: Vec<usize> = (0..n).filter(|&i| masked.mask[i] == 0).collect();
        if causal.is_empty() {
            return Err(Error::CfNotFound {
                index: sample_index,
                max_radius: cfg.max_radius,
            });
        }
        let targets = cf_target_classes(concept_of_class, masked.y);

        // one fixed direction set per instance keeps cost monotone in the
        // radius budget
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, sample_index as u64));
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let directions: Vec<Array1<f64>> = (0..cfg.samples_per_radius)
            .map(|_| {
                let mut dir = Array1::<f64>::zeros(n);
                loop {
                    for &c in &causal {
                        dir[c] = normal.sample(&mut rng);
                    }
                    let norm = dir.dot(&dir).sqrt();
                    if norm > 1e-12 {
                        dir /= norm;
                        break;
                    }
                }
                dir
            })
            .collect();

        // candidates at each radius go through the teacher in one batch
        let predict_at = |offsets: &[(usize, f64)]| -> Result<Vec<usize>> {
            let mut batch = Array2::zeros((offsets.len(), n));
            for (row, &(dir_idx, scale)) in offsets.iter().enumerate() {
                batch
                    .row_mut(row)
                    .assign(&(&masked.x + &(&directions[dir_idx] * scale)));
            }
            teacher.predict_batch(&batch)
        };

        for step in 1..=cfg.radius_steps {
            let radius = cfg.max_radius * step as f64 / cfg.radius_steps as f64;
            let offsets: Vec<(usize, f64)> =
                (0..directions.len()).map(|d| (d, radius)).collect();
            let preds = predict_at(&offsets)?;
            let accepted: Vec<usize> = preds
                .iter()
                .enumerate()
                .filter(|(_, p)| targets.contains(p))
                .map(|(d, _)| d)
                .collect();
            if accepted.is_empty() {
                continue;
            }
            // bisect every accepted direction in lockstep; the upper endpoint
            // always keeps a valid flip
            let mut lo = vec![0.0f64; accepted.len()];
            let mut hi = vec![radius; accepted.len()];
            for _ in 0..BISECTION_STEPS {
                let mids: Vec<(usize, f64)> = accepted
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| (d, 0.5 * (lo[i] + hi[i])))
                    .collect();
                let preds = predict_at(&mids)?;
                for (i, pred) in preds.iter().enumerate() {
                    let mid = mids[i].1;
                    if targets.contains(pred) {
                        hi[i] = mid;
                    } else {
                        lo[i] = mid;
                    }
                }
            }
            let finals: Vec<(usize, f64)> = accepted
                .iter()
                .enumerate()
                .map(|(i, &d)| (d, hi[i]))
                .collect();
            let final_preds = predict_at(&finals)?;
            let mut best: Option<Counterfactual> = None;
            for (i, &d) in accepted.iter().enumerate() {
                debug_assert!(targets.contains(&final_preds[i]));
                if best.as_ref().is_none_or(|b| hi[i] < b.l2_cost) {
                    let delta = &directions[d] * hi[i];
                    best = Some(Counterfactual {
                        x_cf: &masked.x + &delta,
                        delta,
                        source_class: masked.y,
                        cf_class: final_preds[i],
                        l2_cost: hi[i],
                    });
                }
            }
            return Ok(best.expect("at least one accepted candidate"));
        }

        Err(Error::CfNotFound {
            index: sample_index,
            max_radius: cfg.max_radius,
        })
    }
}

/// Growing-sphere search for one instance (see [`GrowingSphereSearch`]).
pub fn find_counterfactual(
    teacher: &ModelParams,
    masked: &MaskedInstance,
    concept_of_class: &[usize],
    cfg: &CfSearchConfig,
    sample_index: usize,
) -> Result<Counterfactual> {
    GrowingSphereSearch { config: cfg.clone() }.search(teacher, masked, concept_of_class, sample_index)
}

/// Outcome of one search in a batch run.
#[derive(Debug, Clone)]
pub enum CfOutcome {
    Found(Counterfactual),
    NotFound { index: usize },
}

/// Search the whole forget set; data-parallel, order-preserving, and
/// deterministic (each sample derives its own RNG stream from the seed).
pub fn find_counterfactuals_batch(
    teacher: &ModelParams,
    masked: &[(usize, MaskedInstance)],
    concept_of_class: &[usize],
    cfg: &CfSearchConfig,
) -> Vec<CfOutcome> {
    par_map(masked, |(index, m)| {
        match find_counterfactual(teacher, m, concept_of_class, cfg, *index) {
            Ok(cf) => CfOutcome::Found(cf),
            Err(_) => CfOutcome::NotFound { index: *index },
        }
    })
}

/// Check a counterfactual against its three invariants; returns every
/// violated clause.
pub fn validate_counterfactual(
    teacher: &ModelParams,
    cf: &Counterfactual,
    masked: &MaskedInstance,
    concept_of_class: &[usize],
) -> Result<(bool, Vec<String>)> {
    let mut violations = Vec::new();
    for (i, &m) in masked.mask.iter().enumerate() {
        if m == 1 && cf.delta[i] != 0.0 {
            violations.push("delta-outside-causal-support".to_string());
            break;
        }
    }
    let pred_src = teacher.predict(&masked.x)?.argmax();
    let pred_cf = teacher.predict(&cf.x_cf)?.argmax();
    if pred_src == pred_cf {
        violations.push("no-flip".to_string());
    }
    if !cf_target_classes(concept_of_class, cf.source_class).contains(&cf.cf_class) {
        violations.push("cross-concept-target".to_string());
    }
    Ok((violations.is_empty(), violations))
}

/// One line of the counterfactual cache (line-delimited JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfCacheRecord {
    pub index: usize,
    pub found: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cf_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_cost: Option<f64>,
}

impl CfCacheRecord {
    pub fn from_outcome(outcome: &CfOutcome, index: usize) -> Self {
        match outcome {
            CfOutcome::Found(cf) => CfCacheRecord {
                index,
                found: true,
                delta: Some(cf.delta.to_vec()),
                cf_class: Some(cf.cf_class),
                source_class: Some(cf.source_class),
                l2_cost: Some(cf.l2_cost),
            },
            CfOutcome::NotFound { index } => CfCacheRecord {
                index: *index,
                found: false,
                delta: None,
                cf_class: None,
                source_class: None,
                l2_cost: None,
            },
        }
    }

    /// Rebuild the outcome given the source instance the record belongs to.
    pub fn to_outcome(&self, x: &Array1<f64>) -> Result<CfOutcome> {
        if !self.found {
            return Ok(CfOutcome::NotFound { index: self.index });
        }
        let delta = Array1::from_vec(self.delta.clone().ok_or_else(|| {
            Error::InvalidConfig(format!("cache record {} lacks delta", self.index))
        })?);
        if delta.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: delta.len(),
                context: format!("cached delta for sample {}", self.index),
            });
        }
        let l2_cost = self.l2_cost.unwrap_or_else(|| delta.dot(&delta).sqrt());
        Ok(CfOutcome::Found(Counterfactual {
            x_cf: x + &delta,
            delta,
            source_class: self.source_class.unwrap_or(0),
            cf_class: self.cf_class.unwrap_or(0),
            l2_cost,
        }))
    }
}

/// Write a counterfactual cache as line-delimited JSON.
pub fn save_cf_cache(records: &[CfCacheRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read a counterfactual cache written by [`save_cf_cache`].
pub fn load_cf_cache(path: impl AsRef<Path>) -> Result<Vec<CfCacheRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
