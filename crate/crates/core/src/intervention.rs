//! Causal/background splits and interventional predictions.
//!
//! An input is split by gradient magnitude: the half of the coordinates with
//! the smallest loss-gradient magnitudes form the background part `v`, the
//! rest the causal part `z` (sensitive-tagged coordinates are always forced
//! into the background). Predictions under intervention are evaluated at
//! `z + v̄ + γ·z̄`, where `v̄` averages background parts over a sampled pool
//! and `z̄` averages causal parts of same-concept sibling classes.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FeatureRole};
use crate::error::{Error, Result};
use crate::model::{ModelParams, PredictionDistribution};

/// An input split into causal part `z`, background part `v` and binary mask
/// (1 = background). `v + z = x` exactly and the mask holds exactly
/// `⌈n/2⌉` ones (more only if sensitive coordinates alone exceed that).
#[derive(Debug, Clone)]
pub struct MaskedInstance {
    pub x: Array1<f64>,
    pub y: usize,
    pub mask: Vec<u8>,
    pub v: Array1<f64>,
    pub z: Array1<f64>,
}

impl MaskedInstance {
    /// Split `x` with an explicit mask (1 = background coordinate).
    pub fn with_mask(x: Array1<f64>, y: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: mask.len(),
                context: "mask length".into(),
            });
        }
        let v = Array1::from_shape_fn(x.len(), |i| if mask[i] == 1 { x[i] } else { 0.0 });
        let z = Array1::from_shape_fn(x.len(), |i| if mask[i] == 0 { x[i] } else { 0.0 });
        Ok(Self { x, y, mask, v, z })
    }

    pub fn background_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Number of background coordinates: half the features, rounded up.
pub fn background_target(num_features: usize) -> usize {
    num_features.div_ceil(2)
}

/// Pick background coordinates from gradient magnitudes.
///
/// Coordinates are ranked by `(|δ|, index)` ascending; the smallest
/// `⌈n/2⌉` become background, ties resolving to the lower index. Sensitive
/// coordinates are forced into the background, displacing the
/// largest-magnitude background coordinates to keep the count.
pub fn mask_from_scores(scores: &[f64], roles: Option<&[Option<FeatureRole>]>) -> Vec<u8> {
    let n = scores.len();
    let target = background_target(n);
    let sensitive: Vec<bool> = match roles {
        Some(r) => r.iter().map(|x| *x == Some(FeatureRole::Sensitive)).collect(),
        None => vec![false; n],
    };
    let num_sensitive = sensitive.iter().filter(|&&s| s).count();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .abs()
            .partial_cmp(&scores[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut mask = vec![0u8; n];
    for (i, &is_sens) in sensitive.iter().enumerate() {
        if is_sens {
            mask[i] = 1;
        }
    }
    let mut remaining = target.saturating_sub(num_sensitive);
    for &i in &order {
        if remaining == 0 {
            break;
        }
        if mask[i] == 0 {
            mask[i] = 1;
            remaining -= 1;
        }
    }
    mask
}

/// Split an instance by teacher gradient magnitude.
pub fn compute_mask(
    model: &ModelParams,
    x: &Array1<f64>,
    y: usize,
    feature_roles: Option<&[Option<FeatureRole>]>,
) -> Result<MaskedInstance> {
    if let Some(roles) = feature_roles {
        if roles.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: roles.len(),
                context: "feature_roles length".into(),
            });
        }
    }
    let grad = model.input_gradient(x, y)?;
    let mask = mask_from_scores(grad.as_slice().expect("contiguous"), feature_roles);
    MaskedInstance::with_mask(x.clone(), y, mask)
}

/// Split many dataset rows at once (one batched gradient pass).
pub fn compute_masks_batch(
    model: &ModelParams,
    dataset: &Dataset,
    rows: &[usize],
) -> Result<Vec<MaskedInstance>> {
    let roles = dataset.feature_roles.as_deref();
    let x = dataset.features.select(ndarray::Axis(0), rows);
    let ys: Vec<usize> = rows.iter().map(|&i| dataset.labels[i]).collect();
    let grads = model.input_gradients_batch(&x, &ys)?;
    rows.iter()
        .enumerate()
        .map(|(pos, _)| {
            let grad_row = grads.row(pos);
            let mask = mask_from_scores(grad_row.as_slice().expect("contiguous"), roles);
            MaskedInstance::with_mask(x.row(pos).to_owned(), ys[pos], mask)
        })
        .collect()
}

/// Frozen sampling pool averages used by interventional predictions.
///
/// `v_bar[c]` is the mean value of coordinate `c` over the pool instances
/// whose own mask marked `c` as background (zero when none did); `z_bar`
/// entries are the analogous conditional means of sibling-class causal
/// parts. Conditioning on the maskings keeps background content out of
/// causal coordinates and vice versa, so interventional inputs stay on the
/// data manifold.
#[derive(Debug, Clone)]
pub struct InterventionContext {
    pub v_bar: Array1<f64>,
    /// Per class: conditional mean causal part of same-concept siblings.
    /// Zero for classes whose concept has no other class or no retained
    /// siblings.
    pub z_bar_by_class: Vec<Array1<f64>>,
    pub pool_size: usize,
    pub gamma_mix: f64,
    pub seed: u64,
    /// Retain-set rows sampled for `v_bar`.
    pub v_pool_indices: Vec<usize>,
    /// Retain-set rows sampled per class for `z_bar`.
    pub z_pool_indices_by_class: Vec<Vec<usize>>,
    /// Classes whose `z_bar` entry is zero because no sibling rows exist.
    pub sibling_free_classes: Vec<usize>,
}

/// Build the context by sampling `pool_size` retain rows for `v̄` and, per
/// class, `pool_size` retain rows of same-concept sibling classes for `z̄`.
/// Masks come from the teacher; the pool is drawn once, deterministically.
pub fn build_intervention_context(
    model: &ModelParams,
    dataset: &Dataset,
    retain_indices: &[usize],
    gamma_mix: f64,
    pool_size: usize,
    seed: u64,
) -> Result<InterventionContext> {
    if pool_size == 0 {
        return Err(Error::InvalidConfig("pool_size must be at least 1".into()));
    }
    if retain_indices.is_empty() {
        return Err(Error::EmptyPartition("retain set is empty".into()));
    }
    let n_feat = dataset.num_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let v_pool_indices: Vec<usize> = (0..pool_size)
        .map(|_| retain_indices[rng.random_range(0..retain_indices.len())])
        .collect();
    let mut v_bar = Array1::<f64>::zeros(n_feat);
    let mut v_count = vec![0usize; n_feat];
    for masked in compute_masks_batch(model, dataset, &v_pool_indices)? {
        for (c, &m) in masked.mask.iter().enumerate() {
            if m == 1 {
                v_bar[c] += masked.x[c];
                v_count[c] += 1;
            }
        }
    }
    for (c, &count) in v_count.iter().enumerate() {
        if count > 0 {
            v_bar[c] /= count as f64;
        }
    }

    let num_classes = dataset.num_classes();
    let mut z_bar_by_class = Vec::with_capacity(num_classes);
    let mut z_pool_indices_by_class = Vec::with_capacity(num_classes);
    let mut sibling_free_classes = Vec::new();
    for class in 0..num_classes {
        let siblings = dataset.siblings(class);
        let pool: Vec<usize> = retain_indices
            .iter()
            .cloned()
            .filter(|&i| siblings.contains(&dataset.labels[i]))
            .collect();
        if pool.is_empty() {
            z_bar_by_class.push(Array1::zeros(n_feat));
            z_pool_indices_by_class.push(Vec::new());
            sibling_free_classes.push(class);
            continue;
        }
        let chosen: Vec<usize> = (0..pool_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let mut z_bar = Array1::<f64>::zeros(n_feat);
        let mut z_count = vec![0usize; n_feat];
        for masked in compute_masks_batch(model, dataset, &chosen)? {
            for (c, &m) in masked.mask.iter().enumerate() {
                if m == 0 {
                    z_bar[c] += masked.x[c];
                    z_count[c] += 1;
                }
            }
        }
        for (c, &count) in z_count.iter().enumerate() {
            if count > 0 {
                z_bar[c] /= count as f64;
            }
        }
        z_bar_by_class.push(z_bar);
        z_pool_indices_by_class.push(chosen);
    }

    Ok(InterventionContext {
        v_bar,
        z_bar_by_class,
        pool_size,
        gamma_mix,
        seed,
        v_pool_indices,
        z_pool_indices_by_class,
        sibling_free_classes,
    })
}

/// The backdoor-adjusted input `z + v̄ + γ·z̄[class]`, with `v̄` restricted to
/// the instance's background coordinates and `z̄` to its causal coordinates.
pub fn interventional_input(masked: &MaskedInstance, ctx: &InterventionContext) -> Array1<f64> {
    interventional_input_with_z(&masked.z, &masked.mask, masked.y, ctx)
}

/// Like [`interventional_input`] but with an explicit causal part (the
/// teacher side of the forgetting loss substitutes `z + δ`).
pub fn interventional_input_with_z(
    z: &Array1<f64>,
    mask: &[u8],
    class: usize,
    ctx: &InterventionContext,
) -> Array1<f64> {
    let z_bar = &ctx.z_bar_by_class[class];
    Array1::from_shape_fn(z.len(), |c| {
        if mask[c] == 1 {
            ctx.v_bar[c]
        } else {
            z[c] + ctx.gamma_mix * z_bar[c]
        }
    })
}

/// Model distribution at the interventional input.
pub fn interventional_distribution(
    model: &ModelParams,
    masked: &MaskedInstance,
    ctx: &InterventionContext,
) -> Result<PredictionDistribution> {
    model.predict(&interventional_input(masked, ctx))
}

/// JSON-serializable diagnostic dump of a context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextDump {
    pub v_bar: Vec<f64>,
    pub z_bar_by_class: Vec<Vec<f64>>,
    pub pool_size: usize,
    pub gamma_mix: f64,
    pub seed: u64,
    pub v_pool_indices: Vec<usize>,
    pub z_pool_indices_by_class: Vec<Vec<usize>>,
    pub sibling_free_classes: Vec<usize>,
}

impl InterventionContext {
    pub fn dump(&self) -> ContextDump {
        ContextDump {
            v_bar: self.v_bar.to_vec(),
            z_bar_by_class: self.z_bar_by_class.iter().map(|z| z.to_vec()).collect(),
            pool_size: self.pool_size,
            gamma_mix: self.gamma_mix,
            seed: self.seed,
            v_pool_indices: self.v_pool_indices.clone(),
            z_pool_indices_by_class: self.z_pool_indices_by_class.clone(),
            sibling_free_classes: self.sibling_free_classes.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scm_dataset, ScmSpec};
    use crate::model::{init_model, Activation, Layer};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_from_hand_sorted_magnitudes() {
        // δ = [3, 1, 4, 2]: two smallest magnitudes sit at coords 1 and 3
        let mask = mask_from_scores(&[3.0, 1.0, 4.0, 2.0], None);
        assert_eq!(mask, vec![0, 1, 0, 1]);
        let x = array![10.0, 20.0, 30.0, 40.0];
        let m = MaskedInstance::with_mask(x, 0, mask).unwrap();
        assert_eq!(m.v, array![0.0, 20.0, 0.0, 40.0]);
        assert_eq!(m.z, array![10.0, 0.0, 30.0, 0.0]);
    }

    #[test]
    fn equal_scores_pick_leading_coordinates() {
        let mask = mask_from_scores(&[1.0; 5], None);
        assert_eq!(mask, vec![1, 1, 1, 0, 0]); // ⌈5/2⌉ = 3
    }

    #[test]
    fn sensitive_coordinates_displace_largest_background() {
        // coord 2 is sensitive with the LARGEST magnitude; forcing it into
        // the background displaces the largest-magnitude ordinary background
        // coordinate (coord 3, |δ|=2) to keep the count at 2
        let roles = vec![None, None, Some(FeatureRole::Sensitive), None];
        let mask = mask_from_scores(&[3.0, 1.0, 4.0, 2.0], Some(&roles));
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 2);
        assert_eq!(mask[2], 1, "sensitive coordinate must be background");
        assert_eq!(mask[1], 1, "smallest-magnitude coordinate stays background");
    }

    #[test]
    fn mask_contract_holds_on_random_instances() {
        let model = init_model(9, &[12], 4, 3).unwrap();
        let mut roles = vec![None; 9];
        roles[4] = Some(FeatureRole::Sensitive);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..300 {
            let x = Array1::from_shape_fn(9, |_| rng.random_range(-2.0..2.0));
            let y = t % 4;
            let m = compute_mask(&model, &x, y, Some(&roles)).unwrap();
            assert_eq!(m.background_count(), background_target(9));
            assert_eq!(m.mask[4], 1);
            let back = &m.v + &m.z;
            for (a, b) in back.iter().zip(m.x.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "v + z must equal x exactly");
            }
        }
    }

    fn small_scm() -> (ScmSpec, Dataset) {
        let spec = ScmSpec {
            num_concepts: 2,
            classes_per_concept: vec![2, 2],
            causal_dim: 4,
            background_dim: 4,
            num_backgrounds: 3,
            shortcut_strength: 0.0,
            class_priors: vec![0.25; 4],
            sibling_mix: 0.2,
            noise_std: 0.3,
            samples: 400,
        };
        let ds = generate_scm_dataset(&spec, 5).unwrap();
        (spec, ds)
    }

    #[test]
    fn pool_of_one_reproduces_single_instance_background() {
        let (_, ds) = small_scm();
        let model = init_model(ds.num_features(), &[8], 4, 2).unwrap();
        let retain: Vec<usize> = (0..ds.num_rows()).collect();
        let ctx = build_intervention_context(&model, &ds, &retain, 0.2, 1, 7).unwrap();
        let row = ctx.v_pool_indices[0];
        let m = compute_mask(
            &model,
            &ds.features.row(row).to_owned(),
            ds.labels[row],
            ds.feature_roles.as_deref(),
        )
        .unwrap();
        assert_eq!(ctx.v_bar, m.v);
    }

    #[test]
    fn constant_background_is_recovered_by_v_bar() {
        // one background, almost no noise; a hand-built model with zero
        // weights on the background block has zero gradient there, so the
        // mask always selects the background coordinates
        let spec = ScmSpec {
            num_concepts: 1,
            classes_per_concept: vec![2],
            causal_dim: 3,
            background_dim: 3,
            num_backgrounds: 1,
            shortcut_strength: 0.0,
            class_priors: vec![0.5, 0.5],
            sibling_mix: 0.0,
            noise_std: 1e-6,
            samples: 200,
        };
        let ds = generate_scm_dataset(&spec, 3).unwrap();
        let mut weight = Array2::zeros((6, 2));
        for j in 0..3 {
            weight[[j, 0]] = 0.7 + j as f64;
            weight[[j, 1]] = -0.3 * (j as f64 + 1.0);
        }
        let model = crate::model::ModelParams::from_layers(
            vec![Layer {
                weight,
                bias: array![0.0, 0.0],
                activation: Activation::Identity,
            }],
            6,
        )
        .unwrap();
        let retain: Vec<usize> = (0..ds.num_rows()).collect();
        let pool_size = 32;
        let ctx =
            build_intervention_context(&model, &ds, &retain, 0.2, pool_size, 11).unwrap();
        // v̄ matches the shared background on background coordinates
        let tol = 4.0 * spec.noise_std / (pool_size as f64).sqrt() + 1e-9;
        let some_row = 0;
        for j in 3..6 {
            assert!(
                (ctx.v_bar[j] - ds.features[[some_row, j]]).abs() < 1e-3 + tol,
                "coord {j}: v_bar {} vs background {}",
                ctx.v_bar[j],
                ds.features[[some_row, j]]
            );
        }
        for j in 0..3 {
            assert_eq!(ctx.v_bar[j], 0.0, "causal coordinate leaked into v_bar");
        }
    }

    #[test]
    fn singleton_concepts_zero_the_sibling_means() {
        let mut ds = small_scm().1;
        ds.concept_of_class = vec![0, 1, 2, 3]; // all singletons
        let model = init_model(ds.num_features(), &[8], 4, 2).unwrap();
        let retain: Vec<usize> = (0..ds.num_rows()).collect();
        let ctx = build_intervention_context(&model, &ds, &retain, 0.2, 8, 1).unwrap();
        assert_eq!(ctx.sibling_free_classes, vec![0, 1, 2, 3]);
        for (c, z) in ctx.z_bar_by_class.iter().enumerate() {
            assert!(z.iter().all(|&v| v == 0.0), "class {c} z_bar not zero");
            // interventional input reduces to z plus the averaged background
            let x = ds.features.row(0).to_owned();
            let m = compute_mask(&model, &x, c, ds.feature_roles.as_deref()).unwrap();
            let xi = interventional_input(&m, &ctx);
            for (j, &mc) in m.mask.iter().enumerate() {
                let expect = if mc == 1 { ctx.v_bar[j] } else { m.z[j] };
                assert_eq!(xi[j], expect);
            }
        }
    }

    #[test]
    fn identity_configuration_recovers_plain_forward() {
        let (_, ds) = small_scm();
        let model = init_model(ds.num_features(), &[8], 4, 9).unwrap();
        let x = ds.features.row(3).to_owned();
        let m = compute_mask(&model, &x, ds.labels[3], ds.feature_roles.as_deref()).unwrap();
        let ctx = InterventionContext {
            v_bar: m.v.clone(),
            z_bar_by_class: vec![Array1::zeros(ds.num_features()); 4],
            pool_size: 1,
            gamma_mix: 0.0,
            seed: 0,
            v_pool_indices: vec![],
            z_pool_indices_by_class: vec![vec![]; 4],
            sibling_free_classes: vec![],
        };
        let xi = interventional_input(&m, &ctx);
        for (a, b) in xi.iter().zip(m.x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let d1 = interventional_distribution(&model, &m, &ctx).unwrap();
        let d2 = model.predict(&x).unwrap();
        for (a, b) in d1.probs().iter().zip(d2.probs().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // all-zero context reduces to the causal part alone
        let zero_ctx = InterventionContext {
            v_bar: Array1::zeros(ds.num_features()),
            ..ctx
        };
        assert_eq!(interventional_input(&m, &zero_ctx), m.z);
    }

    #[test]
    fn interventional_input_is_linear() {
        let (_, ds) = small_scm();
        let model = init_model(ds.num_features(), &[8], 4, 4).unwrap();
        let retain: Vec<usize> = (0..ds.num_rows()).collect();
        let ctx = build_intervention_context(&model, &ds, &retain, 0.2, 4, 2).unwrap();
        let x = ds.features.row(10).to_owned();
        let m = compute_mask(&model, &x, ds.labels[10], ds.feature_roles.as_deref()).unwrap();
        let xi = interventional_input(&m, &ctx);
        // scale z, v̄ and z̄ by c: output scales by c
        let c = 2.5;
        let scaled_m = MaskedInstance {
            x: &m.x * c,
            y: m.y,
            mask: m.mask.clone(),
            v: &m.v * c,
            z: &m.z * c,
        };
        let scaled_ctx = InterventionContext {
            v_bar: &ctx.v_bar * c,
            z_bar_by_class: ctx.z_bar_by_class.iter().map(|z| z * c).collect(),
            ..ctx.clone()
        };
        let xi_scaled = interventional_input(&scaled_m, &scaled_ctx);
        for (a, b) in xi_scaled.iter().zip(xi.iter()) {
            assert_abs_diff_eq!(*a, c * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn context_is_deterministic_and_dumpable() {
        let (_, ds) = small_scm();
        let model = init_model(ds.num_features(), &[8], 4, 6).unwrap();
        let retain: Vec<usize> = (0..300).collect();
        let a = build_intervention_context(&model, &ds, &retain, 0.2, 16, 42).unwrap();
        let b = build_intervention_context(&model, &ds, &retain, 0.2, 16, 42).unwrap();
        for (x, y) in a.v_bar.iter().zip(b.v_bar.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (za, zb) in a.z_bar_by_class.iter().zip(b.z_bar_by_class.iter()) {
            assert_eq!(za, zb);
        }
        let dump = a.dump();
        let json = serde_json::to_string(&dump).unwrap();
        let back: ContextDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back.v_pool_indices, a.v_pool_indices);
        assert_eq!(back.v_bar, a.v_bar.to_vec());
    }

    #[test]
    fn distributions_stay_valid_on_random_instances() {
        let (_, ds) = small_scm();
        let model = init_model(ds.num_features(), &[10], 4, 8).unwrap();
        let retain: Vec<usize> = (0..ds.num_rows()).collect();
        let ctx = build_intervention_context(&model, &ds, &retain, 0.2, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let row = rng.random_range(0..ds.num_rows());
            let x = ds.features.row(row).to_owned();
            let m =
                compute_mask(&model, &x, ds.labels[row], ds.feature_roles.as_deref()).unwrap();
            let d = interventional_distribution(&model, &m, &ctx).unwrap();
            assert!((d.probs().sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn averaged_background_hurts_shortcut_reliant_probe_more() {
        // shortcut_strength = 1 data: the background alone predicts the
        // class. A probe that can only see the causal block should lose less
        // accuracy under a shared v̄ than a probe reading only the background.
        let spec = ScmSpec {
            num_concepts: 2,
            classes_per_concept: vec![2, 2],
            causal_dim: 4,
            background_dim: 4,
            num_backgrounds: 4,
            shortcut_strength: 1.0,
            class_priors: vec![0.25; 4],
            sibling_mix: 0.1,
            noise_std: 0.3,
            samples: 800,
        };
        let ds = generate_scm_dataset(&spec, 21).unwrap();
        let blank = |range: std::ops::Range<usize>| {
            let mut f = ds.features.clone();
            for i in 0..f.nrows() {
                for j in range.clone() {
                    f[[i, j]] = 0.0;
                }
            }
            f
        };
        let causal_only = blank(4..8);
        let background_only = blank(0..4);
        let cfg = crate::model::TrainConfig {
            learning_rate: 0.05,
            epochs: 40,
            batch_size: 64,
            seed: 0,
            optimizer: crate::model::OptimizerKind::Adam,
        };
        let init = init_model(8, &[], 4, 1).unwrap();
        let probe_causal =
            crate::model::train_baseline(&init, causal_only.view(), &ds.labels, &cfg).unwrap();
        let probe_bg =
            crate::model::train_baseline(&init, background_only.view(), &ds.labels, &cfg)
                .unwrap();

        // ground-truth role masks; v̄ = global mean background part
        let role_mask: Vec<u8> = (0..8).map(|j| (j >= 4) as u8).collect();
        let mut v_bar = Array1::<f64>::zeros(8);
        for i in 0..ds.num_rows() {
            for j in 4..8 {
                v_bar[j] += ds.features[[i, j]];
            }
        }
        v_bar /= ds.num_rows() as f64;
        let ctx = InterventionContext {
            v_bar,
            z_bar_by_class: vec![Array1::zeros(8); 4],
            pool_size: ds.num_rows(),
            gamma_mix: 0.0,
            seed: 0,
            v_pool_indices: vec![],
            z_pool_indices_by_class: vec![vec![]; 4],
            sibling_free_classes: vec![],
        };
        let eval_drop = |probe: &ModelParams| {
            let mut plain = 0usize;
            let mut interv = 0usize;
            for i in 0..ds.num_rows() {
                let x = ds.features.row(i).to_owned();
                let y = ds.labels[i];
                let m = MaskedInstance::with_mask(x.clone(), y, role_mask.clone()).unwrap();
                if probe.predict(&x).unwrap().argmax() == y {
                    plain += 1;
                }
                if interventional_distribution(probe, &m, &ctx).unwrap().argmax() == y {
                    interv += 1;
                }
            }
            (plain as f64 - interv as f64) / ds.num_rows() as f64
        };
        let drop_causal = eval_drop(&probe_causal);
        let drop_bg = eval_drop(&probe_bg);
        assert!(
            drop_causal < drop_bg,
            "causal probe dropped {drop_causal}, background probe {drop_bg}"
        );
    }
}
