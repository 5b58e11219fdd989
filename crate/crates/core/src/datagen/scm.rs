//! Synthetic data from a structural causal model.
//!
//! Every row is generated as: class `Y` from the priors, concept `U` as the
//! class's parent, background `B` from `P(B|Y)` (a mixture of a preferred
//! background and the uniform distribution, controlled by
//! `shortcut_strength`), then
//!
//! ```text
//! causal block     = class_mean(Y) + concept_offset(U)
//!                    + sibling_mix · class_mean(random sibling) + noise
//! background block = background_mean(B) + noise
//! ```
//!
//! Causal and background coordinates are exactly known, which gives ground
//! truth for mask evaluation downstream.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FeatureRole};
use crate::error::{Error, Result};

const CONCEPT_SCALE: f64 = 2.0;
const CLASS_SCALE: f64 = 1.0;
const BACKGROUND_SCALE: f64 = 1.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub num_concepts: usize,
    pub classes_per_concept: Vec<usize>,
    pub causal_dim: usize,
    pub background_dim: usize,
    pub num_backgrounds: usize,
    /// How strongly `P(B|Y)` deviates from uniform, in [0, 1].
    pub shortcut_strength: f64,
    pub class_priors: Vec<f64>,
    /// Weight of sibling-class leakage into the causal block, in [0, 1].
    pub sibling_mix: f64,
    pub noise_std: f64,
    pub samples: usize,
}

impl ScmSpec {
    pub fn num_classes(&self) -> usize {
        self.classes_per_concept.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_concepts == 0 || self.classes_per_concept.len() != self.num_concepts {
            return Err(Error::InvalidSpec(format!(
                "classes_per_concept has {} entries for {} concepts",
                self.classes_per_concept.len(),
                self.num_concepts
            )));
        }
        if self.classes_per_concept.iter().any(|&c| c == 0) {
            return Err(Error::InvalidSpec("every concept needs at least one class".into()));
        }
        let k = self.num_classes();
        if self.class_priors.len() != k {
            return Err(Error::InvalidSpec(format!(
                "class_priors has {} entries for {k} classes",
                self.class_priors.len()
            )));
        }
        if self.class_priors.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidSpec("negative class prior".into()));
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "class_priors sum to {total}, expected 1"
            )));
        }
        if self.causal_dim == 0 || self.background_dim == 0 {
            return Err(Error::InvalidSpec("causal_dim and background_dim must be positive".into()));
        }
        if self.num_backgrounds == 0 {
            return Err(Error::InvalidSpec("num_backgrounds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shortcut_strength) {
            return Err(Error::InvalidSpec(format!(
                "shortcut_strength {} outside [0, 1]",
                self.shortcut_strength
            )));
        }
        if !(0.0..=1.0).contains(&self.sibling_mix) {
            return Err(Error::InvalidSpec(format!(
                "sibling_mix {} outside [0, 1]",
                self.sibling_mix
            )));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::InvalidSpec("noise_std must be positive".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidSpec("samples must be positive".into()));
        }
        Ok(())
    }

    /// Concept id per class, classes laid out concept-by-concept.
    pub fn concept_of_class(&self) -> Vec<usize> {
        let mut map = Vec::with_capacity(self.num_classes());
        for (concept, &count) in self.classes_per_concept.iter().enumerate() {
            map.extend(std::iter::repeat(concept).take(count));
        }
        map
    }
}

/// Generate a dataset from the SCM. Deterministic given `(spec, seed)`.
pub fn generate_scm_dataset(spec: &ScmSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes();
    let n_feat = spec.causal_dim + spec.background_dim;
    let concept_of_class = spec.concept_of_class();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");

    // structure first, then rows: keeps the draw order stable
    let concept_offsets: Vec<Vec<f64>> = (0..spec.num_concepts)
        .map(|_| {
            (0..spec.causal_dim)
                .map(|_| CONCEPT_SCALE * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let class_means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..spec.causal_dim)
                .map(|_| CLASS_SCALE * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let background_means: Vec<Vec<f64>> = (0..spec.num_backgrounds)
        .map(|_| {
            (0..spec.background_dim)
                .map(|_| BACKGROUND_SCALE * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();

    let siblings_of: Vec<Vec<usize>> = (0..k)
        .map(|c| {
            (0..k)
                .filter(|&o| o != c && concept_of_class[o] == concept_of_class[c])
                .collect()
        })
        .collect();

    let mut features = Array2::<f64>::zeros((spec.samples, n_feat));
    let mut labels = Vec::with_capacity(spec.samples);
    let mut backgrounds = Vec::with_capacity(spec.samples);

    for row in 0..spec.samples {
        let y = sample_categorical(&mut rng, &spec.class_priors);
        let u = concept_of_class[y];
        let b = if rng.random::<f64>() < spec.shortcut_strength {
            y % spec.num_backgrounds
        } else {
            rng.random_range(0..spec.num_backgrounds)
        };
        let sibling = if spec.sibling_mix > 0.0 && !siblings_of[y].is_empty() {
            Some(siblings_of[y][rng.random_range(0..siblings_of[y].len())])
        } else {
            None
        };
        for j in 0..spec.causal_dim {
            let mut v = class_means[y][j] + concept_offsets[u][j] + noise.sample(&mut rng);
            if let Some(s) = sibling {
                v += spec.sibling_mix * class_means[s][j];
            }
            features[[row, j]] = v;
        }
        for j in 0..spec.background_dim {
            features[[row, spec.causal_dim + j]] =
                background_means[b][j] + noise.sample(&mut rng);
        }
        labels.push(y);
        backgrounds.push(b);
    }

    let mut roles = vec![Some(FeatureRole::Causal); spec.causal_dim];
    roles.extend(vec![Some(FeatureRole::Background); spec.background_dim]);

    let dataset = Dataset {
        features,
        labels,
        concept_of_class,
        sensitive: None,
        background_id: Some(backgrounds),
        feature_roles: Some(roles),
    };
    dataset.validate()?;
    Ok(dataset)
}

fn sample_categorical(rng: &mut ChaCha8Rng, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    priors.len() - 1
}

/// Derive a binary sensitive attribute from background membership and append
/// it as one extra feature coordinate tagged [`FeatureRole::Sensitive`].
///
/// Rows whose realized background is in `privileged_backgrounds` get
/// sensitive = 1. With `shortcut_strength > 0` the attribute correlates with
/// the label, reproducing the tabular fairness setting.
pub fn attach_sensitive_from_background(
    dataset: &Dataset,
    privileged_backgrounds: &[usize],
) -> Result<Dataset> {
    let backgrounds = dataset.background_id.as_ref().ok_or_else(|| {
        Error::InvalidDataset("attach_sensitive_from_background needs background_id".into())
    })?;
    let sensitive: Vec<u8> = backgrounds
        .iter()
        .map(|b| privileged_backgrounds.contains(b) as u8)
        .collect();
    if sensitive.iter().all(|&s| s == 0) || sensitive.iter().all(|&s| s == 1) {
        return Err(Error::InvalidDataset(
            "privileged background set leaves one sensitive group empty".into(),
        ));
    }
    let n = dataset.num_rows();
    let d = dataset.num_features();
    let mut features = Array2::<f64>::zeros((n, d + 1));
    features
        .slice_mut(ndarray::s![.., ..d])
        .assign(&dataset.features);
    for i in 0..n {
        features[[i, d]] = sensitive[i] as f64;
    }
    let mut roles = dataset
        .feature_roles
        .clone()
        .unwrap_or_else(|| vec![None; d]);
    roles.push(Some(FeatureRole::Sensitive));
    let out = Dataset {
        features,
        labels: dataset.labels.clone(),
        concept_of_class: dataset.concept_of_class.clone(),
        sensitive: Some(sensitive),
        background_id: dataset.background_id.clone(),
        feature_roles: Some(roles),
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::empirical_mutual_information;
    use crate::model::{accuracy, init_model, train_baseline, OptimizerKind, TrainConfig};
    use ndarray::Axis;

    pub fn spec(shortcut: f64) -> ScmSpec {
        ScmSpec {
            num_concepts: 2,
            classes_per_concept: vec![3, 3],
            causal_dim: 6,
            background_dim: 6,
            num_backgrounds: 6,
            shortcut_strength: shortcut,
            class_priors: vec![1.0 / 6.0; 6],
            sibling_mix: 0.3,
            noise_std: 0.4,
            samples: 3000,
        }
    }

    fn probe_accuracy(
        features: ndarray::Array2<f64>,
        labels: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> f64 {
        // linear probe: no-hidden-layer softmax classifier
        let model = init_model(features.ncols(), &[], num_classes, seed).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 128,
            seed,
            optimizer: OptimizerKind::Adam,
        };
        let trained = train_baseline(&model, features.view(), labels, &cfg).unwrap();
        accuracy(&trained, features.view(), labels).unwrap()
    }

    #[test]
    fn unbiased_configuration_has_independent_background() {
        let s = spec(0.0);
        let ds = generate_scm_dataset(&s, 7).unwrap();
        // empirical class frequencies within 3σ of uniform
        let n = ds.num_rows() as f64;
        let p = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        for c in 0..6 {
            let freq = ds.class_indices(c).len() as f64 / n;
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "class {c} frequency {freq} outside 3σ of {p}"
            );
        }
        // B independent of Y: chi-square p-value above 0.01 at 10k samples
        let big = generate_scm_dataset(
            &ScmSpec {
                samples: 10_000,
                ..s.clone()
            },
            7,
        )
        .unwrap();
        let bg = big.background_id.clone().unwrap();
        let (chi2, dof) = chi_square_stat(&bg, &big.labels, s.num_backgrounds, 6);
        let dist = statrs::distribution::ChiSquared::new(dof as f64).unwrap();
        let p_value =
            1.0 - statrs::distribution::ContinuousCDF::cdf(&dist, chi2);
        assert!(p_value > 0.01, "chi2 = {chi2}, p = {p_value}");
        // mutual information below 0.01 nats
        let mi = empirical_mutual_information(&bg, &big.labels);
        assert!(mi < 0.01, "mi = {mi}");
    }

    fn chi_square_stat(
        xs: &[usize],
        ys: &[usize],
        kx: usize,
        ky: usize,
    ) -> (f64, usize) {
        let n = xs.len() as f64;
        let mut joint = vec![0.0f64; kx * ky];
        let mut px = vec![0.0f64; kx];
        let mut py = vec![0.0f64; ky];
        for (&x, &y) in xs.iter().zip(ys) {
            joint[x * ky + y] += 1.0;
            px[x] += 1.0;
            py[y] += 1.0;
        }
        let mut chi2 = 0.0;
        for x in 0..kx {
            for y in 0..ky {
                let expected = px[x] * py[y] / n;
                if expected > 0.0 {
                    let diff = joint[x * ky + y] - expected;
                    chi2 += diff * diff / expected;
                }
            }
        }
        (chi2, (kx - 1) * (ky - 1))
    }

    #[test]
    fn causal_block_is_predictive_background_is_not_when_unbiased() {
        let s = spec(0.0);
        let ds = generate_scm_dataset(&s, 3).unwrap();
        let causal = ds.features.slice_axis(Axis(1), (0..s.causal_dim).into()).to_owned();
        let acc_causal = probe_accuracy(causal, &ds.labels, 6, 0);
        assert!(acc_causal > 0.9, "causal probe accuracy {acc_causal}");

        let background = ds
            .features
            .slice_axis(Axis(1), (s.causal_dim..s.causal_dim + s.background_dim).into())
            .to_owned();
        let acc_bg = probe_accuracy(background, &ds.labels, 6, 0);
        assert!(
            acc_bg <= 1.0 / 6.0 + 0.1,
            "background probe accuracy {acc_bg} exceeds chance + 10pts"
        );
    }

    #[test]
    fn full_shortcut_makes_background_predictive() {
        let s = spec(1.0);
        let ds = generate_scm_dataset(&s, 5).unwrap();
        let background = ds
            .features
            .slice_axis(Axis(1), (s.causal_dim..s.causal_dim + s.background_dim).into())
            .to_owned();
        let acc_bg = probe_accuracy(background, &ds.labels, 6, 1);
        assert!(acc_bg > 0.8, "background probe accuracy {acc_bg} not a shortcut");
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let s = spec(0.5);
        let a = generate_scm_dataset(&s, 11).unwrap();
        let b = generate_scm_dataset(&s, 11).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.background_id, b.background_id);
        for (x, y) in a.features.iter().zip(b.features.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(0.0);
        s.class_priors = vec![0.5; 6];
        assert!(generate_scm_dataset(&s, 0).is_err());
        let mut s = spec(0.0);
        s.classes_per_concept = vec![3];
        assert!(generate_scm_dataset(&s, 0).is_err());
        let mut s = spec(0.0);
        s.noise_std = 0.0;
        assert!(generate_scm_dataset(&s, 0).is_err());
    }

    #[test]
    fn sensitive_attachment_appends_tagged_coordinate() {
        let s = spec(0.8);
        let ds = generate_scm_dataset(&s, 2).unwrap();
        let with_s = attach_sensitive_from_background(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(with_s.num_features(), ds.num_features() + 1);
        let roles = with_s.feature_roles.as_ref().unwrap();
        assert_eq!(roles[roles.len() - 1], Some(FeatureRole::Sensitive));
        let sens = with_s.sensitive.as_ref().unwrap();
        for (i, &sv) in sens.iter().enumerate() {
            assert_eq!(with_s.features[[i, ds.num_features()]], sv as f64);
            let b = with_s.background_id.as_ref().unwrap()[i];
            assert_eq!(sv == 1, [0usize, 1, 2].contains(&b));
        }
    }
}
