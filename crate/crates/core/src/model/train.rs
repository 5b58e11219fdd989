//! Baseline training: mini-batch cross-entropy with plain gradient descent or
//! Adam. Serves both the original model and the retrain oracle.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, ModelParams, ParamGrads, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive-moment estimation (default).
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl TrainConfig {
    pub fn validate(&self, dataset_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be in (0, 1)",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.batch_size > dataset_size {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds dataset size {dataset_size}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Adam state aligned with the model's layers.
pub struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &ModelParams) -> Self {
        let zeros = || {
            model
                .layers()
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.raw_dim()),
                        Array1::zeros(l.bias.raw_dim()),
                    )
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, model: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (l, layer) in model.layers_mut().iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[l];
            let (mw, mb) = &mut self.m[l];
            let (vw, vb) = &mut self.v[l];
            mw.zip_mut_with(gw, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            mb.zip_mut_with(gb, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            vw.zip_mut_with(gw, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            vb.zip_mut_with(gb, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            azip_update(&mut layer.weight, mw, vw, lr, bc1, bc2, self.eps);
            azip_update_1d(&mut layer.bias, mb, vb, lr, bc1, bc2, self.eps);
        }
    }
}

fn azip_update(
    w: &mut Array2<f64>,
    m: &Array2<f64>,
    v: &Array2<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
) {
    ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
        *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
    });
}

fn azip_update_1d(
    b: &mut Array1<f64>,
    m: &Array1<f64>,
    v: &Array1<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
) {
    ndarray::Zip::from(b).and(m).and(v).for_each(|b, &m, &v| {
        *b -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
    });
}

/// Unified optimizer used by both baseline training and unlearning.
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(model)),
        }
    }

    pub fn step(&mut self, model: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (l, layer) in model.layers_mut().iter_mut().enumerate() {
                    let (gw, gb) = &grads.layers[l];
                    layer.weight.zip_mut_with(gw, |w, &g| *w -= lr * g);
                    layer.bias.zip_mut_with(gb, |b, &g| *b -= lr * g);
                }
            }
            Optimizer::Adam(adam) => adam.step(model, grads, lr),
        }
    }
}

/// Mean cross-entropy of `logits` against integer labels, plus the gradient
/// of the mean with respect to the logits.
pub fn cross_entropy_and_grad(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(PROB_FLOOR).ln();
    }
    loss /= n;
    let mut dlogits = probs;
    for (i, &y) in labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n);
    (loss, dlogits)
}

/// Accuracy of argmax predictions over a feature matrix.
pub fn accuracy(model: &ModelParams, features: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let trace = model.forward_batch(&features.to_owned())?;
    let logits = trace.logits();
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let pred = crate::model::argmax(row.as_slice().expect("contiguous row"));
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Train a classifier with mini-batch cross-entropy.
///
/// Returns updated parameters; the input model is untouched. `epochs = 0` is
/// a no-op. Divergence (non-finite loss) is reported with the epoch index.
pub fn train_baseline(
    model: &ModelParams,
    features: ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<ModelParams> {
    if labels.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: features.nrows(),
            context: "training features vs labels".into(),
        });
    }
    config.validate(labels.len())?;
    let mut trained = model.clone();
    if config.epochs == 0 {
        return Ok(trained);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, &trained);
    let mut order: Vec<usize> = (0..labels.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = trained.forward_batch(&x)?;
            let (loss, dlogits) = cross_entropy_and_grad(trace.logits(), &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let (grads, _) = trained.backward_batch(&trace, &dlogits);
            optimizer.step(&mut trained, &grads, config.learning_rate);
        }
    }
    Ok(trained)
}

impl ModelParams {
    pub(crate) fn layers_mut(&mut self) -> &mut [super::Layer] {
        &mut self.layers
    }
}
