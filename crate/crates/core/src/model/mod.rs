//! Dense feed-forward classifier with reverse-mode gradients.
//!
//! The network is a stack of fully connected layers, rectifier activations on
//! hidden layers and identity on the output layer. Everything is `f64`.
//! Per-sample operations ([`ModelParams::forward`], [`ModelParams::embed`],
//! [`ModelParams::input_gradient`]) wrap the batched paths used by training.
//!
//! The embedding of an input is the post-activation of the penultimate layer
//! (the raw input for a model with no hidden layers). It is intentionally
//! unnormalized: the contrastive boundary loss uses raw dot products.

pub mod checkpoint;
pub mod train;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use train::{accuracy, train_baseline, OptimizerKind, TrainConfig};

/// Probability floor used when dividing by or taking logs of predicted
/// probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => pre.clone(),
        }
    }

    /// Derivative evaluated at the pre-activation values.
    fn derivative(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => Array2::ones(pre.raw_dim()),
        }
    }
}

/// One dense layer: `out = act(x · weight + bias)`, weight is `in × out`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Parameters of a dense feed-forward classifier.
#[derive(Debug, Clone)]
pub struct ModelParams {
    layers: Vec<Layer>,
    input_dim: usize,
    num_classes: usize,
    embedding_dim: usize,
}

/// A probability vector over classes (nonnegative, sums to 1 within 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    probs: Array1<f64>,
}

impl PredictionDistribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidSpec(
                "probability vector has negative or non-finite entries".into(),
            ));
        }
        let total: f64 = probs.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "probability vector sums to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.probs.as_slice().expect("contiguous"))
    }

    /// Largest probability (the confidence score used by the MIA attacker).
    pub fn max_confidence(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max subtraction) of one logit vector.
pub fn softmax(logits: &Array1<f64>) -> PredictionDistribution {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let total = exps.sum();
    PredictionDistribution {
        probs: exps / total,
    }
}

/// Row-wise stable softmax of a logits batch.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// KL divergence `Σ p·ln(p/q)` with the `0·ln 0 = 0` convention and `q`
/// clamped below at [`PROB_FLOOR`].
pub fn kl_divergence(p: &PredictionDistribution, q: &PredictionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
            context: "kl_divergence distributions".into(),
        });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(q.probs.iter()) {
        if pi > 0.0 {
            total += pi * (pi / qi.max(PROB_FLOOR)).ln();
        }
    }
    Ok(total)
}

/// Cached activations from one batched forward pass.
///
/// `post[0]` is the input batch, `post[l]` the activation output of layer
/// `l-1`; `pre[l]` the pre-activation of layer `l`. `post.last()` holds the
/// logits (identity output activation).
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl BatchTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.post.last().expect("non-empty trace")
    }

    /// Embedding batch: post-activation of the penultimate layer.
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.post[self.post.len() - 2]
    }
}

/// Per-layer parameter gradients, aligned with `ModelParams::layers`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.raw_dim()),
                        Array1::zeros(l.bias.raw_dim()),
                    )
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(other.layers.iter()) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in self.layers.iter_mut() {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// Flatten into a single vector (finite-difference test support).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in &self.layers {
            flat.extend(w.iter().cloned());
            flat.extend(b.iter().cloned());
        }
        flat
    }
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Construct from explicit layers, validating the dimension chain.
    pub fn from_layers(layers: Vec<Layer>, input_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one layer".into()));
        }
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.nrows() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: layer.weight.nrows(),
                    context: format!("layer {i} input"),
                });
            }
            if layer.weight.ncols() != layer.bias.len() {
                return Err(Error::DimensionMismatch {
                    expected: layer.weight.ncols(),
                    got: layer.bias.len(),
                    context: format!("layer {i} bias"),
                });
            }
            if layer.weight.iter().any(|v| !v.is_finite())
                || layer.bias.iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidSpec(format!("layer {i} has non-finite weights")));
            }
            dim = layer.weight.ncols();
        }
        let num_classes = dim;
        let embedding_dim = if layers.len() >= 2 {
            layers[layers.len() - 2].weight.ncols()
        } else {
            input_dim
        };
        Ok(Self {
            layers,
            input_dim,
            num_classes,
            embedding_dim,
        })
    }

    /// Batched forward pass with cached activations.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<BatchTrace> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
                context: "forward input".into(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.clone());
        for layer in &self.layers {
            let lin = post.last().expect("input present").dot(&layer.weight) + &layer.bias;
            let act = layer.activation.apply(&lin);
            pre.push(lin);
            post.push(act);
        }
        Ok(BatchTrace { pre, post })
    }

    /// Logits and class distribution for one input.
    pub fn forward(&self, x: &Array1<f64>) -> Result<(Array1<f64>, PredictionDistribution)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("forward input has non-finite values".into()));
        }
        let batch = x.view().insert_axis(Axis(0)).to_owned();
        let trace = self.forward_batch(&batch)?;
        let logits = trace.logits().row(0).to_owned();
        let dist = softmax(&logits);
        Ok((logits, dist))
    }

    /// Class distribution only.
    pub fn predict(&self, x: &Array1<f64>) -> Result<PredictionDistribution> {
        Ok(self.forward(x)?.1)
    }

    /// Penultimate post-activation (the raw input if there is no hidden layer).
    pub fn embed(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("embed input has non-finite values".into()));
        }
        let batch = x.view().insert_axis(Axis(0)).to_owned();
        let trace = self.forward_batch(&batch)?;
        Ok(trace.embeddings().row(0).to_owned())
    }

    /// Backward pass from `dL/dlogits`; returns parameter gradients and
    /// `dL/dinput` for the whole batch.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        dlogits: &Array2<f64>,
    ) -> (ParamGrads, Array2<f64>) {
        self.backward_from_layer(trace, dlogits, self.layers.len())
    }

    /// Backward pass from `dL/dembedding` (skips the output layer entirely).
    pub fn backward_from_embedding_batch(
        &self,
        trace: &BatchTrace,
        dembed: &Array2<f64>,
    ) -> (ParamGrads, Array2<f64>) {
        self.backward_from_layer(trace, dembed, self.layers.len().saturating_sub(1))
    }

    /// Backprop `dout` (gradient w.r.t. `post[upto]`) through layers
    /// `0..upto`.
    fn backward_from_layer(
        &self,
        trace: &BatchTrace,
        dout: &Array2<f64>,
        upto: usize,
    ) -> (ParamGrads, Array2<f64>) {
        let mut grads = ParamGrads::zeros_like(self);
        let mut delta = dout.clone();
        for l in (0..upto).rev() {
            let layer = &self.layers[l];
            // through activation
            let dpre = &delta * &layer.activation.derivative(&trace.pre[l]);
            // parameter grads: dW = a_inᵀ · dpre, db = column sums of dpre
            let (gw, gb) = &mut grads.layers[l];
            general_mat_mul(1.0, &trace.post[l].t(), &dpre, 1.0, gw);
            *gb += &dpre.sum_axis(Axis(0));
            // to previous activation
            delta = dpre.dot(&layer.weight.t());
        }
        (grads, delta)
    }

    /// Gradient of the cross-entropy loss at `(x, y)` with respect to `x`.
    pub fn input_gradient(&self, x: &Array1<f64>, y: usize) -> Result<Array1<f64>> {
        let batch = x.view().insert_axis(Axis(0)).to_owned();
        let grads = self.input_gradients_batch(&batch, &[y])?;
        Ok(grads.row(0).to_owned())
    }

    /// Per-row cross-entropy input gradients for a whole batch (each row is
    /// an independent `(x, y)` pair, no mean scaling).
    pub fn input_gradients_batch(
        &self,
        x: &Array2<f64>,
        ys: &[usize],
    ) -> Result<Array2<f64>> {
        if ys.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: ys.len(),
                context: "labels vs input rows".into(),
            });
        }
        if let Some(&bad) = ys.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidSpec(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let trace = self.forward_batch(x)?;
        let mut dlogits = softmax_rows(trace.logits());
        for (i, &y) in ys.iter().enumerate() {
            dlogits[[i, y]] -= 1.0;
        }
        let (_, dinput) = self.backward_batch(&trace, &dlogits);
        Ok(dinput)
    }

    /// Argmax predictions for a batch of rows.
    pub fn predict_batch(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let trace = self.forward_batch(x)?;
        let logits = trace.logits();
        Ok((0..x.nrows())
            .map(|i| argmax(logits.row(i).as_slice().expect("contiguous")))
            .collect())
    }
}

/// Initialize a model with symmetric uniform (Glorot) weights and zero biases.
pub fn init_model(
    input_dim: usize,
    hidden_widths: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::InvalidSpec(
            "input_dim and num_classes must be positive".into(),
        ));
    }
    if hidden_widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidSpec("zero-width hidden layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden_widths);
    dims.push(num_classes);

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight =
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
        let activation = if i + 1 == dims.len() - 1 {
            Activation::Identity
        } else {
            Activation::Relu
        };
        layers.push(Layer {
            weight,
            bias: Array1::zeros(fan_out),
            activation,
        });
    }
    ModelParams::from_layers(layers, input_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn linear_model(weight: Array2<f64>, bias: Array1<f64>) -> ModelParams {
        let input_dim = weight.nrows();
        ModelParams::from_layers(
            vec![Layer {
                weight,
                bias,
                activation: Activation::Identity,
            }],
            input_dim,
        )
        .unwrap()
    }

    #[test]
    fn init_layer_shapes() {
        let m = init_model(4, &[8, 8], 3, 7).unwrap();
        let shapes: Vec<(usize, usize)> = m
            .layers()
            .iter()
            .map(|l| (l.weight.nrows(), l.weight.ncols()))
            .collect();
        assert_eq!(shapes, vec![(4, 8), (8, 8), (8, 3)]);
        assert_eq!(m.embedding_dim(), 8);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(5, &[16], 4, 99).unwrap();
        let b = init_model(5, &[16], 4, 99).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
    }

    #[test]
    fn init_rejects_zero_width() {
        assert!(init_model(4, &[0], 3, 1).is_err());
        assert!(init_model(0, &[4], 3, 1).is_err());
    }

    #[test]
    fn fresh_model_probs_near_uniform_over_seeds() {
        let x = array![0.7, -1.3, 2.1, 0.4];
        let k = 3;
        let mut mean = Array1::<f64>::zeros(k);
        for seed in 0..100 {
            let m = init_model(4, &[8, 8], k, seed).unwrap();
            let (_, dist) = m.forward(&x).unwrap();
            mean += dist.probs();
        }
        mean /= 100.0;
        for &p in mean.iter() {
            assert!(
                (p - 1.0 / k as f64).abs() < 0.2,
                "mean prob {p} far from uniform"
            );
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let d = softmax(&array![0.0, 0.0, 0.0]);
        for &p in d.probs() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
        let d = softmax(&array![1000.0, 0.0, 0.0]);
        assert!(d.probs().iter().all(|p| p.is_finite()));
        assert_abs_diff_eq!(d.probs()[0], 1.0, epsilon = 1e-9);
        // magnitude 1e4 survives and still sums to 1
        let d = softmax(&array![1e4, -1e4, 3.0]);
        assert_abs_diff_eq!(d.probs().sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn forward_matches_hand_computed_softmax() {
        // 1-layer model, x = [1, 2]
        let w = array![[0.5, -0.25, 0.0], [1.0, 0.75, -0.5]];
        let b = array![0.1, -0.2, 0.3];
        let m = linear_model(w.clone(), b.clone());
        let x = array![1.0, 2.0];
        let (logits, dist) = m.forward(&x).unwrap();
        let expect_logits = array![
            1.0 * 0.5 + 2.0 * 1.0 + 0.1,
            1.0 * -0.25 + 2.0 * 0.75 + -0.2,
            1.0 * 0.0 + 2.0 * -0.5 + 0.3
        ];
        for (a, e) in logits.iter().zip(expect_logits.iter()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
        let max = expect_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = expect_logits.mapv(|v| (v - max).exp());
        let hand = &exps / exps.sum();
        for (a, e) in dist.probs().iter().zip(hand.iter()) {
            assert_abs_diff_eq!(a, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let m = init_model(4, &[8], 3, 0).unwrap();
        assert!(m.forward(&array![1.0, 2.0]).is_err());
    }

    #[test]
    fn embed_is_prefix_of_forward() {
        let m = init_model(6, &[10, 7], 4, 3).unwrap();
        let x = array![0.3, -0.4, 1.5, 0.0, -2.0, 0.9];
        let e = m.embed(&x).unwrap();
        assert_eq!(e.len(), 7);
        let out_layer = &m.layers()[2];
        let logits_from_embed = e.dot(&out_layer.weight) + &out_layer.bias;
        let (logits, _) = m.forward(&x).unwrap();
        for (a, b) in logits.iter().zip(logits_from_embed.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_input_bias_free_model_gives_zero_embedding() {
        let mut m = init_model(4, &[5], 3, 11).unwrap();
        // biases are zero already from init; make it explicit
        for layer in &mut m.layers {
            layer.bias.fill(0.0);
        }
        let e = m.embed(&Array1::zeros(4)).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_identities() {
        let p = softmax(&array![0.2, -0.4, 1.0]);
        assert_abs_diff_eq!(kl_divergence(&p, &p).unwrap(), 0.0, epsilon = 1e-15);

        let p = PredictionDistribution::new(array![1.0, 0.0]).unwrap();
        let q = PredictionDistribution::new(array![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(
            kl_divergence(&p, &q).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = Array1::from_shape_fn(4, |_| rng.random_range(-3.0..3.0));
            let b = Array1::from_shape_fn(4, |_| rng.random_range(-3.0..3.0));
            let kl = kl_divergence(&softmax(&a), &softmax(&b)).unwrap();
            assert!(kl >= -1e-12, "kl = {kl}");
        }
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        let p = softmax(&array![0.0, 0.0]);
        let q = softmax(&array![0.0, 0.0, 0.0]);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn input_gradient_closed_form_linear_model() {
        // linear softmax model: δ = W·(probs − onehot(y)) in the in×out layout
        let w = array![[0.4, -0.3], [0.2, 0.9], [-1.1, 0.5]];
        let b = array![0.05, -0.1];
        let m = linear_model(w.clone(), b);
        let x = array![1.0, -2.0, 0.5];
        let (_, dist) = m.forward(&x).unwrap();
        let mut resid = dist.probs().clone();
        resid[0] -= 1.0;
        let expect = w.dot(&resid);
        let got = m.input_gradient(&x, 0).unwrap();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = init_model(5, &[7], 3, 21).unwrap();
        let x = array![0.5, -1.0, 0.25, 2.0, -0.75];
        let y = 1;
        let grad = m.input_gradient(&x, y).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let lp = -m.predict(&xp).unwrap().probs()[y].max(PROB_FLOOR).ln();
            let lm = -m.predict(&xm).unwrap().probs()[y].max(PROB_FLOOR).ln();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn input_gradient_vanishes_at_confident_correct_prediction() {
        // scale logits up so the prediction saturates
        let w = array![[50.0, -50.0]];
        let b = array![0.0, 0.0];
        let m = linear_model(w, b);
        let x = array![1.0];
        let g = m.input_gradient(&x, 0).unwrap();
        assert!(g[0].abs() < 1e-12, "gradient {g} not ~0 at saturation");
    }
}
