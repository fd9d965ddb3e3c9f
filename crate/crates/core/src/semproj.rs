//! Semantic projection network.
//!
//! A feed-forward network over the concatenated subject/object word vectors,
//! trained with softmax cross-entropy against predicate labels:
//!
//! ```text
//! hidden = act(W1 x + b1)
//! logits = W2 hidden + b2
//! probs  = softmax(logits)
//! ```
//!
//! The logits (the output layer before softmax) are the semantic embedding
//! consumed by the predicate classifier. With `hidden_width == 0` the hidden
//! layer is dropped and the network reduces to multinomial logistic
//! regression, `logits = W2 x + b2`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, put_f64s, ByteReader};
use crate::rng;

const MAGIC: &[u8; 4] = b"SPJ1";
/// Samples per gradient work unit. Fixed so that reductions are summed in
/// the same order regardless of thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            t => Err(Error::Parse(format!("unknown activation tag {t}"))),
        }
    }
}

/// Which layer [`MlpModel::semantic_embedding`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingLayer {
    #[default]
    Logits,
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    hidden_width: usize,
    classes: usize,
    activation: Activation,
    /// hidden_width x input_dim, row-major
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// classes x hidden_width (classes x input_dim when there is no hidden layer)
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Gradient with the same layout as [`MlpModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradient {
    fn zeros_like(m: &MlpModel) -> Self {
        Gradient {
            w1: vec![0.0; m.w1.len()],
            b1: vec![0.0; m.b1.len()],
            w2: vec![0.0; m.w2.len()],
            b2: vec![0.0; m.b2.len()],
        }
    }

    fn add(&mut self, other: &Gradient) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn blocks(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

impl MlpModel {
    pub fn zeros(input_dim: usize, hidden_width: usize, classes: usize) -> Self {
        let inner = if hidden_width == 0 { input_dim } else { hidden_width };
        MlpModel {
            input_dim,
            hidden_width,
            classes,
            activation: Activation::Relu,
            w1: vec![0.0; hidden_width * input_dim],
            b1: vec![0.0; hidden_width],
            w2: vec![0.0; classes * inner],
            b2: vec![0.0; classes],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_width: usize, classes: usize, activation: Activation, seed: u64) -> Self {
        let mut m = Self::zeros(input_dim, hidden_width, classes);
        m.activation = activation;
        let mut rng = rng::seeded(seed);
        let mut fill = |w: &mut Vec<f64>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-limit..=limit));
        };
        if hidden_width > 0 {
            fill(&mut m.w1, input_dim, hidden_width);
            fill(&mut m.w2, hidden_width, classes);
        } else {
            fill(&mut m.w2, input_dim, classes);
        }
        m
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input component {i}")));
        }
        Ok(())
    }

    fn forward_unchecked(&self, x: &[f64]) -> Forward {
        let (pre_hidden, hidden) = if self.hidden_width == 0 {
            (Vec::new(), x.to_vec())
        } else {
            let pre = affine(&self.w1, &self.b1, x);
            let h = pre.iter().map(|&z| self.activation.apply(z)).collect();
            (pre, h)
        };
        let logits = affine(&self.w2, &self.b2, &hidden);
        let probs = softmax(&logits);
        Forward {
            pre_hidden,
            hidden,
            logits,
            probs,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    /// The pre-softmax output (or the hidden layer, on request).
    pub fn semantic_embedding(&self, x: &[f64], layer: EmbeddingLayer) -> Result<Vec<f64>> {
        let f = self.forward(x)?;
        Ok(match layer {
            EmbeddingLayer::Logits => f.logits,
            EmbeddingLayer::Hidden => f.hidden,
        })
    }

    pub fn embedding_dim(&self, layer: EmbeddingLayer) -> usize {
        match layer {
            EmbeddingLayer::Logits => self.classes,
            EmbeddingLayer::Hidden if self.hidden_width == 0 => self.input_dim,
            EmbeddingLayer::Hidden => self.hidden_width,
        }
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        self.check_input(x)?;
        Ok(cross_entropy(&self.forward_unchecked(x).logits, label))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::OutOfBounds {
                what: "label",
                index: label,
                size: self.classes,
            });
        }
        Ok(())
    }

    /// Accumulates the cross-entropy gradient of one sample into `g`.
    fn backprop_into(&self, x: &[f64], label: usize, g: &mut Gradient) -> f64 {
        let f = self.forward_unchecked(x);
        let mut dlogits = f.probs.clone();
        dlogits[label] -= 1.0;
        let inner = f.hidden.len();
        for (k, d) in dlogits.iter().enumerate() {
            g.b2[k] += d;
            let row = &mut g.w2[k * inner..(k + 1) * inner];
            row.iter_mut().zip(&f.hidden).for_each(|(w, h)| *w += d * h);
        }
        if self.hidden_width > 0 {
            let n_in = self.input_dim;
            for j in 0..self.hidden_width {
                let back: f64 = (0..self.classes).map(|k| self.w2[k * inner + j] * dlogits[k]).sum();
                let dz = back * self.activation.derivative(f.pre_hidden[j]);
                if dz == 0.0 {
                    continue;
                }
                g.b1[j] += dz;
                let row = &mut g.w1[j * n_in..(j + 1) * n_in];
                row.iter_mut().zip(x).for_each(|(w, xi)| *w += dz * xi);
            }
        }
        cross_entropy(&f.logits, label)
    }

    /// Analytic cross-entropy gradient for one sample.
    pub fn gradient(&self, x: &[f64], label: usize) -> Result<Gradient> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut g = Gradient::zeros_like(self);
        self.backprop_into(x, label, &mut g);
        Ok(g)
    }

    /// Mean cross-entropy over a dataset, summed in fixed chunk order.
    pub fn mean_loss(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let partial: Vec<f64> = xs
            .par_chunks(CHUNK)
            .zip(labels.par_chunks(CHUNK))
            .map(|(xc, lc)| {
                xc.iter()
                    .zip(lc)
                    .map(|(x, &l)| cross_entropy(&self.forward_unchecked(x).logits, l))
                    .sum::<f64>()
            })
            .collect();
        partial.iter().sum::<f64>() / xs.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let f = self.forward(x)?;
        Ok(argmax(&f.probs))
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let correct = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| argmax(&self.forward_unchecked(x).logits) == l)
            .count();
        correct as f64 / xs.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for v in [self.hidden_width, self.classes, self.input_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.activation.tag().to_le_bytes());
        for block in [&self.w1, &self.b1, &self.w2, &self.b2] {
            put_f64s(&mut out, block);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Parse("not an SPJ1 checkpoint (bad magic)".into()));
        }
        let hidden = r.u32("hidden width")? as usize;
        let classes = r.u32("class count")? as usize;
        let input = r.u32("input dimension")? as usize;
        let activation = Activation::from_tag(r.u32("activation")?)?;
        let mut m = MlpModel::zeros(input, hidden, classes).with_activation(activation);
        for (block, name) in m.blocks_mut().into_iter().zip(["W1", "b1", "W2", "b2"]) {
            *block = r.f64_block(block.len(), name)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Parse(format!("{} trailing bytes after parameters", r.remaining())));
        }
        if m.w1.iter().chain(&m.b1).chain(&m.w2).chain(&m.b2).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameter".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Largest symmetric relative error between the analytic gradient and
/// central finite differences over every parameter:
/// `|g_a - g_fd| / max(1e-12, |g_a| + |g_fd|)`.
pub fn grad_check(model: &MlpModel, x: &[f64], label: usize, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let analytic = model.gradient(x, label)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for b in 0..4 {
        for i in 0..analytic.blocks()[b].len() {
            let orig = probe.blocks_mut()[b][i];
            probe.blocks_mut()[b][i] = orig + epsilon;
            let plus = cross_entropy(&probe.forward_unchecked(x).logits, label);
            probe.blocks_mut()[b][i] = orig - epsilon;
            let minus = cross_entropy(&probe.forward_unchecked(x).logits, label);
            probe.blocks_mut()[b][i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let ga = analytic.blocks()[b][i];
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Return the minimum-validation-loss checkpoint instead of the last one.
    pub early_stopping: bool,
    pub hidden_width: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            early_stopping: true,
            hidden_width: 300,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: MlpModel,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        s
    }
}

fn validate_split(xs: &[Vec<f64>], labels: &[usize], input_dim: usize, classes: usize, name: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::invalid(format!("{name} split is empty")));
    }
    if xs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{name}: {} samples but {} labels",
            xs.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::OutOfBounds {
            what: "label",
            index: l,
            size: classes,
        });
    }
    for x in xs {
        if x.len() != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} sample")));
        }
    }
    Ok(())
}

/// Mini-batch gradient descent on mean cross-entropy.
///
/// Loss curves hold one entry per epoch, measured on the full train and
/// validation sets after the epoch's updates.
pub fn train(
    xs: &[Vec<f64>],
    labels: &[usize],
    val_xs: &[Vec<f64>],
    val_labels: &[usize],
    classes: usize,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("epochs, batch size and learning rate must be positive"));
    }
    let input_dim = xs.first().map_or(0, Vec::len);
    validate_split(xs, labels, input_dim, classes, "train")?;
    validate_split(val_xs, val_labels, input_dim, classes, "validation")?;

    let mut model = MlpModel::init(input_dim, config.hidden_width, classes, config.activation, config.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::derive_seed(config.seed, 1));
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_loss = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, MlpModel)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let partial: Vec<Gradient> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = Gradient::zeros_like(&model);
                    for &i in chunk {
                        model.backprop_into(&xs[i], labels[i], &mut g);
                    }
                    g
                })
                .collect();
            let mut total = Gradient::zeros_like(&model);
            partial.iter().for_each(|g| total.add(g));
            let step = config.learning_rate / batch.len() as f64;
            for (p, g) in model.blocks_mut().into_iter().zip(total.blocks()) {
                p.iter_mut().zip(g).for_each(|(w, d)| *w -= step * d);
            }
        }
        let tl = model.mean_loss(xs, labels);
        let vl = model.mean_loss(val_xs, val_labels);
        if !tl.is_finite() || !vl.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: if tl.is_finite() { vl } else { tl },
            });
        }
        log::debug!("epoch {epoch}: train {tl:.5} val {vl:.5}");
        train_loss.push(tl);
        val_loss.push(vl);
        if best.as_ref().map_or(true, |(_, b, _)| vl < *b) {
            best = Some((epoch, vl, model.clone()));
        }
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch");
    Ok(TrainReport {
        model: if config.early_stopping { best_model } else { model },
        train_loss,
        val_loss,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(600, 300, 70);
        let f = m.forward(&random_input(600, 1)).unwrap();
        assert!(f.logits.iter().all(|&z| z == 0.0));
        for p in &f.probs {
            assert!((p - 1.0 / 70.0).abs() < 1e-15);
        }
        assert_eq!(m.semantic_embedding(&vec![0.0; 600], EmbeddingLayer::Logits).unwrap(), vec![0.0; 70]);
    }

    #[test]
    fn hand_computed_toy() {
        // W1 = I, b1 = (0, -1), W2 = [[1, 2], [0, 1]], b2 = (0.5, 0)
        let mut m = MlpModel::zeros(2, 2, 2);
        m.w1 = vec![1.0, 0.0, 0.0, 1.0];
        m.b1 = vec![0.0, -1.0];
        m.w2 = vec![1.0, 2.0, 0.0, 1.0];
        m.b2 = vec![0.5, 0.0];
        // x = (3, 4): pre = (3, 3), hidden = (3, 3), logits = (3 + 6 + 0.5, 3) = (9.5, 3)
        let f = m.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(f.hidden, vec![3.0, 3.0]);
        assert_eq!(f.logits, vec![9.5, 3.0]);
        let e = (6.5f64).exp();
        assert!((f.probs[0] - e / (e + 1.0)).abs() < 1e-15);
        // x = (-2, 0.5): pre = (-2, -0.5), hidden = (0, 0), logits = b2
        let f = m.forward(&[-2.0, 0.5]).unwrap();
        assert_eq!(f.logits, vec![0.5, 0.0]);
        assert_eq!(m.semantic_embedding(&[3.0, 4.0], EmbeddingLayer::Logits).unwrap(), vec![9.5, 3.0]);
        assert_eq!(m.semantic_embedding(&[3.0, 4.0], EmbeddingLayer::Hidden).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn input_validation() {
        let m = MlpModel::zeros(3, 2, 2);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::DimensionMismatch { expected: 3, actual: 2 })));
        assert!(matches!(m.forward(&[1.0, f64::NAN, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = [1.0, -2.0, 0.5, 3.0];
        let p = softmax(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + 1000.0).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(softmax(&[1e308, -1e308]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_model_bias_gradient_closed_form() {
        let m = MlpModel::zeros(4, 3, 5);
        let g = m.gradient(&[0.0; 4], 2).unwrap();
        let mut expect = vec![0.2; 5];
        expect[2] -= 1.0;
        assert_eq!(g.b2, expect);
        // Central differences of b2 agree with probs - onehot.
        let mut probe = m.clone();
        for k in 0..5 {
            probe.b2[k] = 1e-5;
            let plus = probe.loss(&[0.0; 4], 2).unwrap();
            probe.b2[k] = -1e-5;
            let minus = probe.loss(&[0.0; 4], 2).unwrap();
            probe.b2[k] = 0.0;
            assert!(((plus - minus) / 2e-5 - expect[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_check_random_models() {
        for seed in 0..5 {
            let m = MlpModel::init(6, 5, 4, Activation::Relu, seed);
            let x = random_input(6, 100 + seed);
            let err = grad_check(&m, &x, (seed % 4) as usize, 1e-5).unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
        let lin = MlpModel::init(5, 0, 3, Activation::Relu, 9);
        assert!(grad_check(&lin, &random_input(5, 3), 1, 1e-5).unwrap() <= 1e-6);
        let tanh = MlpModel::init(5, 4, 3, Activation::Tanh, 9);
        assert!(grad_check(&tanh, &random_input(5, 4), 0, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn grad_check_shrinks_with_epsilon() {
        let m = MlpModel::init(6, 5, 4, Activation::Tanh, 42);
        let x = random_input(6, 7);
        let e3 = grad_check(&m, &x, 1, 1e-3).unwrap();
        let e4 = grad_check(&m, &x, 1, 1e-4).unwrap();
        let e5 = grad_check(&m, &x, 1, 1e-5).unwrap();
        assert!(e4 <= e3, "{e4} > {e3}");
        assert!(e5 <= e4.max(1e-8), "{e5} > {e4}");
        assert!(grad_check(&m, &x, 1, 0.0).is_err());
        assert!(grad_check(&m, &x, 1, 0.1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MlpModel::init(7, 3, 4, Activation::Tanh, 1);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"SPJ1");
        assert_eq!(MlpModel::from_bytes(&bytes).unwrap(), m);
        assert!(MlpModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MlpModel::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
    }

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let centers = [(-3.0, 0.0), (3.0, 0.0), (0.0, 4.0)];
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let c = i % 3;
                let (cx, cy) = centers[c];
                (vec![cx + r.gen_range(-1.0..1.0), cy + r.gen_range(-1.0..1.0)], c)
            })
            .unzip()
    }

    #[test]
    fn learns_separable_blobs() {
        let (xs, ys) = blobs(200, 1);
        let (vx, vy) = blobs(60, 2);
        let cfg = TrainConfig { hidden_width: 16, epochs: 40, learning_rate: 0.1, batch_size: 16, seed: 3, ..Default::default() };
        let rep = train(&xs, &ys, &vx, &vy, 3, &cfg).unwrap();
        assert!(rep.model.accuracy(&xs, &ys) >= 0.99);
        assert_eq!(rep.train_loss.len(), 40);
        assert_eq!(rep.val_loss.len(), 40);
        let min = rep.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(rep.val_loss[rep.best_epoch - 1], min);
        assert_eq!(rep.val_loss.iter().position(|&v| v == min), Some(rep.best_epoch - 1));
        assert!(rep.loss_csv().starts_with("epoch,train_loss,val_loss\n1,"));
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = blobs(90, 5);
        let cfg = TrainConfig { hidden_width: 8, epochs: 5, seed: 11, ..Default::default() };
        let a = train(&xs, &ys, &xs, &ys, 3, &cfg).unwrap();
        let b = train(&xs, &ys, &xs, &ys, 3, &cfg).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn linear_case_matches_batch_gd_oracle() {
        let (xs, ys) = blobs(30, 8);
        let lr = 0.05;
        let cfg = TrainConfig { hidden_width: 0, epochs: 15, batch_size: 30, learning_rate: lr, seed: 4, early_stopping: false, ..Default::default() };
        let rep = train(&xs, &ys, &xs, &ys, 3, &cfg).unwrap();
        for w in rep.train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", rep.train_loss);
        }
        // Independent full-batch softmax regression written out longhand.
        let init = MlpModel::init(2, 0, 3, Activation::Relu, 4);
        let (mut w, mut b) = (init.w2.clone(), init.b2.clone());
        for _ in 0..15 {
            let mut gw = [0.0; 6];
            let mut gb = [0.0; 3];
            for (x, &y) in xs.iter().zip(&ys) {
                let z: Vec<f64> = (0..3).map(|k| w[2 * k] * x[0] + w[2 * k + 1] * x[1] + b[k]).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                for k in 0..3 {
                    let d = (z[k] - m).exp() / s - if k == y { 1.0 } else { 0.0 };
                    gw[2 * k] += d * x[0];
                    gw[2 * k + 1] += d * x[1];
                    gb[k] += d;
                }
            }
            for i in 0..6 {
                w[i] -= lr * gw[i] / 30.0;
            }
            for k in 0..3 {
                b[k] -= lr * gb[k] / 30.0;
            }
        }
        for (a, o) in rep.model.w2.iter().zip(&w) {
            assert!((a - o).abs() < 1e-10);
        }
        for (a, o) in rep.model.b2.iter().zip(&b) {
            assert!((a - o).abs() < 1e-10);
        }
    }

    #[test]
    fn training_errors() {
        let (xs, ys) = blobs(9, 1);
        let cfg = TrainConfig { hidden_width: 4, epochs: 2, ..Default::default() };
        assert!(train(&[], &[], &xs, &ys, 3, &cfg).is_err());
        assert!(train(&xs, &ys, &[], &[], 3, &cfg).is_err());
        assert!(train(&xs, &ys, &xs, &ys, 2, &cfg).is_err());
        let huge = TrainConfig { learning_rate: 1e300, ..cfg };
        let far: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v * 1e10).collect()).collect();
        assert!(matches!(train(&far, &ys, &far, &ys, 3, &huge), Err(Error::Diverged { .. })));
    }

    proptest! {
        #[test]
        fn probs_are_distribution(x in prop::collection::vec(-50.0f64..50.0, 4), seed in 0u64..1000) {
            let m = MlpModel::init(4, 3, 5, Activation::Relu, seed);
            let f = m.forward(&x).unwrap();
            let s: f64 = f.probs.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(f.probs.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_shift(z in prop::collection::vec(-30.0f64..30.0, 1..10), c in -100.0f64..100.0) {
            let p = softmax(&z);
            let q = softmax(&z.iter().map(|v| v + c).collect::<Vec<_>>());
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
