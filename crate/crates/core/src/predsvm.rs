//! One-vs-rest linear SVM for predicate classification.
//!
//! Each class gets a binary classifier minimizing
//! `lambda/2 * ||w||^2 + mean(max(0, 1 - y (w.x + b)))` by stochastic
//! subgradient descent with step `1 / (lambda * t)` (Pegasos), one seeded
//! shuffle per full pass. The bias is treated as the weight of a constant
//! input and regularized with the rest. Inputs are standardized with the
//! training mean and standard deviation, which are stored in the model.
//!
//! Scores are turned into a distribution over all classes with a softmax.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, put_f64s, ByteReader};
use crate::rng;
use crate::semproj::{argmax, softmax};

const MAGIC: &[u8; 4] = b"SVM1";

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// `eta_t = 1 / (lambda * t)` with projection onto the `1/sqrt(lambda)` ball.
    #[default]
    Pegasos,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 100,
            seed: 0,
            schedule: Schedule::Pegasos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    classes: usize,
    dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    /// classes x dim, row-major
    pub weights: Vec<f64>,
}

/// Semantic features first, then visual. Either part may be absent, not both.
pub fn concat_features(semantic: Option<&[f64]>, visual: Option<&[f64]>) -> Result<Vec<f64>> {
    if semantic.is_none() && visual.is_none() {
        return Err(Error::invalid("no features: semantic and visual both absent"));
    }
    let out: Vec<f64> = semantic.into_iter().chain(visual).flatten().copied().collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature component".into()));
    }
    Ok(out)
}

impl SvmModel {
    /// All-zero weights with identity standardization.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        SvmModel {
            classes,
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            bias: vec![0.0; classes],
            weights: vec![0.0; classes * dim],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn standardize_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.scale) {
            *o = (v - m) / s;
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Raw margins `W standardize(x) + b`.
    pub fn decision_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut z = vec![0.0; self.dim];
        self.standardize_into(x, &mut z);
        Ok(self.scores_standardized(&z))
    }

    fn scores_standardized(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.decision_scores(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.decision_scores(x)?))
    }

    /// The `k` most probable classes, descending; ties go to the lower id.
    pub fn top_k(&self, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.classes {
            return Err(Error::invalid(format!("k = {k} outside 1..={}", self.classes)));
        }
        let scores = self.decision_scores(x)?;
        Ok(rank(&scores, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for block in [&self.mean, &self.scale, &self.bias, &self.weights] {
            put_f64s(&mut out, block);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Parse("not an SVM1 model (bad magic)".into()));
        }
        let classes = r.u32("class count")? as usize;
        let dim = r.u32("dimension")? as usize;
        let model = SvmModel {
            classes,
            dim,
            mean: r.f64_block(dim, "mean")?,
            scale: r.f64_block(dim, "scale")?,
            bias: r.f64_block(classes, "bias")?,
            weights: r.f64_block(classes * dim, "weights")?,
        };
        if r.remaining() != 0 {
            return Err(Error::Parse(format!("{} trailing bytes", r.remaining())));
        }
        let all = model.mean.iter().chain(&model.scale).chain(&model.bias).chain(&model.weights);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        if model.scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::Parse("non-positive standardization scale".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Indices of the `k` largest scores, descending, lower index first on ties,
/// paired with their softmax probabilities.
pub fn rank(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let probs = softmax(scores);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, probs[i])).collect()
}

/// Per-epoch training trace: the regularized hinge objective summed over
/// all one-vs-rest subproblems, evaluated after each pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmTrace {
    pub objective: Vec<f64>,
}

pub fn train_svm(samples: &[Vec<f64>], labels: &[usize], classes: usize, config: &SvmConfig) -> Result<SvmModel> {
    train_svm_traced(samples, labels, classes, config).map(|(m, _)| m)
}

pub fn train_svm_traced(
    samples: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    config: &SvmConfig,
) -> Result<(SvmModel, SvmTrace)> {
    if !(config.lambda > 0.0) || config.epochs == 0 {
        return Err(Error::invalid("lambda and epochs must be positive"));
    }
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} samples with {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let dim = samples[0].len();
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training feature".into()));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::OutOfBounds {
            what: "label",
            index: l,
            size: classes,
        });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("training labels contain a single class"));
    }

    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; dim];
    for s in samples {
        for ((a, v), m) in scale.iter_mut().zip(s).zip(&mean) {
            *a += (v - m) * (v - m);
        }
    }
    scale.iter_mut().for_each(|a| {
        let sd = (*a / n).sqrt();
        *a = if sd > 1e-12 { sd } else { 1.0 };
    });

    let mut model = SvmModel {
        classes,
        dim,
        mean,
        scale,
        bias: vec![0.0; classes],
        weights: vec![0.0; classes * dim],
    };
    let mut flat = vec![0.0; samples.len() * dim];
    for (s, out) in samples.iter().zip(flat.chunks_mut(dim.max(1))) {
        model.standardize_into(s, out);
    }
    let data = Standardized { flat: &flat, dim };

    let fits: Vec<BinaryFit> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            pegasos(&data, &y, config, rng::derive_seed(config.seed, c as u64))
        })
        .collect();

    let mut objective = vec![0.0; config.epochs];
    for (c, fit) in fits.into_iter().enumerate() {
        model.weights[c * dim..(c + 1) * dim].copy_from_slice(&fit.w);
        model.bias[c] = fit.b;
        objective.iter_mut().zip(&fit.objective).for_each(|(o, v)| *o += v);
    }
    if let Some(bad) = objective.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("training objective {bad}")));
    }
    Ok((model, SvmTrace { objective }))
}

struct Standardized<'a> {
    flat: &'a [f64],
    dim: usize,
}

impl Standardized<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.flat.len() / self.dim
        }
    }
}

struct BinaryFit {
    w: Vec<f64>,
    b: f64,
    objective: Vec<f64>,
}

/// Binary Pegasos on `(x, 1)` with `w = s * v`, so the shrink step is O(1).
fn pegasos(data: &Standardized<'_>, y: &[f64], config: &SvmConfig, seed: u64) -> BinaryFit {
    let lambda = config.lambda;
    let n = data.len();
    let sq_norms: Vec<f64> = (0..n).map(|i| data.row(i).iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let radius_sq = 1.0 / lambda;
    let mut v = vec![0.0; data.dim];
    let mut vb = 0.0;
    let mut s = 1.0;
    let mut v_sq = 0.0;
    let mut t = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::seeded(seed);
    let mut objective = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let x = data.row(i);
            let dot = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + vb;
            let margin = y[i] * s * dot;
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|w| *w = 0.0);
                vb = 0.0;
                v_sq = 0.0;
                s = 1.0;
            } else {
                s *= shrink;
            }
            if margin < 1.0 {
                let a = eta * y[i] / s;
                // dot is stale after a reset, but then v is zero.
                let dot_now = if shrink <= 0.0 { 0.0 } else { dot };
                v.iter_mut().zip(x).for_each(|(w, xv)| *w += a * xv);
                vb += a;
                v_sq += 2.0 * a * dot_now + a * a * sq_norms[i];
            }
            let norm_sq = s * s * v_sq;
            if norm_sq > radius_sq {
                s *= (radius_sq / norm_sq).sqrt();
            }
            if s < 1e-100 {
                v.iter_mut().for_each(|w| *w *= s);
                vb *= s;
                v_sq *= s * s;
                s = 1.0;
            }
        }
        let w_sq = s * s * v_sq;
        let hinge: f64 = (0..n)
            .map(|i| {
                let f = s * (data.row(i).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + vb);
                (1.0 - y[i] * f).max(0.0)
            })
            .sum::<f64>()
            / n as f64;
        objective.push(0.5 * lambda * w_sq + hinge);
    }
    BinaryFit {
        w: v.iter().map(|w| w * s).collect(),
        b: vb * s,
        objective,
    }
}
