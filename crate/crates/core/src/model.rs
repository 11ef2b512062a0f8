//! Reference trainable model: multinomial softmax regression fitted by
//! per-sample SGD, plus synthetic data generation and shard partitioning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Magic prefix of the canonical weights encoding.
pub const WEIGHTS_MAGIC: &[u8; 8] = b"FLWEIGHT";

/// Flat weight matrix of shape `(n_features + 1) x n_classes`; the last row
/// holds the class biases. Row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    values: Vec<f64>,
    n_features: usize,
    n_classes: usize,
}

impl ModelWeights {
    pub fn new(n_features: usize, n_classes: usize, values: Vec<f64>) -> Result<Self> {
        if n_features == 0 || n_classes == 0 {
            return invalid("weights dimensions must be non-zero");
        }
        let expected = (n_features + 1) * n_classes;
        if values.len() != expected {
            return invalid(format!(
                "weights length {} does not match shape ({n_features}+1)x{n_classes}",
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("weight {i} is not finite"));
        }
        Ok(Self {
            values,
            n_features,
            n_classes,
        })
    }

    pub fn zeros(n_features: usize, n_classes: usize) -> Result<Self> {
        Self::new(n_features, n_classes, vec![0.0; (n_features + 1) * n_classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_features, self.n_classes)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Class scores `x·W + b` for one feature vector.
    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        let mut out = self.values[self.n_features * k..].to_vec();
        for (f, x) in features.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let row = &self.values[f * k..(f + 1) * k];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out
    }

    /// Index of the highest score; ties go to the lowest class index.
    pub fn predict(&self, features: &[f64]) -> usize {
        let scores = self.scores(features);
        let mut best = 0;
        for (c, s) in scores.iter().enumerate().skip(1) {
            if *s > scores[best] {
                best = c;
            }
        }
        best
    }

    /// Canonical encoding: magic, two big-endian u32 shape fields, then the
    /// values as big-endian IEEE-754 doubles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.n_features as u32).to_be_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_be_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format {
                field: "weights header",
                reason: format!("need 16 bytes, got {}", bytes.len()),
            });
        }
        if &bytes[..8] != WEIGHTS_MAGIC {
            return Err(Error::Format {
                field: "weights magic",
                reason: format!("expected FLWEIGHT, got {:02x?}", &bytes[..8]),
            });
        }
        let n_features = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n_classes = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let count = (n_features + 1) * n_classes;
        let body = &bytes[16..];
        if body.len() != count * 8 {
            return Err(Error::Format {
                field: "weights values",
                reason: format!("expected {} bytes, got {}", count * 8, body.len()),
            });
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n_features, n_classes, values).map_err(|e| Error::Format {
            field: "weights values",
            reason: e.to_string(),
        })
    }
}

/// One labelled feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, n_features: usize, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return invalid("a dataset needs at least two classes");
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= n_classes {
                return invalid(format!("sample {i} has label {} >= {n_classes}", s.label));
            }
            if s.features.len() != n_features {
                return invalid(format!(
                    "sample {i} has {} features, expected {n_features}",
                    s.features.len()
                ));
            }
        }
        Ok(Self {
            samples,
            n_features,
            n_classes,
        })
    }

    pub fn empty(n_features: usize, n_classes: usize) -> Self {
        Self {
            samples: Vec::new(),
            n_features,
            n_classes,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Sub-dataset made of the given sample indices, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_features: self.n_features,
            n_classes: self.n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 10,
            rng_seed: 0,
        }
    }
}

/// Number of batches held by each worker, in worker order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub batches_per_worker: Vec<usize>,
    pub batch_size: usize,
}

/// Default samples per batch.
pub const DEFAULT_BATCH_SIZE: usize = 100;

impl AllocationRow {
    pub fn new(batches_per_worker: Vec<usize>, batch_size: usize) -> Self {
        Self {
            batches_per_worker,
            batch_size,
        }
    }

    pub fn workers(&self) -> usize {
        self.batches_per_worker.len()
    }

    pub fn required_samples(&self) -> usize {
        self.batches_per_worker.iter().sum::<usize>() * self.batch_size
    }
}

pub fn init_weights(n_features: usize, n_classes: usize, seed: u64) -> Result<ModelWeights> {
    if n_features == 0 || n_classes == 0 {
        return invalid("n_features and n_classes must be non-zero");
    }
    if n_classes < 2 {
        return invalid("n_classes must be at least 2");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..(n_features + 1) * n_classes)
        .map(|_| rng.random_range(-0.01..=0.01))
        .collect();
    ModelWeights::new(n_features, n_classes, values)
}

fn check_shapes(weights: &ModelWeights, data: &Dataset) -> Result<()> {
    if weights.shape() != (data.n_features, data.n_classes) {
        return invalid(format!(
            "weights shape {:?} does not match dataset shape {:?}",
            weights.shape(),
            (data.n_features, data.n_classes)
        ));
    }
    Ok(())
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Cross-entropy loss of one sample and its gradient with respect to every
/// weight, laid out like [`ModelWeights::values`].
pub fn loss_and_gradient(weights: &ModelWeights, sample: &Sample) -> (f64, Vec<f64>) {
    let k = weights.n_classes;
    let mut probs = weights.scores(&sample.features);
    softmax_in_place(&mut probs);
    let loss = -probs[sample.label].max(f64::MIN_POSITIVE).ln();
    probs[sample.label] -= 1.0;
    let mut grad = vec![0.0; weights.values.len()];
    for (f, x) in sample.features.iter().enumerate() {
        for c in 0..k {
            grad[f * k + c] = x * probs[c];
        }
    }
    grad[weights.n_features * k..].copy_from_slice(&probs);
    (loss, grad)
}

fn sgd_step(values: &mut [f64], n_features: usize, k: usize, sample: &Sample, lr: f64) {
    let mut probs = vec![0.0; k];
    probs.copy_from_slice(&values[n_features * k..]);
    for (f, x) in sample.features.iter().enumerate() {
        let row = &values[f * k..(f + 1) * k];
        for (p, w) in probs.iter_mut().zip(row) {
            *p += x * w;
        }
    }
    softmax_in_place(&mut probs);
    probs[sample.label] -= 1.0;
    for (f, x) in sample.features.iter().enumerate() {
        let row = &mut values[f * k..(f + 1) * k];
        for (w, g) in row.iter_mut().zip(&probs) {
            *w -= lr * x * g;
        }
    }
    for (b, g) in values[n_features * k..].iter_mut().zip(&probs) {
        *b -= lr * g;
    }
}

/// Runs `cfg.epochs` passes of per-sample SGD over `data`, reshuffling the
/// visiting order once per epoch from `cfg.rng_seed`.
pub fn train_epochs(weights: &ModelWeights, data: &Dataset, cfg: &TrainConfig) -> Result<ModelWeights> {
    check_shapes(weights, data)?;
    if data.is_empty() {
        return invalid("cannot train on an empty dataset");
    }
    if cfg.epochs == 0 {
        return invalid("epochs must be at least 1");
    }
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return invalid("learning rate must be positive");
    }
    let mut values = weights.values.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            sgd_step(
                &mut values,
                weights.n_features,
                weights.n_classes,
                &data.samples[i],
                cfg.learning_rate,
            );
        }
    }
    ModelWeights::new(weights.n_features, weights.n_classes, values)
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(weights: &ModelWeights, test: &Dataset) -> Result<f64> {
    check_shapes(weights, test)?;
    if test.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| weights.predict(&s.features) == s.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Bits needed to give every class its own hypercube corner.
pub fn synth_feature_count(n_classes: usize) -> usize {
    let mut bits = 1;
    while (1usize << bits) < n_classes {
        bits += 1;
    }
    bits
}

/// Cluster center of `class`: the unit hypercube corner spelled by its
/// binary code.
pub fn synth_center(class: usize, n_features: usize) -> Vec<f64> {
    (0..n_features).map(|b| ((class >> b) & 1) as f64).collect()
}

/// Gaussian clusters around hypercube corners. Samples are interleaved by
/// class so that any prefix is close to balanced.
pub fn synth_dataset(n_classes: usize, samples_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return invalid("n_classes must be at least 2");
    }
    if samples_per_class == 0 {
        return invalid("samples_per_class must be at least 1");
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return invalid("spread must be positive");
    }
    let n_features = synth_feature_count(n_classes);
    let centers: Vec<Vec<f64>> = (0..n_classes).map(|c| synth_center(c, n_features)).collect();
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (label, center) in centers.iter().enumerate() {
            let features = center.iter().map(|c| c + noise.sample(&mut rng)).collect();
            samples.push(Sample { features, label });
        }
    }
    Dataset::new(samples, n_features, n_classes)
}

/// Splits a seeded shuffle of `data` into contiguous per-worker shards.
pub fn partition(data: &Dataset, row: &AllocationRow, seed: u64) -> Result<Vec<Dataset>> {
    let required = row.required_samples();
    if required > data.len() {
        return invalid(format!(
            "allocation needs {required} samples but only {} are available",
            data.len()
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    Ok(row
        .batches_per_worker
        .iter()
        .map(|&batches| {
            let end = start + batches * row.batch_size;
            let shard = data.select(&order[start..end]);
            start = end;
            shard
        })
        .collect())
}
