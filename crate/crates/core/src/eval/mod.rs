//! Frozen-feature evaluation: softmax linear probe, cosine k-NN, and the
//! train-view × test-view protocol on synthetic confounded data.

mod four;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{embed, encoder_forward, pooled_features, ModelBundle};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};
use crate::train::{Optimizer, OptimizerKind};

pub use four::{run_four_settings, FourSettingConfig, FourSettingReport, Gap, Method, SettingResult, CSV_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid probe configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("k = {k} exceeds the {train} training points")]
    KTooLarge { k: usize, train: usize },
    #[error("{0}")]
    Dataset(String),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which representation is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFeatures {
    /// Pooled, normalized encoder output.
    #[default]
    Encoder,
    /// Normalized projection-head output.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            optimizer: OptimizerKind::Adam,
            lr: 1e-2,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "ragged feature rows");
        Self {
            rows: rows.len(),
            dim,
            data: rows.concat(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn select(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("finite features")
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(EvalError::LabelRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of `x·W + b` against integer labels.
fn cross_entropy(g: &mut Graph, w: NodeId, b: NodeId, x: Tensor, labels: &[usize]) -> Result<NodeId> {
    let classes = g.shape(w)[1];
    let rows = x.shape()[0];
    let x = g.leaf(x);
    let logits = g.affine(x, w, b)?;
    // log-sum-exp about the (constant) row maximum
    let lv = g.value(logits)?;
    let maxes: Vec<f64> = lv
        .data()
        .chunks(classes)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = g.leaf(Tensor::new(vec![rows, 1], maxes)?);
    let centered = g.sub_bcast(logits, m)?;
    let e = g.exp(centered)?;
    let s = g.sum_last(e)?;
    let lse = g.log(s)?;
    let mut onehot = vec![0.0; rows * classes];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * classes + l] = 1.0;
    }
    let onehot = g.leaf(Tensor::new(vec![rows, classes], onehot)?);
    let picked = g.mul(centered, onehot)?;
    let picked = g.sum_last(picked)?;
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll)?)
}

/// Trained affine classifier.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn predict(&self, x: &Features) -> Vec<usize> {
        let classes = self.bias.len();
        let w = self.weight.data();
        (0..x.rows)
            .map(|i| {
                let row = x.row(i);
                let mut best = (f64::NEG_INFINITY, 0);
                for c in 0..classes {
                    let mut s = self.bias.data()[c];
                    for (k, v) in row.iter().enumerate() {
                        s += v * w[k * classes + c];
                    }
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                best.1
            })
            .collect()
    }
}

pub fn train_probe(
    train: &Features,
    labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<LinearClassifier> {
    if config.epochs == 0 {
        return Err(EvalError::Config("probe needs at least one epoch".into()));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(EvalError::Config(
            "probe batch size and learning rate must be positive".into(),
        ));
    }
    if train.rows == 0 {
        return Err(EvalError::EmptySplit("train"));
    }
    check_labels(labels, classes)?;
    let mut rng = stream(config.seed, Stream::Probe);
    let bound = 1.0 / (train.dim as f64).sqrt();
    let w0: Vec<f64> = (0..train.dim * classes).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut params = vec![Tensor::new(vec![train.dim, classes], w0)?, Tensor::zeros(&[classes])];
    let mut opt = Optimizer::new(config.optimizer, 0.0, &params);
    let mut order: Vec<usize> = (0..train.rows).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let w = g.leaf(params[0].clone());
            let b = g.leaf(params[1].clone());
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&mut g, w, b, train.select(chunk), &ys)?;
            let grads = g.gradient(loss, &[w, b])?;
            opt.update(&mut params, &grads, config.lr);
        }
    }
    let bias = params.pop().expect("bias");
    let weight = params.pop().expect("weight");
    Ok(LinearClassifier { weight, bias })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Top-1 test accuracy of a softmax linear probe.
pub fn linear_probe(
    train: &Features,
    train_labels: &[usize],
    test: &Features,
    test_labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if test.rows == 0 {
        return Err(EvalError::EmptySplit("test"));
    }
    check_labels(test_labels, classes)?;
    let clf = train_probe(train, train_labels, classes, config)?;
    Ok(accuracy(&clf.predict(test), test_labels))
}

/// Cosine-distance k-NN predictions. Neighbors are the `k` smallest
/// distances (earlier training index first on equal distance); the vote goes
/// to the most frequent label, then the smallest summed distance, then the
/// lowest label id.
pub fn knn_predict(train: &Features, train_labels: &[usize], test: &Features, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(EvalError::Config("k must be at least 1".into()));
    }
    if k > train.rows {
        return Err(EvalError::KTooLarge { k, train: train.rows });
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut preds = Vec::with_capacity(test.rows);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.rows);
    for q in 0..test.rows {
        let query = test.row(q);
        dist.clear();
        for i in 0..train.rows {
            let dot: f64 = query.iter().zip(train.row(i)).map(|(a, b)| a * b).sum();
            dist.push((1.0 - dot, i));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &(d, i) in &dist[..k] {
            let v = &mut votes[train_labels[i]];
            v.0 += 1;
            v.1 += d;
        }
        let mut best = 0;
        for c in 1..classes {
            let (bc, bd) = votes[best];
            let (cc, cd) = votes[c];
            if cc > bc || (cc == bc && cd < bd) {
                best = c;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

pub fn knn_classify(
    train: &Features,
    train_labels: &[usize],
    test: &Features,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    Ok(accuracy(&knn_predict(train, train_labels, test, k)?, test_labels))
}

/// Frozen features of `images` (`[S, S, C]` each), in chunks of `chunk`.
pub fn extract_features(
    bundle: &ModelBundle,
    images: &[Tensor],
    kind: ProbeFeatures,
    chunk: usize,
) -> Result<Features> {
    let mut data = Vec::new();
    let mut dim = 0;
    for part in images.chunks(chunk.max(1)) {
        let refs: Vec<&Tensor> = part.iter().collect();
        let mut g = Graph::new();
        let x = g.leaf(crate::data::stack(&refs));
        let enc = bundle.encoder.bind(&mut g);
        let z = encoder_forward(&mut g, &bundle.config, &enc, x)?;
        let out = match kind {
            ProbeFeatures::Encoder => pooled_features(&mut g, z)?,
            ProbeFeatures::Projection => {
                let ph = bundle.projection.bind(&mut g);
                embed(&mut g, &ph, z, None)?
            }
        };
        let v = g.value(out)?;
        dim = v.shape()[1];
        data.extend_from_slice(v.data());
    }
    Ok(Features {
        rows: images.len(),
        dim,
        data,
    })
}
