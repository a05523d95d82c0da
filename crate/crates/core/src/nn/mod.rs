//! Encoder, projection head and semantic-weight network, plus the embedding
//! path that gates feature-map channels before projection.
//!
//! Parameters live in [`ParamSet`]s outside any graph. A forward pass binds
//! them as leaves and works on the resulting [`NodeId`] slices, which lets the
//! same forward code run on either real parameters or fast weights.

mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};
use crate::tensor::{ConvSpec, Graph, NodeId, Result as TResult, Tensor, TensorError};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid model configuration: {0}")]
    Invalid(String),
}

/// How encoder blocks halve the spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// 3×3 convolution with stride 2.
    Stride,
    /// 3×3 convolution with stride 1 followed by 2×2 max pooling.
    MaxPool,
}

/// Pre-activation applied to raw semantic scores before row normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightActivation {
    Softplus,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each encoder block; the last entry is `c`.
    pub encoder_channels: Vec<usize>,
    pub downsample: Downsample,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub msr_channels: Vec<usize>,
    /// Number of semantic weight vectors `n`.
    pub semantic_vectors: usize,
    pub weight_activation: WeightActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            encoder_channels: vec![16, 32, 64, 64],
            downsample: Downsample::Stride,
            projection_hidden: 64,
            projection_dim: 64,
            msr_channels: vec![8, 16, 32],
            semantic_vectors: 6,
            weight_activation: WeightActivation::Softplus,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    /// Spatial extent `w = h` of the encoder output.
    pub fn feature_extent(&self) -> usize {
        self.image_size >> self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.image_size == 0 || self.in_channels == 0 {
            return bad("image size and channels must be positive");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder needs at least one block with positive channels");
        }
        if self.msr_channels.is_empty() || self.msr_channels.contains(&0) {
            return bad("semantic network needs at least one block with positive channels");
        }
        for blocks in [self.encoder_channels.len(), self.msr_channels.len()] {
            if blocks >= usize::BITS as usize || !self.image_size.is_multiple_of(1 << blocks) {
                return bad("image size must be divisible by 2^blocks");
            }
        }
        if self.projection_hidden == 0 || self.projection_dim == 0 {
            return bad("projection dimensions must be positive");
        }
        if self.semantic_vectors == 0 {
            return bad("semantic vector count must be positive");
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Parameters of the encoder `f`, projection head `f_ph` and semantic-weight
/// network `f_msr`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: ParamSet,
    pub projection: ParamSet,
    pub msr: ParamSet,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

fn conv_stack(set: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, in_channels: usize, channels: &[usize]) {
    let mut cin = in_channels;
    for (i, &cout) in channels.iter().enumerate() {
        set.push(
            format!("{prefix}.{i}.weight"),
            he_uniform(rng, &[3, 3, cin, cout], 9 * cin),
        );
        set.push(format!("{prefix}.{i}.bias"), Tensor::zeros(&[cout]));
        cin = cout;
    }
}

/// Deterministic uniform He-style initialization; biases start at zero.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelBundle, ConfigError> {
    config.validate()?;
    let mut rng = stream(seed, Stream::Init);
    let c = config.feature_channels();

    let mut encoder = ParamSet::default();
    conv_stack(
        &mut encoder,
        &mut rng,
        "encoder",
        config.in_channels,
        &config.encoder_channels,
    );

    let mut projection = ParamSet::default();
    let (h, d) = (config.projection_hidden, config.projection_dim);
    projection.push("projection.0.weight".into(), he_uniform(&mut rng, &[c, h], c));
    projection.push("projection.0.bias".into(), Tensor::zeros(&[h]));
    projection.push("projection.1.weight".into(), he_uniform(&mut rng, &[h, d], h));
    projection.push("projection.1.bias".into(), Tensor::zeros(&[d]));

    let mut msr = ParamSet::default();
    conv_stack(&mut msr, &mut rng, "msr", config.in_channels, &config.msr_channels);
    let trunk_out = *config.msr_channels.last().expect("validated");
    let scores = config.semantic_vectors * c;
    msr.push(
        "msr.head.weight".into(),
        he_uniform(&mut rng, &[trunk_out, scores], trunk_out),
    );
    msr.push("msr.head.bias".into(), Tensor::zeros(&[scores]));

    Ok(ModelBundle {
        config: config.clone(),
        encoder,
        projection,
        msr,
    })
}

fn conv_block(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, downsample: Downsample) -> TResult<NodeId> {
    let stride = match downsample {
        Downsample::Stride => 2,
        Downsample::MaxPool => 1,
    };
    let y = g.conv2d(x, w, ConvSpec { stride, pad: 1 })?;
    let cout = g.shape(b)[0];
    let b4 = g.reshape(b, &[1, 1, 1, cout])?;
    let y = g.add_bcast(y, b4)?;
    let y = g.relu(y)?;
    match downsample {
        Downsample::Stride => Ok(y),
        Downsample::MaxPool => g.max_pool2(y),
    }
}

fn check_image_batch(g: &Graph, config: &ModelConfig, x: NodeId) -> TResult<()> {
    let s = g.shape(x);
    let want = [config.image_size, config.image_size, config.in_channels];
    if s.len() != 4 || s[1..] != want {
        return Err(TensorError::ShapeMismatch {
            op: "encoder",
            detail: format!("image batch {s:?}, expected [B, {}, {}, {}]", want[0], want[1], want[2]),
        });
    }
    Ok(())
}

/// `Z = f(X)`: `[B, S, S, C_in]` images to `[B, w, h, c]` feature maps.
pub fn encoder_forward(g: &mut Graph, config: &ModelConfig, params: &[NodeId], images: NodeId) -> TResult<NodeId> {
    check_image_batch(g, config, images)?;
    let mut x = images;
    for pair in params.chunks(2) {
        x = conv_block(g, x, pair[0], pair[1], config.downsample)?;
    }
    Ok(x)
}

/// Two affine layers with ReLU between, for `[B, c]` inputs.
pub fn projection_forward(g: &mut Graph, params: &[NodeId], pooled: NodeId) -> TResult<NodeId> {
    let h = g.affine(pooled, params[0], params[1])?;
    let h = g.relu(h)?;
    g.affine(h, params[2], params[3])
}

/// Global-average-pooled, unit-normalized encoder features `[B, c]`.
pub fn pooled_features(g: &mut Graph, z: NodeId) -> TResult<NodeId> {
    let p = g.global_avg_pool(z)?;
    g.l2_normalize(p)
}

/// Scales each channel plane of `z: [B, w, h, c]` by `weights: [B, c]`.
pub fn gate_channels(g: &mut Graph, z: NodeId, weights: NodeId) -> TResult<NodeId> {
    let s = g.shape(z).to_vec();
    if g.shape(weights) != [s[0], s[3]] {
        return Err(TensorError::ShapeMismatch {
            op: "gate_channels",
            detail: format!("weights {:?} for feature map {s:?}", g.shape(weights)),
        });
    }
    let a = g.reshape(weights, &[s[0], 1, 1, s[3]])?;
    g.mul_bcast(z, a)
}

/// `L2normalize(f_ph(GAP(a ⊙ Z)))` row by row; `weights = None` is the
/// unweighted path.
pub fn embed(g: &mut Graph, projection: &[NodeId], z: NodeId, weights: Option<NodeId>) -> TResult<NodeId> {
    let gated = match weights {
        Some(a) => gate_channels(g, z, a)?,
        None => z,
    };
    let pooled = g.global_avg_pool(gated)?;
    let projected = projection_forward(g, projection, pooled)?;
    g.l2_normalize(projected)
}

/// Embeddings of `z` under each of `n` per-sample weight vectors:
/// `z: [B, w, h, c]`, `weights: [B, n, c]` to `[B, n, d_p]`.
pub fn embed_stratified(g: &mut Graph, projection: &[NodeId], z: NodeId, weights: NodeId) -> TResult<NodeId> {
    let s = g.shape(z).to_vec();
    let ws = g.shape(weights).to_vec();
    if ws.len() != 3 || ws[0] != s[0] || ws[2] != s[3] {
        return Err(TensorError::ShapeMismatch {
            op: "embed_stratified",
            detail: format!("weights {ws:?} for feature map {s:?}"),
        });
    }
    let (b, n, c) = (s[0], ws[1], s[3]);
    let z5 = g.reshape(z, &[b, 1, s[1], s[2], c])?;
    let a5 = g.reshape(weights, &[b, n, 1, 1, c])?;
    let gated = g.mul_bcast(z5, a5)?;
    let gated = g.reshape(gated, &[b * n, s[1], s[2], c])?;
    let pooled = g.global_avg_pool(gated)?;
    let projected = projection_forward(g, projection, pooled)?;
    let unit = g.l2_normalize(projected)?;
    let d = g.shape(unit)[1];
    g.reshape(unit, &[b, n, d])
}

/// `A_s` for each original image: `[B, S, S, C_in]` to `[B, n, c]` with
/// unit-norm rows.
pub fn msr_forward(g: &mut Graph, config: &ModelConfig, params: &[NodeId], images: NodeId) -> TResult<NodeId> {
    check_image_batch(g, config, images)?;
    let blocks = config.msr_channels.len();
    let mut x = images;
    for pair in params[..2 * blocks].chunks(2) {
        x = conv_block(g, x, pair[0], pair[1], Downsample::Stride)?;
    }
    let pooled = g.global_avg_pool(x)?;
    let raw = g.affine(pooled, params[2 * blocks], params[2 * blocks + 1])?;
    let b = g.shape(images)[0];
    let scores = g.reshape(raw, &[b, config.semantic_vectors, config.feature_channels()])?;
    let scores = match config.weight_activation {
        WeightActivation::Softplus => g.softplus(scores)?,
        WeightActivation::Identity => scores,
    };
    g.l2_normalize(scores)
}
