//! Scalar objectives over batch embeddings.
//!
//! Batch embeddings are `[2N, d]` unit rows in view-major order: rows `0..N`
//! hold view 1 of samples `0..N`, rows `N..2N` view 2. The partner of row `r`
//! is `(r + N) mod 2N`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("at least {needed} semantic vectors required, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("zero vector has no cosine similarity")]
    ZeroVector,
    #[error("embedding batch must have an even, non-zero row count, got {0}")]
    BatchRows(usize),
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which rows enter the contrastive denominator of anchor `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    /// Every sample `k` of the other view `l ≠ j`, partner included.
    #[default]
    CrossView,
    /// Every row except the anchor itself (2N − 1 terms).
    Simclr,
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(LossError::LengthMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(LossError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Temperature(tau))
    }
}

fn half_rows(g: &Graph, h: NodeId) -> Result<usize> {
    let s = g.shape(h);
    if s.len() != 2 || s[0] == 0 || !s[0].is_multiple_of(2) {
        return Err(LossError::BatchRows(s.first().copied().unwrap_or(0)));
    }
    Ok(s[0] / 2)
}

fn mask(rows: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = (0..rows * rows)
        .map(|k| if keep(k / rows, k % rows) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![rows, rows], data).expect("finite mask")
}

fn same_view(n: usize, r: usize, c: usize) -> bool {
    (r < n) == (c < n)
}

fn partner(n: usize, r: usize) -> usize {
    (r + n) % (2 * n)
}

/// `exp(sim/τ)` over the batch similarity matrix.
fn scaled_exp_similarities(g: &mut Graph, h: NodeId, tau: f64) -> Result<(NodeId, NodeId)> {
    let ht = g.transpose(h)?;
    let sims = g.matmul(h, ht)?;
    let scaled = g.scale(sims, 1.0 / tau)?;
    let e = g.exp(scaled)?;
    Ok((sims, e))
}

/// Contrastive loss summed over all `2N` anchors.
pub fn contrastive_loss(g: &mut Graph, h: NodeId, tau: f64, mode: NegativesMode) -> Result<NodeId> {
    check_tau(tau)?;
    let n = half_rows(g, h)?;
    let rows = 2 * n;
    let (sims, e) = scaled_exp_similarities(g, h, tau)?;
    let pos_mask = g.leaf(mask(rows, |r, c| c == partner(n, r)));
    let den_mask = g.leaf(match mode {
        NegativesMode::CrossView => mask(rows, |r, c| !same_view(n, r, c)),
        NegativesMode::Simclr => mask(rows, |r, c| r != c),
    });
    let pos = g.mul(sims, pos_mask)?;
    let pos = g.sum_last(pos)?;
    let pos = g.scale(pos, 1.0 / tau)?;
    let den = g.mul(e, den_mask)?;
    let den = g.sum_last(den)?;
    let log_den = g.log(den)?;
    let terms = g.sub(log_den, pos)?;
    Ok(g.sum(terms)?)
}

/// `Σ_t (1/n) · e_t / (e_t + D)` with `e_t = exp(s_t/τ)`.
///
/// `pos_sims: [R, n]`, `neg_mass: [R, 1]` (the summed `exp(sim/τ)` over
/// negatives) to `[R, 1]`.
pub fn backdoor_from_parts(g: &mut Graph, pos_sims: NodeId, neg_mass: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let strata = *g.shape(pos_sims).get(1).unwrap_or(&0);
    if strata == 0 {
        return Err(LossError::TooFewVectors { needed: 1, got: 0 });
    }
    let scaled = g.scale(pos_sims, 1.0 / tau)?;
    let e = g.exp(scaled)?;
    let den = g.add_bcast(e, neg_mass)?;
    let ratio = g.div(e, den)?;
    let total = g.sum_last(ratio)?;
    Ok(g.scale(total, 1.0 / strata as f64)?)
}

/// Interventional probability for every anchor of the batch.
///
/// `anchors: [2N, d]` unweighted embeddings; `positives: [2N, n, d]` holds,
/// for anchor `(i, j)`, the partner view gated by each `a_t` of sample `i`.
/// Negatives are the other-view rows of every other sample (`k ≠ i`).
pub fn backdoor_probabilities(g: &mut Graph, anchors: NodeId, positives: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let n = half_rows(g, anchors)?;
    let rows = 2 * n;
    let ps = g.shape(positives).to_vec();
    let d = g.shape(anchors)[1];
    if ps.len() != 3 || ps[0] != rows || ps[2] != d {
        return Err(TensorError::ShapeMismatch {
            op: "backdoor_probabilities",
            detail: format!("positives {ps:?} for anchors [{rows}, {d}]"),
        }
        .into());
    }
    let strata = ps[1];
    let (_, e) = scaled_exp_similarities(g, anchors, tau)?;
    let neg_mask = g.leaf(mask(rows, |r, c| !same_view(n, r, c) && c != partner(n, r)));
    let neg = g.mul(e, neg_mask)?;
    let neg_mass = g.sum_last(neg)?;
    let a3 = g.reshape(anchors, &[rows, 1, d])?;
    let s = g.dot_last(a3, positives)?;
    let s = g.reshape(s, &[rows, strata])?;
    backdoor_from_parts(g, s, neg_mass, tau)
}

/// `−Σ log P` over the batch anchors.
pub fn msr_loss(g: &mut Graph, anchors: NodeId, positives: NodeId, tau: f64) -> Result<NodeId> {
    let p = backdoor_probabilities(g, anchors, positives, tau)?;
    let lp = g.log(p)?;
    let s = g.sum(lp)?;
    Ok(g.neg(s)?)
}

/// `L_ct + λ·L_msr`.
pub fn total_loss(g: &mut Graph, l_ct: NodeId, l_msr: NodeId, lambda: f64) -> Result<NodeId> {
    let w = g.scale(l_msr, lambda)?;
    Ok(g.add(l_ct, w)?)
}

/// `L_ct(f¹, f_ph¹) + γ·L_uni`.
pub fn meta_objective(g: &mut Graph, l_ct_fast: NodeId, l_uni: NodeId, gamma: f64) -> Result<NodeId> {
    let w = g.scale(l_uni, gamma)?;
    Ok(g.add(l_ct_fast, w)?)
}

/// Per-sample `log Σ_{i<j} exp(2t·a_iᵀa_j − 2t)` averaged over the batch,
/// for `weights: [B, n, c]`.
pub fn uniformity_loss(g: &mut Graph, weights: NodeId, t: f64) -> Result<NodeId> {
    let s = g.shape(weights).to_vec();
    if s.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "uniformity_loss",
            detail: format!("weights {s:?}"),
        }
        .into());
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    if n < 2 {
        return Err(LossError::TooFewVectors { needed: 2, got: n });
    }
    let left = g.reshape(weights, &[b, n, 1, c])?;
    let right = g.reshape(weights, &[b, 1, n, c])?;
    let gram = g.dot_last(left, right)?;
    let gram = g.reshape(gram, &[b, n, n])?;
    let k = g.scale(gram, 2.0 * t)?;
    let k = g.shift(k, -2.0 * t)?;
    let k = g.exp(k)?;
    let upper: Vec<f64> = (0..n * n)
        .map(|idx| if idx / n < idx % n { 1.0 } else { 0.0 })
        .collect();
    let upper = g.leaf(Tensor::new(vec![1, n, n], upper)?);
    let k = g.mul_bcast(k, upper)?;
    let per_sample = g.sum_to(k, &[b, 1, 1])?;
    let per_sample = g.log(per_sample)?;
    Ok(g.mean(per_sample)?)
}

/// Unit embeddings both views of a batch, plus temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    /// `views[j][i]` is the embedding of sample `i` under view `j`.
    pub views: [Vec<Vec<f64>>; 2],
    pub tau: f64,
}

impl BatchEmbeddings {
    /// Rows in view-major order as a `[2N, d]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let rows: Vec<&Vec<f64>> = self.views[0].iter().chain(self.views[1].iter()).collect();
        let d = rows.first().map_or(0, |r| r.len());
        if self.views[0].len() != self.views[1].len() || rows.is_empty() {
            return Err(LossError::BatchRows(rows.len()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(LossError::LengthMismatch(d, r.len()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::new(vec![rows.len(), d], data)?)
    }

    pub fn contrastive_loss(&self, mode: NegativesMode) -> Result<f64> {
        let mut g = Graph::new();
        let h = g.leaf(self.to_tensor()?);
        let l = contrastive_loss(&mut g, h, self.tau, mode)?;
        Ok(g.value(l)?.item())
    }
}

/// One anchor's stratified positives and its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct BackdoorInputs {
    pub anchor: Vec<f64>,
    /// `embed(Z_i^{3-j}, a_t)` for `t = 1..n`.
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Interventional probability of a single anchor, uniform prior `1/n`.
pub fn backdoor_probability(inputs: &BackdoorInputs, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if inputs.positives.is_empty() {
        return Err(LossError::TooFewVectors { needed: 1, got: 0 });
    }
    let sims = inputs
        .positives
        .iter()
        .map(|p| cosine_sim(&inputs.anchor, p))
        .collect::<Result<Vec<_>>>()?;
    let mut mass = 0.0;
    for neg in &inputs.negatives {
        mass += (cosine_sim(&inputs.anchor, neg)? / tau).exp();
    }
    let mut g = Graph::new();
    let n = sims.len();
    let s = g.leaf(Tensor::new(vec![1, n], sims)?);
    let d = g.leaf(Tensor::new(vec![1, 1], vec![mass])?);
    let p = backdoor_from_parts(&mut g, s, d, tau)?;
    Ok(g.value(p)?.item())
}
