use rand_chacha::ChaCha8Rng;

use super::{make_minibatch, scheduled_lr, BatchSampler, Minibatch, Optimizer, Result, TrainError, TrainingConfig};
use crate::data::AugmentConfig;
use crate::losses::{contrastive_loss, meta_objective, msr_loss, total_loss, uniformity_loss};
use crate::nn::{embed, embed_stratified, encoder_forward, msr_forward, ModelBundle, ModelConfig};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, NodeId, Tensor};

/// Loss nodes of the stage-1 objective on one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct Objectives {
    /// `A_s` per original sample, `[N, n, c]`.
    pub weights: NodeId,
    pub l_ct: NodeId,
    pub l_msr: NodeId,
    pub l_to: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageMetrics {
    pub l_ct: f64,
    pub l_msr: f64,
    pub l_to: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaMetrics {
    pub l_ct: f64,
    pub l_msr: f64,
    pub l_to: f64,
    pub l_ct_fast: f64,
    pub l_uni: f64,
    pub meta_loss: f64,
}

/// `L_ct`, `L_msr` and `L_to` for parameters `enc`, `ph`, `msr` on the
/// image nodes `originals` / `views`. With `detach_weights` the semantic
/// weights enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn build_objectives(
    g: &mut Graph,
    model: &ModelConfig,
    config: &TrainingConfig,
    enc: &[NodeId],
    ph: &[NodeId],
    msr: &[NodeId],
    originals: NodeId,
    views: NodeId,
    detach_weights: bool,
) -> Result<Objectives> {
    let n = g.shape(originals)[0];
    let mut weights = msr_forward(g, model, msr, originals)?;
    if detach_weights {
        weights = g.stop_grad(weights)?;
    }
    let z = encoder_forward(g, model, enc, views)?;
    let h = embed(g, ph, z, None)?;
    let l_ct = contrastive_loss(g, h, config.tau, config.negatives)?;

    let second = g.slice(z, 0, n, n)?;
    let first = g.slice(z, 0, 0, n)?;
    let swapped = g.concat(&[second, first], 0)?;
    let both = g.concat(&[weights, weights], 0)?;
    let positives = embed_stratified(g, ph, swapped, both)?;
    let l_msr = msr_loss(g, h, positives, config.tau)?;
    let l_to = total_loss(g, l_ct, l_msr, config.lambda)?;
    Ok(Objectives {
        weights,
        l_ct,
        l_msr,
        l_to,
    })
}

struct Bound {
    enc: Vec<NodeId>,
    ph: Vec<NodeId>,
    msr: Vec<NodeId>,
    originals: NodeId,
    views: NodeId,
}

fn bind(g: &mut Graph, bundle: &ModelBundle, batch: &Minibatch) -> Bound {
    Bound {
        enc: bundle.encoder.bind(g),
        ph: bundle.projection.bind(g),
        msr: bundle.msr.bind(g),
        originals: g.leaf(batch.originals.clone()),
        views: g.leaf(batch.views.clone()),
    }
}

fn scalars(g: &mut Graph, ids: &[NodeId]) -> Result<Vec<f64>> {
    Ok(g.evaluate(ids)?.iter().map(Tensor::item).collect())
}

/// Stage-1 losses and `∇ L_to` with respect to encoder then projection
/// parameters.
pub fn stage1_gradient(
    bundle: &ModelBundle,
    batch: &Minibatch,
    config: &TrainingConfig,
) -> Result<(StageMetrics, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = bind(&mut g, bundle, batch);
    let o = build_objectives(
        &mut g,
        &bundle.config,
        config,
        &b.enc,
        &b.ph,
        &b.msr,
        b.originals,
        b.views,
        true,
    )?;
    let v = scalars(&mut g, &[o.l_ct, o.l_msr, o.l_to])?;
    let wrt: Vec<NodeId> = b.enc.iter().chain(&b.ph).copied().collect();
    let grads = g.gradient(o.l_to, &wrt)?;
    Ok((
        StageMetrics {
            l_ct: v[0],
            l_msr: v[1],
            l_to: v[2],
        },
        grads,
    ))
}

fn split_update(bundle: &mut ModelBundle, opt: &mut Optimizer, grads: &[Tensor], lr: f64) {
    let ne = bundle.encoder.len();
    let mut params: Vec<Tensor> = bundle
        .encoder
        .tensors
        .drain(..)
        .chain(bundle.projection.tensors.drain(..))
        .collect();
    opt.update(&mut params, grads, lr);
    bundle.projection.tensors = params.split_off(ne);
    bundle.encoder.tensors = params;
}

/// One optimizer step of the encoder and projection head on `L_to`; the
/// semantic-weight network is read but not modified.
pub fn stage1_step(
    bundle: &mut ModelBundle,
    batch: &Minibatch,
    config: &TrainingConfig,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<StageMetrics> {
    let (m, grads) = stage1_gradient(bundle, batch, config)?;
    split_update(bundle, opt, &grads, lr);
    Ok(m)
}

/// Look-ahead parameters `p − α·∇_p L_to` as graph nodes.
#[derive(Clone, Debug)]
pub struct FastWeights {
    pub enc: Vec<NodeId>,
    pub ph: Vec<NodeId>,
    /// The inner gradients, retained for a second backward pass.
    pub inner: Vec<NodeId>,
}

pub fn fast_weights(
    g: &mut Graph,
    l_to: NodeId,
    enc: &[NodeId],
    ph: &[NodeId],
    alpha: f64,
    first_order: bool,
) -> Result<FastWeights> {
    let wrt: Vec<NodeId> = enc.iter().chain(ph).copied().collect();
    let inner = g.gradient_retained(l_to, &wrt)?;
    let mut fast = Vec::with_capacity(wrt.len());
    for (&p, &gr) in wrt.iter().zip(&inner) {
        let gr = if first_order { g.stop_grad(gr)? } else { gr };
        let step = g.scale(gr, alpha)?;
        fast.push(g.sub(p, step)?);
    }
    let ph_fast = fast.split_off(enc.len());
    Ok(FastWeights {
        enc: fast,
        ph: ph_fast,
        inner,
    })
}

struct MetaGraph {
    g: Graph,
    msr: Vec<NodeId>,
    objectives: Objectives,
    l_ct_fast: NodeId,
    l_uni: NodeId,
    meta: NodeId,
}

fn meta_graph(bundle: &ModelBundle, batch: &Minibatch, config: &TrainingConfig) -> Result<MetaGraph> {
    let mut g = Graph::new();
    let b = bind(&mut g, bundle, batch);
    let o = build_objectives(
        &mut g,
        &bundle.config,
        config,
        &b.enc,
        &b.ph,
        &b.msr,
        b.originals,
        b.views,
        false,
    )?;
    let fw = fast_weights(&mut g, o.l_to, &b.enc, &b.ph, config.alpha, config.first_order)?;
    let z = encoder_forward(&mut g, &bundle.config, &fw.enc, b.views)?;
    let h = embed(&mut g, &fw.ph, z, None)?;
    let l_ct_fast = contrastive_loss(&mut g, h, config.tau, config.negatives)?;
    let l_uni = uniformity_loss(&mut g, o.weights, config.t)?;
    let meta = meta_objective(&mut g, l_ct_fast, l_uni, config.gamma)?;
    Ok(MetaGraph {
        g,
        msr: b.msr,
        objectives: o,
        l_ct_fast,
        l_uni,
        meta,
    })
}

/// Value of `L_ct(f¹, f_ph¹) + γ·L_uni` for the current parameters.
pub fn meta_objective_value(bundle: &ModelBundle, batch: &Minibatch, config: &TrainingConfig) -> Result<f64> {
    let mut mg = meta_graph(bundle, batch, config)?;
    Ok(mg.g.value(mg.meta)?.item())
}

/// Meta objective and its gradient with respect to the semantic-weight
/// network, differentiating through the look-ahead step.
pub fn meta_gradient(
    bundle: &ModelBundle,
    batch: &Minibatch,
    config: &TrainingConfig,
) -> Result<(MetaMetrics, Vec<Tensor>)> {
    let mut mg = meta_graph(bundle, batch, config)?;
    let o = mg.objectives;
    let v = scalars(&mut mg.g, &[o.l_ct, o.l_msr, o.l_to, mg.l_ct_fast, mg.l_uni, mg.meta])?;
    let grads = mg.g.gradient(mg.meta, &mg.msr)?;
    Ok((
        MetaMetrics {
            l_ct: v[0],
            l_msr: v[1],
            l_to: v[2],
            l_ct_fast: v[3],
            l_uni: v[4],
            meta_loss: v[5],
        },
        grads,
    ))
}

/// One optimizer step of the semantic-weight network. The look-ahead
/// parameters are discarded; encoder and projection keep their values.
pub fn meta_step(
    bundle: &mut ModelBundle,
    batch: &Minibatch,
    config: &TrainingConfig,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<MetaMetrics> {
    let (m, grads) = meta_gradient(bundle, batch, config)?;
    opt.update(&mut bundle.msr.tensors, &grads, lr);
    Ok(m)
}

/// Plain contrastive pretraining of encoder and projection head on `L_ct`
/// alone, sharing the sampling, augmentation and schedule of the two-stage
/// trainer. Returns the trained bundle and the per-step `L_ct` values.
pub fn contrastive_reference(
    config: &TrainingConfig,
    mut bundle: ModelBundle,
    images: &[Tensor],
    augment: &AugmentConfig,
) -> Result<(ModelBundle, Vec<f64>)> {
    if images.len() < config.batch_size {
        return Err(TrainError::DatasetTooSmall {
            have: images.len(),
            need: config.batch_size,
        });
    }
    let params: Vec<Tensor> = bundle
        .encoder
        .tensors
        .iter()
        .chain(&bundle.projection.tensors)
        .cloned()
        .collect();
    let mut opt = Optimizer::new(config.optimizer, config.weight_decay, &params);
    let mut sampler = BatchSampler::new(stream(config.seed, Stream::Sampling), images.len(), config.batch_size);
    let mut rng: ChaCha8Rng = stream(config.seed, Stream::Augment);
    let mut losses = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        for _ in 0..sampler.batches_per_pass() {
            let batch = make_minibatch(images, &sampler.next_batch(), augment, &mut rng);
            let mut g = Graph::new();
            let enc = bundle.encoder.bind(&mut g);
            let ph = bundle.projection.bind(&mut g);
            let views = g.leaf(batch.views.clone());
            let z = encoder_forward(&mut g, &bundle.config, &enc, views)?;
            let h = embed(&mut g, &ph, z, None)?;
            let l = contrastive_loss(&mut g, h, config.tau, config.negatives)?;
            losses.push(g.value(l)?.item());
            let wrt: Vec<NodeId> = enc.iter().chain(&ph).copied().collect();
            let grads = g.gradient(l, &wrt)?;
            let lr = scheduled_lr(
                config.alpha,
                iteration,
                config.warmup_iters,
                epoch,
                config.epochs,
                &config.lr_drop_epochs,
                config.lr_drop,
            );
            split_update(&mut bundle, &mut opt, &grads, lr);
            iteration += 1;
        }
    }
    Ok((bundle, losses))
}
