use iclmsr::data::AugmentConfig;
use iclmsr::losses::uniformity_loss;
use iclmsr::nn::{init_params, msr_forward, ModelBundle};
use iclmsr::tensor::{Graph, Tensor};
use iclmsr::train::{
    contrastive_reference, fast_weights, meta_gradient, stage1_gradient, stage1_step, train, Minibatch, Optimizer,
    OptimizerKind, Stage, StepRecord, TrainError, Trainer, TrainingConfig,
};
use iclmsr::verify::{tiny_batch, tiny_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::new(vec![8, 8, 3], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

fn cfg() -> TrainingConfig {
    TrainingConfig {
        epochs: 2,
        batch_size: 4,
        warmup_iters: 3,
        lr_drop_epochs: vec![1],
        meta_steps: Some(2),
        ..TrainingConfig::default()
    }
}

fn bundle(seed: u64) -> ModelBundle {
    init_params(seed, &tiny_model()).unwrap()
}

fn run(config: &TrainingConfig, imgs: &[Tensor]) -> (ModelBundle, Vec<StepRecord>) {
    let mut log = Vec::new();
    let b = train(config, bundle(config.seed), imgs, &AugmentConfig::default(), &mut |r| {
        log.push(r.clone())
    })
    .unwrap();
    (b, log)
}

#[test]
fn baseline_is_bit_identical_to_plain_contrastive_loop() {
    let imgs = images(13, 0);
    let config = TrainingConfig {
        lambda: 0.0,
        gamma: 0.0,
        ..cfg()
    };
    let (trained, log) = run(&config, &imgs);
    let (reference, losses) = contrastive_reference(&config, bundle(0), &imgs, &AugmentConfig::default()).unwrap();
    assert!(log.iter().all(|r| r.stage == Stage::Contrastive));
    let ct: Vec<u64> = log.iter().map(|r| r.l_ct.to_bits()).collect();
    let want: Vec<u64> = losses.iter().map(|l| l.to_bits()).collect();
    assert_eq!(ct, want);
    assert!(trained.encoder.bit_eq(&reference.encoder));
    assert!(trained.projection.bit_eq(&reference.projection));
    assert!(trained.msr.bit_eq(&bundle(0).msr));
}

#[test]
fn deterministic_runs_are_bit_identical() {
    let imgs = images(9, 1);
    let (a, la) = run(&cfg(), &imgs);
    let (b, lb) = run(&cfg(), &imgs);
    let ja: Vec<String> = la.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let jb: Vec<String> = lb.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert_eq!(ja, jb);
    assert!(a.msr.bit_eq(&b.msr) && a.encoder.bit_eq(&b.encoder));
    assert!(la.iter().any(|r| r.stage == Stage::Meta));
    assert!(la.iter().all(|r| r.wall_ms == 0.0));
}

#[test]
fn metrics_records_have_the_log_schema() {
    let (_, log) = run(&cfg(), &images(8, 2));
    // 2 stage-1 and 2 meta steps per epoch
    assert_eq!(log.len(), 8);
    let meta = log.iter().find(|r| r.stage == Stage::Meta).unwrap();
    let v = serde_json::to_value(meta).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "L_ct",
            "L_msr",
            "L_to",
            "L_uni",
            "epoch",
            "lr",
            "meta_loss",
            "stage",
            "step",
            "wall_ms"
        ]
    );
    assert!(meta.l_uni.is_some() && meta.meta_loss.is_some());
    let first = &log[0];
    assert!(first.l_uni.is_none() && first.meta_loss.is_none());
    assert!((first.l_to - (first.l_ct + first.l_msr)).abs() < 1e-12);
}

#[test]
fn zero_epochs_return_initial_bundle() {
    let config = TrainingConfig { epochs: 0, ..cfg() };
    let (b, log) = run(&config, &images(4, 0));
    assert!(log.is_empty());
    let init = bundle(0);
    assert!(b.encoder.bit_eq(&init.encoder) && b.msr.bit_eq(&init.msr));
}

#[test]
fn too_small_dataset_rejected() {
    let e = train(&cfg(), bundle(0), &images(3, 0), &AugmentConfig::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(e, TrainError::DatasetTooSmall { have: 3, need: 4 }));
}

fn batch() -> Minibatch {
    tiny_batch(4, &tiny_model(), 3)
}

#[test]
fn stages_touch_only_their_parameters() {
    let b0 = bundle(0);
    let mut b = b0.clone();
    let mut opt = Optimizer::new(
        OptimizerKind::Adam,
        0.0,
        &b.encoder
            .tensors
            .iter()
            .chain(&b.projection.tensors)
            .cloned()
            .collect::<Vec<_>>(),
    );
    stage1_step(&mut b, &batch(), &cfg(), &mut opt, 1e-2).unwrap();
    assert!(b.msr.bit_eq(&b0.msr));
    assert!(!b.encoder.bit_eq(&b0.encoder));

    let mut m = b.clone();
    let mut mopt = Optimizer::new(OptimizerKind::Adam, 0.0, &m.msr.tensors);
    iclmsr::train::meta_step(&mut m, &batch(), &cfg(), &mut mopt, 1e-2).unwrap();
    assert!(m.encoder.bit_eq(&b.encoder) && m.projection.bit_eq(&b.projection));
    assert!(!m.msr.bit_eq(&b.msr));
}

#[test]
fn zero_rate_leaves_parameters() {
    let b0 = bundle(0);
    let mut b = b0.clone();
    let params: Vec<Tensor> = b.encoder.tensors.iter().chain(&b.projection.tensors).cloned().collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, &params);
    stage1_step(&mut b, &batch(), &cfg(), &mut opt, 0.0).unwrap();
    assert!(b.encoder.bit_eq(&b0.encoder) && b.projection.bit_eq(&b0.projection));
}

#[test]
fn small_gradient_step_decreases_total_loss() {
    let mut b = bundle(0);
    let params: Vec<Tensor> = b.encoder.tensors.iter().chain(&b.projection.tensors).cloned().collect();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, &params);
    let before = stage1_step(&mut b, &batch(), &cfg(), &mut opt, 1e-3).unwrap().l_to;
    let after = stage1_gradient(&b, &batch(), &cfg()).unwrap().0.l_to;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn fast_weights_are_an_exact_gradient_step() {
    let b = bundle(0);
    let (_, grads) = stage1_gradient(&b, &batch(), &cfg()).unwrap();
    for alpha in [0.0, 0.1] {
        let mut g = Graph::new();
        let enc = b.encoder.bind(&mut g);
        let ph = b.projection.bind(&mut g);
        let msr = b.msr.bind(&mut g);
        let bt = batch();
        let o = g.leaf(bt.originals.clone());
        let v = g.leaf(bt.views.clone());
        let obj = iclmsr::train::build_objectives(&mut g, &b.config, &cfg(), &enc, &ph, &msr, o, v, false).unwrap();
        let fw = fast_weights(&mut g, obj.l_to, &enc, &ph, alpha, false).unwrap();
        let params: Vec<&Tensor> = b.encoder.tensors.iter().chain(&b.projection.tensors).collect();
        let fast: Vec<_> = fw.enc.iter().chain(&fw.ph).copied().collect();
        for ((p, id), gr) in params.iter().zip(fast).zip(&grads) {
            let f = g.value(id).unwrap();
            for ((pv, fv), gv) in p.data().iter().zip(f.data()).zip(gr.data()) {
                if alpha == 0.0 {
                    assert_eq!(pv, fv);
                } else {
                    assert!((pv - fv - alpha * gv).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn meta_gradient_vanishes_without_regularizers() {
    let config = TrainingConfig {
        lambda: 0.0,
        gamma: 0.0,
        ..cfg()
    };
    let (_, grads) = meta_gradient(&bundle(0), &batch(), &config).unwrap();
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn meta_gradient_without_msr_is_the_scaled_uniformity_gradient() {
    let gamma = 0.7;
    let config = TrainingConfig {
        lambda: 0.0,
        gamma,
        ..cfg()
    };
    let b = bundle(0);
    let (_, grads) = meta_gradient(&b, &batch(), &config).unwrap();
    let mut g = Graph::new();
    let msr = b.msr.bind(&mut g);
    let o = g.leaf(batch().originals);
    let a = msr_forward(&mut g, &b.config, &msr, o).unwrap();
    let u = uniformity_loss(&mut g, a, config.t).unwrap();
    let want = g.gradient(u, &msr).unwrap();
    for (got, w) in grads.iter().zip(&want) {
        for (x, y) in got.data().iter().zip(w.data()) {
            assert!((x - gamma * y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {}", gamma * y);
        }
    }
}

#[test]
fn first_order_changes_the_meta_gradient() {
    let full = meta_gradient(&bundle(0), &batch(), &cfg()).unwrap().1;
    let fo = meta_gradient(
        &bundle(0),
        &batch(),
        &TrainingConfig {
            first_order: true,
            ..cfg()
        },
    )
    .unwrap()
    .1;
    let diff: f64 = full.iter().zip(&fo).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    assert!(diff > 0.0);
}

#[test]
fn first_order_agrees_when_inner_gradient_is_constant() {
    // L_to = <w, c> is linear in w, so its gradient carries no dependence
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rand = |n: usize| Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (w0, c0, m0) = (rand(5), rand(5), rand(5));
    let grads = |first_order: bool| {
        let mut g = Graph::new();
        let w = g.leaf(w0.clone());
        let c = g.leaf(c0.clone());
        let m = g.leaf(m0.clone());
        let wc = g.mul(w, c).unwrap();
        let l = g.sum(wc).unwrap();
        let fw = fast_weights(&mut g, l, &[w], &[], 0.3, first_order).unwrap();
        let sq = g.mul(fw.enc[0], fw.enc[0]).unwrap();
        let outer = g.sum(sq).unwrap();
        let mm = g.mul(m, fw.enc[0]).unwrap();
        let mm = g.sum(mm).unwrap();
        let total = g.add(outer, mm).unwrap();
        g.gradient(total, &[w, m]).unwrap()
    };
    let (a, b) = (grads(false), grads(true));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn trainer_epochs_continue_the_schedule() {
    let imgs = images(8, 3);
    let mut t = Trainer::new(cfg(), bundle(0)).unwrap();
    let mut split = Vec::new();
    for _ in 0..2 {
        t.run_epoch(&imgs, &AugmentConfig::default(), &mut |r| split.push(r.clone()))
            .unwrap();
    }
    assert_eq!(t.epoch(), 2);
    let (_, whole) = run(&cfg(), &imgs);
    assert_eq!(split, whole);
}

#[test]
fn invalid_configs_rejected() {
    let m = tiny_model();
    for bad in [
        TrainingConfig { tau: 0.0, ..cfg() },
        TrainingConfig { lambda: -1.0, ..cfg() },
        TrainingConfig { batch_size: 1, ..cfg() },
        TrainingConfig {
            meta_steps: Some(0),
            ..cfg()
        },
    ] {
        assert!(matches!(bad.validate(&m), Err(TrainError::Config(_))));
    }
}
