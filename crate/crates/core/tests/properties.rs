use iclmsr::data::{generate_synthetic, ConfoundedSpec};
use iclmsr::losses::{
    backdoor_probability, cosine_sim, uniformity_loss, BackdoorInputs, BatchEmbeddings, NegativesMode,
};
use iclmsr::tensor::{Graph, Tensor};
use iclmsr::train::scheduled_lr;
use proptest::prelude::*;

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn batch_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..5, 2usize..5).prop_flat_map(|(n, d)| {
        (
            Just(n),
            prop::collection::vec(vec_strategy(d), n),
            prop::collection::vec(vec_strategy(d), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_scale_invariant((x, y) in (2usize..6).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d))),
                                 a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * b).collect();
        let c = cosine_sim(&x, &y).unwrap();
        prop_assert!((cosine_sim(&xs, &ys).unwrap() - c).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn contrastive_loss_ignores_sample_order((n, v0, v1) in batch_strategy(), shift in 0usize..5,
                                             simclr in any::<bool>()) {
        let mode = if simclr { NegativesMode::Simclr } else { NegativesMode::CrossView };
        let unit = |v: &Vec<Vec<f64>>| v.iter().map(|r| normalized(r)).collect::<Vec<_>>();
        let a = BatchEmbeddings { views: [unit(&v0), unit(&v1)], tau: 0.5 };
        let rot = |v: &Vec<Vec<f64>>| (0..n).map(|i| v[(i + shift) % n].clone()).collect::<Vec<_>>();
        let b = BatchEmbeddings { views: [rot(&a.views[0]), rot(&a.views[1])], tau: 0.5 };
        let (la, lb) = (a.contrastive_loss(mode).unwrap(), b.contrastive_loss(mode).unwrap());
        prop_assert!((la - lb).abs() < 1e-9 * (1.0 + la.abs()));
        // the positive is one of the denominator terms, so only rounding can push it below zero
        prop_assert!(la >= -1e-12 || mode == NegativesMode::CrossView);
    }

    #[test]
    fn contrastive_loss_is_rotation_invariant((_, v0, v1) in batch_strategy(), theta in 0.0f64..std::f64::consts::TAU) {
        let unit = |v: &Vec<Vec<f64>>| v.iter().map(|r| normalized(r)).collect::<Vec<_>>();
        let (c, s) = (theta.cos(), theta.sin());
        let rotate = |v: &Vec<Vec<f64>>| v.iter().map(|r| {
            let mut r = r.clone();
            let (x, y) = (r[0], r[1]);
            r[0] = c * x - s * y;
            r[1] = s * x + c * y;
            r
        }).collect::<Vec<_>>();
        let a = BatchEmbeddings { views: [unit(&v0), unit(&v1)], tau: 0.5 };
        let b = BatchEmbeddings { views: [rotate(&a.views[0]), rotate(&a.views[1])], tau: 0.5 };
        let (la, lb) = (a.contrastive_loss(NegativesMode::CrossView).unwrap(), b.contrastive_loss(NegativesMode::CrossView).unwrap());
        prop_assert!((la - lb).abs() < 1e-9 * (1.0 + la.abs()));
    }

    #[test]
    fn backdoor_probability_is_a_probability(d in 2usize..5, strata in 1usize..5, negs in 0usize..5,
                                             tau in 0.1f64..2.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || normalized(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let inputs = BackdoorInputs {
            anchor: unit(),
            positives: (0..strata).map(|_| unit()).collect(),
            negatives: (0..negs).map(|_| unit()).collect(),
        };
        let p = backdoor_probability(&inputs, tau).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0, "{}", p);
        prop_assert_eq!(p == 1.0, negs == 0);
    }

    #[test]
    fn uniformity_ignores_vector_order(n in 2usize..6, c in 2usize..5, t in 0.5f64..3.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| normalized(&(0..c).map(|_| rng.gen_range(0.01..1.0)).collect::<Vec<f64>>()))
            .collect();
        let value = |rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::new(vec![1, n, c], rows.concat()).unwrap());
            let l = uniformity_loss(&mut g, a, t).unwrap();
            g.value(l).unwrap().item()
        };
        let mut rev = rows.clone();
        rev.reverse();
        let (a, b) = (value(&rows), value(&rev));
        prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        // bounded by the coincident and maximally spread extremes
        let pairs = (n * (n - 1) / 2) as f64;
        prop_assert!(a <= pairs.ln() + 1e-12 && a >= pairs.ln() - 2.0 * t - 1e-12);
    }

    #[test]
    fn schedule_never_exceeds_base(base in 1e-5f64..1.0, it in 0usize..2000, warm in 0usize..600,
                                   epochs in 1usize..200, frac in 0.0f64..1.0) {
        let epoch = ((epochs as f64) * frac) as usize % epochs;
        let lr = scheduled_lr(base, it, warm, epoch, epochs, &[50, 25], 0.2);
        prop_assert!(lr > 0.0 && lr <= base);
    }

    #[test]
    fn generator_is_a_function_of_its_spec(seed in 0u64..1000, rho in 0.0f64..1.0) {
        let spec = ConfoundedSpec { seed, rho, train_per_class: 2, test_per_class: 1, classes: 3, image_size: 8, ..ConfoundedSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (x, y) in a.train.iter().chain(&a.test).zip(b.train.iter().chain(&b.test)) {
            prop_assert!(x.image.bit_eq(&y.image));
            prop_assert_eq!(x.background, y.background);
        }
    }
}
