//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.
//!
//! The directional toy study (criterion 6) takes several minutes per seed;
//! set `ICLMSR_ACCEPTANCE_SKIP_TOY=1` to report it as skipped.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use iclmsr::data::{generate_synthetic, parse_cifar10, View, CIFAR_RECORD_BYTES};
use iclmsr::nn::init_params;
use iclmsr::train::{contrastive_reference, train, Stage, TrainingConfig};
use iclmsr::verify;

struct Outcome {
    /// `None` when the criterion was skipped.
    passed: Option<bool>,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: Some(passed),
        detail: detail.into(),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iclmsr"))
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .display()
        .to_string()
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let checks = verify::gradient_suite(0, 100);
    let secs = t.elapsed().as_secs_f64();
    let worst = checks
        .iter()
        .filter_map(|c| c.max_rel_err.map(|e| (e, c.name.as_str())))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} ops/losses x 100 instances, worst rel err {:.2e} ({}) <= 1e-4, {secs:.1} s < 60 s{}",
            checks.len(),
            worst.0,
            worst.1,
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failed.join(","))
            }
        ),
    )
}

fn meta_gradient_oracle() -> Outcome {
    let t = Instant::now();
    let checks = verify::meta_suite(0);
    let secs = t.elapsed().as_secs_f64();
    let errs: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.2e}", c.name, c.max_rel_err.unwrap_or(f64::NAN)))
        .collect();
    outcome(
        checks.iter().all(|c| c.passed) && secs < 60.0,
        format!("{} <= 1e-3, {secs:.2} s < 60 s", errs.join(", ")),
    )
}

fn loss_fixtures() -> Outcome {
    let checks = verify::fixture_suite();
    let worst = checks.iter().filter_map(|c| c.max_rel_err).fold(0.0, f64::max);
    outcome(
        checks.iter().all(|c| c.passed),
        format!("{} fixtures, worst abs err {worst:.1e} <= 1e-10", checks.len()),
    )
}

fn probability_invariants() -> Outcome {
    let checks = verify::invariant_suite(0, 1000);
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "range, monotonicity and L_msr zero set hold on 1000 configurations".into()
        } else {
            failed.join("; ")
        },
    )
}

fn baseline_recovery() -> Outcome {
    let model = iclmsr::nn::ModelConfig {
        image_size: 16,
        encoder_channels: vec![8, 16],
        projection_hidden: 16,
        projection_dim: 16,
        msr_channels: vec![8],
        semantic_vectors: 6,
        ..Default::default()
    };
    let ds = generate_synthetic(&iclmsr::data::ConfoundedSpec {
        image_size: 16,
        train_per_class: 4,
        test_per_class: 1,
        ..Default::default()
    })
    .expect("valid spec");
    let images = ds.view_images(true, View::Full).expect("masks");
    let cfg = TrainingConfig {
        lambda: 0.0,
        gamma: 0.0,
        epochs: 3,
        batch_size: 8,
        warmup_iters: 4,
        lr_drop_epochs: vec![1],
        ..TrainingConfig::default()
    };
    let augment = iclmsr::data::AugmentConfig::default();
    let bundle = init_params(cfg.seed, &model).expect("valid model");
    let mut log = Vec::new();
    let trained = train(&cfg, bundle.clone(), &images, &augment, &mut |r| log.push(r.clone())).expect("trains");
    let (reference, losses) = contrastive_reference(&cfg, bundle, &images, &augment).expect("trains");
    let same_losses = log.len() == losses.len()
        && log
            .iter()
            .zip(&losses)
            .all(|(r, l)| r.stage == Stage::Contrastive && r.l_ct.to_bits() == l.to_bits());
    let same_params = trained.encoder.bit_eq(&reference.encoder) && trained.projection.bit_eq(&reference.projection);
    outcome(
        same_losses && same_params,
        format!(
            "{} steps: loss trajectory bit-identical {same_losses}, parameters bit-identical {same_params}",
            losses.len()
        ),
    )
}

fn directional_toy() -> Outcome {
    if std::env::var_os("ICLMSR_ACCEPTANCE_SKIP_TOY").is_some() {
        return Outcome {
            passed: None,
            detail: "skipped (ICLMSR_ACCEPTANCE_SKIP_TOY is set)".into(),
        };
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let seeds = 3.0;
    let t = Instant::now();
    let o = bin()
        .args([
            "toy",
            "--config",
            &config("toy.cfg"),
            "--seeds",
            "1,2,3",
            "--check",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .expect("binary runs");
    let per_seed = t.elapsed().as_secs_f64() / seeds;
    let Ok(text) = fs::read_to_string(dir.path().join("check.json")) else {
        return outcome(false, format!("toy run failed: {}", String::from_utf8_lossy(&o.stderr)));
    };
    let checks: serde_json::Value = serde_json::from_str(&text).expect("check.json parses");
    let parts: Vec<String> = checks
        .as_array()
        .expect("array")
        .iter()
        .map(|c| {
            format!(
                "{} {:+.4} {}",
                c["name"].as_str().unwrap_or("?"),
                c["value"].as_f64().unwrap_or(f64::NAN),
                if c["passed"].as_bool() == Some(true) {
                    "ok"
                } else {
                    "FAIL"
                }
            )
        })
        .collect();
    let all = checks
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"].as_bool() == Some(true));
    outcome(
        all && per_seed <= 1200.0,
        format!("{}; {per_seed:.0} s per seed <= 1200 s", parts.join(", ")),
    )
}

fn uniformity_behavior() -> Outcome {
    let t = 2.0;
    let t0 = Instant::now();
    let run = match verify::uniformity_descent(0, 6, 16, t, 500, 1e-2) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = t0.elapsed().as_secs_f64();
    let (lo, hi) = (15f64.ln() - 4.0 * t, 15f64.ln());
    let ok = run.final_mean_dot < run.initial_mean_dot && (lo..=hi).contains(&run.final_loss) && secs < 30.0;
    outcome(
        ok,
        format!(
            "mean dot {:.4} -> {:.4}, L_uni {:.4} -> {:.4} in [{lo:.4}, {hi:.4}], {secs:.2} s",
            run.initial_mean_dot, run.final_mean_dot, run.initial_loss, run.final_loss
        ),
    )
}

fn knn_oracle() -> Outcome {
    let bad = verify::knn_oracle_suite(0, 50, 200);
    outcome(
        bad.is_empty(),
        format!("50 instances <= 200 points, mismatches {bad:?}"),
    )
}

fn cifar_fixtures() -> Outcome {
    let record = |label: u8| -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD_BYTES - 1).map(|i| (i * 31 % 256) as u8));
        r
    };
    let mut bytes = record(7);
    bytes.extend(record(0));
    let exact = match parse_cifar10(&bytes) {
        Ok(s) => {
            s.len() == 2
                && s[0].label == 7
                && s[1].label == 0
                && (0..3)
                    .all(|c| (0..1024).all(|p| s[0].image.data()[p * 3 + c] == bytes[1 + c * 1024 + p] as f64 / 255.0))
        }
        Err(_) => false,
    };
    let trunc = parse_cifar10(&bytes[..CIFAR_RECORD_BYTES + 5]).map_err(|e| e.to_string());
    let trunc_ok = trunc.as_ref().err().map(String::as_str)
        == Some("truncated record at byte offset 3073: 5 of 3073 bytes present");
    let mut bad = record(1);
    bad.extend(record(10));
    let label = parse_cifar10(&bad).map_err(|e| e.to_string());
    let label_ok = label.as_ref().err().map(String::as_str) == Some("label byte 10 at byte offset 3073 exceeds 9");
    outcome(
        exact && trunc_ok && label_ok,
        format!("bit-exact {exact}, truncation diagnostic {trunc_ok}, bad-label diagnostic {label_ok}"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut notes = Vec::new();
    let mut ok = true;
    for (cmd, logs) in [
        ("train", vec!["metrics.jsonl"]),
        (
            "toy",
            vec![
                "metrics-baseline-full.jsonl",
                "metrics-baseline-foreground.jsonl",
                "metrics-icl_msr-full.jsonl",
                "metrics-icl_msr-foreground.jsonl",
            ],
        ),
    ] {
        let first = dir.path().join(format!("{cmd}-a"));
        let second = dir.path().join(format!("{cmd}-b"));
        let a = bin()
            .args([cmd, "--config", &config("tiny.cfg"), "--deterministic", "--out"])
            .arg(&first)
            .status()
            .expect("binary runs");
        let b = bin()
            .args([cmd, "--deterministic", "--config"])
            .arg(first.join("config.cfg"))
            .arg("--out")
            .arg(&second)
            .status()
            .expect("binary runs");
        let same = a.success()
            && b.success()
            && logs
                .iter()
                .all(|l| match (fs::read(first.join(l)), fs::read(second.join(l))) {
                    (Ok(x), Ok(y)) => !x.is_empty() && x == y,
                    _ => false,
                });
        ok &= same;
        notes.push(format!("{cmd} rerun from echo bit-identical {same}"));
    }
    outcome(ok, notes.join(", "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient oracle", gradient_oracle),
        ("meta-gradient oracle", meta_gradient_oracle),
        ("closed-form loss fixtures", loss_fixtures),
        ("probability invariants", probability_invariants),
        ("baseline recovery", baseline_recovery),
        ("directional toy reproduction", directional_toy),
        ("uniformity behavior", uniformity_behavior),
        ("k-NN oracle equivalence", knn_oracle),
        ("CIFAR-10 loader fixtures", cifar_fixtures),
        ("reproducibility", reproducibility),
    ];
    let (mut passed, mut failures) = (0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let status = match o.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        passed += usize::from(o.passed == Some(true));
        failures += usize::from(o.passed == Some(false));
        println!("{status} [{}] {name}: {}", i + 1, o.detail);
    }
    println!("acceptance: {passed} of {} criteria passed", criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
