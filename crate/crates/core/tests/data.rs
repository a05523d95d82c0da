use iclmsr::data::{
    apply_view, generate_synthetic, parse_cifar10, read_dataset, write_dataset, ConfoundedSpec, View,
    CIFAR_RECORD_BYTES,
};
use iclmsr::eval::{linear_probe, Features, ProbeConfig};
use iclmsr::tensor::Tensor;

fn spec(rho: f64, per_class: usize) -> ConfoundedSpec {
    ConfoundedSpec {
        rho,
        train_per_class: per_class,
        test_per_class: per_class / 5,
        ..ConfoundedSpec::default()
    }
}

#[test]
fn confounding_rate_matches_rho() {
    for rho in [0.0, 0.5, 0.9] {
        let ds = generate_synthetic(&spec(rho, 300)).unwrap();
        let k = ds.spec.classes as f64;
        let hits = ds.train.iter().filter(|s| s.background == Some(s.label)).count();
        let rate = hits as f64 / ds.train.len() as f64;
        let expected = rho + (1.0 - rho) / k;
        assert!(
            (rate - expected).abs() <= 0.02,
            "rho {rho}: rate {rate}, expected {expected}"
        );
    }
}

#[test]
fn backgrounds_independent_of_labels_without_confounding() {
    let ds = generate_synthetic(&spec(0.0, 500)).unwrap();
    let k = ds.spec.classes;
    let mut table = vec![vec![0.0f64; k]; k];
    for s in &ds.train {
        table[s.label][s.background.unwrap()] += 1.0;
    }
    let n = ds.train.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let e = rows[i] * cols[j] / n;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // 0.999 quantile of chi-squared with 81 degrees of freedom
    assert!(chi2 < 126.08, "chi2 = {chi2}");
}

#[test]
fn foreground_view_fills_outside_mask() {
    let ds = generate_synthetic(&spec(0.9, 10)).unwrap();
    let fill = ds.fill_color();
    for s in ds.train.iter().take(20) {
        let fg = apply_view(s, View::Foreground, fill).unwrap();
        let mask = s.mask.as_ref().unwrap();
        for (p, &inside) in mask.iter().enumerate() {
            let px = &fg.data()[p * 3..p * 3 + 3];
            let orig = &s.image.data()[p * 3..p * 3 + 3];
            if inside {
                assert_eq!(px, orig);
            } else {
                assert_eq!(px, &fill);
            }
        }
        assert!(apply_view(s, View::Full, fill).unwrap().bit_eq(&s.image));
    }
}

/// 4×4 average-pooled pixels as probe features.
fn pooled(images: &[Tensor]) -> Features {
    let rows: Vec<Vec<f64>> = images
        .iter()
        .map(|im| {
            let s = im.shape()[0];
            let cell = s / 4;
            let mut f = vec![0.0; 48];
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        f[((y / cell) * 4 + x / cell) * 3 + c] += im.data()[(y * s + x) * 3 + c];
                    }
                }
            }
            f.iter().map(|v| v / (cell * cell) as f64).collect()
        })
        .collect();
    Features::from_rows(&rows)
}

#[test]
fn foreground_view_hides_the_background_id() {
    let ds = generate_synthetic(&spec(0.0, 100)).unwrap();
    let classes = ds.spec.classes;
    let bg_train: Vec<usize> = ds.train.iter().map(|s| s.background.unwrap()).collect();
    let bg_test: Vec<usize> = ds.test.iter().map(|s| s.background.unwrap()).collect();
    let probe = ProbeConfig {
        epochs: 100,
        ..ProbeConfig::default()
    };
    let acc = |view| {
        let tr = pooled(&ds.view_images(true, view).unwrap());
        let te = pooled(&ds.view_images(false, view).unwrap());
        linear_probe(&tr, &bg_train, &te, &bg_test, classes, &probe).unwrap()
    };
    let full = acc(View::Full);
    let fg = acc(View::Foreground);
    assert!(full > 0.9, "background id readable from full images: {full}");
    assert!(
        fg < 1.0 / classes as f64 + 0.08,
        "background id leaks into foreground view: {fg}"
    );
}

#[test]
fn dataset_file_roundtrip_is_bit_exact() {
    let ds = generate_synthetic(&spec(0.7, 5)).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &ds).unwrap();
    let back = read_dataset(&mut buf.as_slice()).unwrap();
    assert_eq!(back.train.len(), ds.train.len());
    for (a, b) in ds.train.iter().chain(&ds.test).zip(back.train.iter().chain(&back.test)) {
        assert!(a.image.bit_eq(&b.image));
        assert_eq!((a.label, a.background, &a.mask), (b.label, b.background, &b.mask));
    }
    assert_eq!(back.mean_color, ds.mean_color);
    assert!(read_dataset(&mut &buf[..buf.len() - 1]).is_err());
    assert!(read_dataset(&mut &b"NOTDATA1"[..]).is_err());
}

fn cifar_record(label: u8, seed: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..CIFAR_RECORD_BYTES - 1).map(|i| (i as u8).wrapping_mul(7).wrapping_add(seed)));
    r
}

#[test]
fn cifar_records_decode_bit_exactly() {
    let mut bytes = cifar_record(3, 0);
    bytes.extend(cifar_record(9, 11));
    let samples = parse_cifar10(&bytes).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!((samples[0].label, samples[1].label), (3, 9));
    for (k, s) in samples.iter().enumerate() {
        let rec = &bytes[k * CIFAR_RECORD_BYTES..(k + 1) * CIFAR_RECORD_BYTES];
        assert_eq!(s.image.shape(), &[32, 32, 3]);
        for c in 0..3 {
            for p in 0..1024 {
                assert_eq!(s.image.data()[p * 3 + c], rec[1 + c * 1024 + p] as f64 / 255.0);
            }
        }
        assert!(s.mask.is_none());
    }
}

#[test]
fn cifar_truncation_reports_offset() {
    let mut bytes = cifar_record(1, 0);
    bytes.extend(&cifar_record(2, 0)[..100]);
    let e = parse_cifar10(&bytes).unwrap_err().to_string();
    assert_eq!(e, "truncated record at byte offset 3073: 100 of 3073 bytes present");
}

#[test]
fn cifar_bad_label_reports_offset() {
    let mut bytes = cifar_record(1, 0);
    bytes.extend(cifar_record(12, 0));
    let e = parse_cifar10(&bytes).unwrap_err().to_string();
    assert_eq!(e, "label byte 12 at byte offset 3073 exceeds 9");
}

#[test]
fn cifar_loader_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data_batch_1.bin");
    std::fs::write(&p, &cifar_record(0, 0)[..10]).unwrap();
    let e = iclmsr::data::load_cifar10(&p).unwrap_err().to_string();
    assert!(e.contains("data_batch_1.bin") && e.contains("truncated"), "{e}");
    let ok = dir.path().join("ok.bin");
    std::fs::write(&ok, cifar_record(4, 1)).unwrap();
    assert_eq!(iclmsr::data::load_cifar10(&ok).unwrap()[0].label, 4);
}
