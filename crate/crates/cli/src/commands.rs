use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use iclmsr::data::{
    apply_view, generate_synthetic, load_cifar10, read_dataset, write_dataset, ConfoundedDataset, DataError, Sample,
    View,
};
use iclmsr::eval::{
    extract_features, knn_classify, linear_probe, run_four_settings, EvalError, FourSettingConfig, FourSettingReport,
    Method, SettingResult, CSV_HEADER,
};
use iclmsr::nn::{init_params, read_checkpoint, write_checkpoint, ModelBundle};
use iclmsr::tensor::{inject_exp_sign_fault, Tensor, TensorError};
use iclmsr::train::{TrainError, Trainer};
use iclmsr::verify;
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::output::{write_atomic, write_json, JsonLines};
use crate::{RunArgs, VerifyArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Verification(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Numeric(m) => write!(f, "numeric: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Runtime(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::NonFiniteData(_) => CliError::Numeric(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            TrainError::Config(_) | TrainError::DatasetTooSmall { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Tensor(t) => t.into(),
            EvalError::Config(_)
            | EvalError::KTooLarge { .. }
            | EvalError::LabelRange { .. }
            | EvalError::Dataset(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Config file, then overrides, then command-line flags.
pub fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if args.deterministic {
        cfg.training.deterministic = true;
    }
    let cfg = cfg.with_seed(cfg.seed);
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// One resolved config and output directory per requested seed.
fn per_seed(args: &RunArgs, cfg: &RunConfig) -> Vec<(RunConfig, PathBuf)> {
    match &args.seeds {
        None => vec![(cfg.clone(), cfg.out.clone())],
        Some(seeds) => seeds
            .iter()
            .map(|&s| {
                let mut c = cfg.with_seed(s);
                c.out = cfg.out.join(format!("seed-{s}"));
                let dir = c.out.clone();
                (c, dir)
            })
            .collect(),
    }
}

enum Loaded {
    Confounded(ConfoundedDataset),
    Plain { train: Vec<Sample>, test: Vec<Sample> },
}

fn load_batches(list: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.extend(load_cifar10(p)?);
    }
    Ok(out)
}

fn load_data(cfg: &RunConfig) -> Result<Loaded> {
    Ok(match cfg.source {
        DataSource::Synthetic => Loaded::Confounded(generate_synthetic(&cfg.data)?),
        DataSource::File => {
            let mut f =
                fs::File::open(&cfg.path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", cfg.path)))?;
            Loaded::Confounded(read_dataset(&mut std::io::BufReader::new(&mut f))?)
        }
        DataSource::Cifar => Loaded::Plain {
            train: load_batches(&cfg.path)?,
            test: load_batches(&cfg.test_path)?,
        },
    })
}

impl Loaded {
    fn images(&self, train: bool, view: View) -> Result<Vec<Tensor>> {
        match self {
            Loaded::Confounded(ds) => Ok(ds.view_images(train, view)?),
            Loaded::Plain { train: tr, test } => {
                let samples = if train { tr } else { test };
                match view {
                    View::Full => Ok(samples.iter().map(|s| s.image.clone()).collect()),
                    View::Foreground => samples
                        .iter()
                        .map(|s| apply_view(s, view, [0.0; 3]).map_err(CliError::from))
                        .collect(),
                }
            }
        }
    }

    fn labels(&self, train: bool) -> Vec<usize> {
        let samples = match self {
            Loaded::Confounded(ds) => {
                if train {
                    &ds.train
                } else {
                    &ds.test
                }
            }
            Loaded::Plain { train: tr, test } => {
                if train {
                    tr
                } else {
                    test
                }
            }
        };
        samples.iter().map(|s| s.label).collect()
    }

    fn has_masks(&self) -> bool {
        matches!(self, Loaded::Confounded(_))
    }

    fn classes(&self) -> usize {
        match self {
            Loaded::Confounded(ds) => ds.spec.classes,
            Loaded::Plain { .. } => 10,
        }
    }
}

fn checkpoint_to(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, bundle).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<()> {
    let base = resolve(args)?;
    for (cfg, dir) in per_seed(args, &base) {
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.cfg"), cfg.echo().as_bytes())?;
        let data = load_data(&cfg)?;
        let images = data.images(true, cfg.view)?;
        let bundle = init_params(cfg.training.seed, &cfg.model).map_err(|e| CliError::Config(e.to_string()))?;
        let mut trainer = Trainer::new(cfg.training.clone(), bundle)?;
        let mut log = JsonLines::default();
        let mut outcome = Ok(());
        for epoch in 1..=cfg.training.epochs {
            if let Err(e) = trainer.run_epoch(&images, &cfg.augment, &mut |r| log.push(r)) {
                outcome = Err(e);
                break;
            }
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint_to(&dir.join(format!("checkpoint-epoch{epoch:04}.ckpt")), &trainer.bundle)?;
            }
        }
        // the log up to an abort is still useful for diagnosis
        log.write(&dir.join("metrics.jsonl"))?;
        outcome?;
        checkpoint_to(&dir.join("model.ckpt"), &trainer.bundle)?;
        println!(
            "{}: {} epochs, outputs in {}",
            cfg.seed,
            cfg.training.epochs,
            dir.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    train_view: View,
    settings: Vec<SettingResult>,
}

pub fn eval(args: &RunArgs) -> Result<()> {
    let base = resolve(args)?;
    for (cfg, dir) in per_seed(args, &base) {
        if cfg.checkpoint.is_empty() {
            return Err(CliError::Config("run.checkpoint is required for eval".into()));
        }
        let mut f = fs::File::open(&cfg.checkpoint)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", cfg.checkpoint)))?;
        let bundle =
            read_checkpoint(&mut std::io::BufReader::new(&mut f)).map_err(|e| CliError::Runtime(e.to_string()))?;
        let data = load_data(&cfg)?;
        let train_feats = extract_features(&bundle, &data.images(true, cfg.view)?, cfg.features, 256)?;
        let train_labels = data.labels(true);
        let test_labels = data.labels(false);
        let views: &[View] = if data.has_masks() { &View::BOTH } else { &[View::Full] };
        let mut settings = Vec::new();
        for &test_view in views {
            let test_feats = extract_features(&bundle, &data.images(false, test_view)?, cfg.features, 256)?;
            let probe = linear_probe(
                &train_feats,
                &train_labels,
                &test_feats,
                &test_labels,
                data.classes(),
                &cfg.probe,
            )?;
            let knn = knn_classify(&train_feats, &train_labels, &test_feats, &test_labels, cfg.knn_k)?;
            println!(
                "{} -> {}: probe {probe:.4} knn {knn:.4}",
                cfg.view.name(),
                test_view.name()
            );
            settings.push(SettingResult {
                train_view: cfg.view,
                test_view,
                probe,
                knn,
            });
        }
        write_json(
            &dir.join("eval.json"),
            &EvalReport {
                checkpoint: cfg.checkpoint.clone(),
                train_view: cfg.view,
                settings,
            },
        )?;
    }
    Ok(())
}

fn four_config(cfg: &RunConfig) -> FourSettingConfig {
    FourSettingConfig {
        model: cfg.model.clone(),
        training: cfg.training.clone(),
        augment: cfg.augment.clone(),
        probe: cfg.probe.clone(),
        knn_k: cfg.knn_k,
        features: cfg.features,
    }
}

/// Runs both views of `method`, writing reports and per-view metric logs
/// into `dir`.
fn toy_method(cfg: &RunConfig, ds: &ConfoundedDataset, method: Method, dir: &Path) -> Result<FourSettingReport> {
    let mut logs = [JsonLines::default(), JsonLines::default()];
    let result = run_four_settings(&four_config(cfg), ds, method, &mut |v, r| {
        logs[usize::from(v == View::Foreground)].push(r)
    });
    for (v, log) in View::BOTH.iter().zip(&logs) {
        if !log.is_empty() {
            log.write(&dir.join(format!("metrics-{}-{}.jsonl", method.name(), v.name())))?;
        }
    }
    let report = result?;
    write_json(&dir.join(format!("report-{}.json", method.name())), &report)?;
    Ok(report)
}

fn write_csv(path: &Path, reports: &[&FourSettingReport]) -> Result<()> {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn confounded(cfg: &RunConfig) -> Result<ConfoundedDataset> {
    match load_data(cfg)? {
        Loaded::Confounded(ds) => Ok(ds),
        Loaded::Plain { .. } => Err(CliError::Config("toy needs a dataset with foreground masks".into())),
    }
}

/// Outcome of the directional comparison on seed-averaged reports.
#[derive(Clone, Debug, Serialize)]
pub struct DirectionalCheck {
    pub name: &'static str,
    pub value: f64,
    pub passed: bool,
}

/// Minimum full-image gap of the baseline.
pub const MIN_BASELINE_GAP: f64 = 0.03;
/// Largest null-control gap magnitude.
pub const NULL_GAP_BAND: f64 = 0.03;

/// Linear-probe comparisons of the full-image-trained models.
pub fn directional_checks(
    base: &FourSettingReport,
    icl: &FourSettingReport,
    null: Option<&FourSettingReport>,
) -> Vec<DirectionalCheck> {
    let gap_base = base.gap(View::Full).probe;
    let gap_icl = icl.gap(View::Full).probe;
    let fg_base = base.setting(View::Full, View::Foreground).probe;
    let fg_icl = icl.setting(View::Full, View::Foreground).probe;
    let mut out = vec![
        DirectionalCheck {
            name: "baseline_gap",
            value: gap_base,
            passed: gap_base >= MIN_BASELINE_GAP,
        },
        DirectionalCheck {
            name: "gap_reduction",
            value: gap_base - gap_icl,
            passed: gap_icl < gap_base,
        },
        DirectionalCheck {
            name: "foreground_gain",
            value: fg_icl - fg_base,
            passed: fg_icl > fg_base,
        },
    ];
    if let Some(n) = null {
        let g = n.gap(View::Full).probe;
        out.push(DirectionalCheck {
            name: "null_control_gap",
            value: g,
            passed: g.abs() <= NULL_GAP_BAND,
        });
    }
    out
}

pub fn toy(args: &RunArgs) -> Result<()> {
    let base_cfg = resolve(args)?;
    let mut by_method: [Vec<FourSettingReport>; 2] = [Vec::new(), Vec::new()];
    let mut nulls = Vec::new();
    for (cfg, dir) in per_seed(args, &base_cfg) {
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.cfg"), cfg.echo().as_bytes())?;
        let ds = confounded(&cfg)?;
        let mut reports = Vec::new();
        for (slot, method) in Method::BOTH.into_iter().enumerate() {
            let r = toy_method(&cfg, &ds, method, &dir)?;
            for s in &r.settings {
                println!(
                    "seed {} {} {} -> {}: probe {:.4} knn {:.4}",
                    cfg.seed,
                    method.name(),
                    s.train_view.name(),
                    s.test_view.name(),
                    s.probe,
                    s.knn
                );
            }
            by_method[slot].push(r.clone());
            reports.push(r);
        }
        write_csv(&dir.join("report.csv"), &reports.iter().collect::<Vec<_>>())?;
        if args.check {
            let mut null_cfg = cfg.clone();
            null_cfg.data.rho = 0.0;
            null_cfg.data.rho_test = None;
            let null_dir = dir.join("null");
            fs::create_dir_all(&null_dir)?;
            let ds = confounded(&null_cfg)?;
            nulls.push(toy_method(&null_cfg, &ds, Method::Baseline, &null_dir)?);
        }
    }
    let base = FourSettingReport::mean(&by_method[0]).expect("at least one seed");
    let icl = FourSettingReport::mean(&by_method[1]).expect("at least one seed");
    if args.seeds.is_some() {
        write_json(&base_cfg.out.join("mean-baseline.json"), &base)?;
        write_json(&base_cfg.out.join("mean-icl_msr.json"), &icl)?;
        write_csv(&base_cfg.out.join("mean.csv"), &[&base, &icl])?;
    }
    if args.check {
        let null = FourSettingReport::mean(&nulls);
        let checks = directional_checks(&base, &icl, null.as_ref());
        write_json(&base_cfg.out.join("check.json"), &checks)?;
        for c in &checks {
            println!("{} {} {:.4}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value);
        }
        if let Some(c) = checks.iter().find(|c| !c.passed) {
            return Err(CliError::Verification(c.name.to_string()));
        }
    }
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    inject_exp_sign_fault(args.inject_exp_fault);
    let report = verify::run_all(args.seed);
    inject_exp_sign_fault(false);
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        match (c.max_rel_err, c.tolerance) {
            (Some(e), Some(t)) => println!("{status} {:<34} max rel err {e:.3e} (tol {t:.0e}) {}", c.name, c.detail),
            _ => println!("{status} {:<34} {} instances {}", c.name, c.instances, c.detail),
        }
    }
    if let Some(out) = &args.out {
        write_json(&out.join("verify.json"), &report)?;
    }
    match report.first_failure() {
        Some(c) => Err(CliError::Verification(c.name.clone())),
        None => Ok(()),
    }
}

pub fn gen_data(args: &RunArgs) -> Result<()> {
    let base = resolve(args)?;
    for (cfg, dir) in per_seed(args, &base) {
        let ds = generate_synthetic(&cfg.data)?;
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds)?;
        let path = dir.join("dataset.bin");
        write_atomic(&path, &buf)?;
        write_atomic(&dir.join("config.cfg"), cfg.echo().as_bytes())?;
        println!(
            "{} train / {} test samples written to {}",
            ds.train.len(),
            ds.test.len(),
            path.display()
        );
    }
    Ok(())
}
