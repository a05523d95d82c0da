use serde::{Deserialize, Serialize};

use super::{extract_features, knn_classify, linear_probe, EvalError, ProbeConfig, ProbeFeatures, Result};
use crate::data::{AugmentConfig, ConfoundedDataset, View};
use crate::nn::{init_params, ModelConfig};
use crate::train::{train, StepRecord, TrainingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Contrastive loss only (`λ = γ = 0`).
    Baseline,
    /// Contrastive loss with the semantic regularizer and meta stage.
    IclMsr,
}

impl Method {
    pub const BOTH: [Method; 2] = [Method::Baseline, Method::IclMsr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::IclMsr => "icl_msr",
        }
    }

    pub fn training(self, base: &TrainingConfig) -> TrainingConfig {
        match self {
            Method::Baseline => TrainingConfig {
                lambda: 0.0,
                gamma: 0.0,
                ..base.clone()
            },
            Method::IclMsr => base.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourSettingConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub augment: AugmentConfig,
    pub probe: ProbeConfig,
    pub knn_k: usize,
    pub features: ProbeFeatures,
}

impl Default for FourSettingConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
            knn_k: 5,
            features: ProbeFeatures::Encoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub train_view: View,
    pub test_view: View,
    pub probe: f64,
    pub knn: f64,
}

/// `acc(test full) − acc(test foreground)` for one training view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub train_view: View,
    pub probe: f64,
    pub knn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourSettingReport {
    pub method: Method,
    pub seed: u64,
    pub rho: f64,
    pub settings: Vec<SettingResult>,
    pub gaps: Vec<Gap>,
}

pub const CSV_HEADER: &str = "method,seed,rho,train_view,test_view,probe_acc,knn_acc";

impl FourSettingReport {
    pub fn setting(&self, train_view: View, test_view: View) -> &SettingResult {
        self.settings
            .iter()
            .find(|s| s.train_view == train_view && s.test_view == test_view)
            .expect("all four settings present")
    }

    pub fn gap(&self, train_view: View) -> &Gap {
        self.gaps
            .iter()
            .find(|g| g.train_view == train_view)
            .expect("gap per train view")
    }

    /// One CSV row per setting, without header.
    pub fn csv_rows(&self) -> String {
        self.settings
            .iter()
            .map(|s| {
                format!(
                    "{},{},{},{},{},{},{}\n",
                    self.method.name(),
                    self.seed,
                    self.rho,
                    s.train_view.name(),
                    s.test_view.name(),
                    s.probe,
                    s.knn
                )
            })
            .collect()
    }

    fn with_gaps(method: Method, seed: u64, rho: f64, settings: Vec<SettingResult>) -> Self {
        let mut r = Self {
            method,
            seed,
            rho,
            settings,
            gaps: Vec::new(),
        };
        r.gaps = View::BOTH
            .iter()
            .map(|&v| {
                let full = r.setting(v, View::Full);
                let fg = r.setting(v, View::Foreground);
                Gap {
                    train_view: v,
                    probe: full.probe - fg.probe,
                    knn: full.knn - fg.knn,
                }
            })
            .collect();
        r
    }

    /// Element-wise mean of reports from several seeds (seed field = 0).
    pub fn mean(reports: &[FourSettingReport]) -> Option<FourSettingReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let settings = first
            .settings
            .iter()
            .map(|s| {
                let (mut p, mut k) = (0.0, 0.0);
                for r in reports {
                    let o = r.setting(s.train_view, s.test_view);
                    p += o.probe;
                    k += o.knn;
                }
                SettingResult {
                    probe: p / n,
                    knn: k / n,
                    ..s.clone()
                }
            })
            .collect();
        Some(Self::with_gaps(first.method, 0, first.rho, settings))
    }
}

/// Pretrains one model per training view with `method` (parameters seeded
/// by `config.training.seed`), then probes each model on both test views.
pub fn run_four_settings(
    config: &FourSettingConfig,
    dataset: &ConfoundedDataset,
    method: Method,
    sink: &mut dyn FnMut(View, &StepRecord),
) -> Result<FourSettingReport> {
    if dataset.train.iter().chain(&dataset.test).any(|s| s.mask.is_none()) {
        return Err(EvalError::Dataset("four-setting runs need foreground masks".into()));
    }
    let training = method.training(&config.training);
    let classes = dataset.spec.classes;
    let train_labels: Vec<usize> = dataset.train.iter().map(|s| s.label).collect();
    let test_labels: Vec<usize> = dataset.test.iter().map(|s| s.label).collect();
    let test_views = [
        dataset
            .view_images(false, View::Full)
            .map_err(|e| EvalError::Dataset(e.to_string()))?,
        dataset
            .view_images(false, View::Foreground)
            .map_err(|e| EvalError::Dataset(e.to_string()))?,
    ];

    let mut settings = Vec::new();
    for train_view in View::BOTH {
        let images = dataset
            .view_images(true, train_view)
            .map_err(|e| EvalError::Dataset(e.to_string()))?;
        let bundle = init_params(training.seed, &config.model).map_err(|e| EvalError::Config(e.to_string()))?;
        let bundle = train(&training, bundle, &images, &config.augment, &mut |r| {
            sink(train_view, r)
        })?;
        let train_feats = extract_features(&bundle, &images, config.features, 256)?;
        for (test_view, imgs) in View::BOTH.into_iter().zip(&test_views) {
            let test_feats = extract_features(&bundle, imgs, config.features, 256)?;
            let probe = linear_probe(
                &train_feats,
                &train_labels,
                &test_feats,
                &test_labels,
                classes,
                &config.probe,
            )?;
            let knn = knn_classify(&train_feats, &train_labels, &test_feats, &test_labels, config.knn_k)?;
            settings.push(SettingResult {
                train_view,
                test_view,
                probe,
                knn,
            });
        }
    }
    Ok(FourSettingReport::with_gaps(
        method,
        training.seed,
        dataset.spec.rho,
        settings,
    ))
}
