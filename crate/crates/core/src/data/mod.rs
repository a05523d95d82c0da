//! Image datasets: a synthetic generator whose backgrounds are correlated
//! with the class, a CIFAR-10 binary reader, and the view augmentation used
//! during pretraining.

mod augment;
mod cifar;
mod export;
mod glyph;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub use augment::{augment_image, augment_pair, AugmentConfig};
pub use cifar::{load_cifar10, parse_cifar10, CIFAR_RECORD_BYTES};
pub use export::{read_dataset, write_dataset, DATASET_MAGIC};

pub const CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),
    #[error("sample has no foreground mask")]
    MissingMask,
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What replaces background pixels in the foreground view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    Mean,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Full,
    Foreground,
}

impl View {
    pub const BOTH: [View; 2] = [View::Full, View::Foreground];

    pub fn name(self) -> &'static str {
        match self {
            View::Full => "full",
            View::Foreground => "foreground",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundedSpec {
    pub image_size: usize,
    pub classes: usize,
    /// Probability that a training sample's background id is forced to its
    /// class; otherwise the id is drawn uniformly over all `classes` ids.
    pub rho: f64,
    /// Confounding of the test partition; `None` reuses `rho`.
    pub rho_test: Option<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub fill: FillMode,
}

impl Default for ConfoundedSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: 10,
            rho: 0.9,
            rho_test: None,
            train_per_class: 500,
            test_per_class: 200,
            seed: 0,
            fill: FillMode::Mean,
        }
    }
}

impl ConfoundedSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let rho_test = self.rho_test.unwrap_or(self.rho);
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&rho_test) {
            return bad(format!("rho must lie in [0, 1], got {} / {}", self.rho, rho_test));
        }
        if self.classes < 2 {
            return bad(format!("at least 2 classes required, got {}", self.classes));
        }
        if self.image_size < 8 {
            return bad(format!("image size {} below minimum 8", self.image_size));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("partitions must be non-empty".into());
        }
        Ok(())
    }
}

/// One image in NHWC layout (`[S, S, 3]`) with optional synthetic metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// Row-major `S × S` foreground raster.
    pub mask: Option<Vec<bool>>,
    pub background: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfoundedDataset {
    pub spec: ConfoundedSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Per-channel mean over every training pixel.
    pub mean_color: [f64; CHANNELS],
}

impl ConfoundedDataset {
    pub fn fill_color(&self) -> [f64; CHANNELS] {
        match self.spec.fill {
            FillMode::Mean => self.mean_color,
            FillMode::Zero => [0.0; CHANNELS],
        }
    }

    pub fn view_images(&self, train: bool, view: View) -> Result<Vec<Tensor>, DataError> {
        let fill = self.fill_color();
        let part = if train { &self.train } else { &self.test };
        part.iter().map(|s| apply_view(s, view, fill)).collect()
    }
}

pub fn generate_synthetic(spec: &ConfoundedSpec) -> Result<ConfoundedDataset, DataError> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Data);
    let train = partition(spec, spec.train_per_class, spec.rho, &mut rng);
    let mut rng = stream(spec.seed, Stream::DataTest);
    let test = partition(spec, spec.test_per_class, spec.rho_test.unwrap_or(spec.rho), &mut rng);
    let mean_color = mean_color(&train);
    Ok(ConfoundedDataset {
        spec: spec.clone(),
        train,
        test,
        mean_color,
    })
}

fn partition(spec: &ConfoundedSpec, per_class: usize, rho: f64, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..per_class * spec.classes)
        .map(|i| {
            let label = i % spec.classes;
            let background = if rng.gen::<f64>() < rho {
                label
            } else {
                rng.gen_range(0..spec.classes)
            };
            glyph::render(spec.image_size, spec.classes, label, background, rng)
        })
        .collect()
}

fn mean_color(samples: &[Sample]) -> [f64; CHANNELS] {
    let mut acc = [0.0; CHANNELS];
    let mut count = 0usize;
    for s in samples {
        for px in s.image.data().chunks_exact(CHANNELS) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
            count += 1;
        }
    }
    acc.map(|a| a / count.max(1) as f64)
}

/// The full image, or the image with every background pixel set to `fill`.
pub fn apply_view(sample: &Sample, view: View, fill: [f64; CHANNELS]) -> Result<Tensor, DataError> {
    match view {
        View::Full => Ok(sample.image.clone()),
        View::Foreground => {
            let mask = sample.mask.as_ref().ok_or(DataError::MissingMask)?;
            let mut data = sample.image.data().to_vec();
            for (px, &fg) in data.chunks_exact_mut(CHANNELS).zip(mask) {
                if !fg {
                    px.copy_from_slice(&fill);
                }
            }
            Ok(Tensor::new(sample.image.shape().to_vec(), data).expect("finite pixels"))
        }
    }
}

/// Stacks `[S, S, C]` images into a `[B, S, S, C]` batch.
pub fn stack(images: &[&Tensor]) -> Tensor {
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for im in images {
        assert_eq!(im.shape(), shape, "stacked images must share a shape");
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("finite images")
}
