//! CIFAR-10 binary batches: 1 label byte, then three 32×32 channel planes.

use std::path::Path;

use super::{DataError, Sample, CHANNELS};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + CHANNELS * PLANE;

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes).map_err(|e| match e {
        DataError::Format(m) => DataError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Decodes records into NHWC samples scaled to `[0, 1]`; no masks.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Sample>, DataError> {
    let rem = bytes.len() % CIFAR_RECORD_BYTES;
    if rem != 0 || bytes.is_empty() {
        let offset = bytes.len() - rem;
        return Err(DataError::Format(format!(
            "truncated record at byte offset {offset}: {rem} of {CIFAR_RECORD_BYTES} bytes present"
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(r, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(DataError::Format(format!(
                    "label byte {label} at byte offset {} exceeds 9",
                    r * CIFAR_RECORD_BYTES
                )));
            }
            let planes = &rec[1..];
            let mut data = vec![0.0; PLANE * CHANNELS];
            for c in 0..CHANNELS {
                for (p, &v) in planes[c * PLANE..(c + 1) * PLANE].iter().enumerate() {
                    data[p * CHANNELS + c] = v as f64 / 255.0;
                }
            }
            Ok(Sample {
                image: Tensor::new(vec![SIDE, SIDE, CHANNELS], data).expect("finite pixels"),
                label,
                mask: None,
                background: None,
            })
        })
        .collect()
}
