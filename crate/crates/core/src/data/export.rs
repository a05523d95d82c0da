//! Binary snapshot of a generated dataset.
//!
//! Little-endian: magic, `K`, image size, per-class train/test counts,
//! `rho`, `rho_test`, seed, fill mode byte; then every train and test sample
//! as label, background id, `S·S` mask bytes and `S·S·3` pixel values.

use std::io::{Read, Write};

use super::{mean_color, ConfoundedDataset, ConfoundedSpec, DataError, FillMode, Sample, CHANNELS};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"ICLDATA1";

pub fn write_dataset(w: &mut impl Write, ds: &ConfoundedDataset) -> Result<(), DataError> {
    let s = &ds.spec;
    w.write_all(DATASET_MAGIC)?;
    for v in [s.classes, s.image_size, s.train_per_class, s.test_per_class] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&s.rho.to_le_bytes())?;
    w.write_all(&s.rho_test.unwrap_or(s.rho).to_le_bytes())?;
    w.write_all(&s.seed.to_le_bytes())?;
    w.write_all(&[matches!(s.fill, FillMode::Zero) as u8])?;
    for sample in ds.train.iter().chain(&ds.test) {
        w.write_all(&(sample.label as u32).to_le_bytes())?;
        w.write_all(&(sample.background.unwrap_or(0) as u32).to_le_bytes())?;
        let mask = sample.mask.as_ref().ok_or(DataError::MissingMask)?;
        let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        w.write_all(&bytes)?;
        for v in sample.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    pos: usize,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| DataError::Format(format!("dataset truncated at byte {}", self.pos)))?;
        self.pos += N;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn read_dataset(r: &mut impl Read) -> Result<ConfoundedDataset, DataError> {
    let mut c = Cursor { inner: r, pos: 0 };
    if &c.take::<8>()? != DATASET_MAGIC {
        return Err(DataError::Format("bad dataset magic".into()));
    }
    let classes = c.u32()?;
    let image_size = c.u32()?;
    let train_per_class = c.u32()?;
    let test_per_class = c.u32()?;
    let rho = c.f64()?;
    let rho_test = c.f64()?;
    let seed = u64::from_le_bytes(c.take()?);
    let fill = if c.take::<1>()?[0] == 1 {
        FillMode::Zero
    } else {
        FillMode::Mean
    };
    let spec = ConfoundedSpec {
        image_size,
        classes,
        rho,
        rho_test: Some(rho_test),
        train_per_class,
        test_per_class,
        seed,
        fill,
    };
    spec.validate()?;
    let pixels = image_size * image_size;
    let mut read_part = |count: usize| -> Result<Vec<Sample>, DataError> {
        (0..count)
            .map(|_| {
                let label = c.u32()?;
                let background = c.u32()?;
                if label >= classes || background >= classes {
                    return Err(DataError::Format(format!("label out of range near byte {}", c.pos)));
                }
                let mut mask = Vec::with_capacity(pixels);
                for _ in 0..pixels {
                    mask.push(c.take::<1>()?[0] != 0);
                }
                let data = (0..pixels * CHANNELS).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
                let image = Tensor::new(vec![image_size, image_size, CHANNELS], data)
                    .map_err(|e| DataError::Format(e.to_string()))?;
                Ok(Sample {
                    image,
                    label,
                    mask: Some(mask),
                    background: Some(background),
                })
            })
            .collect()
    };
    let train = read_part(train_per_class * classes)?;
    let test = read_part(test_per_class * classes)?;
    let mean_color = mean_color(&train);
    Ok(ConfoundedDataset {
        spec,
        train,
        test,
        mean_color,
    })
}
