//! Little-endian parameter checkpoints.
//!
//! Layout: the 8-byte magic `ICLMSR01`, a `u32` byte length followed by the
//! model configuration as JSON, then tensors until end of file, each as
//! `u32` name length, UTF-8 name, `u32` rank, `u64` extents and raw `f64`
//! values.

use std::io::{self, Read, Write};

use super::{ModelBundle, ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ICLMSR01";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_checkpoint(w: &mut impl Write, bundle: &ModelBundle) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let config = serde_json::to_vec(&bundle.config).expect("config serializes");
    write_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    for set in [&bundle.encoder, &bundle.projection, &bundle.msr] {
        for (name, t) in set.names.iter().zip(&set.tensors) {
            write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.rank() as u32)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelBundle, CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = c.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(c.take(len)?).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let mut sets = [ParamSet::default(), ParamSet::default(), ParamSet::default()];
    while c.pos < buf.len() {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let data = c
            .take(count * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        let slot = match name.split('.').next() {
            Some("encoder") => 0,
            Some("projection") => 1,
            Some("msr") => 2,
            _ => return Err(CheckpointError::Malformed(format!("unknown tensor {name}"))),
        };
        sets[slot].names.push(name);
        sets[slot].tensors.push(t);
    }
    let [encoder, projection, msr] = sets;
    let expected = super::init_params(0, &config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    for (got, want) in [
        (&encoder, &expected.encoder),
        (&projection, &expected.projection),
        (&msr, &expected.msr),
    ] {
        let shapes_match = got.names == want.names
            && got
                .tensors
                .iter()
                .zip(&want.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(CheckpointError::Malformed(
                "tensor set does not match the stored configuration".into(),
            ));
        }
    }
    Ok(ModelBundle {
        config,
        encoder,
        projection,
        msr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            image_size: 8,
            encoder_channels: vec![4, 4],
            msr_channels: vec![3],
            projection_hidden: 5,
            projection_dim: 3,
            semantic_vectors: 2,
            ..ModelConfig::default()
        };
        let bundle = init_params(42, &cfg).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &bundle).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert!(back.encoder.bit_eq(&bundle.encoder));
        assert!(back.msr.bit_eq(&bundle.msr));
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bundle = init_params(1, &ModelConfig::default()).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &bundle).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_checkpoint(&mut &cut[..]),
            Err(CheckpointError::Malformed(_))
        ));
    }
}
