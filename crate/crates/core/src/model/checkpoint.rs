//! Binary checkpoint format.
//!
//! ```text
//! b"CSYMCKPT" | u32 version | u64 header length | JSON header | tensors
//! ```
//!
//! Tensors follow in header order as raw little-endian scalars: every
//! trainable tensor, then the batch-norm running statistics. Encoding is
//! deterministic, so save -> load -> save reproduces the file bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::atomic_write;
use crate::error::{Error, Result};
use crate::model::network::{EffectModel, HeadMode};
use crate::model::ModelConfig;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CSYMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub head: HeadMode,
    pub step: u64,
    pub config_hash: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &EffectModel<T>, config_hash: &str) -> Vec<u8> {
    let mut tensors: Vec<TensorEntry> = model
        .params()
        .named_tensors()
        .into_iter()
        .map(|(name, shape, _)| TensorEntry { name, shape })
        .collect();
    tensors.extend(model.named_buffers().into_iter().map(|(name, v)| TensorEntry {
        name,
        shape: vec![v.len()],
    }));
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        head: model.head(),
        step: model.step(),
        config_hash: config_hash.to_string(),
        config: model.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + json.len() + model.params().count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, values) in model.params().named_tensors() {
        values.iter().for_each(|v| v.write_le(&mut out));
    }
    for (_, values) in model.named_buffers() {
        values.iter().for_each(|v| v.write_le(&mut out));
    }
    out
}

/// Decode only the header.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let fail = |m: &str| Error::format("checkpoint", m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| fail("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::format("checkpoint", e))?;
    Ok((header, end))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(EffectModel<T>, CheckpointHeader)> {
    let (header, mut offset) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            "checkpoint",
            format!("stored dtype {} cannot load as {}", header.dtype, T::DTYPE),
        ));
    }
    let mut model = EffectModel::<T>::new(header.config.clone(), header.head, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .chain(model.named_buffers().into_iter().map(|(n, v)| (n, vec![v.len()])))
        .collect();
    let layout_matches = expected.len() == header.tensors.len()
        && expected
            .iter()
            .zip(&header.tensors)
            .all(|((n, s), e)| *n == e.name && *s == e.shape);
    if !layout_matches {
        return Err(Error::format("checkpoint", "tensor layout does not match the stored config"));
    }
    let mut take = |dst: &mut [T]| -> Result<()> {
        let need = dst.len() * T::BYTES;
        if offset + need > bytes.len() {
            return Err(Error::format("checkpoint", "truncated tensor data"));
        }
        for (i, v) in dst.iter_mut().enumerate() {
            let at = offset + i * T::BYTES;
            *v = T::read_le(&bytes[at..at + T::BYTES]);
        }
        offset += need;
        Ok(())
    };
    for t in model.params_mut().tensors_mut() {
        take(t)?;
    }
    for b in model.buffers_mut() {
        take(b)?;
    }
    if offset != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    if model.object_stats().var.iter().chain(&model.action_stats().var).any(|v| *v < T::zero()) {
        return Err(Error::format("checkpoint", "negative running variance"));
    }
    model.step = header.step;
    Ok((model, header))
}

pub fn save<T: Scalar>(model: &EffectModel<T>, config_hash: &str, path: &Path) -> Result<()> {
    atomic_write(path, &to_bytes(model, config_hash))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<(EffectModel<T>, CheckpointHeader)> {
    from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::network::Mode;
    use crate::model::Matrix;

    fn trained_ish<T: Scalar>() -> EffectModel<T> {
        let cfg = ModelConfig {
            hidden_width: 8,
            ..ModelConfig::default()
        };
        let mut m = EffectModel::<T>::new(cfg, HeadMode::Distribution, 11).unwrap();
        m.object_stats_mut().mean[2] = T::of(0.043);
        m.action_stats_mut().var[5] = T::of(0.0007);
        m.step = 42;
        m
    }

    fn roundtrip<T: Scalar>() {
        let m = trained_ish::<T>();
        let bytes = to_bytes(&m, "cafe");
        let (back, header) = from_bytes::<T>(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.config_hash, "cafe");
        assert_eq!(to_bytes(&back, "cafe"), bytes);
        let o = Matrix::<T>::from_rows(&[[0.03, 0.05, 0.04, 1.0]]);
        let a = Matrix::<T>::from_rows(&[[0.01; 12]]);
        assert_eq!(m.forward(&o, &a, Mode::Eval, None), back.forward(&o, &a, Mode::Eval, None));
    }

    #[test]
    fn roundtrip_f32() {
        roundtrip::<f32>();
    }

    #[test]
    fn roundtrip_f64() {
        roundtrip::<f64>();
    }

    #[test]
    fn dtype_and_corruption_are_rejected() {
        let bytes = to_bytes(&trained_ish::<f32>(), "h");
        assert!(from_bytes::<f64>(&bytes).is_err());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
    }

    #[test]
    fn file_roundtrip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        assert!(matches!(load::<f32>(&p), Err(Error::MissingArtifact(_))));
        let m = trained_ish::<f32>();
        save(&m, "h", &p).unwrap();
        let (back, _) = load::<f32>(&p).unwrap();
        save(&back, "h", &dir.path().join("n.ckpt")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("n.ckpt")).unwrap());
    }
}
