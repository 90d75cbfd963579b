//! Binary network checkpoints.
//!
//! ```text
//! "DBNM"                     4 bytes magic
//! version                    u32 = 1
//! layer count                u32
//! per layer:
//!   fan_out, fan_in          u32, u32
//!   activation tag           u8: 0 = scaled tanh, 1 = rectified, 2 = identity
//!   weights                  fan_out * fan_in f64, row-major
//!   bias                     fan_out f64
//! ```
//!
//! Integers and floats are little-endian; floats are raw IEEE-754 bits so a
//! save/load round trip is bitwise exact.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::nn::{Activation, DenseLayer, NetworkParams, NnError};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 4] = *b"DBNM";
pub const VERSION: u32 = 1;

const TAG_SCALED_TANH: u8 = 0;
const TAG_RECTIFIED: u8 = 1;
const TAG_IDENTITY: u8 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"DBNM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint length is inconsistent with its header")]
    CorruptLength,
    #[error("unknown activation tag {0}")]
    BadActivationTag(u8),
    #[error("scaled tanh with non-standard constants cannot be stored")]
    UnsupportedActivation,
    #[error("checkpoint describes an invalid network: {0}")]
    InvalidNetwork(#[from] NnError),
}

fn tag_of(activation: Activation) -> Result<u8, CheckpointError> {
    match activation {
        a if a == Activation::scaled_tanh() => Ok(TAG_SCALED_TANH),
        Activation::ScaledTanh { .. } => Err(CheckpointError::UnsupportedActivation),
        Activation::Rectified => Ok(TAG_RECTIFIED),
        Activation::Identity => Ok(TAG_IDENTITY),
    }
}

fn activation_of(tag: u8) -> Result<Activation, CheckpointError> {
    match tag {
        TAG_SCALED_TANH => Ok(Activation::scaled_tanh()),
        TAG_RECTIFIED => Ok(Activation::Rectified),
        TAG_IDENTITY => Ok(Activation::Identity),
        other => Err(CheckpointError::BadActivationTag(other)),
    }
}

pub fn encode(params: &NetworkParams) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers().len() as u32).to_le_bytes());
    for layer in params.layers() {
        out.extend_from_slice(&(layer.fan_out() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.fan_in() as u32).to_le_bytes());
        out.push(tag_of(layer.activation)?);
        for v in layer.weights.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::CorruptLength)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::CorruptLength)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, CheckpointError> {
        let len = count.checked_mul(8).ok_or(CheckpointError::CorruptLength)?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkParams, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let fan_out = r.u32()? as usize;
        let fan_in = r.u32()? as usize;
        let activation = activation_of(r.take(1)?[0])?;
        let n_weights = fan_out.checked_mul(fan_in).ok_or(CheckpointError::CorruptLength)?;
        let weights = r.f64s(n_weights)?;
        let bias = r.f64s(fan_out)?;
        let weights = Matrix::from_vec(fan_out, fan_in, weights).map_err(NnError::from)?;
        layers.push(DenseLayer::new(weights, bias, activation)?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::CorruptLength);
    }
    Ok(NetworkParams::new(layers)?)
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn net(sizes: &[usize], seed: u64) -> NetworkParams {
        NetworkParams::uniform(&mut Rng::new(seed), sizes, -1.0, 1.0, Activation::scaled_tanh()).unwrap()
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dbnm");
        let params = net(&[4, 5, 3], 1);
        save_checkpoint(&params, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bitwise_eq(&params));
    }

    #[test]
    fn round_trip_edge_shapes() {
        let mut mixed = net(&[1, 1], 2);
        mixed = NetworkParams::new(vec![
            mixed.layers()[0].clone(),
            DenseLayer::new(Matrix::from_rows(&[[-0.0]]).unwrap(), vec![f64::MIN_POSITIVE], Activation::Rectified)
                .unwrap(),
            DenseLayer::new(Matrix::identity(1), vec![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap();
        assert!(decode(&encode(&mixed).unwrap()).unwrap().bitwise_eq(&mixed));

        let big = net(&[2000, 2500], 3);
        assert!(decode(&encode(&big).unwrap()).unwrap().bitwise_eq(&big));
    }

    #[test]
    fn layout_is_little_endian() {
        let params = NetworkParams::new(vec![DenseLayer::new(
            Matrix::from_rows(&[[1.0, 2.0]]).unwrap(),
            vec![0.5],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let bytes = encode(&params).unwrap();
        assert_eq!(&bytes[..4], b"DBNM");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[2, 0, 0, 0]);
        assert_eq!(bytes[20], 2);
        assert_eq!(&bytes[21..29], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 3 * 8);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&net(&[2, 2], 4)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = encode(&net(&[2, 2], 4)).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(CheckpointError::UnsupportedVersion(2))));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = encode(&net(&[3, 2], 5)).unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::CorruptLength), "cut {cut}: {err}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CheckpointError::CorruptLength)));
    }

    #[test]
    fn rejects_unknown_tag_and_nonstandard_tanh() {
        let mut bytes = encode(&net(&[2, 2], 6)).unwrap();
        bytes[20] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadActivationTag(9))));

        let odd = NetworkParams::new(vec![DenseLayer::new(
            Matrix::zeros(1, 1),
            vec![0.0],
            Activation::ScaledTanh { a: 1.0, b: 1.0 },
        )
        .unwrap()])
        .unwrap();
        assert!(matches!(encode(&odd), Err(CheckpointError::UnsupportedActivation)));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("absent.dbnm")),
            Err(CheckpointError::Io(_))
        ));
    }
}
