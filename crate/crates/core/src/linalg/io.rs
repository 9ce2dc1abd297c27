use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Binary tensor blob: `rank: u64 LE`, `extents: u64 LE * rank`,
/// `precision tag: u8` (4 or 8), then raw little-endian values.
/// Used for checkpoints and golden files.
pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t));
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(S::PRECISION_TAG);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn encoded_len<S: Scalar>(t: &Tensor<S>) -> usize {
    8 + 8 * t.rank() + 1 + t.len() * S::PRECISION_TAG as usize
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let too_short = || Error::Decode("tensor blob truncated".into());
    if bytes.len() < 9 {
        return Err(too_short());
    }
    let rank = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Decode(format!("implausible tensor rank {rank}")));
    }
    let mut off = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < off + 8 {
            return Err(too_short());
        }
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    if bytes.len() < off + 1 {
        return Err(too_short());
    }
    let tag = bytes[off];
    off += 1;
    if tag != S::PRECISION_TAG {
        return Err(Error::Decode(format!(
            "precision tag {tag} does not match expected {}",
            S::PRECISION_TAG
        )));
    }
    let len: usize = shape.iter().product();
    let width = S::PRECISION_TAG as usize;
    if bytes.len() != off + len * width {
        return Err(Error::Decode(format!(
            "payload length {} does not match shape {:?}",
            bytes.len() - off,
            shape
        )));
    }
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        data.push(S::read_le(&bytes[off + i * width..off + (i + 1) * width]));
    }
    // External input: validate finiteness through the checked constructor.
    Tensor::new(shape, data)
}
