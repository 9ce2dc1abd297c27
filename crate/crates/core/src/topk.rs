//! Chunked top-k sparsification with error feedback: the pseudo-gradient
//! compressor for the outer synchronization step.
//!
//! A flattened tensor is split into fixed-length chunks; each chunk keeps its
//! k largest-magnitude entries (ties broken by lowest index). Whatever is not
//! transmitted stays in a per-replica error accumulator and re-enters the
//! exchange on later rounds with decay `beta`.

use crate::error::{Error, Result};
use crate::linalg::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Chunking geometry. Defaults follow the standard configuration:
/// 4096-element chunks (64 x 64) with 32 values kept per chunk, i.e.
/// 0.78125% density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub chunk_len: usize,
    pub k_per_chunk: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self {
            chunk_len: 4096,
            k_per_chunk: 32,
        }
    }
}

impl ChunkSpec {
    pub fn new(chunk_len: usize, k_per_chunk: usize) -> Result<Self> {
        if chunk_len == 0 || k_per_chunk == 0 || k_per_chunk > chunk_len {
            return Err(Error::Config(format!(
                "chunk spec requires 1 <= k <= chunk_len, got k={k_per_chunk}, chunk_len={chunk_len}"
            )));
        }
        // Wire indices are 16-bit.
        if chunk_len > 1 << 16 {
            return Err(Error::Config(format!(
                "chunk_len {chunk_len} exceeds 16-bit index range"
            )));
        }
        Ok(Self {
            chunk_len,
            k_per_chunk,
        })
    }

    /// Keep everything: densify(topk(x)) == x.
    pub fn dense(chunk_len: usize) -> Self {
        Self {
            chunk_len,
            k_per_chunk: chunk_len,
        }
    }

    pub fn chunk_count(&self, total_len: usize) -> usize {
        total_len.div_ceil(self.chunk_len)
    }

    /// Nonzeros produced for a tensor of `total_len` elements:
    /// sum over chunks of min(k, chunk elements).
    pub fn nonzero_count(&self, total_len: usize) -> usize {
        let full = total_len / self.chunk_len;
        let tail = total_len % self.chunk_len;
        full * self.k_per_chunk + tail.min(self.k_per_chunk)
    }
}

/// One chunk's kept entries. Indices are local to the chunk and strictly
/// increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseChunk<S> {
    pub indices: Vec<u16>,
    pub values: Vec<S>,
}

/// Per-chunk (index, value) encoding of a top-k compressed tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta<S> {
    pub total_len: usize,
    pub spec: ChunkSpec,
    pub chunks: Vec<SparseChunk<S>>,
}

impl<S: Scalar> SparseDelta<S> {
    pub fn nonzero_count(&self) -> usize {
        self.chunks.iter().map(|c| c.values.len()).sum()
    }

    /// Bytes this delta occupies in the wire format (header + per-chunk
    /// count, 16-bit indices, 32-bit values).
    pub fn wire_bytes(&self) -> usize {
        16 + self
            .chunks
            .iter()
            .map(|c| 2 + c.indices.len() * 2 + c.values.len() * 4)
            .sum::<usize>()
    }
}

/// Error accumulator paired with one parameter tensor, decaying by `beta`
/// before each new pseudo-gradient is folded in.
#[derive(Clone, Debug)]
pub struct ErrorAccumulator<S> {
    pub e: Tensor<S>,
    pub beta: S,
}

impl<S: Scalar> ErrorAccumulator<S> {
    pub fn zeros(shape: &[usize], beta: f64) -> Self {
        Self {
            e: Tensor::zeros(shape),
            beta: S::from_f64(beta),
        }
    }
}

/// e <- beta * e + delta, elementwise.
pub fn ef_accumulate<S: Scalar>(acc: &mut ErrorAccumulator<S>, delta: &Tensor<S>) -> Result<()> {
    if acc.e.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            op: "ef_accumulate",
            lhs: acc.e.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let beta = acc.beta;
    for (e, &d) in acc.e.data_mut().iter_mut().zip(delta.data()) {
        *e = beta * *e + d;
    }
    Ok(())
}

/// Subtract the transmitted coordinates from the accumulator. Because the
/// kept values are bitwise copies out of `e`, the kept coordinates become
/// exactly zero and `densify(sd) + e_after == e_before` holds exactly.
pub fn ef_subtract<S: Scalar>(acc: &mut ErrorAccumulator<S>, sd: &SparseDelta<S>) -> Result<()> {
    if acc.e.len() != sd.total_len {
        return Err(Error::ShapeMismatch {
            op: "ef_subtract",
            lhs: vec![acc.e.len()],
            rhs: vec![sd.total_len],
        });
    }
    let data = acc.e.data_mut();
    for (ci, chunk) in sd.chunks.iter().enumerate() {
        let base = ci * sd.spec.chunk_len;
        for (&idx, &val) in chunk.indices.iter().zip(&chunk.values) {
            let flat = base + idx as usize;
            if flat >= data.len() {
                return Err(Error::IndexOutOfRange {
                    index: flat,
                    len: data.len(),
                });
            }
            data[flat] = data[flat] - val;
        }
    }
    Ok(())
}

/// Keep the k largest-magnitude entries of every chunk (row-major
/// flattening). Ties break toward the lowest flat index; a partial final
/// chunk keeps min(k, len) values.
pub fn topk_chunks<S: Scalar>(t: &Tensor<S>, spec: ChunkSpec) -> SparseDelta<S> {
    let data = t.data();
    let mut chunks = Vec::with_capacity(spec.chunk_count(data.len()));
    for chunk in data.chunks(spec.chunk_len) {
        let keep = spec.k_per_chunk.min(chunk.len());
        let mut order: Vec<u16> = (0..chunk.len() as u16).collect();
        // Sort keys: magnitude descending, then index ascending. total_cmp
        // keeps the comparator a total order even for degenerate inputs.
        let key = |i: &u16| {
            let v = chunk[*i as usize].as_f64().abs();
            (std::cmp::Reverse(FloatOrd(v)), *i)
        };
        if keep < chunk.len() {
            order.select_nth_unstable_by_key(keep - 1, key);
            order.truncate(keep);
        }
        order.sort_unstable();
        let values = order.iter().map(|&i| chunk[i as usize]).collect();
        chunks.push(SparseChunk {
            indices: order,
            values,
        });
    }
    SparseDelta {
        total_len: data.len(),
        spec,
        chunks,
    }
}

/// Quantization hook. The exchange currently runs unquantized, so this is an
/// exact pass-through; the seam exists so a codec can drop in without
/// touching the surrounding recurrence.
pub fn quantize<S: Scalar>(sd: SparseDelta<S>) -> SparseDelta<S> {
    sd
}

/// Expand to a dense flat tensor of `total_len` elements.
pub fn densify<S: Scalar>(sd: &SparseDelta<S>) -> Tensor<S> {
    let mut out = vec![S::zero(); sd.total_len];
    for (ci, chunk) in sd.chunks.iter().enumerate() {
        let base = ci * sd.spec.chunk_len;
        for (&idx, &val) in chunk.indices.iter().zip(&chunk.values) {
            out[base + idx as usize] = val;
        }
    }
    Tensor::from_vec(vec![sd.total_len], out)
}

/// Wire format: `total_len: u64`, `chunk_len: u32`, `k: u32`, then per chunk
/// `count: u16`, indices as u16 LE, values as f32 LE.
pub fn encode_sparse<S: Scalar>(sd: &SparseDelta<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(sd.wire_bytes());
    out.extend_from_slice(&(sd.total_len as u64).to_le_bytes());
    out.extend_from_slice(&(sd.spec.chunk_len as u32).to_le_bytes());
    out.extend_from_slice(&(sd.spec.k_per_chunk as u32).to_le_bytes());
    for chunk in &sd.chunks {
        out.extend_from_slice(&(chunk.indices.len() as u16).to_le_bytes());
        for &i in &chunk.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for &v in &chunk.values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_sparse(bytes: &[u8]) -> Result<SparseDelta<f32>> {
    let short = || Error::Decode("sparse delta truncated".into());
    if bytes.len() < 16 {
        return Err(short());
    }
    let total_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let chunk_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let spec = ChunkSpec::new(chunk_len, k)?;
    let mut off = 16;
    let n_chunks = spec.chunk_count(total_len);
    let mut chunks = Vec::with_capacity(n_chunks);
    for ci in 0..n_chunks {
        if bytes.len() < off + 2 {
            return Err(short());
        }
        let count = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        let chunk_elems = if ci + 1 == n_chunks && !total_len.is_multiple_of(chunk_len) {
            total_len % chunk_len
        } else {
            chunk_len
        };
        if count != k.min(chunk_elems) {
            return Err(Error::Decode(format!(
                "chunk {ci}: count {count} does not match spec"
            )));
        }
        if bytes.len() < off + count * 6 {
            return Err(short());
        }
        let mut indices = Vec::with_capacity(count);
        for i in 0..count {
            indices.push(u16::from_le_bytes(
                bytes[off + i * 2..off + i * 2 + 2].try_into().unwrap(),
            ));
        }
        off += count * 2;
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            values.push(f32::from_le_bytes(
                bytes[off + i * 4..off + i * 4 + 4].try_into().unwrap(),
            ));
        }
        off += count * 4;
        let increasing = indices.windows(2).all(|w| w[0] < w[1]);
        if !increasing || indices.iter().any(|&i| i as usize >= chunk_elems) {
            return Err(Error::Decode(format!("chunk {ci}: bad index set")));
        }
        chunks.push(SparseChunk { indices, values });
    }
    if off != bytes.len() {
        return Err(Error::Decode("trailing bytes after sparse delta".into()));
    }
    Ok(SparseDelta {
        total_len,
        spec,
        chunks,
    })
}

/// f64 wrapper ordered by total order; inputs are finite by construction.
#[derive(PartialEq)]
struct FloatOrd(f64);

impl Eq for FloatOrd {}

impl PartialOrd for FloatOrd {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FloatOrd {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, RngStream};
    use proptest::prelude::*;

    fn flat(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![values.len()], values.to_vec())
    }

    #[test]
    fn ef_accumulate_beta_zero_copies_delta() {
        let mut acc = ErrorAccumulator::<f64>::zeros(&[3], 0.0);
        acc.e = flat(&[5.0, 5.0, 5.0]);
        ef_accumulate(&mut acc, &flat(&[1.0, -2.0, 3.0])).unwrap();
        assert_eq!(acc.e.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn ef_accumulate_hand_case() {
        let mut acc = ErrorAccumulator::<f64>::zeros(&[2], 0.95);
        acc.e = flat(&[1.0, 1.0]);
        ef_accumulate(&mut acc, &flat(&[1.0, -1.0])).unwrap();
        assert!((acc.e.data()[0] - 1.95).abs() < 1e-12);
        assert!((acc.e.data()[1] - -0.05).abs() < 1e-12);
    }

    #[test]
    fn ef_accumulate_zero_delta_decays_geometrically() {
        let mut acc = ErrorAccumulator::<f64>::zeros(&[2], 0.5);
        acc.e = flat(&[8.0, -4.0]);
        let zero = flat(&[0.0, 0.0]);
        ef_accumulate(&mut acc, &zero).unwrap();
        assert_eq!(acc.e.data(), &[4.0, -2.0]);
        ef_accumulate(&mut acc, &zero).unwrap();
        assert_eq!(acc.e.data(), &[2.0, -1.0]);
    }

    #[test]
    fn topk_hand_case() {
        let spec = ChunkSpec::new(4, 2).unwrap();
        let sd = topk_chunks(&flat(&[3.0, -5.0, 1.0, 2.0]), spec);
        assert_eq!(sd.chunks.len(), 1);
        assert_eq!(sd.chunks[0].indices, vec![0, 1]);
        assert_eq!(sd.chunks[0].values, vec![3.0, -5.0]);
    }

    #[test]
    fn topk_full_k_is_identity() {
        let spec = ChunkSpec::dense(4);
        let x = flat(&[0.5, -0.25, 0.0, 4.0, 1.0, -1.0]);
        let sd = topk_chunks(&x, spec);
        assert_eq!(densify(&sd).data(), x.data());
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = RngStream::new(17, 0);
        let spec = ChunkSpec::default();
        for trial in 0..50 {
            let t: Tensor<f64> = gaussian(&mut rng, &[spec.chunk_len]);
            let sd = topk_chunks(&t, spec);
            let mut oracle: Vec<usize> = (0..spec.chunk_len).collect();
            oracle.sort_by(|&a, &b| {
                t.data()[b]
                    .abs()
                    .total_cmp(&t.data()[a].abs())
                    .then(a.cmp(&b))
            });
            let mut expected: Vec<u16> = oracle[..spec.k_per_chunk]
                .iter()
                .map(|&i| i as u16)
                .collect();
            expected.sort_unstable();
            assert_eq!(sd.chunks[0].indices, expected, "trial {trial}");
        }
    }

    #[test]
    fn topk_tie_breaks_to_lowest_index() {
        let spec = ChunkSpec::new(4, 2).unwrap();
        let sd = topk_chunks(&flat(&[1.0, -1.0, 1.0, 1.0]), spec);
        assert_eq!(sd.chunks[0].indices, vec![0, 1]);
    }

    #[test]
    fn partial_final_chunk_keeps_min_k_len() {
        let spec = ChunkSpec::new(4, 3).unwrap();
        let sd = topk_chunks(&flat(&[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]), spec);
        assert_eq!(sd.chunks.len(), 2);
        assert_eq!(sd.chunks[0].values.len(), 3);
        assert_eq!(sd.chunks[1].values.len(), 2);
        assert_eq!(sd.nonzero_count(), spec.nonzero_count(6));
    }

    #[test]
    fn quantize_is_identity_and_idempotent() {
        let spec = ChunkSpec::new(8, 2).unwrap();
        let sd = topk_chunks(&flat(&[3.0, -5.0, 1.0, 2.0, 0.0, 0.0, 7.0, -0.5]), spec);
        let q = quantize(sd.clone());
        assert_eq!(q, sd);
        assert_eq!(quantize(q.clone()), sd);
        assert_eq!(q.chunks[0].indices, sd.chunks[0].indices);
    }

    #[test]
    fn ef_subtract_full_k_zeroes_accumulator() {
        let mut acc = ErrorAccumulator::<f64>::zeros(&[4], 0.9);
        acc.e = flat(&[1.0, -2.0, 3.0, -4.0]);
        let sd = topk_chunks(&acc.e, ChunkSpec::dense(4));
        ef_subtract(&mut acc, &sd).unwrap();
        assert!(acc.e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conservation_identity_is_exact() {
        let mut rng = RngStream::new(23, 0);
        for _ in 0..20 {
            let e0: Tensor<f64> = gaussian(&mut rng, &[100]);
            let spec = ChunkSpec::new(32, 5).unwrap();
            let mut acc = ErrorAccumulator { e: e0.clone(), beta: 1.0 };
            let sd = topk_chunks(&acc.e, spec);
            ef_subtract(&mut acc, &sd).unwrap();
            let recon = densify(&sd).reshape(vec![100]).unwrap().add(&acc.e).unwrap();
            // Bitwise: kept values are copies, untouched coordinates unchanged.
            assert_eq!(recon.data(), e0.data());
        }
    }

    #[test]
    fn untouched_coordinates_bitwise_unchanged() {
        let mut acc = ErrorAccumulator::<f64>::zeros(&[4], 0.9);
        acc.e = flat(&[0.1, -7.0, 0.2, 6.0]);
        let before = acc.e.clone();
        let sd = topk_chunks(&acc.e, ChunkSpec::new(4, 2).unwrap());
        ef_subtract(&mut acc, &sd).unwrap();
        assert_eq!(acc.e.data()[0], before.data()[0]);
        assert_eq!(acc.e.data()[2], before.data()[2]);
        assert_eq!(acc.e.data()[1], 0.0);
        assert_eq!(acc.e.data()[3], 0.0);
    }

    #[test]
    fn default_density_is_0_78125_percent() {
        let spec = ChunkSpec::default();
        let total = 4096 * 10;
        let density = spec.nonzero_count(total) as f64 / total as f64;
        assert_eq!(density, 0.0078125);
    }

    #[test]
    fn densify_empty_is_zero() {
        let sd = SparseDelta::<f64> {
            total_len: 5,
            spec: ChunkSpec::new(5, 1).unwrap(),
            chunks: vec![SparseChunk {
                indices: vec![],
                values: vec![],
            }],
        };
        assert!(densify(&sd).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wire_roundtrip() {
        let mut rng = RngStream::new(29, 0);
        let t: Tensor<f32> = gaussian(&mut rng, &[150]);
        let spec = ChunkSpec::new(64, 7).unwrap();
        let sd = topk_chunks(&t, spec);
        let bytes = encode_sparse(&sd);
        assert_eq!(bytes.len(), sd.wire_bytes());
        let back = decode_sparse(&bytes).unwrap();
        assert_eq!(back, sd);
    }

    #[test]
    fn wire_bytes_scale_with_k() {
        // 6 bytes per kept value (4-byte value + 2-byte index).
        let t: Tensor<f32> = Tensor::zeros(&[8192]);
        let small = topk_chunks(&t, ChunkSpec::new(4096, 16).unwrap()).wire_bytes();
        let large = topk_chunks(&t, ChunkSpec::new(4096, 32).unwrap()).wire_bytes();
        assert_eq!(large - small, 2 * 16 * 6);
    }

    #[test]
    fn corrupt_wire_rejected() {
        let t: Tensor<f32> = Tensor::zeros(&[32]);
        let sd = topk_chunks(&t, ChunkSpec::new(16, 2).unwrap());
        let mut bytes = encode_sparse(&sd);
        bytes.truncate(bytes.len() - 3);
        assert!(decode_sparse(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn kept_magnitudes_dominate_dropped(values in proptest::collection::vec(-10.0f64..10.0, 1..200),
                                            chunk_len in 1usize..64, k in 1usize..64) {
            prop_assume!(k <= chunk_len);
            let spec = ChunkSpec::new(chunk_len, k).unwrap();
            let t = flat(&values);
            let sd = topk_chunks(&t, spec);
            prop_assert_eq!(sd.nonzero_count(), spec.nonzero_count(values.len()));
            for (ci, chunk) in sd.chunks.iter().enumerate() {
                let base = ci * chunk_len;
                let end = (base + chunk_len).min(values.len());
                let kept: Vec<usize> = chunk.indices.iter().map(|&i| base + i as usize).collect();
                prop_assert!(chunk.indices.windows(2).all(|w| w[0] < w[1]));
                let min_kept = kept
                    .iter()
                    .map(|&i| values[i].abs())
                    .fold(f64::INFINITY, f64::min);
                #[allow(clippy::needless_range_loop)]
                for i in base..end {
                    if !kept.contains(&i) {
                        prop_assert!(values[i].abs() <= min_kept + 1e-15);
                    }
                }
            }
        }

        #[test]
        fn error_feedback_stays_bounded(deltas in proptest::collection::vec(-1.0f64..1.0, 200)) {
            // With |delta| <= c and beta < 1 the accumulator stays within c/(1-beta).
            let beta = 0.95;
            let mut acc = ErrorAccumulator::<f64>::zeros(&[1], beta);
            for &d in &deltas {
                ef_accumulate(&mut acc, &flat(&[d])).unwrap();
                prop_assert!(acc.e.data()[0].abs() <= 1.0 / (1.0 - beta) + 1e-9);
            }
        }
    }
}
