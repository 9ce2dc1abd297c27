//! Subspace compression for inter-stage traffic: a fixed orthonormal basis
//! `U` (d x k), activation/gradient projection, the embedding split
//! `TE = T_S + T_perp`, post-synchronization re-projection, and the weight
//! projection ablation.
//!
//! Forward packets transmit `(x - T_perp[ids] - pos) U`; receivers rebuild
//! `x_hat = x_tilde U^T + T_perp[ids] + pos`. Backward gradients transmit
//! `g U` and are rebuilt as `g_tilde U^T`, the adjoint of the forward
//! reconstruction, so compressed forward/backward form an exact gradient
//! pair for the reconstructed computation.

use crate::error::{Error, Result};
use crate::linalg::{
    gaussian, matmul, matmul_nt, matmul_tn, qr_orthonormalize, RngStream, Scalar, Tensor,
};
use crate::model::ActivationPacket;

/// Stream id reserved for basis sampling, separate from model/data streams.
const BASIS_STREAM: u64 = 0xB515;

/// Orthonormal projection basis, fixed for a whole run and shared by every
/// compressed replica and stage boundary.
#[derive(Clone, Debug)]
pub struct ProjectionBasis<S> {
    u: Tensor<S>,
    pub seed: u64,
    pub d: usize,
    pub k: usize,
}

impl<S: Scalar> ProjectionBasis<S> {
    /// QR-orthonormalized Gaussian basis; deterministic per seed.
    pub fn new(seed: u64, d: usize, k: usize) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::Config(format!("basis requires 1 <= k <= d, got k={k}, d={d}")));
        }
        let mut rng = RngStream::new(seed, BASIS_STREAM);
        let raw: Tensor<S> = gaussian(&mut rng, &[d, k]);
        let u = qr_orthonormalize(&raw)?;
        let basis = Self { u, seed, d, k };
        basis.validate()?;
        Ok(basis)
    }

    /// Wrap an existing orthonormal matrix (hand-constructed bases in tests
    /// and diagnostics).
    pub fn from_orthonormal(u: Tensor<S>, seed: u64) -> Result<Self> {
        let (d, k) = u.dims2()?;
        let basis = Self { u, seed, d, k };
        basis.validate()?;
        Ok(basis)
    }

    pub fn u(&self) -> &Tensor<S> {
        &self.u
    }

    /// Orthonormality check at construction tolerance (1e-5 for f32 runs,
    /// 1e-10 for f64).
    pub fn validate(&self) -> Result<()> {
        let tol = if S::PRECISION_TAG == 4 { 1e-5 } else { 1e-10 };
        let gram = matmul_tn(&self.u, &self.u)?;
        let err = gram.max_abs_diff(&Tensor::eye(self.k));
        if err > tol {
            return Err(Error::Config(format!(
                "basis failed orthonormality check: {err:e} > {tol:e}"
            )));
        }
        Ok(())
    }

    /// Fraction of activation width removed on the wire: 1 - k/d.
    pub fn compression_ratio(&self) -> f64 {
        1.0 - self.k as f64 / self.d as f64
    }
}

/// Project each row of `x` (…, d) onto Col(U): x U U^T.
pub fn project<S: Scalar>(x: &Tensor<S>, basis: &ProjectionBasis<S>) -> Result<Tensor<S>> {
    if x.last_dim() != basis.d {
        return Err(Error::ShapeMismatch {
            op: "project",
            lhs: x.shape().to_vec(),
            rhs: vec![basis.d],
        });
    }
    let flat = x.as_matrix();
    let coords = matmul(&flat, &basis.u)?;
    let out = matmul_nt(&coords, &basis.u)?;
    out.reshape(x.shape().to_vec())
}

/// Learnable low-rank and frozen high-rank embedding components plus the
/// positional table. `t_s + t_perp` reconstructs the logical table at all
/// times.
#[derive(Clone, Debug)]
pub struct EmbeddingSplit<S> {
    pub t_s: Tensor<S>,
    pub t_perp: Tensor<S>,
    pub pos: Tensor<S>,
}

impl<S: Scalar> EmbeddingSplit<S> {
    /// Split a full table so the learnable part starts inside the subspace.
    pub fn from_table(te: &Tensor<S>, pos: Tensor<S>, basis: &ProjectionBasis<S>) -> Result<Self> {
        let (t_s, t_perp) = split_embedding(te, basis)?;
        Ok(Self { t_s, t_perp, pos })
    }

    /// The logical embedding table.
    pub fn table(&self) -> Result<Tensor<S>> {
        self.t_s.add(&self.t_perp)
    }

    /// Post-synchronization repair (see [`reproject_embedding`]).
    pub fn reproject(&mut self, basis: &ProjectionBasis<S>) -> Result<()> {
        reproject_embedding(&mut self.t_s, &mut self.t_perp, basis)
    }

    /// How far the learnable part has drifted out of the subspace.
    pub fn subspace_drift(&self, basis: &ProjectionBasis<S>) -> Result<f64> {
        Ok(self.t_s.sub(&project(&self.t_s, basis)?)?.max_abs())
    }
}

/// Decompose a full embedding table: `t_s = te U U^T`, `t_perp = te - t_s`
/// (exact by construction).
pub fn split_embedding<S: Scalar>(
    te: &Tensor<S>,
    basis: &ProjectionBasis<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let t_s = project(te, basis)?;
    let t_perp = te.sub(&t_s)?;
    Ok((t_s, t_perp))
}

/// Post-synchronization repair: project `t_s` back into the subspace and
/// accumulate the residual into `t_perp`, preserving their sum. Invoked only
/// after each outer synchronization.
pub fn reproject_embedding<S: Scalar>(
    t_s: &mut Tensor<S>,
    t_perp: &mut Tensor<S>,
    basis: &ProjectionBasis<S>,
) -> Result<()> {
    let projected = project(t_s, basis)?;
    let residual = t_s.sub(&projected)?;
    t_perp.add_scaled_assign(&residual, S::one())?;
    *t_s = projected;
    Ok(())
}

/// Compress a forward activation packet:
/// `x_tilde = (x - T_perp[ids] - pos) U`, token ids carried along.
pub fn compress_activation<S: Scalar>(
    pkt: &ActivationPacket<S>,
    t_perp: &Tensor<S>,
    pos: &Tensor<S>,
    basis: &ProjectionBasis<S>,
) -> Result<ActivationPacket<S>> {
    if pkt.compressed {
        return Err(Error::Dimension {
            op: "compress_activation",
            msg: "packet already compressed".into(),
        });
    }
    let x = pkt.x.as_ref().ok_or_else(|| Error::Dimension {
        op: "compress_activation",
        msg: "entry packets carry no activation".into(),
    })?;
    if pkt.token_ids.len() != pkt.batch * pkt.seq {
        return Err(Error::Dimension {
            op: "compress_activation",
            msg: "token ids missing or wrong length".into(),
        });
    }
    let residual = subtract_anchor(x, &pkt.token_ids, pkt.seq, t_perp, pos)?;
    let coords = matmul(&residual, &basis.u)?;
    Ok(ActivationPacket {
        x: Some(coords),
        token_ids: pkt.token_ids.clone(),
        batch: pkt.batch,
        seq: pkt.seq,
        compressed: true,
    })
}

/// Reconstruct a compressed packet:
/// `x_hat = x_tilde U^T + T_perp[ids] + pos`.
pub fn reconstruct_activation<S: Scalar>(
    pkt: &ActivationPacket<S>,
    t_perp: &Tensor<S>,
    pos: &Tensor<S>,
    basis: &ProjectionBasis<S>,
) -> Result<ActivationPacket<S>> {
    if !pkt.compressed {
        return Err(Error::Dimension {
            op: "reconstruct_activation",
            msg: "packet is not compressed".into(),
        });
    }
    let coords = pkt.x.as_ref().ok_or_else(|| Error::Dimension {
        op: "reconstruct_activation",
        msg: "compressed packet missing coordinates".into(),
    })?;
    if coords.last_dim() != basis.k {
        return Err(Error::ShapeMismatch {
            op: "reconstruct_activation",
            lhs: coords.shape().to_vec(),
            rhs: vec![basis.k],
        });
    }
    let mut x = matmul_nt(coords, &basis.u)?;
    add_anchor(&mut x, &pkt.token_ids, pkt.seq, t_perp, pos);
    Ok(ActivationPacket {
        x: Some(x),
        token_ids: pkt.token_ids.clone(),
        batch: pkt.batch,
        seq: pkt.seq,
        compressed: false,
    })
}

/// Compress a backward activation-gradient: `g_tilde = g U`.
pub fn compress_grad<S: Scalar>(g: &Tensor<S>, basis: &ProjectionBasis<S>) -> Result<Tensor<S>> {
    if g.last_dim() != basis.d {
        return Err(Error::ShapeMismatch {
            op: "compress_grad",
            lhs: g.shape().to_vec(),
            rhs: vec![basis.d],
        });
    }
    matmul(&g.as_matrix(), &basis.u)
}

/// Receiver-side gradient reconstruction: `g_hat = g_tilde U^T`.
pub fn reconstruct_grad<S: Scalar>(
    g_tilde: &Tensor<S>,
    basis: &ProjectionBasis<S>,
) -> Result<Tensor<S>> {
    if g_tilde.last_dim() != basis.k {
        return Err(Error::ShapeMismatch {
            op: "reconstruct_grad",
            lhs: g_tilde.shape().to_vec(),
            rhs: vec![basis.k],
        });
    }
    matmul_nt(g_tilde, &basis.u)
}

/// Ablation (default off): project the residual-stream write matrices of a
/// model's blocks onto the subspace, row by row (`W <- W U U^T`). With this
/// applied and the learnable embedding rows inside Col(U), inter-stage
/// residuals lie in the subspace up to float error.
pub fn project_weights<S: Scalar>(
    model: &mut crate::model::Model<S>,
    layer_range: std::ops::Range<usize>,
    basis: &ProjectionBasis<S>,
) -> Result<()> {
    for l in layer_range {
        let ids = model.layout.layers[l].clone();
        for id in [ids.wo, ids.w_down] {
            let projected = project(model.params.get(id), basis)?;
            *model.params.get_mut(id) = projected;
        }
    }
    Ok(())
}

fn subtract_anchor<S: Scalar>(
    x: &Tensor<S>,
    ids: &[u32],
    seq: usize,
    t_perp: &Tensor<S>,
    pos: &Tensor<S>,
) -> Result<Tensor<S>> {
    let d = x.last_dim();
    let mut out = x.as_matrix();
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= t_perp.shape()[0] {
            return Err(Error::TargetOutOfRange {
                id,
                vocab: t_perp.shape()[0],
            });
        }
        let tp = t_perp.row(id as usize);
        let p = pos.row(r % seq);
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            row[j] = row[j] - tp[j] - p[j];
        }
    }
    Ok(out)
}

fn add_anchor<S: Scalar>(
    x: &mut Tensor<S>,
    ids: &[u32],
    seq: usize,
    t_perp: &Tensor<S>,
    pos: &Tensor<S>,
) {
    let d = x.last_dim();
    for (r, &id) in ids.iter().enumerate() {
        let tp = t_perp.row(id as usize);
        let p = pos.row(r % seq);
        let row = &mut x.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            row[j] = row[j] + tp[j] + p[j];
        }
    }
}

/// Payload bytes a packet occupies on the wire: 4 bytes per token id plus
/// 4 bytes per value. This is what the channel meters count and what the
/// perf model's closed form reproduces.
pub fn packet_payload_bytes<S: Scalar>(pkt: &ActivationPacket<S>) -> u64 {
    let ids = pkt.token_ids.len() as u64 * 4;
    let values = pkt.x.as_ref().map_or(0, |x| x.len() as u64 * 4);
    ids + values
}

/// Wire encoding: header `(batch, seq, width, flags)` as u32 LE, token ids
/// as u32 LE, values as f32 LE.
pub fn encode_packet<S: Scalar>(pkt: &ActivationPacket<S>) -> Result<Vec<u8>> {
    let x = pkt.x.as_ref().ok_or_else(|| Error::Dimension {
        op: "encode_packet",
        msg: "entry packets are not encodable".into(),
    })?;
    let width = x.last_dim() as u32;
    let mut out = Vec::with_capacity(16 + packet_payload_bytes(pkt) as usize);
    out.extend_from_slice(&(pkt.batch as u32).to_le_bytes());
    out.extend_from_slice(&(pkt.seq as u32).to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(pkt.compressed as u32).to_le_bytes());
    for &id in &pkt.token_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for &v in x.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_packet(bytes: &[u8]) -> Result<ActivationPacket<f32>> {
    let short = || Error::Decode("activation packet truncated".into());
    if bytes.len() < 16 {
        return Err(short());
    }
    let b = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let seq = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let compressed = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) != 0;
    let rows = b * seq;
    let expected = 16 + rows * 4 + rows * width * 4;
    if bytes.len() != expected {
        return Err(short());
    }
    let mut token_ids = Vec::with_capacity(rows);
    for r in 0..rows {
        token_ids.push(u32::from_le_bytes(
            bytes[16 + r * 4..20 + r * 4].try_into().unwrap(),
        ));
    }
    let voff = 16 + rows * 4;
    let mut values = Vec::with_capacity(rows * width);
    for i in 0..rows * width {
        values.push(f32::from_le_bytes(
            bytes[voff + i * 4..voff + i * 4 + 4].try_into().unwrap(),
        ));
    }
    Ok(ActivationPacket {
        x: Some(Tensor::new(vec![rows, width], values)?),
        token_ids,
        batch: b,
        seq,
        compressed,
    })
}
