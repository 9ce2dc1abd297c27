//! Forward/backward primitives for the micro-transformer: RMSNorm, causal
//! multi-head attention, SwiGLU, embedding gather, and cross-entropy.
//!
//! Each forward returns whatever the matching backward needs. All loops run
//! in fixed index order so gradients are bitwise reproducible.
#![allow(clippy::needless_range_loop, clippy::type_complexity, clippy::too_many_arguments)]

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

pub const RMSNORM_EPS: f64 = 1e-6;

/// y[r, j] = x[r, j] * g[j] / rms(x[r, :]). Returns y and the per-row 1/rms.
pub fn rmsnorm_fwd<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>) -> (Tensor<S>, Vec<S>) {
    let d = x.last_dim();
    let rows = x.len() / d;
    let g = gain.data();
    let mut out = vec![S::zero(); x.len()];
    let mut inv_rms = Vec::with_capacity(rows);
    let dim = S::from_f64(d as f64);
    let eps = S::from_f64(RMSNORM_EPS);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut ms = S::zero();
        for &v in row {
            ms = ms + v * v;
        }
        let inv = (ms / dim + eps).sqrt().recip();
        inv_rms.push(inv);
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = row[j] * inv * g[j];
        }
    }
    (Tensor::from_vec(x.shape().to_vec(), out), inv_rms)
}

/// Backward of rmsnorm: returns (dx, dgain).
pub fn rmsnorm_bwd<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    inv_rms: &[S],
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let d = x.last_dim();
    let rows = x.len() / d;
    let g = gain.data();
    let mut dx = vec![S::zero(); x.len()];
    let mut dg = vec![S::zero(); d];
    let dim = S::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let dyr = &dy.data()[r * d..(r + 1) * d];
        let inv = inv_rms[r];
        // s = sum_j dy_j * g_j * x_j
        let mut s = S::zero();
        for j in 0..d {
            s = s + dyr[j] * g[j] * xr[j];
        }
        let coef = s * inv * inv * inv / dim;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] = dyr[j] * g[j] * inv - xr[j] * coef;
            dg[j] = dg[j] + dyr[j] * xr[j] * inv;
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx),
        Tensor::from_vec(vec![d], dg),
    )
}

/// Saved state for the attention backward.
pub struct AttnTape<S> {
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    /// Causal softmax probabilities, flat [batch][head][t][j], j <= t zeroed
    /// above the diagonal.
    pub probs: Vec<S>,
    /// Concatenated per-head context, input to the output projection.
    pub ctx: Tensor<S>,
}

/// Causal multi-head self-attention over a pre-normalized input
/// (rows = batch * seq). Returns the output-projection result and the tape.
pub fn attention_fwd<S: Scalar>(
    xn: &Tensor<S>,
    wq: &Tensor<S>,
    wk: &Tensor<S>,
    wv: &Tensor<S>,
    wo: &Tensor<S>,
    batch: usize,
    seq: usize,
    n_heads: usize,
) -> Result<(Tensor<S>, AttnTape<S>)> {
    let d = xn.last_dim();
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let q = matmul(xn, wq)?;
    let k = matmul(xn, wk)?;
    let v = matmul(xn, wv)?;
    let mut probs = vec![S::zero(); batch * n_heads * seq * seq];
    let mut ctx = vec![S::zero(); batch * seq * d];
    for b in 0..batch {
        let row0 = b * seq;
        for h in 0..n_heads {
            let c0 = h * dh;
            let pbase = (b * n_heads + h) * seq * seq;
            for t in 0..seq {
                let qrow = &q.data()[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                // Scores over j <= t, max-subtracted softmax.
                let mut scores = vec![S::zero(); t + 1];
                let mut m = S::neg_infinity();
                for j in 0..=t {
                    let krow = &k.data()[(row0 + j) * d + c0..(row0 + j) * d + c0 + dh];
                    let mut dot = S::zero();
                    for c in 0..dh {
                        dot = dot + qrow[c] * krow[c];
                    }
                    let sc = dot * scale;
                    scores[j] = sc;
                    if sc > m {
                        m = sc;
                    }
                }
                let mut z = S::zero();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z = z + *s;
                }
                let zinv = z.recip();
                let prow = &mut probs[pbase + t * seq..pbase + t * seq + t + 1];
                for j in 0..=t {
                    prow[j] = scores[j] * zinv;
                }
                // ctx_t = sum_j p[t, j] * v_j
                let crow = &mut ctx[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                for j in 0..=t {
                    let p = prow[j];
                    let vrow = &v.data()[(row0 + j) * d + c0..(row0 + j) * d + c0 + dh];
                    for c in 0..dh {
                        crow[c] = crow[c] + p * vrow[c];
                    }
                }
            }
        }
    }
    let ctx = Tensor::from_vec(vec![batch * seq, d], ctx);
    let out = matmul(&ctx, wo)?;
    let tape = AttnTape {
        q,
        k,
        v,
        probs,
        ctx,
    };
    Ok((out, tape))
}

/// Backward of attention. Returns (dxn, dwq, dwk, dwv, dwo).
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<S: Scalar>(
    tape: &AttnTape<S>,
    xn: &Tensor<S>,
    wq: &Tensor<S>,
    wk: &Tensor<S>,
    wv: &Tensor<S>,
    wo: &Tensor<S>,
    dy: &Tensor<S>,
    batch: usize,
    seq: usize,
    n_heads: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = xn.last_dim();
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let dwo = matmul_tn(&tape.ctx, dy)?;
    let dctx = matmul_nt(dy, wo)?;
    let mut dq = vec![S::zero(); batch * seq * d];
    let mut dk = vec![S::zero(); batch * seq * d];
    let mut dv = vec![S::zero(); batch * seq * d];
    for b in 0..batch {
        let row0 = b * seq;
        for h in 0..n_heads {
            let c0 = h * dh;
            let pbase = (b * n_heads + h) * seq * seq;
            for t in 0..seq {
                let prow = &tape.probs[pbase + t * seq..pbase + t * seq + t + 1];
                let dctx_row = &dctx.data()[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                // dp[j] = dctx_t . v_j ; dv_j += p[j] * dctx_t
                let mut dp = vec![S::zero(); t + 1];
                for j in 0..=t {
                    let vrow = &tape.v.data()[(row0 + j) * d + c0..(row0 + j) * d + c0 + dh];
                    let dvrow = &mut dv[(row0 + j) * d + c0..(row0 + j) * d + c0 + dh];
                    let p = prow[j];
                    let mut dot = S::zero();
                    for c in 0..dh {
                        dot = dot + dctx_row[c] * vrow[c];
                        dvrow[c] = dvrow[c] + p * dctx_row[c];
                    }
                    dp[j] = dot;
                }
                // Softmax backward: ds = p * (dp - sum_j dp_j p_j)
                let mut inner = S::zero();
                for j in 0..=t {
                    inner = inner + dp[j] * prow[j];
                }
                // dq_t += sum_j ds_j * k_j * scale ; dk_j += ds_j * q_t * scale
                let qrow = &tape.q.data()[(row0 + t) * d + c0..(row0 + t) * d + c0 + dh];
                let dqrow_start = (row0 + t) * d + c0;
                for j in 0..=t {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    let krow = &tape.k.data()[(row0 + j) * d + c0..(row0 + j) * d + c0 + dh];
                    let dkrow = &mut dk[(row0 + j) * d + c0..(row0 + j) * d + c0 + dh];
                    for c in 0..dh {
                        dkrow[c] = dkrow[c] + ds * qrow[c];
                    }
                    let dqrow = &mut dq[dqrow_start..dqrow_start + dh];
                    for c in 0..dh {
                        dqrow[c] = dqrow[c] + ds * krow[c];
                    }
                }
            }
        }
    }
    let dq = Tensor::from_vec(vec![batch * seq, d], dq);
    let dk = Tensor::from_vec(vec![batch * seq, d], dk);
    let dv = Tensor::from_vec(vec![batch * seq, d], dv);
    let dwq = matmul_tn(xn, &dq)?;
    let dwk = matmul_tn(xn, &dk)?;
    let dwv = matmul_tn(xn, &dv)?;
    let mut dxn = matmul_nt(&dq, wq)?;
    dxn.add_scaled_assign(&matmul_nt(&dk, wk)?, S::one())?;
    dxn.add_scaled_assign(&matmul_nt(&dv, wv)?, S::one())?;
    Ok((dxn, dwq, dwk, dwv, dwo))
}

pub struct SwigluTape<S> {
    /// Gate pre-activation a = xn . w_gate.
    pub gate_pre: Tensor<S>,
    /// Up projection u = xn . w_up.
    pub up: Tensor<S>,
    /// Hidden h = silu(a) * u, input to the down projection.
    pub hidden: Tensor<S>,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    (S::one() + (-x).exp()).recip()
}

/// SwiGLU feed-forward: (silu(xn . w_gate) * (xn . w_up)) . w_down.
pub fn swiglu_fwd<S: Scalar>(
    xn: &Tensor<S>,
    w_gate: &Tensor<S>,
    w_up: &Tensor<S>,
    w_down: &Tensor<S>,
) -> Result<(Tensor<S>, SwigluTape<S>)> {
    let gate_pre = matmul(xn, w_gate)?;
    let up = matmul(xn, w_up)?;
    let mut hidden = vec![S::zero(); gate_pre.len()];
    for i in 0..hidden.len() {
        let a = gate_pre.data()[i];
        hidden[i] = a * sigmoid(a) * up.data()[i];
    }
    let hidden = Tensor::from_vec(gate_pre.shape().to_vec(), hidden);
    let out = matmul(&hidden, w_down)?;
    Ok((
        out,
        SwigluTape {
            gate_pre,
            up,
            hidden,
        },
    ))
}

/// Backward of SwiGLU. Returns (dxn, dw_gate, dw_up, dw_down).
pub fn swiglu_bwd<S: Scalar>(
    tape: &SwigluTape<S>,
    xn: &Tensor<S>,
    w_gate: &Tensor<S>,
    w_up: &Tensor<S>,
    w_down: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let dw_down = matmul_tn(&tape.hidden, dy)?;
    let dh = matmul_nt(dy, w_down)?;
    let mut da = vec![S::zero(); dh.len()];
    let mut du = vec![S::zero(); dh.len()];
    for i in 0..dh.len() {
        let a = tape.gate_pre.data()[i];
        let sg = sigmoid(a);
        let silu = a * sg;
        let dsilu = sg * (S::one() + a * (S::one() - sg));
        let g = dh.data()[i];
        da[i] = g * tape.up.data()[i] * dsilu;
        du[i] = g * silu;
    }
    let da = Tensor::from_vec(dh.shape().to_vec(), da);
    let du = Tensor::from_vec(dh.shape().to_vec(), du);
    let dw_gate = matmul_tn(xn, &da)?;
    let dw_up = matmul_tn(xn, &du)?;
    let mut dxn = matmul_nt(&da, w_gate)?;
    dxn.add_scaled_assign(&matmul_nt(&du, w_up)?, S::one())?;
    Ok((dxn, dw_gate, dw_up, dw_down))
}

/// x0[r, :] = t_s[ids[r], :] + t_perp[ids[r], :] + pos[r % seq, :].
pub fn embedding_fwd<S: Scalar>(
    t_s: &Tensor<S>,
    t_perp: &Tensor<S>,
    pos: &Tensor<S>,
    ids: &[u32],
    seq: usize,
) -> Result<Tensor<S>> {
    let d = t_s.last_dim();
    let vocab = t_s.shape()[0];
    let mut out = vec![S::zero(); ids.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::TargetOutOfRange { id, vocab });
        }
        let ts_row = t_s.row(id as usize);
        let tp_row = t_perp.row(id as usize);
        let p_row = pos.row(r % seq);
        let orow = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            orow[j] = ts_row[j] + tp_row[j] + p_row[j];
        }
    }
    Ok(Tensor::from_vec(vec![ids.len(), d], out))
}

/// Backward of the embedding gather: accumulates into dense gradients for
/// the learnable table and the positional table (the high-rank component is
/// frozen). Rows are visited in ascending order, so accumulation is
/// deterministic.
pub fn embedding_bwd<S: Scalar>(
    dx0: &Tensor<S>,
    ids: &[u32],
    seq: usize,
    dt_s: &mut Tensor<S>,
    dpos: &mut Tensor<S>,
) {
    let d = dx0.last_dim();
    for (r, &id) in ids.iter().enumerate() {
        let grow = &dx0.data()[r * d..(r + 1) * d];
        let trow = dt_s.row_mut(id as usize);
        for j in 0..d {
            trow[j] = trow[j] + grow[j];
        }
        let prow = dpos.row_mut(r % seq);
        for j in 0..d {
            prow[j] = prow[j] + grow[j];
        }
    }
}

/// Mean next-token cross-entropy over all rows. Returns (loss, dlogits).
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<(f64, Tensor<S>)> {
    let vocab = logits.last_dim();
    let rows = logits.len() / vocab;
    if targets.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy",
            msg: format!("{} targets for {} rows", targets.len(), rows),
        });
    }
    let inv_rows = S::from_f64(1.0 / rows as f64);
    let mut dlogits = vec![S::zero(); logits.len()];
    let mut loss = 0.0f64;
    for r in 0..rows {
        let t = targets[r];
        if t as usize >= vocab {
            return Err(Error::TargetOutOfRange { id: t, vocab });
        }
        let lrow = &logits.data()[r * vocab..(r + 1) * vocab];
        let mut m = S::neg_infinity();
        for &v in lrow {
            if v > m {
                m = v;
            }
        }
        let mut z = S::zero();
        for &v in lrow {
            z = z + (v - m).exp();
        }
        let lse = m + z.ln();
        loss += (lse - lrow[t as usize]).as_f64();
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        let zinv = z.recip();
        for j in 0..vocab {
            drow[j] = (lrow[j] - m).exp() * zinv * inv_rows;
        }
        drow[t as usize] = drow[t as usize] - inv_rows;
    }
    Ok((
        loss / rows as f64,
        Tensor::from_vec(logits.shape().to_vec(), dlogits),
    ))
}
