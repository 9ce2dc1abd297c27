//! Micro decoder-only transformer with tape-based reverse-mode
//! differentiation and partitioning into pipeline stages.
//!
//! Blocks are pre-norm: `x + attn(rmsnorm(x))` then `x + swiglu(rmsnorm(x))`.
//! The first stage owns the embedding tables (learnable low-rank part,
//! frozen high-rank part, positional table); the last stage owns the final
//! norm and LM head. Stage boundaries fall only between blocks.

mod checkpoint;
mod config;
pub mod ops;
mod params;

pub use checkpoint::{load_named_tensors, save_checkpoint};
pub use config::ModelConfig;
pub use params::{params_from_named, Grads, LayerIds, Layout, ParamId, Params};

use crate::error::{Error, Result};
use crate::linalg::{gaussian, matmul, matmul_nt, matmul_tn, RngStream, Scalar, Tensor};
use ops::{AttnTape, SwigluTape};

/// Tensor travelling between pipeline stages, plus the token ids receivers
/// need for embedding lookups. `x` is `None` only for the entry packet fed
/// to the first stage.
#[derive(Clone, Debug)]
pub struct ActivationPacket<S> {
    pub x: Option<Tensor<S>>,
    pub token_ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    pub compressed: bool,
}

impl<S: Scalar> ActivationPacket<S> {
    /// Entry packet: token ids only.
    pub fn entry(token_ids: Vec<u32>, batch: usize, seq: usize) -> Self {
        debug_assert_eq!(token_ids.len(), batch * seq);
        Self {
            x: None,
            token_ids,
            batch,
            seq,
            compressed: false,
        }
    }

    pub fn width(&self) -> Option<usize> {
        self.x.as_ref().map(|t| t.last_dim())
    }
}

/// One training batch: `inputs[r]` predicts `targets[r]`, rows are
/// batch-major (`r = b * seq + t`).
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

/// Contiguous block range assigned to one pipeline stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub index: usize,
    pub total: usize,
    pub layers: std::ops::Range<usize>,
}

impl Stage {
    pub fn is_first(&self) -> bool {
        self.index == 0
    }

    pub fn is_last(&self) -> bool {
        self.index + 1 == self.total
    }
}

/// Split `n_layers` into `s` equal stages.
pub fn partition(cfg: &ModelConfig, s: usize) -> Result<Vec<Stage>> {
    if s == 0 {
        return Err(Error::Partition("stage count must be >= 1".into()));
    }
    if !cfg.n_layers.is_multiple_of(s) {
        return Err(Error::Partition(format!(
            "{} layers not divisible into {} stages",
            cfg.n_layers, s
        )));
    }
    let per = cfg.n_layers / s;
    Ok((0..s)
        .map(|i| Stage {
            index: i,
            total: s,
            layers: i * per..(i + 1) * per,
        })
        .collect())
}

/// Split at explicit boundaries: `bounds` lists the end layer of each stage
/// (cumulative, final entry must equal `n_layers`). Empty middle stages are
/// allowed.
pub fn partition_with_splits(cfg: &ModelConfig, bounds: &[usize]) -> Result<Vec<Stage>> {
    if bounds.is_empty() || *bounds.last().unwrap() != cfg.n_layers {
        return Err(Error::Partition(format!(
            "split bounds {bounds:?} must end at {}",
            cfg.n_layers
        )));
    }
    let mut start = 0;
    let mut stages = Vec::with_capacity(bounds.len());
    for (i, &end) in bounds.iter().enumerate() {
        if end < start {
            return Err(Error::Partition(format!("split bounds {bounds:?} not monotone")));
        }
        stages.push(Stage {
            index: i,
            total: bounds.len(),
            layers: start..end,
        });
        start = end;
    }
    Ok(stages)
}

/// Saved state from one block's forward pass.
pub struct BlockTape<S> {
    pub x_in: Tensor<S>,
    pub attn_inv: Vec<S>,
    pub attn_normed: Tensor<S>,
    pub attn: AttnTape<S>,
    pub h1: Tensor<S>,
    pub ffn_inv: Vec<S>,
    pub ffn_normed: Tensor<S>,
    pub ffn: SwigluTape<S>,
}

pub struct FinalTape<S> {
    pub x_in: Tensor<S>,
    pub inv: Vec<S>,
    pub normed: Tensor<S>,
}

/// Saved state from one stage's forward pass; single-owner.
pub struct StageTape<S> {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<u32>,
    pub blocks: Vec<BlockTape<S>>,
    pub final_tape: Option<FinalTape<S>>,
}

/// Output of a stage: the next activation packet, or logits for the last
/// stage.
pub enum StageOutput<S> {
    Activation(ActivationPacket<S>),
    Logits(Tensor<S>),
}

/// Full model: configuration, canonical parameter set, and the frozen
/// high-rank embedding buffer (zeros when no subspace split is active).
#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Params<S>,
    pub t_perp: Tensor<S>,
}

const EMBED_STD: f64 = 0.02;

impl<S: Scalar> Model<S> {
    /// Deterministic initialization: one rng stream per tensor, residual
    /// write projections scaled down by sqrt(2 * n_layers).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, mut params) = Layout::build::<S>(cfg);
        let resid_std = EMBED_STD / (2.0 * cfg.n_layers as f64).sqrt();
        for i in 0..params.len() {
            let id = ParamId(i);
            let name = params.name(id).to_string();
            let shape = params.get(id).shape().to_vec();
            if name.ends_with(".g") {
                continue; // norm gains stay at one
            }
            let std = if name.ends_with(".wo") || name.ends_with(".w_down") {
                resid_std
            } else {
                EMBED_STD
            };
            let mut rng = RngStream::new(seed, i as u64);
            let t: Tensor<S> = gaussian(&mut rng, &shape);
            *params.get_mut(id) = t.scale(S::from_f64(std));
        }
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            params,
            t_perp: Tensor::zeros(&[cfg.vocab, cfg.d_model]),
        })
    }

    /// Logical embedding table `TE = T_S + T_perp`.
    pub fn te(&self) -> Tensor<S> {
        self.params
            .get(self.layout.t_s)
            .add(&self.t_perp)
            .expect("t_s and t_perp share a shape")
    }

    /// Extract one stage's named parameters (first stage carries the
    /// embedding tables, last stage the final norm and head).
    pub fn stage_params(&self, stage: &Stage) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        let mut take = |id: ParamId| {
            out.push((self.params.name(id).to_string(), self.params.get(id).clone()));
        };
        if stage.is_first() {
            take(self.layout.t_s);
            take(self.layout.pos);
        }
        for l in stage.layers.clone() {
            let ids = &self.layout.layers[l];
            for id in [
                ids.attn_norm,
                ids.wq,
                ids.wk,
                ids.wv,
                ids.wo,
                ids.ffn_norm,
                ids.w_gate,
                ids.w_up,
                ids.w_down,
            ] {
                take(id);
            }
        }
        if stage.is_last() {
            take(self.layout.final_norm);
            take(self.layout.head);
        }
        out
    }

    /// Run one stage forward. Non-first stages require an uncompressed
    /// packet of width `d_model` (decompression happens before this call).
    pub fn forward_stage(
        &self,
        stage: &Stage,
        pkt: &ActivationPacket<S>,
    ) -> Result<(StageOutput<S>, StageTape<S>)> {
        let d = self.cfg.d_model;
        let mut x = if stage.is_first() {
            if pkt.x.is_some() {
                return Err(Error::Dimension {
                    op: "forward_stage",
                    msg: "first stage expects a token-id entry packet".into(),
                });
            }
            ops::embedding_fwd(
                self.params.get(self.layout.t_s),
                &self.t_perp,
                self.params.get(self.layout.pos),
                &pkt.token_ids,
                pkt.seq,
            )?
        } else {
            let x = pkt.x.as_ref().ok_or_else(|| Error::Dimension {
                op: "forward_stage",
                msg: "non-first stage requires an activation tensor".into(),
            })?;
            if pkt.compressed || x.last_dim() != d {
                return Err(Error::Dimension {
                    op: "forward_stage",
                    msg: format!(
                        "expected uncompressed width {d}, got width {} (compressed={})",
                        x.last_dim(),
                        pkt.compressed
                    ),
                });
            }
            x.clone()
        };

        let mut blocks = Vec::with_capacity(stage.layers.len());
        for l in stage.layers.clone() {
            let ids = &self.layout.layers[l];
            let (attn_normed, attn_inv) =
                ops::rmsnorm_fwd(&x, self.params.get(ids.attn_norm));
            let (attn_out, attn_tape) = ops::attention_fwd(
                &attn_normed,
                self.params.get(ids.wq),
                self.params.get(ids.wk),
                self.params.get(ids.wv),
                self.params.get(ids.wo),
                pkt.batch,
                pkt.seq,
                self.cfg.n_heads,
            )?;
            let mut h1 = x.clone();
            h1.add_scaled_assign(&attn_out, S::one())?;
            let (ffn_normed, ffn_inv) = ops::rmsnorm_fwd(&h1, self.params.get(ids.ffn_norm));
            let (ffn_out, ffn_tape) = ops::swiglu_fwd(
                &ffn_normed,
                self.params.get(ids.w_gate),
                self.params.get(ids.w_up),
                self.params.get(ids.w_down),
            )?;
            let mut h2 = h1.clone();
            h2.add_scaled_assign(&ffn_out, S::one())?;
            blocks.push(BlockTape {
                x_in: x,
                attn_inv,
                attn_normed,
                attn: attn_tape,
                h1,
                ffn_inv,
                ffn_normed,
                ffn: ffn_tape,
            });
            x = h2;
        }

        if !x.all_finite() {
            return Err(Error::NumericalFailure {
                replica: 0,
                stage: stage.index,
                msg: "non-finite activation".into(),
            });
        }

        let mut tape = StageTape {
            batch: pkt.batch,
            seq: pkt.seq,
            token_ids: pkt.token_ids.clone(),
            blocks,
            final_tape: None,
        };

        if stage.is_last() {
            let (normed, inv) = ops::rmsnorm_fwd(&x, self.params.get(self.layout.final_norm));
            let logits = matmul(&normed, self.params.get(self.layout.head))?;
            tape.final_tape = Some(FinalTape {
                x_in: x,
                inv,
                normed,
            });
            Ok((StageOutput::Logits(logits), tape))
        } else {
            let out = ActivationPacket {
                x: Some(x),
                token_ids: pkt.token_ids.clone(),
                batch: pkt.batch,
                seq: pkt.seq,
                compressed: false,
            };
            Ok((StageOutput::Activation(out), tape))
        }
    }

    /// Run one stage backward. `grad_in` is `dlogits` for the last stage,
    /// otherwise the gradient w.r.t. the stage's output activation. Returns
    /// the gradient w.r.t. the stage's input activation (for the first stage
    /// that is the gradient at the embedding output, which has no consumer).
    /// Parameter gradients accumulate into `grads`.
    pub fn backward_stage(
        &self,
        stage: &Stage,
        tape: &StageTape<S>,
        grad_in: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let mut dx = if stage.is_last() {
            let ft = tape.final_tape.as_ref().ok_or_else(|| Error::Dimension {
                op: "backward_stage",
                msg: "missing final tape for last stage".into(),
            })?;
            if grad_in.last_dim() != self.cfg.vocab {
                return Err(Error::ShapeMismatch {
                    op: "backward_stage",
                    lhs: grad_in.shape().to_vec(),
                    rhs: vec![tape.batch * tape.seq, self.cfg.vocab],
                });
            }
            let head = self.params.get(self.layout.head);
            grads
                .get_mut(self.layout.head)
                .add_scaled_assign(&matmul_tn(&ft.normed, grad_in)?, S::one())?;
            let dnormed = matmul_nt(grad_in, head)?;
            let (dx, dg) = ops::rmsnorm_bwd(
                &ft.x_in,
                self.params.get(self.layout.final_norm),
                &ft.inv,
                &dnormed,
            );
            grads
                .get_mut(self.layout.final_norm)
                .add_scaled_assign(&dg, S::one())?;
            dx
        } else {
            if grad_in.last_dim() != self.cfg.d_model {
                return Err(Error::ShapeMismatch {
                    op: "backward_stage",
                    lhs: grad_in.shape().to_vec(),
                    rhs: vec![tape.batch * tape.seq, self.cfg.d_model],
                });
            }
            grad_in.clone()
        };

        for (l, bt) in stage.layers.clone().zip(&tape.blocks).rev() {
            let ids = &self.layout.layers[l];
            // h2 = h1 + ffn(ffn_norm(h1)); dx is d h2.
            let (dffn_normed, dw_gate, dw_up, dw_down) = ops::swiglu_bwd(
                &bt.ffn,
                &bt.ffn_normed,
                self.params.get(ids.w_gate),
                self.params.get(ids.w_up),
                self.params.get(ids.w_down),
                &dx,
            )?;
            grads.get_mut(ids.w_gate).add_scaled_assign(&dw_gate, S::one())?;
            grads.get_mut(ids.w_up).add_scaled_assign(&dw_up, S::one())?;
            grads.get_mut(ids.w_down).add_scaled_assign(&dw_down, S::one())?;
            let (dh1_norm, dg_ffn) = ops::rmsnorm_bwd(
                &bt.h1,
                self.params.get(ids.ffn_norm),
                &bt.ffn_inv,
                &dffn_normed,
            );
            grads.get_mut(ids.ffn_norm).add_scaled_assign(&dg_ffn, S::one())?;
            let mut dh1 = dx;
            dh1.add_scaled_assign(&dh1_norm, S::one())?;

            // h1 = x + attn(attn_norm(x)); dh1 is d h1.
            let (dattn_normed, dwq, dwk, dwv, dwo) = ops::attention_bwd(
                &bt.attn,
                &bt.attn_normed,
                self.params.get(ids.wq),
                self.params.get(ids.wk),
                self.params.get(ids.wv),
                self.params.get(ids.wo),
                &dh1,
                tape.batch,
                tape.seq,
                self.cfg.n_heads,
            )?;
            grads.get_mut(ids.wq).add_scaled_assign(&dwq, S::one())?;
            grads.get_mut(ids.wk).add_scaled_assign(&dwk, S::one())?;
            grads.get_mut(ids.wv).add_scaled_assign(&dwv, S::one())?;
            grads.get_mut(ids.wo).add_scaled_assign(&dwo, S::one())?;
            let (dx_norm, dg_attn) = ops::rmsnorm_bwd(
                &bt.x_in,
                self.params.get(ids.attn_norm),
                &bt.attn_inv,
                &dattn_normed,
            );
            grads.get_mut(ids.attn_norm).add_scaled_assign(&dg_attn, S::one())?;
            let mut dxi = dh1;
            dxi.add_scaled_assign(&dx_norm, S::one())?;
            dx = dxi;
        }

        if stage.is_first() {
            let mut dts = Tensor::zeros(self.params.get(self.layout.t_s).shape());
            let mut dpos = Tensor::zeros(self.params.get(self.layout.pos).shape());
            ops::embedding_bwd(&dx, &tape.token_ids, tape.seq, &mut dts, &mut dpos);
            grads.get_mut(self.layout.t_s).add_scaled_assign(&dts, S::one())?;
            grads.get_mut(self.layout.pos).add_scaled_assign(&dpos, S::one())?;
        }
        Ok(dx)
    }

    /// Monolithic forward to logits (single implicit stage).
    pub fn forward_logits(&self, batch: &Batch) -> Result<Tensor<S>> {
        let stages = partition(&self.cfg, 1)?;
        let pkt = ActivationPacket::entry(batch.inputs.clone(), batch.batch, batch.seq);
        match self.forward_stage(&stages[0], &pkt)? {
            (StageOutput::Logits(l), _) => Ok(l),
            _ => unreachable!("single stage must emit logits"),
        }
    }

    /// Monolithic loss and parameter gradients for one batch.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Grads<S>)> {
        let stages = partition(&self.cfg, 1)?;
        let pkt = ActivationPacket::entry(batch.inputs.clone(), batch.batch, batch.seq);
        let (out, tape) = self.forward_stage(&stages[0], &pkt)?;
        let logits = match out {
            StageOutput::Logits(l) => l,
            _ => unreachable!(),
        };
        let (loss, dlogits) = ops::cross_entropy(&logits, &batch.targets)?;
        let mut grads = self.params.zeros_like();
        self.backward_stage(&stages[0], &tape, &dlogits, &mut grads)?;
        Ok((loss, grads))
    }

    /// Evaluation loss (forward only).
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let logits = self.forward_logits(batch)?;
        Ok(ops::cross_entropy(&logits, &batch.targets)?.0)
    }
}

/// Reassemble a full parameter set from per-stage extractions.
pub fn reassemble<S: Scalar>(
    cfg: &ModelConfig,
    pieces: Vec<Vec<(String, Tensor<S>)>>,
) -> Result<Params<S>> {
    params_from_named(cfg, pieces.into_iter().flatten().collect())
}
