//! Heterogeneous run orchestration: M replicas, each a monolithic worker or
//! an S-stage pipeline with optionally subspace-compressed inter-stage
//! channels, synchronized by the outer loop with post-sync embedding repair.

pub mod data;
mod runner;

pub use runner::{run_experiment, RunOutcome};

use crate::error::{Error, Result};
use crate::linalg::{Scalar, Tensor};
use crate::model::{Layout, ModelConfig};
use crate::perfmodel::{HardwareSpec, LinkSpec};
use crate::sparseloco::{InnerOptConfig, OuterConfig};
use crate::subspace::{project, ProjectionBasis};
use serde::{Deserialize, Serialize};

/// One replica's deployment shape.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReplicaSpec {
    pub id: usize,
    /// Subspace-compressed inter-stage channels.
    pub pp_compressed: bool,
    /// Pipeline stages (1 = monolithic).
    pub stages: usize,
    /// Compression ratio when compressed (k = round(k_over_d * d)).
    pub k_over_d: f64,
    pub shard_id: usize,
}

impl ReplicaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config(format!("replica {}: zero stages", self.id)));
        }
        if self.pp_compressed {
            if self.stages < 2 {
                return Err(Error::Config(format!(
                    "replica {}: compression requires >= 2 stages",
                    self.id
                )));
            }
            if !(self.k_over_d > 0.0 && self.k_over_d <= 1.0) {
                return Err(Error::Config(format!(
                    "replica {}: k_over_d {} outside (0, 1]",
                    self.id, self.k_over_d
                )));
            }
        }
        Ok(())
    }
}

/// Root seeds; every stream in a run derives from one of these.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub basis: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 1,
            data: 2,
            basis: 3,
        }
    }
}

/// Link/hardware assumptions used only for the per-round wall-clock
/// estimates in run reports.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfAssumptions {
    pub link: LinkSpec,
    pub hw: HardwareSpec,
}

/// Full experiment description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub replicas: Vec<ReplicaSpec>,
    pub model: ModelConfig,
    pub outer: OuterConfig,
    pub inner: InnerOptConfig,
    pub seeds: Seeds,
    /// Sequences per inner-step batch, per replica.
    pub batch_size: usize,
    /// Held-out batches averaged for the per-round eval loss.
    pub eval_batches: usize,
    /// Train fraction of the corpus (rest is the eval split).
    pub train_frac: f64,
    /// Post-sync embedding re-projection (on by default; ablation switch).
    pub te_adaptation: bool,
    /// Project residual-stream write matrices of compressed replicas after
    /// each inner step (off by default; ablation switch).
    pub weight_projection: bool,
    pub perf: PerfAssumptions,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.outer.validate()?;
        if self.replicas.is_empty() {
            return Err(Error::Config("no replicas".into()));
        }
        if self.replicas.len() != self.outer.replicas {
            return Err(Error::Config(format!(
                "outer config expects {} replicas, cluster lists {}",
                self.outer.replicas,
                self.replicas.len()
            )));
        }
        for (i, spec) in self.replicas.iter().enumerate() {
            if spec.id != i {
                return Err(Error::Config("replica ids must be 0..M in order".into()));
            }
            spec.validate()?;
            if !self.model.n_layers.is_multiple_of(spec.stages) {
                return Err(Error::Config(format!(
                    "replica {i}: {} layers not divisible into {} stages",
                    self.model.n_layers, spec.stages
                )));
            }
        }
        if self.batch_size == 0 || self.eval_batches == 0 {
            return Err(Error::Config("batch_size and eval_batches must be positive".into()));
        }
        self.subspace_k()?;
        Ok(())
    }

    /// Fraction of replicas running uncompressed.
    pub fn alpha(&self) -> f64 {
        let uncompressed = self.replicas.iter().filter(|r| !r.pp_compressed).count();
        uncompressed as f64 / self.replicas.len() as f64
    }

    /// Shared subspace width, if any replica compresses. All compressed
    /// replicas must agree (one global basis).
    pub fn subspace_k(&self) -> Result<Option<usize>> {
        let mut k: Option<usize> = None;
        for spec in self.replicas.iter().filter(|r| r.pp_compressed) {
            let this = (spec.k_over_d * self.model.d_model as f64).round() as usize;
            if this == 0 || this > self.model.d_model {
                return Err(Error::Config(format!(
                    "replica {}: k_over_d {} gives k={this} outside [1, d]",
                    spec.id, spec.k_over_d
                )));
            }
            match k {
                None => k = Some(this),
                Some(prev) if prev != this => {
                    return Err(Error::Config(
                        "compressed replicas must share one k_over_d (single global basis)".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(k)
    }
}

/// Named deployment settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-precision inter-stage traffic on every replica.
    Baseline,
    /// Subspace compression on every replica.
    PpCompress,
    /// Odd-indexed replicas compressed, even-indexed full precision.
    HetHalf,
    /// Per-step synchronization (H = 1) with dense pseudo-gradients.
    AdamwDdp,
}

impl Preset {
    /// Replica layout for this preset.
    pub fn replica_specs(self, m: usize, stages: usize, k_over_d: f64) -> Result<Vec<ReplicaSpec>> {
        if m == 0 {
            return Err(Error::Config("preset requires M >= 1".into()));
        }
        if self == Preset::HetHalf && !m.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "het_half splits replicas in half: M={m} must be even"
            )));
        }
        Ok((0..m)
            .map(|id| {
                let compressed = match self {
                    Preset::Baseline | Preset::AdamwDdp => false,
                    Preset::PpCompress => true,
                    Preset::HetHalf => id % 2 == 1,
                };
                ReplicaSpec {
                    id,
                    pp_compressed: compressed,
                    stages,
                    k_over_d,
                    shard_id: id,
                }
            })
            .collect())
    }

    /// Outer-loop adjustments implied by the preset.
    pub fn adjust_outer(self, outer: &mut OuterConfig) {
        if self == Preset::AdamwDdp {
            outer.h = 1;
            outer.dp_topk = false;
            outer.eta = 1.0;
        }
    }
}

/// Decomposition of an aggregated pseudo-gradient into in-subspace and bias
/// components plus the heterogeneous mixture.
#[derive(Clone, Debug)]
pub struct BiasReport<S> {
    pub alpha: f64,
    pub delta_proj: Vec<Tensor<S>>,
    pub bias: Vec<Tensor<S>>,
    pub delta_het: Vec<Tensor<S>>,
    pub norm_delta: f64,
    pub norm_proj: f64,
    pub norm_bias: f64,
    pub norm_het_minus_delta: f64,
    /// Max divergence between the two algebraic forms of the mixture.
    pub identity_err: f64,
}

/// Compute the projected pseudo-gradient, the compression bias
/// `B = delta - proj(delta)`, and the heterogeneous mixture
/// `alpha * delta + (1 - alpha) * proj(delta)`, verifying it equals
/// `delta - (1 - alpha) * B`. `stream_coords[i]` marks tensors whose rows
/// live in residual-stream coordinates (those are projected; the rest pass
/// through).
pub fn bias_decompose<S: Scalar>(
    delta_star: &[Tensor<S>],
    stream_coords: &[bool],
    basis: &ProjectionBasis<S>,
    alpha: f64,
) -> Result<BiasReport<S>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if delta_star.len() != stream_coords.len() {
        return Err(Error::Dimension {
            op: "bias_decompose",
            msg: "mask arity mismatch".into(),
        });
    }
    let a = S::from_f64(alpha);
    let one_minus = S::from_f64(1.0 - alpha);
    let mut delta_proj = Vec::with_capacity(delta_star.len());
    let mut bias = Vec::with_capacity(delta_star.len());
    let mut delta_het = Vec::with_capacity(delta_star.len());
    let mut identity_err = 0.0f64;
    for (t, &in_stream) in delta_star.iter().zip(stream_coords) {
        let proj = if in_stream { project(t, basis)? } else { t.clone() };
        let b = t.sub(&proj)?;
        let het = t.scale(a).add(&proj.scale(one_minus))?;
        let alt = t.sub(&b.scale(one_minus))?;
        identity_err = identity_err.max(het.max_abs_diff(&alt));
        delta_proj.push(proj);
        bias.push(b);
        delta_het.push(het);
    }
    let tol = if S::PRECISION_TAG == 4 { 1e-4 } else { 1e-10 };
    if identity_err > tol {
        return Err(Error::Config(format!(
            "heterogeneous mixture identity diverged: {identity_err:e}"
        )));
    }
    let frob = |ts: &[Tensor<S>]| {
        ts.iter()
            .map(|t| t.frob_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let het_minus_delta: Vec<Tensor<S>> = delta_het
        .iter()
        .zip(delta_star)
        .map(|(h, d)| h.sub(d).expect("shapes match"))
        .collect();
    Ok(BiasReport {
        alpha,
        norm_delta: frob(delta_star),
        norm_proj: frob(&delta_proj),
        norm_bias: frob(&bias),
        norm_het_minus_delta: frob(&het_minus_delta),
        delta_proj,
        bias,
        delta_het,
        identity_err,
    })
}

/// Mask for [`bias_decompose`] over a model's canonical parameter order:
/// true for tensors whose rows live in residual-stream coordinates (the
/// learnable embedding, the positional table, and every attention/FFN
/// output projection).
pub fn stream_coordinate_mask(layout: &Layout, n_params: usize) -> Vec<bool> {
    let mut mask = vec![false; n_params];
    mask[layout.t_s.0] = true;
    mask[layout.pos.0] = true;
    for layer in &layout.layers {
        mask[layer.wo.0] = true;
        mask[layer.w_down.0] = true;
    }
    mask
}

/// Per-round metrics record (one JSON object per round in the metrics
/// stream).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub replica_mean_loss: Vec<f64>,
    pub eval_loss: f64,
    pub pp_bytes: u64,
    pub dp_bytes: u64,
    pub wallclock_estimate_s: f64,
    /// Frobenius gap between compressed- and uncompressed-replica mean
    /// contributions (heterogeneous runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub het_contribution_gap: Option<f64>,
}

/// Full run output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub alpha: f64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub pp_bytes_total: u64,
    pub dp_bytes_total: u64,
    pub wallclock_estimate_total_s: f64,
    pub rounds: Vec<RoundRecord>,
}

impl RunReport {
    /// Fixed-schema CSV: round,eval_loss,pp_bytes,dp_bytes.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("round,eval_loss,pp_bytes,dp_bytes\n");
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{:.9},{},{}\n",
                r.round, r.eval_loss, r.pp_bytes, r.dp_bytes
            ));
        }
        out
    }

    /// One JSON object per round, newline-delimited.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}
