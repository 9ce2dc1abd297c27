//! The SparseLoCo optimizer loop: AdamW inner steps with global-norm
//! clipping, pseudo-gradient formation after H local steps, error-feedback
//! top-k compression, fixed-order mean aggregation, and a plain outer SGD
//! step (no outer momentum; error feedback takes its place).

use crate::error::{Error, Result};
use crate::linalg::{Scalar, Tensor};
use crate::model::{Grads, Model, Params};
use crate::topk::{
    densify, ef_accumulate, ef_subtract, quantize, topk_chunks, ChunkSpec, ErrorAccumulator,
    SparseDelta,
};
use serde::{Deserialize, Serialize};

/// Inner AdamW hyperparameters and learning-rate schedule (linear warmup,
/// cosine decay to `final_lr_frac` of peak at `total_steps`).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerOptConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub final_lr_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for InnerOptConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            warmup_steps: 500,
            total_steps: 10_000,
            final_lr_frac: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Learning rate for a 0-based step index.
pub fn lr_at(step: usize, cfg: &InnerOptConfig) -> f64 {
    let final_lr = cfg.lr_peak * cfg.final_lr_frac;
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps || cfg.total_steps <= cfg.warmup_steps {
        return final_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    final_lr + (cfg.lr_peak - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moment state. The step counter is global across outer rounds:
/// moments persist through synchronization.
#[derive(Clone, Debug)]
pub struct InnerOptState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: usize,
    pub cfg: InnerOptConfig,
}

impl<S: Scalar> InnerOptState<S> {
    pub fn new(params: &Params<S>, cfg: InnerOptConfig) -> Self {
        Self {
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
            cfg,
        }
    }
}

/// Scale gradients so the global L2 norm does not exceed `clip`. Returns the
/// pre-clip norm (accumulated in f64, flat order).
pub fn clip_global_norm<S: Scalar>(grads: &mut Grads<S>, clip: f64) -> f64 {
    let mut sq = 0.0f64;
    for t in grads.tensors() {
        for &g in t.data() {
            let x = g.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let scale = S::from_f64(clip / norm);
        for t in grads.tensors_mut() {
            for g in t.data_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay (rank >= 2 tensors only) and
/// bias-corrected moments. Uses `lr_at(state.step)` and then advances the
/// counter.
pub fn adamw_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &Grads<S>,
    state: &mut InnerOptState<S>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            msg: "parameter/gradient arity mismatch".into(),
        });
    }
    let cfg = state.cfg;
    let lr = lr_at(state.step, &cfg);
    let t = (state.step + 1) as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t));
    let eps = S::from_f64(cfg.eps);
    let lr_s = S::from_f64(lr);
    for i in 0..params.len() {
        let id = crate::model::ParamId(i);
        let decay = params.get(id).rank() >= 2;
        let wd = if decay {
            S::from_f64(1.0 - lr * cfg.weight_decay)
        } else {
            one
        };
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] * wd - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Outer-loop configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterConfig {
    /// Inner steps per round.
    pub h: usize,
    /// Outer SGD learning rate.
    pub eta: f64,
    /// Error-feedback decay.
    pub beta: f64,
    pub chunk_len: usize,
    pub k_per_chunk: usize,
    /// Replica count M.
    pub replicas: usize,
    /// Total outer rounds.
    pub rounds: usize,
    /// Top-k compression of the pseudo-gradient exchange (uniform across
    /// replicas). Disabled only by the per-step data-parallel preset.
    pub dp_topk: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            h: 10,
            eta: 1.0,
            beta: 0.95,
            chunk_len: 4096,
            k_per_chunk: 32,
            replicas: 4,
            rounds: 60,
            dp_topk: true,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.replicas == 0 || self.eta <= 0.0 {
            return Err(Error::Config("outer config requires h >= 1, M >= 1, eta > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1)", self.beta)));
        }
        self.chunk_spec().map(|_| ())
    }

    pub fn chunk_spec(&self) -> Result<ChunkSpec> {
        ChunkSpec::new(self.chunk_len, self.k_per_chunk)
    }
}

/// One data-parallel replica: model copy, optimizer state, per-parameter
/// error accumulators, and its inner-loss trace for the current round.
#[derive(Clone, Debug)]
pub struct ReplicaState<S: Scalar> {
    pub id: usize,
    pub model: Model<S>,
    pub opt: InnerOptState<S>,
    pub err: Vec<ErrorAccumulator<S>>,
    pub shard_id: usize,
    pub pp_compressed: bool,
    pub round_losses: Vec<f64>,
}

impl<S: Scalar> ReplicaState<S> {
    pub fn new(
        id: usize,
        model: Model<S>,
        opt_cfg: InnerOptConfig,
        ef_beta: f64,
        pp_compressed: bool,
    ) -> Self {
        let err = model
            .params
            .tensors()
            .iter()
            .map(|t| ErrorAccumulator::zeros(t.shape(), ef_beta))
            .collect();
        let opt = InnerOptState::new(&model.params, opt_cfg);
        Self {
            id,
            model,
            opt,
            err,
            shard_id: id,
            pp_compressed,
            round_losses: Vec::new(),
        }
    }

    /// Adopt freshly synchronized global state (parameters and the frozen
    /// high-rank embedding buffer, which re-projection may have shifted).
    pub fn adopt_global(&mut self, params: &Params<S>, t_perp: &Tensor<S>) {
        self.model.params = params.clone();
        self.model.t_perp = t_perp.clone();
    }
}

/// Apply one inner update: validate the loss, clip, AdamW, record the loss.
pub fn inner_step<S: Scalar>(
    replica: &mut ReplicaState<S>,
    mut grads: Grads<S>,
    loss: f64,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            replica: replica.id,
            stage: 0,
            msg: format!("non-finite loss {loss}"),
        });
    }
    let norm = clip_global_norm(&mut grads, replica.opt.cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::NumericalFailure {
            replica: replica.id,
            stage: 0,
            msg: "non-finite gradient norm".into(),
        });
    }
    adamw_step(&mut replica.model.params, &grads, &mut replica.opt)?;
    replica.round_losses.push(loss);
    Ok(())
}

/// Pseudo-gradient after H local steps: `theta_prev_global - theta_replica`,
/// per parameter tensor.
pub fn pseudo_gradient<S: Scalar>(
    prev_global: &Params<S>,
    current: &Params<S>,
) -> Result<Vec<Tensor<S>>> {
    if prev_global.len() != current.len() {
        return Err(Error::Dimension {
            op: "pseudo_gradient",
            msg: "parameter arity mismatch".into(),
        });
    }
    prev_global
        .tensors()
        .iter()
        .zip(current.tensors())
        .map(|(p, c)| p.sub(c))
        .collect()
}

/// Error-feedback compression of one replica's pseudo-gradients:
/// `e <- beta e + delta; d_hat = Q(top_k(e)); e <- e - d_hat`.
pub fn compress_pseudograd<S: Scalar>(
    err: &mut [ErrorAccumulator<S>],
    deltas: &[Tensor<S>],
    spec: ChunkSpec,
) -> Result<Vec<SparseDelta<S>>> {
    if err.len() != deltas.len() {
        return Err(Error::Dimension {
            op: "compress_pseudograd",
            msg: "accumulator/delta arity mismatch".into(),
        });
    }
    let mut out = Vec::with_capacity(deltas.len());
    for (acc, delta) in err.iter_mut().zip(deltas) {
        ef_accumulate(acc, delta)?;
        let sd = quantize(topk_chunks(&acc.e, spec));
        ef_subtract(acc, &sd)?;
        out.push(sd);
    }
    Ok(out)
}

/// One replica's contribution to the outer average.
#[derive(Clone, Debug)]
pub enum Contribution<S> {
    Sparse(Vec<SparseDelta<S>>),
    Dense(Vec<Tensor<S>>),
}

impl<S: Scalar> Contribution<S> {
    /// Bytes this contribution occupies on the wire (sparse wire format, or
    /// raw 32-bit floats when dense).
    pub fn wire_bytes(&self) -> u64 {
        match self {
            Contribution::Sparse(sds) => sds.iter().map(|sd| sd.wire_bytes() as u64).sum(),
            Contribution::Dense(ts) => ts.iter().map(|t| t.len() as u64 * 4).sum(),
        }
    }
}

/// Average the contributions in fixed replica-index order and apply the
/// outer SGD step: `theta <- theta - eta * mean(delta_hat)`.
pub fn outer_round<S: Scalar>(
    global: &mut Params<S>,
    contributions: &[Contribution<S>],
    eta: f64,
) -> Result<()> {
    let m = contributions.len();
    if m == 0 {
        return Err(Error::Sync("no replica contributions".into()));
    }
    let inv_m = S::from_f64(1.0 / m as f64);
    let eta_s = S::from_f64(eta);
    for i in 0..global.len() {
        let id = crate::model::ParamId(i);
        let len = global.get(id).len();
        let mut acc = vec![S::zero(); len];
        for contribution in contributions {
            match contribution {
                Contribution::Sparse(sds) => {
                    let sd = sds.get(i).ok_or_else(|| {
                        Error::Sync(format!("missing sparse delta for tensor {i}"))
                    })?;
                    if sd.total_len != len {
                        return Err(Error::ShapeMismatch {
                            op: "outer_round",
                            lhs: vec![sd.total_len],
                            rhs: vec![len],
                        });
                    }
                    let dense = densify(sd);
                    for (a, &d) in acc.iter_mut().zip(dense.data()) {
                        *a = *a + d;
                    }
                }
                Contribution::Dense(ts) => {
                    let t = ts
                        .get(i)
                        .ok_or_else(|| Error::Sync(format!("missing dense delta for tensor {i}")))?;
                    if t.len() != len {
                        return Err(Error::ShapeMismatch {
                            op: "outer_round",
                            lhs: t.shape().to_vec(),
                            rhs: global.get(id).shape().to_vec(),
                        });
                    }
                    for (a, &d) in acc.iter_mut().zip(t.data()) {
                        *a = *a + d;
                    }
                }
            }
        }
        let p = global.get_mut(id).data_mut();
        for (pj, aj) in p.iter_mut().zip(&acc) {
            *pj = *pj - eta_s * (*aj * inv_m);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Precision;
    use crate::model::{Batch, ModelConfig};

    fn one_param(v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(vec![1, 1], vec![v]));
        p
    }

    #[test]
    fn adamw_matches_hand_formula() {
        let cfg = InnerOptConfig {
            lr_peak: 1e-3,
            warmup_steps: 0,
            total_steps: 1000,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = one_param(0.0);
        let mut grads = params.zeros_like();
        grads.tensors_mut()[0].data_mut()[0] = 0.1;
        let mut state = InnerOptState::new(&params, cfg);
        adamw_step(&mut params, &grads, &mut state).unwrap();

        // Independent evaluation of the bias-corrected AdamW formula.
        let g = 0.1f64;
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.95) * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(1));
        let v_hat = v / (1.0 - 0.95f64.powi(1));
        let expected = -cfg.lr_peak * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((params.tensors()[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = InnerOptConfig {
            warmup_steps: 0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = one_param(0.7);
        let grads = params.zeros_like();
        let mut state = InnerOptState::new(&params, cfg);
        for _ in 0..3 {
            adamw_step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params.tensors()[0].data()[0], 0.7);
    }

    #[test]
    fn global_norm_clipping() {
        let mut grads = Params::new();
        grads.push("a", Tensor::from_vec(vec![2], vec![6.0f64, 0.0]));
        grads.push("b", Tensor::from_vec(vec![1], vec![8.0f64]));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 10.0).abs() < 1e-12);
        let clipped: f64 = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
        // Below the threshold nothing changes.
        let mut small = Params::new();
        small.push("a", Tensor::from_vec(vec![1], vec![0.5f64]));
        let n2 = clip_global_norm(&mut small, 1.0);
        assert_eq!(n2, 0.5);
        assert_eq!(small.tensors()[0].data()[0], 0.5);
    }

    #[test]
    fn clip_applies_before_moments() {
        let cfg = InnerOptConfig {
            warmup_steps: 0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let model_cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2.0,
            vocab: 8,
            seq_len: 4,
            precision: Precision::F64,
        };
        let model = Model::<f64>::init(&model_cfg, 1).unwrap();
        let mut replica = ReplicaState::new(0, model, cfg, 0.95, false);
        // Gradient of norm 10 on a single coordinate.
        let mut grads = replica.model.params.zeros_like();
        grads.tensors_mut()[2].data_mut()[0] = 10.0;
        inner_step(&mut replica, grads, 1.0).unwrap();
        // First moment should reflect the clipped gradient (norm 1).
        let m = replica.opt.m[2].data()[0];
        assert!((m - (1.0 - 0.9) * 1.0).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_reference_points() {
        let cfg = InnerOptConfig {
            lr_peak: 2.0,
            warmup_steps: 10,
            total_steps: 110,
            final_lr_frac: 0.1,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(10, &cfg) - 2.0).abs() < 1e-15);
        // Midpoint of the cosine phase: final + (peak - final) / 2.
        let mid = lr_at(60, &cfg);
        let expected = 0.2 + (2.0 - 0.2) * 0.5;
        assert!((mid - expected).abs() < 1e-12);
        // Past the end: floor at final lr.
        assert!((lr_at(1000, &cfg) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn pseudo_gradient_basics() {
        let prev = one_param(1.0);
        let cur = one_param(1.0);
        let zero = pseudo_gradient(&prev, &cur).unwrap();
        assert_eq!(zero[0].data()[0], 0.0);

        let cur2 = one_param(0.25);
        let d = pseudo_gradient(&prev, &cur2).unwrap();
        assert_eq!(d[0].data()[0], 0.75);
    }

    #[test]
    fn compress_pseudograd_degenerate_cases() {
        // k = full, beta = 0: transmitted delta equals the input, e stays 0.
        let spec = ChunkSpec::dense(4);
        let delta = vec![Tensor::from_vec(vec![4], vec![1.0f64, -2.0, 3.0, 0.5])];
        let mut err = vec![ErrorAccumulator::zeros(&[4], 0.0)];
        let sds = compress_pseudograd(&mut err, &delta, spec).unwrap();
        assert_eq!(densify(&sds[0]).data(), delta[0].data());
        assert!(err[0].e.data().iter().all(|&v| v == 0.0));

        // First round with zero accumulator: d_hat = top_k(delta).
        let spec2 = ChunkSpec::new(4, 1).unwrap();
        let mut err2 = vec![ErrorAccumulator::zeros(&[4], 0.95)];
        let sds2 = compress_pseudograd(&mut err2, &delta, spec2).unwrap();
        let expect = topk_chunks(&delta[0], spec2);
        assert_eq!(sds2[0], expect);

        // Conservation: densify(d_hat) + e_after == beta * e_before + delta.
        let mut err3 = vec![ErrorAccumulator::zeros(&[4], 0.95)];
        err3[0].e = Tensor::from_vec(vec![4], vec![0.5f64, 0.5, -0.5, 0.25]);
        let before = err3[0].e.clone();
        let sds3 = compress_pseudograd(&mut err3, &delta, spec2).unwrap();
        let lhs = densify(&sds3[0]).reshape(vec![4]).unwrap().add(&err3[0].e).unwrap();
        let mut rhs = ErrorAccumulator { e: before, beta: 0.95 };
        ef_accumulate(&mut rhs, &delta[0]).unwrap();
        assert_eq!(lhs.data(), rhs.e.data());
    }

    #[test]
    fn outer_round_hand_cases() {
        // All-zero deltas leave parameters unchanged.
        let mut theta = one_param(2.0);
        let zero = Contribution::Dense(vec![Tensor::zeros(&[1, 1])]);
        outer_round(&mut theta, &[zero], 1.0).unwrap();
        assert_eq!(theta.tensors()[0].data()[0], 2.0);

        // M = 2, deltas [2] and [4], eta = 0.5: theta decreases by 1.5.
        let mut theta = one_param(10.0);
        let c1 = Contribution::Dense(vec![Tensor::from_vec(vec![1, 1], vec![2.0f64])]);
        let c2 = Contribution::Dense(vec![Tensor::from_vec(vec![1, 1], vec![4.0f64])]);
        outer_round(&mut theta, &[c1, c2], 0.5).unwrap();
        assert!((theta.tensors()[0].data()[0] - 8.5).abs() < 1e-15);

        // Missing contribution -> sync error.
        let mut theta = one_param(0.0);
        let empty = Contribution::Dense(Vec::<Tensor<f64>>::new());
        assert!(matches!(
            outer_round(&mut theta, &[empty], 1.0),
            Err(Error::Sync(_))
        ));
    }

    #[test]
    fn replica_adoption_identity_with_single_full_replica() {
        // M=1, k=full, beta=0, eta=1: outer round adopts the replica's
        // parameters (up to one rounding of theta - (theta - theta_m)).
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2.0,
            vocab: 16,
            seq_len: 4,
            precision: Precision::F32,
        };
        let opt_cfg = InnerOptConfig {
            lr_peak: 1e-2,
            warmup_steps: 0,
            total_steps: 100,
            ..Default::default()
        };
        let global = Model::<f32>::init(&cfg, 5).unwrap();
        let mut replica = ReplicaState::new(0, global.clone(), opt_cfg, 0.0, false);
        let mut rng = crate::linalg::RngStream::new(3, 7);
        let batch = Batch {
            inputs: (0..8).map(|_| rng.below(16) as u32).collect(),
            targets: (0..8).map(|_| rng.below(16) as u32).collect(),
            batch: 2,
            seq: 4,
        };
        for _ in 0..3 {
            let (loss, grads) = replica.model.loss_and_grads(&batch).unwrap();
            inner_step(&mut replica, grads, loss).unwrap();
        }
        let deltas = pseudo_gradient(&global.params, &replica.model.params).unwrap();
        let spec = ChunkSpec::dense(4096);
        let sds = compress_pseudograd(&mut replica.err, &deltas, spec).unwrap();
        let mut theta = global.params.clone();
        outer_round(&mut theta, &[Contribution::Sparse(sds)], 1.0).unwrap();
        assert!(theta.max_abs_diff(&replica.model.params) < 1e-7);
    }
}
