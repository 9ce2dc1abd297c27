//! Acceptance suite: every oracle, identity, and trend gate as a named,
//! individually runnable check. The CLI `verify` subcommand and the
//! `acceptance` integration tests both execute these.

use crate::hetero::data::{synthetic_corpus, Corpus};
use crate::hetero::{ClusterConfig, PerfAssumptions, Preset, Seeds};
use crate::linalg::{
    decode_tensor, gaussian, matmul, matmul_nt, matmul_tn, qr_orthonormalize, Precision,
    RngStream, Tensor,
};
use crate::model::{Batch, Model, ModelConfig, ParamId};
use crate::perfmodel::{self, HardwareSpec, LinkSpec, PerfScenario};
use crate::sparseloco::{InnerOptConfig, OuterConfig, ReplicaState};
use crate::subspace::{
    compress_activation, reconstruct_activation, ProjectionBasis,
};
use crate::topk::{decode_sparse, densify, ef_accumulate, ef_subtract, topk_chunks, ChunkSpec,
    ErrorAccumulator,
};

type CheckFn = fn() -> Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: CheckFn,
}

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Every acceptance check, in execution order.
pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "orthonormality_and_projector", run: check_orthonormality },
        Check { name: "topk_full_sort_oracle", run: check_topk_oracle },
        Check { name: "error_feedback_conservation", run: check_ef_conservation },
        Check { name: "pipeline_equivalence", run: check_pipeline_equivalence },
        Check { name: "gradient_finite_differences", run: check_gradient_fd },
        Check { name: "degenerate_adamw_equivalence", run: check_degenerate_adamw },
        Check { name: "subspace_roundtrip", run: check_subspace_roundtrip },
        Check { name: "embedding_split_reprojection", run: check_embedding_repair },
        Check { name: "heterogeneous_mixture_identity", run: check_mixture_identity },
        Check { name: "degenerate_alpha_trace_identity", run: check_alpha_traces },
        Check { name: "perf_utilization_checkpoint", run: check_perf_checkpoint },
        Check { name: "byte_meter_agreement", run: check_byte_meters },
        Check { name: "golden_wire_formats", run: check_golden_files },
        Check { name: "training_trends", run: check_training_trends },
    ]
}

/// Run checks whose name contains `filter` (all when None), with timing.
pub fn run_checks(filter: Option<&str>) -> Vec<CheckResult> {
    all_checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let t0 = std::time::Instant::now();
            let outcome = (c.run)();
            let seconds = t0.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => CheckResult { name: c.name, passed: true, detail, seconds },
                Err(detail) => CheckResult { name: c.name, passed: false, detail, seconds },
            }
        })
        .collect()
}

fn fail(msg: impl Into<String>) -> Result<String, String> {
    Err(msg.into())
}

// --- individual checks ----------------------------------------------------

fn check_orthonormality() -> Result<String, String> {
    let mut worst_gram = 0.0f64;
    let mut worst_idem = 0.0f64;
    for &d in &[16usize, 64, 512] {
        for &k in &[1usize, d / 8, d] {
            let mut rng = RngStream::new(100 + d as u64, k as u64);
            let a: Tensor<f64> = gaussian(&mut rng, &[d, k]);
            let u = qr_orthonormalize(&a).map_err(|e| e.to_string())?;
            let gram_err = matmul_tn(&u, &u)
                .map_err(|e| e.to_string())?
                .max_abs_diff(&Tensor::eye(k));
            let p = matmul_nt(&u, &u).map_err(|e| e.to_string())?;
            let idem_err = matmul(&p, &p).map_err(|e| e.to_string())?.max_abs_diff(&p);
            worst_gram = worst_gram.max(gram_err);
            worst_idem = worst_idem.max(idem_err);
            if gram_err >= 1e-10 {
                return fail(format!("d={d} k={k}: |U^T U - I| = {gram_err:e} >= 1e-10"));
            }
            if idem_err >= 1e-9 {
                return fail(format!("d={d} k={k}: |P P - P| = {idem_err:e} >= 1e-9"));
            }
        }
    }
    Ok(format!("worst gram {worst_gram:.2e}, worst idempotence {worst_idem:.2e}"))
}

fn check_topk_oracle() -> Result<String, String> {
    let spec = ChunkSpec::default();
    let mut rng = RngStream::new(200, 0);
    for trial in 0..1000 {
        let t: Tensor<f64> = gaussian(&mut rng, &[spec.chunk_len]);
        let sd = topk_chunks(&t, spec);
        // Full-sort oracle with the documented tie rule (magnitude desc,
        // index asc).
        let mut order: Vec<usize> = (0..spec.chunk_len).collect();
        order.sort_by(|&a, &b| {
            t.data()[b]
                .abs()
                .total_cmp(&t.data()[a].abs())
                .then(a.cmp(&b))
        });
        let mut expected: Vec<u16> = order[..spec.k_per_chunk].iter().map(|&i| i as u16).collect();
        expected.sort_unstable();
        if sd.chunks[0].indices != expected {
            return fail(format!("trial {trial}: selection differs from full-sort oracle"));
        }
        let expected_vals: Vec<f64> = expected.iter().map(|&i| t.data()[i as usize]).collect();
        if sd.chunks[0].values != expected_vals {
            return fail(format!("trial {trial}: values differ from oracle"));
        }
    }
    let density = spec.nonzero_count(4096 * 100) as f64 / (4096.0 * 100.0);
    if density != 0.0078125 {
        return fail(format!("density {density} != 0.0078125"));
    }
    Ok("1000 chunks match the full-sort oracle; density 0.78125%".into())
}

fn check_ef_conservation() -> Result<String, String> {
    let mut rng = RngStream::new(300, 0);
    for trial in 0..100 {
        let len = 64 + (rng.below(400)) as usize;
        let chunk_len = 16 + (rng.below(48)) as usize;
        let k = 1 + (rng.below(chunk_len as u64 / 2)) as usize;
        let beta = rng.uniform() * 0.99;
        let spec = ChunkSpec::new(chunk_len, k).map_err(|e| e.to_string())?;
        let e0: Tensor<f64> = gaussian(&mut rng, &[len]);
        let delta: Tensor<f64> = gaussian(&mut rng, &[len]);
        let mut acc = ErrorAccumulator { e: e0.clone(), beta };
        ef_accumulate(&mut acc, &delta).map_err(|e| e.to_string())?;
        let after_accumulate = acc.e.clone();
        let sd = topk_chunks(&acc.e, spec);
        ef_subtract(&mut acc, &sd).map_err(|e| e.to_string())?;
        let lhs = densify(&sd)
            .reshape(vec![len])
            .and_then(|d| d.add(&acc.e))
            .map_err(|e| e.to_string())?;
        // Exact at stored precision: bitwise equality.
        if lhs.data() != after_accumulate.data() {
            return fail(format!("trial {trial}: conservation identity not exact"));
        }
    }
    Ok("100 random (e, delta, beta) triples conserve exactly".into())
}

fn tiny_f64_cfg(n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers,
        n_heads: 2,
        ffn_mult: 2.0,
        vocab: 32,
        seq_len: 8,
        precision: Precision::F64,
    }
}

fn tiny_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Batch {
    let mut rng = RngStream::new(seed, 77);
    let n = batch * cfg.seq_len;
    Batch {
        inputs: (0..n).map(|_| rng.below(cfg.vocab as u64) as u32).collect(),
        targets: (0..n).map(|_| rng.below(cfg.vocab as u64) as u32).collect(),
        batch,
        seq: cfg.seq_len,
    }
}

fn check_pipeline_equivalence() -> Result<String, String> {
    use crate::model::{partition, ActivationPacket, StageOutput};
    let cfg = tiny_f64_cfg(4);
    let model = Model::<f64>::init(&cfg, 400).map_err(|e| e.to_string())?;
    let batch = tiny_batch(&cfg, 2, 401);
    let (mono_loss, mono_grads) = model.loss_and_grads(&batch).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for s in [1usize, 2, 4] {
        let stages = partition(&cfg, s).map_err(|e| e.to_string())?;
        let mut pkt = ActivationPacket::entry(batch.inputs.clone(), batch.batch, batch.seq);
        let mut tapes = Vec::new();
        let mut logits = None;
        for stage in &stages {
            let (out, tape) = model.forward_stage(stage, &pkt).map_err(|e| e.to_string())?;
            tapes.push(tape);
            match out {
                StageOutput::Activation(p) => pkt = p,
                StageOutput::Logits(l) => logits = Some(l),
            }
        }
        let logits = logits.ok_or("no logits")?;
        let (loss, dlogits) =
            crate::model::ops::cross_entropy(&logits, &batch.targets).map_err(|e| e.to_string())?;
        let loss_rel = (loss - mono_loss).abs() / mono_loss.abs().max(1e-30);
        if loss_rel >= 1e-10 {
            return fail(format!("S={s}: loss relative diff {loss_rel:e}"));
        }
        let mut grads = model.params.zeros_like();
        let mut g = dlogits;
        for (stage, tape) in stages.iter().zip(&tapes).rev() {
            g = model
                .backward_stage(stage, tape, &g, &mut grads)
                .map_err(|e| e.to_string())?;
        }
        for i in 0..grads.len() {
            let id = ParamId(i);
            let (a, b) = (grads.get(id), mono_grads.get(id));
            for (x, y) in a.data().iter().zip(b.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-30);
                worst = worst.max(rel);
                if rel >= 1e-10 {
                    return fail(format!(
                        "S={s}: gradient {} relative diff {rel:e}",
                        grads.name(id)
                    ));
                }
            }
        }
    }
    Ok(format!("S in {{1,2,4}} matches monolithic; worst relative diff {worst:.2e}"))
}

fn check_gradient_fd() -> Result<String, String> {
    let cfg = tiny_f64_cfg(2);
    let model = Model::<f64>::init(&cfg, 500).map_err(|e| e.to_string())?;
    let batch = tiny_batch(&cfg, 2, 501);
    let (_, grads) = model.loss_and_grads(&batch).map_err(|e| e.to_string())?;
    let eps = 1e-4;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut scratch = model.clone();
    for i in 0..model.params.len() {
        let id = ParamId(i);
        for j in 0..model.params.get(id).len() {
            let orig = scratch.params.get(id).data()[j];
            scratch.params.get_mut(id).data_mut()[j] = orig + eps;
            let up = scratch.eval_loss(&batch).map_err(|e| e.to_string())?;
            scratch.params.get_mut(id).data_mut()[j] = orig - eps;
            let down = scratch.eval_loss(&batch).map_err(|e| e.to_string())?;
            scratch.params.get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grads.get(id).data()[j];
            // Floor guards positions whose true derivative is ~0, where the
            // finite-difference truncation error dominates any relative test.
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
            if rel >= 1e-4 {
                return fail(format!(
                    "{}[{j}]: analytic {a:.3e} vs fd {fd:.3e} (rel {rel:.3e})",
                    model.params.name(id)
                ));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} parameters checked; worst relative error {worst:.2e}"))
}

#[allow(clippy::too_many_arguments)]
fn desk_cluster(
    preset: Preset,
    m: usize,
    stages: usize,
    k_over_d: f64,
    rounds: usize,
    h: usize,
    seed: u64,
    model: ModelConfig,
    batch_size: usize,
) -> ClusterConfig {
    let mut outer = OuterConfig {
        h,
        rounds,
        replicas: m,
        ..Default::default()
    };
    preset.adjust_outer(&mut outer);
    ClusterConfig {
        replicas: preset.replica_specs(m, stages, k_over_d).expect("preset"),
        model,
        outer,
        inner: InnerOptConfig {
            lr_peak: 1e-3,
            warmup_steps: 50,
            total_steps: rounds * h,
            ..Default::default()
        },
        seeds: Seeds {
            model: seed,
            data: seed + 1,
            basis: seed + 2,
        },
        batch_size,
        eval_batches: 2,
        train_frac: 0.95,
        te_adaptation: true,
        weight_projection: false,
        perf: PerfAssumptions::default(),
    }
}

fn desk_model(seq_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        ffn_mult: 2.0,
        vocab: 256,
        seq_len,
        precision: Precision::F32,
    }
}

fn check_degenerate_adamw() -> Result<String, String> {
    // M=1, k=full, beta=0, eta=1 for 10 rounds x 10 steps must reproduce the
    // plain AdamW trajectory.
    let model_cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        ffn_mult: 2.0,
        vocab: 256,
        seq_len: 32,
        precision: Precision::F32,
    };
    let corpus = Corpus::from_text(&synthetic_corpus(4242, 400_000));
    let mut cfg = desk_cluster(Preset::Baseline, 1, 1, 1.0, 10, 10, 600, model_cfg.clone(), 4);
    cfg.outer.beta = 0.0;
    cfg.outer.eta = 1.0;
    cfg.outer.k_per_chunk = cfg.outer.chunk_len; // keep everything
    let out = crate::hetero::run_experiment::<f32>(&cfg, &corpus).map_err(|e| e.to_string())?;

    // Plain AdamW oracle: identical init, identical batch stream, no outer
    // loop at all.
    let global = Model::<f32>::init(&model_cfg, cfg.seeds.model).map_err(|e| e.to_string())?;
    let mut replica = ReplicaState::new(0, global, cfg.inner, 0.0, false);
    let (train, _) = corpus.split(cfg.train_frac).map_err(|e| e.to_string())?;
    let shards =
        crate::hetero::data::shard_data(train, 1, model_cfg.seq_len + 1).map_err(|e| e.to_string())?;
    let mut sampler = crate::hetero::data::BatchSampler::new(
        shards[0],
        cfg.batch_size,
        model_cfg.seq_len,
        cfg.seeds.data,
        0,
    )
    .map_err(|e| e.to_string())?;
    for _ in 0..100 {
        let batch = sampler.next_batch();
        let (loss, grads) = replica.model.loss_and_grads(&batch).map_err(|e| e.to_string())?;
        crate::sparseloco::inner_step(&mut replica, grads, loss).map_err(|e| e.to_string())?;
    }
    let diff = out.model.params.max_abs_diff(&replica.model.params);
    if diff >= 1e-6 {
        return fail(format!("parameter max abs diff {diff:e} >= 1e-6 after 100 steps"));
    }
    Ok(format!("trajectories agree to {diff:.2e} after 100 inner steps / 10 rounds"))
}

fn check_subspace_roundtrip() -> Result<String, String> {
    let basis = ProjectionBasis::<f32>::new(700, 64, 8).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(701, 0);
    let t_perp: Tensor<f32> = gaussian(&mut rng, &[32, 64]);
    let pos: Tensor<f32> = gaussian(&mut rng, &[8, 64]);
    let ids: Vec<u32> = (0..16).map(|_| rng.below(32) as u32).collect();

    // Residual constructed inside Col(U) survives the round trip.
    let coords: Tensor<f32> = gaussian(&mut rng, &[16, 8]);
    let residual = matmul_nt(&coords, basis.u()).map_err(|e| e.to_string())?;
    let mut x_in = residual.clone();
    for (r, &id) in ids.iter().enumerate() {
        for j in 0..64 {
            let v = x_in.row(r)[j] + t_perp.row(id as usize)[j] + pos.row(r % 8)[j];
            x_in.row_mut(r)[j] = v;
        }
    }
    let pkt = crate::model::ActivationPacket {
        x: Some(x_in.clone()),
        token_ids: ids.clone(),
        batch: 2,
        seq: 8,
        compressed: false,
    };
    let round = reconstruct_activation(
        &compress_activation(&pkt, &t_perp, &pos, &basis).map_err(|e| e.to_string())?,
        &t_perp,
        &pos,
        &basis,
    )
    .map_err(|e| e.to_string())?;
    let in_sub_err = round.x.as_ref().unwrap().max_abs_diff(&x_in);
    if in_sub_err >= 1e-5 {
        return fail(format!("in-subspace roundtrip error {in_sub_err:e} >= 1e-5"));
    }

    // Arbitrary activations: roundtrip loss equals the out-of-subspace
    // residual energy.
    let x: Tensor<f32> = gaussian(&mut rng, &[16, 64]);
    let pkt2 = crate::model::ActivationPacket {
        x: Some(x.clone()),
        token_ids: ids.clone(),
        batch: 2,
        seq: 8,
        compressed: false,
    };
    let round2 = reconstruct_activation(
        &compress_activation(&pkt2, &t_perp, &pos, &basis).map_err(|e| e.to_string())?,
        &t_perp,
        &pos,
        &basis,
    )
    .map_err(|e| e.to_string())?;
    let err_norm = x
        .sub(round2.x.as_ref().unwrap())
        .map_err(|e| e.to_string())?
        .frob_norm();
    // Direct out-of-subspace residual (f64 basis for an independent route).
    let mut anchor_removed = x.clone();
    for (r, &id) in ids.iter().enumerate() {
        for j in 0..64 {
            let v = anchor_removed.row(r)[j] - t_perp.row(id as usize)[j] - pos.row(r % 8)[j];
            anchor_removed.row_mut(r)[j] = v;
        }
    }
    let projected = crate::subspace::project(&anchor_removed, &basis).map_err(|e| e.to_string())?;
    let out_norm = anchor_removed
        .sub(&projected)
        .map_err(|e| e.to_string())?
        .frob_norm();
    let rel = (err_norm - out_norm).abs() / out_norm.max(1e-12);
    if rel >= 1e-4 {
        return fail(format!(
            "roundtrip loss {err_norm:.6} vs out-of-subspace residual {out_norm:.6} (rel {rel:e})"
        ));
    }
    Ok(format!(
        "in-subspace error {in_sub_err:.2e}; residual-energy match rel {rel:.2e}"
    ))
}

fn check_embedding_repair() -> Result<String, String> {
    let basis = ProjectionBasis::<f32>::new(800, 64, 8).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(801, 0);
    let te: Tensor<f32> = gaussian(&mut rng, &[256, 64]).scale(0.02);
    let (mut t_s, mut t_perp) = crate::subspace::split_embedding(&te, &basis).map_err(|e| e.to_string())?;
    let sum0 = t_s.add(&t_perp).map_err(|e| e.to_string())?;
    let split_err = sum0.max_abs_diff(&te);
    if split_err >= 1e-6 {
        return fail(format!("split sum error {split_err:e} >= 1e-6"));
    }
    // Drift t_s out of the subspace (as heterogeneous averaging would), then
    // repair.
    let noise: Tensor<f32> = gaussian(&mut rng, &[256, 64]).scale(0.01);
    t_s.add_scaled_assign(&noise, 1.0).map_err(|e| e.to_string())?;
    let sum_before = t_s.add(&t_perp).map_err(|e| e.to_string())?;
    crate::subspace::reproject_embedding(&mut t_s, &mut t_perp, &basis).map_err(|e| e.to_string())?;
    let sum_after = t_s.add(&t_perp).map_err(|e| e.to_string())?;
    let sum_err = sum_after.max_abs_diff(&sum_before);
    if sum_err >= 1e-6 {
        return fail(format!("reprojection changed TE by {sum_err:e} >= 1e-6"));
    }
    let drift = t_s
        .sub(&crate::subspace::project(&t_s, &basis).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?
        .max_abs();
    if drift >= 1e-6 {
        return fail(format!("post-repair subspace drift {drift:e} >= 1e-6"));
    }
    Ok(format!(
        "split sum {split_err:.2e}, repair sum {sum_err:.2e}, drift {drift:.2e}"
    ))
}

fn check_mixture_identity() -> Result<String, String> {
    // Hand case: d=2, U=e1, delta=(2,4), alpha=0.5 -> mixture (2,2).
    let basis = ProjectionBasis::from_orthonormal(
        Tensor::from_vec(vec![2, 1], vec![1.0f64, 0.0]),
        0,
    )
    .map_err(|e| e.to_string())?;
    let delta = vec![Tensor::from_vec(vec![1, 2], vec![2.0, 4.0])];
    let report =
        crate::hetero::bias_decompose(&delta, &[true], &basis, 0.5).map_err(|e| e.to_string())?;
    if report.delta_het[0].data() != [2.0, 2.0] {
        return fail(format!("hand case mixture {:?} != (2, 2)", report.delta_het[0].data()));
    }

    let mut rng = RngStream::new(900, 0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let k = 1 + (rng.below(63)) as usize;
        let basis =
            ProjectionBasis::<f64>::new(901 + trial, 64, k).map_err(|e| e.to_string())?;
        let alpha = rng.uniform();
        let delta = vec![gaussian::<f64>(&mut rng, &[8, 64])];
        let report = crate::hetero::bias_decompose(&delta, &[true], &basis, alpha)
            .map_err(|e| e.to_string())?;
        worst = worst.max(report.identity_err);
        if report.identity_err >= 1e-10 {
            return fail(format!("trial {trial}: identity error {:e}", report.identity_err));
        }
    }
    Ok(format!("hand case exact; 100 random instances, worst divergence {worst:.2e}"))
}

fn check_alpha_traces() -> Result<String, String> {
    let corpus = Corpus::from_text(&synthetic_corpus(4242, 400_000));
    let model = desk_model(32);
    let mk = |preset: Preset| desk_cluster(preset, 4, 2, 0.125, 3, 3, 1000, model.clone(), 4);

    let baseline = crate::hetero::run_experiment::<f32>(&mk(Preset::Baseline), &corpus)
        .map_err(|e| e.to_string())?;
    let mut het1 = mk(Preset::HetHalf);
    for r in &mut het1.replicas {
        r.pp_compressed = false;
    }
    let het1 = crate::hetero::run_experiment::<f32>(&het1, &corpus).map_err(|e| e.to_string())?;
    if baseline.report.metrics_csv() != het1.report.metrics_csv() {
        return fail("alpha=1 CSV differs from baseline preset");
    }

    let uniform = crate::hetero::run_experiment::<f32>(&mk(Preset::PpCompress), &corpus)
        .map_err(|e| e.to_string())?;
    let mut het0 = mk(Preset::HetHalf);
    for r in &mut het0.replicas {
        r.pp_compressed = true;
    }
    let het0 = crate::hetero::run_experiment::<f32>(&het0, &corpus).map_err(|e| e.to_string())?;
    if uniform.report.metrics_csv() != het0.report.metrics_csv() {
        return fail("alpha=0 CSV differs from uniform preset");
    }
    Ok("alpha=1 == baseline and alpha=0 == uniform, bitwise CSV".into())
}

fn check_perf_checkpoint() -> Result<String, String> {
    let s = PerfScenario::default();
    let hw = HardwareSpec::default();
    let mut min_util = f64::INFINITY;
    let bandwidths: Vec<f64> = (0..=10).map(|i| 1e8 * (10f64).powf(i as f64 / 10.0)).collect();
    let mut prev = 0.0;
    for &bw in &bandwidths {
        let link = LinkSpec { bandwidth_bps: bw, latency_s: 0.0 };
        let u = perfmodel::utilization(&s, &hw, &link);
        min_util = min_util.min(u);
        if u >= 0.97 {
        } else {
            return fail(format!("utilization {u:.4} < 0.97 at {bw:.3e} bps"));
        }
        if u + 1e-15 < prev {
            return fail(format!("utilization not monotone in bandwidth at {bw:.3e}"));
        }
        prev = u;
    }
    // Monotone nonincreasing in k_over_d at fixed bandwidth.
    let link = LinkSpec { bandwidth_bps: 3e8, latency_s: 0.0 };
    let mut prev_u = f64::INFINITY;
    for ratio in [1.0 / 96.0, 0.125, 0.5, 1.0] {
        let sc = PerfScenario { k_over_d: ratio, ..s };
        let u = perfmodel::utilization(&sc, &hw, &link);
        if u > prev_u + 1e-15 {
            return fail(format!("utilization not monotone in compression at k/d={ratio}"));
        }
        prev_u = u;
    }
    // Consistency: wallclock * utilization == steps * compute time.
    let steps = 1953.0;
    let wc = perfmodel::wallclock(&s, &hw, &link, steps);
    let u = perfmodel::utilization(&s, &hw, &link);
    let tc = perfmodel::step_compute_time(&s, &hw);
    let rel = (wc * u - steps * tc).abs() / (steps * tc);
    if rel >= 1e-12 {
        return fail(format!("wallclock consistency off by rel {rel:e}"));
    }
    Ok(format!("min utilization {min_util:.4} over [100 Mb/s, 1 Gb/s]; identities hold"))
}

fn check_byte_meters() -> Result<String, String> {
    let corpus = Corpus::from_text(&synthetic_corpus(4242, 400_000));
    // Three distinct (batch, seq, k, stages, h) desk configurations.
    let shapes = [
        (4usize, 32usize, 0.125f64, 2usize, 3usize),
        (2, 16, 0.0625, 2, 5),
        (3, 24, 0.03125, 4, 2),
    ];
    let mut details = Vec::new();
    for &(b, l, ratio, s, h) in &shapes {
        let cfg = desk_cluster(Preset::PpCompress, 2, s, ratio, 1, h, 1100, desk_model(l), b);
        let out = crate::hetero::run_experiment::<f32>(&cfg, &corpus).map_err(|e| e.to_string())?;
        let metered = out.report.rounds[0].pp_bytes;
        let scenario = PerfScenario {
            param_count: 1.0,
            d_model: 64,
            seq_len: l,
            micro_batch: b,
            microbatches_per_step: 1,
            stages: s,
            k_over_d: ratio,
            h,
            activation_bytes_per_elem: 4.0,
            id_bytes_per_token: 4.0,
            tokens_per_step: (b * l) as f64,
            ..Default::default()
        };
        let formula = scenario.pp_step_bytes() * h as f64 * cfg.replicas.len() as f64;
        if formula.fract() != 0.0 || metered != formula as u64 {
            return fail(format!(
                "(b={b}, L={l}, k/d={ratio}, S={s}, H={h}): metered {metered} != formula {formula}"
            ));
        }
        details.push(format!("{metered}"));
    }
    Ok(format!("metered bytes match closed form exactly: {}", details.join(", ")))
}

fn check_golden_files() -> Result<String, String> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    // Tensor golden: fixed values, fixed shape.
    let bytes = std::fs::read(dir.join("golden_tensor.bin"))
        .map_err(|e| format!("golden_tensor.bin: {e}"))?;
    let tensor: Tensor<f64> =
        decode_tensor(&bytes).map_err(|e| format!("golden_tensor.bin: {e}"))?;
    let expected = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.5, -6.0]);
    if tensor != expected {
        return fail("golden_tensor.bin decodes to unexpected contents");
    }
    // Sparse golden: top-k of a fixed vector under a fixed chunk spec.
    let bytes = std::fs::read(dir.join("golden_sparse.bin"))
        .map_err(|e| format!("golden_sparse.bin: {e}"))?;
    let sd = decode_sparse(&bytes).map_err(|e| format!("golden_sparse.bin: {e}"))?;
    let source = Tensor::from_vec(
        vec![10],
        vec![0.5f32, -3.0, 1.5, 0.0, 2.5, -0.25, 4.0, 0.125, -2.0, 1.0],
    );
    let expected = topk_chunks(&source, ChunkSpec::new(8, 3).map_err(|e| e.to_string())?);
    if sd != expected {
        return fail("golden_sparse.bin decodes to unexpected selection");
    }
    Ok("tensor and sparse-delta golden files decode to expected values".into())
}

/// Desk-scale trend gates. Three seeds; per-seed runs of the baseline,
/// uniform, and heterogeneous presets at two compression ratios.
fn check_training_trends() -> Result<String, String> {
    let t0 = std::time::Instant::now();
    let corpus = Corpus::from_text(&synthetic_corpus(42, 5_000_000));
    let seeds = [11u64, 29, 47];
    let model = desk_model(32);
    let run = |preset: Preset, ratio: f64, seed: u64| -> Result<f64, String> {
        let cfg = desk_cluster(preset, 4, 2, ratio, 60, 10, seed, model.clone(), 8);
        let out = crate::hetero::run_experiment::<f32>(&cfg, &corpus).map_err(|e| e.to_string())?;
        let report = out.report;
        // Hard gate (a): every configuration must actually learn.
        if report.final_eval_loss >= 0.8 * report.initial_eval_loss {
            return Err(format!(
                "{preset:?} ratio {ratio} seed {seed}: final {:.4} >= 0.8 x initial {:.4}",
                report.final_eval_loss, report.initial_eval_loss
            ));
        }
        Ok(report.final_eval_loss)
    };

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut baseline = Vec::new();
    let mut uniform8 = Vec::new();
    let mut het8 = Vec::new();
    let mut uniform32 = Vec::new();
    let mut het32 = Vec::new();
    for &seed in &seeds {
        baseline.push(run(Preset::Baseline, 0.125, seed)?);
        uniform8.push(run(Preset::PpCompress, 0.125, seed)?);
        het8.push(run(Preset::HetHalf, 0.125, seed)?);
        uniform32.push(run(Preset::PpCompress, 1.0 / 32.0, seed)?);
        het32.push(run(Preset::HetHalf, 1.0 / 32.0, seed)?);
    }
    let (mb, mu8, mh8, mu32, mh32) = (
        mean(&baseline),
        mean(&uniform8),
        mean(&het8),
        mean(&uniform32),
        mean(&het32),
    );
    // Hard gate (b): uniform compression at k/d = 1/8 within 15% of baseline
    // (seed means).
    if mu8 > 1.15 * mb {
        return fail(format!(
            "uniform 1/8 seed-mean {mu8:.4} exceeds 1.15 x baseline {mb:.4}"
        ));
    }
    // Soft report (c): ordering and the compression-ratio gap pattern.
    let ordering_holds = mb <= mh8 && mh8 <= mu8;
    let monotone_uniform = mu32 >= mu8;
    let monotone_het = mh32 >= mh8;
    let het_helps_more_when_aggressive = (mu32 - mh32) >= (mu8 - mh8);
    Ok(format!(
        "seed means: baseline {mb:.4}, uniform(1/8) {mu8:.4} (+{:.2}%), het(1/8) {mh8:.4} (+{:.2}%), \
         uniform(1/32) {mu32:.4} (+{:.2}%), het(1/32) {mh32:.4} (+{:.2}%); \
         soft: ordering baseline<=het<=uniform {}; degradation grows with compression: uniform {}, het {}; \
         het advantage grows with compression: {}; runtime {:.0}s",
        100.0 * (mu8 / mb - 1.0),
        100.0 * (mh8 / mb - 1.0),
        100.0 * (mu32 / mb - 1.0),
        100.0 * (mh32 / mb - 1.0),
        ordering_holds,
        monotone_uniform,
        monotone_het,
        het_helps_more_when_aggressive,
        t0.elapsed().as_secs_f64(),
    ))
}
