use super::data::{shard_data, BatchSampler, Corpus};
use super::{ClusterConfig, ReplicaSpec, RoundRecord, RunReport};
use crate::error::{Error, Result};
use crate::linalg::{Scalar, Tensor};
use crate::model::{
    ops, partition, ActivationPacket, Batch, Grads, Model, Stage, StageOutput,
};
use crate::perfmodel::{self, PerfScenario};
use crate::sparseloco::{
    self, compress_pseudograd, outer_round, pseudo_gradient, Contribution, ReplicaState,
};
use crate::subspace::{
    compress_activation, compress_grad, packet_payload_bytes, project_weights,
    reconstruct_activation, reconstruct_grad, split_embedding, ProjectionBasis,
};
use crate::topk::densify;
use rayon::prelude::*;

/// One replica plus its runtime machinery (stage plan, batch stream, byte
/// meter). Channels are in-process: packets are compressed, metered, and
/// reconstructed inline, which keeps runs deterministic at any thread count.
struct ReplicaRuntime<S: Scalar> {
    spec: ReplicaSpec,
    state: ReplicaState<S>,
    stages: Vec<Stage>,
    sampler: BatchSampler,
    round_pp_bytes: u64,
}

/// Final state of a finished experiment.
pub struct RunOutcome<S: Scalar> {
    pub report: RunReport,
    pub model: Model<S>,
}

fn with_replica_context(err: Error, replica: usize) -> Error {
    match err {
        Error::NumericalFailure { stage, msg, .. } => Error::NumericalFailure {
            replica,
            stage,
            msg,
        },
        other => other,
    }
}

/// Forward/backward through a replica's stage chain. Compressed replicas
/// push every boundary crossing through compress -> meter -> reconstruct;
/// uncompressed replicas are metered at full width. Backward gradient
/// packets reuse the forward wire layout (token ids travel both ways).
fn pipeline_step<S: Scalar>(
    model: &Model<S>,
    stages: &[Stage],
    batch: &Batch,
    basis: Option<&ProjectionBasis<S>>,
    meter: &mut u64,
) -> Result<(f64, Grads<S>)> {
    let pos = model.params.get(model.layout.pos);
    let mut pkt = ActivationPacket::entry(batch.inputs.clone(), batch.batch, batch.seq);
    let mut tapes = Vec::with_capacity(stages.len());
    let mut logits = None;
    for stage in stages {
        let (out, tape) = model.forward_stage(stage, &pkt)?;
        tapes.push(tape);
        match out {
            StageOutput::Logits(l) => logits = Some(l),
            StageOutput::Activation(p) => {
                pkt = match basis {
                    Some(basis) => {
                        let compressed = compress_activation(&p, &model.t_perp, pos, basis)?;
                        *meter += packet_payload_bytes(&compressed);
                        reconstruct_activation(&compressed, &model.t_perp, pos, basis)?
                    }
                    None => {
                        *meter += packet_payload_bytes(&p);
                        p
                    }
                };
            }
        }
    }
    let logits = logits.expect("last stage emits logits");
    let (loss, dlogits) = ops::cross_entropy(&logits, &batch.targets)?;
    let mut grads = model.params.zeros_like();
    let mut g = dlogits;
    for (stage, tape) in stages.iter().zip(&tapes).rev() {
        g = model.backward_stage(stage, tape, &g, &mut grads)?;
        if !stage.is_first() {
            // Boundary crossing toward the previous stage.
            g = match basis {
                Some(basis) => {
                    let coords = compress_grad(&g, basis)?;
                    let gpkt = ActivationPacket {
                        x: Some(coords),
                        token_ids: batch.inputs.clone(),
                        batch: batch.batch,
                        seq: batch.seq,
                        compressed: true,
                    };
                    *meter += packet_payload_bytes(&gpkt);
                    reconstruct_grad(gpkt.x.as_ref().unwrap(), basis)?
                }
                None => {
                    let gpkt = ActivationPacket {
                        x: Some(g),
                        token_ids: batch.inputs.clone(),
                        batch: batch.batch,
                        seq: batch.seq,
                        compressed: false,
                    };
                    *meter += packet_payload_bytes(&gpkt);
                    gpkt.x.unwrap()
                }
            };
        }
    }
    Ok((loss, grads))
}

/// H inner steps for one replica.
fn run_inner_phase<S: Scalar>(
    rt: &mut ReplicaRuntime<S>,
    h: usize,
    basis: Option<&ProjectionBasis<S>>,
    weight_projection: bool,
) -> Result<()> {
    let replica_basis = if rt.spec.pp_compressed { basis } else { None };
    for _ in 0..h {
        let batch = rt.sampler.next_batch();
        let (loss, grads) = pipeline_step(
            &rt.state.model,
            &rt.stages,
            &batch,
            replica_basis,
            &mut rt.round_pp_bytes,
        )
        .map_err(|e| with_replica_context(e, rt.spec.id))?;
        sparseloco::inner_step(&mut rt.state, grads, loss)?;
        if weight_projection && rt.spec.pp_compressed {
            if let Some(basis) = basis {
                let n_layers = rt.state.model.cfg.n_layers;
                project_weights(&mut rt.state.model, 0..n_layers, basis)?;
            }
        }
    }
    Ok(())
}

/// Per-round wall-clock estimate from the analytic model: the slowest
/// replica's inner phase plus the amortized synchronization.
fn round_wallclock_estimate(cfg: &ClusterConfig, param_count: usize) -> f64 {
    let scenario = |spec: &ReplicaSpec| PerfScenario {
        param_count: param_count as f64,
        d_model: cfg.model.d_model,
        seq_len: cfg.model.seq_len,
        micro_batch: cfg.batch_size,
        microbatches_per_step: 1,
        stages: spec.stages,
        k_over_d: if spec.pp_compressed { spec.k_over_d } else { 1.0 },
        h: cfg.outer.h,
        dp_density: if cfg.outer.dp_topk {
            cfg.outer.k_per_chunk as f64 / cfg.outer.chunk_len as f64
        } else {
            1.0
        },
        activation_bytes_per_elem: 4.0,
        dp_bytes_per_value: if cfg.outer.dp_topk { 6.0 } else { 4.0 },
        id_bytes_per_token: 4.0,
        tokens_per_step: (cfg.batch_size * cfg.model.seq_len) as f64,
        overlap: 0.0,
    };
    let mut slowest_inner = 0.0f64;
    let mut dp_time = 0.0f64;
    for spec in &cfg.replicas {
        let s = scenario(spec);
        let inner = cfg.outer.h as f64
            * (perfmodel::step_compute_time(&s, &cfg.perf.hw)
                + perfmodel::pp_comm_time(&s, &cfg.perf.link));
        slowest_inner = slowest_inner.max(inner);
        dp_time = perfmodel::dp_comm_time(&s, &cfg.perf.link);
    }
    slowest_inner + dp_time
}

/// Execute the full outer loop for a cluster configuration.
pub fn run_experiment<S: Scalar>(cfg: &ClusterConfig, corpus: &Corpus) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let m = cfg.replicas.len();
    let chunk_spec = cfg.outer.chunk_spec()?;

    // Subspace state: one shared basis; the global embedding is split so the
    // learnable part starts inside the subspace.
    let basis: Option<ProjectionBasis<S>> = match cfg.subspace_k()? {
        Some(k) => Some(ProjectionBasis::new(cfg.seeds.basis, cfg.model.d_model, k)?),
        None => None,
    };

    let mut global: Model<S> = Model::init(&cfg.model, cfg.seeds.model)?;
    if let Some(basis) = &basis {
        let te = global.te();
        let (t_s, t_perp) = split_embedding(&te, basis)?;
        *global.params.get_mut(global.layout.t_s) = t_s;
        global.t_perp = t_perp;
        if cfg.weight_projection {
            // Shared starting point: project the write matrices once so all
            // replicas begin from identical constrained weights.
            project_weights(&mut global, 0..cfg.model.n_layers, basis)?;
        }
    }

    // Data: disjoint contiguous shards, one sampler stream per replica, and
    // a fixed eval set drawn from the held-out split.
    let (train, eval) = corpus.split(cfg.train_frac)?;
    let min_per_shard = cfg.model.seq_len + 1;
    let shards = shard_data(train, m, min_per_shard)?;
    let mut eval_sampler = BatchSampler::new(
        eval,
        cfg.batch_size,
        cfg.model.seq_len,
        cfg.seeds.data,
        u64::MAX, // eval stream, distinct from every replica stream
    )?;
    let eval_set: Vec<Batch> = (0..cfg.eval_batches).map(|_| eval_sampler.next_batch()).collect();

    let mut replicas: Vec<ReplicaRuntime<S>> = cfg
        .replicas
        .iter()
        .map(|spec| -> Result<ReplicaRuntime<S>> {
            let mut state = ReplicaState::new(
                spec.id,
                global.clone(),
                cfg.inner,
                cfg.outer.beta,
                spec.pp_compressed,
            );
            state.shard_id = spec.shard_id;
            let sampler = BatchSampler::new(
                shards[spec.shard_id],
                cfg.batch_size,
                cfg.model.seq_len,
                cfg.seeds.data,
                spec.id as u64,
            )?;
            Ok(ReplicaRuntime {
                spec: *spec,
                stages: partition(&cfg.model, spec.stages)?,
                state,
                sampler,
                round_pp_bytes: 0,
            })
        })
        .collect::<Result<_>>()?;

    let eval_loss = |model: &Model<S>| -> Result<f64> {
        let mut total = 0.0;
        for b in &eval_set {
            total += model.eval_loss(b)?;
        }
        Ok(total / eval_set.len() as f64)
    };

    let initial_eval_loss = eval_loss(&global)?;
    let round_estimate = round_wallclock_estimate(cfg, global.params.total_elements());
    let mut rounds = Vec::with_capacity(cfg.outer.rounds);
    let mut pp_total = 0u64;
    let mut dp_total = 0u64;

    for round in 0..cfg.outer.rounds {
        let theta_prev = global.params.clone();

        // Inner phases run in parallel; replicas share no mutable state and
        // every reduction below walks them in index order.
        let results: Vec<Result<()>> = replicas
            .par_iter_mut()
            .map(|rt| {
                rt.round_pp_bytes = 0;
                rt.state.round_losses.clear();
                run_inner_phase(rt, cfg.outer.h, basis.as_ref(), cfg.weight_projection)
            })
            .collect();
        for r in results {
            r?;
        }

        // Synchronization barrier: pseudo-gradients, compression, fixed-order
        // averaging, outer step.
        let mut contributions = Vec::with_capacity(m);
        let mut dp_bytes = 0u64;
        for rt in replicas.iter_mut() {
            let deltas = pseudo_gradient(&theta_prev, &rt.state.model.params)?;
            let contribution = if cfg.outer.dp_topk {
                Contribution::Sparse(compress_pseudograd(&mut rt.state.err, &deltas, chunk_spec)?)
            } else {
                Contribution::Dense(deltas)
            };
            dp_bytes += 2 * contribution.wire_bytes(); // send + receive of the average
            contributions.push(contribution);
        }
        let het_contribution_gap = contribution_gap(&replicas, &contributions);
        outer_round(&mut global.params, &contributions, cfg.outer.eta)?;

        // Post-sync embedding repair, then broadcast.
        if cfg.te_adaptation {
            if let Some(basis) = &basis {
                let mut t_s = global.params.get(global.layout.t_s).clone();
                let mut t_perp = global.t_perp.clone();
                crate::subspace::reproject_embedding(&mut t_s, &mut t_perp, basis)?;
                *global.params.get_mut(global.layout.t_s) = t_s;
                global.t_perp = t_perp;
            }
        }
        for rt in replicas.iter_mut() {
            rt.state.adopt_global(&global.params, &global.t_perp);
        }

        let pp_bytes: u64 = replicas.iter().map(|rt| rt.round_pp_bytes).sum();
        pp_total += pp_bytes;
        dp_total += dp_bytes;
        let record = RoundRecord {
            round,
            replica_mean_loss: replicas
                .iter()
                .map(|rt| {
                    let l = &rt.state.round_losses;
                    l.iter().sum::<f64>() / l.len().max(1) as f64
                })
                .collect(),
            eval_loss: eval_loss(&global)?,
            pp_bytes,
            dp_bytes,
            wallclock_estimate_s: round_estimate,
            het_contribution_gap,
        };
        rounds.push(record);
    }

    let final_eval_loss = rounds.last().map_or(initial_eval_loss, |r| r.eval_loss);
    let report = RunReport {
        config: serde_json::to_value(cfg)?,
        alpha: cfg.alpha(),
        initial_eval_loss,
        final_eval_loss,
        pp_bytes_total: pp_total,
        dp_bytes_total: dp_total,
        wallclock_estimate_total_s: round_estimate * cfg.outer.rounds as f64,
        rounds,
    };
    Ok(RunOutcome {
        report,
        model: global,
    })
}

/// Frobenius gap between the mean compressed-replica and mean
/// uncompressed-replica contributions (densified); None unless both classes
/// are present.
fn contribution_gap<S: Scalar>(
    replicas: &[ReplicaRuntime<S>],
    contributions: &[Contribution<S>],
) -> Option<f64> {
    let compressed: Vec<usize> = replicas
        .iter()
        .enumerate()
        .filter(|(_, rt)| rt.spec.pp_compressed)
        .map(|(i, _)| i)
        .collect();
    let uncompressed: Vec<usize> = replicas
        .iter()
        .enumerate()
        .filter(|(_, rt)| !rt.spec.pp_compressed)
        .map(|(i, _)| i)
        .collect();
    if compressed.is_empty() || uncompressed.is_empty() {
        return None;
    }
    let n_tensors = match &contributions[0] {
        Contribution::Sparse(v) => v.len(),
        Contribution::Dense(v) => v.len(),
    };
    let dense_of = |idx: usize, t: usize| -> Tensor<S> {
        match &contributions[idx] {
            Contribution::Sparse(v) => densify(&v[t]),
            Contribution::Dense(v) => {
                let flat = v[t].clone();
                let len = flat.len();
                flat.reshape(vec![len]).expect("flatten")
            }
        }
    };
    let mut sq = 0.0f64;
    for t in 0..n_tensors {
        let mut mean_c = dense_of(compressed[0], t);
        for &i in &compressed[1..] {
            mean_c.add_scaled_assign(&dense_of(i, t), S::one()).expect("shape");
        }
        let mut mean_u = dense_of(uncompressed[0], t);
        for &i in &uncompressed[1..] {
            mean_u.add_scaled_assign(&dense_of(i, t), S::one()).expect("shape");
        }
        let c = mean_c.scale(S::from_f64(1.0 / compressed.len() as f64));
        let u = mean_u.scale(S::from_f64(1.0 / uncompressed.len() as f64));
        sq += c.sub(&u).expect("shape").frob_norm().powi(2);
    }
    Some(sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetero::data::synthetic_corpus;
    use crate::hetero::{PerfAssumptions, Preset, Seeds};
    use crate::linalg::Precision;
    use crate::model::ModelConfig;
    use crate::sparseloco::{InnerOptConfig, OuterConfig};

    fn tiny_cluster(preset: Preset, rounds: usize, h: usize) -> ClusterConfig {
        let model = ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2.0,
            vocab: 256,
            seq_len: 32,
            precision: Precision::F32,
        };
        let mut outer = OuterConfig {
            h,
            rounds,
            replicas: 4,
            ..Default::default()
        };
        preset.adjust_outer(&mut outer);
        ClusterConfig {
            replicas: preset.replica_specs(4, 2, 0.25).unwrap(),
            model,
            outer,
            inner: InnerOptConfig {
                lr_peak: 1e-3,
                warmup_steps: 5,
                total_steps: rounds * h,
                ..Default::default()
            },
            seeds: Seeds::default(),
            batch_size: 4,
            eval_batches: 2,
            train_frac: 0.9,
            te_adaptation: true,
            weight_projection: false,
            perf: PerfAssumptions::default(),
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let corpus = Corpus::from_text(&synthetic_corpus(3, 60_000));
        let cfg = tiny_cluster(Preset::HetHalf, 2, 2);
        let a = run_experiment::<f32>(&cfg, &corpus).unwrap();
        let b = run_experiment::<f32>(&cfg, &corpus).unwrap();
        assert_eq!(a.report.metrics_csv(), b.report.metrics_csv());
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.report.alpha, 0.5);
        // Heterogeneous runs log the contribution gap.
        assert!(a.report.rounds[0].het_contribution_gap.is_some());
    }

    #[test]
    fn degenerate_alpha_matches_named_presets() {
        let corpus = Corpus::from_text(&synthetic_corpus(4, 60_000));
        // alpha = 1: every replica uncompressed == baseline preset.
        let base = run_experiment::<f32>(&tiny_cluster(Preset::Baseline, 2, 2), &corpus).unwrap();
        let mut all_unc = tiny_cluster(Preset::HetHalf, 2, 2);
        for r in &mut all_unc.replicas {
            r.pp_compressed = false;
        }
        let het1 = run_experiment::<f32>(&all_unc, &corpus).unwrap();
        assert_eq!(base.report.metrics_csv(), het1.report.metrics_csv());
        assert_eq!(base.model.params, het1.model.params);

        // alpha = 0: every replica compressed == uniform preset.
        let uniform =
            run_experiment::<f32>(&tiny_cluster(Preset::PpCompress, 2, 2), &corpus).unwrap();
        let mut all_c = tiny_cluster(Preset::HetHalf, 2, 2);
        for r in &mut all_c.replicas {
            r.pp_compressed = true;
        }
        let het0 = run_experiment::<f32>(&all_c, &corpus).unwrap();
        assert_eq!(uniform.report.metrics_csv(), het0.report.metrics_csv());
        assert_eq!(uniform.model.params, het0.model.params);
    }

    #[test]
    fn full_rank_compression_matches_uncompressed_closely() {
        let corpus = Corpus::from_text(&synthetic_corpus(5, 60_000));
        let mut compressed = tiny_cluster(Preset::PpCompress, 2, 2);
        for r in &mut compressed.replicas {
            r.k_over_d = 1.0; // k = d: projection is numerically the identity
        }
        let mut plain = tiny_cluster(Preset::Baseline, 2, 2);
        plain.seeds = compressed.seeds;
        let a = run_experiment::<f32>(&compressed, &corpus).unwrap();
        let b = run_experiment::<f32>(&plain, &corpus).unwrap();
        // Same trajectory up to f32 accumulation differences from the
        // project/reconstruct round-trips.
        assert!(a.model.params.max_abs_diff(&b.model.params) < 1e-4);
        let d_eval =
            (a.report.final_eval_loss - b.report.final_eval_loss).abs();
        assert!(d_eval < 1e-4, "eval gap {d_eval}");
    }

    #[test]
    fn pp_byte_meter_matches_closed_form() {
        let corpus = Corpus::from_text(&synthetic_corpus(6, 60_000));
        let cfg = tiny_cluster(Preset::PpCompress, 1, 3);
        let out = run_experiment::<f32>(&cfg, &corpus).unwrap();
        // Per boundary crossing: ids (4 bytes/token) + values (4 bytes each).
        let b = cfg.batch_size;
        let l = cfg.model.seq_len;
        let k = (0.25 * cfg.model.d_model as f64).round() as usize;
        let s = 2usize;
        let per_step = 2 * (s - 1) * (b * l * 4 + b * l * k * 4);
        let expected = (cfg.outer.h * per_step * cfg.replicas.len()) as u64;
        assert_eq!(out.report.rounds[0].pp_bytes, expected);

        // And the perf model's closed form agrees exactly.
        let scenario = PerfScenario {
            param_count: 1.0,
            d_model: cfg.model.d_model,
            seq_len: l,
            micro_batch: b,
            microbatches_per_step: 1,
            stages: s,
            k_over_d: 0.25,
            h: cfg.outer.h,
            activation_bytes_per_elem: 4.0,
            id_bytes_per_token: 4.0,
            tokens_per_step: (b * l) as f64,
            ..Default::default()
        };
        let formula = scenario.pp_step_bytes() * cfg.outer.h as f64 * cfg.replicas.len() as f64;
        assert_eq!(out.report.rounds[0].pp_bytes, formula as u64);
    }

    #[test]
    fn monolithic_replicas_have_no_pp_traffic() {
        let corpus = Corpus::from_text(&synthetic_corpus(7, 60_000));
        let mut cfg = tiny_cluster(Preset::Baseline, 1, 2);
        for r in &mut cfg.replicas {
            r.stages = 1;
        }
        let out = run_experiment::<f32>(&cfg, &corpus).unwrap();
        assert_eq!(out.report.rounds[0].pp_bytes, 0);
        assert!(out.report.rounds[0].dp_bytes > 0);
    }

    #[test]
    fn global_sync_keeps_embedding_in_subspace() {
        let corpus = Corpus::from_text(&synthetic_corpus(11, 60_000));
        let cfg = tiny_cluster(Preset::HetHalf, 2, 2);
        let out = run_experiment::<f32>(&cfg, &corpus).unwrap();
        // Rebuild the run's basis and measure the learnable part's drift.
        let k = (0.25 * cfg.model.d_model as f64).round() as usize;
        let basis =
            ProjectionBasis::<f32>::new(cfg.seeds.basis, cfg.model.d_model, k).unwrap();
        let t_s = out.model.params.get(out.model.layout.t_s);
        let drift = t_s
            .sub(&crate::subspace::project(t_s, &basis).unwrap())
            .unwrap()
            .max_abs();
        assert!(drift < 1e-6, "post-sync drift {drift:e}");
    }

    #[test]
    fn adamw_ddp_preset_syncs_every_step_with_dense_deltas() {
        let corpus = Corpus::from_text(&synthetic_corpus(10, 60_000));
        let mut cfg = tiny_cluster(Preset::AdamwDdp, 4, 1);
        cfg.outer.rounds = 4; // h was forced to 1 by the preset
        assert_eq!(cfg.outer.h, 1);
        assert!(!cfg.outer.dp_topk);
        let out = run_experiment::<f32>(&cfg, &corpus).unwrap();
        // Dense pseudo-gradients: 4 bytes per parameter, send + receive.
        let n = out.model.params.total_elements() as u64;
        assert_eq!(out.report.rounds[0].dp_bytes, 2 * 4 * n * 4 /* replicas */);
        assert!(out.report.final_eval_loss.is_finite());
    }

    #[test]
    fn results_are_thread_count_invariant() {
        let corpus = Corpus::from_text(&synthetic_corpus(9, 60_000));
        let cfg = tiny_cluster(Preset::HetHalf, 2, 2);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_experiment::<f32>(&cfg, &corpus))
            .unwrap();
        let quad = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_experiment::<f32>(&cfg, &corpus))
            .unwrap();
        assert_eq!(single.model.params, quad.model.params);
        assert_eq!(single.report.metrics_csv(), quad.report.metrics_csv());
    }

    #[test]
    fn eval_loss_decreases_on_tiny_run() {
        let corpus = Corpus::from_text(&synthetic_corpus(8, 200_000));
        let cfg = tiny_cluster(Preset::Baseline, 6, 4);
        let out = run_experiment::<f32>(&cfg, &corpus).unwrap();
        assert!(
            out.report.final_eval_loss < out.report.initial_eval_loss,
            "{} !< {}",
            out.report.final_eval_loss,
            out.report.initial_eval_loss
        );
    }
}
