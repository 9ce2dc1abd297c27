//! Manual timing probe for sizing the trend-run configuration.
//! Run with: cargo test -p sparseloco --release --test bench_probe -- --ignored --nocapture

use sparseloco::hetero::data::{synthetic_corpus, Corpus};
use sparseloco::hetero::{ClusterConfig, PerfAssumptions, Preset, Seeds};
use sparseloco::linalg::Precision;
use sparseloco::model::ModelConfig;
use sparseloco::sparseloco::{InnerOptConfig, OuterConfig};

fn trend_cfg(preset: Preset, k_over_d: f64, seed: u64) -> ClusterConfig {
    let model = ModelConfig {
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        ffn_mult: 2.0,
        vocab: 256,
        seq_len: 32,
        precision: Precision::F32,
    };
    let rounds = 60;
    let h = 10;
    let outer = OuterConfig {
        h,
        rounds,
        replicas: 4,
        ..Default::default()
    };
    ClusterConfig {
        replicas: preset.replica_specs(4, 2, k_over_d).unwrap(),
        model,
        outer,
        inner: InnerOptConfig {
            lr_peak: 1e-3,
            warmup_steps: 50,
            total_steps: 600,
            ..Default::default()
        },
        seeds: Seeds {
            model: seed,
            data: seed + 1,
            basis: seed + 2,
        },
        batch_size: 8,
        eval_batches: 2,
        train_frac: 0.95,
        te_adaptation: true,
        weight_projection: false,
        perf: PerfAssumptions::default(),
    }
}

#[test]
#[ignore]
fn time_trend_runs() {
    let corpus = Corpus::from_text(&synthetic_corpus(42, 5_000_000));
    for (name, preset, ratio) in [
        ("baseline", Preset::Baseline, 0.125),
        ("uniform_1_8", Preset::PpCompress, 0.125),
        ("het_1_8", Preset::HetHalf, 0.125),
        ("uniform_1_32", Preset::PpCompress, 1.0 / 32.0),
    ] {
        let t0 = std::time::Instant::now();
        let out =
            sparseloco::hetero::run_experiment::<f32>(&trend_cfg(preset, ratio, 11), &corpus)
                .unwrap();
        println!(
            "{name}: {:.1}s  eval {:.4} -> {:.4}",
            t0.elapsed().as_secs_f64(),
            out.report.initial_eval_loss,
            out.report.final_eval_loss
        );
    }
}
