use crate::config::RunConfig;
use crate::{CliError, CliResult};
use sparseloco::error::Error as CoreError;
use sparseloco::hetero::data::Corpus;
use sparseloco::hetero::{run_experiment, ClusterConfig, RunReport};
use sparseloco::linalg::Precision;
use sparseloco::model::save_checkpoint;
use sparseloco::perfmodel::{self, LinkSpec, PerfScenario};
use sparseloco::verify;
use std::io::Write;
use std::path::Path;

pub fn classify(e: CoreError) -> CliError {
    match e {
        CoreError::Config(_)
        | CoreError::Decode(_)
        | CoreError::Dimension { .. }
        | CoreError::ShapeMismatch { .. }
        | CoreError::Partition(_) => CliError::Config(e.to_string()),
        CoreError::CorpusTooSmall(_) => CliError::Corpus(e.to_string()),
        CoreError::NumericalFailure { .. } | CoreError::NonFinite { .. } => {
            CliError::Numerical(e.to_string())
        }
        CoreError::Io(_) | CoreError::Json(_) => CliError::Io(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

/// Write via temp file + rename; partial artifacts never survive a failure.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> CliResult<Corpus> {
    let bytes = std::fs::read(&cfg.train.corpus).map_err(|e| {
        CliError::Corpus(format!("cannot read corpus {}: {e}", cfg.train.corpus.display()))
    })?;
    if bytes.is_empty() {
        return Err(CliError::Corpus(format!(
            "corpus {} is empty",
            cfg.train.corpus.display()
        )));
    }
    Ok(Corpus::from_bytes(bytes))
}

fn report_json(report: &RunReport) -> CliResult<Vec<u8>> {
    let mut value = serde_json::to_value(report).map_err(|e| CliError::Io(e.to_string()))?;
    value.as_object_mut().expect("report is an object").insert(
        "version".to_string(),
        serde_json::Value::String(env!("CARGO_PKG_VERSION").to_string()),
    );
    serde_json::to_vec_pretty(&value).map_err(|e| CliError::Io(e.to_string()))
}

fn run_cluster(cluster: &ClusterConfig, corpus: &Corpus, out_dir: &Path) -> CliResult<RunReport> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let report = match cluster.model.precision {
        Precision::F32 => {
            let out = run_experiment::<f32>(cluster, corpus).map_err(classify)?;
            save_checkpoint(&out_dir.join("checkpoint"), &out.model).map_err(classify)?;
            out.report
        }
        Precision::F64 => {
            let out = run_experiment::<f64>(cluster, corpus).map_err(classify)?;
            save_checkpoint(&out_dir.join("checkpoint"), &out.model).map_err(classify)?;
            out.report
        }
    };
    Ok(report)
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let cluster = cfg.cluster().map_err(CliError::Config)?;
    let corpus = load_corpus(cfg)?;
    let out_dir = &cfg.output.dir;
    let report = run_cluster(&cluster, &corpus, out_dir)?;

    write_atomic(&out_dir.join("report.json"), &report_json(&report)?)?;
    write_atomic(&out_dir.join("metrics.csv"), report.metrics_csv().as_bytes())?;
    let jsonl = report.metrics_jsonl().map_err(classify)?;
    write_atomic(&out_dir.join("metrics.jsonl"), jsonl.as_bytes())?;
    let echo = toml::to_string_pretty(cfg).map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(&out_dir.join("config_echo.toml"), echo.as_bytes())?;

    println!(
        "train: {} rounds, eval {:.4} -> {:.4}, pp {} B, dp {} B -> {}",
        report.rounds.len(),
        report.initial_eval_loss,
        report.final_eval_loss,
        report.pp_bytes_total,
        report.dp_bytes_total,
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_perf(cfg: &RunConfig) -> CliResult<()> {
    let perf = &cfg.perf;
    if perf.bandwidth_points < 2 || perf.bandwidth_min_bps <= 0.0
        || perf.bandwidth_max_bps <= perf.bandwidth_min_bps
    {
        return Err(CliError::Usage("perf bandwidth grid is empty or inverted".into()));
    }
    if perf.ratios.is_empty() {
        return Err(CliError::Usage("perf ratio list is empty".into()));
    }
    let out_dir = &cfg.output.dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;

    // Log-spaced bandwidth grid.
    let (lo, hi) = (perf.bandwidth_min_bps.log10(), perf.bandwidth_max_bps.log10());
    let n = perf.bandwidth_points;
    let grid: Vec<f64> = (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect();
    let rows = perfmodel::sweep(
        &perf.scenario,
        &perf.hw,
        perf.link.latency_s,
        &grid,
        &perf.ratios,
        perf.total_steps,
    )
    .map_err(classify)?;

    let mut csv = String::from("bandwidth_bps,k_over_d,utilization,wallclock_s\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:.6e},{:.8},{:.6},{:.3}\n",
            r.bandwidth_bps, r.k_over_d, r.utilization, r.wallclock_s
        ));
    }
    write_atomic(&out_dir.join("sweep.csv"), csv.as_bytes())?;

    // Wall-clock comparison at 1 Gb/s: 512M-class scenario, extended
    // compressed budget (12B tokens) versus the uncompressed budget (10B).
    let gbit = LinkSpec {
        bandwidth_bps: 1e9,
        latency_s: perf.link.latency_s,
    };
    let compressed = PerfScenario::llama_512m();
    let uncompressed = PerfScenario {
        k_over_d: 1.0,
        ..compressed
    };
    let comparison = serde_json::json!({
        "link_bps": 1e9,
        "scenario": compressed,
        "uncompressed_10b_tokens_s":
            perfmodel::wallclock(&uncompressed, &perf.hw, &gbit, 10e9 / uncompressed.tokens_per_step),
        "compressed_12b_tokens_s":
            perfmodel::wallclock(&compressed, &perf.hw, &gbit, 12e9 / compressed.tokens_per_step),
    });
    write_atomic(
        &out_dir.join("wallclock_1gbps.json"),
        &serde_json::to_vec_pretty(&comparison).map_err(|e| CliError::Io(e.to_string()))?,
    )?;

    // Scenario echo for provenance.
    let echo = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "scenario": perf.scenario,
        "hw": perf.hw,
        "ratios": perf.ratios,
        "bandwidth_grid": grid,
        "total_steps": perf.total_steps,
    });
    write_atomic(
        &out_dir.join("scenario.json"),
        &serde_json::to_vec_pretty(&echo).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    println!("perf: {} sweep rows -> {}", rows.len(), out_dir.display());
    Ok(())
}

pub fn cmd_verify(filter: Option<&str>) -> CliResult<()> {
    let results = verify::run_checks(filter);
    if results.is_empty() {
        return Err(CliError::Usage(format!(
            "no check matches filter {:?}",
            filter.unwrap_or("")
        )));
    }
    let mut failures = 0usize;
    for r in &results {
        println!(
            "{} {:<34} {:>8.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    println!("{} checks, {failures} failures, {total:.1}s total", results.len());
    if failures > 0 {
        return Err(CliError::VerifyFailed(failures));
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<()> {
    let corpus = load_corpus(cfg)?;
    let out_dir = &cfg.output.dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;

    // 2x2 grid over {embedding adaptation} x {weight projection} with
    // shared seeds and data order. The heterogeneous deployment is the one
    // that exercises both mechanisms: mixed aggregation is what drives the
    // learnable embedding out of the subspace between syncs.
    let mut grid_cfg = cfg.clone();
    grid_cfg.cluster.preset = sparseloco::hetero::Preset::HetHalf;
    grid_cfg.cluster.replicas.clear();
    let mut csv = String::from("te_adaptation,weight_projection,initial_eval_loss,final_eval_loss\n");
    let mut rows = Vec::new();
    for &(te, wp) in &[(true, false), (true, true), (false, false), (false, true)] {
        grid_cfg.train.te_adaptation = te;
        grid_cfg.train.weight_projection = wp;
        let cluster = grid_cfg.cluster().map_err(CliError::Config)?;
        let report = run_cluster(&cluster, &corpus, &out_dir.join(format!("te{te}_wp{wp}")))?;
        println!(
            "ablate te_adaptation={te} weight_projection={wp}: eval {:.4} -> {:.4}",
            report.initial_eval_loss, report.final_eval_loss
        );
        csv.push_str(&format!(
            "{te},{wp},{:.6},{:.6}\n",
            report.initial_eval_loss, report.final_eval_loss
        ));
        rows.push((te, wp, report.final_eval_loss));
    }
    write_atomic(&out_dir.join("ablate.csv"), csv.as_bytes())?;

    // Qualitative direction (reported, not gated): adaptation should not
    // hurt, weight projection is expected to be counterproductive.
    let with_adapt = rows.iter().find(|r| r.0 && !r.1).unwrap().2;
    let without_adapt = rows.iter().find(|r| !r.0 && !r.1).unwrap().2;
    let with_wp = rows.iter().find(|r| r.0 && r.1).unwrap().2;
    let summary = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": cfg.seeds,
        "adaptation_helps": with_adapt <= without_adapt,
        "weight_projection_hurts": with_wp >= with_adapt,
        "final_losses": rows.iter().map(|(te, wp, l)| serde_json::json!({
            "te_adaptation": te, "weight_projection": wp, "final_eval_loss": l
        })).collect::<Vec<_>>(),
    });
    write_atomic(
        &out_dir.join("ablate.json"),
        &serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?,
    )?;
    println!(
        "ablate: adaptation_helps={} weight_projection_hurts={} -> {}",
        with_adapt <= without_adapt,
        with_wp >= with_adapt,
        out_dir.display()
    );
    Ok(())
}
