use serde::{Deserialize, Serialize};
use sparseloco::hetero::{ClusterConfig, PerfAssumptions, Preset, ReplicaSpec, Seeds};
use sparseloco::model::ModelConfig;
use sparseloco::perfmodel::{HardwareSpec, LinkSpec, PerfScenario};
use sparseloco::sparseloco::{InnerOptConfig, OuterConfig};
use std::path::{Path, PathBuf};

/// Run configuration file (TOML). Every section is optional and falls back
/// to desk-scale defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub outer: OuterConfig,
    pub inner: InnerOptConfig,
    pub cluster: ClusterSection,
    pub train: TrainSection,
    pub perf: PerfSection,
    pub seeds: Seeds,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    /// Named deployment: baseline, pp_compress, het_half, adamw_ddp.
    pub preset: Preset,
    /// Pipeline stages per replica.
    pub stages: usize,
    /// Subspace width fraction for compressed replicas.
    pub k_over_d: f64,
    /// Explicit replica list; overrides the preset when non-empty.
    pub replicas: Vec<ReplicaSpec>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            preset: Preset::Baseline,
            stages: 2,
            k_over_d: 0.125,
            replicas: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// UTF-8 text corpus, tokenized at the byte level.
    pub corpus: PathBuf,
    pub batch_size: usize,
    pub eval_batches: usize,
    pub train_frac: f64,
    pub te_adaptation: bool,
    pub weight_projection: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data/corpus.txt"),
            batch_size: 32,
            eval_batches: 2,
            train_frac: 0.95,
            te_adaptation: true,
            weight_projection: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfSection {
    pub scenario: PerfScenario,
    pub hw: HardwareSpec,
    pub link: LinkSpec,
    pub bandwidth_min_bps: f64,
    pub bandwidth_max_bps: f64,
    pub bandwidth_points: usize,
    pub ratios: Vec<f64>,
    pub total_steps: f64,
}

impl Default for PerfSection {
    fn default() -> Self {
        Self {
            scenario: PerfScenario::default(),
            hw: HardwareSpec::default(),
            link: LinkSpec::default(),
            bandwidth_min_bps: 1e7,
            bandwidth_max_bps: 1e10,
            bandwidth_points: 25,
            ratios: vec![
                1.0,
                1.0 / 8.0,
                1.0 / 24.0,
                1.0 / 96.0,
                1.0 / 192.0,
                1.0 / 384.0,
                1.0 / 768.0,
            ],
            total_steps: 19_500.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// Apply a base-seed override (model = n, data = n + 1, basis = n + 2).
    pub fn override_seed(&mut self, n: u64) {
        self.seeds = Seeds {
            model: n,
            data: n.wrapping_add(1),
            basis: n.wrapping_add(2),
        };
    }

    /// Resolve the cluster configuration for the training/ablation commands.
    pub fn cluster(&self) -> Result<ClusterConfig, String> {
        let mut outer = self.outer;
        let replicas = if self.cluster.replicas.is_empty() {
            self.cluster.preset.adjust_outer(&mut outer);
            self.cluster
                .preset
                .replica_specs(outer.replicas, self.cluster.stages, self.cluster.k_over_d)
                .map_err(|e| e.to_string())?
        } else {
            if self.cluster.replicas.len() != outer.replicas {
                return Err(format!(
                    "explicit replica list has {} entries but outer.replicas = {}",
                    self.cluster.replicas.len(),
                    outer.replicas
                ));
            }
            self.cluster.replicas.clone()
        };
        let cfg = ClusterConfig {
            replicas,
            model: self.model.clone(),
            outer,
            inner: self.inner,
            seeds: self.seeds,
            batch_size: self.train.batch_size,
            eval_batches: self.train.eval_batches,
            train_frac: self.train.train_frac,
            te_adaptation: self.train.te_adaptation,
            weight_projection: self.train.weight_projection,
            perf: PerfAssumptions {
                link: self.perf.link,
                hw: self.perf.hw,
            },
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}
