//! Analytic bandwidth/compute model: compute utilization versus inter-stage
//! bandwidth and simulated wall-clock time, for arbitrary model, pipeline,
//! and compression configurations.
//!
//! The model is a serial cost sum (no compute/communication overlap, no
//! pipeline-bubble modeling): conservative, monotone in bandwidth and
//! compression, and auditable against the closed-form byte counts metered by
//! the in-process channels. An overlap factor `omega` in [0, 1] optionally
//! hides that fraction of communication time (default 0: fully exposed).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Compute capability of one replica's stage group.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareSpec {
    /// Aggregate peak floating ops/sec of the replica's stage group.
    pub peak_flops: f64,
    /// Achieved fraction of peak.
    pub mfu: f64,
}

impl Default for HardwareSpec {
    /// Resource-limited participant group: a handful of consumer
    /// accelerators jointly hosting one pipeline replica.
    fn default() -> Self {
        Self {
            peak_flops: 2.5e13,
            mfu: 0.4,
        }
    }
}

/// One network link.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSpec {
    /// Bits per second.
    pub bandwidth_bps: f64,
    /// Seconds per message.
    pub latency_s: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self {
            bandwidth_bps: 1e9,
            latency_s: 0.0,
        }
    }
}

/// Scenario driving the analytic model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerfScenario {
    /// Trainable parameters.
    pub param_count: f64,
    pub d_model: usize,
    pub seq_len: usize,
    /// Micro-batch size in sequences.
    pub micro_batch: usize,
    pub microbatches_per_step: usize,
    pub stages: usize,
    /// 1.0 = uncompressed inter-stage traffic.
    pub k_over_d: f64,
    /// Inner steps per outer round.
    pub h: usize,
    /// Nonzero fraction of the pseudo-gradient exchange.
    pub dp_density: f64,
    /// Bytes per transmitted activation element.
    pub activation_bytes_per_elem: f64,
    /// Bytes per transmitted pseudo-gradient value (value + index).
    pub dp_bytes_per_value: f64,
    /// Per-token packet overhead (token ids on the desk wire format; zero
    /// for the large-scale scenarios).
    pub id_bytes_per_token: f64,
    /// Tokens processed per inner step by this replica.
    pub tokens_per_step: f64,
    /// Fraction of communication hidden by overlap (0 = serial).
    pub overlap: f64,
}

impl Default for PerfScenario {
    /// 70B-parameter replica split into 4 stages, H = 50. One pipeline
    /// replica of an 8-replica deployment (65,536 of the 524,288 global
    /// tokens per step), bf16 activations.
    fn default() -> Self {
        Self {
            param_count: 70e9,
            d_model: 8192,
            seq_len: 2048,
            micro_batch: 1,
            microbatches_per_step: 32,
            stages: 4,
            k_over_d: 0.125,
            h: 50,
            dp_density: 0.0078125,
            activation_bytes_per_elem: 2.0,
            dp_bytes_per_value: 6.0,
            id_bytes_per_token: 0.0,
            tokens_per_step: 65536.0,
            overlap: 0.0,
        }
    }
}

impl PerfScenario {
    /// 512M-parameter scenario used for the wall-clock comparison.
    pub fn llama_512m() -> Self {
        Self {
            param_count: 512e6,
            d_model: 1536,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.param_count <= 0.0
            || self.stages == 0
            || self.h == 0
            || self.micro_batch == 0
            || self.microbatches_per_step == 0
            || self.tokens_per_step <= 0.0
        {
            return Err(Error::Config("perf scenario has non-positive dimensions".into()));
        }
        if !(self.k_over_d > 0.0 && self.k_over_d <= 1.0) {
            return Err(Error::Config(format!("k_over_d {} outside (0, 1]", self.k_over_d)));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        Ok(())
    }

    /// Bytes crossing stage boundaries per inner step (both directions, all
    /// boundaries, all microbatches).
    pub fn pp_step_bytes(&self) -> f64 {
        let per_token = self.d_model as f64 * self.k_over_d * self.activation_bytes_per_elem
            + self.id_bytes_per_token;
        2.0 * (self.stages as f64 - 1.0)
            * self.microbatches_per_step as f64
            * (self.micro_batch * self.seq_len) as f64
            * per_token
    }

    /// Point-to-point messages per inner step.
    pub fn pp_step_messages(&self) -> f64 {
        2.0 * (self.stages as f64 - 1.0) * self.microbatches_per_step as f64
    }

    /// Bytes exchanged per outer round for the pseudo-gradient sync
    /// (send + receive of the average, star abstraction).
    pub fn dp_round_bytes(&self) -> f64 {
        self.param_count * self.dp_density * self.dp_bytes_per_value * 2.0
    }
}

/// Seconds of compute per inner step: `6 N tokens / (peak * mfu)`.
pub fn step_compute_time(s: &PerfScenario, hw: &HardwareSpec) -> f64 {
    6.0 * s.param_count * s.tokens_per_step / (hw.peak_flops * hw.mfu)
}

/// Seconds of inter-stage communication per inner step.
pub fn pp_comm_time(s: &PerfScenario, link: &LinkSpec) -> f64 {
    if s.stages <= 1 {
        return 0.0;
    }
    s.pp_step_bytes() * 8.0 / link.bandwidth_bps + s.pp_step_messages() * link.latency_s
}

/// Seconds of pseudo-gradient exchange per outer round.
pub fn dp_comm_time(s: &PerfScenario, link: &LinkSpec) -> f64 {
    s.dp_round_bytes() * 8.0 / link.bandwidth_bps + 2.0 * link.latency_s
}

/// Exposed (non-overlapped) communication seconds per inner step.
fn exposed_comm_per_step(s: &PerfScenario, link: &LinkSpec) -> f64 {
    (1.0 - s.overlap) * (pp_comm_time(s, link) + dp_comm_time(s, link) / s.h as f64)
}

/// Fraction of wall-clock time spent computing.
pub fn utilization(s: &PerfScenario, hw: &HardwareSpec, link: &LinkSpec) -> f64 {
    let tc = step_compute_time(s, hw);
    tc / (tc + exposed_comm_per_step(s, link))
}

/// Total seconds for `total_steps` inner steps.
pub fn wallclock(s: &PerfScenario, hw: &HardwareSpec, link: &LinkSpec, total_steps: f64) -> f64 {
    total_steps * (step_compute_time(s, hw) + exposed_comm_per_step(s, link))
}

/// One sweep row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub bandwidth_bps: f64,
    pub k_over_d: f64,
    pub utilization: f64,
    pub wallclock_s: f64,
}

/// Evaluate the utilization surface over a bandwidth grid and a family of
/// compression ratios. `total_steps` sets the wall-clock column.
pub fn sweep(
    base: &PerfScenario,
    hw: &HardwareSpec,
    latency_s: f64,
    bandwidths_bps: &[f64],
    ratios: &[f64],
    total_steps: f64,
) -> Result<Vec<SweepRow>> {
    if bandwidths_bps.is_empty() || ratios.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut rows = Vec::with_capacity(bandwidths_bps.len() * ratios.len());
    for &ratio in ratios {
        let mut s = *base;
        s.k_over_d = ratio;
        s.validate()?;
        for &bw in bandwidths_bps {
            if bw <= 0.0 {
                return Err(Error::Config(format!("non-positive bandwidth {bw}")));
            }
            let link = LinkSpec {
                bandwidth_bps: bw,
                latency_s,
            };
            rows.push(SweepRow {
                bandwidth_bps: bw,
                k_over_d: ratio,
                utilization: utilization(&s, hw, &link),
                wallclock_s: wallclock(&s, hw, &link, total_steps),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(peak: f64) -> HardwareSpec {
        HardwareSpec {
            peak_flops: peak,
            mfu: 0.4,
        }
    }

    #[test]
    fn compute_time_formula_evaluation() {
        // 6 * 70e9 * 524288 / (1e15 * 0.4)
        let s = PerfScenario {
            tokens_per_step: 524288.0,
            ..Default::default()
        };
        let t = step_compute_time(&s, &hw(1e15));
        let expected = 6.0 * 70e9 * 524288.0 / 4e14;
        assert!((t - expected).abs() < 1e-9);
        assert!((expected - 550.5).abs() < 0.1);

        // Linearity in tokens; zero-cost limit.
        let s2 = PerfScenario {
            tokens_per_step: 2.0 * 524288.0,
            ..Default::default()
        };
        assert!((step_compute_time(&s2, &hw(1e15)) - 2.0 * t).abs() < 1e-9);
        assert!(step_compute_time(&s, &hw(1e30)) < 1e-10);
    }

    #[test]
    fn pp_bytes_formula_evaluation() {
        // One microbatch, b=1, L=2048, d=8192, k/d=1/8, 2 bytes, S=4:
        // bytes = 2 * 3 * 1 * 2048 * 1024 * 2 = 25,165,824.
        let s = PerfScenario {
            microbatches_per_step: 1,
            ..Default::default()
        };
        assert_eq!(s.pp_step_bytes(), 25_165_824.0);
        let link = LinkSpec {
            bandwidth_bps: 1e9,
            latency_s: 0.0,
        };
        let t = pp_comm_time(&s, &link);
        assert!((t - 25_165_824.0 * 8.0 / 1e9).abs() < 1e-12);
        assert!((t - 0.201).abs() < 0.001);

        // Compression scales bytes exactly linearly.
        let unc = PerfScenario {
            k_over_d: 1.0,
            microbatches_per_step: 1,
            ..Default::default()
        };
        assert!((s.pp_step_bytes() * 8.0 - unc.pp_step_bytes()).abs() < 1e-6);

        // Single stage communicates nothing.
        let s1 = PerfScenario {
            stages: 1,
            ..Default::default()
        };
        assert_eq!(pp_comm_time(&s1, &link), 0.0);
    }

    #[test]
    fn dp_bytes_formula_evaluation() {
        let s = PerfScenario::default();
        // N * density * 6 bytes * 2 directions.
        let expected = 70e9 * 0.0078125 * 6.0 * 2.0;
        assert_eq!(s.dp_round_bytes(), expected);

        let zero = PerfScenario {
            dp_density: 0.0,
            ..Default::default()
        };
        let link = LinkSpec::default();
        assert_eq!(dp_comm_time(&zero, &link), 0.0);

        // Doubling H halves the per-step amortized cost.
        let h2 = PerfScenario {
            h: 100,
            ..Default::default()
        };
        assert!(
            (dp_comm_time(&s, &link) / s.h as f64 - 2.0 * dp_comm_time(&h2, &link) / h2.h as f64)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn utilization_limits_and_ordering() {
        let s = PerfScenario::default();
        let hw = HardwareSpec::default();
        let wide = LinkSpec {
            bandwidth_bps: 1e18,
            latency_s: 0.0,
        };
        assert!(utilization(&s, &hw, &wide) > 0.999999);

        // Compressed beats uncompressed at the same bandwidth.
        let gbit = LinkSpec {
            bandwidth_bps: 1e9,
            latency_s: 0.0,
        };
        let unc = PerfScenario {
            k_over_d: 1.0,
            ..Default::default()
        };
        assert!(utilization(&s, &hw, &gbit) > utilization(&unc, &hw, &gbit));
    }

    #[test]
    fn utilization_checkpoint_97_percent() {
        // 70B, S=4, H=50, k/d=1/8: >= 0.97 across 100 Mb/s..1 Gb/s.
        let s = PerfScenario::default();
        let hw = HardwareSpec::default();
        for bw in [1e8, 2e8, 5e8, 1e9] {
            let u = utilization(
                &s,
                &hw,
                &LinkSpec {
                    bandwidth_bps: bw,
                    latency_s: 0.0,
                },
            );
            assert!(u >= 0.97, "utilization {u} at {bw} bps");
        }
    }

    #[test]
    fn wallclock_consistency_identity() {
        let s = PerfScenario::default();
        let hw = HardwareSpec::default();
        let link = LinkSpec {
            bandwidth_bps: 3e8,
            latency_s: 0.0,
        };
        let steps = 1953.0;
        let wc = wallclock(&s, &hw, &link, steps);
        let u = utilization(&s, &hw, &link);
        let tc = step_compute_time(&s, &hw);
        let rel = (wc * u - steps * tc).abs() / (steps * tc);
        assert!(rel < 1e-12);
        assert_eq!(wallclock(&s, &hw, &link, 0.0), 0.0);
    }

    #[test]
    fn extended_budget_compressed_beats_uncompressed_at_1gbps() {
        // 512M scenario at 1 Gb/s: a 12B-token compressed run finishes before
        // a 10B-token uncompressed run.
        let hw = HardwareSpec::default();
        let link = LinkSpec {
            bandwidth_bps: 1e9,
            latency_s: 0.0,
        };
        let compressed = PerfScenario::llama_512m();
        let uncompressed = PerfScenario {
            k_over_d: 1.0,
            ..PerfScenario::llama_512m()
        };
        let steps_12b = 12e9 / compressed.tokens_per_step;
        let steps_10b = 10e9 / uncompressed.tokens_per_step;
        let t_compressed = wallclock(&compressed, &hw, &link, steps_12b);
        let t_uncompressed = wallclock(&uncompressed, &hw, &link, steps_10b);
        assert!(t_compressed < t_uncompressed);
    }

    #[test]
    fn sweep_monotonicity() {
        let base = PerfScenario::default();
        let hw = HardwareSpec::default();
        let bws: Vec<f64> = (0..20).map(|i| 1e7 * 2f64.powi(i)).collect();
        let ratios = [1.0, 0.125, 1.0 / 96.0];
        let rows = sweep(&base, &hw, 0.0, &bws, &ratios, 1000.0).unwrap();
        assert_eq!(rows.len(), bws.len() * ratios.len());
        // Monotone nondecreasing in bandwidth per ratio.
        for chunk in rows.chunks(bws.len()) {
            for w in chunk.windows(2) {
                assert!(w[1].utilization >= w[0].utilization - 1e-15);
            }
        }
        // At fixed bandwidth, smaller k/d never hurts utilization.
        for i in 0..bws.len() {
            let u_unc = rows[i].utilization;
            let u_8 = rows[bws.len() + i].utilization;
            let u_96 = rows[2 * bws.len() + i].utilization;
            assert!(u_8 >= u_unc - 1e-15);
            assert!(u_96 >= u_8 - 1e-15);
        }
        // Utilization stays in (0, 1].
        assert!(rows.iter().all(|r| r.utilization > 0.0 && r.utilization <= 1.0));

        // Single point agrees with direct evaluation.
        let single = sweep(&base, &hw, 0.0, &[1e9], &[0.125], 10.0).unwrap();
        let direct = utilization(
            &base,
            &hw,
            &LinkSpec {
                bandwidth_bps: 1e9,
                latency_s: 0.0,
            },
        );
        assert_eq!(single[0].utilization, direct);

        assert!(sweep(&base, &hw, 0.0, &[], &ratios, 1.0).is_err());
    }
}
