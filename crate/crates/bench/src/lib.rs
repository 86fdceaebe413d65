//! Shared fixtures for the benchmarks.

use edgemig_core::orchestrator::BandwidthDistribution;
use edgemig_core::simnet::Scenario;
use edgemig_core::{MetricsView, ModelParams, MsProfile};

/// Cost parameters fitted to a container checkpoint/restore toolchain on a
/// 1 Gbps link.
pub fn fitted_params() -> ModelParams {
    ModelParams {
        ckpt_fixed_s: 1.401,
        ckpt_per_byte_s: 0.0,
        pre_ckpt_fixed_s: 1.401,
        pre_ckpt_per_byte_s: 0.0,
        restore_fixed_s: 0.8986,
        restore_per_byte_s: 3.4e-9,
        transfer_signaling_s: 1.1845,
        ns_overhead_s: 0.084,
        flow_update_s: 0.004,
    }
}

pub const GIGABIT: f64 = 1.25e8;

pub fn metrics(state_size_bytes: u64, dirty_rate_norm: f64) -> MetricsView {
    MetricsView {
        profile: MsProfile::new(state_size_bytes, dirty_rate_norm),
        params: fitted_params(),
        available_bandwidth: GIGABIT,
    }
}

/// Two-host scenario dirtying `pages_per_s` pages while live.
pub fn scenario(state_size_bytes: u64, dirty_rate_norm: f64, pages_per_s: f64) -> Scenario {
    Scenario::two_hosts(MsProfile::new(state_size_bytes, dirty_rate_norm), fitted_params(), GIGABIT, 0.0005)
        .with_dirty_rate(pages_per_s)
        .with_seed(1)
}

pub fn gigabit_uncertainty() -> BandwidthDistribution {
    BandwidthDistribution::new(GIGABIT, GIGABIT / 10.0)
}
