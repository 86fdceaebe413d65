//! Migration task handling, metrics aggregation and the migration designer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Error, Result};
use crate::model::{
    cold_kpis, max_iterations, min_bandwidth, strategy_kpis, Kpis, ModelParams, MsProfile, Strategy, StrategyKind,
    DEFAULT_ITERATION_CAP,
};

/// Default age after which an agent report is flagged stale.
pub const DEFAULT_STALENESS_HORIZON_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinimizeDowntime,
    MinimizeResources,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationTask {
    pub container_id: String,
    pub source_agent: String,
    pub destination_agent: String,
    pub objective: Objective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_downtime_s: Option<f64>,
}

impl MigrationTask {
    pub fn minimize_downtime(container: &str, source: &str, destination: &str, target_duration_s: f64) -> Self {
        Self {
            container_id: container.into(),
            source_agent: source.into(),
            destination_agent: destination.into(),
            objective: Objective::MinimizeDowntime,
            target_duration_s: Some(target_duration_s),
            target_downtime_s: None,
        }
    }

    pub fn minimize_resources(container: &str, source: &str, destination: &str, target_downtime_s: f64) -> Self {
        Self {
            container_id: container.into(),
            source_agent: source.into(),
            destination_agent: destination.into(),
            objective: Objective::MinimizeResources,
            target_duration_s: None,
            target_downtime_s: Some(target_downtime_s),
        }
    }

    /// The target that drives the task's objective.
    pub fn target_s(&self) -> Option<f64> {
        match self.objective {
            Objective::MinimizeDowntime => self.target_duration_s,
            Objective::MinimizeResources => self.target_downtime_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.container_id.is_empty(), || "task has no container id".into())?;
        ensure(self.source_agent != self.destination_agent, || {
            "source and destination agents must differ".into()
        })?;
        let target = self.target_s().ok_or_else(|| {
            let which = match self.objective {
                Objective::MinimizeDowntime => "target_duration_s",
                Objective::MinimizeResources => "target_downtime_s",
            };
            Error::domain(format!("objective {:?} requires {which}", self.objective))
        })?;
        ensure(target > 0.0 && target.is_finite(), || format!("target must be positive, got {target}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub profile: MsProfile,
    pub params: ModelParams,
    /// Bytes per second available on the source-destination link.
    pub available_bandwidth: f64,
}

impl MetricsView {
    pub fn validate(&self) -> Result<()> {
        ensure(self.available_bandwidth > 0.0 && self.available_bandwidth.is_finite(), || {
            format!("available bandwidth must be positive, got {}", self.available_bandwidth)
        })?;
        self.profile.validate()?;
        self.params.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationConfig {
    pub strategy: Strategy,
    /// Bytes per second to reserve for the migration.
    pub bandwidth: f64,
    /// Worst-case KPIs of this configuration.
    pub predicted: Kpis,
    /// False when the designer fell back because the target is unreachable.
    pub target_met: bool,
}

impl MigrationConfig {
    /// Builds a configuration for an externally chosen strategy and bandwidth.
    pub fn fixed(strategy: Strategy, bandwidth: f64, profile: &MsProfile, params: &ModelParams) -> Result<Self> {
        Ok(Self {
            strategy,
            bandwidth,
            predicted: strategy_kpis(strategy, profile, params, bandwidth)?,
            target_met: true,
        })
    }
}

/// Configures a migration from a task and the aggregated metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Designer {
    pub iteration_cap: u32,
}

impl Default for Designer {
    fn default() -> Self {
        Self {
            iteration_cap: DEFAULT_ITERATION_CAP,
        }
    }
}

impl Designer {
    pub fn new(iteration_cap: u32) -> Self {
        Self { iteration_cap }
    }

    pub fn design(&self, task: &MigrationTask, metrics: &MetricsView) -> Result<MigrationConfig> {
        task.validate()?;
        metrics.validate()?;
        let MetricsView {
            profile,
            params,
            available_bandwidth,
        } = metrics;
        match task.objective {
            Objective::MinimizeResources => {
                let target = task.target_downtime_s.expect("validated");
                let (bandwidth, met) = match min_bandwidth(profile, params, target, *available_bandwidth)? {
                    Some(l) => (l, true),
                    None => (*available_bandwidth, false),
                };
                Ok(MigrationConfig {
                    strategy: Strategy::Cold,
                    bandwidth,
                    predicted: cold_kpis(profile, params, bandwidth)?,
                    target_met: met,
                })
            }
            Objective::MinimizeDowntime => {
                let target = task.target_duration_s.expect("validated");
                let bandwidth = *available_bandwidth;
                let (strategy, met) =
                    match max_iterations(profile, params, bandwidth, target, self.iteration_cap)? {
                        Some(s) => (s, true),
                        None => (Strategy::Cold, false),
                    };
                Ok(MigrationConfig {
                    strategy,
                    bandwidth,
                    predicted: strategy_kpis(strategy, profile, params, bandwidth)?,
                    target_met: met,
                })
            }
        }
    }
}

/// [`Designer::design`] with the default iteration cap.
pub fn design(task: &MigrationTask, metrics: &MetricsView) -> Result<MigrationConfig> {
    Designer::default().design(task, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEstimate {
    pub peer: String,
    pub bytes_per_s: f64,
}

/// Periodic metrics report sent by an agent's profiling module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent_id: String,
    pub timestamp_s: f64,
    #[serde(default)]
    pub profile: Option<MsProfile>,
    #[serde(default)]
    pub params: Option<ModelParams>,
    #[serde(default)]
    pub bandwidth_estimates: Vec<BandwidthEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedMetrics {
    pub view: MetricsView,
    /// Agents whose report used here is older than the staleness horizon.
    pub stale_agents: Vec<String>,
}

impl AggregatedMetrics {
    pub fn is_stale(&self) -> bool {
        !self.stale_agents.is_empty()
    }
}

/// Collects the metrics a task needs from agent reports.
///
/// The profile and the bandwidth estimate towards the destination come from
/// the source agent's most recent report carrying them; model parameters come
/// from the destination agent. Old reports are used but flagged.
pub fn aggregate(task: &MigrationTask, reports: &[AgentReport], now_s: f64, staleness_horizon_s: f64) -> Result<AggregatedMetrics> {
    let latest = |agent: &str, has: &dyn Fn(&AgentReport) -> bool| -> Option<&AgentReport> {
        reports
            .iter()
            .filter(|r| r.agent_id == agent && has(r))
            // max_by keeps the last of equal elements, so later reports win ties.
            .max_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s))
    };
    if latest(&task.source_agent, &|_| true).is_none() {
        return Err(Error::IncompleteMetrics("source"));
    }
    if latest(&task.destination_agent, &|_| true).is_none() {
        return Err(Error::IncompleteMetrics("destination"));
    }

    let profile_report = latest(&task.source_agent, &|r| r.profile.is_some()).ok_or(Error::IncompleteMetrics("source"))?;
    let towards_dest = |r: &AgentReport| r.bandwidth_estimates.iter().rev().find(|e| e.peer == task.destination_agent).map(|e| e.bytes_per_s);
    let bandwidth_report = latest(&task.source_agent, &|r| towards_dest(r).is_some()).ok_or(Error::IncompleteMetrics("source"))?;
    let params_report = latest(&task.destination_agent, &|r| r.params.is_some()).ok_or(Error::IncompleteMetrics("destination"))?;

    let view = MetricsView {
        profile: profile_report.profile.expect("filtered"),
        params: params_report.params.expect("filtered"),
        available_bandwidth: towards_dest(bandwidth_report).expect("filtered"),
    };
    view.validate()?;

    let mut stale_agents = Vec::new();
    for r in [profile_report, bandwidth_report, params_report] {
        if now_s - r.timestamp_s > staleness_horizon_s && !stale_agents.contains(&r.agent_id) {
            stale_agents.push(r.agent_id.clone());
        }
    }
    Ok(AggregatedMetrics { view, stale_agents })
}

/// Truncated normal model of the available bandwidth, in bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthDistribution {
    pub mean: f64,
    pub std_dev: f64,
    pub lower_trunc: f64,
    pub upper_trunc: f64,
}

impl BandwidthDistribution {
    /// Truncated to `[0, mean + 5 std]`.
    pub fn new(mean: f64, std_dev: f64) -> Self {
        Self {
            mean,
            std_dev,
            lower_trunc: 0.0,
            upper_trunc: mean + 5.0 * std_dev,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.mean.is_finite() && self.std_dev >= 0.0 && self.std_dev.is_finite(), || {
            format!("invalid normal parameters mean={} std={}", self.mean, self.std_dev)
        })?;
        ensure(self.lower_trunc >= 0.0, || "lower truncation must be nonnegative".into())?;
        ensure(self.lower_trunc < self.upper_trunc, || {
            format!(
                "degenerate truncation [{}, {}]",
                self.lower_trunc, self.upper_trunc
            )
        })
    }

    /// Inverse-CDF sampler restricted to the truncation interval.
    fn sampler(&self) -> Result<impl Fn(&mut ChaCha8Rng) -> f64> {
        self.validate()?;
        let (lo, hi, mean) = (self.lower_trunc, self.upper_trunc, self.mean);
        let normal = if self.std_dev > 0.0 {
            Some(Normal::new(self.mean, self.std_dev).map_err(|e| Error::domain(e.to_string()))?)
        } else {
            None
        };
        let (cdf_lo, cdf_hi) = normal.as_ref().map_or((0.0, 0.0), |n| (n.cdf(lo), n.cdf(hi)));
        Ok(move |rng: &mut ChaCha8Rng| -> f64 {
            let u: f64 = rng.random();
            match &normal {
                Some(n) if cdf_hi - cdf_lo > 0.0 => n.inverse_cdf(cdf_lo + u * (cdf_hi - cdf_lo)).clamp(lo, hi),
                // All mass sits outside the window or the variance is zero.
                _ => mean.clamp(lo, hi),
            }
        })
    }
}

/// Empirical outcome of designing under a random available bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDistribution {
    pub probabilities: BTreeMap<StrategyKind, f64>,
    /// Probability of each iteration count among Iterative PreCopy outcomes;
    /// its total mass equals the Iterative PreCopy probability.
    pub iteration_pmf: BTreeMap<u32, f64>,
    pub sample_count: u64,
}

impl StrategyDistribution {
    pub fn probability(&self, kind: StrategyKind) -> f64 {
        self.probabilities.get(&kind).copied().unwrap_or(0.0)
    }
}

/// Monte Carlo distribution of the designer's choice when the available
/// bandwidth follows `dist`. The bandwidth in `metrics` is ignored.
///
/// Equal seeds draw the same bandwidth sequence, so sweeping the target with
/// a fixed seed compares designs on common random numbers.
pub fn strategy_distribution(
    designer: &Designer,
    task: &MigrationTask,
    metrics: &MetricsView,
    dist: &BandwidthDistribution,
    sample_count: u64,
    seed: u64,
) -> Result<StrategyDistribution> {
    ensure(sample_count >= 1, || "sample count must be at least 1".into())?;
    let sample = dist.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: BTreeMap<StrategyKind, u64> = StrategyKind::ALL.iter().map(|&k| (k, 0)).collect();
    let mut rounds: BTreeMap<u32, u64> = BTreeMap::new();
    for _ in 0..sample_count {
        let bandwidth = sample(&mut rng).max(1.0);
        let view = MetricsView {
            available_bandwidth: bandwidth,
            ..*metrics
        };
        let cfg = designer.design(task, &view)?;
        *kinds.get_mut(&cfg.strategy.kind()).expect("all kinds present") += 1;
        if let Strategy::IterativePreCopy { iterations } = cfg.strategy {
            *rounds.entry(iterations).or_default() += 1;
        }
    }
    let n = sample_count as f64;
    Ok(StrategyDistribution {
        probabilities: kinds.into_iter().map(|(k, c)| (k, c as f64 / n)).collect(),
        iteration_pmf: rounds.into_iter().map(|(i, c)| (i, c as f64 / n)).collect(),
        sample_count,
    })
}
