//! JSON scenario files.
//!
//! One document describes the topology, the microservice profiles, the cost
//! model and the task, plus optional inputs for profiling, calibration, target
//! sweeps and bandwidth-uncertainty analysis. Bandwidths are given in Mbps
//! (1 Mbps = 125000 B/s) and converted on the way in.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::Role;
use crate::error::{Error, Result};
use crate::model::{ModelParams, MsProfile, DEFAULT_PAGE_SIZE};
use crate::orchestrator::{BandwidthDistribution, MetricsView, MigrationTask};
use crate::profiler::{CalibrationRun, DirtySample};
use crate::simnet::{Host, Link, Scenario};
use crate::sweep::SweepSpec;
use crate::units::mbps_to_bytes_per_sec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub src: String,
    pub dst: String,
    pub bandwidth_mbps: f64,
    #[serde(default)]
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub id: String,
    pub state_size_bytes: u64,
    #[serde(default = "default_page_size")]
    pub page_size_bytes: u64,
    pub dirty_rate_norm: f64,
    #[serde(default)]
    pub cpu_context_bytes: u64,
    /// Absolute dirtying rate driving the simulator.
    #[serde(default)]
    pub dirty_rate_pages_per_s: f64,
}

fn default_page_size() -> u64 {
    DEFAULT_PAGE_SIZE
}

impl ProfileEntry {
    pub fn profile(&self) -> MsProfile {
        MsProfile {
            state_size_bytes: self.state_size_bytes,
            page_size_bytes: self.page_size_bytes,
            dirty_rate_norm: self.dirty_rate_norm,
            cpu_context_bytes: self.cpu_context_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationEntry {
    pub image_bytes: u64,
    pub ckpt_s: f64,
    pub restore_s: f64,
    pub transfer_s: f64,
    pub bandwidth_mbps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_update_s: Option<f64>,
}

impl CalibrationEntry {
    pub fn run(&self) -> CalibrationRun {
        CalibrationRun {
            namespace_s: self.namespace_s,
            flow_update_s: self.flow_update_s,
            ..CalibrationRun::new(
                self.image_bytes,
                self.ckpt_s,
                self.restore_s,
                self.transfer_s,
                mbps_to_bytes_per_sec(self.bandwidth_mbps),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthDistributionEntry {
    pub mean_mbps: f64,
    pub std_mbps: f64,
    /// Defaults to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_mbps: Option<f64>,
    /// Defaults to five standard deviations above the mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_mbps: Option<f64>,
}

impl BandwidthDistributionEntry {
    pub fn distribution(&self) -> BandwidthDistribution {
        let mut d = BandwidthDistribution::new(mbps_to_bytes_per_sec(self.mean_mbps), mbps_to_bytes_per_sec(self.std_mbps));
        if let Some(l) = self.lower_mbps {
            d.lower_trunc = mbps_to_bytes_per_sec(l);
        }
        if let Some(u) = self.upper_mbps {
            d.upper_trunc = mbps_to_bytes_per_sec(u);
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub hosts: Vec<Host>,
    pub links: Vec<LinkEntry>,
    pub ms_profiles: Vec<ProfileEntry>,
    pub model_params: ModelParams,
    /// `container_id` names the profile being migrated.
    pub task: MigrationTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Dirty-page samples per profile id, for `profile`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dirty_samples: BTreeMap<String, Vec<DirtySample>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub calibration_runs: Vec<CalibrationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_distribution: Option<BandwidthDistributionEntry>,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        for (i, p) in self.ms_profiles.iter().enumerate() {
            if self.ms_profiles[..i].iter().any(|o| o.id == p.id) {
                return bad(format!("duplicate profile {}", p.id));
            }
            p.profile().validate().map_err(|e| Error::Scenario(format!("profile {}: {e}", p.id)))?;
        }
        self.profile(&self.task.container_id)?;
        if let Some(sweep) = &self.sweep {
            sweep.validate()?;
            for id in &sweep.profiles {
                self.profile(id)?;
            }
        }
        for id in self.dirty_samples.keys() {
            self.profile(id)?;
        }
        // Topology, task and parameter checks.
        self.scenario_for(&self.task.container_id)?.validate()
    }

    pub fn profile(&self, id: &str) -> Result<&ProfileEntry> {
        self.ms_profiles
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Scenario(format!("unknown profile {id:?}")))
    }

    /// Simulation scenario migrating profile `id` with the file's task
    /// endpoints and seed.
    pub fn scenario_for(&self, id: &str) -> Result<Scenario> {
        let entry = self.profile(id)?;
        Ok(Scenario {
            hosts: self.hosts.clone(),
            links: self
                .links
                .iter()
                .map(|l| Link {
                    src: l.src.clone(),
                    dst: l.dst.clone(),
                    bandwidth: mbps_to_bytes_per_sec(l.bandwidth_mbps),
                    latency_s: l.latency_s,
                })
                .collect(),
            profile: entry.profile(),
            dirty_rate_pages_per_s: entry.dirty_rate_pages_per_s,
            params: self.model_params,
            task: MigrationTask {
                container_id: id.to_string(),
                ..self.task.clone()
            },
            seed: self.seed,
        })
    }

    /// Designer inputs for profile `id`: the available bandwidth is the
    /// capacity of the link between the task's endpoints.
    pub fn metrics_for(&self, id: &str) -> Result<MetricsView> {
        let scenario = self.scenario_for(id)?;
        Ok(MetricsView {
            profile: scenario.profile,
            params: self.model_params,
            available_bandwidth: scenario.migration_link()?.bandwidth,
        })
    }

    /// A ready-to-edit example with two edge hosts and two profiles.
    pub fn example() -> Self {
        let host = |id: &str, role| Host { id: id.into(), role };
        Self {
            hosts: vec![
                host("edge-1", Role::Source),
                host("edge-2", Role::Destination),
                host("controller", Role::Orchestrator),
                host("ue", Role::Client),
            ],
            links: vec![
                LinkEntry {
                    src: "edge-1".into(),
                    dst: "edge-2".into(),
                    bandwidth_mbps: 1000.0,
                    latency_s: 0.0,
                },
                LinkEntry {
                    src: "controller".into(),
                    dst: "edge-1".into(),
                    bandwidth_mbps: 1000.0,
                    latency_s: 0.0005,
                },
                LinkEntry {
                    src: "controller".into(),
                    dst: "edge-2".into(),
                    bandwidth_mbps: 1000.0,
                    latency_s: 0.0005,
                },
            ],
            ms_profiles: vec![
                ProfileEntry {
                    id: "stream".into(),
                    state_size_bytes: 10_485_760,
                    page_size_bytes: 4096,
                    dirty_rate_norm: 4.0 / 2559.0,
                    cpu_context_bytes: 0,
                    dirty_rate_pages_per_s: 0.5,
                },
                ProfileEntry {
                    id: "probe".into(),
                    state_size_bytes: 524_288,
                    page_size_bytes: 4096,
                    dirty_rate_norm: 0.02,
                    cpu_context_bytes: 0,
                    dirty_rate_pages_per_s: 0.2,
                },
            ],
            model_params: ModelParams {
                ckpt_fixed_s: 1.401,
                ckpt_per_byte_s: 0.0,
                pre_ckpt_fixed_s: 1.401,
                pre_ckpt_per_byte_s: 0.0,
                restore_fixed_s: 0.8986,
                restore_per_byte_s: 3.4e-9,
                transfer_signaling_s: 1.1845,
                ns_overhead_s: 0.084,
                flow_update_s: 0.004,
            },
            task: MigrationTask::minimize_downtime("stream", "edge-1", "edge-2", 8.0),
            sweep: Some(SweepSpec {
                variable: crate::sweep::SweepVariable::TargetDuration,
                from_s: 2.0,
                to_s: 10.0,
                step_s: 1.0,
                profiles: vec!["stream".into(), "probe".into()],
            }),
            seed: 7,
            dirty_samples: BTreeMap::from([(
                "stream".to_string(),
                vec![
                    DirtySample {
                        window_s: 1.0,
                        pages_modified: 4,
                    },
                    DirtySample {
                        window_s: 1.0,
                        pages_modified: 6,
                    },
                ],
            )]),
            calibration_runs: vec![
                CalibrationEntry {
                    image_bytes: 10_485_760,
                    ckpt_s: 1.384,
                    restore_s: 0.934,
                    transfer_s: 1.267,
                    bandwidth_mbps: 1000.0,
                    namespace_s: Some(0.084),
                    flow_update_s: Some(0.004),
                },
                CalibrationEntry {
                    image_bytes: 524_288,
                    ckpt_s: 1.418,
                    restore_s: 0.902,
                    transfer_s: 1.190,
                    bandwidth_mbps: 1000.0,
                    namespace_s: Some(0.084),
                    flow_update_s: Some(0.004),
                },
            ],
            bandwidth_distribution: Some(BandwidthDistributionEntry {
                mean_mbps: 1000.0,
                std_mbps: 100.0,
                lower_mbps: None,
                upper_mbps: None,
            }),
        }
    }
}
