//! Target sweeps: design and simulate a migration for every (target, profile)
//! pair and classify each target into a feasibility region.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StrategyKind;
use crate::orchestrator::{Designer, MigrationTask, Objective};
use crate::scenario::ScenarioFile;
use crate::simnet::run_scenario;
use crate::units::{bytes_per_sec_to_mbps, format_sig};

pub const CSV_HEADER: [&str; 11] = [
    "target_s",
    "profile",
    "strategy",
    "iterations",
    "bandwidth_mbps",
    "pred_downtime_s",
    "pred_total_s",
    "sim_downtime_s",
    "sim_total_s",
    "bytes_transferred",
    "region",
];

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Sweep the migration-duration target of a downtime-minimizing task.
    TargetDuration,
    /// Sweep the downtime target of a resource-minimizing task.
    TargetDowntime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub from_s: f64,
    pub to_s: f64,
    pub step_s: f64,
    pub profiles: Vec<String>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.from_s.is_finite() && self.to_s.is_finite() && self.from_s > 0.0 && self.from_s < self.to_s && self.step_s > 0.0;
        if !ok {
            return Err(Error::Scenario(format!(
                "sweep needs 0 < from_s < to_s and step_s > 0, got from {} to {} step {}",
                self.from_s, self.to_s, self.step_s
            )));
        }
        if self.profiles.is_empty() {
            return Err(Error::Scenario("sweep lists no profiles".into()));
        }
        Ok(())
    }

    /// `from_s, from_s + step_s, ...` up to `to_s`, computed by index so the
    /// grid does not drift.
    pub fn targets(&self) -> Vec<f64> {
        let n = ((self.to_s - self.from_s) / self.step_s + 1e-9).floor() as usize;
        (0..=n).map(|i| self.from_s + i as f64 * self.step_s).collect()
    }

    /// Every (target, profile) pair in emission order.
    pub fn points(&self) -> Vec<(f64, String)> {
        let mut profiles = self.profiles.clone();
        profiles.sort();
        profiles.dedup();
        self.targets()
            .into_iter()
            .flat_map(|t| profiles.iter().map(move |p| (t, p.clone())))
            .collect()
    }

    pub fn task(&self, base: &MigrationTask, profile: &str, target_s: f64) -> MigrationTask {
        let mut task = MigrationTask {
            container_id: profile.to_string(),
            target_duration_s: None,
            target_downtime_s: None,
            ..base.clone()
        };
        match self.variable {
            SweepVariable::TargetDuration => {
                task.objective = Objective::MinimizeDowntime;
                task.target_duration_s = Some(target_s);
            }
            SweepVariable::TargetDowntime => {
                task.objective = Objective::MinimizeResources;
                task.target_downtime_s = Some(target_s);
            }
        }
        task
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Every swept profile meets the target.
    Green,
    /// Only some profiles meet it.
    Yellow,
    /// No profile meets it.
    Red,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Green => "green",
            Region::Yellow => "yellow",
            Region::Red => "red",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_s: f64,
    pub profile: String,
    pub strategy: StrategyKind,
    pub iterations: u32,
    pub bandwidth_mbps: f64,
    pub pred_downtime_s: f64,
    pub pred_total_s: f64,
    pub sim_downtime_s: f64,
    pub sim_total_s: f64,
    /// Simulated bytes moved over the link.
    pub bytes_transferred: f64,
    pub target_met: bool,
    pub region: Region,
}

impl SweepRow {
    fn csv_record(&self) -> [String; 11] {
        [
            format_sig(self.target_s, 6),
            self.profile.clone(),
            self.strategy.as_str().to_string(),
            self.iterations.to_string(),
            format_sig(self.bandwidth_mbps, 6),
            format_sig(self.pred_downtime_s, 6),
            format_sig(self.pred_total_s, 6),
            format_sig(self.sim_downtime_s, 6),
            format_sig(self.sim_total_s, 6),
            format_sig(self.bytes_transferred, 6),
            self.region.as_str().to_string(),
        ]
    }
}

/// Designs and simulates one sweep point. The region is filled in by
/// [`classify`].
pub fn evaluate_point(file: &ScenarioFile, spec: &SweepSpec, designer: &Designer, target_s: f64, profile: &str) -> Result<SweepRow> {
    let task = spec.task(&file.task, profile, target_s);
    let metrics = file.metrics_for(profile)?;
    let config = designer.design(&task, &metrics)?;
    let scenario = file.scenario_for(profile)?.with_task(task);
    let measured = run_scenario(&scenario, &config)?.measured()?;
    Ok(SweepRow {
        target_s,
        profile: profile.to_string(),
        strategy: config.strategy.kind(),
        iterations: config.strategy.iterations(),
        bandwidth_mbps: bytes_per_sec_to_mbps(config.bandwidth),
        pred_downtime_s: config.predicted.downtime_s,
        pred_total_s: config.predicted.total_s,
        sim_downtime_s: measured.downtime_s,
        sim_total_s: measured.total_s,
        bytes_transferred: measured.bytes_transferred,
        target_met: config.target_met,
        region: Region::Red,
    })
}

/// Sorts rows by target then profile and assigns regions per target.
pub fn classify(mut rows: Vec<SweepRow>) -> Vec<SweepRow> {
    rows.sort_by(|a, b| a.target_s.total_cmp(&b.target_s).then_with(|| a.profile.cmp(&b.profile)));
    let mut start = 0;
    while start < rows.len() {
        let end = start + rows[start..].iter().take_while(|r| r.target_s == rows[start].target_s).count();
        let met = rows[start..end].iter().filter(|r| r.target_met).count();
        let region = if met == end - start {
            Region::Green
        } else if met == 0 {
            Region::Red
        } else {
            Region::Yellow
        };
        for r in &mut rows[start..end] {
            r.region = region;
        }
        start = end;
    }
    rows
}

/// Runs the whole sweep sequentially.
pub fn run_sweep(file: &ScenarioFile, spec: &SweepSpec, designer: &Designer) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let rows = spec
        .points()
        .iter()
        .map(|(t, p)| evaluate_point(file, spec, designer, *t, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(classify(rows))
}

pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.csv_record()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let targets: Vec<f64> = {
        let mut t: Vec<f64> = rows.iter().map(|r| r.target_s).collect();
        t.dedup();
        t
    };
    let _ = writeln!(s, "targets: {} ({} rows)", targets.len(), rows.len());
    let mut per_profile: BTreeMap<&str, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        per_profile.entry(&r.profile).or_default().push(r);
    }
    for (profile, rs) in &per_profile {
        match rs.iter().find(|r| r.target_met) {
            Some(first) => {
                let _ = writeln!(s, "{profile}: first met target {} s", format_sig(first.target_s, 6));
            }
            None => {
                let _ = writeln!(s, "{profile}: no target met");
            }
        }
    }
    for region in [Region::Green, Region::Yellow, Region::Red] {
        let n = rows.chunk_by(|a, b| a.target_s == b.target_s).filter(|c| c[0].region == region).count();
        let _ = writeln!(s, "{}: {n} targets", region.as_str());
    }
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} s  {:<12} {:<20} I={:<3} L={} Mbps  downtime {} / {} s  total {} / {} s  [{}]",
            format_sig(r.target_s, 6),
            r.profile,
            r.strategy.as_str(),
            r.iterations,
            format_sig(r.bandwidth_mbps, 6),
            format_sig(r.sim_downtime_s, 6),
            format_sig(r.pred_downtime_s, 6),
            format_sig(r.sim_total_s, 6),
            format_sig(r.pred_total_s, 6),
            r.region.as_str()
        );
    }
    s
}

/// Writes `sweep.csv` and `summary.txt` into `dir`, creating it if needed.
pub fn emit_report(rows: &[SweepRow], dir: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::domain("no sweep rows to report"));
    }
    fs::create_dir_all(dir)?;
    let file = fs::File::create(dir.join(SWEEP_CSV))?;
    write_csv(rows, std::io::BufWriter::new(file))?;
    fs::write(dir.join(SUMMARY_TXT), summary(rows))?;
    Ok(())
}
