//! Worst-case migration KPI model.
//!
//! Every processing step is affine in the number of bytes it touches, image
//! transfers cost a constant signaling overhead plus `bytes / bandwidth`, and
//! the namespace and flow-update steps are constants. During pre-copy the
//! service is assumed to dirty `r * M` bytes per round, which is the profiled
//! maximum; the resulting KPIs are therefore upper bounds.
//!
//! The Stop&Copy timeline is S1 checkpoint, S3 transfer, S2 namespace clear in
//! parallel with S4 namespace re-creation, S5 flow update and S6 restore. The
//! downtime is the length of that window.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::units::meets_target;

/// Default memory page size in bytes.
pub const DEFAULT_PAGE_SIZE: u64 = 4096;

/// Default upper bound on the number of dirty-page rounds.
pub const DEFAULT_ITERATION_CAP: u32 = 64;

/// Migration-relevant fingerprint of a microservice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsProfile {
    pub state_size_bytes: u64,
    #[serde(default = "default_page_size")]
    pub page_size_bytes: u64,
    /// Normalized dirty-page rate in `[0, 1]`.
    pub dirty_rate_norm: f64,
    /// Residual Stop&Copy image beyond the dirty pages (CPU context, sockets).
    #[serde(default)]
    pub cpu_context_bytes: u64,
}

fn default_page_size() -> u64 {
    DEFAULT_PAGE_SIZE
}

impl MsProfile {
    pub fn new(state_size_bytes: u64, dirty_rate_norm: f64) -> Self {
        Self {
            state_size_bytes,
            page_size_bytes: DEFAULT_PAGE_SIZE,
            dirty_rate_norm,
            cpu_context_bytes: 0,
        }
    }

    pub fn with_cpu_context(mut self, bytes: u64) -> Self {
        self.cpu_context_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.page_size_bytes > 0, || "page size must be positive".into())?;
        ensure((0.0..=1.0).contains(&self.dirty_rate_norm), || {
            format!("normalized dirty rate {} outside [0, 1]", self.dirty_rate_norm)
        })
    }

    /// Number of memory pages backing the state, `ceil(M / sigma)`.
    pub fn page_count(&self) -> u64 {
        self.state_size_bytes.div_ceil(self.page_size_bytes)
    }

    /// Worst-case bytes dirtied per pre-copy round, `r * M`.
    pub fn dirty_volume(&self) -> f64 {
        self.dirty_rate_norm * self.state_size_bytes as f64
    }
}

/// Affine cost coefficients of the migration tooling.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    pub ckpt_fixed_s: f64,
    pub ckpt_per_byte_s: f64,
    pub pre_ckpt_fixed_s: f64,
    pub pre_ckpt_per_byte_s: f64,
    pub restore_fixed_s: f64,
    pub restore_per_byte_s: f64,
    /// Signaling overhead paid by every image transfer.
    pub transfer_signaling_s: f64,
    /// Namespace clear at the source, run in parallel with re-creation at the
    /// destination.
    pub ns_overhead_s: f64,
    pub flow_update_s: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("ckpt_fixed_s", self.ckpt_fixed_s),
            ("ckpt_per_byte_s", self.ckpt_per_byte_s),
            ("pre_ckpt_fixed_s", self.pre_ckpt_fixed_s),
            ("pre_ckpt_per_byte_s", self.pre_ckpt_per_byte_s),
            ("restore_fixed_s", self.restore_fixed_s),
            ("restore_per_byte_s", self.restore_per_byte_s),
            ("transfer_signaling_s", self.transfer_signaling_s),
            ("ns_overhead_s", self.ns_overhead_s),
            ("flow_update_s", self.flow_update_s),
        ];
        for (name, value) in fields {
            ensure(value >= 0.0 && value.is_finite(), || {
                format!("{name} = {value} must be finite and nonnegative")
            })?;
        }
        Ok(())
    }

    pub fn checkpoint_s(&self, bytes: f64) -> f64 {
        self.ckpt_fixed_s + self.ckpt_per_byte_s * bytes
    }

    pub fn pre_checkpoint_s(&self, bytes: f64) -> f64 {
        self.pre_ckpt_fixed_s + self.pre_ckpt_per_byte_s * bytes
    }

    pub fn restore_s(&self, bytes: f64) -> f64 {
        self.restore_fixed_s + self.restore_per_byte_s * bytes
    }

    pub fn transfer_s(&self, bytes: f64, bandwidth: f64) -> f64 {
        self.transfer_signaling_s + bytes / bandwidth
    }

    /// Durations of the six Stop&Copy steps for an image of `image_bytes`.
    pub fn stop_copy_steps(&self, image_bytes: f64, bandwidth: f64) -> StepDurations {
        StepDurations {
            checkpoint: self.checkpoint_s(image_bytes),
            ns_clear: self.ns_overhead_s,
            transfer: self.transfer_s(image_bytes, bandwidth),
            ns_create: self.ns_overhead_s,
            flow_update: self.flow_update_s,
            restore: self.restore_s(image_bytes),
        }
    }
}

/// The six steps of the connection-preserving Stop&Copy stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl StepId {
    pub const ALL: [StepId; 6] = [StepId::S1, StepId::S2, StepId::S3, StepId::S4, StepId::S5, StepId::S6];

    pub fn label(self) -> &'static str {
        match self {
            StepId::S1 => "checkpoint",
            StepId::S2 => "namespace-clear",
            StepId::S3 => "transfer",
            StepId::S4 => "namespace-create",
            StepId::S5 => "flow-update",
            StepId::S6 => "restore",
        }
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Per-step durations of one Stop&Copy stage, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDurations {
    pub checkpoint: f64,
    pub ns_clear: f64,
    pub transfer: f64,
    pub ns_create: f64,
    pub flow_update: f64,
    pub restore: f64,
}

impl StepDurations {
    pub fn get(&self, step: StepId) -> f64 {
        match step {
            StepId::S1 => self.checkpoint,
            StepId::S2 => self.ns_clear,
            StepId::S3 => self.transfer,
            StepId::S4 => self.ns_create,
            StepId::S5 => self.flow_update,
            StepId::S6 => self.restore,
        }
    }

    pub fn set(&mut self, step: StepId, value: f64) {
        let slot = match step {
            StepId::S1 => &mut self.checkpoint,
            StepId::S2 => &mut self.ns_clear,
            StepId::S3 => &mut self.transfer,
            StepId::S4 => &mut self.ns_create,
            StepId::S5 => &mut self.flow_update,
            StepId::S6 => &mut self.restore,
        };
        *slot = value;
    }

    /// Length of the Stop&Copy window. S2 and S4 overlap.
    ///
    /// Summed in timeline order so a simulated run that accumulates the same
    /// durations reproduces this value exactly.
    pub fn window(&self) -> f64 {
        self.checkpoint + self.transfer + self.ns_clear.max(self.ns_create) + self.flow_update + self.restore
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Kpis {
    pub steps: StepDurations,
    pub downtime_s: f64,
    pub total_s: f64,
    pub bytes_transferred: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Cold,
    #[serde(rename = "precopy")]
    PreCopy,
    #[serde(rename = "iterative_precopy")]
    IterativePreCopy,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Cold, StrategyKind::PreCopy, StrategyKind::IterativePreCopy];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Cold => "cold",
            StrategyKind::PreCopy => "precopy",
            StrategyKind::IterativePreCopy => "iterative_precopy",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Migration strategy. `iterations` counts dirty-page rounds after the
/// initial full copy, so PreCopy is the zero-iteration case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "StrategyRepr", into = "StrategyRepr")]
pub enum Strategy {
    Cold,
    PreCopy,
    IterativePreCopy { iterations: u32 },
}

impl Strategy {
    pub fn iterative(iterations: u32) -> Result<Self> {
        ensure(iterations >= 1, || "iterative pre-copy needs at least one iteration".into())?;
        Ok(Strategy::IterativePreCopy { iterations })
    }

    /// PreCopy for zero rounds, Iterative PreCopy otherwise.
    pub fn with_rounds(iterations: u32) -> Self {
        if iterations == 0 {
            Strategy::PreCopy
        } else {
            Strategy::IterativePreCopy { iterations }
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::Cold => StrategyKind::Cold,
            Strategy::PreCopy => StrategyKind::PreCopy,
            Strategy::IterativePreCopy { .. } => StrategyKind::IterativePreCopy,
        }
    }

    pub fn iterations(&self) -> u32 {
        match self {
            Strategy::IterativePreCopy { iterations } => *iterations,
            _ => 0,
        }
    }

    pub fn is_precopy(&self) -> bool {
        !matches!(self, Strategy::Cold)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::IterativePreCopy { iterations } => write!(f, "iterative_precopy(I={iterations})"),
            other => f.write_str(other.kind().as_str()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StrategyRepr {
    kind: StrategyKind,
    #[serde(default)]
    iterations: u32,
}

impl TryFrom<StrategyRepr> for Strategy {
    type Error = Error;

    fn try_from(repr: StrategyRepr) -> Result<Self> {
        match (repr.kind, repr.iterations) {
            (StrategyKind::Cold, 0) => Ok(Strategy::Cold),
            (StrategyKind::PreCopy, 0) => Ok(Strategy::PreCopy),
            (StrategyKind::IterativePreCopy, n) => Strategy::iterative(n),
            (kind, n) => Err(Error::domain(format!("{kind} takes no iterations, got {n}"))),
        }
    }
}

impl From<Strategy> for StrategyRepr {
    fn from(s: Strategy) -> Self {
        StrategyRepr {
            kind: s.kind(),
            iterations: s.iterations(),
        }
    }
}

fn check_inputs(profile: &MsProfile, params: &ModelParams, bandwidth: f64) -> Result<()> {
    ensure(bandwidth > 0.0 && bandwidth.is_finite(), || {
        format!("bandwidth must be positive, got {bandwidth}")
    })?;
    profile.validate()?;
    params.validate()
}

pub fn cold_kpis(profile: &MsProfile, params: &ModelParams, bandwidth: f64) -> Result<Kpis> {
    check_inputs(profile, params, bandwidth)?;
    let image = profile.state_size_bytes as f64;
    let steps = params.stop_copy_steps(image, bandwidth);
    let downtime = steps.window();
    Ok(Kpis {
        steps,
        downtime_s: downtime,
        total_s: downtime,
        bytes_transferred: image,
    })
}

/// Closed-form pieces of a pre-copy migration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreCopyTerms {
    /// Initial full-state round.
    pub round0_s: f64,
    /// Every subsequent dirty-page round.
    pub per_round_s: f64,
    pub downtime_s: f64,
    pub dirty_volume: f64,
    pub stop_copy_image: f64,
    pub steps: StepDurations,
}

impl PreCopyTerms {
    pub fn compute(profile: &MsProfile, params: &ModelParams, bandwidth: f64) -> Result<Self> {
        check_inputs(profile, params, bandwidth)?;
        let state = profile.state_size_bytes as f64;
        let dirty = profile.dirty_volume();
        let image = dirty + profile.cpu_context_bytes as f64;
        let steps = params.stop_copy_steps(image, bandwidth);
        Ok(Self {
            round0_s: params.pre_checkpoint_s(state) + params.transfer_s(state, bandwidth),
            per_round_s: params.pre_checkpoint_s(dirty) + params.transfer_s(dirty, bandwidth),
            downtime_s: steps.window(),
            dirty_volume: dirty,
            stop_copy_image: image,
            steps,
        })
    }

    pub fn total_s(&self, iterations: u32) -> f64 {
        self.round0_s + iterations as f64 * self.per_round_s + self.downtime_s
    }
}

pub fn precopy_kpis(profile: &MsProfile, params: &ModelParams, bandwidth: f64, iterations: u32) -> Result<Kpis> {
    let terms = PreCopyTerms::compute(profile, params, bandwidth)?;
    let state = profile.state_size_bytes as f64;
    Ok(Kpis {
        steps: terms.steps,
        downtime_s: terms.downtime_s,
        total_s: terms.total_s(iterations),
        bytes_transferred: state + iterations as f64 * terms.dirty_volume + terms.stop_copy_image,
    })
}

/// KPIs of `strategy`, dispatching to [`cold_kpis`] or [`precopy_kpis`].
pub fn strategy_kpis(strategy: Strategy, profile: &MsProfile, params: &ModelParams, bandwidth: f64) -> Result<Kpis> {
    match strategy {
        Strategy::Cold => cold_kpis(profile, params, bandwidth),
        s => precopy_kpis(profile, params, bandwidth, s.iterations()),
    }
}

/// Cold-migration downtime that does not depend on bandwidth.
pub fn cold_fixed_cost(profile: &MsProfile, params: &ModelParams) -> f64 {
    let state = profile.state_size_bytes as f64;
    params.checkpoint_s(state) + params.transfer_signaling_s + params.ns_overhead_s + params.flow_update_s + params.restore_s(state)
}

/// Smallest bandwidth whose Cold downtime meets `target_downtime_s`, or
/// `None` when no bandwidth up to `available_bandwidth` can.
pub fn min_bandwidth(
    profile: &MsProfile,
    params: &ModelParams,
    target_downtime_s: f64,
    available_bandwidth: f64,
) -> Result<Option<f64>> {
    ensure(target_downtime_s > 0.0, || format!("target downtime must be positive, got {target_downtime_s}"))?;
    check_inputs(profile, params, available_bandwidth)?;
    let fixed = cold_fixed_cost(profile, params);
    if target_downtime_s <= fixed {
        return Ok(None);
    }
    if profile.state_size_bytes == 0 {
        return Ok(Some(f64::MIN_POSITIVE));
    }
    let needed = profile.state_size_bytes as f64 / (target_downtime_s - fixed);
    Ok((needed <= available_bandwidth).then_some(needed))
}

/// Largest number of dirty rounds whose worst-case migration duration meets
/// `target_duration_s`, clamped to `iteration_cap`.
///
/// Returns `None` when even plain PreCopy overruns the target.
pub fn max_iterations(
    profile: &MsProfile,
    params: &ModelParams,
    bandwidth: f64,
    target_duration_s: f64,
    iteration_cap: u32,
) -> Result<Option<Strategy>> {
    ensure(target_duration_s > 0.0, || format!("target duration must be positive, got {target_duration_s}"))?;
    ensure(iteration_cap >= 1, || "iteration cap must be at least 1".into())?;
    let terms = PreCopyTerms::compute(profile, params, bandwidth)?;
    if !meets_target(terms.total_s(0), target_duration_s) {
        return Ok(None);
    }
    let mut rounds = if terms.per_round_s > 0.0 {
        let slack = target_duration_s - terms.round0_s - terms.downtime_s;
        (slack / terms.per_round_s).floor().clamp(0.0, iteration_cap as f64) as u32
    } else {
        iteration_cap
    };
    // The floor can land one off either way after rounding; settle on the
    // exact predicate.
    while rounds < iteration_cap && meets_target(terms.total_s(rounds + 1), target_duration_s) {
        rounds += 1;
    }
    while rounds > 0 && !meets_target(terms.total_s(rounds), target_duration_s) {
        rounds -= 1;
    }
    Ok(Some(Strategy::with_rounds(rounds)))
}

/// Frames lost while the service is down, `ceil(rho * T_down)`.
pub fn frame_loss(inference_rate_fps: f64, downtime_s: f64) -> Result<u64> {
    ensure(inference_rate_fps >= 0.0, || format!("inference rate must be nonnegative, got {inference_rate_fps}"))?;
    ensure(downtime_s >= 0.0, || format!("downtime must be nonnegative, got {downtime_s}"))?;
    let frames = inference_rate_fps * downtime_s;
    // Shave a relative ulp-scale margin so exact products like 30 * 0.1 do not
    // round up to the next frame.
    Ok((frames * (1.0 - 1e-12)).ceil() as u64)
}
