//! Profiling: dirty-page rate estimation, the synthetic dirtying workload used
//! for calibration, and the least-squares fit of [`ModelParams`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ModelParams, DEFAULT_PAGE_SIZE};

/// Profiling window assumed when a sample does not say otherwise.
pub const DEFAULT_WINDOW_S: f64 = 1.0;

/// Pages modified within one observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirtySample {
    #[serde(default = "default_window")]
    pub window_s: f64,
    pub pages_modified: u64,
}

fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}

impl DirtySample {
    pub fn rate(&self) -> f64 {
        self.pages_modified as f64 / self.window_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirtyRateEstimate {
    /// Worst-case (maximum) observed rate in pages per second.
    pub rate_pages_per_s: f64,
    /// Mean observed rate, for reference only.
    pub mean_rate_pages_per_s: f64,
    /// Rate normalized between one page per window and every page per window.
    pub normalized: f64,
    pub window_s: f64,
}

/// Estimates the worst-case dirty rate and its normalized form.
///
/// The normalization uses the window of the sample that attains the maximum:
/// `R_min = 1 / dT`, `R_max = ceil(M / sigma) / dT`, and the result is clamped
/// to `[0, 1]`.
pub fn estimate_dirty_rate(samples: &[DirtySample], state_size_bytes: u64, page_size_bytes: u64) -> Result<DirtyRateEstimate> {
    ensure(!samples.is_empty(), || "no dirty-page samples".into())?;
    ensure(page_size_bytes > 0, || "page size must be positive".into())?;
    ensure(state_size_bytes >= page_size_bytes, || {
        format!("state size {state_size_bytes} B is smaller than one page ({page_size_bytes} B)")
    })?;
    for s in samples {
        ensure(s.window_s > 0.0 && s.window_s.is_finite(), || {
            format!("sample window must be positive, got {}", s.window_s)
        })?;
    }

    let worst = samples
        .iter()
        .max_by(|a, b| a.rate().total_cmp(&b.rate()))
        .expect("non-empty");
    let rate = worst.rate();
    let mean = samples.iter().map(DirtySample::rate).sum::<f64>() / samples.len() as f64;

    let pages = state_size_bytes.div_ceil(page_size_bytes) as f64;
    let r_min = 1.0 / worst.window_s;
    let r_max = pages / worst.window_s;
    let normalized = if r_max > r_min {
        ((rate - r_min) / (r_max - r_min)).clamp(0.0, 1.0)
    } else {
        // A single-page state: any dirtying touches all of it.
        if rate >= r_max {
            1.0
        } else {
            0.0
        }
    };

    Ok(DirtyRateEstimate {
        rate_pages_per_s: rate,
        mean_rate_pages_per_s: mean,
        normalized,
        window_s: worst.window_s,
    })
}

/// Configuration of the synthetic dirtying workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DprGenConfig {
    pub state_size_bytes: u64,
    #[serde(default = "default_page_size")]
    pub page_size_bytes: u64,
    pub target_dirty_rate_pages_per_s: f64,
    pub duration_s: f64,
    pub seed: u64,
}

fn default_page_size() -> u64 {
    DEFAULT_PAGE_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirtyEvent {
    pub time_s: f64,
    pub page: u64,
}

/// Generates the page-write trace of the synthetic workload.
///
/// Time is cut into slots of `1 / rate`; each slot holds exactly one write at
/// a uniformly random offset, to a uniformly random page. The count is thus
/// within one event of `rate * duration` and the mean inter-arrival is
/// `1 / rate`.
pub fn dprgen_trace(config: &DprGenConfig) -> Result<Vec<DirtyEvent>> {
    ensure(config.page_size_bytes > 0, || "page size must be positive".into())?;
    ensure(config.state_size_bytes > 0, || "state size must be positive".into())?;
    ensure(config.target_dirty_rate_pages_per_s > 0.0 && config.target_dirty_rate_pages_per_s.is_finite(), || {
        format!("dirty rate must be positive, got {}", config.target_dirty_rate_pages_per_s)
    })?;
    ensure(config.duration_s >= 0.0 && config.duration_s.is_finite(), || {
        format!("duration must be nonnegative, got {}", config.duration_s)
    })?;

    let pages = config.state_size_bytes.div_ceil(config.page_size_bytes);
    let slot = 1.0 / config.target_dirty_rate_pages_per_s;
    let slots = (config.duration_s * config.target_dirty_rate_pages_per_s).ceil() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(slots as usize);
    for i in 0..slots {
        let time_s = (i as f64 + rng.random::<f64>()) * slot;
        let page = rng.random_range(0..pages);
        if time_s < config.duration_s {
            trace.push(DirtyEvent { time_s, page });
        }
    }
    Ok(trace)
}

/// Counts distinct pages written per window, the way a soft-dirty scan would.
pub fn sample_trace(trace: &[DirtyEvent], window_s: f64, duration_s: f64) -> Result<Vec<DirtySample>> {
    ensure(window_s > 0.0, || format!("window must be positive, got {window_s}"))?;
    let windows = (duration_s / window_s).floor() as usize;
    let mut pages: Vec<Vec<u64>> = vec![Vec::new(); windows];
    for e in trace {
        let w = (e.time_s / window_s) as usize;
        if w < windows {
            pages[w].push(e.page);
        }
    }
    Ok(pages
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            p.dedup();
            DirtySample {
                window_s,
                pages_modified: p.len() as u64,
            }
        })
        .collect())
}

/// One measured migration of a calibration workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRun {
    pub image_bytes: u64,
    pub ckpt_s: f64,
    pub restore_s: f64,
    pub transfer_s: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Measured namespace clear/create step, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_update_s: Option<f64>,
}

impl CalibrationRun {
    pub fn new(image_bytes: u64, ckpt_s: f64, restore_s: f64, transfer_s: f64, bandwidth: f64) -> Self {
        Self {
            image_bytes,
            ckpt_s,
            restore_s,
            transfer_s,
            bandwidth,
            namespace_s: None,
            flow_update_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResiduals {
    pub ckpt_rms_s: f64,
    pub restore_rms_s: f64,
    pub transfer_rms_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: ModelParams,
    pub residuals: FitResiduals,
}

/// Least-squares fit of the model parameters to calibration runs.
///
/// Checkpoint and restore are fitted as nonnegative affine functions of the
/// image size; the transfer signaling overhead is the mean of
/// `transfer_s - image / bandwidth`. Pre-checkpoint coefficients are set equal
/// to the checkpoint ones.
pub fn fit_params(runs: &[CalibrationRun]) -> Result<Calibration> {
    for r in runs {
        ensure(r.bandwidth > 0.0 && r.bandwidth.is_finite(), || {
            format!("calibration bandwidth must be positive, got {}", r.bandwidth)
        })?;
        ensure(r.ckpt_s >= 0.0 && r.restore_s >= 0.0 && r.transfer_s >= 0.0, || {
            "calibration durations must be nonnegative".into()
        })?;
    }
    let mut sizes: Vec<u64> = runs.iter().map(|r| r.image_bytes).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(Error::UnderDetermined(format!(
            "need runs at two or more distinct image sizes, got {}",
            sizes.len()
        )));
    }

    let xs: Vec<f64> = runs.iter().map(|r| r.image_bytes as f64).collect();
    let ckpt: Vec<f64> = runs.iter().map(|r| r.ckpt_s).collect();
    let restore: Vec<f64> = runs.iter().map(|r| r.restore_s).collect();
    let (ckpt_fixed, ckpt_slope) = fit_affine_nonneg(&xs, &ckpt);
    let (restore_fixed, restore_slope) = fit_affine_nonneg(&xs, &restore);

    let transfer_residual: Vec<f64> = runs.iter().map(|r| r.transfer_s - r.image_bytes as f64 / r.bandwidth).collect();
    let signaling = mean(&transfer_residual).max(0.0);

    let ns = runs.iter().filter_map(|r| r.namespace_s).collect::<Vec<_>>();
    let flow = runs.iter().filter_map(|r| r.flow_update_s).collect::<Vec<_>>();

    let params = ModelParams {
        ckpt_fixed_s: ckpt_fixed,
        ckpt_per_byte_s: ckpt_slope,
        pre_ckpt_fixed_s: ckpt_fixed,
        pre_ckpt_per_byte_s: ckpt_slope,
        restore_fixed_s: restore_fixed,
        restore_per_byte_s: restore_slope,
        transfer_signaling_s: signaling,
        ns_overhead_s: if ns.is_empty() { 0.0 } else { mean(&ns).max(0.0) },
        flow_update_s: if flow.is_empty() { 0.0 } else { mean(&flow).max(0.0) },
    };

    let rms = |f: &dyn Fn(&CalibrationRun) -> f64| {
        (runs.iter().map(|r| f(r).powi(2)).sum::<f64>() / runs.len() as f64).sqrt()
    };
    let residuals = FitResiduals {
        ckpt_rms_s: rms(&|r| r.ckpt_s - params.checkpoint_s(r.image_bytes as f64)),
        restore_rms_s: rms(&|r| r.restore_s - params.restore_s(r.image_bytes as f64)),
        transfer_rms_s: rms(&|r| r.transfer_s - params.transfer_s(r.image_bytes as f64, r.bandwidth)),
    };
    Ok(Calibration { params, residuals })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-parameter least squares `y = a + b x` with `a, b >= 0`.
///
/// The unconstrained optimum is returned when it is feasible; otherwise the
/// optimum lies on one of the two boundary lines.
fn fit_affine_nonneg(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let x_mean = mean(xs);
    let y_mean = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    if slope < 0.0 {
        (y_mean.max(0.0), 0.0)
    } else if intercept < 0.0 {
        let sx2: f64 = xs.iter().map(|x| x * x).sum();
        let sxy0: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
        (0.0, (sxy0 / sx2).max(0.0))
    } else {
        (intercept, slope)
    }
}
