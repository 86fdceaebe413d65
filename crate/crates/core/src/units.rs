//! Unit conversions used at the file and CLI boundary.
//!
//! Internally every size is in bytes, every duration in seconds and every
//! bandwidth in bytes per second.

/// Bytes per second in one megabit per second.
pub const BYTES_PER_SEC_PER_MBPS: f64 = 125_000.0;

pub fn mbps_to_bytes_per_sec(mbps: f64) -> f64 {
    mbps * BYTES_PER_SEC_PER_MBPS
}

pub fn bytes_per_sec_to_mbps(bytes_per_sec: f64) -> f64 {
    bytes_per_sec / BYTES_PER_SEC_PER_MBPS
}

/// Relative slack allowed when checking a predicted KPI against a target.
///
/// Targets are usually short decimals (2.0 s, 0.1 s steps) whose binary sums
/// land a few ulps away from the exact value.
pub const TARGET_REL_SLACK: f64 = 1e-12;

/// `value <= target`, up to [`TARGET_REL_SLACK`].
pub fn meets_target(value: f64, target: f64) -> bool {
    value <= target + target.abs() * TARGET_REL_SLACK
}

/// Formats `x` like C's `%.{digits}g`: shortest of fixed or scientific
/// notation with `digits` significant digits and trailing zeros removed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    // Round first, then read the exponent back so 999999.5 becomes 1e+06.
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
