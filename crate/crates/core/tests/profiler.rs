use proptest::prelude::*;

use edgemig_core::profiler::{dprgen_trace, estimate_dirty_rate, fit_params, sample_trace, CalibrationRun, DirtySample, DprGenConfig};
use edgemig_core::simnet::dirty_set_size;
use edgemig_core::{Error, ModelParams};

fn sample(pages: u64) -> DirtySample {
    DirtySample {
        window_s: 1.0,
        pages_modified: pages,
    }
}

proptest! {
    #[test]
    fn normalized_rate_is_a_fraction(pages in proptest::collection::vec(0u64..100_000, 1..20), state in 4096u64..400_000_000) {
        let samples: Vec<_> = pages.iter().map(|&p| sample(p)).collect();
        let r = estimate_dirty_rate(&samples, state, 4096).unwrap().normalized;
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn normalized_rate_grows_with_the_worst_window(a in 0u64..50_000, b in 0u64..50_000) {
        let state = 400_000_000;
        let lo = estimate_dirty_rate(&[sample(a.min(b))], state, 4096).unwrap().normalized;
        let hi = estimate_dirty_rate(&[sample(a.max(b))], state, 4096).unwrap().normalized;
        prop_assert!(lo <= hi);
    }
}

#[test]
fn worst_window_drives_the_estimate() {
    let est = estimate_dirty_rate(&[sample(10), sample(300), sample(20)], 4096 * 1000, 4096).unwrap();
    assert_eq!(est.rate_pages_per_s, 300.0);
    assert_eq!(est.mean_rate_pages_per_s, 110.0);
    assert!((est.normalized - 299.0 / 999.0).abs() < 1e-15);
}

#[test]
fn estimate_bounds_and_errors() {
    let m = 4096 * 100;
    assert_eq!(estimate_dirty_rate(&[sample(1)], m, 4096).unwrap().normalized, 0.0);
    assert_eq!(estimate_dirty_rate(&[sample(100)], m, 4096).unwrap().normalized, 1.0);
    assert_eq!(estimate_dirty_rate(&[sample(5000)], m, 4096).unwrap().normalized, 1.0);
    assert!(estimate_dirty_rate(&[], m, 4096).is_err());
    assert!(estimate_dirty_rate(&[sample(1)], 100, 4096).is_err());
    let bad = DirtySample {
        window_s: 0.0,
        pages_modified: 1,
    };
    assert!(estimate_dirty_rate(&[bad], m, 4096).is_err());
}

#[test]
fn dprgen_hits_its_target_rate() {
    let cfg = DprGenConfig {
        state_size_bytes: 64 << 20,
        page_size_bytes: 4096,
        target_dirty_rate_pages_per_s: 250.0,
        duration_s: 20.0,
        seed: 11,
    };
    let trace = dprgen_trace(&cfg).unwrap();
    assert!((trace.len() as i64 - 5000).abs() <= 1);
    assert!(trace.windows(2).all(|w| w[0].time_s <= w[1].time_s));
    assert_eq!(trace, dprgen_trace(&cfg).unwrap());

    // 16384 pages and 250 writes per window: collisions are rare, so the
    // profiled worst case sits just under the target.
    let samples = sample_trace(&trace, 1.0, 20.0).unwrap();
    assert_eq!(samples.len(), 20);
    let est = estimate_dirty_rate(&samples, cfg.state_size_bytes, 4096).unwrap();
    assert!(est.rate_pages_per_s <= 251.0 && est.rate_pages_per_s >= 235.0, "{est:?}");
}

#[test]
fn fit_recovers_affine_parameters() {
    let truth = ModelParams {
        ckpt_fixed_s: 0.4,
        ckpt_per_byte_s: 2e-8,
        pre_ckpt_fixed_s: 0.4,
        pre_ckpt_per_byte_s: 2e-8,
        restore_fixed_s: 0.3,
        restore_per_byte_s: 5e-9,
        transfer_signaling_s: 0.05,
        ns_overhead_s: 0.09,
        flow_update_s: 0.004,
    };
    let bw = 1.25e8;
    let runs: Vec<_> = [1u64 << 20, 8 << 20, 32 << 20]
        .iter()
        .map(|&m| {
            let x = m as f64;
            CalibrationRun {
                namespace_s: Some(0.09),
                flow_update_s: Some(0.004),
                ..CalibrationRun::new(m, truth.checkpoint_s(x), truth.restore_s(x), truth.transfer_s(x, bw), bw)
            }
        })
        .collect();
    let fit = fit_params(&runs).unwrap();
    let p = fit.params;
    for (a, b) in [
        (p.ckpt_fixed_s, truth.ckpt_fixed_s),
        (p.ckpt_per_byte_s, truth.ckpt_per_byte_s),
        (p.restore_fixed_s, truth.restore_fixed_s),
        (p.restore_per_byte_s, truth.restore_per_byte_s),
        (p.transfer_signaling_s, truth.transfer_signaling_s),
        (p.ns_overhead_s, truth.ns_overhead_s),
        (p.flow_update_s, truth.flow_update_s),
    ] {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-9), "{a} vs {b}");
    }
    assert!(fit.residuals.ckpt_rms_s < 1e-12);
}

#[test]
fn fit_needs_two_sizes() {
    let run = CalibrationRun::new(1 << 20, 1.0, 1.0, 1.0, 1e8);
    assert!(matches!(fit_params(&[run, run]), Err(Error::UnderDetermined(_))));
}

#[test]
fn dirty_set_tracks_occupancy_law() {
    // E|D| = P (1 - exp(-R t / P)) = 1000 (1 - e^-0.5) ~ 393.47
    let expected = 1000.0 * (1.0 - (-0.5f64).exp());
    let mean = (0..1000).map(|seed| dirty_set_size(100.0, 5.0, 1000, seed) as f64).sum::<f64>() / 1000.0;
    assert!((mean - expected).abs() <= 0.02 * expected, "mean {mean}");
    assert_eq!(dirty_set_size(0.0, 5.0, 1000, 1), 0);
    assert!(dirty_set_size(1e6, 5.0, 1000, 1) == 1000);
}
