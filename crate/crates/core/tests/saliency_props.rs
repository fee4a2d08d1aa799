mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_stream, random_trigger_config, reference_trigger, relative_close, two_pass_variance};
use vivo_core::saliency::{RollingWindow, SaliencySample, SaliencyTracker, SoaSource, Trigger, TriggerConfig};

fn fire(stream: &[f64], cfg: TriggerConfig) -> Vec<usize> {
    let mut t = Trigger::new(cfg).unwrap();
    stream
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| {
            t.evaluate(
                &SaliencySample {
                    s,
                    source: SoaSource::QomVariance,
                    timestamp: i as u64,
                },
                i as u64,
            )
            .map(|e| e.sample_index as usize)
        })
        .collect()
}

#[test]
fn variance_tracks_two_pass_on_long_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for w in [16usize, 64, 256] {
        let mut win = RollingWindow::new(w).unwrap();
        let mut xs = Vec::new();
        for i in 0..20_000 {
            // Drift plus occasional jumps stress the re-anchoring.
            let x = if i % 5000 < 10 {
                rng.random_range(-1e6..1e6)
            } else {
                1e3 + rng.random_range(-1.0..1.0)
            };
            xs.push(x);
            let got = win.push(x).unwrap();
            let tail = &xs[xs.len().saturating_sub(w)..];
            let want = two_pass_variance(tail);
            assert!(relative_close(got, want, 1e-9) || (want < 1e-12 && got.abs() < 1e-9), "W={w} i={i}: {got} vs {want}");
        }
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut w = RollingWindow::new(4).unwrap();
    assert!(w.push(f64::NAN).is_err());
    assert!(w.push(f64::INFINITY).is_err());
    assert_eq!(w.len(), 0);
}

#[test]
fn parameter_change_deltas_match_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tracker = SaliencyTracker::new(SoaSource::ParamChangeVariance, 32).unwrap();
    let mut all = Vec::new();
    for t in 0..2000u64 {
        let deltas: Vec<f64> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0.0..1.0)).collect();
        all.extend_from_slice(&deltas);
        let s = tracker.soa_from_parameter_changes(&deltas, t).unwrap();
        assert_eq!(s.source, SoaSource::ParamChangeVariance);
        if !all.is_empty() {
            let want = two_pass_variance(&all[all.len().saturating_sub(32)..]);
            assert!(relative_close(s.s, want, 1e-9) || want < 1e-15, "{} vs {want}", s.s);
        }
    }
}

#[test]
fn switching_source_clears_window() {
    let mut tracker = SaliencyTracker::new(SoaSource::QomVariance, 8).unwrap();
    for x in [0.0, 1.0, 0.0, 1.0] {
        tracker.push_and_variance(x, 0).unwrap();
    }
    tracker.select_source(SoaSource::ParamChangeVariance);
    assert!(tracker.window().is_empty());
    let s = tracker.soa_from_parameter_changes(&[0.5], 1).unwrap();
    assert_eq!(s.s, 0.0);
}

#[test]
fn trigger_matches_reference_on_random_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..2000 {
        let cfg = random_trigger_config(&mut rng);
        let len = rng.random_range(10..400);
        let stream = random_stream(&mut rng, len);
        let got = fire(&stream, cfg);
        assert_eq!(got, reference_trigger(&stream, &cfg), "{cfg:?}");
        assert!(got.windows(2).all(|p| (p[1] - p[0]) as u64 >= cfg.refractory));
    }
}

proptest! {
    #[test]
    fn rolling_variance_property(xs in proptest::collection::vec(-1e3f64..1e3, 1..300), w in 2usize..40) {
        let mut win = RollingWindow::new(w).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let got = win.push(x).unwrap();
            let want = two_pass_variance(&xs[(i + 1).saturating_sub(w)..=i]);
            prop_assert!(relative_close(got, want, 1e-9) || (got - want).abs() < 1e-9, "{} vs {}", got, want);
            prop_assert!(got >= 0.0);
        }
    }

    #[test]
    fn refractory_gap_always_holds(stream in proptest::collection::vec(0.0f64..1.0, 0..300), r in 0u64..30, hi in 0.0f64..1.0, ratio in 0.0f64..=1.0) {
        let cfg = TriggerConfig { theta_hi: hi, theta_lo: hi * ratio, refractory: r, adaptive: false, ..TriggerConfig::default() };
        let ev = fire(&stream, cfg);
        prop_assert!(ev.windows(2).all(|p| (p[1] - p[0]) as u64 >= r));
        prop_assert_eq!(ev, reference_trigger(&stream, &cfg));
    }

    #[test]
    fn scale_equivariance(stream in proptest::collection::vec(0.0f64..1.0, 0..300), r in 0u64..30, hi in 0.01f64..1.0, ratio in 0.0f64..=1.0, k in -3i32..=3, adaptive in any::<bool>(), k_adapt in 0.0f64..3.0, long_window in 3usize..40) {
        // Even powers of two scale every floating-point step exactly, sqrt included.
        let alpha = 2f64.powi(k * 4);
        let cfg = TriggerConfig { theta_hi: hi, theta_lo: hi * ratio, refractory: r, adaptive, k_adapt, long_window };
        let scaled: Vec<f64> = stream.iter().map(|s| s * alpha).collect();
        let scfg = TriggerConfig { theta_hi: hi * alpha, theta_lo: hi * ratio * alpha, ..cfg };
        prop_assert_eq!(fire(&stream, cfg), fire(&scaled, scfg));
    }
}
