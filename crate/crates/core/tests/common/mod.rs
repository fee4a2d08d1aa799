//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. Nothing here calls into the code under test
//! except to build inputs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vivo_core::config::SessionConfigs;
use vivo_core::motion::MotionSample;
use vivo_core::record::{EngineChange, EnvelopeSample};
use vivo_core::saliency::TriggerConfig;
use vivo_core::session::scenario::ScenarioAssets;
use vivo_core::session::{LogHeader, Recorder, SessionLog};

/// Population variance, mean first, then squared deviations.
pub fn two_pass_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn relative_close(a: f64, b: f64, rel: f64) -> bool {
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= rel * scale || (a - b).abs() <= 1e-300
}

/// Two-pass population mean and standard deviation. A constant window is
/// reported exactly.
pub fn window_stats(past: &[f64]) -> (f64, f64) {
    if past.iter().all(|&x| x == past[0]) {
        return (past[0], 0.0);
    }
    let n = past.len() as f64;
    let mean = past.iter().sum::<f64>() / n;
    let std = (past.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    (mean, std)
}

/// Straight transcription of the trigger rules: thresholds from the last
/// `long_window` values before the current one (population statistics),
/// fire when armed and `s >= hi` and at least `refractory` samples since the
/// last firing, re-arm when `s <= lo`.
pub fn reference_trigger(stream: &[f64], cfg: &TriggerConfig) -> Vec<usize> {
    let mut armed = true;
    let mut last: Option<usize> = None;
    let mut events = Vec::new();
    for (i, &s) in stream.iter().enumerate() {
        let (hi, lo) = if cfg.adaptive && i >= cfg.long_window {
            let (mean, std) = window_stats(&stream[i - cfg.long_window..i]);
            let hi = mean + cfg.k_adapt * std;
            let ratio = if cfg.theta_hi > 0.0 { cfg.theta_lo / cfg.theta_hi } else { 0.0 };
            (hi, hi * ratio)
        } else {
            (cfg.theta_hi, cfg.theta_lo)
        };
        if armed {
            let rested = match last {
                None => true,
                Some(l) => (i - l) as u64 >= cfg.refractory,
            };
            if s >= hi && rested {
                armed = false;
                last = Some(i);
                events.push(i);
            }
        } else if s <= lo {
            armed = true;
        }
    }
    events
}

/// Random S stream mixing quiet stretches, bursts and plateaus.
pub fn random_stream(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let run = rng.random_range(1..40usize);
        let level: f64 = match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(0.0..0.3),
            2 => rng.random_range(0.3..1.0),
            _ => rng.random_range(0.0..2.0),
        };
        let jitter: f64 = rng.random_range(0.0..0.2);
        for _ in 0..run.min(len - out.len()) {
            out.push((level + rng.random_range(-jitter..=jitter)).max(0.0));
        }
    }
    out
}

pub fn random_trigger_config(rng: &mut ChaCha8Rng) -> TriggerConfig {
    let hi: f64 = rng.random_range(0.05..1.2);
    let lo = hi * rng.random_range(0.0..=1.0);
    let adaptive = rng.random_bool(0.3);
    TriggerConfig {
        theta_hi: hi,
        theta_lo: lo,
        refractory: rng.random_range(0..20),
        adaptive,
        k_adapt: rng.random_range(0.0..3.0),
        long_window: rng.random_range(3..64),
    }
}

/// Decodes an OSC 1.0 message carrying float arguments, straight from the
/// wire format: padded address, padded type tags, big-endian payload.
pub fn decode_osc_floats(bytes: &[u8]) -> Option<(String, Vec<f32>)> {
    fn padded_str(b: &[u8], at: usize) -> Option<(String, usize)> {
        let end = at + b[at..].iter().position(|&c| c == 0)?;
        let s = std::str::from_utf8(&b[at..end]).ok()?.to_string();
        let next = (end + 4) & !3;
        (next <= b.len()).then_some((s, next))
    }
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    let (addr, at) = padded_str(bytes, 0)?;
    let (tags, mut at) = padded_str(bytes, at)?;
    let tags = tags.strip_prefix(',')?;
    let mut args = Vec::new();
    for t in tags.chars() {
        if t != 'f' {
            return None;
        }
        let raw: [u8; 4] = bytes.get(at..at + 4)?.try_into().ok()?;
        args.push(f32::from_be_bytes(raw));
        at += 4;
    }
    (at == bytes.len()).then_some((addr, args))
}

pub fn scenario_configs() -> SessionConfigs {
    ScenarioAssets::bundled().unwrap().configs
}

/// Records a synthetic session: random QoM with bursts, a drifting audio
/// envelope, and occasional control changes between ticks.
pub fn record_random_session(configs: &SessionConfigs, seed: u64, ticks: usize) -> SessionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs = configs.clone().with_seed(seed);
    let header = LogHeader::for_session(&configs, 30.0, &format!("random-{seed}"));
    let mut rec = Recorder::new(&configs, &header, Vec::new()).unwrap();
    let mut env: f64 = 0.0;
    for i in 0..ticks {
        let ts = 1_000_000 + (i as u64 * 1_000_000) / 30;
        env = (env + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        rec.envelope(EnvelopeSample {
            envelope: env,
            timestamp: ts,
        })
        .unwrap();
        let burst = rng.random_bool(0.03);
        let qom = if burst {
            rng.random_range(0.2..0.6)
        } else {
            rng.random_range(0.0..0.08)
        };
        rec.motion(MotionSample {
            qom,
            timestamp: ts,
            frame_index: i as u64 + 1,
        })
        .unwrap();
        if rng.random_bool(0.01) {
            let mut trigger = *rec.engine().trigger_config();
            trigger.theta_hi = rng.random_range(0.002..0.01);
            trigger.theta_lo = trigger.theta_hi * 0.3;
            rec.change(EngineChange::SetTrigger {
                trigger,
                soa_source: rec.engine().soa_source(),
            })
            .unwrap();
        }
        if rng.random_bool(0.01) {
            rec.parameter("gain.level".parse().unwrap(), rng.random_range(0.0..2.0), 20.0)
                .unwrap();
        }
        if rng.random_bool(0.005) {
            rec.change(EngineChange::SetActive {
                unit: "ringmod".into(),
                active: rng.random_bool(0.5),
            })
            .unwrap();
        }
        if rng.random_bool(0.005) {
            rec.annotate(format!("note {i}")).unwrap();
        }
    }
    let bytes = rec.finish().unwrap();
    SessionLog::read(bytes.as_slice()).unwrap()
}
