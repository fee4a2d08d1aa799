mod common;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{record_random_session, scenario_configs};
use vivo_core::audio::{CommandOrigin, ParameterCommand};
use vivo_core::motion::MotionSample;
use vivo_core::record::{Annotation, EnvelopeSample, Record};
use vivo_core::saliency::{SaliencySample, SoaSource, TriggerEvent};
use vivo_core::session::{export_timeline, replay, LogHeader, SessionLog, SessionWriter, TimelineLabel, TimelineOptions, Trailer};
use vivo_core::Error;

fn random_record(rng: &mut ChaCha8Rng, ts: u64) -> Record {
    match rng.random_range(0..6) {
        0 => Record::Motion(MotionSample {
            qom: rng.random(),
            timestamp: ts,
            frame_index: rng.random_range(0..1 << 40),
        }),
        1 => Record::Saliency(SaliencySample {
            s: rng.random::<f64>() * 10f64.powi(rng.random_range(-12..3)),
            source: if rng.random_bool(0.5) {
                SoaSource::QomVariance
            } else {
                SoaSource::ParamChangeVariance
            },
            timestamp: ts,
        }),
        2 => Record::Trigger(TriggerEvent {
            timestamp: ts,
            sample_index: rng.random_range(0..1 << 30),
            s_at_fire: rng.random(),
            threshold_at_fire: rng.random(),
        }),
        3 => Record::ParameterCommand(ParameterCommand {
            target: "delay.feedback".parse().unwrap(),
            value: rng.random_range(0.0..0.95),
            ramp_ms: rng.random_range(0.0..500.0),
            origin: CommandOrigin::Score,
            timestamp: ts,
        }),
        4 => Record::Envelope(EnvelopeSample {
            envelope: rng.random(),
            timestamp: ts,
        }),
        _ => Record::Annotation(Annotation {
            timestamp: ts,
            text: format!("ünïcode \"quoted\" {}", rng.random::<u32>()),
        }),
    }
}

#[test]
fn thousand_records_round_trip_exactly() {
    let configs = scenario_configs();
    let header = LogHeader::for_session(&configs, 30.0, "roundtrip");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut w = SessionWriter::new(Vec::new(), &header).unwrap();
    let mut written = Vec::new();
    let mut ts = 0;
    for _ in 0..1000 {
        ts += rng.random_range(0..5000);
        let r = random_record(&mut rng, ts);
        w.append(&r).unwrap();
        written.push(r);
    }
    let bytes = w.finish().unwrap();
    let log = SessionLog::read(bytes.as_slice()).unwrap();
    assert_eq!(log.header, header);
    assert_eq!(log.records, written);
    assert!(matches!(log.trailer, Some(Trailer::End { records: 1000, .. })));
    assert_eq!(log.to_bytes(), bytes);
}

#[test]
fn recorded_sessions_replay_exactly() {
    let configs = scenario_configs();
    for seed in 0..10 {
        let log = record_random_session(&configs, seed, 400);
        let report = replay(&log, &configs.clone().with_seed(seed)).unwrap();
        assert!(report.is_exact(), "seed {seed}: {:?}", report.divergence);
        assert_eq!(report.ticks, 400);
        assert!(report.compared > 400);
    }
}

#[test]
fn tampered_digest_or_seed_is_rejected() {
    let configs = scenario_configs();
    let log = record_random_session(&configs, 3, 50);
    let mut other = configs.clone().with_seed(3);
    other.chain.units[0].params.insert("level".into(), 0.5);
    assert!(matches!(replay(&log, &other), Err(Error::DigestMismatch { name, .. }) if name == "chain"));
    assert!(matches!(replay(&log, &configs.clone().with_seed(4)), Err(Error::DigestMismatch { .. })));

    let mut forged = log.clone();
    forged.header.digests.mapping = "0".repeat(64);
    assert!(matches!(replay(&forged, &configs.clone().with_seed(3)), Err(Error::DigestMismatch { name, .. }) if name == "mapping"));
}

#[test]
fn tampered_record_diverges() {
    let configs = scenario_configs().with_seed(5);
    let mut log = record_random_session(&configs, 5, 200);
    let i = log
        .records
        .iter()
        .rposition(|r| matches!(r, Record::ParameterCommand(c) if c.origin != CommandOrigin::ControlPlane))
        .unwrap();
    if let Record::ParameterCommand(c) = &mut log.records[i] {
        c.value = f64::from_bits(c.value.to_bits() ^ 1);
    }
    let report = replay(&log, &configs).unwrap();
    let d = report.divergence.expect("divergence");
    assert_eq!(d.logged.as_ref(), Some(&log.records[i]));
}

#[test]
fn truncated_log_replays_its_prefix() {
    let configs = scenario_configs().with_seed(6);
    let log = record_random_session(&configs, 6, 300);
    let bytes = log.to_bytes();
    let text = String::from_utf8(bytes).unwrap();
    // Drop the trailer and the last half of the records.
    let lines: Vec<&str> = text.lines().collect();
    let keep = lines.len() / 2;
    let mut cut = Vec::new();
    for l in &lines[..keep] {
        writeln!(cut, "{l}").unwrap();
    }
    let partial = SessionLog::read(cut.as_slice()).unwrap();
    assert!(partial.is_truncated());
    let report = replay(&partial, &configs).unwrap();
    assert!(report.truncated);
    assert!(report.is_exact());
}

#[test]
fn header_only_log_is_valid() {
    let configs = scenario_configs();
    let header = LogHeader::for_session(&configs, 30.0, "empty");
    let bytes = SessionWriter::new(Vec::new(), &header).unwrap().finish().unwrap();
    let log = SessionLog::read(bytes.as_slice()).unwrap();
    assert!(log.records.is_empty());
    assert!(!log.is_truncated());
    assert!(export_timeline(&log, &TimelineOptions::default()).is_empty());
}

#[test]
fn timeline_keeps_every_trigger() {
    let configs = scenario_configs();
    let mut total = 0;
    for seed in 20..30 {
        let log = record_random_session(&configs, seed, 600);
        let triggers = log.records.iter().filter(|r| matches!(r, Record::Trigger(_))).count();
        let timeline = export_timeline(&log, &TimelineOptions::default());
        let marked = timeline
            .iter()
            .filter(|e| e.label == TimelineLabel::ThresholdTrigger)
            .count();
        assert_eq!(marked, triggers, "seed {seed}");
        total += triggers;
        assert!(timeline.windows(2).all(|p| p[0].t_start <= p[1].t_start));
        assert!(timeline.iter().all(|e| e.t_start <= e.t_end));
    }
    assert!(total >= 10, "{total}");
}

#[test]
fn missing_log_file_is_named() {
    let err = SessionLog::read_file("/no/such/session.jsonl").unwrap_err();
    assert!(err.to_string().contains("/no/such/session.jsonl"));
}
