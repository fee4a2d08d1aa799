use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::ParamAddress;
use crate::record::Record;

use super::logfile::SessionLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TimelineLabel {
    SystemInterplay,
    ThresholdTrigger,
    PerformerInterplay,
    PerformerActionToTrigger,
}

impl TimelineLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TimelineLabel::SystemInterplay => "SYSTEM_INTERPLAY",
            TimelineLabel::ThresholdTrigger => "THRESHOLD_TRIGGER",
            TimelineLabel::PerformerInterplay => "PERFORMER_INTERPLAY",
            TimelineLabel::PerformerActionToTrigger => "PERFORMER_ACTION_TO_TRIGGER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub label: TimelineLabel,
    /// Seconds since session start.
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimelineOptions {
    /// Performer spans ending this close before a trigger are credited with it.
    pub gap_ms: f64,
    /// Performer spans need QoM below this (playing, not moving).
    pub min_qom: f64,
    /// Envelope above which the performer counts as playing.
    pub envelope_threshold: f64,
    /// How long a parameter change keeps a tick "active".
    pub activity_hold_ms: f64,
    /// Relative change that counts as parameter activity.
    pub min_relative_change: f64,
    /// Spans shorter than this are dropped as flicker.
    pub min_span_ms: f64,
    /// Same-label spans closer than this, with no trigger between, are merged.
    pub merge_gap_ms: f64,
}

impl Default for TimelineOptions {
    fn default() -> Self {
        Self {
            gap_ms: 500.0,
            min_qom: 0.02,
            envelope_threshold: 0.05,
            activity_hold_ms: 200.0,
            min_relative_change: 1e-3,
            min_span_ms: 100.0,
            merge_gap_ms: 250.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    label: TimelineLabel,
    start: u64,
    end: u64,
}

fn ms(v: f64) -> u64 {
    (v.max(0.0) * 1e3).round() as u64
}

/// Labels the interplay in a log. A pure function of the records.
pub fn export_timeline(log: &SessionLog, opts: &TimelineOptions) -> Vec<TimelineEntry> {
    let hold = ms(opts.activity_hold_ms);
    let mut envelope = 0.0;
    let mut last_value: HashMap<&ParamAddress, f64> = HashMap::new();
    let mut last_activity: Option<u64> = None;
    let mut ticks: Vec<(u64, Option<TimelineLabel>)> = Vec::new();
    let mut triggers: Vec<u64> = Vec::new();

    for rec in &log.records {
        match rec {
            Record::Envelope(e) => envelope = e.envelope,
            Record::ParameterCommand(c) => {
                let changed = match last_value.insert(&c.target, c.value) {
                    None => true,
                    Some(p) => (c.value - p).abs() > opts.min_relative_change * p.abs().max(c.value.abs()),
                };
                if changed {
                    last_activity = Some(c.timestamp);
                }
            }
            Record::Motion(m) => {
                let playing = envelope > opts.envelope_threshold;
                let active = last_activity.is_some_and(|a| m.timestamp.saturating_sub(a) <= hold);
                let label = if playing && m.qom < opts.min_qom {
                    Some(TimelineLabel::PerformerInterplay)
                } else if !playing && active {
                    Some(TimelineLabel::SystemInterplay)
                } else {
                    None
                };
                ticks.push((m.timestamp, label));
            }
            Record::Trigger(t) => triggers.push(t.timestamp),
            _ => {}
        }
    }

    let trigger_between = |a: u64, b: u64| triggers.iter().any(|&t| a < t && t <= b);

    // Maximal same-label runs, cut at every trigger.
    let mut spans: Vec<Span> = Vec::new();
    let mut open: Option<Span> = None;
    let mut prev_ts: Option<u64> = None;
    for &(ts, label) in &ticks {
        let cut = prev_ts.is_some_and(|p| trigger_between(p, ts));
        match (open.as_mut(), label) {
            (Some(s), Some(l)) if s.label == l && !cut => s.end = ts,
            (_, l) => {
                spans.extend(open.take());
                open = l.map(|label| Span {
                    label,
                    start: ts,
                    end: ts,
                });
            }
        }
        prev_ts = Some(ts);
    }
    spans.extend(open);

    let min_span = ms(opts.min_span_ms);
    spans.retain(|s| s.end - s.start >= min_span);

    let merge_gap = ms(opts.merge_gap_ms);
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match merged.last_mut() {
            Some(m) if m.label == s.label && s.start - m.end <= merge_gap && !trigger_between(m.end, s.start) => {
                m.end = s.end
            }
            _ => merged.push(s),
        }
    }

    let gap = ms(opts.gap_ms);
    for s in &mut merged {
        if s.label == TimelineLabel::PerformerInterplay && triggers.iter().any(|&t| t >= s.end && t - s.end <= gap) {
            s.label = TimelineLabel::PerformerActionToTrigger;
        }
    }

    // Triggers sort ahead of a span starting at the same instant.
    let mut entries: Vec<(u64, u8, Span)> = triggers
        .iter()
        .map(|&t| {
            (
                t,
                0,
                Span {
                    label: TimelineLabel::ThresholdTrigger,
                    start: t,
                    end: t,
                },
            )
        })
        .chain(merged.into_iter().map(|s| (s.start, 1, s)))
        .collect();
    entries.sort_by_key(|&(t, k, _)| (t, k));
    entries
        .into_iter()
        .map(|(_, _, s)| TimelineEntry {
            label: s.label,
            t_start: s.start as f64 / 1e6,
            t_end: s.end as f64 / 1e6,
        })
        .collect()
}

/// Human-readable table, one entry per row.
pub fn format_table(entries: &[TimelineEntry]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>3}  {:<28}  {:>9}  {:>9}", "#", "label", "start_s", "end_s");
    for (i, e) in entries.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>3}  {:<28}  {:>9.3}  {:>9.3}",
            i + 1,
            e.label.as_str(),
            e.t_start,
            e.t_end
        );
    }
    out
}
