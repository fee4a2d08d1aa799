//! Turns validated control messages into engine changes.

use std::io::Write;

use serde_json::{json, Value};

use crate::config::digest_of;
use crate::engine::Engine;
use crate::mapping::{validate_mapping, MappingConfig};
use crate::record::{EngineChange, Record};
use crate::saliency::TriggerConfig;
use crate::score::parse_score;
use crate::session::Recorder;

use super::protocol::{ControlCommand, DocumentLoad, ErrorCode, ReplyError, SetParam, TransportAction};

/// What a command amounts to once checked against the current engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Change(EngineChange),
    Parameter(SetParam),
    Transport(TransportAction),
    Subscribe,
    Ping,
}

fn check_base(base: &Option<String>, current: String) -> Result<(), ReplyError> {
    match base {
        Some(b) if *b != current => Err(ReplyError::new(
            ErrorCode::DigestConflict,
            format!("document changed since {b}; engine has {current}"),
        )),
        _ => Ok(()),
    }
}

fn document_text(load: &DocumentLoad) -> String {
    load.document.to_string()
}

/// Validates `cmd` in full without touching the engine.
pub fn plan(engine: &Engine, cmd: &ControlCommand) -> Result<Plan, ReplyError> {
    let plan = match cmd {
        ControlCommand::SetThreshold(p) => {
            let current = *engine.trigger_config();
            let trigger = TriggerConfig {
                theta_hi: p.theta_hi.unwrap_or(current.theta_hi),
                theta_lo: p.theta_lo.unwrap_or(current.theta_lo),
                ..current
            };
            Plan::Change(EngineChange::SetTrigger {
                trigger,
                soa_source: engine.soa_source(),
            })
        }
        ControlCommand::SetTriggerConfig(p) => {
            let c = *engine.trigger_config();
            let trigger = TriggerConfig {
                theta_hi: p.theta_hi.unwrap_or(c.theta_hi),
                theta_lo: p.theta_lo.unwrap_or(c.theta_lo),
                refractory: p.refractory.unwrap_or(c.refractory),
                adaptive: p.adaptive.unwrap_or(c.adaptive),
                k_adapt: p.k_adapt.unwrap_or(c.k_adapt),
                long_window: p.long_window.unwrap_or(c.long_window),
            };
            Plan::Change(EngineChange::SetTrigger {
                trigger,
                soa_source: p.soa_source.unwrap_or(engine.soa_source()),
            })
        }
        ControlCommand::LoadScore(load) => {
            check_base(&load.base_digest, digest_of(engine.score()))?;
            let score = parse_score(&document_text(load), Some(engine.chain())).map_err(|e| ReplyError::from(crate::Error::from(e)))?;
            Plan::Change(EngineChange::LoadScore { score })
        }
        ControlCommand::LoadMapping(load) => {
            check_base(&load.base_digest, digest_of(engine.mapping()))?;
            let mapping = MappingConfig::parse(&document_text(load)).map_err(|e| ReplyError::from(crate::Error::from(e)))?;
            validate_mapping(&mapping, engine.chain()).map_err(|e| ReplyError::from(crate::Error::from(e)))?;
            Plan::Change(EngineChange::LoadMapping { mapping })
        }
        ControlCommand::SetParam(p) => Plan::Parameter(p.clone()),
        ControlCommand::SetActive(p) => Plan::Change(EngineChange::SetActive {
            unit: p.unit.clone(),
            active: p.active,
        }),
        ControlCommand::Transport(t) => Plan::Transport(t.action),
        ControlCommand::Subscribe => Plan::Subscribe,
        ControlCommand::Ping => Plan::Ping,
    };
    if let Plan::Change(c) = &plan {
        engine.check_change(c).map_err(ReplyError::from)?;
    }
    Ok(plan)
}

/// Result of executing a command against a recording engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Executed {
    /// Applied; the log records it produced, and the reply payload.
    Applied { records: Vec<Record>, result: Value },
    /// Needs the runtime (transport, subscription).
    Deferred(Plan),
}

/// Plans and applies `cmd` between ticks; nothing changes on error.
pub fn execute<W: Write>(rec: &mut Recorder<W>, cmd: &ControlCommand) -> Result<Executed, ReplyError> {
    match plan(rec.engine(), cmd)? {
        Plan::Change(change) => {
            let record = rec.change(change).map_err(ReplyError::from)?;
            let e = rec.engine();
            let result = match &record {
                Record::Control(c) => match &c.change {
                    EngineChange::SetTrigger { trigger, .. } => json!({
                        "theta_hi": trigger.theta_hi,
                        "theta_lo": trigger.theta_lo,
                        "effective_theta_hi": e.latest_metrics().effective_theta_hi,
                    }),
                    EngineChange::LoadScore { .. } => json!({"digest": digest_of(e.score())}),
                    EngineChange::LoadMapping { .. } => json!({"digest": digest_of(e.mapping())}),
                    EngineChange::SetActive { unit, active } => json!({"unit": unit, "active": active}),
                },
                _ => Value::Null,
            };
            Ok(Executed::Applied {
                records: vec![record],
                result,
            })
        }
        Plan::Parameter(p) => {
            let record = rec.parameter(p.target, p.value, p.ramp_ms).map_err(ReplyError::from)?;
            Ok(Executed::Applied {
                records: vec![record],
                result: Value::Null,
            })
        }
        Plan::Ping => Ok(Executed::Applied {
            records: Vec::new(),
            result: json!({"engine_time_us": rec.engine().now()}),
        }),
        other => Ok(Executed::Deferred(other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::protocol::{ControlMessage, ThresholdPatch};
    use crate::session::scenario::ScenarioAssets;
    use crate::session::LogHeader;

    fn recorder() -> Recorder<Vec<u8>> {
        let cfg = ScenarioAssets::bundled().unwrap().configs;
        let header = LogHeader::for_session(&cfg, 30.0, "test");
        Recorder::new(&cfg, &header, Vec::new()).unwrap()
    }

    fn cmd(text: &str) -> ControlCommand {
        ControlMessage::parse(text).unwrap().command
    }

    #[test]
    fn set_threshold_then_malformed() {
        let mut rec = recorder();
        let out = execute(
            &mut rec,
            &ControlCommand::SetThreshold(ThresholdPatch {
                theta_hi: Some(0.4),
                theta_lo: None,
            }),
        )
        .unwrap();
        let Executed::Applied { result, .. } = out else { panic!() };
        assert_eq!(result["effective_theta_hi"], 0.4);

        let err = execute(
            &mut rec,
            &cmd(r#"{"kind": "SET_THRESHOLD", "payload": {"theta_hi": 0.1, "theta_lo": 0.2}}"#),
        )
        .unwrap_err();
        assert_eq!(err.code, ErrorCode::Validation);
        assert_eq!(rec.engine().trigger_config().theta_hi, 0.4);
    }

    #[test]
    fn load_score_with_unresolved_target_names_it() {
        let mut rec = recorder();
        let mut doc = serde_json::to_value(rec.engine().score()).unwrap();
        doc["sections"][0]["distributions"][0]["target"] = "reverb.size".into();
        let before = digest_of(rec.engine().score());
        let err = execute(
            &mut rec,
            &ControlCommand::LoadScore(DocumentLoad {
                document: doc,
                base_digest: None,
            }),
        )
        .unwrap_err();
        assert_eq!(err.code, ErrorCode::UnresolvedTarget);
        assert!(err.message.contains("reverb.size"), "{}", err.message);
        assert_eq!(digest_of(rec.engine().score()), before);
    }

    #[test]
    fn stale_base_digest_conflicts() {
        let mut rec = recorder();
        let doc = serde_json::to_value(rec.engine().mapping()).unwrap();
        let err = execute(
            &mut rec,
            &ControlCommand::LoadMapping(DocumentLoad {
                document: doc.clone(),
                base_digest: Some("00".into()),
            }),
        )
        .unwrap_err();
        assert_eq!(err.code, ErrorCode::DigestConflict);
        let base = digest_of(rec.engine().mapping());
        let ok = execute(
            &mut rec,
            &ControlCommand::LoadMapping(DocumentLoad {
                document: doc,
                base_digest: Some(base),
            }),
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn set_param_and_active_produce_audio_records() {
        let mut rec = recorder();
        let Executed::Applied { records, .. } = execute(
            &mut rec,
            &cmd(r#"{"kind": "SET_PARAM", "payload": {"target": "gain.level", "value": 0.5}}"#),
        )
        .unwrap() else {
            panic!()
        };
        assert!(records[0].audio_action().is_some());
        let err = execute(
            &mut rec,
            &cmd(r#"{"kind": "SET_ACTIVE", "payload": {"unit": "reverb", "active": false}}"#),
        )
        .unwrap_err();
        assert_eq!(err.code, ErrorCode::UnresolvedTarget);
        assert!(matches!(
            execute(&mut rec, &cmd(r#"{"kind": "TRANSPORT", "payload": {"action": "stop"}}"#)).unwrap(),
            Executed::Deferred(Plan::Transport(TransportAction::Stop))
        ));
    }
}
