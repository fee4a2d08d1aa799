//! Wire format: each message is a 4-byte big-endian length followed by that
//! many bytes of UTF-8 JSON. WebSocket clients send the same JSON as text
//! frames without the prefix.
//!
//! Requests: `{"kind": "...", "request_id": <any>, "payload": {...}}`.
//! Replies: `{"type": "reply", "request_id": <echo>, "ok": true, "result": ...}`
//! or `{"type": "reply", "request_id": <echo>, "ok": false, "error": {...}}`.
//! Metrics: `{"type": "metrics", "frame": {...}}`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::ParamAddress;
use crate::engine::MetricsFrame;
use crate::error::{Error, ValidationErrors, ValidationKind};
use crate::saliency::SoaSource;

pub const MAX_MESSAGE_BYTES: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportAction {
    Start,
    Stop,
    Recalibrate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPatch {
    pub theta_hi: Option<f64>,
    pub theta_lo: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerPatch {
    pub theta_hi: Option<f64>,
    pub theta_lo: Option<f64>,
    pub refractory: Option<u64>,
    pub adaptive: Option<bool>,
    pub k_adapt: Option<f64>,
    pub long_window: Option<usize>,
    pub soa_source: Option<SoaSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentLoad {
    /// The full document, same schema as the file on disk.
    pub document: Value,
    /// Digest of the document the client based its edit on; rejected if the
    /// engine has moved on.
    #[serde(default)]
    pub base_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetParam {
    pub target: ParamAddress,
    pub value: f64,
    #[serde(default)]
    pub ramp_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetActive {
    pub unit: String,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transport {
    pub action: TransportAction,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlCommand {
    SetThreshold(ThresholdPatch),
    SetTriggerConfig(TriggerPatch),
    LoadScore(DocumentLoad),
    LoadMapping(DocumentLoad),
    SetParam(SetParam),
    SetActive(SetActive),
    Transport(Transport),
    Subscribe,
    Ping,
}

impl ControlCommand {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlCommand::SetThreshold(_) => "SET_THRESHOLD",
            ControlCommand::SetTriggerConfig(_) => "SET_TRIGGER_CONFIG",
            ControlCommand::LoadScore(_) => "LOAD_SCORE",
            ControlCommand::LoadMapping(_) => "LOAD_MAPPING",
            ControlCommand::SetParam(_) => "SET_PARAM",
            ControlCommand::SetActive(_) => "SET_ACTIVE",
            ControlCommand::Transport(_) => "TRANSPORT",
            ControlCommand::Subscribe => "SUBSCRIBE",
            ControlCommand::Ping => "PING",
        }
    }

    fn payload(&self) -> Value {
        let v = match self {
            ControlCommand::SetThreshold(p) => serde_json::to_value(p),
            ControlCommand::SetTriggerConfig(p) => serde_json::to_value(p),
            ControlCommand::LoadScore(p) | ControlCommand::LoadMapping(p) => serde_json::to_value(p),
            ControlCommand::SetParam(p) => serde_json::to_value(p),
            ControlCommand::SetActive(p) => serde_json::to_value(p),
            ControlCommand::Transport(p) => serde_json::to_value(p),
            ControlCommand::Subscribe | ControlCommand::Ping => Ok(Value::Object(Default::default())),
        };
        v.expect("payload serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlMessage {
    pub request_id: Value,
    pub command: ControlCommand,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    kind: String,
    #[serde(default)]
    request_id: Value,
    #[serde(default)]
    payload: Value,
}

fn payload<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, serde_json::Error> {
    let v = if v.is_null() { Value::Object(Default::default()) } else { v };
    serde_json::from_value(v)
}

impl ControlMessage {
    pub fn new(request_id: impl Into<Value>, command: ControlCommand) -> Self {
        Self {
            request_id: request_id.into(),
            command,
        }
    }

    /// Parses one message. On failure the error reply already carries
    /// whatever request id could be recovered.
    pub fn parse(text: &str) -> Result<Self, Reply> {
        let raw: Value = serde_json::from_str(text)
            .map_err(|e| Reply::error(Value::Null, ReplyError::schema(format!("malformed JSON: {e}"))))?;
        let request_id = raw.get("request_id").cloned().unwrap_or(Value::Null);
        let env: Envelope = serde_json::from_value(raw)
            .map_err(|e| Reply::error(request_id.clone(), ReplyError::schema(e.to_string())))?;
        let request_id = env.request_id;
        let bad = |e: serde_json::Error| {
            Reply::error(
                request_id.clone(),
                ReplyError::schema(format!("{} payload: {e}", env.kind)),
            )
        };
        let command = match env.kind.as_str() {
            "SET_THRESHOLD" => ControlCommand::SetThreshold(payload(env.payload).map_err(bad)?),
            "SET_TRIGGER_CONFIG" => ControlCommand::SetTriggerConfig(payload(env.payload).map_err(bad)?),
            "LOAD_SCORE" => ControlCommand::LoadScore(payload(env.payload).map_err(bad)?),
            "LOAD_MAPPING" => ControlCommand::LoadMapping(payload(env.payload).map_err(bad)?),
            "SET_PARAM" => ControlCommand::SetParam(payload(env.payload).map_err(bad)?),
            "SET_ACTIVE" => ControlCommand::SetActive(payload(env.payload).map_err(bad)?),
            "TRANSPORT" => ControlCommand::Transport(payload(env.payload).map_err(bad)?),
            "SUBSCRIBE" => ControlCommand::Subscribe,
            "PING" => ControlCommand::Ping,
            other => {
                return Err(Reply::error(
                    request_id,
                    ReplyError::schema(format!("unknown kind `{other}`")),
                ))
            }
        };
        Ok(Self { request_id, command })
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "kind": self.command.kind(),
            "request_id": self.request_id,
            "payload": self.command.payload(),
        })
        .to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Schema,
    Validation,
    UnresolvedTarget,
    DigestConflict,
    State,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<ErrorDetail>,
}

impl ReplyError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Schema, message)
    }

    fn from_validation(errs: &ValidationErrors) -> Self {
        let code = if errs.has_kind(ValidationKind::UnresolvedTarget) {
            ErrorCode::UnresolvedTarget
        } else if errs.has_kind(ValidationKind::Syntax) {
            ErrorCode::Schema
        } else {
            ErrorCode::Validation
        };
        Self {
            code,
            message: errs.to_string(),
            details: errs
                .iter()
                .map(|e| ErrorDetail {
                    location: e.location.clone(),
                    message: e.message.clone(),
                })
                .collect(),
        }
    }
}

impl From<&Error> for ReplyError {
    fn from(e: &Error) -> Self {
        match e {
            Error::Validation(errs) => Self::from_validation(errs),
            Error::UnresolvedTarget(_) | Error::UnknownUnit(_) => Self::new(ErrorCode::UnresolvedTarget, e.to_string()),
            Error::DigestMismatch { .. } => Self::new(ErrorCode::DigestConflict, e.to_string()),
            Error::InvalidInput(_) | Error::Json(_) => Self::new(ErrorCode::Validation, e.to_string()),
            _ => Self::new(ErrorCode::State, e.to_string()),
        }
    }
}

impl From<Error> for ReplyError {
    fn from(e: Error) -> Self {
        Self::from(&e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub request_id: Value,
    pub outcome: Result<Value, ReplyError>,
}

impl Reply {
    pub fn ok(request_id: Value, result: Value) -> Self {
        Self {
            request_id,
            outcome: Ok(result),
        }
    }

    pub fn error(request_id: Value, err: ReplyError) -> Self {
        Self {
            request_id,
            outcome: Err(err),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }
}

/// Everything the server sends.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Reply(Reply),
    Metrics(MetricsFrame),
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        match self {
            ServerMessage::Reply(r) => match &r.outcome {
                Ok(result) => serde_json::json!({
                    "type": "reply", "request_id": r.request_id, "ok": true, "result": result,
                }),
                Err(e) => serde_json::json!({
                    "type": "reply", "request_id": r.request_id, "ok": false, "error": e,
                }),
            },
            ServerMessage::Metrics(f) => serde_json::json!({"type": "metrics", "frame": f}),
        }
        .to_string()
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let v: Value = serde_json::from_str(text)?;
        let field = |name: &str| {
            v.get(name)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("server message without `{name}`")))
        };
        match v.get("type").and_then(Value::as_str) {
            Some("metrics") => Ok(ServerMessage::Metrics(serde_json::from_value(field("frame")?)?)),
            Some("reply") => {
                let request_id = v.get("request_id").cloned().unwrap_or(Value::Null);
                let outcome = if field("ok")?.as_bool() == Some(true) {
                    Ok(v.get("result").cloned().unwrap_or(Value::Null))
                } else {
                    Err(serde_json::from_value(field("error")?)?)
                };
                Ok(ServerMessage::Reply(Reply { request_id, outcome }))
            }
            _ => Err(Error::InvalidInput(format!("unknown server message: {text}"))),
        }
    }
}

pub fn write_frame(w: &mut impl Write, json: &str) -> io::Result<()> {
    let len = u32::try_from(json.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "message too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(json.as_bytes())?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream between messages.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<String>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_MESSAGE_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("message of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Incremental decoder for byte streams read in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// The next complete frame, if one has arrived.
    pub fn next_frame(&mut self) -> io::Result<Option<String>> {
        let Some(head) = self.buf.get(..4) else {
            return Ok(None);
        };
        let len = u32::from_be_bytes(head.try_into().expect("four bytes")) as usize;
        if len > MAX_MESSAGE_BYTES {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("message of {len} bytes exceeds limit"),
            ));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let body: Vec<u8> = self.buf.drain(..4 + len).skip(4).collect();
        String::from_utf8(body)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_handles_split_frames() {
        let mut bytes = Vec::new();
        write_frame(&mut bytes, "{\"a\":1}").unwrap();
        write_frame(&mut bytes, "[]").unwrap();
        let mut d = FrameDecoder::default();
        let mut out = Vec::new();
        for b in &bytes {
            d.feed(std::slice::from_ref(b));
            while let Some(f) = d.next_frame().unwrap() {
                out.push(f);
            }
        }
        assert_eq!(out, ["{\"a\":1}", "[]"]);
        assert!(d.is_empty());
        d.feed(&u32::MAX.to_be_bytes());
        assert!(d.next_frame().is_err());
    }

    #[test]
    fn framing_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, r#"{"kind":"PING"}"#).unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 15]);
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), r#"{"kind":"PING"}"#);
        assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn parse_keeps_request_id_on_errors() {
        let err = ControlMessage::parse(r#"{"kind": "SET_THRESHOLD", "request_id": 42, "payload": {"theta_hi": "x"}}"#)
            .unwrap_err();
        assert_eq!(err.request_id, Value::from(42));
        assert_eq!(err.outcome.unwrap_err().code, ErrorCode::Schema);
        let err = ControlMessage::parse(r#"{"kind": "NOPE", "request_id": "a"}"#).unwrap_err();
        assert_eq!(err.request_id, Value::from("a"));
        assert!(ControlMessage::parse("{").is_err());
    }

    #[test]
    fn commands_round_trip() {
        let msgs = [
            ControlMessage::new(
                "t",
                ControlCommand::SetThreshold(ThresholdPatch {
                    theta_hi: Some(0.4),
                    theta_lo: None,
                }),
            ),
            ControlMessage::new(
                1,
                ControlCommand::SetParam(SetParam {
                    target: "gain.level".parse().unwrap(),
                    value: 0.5,
                    ramp_ms: 10.0,
                }),
            ),
            ControlMessage::new(
                2,
                ControlCommand::Transport(Transport {
                    action: TransportAction::Recalibrate,
                }),
            ),
            ControlMessage::new(3, ControlCommand::Ping),
        ];
        for m in msgs {
            assert_eq!(ControlMessage::parse(&m.to_json()).unwrap(), m);
        }
    }

    #[test]
    fn server_messages_round_trip() {
        let r = ServerMessage::Reply(Reply::error(
            Value::from("x"),
            ReplyError::new(ErrorCode::UnresolvedTarget, "nope.level"),
        ));
        assert_eq!(ServerMessage::parse(&r.to_json()).unwrap(), r);
        let ok = ServerMessage::Reply(Reply::ok(Value::from(1), Value::Null));
        assert_eq!(ServerMessage::parse(&ok.to_json()).unwrap(), ok);
    }
}
