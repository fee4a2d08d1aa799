//! Everything that can appear in a session log after the header.

use serde::{Deserialize, Serialize};

use crate::audio::render::AudioAction;
use crate::audio::{CommandOrigin, ParameterCommand};
use crate::mapping::MappingConfig;
use crate::motion::MotionSample;
use crate::saliency::{SaliencySample, SoaSource, TriggerConfig, TriggerEvent};
use crate::score::Score;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SectionChangeCause {
    Trigger,
    Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionChange {
    pub timestamp: u64,
    pub from: usize,
    pub to: usize,
    pub cause: SectionChangeCause,
}

/// Input-level envelope of the performer's audio, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSample {
    pub envelope: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub timestamp: u64,
    pub text: String,
}

/// A validated change to the running engine. Parameter writes from the
/// control plane are logged as plain `ParameterCommand` records instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EngineChange {
    SetTrigger { trigger: TriggerConfig, soa_source: SoaSource },
    LoadScore { score: Score },
    LoadMapping { mapping: MappingConfig },
    SetActive { unit: String, active: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub timestamp: u64,
    pub change: EngineChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Motion(MotionSample),
    Saliency(SaliencySample),
    Trigger(TriggerEvent),
    ParameterCommand(ParameterCommand),
    SectionChange(SectionChange),
    Envelope(EnvelopeSample),
    Annotation(Annotation),
    Control(ControlRecord),
}

impl Record {
    pub fn timestamp(&self) -> u64 {
        match self {
            Record::Motion(r) => r.timestamp,
            Record::Saliency(r) => r.timestamp,
            Record::Trigger(r) => r.timestamp,
            Record::ParameterCommand(r) => r.timestamp,
            Record::SectionChange(r) => r.timestamp,
            Record::Envelope(r) => r.timestamp,
            Record::Annotation(r) => r.timestamp,
            Record::Control(r) => r.timestamp,
        }
    }

    /// Records the engine derives itself, as opposed to inputs fed to it.
    pub fn is_derived(&self) -> bool {
        match self {
            Record::Saliency(_) | Record::Trigger(_) | Record::SectionChange(_) => true,
            Record::ParameterCommand(c) => c.origin != CommandOrigin::ControlPlane,
            _ => false,
        }
    }

    /// What the audio thread needs to hear about this record, if anything.
    pub fn audio_action(&self) -> Option<AudioAction> {
        match self {
            Record::ParameterCommand(c) => Some(AudioAction::SetParam(c.clone())),
            Record::Control(ControlRecord {
                change: EngineChange::SetActive { unit, active },
                ..
            }) => Some(AudioAction::SetActive {
                unit: unit.clone(),
                active: *active,
            }),
            _ => None,
        }
    }
}
