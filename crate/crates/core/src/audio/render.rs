//! Block scheduling shared by the live callback and offline rendering.
//!
//! Both paths run [`AudioProcessor::process_block`]: drain pending control
//! actions without blocking, then process one block. Offline rendering only
//! decides *which* actions are pending before each block.

use crossbeam_channel::{Receiver, Sender, TrySendError};
use serde::{Deserialize, Serialize};

use super::chain::ProcessingChain;
use super::{envelope_follow, ChainSpec, ParameterCommand};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AudioAction {
    SetParam(ParameterCommand),
    SetActive { unit: String, active: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub timestamp: u64,
    #[serde(flatten)]
    pub action: AudioAction,
}

/// First block whose start time is at or after `timestamp_us`.
pub fn block_for_timestamp(timestamp_us: u64, sample_rate: u32, block_size: usize) -> u64 {
    let num = u128::from(timestamp_us) * u128::from(sample_rate);
    let den = block_size as u128 * 1_000_000;
    num.div_ceil(den) as u64
}

/// Start time of block `index`, rounded down to whole microseconds.
pub fn block_start_us(index: u64, sample_rate: u32, block_size: usize) -> u64 {
    (u128::from(index) * block_size as u128 * 1_000_000 / u128::from(sample_rate)) as u64
}

/// The audio-callback side: owns the chain and the receiving end of the
/// command channel.
pub struct AudioProcessor {
    chain: ProcessingChain,
    actions: Receiver<AudioAction>,
    next_block: u64,
    last_envelope: f64,
}

impl AudioProcessor {
    pub fn new(chain: ProcessingChain, actions: Receiver<AudioAction>) -> Self {
        Self {
            chain,
            actions,
            next_block: 0,
            last_envelope: 0.0,
        }
    }

    pub fn chain(&self) -> &ProcessingChain {
        &self.chain
    }

    pub fn last_input_envelope(&self) -> f64 {
        self.last_envelope
    }

    fn apply(&mut self, action: &AudioAction) {
        let res = match action {
            AudioAction::SetParam(cmd) => self.chain.set_parameter(cmd),
            AudioAction::SetActive { unit, active } => self.chain.set_active(unit, *active),
        };
        if let Err(e) = res {
            log::warn!("audio action rejected: {e}");
        }
    }

    /// Never blocks: only actions already queued are applied.
    pub fn process_block(&mut self, input: &[f32], output: &mut [f32]) -> u64 {
        while let Ok(action) = self.actions.try_recv() {
            self.apply(&action);
        }
        self.last_envelope = envelope_follow(input);
        self.chain.process(input, output);
        let index = self.next_block;
        self.next_block += 1;
        index
    }
}

/// Bounded action queue feeding an [`AudioProcessor`].
pub fn action_channel(capacity: usize) -> (Sender<AudioAction>, Receiver<AudioAction>) {
    crossbeam_channel::bounded(capacity)
}

/// Checks a trace against the chain before anything is rendered.
pub fn validate_trace(spec: &ChainSpec, trace: &[TimedAction], duration_us: u64) -> Result<()> {
    for (i, t) in trace.iter().enumerate() {
        if t.timestamp > duration_us {
            return Err(Error::InvalidInput(format!(
                "trace entry {i} at {} us is past the input end ({duration_us} us)",
                t.timestamp
            )));
        }
        match &t.action {
            AudioAction::SetParam(cmd) => {
                spec.resolve_or_err(&cmd.target)?;
            }
            AudioAction::SetActive { unit, .. } => {
                if spec.unit(unit).is_none() {
                    return Err(Error::UnknownUnit(unit.clone()));
                }
            }
        }
    }
    Ok(())
}

/// Renders `input` through the chain, applying each traced action at the
/// first block boundary at or after its timestamp. Deterministic: identical
/// inputs give bit-identical output.
pub fn render_offline(spec: &ChainSpec, input: &[f32], trace: &[TimedAction]) -> Result<Vec<f32>> {
    let duration_us = (input.len() as u128 * 1_000_000 / u128::from(spec.sample_rate)) as u64;
    validate_trace(spec, trace, duration_us)?;
    let chain = ProcessingChain::new(spec)?;
    let block = spec.block_size;

    let mut order: Vec<usize> = (0..trace.len()).collect();
    order.sort_by_key(|&i| trace[i].timestamp);

    let (tx, rx) = action_channel(trace.len().max(1));
    let mut proc = AudioProcessor::new(chain, rx);
    let mut out = vec![0.0f32; input.len()];
    let mut next = 0usize;
    let mut scratch_in = vec![0.0f32; block];
    let mut scratch_out = vec![0.0f32; block];
    for (k, (chunk_in, chunk_out)) in input.chunks(block).zip(out.chunks_mut(block)).enumerate() {
        while next < order.len()
            && block_for_timestamp(trace[order[next]].timestamp, spec.sample_rate, block) <= k as u64
        {
            // Capacity equals the trace length, so this never fills.
            match tx.try_send(trace[order[next]].action.clone()) {
                Ok(()) | Err(TrySendError::Disconnected(_)) => {}
                Err(TrySendError::Full(_)) => unreachable!("action channel sized to trace"),
            }
            next += 1;
        }
        if chunk_in.len() == block {
            proc.process_block(chunk_in, chunk_out);
        } else {
            // Final partial block is zero-padded.
            scratch_in.fill(0.0);
            scratch_in[..chunk_in.len()].copy_from_slice(chunk_in);
            proc.process_block(&scratch_in, &mut scratch_out);
            chunk_out.copy_from_slice(&scratch_out[..chunk_in.len()]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::CommandOrigin;
    use super::*;

    #[test]
    fn block_boundaries() {
        // 512 samples at 48 kHz = 10666.67 us per block.
        assert_eq!(block_for_timestamp(0, 48_000, 512), 0);
        assert_eq!(block_for_timestamp(1, 48_000, 512), 1);
        assert_eq!(block_for_timestamp(10_666, 48_000, 512), 1);
        assert_eq!(block_for_timestamp(10_667, 48_000, 512), 2);
        assert_eq!(block_start_us(3, 48_000, 512), 32_000);
    }

    #[test]
    fn empty_chain_renders_identity() {
        let spec = ChainSpec::empty(48_000, 64);
        let input: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(render_offline(&spec, &input, &[]).unwrap(), input);
    }

    #[test]
    fn trace_is_checked_first() {
        let spec = ChainSpec::empty(48_000, 64);
        let trace = vec![TimedAction {
            timestamp: 0,
            action: AudioAction::SetParam(ParameterCommand {
                target: "gain.level".parse().unwrap(),
                value: 1.0,
                ramp_ms: 0.0,
                origin: CommandOrigin::Score,
                timestamp: 0,
            }),
        }];
        assert!(matches!(
            render_offline(&spec, &[0.0; 64], &trace),
            Err(Error::UnresolvedTarget(_))
        ));
        let late = vec![TimedAction {
            timestamp: 10_000_000,
            action: AudioAction::SetActive {
                unit: "x".into(),
                active: true,
            },
        }];
        assert!(render_offline(&spec, &[0.0; 64], &late).is_err());
    }
}
