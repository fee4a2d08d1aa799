use log::warn;

use super::ramp::LinearRamp;
use super::units::UnitState;
use super::{ChainSpec, ParamRange, ParameterCommand, UnitKind};
use crate::error::{Error, Result};

/// Length of the crossfade between a unit and its bypass.
pub const ACTIVATION_CROSSFADE_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub block_index: u64,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, block_index: u64) -> Self {
        Self { samples, block_index }
    }

    pub fn silence(len: usize, block_index: u64) -> Self {
        Self::new(vec![0.0; len], block_index)
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: &'static str,
    range: ParamRange,
    ramp: LinearRamp,
}

#[derive(Debug, Clone)]
struct Unit {
    id: String,
    kind: UnitKind,
    params: Vec<Param>,
    values: Vec<f64>,
    state: UnitState,
    /// 1 = fully in the signal path, 0 = bypassed.
    presence: LinearRamp,
}

/// Runtime chain built from a validated [`ChainSpec`]. Owns all DSP state;
/// nothing here allocates or blocks once constructed.
#[derive(Debug, Clone)]
pub struct ProcessingChain {
    sample_rate: u32,
    block_size: usize,
    dry_gain: f64,
    wet_gain: f64,
    units: Vec<Unit>,
    crossfade_samples: u64,
    blocks_processed: u64,
}

impl ProcessingChain {
    pub fn new(spec: &ChainSpec) -> Result<Self> {
        spec.validate()?;
        let units = spec
            .units
            .iter()
            .map(|u| {
                let params: Vec<Param> = u
                    .kind
                    .params(spec.sample_rate)
                    .into_iter()
                    .map(|p| Param {
                        name: p.name,
                        range: p.range,
                        ramp: LinearRamp::new(u.params.get(p.name).copied().unwrap_or(p.default)),
                    })
                    .collect();
                Unit {
                    id: u.id.clone(),
                    kind: u.kind,
                    values: params.iter().map(|p| p.ramp.value()).collect(),
                    params,
                    state: UnitState::new(u.kind, spec.sample_rate),
                    presence: LinearRamp::new(if u.active { 1.0 } else { 0.0 }),
                }
            })
            .collect();
        Ok(Self {
            sample_rate: spec.sample_rate,
            block_size: spec.block_size,
            dry_gain: spec.dry_gain,
            wet_gain: spec.wet_gain,
            units,
            crossfade_samples: ms_to_samples(ACTIVATION_CROSSFADE_MS, spec.sample_rate),
            blocks_processed: 0,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn crossfade_samples(&self) -> u64 {
        self.crossfade_samples
    }

    fn unit_mut(&mut self, id: &str) -> Result<&mut Unit> {
        self.units
            .iter_mut()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    pub fn param_value(&self, unit: &str, param: &str) -> Option<f64> {
        let u = self.units.iter().find(|u| u.id == unit)?;
        u.params.iter().find(|p| p.name == param).map(|p| p.ramp.value())
    }

    pub fn unit_kind(&self, unit: &str) -> Option<UnitKind> {
        self.units.iter().find(|u| u.id == unit).map(|u| u.kind)
    }

    /// Starts a linear ramp toward `cmd.value` (clamped to the declared
    /// range) over `cmd.ramp_ms`. Takes effect from the next processed sample.
    pub fn set_parameter(&mut self, cmd: &ParameterCommand) -> Result<()> {
        let fs = self.sample_rate;
        let unit = self
            .units
            .iter_mut()
            .find(|u| u.id == cmd.target.unit)
            .ok_or_else(|| Error::UnresolvedTarget(cmd.target.to_string()))?;
        let param = unit
            .params
            .iter_mut()
            .find(|p| p.name == cmd.target.param)
            .ok_or_else(|| Error::UnresolvedTarget(cmd.target.to_string()))?;
        if !cmd.value.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite value for {}", cmd.target)));
        }
        let value = param.range.clamp(cmd.value);
        if value != cmd.value {
            warn!(
                "{} = {} outside [{}, {}], clamped to {value}",
                cmd.target, cmd.value, param.range.lo, param.range.hi
            );
        }
        param.ramp.set(value, ms_to_samples(cmd.ramp_ms.max(0.0), fs));
        Ok(())
    }

    /// Crossfades the unit into or out of the signal path.
    pub fn set_active(&mut self, unit_id: &str, active: bool) -> Result<()> {
        let n = self.crossfade_samples;
        let unit = self.unit_mut(unit_id)?;
        unit.presence.set(if active { 1.0 } else { 0.0 }, n);
        Ok(())
    }

    pub fn is_active(&self, unit_id: &str) -> Option<bool> {
        self.units
            .iter()
            .find(|u| u.id == unit_id)
            .map(|u| u.presence.target() > 0.0)
    }

    /// Processes any number of samples; `output.len()` must equal `input.len()`.
    pub fn process(&mut self, input: &[f32], output: &mut [f32]) {
        assert_eq!(input.len(), output.len(), "input/output length mismatch");
        let fs = f64::from(self.sample_rate);
        for (x_in, y_out) in input.iter().zip(output.iter_mut()) {
            let dry = f64::from(*x_in);
            let mut x = dry;
            for unit in &mut self.units {
                for (v, p) in unit.values.iter_mut().zip(unit.params.iter_mut()) {
                    *v = p.ramp.tick();
                }
                let presence = unit.presence.tick();
                if presence == 0.0 {
                    continue;
                }
                let wet = unit.state.tick(x, &unit.values, fs);
                x = if presence == 1.0 {
                    wet
                } else {
                    presence * wet + (1.0 - presence) * x
                };
            }
            *y_out = if self.wet_gain == 0.0 {
                (self.dry_gain * dry) as f32
            } else {
                (self.dry_gain * dry + self.wet_gain * x) as f32
            };
        }
    }

    pub fn process_block(&mut self, input: &AudioBuffer) -> AudioBuffer {
        let mut out = vec![0.0f32; input.samples.len()];
        self.process(&input.samples, &mut out);
        self.blocks_processed += 1;
        AudioBuffer::new(out, input.block_index)
    }

    pub fn blocks_processed(&self) -> u64 {
        self.blocks_processed
    }

    /// Ids and kinds in processing order.
    pub fn units(&self) -> impl Iterator<Item = (&str, UnitKind)> {
        self.units.iter().map(|u| (u.id.as_str(), u.kind))
    }
}

pub(crate) fn ms_to_samples(ms: f64, fs: u32) -> u64 {
    (ms * f64::from(fs) / 1000.0).round() as u64
}
