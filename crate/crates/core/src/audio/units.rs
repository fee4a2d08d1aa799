use std::f64::consts::TAU;

use super::UnitKind;

const DENORMAL_FLOOR: f64 = 1e-30;

#[inline]
fn flush(v: f64) -> f64 {
    if v.abs() < DENORMAL_FLOOR {
        0.0
    } else {
        v
    }
}

/// Normalized RBJ low-pass coefficients `(b0, b1, b2, a1, a2)`.
pub(crate) fn rbj_lowpass(cutoff_hz: f64, q: f64, fs: f64) -> [f64; 5] {
    let w0 = TAU * cutoff_hz / fs;
    let (sin, cos) = w0.sin_cos();
    let alpha = sin / (2.0 * q);
    let a0 = 1.0 + alpha;
    let b0 = (1.0 - cos) / 2.0;
    [b0 / a0, (1.0 - cos) / a0, b0 / a0, (-2.0 * cos) / a0, (1.0 - alpha) / a0]
}

/// DSP state of one unit. Parameter values arrive per sample already
/// ramped, in the order of [`UnitKind::params`].
#[derive(Debug, Clone)]
pub(crate) enum UnitState {
    Gain,
    Delay {
        line: Vec<f64>,
        pos: usize,
    },
    Ringmod {
        phase: f64,
    },
    Lowpass {
        z1: f64,
        z2: f64,
        coeffs: [f64; 5],
        for_params: (f64, f64),
    },
}

impl UnitState {
    pub(crate) fn new(kind: UnitKind, fs: u32) -> Self {
        match kind {
            UnitKind::Gain => UnitState::Gain,
            // Longest delay is fs samples; the line holds one extra slot for
            // the sample being written.
            UnitKind::Delay => UnitState::Delay {
                line: vec![0.0; fs as usize + 1],
                pos: 0,
            },
            UnitKind::Ringmod => UnitState::Ringmod { phase: 0.0 },
            UnitKind::Lowpass => UnitState::Lowpass {
                z1: 0.0,
                z2: 0.0,
                coeffs: [0.0; 5],
                for_params: (f64::NAN, f64::NAN),
            },
        }
    }

    #[inline]
    pub(crate) fn tick(&mut self, x: f64, p: &[f64], fs: f64) -> f64 {
        match self {
            UnitState::Gain => p[0] * x,
            UnitState::Delay { line, pos } => {
                let len = line.len();
                let d = (p[0].round() as usize).clamp(1, len - 1);
                let (fb, mix) = (p[1], p[2]);
                let w = line[(*pos + len - d) % len];
                line[*pos] = flush(x + fb * w);
                *pos = (*pos + 1) % len;
                (1.0 - mix) * x + mix * w
            }
            UnitState::Ringmod { phase } => {
                let (freq, mix) = (p[0], p[1]);
                let y = (1.0 - mix) * x + mix * x * phase.sin();
                *phase += TAU * freq / fs;
                if *phase >= TAU {
                    *phase -= TAU;
                }
                y
            }
            UnitState::Lowpass {
                z1,
                z2,
                coeffs,
                for_params,
            } => {
                if *for_params != (p[0], p[1]) {
                    *coeffs = rbj_lowpass(p[0], p[1], fs);
                    *for_params = (p[0], p[1]);
                }
                let [b0, b1, b2, a1, a2] = *coeffs;
                let y = b0 * x + *z1;
                *z1 = flush(b1 * x - a1 * y + *z2);
                *z2 = flush(b2 * x - a2 * y);
                y
            }
        }
    }
}
