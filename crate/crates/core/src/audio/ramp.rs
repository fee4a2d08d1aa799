/// Per-sample linear interpolation toward a target.
///
/// Each step recomputes `start + Δ·k/N` instead of accumulating an
/// increment, so the last sample lands exactly on the target.
#[derive(Debug, Clone)]
pub struct LinearRamp {
    current: f64,
    start: f64,
    target: f64,
    step: u64,
    total: u64,
}

impl LinearRamp {
    pub fn new(value: f64) -> Self {
        Self {
            current: value,
            start: value,
            target: value,
            step: 0,
            total: 0,
        }
    }

    pub fn value(&self) -> f64 {
        self.current
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn is_ramping(&self) -> bool {
        self.step < self.total
    }

    /// Starts a ramp from the current value. `samples == 0` jumps.
    pub fn set(&mut self, target: f64, samples: u64) {
        if samples == 0 {
            self.current = target;
            self.start = target;
            self.target = target;
            self.step = 0;
            self.total = 0;
        } else {
            self.start = self.current;
            self.target = target;
            self.step = 0;
            self.total = samples;
        }
    }

    #[inline]
    pub fn tick(&mut self) -> f64 {
        if self.step < self.total {
            self.step += 1;
            self.current = if self.step == self.total {
                self.target
            } else {
                self.start + (self.target - self.start) * (self.step as f64 / self.total as f64)
            };
        }
        self.current
    }
}
