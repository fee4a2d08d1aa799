//! Quantity of Motion from inter-frame luminance differences.
//!
//! QoM is the noise-gated sum of absolute per-pixel differences between two
//! consecutive frames, normalized by the pixel count and full-scale
//! intensity, so it always lies in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_INTENSITY: u8 = 255;

/// Frames needed before a noise floor can be estimated.
pub const MIN_CALIBRATION_FRAMES: usize = 30;

/// Mean QoM a still scene may show once gated by the calibrated noise floor.
pub const CALIBRATION_TOLERANCE: f64 = 1e-4;

/// Interleaved 8-bit RGB frame as delivered by a capture device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
    pub timestamp_us: u64,
}

impl RgbFrame {
    pub fn solid(width: usize, height: usize, rgb: [u8; 3], timestamp_us: u64) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
            timestamp_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LuminanceGrid {
    width: usize,
    height: usize,
    intensities: Vec<u8>,
    pub timestamp_us: u64,
}

impl LuminanceGrid {
    pub fn new(width: usize, height: usize, intensities: Vec<u8>, timestamp_us: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "frame dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if intensities.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "expected {} intensities for a {width}x{height} frame, got {}",
                width * height,
                intensities.len()
            )));
        }
        Ok(Self {
            width,
            height,
            intensities,
            timestamp_us,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8, timestamp_us: u64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], timestamp_us)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.intensities.len()
    }

    pub fn intensities(&self) -> &[u8] {
        &self.intensities
    }

    pub fn into_intensities(self) -> Vec<u8> {
        self.intensities
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.intensities[y * self.width..(y + 1) * self.width]
    }

    /// Mean-pools `factor`×`factor` cells. Edge cells that run past the frame
    /// border average over the pixels they actually cover.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let out_w = self.width.div_ceil(factor);
        let out_h = self.height.div_ceil(factor);
        let mut sums = vec![0u32; out_w * out_h];
        let mut counts = vec![0u32; out_w * out_h];
        for y in 0..self.height {
            let oy = y / factor;
            for (x, &v) in self.row(y).iter().enumerate() {
                let idx = oy * out_w + x / factor;
                sums[idx] += u32::from(v);
                counts[idx] += 1;
            }
        }
        let pooled = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| ((s + c / 2) / c) as u8)
            .collect();
        Self::new(out_w, out_h, pooled, self.timestamp_us)
    }
}

/// Converts a color frame with BT.601 luma weights.
pub fn to_luminance(frame: &RgbFrame) -> Result<LuminanceGrid> {
    if frame.width == 0 || frame.height == 0 {
        return Err(Error::InvalidInput(format!(
            "frame dimensions must be at least 1x1, got {}x{}",
            frame.width, frame.height
        )));
    }
    let intensities = frame
        .pixels
        .iter()
        .map(|&[r, g, b]| {
            let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    LuminanceGrid::new(frame.width, frame.height, intensities, frame.timestamp_us)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    pub qom: f64,
    pub timestamp: u64,
    pub frame_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Gate ε in intensity units; differences below it count as zero.
    pub noise_floor: u8,
    pub downsample_factor: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            noise_floor: 0,
            downsample_factor: 1,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::InvalidInput("downsample_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Streaming form of the QoM sum. Rows (or any aligned chunks) of the two
/// frames can be fed in any order; the integer accumulator makes the result
/// independent of chunking.
#[derive(Debug, Clone)]
pub struct QomAccumulator {
    noise_floor: u8,
    gated_sum: u64,
    pixels: u64,
}

impl QomAccumulator {
    pub fn new(noise_floor: u8) -> Self {
        Self {
            noise_floor,
            gated_sum: 0,
            pixels: 0,
        }
    }

    pub fn feed(&mut self, prev: &[u8], curr: &[u8]) {
        debug_assert_eq!(prev.len(), curr.len());
        let gate = self.noise_floor;
        let chunk: u64 = prev
            .iter()
            .zip(curr)
            .map(|(&a, &b)| {
                let d = a.abs_diff(b);
                if d >= gate {
                    u64::from(d)
                } else {
                    0
                }
            })
            .sum();
        self.gated_sum += chunk;
        self.pixels += prev.len() as u64;
    }

    pub fn gated_sum(&self) -> u64 {
        self.gated_sum
    }

    pub fn finish(&self) -> f64 {
        if self.pixels == 0 {
            return 0.0;
        }
        self.gated_sum as f64 / (self.pixels as f64 * f64::from(MAX_INTENSITY))
    }
}

fn check_same_dims(prev: &LuminanceGrid, curr: &LuminanceGrid) -> Result<()> {
    if prev.width != curr.width || prev.height != curr.height {
        return Err(Error::InvalidInput(format!(
            "frame dimensions differ: {}x{} vs {}x{}",
            prev.width, prev.height, curr.width, curr.height
        )));
    }
    Ok(())
}

/// QoM of an already-downsampled frame pair, ignoring timestamps.
pub fn quantity_of_motion(prev: &LuminanceGrid, curr: &LuminanceGrid, noise_floor: u8) -> Result<f64> {
    check_same_dims(prev, curr)?;
    let mut acc = QomAccumulator::new(noise_floor);
    for y in 0..curr.height {
        acc.feed(prev.row(y), curr.row(y));
    }
    Ok(acc.finish())
}

/// QoM between two full-resolution frames. Both are mean-pooled by
/// `cfg.downsample_factor` before differencing.
pub fn compute_qom(
    prev: &LuminanceGrid,
    curr: &LuminanceGrid,
    cfg: &MotionConfig,
    frame_index: u64,
) -> Result<MotionSample> {
    check_same_dims(prev, curr)?;
    if curr.timestamp_us <= prev.timestamp_us {
        return Err(Error::InvalidInput(format!(
            "frame timestamps must increase: {} then {}",
            prev.timestamp_us, curr.timestamp_us
        )));
    }
    let qom = if cfg.downsample_factor > 1 {
        quantity_of_motion(
            &prev.downsample(cfg.downsample_factor)?,
            &curr.downsample(cfg.downsample_factor)?,
            cfg.noise_floor,
        )?
    } else {
        quantity_of_motion(prev, curr, cfg.noise_floor)?
    };
    Ok(MotionSample {
        qom,
        timestamp: curr.timestamp_us,
        frame_index,
    })
}

/// Smallest integer gate that brings the mean QoM over consecutive pairs of a
/// still-scene recording down to [`CALIBRATION_TOLERANCE`], scaled by
/// `k_cal` (a safety margin; `1.0` returns the bare estimate).
pub fn calibrate_noise_floor(frames: &[LuminanceGrid], k_cal: f64) -> Result<u8> {
    if frames.len() < MIN_CALIBRATION_FRAMES {
        return Err(Error::InsufficientData {
            needed: MIN_CALIBRATION_FRAMES,
            got: frames.len(),
        });
    }
    if !(k_cal.is_finite() && k_cal > 0.0) {
        return Err(Error::InvalidInput(format!("k_cal must be positive, got {k_cal}")));
    }
    // Histogram of |d| over every pair; the gated sum for any ε is then a
    // suffix sum of d·count.
    let mut histogram = [0u64; 256];
    for pair in frames.windows(2) {
        check_same_dims(&pair[0], &pair[1])?;
        for (&a, &b) in pair[0].intensities.iter().zip(&pair[1].intensities) {
            histogram[usize::from(a.abs_diff(b))] += 1;
        }
    }
    let pairs = (frames.len() - 1) as f64;
    let pixels = frames[0].pixel_count() as f64;
    let scale = pairs * pixels * f64::from(MAX_INTENSITY);

    let mut suffix = [0u64; 257];
    for d in (0..256).rev() {
        suffix[d] = suffix[d + 1] + d as u64 * histogram[d];
    }
    let epsilon = (0..=255usize)
        .find(|&eps| suffix[eps] as f64 / scale <= CALIBRATION_TOLERANCE)
        .unwrap_or(255);
    Ok((epsilon as f64 * k_cal).ceil().min(255.0) as u8)
}

/// Stateful front end: downsamples, differences against the previous frame
/// and numbers the resulting samples.
#[derive(Debug, Clone)]
pub struct MotionAnalyzer {
    cfg: MotionConfig,
    prev: Option<LuminanceGrid>,
    frames_seen: u64,
}

impl MotionAnalyzer {
    pub fn new(cfg: MotionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prev: None,
            frames_seen: 0,
        })
    }

    pub fn config(&self) -> &MotionConfig {
        &self.cfg
    }

    pub fn set_noise_floor(&mut self, noise_floor: u8) {
        self.cfg.noise_floor = noise_floor;
    }

    /// Returns `None` for the first frame, which has nothing to difference against.
    pub fn push(&mut self, frame: LuminanceGrid) -> Result<Option<MotionSample>> {
        let frame = frame.downsample(self.cfg.downsample_factor)?;
        let index = self.frames_seen;
        let sample = match &self.prev {
            Some(prev) => {
                check_same_dims(prev, &frame)?;
                if frame.timestamp_us <= prev.timestamp_us {
                    return Err(Error::InvalidInput(format!(
                        "frame timestamps must increase: {} then {}",
                        prev.timestamp_us, frame.timestamp_us
                    )));
                }
                Some(MotionSample {
                    qom: quantity_of_motion(prev, &frame, self.cfg.noise_floor)?,
                    timestamp: frame.timestamp_us,
                    frame_index: index,
                })
            }
            None => None,
        };
        self.prev = Some(frame);
        self.frames_seen += 1;
        Ok(sample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize, v: Vec<u8>, t: u64) -> LuminanceGrid {
        LuminanceGrid::new(w, h, v, t).unwrap()
    }

    fn cfg(eps: u8) -> MotionConfig {
        MotionConfig {
            noise_floor: eps,
            downsample_factor: 1,
        }
    }

    #[test]
    fn luminance_of_solid_colors() {
        let white = to_luminance(&RgbFrame::solid(3, 2, [255, 255, 255], 0)).unwrap();
        assert!(white.intensities().iter().all(|&v| v == 255));
        let black = to_luminance(&RgbFrame::solid(3, 2, [0, 0, 0], 0)).unwrap();
        assert!(black.intensities().iter().all(|&v| v == 0));
        let expected_red = (0.299f64 * 255.0).round() as u8;
        assert_eq!(expected_red, 76);
        let red = to_luminance(&RgbFrame::solid(3, 2, [255, 0, 0], 0)).unwrap();
        assert!(red.intensities().iter().all(|&v| v == expected_red));
    }

    #[test]
    fn zero_dimension_frame_is_rejected() {
        let frame = RgbFrame::solid(0, 4, [1, 2, 3], 0);
        assert!(matches!(to_luminance(&frame), Err(Error::InvalidInput(_))));
        assert!(LuminanceGrid::new(2, 0, vec![], 0).is_err());
        assert!(LuminanceGrid::new(2, 2, vec![0; 3], 0).is_err());
    }

    #[test]
    fn qom_identities() {
        let a = grid(2, 2, vec![7, 8, 9, 10], 0);
        let b = grid(2, 2, vec![7, 8, 9, 10], 1);
        assert_eq!(compute_qom(&a, &b, &cfg(3), 1).unwrap().qom, 0.0);

        let zeros = grid(2, 2, vec![0; 4], 0);
        let full = grid(2, 2, vec![255; 4], 1);
        assert_eq!(compute_qom(&zeros, &full, &cfg(0), 1).unwrap().qom, 1.0);

        let half = grid(2, 2, vec![255, 255, 0, 0], 1);
        assert_eq!(compute_qom(&zeros, &half, &cfg(0), 1).unwrap().qom, 0.5);

        let hundred = grid(2, 2, vec![100; 4], 0);
        let ten_more = grid(2, 2, vec![110; 4], 1);
        assert_eq!(compute_qom(&hundred, &ten_more, &cfg(20), 1).unwrap().qom, 0.0);
    }

    #[test]
    fn qom_matches_per_pixel_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<u8> = (0..64).map(|_| rng.random()).collect();
        let b: Vec<u8> = (0..64).map(|_| rng.random()).collect();
        let mut total = 0u64;
        for i in 0..64 {
            let d = (i32::from(a[i]) - i32::from(b[i])).unsigned_abs() as u64;
            if d >= 8 {
                total += d;
            }
        }
        let expected = total as f64 / (64.0 * 255.0);
        let got = compute_qom(&grid(8, 8, a, 0), &grid(8, 8, b, 1), &cfg(8), 1).unwrap();
        assert_eq!(got.qom, expected);
    }

    #[test]
    fn dimension_mismatch_and_time_order() {
        let a = grid(2, 2, vec![0; 4], 0);
        let b = grid(4, 1, vec![0; 4], 1);
        assert!(compute_qom(&a, &b, &cfg(0), 1).is_err());
        let c = grid(2, 2, vec![0; 4], 0);
        assert!(compute_qom(&a, &c, &cfg(0), 1).is_err());
    }

    #[test]
    fn downsample_mean_pools_with_partial_edges() {
        let g = grid(3, 2, vec![0, 10, 100, 20, 30, 200], 5);
        let d = g.downsample(2).unwrap();
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.intensities(), &[15, 150]);
        assert_eq!(d.timestamp_us, 5);
    }

    #[test]
    fn calibration_still_scene_needs_no_gate() {
        let frames: Vec<_> = (0..30).map(|t| grid(4, 4, vec![90; 16], t)).collect();
        assert_eq!(calibrate_noise_floor(&frames, 1.0).unwrap(), 0);
    }

    #[test]
    fn calibration_requires_thirty_frames() {
        let frames: Vec<_> = (0..10).map(|t| grid(4, 4, vec![90; 16], t)).collect();
        assert!(matches!(
            calibrate_noise_floor(&frames, 1.0),
            Err(Error::InsufficientData { needed: 30, got: 10 })
        ));
    }

    /// Brute-force scan: try every ε and re-gate every pair with the plain
    /// QoM definition.
    fn scan_noise_floor(frames: &[LuminanceGrid]) -> u8 {
        for eps in 0..=255u8 {
            let mut total = 0.0;
            for pair in frames.windows(2) {
                let n = pair[0].pixel_count() as f64;
                let mut s = 0.0;
                for (&a, &b) in pair[0].intensities().iter().zip(pair[1].intensities()) {
                    let d = (f64::from(a) - f64::from(b)).abs();
                    if d >= f64::from(eps) {
                        s += d;
                    }
                }
                total += s / (n * 255.0);
            }
            if total / (frames.len() - 1) as f64 <= CALIBRATION_TOLERANCE {
                return eps;
            }
        }
        255
    }

    #[test]
    fn calibration_of_uniform_five_count_noise() {
        // Random walk whose per-frame step is uniform in [-5, 5].
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut level = vec![128i32; 64];
        let mut frames = Vec::new();
        for t in 0..40u64 {
            frames.push(grid(8, 8, level.iter().map(|&v| v as u8).collect(), t));
            for v in level.iter_mut() {
                *v = (*v + rng.random_range(-5..=5)).clamp(0, 255);
            }
        }
        assert_eq!(scan_noise_floor(&frames), 6);
        assert_eq!(calibrate_noise_floor(&frames, 1.0).unwrap(), 6);
        assert_eq!(calibrate_noise_floor(&frames, 1.5).unwrap(), 9);
    }

    #[test]
    fn analyzer_numbers_frames() {
        let mut an = MotionAnalyzer::new(cfg(0)).unwrap();
        assert!(an.push(grid(2, 2, vec![0; 4], 0)).unwrap().is_none());
        let s = an.push(grid(2, 2, vec![255; 4], 33)).unwrap().unwrap();
        assert_eq!((s.qom, s.frame_index, s.timestamp), (1.0, 1, 33));
        let s = an.push(grid(2, 2, vec![255; 4], 66)).unwrap().unwrap();
        assert_eq!((s.qom, s.frame_index), (0.0, 2));
    }
}
