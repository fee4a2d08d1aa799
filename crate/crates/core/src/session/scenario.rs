//! The scripted interplay scenario: synthetic camera frames and a
//! trombone-like audio part, run offline through the full pipeline.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::render::{action_channel, block_for_timestamp, AudioProcessor};
use crate::audio::wav::MonoAudio;
use crate::audio::{ChainSpec, ProcessingChain};
use crate::config::{EngineConfig, SessionConfigs};
use crate::error::{Error, Result, ValidationErrors, ValidationKind};
use crate::mapping::MappingConfig;
use crate::motion::{calibrate_noise_floor, LuminanceGrid, MotionAnalyzer, MotionConfig};
use crate::record::EnvelopeSample;
use crate::score::parse_score;
use crate::video::frame_timestamp;

use super::logfile::{LogHeader, SessionLog};
use super::Recorder;

pub const ASSET_FILES: [&str; 5] = ["script.json", "score.json", "mapping.json", "chain.json", "engine.json"];

const BUNDLED: [&str; 5] = [
    include_str!("../../assets/scenario/script.json"),
    include_str!("../../assets/scenario/score.json"),
    include_str!("../../assets/scenario/mapping.json"),
    include_str!("../../assets/scenario/chain.json"),
    include_str!("../../assets/scenario/engine.json"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub fundamental_hz: f64,
    /// Relative amplitudes of the harmonics, starting at the fundamental.
    pub partials: Vec<f64>,
    pub amplitude: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
    pub room_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: String,
    pub duration_s: f64,
    /// Per-frame QoM targets, cycled.
    pub qom: Vec<f64>,
    pub playing: bool,
    #[serde(default)]
    pub burst: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// Still frames ahead of the performance, used for noise calibration.
    pub preroll_s: f64,
    pub lo: u8,
    pub hi: u8,
    pub noise: u8,
    pub voice: Voice,
    pub segments: Vec<Segment>,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<()> {
        let mut errs = ValidationErrors::default();
        if self.width == 0 || self.height == 0 {
            errs.push("width", ValidationKind::Range, "frame must be at least 1x1");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            errs.push("fps", ValidationKind::Range, "fps must be > 0");
        }
        if self.lo >= self.hi {
            errs.push("lo", ValidationKind::Range, "lo must be below hi");
        }
        if self.segments.is_empty() {
            errs.push("segments", ValidationKind::Structure, "at least one segment");
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.qom.is_empty() || s.qom.iter().any(|q| !(0.0..=1.0).contains(q)) {
                errs.push(format!("segments[{i}].qom"), ValidationKind::Range, "qom targets in [0, 1], at least one");
            }
            if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
                errs.push(format!("segments[{i}].duration_s"), ValidationKind::Range, "duration must be > 0");
            }
        }
        errs.into_result().map_err(Error::from)
    }

    pub fn preroll_frames(&self) -> usize {
        (self.preroll_s * self.fps).round() as usize
    }

    fn segment_frames(&self, s: &Segment) -> usize {
        (s.duration_s * self.fps).round() as usize
    }

    pub fn total_frames(&self) -> usize {
        self.preroll_frames() + self.segments.iter().map(|s| self.segment_frames(s)).sum::<usize>()
    }

    pub fn duration_s(&self) -> f64 {
        self.total_frames() as f64 / self.fps
    }

    /// Same script with every burst replaced by the motion of the segment
    /// before it.
    pub fn flattened(&self) -> Self {
        let mut out = self.clone();
        let mut last_calm = vec![0.0];
        for seg in &mut out.segments {
            if seg.burst {
                seg.qom = last_calm.clone();
                seg.burst = false;
            } else {
                last_calm = seg.qom.clone();
            }
        }
        out
    }

    /// Segment index and label for each performance frame.
    fn frame_plan(&self) -> Vec<(usize, f64)> {
        let mut plan = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            for k in 0..self.segment_frames(seg) {
                plan.push((i, seg.qom[k % seg.qom.len()]));
            }
        }
        plan
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioAssets {
    pub script: ScenarioScript,
    pub configs: SessionConfigs,
}

impl ScenarioAssets {
    /// The assets compiled into the library.
    pub fn bundled() -> Result<Self> {
        Self::from_texts(BUNDLED)
    }

    /// Loads the five asset files from `dir`, reporting every missing one.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut errs = ValidationErrors::default();
        for f in ASSET_FILES {
            let p = dir.join(f);
            if !p.is_file() {
                errs.push(p.display().to_string(), ValidationKind::Structure, "missing scenario asset");
            }
        }
        if !errs.is_empty() {
            return Err(errs.into());
        }
        let read =
            |f: &str| std::fs::read_to_string(dir.join(f)).map_err(|e| Error::io(format!("reading {f}"), e));
        Self::from_texts([
            &read(ASSET_FILES[0])?,
            &read(ASSET_FILES[1])?,
            &read(ASSET_FILES[2])?,
            &read(ASSET_FILES[3])?,
            &read(ASSET_FILES[4])?,
        ])
    }

    fn from_texts([script, score, mapping, chain, engine]: [&str; 5]) -> Result<Self> {
        let script: ScenarioScript = serde_json::from_str(script)?;
        script.validate()?;
        let chain = ChainSpec::parse(chain)?;
        let score = parse_score(score, Some(&chain))?;
        let mapping = MappingConfig::parse(mapping)?;
        let engine = EngineConfig::parse(engine)?;
        Ok(Self {
            script,
            configs: SessionConfigs::new(engine, score, mapping, chain)?,
        })
    }

    /// Writes the assets out, e.g. to edit them and rerun from a directory.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let docs = [
            serde_json::to_string_pretty(&self.script)?,
            serde_json::to_string_pretty(&self.configs.score)?,
            serde_json::to_string_pretty(&self.configs.mapping)?,
            serde_json::to_string_pretty(&self.configs.chain)?,
            serde_json::to_string_pretty(&self.configs.engine)?,
        ];
        for (name, doc) in ASSET_FILES.iter().zip(docs) {
            let p = dir.join(name);
            std::fs::write(&p, doc).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        Ok(())
    }
}

/// Frames for the whole script, preroll included. Each frame flips exactly
/// as many pixels between the two levels as its QoM target calls for, on
/// top of independent per-pixel noise.
pub fn synthesize_frames(script: &ScenarioScript, seed: u64) -> Result<Vec<LuminanceGrid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_edf4_a3e5);
    let n = script.width * script.height;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut high = vec![false; n];
    let mut cursor = 0usize;
    let swing = f64::from(script.hi - script.lo);
    let noise = i16::from(script.noise);

    let preroll = std::iter::repeat_n(0.0, script.preroll_frames());
    let targets = preroll.chain(script.frame_plan().into_iter().map(|(_, q)| q));
    let mut frames = Vec::with_capacity(script.total_frames());
    for (i, q) in targets.enumerate() {
        if i > 0 {
            let flips = ((q * n as f64 * 255.0 / swing).round() as usize).min(n);
            for k in 0..flips {
                let p = order[(cursor + k) % n];
                high[p] = !high[p];
            }
            cursor = (cursor + flips) % n;
        }
        let pixels = high
            .iter()
            .map(|&h| {
                let base = i16::from(if h { script.hi } else { script.lo });
                (base + rng.random_range(-noise..=noise)).clamp(0, 255) as u8
            })
            .collect();
        frames.push(LuminanceGrid::new(
            script.width,
            script.height,
            pixels,
            frame_timestamp(i as u64, script.fps),
        )?);
    }
    Ok(frames)
}

/// The performer's part: a brass-like harmonic tone during playing
/// segments, faint room noise elsewhere.
pub fn synthesize_audio(script: &ScenarioScript, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0d1_0a0d);
    let fs = f64::from(sample_rate);
    let v = &script.voice;
    let phases: Vec<f64> = v.partials.iter().map(|_| rng.random_range(0.0..TAU)).collect();
    let norm: f64 = v.partials.iter().sum::<f64>().max(1e-12);
    let len = (script.duration_s() * fs).round() as usize;

    // Gate per sample from segment boundaries.
    let mut spans = Vec::new();
    let mut t = script.preroll_frames() as f64 / script.fps;
    for seg in &script.segments {
        let d = (script.segment_frames(seg) as f64) / script.fps;
        if seg.playing {
            spans.push((t, t + d));
        }
        t += d;
    }
    let attack = (v.attack_ms * 1e-3 * fs).max(1.0);
    let release = (v.release_ms * 1e-3 * fs).max(1.0);
    let mut level = 0.0f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            let on = spans.iter().any(|&(a, b)| t >= a && t < b);
            level = if on {
                (level + 1.0 / attack).min(1.0)
            } else {
                (level - 1.0 / release).max(0.0)
            };
            let mut x = 0.0;
            if level > 0.0 {
                for (k, (&a, &ph)) in v.partials.iter().zip(&phases).enumerate() {
                    x += a * (TAU * v.fundamental_hz * (k + 1) as f64 * t + ph).sin();
                }
                x *= level * v.amplitude / norm;
            }
            x += v.room_noise * rng.random_range(-1.0..=1.0);
            x as f32
        })
        .collect()
}

pub struct ScenarioRun {
    pub log: SessionLog,
    pub log_bytes: Vec<u8>,
    pub noise_floor: u8,
    pub input: MonoAudio,
    pub output: MonoAudio,
}

impl ScenarioRun {
    pub fn trigger_count(&self) -> usize {
        self.log
            .records
            .iter()
            .filter(|r| matches!(r, crate::record::Record::Trigger(_)))
            .count()
    }
}

/// Runs the scenario offline: calibrate on the preroll, then tick the engine
/// once per frame while the audio chain processes the performer's part in
/// lockstep. Identical seeds give byte-identical logs.
pub fn run_scenario(assets: &ScenarioAssets, seed: u64) -> Result<ScenarioRun> {
    let script = &assets.script;
    let configs = assets.configs.clone().with_seed(seed);
    let frames = synthesize_frames(script, seed)?;
    let chain_spec = &configs.chain;
    let fs = chain_spec.sample_rate;
    let block = chain_spec.block_size;
    let input = synthesize_audio(script, fs, seed);

    let preroll = script.preroll_frames();
    let engine_cfg = &configs.engine;
    let noise_floor = if engine_cfg.calibrate {
        let n = engine_cfg.calibration_frames.min(preroll);
        calibrate_noise_floor(&frames[preroll - n..preroll], engine_cfg.k_cal)?
    } else {
        engine_cfg.motion.noise_floor
    };
    let mut analyzer = MotionAnalyzer::new(MotionConfig {
        noise_floor,
        ..engine_cfg.motion
    })?;

    let header = LogHeader::for_session(&configs, script.fps, "scenario");
    let mut rec = Recorder::new(&configs, &header, Vec::new())?;

    let (tx, rx) = action_channel(4096);
    let mut audio = AudioProcessor::new(ProcessingChain::new(chain_spec)?, rx);
    let mut output = vec![0.0f32; input.len()];
    let mut scratch_in = vec![0.0f32; block];
    let mut scratch_out = vec![0.0f32; block];
    let mut next_block = 0usize;
    let mut run_block = |k: usize, audio: &mut AudioProcessor, output: &mut [f32]| {
        let start = k * block;
        let end = (start + block).min(input.len());
        scratch_in.fill(0.0);
        scratch_in[..end - start].copy_from_slice(&input[start..end]);
        audio.process_block(&scratch_in, &mut scratch_out);
        output[start..end].copy_from_slice(&scratch_out[..end - start]);
    };
    let total_blocks = input.len().div_ceil(block);

    let plan = script.frame_plan();
    let start = preroll.saturating_sub(1);
    let mut last_segment = None;
    for (i, frame) in frames.into_iter().enumerate().skip(start) {
        let Some(m) = analyzer.push(frame)? else { continue };
        // Blocks that start before this frame; actions it produces land on
        // the next boundary, as in offline rendering.
        let due = block_for_timestamp(m.timestamp, fs, block) as usize;
        while next_block < total_blocks.min(due) {
            run_block(next_block, &mut audio, &mut output);
            next_block += 1;
        }
        rec.envelope(EnvelopeSample {
            envelope: audio.last_input_envelope(),
            timestamp: m.timestamp,
        })?;
        for r in rec.motion(m)? {
            if let Some(a) = r.audio_action() {
                tx.try_send(a)
                    .map_err(|_| Error::InvalidInput("audio action queue overflow".into()))?;
            }
        }
        let seg = plan[i - preroll].0;
        if last_segment != Some(seg) {
            rec.annotate(format!("segment {}: {}", seg, script.segments[seg].label))?;
            last_segment = Some(seg);
        }
    }
    while next_block < total_blocks {
        run_block(next_block, &mut audio, &mut output);
        next_block += 1;
    }

    let log_bytes = rec.finish()?;
    let log = SessionLog::read(log_bytes.as_slice())?;
    Ok(ScenarioRun {
        log,
        log_bytes,
        noise_floor,
        input: MonoAudio {
            sample_rate: fs,
            samples: input,
        },
        output: MonoAudio {
            sample_rate: fs,
            samples: output,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::quantity_of_motion;

    #[test]
    fn bundled_assets_parse() {
        let a = ScenarioAssets::bundled().unwrap();
        assert_eq!(a.configs.chain.units.len(), 4);
        assert!(a.script.preroll_frames() >= crate::motion::MIN_CALIBRATION_FRAMES);
    }

    #[test]
    fn synthesized_motion_hits_targets() {
        let a = ScenarioAssets::bundled().unwrap();
        let frames = synthesize_frames(&a.script, 3).unwrap();
        assert_eq!(frames.len(), a.script.total_frames());
        let pre = a.script.preroll_frames();
        let eps = calibrate_noise_floor(&frames[..pre], 1.0).unwrap();
        assert_eq!(eps, 2 * a.script.noise + 1);
        let plan = a.script.frame_plan();
        for (k, (_, target)) in plan.iter().enumerate() {
            let q = quantity_of_motion(&frames[pre + k - 1], &frames[pre + k], eps).unwrap();
            assert!((q - target).abs() < 0.01, "frame {k}: {q} vs {target}");
        }
    }

    #[test]
    fn missing_assets_are_listed() {
        let dir = std::env::temp_dir().join("vivo-no-such-scenario-dir");
        let err = ScenarioAssets::load(&dir).unwrap_err().to_string();
        for f in ASSET_FILES {
            assert!(err.contains(f), "{err}");
        }
    }

    #[test]
    fn scenario_output_matches_offline_render_of_its_log() {
        let a = ScenarioAssets::bundled().unwrap();
        let run = run_scenario(&a, 7).unwrap();
        assert_eq!(run.trigger_count(), 2);
        let trace = run.log.audio_trace();
        assert!(!trace.is_empty());
        let rendered = crate::audio::render::render_offline(&a.configs.chain, &run.input.samples, &trace).unwrap();
        assert_eq!(rendered, run.output.samples);
    }
}
