//! Uncompressed grayscale frame-sequence files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "VIVORAW1"
//! width        u32
//! height       u32
//! frame_count  u32
//! fps          f64
//! frames       frame_count × width × height bytes, row-major
//! ```
//!
//! Frame `i` is stamped `round(i · 1e6 / fps)` microseconds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::motion::LuminanceGrid;

pub const MAGIC: &[u8; 8] = b"VIVORAW1";
const HEADER_LEN: usize = 8 + 4 * 3 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawVideoHeader {
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub fps: f64,
}

impl RawVideoHeader {
    pub fn frame_len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn timestamp_of(&self, index: u64) -> u64 {
        frame_timestamp(index, self.fps)
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(MAGIC);
        out[8..12].copy_from_slice(&self.width.to_le_bytes());
        out[12..16].copy_from_slice(&self.height.to_le_bytes());
        out[16..20].copy_from_slice(&self.frame_count.to_le_bytes());
        out[20..28].copy_from_slice(&self.fps.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8; HEADER_LEN]) -> Result<Self> {
        if &bytes[..8] != MAGIC {
            return Err(Error::InvalidInput("not a raw frame-sequence file (bad magic)".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Self {
            width: u32_at(8),
            height: u32_at(12),
            frame_count: u32_at(16),
            fps: f64::from_le_bytes(bytes[20..28].try_into().unwrap()),
        };
        if header.width == 0 || header.height == 0 {
            return Err(Error::InvalidInput("raw video has zero-sized frames".into()));
        }
        if !(header.fps.is_finite() && header.fps > 0.0) {
            return Err(Error::InvalidInput(format!("raw video fps must be positive, got {}", header.fps)));
        }
        Ok(header)
    }
}

pub fn frame_timestamp(index: u64, fps: f64) -> u64 {
    (index as f64 * 1e6 / fps).round() as u64
}

pub struct RawVideoReader<R> {
    header: RawVideoHeader,
    inner: R,
    next: u32,
}

impl RawVideoReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> RawVideoReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut bytes = [0u8; HEADER_LEN];
        inner
            .read_exact(&mut bytes)
            .map_err(|e| Error::io("reading raw video header", e))?;
        Ok(Self {
            header: RawVideoHeader::decode(&bytes)?,
            inner,
            next: 0,
        })
    }

    pub fn header(&self) -> RawVideoHeader {
        self.header
    }

    pub fn next_frame(&mut self) -> Result<Option<LuminanceGrid>> {
        if self.next >= self.header.frame_count {
            return Ok(None);
        }
        let mut buf = vec![0u8; self.header.frame_len()];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(format!("reading frame {}", self.next), e))?;
        let ts = self.header.timestamp_of(u64::from(self.next));
        self.next += 1;
        LuminanceGrid::new(self.header.width as usize, self.header.height as usize, buf, ts).map(Some)
    }
}

impl<R: Read> Iterator for RawVideoReader<R> {
    type Item = Result<LuminanceGrid>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

pub fn write_raw_video<W: Write>(mut out: W, fps: f64, frames: &[LuminanceGrid]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty frame sequence".into()))?;
    let header = RawVideoHeader {
        width: first.width() as u32,
        height: first.height() as u32,
        frame_count: frames.len() as u32,
        fps,
    };
    out.write_all(&header.encode())
        .map_err(|e| Error::io("writing raw video header", e))?;
    for (i, f) in frames.iter().enumerate() {
        if f.width() != first.width() || f.height() != first.height() {
            return Err(Error::InvalidInput(format!("frame {i} has different dimensions")));
        }
        out.write_all(f.intensities())
            .map_err(|e| Error::io("writing raw video frame", e))?;
    }
    out.flush().map_err(|e| Error::io("flushing raw video", e))
}

pub fn write_raw_video_file(path: impl AsRef<Path>, fps: f64, frames: &[LuminanceGrid]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_raw_video(BufWriter::new(file), fps, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_survive_write_and_read() {
        let frames: Vec<_> = (0..3u8)
            .map(|i| LuminanceGrid::new(3, 2, vec![i; 6], frame_timestamp(u64::from(i), 30.0)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_raw_video(&mut buf, 30.0, &frames).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 18);
        let reader = RawVideoReader::new(buf.as_slice()).unwrap();
        assert_eq!(reader.header().frame_count, 3);
        let back: Vec<_> = reader.collect::<Result<_>>().unwrap();
        assert_eq!(back, frames);
        assert_eq!(back[1].timestamp_us, 33_333);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(RawVideoReader::new(&b"NOTAVIDEO_______________________"[..]).is_err());
        let frames = vec![LuminanceGrid::new(2, 2, vec![1; 4], 0).unwrap()];
        let mut buf = Vec::new();
        write_raw_video(&mut buf, 25.0, &frames).unwrap();
        buf.truncate(buf.len() - 1);
        let mut reader = RawVideoReader::new(buf.as_slice()).unwrap();
        assert!(reader.next_frame().is_err());
    }
}
