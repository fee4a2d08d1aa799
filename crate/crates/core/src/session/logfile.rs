//! Line-delimited JSON session logs: one header line, then one record per
//! line, then a trailer. A log without a trailer is treated as truncated.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use log::{error, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigDigests, SessionConfigs};
use crate::error::{Error, Result};
use crate::audio::render::TimedAction;
use crate::record::Record;

pub const LOG_FORMAT: &str = "vivo-session/1";
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub session_id: String,
    pub seed: u64,
    pub sample_rate: u32,
    pub fps: f64,
    pub digests: ConfigDigests,
}

impl LogHeader {
    /// Header for `configs`. The session id is derived from `salt` and the
    /// digests, so offline runs get reproducible ids.
    pub fn for_session(configs: &SessionConfigs, fps: f64, salt: &str) -> Self {
        let digests = configs.digests();
        let mut h = Sha256::new();
        h.update(salt.as_bytes());
        h.update(configs.score.seed.to_le_bytes());
        h.update(serde_json::to_vec(&digests).expect("digests serialize"));
        Self {
            format: LOG_FORMAT.into(),
            session_id: hex::encode(&h.finalize()[..8]),
            seed: configs.score.seed,
            sample_rate: configs.chain.sample_rate,
            fps,
            digests,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trailer {
    End { timestamp: u64, records: u64 },
    Truncated { timestamp: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: LogHeader,
    pub records: Vec<Record>,
    pub trailer: Option<Trailer>,
}

impl SessionLog {
    /// Missing or explicit-truncation trailer.
    pub fn is_truncated(&self) -> bool {
        !matches!(self.trailer, Some(Trailer::End { .. }))
    }

    pub fn read(reader: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let header_line = match lines.next() {
            Some((_, line)) => line.map_err(|e| Error::io("reading log header", e))?,
            None => return Err(Error::Log("empty log: missing header".into())),
        };
        let header: LogHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Log(format!("line 1: bad header: {e}")))?;
        if header.format != LOG_FORMAT {
            return Err(Error::Log(format!("unsupported log format `{}`", header.format)));
        }
        let mut records = Vec::new();
        let mut trailer = None;
        let mut last_ts = 0;
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(format!("reading log line {}", i + 1), e))?;
            if line.trim().is_empty() {
                continue;
            }
            if trailer.is_some() {
                return Err(Error::Log(format!("line {}: record after trailer", i + 1)));
            }
            match serde_json::from_str::<Record>(&line) {
                Ok(rec) => {
                    if rec.timestamp() < last_ts {
                        return Err(Error::Log(format!(
                            "line {}: timestamp {} precedes {last_ts}",
                            i + 1,
                            rec.timestamp()
                        )));
                    }
                    last_ts = rec.timestamp();
                    records.push(rec);
                }
                Err(rec_err) => match serde_json::from_str::<Trailer>(&line) {
                    Ok(t) => trailer = Some(t),
                    // A torn final line is what a crash leaves behind.
                    Err(_) => return Err(Error::Log(format!("line {}: {rec_err}", i + 1))),
                },
            }
        }
        Ok(Self {
            header,
            records,
            trailer,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read(f)
    }

    /// Serializes the whole log, trailer included.
    /// Every audio-affecting record, in log order, as a render trace.
    pub fn audio_trace(&self) -> Vec<TimedAction> {
        self.records
            .iter()
            .filter_map(|r| {
                r.audio_action().map(|action| TimedAction {
                    timestamp: r.timestamp(),
                    action,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = SessionWriter::new(Vec::new(), &self.header).expect("writing to memory");
        for r in &self.records {
            w.append(r).expect("records are ordered");
        }
        w.finish().expect("writing to memory")
    }
}

/// Append-only writer. Rejects out-of-order records; flushes at least once
/// per [`FLUSH_INTERVAL`] of wall time; on an I/O failure it tries to leave
/// a truncation marker and refuses further writes.
pub struct SessionWriter<W: Write> {
    out: BufWriter<W>,
    last_ts: u64,
    count: u64,
    last_flush: Instant,
    flush_interval: Duration,
    failed: bool,
}

impl<W: Write> SessionWriter<W> {
    pub fn new(out: W, header: &LogHeader) -> Result<Self> {
        let mut w = Self {
            out: BufWriter::new(out),
            last_ts: 0,
            count: 0,
            last_flush: Instant::now(),
            flush_interval: FLUSH_INTERVAL,
            failed: false,
        };
        let line = serde_json::to_string(header)?;
        w.write_line(&line)?;
        w.flush()?;
        Ok(w)
    }

    pub fn with_flush_interval(mut self, interval: Duration) -> Self {
        self.flush_interval = interval;
        self
    }

    pub fn records_written(&self) -> u64 {
        self.count
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        if self.failed {
            return Err(Error::Log("log writer failed earlier; log is truncated".into()));
        }
        let res = self
            .out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.fail(&e);
            return Err(Error::io("writing session log", e));
        }
        Ok(())
    }

    fn fail(&mut self, e: &std::io::Error) {
        self.failed = true;
        error!("session log write failed: {e}; marking log truncated");
        let marker = Trailer::Truncated {
            timestamp: self.last_ts,
            reason: e.to_string(),
        };
        let line = serde_json::to_string(&marker).expect("trailer serializes");
        let _ = writeln!(self.out, "{line}");
        let _ = self.out.flush();
    }

    pub fn append(&mut self, record: &Record) -> Result<()> {
        let ts = record.timestamp();
        if ts < self.last_ts {
            warn!("rejecting out-of-order log record at {ts} (last {})", self.last_ts);
            return Err(Error::InvalidInput(format!(
                "record timestamp {ts} precedes last logged timestamp {}",
                self.last_ts
            )));
        }
        let line = serde_json::to_string(record)?;
        self.write_line(&line)?;
        self.last_ts = ts;
        self.count += 1;
        if self.last_flush.elapsed() >= self.flush_interval {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Err(e) = self.out.flush() {
            self.fail(&e);
            return Err(Error::io("flushing session log", e));
        }
        self.last_flush = Instant::now();
        Ok(())
    }

    /// Writes the trailer and hands back the sink.
    pub fn finish(mut self) -> Result<W> {
        let end = Trailer::End {
            timestamp: self.last_ts,
            records: self.count,
        };
        let line = serde_json::to_string(&end)?;
        self.write_line(&line)?;
        self.flush()?;
        self.out
            .into_inner()
            .map_err(|e| Error::io("closing session log", e.into_error()))
    }
}
