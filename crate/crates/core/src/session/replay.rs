use crate::config::SessionConfigs;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::record::Record;

use super::logfile::SessionLog;

/// First point where the re-derived trace departs from the log.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// Position among derived records.
    pub index: usize,
    pub logged: Option<Record>,
    pub replayed: Option<Record>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub ticks: u64,
    pub compared: usize,
    pub truncated: bool,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Re-feeds the logged inputs through a fresh engine and compares every
/// derived record field for field. Refuses to run on a digest mismatch.
pub fn replay(log: &SessionLog, configs: &SessionConfigs) -> Result<ReplayReport> {
    log.header.digests.compare(&configs.digests())?;
    if log.header.seed != configs.score.seed {
        return Err(Error::DigestMismatch {
            name: "seed".into(),
            logged: log.header.seed.to_string(),
            actual: configs.score.seed.to_string(),
        });
    }
    let mut engine = Engine::new(configs)?;
    let logged: Vec<&Record> = log.records.iter().filter(|r| r.is_derived()).collect();
    let mut replayed = Vec::with_capacity(logged.len());
    let mut ticks = 0;
    for rec in &log.records {
        if matches!(rec, Record::Motion(_)) {
            ticks += 1;
        }
        replayed.extend(engine.feed(rec)?);
    }
    let n = logged.len().max(replayed.len());
    let divergence = (0..n)
        .find(|&i| logged.get(i).copied() != replayed.get(i))
        .map(|index| Divergence {
            index,
            logged: logged.get(index).map(|r| (*r).clone()),
            replayed: replayed.get(index).cloned(),
        });
    Ok(ReplayReport {
        ticks,
        compared: n,
        truncated: log.is_truncated(),
        divergence,
    })
}
