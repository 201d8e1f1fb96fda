//! Transaction-id tracking for idempotency and replay protection.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use crate::envelope::{EnvelopeClaims, TransactionId};

pub const DEFAULT_FRESHNESS_WINDOW_SECS: f64 = 300.0;
pub const DEFAULT_RETENTION_SECS: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayVerdict {
    Accepted,
    /// The transaction id was already processed.
    Duplicate,
    /// The envelope timestamp is outside the freshness window.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub freshness_window: f64,
    pub retention: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            freshness_window: DEFAULT_FRESHNESS_WINDOW_SECS,
            retention: DEFAULT_RETENTION_SECS,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayConfigError {
    #[error("retention ({retention}s) must be at least the freshness window ({freshness_window}s)")]
    RetentionTooShort { freshness_window: f64, retention: f64 },
    #[error("windows must be finite and non-negative")]
    NotFinite,
    #[error("replay snapshot: {0}")]
    Snapshot(#[from] std::io::Error),
}

impl ReplayConfig {
    pub fn new(freshness_window: f64, retention: f64) -> Result<Self, ReplayConfigError> {
        if !(freshness_window.is_finite() && retention.is_finite())
            || freshness_window < 0.0
            || retention < 0.0
        {
            return Err(ReplayConfigError::NotFinite);
        }
        if retention < freshness_window {
            return Err(ReplayConfigError::RetentionTooShort {
                freshness_window,
                retention,
            });
        }
        Ok(ReplayConfig {
            freshness_window,
            retention,
        })
    }
}

#[derive(Default)]
struct Seen {
    first_seen: HashMap<TransactionId, f64>,
    // Insertion order, for eviction. Entries may be stale if the clock stepped back.
    order: VecDeque<(f64, TransactionId)>,
}

impl Seen {
    fn evict(&mut self, now: f64, retention: f64) {
        while let Some((at, _)) = self.order.front() {
            if now - at <= retention {
                break;
            }
            let (at, id) = self.order.pop_front().expect("front exists");
            if self.first_seen.get(&id) == Some(&at) {
                self.first_seen.remove(&id);
            }
        }
    }
}

/// Linearizable set of seen transaction ids. Check and insert happen under one lock.
pub struct ReplayGuard {
    config: ReplayConfig,
    seen: Mutex<Seen>,
    snapshot: Option<Mutex<File>>,
}

impl std::fmt::Debug for ReplayGuard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayGuard")
            .field("config", &self.config)
            .field("persistent", &self.snapshot.is_some())
            .finish_non_exhaustive()
    }
}

impl ReplayGuard {
    pub fn new(config: ReplayConfig) -> Self {
        ReplayGuard {
            config,
            seen: Mutex::new(Seen::default()),
            snapshot: None,
        }
    }

    /// Opens (or creates) an append-only snapshot file of `first_seen txn_id`
    /// lines and preloads every entry still inside retention at `now`.
    pub fn with_snapshot(
        config: ReplayConfig,
        path: impl AsRef<Path>,
        now: f64,
    ) -> Result<Self, ReplayConfigError> {
        let path = path.as_ref();
        let mut seen = Seen::default();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                let Some((at, id)) = line.split_once(' ') else { continue };
                let (Ok(at), Ok(id)) = (at.parse::<f64>(), TransactionId::parse(id)) else {
                    continue;
                };
                if now - at <= config.retention {
                    seen.first_seen.insert(id.clone(), at);
                    seen.order.push_back((at, id));
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ReplayGuard {
            config,
            seen: Mutex::new(seen),
            snapshot: Some(Mutex::new(file)),
        })
    }

    pub fn config(&self) -> ReplayConfig {
        self.config
    }

    pub fn check_and_record(&self, claims: &EnvelopeClaims, now: f64) -> ReplayVerdict {
        self.check_id(&claims.transaction_id, claims.timestamp as f64, now)
    }

    pub fn check_id(&self, id: &TransactionId, timestamp: f64, now: f64) -> ReplayVerdict {
        let mut seen = self.seen.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
        seen.evict(now, self.config.retention);
        if seen.first_seen.contains_key(id) {
            return ReplayVerdict::Duplicate;
        }
        if (now - timestamp).abs() > self.config.freshness_window {
            return ReplayVerdict::Stale;
        }
        seen.first_seen.insert(id.clone(), now);
        seen.order.push_back((now, id.clone()));
        if let Some(file) = &self.snapshot {
            let mut file = file.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
            if let Err(e) = writeln!(file, "{now} {id}") {
                log::warn!("replay snapshot append failed: {e}");
            }
        }
        ReplayVerdict::Accepted
    }

    pub fn len(&self) -> usize {
        self.seen
            .lock()
            .unwrap_or_else(std::sync::PoisonError::into_inner)
            .first_seen
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    const NOW: f64 = 1_760_000_000.0;

    fn guard() -> ReplayGuard {
        ReplayGuard::new(ReplayConfig::default())
    }

    #[test]
    fn fresh_then_duplicate() {
        let g = guard();
        let id = TransactionId::new_random();
        assert_eq!(g.check_id(&id, NOW, NOW), ReplayVerdict::Accepted);
        assert_eq!(g.check_id(&id, NOW, NOW + 1.0), ReplayVerdict::Duplicate);
    }

    #[test]
    fn ten_minutes_old_is_stale() {
        let g = guard();
        let id = TransactionId::new_random();
        assert_eq!(g.check_id(&id, NOW - 600.0, NOW), ReplayVerdict::Stale);
        // edge of the window is still fresh
        assert_eq!(g.check_id(&id, NOW - 300.0, NOW), ReplayVerdict::Accepted);
        // stale messages from the future too
        let id = TransactionId::new_random();
        assert_eq!(g.check_id(&id, NOW + 301.0, NOW), ReplayVerdict::Stale);
    }

    #[test]
    fn stale_attempt_does_not_consume_id() {
        let g = guard();
        let id = TransactionId::new_random();
        assert_eq!(g.check_id(&id, NOW - 600.0, NOW), ReplayVerdict::Stale);
        assert!(g.is_empty());
    }

    #[test]
    fn eviction_after_retention() {
        let g = ReplayGuard::new(ReplayConfig::new(10.0, 20.0).unwrap());
        let id = TransactionId::new_random();
        assert_eq!(g.check_id(&id, NOW, NOW), ReplayVerdict::Accepted);
        assert_eq!(g.check_id(&id, NOW + 15.0, NOW + 20.0), ReplayVerdict::Duplicate);
        assert_eq!(g.check_id(&id, NOW + 15.0, NOW + 21.0), ReplayVerdict::Accepted);
    }

    #[test]
    fn retention_must_cover_window() {
        assert!(matches!(
            ReplayConfig::new(300.0, 10.0),
            Err(ReplayConfigError::RetentionTooShort { .. })
        ));
        assert!(ReplayConfig::new(f64::NAN, 10.0).is_err());
    }

    #[test]
    fn concurrent_callers_accept_once() {
        let g = Arc::new(guard());
        let id = TransactionId::new_random();
        let accepted: usize = (0..8)
            .map(|_| {
                let g = Arc::clone(&g);
                let id = id.clone();
                std::thread::spawn(move || {
                    (0..100)
                        .filter(|_| g.check_id(&id, NOW, NOW) == ReplayVerdict::Accepted)
                        .count()
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .sum();
        assert_eq!(accepted, 1);
    }

    #[test]
    fn snapshot_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seen.log");
        let id = TransactionId::new_random();
        {
            let g = ReplayGuard::with_snapshot(ReplayConfig::default(), &path, NOW).unwrap();
            assert_eq!(g.check_id(&id, NOW, NOW), ReplayVerdict::Accepted);
        }
        let g = ReplayGuard::with_snapshot(ReplayConfig::default(), &path, NOW + 5.0).unwrap();
        assert_eq!(g.check_id(&id, NOW, NOW + 5.0), ReplayVerdict::Duplicate);
        // past retention the entry is not reloaded
        let later = NOW + DEFAULT_RETENTION_SECS + 1.0;
        let g = ReplayGuard::with_snapshot(ReplayConfig::default(), &path, later).unwrap();
        assert!(g.is_empty());
    }
}
