//! Review state for a candidate pool: an append-only decision log beside
//! the pool file, replayed on open.
//!
//! The log for `pool.jsonl` is `pool.decisions.jsonl`, one
//! `{"candidate_id", "action", "reviewer", "timestamp"}` object per line.
//! Each decision is written with a single `write` call on an append-mode
//! file, so a killed process leaves at most one partial trailing line,
//! which replay discards.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{load_pool, BenchError, BenchmarkCandidate, Subset};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
    #[error("pool: {0}")]
    Pool(#[from] BenchError),
    #[error("decision log {}:{line}: {message}", path.display())]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("storage error on {}: {source}", path.display())]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Kept,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewAction {
    Keep,
    Reject,
}

impl ReviewAction {
    pub fn status(self) -> ReviewStatus {
        match self {
            Self::Keep => ReviewStatus::Kept,
            Self::Reject => ReviewStatus::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub candidate_id: String,
    pub action: ReviewAction,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetProgress {
    pub total: usize,
    pub kept: usize,
    pub rejected: usize,
    pub pending: usize,
}

pub type ReviewProgress = BTreeMap<Subset, SubsetProgress>;

/// Returns the pool with the last decision per candidate applied. Decisions
/// for unknown ids are ignored.
pub fn apply_decisions(pool: &[BenchmarkCandidate], decisions: &[ReviewDecision]) -> Vec<BenchmarkCandidate> {
    let mut out = pool.to_vec();
    let index: HashMap<&str, usize> = pool
        .iter()
        .enumerate()
        .map(|(i, c)| (c.candidate_id.as_str(), i))
        .collect();
    for d in decisions {
        if let Some(&i) = index.get(d.candidate_id.as_str()) {
            out[i].review_status = d.action.status();
        }
    }
    out
}

pub fn decision_log_path(pool_path: &Path) -> PathBuf {
    let stem = pool_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pool".into());
    pool_path.with_file_name(format!("{stem}.decisions.jsonl"))
}

/// Reads a decision log. A final line without a trailing newline that fails
/// to parse is treated as a torn write and dropped.
pub fn read_decision_log(path: &Path) -> Result<Vec<ReviewDecision>, ReviewError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(ReviewError::Storage {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let text = String::from_utf8_lossy(&bytes);
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split('\n').collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let is_tail = i == lines.len() - 1 && !complete;
        match serde_json::from_str::<ReviewDecision>(line) {
            Ok(d) => out.push(d),
            Err(_) if is_tail => log::warn!("dropping torn final line of {}", path.display()),
            Err(e) => {
                return Err(ReviewError::CorruptLog {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Immutable view of the pool with resolved statuses.
#[derive(Debug, Clone)]
pub struct ReviewSnapshot {
    candidates: Arc<Vec<BenchmarkCandidate>>,
    index: Arc<HashMap<String, usize>>,
    statuses: Vec<ReviewStatus>,
}

impl ReviewSnapshot {
    fn new(candidates: Vec<BenchmarkCandidate>) -> Self {
        let index = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.candidate_id.clone(), i))
            .collect();
        let statuses = candidates.iter().map(|c| c.review_status).collect();
        Self {
            candidates: Arc::new(candidates),
            index: Arc::new(index),
            statuses,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn status(&self, candidate_id: &str) -> Option<ReviewStatus> {
        self.index.get(candidate_id).map(|&i| self.statuses[i])
    }

    /// Candidates with their current status, in candidate-id order.
    pub fn resolved(&self) -> Vec<BenchmarkCandidate> {
        self.candidates
            .iter()
            .zip(&self.statuses)
            .map(|(c, &s)| BenchmarkCandidate {
                review_status: s,
                ..c.clone()
            })
            .collect()
    }

    /// One page of a subset. Rejected candidates are omitted unless
    /// `include_rejected` is set.
    pub fn page(
        &self,
        subset: Subset,
        offset: usize,
        limit: usize,
        include_rejected: bool,
    ) -> (usize, Vec<BenchmarkCandidate>) {
        let matching: Vec<BenchmarkCandidate> = self
            .candidates
            .iter()
            .zip(&self.statuses)
            .filter(|(c, &s)| c.proposed_subset == subset && (include_rejected || s != ReviewStatus::Rejected))
            .map(|(c, &s)| BenchmarkCandidate {
                review_status: s,
                ..c.clone()
            })
            .collect();
        let total = matching.len();
        (total, matching.into_iter().skip(offset).take(limit).collect())
    }

    pub fn progress(&self) -> ReviewProgress {
        let mut out: ReviewProgress = Subset::REVIEW.iter().map(|&s| (s, SubsetProgress::default())).collect();
        for (c, &s) in self.candidates.iter().zip(&self.statuses) {
            let p = out.entry(c.proposed_subset).or_default();
            p.total += 1;
            match s {
                ReviewStatus::Pending => p.pending += 1,
                ReviewStatus::Kept => p.kept += 1,
                ReviewStatus::Rejected => p.rejected += 1,
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub candidate_id: String,
    pub status: ReviewStatus,
    /// False when the decision repeated the current status; nothing is logged.
    pub changed: bool,
}

/// Single writer over a pool's decision log.
#[derive(Debug)]
pub struct ReviewStore {
    pool_path: PathBuf,
    log_path: PathBuf,
    log: File,
    snapshot: ReviewSnapshot,
}

impl ReviewStore {
    pub fn open(pool_path: &Path) -> Result<Self, ReviewError> {
        let mut pool = load_pool(pool_path)?;
        pool.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id));
        let log_path = decision_log_path(pool_path);
        let storage = |source| ReviewError::Storage {
            path: log_path.clone(),
            source,
        };
        let decisions = read_decision_log(&log_path)?;
        let mut snapshot = ReviewSnapshot::new(pool);
        for (n, d) in decisions.iter().enumerate() {
            let Some(&i) = snapshot.index.get(&d.candidate_id) else {
                return Err(ReviewError::CorruptLog {
                    path: log_path.clone(),
                    line: n + 1,
                    message: format!("unknown candidate {}", d.candidate_id),
                });
            };
            snapshot.statuses[i] = d.action.status();
        }
        // Cut a torn tail so the next append starts on a fresh line.
        if let Ok(bytes) = std::fs::read(&log_path) {
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
                let f = OpenOptions::new().write(true).open(&log_path).map_err(storage)?;
                f.set_len(keep as u64).map_err(storage)?;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(storage)?;
        Ok(Self {
            pool_path: pool_path.to_path_buf(),
            log_path,
            log,
            snapshot,
        })
    }

    pub fn pool_path(&self) -> &Path {
        &self.pool_path
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn snapshot(&self) -> &ReviewSnapshot {
        &self.snapshot
    }

    /// Appends the decision to the log before updating state. Repeating the
    /// current status is a no-op and writes nothing.
    pub fn record(&mut self, d: &ReviewDecision) -> Result<DecisionOutcome, ReviewError> {
        let Some(&i) = self.snapshot.index.get(&d.candidate_id) else {
            return Err(ReviewError::UnknownCandidate(d.candidate_id.clone()));
        };
        let status = d.action.status();
        if self.snapshot.statuses[i] == status {
            return Ok(DecisionOutcome {
                candidate_id: d.candidate_id.clone(),
                status,
                changed: false,
            });
        }
        let mut line = serde_json::to_vec(d).expect("decision serializes");
        line.push(b'\n');
        self.log
            .write_all(&line)
            .and_then(|_| self.log.flush())
            .map_err(|source| ReviewError::Storage {
                path: self.log_path.clone(),
                source,
            })?;
        self.snapshot.statuses[i] = status;
        Ok(DecisionOutcome {
            candidate_id: d.candidate_id.clone(),
            status,
            changed: true,
        })
    }
}
