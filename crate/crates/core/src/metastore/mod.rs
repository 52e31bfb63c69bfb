//! Job metadata: phase state machine, chunk assignments and completion sets.
//!
//! All job metadata lives under string keys with a common per-job prefix:
//!
//! | key                          | value                        |
//! |------------------------------|------------------------------|
//! | `job:{job_id}:state`         | JSON [`JobState`]            |
//! | `job:{job_id}:chunk:{m}`     | JSON [`ChunkAssignment`]     |
//! | `job:{job_id}:done:{phase}`  | set of worker ids            |
//!
//! [`MetaStore`] implements the state machine on top of any [`KvBackend`];
//! the backends only supply atomic primitives.

mod memory;
mod redis;

use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::JobConfig;
use crate::storage::{ByteRange, ObjectPath};

pub use self::memory::{KvValue, MemoryKv};
pub use self::redis::RedisKv;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetaError {
    #[error("no such job `{0}`")]
    NoSuchJob(String),
    #[error("job `{0}` already exists")]
    JobExists(String),
    #[error("illegal transition {from} -> {to} for job `{job_id}`")]
    IllegalTransition { job_id: String, from: Phase, to: Phase },
    #[error("no chunk assignment for job `{job_id}` mapper {mapper_id}")]
    NoSuchAssignment { job_id: String, mapper_id: u32 },
    #[error("job `{job_id}` is in {actual}, not {expected}")]
    PhaseMismatch {
        job_id: String,
        expected: Phase,
        actual: Phase,
    },
    #[error("metastore unavailable: {0}")]
    Unavailable(String),
    #[error("corrupt metadata under `{key}`: {reason}")]
    Corrupt { key: String, reason: String },
}

/// Lifecycle phase of a job. Declaration order is the forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Pending,
    Splitting,
    Mapping,
    Reducing,
    Finalizing,
    Completed,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Pending,
        Phase::Splitting,
        Phase::Mapping,
        Phase::Reducing,
        Phase::Finalizing,
        Phase::Completed,
        Phase::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Completed | Phase::Failed)
    }

    /// The phase that follows `self` for a job shaped like `cfg`, skipping
    /// REDUCING for map-only jobs and FINALIZING when no finalizer runs.
    pub fn successor(self, cfg: &JobConfig) -> Option<Phase> {
        let next = match self {
            Phase::Pending => Phase::Splitting,
            Phase::Splitting => Phase::Mapping,
            Phase::Mapping if cfg.num_reducers > 0 => Phase::Reducing,
            Phase::Mapping => Phase::Completed,
            Phase::Reducing if cfg.run_finalizer => Phase::Finalizing,
            Phase::Reducing => Phase::Completed,
            Phase::Finalizing => Phase::Completed,
            Phase::Completed | Phase::Failed => return None,
        };
        Some(next)
    }

    pub fn is_legal_transition(from: Phase, to: Phase, cfg: &JobConfig) -> bool {
        if from.is_terminal() {
            return false;
        }
        to == Phase::Failed || from.successor(cfg) == Some(to)
    }

    /// Lowercase name used in metadata keys.
    pub fn key_name(self) -> &'static str {
        match self {
            Phase::Pending => "pending",
            Phase::Splitting => "splitting",
            Phase::Mapping => "mapping",
            Phase::Reducing => "reducing",
            Phase::Finalizing => "finalizing",
            Phase::Completed => "completed",
            Phase::Failed => "failed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key_name().to_ascii_uppercase())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub phase: Phase,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobState {
    pub job_id: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Every phase entered, in order, starting with PENDING.
    pub history: Vec<PhaseChange>,
    /// The config as accepted at submission.
    pub config: JobConfig,
}

/// One contiguous slice of one input object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub path: ObjectPath,
    pub range: ByteRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAssignment {
    pub job_id: String,
    pub mapper_id: u32,
    pub pieces: Vec<Piece>,
}

impl ChunkAssignment {
    pub fn total_bytes(&self) -> u64 {
        self.pieces.iter().map(|p| p.range.len()).sum()
    }
}

/// Atomic primitives a metadata backend must provide.
pub trait KvBackend: Send + Sync + fmt::Debug {
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, MetaError>;

    fn set(&self, key: &str, value: &[u8]) -> Result<(), MetaError>;

    /// Sets `key` only if absent; returns whether it was set.
    fn set_if_absent(&self, key: &str, value: &[u8]) -> Result<bool, MetaError>;

    /// Atomic read-modify-write. `f` sees the current value and returns the
    /// replacement; an error from `f` aborts without writing. `f` may run
    /// more than once under contention.
    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Result<Vec<u8>, MetaError>,
    ) -> Result<Vec<u8>, MetaError>;

    /// Atomically checks `guard` with `check`, then adds `member` to the set
    /// at `set_key` and returns the set's size.
    fn guarded_set_add(
        &self,
        guard: &str,
        check: &mut dyn FnMut(Option<&[u8]>) -> Result<(), MetaError>,
        set_key: &str,
        member: &str,
    ) -> Result<usize, MetaError>;

    fn set_len(&self, set_key: &str) -> Result<usize, MetaError>;

    fn keys_with_prefix(&self, prefix: &str) -> Result<Vec<String>, MetaError>;

    /// Deletes the keys; returns how many existed.
    fn delete(&self, keys: &[String]) -> Result<usize, MetaError>;
}

pub fn state_key(job_id: &str) -> String {
    format!("job:{job_id}:state")
}

pub fn chunk_key(job_id: &str, mapper_id: u32) -> String {
    format!("job:{job_id}:chunk:{mapper_id}")
}

pub fn done_key(job_id: &str, phase: Phase) -> String {
    format!("job:{job_id}:done:{}", phase.key_name())
}

fn decode_state(key: &str, raw: &[u8]) -> Result<JobState, MetaError> {
    serde_json::from_slice(raw).map_err(|e| MetaError::Corrupt {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("metadata serializes")
}

/// Job metadata operations over a pluggable backend.
#[derive(Debug, Clone)]
pub struct MetaStore {
    kv: Arc<dyn KvBackend>,
}

impl MetaStore {
    pub fn new(kv: Arc<dyn KvBackend>) -> Self {
        MetaStore { kv }
    }

    pub fn in_memory() -> Self {
        MetaStore::new(Arc::new(MemoryKv::new()))
    }

    pub fn backend(&self) -> &Arc<dyn KvBackend> {
        &self.kv
    }

    /// Records a new job in PENDING. `config.job_id` must be set.
    pub fn create_job(&self, config: &JobConfig) -> Result<JobState, MetaError> {
        let job_id = config.id().to_string();
        let now = Utc::now();
        let state = JobState {
            job_id: job_id.clone(),
            phase: Phase::Pending,
            failure_reason: None,
            created_at: now,
            updated_at: now,
            history: vec![PhaseChange {
                phase: Phase::Pending,
                at: now,
            }],
            config: config.clone(),
        };
        if self.kv.set_if_absent(&state_key(&job_id), &encode(&state))? {
            Ok(state)
        } else {
            Err(MetaError::JobExists(job_id))
        }
    }

    pub fn job_state(&self, job_id: &str) -> Result<JobState, MetaError> {
        let key = state_key(job_id);
        match self.kv.get(&key)? {
            Some(raw) => decode_state(&key, &raw),
            None => Err(MetaError::NoSuchJob(job_id.to_string())),
        }
    }

    /// Moves the job to `new_phase` if that is a legal step from wherever it
    /// currently is.
    pub fn update_job_state(
        &self,
        job_id: &str,
        new_phase: Phase,
        failure_reason: Option<String>,
    ) -> Result<JobState, MetaError> {
        self.apply_transition(job_id, None, new_phase, failure_reason)
    }

    /// Compare-and-set variant of [`MetaStore::update_job_state`]: applies
    /// only if the job is currently in `from`.
    pub fn transition(
        &self,
        job_id: &str,
        from: Phase,
        to: Phase,
        failure_reason: Option<String>,
    ) -> Result<JobState, MetaError> {
        self.apply_transition(job_id, Some(from), to, failure_reason)
    }

    fn apply_transition(
        &self,
        job_id: &str,
        from: Option<Phase>,
        to: Phase,
        failure_reason: Option<String>,
    ) -> Result<JobState, MetaError> {
        let key = state_key(job_id);
        let raw = self.kv.update(&key, &mut |cur| {
            let raw = cur.ok_or_else(|| MetaError::NoSuchJob(job_id.to_string()))?;
            let mut state = decode_state(&key, raw)?;
            let illegal = MetaError::IllegalTransition {
                job_id: job_id.to_string(),
                from: state.phase,
                to,
            };
            if from.is_some_and(|f| f != state.phase) {
                return Err(illegal);
            }
            if !Phase::is_legal_transition(state.phase, to, &state.config) {
                return Err(illegal);
            }
            let now = Utc::now();
            state.phase = to;
            state.updated_at = now;
            state.history.push(PhaseChange { phase: to, at: now });
            if to == Phase::Failed {
                state.failure_reason = Some(failure_reason.clone().unwrap_or_else(|| "failed".into()));
            }
            Ok(encode(&state))
        })?;
        decode_state(&key, &raw)
    }

    /// Persists a mapper's assignment; the job must be SPLITTING.
    pub fn store_chunk_assignment(&self, assignment: &ChunkAssignment) -> Result<(), MetaError> {
        let state = self.job_state(&assignment.job_id)?;
        if state.phase != Phase::Splitting {
            return Err(MetaError::PhaseMismatch {
                job_id: assignment.job_id.clone(),
                expected: Phase::Splitting,
                actual: state.phase,
            });
        }
        self.kv.set(
            &chunk_key(&assignment.job_id, assignment.mapper_id),
            &encode(assignment),
        )
    }

    pub fn fetch_chunk_assignment(
        &self,
        job_id: &str,
        mapper_id: u32,
    ) -> Result<ChunkAssignment, MetaError> {
        let key = chunk_key(job_id, mapper_id);
        let raw = self
            .kv
            .get(&key)?
            .ok_or_else(|| MetaError::NoSuchAssignment {
                job_id: job_id.to_string(),
                mapper_id,
            })?;
        serde_json::from_slice(&raw).map_err(|e| MetaError::Corrupt {
            key,
            reason: e.to_string(),
        })
    }

    /// Adds `worker_id` to the job's completion set for `phase` and returns
    /// the number of distinct workers recorded. Repeats do not count twice.
    pub fn record_completion(&self, job_id: &str, phase: Phase, worker_id: u32) -> Result<usize, MetaError> {
        let key = state_key(job_id);
        self.kv.guarded_set_add(
            &key,
            &mut |cur| {
                let raw = cur.ok_or_else(|| MetaError::NoSuchJob(job_id.to_string()))?;
                let state = decode_state(&key, raw)?;
                if state.phase != phase {
                    return Err(MetaError::PhaseMismatch {
                        job_id: job_id.to_string(),
                        expected: phase,
                        actual: state.phase,
                    });
                }
                Ok(())
            },
            &done_key(job_id, phase),
            &worker_id.to_string(),
        )
    }

    pub fn completion_count(&self, job_id: &str, phase: Phase) -> Result<usize, MetaError> {
        self.kv.set_len(&done_key(job_id, phase))
    }

    /// Removes every key belonging to the job; returns how many were removed.
    pub fn delete_job(&self, job_id: &str) -> Result<usize, MetaError> {
        let keys = self.kv.keys_with_prefix(&format!("job:{job_id}:"))?;
        if keys.is_empty() {
            return Ok(0);
        }
        self.kv.delete(&keys)
    }
}
