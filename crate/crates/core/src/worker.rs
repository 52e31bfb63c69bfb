//! Shared worker plumbing: the execution context, completion notices and
//! their delivery to the coordinator, and per-event dispatch.

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventbus::{EventType, TriggerEvent};
use crate::metastore::{JobState, MetaError, MetaStore, Phase};
use crate::record::{CodecError, NonTextRecord};
use crate::storage::{ObjectPath, ObjectStore, StoreError};
use crate::udf::{Catalog, CatalogError, UdfError};
use crate::{finalizer, mapper, reducer, splitter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NoticeStatus {
    Ok,
    Failed,
}

/// A worker's report that its task finished or failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionNotice {
    pub job_id: String,
    pub phase: Phase,
    pub worker_id: u32,
    pub status: NoticeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
}

impl CompletionNotice {
    pub fn ok(job_id: &str, phase: Phase, worker_id: u32) -> Self {
        CompletionNotice {
            job_id: job_id.to_string(),
            phase,
            worker_id,
            status: NoticeStatus::Ok,
            error_detail: None,
        }
    }

    pub fn failed(job_id: &str, phase: Phase, worker_id: u32, detail: impl Into<String>) -> Self {
        CompletionNotice {
            job_id: job_id.to_string(),
            phase,
            worker_id,
            status: NoticeStatus::Failed,
            error_detail: Some(detail.into()),
        }
    }
}

/// The phase in which events of this kind run.
pub fn phase_of(kind: EventType) -> Phase {
    match kind {
        EventType::Split => Phase::Splitting,
        EventType::Map => Phase::Mapping,
        EventType::Reduce => Phase::Reducing,
        EventType::Finalize => Phase::Finalizing,
    }
}

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error("coordinator rejected notice with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("coordinator unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("{0}")]
    Other(String),
}

/// Delivers completion notices to the coordinator.
pub trait Notifier: Send + Sync {
    fn notify(&self, callback: &str, notice: &CompletionNotice) -> Result<(), NotifyError>;
}

/// Posts notices as JSON to the event's callback URL.
///
/// Transport errors and 5xx responses are retried with exponential backoff;
/// 4xx responses are final.
#[derive(Debug, Clone)]
pub struct HttpNotifier {
    agent: ureq::Agent,
    attempts: u32,
    backoff: Duration,
}

impl Default for HttpNotifier {
    fn default() -> Self {
        HttpNotifier::new(3, Duration::from_millis(200))
    }
}

impl HttpNotifier {
    pub fn new(attempts: u32, backoff: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .new_agent();
        HttpNotifier {
            agent,
            attempts: attempts.max(1),
            backoff,
        }
    }
}

impl Notifier for HttpNotifier {
    fn notify(&self, callback: &str, notice: &CompletionNotice) -> Result<(), NotifyError> {
        let body = serde_json::to_vec(notice).expect("notice serializes");
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                thread::sleep(self.backoff * (1 << (attempt - 1)));
            }
            let res = self
                .agent
                .post(callback)
                .header("content-type", "application/json")
                .send(&body[..]);
            match res {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return Ok(());
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status < 500 {
                        return Err(NotifyError::Rejected { status, body: text });
                    }
                    last = format!("status {status}: {text}");
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!(
                "notice for job {} attempt {} failed: {last}",
                notice.job_id,
                attempt + 1
            );
        }
        Err(NotifyError::Unreachable {
            attempts: self.attempts,
            last,
        })
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    NonText(#[from] NonTextRecord),
    #[error("function `{name}` failed: {source}")]
    Udf { name: String, source: UdfError },
    #[error("run {run} is not sorted: key {key:?} follows a larger key")]
    UnsortedInput { run: String, key: String },
    #[error("missing reducer output {0}")]
    MissingReducerOutput(String),
    #[error("{0}")]
    Invalid(String),
}

/// What a worker instance needs to run any task.
#[derive(Clone)]
pub struct WorkerContext {
    pub store: Arc<dyn ObjectStore>,
    pub meta: MetaStore,
    pub catalog: Arc<Catalog>,
    pub notifier: Arc<dyn Notifier>,
    /// Bucket holding inputs, intermediates and outputs.
    pub bucket: String,
}

impl fmt::Debug for WorkerContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkerContext")
            .field("store", &self.store)
            .field("bucket", &self.bucket)
            .finish()
    }
}

impl WorkerContext {
    pub fn path(&self, key: impl Into<String>) -> Result<ObjectPath, StoreError> {
        ObjectPath::new(self.bucket.clone(), key)
    }

    pub fn store(&self) -> &dyn ObjectStore {
        &*self.store
    }
}

/// Why an event was not executed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Skipped {
    /// The job is not in the phase this event belongs to: a late duplicate
    /// or an event for a job that has already failed.
    StalePhase { expected: Phase, actual: Phase },
    NoSuchJob,
}

/// Result of handling one trigger event.
#[derive(Debug)]
pub enum Outcome {
    Completed,
    Failed(String),
    Skipped(Skipped),
}

/// Loads the job and checks that `event` belongs to its current phase.
pub fn load_job(ctx: &WorkerContext, event: &TriggerEvent) -> Result<JobState, Skipped> {
    let expected = phase_of(event.event_type);
    match ctx.meta.job_state(&event.job_id) {
        Ok(s) if s.phase == expected => Ok(s),
        Ok(s) => Err(Skipped::StalePhase {
            expected,
            actual: s.phase,
        }),
        Err(_) => Err(Skipped::NoSuchJob),
    }
}

/// Runs the task for `event` and reports the result to the coordinator.
pub fn run_event(ctx: &WorkerContext, event: &TriggerEvent) -> Outcome {
    let state = match load_job(ctx, event) {
        Ok(s) => s,
        Err(skip) => {
            log::info!("skipping {} ({:?})", event.event_id, skip);
            return Outcome::Skipped(skip);
        }
    };
    let result = match event.event_type {
        EventType::Split => splitter::run_split(ctx, &state.config).map(drop),
        EventType::Map => mapper::run_map_task(ctx, &state.config, event.worker_index).map(drop),
        EventType::Reduce => reducer::run_reduce_task(ctx, &state.config, event.worker_index).map(drop),
        EventType::Finalize => finalizer::run_finalize(ctx, &state.config).map(drop),
    };
    let phase = phase_of(event.event_type);
    let (notice, outcome) = match result {
        Ok(()) => (
            CompletionNotice::ok(&event.job_id, phase, event.worker_index),
            Outcome::Completed,
        ),
        Err(e) => {
            let detail = format!("{} worker {}: {e}", event.event_type, event.worker_index);
            log::warn!("job {}: {detail}", event.job_id);
            (
                CompletionNotice::failed(&event.job_id, phase, event.worker_index, detail.clone()),
                Outcome::Failed(detail),
            )
        }
    };
    if let Err(e) = ctx.notifier.notify(&event.coordinator_callback, &notice) {
        log::error!("job {}: could not deliver notice: {e}", event.job_id);
    }
    outcome
}

/// Reports an instance that never ran or crashed as a failed task.
pub fn report_spawn_failure(ctx: &WorkerContext, event: &TriggerEvent, detail: &str) {
    let notice = CompletionNotice::failed(
        &event.job_id,
        phase_of(event.event_type),
        event.worker_index,
        format!("{} worker {}: {detail}", event.event_type, event.worker_index),
    );
    if let Err(e) = ctx.notifier.notify(&event.coordinator_callback, &notice) {
        log::error!("job {}: could not deliver failure notice: {e}", event.job_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn notice_json_shape() {
        let n = CompletionNotice::failed("j", Phase::Reducing, 0, "boom");
        let v: serde_json::Value = serde_json::to_value(&n).unwrap();
        assert_eq!(v["phase"], "REDUCING");
        assert_eq!(v["status"], "FAILED");
        assert_eq!(v["error_detail"], "boom");
        let ok = serde_json::to_value(CompletionNotice::ok("j", Phase::Mapping, 3)).unwrap();
        assert!(ok.get("error_detail").is_none());
    }

    #[test]
    fn http_notifier_gives_up_after_bounded_retries() {
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let n = HttpNotifier::new(3, Duration::from_millis(20));
        let t = std::time::Instant::now();
        let err = n
            .notify(
                &format!("http://127.0.0.1:{port}/jobs/j/notify"),
                &CompletionNotice::ok("j", Phase::Mapping, 0),
            )
            .unwrap_err();
        assert!(matches!(err, NotifyError::Unreachable { attempts: 3, .. }), "{err}");
        // two sleeps: 20ms then 40ms
        assert!(t.elapsed() >= Duration::from_millis(60));
    }
}
