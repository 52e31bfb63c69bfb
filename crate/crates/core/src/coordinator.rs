//! Job submission and phase progression.
//!
//! The coordinator keeps nothing about jobs in memory: every decision reads
//! and writes the metastore, and phase changes are compare-and-set, so any
//! number of coordinator instances (or a restarted one) can serve the same
//! jobs. Each phase's trigger events are published only by the caller whose
//! transition into that phase succeeded.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::config::{validate_job_id, ConfigError, JobConfig};
use crate::eventbus::{BusError, EventBus, EventType, TriggerEvent};
use crate::metastore::{JobState, MetaError, MetaStore, Phase};
use crate::udf::Catalog;
use crate::worker::{CompletionNotice, NoticeStatus};

#[derive(Debug, Error)]
pub enum CoordError {
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("job `{0}` already exists")]
    DuplicateJob(String),
    #[error("no such job `{0}`")]
    NoSuchJob(String),
    #[error("invalid notice: {0}")]
    InvalidNotice(String),
    #[error("metastore unavailable: {0}")]
    MetastoreUnavailable(String),
    #[error("event bus unavailable: {0}")]
    BusUnavailable(#[from] BusError),
    #[error(transparent)]
    Meta(MetaError),
}

impl From<MetaError> for CoordError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::NoSuchJob(id) => CoordError::NoSuchJob(id),
            MetaError::JobExists(id) => CoordError::DuplicateJob(id),
            MetaError::Unavailable(m) => CoordError::MetastoreUnavailable(m),
            other => CoordError::Meta(other),
        }
    }
}

/// What happened to a completion notice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoticeOutcome {
    /// Counted; the phase is still waiting for other workers.
    Recorded { completed: usize, expected: usize },
    /// Counted and completed the phase; the job moved on.
    Advanced { to: Phase },
    /// The job was failed.
    Failed,
    /// Ignored: terminal job or a notice from an earlier phase.
    Dropped { reason: String },
}

/// Number of workers that must report for `phase` to be complete.
pub fn expected_workers(phase: Phase, cfg: &JobConfig) -> usize {
    match phase {
        Phase::Splitting | Phase::Finalizing => 1,
        Phase::Mapping => cfg.num_mappers as usize,
        Phase::Reducing => cfg.num_reducers as usize,
        Phase::Pending | Phase::Completed | Phase::Failed => 0,
    }
}

fn event_kind(phase: Phase) -> Option<EventType> {
    match phase {
        Phase::Splitting => Some(EventType::Split),
        Phase::Mapping => Some(EventType::Map),
        Phase::Reducing => Some(EventType::Reduce),
        Phase::Finalizing => Some(EventType::Finalize),
        _ => None,
    }
}

#[derive(Clone)]
pub struct Coordinator {
    meta: MetaStore,
    bus: Arc<dyn EventBus>,
    catalog: Arc<Catalog>,
    callback_base: String,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("callback_base", &self.callback_base)
            .finish()
    }
}

fn new_job_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

impl Coordinator {
    /// `callback_base` is the URL workers post notices under, e.g.
    /// `http://127.0.0.1:8080`.
    pub fn new(meta: MetaStore, bus: Arc<dyn EventBus>, catalog: Arc<Catalog>, callback_base: impl Into<String>) -> Self {
        Coordinator {
            meta,
            bus,
            catalog,
            callback_base: callback_base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn metastore(&self) -> &MetaStore {
        &self.meta
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn callback_url(&self, job_id: &str) -> String {
        format!("{}/jobs/{job_id}/notify", self.callback_base)
    }

    /// Validates and records the job, moves it to SPLITTING and publishes
    /// its split event. Returns without waiting for the job.
    pub fn submit_job(&self, mut config: JobConfig) -> Result<String, CoordError> {
        config.validate(&self.catalog)?;
        let job_id = match &config.job_id {
            Some(id) => {
                validate_job_id(id)?;
                id.clone()
            }
            None => new_job_id(),
        };
        config.job_id = Some(job_id.clone());
        self.meta.create_job(&config)?;
        self.meta.transition(&job_id, Phase::Pending, Phase::Splitting, None)?;
        log::info!("job {job_id} submitted");
        if let Err(e) = self.publish_phase(&config, Phase::Splitting) {
            self.fail_job(&job_id, &format!("could not publish split event: {e}"))?;
            return Err(e.into());
        }
        Ok(job_id)
    }

    fn publish_phase(&self, cfg: &JobConfig, phase: Phase) -> Result<(), BusError> {
        let Some(kind) = event_kind(phase) else {
            return Ok(());
        };
        let callback = self.callback_url(cfg.id());
        for i in 0..expected_workers(phase, cfg) as u32 {
            self.bus
                .publish(kind.topic(), TriggerEvent::new(kind, cfg.id(), i, &callback))?;
        }
        Ok(())
    }

    /// Moves the job out of `from` into its successor and publishes that
    /// phase's events. Returns `None` if another caller already advanced.
    pub fn advance_phase(&self, job_id: &str, from: Phase) -> Result<Option<Phase>, CoordError> {
        let state = self.meta.job_state(job_id)?;
        let Some(next) = from.successor(&state.config) else {
            return Ok(None);
        };
        match self.meta.transition(job_id, from, next, None) {
            Ok(_) => {}
            Err(MetaError::IllegalTransition { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        log::info!("job {job_id}: {from} -> {next}");
        if let Err(e) = self.publish_phase(&state.config, next) {
            self.fail_job(job_id, &format!("could not publish {next} events: {e}"))?;
            return Err(e.into());
        }
        Ok(Some(next))
    }

    /// Marks the job FAILED unless it is already terminal.
    pub fn fail_job(&self, job_id: &str, reason: &str) -> Result<(), CoordError> {
        let state = self.meta.job_state(job_id)?;
        if state.phase.is_terminal() {
            return Ok(());
        }
        match self.meta.update_job_state(job_id, Phase::Failed, Some(reason.to_string())) {
            Ok(_) | Err(MetaError::IllegalTransition { .. }) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn on_worker_done(&self, notice: &CompletionNotice) -> Result<NoticeOutcome, CoordError> {
        let state: JobState = self.meta.job_state(&notice.job_id)?;
        let dropped = |reason: String| {
            log::debug!("job {}: dropping notice: {reason}", notice.job_id);
            Ok(NoticeOutcome::Dropped { reason })
        };
        if state.phase.is_terminal() {
            return dropped(format!("job is {}", state.phase));
        }
        if notice.phase != state.phase {
            return dropped(format!("notice for {} while job is {}", notice.phase, state.phase));
        }
        let expected = expected_workers(notice.phase, &state.config);
        if notice.worker_id as usize >= expected {
            return Err(CoordError::InvalidNotice(format!(
                "worker {} out of range for {} ({expected} workers)",
                notice.worker_id, notice.phase
            )));
        }
        if notice.status == NoticeStatus::Failed {
            let reason = notice
                .error_detail
                .clone()
                .ok_or_else(|| CoordError::InvalidNotice("FAILED notice without error_detail".into()))?;
            self.fail_job(&notice.job_id, &reason)?;
            return Ok(NoticeOutcome::Failed);
        }
        let completed = match self.meta.record_completion(&notice.job_id, notice.phase, notice.worker_id) {
            Ok(n) => n,
            Err(MetaError::PhaseMismatch { actual, .. }) => {
                return dropped(format!("job moved on to {actual}"));
            }
            Err(e) => return Err(e.into()),
        };
        if completed < expected {
            return Ok(NoticeOutcome::Recorded { completed, expected });
        }
        match self.advance_phase(&notice.job_id, notice.phase)? {
            Some(to) => Ok(NoticeOutcome::Advanced { to }),
            None => dropped("phase already advanced".into()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error_response(e: CoordError) -> Response {
    let status = match &e {
        CoordError::InvalidConfig(_) | CoordError::DuplicateJob(_) | CoordError::InvalidNotice(_) => {
            StatusCode::BAD_REQUEST
        }
        CoordError::NoSuchJob(_) => StatusCode::NOT_FOUND,
        CoordError::MetastoreUnavailable(_) | CoordError::BusUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        CoordError::Meta(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(ErrorBody { error: e.to_string() })).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("handler task panicked")
}

async fn submit_handler(State(c): State<Arc<Coordinator>>, body: String) -> Response {
    let cfg: JobConfig = match serde_json::from_str(&body) {
        Ok(c) => c,
        Err(e) => return error_response(ConfigError::MalformedConfig(e.to_string()).into()),
    };
    match blocking(move || c.submit_job(cfg)).await {
        Ok(job_id) => Json(SubmitResponse { job_id }).into_response(),
        Err(e) => error_response(e),
    }
}

async fn notify_handler(State(c): State<Arc<Coordinator>>, Path(job_id): Path<String>, body: String) -> Response {
    let notice: CompletionNotice = match serde_json::from_str(&body) {
        Ok(n) => n,
        Err(e) => return error_response(CoordError::InvalidNotice(e.to_string())),
    };
    if notice.job_id != job_id {
        return error_response(CoordError::InvalidNotice(format!(
            "notice for job {} posted to job {job_id}",
            notice.job_id
        )));
    }
    match blocking(move || c.on_worker_done(&notice)).await {
        Ok(outcome) => Json(outcome).into_response(),
        Err(e) => error_response(e),
    }
}

pub fn router(coordinator: Arc<Coordinator>) -> Router {
    Router::new()
        .route("/jobs", post(submit_handler))
        .route("/jobs/{job_id}/notify", post(notify_handler))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(coordinator)
}

/// A running HTTP coordinator. Dropping it stops the server.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and tears down the server's runtime;
    /// in-flight requests are abandoned.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Serves `coordinator` on `addr` (port 0 picks a free port) from a
/// dedicated thread.
pub fn serve(coordinator: Arc<Coordinator>, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    serve_with(addr, |_| coordinator)
}

/// Like [`serve`], but builds the coordinator once the bound address is
/// known, so its callback URL can point at the server itself.
pub fn serve_with(
    addr: SocketAddr,
    make: impl FnOnce(SocketAddr) -> Arc<Coordinator>,
) -> std::io::Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    let app = router(make(local));
    let (tx, rx) = oneshot::channel::<()>();
    let thread = thread::Builder::new()
        .name(format!("coordinator-{local}"))
        .spawn(move || {
            rt.block_on(async move {
                let server = axum::serve(listener, app);
                tokio::select! {
                    res = server => if let Err(e) = res {
                        log::error!("coordinator server error: {e}");
                    },
                    _ = rx => {}
                }
            });
            rt.shutdown_background();
        })?;
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventbus::InProcessBus;
    use crate::udf::FunctionRef;
    use std::sync::Mutex;

    #[derive(Default)]
    struct LogBus(Mutex<Vec<TriggerEvent>>);
    impl EventBus for LogBus {
        fn publish(&self, _topic: &str, event: TriggerEvent) -> Result<(), BusError> {
            self.0.lock().unwrap().push(event);
            Ok(())
        }
    }

    fn setup() -> (Coordinator, Arc<LogBus>) {
        let bus = Arc::new(LogBus::default());
        let c = Coordinator::new(MetaStore::in_memory(), bus.clone(), Arc::new(Catalog::builtin()), "http://x");
        (c, bus)
    }

    fn wc(m: u32, r: u32, fin: bool) -> JobConfig {
        let mut c = JobConfig::new(
            vec!["in/".into()],
            "out/",
            m,
            r,
            FunctionRef::new("wordcount_map"),
            (r > 0).then(|| FunctionRef::new("sum_reduce")),
        );
        c.run_finalizer = fin;
        c
    }

    fn kinds(bus: &LogBus) -> Vec<(EventType, u32)> {
        bus.0.lock().unwrap().iter().map(|e| (e.event_type, e.worker_index)).collect()
    }

    fn ok(c: &Coordinator, id: &str, phase: Phase, w: u32) -> NoticeOutcome {
        c.on_worker_done(&CompletionNotice::ok(id, phase, w)).unwrap()
    }

    #[test]
    fn submit_publishes_one_split_and_returns_immediately() {
        let (c, bus) = setup();
        let id = c.submit_job(wc(4, 2, true)).unwrap();
        assert_eq!(id.len(), 32);
        assert_eq!(c.metastore().job_state(&id).unwrap().phase, Phase::Splitting);
        assert_eq!(kinds(&bus), [(EventType::Split, 0)]);
        assert_eq!(bus.0.lock().unwrap()[0].coordinator_callback, format!("http://x/jobs/{id}/notify"));
    }

    #[test]
    fn invalid_config_creates_nothing() {
        let (c, bus) = setup();
        let mut cfg = wc(4, 2, false);
        cfg.reduce_fn = None;
        cfg.job_id = Some("bad".into());
        assert!(matches!(c.submit_job(cfg), Err(CoordError::InvalidConfig(_))));
        assert!(c.metastore().job_state("bad").is_err());
        assert!(kinds(&bus).is_empty());
    }

    #[test]
    fn full_lifecycle_with_duplicates() {
        let (c, bus) = setup();
        let id = c.submit_job(wc(4, 2, true)).unwrap();
        assert_eq!(ok(&c, &id, Phase::Splitting, 0), NoticeOutcome::Advanced { to: Phase::Mapping });
        for m in 0..3 {
            ok(&c, &id, Phase::Mapping, m);
            ok(&c, &id, Phase::Mapping, m);
        }
        assert_eq!(c.metastore().job_state(&id).unwrap().phase, Phase::Mapping);
        assert_eq!(ok(&c, &id, Phase::Mapping, 3), NoticeOutcome::Advanced { to: Phase::Reducing });
        assert!(matches!(ok(&c, &id, Phase::Mapping, 3), NoticeOutcome::Dropped { .. }));
        ok(&c, &id, Phase::Reducing, 1);
        assert_eq!(ok(&c, &id, Phase::Reducing, 0), NoticeOutcome::Advanced { to: Phase::Finalizing });
        assert_eq!(ok(&c, &id, Phase::Finalizing, 0), NoticeOutcome::Advanced { to: Phase::Completed });
        let mut want = vec![(EventType::Split, 0)];
        want.extend((0..4).map(|i| (EventType::Map, i)));
        want.extend((0..2).map(|i| (EventType::Reduce, i)));
        want.push((EventType::Finalize, 0));
        assert_eq!(kinds(&bus), want);
    }

    #[test]
    fn map_only_and_no_finalizer_skip_phases() {
        let (c, bus) = setup();
        let id = c.submit_job(wc(2, 0, false)).unwrap();
        ok(&c, &id, Phase::Splitting, 0);
        ok(&c, &id, Phase::Mapping, 0);
        assert_eq!(ok(&c, &id, Phase::Mapping, 1), NoticeOutcome::Advanced { to: Phase::Completed });
        let id2 = c.submit_job(wc(1, 1, false)).unwrap();
        ok(&c, &id2, Phase::Splitting, 0);
        ok(&c, &id2, Phase::Mapping, 0);
        assert_eq!(ok(&c, &id2, Phase::Reducing, 0), NoticeOutcome::Advanced { to: Phase::Completed });
        assert!(!kinds(&bus).contains(&(EventType::Finalize, 0)));
    }

    #[test]
    fn failure_notice_fails_job_and_blocks_progress() {
        let (c, bus) = setup();
        let id = c.submit_job(wc(2, 1, true)).unwrap();
        ok(&c, &id, Phase::Splitting, 0);
        let n = CompletionNotice::failed(&id, Phase::Mapping, 1, "mapper 1: boom");
        assert_eq!(c.on_worker_done(&n).unwrap(), NoticeOutcome::Failed);
        let s = c.metastore().job_state(&id).unwrap();
        assert_eq!(s.phase, Phase::Failed);
        assert_eq!(s.failure_reason.as_deref(), Some("mapper 1: boom"));
        assert!(matches!(ok(&c, &id, Phase::Mapping, 0), NoticeOutcome::Dropped { .. }));
        assert!(!kinds(&bus).iter().any(|(k, _)| *k == EventType::Reduce));
        c.fail_job(&id, "again").unwrap();
        assert_eq!(c.metastore().job_state(&id).unwrap().failure_reason.as_deref(), Some("mapper 1: boom"));
    }

    #[test]
    fn bad_notices() {
        let (c, _) = setup();
        assert!(matches!(
            c.on_worker_done(&CompletionNotice::ok("nope", Phase::Mapping, 0)),
            Err(CoordError::NoSuchJob(_))
        ));
        let id = c.submit_job(wc(2, 1, false)).unwrap();
        assert!(matches!(
            c.on_worker_done(&CompletionNotice::ok(&id, Phase::Splitting, 5)),
            Err(CoordError::InvalidNotice(_))
        ));
    }

    #[test]
    fn concurrent_threshold_crossers_advance_once() {
        for _ in 0..20 {
            let (c, bus) = setup();
            let id = c.submit_job(wc(8, 3, false)).unwrap();
            ok(&c, &id, Phase::Splitting, 0);
            thread::scope(|s| {
                for t in 0..4u32 {
                    let (c, id) = (&c, &id);
                    s.spawn(move || {
                        for m in 0..8 {
                            ok(c, id, Phase::Mapping, (m + t) % 8);
                        }
                    });
                }
            });
            let reduces = kinds(&bus).iter().filter(|(k, _)| *k == EventType::Reduce).count();
            assert_eq!(reduces, 3);
        }
    }

    #[test]
    fn bus_outage_at_submit_fails_job() {
        let bus = InProcessBus::with_job_topics();
        bus.set_available(false);
        let c = Coordinator::new(MetaStore::in_memory(), Arc::new(bus), Arc::new(Catalog::builtin()), "http://x");
        let mut cfg = wc(1, 1, false);
        cfg.job_id = Some("j".into());
        assert!(matches!(c.submit_job(cfg), Err(CoordError::BusUnavailable(_))));
        assert_eq!(c.metastore().job_state("j").unwrap().phase, Phase::Failed);
    }
}
