//! Client SDK: expands pipelines into chained jobs, submits them, follows
//! their progress in the metastore, downloads results and cleans up.

pub mod gateway;
pub mod pipeline;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use spillway_core::config::JobConfig;
use spillway_core::finalizer::final_output_key;
use spillway_core::mapper::map_only_output_key;
use spillway_core::metastore::{JobState, MetaError, MetaStore, Phase};
use spillway_core::reducer::reduce_output_key;
use spillway_core::storage::{ObjectPath, ObjectStore, StoreError, WindowReader};
use thiserror::Error;

pub use gateway::{HttpGateway, JobGateway};
pub use pipeline::{expand_pipeline, BaseConfig, PipelineSpec, StageOverride};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(500);
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(600);
const DOWNLOAD_WINDOW: u64 = 8 << 20;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),
    #[error("coordinator unreachable: {0}")]
    CoordinatorUnreachable(String),
    #[error("coordinator rejected the job: {0}")]
    Rejected(String),
    #[error("no such job `{0}`")]
    NoSuchJob(String),
    #[error("job `{job_id}` is {phase}{}", reason.as_ref().map(|r| format!(": {r}")).unwrap_or_default())]
    JobNotCompleted {
        job_id: String,
        phase: Phase,
        reason: Option<String>,
    },
    #[error("job `{job_id}` is still running ({phase})")]
    JobRunning { job_id: String, phase: Phase },
    #[error(transparent)]
    Metastore(MetaError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
}

impl From<MetaError> for ClientError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::NoSuchJob(id) => ClientError::NoSuchJob(id),
            other => ClientError::Metastore(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineStatus {
    Completed,
    Failed,
    TimedOut,
}

/// Outcome of one pipeline: the jobs it ran, in stage order, and how the
/// last of them ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub name: Option<String>,
    pub job_ids: Vec<String>,
    pub status: PipelineStatus,
    pub failure_reason: Option<String>,
}

/// What [`Client::gc`] removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GcReport {
    pub objects: usize,
    pub keys: usize,
}

/// Submits through a gateway and reads job state straight from the
/// metastore. Monitoring never writes.
#[derive(Clone)]
pub struct Client {
    gateway: Arc<dyn JobGateway>,
    meta: MetaStore,
    store: Arc<dyn ObjectStore>,
    bucket: String,
    poll_interval: Duration,
    deadline: Duration,
}

impl Client {
    pub fn new(gateway: Arc<dyn JobGateway>, meta: MetaStore, store: Arc<dyn ObjectStore>, bucket: impl Into<String>) -> Self {
        Client {
            gateway,
            meta,
            store,
            bucket: bucket.into(),
            poll_interval: DEFAULT_POLL_INTERVAL,
            deadline: DEFAULT_DEADLINE,
        }
    }

    /// `deadline` bounds the wait for each job.
    pub fn with_polling(mut self, interval: Duration, deadline: Duration) -> Self {
        self.poll_interval = interval.max(Duration::from_millis(1));
        self.deadline = deadline;
        self
    }

    pub fn status(&self, job_id: &str) -> Result<JobState, ClientError> {
        Ok(self.meta.job_state(job_id)?)
    }

    /// Polls until the job is terminal. `Ok(None)` means the deadline passed
    /// first; the job is left alone.
    pub fn wait(&self, job_id: &str) -> Result<Option<JobState>, ClientError> {
        let deadline = Instant::now() + self.deadline;
        loop {
            match self.meta.job_state(job_id) {
                Ok(s) if s.phase.is_terminal() => return Ok(Some(s)),
                Ok(_) => {}
                Err(MetaError::Unavailable(e)) => log::warn!("polling {job_id}: {e}"),
                Err(e) => return Err(e.into()),
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            thread::sleep(self.poll_interval.min(deadline - now));
        }
    }

    /// Runs the stages in order, each after the previous one completed.
    pub fn run_pipeline(&self, spec: &PipelineSpec) -> Result<PipelineResult, ClientError> {
        let jobs = expand_pipeline(spec)?;
        let mut result = PipelineResult {
            name: spec.name.clone(),
            job_ids: Vec::with_capacity(jobs.len()),
            status: PipelineStatus::Completed,
            failure_reason: None,
        };
        for (i, cfg) in jobs.iter().enumerate() {
            let id = self.gateway.submit(cfg)?;
            log::info!("stage {i} submitted as job {id}");
            result.job_ids.push(id.clone());
            match self.wait(&id)? {
                None => {
                    result.status = PipelineStatus::TimedOut;
                    return Ok(result);
                }
                Some(s) if s.phase == Phase::Failed => {
                    result.status = PipelineStatus::Failed;
                    result.failure_reason = Some(s.failure_reason.unwrap_or_else(|| "no reason recorded".into()));
                    return Ok(result);
                }
                Some(_) => {}
            }
        }
        Ok(result)
    }

    /// Runs independent pipelines concurrently; results keep input order.
    pub fn submit_and_monitor(&self, pipelines: &[PipelineSpec]) -> Vec<Result<PipelineResult, ClientError>> {
        thread::scope(|scope| {
            let handles: Vec<_> = pipelines
                .iter()
                .map(|spec| scope.spawn(move || self.run_pipeline(spec)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("pipeline thread panicked"))
                .collect()
        })
    }

    /// Keys of a completed job's result objects, in order.
    pub fn result_keys(cfg: &JobConfig) -> Vec<String> {
        if cfg.run_finalizer {
            vec![final_output_key(cfg)]
        } else if cfg.num_reducers > 0 {
            (0..cfg.num_reducers).map(|r| reduce_output_key(cfg, r)).collect()
        } else {
            (0..cfg.num_mappers).map(|m| map_only_output_key(cfg, m)).collect()
        }
    }

    /// Downloads a completed job's results into `out_dir`.
    pub fn fetch_results(&self, job_id: &str, out_dir: &Path) -> Result<Vec<PathBuf>, ClientError> {
        let state = self.meta.job_state(job_id)?;
        if state.phase != Phase::Completed {
            return Err(ClientError::JobNotCompleted {
                job_id: job_id.to_string(),
                phase: state.phase,
                reason: state.failure_reason,
            });
        }
        std::fs::create_dir_all(out_dir)?;
        let mut paths = Vec::new();
        for key in Self::result_keys(&state.config) {
            let obj = ObjectPath::new(self.bucket.clone(), key)?;
            let local = out_dir.join(obj.file_name());
            let mut file = File::create(&local)?;
            for window in WindowReader::whole(self.store.as_ref(), obj, DOWNLOAD_WINDOW)? {
                file.write_all(&window?)?;
            }
            file.sync_all()?;
            paths.push(local);
        }
        Ok(paths)
    }

    /// Deletes a finished job's intermediate objects and its metadata.
    /// Result objects stay.
    pub fn gc(&self, job_id: &str) -> Result<GcReport, ClientError> {
        let state = self.meta.job_state(job_id)?;
        if !state.phase.is_terminal() {
            return Err(ClientError::JobRunning {
                job_id: job_id.to_string(),
                phase: state.phase,
            });
        }
        let mut report = GcReport::default();
        for area in ["intermediate", "merge", "maponly"] {
            for obj in self.store.list_objects(&self.bucket, &format!("{job_id}/{area}/"))? {
                self.store.delete_object(&obj.path)?;
                report.objects += 1;
            }
        }
        report.keys = self.meta.delete_job(job_id)?;
        Ok(report)
    }
}
