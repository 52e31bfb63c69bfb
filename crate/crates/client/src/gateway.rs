//! Ways to hand a job to a coordinator.

use std::time::Duration;

use spillway_core::config::JobConfig;
use spillway_core::coordinator::{CoordError, Coordinator, ErrorBody, SubmitResponse};
use spillway_core::runtime::Deployment;

use crate::ClientError;

pub trait JobGateway: Send + Sync {
    /// Submits a job and returns its id.
    fn submit(&self, cfg: &JobConfig) -> Result<String, ClientError>;
}

/// Posts jobs to a coordinator's HTTP endpoint.
#[derive(Debug, Clone)]
pub struct HttpGateway {
    base: String,
    agent: ureq::Agent,
}

impl HttpGateway {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        HttpGateway {
            base: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl JobGateway for HttpGateway {
    fn submit(&self, cfg: &JobConfig) -> Result<String, ClientError> {
        let url = format!("{}/jobs", self.base);
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(cfg.to_json())
            .map_err(|e| ClientError::CoordinatorUnreachable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::CoordinatorUnreachable(format!("{url}: {e}")))?;
        match status {
            200 => serde_json::from_str::<SubmitResponse>(&body)
                .map(|r| r.job_id)
                .map_err(|e| ClientError::CoordinatorUnreachable(format!("unexpected reply from {url}: {e}"))),
            s => {
                let msg = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
                if s >= 500 {
                    Err(ClientError::CoordinatorUnreachable(format!("{url}: HTTP {s}: {msg}")))
                } else {
                    Err(ClientError::Rejected(msg))
                }
            }
        }
    }
}

fn from_coord(e: CoordError) -> ClientError {
    match e {
        CoordError::MetastoreUnavailable(_) | CoordError::BusUnavailable(_) => {
            ClientError::CoordinatorUnreachable(e.to_string())
        }
        other => ClientError::Rejected(other.to_string()),
    }
}

impl JobGateway for Coordinator {
    fn submit(&self, cfg: &JobConfig) -> Result<String, ClientError> {
        self.submit_job(cfg.clone()).map_err(from_coord)
    }
}

/// Submits through whichever coordinator instance the deployment runs now.
impl JobGateway for Deployment {
    fn submit(&self, cfg: &JobConfig) -> Result<String, ClientError> {
        Deployment::submit(self, cfg.clone()).map_err(from_coord)
    }
}
