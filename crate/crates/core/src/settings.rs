//! Deployment settings, read from a YAML file.
//!
//! ```yaml
//! storage:
//!   backend: local        # local | memory | s3
//!   root: /var/lib/spillway
//!   bucket: data
//! metastore:
//!   backend: redis        # memory | redis
//!   host: 127.0.0.1
//!   port: 6379
//! coordinator:
//!   host: 127.0.0.1
//!   port: 8080
//! eventbus:
//!   cold_start_delay_ms: 0
//!   concurrency_cap: 8
//! client:
//!   poll_interval_ms: 500
//!   deadline_ms: 600000
//! ```

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventbus::SpawnOptions;
use crate::metastore::{MemoryKv, MetaStore, RedisKv};
use crate::storage::{LocalStore, MemoryStore, ObjectStore, S3Config, S3Store};

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("cannot read settings file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed settings: {0}")]
    Malformed(String),
    #[error("invalid settings: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageBackend {
    Local,
    Memory,
    S3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSettings {
    pub backend: StorageBackend,
    /// Root directory for the local backend.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_bucket")]
    pub bucket: String,
    #[serde(default)]
    pub s3: Option<S3Config>,
}

fn default_bucket() -> String {
    "data".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetastoreBackend {
    Memory,
    Redis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetastoreSettings {
    pub backend: MetastoreBackend,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_redis_port")]
    pub port: u16,
    #[serde(default = "default_meta_timeout")]
    pub timeout_ms: u64,
}

fn default_host() -> String {
    "127.0.0.1".into()
}
fn default_redis_port() -> u16 {
    6379
}
fn default_meta_timeout() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorSettings {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_coord_port")]
    pub port: u16,
}

fn default_coord_port() -> u16 {
    8080
}

impl Default for CoordinatorSettings {
    fn default() -> Self {
        CoordinatorSettings {
            host: default_host(),
            port: default_coord_port(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventBusSettings {
    #[serde(default)]
    pub cold_start_delay_ms: u64,
    #[serde(default)]
    pub concurrency_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSettings {
    #[serde(default = "default_poll")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_deadline")]
    pub deadline_ms: u64,
}

fn default_poll() -> u64 {
    500
}
fn default_deadline() -> u64 {
    600_000
}

impl Default for ClientSettings {
    fn default() -> Self {
        ClientSettings {
            poll_interval_ms: default_poll(),
            deadline_ms: default_deadline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub storage: StorageSettings,
    pub metastore: MetastoreSettings,
    #[serde(default)]
    pub coordinator: CoordinatorSettings,
    #[serde(default)]
    pub eventbus: EventBusSettings,
    #[serde(default)]
    pub client: ClientSettings,
}

impl Settings {
    pub fn from_yaml(raw: &str) -> Result<Settings, SettingsError> {
        let s: Settings = serde_yaml::from_str(raw).map_err(|e| SettingsError::Malformed(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Settings, SettingsError> {
        let raw = std::fs::read_to_string(path).map_err(|source| SettingsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Settings::from_yaml(&raw)
    }

    /// Everything in memory; the coordinator on an ephemeral port.
    pub fn in_memory() -> Settings {
        Settings {
            storage: StorageSettings {
                backend: StorageBackend::Memory,
                root: None,
                bucket: default_bucket(),
                s3: None,
            },
            metastore: MetastoreSettings {
                backend: MetastoreBackend::Memory,
                host: default_host(),
                port: default_redis_port(),
                timeout_ms: default_meta_timeout(),
            },
            coordinator: CoordinatorSettings {
                host: default_host(),
                port: 0,
            },
            eventbus: EventBusSettings::default(),
            client: ClientSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SettingsError> {
        match self.storage.backend {
            StorageBackend::Local if self.storage.root.is_none() => {
                return Err(SettingsError::Invalid("storage.root is required for the local backend".into()))
            }
            StorageBackend::S3 if self.storage.s3.is_none() => {
                return Err(SettingsError::Invalid("storage.s3 is required for the s3 backend".into()))
            }
            _ => {}
        }
        crate::storage::ObjectPath::new(self.storage.bucket.clone(), "x")
            .map_err(|e| SettingsError::Invalid(format!("storage.bucket: {e}")))?;
        if self.eventbus.concurrency_cap == Some(0) {
            return Err(SettingsError::Invalid("eventbus.concurrency_cap must be positive".into()));
        }
        if self.client.poll_interval_ms == 0 {
            return Err(SettingsError::Invalid("client.poll_interval_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn build_store(&self) -> Result<Arc<dyn ObjectStore>, SettingsError> {
        Ok(match self.storage.backend {
            StorageBackend::Memory => Arc::new(MemoryStore::new()),
            StorageBackend::Local => {
                let root = self.storage.root.clone().expect("validated");
                std::fs::create_dir_all(&root).map_err(|source| SettingsError::Io {
                    path: root.clone(),
                    source,
                })?;
                Arc::new(LocalStore::new(root))
            }
            StorageBackend::S3 => {
                let cfg = self.storage.s3.clone().expect("validated");
                Arc::new(S3Store::new(cfg).map_err(|e| SettingsError::Invalid(e.to_string()))?)
            }
        })
    }

    pub fn build_metastore(&self) -> Result<MetaStore, SettingsError> {
        Ok(match self.metastore.backend {
            MetastoreBackend::Memory => MetaStore::new(Arc::new(MemoryKv::new())),
            MetastoreBackend::Redis => MetaStore::new(Arc::new(
                RedisKv::new(
                    &self.metastore.host,
                    self.metastore.port,
                    Duration::from_millis(self.metastore.timeout_ms),
                )
                .map_err(|e| SettingsError::Invalid(e.to_string()))?,
            )),
        })
    }

    pub fn spawn_options(&self) -> SpawnOptions {
        SpawnOptions {
            cold_start_delay_ms: self.eventbus.cold_start_delay_ms,
            concurrency_cap: self.eventbus.concurrency_cap,
        }
    }

    pub fn coordinator_addr(&self) -> Result<SocketAddr, SettingsError> {
        (self.coordinator.host.as_str(), self.coordinator.port)
            .to_socket_addrs()
            .map_err(|e| SettingsError::Invalid(format!("coordinator address: {e}")))?
            .next()
            .ok_or_else(|| SettingsError::Invalid("coordinator host did not resolve".into()))
    }

    pub fn coordinator_url(&self) -> String {
        format!("http://{}:{}", self.coordinator.host, self.coordinator.port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_document_parses() {
        let s = Settings::from_yaml(
            "storage:\n  backend: s3\n  bucket: b1\n  s3:\n    endpoint: http://127.0.0.1:9000\n    access_key: k\n    secret_key: s\n\
             metastore:\n  backend: redis\n  host: kv\n  port: 7000\n\
             coordinator:\n  host: 0.0.0.0\n  port: 9090\n\
             eventbus:\n  cold_start_delay_ms: 500\n  concurrency_cap: 4\n\
             client:\n  poll_interval_ms: 100\n",
        )
        .unwrap();
        assert_eq!(s.storage.s3.as_ref().unwrap().region, "us-east-1");
        assert_eq!(s.metastore.port, 7000);
        assert_eq!(s.spawn_options().cold_start_delay_ms, 500);
        assert_eq!(s.client.deadline_ms, 600_000);
        assert_eq!(s.coordinator_url(), "http://0.0.0.0:9090");
    }

    #[test]
    fn defaults_and_rejections() {
        let s = Settings::from_yaml("storage: {backend: memory}\nmetastore: {backend: memory}\n").unwrap();
        assert_eq!(s.client.poll_interval_ms, 500);
        assert_eq!(s.coordinator.port, 8080);
        assert_eq!(s.storage.bucket, "data");
        assert!(matches!(
            Settings::from_yaml("storage: {backend: local}\nmetastore: {backend: memory}\n"),
            Err(SettingsError::Invalid(_))
        ));
        assert!(matches!(
            Settings::from_yaml("storage: {backend: memory, colour: red}\nmetastore: {backend: memory}\n"),
            Err(SettingsError::Malformed(_))
        ));
    }
}
