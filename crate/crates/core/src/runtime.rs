//! Wires storage, metastore, event bus, coordinator and worker spawners into
//! one running deployment.

use std::fmt;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::coordinator::{serve_with, CoordError, Coordinator, ServerHandle};
use crate::eventbus::{spawn_on_trigger, EventBus, EventType, InProcessBus, SpawnOptions, Subscription, TriggerEvent};
use crate::metastore::{JobState, MetaError, MetaStore};
use crate::settings::{Settings, SettingsError};
use crate::storage::ObjectStore;
use crate::udf::Catalog;
use crate::worker::{report_spawn_failure, run_event, CompletionNotice, HttpNotifier, Notifier, NotifyError, WorkerContext};

/// Hands notices straight to a coordinator in the same process.
#[derive(Debug, Clone)]
pub struct DirectNotifier {
    coordinator: Arc<Coordinator>,
}

impl DirectNotifier {
    pub fn new(coordinator: Arc<Coordinator>) -> Self {
        DirectNotifier { coordinator }
    }
}

impl Notifier for DirectNotifier {
    fn notify(&self, _callback: &str, notice: &CompletionNotice) -> Result<(), NotifyError> {
        self.coordinator
            .on_worker_done(notice)
            .map(drop)
            .map_err(|e| NotifyError::Other(e.to_string()))
    }
}

pub type BusWrapper = Box<dyn FnOnce(Arc<dyn EventBus>) -> Arc<dyn EventBus>>;
pub type NotifierWrapper = Box<dyn FnOnce(Arc<dyn Notifier>) -> Arc<dyn Notifier>>;
/// Runs inside each worker instance before its task.
pub type TaskHook = Arc<dyn Fn(&TriggerEvent) + Send + Sync>;

pub struct DeploymentBuilder {
    store: Arc<dyn ObjectStore>,
    meta: MetaStore,
    catalog: Arc<Catalog>,
    bucket: String,
    spawn: SpawnOptions,
    http: Option<SocketAddr>,
    wrap_bus: Option<BusWrapper>,
    wrap_notifier: Option<NotifierWrapper>,
    hook: Option<TaskHook>,
}

impl DeploymentBuilder {
    pub fn new(store: Arc<dyn ObjectStore>, meta: MetaStore, bucket: impl Into<String>) -> Self {
        DeploymentBuilder {
            store,
            meta,
            catalog: Arc::new(Catalog::builtin()),
            bucket: bucket.into(),
            spawn: SpawnOptions::default(),
            http: None,
            wrap_bus: None,
            wrap_notifier: None,
            hook: None,
        }
    }

    pub fn catalog(mut self, catalog: Catalog) -> Self {
        self.catalog = Arc::new(catalog);
        self
    }

    pub fn spawn_options(mut self, spawn: SpawnOptions) -> Self {
        self.spawn = spawn;
        self
    }

    /// Serves the coordinator over HTTP at `addr`; workers then report by
    /// posting to it. Without this, workers call the coordinator directly.
    pub fn http(mut self, addr: SocketAddr) -> Self {
        self.http = Some(addr);
        self
    }

    /// Interposes on everything the coordinator publishes.
    pub fn wrap_bus(mut self, f: impl FnOnce(Arc<dyn EventBus>) -> Arc<dyn EventBus> + 'static) -> Self {
        self.wrap_bus = Some(Box::new(f));
        self
    }

    /// Interposes on every notice a worker sends.
    pub fn wrap_notifier(mut self, f: impl FnOnce(Arc<dyn Notifier>) -> Arc<dyn Notifier> + 'static) -> Self {
        self.wrap_notifier = Some(Box::new(f));
        self
    }

    pub fn task_hook(mut self, hook: TaskHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn start(self) -> Result<Deployment, std::io::Error> {
        let bus = InProcessBus::with_job_topics();
        let raw: Arc<dyn EventBus> = Arc::new(bus.clone());
        let publish_bus = match self.wrap_bus {
            Some(f) => f(raw),
            None => raw,
        };
        let (meta, catalog) = (self.meta.clone(), self.catalog.clone());
        let make = {
            let publish_bus = publish_bus.clone();
            move |base: String| Arc::new(Coordinator::new(meta.clone(), publish_bus.clone(), catalog.clone(), base))
        };
        let (coordinator, server, base_notifier): (Arc<Coordinator>, Option<ServerHandle>, Arc<dyn Notifier>) =
            match self.http {
                Some(addr) => {
                    let slot = Arc::new(Mutex::new(None));
                    let s2 = slot.clone();
                    let make2 = make.clone();
                    let server = serve_with(addr, move |local| {
                        let c = make2(format!("http://{local}"));
                        *s2.lock().unwrap() = Some(c.clone());
                        c
                    })?;
                    let c = slot.lock().unwrap().take().expect("coordinator built");
                    (c, Some(server), Arc::new(HttpNotifier::default()))
                }
                None => {
                    let c = make("inproc://coordinator".into());
                    let n = Arc::new(DirectNotifier::new(c.clone()));
                    (c, None, n)
                }
            };
        let notifier = match self.wrap_notifier {
            Some(f) => f(base_notifier),
            None => base_notifier,
        };
        let ctx = WorkerContext {
            store: self.store.clone(),
            meta: self.meta.clone(),
            catalog: self.catalog.clone(),
            notifier,
            bucket: self.bucket.clone(),
        };
        let subscriptions = EventType::ALL
            .iter()
            .map(|kind| {
                let (c1, c2, hook) = (ctx.clone(), ctx.clone(), self.hook.clone());
                spawn_on_trigger(
                    &bus,
                    kind.topic(),
                    self.spawn,
                    Arc::new(move |ev: TriggerEvent| {
                        if let Some(h) = &hook {
                            h(&ev);
                        }
                        run_event(&c1, &ev);
                    }),
                    Arc::new(move |ev: &TriggerEvent, msg: &str| report_spawn_failure(&c2, ev, msg)),
                )
            })
            .collect();
        Ok(Deployment {
            store: self.store,
            meta: self.meta,
            catalog: self.catalog,
            bucket: self.bucket,
            bus,
            publish_bus,
            coordinator: Mutex::new(coordinator),
            make: Box::new(make),
            server: Mutex::new(server),
            http: self.http.is_some(),
            subscriptions: Mutex::new(subscriptions),
        })
    }
}

/// A running system: coordinator plus one spawner per worker kind.
pub struct Deployment {
    store: Arc<dyn ObjectStore>,
    meta: MetaStore,
    catalog: Arc<Catalog>,
    bucket: String,
    bus: InProcessBus,
    publish_bus: Arc<dyn EventBus>,
    coordinator: Mutex<Arc<Coordinator>>,
    make: Box<dyn Fn(String) -> Arc<Coordinator> + Send + Sync>,
    server: Mutex<Option<ServerHandle>>,
    http: bool,
    subscriptions: Mutex<Vec<Subscription>>,
}

impl fmt::Debug for Deployment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deployment")
            .field("store", &self.store)
            .field("bucket", &self.bucket)
            .field("server", &self.coordinator_addr())
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DeploymentError {
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error("cannot start coordinator: {0}")]
    Io(#[from] std::io::Error),
}

impl Deployment {
    pub fn builder(store: Arc<dyn ObjectStore>, meta: MetaStore, bucket: impl Into<String>) -> DeploymentBuilder {
        DeploymentBuilder::new(store, meta, bucket)
    }

    /// Builds backends from `settings`. With `serve_http`, the coordinator
    /// listens on the configured address.
    pub fn from_settings(settings: &Settings, catalog: Catalog, serve_http: bool) -> Result<Deployment, DeploymentError> {
        let mut b = DeploymentBuilder::new(settings.build_store()?, settings.build_metastore()?, settings.storage.bucket.clone())
            .catalog(catalog)
            .spawn_options(settings.spawn_options());
        if serve_http {
            b = b.http(settings.coordinator_addr()?);
        }
        Ok(b.start()?)
    }

    pub fn store(&self) -> &Arc<dyn ObjectStore> {
        &self.store
    }

    pub fn metastore(&self) -> &MetaStore {
        &self.meta
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn bucket(&self) -> &str {
        &self.bucket
    }

    pub fn bus(&self) -> &InProcessBus {
        &self.bus
    }

    pub fn coordinator(&self) -> Arc<Coordinator> {
        self.coordinator.lock().unwrap().clone()
    }

    /// Address of the HTTP coordinator while it is running.
    pub fn coordinator_addr(&self) -> Option<SocketAddr> {
        self.server.lock().unwrap().as_ref().map(ServerHandle::addr)
    }

    pub fn submit(&self, cfg: crate::config::JobConfig) -> Result<String, CoordError> {
        self.coordinator().submit_job(cfg)
    }

    /// Stops the HTTP coordinator. Workers keep running; their notices
    /// fail until it is started again.
    pub fn stop_coordinator(&self) {
        if let Some(s) = self.server.lock().unwrap().take() {
            s.stop();
        }
    }

    /// Starts a fresh coordinator instance on `addr`, typically the address
    /// of the one that was stopped.
    pub fn start_coordinator(&self, addr: SocketAddr) -> std::io::Result<()> {
        assert!(self.http, "only an HTTP coordinator can be restarted");
        let slot = Arc::new(Mutex::new(None));
        let s2 = slot.clone();
        let server = serve_with(addr, |local| {
            let c = (self.make)(format!("http://{local}"));
            *s2.lock().unwrap() = Some(c.clone());
            c
        })?;
        *self.coordinator.lock().unwrap() = slot.lock().unwrap().take().expect("coordinator built");
        *self.server.lock().unwrap() = Some(server);
        Ok(())
    }

    pub fn publish_bus(&self) -> &Arc<dyn EventBus> {
        &self.publish_bus
    }

    /// Polls until the job is COMPLETED or FAILED, or `timeout` passes.
    pub fn wait_for_terminal(&self, job_id: &str, timeout: Duration) -> Result<JobState, MetaError> {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.meta.job_state(job_id)?;
            if s.phase.is_terminal() || Instant::now() >= deadline {
                return Ok(s);
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Waits until no events are queued and no worker is running.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let subs = self.subscriptions.lock().unwrap();
        // Workers publish follow-up events, so require a quiet pass over
        // every topic.
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if subs.iter().all(|s| s.wait_idle(Duration::ZERO)) {
                return true;
            }
            if remaining.is_zero() {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Live worker instances across all kinds.
    pub fn live_workers(&self) -> usize {
        self.subscriptions.lock().unwrap().iter().map(Subscription::live_instances).sum()
    }

    /// Stops spawners and the server.
    pub fn shutdown(&self) {
        for s in self.subscriptions.lock().unwrap().drain(..) {
            s.stop();
        }
        self.stop_coordinator();
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.shutdown();
    }
}
