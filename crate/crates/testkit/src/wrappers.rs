//! Interposers on the event bus and the completion channel.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spillway_core::eventbus::{BusError, EventBus, EventType, TriggerEvent};
use spillway_core::worker::{CompletionNotice, Notifier, NotifyError};

/// Logs every event the coordinator publishes, then forwards it.
pub struct RecordingBus {
    inner: Arc<dyn EventBus>,
    log: Mutex<Vec<TriggerEvent>>,
}

impl RecordingBus {
    pub fn new(inner: Arc<dyn EventBus>) -> Arc<Self> {
        Arc::new(RecordingBus {
            inner,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn events(&self) -> Vec<TriggerEvent> {
        self.log.lock().unwrap().clone()
    }

    pub fn events_for(&self, job_id: &str, kind: EventType) -> Vec<TriggerEvent> {
        self.events()
            .into_iter()
            .filter(|e| e.job_id == job_id && e.event_type == kind)
            .collect()
    }
}

impl EventBus for RecordingBus {
    fn publish(&self, topic: &str, event: TriggerEvent) -> Result<(), BusError> {
        self.log.lock().unwrap().push(event.clone());
        self.inner.publish(topic, event)
    }
}

/// Redelivers a seeded fraction of events a second time.
pub struct DuplicatingBus {
    inner: Arc<dyn EventBus>,
    rate: f64,
    rng: Mutex<ChaCha8Rng>,
    duplicates: AtomicUsize,
}

impl DuplicatingBus {
    pub fn new(inner: Arc<dyn EventBus>, rate: f64, seed: u64) -> Arc<Self> {
        Arc::new(DuplicatingBus {
            inner,
            rate,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            duplicates: AtomicUsize::new(0),
        })
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates.load(Ordering::SeqCst)
    }
}

impl EventBus for DuplicatingBus {
    fn publish(&self, topic: &str, event: TriggerEvent) -> Result<(), BusError> {
        let twice = self.rng.lock().unwrap().random_bool(self.rate);
        self.inner.publish(topic, event.clone())?;
        if twice {
            self.duplicates.fetch_add(1, Ordering::SeqCst);
            self.inner.publish(topic, event)?;
        }
        Ok(())
    }
}

/// Sends a seeded fraction of notices twice.
pub struct DuplicatingNotifier {
    inner: Arc<dyn Notifier>,
    rate: f64,
    rng: Mutex<ChaCha8Rng>,
    duplicates: AtomicUsize,
}

impl DuplicatingNotifier {
    pub fn new(inner: Arc<dyn Notifier>, rate: f64, seed: u64) -> Arc<Self> {
        Arc::new(DuplicatingNotifier {
            inner,
            rate,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            duplicates: AtomicUsize::new(0),
        })
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates.load(Ordering::SeqCst)
    }
}

impl Notifier for DuplicatingNotifier {
    fn notify(&self, callback: &str, notice: &CompletionNotice) -> Result<(), NotifyError> {
        let twice = self.rng.lock().unwrap().random_bool(self.rate);
        self.inner.notify(callback, notice)?;
        if twice {
            self.duplicates.fetch_add(1, Ordering::SeqCst);
            self.inner.notify(callback, notice)?;
        }
        Ok(())
    }
}
