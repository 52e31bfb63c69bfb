//! Topic-based trigger transport and the per-event worker spawner.
//!
//! [`InProcessBus`] keeps one FIFO queue per registered topic. Queues live on
//! the bus, not on subscribers, so stopping a [`Subscription`] leaves any
//! undelivered events in place for the next subscriber. A subscription runs
//! one fresh worker thread per delivered event.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOPIC_SPLIT: &str = "mr.split";
pub const TOPIC_MAP: &str = "mr.map";
pub const TOPIC_REDUCE: &str = "mr.reduce";
pub const TOPIC_FINALIZE: &str = "mr.finalize";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("event bus unavailable")]
    BusUnavailable,
    #[error("no topic `{0}` is registered")]
    UnknownTopic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventType {
    Split,
    Map,
    Reduce,
    Finalize,
}

impl EventType {
    pub const ALL: [EventType; 4] = [EventType::Split, EventType::Map, EventType::Reduce, EventType::Finalize];

    pub fn topic(self) -> &'static str {
        match self {
            EventType::Split => TOPIC_SPLIT,
            EventType::Map => TOPIC_MAP,
            EventType::Reduce => TOPIC_REDUCE,
            EventType::Finalize => TOPIC_FINALIZE,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventType::Split => "SPLIT",
            EventType::Map => "MAP",
            EventType::Reduce => "REDUCE",
            EventType::Finalize => "FINALIZE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub event_id: String,
    pub event_type: EventType,
    pub job_id: String,
    pub worker_index: u32,
    pub coordinator_callback: String,
    pub emitted_at: DateTime<Utc>,
}

impl TriggerEvent {
    /// `event_id` is derived from the job, kind and index, so it is unique
    /// per job and a redelivered copy carries the same id.
    pub fn new(event_type: EventType, job_id: &str, worker_index: u32, callback: &str) -> Self {
        TriggerEvent {
            event_id: format!("{job_id}-{}-{worker_index}", event_type.topic()),
            event_type,
            job_id: job_id.to_string(),
            worker_index,
            coordinator_callback: callback.to_string(),
            emitted_at: Utc::now(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub trait EventBus: Send + Sync {
    fn publish(&self, topic: &str, event: TriggerEvent) -> Result<(), BusError>;
}

impl<B: EventBus + ?Sized> EventBus for Arc<B> {
    fn publish(&self, topic: &str, event: TriggerEvent) -> Result<(), BusError> {
        (**self).publish(topic, event)
    }
}

#[derive(Default)]
struct Queue {
    items: Mutex<VecDeque<TriggerEvent>>,
    ready: Condvar,
}

#[derive(Default)]
struct BusInner {
    topics: Mutex<HashMap<String, Arc<Queue>>>,
    down: AtomicBool,
}

/// In-process broker with one durable queue per topic.
#[derive(Clone, Default)]
pub struct InProcessBus {
    inner: Arc<BusInner>,
}

impl fmt::Debug for InProcessBus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let topics = self.inner.topics.lock().unwrap();
        f.debug_struct("InProcessBus")
            .field("topics", &topics.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl InProcessBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a bus with the four job topics registered.
    pub fn with_job_topics() -> Self {
        let bus = Self::new();
        for t in EventType::ALL {
            bus.register_topic(t.topic());
        }
        bus
    }

    pub fn register_topic(&self, topic: &str) {
        self.inner
            .topics
            .lock()
            .unwrap()
            .entry(topic.to_string())
            .or_default();
    }

    pub fn set_available(&self, available: bool) {
        self.inner.down.store(!available, Ordering::SeqCst);
    }

    /// Events enqueued on `topic` and not yet taken by a subscriber.
    pub fn pending(&self, topic: &str) -> usize {
        self.queue(topic).map_or(0, |q| q.items.lock().unwrap().len())
    }

    fn queue(&self, topic: &str) -> Option<Arc<Queue>> {
        self.inner.topics.lock().unwrap().get(topic).cloned()
    }
}

impl EventBus for InProcessBus {
    fn publish(&self, topic: &str, event: TriggerEvent) -> Result<(), BusError> {
        if self.inner.down.load(Ordering::SeqCst) {
            return Err(BusError::BusUnavailable);
        }
        let q = self
            .queue(topic)
            .ok_or_else(|| BusError::UnknownTopic(topic.to_string()))?;
        q.items.lock().unwrap().push_back(event);
        q.ready.notify_one();
        Ok(())
    }
}

/// Spawner settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpawnOptions {
    /// Delay before each instance starts its work.
    pub cold_start_delay_ms: u64,
    /// Maximum simultaneously live instances; `None` is unbounded.
    pub concurrency_cap: Option<usize>,
}

/// Runs one event to completion inside a fresh worker instance.
pub type WorkerFn = dyn Fn(TriggerEvent) + Send + Sync;
/// Called when an instance could not be started or crashed.
pub type SpawnFailureFn = dyn Fn(&TriggerEvent, &str) + Send + Sync;

#[derive(Default)]
struct Live {
    count: Mutex<usize>,
    changed: Condvar,
    started: AtomicUsize,
}

/// A topic subscription that spawns one worker instance per event.
pub struct Subscription {
    topic: String,
    stop: Arc<AtomicBool>,
    queue: Arc<Queue>,
    live: Arc<Live>,
    dispatcher: Option<JoinHandle<()>>,
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscription")
            .field("topic", &self.topic)
            .field("live", &self.live_instances())
            .finish()
    }
}

/// Subscribes `worker` to `topic`, registering the topic if needed.
pub fn spawn_on_trigger(
    bus: &InProcessBus,
    topic: &str,
    options: SpawnOptions,
    worker: Arc<WorkerFn>,
    on_failure: Arc<SpawnFailureFn>,
) -> Subscription {
    bus.register_topic(topic);
    let queue = bus.queue(topic).expect("topic just registered");
    let stop = Arc::new(AtomicBool::new(false));
    let live = Arc::new(Live::default());
    let dispatcher = {
        let (queue, stop, live) = (queue.clone(), stop.clone(), live.clone());
        let topic = topic.to_string();
        thread::Builder::new()
            .name(format!("spawner-{topic}"))
            .spawn(move || dispatch(queue, stop, live, options, worker, on_failure))
            .expect("spawn dispatcher thread")
    };
    Subscription {
        topic: topic.to_string(),
        stop,
        queue,
        live,
        dispatcher: Some(dispatcher),
    }
}

fn dispatch(
    queue: Arc<Queue>,
    stop: Arc<AtomicBool>,
    live: Arc<Live>,
    options: SpawnOptions,
    worker: Arc<WorkerFn>,
    on_failure: Arc<SpawnFailureFn>,
) {
    loop {
        // Only this thread adds instances, so a free slot seen here is
        // still free once an event has been taken.
        {
            let mut n = live.count.lock().unwrap();
            while options.concurrency_cap.is_some_and(|cap| *n >= cap) {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                n = live.changed.wait_timeout(n, Duration::from_millis(50)).unwrap().0;
            }
        }
        let event = {
            let mut items = queue.items.lock().unwrap();
            loop {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(e) = items.pop_front() {
                    *live.count.lock().unwrap() += 1;
                    break e;
                }
                items = queue.ready.wait_timeout(items, Duration::from_millis(50)).unwrap().0;
            }
        };
        live.started.fetch_add(1, Ordering::SeqCst);
        let (run_worker, report, live2) = (worker.clone(), on_failure.clone(), live.clone());
        let name = format!("{}-{}", event.event_type.topic(), event.worker_index);
        let ev = event.clone();
        let spawned = thread::Builder::new().name(name).spawn(move || {
            if options.cold_start_delay_ms > 0 {
                thread::sleep(Duration::from_millis(options.cold_start_delay_ms));
            }
            let run = panic::catch_unwind(AssertUnwindSafe(|| run_worker(ev.clone())));
            if let Err(p) = run {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "worker panicked".into());
                report(&ev, &msg);
            }
            release(&live2);
        });
        if let Err(e) = spawned {
            release(&live);
            on_failure(&event, &format!("could not start worker instance: {e}"));
        }
    }
}

fn release(live: &Live) {
    *live.count.lock().unwrap() -= 1;
    live.changed.notify_all();
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    /// Worker instances currently alive.
    pub fn live_instances(&self) -> usize {
        *self.live.count.lock().unwrap()
    }

    /// Instances started since subscribing.
    pub fn instances_started(&self) -> usize {
        self.live.started.load(Ordering::SeqCst)
    }

    /// Blocks until the topic queue is empty and no instance is running.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let empty = self.queue.items.lock().unwrap().is_empty();
            if empty && self.live_instances() == 0 {
                return true;
            }
            if std::time::Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stops taking new events and waits for running instances to finish.
    /// Events still queued stay on the bus.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.queue.ready.notify_all();
        if let Some(h) = self.dispatcher.take() {
            let _ = h.join();
        }
        let mut n = self.live.count.lock().unwrap();
        while *n > 0 {
            n = self.live.changed.wait(n).unwrap();
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn ev(kind: EventType, i: u32) -> TriggerEvent {
        TriggerEvent::new(kind, "j", i, "http://127.0.0.1:1/jobs/j/notify")
    }

    fn no_failures() -> Arc<SpawnFailureFn> {
        Arc::new(|e: &TriggerEvent, m: &str| panic!("unexpected failure for {}: {m}", e.event_id))
    }

    #[test]
    fn unknown_topic_and_outage() {
        let bus = InProcessBus::new();
        assert_eq!(
            bus.publish("mr.nope", ev(EventType::Map, 0)),
            Err(BusError::UnknownTopic("mr.nope".into()))
        );
        bus.register_topic(TOPIC_MAP);
        bus.set_available(false);
        assert_eq!(bus.publish(TOPIC_MAP, ev(EventType::Map, 0)), Err(BusError::BusUnavailable));
    }

    #[test]
    fn envelope_is_flat_json_with_verbatim_fields() {
        let v: serde_json::Value = serde_json::from_str(&ev(EventType::Reduce, 1).to_json()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["coordinator_callback", "emitted_at", "event_id", "event_type", "job_id", "worker_index"]
        );
        assert_eq!(obj["event_type"], "REDUCE");
        assert!(obj.values().all(|v| !v.is_object() && !v.is_array()));
    }

    #[test]
    fn each_event_gets_its_own_concurrent_instance() {
        let bus = InProcessBus::with_job_topics();
        let peak = Arc::new(Mutex::new((0usize, 0usize)));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (p, s) = (peak.clone(), seen.clone());
        let sub = spawn_on_trigger(
            &bus,
            TOPIC_MAP,
            SpawnOptions::default(),
            Arc::new(move |e: TriggerEvent| {
                {
                    let mut g = p.lock().unwrap();
                    g.0 += 1;
                    g.1 = g.1.max(g.0);
                }
                thread::sleep(Duration::from_millis(100));
                s.lock().unwrap().push((e.worker_index, thread::current().id()));
                p.lock().unwrap().0 -= 1;
            }),
            no_failures(),
        );
        assert_eq!(sub.live_instances(), 0);
        for i in 0..4 {
            bus.publish(TOPIC_MAP, ev(EventType::Map, i)).unwrap();
        }
        assert!(sub.wait_idle(Duration::from_secs(5)));
        let seen = seen.lock().unwrap();
        let mut idx: Vec<_> = seen.iter().map(|s| s.0).collect();
        idx.sort();
        assert_eq!(idx, [0, 1, 2, 3]);
        let threads: std::collections::HashSet<_> = seen.iter().map(|s| s.1).collect();
        assert_eq!(threads.len(), 4);
        assert_eq!(peak.lock().unwrap().1, 4);
        assert_eq!(sub.live_instances(), 0);
    }

    #[test]
    fn concurrency_cap_bounds_live_instances() {
        let bus = InProcessBus::with_job_topics();
        let peak = Arc::new(Mutex::new((0usize, 0usize)));
        let p = peak.clone();
        let sub = spawn_on_trigger(
            &bus,
            TOPIC_REDUCE,
            SpawnOptions {
                cold_start_delay_ms: 0,
                concurrency_cap: Some(2),
            },
            Arc::new(move |_| {
                {
                    let mut g = p.lock().unwrap();
                    g.0 += 1;
                    g.1 = g.1.max(g.0);
                }
                thread::sleep(Duration::from_millis(30));
                p.lock().unwrap().0 -= 1;
            }),
            no_failures(),
        );
        for i in 0..6 {
            bus.publish(TOPIC_REDUCE, ev(EventType::Reduce, i)).unwrap();
        }
        assert!(sub.wait_idle(Duration::from_secs(5)));
        assert_eq!(peak.lock().unwrap().1, 2);
        assert_eq!(sub.instances_started(), 6);
    }

    #[test]
    fn stopped_spawner_leaves_events_queued() {
        let bus = InProcessBus::with_job_topics();
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let worker: Arc<WorkerFn> = Arc::new(move |_| {
            c.fetch_add(1, Ordering::SeqCst);
        });
        let sub = spawn_on_trigger(&bus, TOPIC_SPLIT, SpawnOptions::default(), worker.clone(), no_failures());
        sub.stop();
        for i in 0..3 {
            bus.publish(TOPIC_SPLIT, ev(EventType::Split, i)).unwrap();
        }
        thread::sleep(Duration::from_millis(100));
        assert_eq!(count.load(Ordering::SeqCst), 0);
        assert_eq!(bus.pending(TOPIC_SPLIT), 3);
        let sub = spawn_on_trigger(&bus, TOPIC_SPLIT, SpawnOptions::default(), worker, no_failures());
        assert!(sub.wait_idle(Duration::from_secs(5)));
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn cold_start_delay_applies_per_instance() {
        let bus = InProcessBus::with_job_topics();
        let sub = spawn_on_trigger(
            &bus,
            TOPIC_FINALIZE,
            SpawnOptions {
                cold_start_delay_ms: 150,
                concurrency_cap: None,
            },
            Arc::new(|_| {}),
            no_failures(),
        );
        let t = Instant::now();
        bus.publish(TOPIC_FINALIZE, ev(EventType::Finalize, 0)).unwrap();
        assert!(sub.wait_idle(Duration::from_secs(5)));
        assert!(t.elapsed() >= Duration::from_millis(150));
    }

    #[test]
    fn crashed_instance_is_reported() {
        let bus = InProcessBus::with_job_topics();
        let failures = Arc::new(Mutex::new(Vec::new()));
        let f = failures.clone();
        let sub = spawn_on_trigger(
            &bus,
            TOPIC_MAP,
            SpawnOptions::default(),
            Arc::new(|_| panic!("boom")),
            Arc::new(move |e: &TriggerEvent, m: &str| f.lock().unwrap().push((e.worker_index, m.to_string()))),
        );
        bus.publish(TOPIC_MAP, ev(EventType::Map, 3)).unwrap();
        assert!(sub.wait_idle(Duration::from_secs(5)));
        assert_eq!(*failures.lock().unwrap(), [(3, "boom".to_string())]);
    }
}
