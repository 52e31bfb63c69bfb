//! Event-driven MapReduce on object storage.
//!
//! A job moves through split, map, reduce and finalize phases. The
//! [`coordinator`] records progress in the [`metastore`] and publishes one
//! trigger event per worker on the [`eventbus`]; each event starts a fresh
//! worker that reads and writes the [`storage`] layer and reports back.

pub mod config;
pub mod coordinator;
pub mod eventbus;
pub mod finalizer;
pub mod mapper;
pub mod merge;
pub mod metastore;
pub mod record;
pub mod reducer;
pub mod runtime;
pub mod settings;
pub mod splitter;
pub mod storage;
pub mod udf;
pub mod worker;
